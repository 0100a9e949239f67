#pragma once

#include <string>
#include <vector>

#include "hdrfuse/error.hpp"

namespace hdrfuse::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIO = 3;
inline constexpr int kExitMismatch = 4;
inline constexpr int kExitNumeric = 5;

int exit_code_for(ErrorKind kind);

/// Parses and runs one command line (without the program name).
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace hdrfuse::cli
