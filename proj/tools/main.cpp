#include "commands.hpp"

int main(int argc, char** argv) { return hdrfuse::cli::run_cli(argc, argv); }
