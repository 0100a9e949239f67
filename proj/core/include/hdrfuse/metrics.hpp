#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hdrfuse/radiometry.hpp"
#include "hdrfuse/stack_io.hpp"

namespace hdrfuse {

/// Value written to tables when the error is exactly zero.
inline constexpr double kPsnrCap = 99.99;

/// 10 log10(peak^2 / MSE); +infinity when the images are identical.
double psnr(const Tensor& a, const Tensor& b, double peak = 1.0);
/// PSNR over pixels where the (1,H,W) `mask` is at least 0.5, all channels.
double psnr_masked(const Tensor& a, const Tensor& b, const Tensor& mask, double peak = 1.0);
/// Clamps an infinite or oversized PSNR to kPsnrCap.
double table_psnr(double db);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Normalised 1-D Gaussian taps.
std::vector<double> gaussian_taps(int size, double sigma);

/// Mean SSIM over all valid 11x11 Gaussian windows and channels.
double ssim(const Tensor& a, const Tensor& b, double peak = 1.0);

/// Intersection over union of masks binarised at 0.5. Two empty masks give 1.
double iou(const Tensor& a, const Tensor& b);

struct EvalRow {
  std::string id;
  double psnr_l = 0;
  double psnr_t_mu = 0;
  double psnr_t_reinhard = 0;
  double ssim_l = 0;
  double ssim_t_mu = 0;
  std::optional<double> hdr_vdp2;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  /// Arithmetic mean of every column, table-capped PSNRs. HDR-VDP-2 is
  /// averaged over the rows that carry it.
  EvalRow aggregate() const;

  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
};

/// Fixed CSV column order.
std::vector<std::string> eval_columns();

struct EvalOptions {
  double mu = kDefaultMu;
  /// Optional "id,score" CSV from an external HDR-VDP-2 run.
  std::optional<std::filesystem::path> hdr_vdp2_scores;
};

/// Scores a prediction against ground truth. Linear images are divided by the
/// ground-truth peak; tonemapped images use the same peak for both.
EvalRow evaluate_pair(const std::string& id, const RadianceImage& pred, const RadianceImage& gt,
                      const EvalOptions& options = {});

/// Reads `<pred_dir>/<entry id>.pfm` for every manifest entry.
EvalReport evaluate(const std::filesystem::path& pred_dir, const DatasetManifest& gt_manifest,
                    const EvalOptions& options = {});

}  // namespace hdrfuse
