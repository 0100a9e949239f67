#include "hdrfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "hdrfuse/error.hpp"

namespace hdrfuse {
namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": " + a.shape_string() + " vs " + b.shape_string());
  }
}

// Separable valid-region filtering of one channel plane.
std::vector<double> filter_plane(std::span<const double> in, int h, int w, const std::vector<double>& taps) {
  const int n = static_cast<int>(taps.size());
  const int ho = h - n + 1, wo = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo), out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += taps[static_cast<std::size_t>(i)] * in[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * wo + x] = s;
    }
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += taps[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = s;
    }
  return out;
}

std::map<std::string, double> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IOFailure, "cannot read " + path.string());
  std::map<std::string, double> scores;
  std::string line;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    try {
      scores[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    } catch (const std::exception&) {
      // header or malformed line
    }
  }
  return scores;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double peak) {
  require_same(a, b, "psnr");
  if (!(peak > 0)) throw Error(ErrorKind::BadConfig, "psnr peak must be positive");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double psnr_masked(const Tensor& a, const Tensor& b, const Tensor& mask, double peak) {
  require_same(a, b, "psnr_masked");
  if (mask.rank() != 3 || mask.channels() != 1 || mask.height() != a.height() || mask.width() != a.width()) {
    throw Error(ErrorKind::ShapeMismatch, "psnr_masked mask " + mask.shape_string());
  }
  double se = 0;
  std::size_t n = 0;
  for (int c = 0; c < a.channels(); ++c)
    for (int y = 0; y < a.height(); ++y)
      for (int x = 0; x < a.width(); ++x) {
        if (mask.at(0, y, x) < 0.5) continue;
        const double d = a.at(c, y, x) - b.at(c, y, x);
        se += d * d;
        ++n;
      }
  if (n == 0) throw Error(ErrorKind::BadConfig, "psnr_masked over an empty mask");
  const double mse = se / static_cast<double>(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double table_psnr(double db) { return std::isfinite(db) ? std::min(db, kPsnrCap) : (db > 0 ? kPsnrCap : db); }

std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> taps(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < size; ++i) s += (taps[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma)));
  for (double& t : taps) t /= s;
  return taps;
}

double ssim(const Tensor& a, const Tensor& b, double peak) {
  require_same(a, b, "ssim");
  if (a.rank() != 3 || std::min(a.height(), a.width()) < kSsimWindow) {
    throw Error(ErrorKind::ImageTooSmall, "ssim needs at least 11x11 pixels, got " + a.shape_string());
  }
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  const auto taps = gaussian_taps(kSsimWindow, kSsimSigma);
  const int h = a.height(), w = a.width();
  double total = 0;
  std::size_t count = 0;
  std::vector<double> aa(a.plane()), bb(a.plane()), ab(a.plane());
  for (int c = 0; c < a.channels(); ++c) {
    const auto pa = a.channel(c), pb = b.channel(c);
    for (std::size_t i = 0; i < pa.size(); ++i) {
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto mu_a = filter_plane(pa, h, w, taps), mu_b = filter_plane(pb, h, w, taps);
    const auto e_aa = filter_plane(aa, h, w, taps), e_bb = filter_plane(bb, h, w, taps),
               e_ab = filter_plane(ab, h, w, taps);
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
      const double va = e_aa[i] - mu_a[i] * mu_a[i];
      const double vb = e_bb[i] - mu_b[i] * mu_b[i];
      const double cov = e_ab[i] - mu_a[i] * mu_b[i];
      total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
               ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double iou(const Tensor& a, const Tensor& b) {
  require_same(a, b, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] >= 0.5, y = b[i] >= 0.5;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

EvalRow EvalReport::aggregate() const {
  EvalRow m;
  m.id = "mean";
  if (rows.empty()) return m;
  double vdp = 0;
  std::size_t vdp_n = 0;
  for (const EvalRow& r : rows) {
    m.psnr_l += table_psnr(r.psnr_l);
    m.psnr_t_mu += table_psnr(r.psnr_t_mu);
    m.psnr_t_reinhard += table_psnr(r.psnr_t_reinhard);
    m.ssim_l += r.ssim_l;
    m.ssim_t_mu += r.ssim_t_mu;
    if (r.hdr_vdp2) {
      vdp += *r.hdr_vdp2;
      ++vdp_n;
    }
  }
  const double n = static_cast<double>(rows.size());
  m.psnr_l /= n;
  m.psnr_t_mu /= n;
  m.psnr_t_reinhard /= n;
  m.ssim_l /= n;
  m.ssim_t_mu /= n;
  if (vdp_n) m.hdr_vdp2 = vdp / static_cast<double>(vdp_n);
  return m;
}

std::vector<std::string> eval_columns() {
  return {"id", "psnr_l", "psnr_t_mu", "psnr_t_reinhard", "ssim_l", "ssim_t_mu", "hdr_vdp2"};
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  const auto cols = eval_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  auto write_row = [&](const EvalRow& r) {
    out << r.id << ',' << fmt(table_psnr(r.psnr_l)) << ',' << fmt(table_psnr(r.psnr_t_mu)) << ','
        << fmt(table_psnr(r.psnr_t_reinhard)) << ',' << fmt(r.ssim_l) << ',' << fmt(r.ssim_t_mu) << ','
        << (r.hdr_vdp2 ? fmt(*r.hdr_vdp2) : "") << '\n';
  };
  for (const EvalRow& r : rows) write_row(r);
  write_row(aggregate());
}

void EvalReport::write_json(const std::filesystem::path& path) const {
  auto to_json = [](const EvalRow& r) {
    nlohmann::json j{{"id", r.id},
                     {"psnr_l", table_psnr(r.psnr_l)},
                     {"psnr_t_mu", table_psnr(r.psnr_t_mu)},
                     {"psnr_t_reinhard", table_psnr(r.psnr_t_reinhard)},
                     {"ssim_l", r.ssim_l},
                     {"ssim_t_mu", r.ssim_t_mu}};
    j["hdr_vdp2"] = r.hdr_vdp2 ? nlohmann::json(*r.hdr_vdp2) : nlohmann::json(nullptr);
    return j;
  };
  nlohmann::json j;
  j["columns"] = eval_columns();
  j["rows"] = nlohmann::json::array();
  for (const EvalRow& r : rows) j["rows"].push_back(to_json(r));
  j["aggregate"] = to_json(aggregate());
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

EvalRow evaluate_pair(const std::string& id, const RadianceImage& pred, const RadianceImage& gt,
                      const EvalOptions& options) {
  require_same(pred.values, gt.values, "evaluate");
  const double peak = gt.values.max();
  if (!(peak > 0)) throw Error(ErrorKind::BadConfig, "ground truth " + id + " is all zero");
  Tensor pl = pred.values, gl = gt.values;
  pl *= 1.0 / peak;
  gl *= 1.0 / peak;
  const Tensor pm = mu_law_tonemap(pred, options.mu, peak), gm = mu_law_tonemap(gt, options.mu, peak);
  EvalRow r;
  r.id = id;
  r.psnr_l = psnr(pl, gl);
  r.psnr_t_mu = psnr(pm, gm);
  r.psnr_t_reinhard = psnr(reinhard_tonemap(pred), reinhard_tonemap(gt));
  r.ssim_l = ssim(pl, gl);
  r.ssim_t_mu = ssim(pm, gm);
  return r;
}

EvalReport evaluate(const std::filesystem::path& pred_dir, const DatasetManifest& gt_manifest,
                    const EvalOptions& options) {
  std::map<std::string, double> vdp;
  if (options.hdr_vdp2_scores) vdp = read_scores(*options.hdr_vdp2_scores);
  EvalReport report;
  for (const ManifestEntry& e : gt_manifest.entries) {
    const auto pred_path = pred_dir / (e.id() + ".pfm");
    if (!std::filesystem::exists(pred_path)) throw Error(ErrorKind::MissingPrediction, pred_path.string());
    if (!e.gt_hdr) throw Error(ErrorKind::MissingFile, "entry " + e.id() + " has no gt_hdr");
    EvalRow row = evaluate_pair(e.id(), load_hdr(pred_path), load_hdr(*e.gt_hdr), options);
    if (auto it = vdp.find(e.id()); it != vdp.end()) row.hdr_vdp2 = it->second;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace hdrfuse
