#include "hdrfuse/stack_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

#include "hdrfuse/error.hpp"
#include "hdrfuse/rng.hpp"

namespace hdrfuse {
namespace {

using json = nlohmann::json;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void require_exists(const fs::path& p) {
  if (!fs::exists(p)) throw Error(ErrorKind::MissingFile, p.string());
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::string relative_to(const fs::path& p, const fs::path& base) {
  if (base.empty()) return p.string();
  const fs::path rel = p.lexically_relative(base);
  if (rel.empty() || *rel.begin() == "..") return p.string();
  return rel.generic_string();
}

// Raw decode into bytes; keeps libpng's longjmp away from C++ objects with
// non-trivial destructors.
struct RawPng {
  std::vector<unsigned char> bytes;
  png_uint_32 width = 0, height = 0;
  int channels = 0, bit_depth = 0;
};

bool decode_png(std::FILE* fp, RawPng* out, char* err, std::size_t err_len) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  png_bytep* rows = nullptr;
  if (!info || setjmp(png_jmpbuf(png))) {
    std::snprintf(err, err_len, "libpng decode failure");
    png_free(png, rows);
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out->width = png_get_image_width(png, info);
  out->height = png_get_image_height(png, info);
  out->channels = png_get_channels(png, info);
  out->bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out->bytes.resize(stride * out->height);
  rows = static_cast<png_bytep*>(png_malloc(png, sizeof(png_bytep) * out->height));
  for (png_uint_32 y = 0; y < out->height; ++y) rows[y] = out->bytes.data() + y * stride;
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  png_free(png, rows);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

bool encode_png(std::FILE* fp, const unsigned char* data, png_uint_32 width, png_uint_32 height, int channels,
                int bit_depth) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, width, height, bit_depth, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
  for (png_uint_32 y = 0; y < height; ++y) png_write_row(png, data + y * stride);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

json entry_to_json(const ManifestEntry& e, const fs::path& base) {
  json j;
  j["stack_dir"] = relative_to(e.stack_dir, base);
  if (e.gt_hdr) j["gt_hdr"] = relative_to(*e.gt_hdr, base);
  if (e.gt_masks) {
    json masks = json::array();
    for (const auto& m : *e.gt_masks) masks.push_back(relative_to(m, base));
    j["gt_masks"] = masks;
  }
  j["ev_bias"] = e.ev_bias;
  if (e.reference_index) j["reference_index"] = *e.reference_index;
  return j;
}

ManifestEntry entry_from_json(const json& j, const fs::path& base) {
  static const std::vector<std::string> known{"stack_dir", "gt_hdr", "gt_masks", "ev_bias", "reference_index"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw Error(ErrorKind::BadConfig, "unknown manifest entry key '" + key + "'");
    }
  }
  ManifestEntry e;
  e.stack_dir = resolve(base, j.at("stack_dir").get<std::string>());
  if (j.contains("gt_hdr") && !j["gt_hdr"].is_null()) e.gt_hdr = resolve(base, j["gt_hdr"].get<std::string>());
  if (j.contains("gt_masks") && !j["gt_masks"].is_null()) {
    std::vector<fs::path> masks;
    for (const auto& m : j["gt_masks"]) masks.push_back(resolve(base, m.get<std::string>()));
    e.gt_masks = std::move(masks);
  }
  e.ev_bias = j.at("ev_bias").get<std::vector<int>>();
  if (j.contains("reference_index") && !j["reference_index"].is_null()) {
    e.reference_index = j["reference_index"].get<int>();
  }
  return e;
}

void check_ev(const std::vector<int>& ev) {
  for (std::size_t i = 1; i < ev.size(); ++i) {
    if (ev[i] <= ev[i - 1]) throw Error(ErrorKind::BadEV, "ev_bias must be strictly increasing");
  }
}

void write_f32(std::ostream& os, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                        static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

float read_f32(const unsigned char* b, bool little_endian) {
  std::uint32_t bits = little_endian ? (std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                                        std::uint32_t(b[3]) << 24)
                                     : (std::uint32_t(b[3]) | std::uint32_t(b[2]) << 8 | std::uint32_t(b[1]) << 16 |
                                        std::uint32_t(b[0]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace

bool MotionMask::is_hard() const {
  return std::all_of(values.data().begin(), values.data().end(), [](double v) { return v == 0.0 || v == 1.0; });
}

ExposureStack ExposureStack::create(std::vector<Tensor> images, std::vector<int> ev_bias,
                                    std::optional<int> reference_index) {
  if (images.size() < 2) throw Error(ErrorKind::BadConfig, "an exposure stack needs at least two images");
  if (ev_bias.size() != images.size()) {
    throw Error(ErrorKind::BadEV, "ev_bias has " + std::to_string(ev_bias.size()) + " entries for " +
                                      std::to_string(images.size()) + " images");
  }
  check_ev(ev_bias);
  for (const Tensor& im : images) {
    if (im.rank() != 3 || im.channels() != 3) throw Error(ErrorKind::WrongChannelCount, "stack images must be RGB");
    if (im.height() != images[0].height() || im.width() != images[0].width()) {
      throw Error(ErrorKind::ShapeMismatch, "stack images differ in size");
    }
  }
  const int k = static_cast<int>(images.size());
  const int ref = reference_index.value_or(k / 2);
  if (ref < 0 || ref >= k) throw Error(ErrorKind::BadConfig, "reference_index out of range");

  ExposureStack s;
  s.images = std::move(images);
  for (Tensor& im : s.images)
    for (double& v : im.data()) v = std::clamp(v, 0.0, 1.0);
  s.ev_bias = std::move(ev_bias);
  s.reference_index = ref;
  for (int ev : s.ev_bias) s.exposure_times.push_back(std::ldexp(1.0, ev - s.ev_bias[static_cast<std::size_t>(ref)]));
  return s;
}

int ManifestEntry::resolved_reference() const {
  return reference_index.value_or(static_cast<int>(ev_bias.size()) / 2);
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadConfig, path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  DatasetManifest m;
  try {
    const std::string split = j.value("split", "train");
    if (split == "train") {
      m.split = Split::Train;
    } else if (split == "val") {
      m.split = Split::Val;
    } else {
      throw Error(ErrorKind::BadConfig, "split must be 'train' or 'val'");
    }
    for (const auto& ej : j.at("entries")) m.entries.push_back(entry_from_json(ej, base));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadConfig, path.string() + ": " + e.what());
  }
  for (const ManifestEntry& e : m.entries) {
    require_exists(e.stack_dir);
    if (e.gt_hdr) require_exists(*e.gt_hdr);
    if (e.gt_masks) {
      for (const auto& p : *e.gt_masks) require_exists(p);
    }
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = path.parent_path().empty() ? fs::path{} : fs::absolute(path.parent_path());
  json j;
  j["split"] = manifest.split == Split::Train ? "train" : "val";
  j["entries"] = json::array();
  for (const auto& e : manifest.entries) {
    ManifestEntry abs = e;
    abs.stack_dir = fs::absolute(e.stack_dir);
    if (abs.gt_hdr) abs.gt_hdr = fs::absolute(*abs.gt_hdr);
    if (abs.gt_masks)
      for (auto& p : *abs.gt_masks) p = fs::absolute(p);
    j["entries"].push_back(entry_to_json(abs, base));
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ExposureStack load_stack(const ManifestEntry& entry) {
  require_exists(entry.stack_dir);
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(entry.stack_dir)) {
    const std::string name = de.path().filename().string();
    if (de.is_regular_file() && name.rfind("ldr_", 0) == 0 && de.path().extension() == ".png") {
      files.push_back(de.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorKind::MissingFile, "no ldr_*.png frames in " + entry.stack_dir.string());
  if (files.size() != entry.ev_bias.size()) {
    throw Error(ErrorKind::BadEV, std::to_string(entry.ev_bias.size()) + " EV values for " +
                                      std::to_string(files.size()) + " frames in " + entry.stack_dir.string());
  }
  check_ev(entry.ev_bias);
  std::vector<Tensor> images;
  for (const auto& f : files) {
    PngImage png = load_png(f);
    if (png.pixels.channels() == 1) {
      Tensor rgb = Tensor::image(3, png.pixels.height(), png.pixels.width());
      for (int c = 0; c < 3; ++c) std::copy(png.pixels.data().begin(), png.pixels.data().end(), rgb.channel(c).begin());
      png.pixels = std::move(rgb);
    }
    if (!images.empty() && (png.pixels.height() != images[0].height() || png.pixels.width() != images[0].width())) {
      throw Error(ErrorKind::ShapeMismatch, f.string() + " differs in size from the first frame");
    }
    images.push_back(std::move(png.pixels));
  }
  return ExposureStack::create(std::move(images), entry.ev_bias, entry.reference_index);
}

std::vector<MotionMask> load_gt_masks(const ManifestEntry& entry) {
  if (!entry.gt_masks) throw Error(ErrorKind::MissingFile, "entry " + entry.id() + " has no gt_masks");
  const int ref = entry.resolved_reference();
  const int k = static_cast<int>(entry.ev_bias.size());
  if (static_cast<int>(entry.gt_masks->size()) != k - 1) {
    throw Error(ErrorKind::BadConfig, "entry " + entry.id() + " needs one mask per non-reference frame");
  }
  std::vector<MotionMask> masks;
  int slot = 0;
  for (int i = 0; i < k; ++i) {
    if (i == ref) continue;
    masks.push_back(load_mask((*entry.gt_masks)[static_cast<std::size_t>(slot++)], i));
  }
  return masks;
}

void save_hdr(const RadianceImage& img, const fs::path& path) {
  const Tensor& v = img.values;
  if (v.rank() != 3 || v.channels() != 3) throw Error(ErrorKind::WrongChannelCount, "HDR images are RGB");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  out << "PF\n" << v.width() << ' ' << v.height() << "\n-1.0\n";
  for (int y = v.height() - 1; y >= 0; --y)
    for (int x = 0; x < v.width(); ++x)
      for (int c = 0; c < 3; ++c) write_f32(out, static_cast<float>(v.at(c, y, x)));
  if (!out) throw Error(ErrorKind::IOFailure, "short write to " + path.string());
}

RadianceImage load_hdr(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IOFailure, "cannot read " + path.string());
  std::string magic;
  int width = 0, height = 0;
  double scale = 0;
  if (!(in >> magic >> width >> height >> scale) || magic != "PF" || width <= 0 || height <= 0 || scale == 0.0) {
    throw Error(ErrorKind::CorruptHeader, path.string() + ": not an RGB PFM");
  }
  in.get();  // single whitespace byte ends the header
  const std::size_t n = static_cast<std::size_t>(width) * height * 3;
  std::vector<unsigned char> buf(n * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
    throw Error(ErrorKind::CorruptHeader, path.string() + ": truncated payload");
  }
  const bool le = scale < 0;
  RadianceImage img{Tensor::image(3, height, width)};
  std::size_t i = 0;
  for (int y = height - 1; y >= 0; --y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c, ++i) img.values.at(c, y, x) = read_f32(&buf[i * 4], le);
  return img;
}

void save_mask(const MotionMask& mask, const fs::path& path) {
  if (mask.values.rank() != 3 || mask.values.channels() != 1) {
    throw Error(ErrorKind::WrongChannelCount, "masks are single channel");
  }
  save_png(mask.values, path, 8);
}

MotionMask load_mask(const fs::path& path, int source_index) {
  PngImage png = load_png(path);
  if (png.pixels.channels() != 1 || png.bit_depth != 8) {
    throw Error(ErrorKind::WrongChannelCount, path.string() + ": masks must be 8-bit single channel");
  }
  return MotionMask{std::move(png.pixels), source_index};
}

PngImage load_png(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::MissingFile, path.string());
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw Error(ErrorKind::IOFailure, "cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw Error(ErrorKind::IOFailure, path.string() + ": not a PNG file");
  }
  std::rewind(fp.get());
  RawPng raw;
  char err[128] = {0};
  if (!decode_png(fp.get(), &raw, err, sizeof err)) throw Error(ErrorKind::IOFailure, path.string() + ": " + err);
  const int h = static_cast<int>(raw.height), w = static_cast<int>(raw.width), ch = raw.channels;
  PngImage out{Tensor::image(ch, h, w), raw.bit_depth};
  const double maxv = raw.bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        const std::size_t idx = (static_cast<std::size_t>(y) * w + x) * ch + c;
        const double v = raw.bit_depth == 16 ? (raw.bytes[idx * 2] << 8 | raw.bytes[idx * 2 + 1]) : raw.bytes[idx];
        out.pixels.at(c, y, x) = v / maxv;
      }
  return out;
}

void save_png(const Tensor& pixels, const fs::path& path, int bit_depth) {
  if (pixels.rank() != 3 || (pixels.channels() != 1 && pixels.channels() != 3)) {
    throw Error(ErrorKind::WrongChannelCount, "PNG output needs 1 or 3 channels");
  }
  if (bit_depth != 8 && bit_depth != 16) throw Error(ErrorKind::BadConfig, "bit depth must be 8 or 16");
  const int h = pixels.height(), w = pixels.width(), ch = pixels.channels();
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w * ch * (bit_depth / 8));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        const std::size_t idx = (static_cast<std::size_t>(y) * w + x) * ch + c;
        const auto q = static_cast<unsigned>(std::lround(std::clamp(pixels.at(c, y, x), 0.0, 1.0) * maxv));
        if (bit_depth == 16) {
          bytes[idx * 2] = static_cast<unsigned char>(q >> 8);
          bytes[idx * 2 + 1] = static_cast<unsigned char>(q & 0xff);
        } else {
          bytes[idx] = static_cast<unsigned char>(q);
        }
      }
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  if (!encode_png(fp.get(), bytes.data(), static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), ch, bit_depth)) {
    throw Error(ErrorKind::IOFailure, "PNG encode failed for " + path.string());
  }
}

Tensor quantize8(const Tensor& t) {
  Tensor q = t;
  for (double& v : q.data()) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return q;
}

// ---------------------------------------------------------------------------

namespace {

struct Patch {
  Rect rect;
  double base;
  double tint[3];
  double period_y, period_x, phase;
  double depth;
};

double patch_value(const Patch& p, int c, int y, int x) {
  const double ly = y - p.rect.y, lx = x - p.rect.x;
  const double tex = 1.0 + p.depth * std::sin(2 * M_PI * ly / p.period_y + p.phase) * std::sin(2 * M_PI * lx / p.period_x);
  return p.base * p.tint[c] * tex;
}

Patch random_patch(Rng& rng, const Rect& r, double lo, double hi) {
  Patch p;
  p.rect = r;
  p.base = std::exp(rng.uniform(std::log(lo), std::log(hi)));
  for (double& t : p.tint) t = rng.uniform(0.6, 1.0);
  p.period_y = rng.uniform(8.0, 16.0);
  p.period_x = rng.uniform(8.0, 16.0);
  p.phase = rng.uniform(0.0, 2 * M_PI);
  p.depth = rng.uniform(0.3, 0.6);
  return p;
}

Rect random_rect(Rng& rng, int height, int width, int min_h, int max_h, int min_w, int max_w) {
  Rect r;
  r.height = rng.uniform_int(min_h, max_h);
  r.width = rng.uniform_int(min_w, max_w);
  r.y = rng.uniform_int(0, height - r.height);
  r.x = rng.uniform_int(0, width - r.width);
  return r;
}

}  // namespace

SynthScene synth_scene(std::uint64_t seed, int height, int width, int frames, const std::vector<int>& ev_bias,
                       const SynthOptions& options) {
  if (height < 16 || width < 16) throw Error(ErrorKind::BadConfig, "synthetic scenes need H, W >= 16");
  if (frames < 2 || static_cast<int>(ev_bias.size()) != frames) {
    throw Error(ErrorKind::BadConfig, "K must equal len(ev_bias) and be at least 2");
  }
  for (std::size_t i = 1; i < ev_bias.size(); ++i) {
    if (ev_bias[i] <= ev_bias[i - 1]) throw Error(ErrorKind::BadConfig, "ev_bias must be strictly increasing");
  }
  if (!(options.gamma > 0)) throw Error(ErrorKind::BadConfig, "gamma must be positive");

  Rng rng(seed);
  const int ref = frames / 2;
  std::vector<double> times;
  for (int ev : ev_bias) times.push_back(std::ldexp(1.0, ev - ev_bias[static_cast<std::size_t>(ref)]));
  const double t_max = times.back();

  // Static background: log-linear gradient with per-channel tint.
  const double lo = rng.uniform(0.01, 0.03), hi = rng.uniform(2.5, 4.0);
  const double theta = rng.uniform(0.0, 2 * M_PI);
  double tint[3];
  for (double& t : tint) t = rng.uniform(0.75, 1.0);
  Tensor background = Tensor::image(3, height, width);
  const double cy = (height - 1) / 2.0, cx = (width - 1) / 2.0;
  const double extent = std::abs(std::cos(theta)) * cx + std::abs(std::sin(theta)) * cy;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double u = 0.5 + 0.5 * ((x - cx) * std::cos(theta) + (y - cy) * std::sin(theta)) / extent;
      const double r = std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
      for (int c = 0; c < 3; ++c) background.at(c, y, x) = r * tint[c];
    }

  std::vector<Patch> patches;
  for (int i = 0; i < 3; ++i) {
    patches.push_back(random_patch(rng, random_rect(rng, height, width, height / 6, height / 3, width / 6, width / 3),
                                   0.03, 6.0));
  }

  // Moving object: textured rectangle with a strong colour cast.
  const int obj_h = rng.uniform_int(height / 4, height / 3);
  const int obj_w = rng.uniform_int(width / 4, width / 3);
  int vy, vx;
  if (options.velocity) {
    std::tie(vy, vx) = *options.velocity;
  } else {
    // Per-frame displacement scales with the frame: 4..8 px at 64x64.
    const int v_lo = std::max(2, std::min(height, width) / 16), v_hi = std::max(3, std::min(height, width) / 8);
    vy = rng.uniform_int(v_lo, v_hi) * (rng.uniform() < 0.5 ? -1 : 1);
    vx = rng.uniform_int(v_lo, v_hi) * (rng.uniform() < 0.5 ? -1 : 1);
  }
  const int lo_k = -ref, hi_k = frames - 1 - ref;
  const int span_y_neg = std::min({0, lo_k * vy, hi_k * vy}), span_y_pos = std::max({0, lo_k * vy, hi_k * vy});
  const int span_x_neg = std::min({0, lo_k * vx, hi_k * vx}), span_x_pos = std::max({0, lo_k * vx, hi_k * vx});
  const int y_min = -span_y_neg, y_max = height - obj_h - span_y_pos;
  const int x_min = -span_x_neg, x_max = width - obj_w - span_x_pos;
  if (y_min > y_max || x_min > x_max) throw Error(ErrorKind::BadConfig, "object motion does not fit in the frame");
  const int ref_y = rng.uniform_int(y_min, y_max), ref_x = rng.uniform_int(x_min, x_max);
  Patch object = random_patch(rng, Rect{0, 0, obj_h, obj_w}, 0.08, 0.5);
  const double hues[3][3] = {{1.0, 0.35, 0.15}, {0.2, 1.0, 0.3}, {0.25, 0.35, 1.0}};
  const int hue = rng.uniform_int(0, 2);
  for (int c = 0; c < 3; ++c) object.tint[c] = hues[hue][c];
  // Flat, so the overlap of two object positions is static.
  object.depth = 0.0;

  std::vector<Rect> rects;
  for (int k = 0; k < frames; ++k) rects.push_back(Rect{ref_y + (k - ref) * vy, ref_x + (k - ref) * vx, obj_h, obj_w});

  if (options.occlude_saturated) {
    // Saturated at the reference exposure, well exposed in the shortest one,
    // and partly hidden there by the object.
    const Rect& hidden = rects.front();
    Rect r{std::max(0, hidden.y - obj_h / 3), std::max(0, hidden.x - obj_w / 3), 0, 0};
    r.height = std::min(height - r.y, obj_h + obj_h / 2);
    r.width = std::min(width - r.x, obj_w + obj_w / 2);
    Patch bright = random_patch(rng, r, 1.6, 3.0);
    bright.depth = 0.45;
    patches.push_back(bright);
  }

  // Exposure extremes: a black spot that stays at zero in every frame and a
  // spot that clips at the longest exposure.
  auto clear_of_object = [&] {
    Rect spot{};
    for (int attempt = 0; attempt < 64; ++attempt) {
      spot = random_rect(rng, height, width, 3, 3, 3, 3);
      const bool hit = std::any_of(rects.begin(), rects.end(), [&](const Rect& o) {
        return spot.y < o.y + o.height && o.y < spot.y + spot.height && spot.x < o.x + o.width &&
               o.x < spot.x + spot.width;
      });
      if (!hit) break;
    }
    return spot;
  };
  const Rect dark = clear_of_object();
  const Rect bright = clear_of_object();
  const double bright_level = std::max(1.5 / t_max, 1.5);

  for (const Patch& p : patches) {
    for (int y = p.rect.y; y < p.rect.y + p.rect.height; ++y)
      for (int x = p.rect.x; x < p.rect.x + p.rect.width; ++x)
        for (int c = 0; c < 3; ++c) background.at(c, y, x) = patch_value(p, c, y, x);
  }
  for (int y = bright.y; y < bright.y + bright.height; ++y)
    for (int x = bright.x; x < bright.x + bright.width; ++x)
      for (int c = 0; c < 3; ++c) background.at(c, y, x) = bright_level;
  for (int y = dark.y; y < dark.y + dark.height; ++y)
    for (int x = dark.x; x < dark.x + dark.width; ++x)
      for (int c = 0; c < 3; ++c) background.at(c, y, x) = 0.0;

  SynthScene scene;
  std::vector<Tensor> ldr;
  for (int k = 0; k < frames; ++k) {
    Tensor radiance = background;
    const Rect& r = rects[static_cast<std::size_t>(k)];
    for (int y = r.y; y < r.y + r.height; ++y)
      for (int x = r.x; x < r.x + r.width; ++x)
        for (int c = 0; c < 3; ++c) radiance.at(c, y, x) = patch_value(object, c, y - r.y, x - r.x);
    Tensor img = Tensor::image(3, height, width);
    const double t = times[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::pow(radiance[i] * t, 1.0 / options.gamma);
    ldr.push_back(quantize8(img));
    scene.radiance_frames.push_back(std::move(radiance));
  }
  scene.object_rects = rects;
  scene.gt = RadianceImage{scene.radiance_frames[static_cast<std::size_t>(ref)]};
  const Tensor& gt = scene.gt.values;
  for (int k = 0; k < frames; ++k) {
    if (k == ref) continue;
    const Tensor& rk = scene.radiance_frames[static_cast<std::size_t>(k)];
    MotionMask m{Tensor::image(1, height, width), k};
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int c = 0; c < 3; ++c) {
          const double a = rk.at(c, y, x), b = gt.at(c, y, x);
          if (std::abs(a - b) > std::numeric_limits<double>::epsilon() * std::max({1.0, std::abs(a), std::abs(b)})) {
            m.values.at(0, y, x) = 1.0;
          }
        }
    scene.masks.push_back(std::move(m));
  }
  scene.stack = ExposureStack::create(std::move(ldr), ev_bias, ref);
  return scene;
}

ManifestEntry write_scene(const SynthScene& scene, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IOFailure, "cannot create " + dir.string());
  ManifestEntry e;
  e.stack_dir = fs::absolute(dir);
  e.ev_bias = scene.stack.ev_bias;
  e.reference_index = scene.stack.reference_index;
  for (int k = 0; k < scene.stack.size(); ++k) {
    save_png(scene.stack.images[static_cast<std::size_t>(k)], dir / ("ldr_" + std::to_string(k) + ".png"));
  }
  e.gt_hdr = e.stack_dir / "gt.pfm";
  save_hdr(scene.gt, *e.gt_hdr);
  std::vector<fs::path> masks;
  for (const MotionMask& m : scene.masks) {
    masks.push_back(e.stack_dir / ("mask_" + std::to_string(m.source_index) + ".png"));
    save_mask(m, masks.back());
  }
  e.gt_masks = std::move(masks);
  json meta{{"ev_bias", e.ev_bias}, {"reference_index", *e.reference_index}};
  std::ofstream out(dir / "stack.json");
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write stack.json in " + dir.string());
  out << meta.dump(2) << '\n';
  return e;
}

ManifestEntry entry_from_stack_dir(const fs::path& dir) {
  const fs::path meta_path = dir / "stack.json";
  std::ifstream in(meta_path);
  if (!in) throw Error(ErrorKind::MissingFile, meta_path.string());
  json meta;
  try {
    in >> meta;
    ManifestEntry e;
    e.stack_dir = dir;
    e.ev_bias = meta.at("ev_bias").get<std::vector<int>>();
    if (meta.contains("reference_index")) e.reference_index = meta["reference_index"].get<int>();
    if (fs::exists(dir / "gt.pfm")) e.gt_hdr = dir / "gt.pfm";
    return e;
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::BadConfig, meta_path.string() + ": " + ex.what());
  }
}

}  // namespace hdrfuse
