#include "hdrfuse/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hdrfuse/error.hpp"
#include "hdrfuse/rng.hpp"

namespace hdrfuse {
namespace {

constexpr std::string_view kMagic = "HDRFUSE-CKPT 1\n";

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::pair<double, double> fans(const std::vector<int>& shape) {
  switch (shape.size()) {
    case 0: return {1, 1};
    case 1: return {double(shape[0]), double(shape[0])};
    case 2: return {double(shape[1]), double(shape[0])};
    default: {
      double receptive = 1;
      for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
      return {shape[1] * receptive, shape[0] * receptive};
    }
  }
}

void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

double glorot_limit(const std::vector<int>& shape) {
  const auto [fan_in, fan_out] = fans(shape);
  return std::sqrt(6.0 / (fan_in + fan_out));
}

Tensor glorot_init(const std::vector<int>& shape, std::uint64_t seed) {
  const double a = glorot_limit(shape);
  Rng rng(seed);
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(-a, a);
  return t;
}

ag::ParamPtr ParamStore::insert(const std::string& name, Tensor value) {
  if (by_name_.count(name)) throw Error(ErrorKind::BadConfig, "duplicate parameter name " + name);
  auto p = std::make_shared<ag::Parameter>();
  p->name = name;
  p->value = std::move(value);
  p->grad = Tensor(p->value.shape());
  unique_.push_back(p);
  by_name_.emplace(name, p);
  return p;
}

ag::ParamPtr ParamStore::weight(const std::string& name, std::vector<int> shape) {
  // Keyed by name so a tensor starts the same whatever else the model holds.
  const std::uint64_t s = splitmix(seed_ ^ splitmix(fnv1a(name)));
  return insert(name, glorot_init(shape, s));
}

ag::ParamPtr ParamStore::zeros(const std::string& name, std::vector<int> shape) {
  return insert(name, Tensor(std::move(shape)));
}

void ParamStore::alias(const std::string& alias, const ag::ParamPtr& target) {
  if (by_name_.count(alias)) throw Error(ErrorKind::BadConfig, "duplicate parameter name " + alias);
  by_name_.emplace(alias, target);
}

ag::ParamPtr ParamStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

ag::ParamPtr ParamStore::at(const std::string& name) const {
  auto p = find(name);
  if (!p) throw Error(ErrorKind::ModelMismatch, "no parameter named " + name);
  return p;
}

std::size_t ParamStore::count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& p : unique_) {
    if (p->name.rfind(prefix, 0) == 0) n += p->value.size();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : unique_) p->zero_grad();
}

void ParamStore::set_frozen(bool frozen) {
  for (auto& p : unique_) p->frozen = frozen;
}

Conv Conv::make(ParamStore& store, const std::string& name, int in, int out, int kernel, ag::ConvOptions options,
                bool with_bias) {
  Conv c;
  c.weight = store.weight(name + ".w", {out, in, kernel, kernel});
  if (with_bias) c.bias = store.zeros(name + ".b", {out});
  c.options = options;
  return c;
}

Conv Conv::same(ParamStore& store, const std::string& name, int in, int out, int kernel, int dilation,
                bool with_bias) {
  return make(store, name, in, out, kernel, ag::ConvOptions{1, dilation * (kernel - 1) / 2, dilation}, with_bias);
}

ag::Var Conv::operator()(ag::Tape& tape, const ag::Var& x) const {
  return ag::conv2d(x, tape.param(weight), bias ? tape.param(bias) : ag::Var{}, options);
}

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const ParamStore& store) {
  nlohmann::json header;
  header["kind"] = kind;
  header["dtype"] = "float64";
  header["config"] = config;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : store.unique()) {
    header["tensors"].push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}});
    offset += p->value.size() * 8;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : store.unique()) {
    for (double v : p->value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw Error(ErrorKind::IOFailure, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IOFailure, "cannot read " + path.string());
  std::string magic(kMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kMagic) throw Error(ErrorKind::CorruptHeader, path.string() + ": not a checkpoint");
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(len_bytes[i]) << (8 * i);
  if (!in || len > (1u << 26)) throw Error(ErrorKind::CorruptHeader, path.string() + ": bad header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    if (header.at("dtype") != "float64") throw Error(ErrorKind::CorruptHeader, "unsupported dtype");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, path.string() + ": " + e.what());
  }
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& t : header.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<int>>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    Tensor value(shape);
    if (offset + value.size() * 8 > payload.size()) {
      throw Error(ErrorKind::CorruptHeader, path.string() + ": truncated tensor " + t.at("name").get<std::string>());
    }
    for (std::size_t i = 0; i < value.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= std::uint64_t(static_cast<unsigned char>(payload[offset + i * 8 + b])) << (8 * b);
      value[i] = std::bit_cast<double>(bits);
    }
    ck.tensors.emplace(t.at("name").get<std::string>(), std::move(value));
  }
  return ck;
}

void apply_checkpoint(const Checkpoint& ckpt, ParamStore& store) {
  for (const auto& p : store.unique()) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) throw Error(ErrorKind::ModelMismatch, "checkpoint lacks " + p->name);
    if (!it->second.same_shape(p->value)) {
      throw Error(ErrorKind::ModelMismatch, p->name + " has shape " + it->second.shape_string() + " in checkpoint, " +
                                                p->value.shape_string() + " in model");
    }
    p->value = it->second;
  }
  if (ckpt.tensors.size() != store.unique().size()) {
    throw Error(ErrorKind::ModelMismatch, "checkpoint holds tensors the model does not define");
  }
}

}  // namespace hdrfuse
