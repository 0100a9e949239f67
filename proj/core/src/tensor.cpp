#include "hdrfuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "hdrfuse/error.hpp"

namespace hdrfuse {

std::size_t element_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error(ErrorKind::ShapeMismatch, "negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != element_count(shape_)) {
    throw Error(ErrorKind::ShapeMismatch, "data length does not match shape " + shape_string());
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) {
    throw Error(ErrorKind::ShapeMismatch, shape_string() + " += " + other.shape_string());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double Tensor::max() const {
  if (data_.empty()) return -std::numeric_limits<double>::infinity();
  return *std::max_element(data_.begin(), data_.end());
}

double Tensor::min() const {
  if (data_.empty()) return std::numeric_limits<double>::infinity();
  return *std::min_element(data_.begin(), data_.end());
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ')';
  return os.str();
}

Tensor slice_channels(const Tensor& t, int begin, int end) {
  if (t.rank() != 3 || begin < 0 || end > t.channels() || begin > end) {
    throw Error(ErrorKind::ShapeMismatch, "bad channel slice of " + t.shape_string());
  }
  Tensor out = Tensor::image(end - begin, t.height(), t.width());
  auto src = t.data().subspan(static_cast<std::size_t>(begin) * t.plane(), out.size());
  std::copy(src.begin(), src.end(), out.data().begin());
  return out;
}

Tensor crop(const Tensor& t, int y0, int x0, int height, int width) {
  if (t.rank() != 3 || y0 < 0 || x0 < 0 || y0 + height > t.height() || x0 + width > t.width()) {
    throw Error(ErrorKind::ShapeMismatch, "crop window outside " + t.shape_string());
  }
  Tensor out = Tensor::image(t.channels(), height, width);
  for (int c = 0; c < t.channels(); ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) out.at(c, y, x) = t.at(c, y0 + y, x0 + x);
  return out;
}

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::BadEV: return "BadEV";
    case ErrorKind::IOFailure: return "IOFailure";
    case ErrorKind::CorruptHeader: return "CorruptHeader";
    case ErrorKind::WrongChannelCount: return "WrongChannelCount";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::NonPositiveExposure: return "NonPositiveExposure";
    case ErrorKind::BadSpatialDims: return "BadSpatialDims";
    case ErrorKind::SoftMaskRejected: return "SoftMaskRejected";
    case ErrorKind::ArityMismatch: return "ArityMismatch";
    case ErrorKind::SlotOutOfRange: return "SlotOutOfRange";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::ModeDataMismatch: return "ModeDataMismatch";
    case ErrorKind::PatchTooLarge: return "PatchTooLarge";
    case ErrorKind::ImageTooSmall: return "ImageTooSmall";
    case ErrorKind::MissingPrediction: return "MissingPrediction";
    case ErrorKind::ModelMismatch: return "ModelMismatch";
    case ErrorKind::NumericFailure: return "NumericFailure";
  }
  return "Unknown";
}

}  // namespace hdrfuse
