#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace hdrfuse {

/// Fixed 64-byte alignment keeps vectorised reductions in the same order on
/// every run, whatever address the heap hands out.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Dense row-major array of doubles with an arbitrary shape.
///
/// Images and feature maps use rank 3 in planar (channels, height, width)
/// order; convolution kernels use rank 4 (out, in, kh, kw); biases rank 1.
class Tensor {
 public:
  using Storage = std::vector<double, AlignedAllocator<double>>;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor image(int channels, int height, int width, double fill = 0.0) {
    return Tensor({channels, height, width}, fill);
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-3 accessors.
  int channels() const { return shape_[0]; }
  int height() const { return shape_[1]; }
  int width() const { return shape_[2]; }
  std::size_t plane() const { return static_cast<std::size_t>(shape_[1]) * shape_[2]; }

  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  std::span<double> channel(int c) {
    return std::span<double>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }
  std::span<const double> channel(int c) const {
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(c) * plane(), plane());
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(double v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  double max() const;
  double min() const;
  double sum() const;
  bool all_finite() const;

  std::string shape_string() const;

 private:
  std::vector<int> shape_;
  Storage data_;
};

std::size_t element_count(const std::vector<int>& shape);

/// Copies channel range [begin, end) of a rank-3 tensor.
Tensor slice_channels(const Tensor& t, int begin, int end);

/// Crops a rank-3 tensor to the window starting at (y0, x0).
Tensor crop(const Tensor& t, int y0, int x0, int height, int width);

}  // namespace hdrfuse
