#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace metarep {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN/Inf escaped an operation.
class NumericFault : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Input is too degenerate for the requested statistic (constant vector,
// zero-norm matrix, no positive eigenvalues...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

// Allocator whose no-argument construct() default-initializes, so sized
// vectors of doubles skip the zero fill when every entry is overwritten.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using Storage = std::vector<double, DefaultInitAllocator<double>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    validate_shape();
  }

  Tensor(Shape shape, const std::vector<double>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    validate_shape();
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  Tensor(Shape shape, std::initializer_list<double> data)
      : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  // Contents unspecified; for outputs that are written in full.
  static Tensor uninitialized(Shape shape) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), Storage(n));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const Storage& vec() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  // 2-D element access.
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), Storage(data_));
  }

  // Exponent-bit test written with plain integer ops so it vectorizes:
  // x = ~bits & exp_mask is zero exactly for Inf/NaN, and x - 1 then wraps
  // to a value with the top bit set (every other x - 1 stays below 2^63).
  bool all_finite() const {
    constexpr std::uint64_t exp_mask = 0x7ff0000000000000ULL;
    std::uint64_t bad = 0;
    for (double v : data_) bad |= (~std::bit_cast<std::uint64_t>(v) & exp_mask) - 1;
    return (bad >> 63) == 0;
  }

  void check_finite(const char* op) const {
    if (!all_finite()) throw NumericFault(std::string("non-finite value produced by ") + op);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  Storage data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace metarep
