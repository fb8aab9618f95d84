#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtta {

#ifdef EEGTTA_DOUBLE
using Real = double;
#else
using Real = float;
#endif

struct Shape4 {
  std::size_t n{0};
  std::size_t c{0};
  std::size_t h{0};
  std::size_t w{0};

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t per_sample() const { return c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;
};

std::string to_string(const Shape4& s);

// Dense NCHW tensor. Row-major, contiguous.
template <std::floating_point T>
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + to_string(shape_));
    }
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  // One H×W plane.
  std::span<T> plane(std::size_t n, std::size_t c) {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return {data_.data() + (n * shape_.c + c) * shape_.plane(), shape_.plane()};
  }

  std::span<T> sample(std::size_t n) {
    return {data_.data() + n * shape_.per_sample(), shape_.per_sample()};
  }
  std::span<const T> sample(std::size_t n) const {
    return {data_.data() + n * shape_.per_sample(), shape_.per_sample()};
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <std::floating_point U>
  Tensor4<U> cast() const {
    return Tensor4<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

// Stack single-sample tensors (n == 1 each) into one batch.
template <std::floating_point T>
Tensor4<T> stack(std::span<const Tensor4<T>* const> samples) {
  if (samples.empty()) throw std::invalid_argument("stack: no samples");
  Shape4 one = samples.front()->shape();
  Shape4 out{0, one.c, one.h, one.w};
  for (const auto* s : samples) {
    const Shape4& sh = s->shape();
    if (sh.c != one.c || sh.h != one.h || sh.w != one.w) {
      throw std::invalid_argument("stack: inconsistent sample shapes " + to_string(one) +
                                  " vs " + to_string(sh));
    }
    out.n += sh.n;
  }
  std::vector<T> data;
  data.reserve(out.size());
  for (const auto* s : samples) data.insert(data.end(), s->data().begin(), s->data().end());
  return Tensor4<T>(out, std::move(data));
}

// Row-major rows × cols matrix; used for logits (batch × classes) and features.
template <std::floating_point T>
struct Matrix {
  std::size_t rows{0};
  std::size_t cols{0};
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

}  // namespace eegtta
