#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dqkd {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw TensorError(msg); }

// Dense row-major numeric array with shape. Scalar is float in production;
// the double instantiation backs test oracles (finite differences, exact
// integer/float equivalence checks).
template <typename S>
class TensorT {
 public:
  using Scalar = S;
  using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(checked_numel(shape_)), S(0));
  }

  TensorT(std::vector<int> shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_))
      fail("tensor data length " + std::to_string(data_.size()) +
           " does not match shape " + shape_str(shape_));
  }

  static TensorT full(std::vector<int> shape, S value) {
    TensorT t(std::move(shape));
    t.array().setConstant(value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // HW access
  S& operator()(int h, int w) {
    return data_[static_cast<std::size_t>(static_cast<std::int64_t>(h) * dim(rank() - 1) + w)];
  }
  S operator()(int h, int w) const {
    return data_[static_cast<std::size_t>(static_cast<std::int64_t>(h) * dim(rank() - 1) + w)];
  }
  // CHW access
  S& operator()(int c, int h, int w) {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(c) * dim(1) + h) * dim(2) + w)];
  }
  S operator()(int c, int h, int w) const {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(c) * dim(1) + h) * dim(2) + w)];
  }
  // OCKK access
  S& operator()(int o, int c, int kh, int kw) {
    return data_[static_cast<std::size_t>(((static_cast<std::int64_t>(o) * dim(1) + c) * dim(2) + kh) * dim(3) + kw)];
  }
  S operator()(int o, int c, int kh, int kw) const {
    return data_[static_cast<std::size_t>(((static_cast<std::int64_t>(o) * dim(1) + c) * dim(2) + kh) * dim(3) + kw)];
  }

  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstArrayMap array() const {
    return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const { return array().isFinite().all(); }

  template <typename T>
  TensorT<T> cast() const {
    TensorT<T> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<T>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
  }
  std::string shape_str() const { return shape_str(shape_); }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) fail("tensor dims must be positive, got " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

template <typename S>
using FeaturePyramidT = std::vector<TensorT<S>>;
using FeaturePyramid = FeaturePyramidT<float>;

}  // namespace dqkd
