#pragma once

// Dense n-dimensional value array with an optional gradient companion.
// Tensor<T> is a cheap handle; copies share the payload. T is float for
// training, double for gradient verification.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "asr/common.hpp"

namespace asr {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class Tensor {
  struct Payload {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
  };

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = std::move(shape);
    t.p_->data.assign(static_cast<size_t>(shape_numel(t.p_->shape)), T{0});
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.p_->data.begin(), t.p_->data.end(), value);
    return t;
  }

  static Tensor from_vec(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
      throw DimensionError(str_format("tensor data size %zu does not match shape %s",
                                      values.size(), shape_str(shape).c_str()));
    }
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = std::move(shape);
    t.p_->data = std::move(values);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_vec({}, {value}, requires_grad);
  }

  bool valid() const { return p_ != nullptr; }

  const Shape& shape() const { return p_->shape; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  int64_t dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(p_->data.size()); }

  T* data() { return p_->data.data(); }
  const T* data() const { return p_->data.data(); }
  std::vector<T>& vec() { return p_->data; }
  const std::vector<T>& vec() const { return p_->data; }

  T item() const {
    if (numel() != 1) {
      throw ContractError(str_format("item() requires a scalar, got shape %s",
                                     shape_str(shape()).c_str()));
    }
    return p_->data[0];
  }

  bool requires_grad() const { return p_ && p_->requires_grad; }
  void set_requires_grad(bool v) const { p_->requires_grad = v; }

  // Gradient buffer, lazily allocated on first touch.
  bool has_grad() const { return p_ && !p_->grad.empty(); }
  void ensure_grad() const {
    if (p_->grad.empty()) p_->grad.assign(p_->data.size(), T{0});
  }
  T* grad() const {
    ensure_grad();
    return p_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return p_->grad; }
  void zero_grad() const {
    std::fill(p_->grad.begin(), p_->grad.end(), T{0});
  }
  void drop_grad() const { p_->grad.clear(); }

  // Deep copy of values only (fresh payload, no grad, requires_grad off).
  Tensor clone_values() const {
    Tensor t;
    t.p_ = std::make_shared<Payload>();
    t.p_->shape = p_->shape;
    t.p_->data = p_->data;
    return t;
  }

  void copy_values_from(const Tensor& other) {
    if (other.p_->shape != p_->shape) {
      throw DimensionError(str_format("copy_values_from: shape %s vs %s",
                                      shape_str(other.shape()).c_str(),
                                      shape_str(shape()).c_str()));
    }
    p_->data = other.p_->data;
  }

  bool same_payload(const Tensor& other) const { return p_ == other.p_; }

  bool all_finite() const {
    for (T v : p_->data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    if (!p_->grad.empty()) {
      for (T v : p_->grad) {
        if (!std::isfinite(static_cast<double>(v))) return false;
      }
    }
    return true;
  }

 private:
  std::shared_ptr<Payload> p_;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

}  // namespace asr
