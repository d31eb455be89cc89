#pragma once

// Dense 64-bit float tensor with an attached gradient slot. Tensors are
// shared handles: copies alias the same storage, which is what the tape
// needs to accumulate gradients through a graph.

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rulemem::diff {

class Tape;

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->values.assign(numel(t.impl_->shape), 0.0);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<std::size_t> shape, double v,
                     bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& x : t.impl_->values) x = v;
    return t;
  }

  static Tensor from_values(std::vector<std::size_t> shape,
                            std::vector<double> values,
                            bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                  " does not match " +
                                  std::to_string(values.size()) + " values");
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({}, {v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->values.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }

  std::vector<double>& values() { return impl_->values; }
  const std::vector<double>& values() const { return impl_->values; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates the grad buffer (zeros) on first use.
  std::vector<double>& grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad;
  }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  }

  double item() const {
    if (size() != 1) {
      throw std::invalid_argument("item: tensor " + shape_str(shape()) +
                                  " is not a scalar");
    }
    return impl_->values[0];
  }

  // Row-major element access, mostly for tests and decoding.
  double at(std::initializer_list<std::size_t> idx) const {
    return impl_->values[offset(idx)];
  }
  double& at(std::initializer_list<std::size_t> idx) {
    return impl_->values[offset(idx)];
  }

  // Deep copy; the clone is a leaf (no producer).
  Tensor clone() const {
    Tensor t = from_values(impl_->shape, impl_->values, impl_->requires_grad);
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Tape bookkeeping (set by ops).
  const Tape* producer_tape() const { return impl_->producer_tape; }
  std::size_t producer_node() const { return impl_->producer_node; }
  void set_producer(const Tape* tape, std::size_t node) {
    impl_->producer_tape = tape;
    impl_->producer_node = node;
  }

 private:
  struct Impl {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty = absent
    bool requires_grad = false;
    const Tape* producer_tape = nullptr;
    std::size_t producer_node = 0;
  };

  static std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != impl_->shape.size()) {
      throw std::invalid_argument("at: rank mismatch");
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      off = off * impl_->shape[axis] + i;
      ++axis;
    }
    return off;
  }

  std::shared_ptr<Impl> impl_;
};

}  // namespace rulemem::diff
