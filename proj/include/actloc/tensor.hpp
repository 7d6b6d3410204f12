#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace actloc {

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s[i]);
  }
  out += ']';
  return out;
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized by Tape::backprop, empty until then
  bool is_param = false;
  bool requires_grad = false;
  std::string name;
};

// Value-semantic handle onto a shared buffer. Data is written once at
// creation and treated as immutable afterwards, with two exceptions:
// optimizer updates to parameters and running-stat buffers inside batch
// norm. `tracked` marks tensors produced on the active tape; parameters are
// never tracked themselves but induce tracking on everything computed from
// them while their `requires_grad` is set.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl>()) {}

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<TensorImpl>()) {
    validate_shape(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(numel(impl_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
    validate_shape(shape);
    if (numel(shape) != static_cast<long long>(values.size()))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor param(Shape shape, std::string name) {
    Tensor t(std::move(shape));
    t.impl_->is_param = true;
    t.impl_->requires_grad = true;
    t.impl_->name = std::move(name);
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  long long size() const { return static_cast<long long>(impl_->data.size()); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }

  double value() const {
    if (size() != 1) throw std::logic_error("value(): tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
  }

  double& operator[](long long i) { return impl_->data[static_cast<std::size_t>(i)]; }
  double operator[](long long i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  // [N,C,H,W] accessor, used mostly by tests
  double& at4(int n, int c, int y, int x) {
    const Shape& s = impl_->shape;
    return impl_->data[static_cast<std::size_t>(((static_cast<long long>(n) * s[1] + c) * s[2] + y) * s[3] + x)];
  }
  double at4(int n, int c, int y, int x) const { return const_cast<Tensor*>(this)->at4(n, c, y, x); }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<double>& grad() { return impl_->grad; }
  const std::vector<double>& grad() const { return impl_->grad; }

  bool is_param() const { return impl_->is_param; }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }
  const std::string& name() const { return impl_->name; }
  void set_name(std::string n) { impl_->name = std::move(n); }

  bool tracked() const { return tracked_; }
  void mark_tracked() { tracked_ = true; }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  // Deep copy of the values; drops tape association and parameter status.
  Tensor detach_copy() const {
    Tensor t(impl_->shape, impl_->data);
    return t;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor: empty shape");
    for (int d : shape)
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
  }

  std::shared_ptr<TensorImpl> impl_;
  bool tracked_ = false;
};

}  // namespace actloc
