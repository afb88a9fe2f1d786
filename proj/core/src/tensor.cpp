#include "pcrobust/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace pcrobust {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw std::invalid_argument("tensor: zero-sized dimension in " + shape_str(shape));
  }
  if (shape.empty()) throw std::invalid_argument("tensor: rank-0 shape; use {1} for scalars");
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) {
  check_shape(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::from_vector(std::vector<double> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("tensor: use of default-constructed tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw std::out_of_range("tensor: axis out of range");
  return s[axis];
}

std::vector<double>& Tensor::data() {
  if (!impl_) throw std::logic_error("tensor: use of default-constructed tensor");
  return impl_->data;
}

const std::vector<double>& Tensor::data() const {
  if (!impl_) throw std::logic_error("tensor: use of default-constructed tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!impl_) throw std::logic_error("tensor: use of default-constructed tensor");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor: grad accessed before backward");
  return *impl_->grad;
}

Tensor Tensor::grad_tensor() const { return Tensor(shape(), grad()); }

void Tensor::zero_grad() {
  if (impl_ && impl_->grad) impl_->grad->assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(shape(), data());
}

}  // namespace pcrobust
