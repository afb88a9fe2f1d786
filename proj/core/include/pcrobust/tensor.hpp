#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace pcrobust {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

/// One recorded primitive. `backward` reads the output's value/grad (passed
/// by the engine) and accumulates into the parents' grad buffers.
struct Node {
  const char* op = "";
  std::vector<Tensor> parents;
  std::function<void(const struct TensorImpl& out, const std::vector<double>& out_grad)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::unique_ptr<std::vector<double>> grad;
  std::shared_ptr<Node> node;  // null for leaves and untracked results
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats.
///
/// Tensor is a cheap handle: copies share storage and the autograd node that
/// produced the value. clone() makes an independent deep copy. By convention
/// values are frozen once a tensor has entered a computation; the grad buffer
/// is the only field backward() mutates. Training code mutates parameter
/// values through the handle while it has exclusive ownership of the network.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }
  static Tensor from_vector(std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double& operator[](std::size_t flat_index) { return data()[flat_index]; }
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  /// Value of a single-element tensor; throws on anything else.
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  const std::vector<double>& grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// Deep copy of the values only: no grad, no recorded computation.
  Tensor clone() const;

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

}  // namespace pcrobust
