#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pcrobust/ops.hpp"
#include "pcrobust/tensor.hpp"

namespace pcrobust {

/// Names one of the supported classifier architectures plus its
/// hyperparameters. Round-trips through a compact string so checkpoints can
/// rebuild the exact network they were saved from.
struct ArchitectureSpec {
  std::string name;            // lenet5 | mlp | cnn3
  Shape input_shape;           // (C,H,W); the mlp flattens it
  int num_classes = 10;
  std::vector<std::size_t> mlp_hidden = {128, 64};

  static ArchitectureSpec lenet5(Shape input, int k);
  static ArchitectureSpec mlp(Shape input, int k, std::vector<std::size_t> hidden = {128, 64});
  static ArchitectureSpec cnn3(Shape input, int k);

  std::string to_string() const;
  static ArchitectureSpec parse(const std::string& text);

  bool operator==(const ArchitectureSpec& other) const = default;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x) const = 0;
  virtual void collect_params(std::vector<Tensor>& out) const {}
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual const char* kind() const = 0;
};

class DenseLayer : public Layer {
 public:
  DenseLayer(Tensor weight, Tensor bias) : weight_(std::move(weight)), bias_(std::move(bias)) {}
  Tensor forward(const Tensor& x) const override { return add_bias(matmul(x, weight_), bias_); }
  void collect_params(std::vector<Tensor>& out) const override {
    out.push_back(weight_);
    out.push_back(bias_);
  }
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<DenseLayer>(weight_.clone(), bias_.clone());
  }
  const char* kind() const override { return "dense"; }

 private:
  Tensor weight_;  // (in, out)
  Tensor bias_;    // (out)
};

class Conv2dLayer : public Layer {
 public:
  Conv2dLayer(Tensor weight, Tensor bias, std::size_t stride = 1)
      : weight_(std::move(weight)), bias_(std::move(bias)), stride_(stride) {}
  Tensor forward(const Tensor& x) const override { return conv2d(x, weight_, bias_, stride_); }
  void collect_params(std::vector<Tensor>& out) const override {
    out.push_back(weight_);
    out.push_back(bias_);
  }
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<Conv2dLayer>(weight_.clone(), bias_.clone(), stride_);
  }
  const char* kind() const override { return "conv2d"; }

 private:
  Tensor weight_;  // (F, C, KH, KW)
  Tensor bias_;    // (F)
  std::size_t stride_;
};

class ReluLayer : public Layer {
 public:
  Tensor forward(const Tensor& x) const override { return relu(x); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(); }
  const char* kind() const override { return "relu"; }
};

class TanhLayer : public Layer {
 public:
  Tensor forward(const Tensor& x) const override { return tanh_act(x); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<TanhLayer>(); }
  const char* kind() const override { return "tanh"; }
};

class MaxPool2dLayer : public Layer {
 public:
  MaxPool2dLayer(std::size_t kernel, std::size_t stride) : kernel_(kernel), stride_(stride) {}
  Tensor forward(const Tensor& x) const override { return maxpool2d(x, kernel_, stride_); }
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<MaxPool2dLayer>(kernel_, stride_);
  }
  const char* kind() const override { return "maxpool2d"; }

 private:
  std::size_t kernel_, stride_;
};

class FlattenLayer : public Layer {
 public:
  Tensor forward(const Tensor& x) const override {
    return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<FlattenLayer>(); }
  const char* kind() const override { return "flatten"; }
};

/// Ordered composition of layers producing K logits per sample. Read-only
/// during inference and attacks; training mutates parameters and must own
/// the network exclusively.
class Network {
 public:
  Network() = default;
  Network(ArchitectureSpec spec, std::vector<std::unique_ptr<Layer>> layers)
      : spec_(std::move(spec)), layers_(std::move(layers)) {}
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  /// Reproducible construction: the same spec and seed always yield
  /// identical parameters.
  static Network build(const ArchitectureSpec& spec, std::uint64_t seed);

  /// Batch of (N, input_shape...) in, logits (N,K) out.
  Tensor forward(const Tensor& x) const;

  /// Argmax class per sample (no gradient tracking). Ties break to the
  /// lowest class index.
  std::vector<int> predict(const Tensor& x) const;

  std::vector<Tensor> parameters() const;
  void set_params_requires_grad(bool value) const;

  const ArchitectureSpec& spec() const { return spec_; }
  int num_classes() const { return spec_.num_classes; }
  const Shape& input_shape() const { return spec_.input_shape; }
  std::size_t num_layers() const { return layers_.size(); }

  Network clone() const;

  void save(const std::string& path) const;
  static Network load(const std::string& path);
  static Network load(const std::string& path, const ArchitectureSpec& expected);

 private:
  ArchitectureSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

// Operation-style wrappers.
Network build(const ArchitectureSpec& spec, std::uint64_t seed);
std::vector<int> predict(const Network& net, const Tensor& x);
void save_params(const Network& net, const std::string& path);
Network load_params(const std::string& path);

/// Loss over logits for a labelled batch; must return a scalar tensor.
using LogitLoss = std::function<Tensor(const Tensor& logits, const std::vector<int>& labels)>;

/// Gradient of loss(net(x), y) with respect to x. The result has x's shape;
/// x itself is left untouched.
Tensor input_gradient(const Network& net, const LogitLoss& loss, const Tensor& x,
                      const std::vector<int>& labels);

}  // namespace pcrobust
