#pragma once

#include <functional>
#include <vector>

#include "pcrobust/tensor.hpp"

namespace pcrobust {

/// Autograd recording is on by default; wrap inference-only code in a
/// NoGradGuard to skip node construction entirely.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

bool grad_enabled();

// Elementwise. Shapes must match exactly; no broadcasting beyond the bias
// forms below.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);  // subgradient at 0 is 0
Tensor tanh_act(const Tensor& a);

// Linear algebra and layer primitives.
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
/// x is (N,F)+bias(F) or (N,C,H,W)+bias(C).
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// Valid (unpadded) convolution of x (N,C,H,W) with weight (F,C,KH,KW).
/// Pass a default-constructed bias to skip it.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1);
/// Backward routes each window's gradient to its first maximal element
/// (row-major scan order) so tie-breaking is deterministic.
Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor reshape(const Tensor& x, Shape shape);

// Reductions and indexing.
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
/// out[i] = x[i, index_per_row[i]] for x of shape (N,K).
Tensor row_gather(const Tensor& x, const std::vector<int>& index_per_row);
/// out[i,k] = x[i,k] - per_row[i] for x of shape (N,K), per_row of shape (N).
Tensor sub_row_scalar(const Tensor& x, const Tensor& per_row);

// Softmax family over the last axis of a (N,K) tensor, computed with
// max-subtraction / log-sum-exp so finite logits never overflow.
Tensor softmax_rows(const Tensor& logits);
Tensor log_softmax_rows(const Tensor& logits);

/// Reverse-mode sweep from a scalar output (implicit seed gradient of 1).
void backward(const Tensor& output);
/// Reverse-mode sweep seeded with an explicit output gradient.
void backward(const Tensor& output, const Tensor& output_grad);

/// Gradient of a scalar-valued function at x. The function is evaluated on a
/// fresh grad-tracking copy of x, so the caller's tensor is never touched;
/// a non-scalar result is rejected.
Tensor input_gradient(const std::function<Tensor(const Tensor&)>& scalar_fn, const Tensor& x);

/// Throws if any element is NaN or infinite. `what` names the culprit.
void check_finite(const Tensor& t, const char* what);

}  // namespace pcrobust
