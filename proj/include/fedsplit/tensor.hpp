#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fedsplit/errors.hpp"
#include "fedsplit/rng.hpp"

namespace fedsplit {

// One node of the recorded computation. Nodes form a DAG rooted at the loss;
// `backprop` reads this node's grad and accumulates into its parents. The
// reverse-topological walk over this DAG is the tape: every recorded op is
// visited exactly once, in reverse execution order.
struct TensorNode {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation; same length as data after
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backprop;

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  bool participates() const { return requires_grad || backprop != nullptr; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

// Value handle over a shared node. Cheap to copy; data is mutated only by
// the optimizer between steps, grads only by backward().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
  static Tensor full(const std::vector<int>& shape, float value, bool requires_grad = false);
  static Tensor from_data(const std::vector<int>& shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t size() const { return n_->size(); }

  std::vector<float>& data() { return n_->data; }
  const std::vector<float>& data() const { return n_->data; }
  float item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rq) { n_->requires_grad = rq; }
  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<float>& grad() const;
  std::vector<float>& mutable_grad();
  void zero_grad() { n_->grad.clear(); }

  // Reverse pass from a scalar (implicit seed 1) or from an explicit
  // output-gradient seed of the same length as data.
  void backward();
  void backward(const std::vector<float>& seed);

  // Deep copy with no graph history.
  Tensor clone() const;

  std::shared_ptr<TensorNode> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Thread-local autograd switch; evaluation paths disable recording.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- Differentiable operations ----
// matmul supports 2-D (M,K)x(K,N) and batched 3-D (B,M,K)x(B,K,N).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
// x (..., C) + bias (C), broadcast over leading dims.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor softmax(const Tensor& x, int axis);
// Normalizes the last dimension; gamma/beta are 1-D of that length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor gelu(const Tensor& x);
// logits (N, C); targets length N with kIgnoreLabel entries skipped.
// All-ignored input is defined as zero loss with zero gradient.
inline constexpr int kIgnoreLabel = -1;
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor sum(const Tensor& x);
// table (V, H) gathered by ids -> (|ids|, H).
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor reshape(const Tensor& x, const std::vector<int>& shape);
Tensor transpose_last2(const Tensor& x);
// (B, L, H) -> (B*heads, L, H/heads) and back.
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x, int heads);
// Inverted dropout; identity in eval mode. Draws size(x) uniforms in train mode.
Tensor dropout(const Tensor& x, float p, Rng& rng, bool train);
// (B, L, H) -> (B, H), the position-0 slice.
Tensor take_position0(const Tensor& x);

std::string shape_str(const std::vector<int>& shape);

}  // namespace fedsplit
