#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Var is a shared handle to a graph node; ops record a backward
// closure only when at least one input requires a gradient, so inference
// through frozen weights builds no graph at all.

#include "inv2a/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace inv2a::nn {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Scalar item() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Runs backpropagation from a 1x1 loss. Gradients accumulate into every
// reachable node that requires them; callers zero leaf grads between steps.
void backward(const Var& loss);

Var constant(Matrix value);

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);
Var add_constant(const Var& a, const Matrix& c);
Var scale(const Var& a, Scalar s);
Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps = 1e-5);
Var embedding(const Var& table, std::span<const TokenId> ids);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count);
Var mean_rows(const Var& a);
Var sum_scalars(std::span<const Var> scalars);

struct AttentionMask {
  enum class Kind { kFull, kCausal, kCustom };
  Kind kind = Kind::kFull;
  // kCustom: allowed(i, j) is true when query i may attend key j.
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> allowed;

  static AttentionMask full() { return {}; }
  static AttentionMask causal() { return {Kind::kCausal, {}}; }
  static AttentionMask block_diagonal(std::span<const std::pair<int, int>> segments, int total);
};

// Multi-head scaled dot-product attention. Queries sit at absolute positions
// query_offset..query_offset+Lq-1 against keys 0..Lk-1 (the causal rule uses
// absolute positions so KV-cached decoding matches a full pass). When
// head_mean_probs is non-null it receives the head-averaged probabilities.
Var attention(const Var& q, const Var& k, const Var& v, int n_heads, const AttentionMask& mask,
              int query_offset = 0, Matrix* head_mean_probs = nullptr);

// Mean token negative log-likelihood of targets under row-wise softmax of
// logits. Targets equal to -1 are ignored.
Var cross_entropy(const Var& logits, std::span<const TokenId> targets);

// InfoNCE with inner-product similarity. Rows [0, n_pos) of candidates are
// positives and the remaining rows negatives; the denominator spans all rows.
Var infonce(const Var& anchor, const Var& candidates, int n_pos, Scalar temperature);

}  // namespace inv2a::nn
