#include "inv2a/nn/autograd.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

namespace inv2a::nn {

namespace {

using BackwardFn = std::function<void(Node&)>;

Var make_result(Matrix value, std::initializer_list<const Var*> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var* in : inputs) needs = needs || in->requires_grad();
  Var out(std::move(value), needs);
  if (needs) {
    auto& node = *out.node();
    for (const Var* in : inputs) node.parents.push_back(in->node());
    node.backward_fn = std::move(fn);
  }
  return out;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void backward(const Var& loss) {
  if (!loss.requires_grad()) return;
  if (loss.rows() != 1 || loss.cols() != 1) throw DimensionError("backward: loss must be 1x1");

  // Iterative post-order DFS gives a topological order without recursion.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
  }
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                         std::to_string(b.rows()));
  }
  Matrix value = a.value() * b.value();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(std::move(value), {&a, &b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: width mismatch");
  Matrix value = a.value() * b.value().transpose();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(std::move(value), {&a, &b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value);
    if (pb->requires_grad) pb->accumulate(self.grad.transpose() * pa->value);
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(a.value() + b.value(), {&a, &b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: bias width mismatch");
  Matrix value = a.value();
  value.rowwise() += row.value().row(0);
  Node* pa = a.node().get();
  Node* pr = row.node().get();
  return make_result(std::move(value), {&a, &row}, [pa, pr](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pr->requires_grad) pr->accumulate(self.grad.colwise().sum());
  });
}

Var add_constant(const Var& a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw DimensionError("add_constant: shape mismatch");
  Node* pa = a.node().get();
  return make_result(a.value() + c, {&a}, [pa](Node& self) { pa->accumulate(self.grad); });
}

Var scale(const Var& a, Scalar s) {
  Node* pa = a.node().get();
  return make_result(a.value() * s, {&a}, [pa, s](Node& self) { pa->accumulate(self.grad * s); });
}

Var gelu(const Var& a) {
  static constexpr Scalar kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr Scalar kA = 0.044715;
  const Matrix& x = a.value();
  Matrix t = (kC * (x.array() + kA * x.array().cube())).tanh().matrix();
  Matrix value = (0.5 * x.array() * (1.0 + t.array())).matrix();
  Node* pa = a.node().get();
  return make_result(std::move(value), {&a}, [pa, t = std::move(t)](Node& self) {
    const auto x = pa->value.array();
    auto dt = (1.0 - t.array().square()) * kC * (1.0 + 3.0 * kA * x.square());
    Matrix d = (0.5 * (1.0 + t.array()) + 0.5 * x * dt).matrix();
    pa->accumulate((self.grad.array() * d.array()).matrix());
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps) {
  const Eigen::Index n = x.cols();
  if (gain.cols() != n || bias.cols() != n) throw DimensionError("layer_norm: parameter width mismatch");
  const Matrix& xv = x.value();
  Eigen::VectorXd inv_std(xv.rows());
  Matrix xhat(xv.rows(), n);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix value = xhat;
  value.array().rowwise() *= gain.value().row(0).array();
  value.rowwise() += bias.value().row(0);
  Node* px = x.node().get();
  Node* pg = gain.node().get();
  Node* pb = bias.node().get();
  return make_result(std::move(value), {&x, &gain, &bias},
                     [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const Matrix& dy = self.grad;
                       if (pg->requires_grad) pg->accumulate((dy.array() * xhat.array()).colwise().sum().matrix());
                       if (pb->requires_grad) pb->accumulate(dy.colwise().sum());
                       if (px->requires_grad) {
                         Matrix dxhat = dy;
                         dxhat.array().rowwise() *= pg->value.row(0).array();
                         Matrix dx(dy.rows(), dy.cols());
                         for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                           const Scalar m1 = dxhat.row(r).mean();
                           const Scalar m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                           dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                         }
                         px->accumulate(dx);
                       }
                     });
}

Var embedding(const Var& table, std::span<const TokenId> ids) {
  const Eigen::Index vocab = table.rows();
  Matrix value(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) throw DimensionError("embedding: token id out of range");
    value.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  Node* pt = table.node().get();
  std::vector<TokenId> saved(ids.begin(), ids.end());
  return make_result(std::move(value), {&table}, [pt, saved = std::move(saved)](Node& self) {
    if (pt->grad.size() == 0) pt->grad = Matrix::Zero(pt->value.rows(), pt->value.cols());
    for (std::size_t i = 0; i < saved.size(); ++i) {
      pt->grad.row(saved[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  bool needs = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: width mismatch");
    rows += p.rows();
    needs = needs || p.requires_grad();
  }
  Matrix value(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    value.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  Var out(std::move(value), needs);
  if (needs) {
    auto& node = *out.node();
    std::vector<std::pair<Node*, Eigen::Index>> spans;
    at = 0;
    for (const auto& p : parts) {
      node.parents.push_back(p.node());
      spans.emplace_back(p.node().get(), at);
      at += p.rows();
    }
    node.backward_fn = [spans = std::move(spans)](Node& self) {
      for (auto [parent, start] : spans) {
        if (parent->requires_grad) parent->accumulate(self.grad.middleRows(start, parent->value.rows()));
      }
    };
  }
  return out;
}

Var slice_rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw DimensionError("slice_rows: out of range");
  Node* pa = a.node().get();
  return make_result(a.value().middleRows(begin, count), {&a}, [pa, begin, count](Node& self) {
    if (pa->grad.size() == 0) pa->grad = Matrix::Zero(pa->value.rows(), pa->value.cols());
    pa->grad.middleRows(begin, count) += self.grad;
  });
}

Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw DimensionError("mean_rows: empty input");
  Node* pa = a.node().get();
  const Eigen::Index n = a.rows();
  return make_result(a.value().colwise().mean(), {&a}, [pa, n](Node& self) {
    Matrix g = self.grad.replicate(n, 1) / static_cast<Scalar>(n);
    pa->accumulate(g);
  });
}

Var sum_scalars(std::span<const Var> scalars) {
  if (scalars.empty()) return constant(Matrix::Zero(1, 1));
  Var total = scalars.front();
  for (std::size_t i = 1; i < scalars.size(); ++i) total = add(total, scalars[i]);
  return total;
}

AttentionMask AttentionMask::block_diagonal(std::span<const std::pair<int, int>> segments, int total) {
  AttentionMask mask;
  mask.kind = Kind::kCustom;
  mask.allowed = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(total, total, false);
  for (auto [begin, end] : segments) {
    mask.allowed.block(begin, begin, end - begin, end - begin).setConstant(true);
  }
  return mask;
}

Var attention(const Var& q, const Var& k, const Var& v, int n_heads, const AttentionMask& mask,
              int query_offset, Matrix* head_mean_probs) {
  const Eigen::Index lq = q.rows();
  const Eigen::Index lk = k.rows();
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != lk) throw DimensionError("attention: q/k/v shape mismatch");
  if (n_heads <= 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (mask.kind == AttentionMask::Kind::kCustom && (mask.allowed.rows() != lq || mask.allowed.cols() != lk)) {
    throw DimensionError("attention: mask shape mismatch");
  }
  const Eigen::Index dh = d / n_heads;
  const Scalar scl = 1.0 / std::sqrt(static_cast<Scalar>(dh));
  constexpr Scalar kNegInf = -std::numeric_limits<Scalar>::infinity();

  auto allowed = [&](Eigen::Index i, Eigen::Index j) {
    switch (mask.kind) {
      case AttentionMask::Kind::kFull:
        return true;
      case AttentionMask::Kind::kCausal:
        return j <= i + query_offset;
      case AttentionMask::Kind::kCustom:
        return mask.allowed(i, j);
    }
    return true;
  };

  std::vector<Matrix> probs(static_cast<std::size_t>(n_heads));
  Matrix value(lq, d);
  if (head_mean_probs) *head_mean_probs = Matrix::Zero(lq, lk);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Matrix s = (qh * kh.transpose()) * scl;
    for (Eigen::Index i = 0; i < lq; ++i) {
      Scalar row_max = kNegInf;
      for (Eigen::Index j = 0; j < lk; ++j) {
        if (!allowed(i, j)) s(i, j) = kNegInf;
        row_max = std::max(row_max, s(i, j));
      }
      if (row_max == kNegInf) {
        s.row(i).setZero();
        continue;
      }
      Scalar total = 0.0;
      for (Eigen::Index j = 0; j < lk; ++j) {
        s(i, j) = (s(i, j) == kNegInf) ? 0.0 : std::exp(s(i, j) - row_max);
        total += s(i, j);
      }
      s.row(i) /= total;
    }
    value.middleCols(h * dh, dh) = s * vh;
    if (head_mean_probs) *head_mean_probs += s / static_cast<Scalar>(n_heads);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }

  Node* pq = q.node().get();
  Node* pk = k.node().get();
  Node* pv = v.node().get();
  return make_result(std::move(value), {&q, &k, &v},
                     [pq, pk, pv, probs = std::move(probs), n_heads, dh, scl](Node& self) {
                       const Eigen::Index lq = pq->value.rows();
                       const Eigen::Index lk = pk->value.rows();
                       const Eigen::Index d = pq->value.cols();
                       Matrix dq = Matrix::Zero(lq, d);
                       Matrix dk = Matrix::Zero(lk, d);
                       Matrix dv = Matrix::Zero(lk, d);
                       for (int h = 0; h < n_heads; ++h) {
                         const Matrix& p = probs[static_cast<std::size_t>(h)];
                         const auto go = self.grad.middleCols(h * dh, dh);
                         const auto qh = pq->value.middleCols(h * dh, dh);
                         const auto kh = pk->value.middleCols(h * dh, dh);
                         const auto vh = pv->value.middleCols(h * dh, dh);
                         dv.middleCols(h * dh, dh) = p.transpose() * go;
                         Matrix dp = go * vh.transpose();
                         Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
                         Matrix ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix() * scl;
                         dq.middleCols(h * dh, dh) = ds * kh;
                         dk.middleCols(h * dh, dh) = ds.transpose() * qh;
                       }
                       if (pq->requires_grad) pq->accumulate(dq);
                       if (pk->requires_grad) pk->accumulate(dk);
                       if (pv->requires_grad) pv->accumulate(dv);
                     });
}

Var cross_entropy(const Var& logits, std::span<const TokenId> targets) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index vocab = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != n) throw DimensionError("cross_entropy: target count mismatch");
  Matrix dlogits = Matrix::Zero(n, vocab);
  Scalar total = 0.0;
  int counted = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const TokenId t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    if (t >= vocab) throw DimensionError("cross_entropy: target out of range");
    const Scalar m = logits.value().row(r).maxCoeff();
    RowVector e = (logits.value().row(r).array() - m).exp().matrix();
    const Scalar z = e.sum();
    total += (std::log(z) + m) - logits.value()(r, t);
    dlogits.row(r) = e / z;
    dlogits(r, t) -= 1.0;
    ++counted;
  }
  if (counted == 0) throw InvalidBatch("cross_entropy: no unmasked targets");
  dlogits /= static_cast<Scalar>(counted);
  Matrix value(1, 1);
  value(0, 0) = total / counted;
  Node* pl = logits.node().get();
  return make_result(std::move(value), {&logits}, [pl, dlogits = std::move(dlogits)](Node& self) {
    pl->accumulate(dlogits * self.grad(0, 0));
  });
}

Var infonce(const Var& anchor, const Var& candidates, int n_pos, Scalar temperature) {
  if (anchor.rows() != 1 || anchor.cols() != candidates.cols()) throw DimensionError("infonce: width mismatch");
  if (n_pos < 1 || n_pos > candidates.rows()) throw InvalidBatch("infonce: need at least one positive");
  if (!(temperature > 0)) throw InvalidBatch("infonce: temperature must be positive");
  Eigen::VectorXd s = (candidates.value() * anchor.value().transpose()).col(0) / temperature;
  const Scalar smax = s.maxCoeff();
  Eigen::VectorXd e = (s.array() - smax).exp();
  const Scalar lse = std::log(e.sum()) + smax;
  Matrix value(1, 1);
  value(0, 0) = lse - s.head(n_pos).mean();
  Eigen::VectorXd ds = e / e.sum();
  ds.head(n_pos).array() -= 1.0 / n_pos;
  Node* pa = anchor.node().get();
  Node* pc = candidates.node().get();
  return make_result(std::move(value), {&anchor, &candidates},
                     [pa, pc, ds = std::move(ds), temperature](Node& self) {
                       const Scalar g = self.grad(0, 0) / temperature;
                       if (pa->requires_grad) pa->accumulate((ds.transpose() * pc->value) * g);
                       if (pc->requires_grad) pc->accumulate(ds * pa->value.row(0) * g);
                     });
}

}  // namespace inv2a::nn
