#include <doctest.h>

#include "inv2a/nn/autograd.hpp"
#include "inv2a/nn/parameters.hpp"
#include "inv2a/nn/transformer.hpp"

#include <filesystem>
#include <functional>

using namespace inv2a;
using namespace inv2a::nn;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double s = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * standard_normal(rng);
  return m;
}

// Central finite differences of loss() w.r.t. every entry of x, compared with
// the autograd gradient.
double max_rel_error(Var& x, const std::function<Var()>& loss) {
  x.zero_grad();
  Var l = loss();
  backward(l);
  const Matrix analytic = x.grad();
  double worst = 0.0;
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < x.value().size(); ++i) {
    const double orig = x.value().data()[i];
    x.mutable_value().data()[i] = orig + h;
    const double up = loss().item();
    x.mutable_value().data()[i] = orig - h;
    const double down = loss().item();
    x.mutable_value().data()[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double err = std::abs(numeric - analytic.data()[i]) / std::max(1e-6, std::abs(numeric) + std::abs(analytic.data()[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise and matrix ops have correct gradients") {
  Rng rng(7);
  Var a(random_matrix(3, 4, rng), true);
  Var b(random_matrix(4, 5, rng), true);
  Var row(random_matrix(1, 5, rng), true);
  Var g(random_matrix(1, 5, rng), true);
  Var beta(random_matrix(1, 5, rng), true);
  TokenIds targets{1, -1, 4};
  auto loss = [&] {
    Var h = add_row(matmul(a, b), row);
    h = layer_norm(gelu(h), g, beta);
    return cross_entropy(scale(h, 1.7), targets);
  };
  CHECK(max_rel_error(a, loss) < 1e-5);
  CHECK(max_rel_error(b, loss) < 1e-5);
  CHECK(max_rel_error(row, loss) < 1e-5);
  CHECK(max_rel_error(g, loss) < 1e-5);
  CHECK(max_rel_error(beta, loss) < 1e-5);
}

TEST_CASE("attention, slicing and pooling gradients") {
  Rng rng(11);
  Var x(random_matrix(5, 8, rng), true);
  Var w(random_matrix(8, 8, rng, 0.5), true);
  std::vector<std::pair<int, int>> segs{{0, 2}, {2, 5}};
  const AttentionMask block = AttentionMask::block_diagonal(segs, 5);
  for (const AttentionMask* m : {&block}) {
    auto loss = [&] {
      Var q = matmul(x, w);
      Var o = attention(q, x, matmul_nt(x, w), 2, *m);
      std::vector<Var> parts{slice_rows(o, 3, 2), slice_rows(o, 0, 1)};
      Var pooled = mean_rows(concat_rows(parts));
      return cross_entropy(pooled, TokenIds{3});
    };
    CHECK(max_rel_error(x, loss) < 1e-5);
    CHECK(max_rel_error(w, loss) < 1e-5);
  }
  auto causal_loss = [&] {
    Var o = attention(matmul(x, w), x, x, 4, AttentionMask::causal());
    return cross_entropy(o, TokenIds{0, 1, 2, 3, 4});
  };
  CHECK(max_rel_error(x, causal_loss) < 1e-5);
}

TEST_CASE("embedding and infonce gradients") {
  Rng rng(3);
  Var table(random_matrix(6, 4, rng), true);
  TokenIds ids{1, 3, 3, 0};
  auto loss = [&] {
    Var e = embedding(table, ids);
    Var anchor = mean_rows(slice_rows(e, 0, 2));
    return infonce(anchor, e, 2, 0.5);
  };
  CHECK(max_rel_error(table, loss) < 1e-5);
}

TEST_CASE("frozen inputs build no graph") {
  Rng rng(5);
  Var a(random_matrix(2, 2, rng), false);
  Var b(random_matrix(2, 2, rng), false);
  Var c = matmul(a, b);
  CHECK_FALSE(c.requires_grad());
  CHECK(c.node()->parents.empty());
}

TEST_CASE("kv-cached forward matches a full causal pass") {
  TransformerConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.d_ff = 32;
  cfg.max_positions = 12;
  Transformer net(cfg, 42);
  TokenIds ids{2, 5, 7, 1, 9, 3};
  Matrix full = net.logits(net.forward(net.embed(ids))).value();
  KVCache cache;
  ForwardOptions opts;
  opts.cache = &cache;
  Matrix first = net.logits(net.forward(net.embed(std::span(ids).subspan(0, 4)), opts)).value();
  opts.position_offset = 4;
  Matrix rest = net.logits(net.forward(net.embed(std::span(ids).subspan(4)), opts)).value();
  CHECK((first - full.topRows(4)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((rest - full.bottomRows(2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tensor container round-trips and clone is deep") {
  TransformerConfig cfg;
  cfg.vocab_size = 9;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_positions = 6;
  cfg.causal = false;
  Transformer net(cfg, 1);
  const auto dir = std::filesystem::temp_directory_path() / "inv2a_tensor_rt";
  net.save(dir, "enc");
  Transformer back = Transformer::load(dir, "enc");
  CHECK(back.parameters().bit_identical(net.parameters().snapshot()));
  Transformer copy = net.clone();
  copy.parameters().items()[0].second.mutable_value()(0, 0) += 1.0;
  CHECK(net.parameters().bit_identical(back.parameters().snapshot()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("adamw step moves parameters and clears grads") {
  Var p(Matrix::Constant(1, 3, 1.0), true);
  AdamW opt({p}, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0, 0.0});
  Var l = cross_entropy(p, TokenIds{0});
  backward(l);
  opt.step();
  CHECK(p.grad().size() == 0);
  CHECK(p.value()(0, 0) > 1.0);
  CHECK(p.value()(0, 1) < 1.0);
}
