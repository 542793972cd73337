#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cbias/eem.hpp"
#include "cbias/grad_check.hpp"
#include "cbias/layers.hpp"
#include "cbias/lmm.hpp"
#include "cbias/sem.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace cbias;
using cbias::testing::project;
using cbias::testing::projection;
using cbias::testing::random_tensor;

namespace {

eem::EEMConfig tiny_eem() { return {5, 6, 4, 8, 12}; }

lmm::LMMConfig tiny_lmm() {
  lmm::LMMConfig c;
  c.num_objects = 5;
  c.embed_dim = 4;
  c.channels = 4;
  c.pool_size = 2;
  return c;
}

sem::SEMConfig tiny_sem() {
  sem::SEMConfig c;
  c.num_objects = 5;
  c.embed_dim = 4;
  c.pos_dim = 4;
  c.model_dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.ffn_dim = 8;
  c.out_dim = 6;
  return c;
}

std::vector<Tensor> all_params(ParamStore& params) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params.entries()) out.push_back(t);
  return out;
}

corpus::Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  corpus::Box b;
  b.w = 0.1 + 0.3 * u(rng);
  b.h = 0.1 + 0.3 * u(rng);
  b.x = (1 - b.w) * u(rng);
  b.y = (1 - b.h) * u(rng);
  return b;
}

void expect_grad_ok(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                    double tol = 1e-5) {
  GradCheckOptions opts;
  opts.tolerance = tol;
  const auto rep = grad_check(f, std::move(inputs), opts);
  INFO(rep.summary());
  CHECK(rep.passed);
}

}  // namespace

TEST_CASE("eem position embedding") {
  std::mt19937_64 rng(1);
  ParamStore params;
  eem::init_params(params, tiny_eem(), rng);
  auto& w = params.get("eem.phi_p.weight");
  auto& b = params.get("eem.phi_p.bias");
  std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
  for (std::size_t i = 0; i < b.numel(); ++i) b.mutable_data()[i] = (i % 2 ? -0.5 : 0.5);
  const corpus::Box boxes[] = {random_box(rng), random_box(rng)};
  const corpus::Box others[] = {random_box(rng), random_box(rng)};
  auto p = eem::position_embed(params, boxes, others);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t i = 0; i < b.numel(); ++i) CHECK(p.data()[r * b.numel() + i] == std::max(0.0, b.data()[i]));

  ParamStore fresh;
  eem::init_params(fresh, tiny_eem(), rng);
  const corpus::Box same[] = {boxes[0]};
  auto q = eem::position_embed(fresh, same, same);
  auto q2 = eem::position_embed(fresh, same, same);
  CHECK(std::equal(q.data().begin(), q.data().end(), q2.data().begin()));

  const corpus::Box sb[] = {boxes[0], boxes[1], others[0]};
  const corpus::Box ob[] = {others[1], boxes[0], boxes[1]};
  auto weights = projection({3, 8}, rng);
  auto pw = fresh.get("eem.phi_p.weight"), pb = fresh.get("eem.phi_p.bias");
  expect_grad_ok([&] { return project(eem::position_embed(fresh, sb, ob), weights); }, {pw, pb});
}

TEST_CASE("eem estimate") {
  std::mt19937_64 rng(2);
  const auto cfg = tiny_eem();
  ParamStore params;
  eem::init_params(params, cfg, rng);
  eem::PairBatch batch;
  batch.push_back(1, 3, random_box(rng), random_box(rng));
  batch.push_back(4, 0, random_box(rng), random_box(rng));
  auto d = eem::estimate(params, batch);
  CHECK(d.shape() == Shape{2, cfg.num_predicates});

  eem::PairBatch swapped;
  swapped.push_back(3, 1, batch.subject_boxes[0], batch.object_boxes[0]);
  auto e = eem::estimate(params, swapped);
  bool differs = false;
  for (std::size_t r = 0; r < cfg.num_predicates; ++r) differs |= e.data()[r] != d.data()[r];
  CHECK(differs);

  auto again = eem::estimate(params, batch);
  CHECK(std::equal(d.data().begin(), d.data().end(), again.data().begin()));

  eem::PairBatch bad;
  bad.push_back(5, 0, random_box(rng), random_box(rng));
  CHECK_THROWS_AS(eem::estimate(params, bad), std::out_of_range);

  auto w = projection({2, cfg.num_predicates}, rng);
  expect_grad_ok([&] { return project(eem::estimate(params, batch), w); }, all_params(params));
}

TEST_CASE("eem estimate loss") {
  auto t = Tensor::from({1, 3}, {0.2, 0.5, 0.3});
  CHECK(std::abs(eem::est_loss(t, t).item()) <= 1e-9);
  CHECK(eem::est_loss(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 1})).item() == doctest::Approx(1.0));
  CHECK(eem::est_loss(ops::scale(t, -1.0), t).item() == doctest::Approx(2.0));

  std::mt19937_64 rng(3);
  auto d = random_tensor({4, 5}, rng, -1, 1, false), target = random_tensor({4, 5}, rng, 0, 1, false);
  const double base = eem::est_loss(d, target).item();
  for (double k : {1e-3, 0.5, 7.0, 1e4}) CHECK(std::abs(eem::est_loss(ops::scale(d, k), target).item() - base) <= 1e-9);
  CHECK(base >= 0.0);
  CHECK(base <= 8.0);

  // Targets are constants built from the statistics.
  corpus::StatsTables st;
  st.num_objects = 2;
  st.num_predicates = 2;
  st.s_marg = {0.5, 0.5, 0.2, 0.8};
  st.o_marg = {1.0, 0.0, 0.5, 0.5};
  eem::PairBatch batch;
  batch.push_back(1, 1, random_box(rng), random_box(rng));
  auto jt = eem::joint_targets(batch, st);
  CHECK_FALSE(jt.requires_grad());
  CHECK(jt.data()[0] == 0.1);
  CHECK(jt.data()[1] == 0.4);

  auto dd = random_tensor({4, 5}, rng);
  expect_grad_ok([&] { return eem::est_loss(dd, target); }, {dd});
}

TEST_CASE("lmm language map") {
  auto cfg = tiny_lmm();
  cfg.embed_dim = 2;
  cfg.pool_size = 2;
  cfg.num_objects = 1;
  ParamStore params;
  params.add(eem::kSubjectEmbedding, Tensor::from({1, 2}, {1, 2}));
  params.add(eem::kObjectEmbedding, Tensor::from({1, 2}, {3, 4}));
  auto x = lmm::language_map(params, cfg, 0, 0);
  CHECK(x.shape() == Shape{1, 2, 2});
  CHECK(std::vector<double>(x.data().begin(), x.data().end()) == std::vector<double>{3, 4, 6, 8});
  CHECK_THROWS_AS(lmm::language_map(params, cfg, 1, 0), std::out_of_range);

  ParamStore zero;
  zero.add(eem::kSubjectEmbedding, Tensor::zeros({1, 2}));
  zero.add(eem::kObjectEmbedding, Tensor::from({1, 2}, {3, 4}));
  auto zero_map = lmm::language_map(zero, cfg, 0, 0);
  for (double v : zero_map.data()) CHECK(v == 0.0);

  // Rank one: every 2x2 minor vanishes.
  std::mt19937_64 rng(4);
  auto big = tiny_lmm();
  ParamStore rp;
  eem::init_params(rp, {big.num_objects, 5, big.embed_dim, 8, 8}, rng);
  auto m = lmm::language_map(rp, big, 2, 3);
  const auto D = m.data();
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t d = c + 1; d < 4; ++d)
          CHECK(std::abs(D[a * 4 + c] * D[b * 4 + d] - D[a * 4 + d] * D[b * 4 + c]) <= 1e-9);
}

TEST_CASE("lmm channel attention") {
  std::mt19937_64 rng(5);
  const auto cfg = tiny_lmm();
  ParamStore params;
  eem::init_params(params, {cfg.num_objects, 5, cfg.embed_dim, 8, 8}, rng);
  lmm::init_params(params, cfg, rng);
  auto zero = lmm::channel_attention(params, cfg, Tensor::zeros({1, cfg.embed_dim, cfg.embed_dim}));
  CHECK(zero.shape() == Shape{cfg.channels, 1, 1});
  for (double v : zero.data()) CHECK(v == 0.0);

  auto f = lmm::channel_attention(params, cfg, lmm::language_map(params, cfg, 1, 2));
  for (double v : f.data()) CHECK(v >= 0.0);

  for (std::size_t dw : {4u, 8u, 12u}) {
    auto c2 = cfg;
    c2.embed_dim = dw;
    CHECK(lmm::channel_attention(params, c2, Tensor::full({1, dw, dw}, 0.3)).shape() == Shape{cfg.channels, 1, 1});
  }
  auto bad = cfg;
  bad.embed_dim = 6;
  bad.pool_size = 4;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(lmm::channel_attention(params, cfg, Tensor::zeros({1, 5, 5})));
  auto odd = cfg;
  odd.channels = 3;
  CHECK_THROWS(odd.validate());

  // Give conv biases a positive offset so the relu stack is active.
  for (const char* name : {"lmm.conv1.bias", "lmm.conv2.bias"}) {
    auto b = params.get(name).mutable_data();
    for (auto& v : b) v = 0.2;
  }
  auto w = projection({cfg.channels, 1, 1}, rng);
  auto ws = params.get(eem::kSubjectEmbedding), wo = params.get(eem::kObjectEmbedding);
  expect_grad_ok(
      [&] { return project(lmm::channel_attention(params, cfg, lmm::language_map(params, cfg, 1, 2)), w); },
      {ws, wo, params.get("lmm.conv1.weight"), params.get("lmm.conv1.bias"),
       params.get("lmm.conv2.weight"), params.get("lmm.conv2.bias")});
}

TEST_CASE("lmm edge bias") {
  std::mt19937_64 rng(6);
  auto e = random_tensor({3, 2, 2}, rng, -1, 1, false);
  auto same = lmm::apply_edge_bias(e, Tensor::zeros({3, 1, 1}));
  CHECK(std::equal(same.data().begin(), same.data().end(), e.data().begin()));

  auto delta = lmm::apply_edge_bias(Tensor::zeros({3, 2, 2}), Tensor::from({3, 1, 1}, {0, 0.7, 0}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t q = 0; q < 4; ++q) CHECK(delta.data()[c * 4 + q] == (c == 1 ? 0.7 : 0.0));

  auto f = random_tensor({3, 1, 1}, rng, 0, 1, false);
  auto out = lmm::apply_edge_bias(e, f);
  auto bias_only = lmm::apply_edge_bias(Tensor::zeros({3, 2, 2}), f);
  for (std::size_t c = 0; c < 3; ++c) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t q = 0; q < 4; ++q) {
      const std::size_t i = c * 4 + q;
      CHECK(out.data()[i] == e.data()[i] + f.data()[c]);
      CHECK(std::abs(out.data()[i] - bias_only.data()[i] - e.data()[i]) <= 1e-12);
      lo = std::min(lo, bias_only.data()[i]);
      hi = std::max(hi, bias_only.data()[i]);
    }
    CHECK(hi - lo == 0.0);
  }
  CHECK_THROWS_AS(lmm::apply_edge_bias(e, Tensor::zeros({4, 1, 1})), ShapeError);
}

TEST_CASE("lmm zero-initialized final conv leaves edges unchanged") {
  std::mt19937_64 rng(7);
  auto cfg = tiny_lmm();
  cfg.zero_init = true;
  ParamStore params;
  eem::init_params(params, {cfg.num_objects, 5, cfg.embed_dim, 8, 8}, rng);
  lmm::init_params(params, cfg, rng);
  auto e = random_tensor({cfg.channels, 3, 3}, rng, -1, 1, false);
  for (int s = 0; s < 5; ++s)
    for (int o = 0; o < 5; ++o) {
      auto out = lmm::apply_edge_bias(e, lmm::channel_attention(params, cfg, lmm::language_map(params, cfg, s, o)));
      CHECK(std::equal(out.data().begin(), out.data().end(), e.data().begin()));
    }
}

TEST_CASE("lmm unshared embeddings are separate parameters") {
  std::mt19937_64 rng(8);
  auto cfg = tiny_lmm();
  cfg.share_embeddings = false;
  ParamStore params;
  lmm::init_params(params, cfg, rng);
  CHECK(params.contains("lmm.w_s"));
  CHECK(params.contains("lmm.w_o"));
  CHECK_NOTHROW(lmm::language_map(params, cfg, 0, 1));
}

TEST_CASE("sem input packing") {
  std::mt19937_64 rng(9);
  const auto cfg = tiny_sem();
  ParamStore params;
  sem::init_params(params, cfg, rng);
  const int one[] = {2};
  const corpus::Box b = random_box(rng);
  const corpus::Box one_box[] = {b};
  CHECK(sem::pack_input(params, cfg, one, one_box).shape() == Shape{1, cfg.model_dim});
  const int twins[] = {3, 3};
  const corpus::Box twin_boxes[] = {b, b};
  auto I = sem::pack_input(params, cfg, twins, twin_boxes);
  for (std::size_t i = 0; i < cfg.model_dim; ++i) CHECK(I.data()[i] == I.data()[cfg.model_dim + i]);
  CHECK_THROWS_AS(sem::pack_input(params, cfg, {}, {}), sem::EmptySceneError);
  CHECK_THROWS_AS(sem::pack_input(params, cfg, twins, one_box), ShapeError);

  const int labels[] = {0, 4, 1};
  const corpus::Box boxes[] = {random_box(rng), random_box(rng), random_box(rng)};
  auto w = projection({3, cfg.model_dim}, rng);
  expect_grad_ok([&] { return project(sem::pack_input(params, cfg, labels, boxes), w); },
                 {params.get("sem.w_c"), params.get("sem.pos.weight"), params.get("sem.pos.bias"),
                  params.get("sem.input.weight"), params.get("sem.input.bias")});
}

TEST_CASE("sem attention layer") {
  std::mt19937_64 rng(10);
  const auto cfg = tiny_sem();
  ParamStore params;
  sem::init_params(params, cfg, rng);

  // One token: each head returns its V row.
  auto x1 = random_tensor({1, cfg.model_dim}, rng, -1, 1, false);
  std::vector<Tensor> weights;
  auto y1 = sem::attention_layer(params, cfg, 0, x1, &weights);
  for (const auto& a : weights) CHECK(a.data()[0] == 1.0);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h)
    heads.push_back(ops::matmul(x1, params.get("sem.layer0.head" + std::to_string(h) + ".v")));
  auto expected = linear(params, "sem.layer0.psi", ops::concat(heads, 1));
  for (std::size_t i = 0; i < cfg.model_dim; ++i) CHECK(y1.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-12));

  // Rows of every attention matrix are distributions.
  weights.clear();
  auto x = random_tensor({5, cfg.model_dim}, rng, -2, 2, false);
  sem::attention_layer(params, cfg, 1, x, &weights);
  REQUIRE(weights.size() == cfg.heads);
  for (const auto& a : weights)
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        CHECK(a.data()[r * 5 + c] >= 0.0);
        total += a.data()[r * 5 + c];
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }

  // Two identical tokens attend uniformly: output is psi(mean of V rows).
  auto row = random_tensor({1, cfg.model_dim}, rng, -1, 1, false);
  auto two = ops::concat({row, row}, 0);
  weights.clear();
  auto y2 = sem::attention_layer(params, cfg, 0, two, &weights);
  for (const auto& a : weights)
    for (double v : a.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  for (std::size_t i = 0; i < cfg.model_dim; ++i) CHECK(y2.data()[i] == y2.data()[cfg.model_dim + i]);
  // Manual: softmax of equal scores is 1/2, V rows are equal, so the mean is V(row).
  std::vector<Tensor> manual;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    auto v = ops::matmul(two, params.get("sem.layer0.head" + std::to_string(h) + ".v"));
    manual.push_back(ops::scale(ops::add(ops::slice_rows(v, 0, 1), ops::slice_rows(v, 1, 2)), 0.5));
  }
  auto want = linear(params, "sem.layer0.psi", ops::concat(manual, 1));
  for (std::size_t i = 0; i < cfg.model_dim; ++i) CHECK(y2.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));

  CHECK_THROWS_AS(sem::attention_layer(params, cfg, 0, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("sem scene encoder") {
  std::mt19937_64 rng(11);
  const auto cfg = tiny_sem();
  ParamStore params;
  sem::init_params(params, cfg, rng);
  const int labels[] = {0, 4, 1, 4};
  const corpus::Box boxes[] = {random_box(rng), random_box(rng), random_box(rng), random_box(rng)};
  auto I = sem::pack_input(params, cfg, labels, boxes);
  auto S = sem::scene_encode(params, cfg, I);
  CHECK(S.shape() == Shape{4, cfg.out_dim});

  // Permutation equivariance.
  const std::vector<int> perm{2, 0, 3, 1};
  auto permuted = sem::scene_encode(params, cfg, ops::gather_rows(I, perm));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < cfg.out_dim; ++c)
      CHECK(std::abs(permuted.data()[r * cfg.out_dim + c] -
                     S.data()[static_cast<std::size_t>(perm[r]) * cfg.out_dim + c]) <= 1e-9);

  // Single-entity scenes pass through.
  auto single = sem::scene_encode(params, cfg, ops::slice_rows(I, 0, 1));
  for (double v : single.data()) CHECK(std::isfinite(v));

  // Zeroing the FFN output collapses a block to LayerNorm(attention output).
  auto zeroed = params.clone();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (auto& v : zeroed.get("sem.layer" + std::to_string(l) + ".ffn2.weight").mutable_data()) v = 0.0;
    for (auto& v : zeroed.get("sem.layer" + std::to_string(l) + ".ffn2.bias").mutable_data()) v = 0.0;
  }
  auto att = sem::attention_layer(zeroed, cfg, 0, I);
  auto block = ops::layer_norm(att, zeroed.get("sem.layer0.ln.gain"), zeroed.get("sem.layer0.ln.bias"), cfg.ln_eps);
  auto one_layer = cfg;
  one_layer.layers = 1;
  auto direct = linear(zeroed, "sem.output", block);
  auto via_encoder = sem::scene_encode(zeroed, one_layer, I);
  for (std::size_t i = 0; i < direct.numel(); ++i) {
    CHECK(std::isfinite(via_encoder.data()[i]));
    CHECK(via_encoder.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-12));
  }
  // Default layer-norm parameters give zero-mean rows.
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0;
    for (std::size_t c = 0; c < cfg.model_dim; ++c) mean += block.data()[r * cfg.model_dim + c];
    CHECK(std::abs(mean / cfg.model_dim) <= 1e-9);
  }

  auto w = projection({3, cfg.out_dim}, rng);
  auto I3 = ops::slice_rows(I, 0, 3).detach();
  expect_grad_ok([&] { return project(sem::scene_encode(params, cfg, I3), w); }, all_params(params));

  auto residual = cfg;
  residual.attention_residual = true;
  auto R = sem::scene_encode(params, residual, I);
  bool differs = false;
  for (std::size_t i = 0; i < R.numel(); ++i) differs |= R.data()[i] != S.data()[i];
  CHECK(differs);
}

TEST_CASE("sem node update") {
  std::mt19937_64 rng(12);
  auto s = random_tensor({3, 32}, rng, -1, 1, false);
  auto n = random_tensor({3, 64}, rng, -1, 1, false);
  auto u = sem::node_update(s, n);
  CHECK(u.shape() == Shape{3, 96});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 32; ++c) CHECK(u.data()[r * 96 + c] == s.data()[r * 32 + c]);
    for (std::size_t c = 0; c < 64; ++c) CHECK(u.data()[r * 96 + 32 + c] == n.data()[r * 64 + c]);
  }
  CHECK_THROWS_AS(sem::node_update(s, random_tensor({2, 64}, rng)), ShapeError);
}
