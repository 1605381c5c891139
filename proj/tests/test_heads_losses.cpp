#include <doctest.h>

#include <cmath>
#include <limits>

#include "magnifier/errors.hpp"
#include "magnifier/losses.hpp"
#include "magnifier/maskhead.hpp"
#include "magnifier/sfb.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace magnifier;
using magnifier::testing::random_tensor;

namespace {

oracle::GruScalarWeights random_gru(RngStream& rng, std::size_t in, std::size_t hd, double s) {
  auto v = [&](std::size_t n) {
    oracle::Vec out(n);
    for (auto& x : out) x = s * rng.normal();
    return out;
  };
  return {v(hd * in), v(hd * hd), v(hd), v(hd * in), v(hd * hd), v(hd), v(hd * in), v(hd * hd), v(hd)};
}

GruWeights<double> bind_gru(Tape<double>& tape, const oracle::GruScalarWeights& w,
                            std::size_t in, std::size_t hd) {
  auto m = [&](const oracle::Vec& v, std::size_t cols) {
    return tape.variable(cols ? Tensor<double>(Shape{hd, cols}, v) : Tensor<double>(Shape{hd}, v));
  };
  return {m(w.wz, in), m(w.uz, hd), m(w.bz, 0), m(w.wr, in), m(w.ur, hd),
          m(w.br, 0),  m(w.wh, in), m(w.uh, hd), m(w.bh, 0)};
}

std::vector<Var<double>> pooled_vars(Tape<double>& tape, const std::vector<oracle::Vec>& rows) {
  std::vector<Var<double>> out;
  for (const auto& r : rows) out.push_back(tape.variable(Tensor<double>(Shape{1, r.size()}, r)));
  return out;
}

std::vector<oracle::Vec> random_rows(RngStream& rng, std::size_t k, std::size_t c) {
  std::vector<oracle::Vec> rows(k, oracle::Vec(c));
  for (auto& r : rows)
    for (auto& v : r) v = rng.normal();
  return rows;
}

}  // namespace

TEST_CASE("fuse_sequential: single step, zero weights and unrolled oracle") {
  RngStream rng(1);
  const std::size_t c = 4, hd = 3;
  {
    auto w = random_gru(rng, c, hd, 0.7);
    auto rows = random_rows(rng, 1, c);
    Tape<double> tape;
    auto pooled = pooled_vars(tape, rows);
    const std::vector<std::size_t> order{0};
    auto out = sfb::fuse_sequential<double>(pooled, order, bind_gru(tape, w, c, hd));
    const auto ref = oracle::gru_step(rows[0], oracle::Vec(hd, 0.0), w);
    for (std::size_t i = 0; i < hd; ++i) CHECK(std::abs(out.value()[i] - ref[i]) < 1e-12);
  }
  {
    auto w = random_gru(rng, c, hd, 0.0);
    Tape<double> tape;
    auto pooled = pooled_vars(tape, random_rows(rng, 5, c));
    const std::vector<std::size_t> order{0, 1, 2, 3, 4};
    auto out = sfb::fuse_sequential<double>(pooled, order, bind_gru(tape, w, c, hd));
    for (auto v : out.value().storage()) CHECK(v == 0.0);
  }
  for (int trial = 0; trial < 10; ++trial) {
    auto w = random_gru(rng, c, hd, 0.7);
    auto rows = random_rows(rng, 3, c);
    const std::vector<std::size_t> order{2, 0, 1};
    Tape<double> tape;
    auto pooled = pooled_vars(tape, rows);
    auto out = sfb::fuse_sequential<double>(pooled, order, bind_gru(tape, w, c, hd));
    oracle::Vec h(hd, 0.0);
    for (auto k : order) h = oracle::gru_step(rows[k], h, w);
    REQUIRE(out.shape() == Shape{1, hd});
    for (std::size_t i = 0; i < hd; ++i) CHECK(std::abs(out.value()[i] - h[i]) < 1e-6);
  }
}

TEST_CASE("fuse_sequential: order sensitivity and gradient reach") {
  RngStream rng(2);
  const std::size_t c = 4, hd = 5;
  auto w = random_gru(rng, c, hd, 0.8);
  auto rows = random_rows(rng, 4, c);
  const std::vector<std::size_t> fwd{0, 1, 2, 3}, rev{3, 2, 1, 0};
  Tape<double> tape;
  auto pooled = pooled_vars(tape, rows);
  auto a = sfb::fuse_sequential<double>(pooled, fwd, bind_gru(tape, w, c, hd));
  auto b = sfb::fuse_sequential<double>(pooled, rev, bind_gru(tape, w, c, hd));
  CHECK_FALSE(a.value() == b.value());
  tape.backward(testing::probe(a));
  for (const auto& p : pooled) {
    const auto g = tape.grad(p);
    double norm = 0;
    for (auto v : g.storage()) norm += v * v;
    CHECK(norm > 0.0);
  }

  // Identical inputs with zero input weights: gates see only h, order cannot matter.
  auto w0 = random_gru(rng, c, hd, 0.8);
  std::fill(w0.wz.begin(), w0.wz.end(), 0.0);
  std::fill(w0.wr.begin(), w0.wr.end(), 0.0);
  std::fill(w0.wh.begin(), w0.wh.end(), 0.0);
  std::vector<oracle::Vec> same(4, rows[0]);
  Tape<double> t2;
  auto p2 = pooled_vars(t2, same);
  auto x = sfb::fuse_sequential<double>(p2, fwd, bind_gru(t2, w0, c, hd));
  auto y = sfb::fuse_sequential<double>(p2, rev, bind_gru(t2, w0, c, hd));
  CHECK(x.value() == y.value());

  CHECK_THROWS_AS(sfb::validate_region_order(std::vector<std::size_t>{0, 0, 1}, 3), ConfigError);
  CHECK(sfb::default_region_order() == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("ablation_branch: identity, zero and linear-map oracle") {
  RngStream rng(3);
  const std::size_t k = 4, c = 3;
  const std::vector<std::size_t> order{0, 1, 2, 3};
  auto rows = random_rows(rng, k, c);
  Tape<double> tape;
  auto pooled = pooled_vars(tape, rows);

  std::vector<Var<double>> eye_w, zero_w, bias;
  Tensor<double> eye(Shape{c, c});
  for (std::size_t i = 0; i < c; ++i) eye.at({i, i}) = 1.0;
  for (std::size_t r = 0; r < k; ++r) {
    eye_w.push_back(tape.constant(eye));
    zero_w.push_back(tape.constant(Tensor<double>(Shape{c, c})));
    bias.push_back(tape.constant(Tensor<double>(Shape{c})));
  }
  auto id = sfb::ablation_branch<double>(pooled, order, eye_w, bias, k * c);
  REQUIRE(id.shape() == Shape{1, k * c});
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < c; ++j) CHECK(id.value()[r * c + j] == rows[r][j]);
  auto z = sfb::ablation_branch<double>(pooled, order, zero_w, bias, k * c);
  for (auto v : z.value().storage()) CHECK(v == 0.0);

  const std::size_t out_w = 2;
  std::vector<Tensor<double>> ws, bs;
  std::vector<Var<double>> wv, bv;
  for (std::size_t r = 0; r < k; ++r) {
    ws.push_back(random_tensor(rng, {out_w, c}));
    bs.push_back(random_tensor(rng, {out_w}));
    wv.push_back(tape.constant(ws.back()));
    bv.push_back(tape.constant(bs.back()));
  }
  auto e = sfb::ablation_branch<double>(pooled, order, wv, bv, k * out_w);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t o = 0; o < out_w; ++o) {
      double ref = bs[r][o];
      for (std::size_t j = 0; j < c; ++j) ref += ws[r].at({o, j}) * rows[r][j];
      CHECK(std::abs(e.value()[r * out_w + o] - ref) < 1e-12);
    }
  CHECK_THROWS_AS(sfb::ablation_width(10, 8), ConfigError);
  CHECK(sfb::ablation_width(64, 8) == 8);
}

namespace {

struct NeckFixture {
  BatchNormStats<double> stats;
  losses::NeckVars<double> neck;
  NeckFixture(Tape<double>& tape, std::size_t d, Tensor<double> classifier) : stats(d) {
    neck.bn_scale = tape.constant(Tensor<double>(Shape{d}, 1.0));
    neck.bn_shift = tape.constant(Tensor<double>(Shape{d}));
    neck.classifier = tape.constant(std::move(classifier));
    neck.stats = &stats;
  }
};

}  // namespace

TEST_CASE("per_region_supervision: saturated, uniform and compositional cases") {
  RngStream rng(4);
  const std::size_t k = 3, c = 4, ids = 5;
  const std::vector<std::size_t> labels{0, 1, 2, 3};
  {
    Tape<double> tape;
    std::vector<Var<double>> pooled;
    for (std::size_t r = 0; r < k; ++r) pooled.push_back(tape.constant(random_tensor(rng, {4, c})));
    std::vector<NeckFixture> fx;
    fx.reserve(k);
    std::vector<losses::NeckVars<double>> heads;
    for (std::size_t r = 0; r < k; ++r) {
      fx.emplace_back(tape, c, Tensor<double>(Shape{ids, c}));
      heads.push_back(fx.back().neck);
    }
    auto l = sfb::per_region_supervision<double>(pooled, heads, labels, BnMode::kTrain);
    REQUIRE(l.size() == k);
    for (auto& v : l) CHECK(v.value().item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK_THROWS_AS(sfb::per_region_supervision<double>(pooled, heads, labels, BnMode::kEval),
                    ContractError);
  }
  {
    // Eval-free saturated case: post-neck features are one-hot-ish, classifier scaled up.
    Tape<double> tape;
    Tensor<double> x(Shape{4, c});
    for (std::size_t b = 0; b < 4; ++b) x.at({b, b}) = 1.0;
    Tensor<double> cls(Shape{ids, c});
    for (std::size_t i = 0; i < c; ++i) cls.at({i, i}) = 50.0;
    std::vector<Var<double>> pooled{tape.constant(x)};
    NeckFixture fx(tape, c, cls);
    std::vector<losses::NeckVars<double>> heads{fx.neck};
    auto l = sfb::per_region_supervision<double>(pooled, heads, labels, BnMode::kTrain);
    CHECK(l[0].value().item() < 1e-6);
  }
  for (int trial = 0; trial < 5; ++trial) {
    Tape<double> tape;
    std::vector<Var<double>> pooled;
    std::vector<NeckFixture> fx;
    fx.reserve(k);
    std::vector<losses::NeckVars<double>> heads;
    for (std::size_t r = 0; r < k; ++r) {
      pooled.push_back(tape.constant(random_tensor(rng, {4, c})));
      fx.emplace_back(tape, c, random_tensor(rng, {ids, c}));
      heads.push_back(fx.back().neck);
    }
    auto l = sfb::per_region_supervision<double>(pooled, heads, labels, BnMode::kTrain);
    for (std::size_t r = 0; r < k; ++r) {
      BatchNormStats<double> st(c);
      auto feat = batchnorm(pooled[r], heads[r].bn_scale, heads[r].bn_shift, st, BnMode::kTrain,
                            0.1, 1e-5);
      auto ref = softmax_cross_entropy(linear(feat, heads[r].classifier),
                                       std::span<const std::size_t>(labels));
      CHECK(std::abs(l[r].value().item() - ref.value().item()) < 1e-12);
    }
  }
}

TEST_CASE("maskhead: zero weights give all-ones masks; random input matches conv oracle") {
  RngStream rng(5);
  const std::size_t c = 3, mid = 4, k = 2, h = 4, w = 3;
  auto zero = [](Shape s) { return Tensor<double>(std::move(s)); };
  {
    Tape<double> tape;
    maskhead::MaskHeadVars<double> head{
        tape.constant(zero({mid, c, 3, 3})), tape.constant(zero({mid})),
        tape.constant(zero({mid, mid, 3, 3})), tape.constant(zero({mid})),
        tape.constant(zero({k, mid, 1, 1})), tape.constant(zero({k}))};
    auto logits = maskhead::predict_masks(tape.constant(random_tensor(rng, {1, c, h, w})), head);
    for (auto v : logits.value().storage()) CHECK(v == 0.0);
    const auto bin = maskhead::binarize(logits.value());
    for (auto v : bin.storage()) CHECK(v == 1.0);
  }
  auto x = random_tensor(rng, {1, c, h, w});
  auto w1 = random_tensor(rng, {mid, c, 3, 3}), b1 = random_tensor(rng, {mid});
  auto w2 = random_tensor(rng, {mid, mid, 3, 3}), b2 = random_tensor(rng, {mid});
  auto w3 = random_tensor(rng, {k, mid, 1, 1}), b3 = random_tensor(rng, {k});
  Tape<double> tape;
  maskhead::MaskHeadVars<double> head{tape.constant(w1), tape.constant(b1), tape.constant(w2),
                                      tape.constant(b2), tape.constant(w3), tape.constant(b3)};
  auto logits = maskhead::predict_masks(tape.constant(x), head);
  std::size_t ho = 0, wo = 0;
  auto r = [](oracle::Vec v) {
    for (auto& e : v) e = std::max(0.0, e);
    return v;
  };
  auto a1 = r(oracle::conv2d(x.storage(), 1, c, h, w, w1.storage(), mid, 3, 3, b1.storage(), 1, 1, ho, wo));
  auto a2 = r(oracle::conv2d(a1, 1, mid, h, w, w2.storage(), mid, 3, 3, b2.storage(), 1, 1, ho, wo));
  auto a3 = oracle::conv2d(a2, 1, mid, h, w, w3.storage(), k, 1, 1, b3.storage(), 1, 0, ho, wo);
  REQUIRE(logits.shape() == Shape{1, k, h, w});
  for (std::size_t i = 0; i < a3.size(); ++i) CHECK(std::abs(logits.value()[i] - a3[i]) < 1e-9);
}

TEST_CASE("mask_loss: saturated, ln 2 and scalar oracle") {
  RngStream rng(6);
  Tape<double> tape;
  Tensor<double> target(Shape{1, 2, 2, 2}, {1, 0, 0, 1, 1, 1, 0, 0});
  Tensor<double> sat(target.shape());
  for (std::size_t i = 0; i < sat.size(); ++i) sat[i] = target[i] == 1.0 ? 20.0 : -20.0;
  CHECK(maskhead::mask_loss(tape.constant(sat), target).value().item() < 1e-6);
  CHECK(maskhead::mask_loss(tape.constant(Tensor<double>(target.shape())), target).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_tensor(rng, {1, 3, 2, 2}, 2.0);
    auto y = testing::uniform_tensor(rng, {1, 3, 2, 2}, 0.0, 1.0);
    double ref = 0;
    for (std::size_t i = 0; i < z.size(); ++i) ref += oracle::bce(z[i], y[i]);
    ref /= static_cast<double>(z.size());
    const double got = maskhead::mask_loss(tape.constant(z), y).value().item();
    CHECK(std::abs(got - ref) < 1e-6);
    CHECK(got >= 0.0);
  }
}

TEST_CASE("bnneck_cls: identity neck, uniform classifier and compositional oracle") {
  RngStream rng(7);
  const std::vector<std::size_t> labels{0, 1, 1, 2};
  const std::size_t d = 3, ids = 6;
  {
    Tape<double> tape;
    auto emb = random_tensor(rng, {4, d});
    auto cls = random_tensor(rng, {ids, d});
    NeckFixture fx(tape, d, cls);
    auto out = losses::bnneck_cls(tape.constant(emb), fx.neck, labels, BnMode::kEval);
    // Eval-mode neck with unit running variance scales by 1/sqrt(1+eps).
    auto ref = softmax_cross_entropy(
        linear(scale(tape.constant(emb), 1.0 / std::sqrt(1.0 + losses::kNeckEps)),
               tape.constant(cls)),
        std::span<const std::size_t>(labels));
    CHECK(out.cls_loss.value().item() == doctest::Approx(ref.value().item()).epsilon(1e-12));
  }
  {
    Tape<double> tape;
    NeckFixture fx(tape, d, Tensor<double>(Shape{ids, d}));
    auto out = losses::bnneck_cls(tape.constant(random_tensor(rng, {4, d})), fx.neck, labels,
                                  BnMode::kTrain);
    CHECK(out.cls_loss.value().item() == doctest::Approx(std::log(6.0)).epsilon(1e-12));
    auto none = losses::bnneck_cls(tape.constant(random_tensor(rng, {4, d})), fx.neck, {},
                                   BnMode::kTrain);
    CHECK_FALSE(none.has_loss);
  }
}

TEST_CASE("batch_hard_triplet: degenerate, satisfied and hand-set cases") {
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  Tape<double> tape;
  auto same = losses::batch_hard_triplet(tape.constant(Tensor<double>(Shape{4, 2}, 0.4)),
                                         std::span<const std::size_t>(labels), 0.3);
  CHECK(same.value().item() == doctest::Approx(0.3).epsilon(1e-12));
  auto far = losses::batch_hard_triplet(
      tape.constant(Tensor<double>(Shape{4, 2}, {0, 0, 0, 0, 5, 0, 5, 0})),
      std::span<const std::size_t>(labels), 0.3);
  CHECK(far.value().item() == 0.0);

  const std::vector<oracle::Vec> pts{{0, 0}, {1, 0}, {0.5, 0.6}, {2, 2}};
  oracle::Vec flat;
  for (const auto& p : pts) flat.insert(flat.end(), p.begin(), p.end());
  auto hand = losses::batch_hard_triplet(tape.constant(Tensor<double>(Shape{4, 2}, flat)),
                                         std::span<const std::size_t>(labels), 0.3);
  CHECK(std::abs(hand.value().item() - oracle::triplet_enumerate(pts, labels, 0.3)) < 1e-12);

  const std::vector<std::size_t> lonely{0, 1, 2, 3};
  CHECK_THROWS_AS(losses::batch_hard_triplet(tape.constant(Tensor<double>(Shape{4, 2}, flat)),
                                             std::span<const std::size_t>(lonely), 0.3),
                  ContractError);
}

TEST_CASE("batch_hard_triplet: invariant under translation and rotation") {
  RngStream rng(8);
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
  for (int trial = 0; trial < 20; ++trial) {
    auto e = random_tensor(rng, {6, 2});
    const double th = rng.uniform(0, 6.28), tx = rng.normal(), ty = rng.normal();
    Tensor<double> m(e.shape());
    for (std::size_t i = 0; i < 6; ++i) {
      const double x = e.at({i, 0}), y = e.at({i, 1});
      m.at({i, 0}) = std::cos(th) * x - std::sin(th) * y + tx;
      m.at({i, 1}) = std::sin(th) * x + std::cos(th) * y + ty;
    }
    Tape<double> tape;
    auto a = losses::batch_hard_triplet(tape.constant(e), std::span<const std::size_t>(labels), 0.3);
    auto b = losses::batch_hard_triplet(tape.constant(m), std::span<const std::size_t>(labels), 0.3);
    CHECK(a.value().item() == doctest::Approx(b.value().item()).epsilon(1e-10));
  }
}

TEST_CASE("sd_loss: identical, orthogonal, zero-vector and 45-degree cases") {
  Tape<double> tape;
  auto rows = [&](std::vector<oracle::Vec> r) {
    std::vector<Var<double>> out;
    for (auto& v : r) out.push_back(tape.constant(Tensor<double>(Shape{1, v.size()}, v)));
    return out;
  };
  const double eps = 1e-8;
  CHECK(losses::sd_loss<double>(rows({{1, 2}, {1, 2}, {1, 2}}), eps).value().item() ==
        doctest::Approx(1.0).epsilon(1e-12));
  CHECK(losses::sd_loss<double>(rows({{1, 0, 0}, {0, 2, 0}, {0, 0, 3}}), eps).value().item() == 0.0);
  CHECK(losses::sd_loss<double>(rows({{0, 0}, {1, 1}}), eps).value().item() == 0.0);
  const double r2 = std::sqrt(0.5);
  auto v = losses::sd_loss<double>(rows({{1, 0}, {r2, r2}, {0, 1}}), eps).value().item();
  CHECK(v == doctest::Approx(0.4714).epsilon(1e-4));
  CHECK(std::abs(v - std::sqrt(2.0) / 3.0) < 1e-12);
  auto pair = losses::sd_loss<double>(rows({{1, 2}, {3, -1}}), eps).value().item();
  CHECK(std::abs(pair - (3.0 - 2.0) / (std::sqrt(5.0) * std::sqrt(10.0))) < 1e-15);
  CHECK_THROWS_AS(losses::sd_loss<double>(rows({{1, 2}}), eps), ContractError);
}

TEST_CASE("sd_loss: bounded, rescale invariant and equal to the ordered-pair oracle") {
  RngStream rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(3), k = 2 + rng.below(5), c = 1 + rng.below(4);
    std::vector<std::vector<oracle::Vec>> batch(n, std::vector<oracle::Vec>(k, oracle::Vec(c)));
    for (auto& regions : batch)
      for (auto& r : regions)
        for (auto& x : r) x = rng.normal();
    Tape<double> tape;
    auto to_vars = [&](double factor) {
      std::vector<Var<double>> out;
      for (std::size_t r = 0; r < k; ++r) {
        Tensor<double> t(Shape{n, c});
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < c; ++j) t.at({b, j}) = batch[b][r][j] * (r == 0 ? factor : 1.0);
        out.push_back(tape.constant(t));
      }
      return out;
    };
    const double v = losses::sd_loss<double>(to_vars(1.0), 1e-8).value().item();
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
    CHECK(std::abs(v - oracle::sd_cosine(batch, 1e-8)) < 1e-12);
    CHECK(std::abs(losses::sd_loss<double>(to_vars(3.7), 1e-8).value().item() - v) < 1e-12);
  }
}

TEST_CASE("total_loss: weights, arithmetic and non-finite abort") {
  Tape<double> tape;
  auto s = [&](double v) { return tape.constant(Tensor<double>::scalar(v)); };
  losses::LossWeights zero{0.0, 0.0, 0.3, 1e-8};
  auto t0 = losses::total_loss(s(1.0), s(0.5), s(2.0), s(0.25), zero);
  CHECK(t0.report.l_total == 1.5);
  losses::LossWeights w{0.001, 2.0, 0.3, 1e-8};
  auto t = losses::total_loss(s(1.0), s(0.5), s(2.0), s(0.25), w);
  CHECK(t.report.l_total == doctest::Approx(2.002).epsilon(1e-12));
  CHECK(t.total.value().item() == doctest::Approx(2.002).epsilon(1e-12));
  losses::LossWeights defaults;
  CHECK(defaults.gamma == 2e-3);
  CHECK(defaults.lambda_mask == 2.0);
  try {
    losses::total_loss(s(1.0), s(std::numeric_limits<double>::quiet_NaN()), s(0.0), s(0.0), w);
    FAIL("expected TrainingAbort");
  } catch (const TrainingAbort& e) {
    CHECK(e.component() == "l_tri");
  }
  // Linear in each weight: d total / d gamma = l_sd.
  const double h = 1e-3;
  losses::LossWeights up = w, down = w;
  up.gamma += h;
  down.gamma -= h;
  const double dg = (losses::total_loss(s(1.0), s(0.5), s(2.0), s(0.25), up).report.l_total -
                     losses::total_loss(s(1.0), s(0.5), s(2.0), s(0.25), down).report.l_total) /
                    (2 * h);
  CHECK(dg == doctest::Approx(2.0).epsilon(1e-9));
  losses::LossWeights bad;
  bad.sd_epsilon = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
