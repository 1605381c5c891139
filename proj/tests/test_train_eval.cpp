#include <doctest.h>

#include <cmath>
#include <numeric>

#include "magnifier/config.hpp"
#include "magnifier/errors.hpp"
#include "magnifier/evalkit.hpp"
#include "magnifier/model.hpp"
#include "magnifier/train.hpp"
#include "magnifier/visualize.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace magnifier;
namespace fs = std::filesystem;

namespace {

// Distances in the order of a desired ranking: position i gets distance i.
std::vector<std::vector<double>> ranked(std::size_t n) {
  std::vector<double> row(n);
  std::iota(row.begin(), row.end(), 1.0);
  return {row};
}

TrainConfig tiny_config(const std::string& components = "full") {
  TrainConfig c;
  c.stage1_epochs = 2;
  c.stage2_epochs = 1;
  c.components = model::Components::parse(components);
  return c;
}

std::vector<std::string> lines(const fs::path& p) {
  std::vector<std::string> out;
  std::istringstream is(test::slurp(p));
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("AP hand case: relevant at ranks 1 and 3") {
  // gallery 0 relevant, 1 irrelevant, 2 relevant, distinct cameras from the query
  const auto r = evalkit::rank_from_distances(ranked(3), {5}, {0}, {5, 6, 5}, {1, 1, 1}, 3);
  CHECK(r.map == doctest::Approx(0.8333333333).epsilon(1e-9));
  CHECK(r.ap[0] == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
  CHECK(r.cmc == std::vector<double>{1, 1, 1});
}

TEST_CASE("perfect retrieval and rank threshold") {
  auto perfect = evalkit::rank_from_distances(ranked(3), {1}, {0}, {1, 2, 3}, {1, 1, 1}, 3);
  CHECK(perfect.rank1() == 1.0);
  CHECK(perfect.map == 1.0);
  auto third = evalkit::rank_from_distances(ranked(3), {1}, {0}, {2, 3, 1}, {1, 1, 1}, 3);
  CHECK(third.cmc[0] == 0.0);
  CHECK(third.cmc[1] == 0.0);
  CHECK(third.cmc[2] == 1.0);
  CHECK(third.map == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("junk exclusion and skipped queries") {
  // Same id, same camera at rank 1 is dropped: the real match moves to rank 1.
  auto r = evalkit::rank_from_distances(ranked(3), {1}, {0}, {1, 2, 1}, {0, 1, 1}, 3);
  CHECK(r.rank1() == 0.0);
  CHECK(r.cmc[1] == 1.0);
  auto s = evalkit::rank_from_distances(ranked(2), {1}, {0}, {1, 2}, {0, 1}, 2);
  CHECK(s.valid == 0);
  CHECK(s.skipped == 1);
  CHECK(std::isnan(s.ap[0]));
}

TEST_CASE("retrieve matches the brute-force oracle on random galleries") {
  RngStream rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t nq = 1 + rng.below(5), ng = 2 + rng.below(19), d = 4;
    evalkit::EmbeddingMatrix q, g;
    q.rows = Tensor<float>(Shape{nq, d});
    g.rows = Tensor<float>(Shape{ng, d});
    for (auto& v : q.rows.storage()) v = static_cast<float>(rng.normal());
    for (auto& v : g.rows.storage()) v = static_cast<float>(rng.normal());
    for (std::size_t i = 0; i < nq; ++i) {
      q.identities.push_back(rng.below(4));
      q.cameras.push_back(rng.below(2));
    }
    for (std::size_t i = 0; i < ng; ++i) {
      g.identities.push_back(rng.below(4));
      g.cameras.push_back(rng.below(2));
    }
    const auto r = evalkit::retrieve(q, g, 20, 3);
    const auto qn = model::l2_normalize_rows(q.rows), gn = model::l2_normalize_rows(g.rows);
    std::vector<oracle::Vec> dist(nq, oracle::Vec(ng));
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < ng; ++j) {
        oracle::Vec a(qn.storage().begin() + i * d, qn.storage().begin() + (i + 1) * d);
        oracle::Vec b(gn.storage().begin() + j * d, gn.storage().begin() + (j + 1) * d);
        dist[i][j] = oracle::euclid(a, b);
      }
    const auto o = oracle::retrieval(dist, q.identities, q.cameras, g.identities, g.cameras, 20);
    CHECK(r.valid == o.valid);
    CHECK(r.map == o.map);
    CHECK(r.cmc == o.cmc);
    for (std::size_t k = 1; k < r.cmc.size(); ++k) CHECK(r.cmc[k] >= r.cmc[k - 1]);
  }
}

TEST_CASE("retrieve: orthogonal invariance and appending a last-ranked distractor") {
  RngStream rng(4);
  const std::size_t nq = 6, ng = 15, d = 5;
  evalkit::EmbeddingMatrix q, g;
  q.rows = Tensor<float>(Shape{nq, d});
  g.rows = Tensor<float>(Shape{ng, d});
  for (auto& v : q.rows.storage()) v = static_cast<float>(rng.normal());
  for (auto& v : g.rows.storage()) v = static_cast<float>(rng.normal());
  for (std::size_t i = 0; i < nq; ++i) {
    q.identities.push_back(i % 3);
    q.cameras.push_back(0);
  }
  for (std::size_t i = 0; i < ng; ++i) {
    g.identities.push_back(i % 4);
    g.cameras.push_back(1);
  }
  const auto base = evalkit::retrieve(q, g, 15);

  // Random orthogonal matrix by Gram-Schmidt.
  std::vector<std::vector<double>> m(d, std::vector<double>(d));
  for (auto& row : m)
    for (auto& v : row) v = rng.normal();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += m[i][k] * m[j][k];
      for (std::size_t k = 0; k < d; ++k) m[i][k] -= dot * m[j][k];
    }
    double n = 0;
    for (auto v : m[i]) n += v * v;
    for (auto& v : m[i]) v /= std::sqrt(n);
  }
  auto rotate = [&](const Tensor<float>& x) {
    Tensor<float> y(x.shape());
    for (std::size_t r = 0; r < x.dim(0); ++r)
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) s += m[i][k] * x[r * d + k];
        y[r * d + i] = static_cast<float>(s);
      }
    return y;
  };
  auto rq = q, rg = g;
  rq.rows = rotate(q.rows);
  rg.rows = rotate(g.rows);
  const auto rot = evalkit::retrieve(rq, rg, 15);
  CHECK(rot.cmc == base.cmc);
  CHECK(rot.map == doctest::Approx(base.map).epsilon(1e-12));

  // Irrelevant identity 9 appended at a distance no normalized pair reaches.
  auto dist = evalkit::pairwise_distances(q.rows, g.rows, 1);
  for (auto& row : dist) row.push_back(10.0);
  auto ids = g.identities, cams = g.cameras;
  ids.push_back(9);
  cams.push_back(1);
  const auto ext = evalkit::rank_from_distances(dist, q.identities, q.cameras, ids, cams, 16);
  for (std::size_t r = 0; r < 15; ++r) CHECK(ext.cmc[r] == base.cmc[r]);
  CHECK(ext.map == base.map);
}

TEST_CASE("pairwise_distances is identical across thread counts") {
  RngStream rng(8);
  Tensor<float> q(Shape{13, 7}), g(Shape{9, 7});
  for (auto& v : q.storage()) v = static_cast<float>(rng.normal());
  for (auto& v : g.storage()) v = static_cast<float>(rng.normal());
  CHECK(evalkit::pairwise_distances(q, g, 1) == evalkit::pairwise_distances(q, g, 4));
  CHECK_THROWS_AS(evalkit::pairwise_distances(q, Tensor<float>(Shape{2, 3}), 1), DimensionError);
}

TEST_CASE("extract_embeddings: determinism, width, duplicate rows") {
  const auto& dir = test::small_dataset();
  const auto m = data::load_manifest(dir);
  auto split = data::load_split(dir, m, "query");
  split = data::gather(split, {0, 1, 2, 0});
  model::Model net(TrainConfig{}.model_config(4), 3);
  const auto a = evalkit::extract_embeddings(net, split, 3);
  const auto b = evalkit::extract_embeddings(net, split, 4);
  CHECK(a.rows == b.rows);
  CHECK(a.rows.dim(1) == 192);
  for (std::size_t k = 0; k < 192; ++k) CHECK(a.rows[k] == a.rows[3 * 192 + k]);
  double n = 0;
  for (std::size_t k = 0; k < 192; ++k) n += a.rows[k] * a.rows[k];
  CHECK(n == doctest::Approx(1.0).epsilon(1e-5));

  model::Model g(tiny_config("G").model_config(4), 3);
  CHECK(evalkit::extract_embeddings(g, split).rows.dim(1) == 64);
}

TEST_CASE("mask_iou and region_cosine run on an untrained model") {
  const auto& dir = test::small_dataset();
  const auto m = data::load_manifest(dir);
  const auto split = data::load_split(dir, m, "gallery");
  model::Model net(TrainConfig{}.model_config(4), 3);
  for (double v : evalkit::mask_iou(net, split, 5)) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const double c = evalkit::region_cosine(net, split);
  CHECK(c > -1.0);
  CHECK(c < 1.0);
  model::Model g(tiny_config("G+M").model_config(4), 3);
  CHECK_THROWS_AS(evalkit::region_cosine(g, split), ContractError);
}

TEST_CASE("backbone kernel size sets conv weights and keeps the feature grid") {
  auto cfg = TrainConfig::from_json(R"({"model": {"backbone_kernel": 3}})");
  model::Model net(cfg.model_config(4), 3);
  CHECK(net.params().at("backbone.conv1.w").value.shape() == Shape{16, 3, 3, 3});
  CHECK(net.params().at("backbone.conv3.w").value.shape() == Shape{64, 32, 3, 3});
  model::Model base(TrainConfig{}.model_config(4), 3);
  Tensor<float> images(Shape{2, 3, 64, 32}, 0.5f);
  CHECK(net.embed(images).shape() == base.embed(images).shape());
  CHECK(cfg.hash() != TrainConfig{}.hash());
}

TEST_CASE("degenerate batch: every branch triplet equals the margin") {
  const auto& dir = test::small_dataset();
  const auto m = data::load_manifest(dir);
  const auto train = data::load_split(dir, m, "train");
  const auto batch = data::gather(train, {0, 0, 0, 0});
  const std::vector<std::size_t> labels{0, 0, 1, 1};
  // SAB draws a different plan per image, so identical inputs only give
  // identical SAB embeddings when every plan keeps all seven parts.
  for (const char* name : {"G", "G+M+SFB", "G+M+AB", "full"}) {
    CAPTURE(name);
    model::Model net(tiny_config(name).model_config(4), 5);
    RngStream rng(1);
    model::TrainContext ctx;
    ctx.strategy = sab::Strategy::kRandomBaseline;
    ctx.k_hat = 7;
    ctx.rng = &rng;
    ctx.weights.gamma = 0;
    Tape<float> tape;
    auto fwd = net.forward(tape, batch.images, &batch.masks, labels, BnMode::kTrain, &ctx);
    CHECK(fwd.loss.report.l_tri == doctest::Approx(0.3).epsilon(1e-6));
  }
}

TEST_CASE("every component setting trains one step end to end") {
  const auto& dir = test::small_dataset();
  for (const char* name : {"G", "G+M", "G+M+SAB", "G+M+SFB", "G+M+AB", "G+M+SAB+AB", "full"}) {
    CAPTURE(name);
    auto cfg = tiny_config(name);
    cfg.max_steps = 1;
    train::TrainOptions opt;
    opt.out_dir = test::temp_dir(std::string("grid_") + (name[2] ? "x" : "g") +
                                 std::to_string(std::hash<std::string>{}(name) % 100000));
    opt.evaluate = false;
    const auto r = train::train_two_stage(cfg, dir, opt);
    REQUIRE(r.steps.size() == 1);
    CHECK(std::isfinite(r.steps[0].loss.l_total));
    if (std::string(name) == "G") CHECK(r.steps[0].loss.l_mask == 0.0);
    if (std::string(name) == "G" || std::string(name) == "G+M") CHECK(r.steps[0].loss.l_sd == 0.0);
  }
}

TEST_CASE("two-stage run: logs, checkpoints, stage settings, dead-parameter detector") {
  const auto& dir = test::small_dataset();
  const auto cfg = tiny_config();
  train::TrainOptions opt;
  opt.out_dir = test::temp_dir("two_stage");
  opt.evaluate = true;
  const auto r = train::train_two_stage(cfg, dir, opt);
  CHECK(r.finished);
  CHECK(r.dead_parameters.empty());
  const std::size_t bpe = data::batches_per_epoch(4, 16, 4, 4);
  CHECK(r.steps.size() == 3 * bpe);
  CHECK(lines(opt.out_dir / "steps.jsonl").size() == 3 * bpe);
  const auto metrics = lines(opt.out_dir / "metrics.jsonl");
  REQUIRE(metrics.size() == 3);
  for (const char* key : {"\"epoch\"", "\"stage\"", "\"l_cls\"", "\"l_tri\"", "\"l_sd\"",
                          "\"l_mask\"", "\"l_total\"", "\"rank1\"", "\"map\""})
    CHECK(metrics[2].find(key) != std::string::npos);
  CHECK(r.epochs[0].stage == 1);
  CHECK(r.epochs[2].stage == 2);
  CHECK(r.epochs[1].evaluated);  // stage boundary
  CHECK(r.epochs[2].evaluated);  // last epoch
  CHECK(fs::exists(opt.out_dir / "stage1.ckpt"));

  // Stage boundary changes only gamma and lr: same parameters in both checkpoints.
  const auto s1 = train::load_checkpoint(opt.out_dir / "stage1.ckpt");
  const auto last = train::load_checkpoint(opt.out_dir / "last.ckpt");
  CHECK(s1.stage == 2);  // saved after the last stage-1 epoch; next epoch is stage 2
  CHECK(s1.state.global_step == 2 * bpe);
  CHECK(last.state.global_step == 3 * bpe);
  CHECK(s1.model->params().size() == last.model->params().size());
  CHECK(s1.model->params().num_scalars() == last.model->params().num_scalars());
}

TEST_CASE("checkpoint round trip restores every tensor") {
  const auto& dir = test::small_dataset();
  auto cfg = tiny_config();
  cfg.max_steps = 2;
  train::TrainOptions opt;
  opt.out_dir = test::temp_dir("ckpt_rt");
  opt.evaluate = false;
  train::train_two_stage(cfg, dir, opt);
  const auto ck = train::load_checkpoint(opt.out_dir / "last.ckpt");
  const auto path2 = opt.out_dir / "copy.ckpt";
  train::save_checkpoint(path2, ck.config, ck.state, *ck.model);
  CHECK(test::slurp(path2) == test::slurp(opt.out_dir / "last.ckpt"));
  for (const auto& [name, p] : ck.model->params()) CHECK(p.step == 2);

  std::ofstream(opt.out_dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(train::load_checkpoint(opt.out_dir / "junk.ckpt"), IoError);
  CHECK_THROWS_AS(train::load_checkpoint(opt.out_dir / "missing.ckpt"), IoError);
}

TEST_CASE("resume determinism: fresh 5 steps vs 3 + resume") {
  const auto& dir = test::small_dataset();
  auto cfg = tiny_config();
  cfg.stage1_epochs = 4;  // one batch per epoch here, so the run crosses the stage boundary
  cfg.stage2_epochs = 2;
  cfg.max_steps = 5;
  train::TrainOptions a;
  a.out_dir = test::temp_dir("resume_a");
  a.evaluate = false;
  const auto full = train::train_two_stage(cfg, dir, a);
  REQUIRE(full.steps.size() == 5);

  train::TrainOptions b = a;
  b.out_dir = test::temp_dir("resume_b");
  auto first = cfg;
  first.max_steps = 3;
  train::train_two_stage(first, dir, b);
  b.resume = b.out_dir / "last.ckpt";
  const auto rest = train::train_two_stage(cfg, dir, b);
  REQUIRE(rest.steps.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(rest.steps[i].step == full.steps[3 + i].step);
    CHECK(train::to_json_line(rest.steps[i]) == train::to_json_line(full.steps[3 + i]));
  }
  CHECK(test::slurp(a.out_dir / "steps.jsonl") == test::slurp(b.out_dir / "steps.jsonl"));
}

TEST_CASE("resume refuses a different config and names the differing key") {
  const auto& dir = test::small_dataset();
  auto cfg = tiny_config();
  cfg.max_steps = 1;
  train::TrainOptions opt;
  opt.out_dir = test::temp_dir("resume_mismatch");
  opt.evaluate = false;
  train::train_two_stage(cfg, dir, opt);
  auto other = cfg;
  other.loss.gamma = 0.5;
  opt.resume = opt.out_dir / "last.ckpt";
  try {
    train::train_two_stage(other, dir, opt);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("loss.gamma") != std::string::npos);
  }
}

TEST_CASE("saliency: constant map, size contract, min-max range, PGM round trip") {
  Tensor<float> constant(Shape{3, 4, 2}, 0.7f);
  const auto flat = visualize::saliency(constant, 16, 8);
  CHECK(flat.height == 16);
  CHECK(flat.width == 8);
  for (auto v : flat.pixels) CHECK(v == 128);

  RngStream rng(2);
  Tensor<float> f(Shape{5, 4, 2});
  for (auto& v : f.storage()) v = static_cast<float>(rng.normal());
  const auto s = visualize::saliency(f, 16, 8);
  CHECK(*std::max_element(s.pixels.begin(), s.pixels.end()) == 255);
  CHECK(*std::min_element(s.pixels.begin(), s.pixels.end()) == 0);

  // |.| channel mean: sign flips leave the map unchanged.
  auto neg = f;
  for (auto& v : neg.storage()) v = -v;
  CHECK(visualize::saliency(neg, 16, 8).pixels == s.pixels);

  const auto dir = test::temp_dir("pgm");
  visualize::write_pgm(dir / "x.pgm", s);
  const auto back = visualize::read_pgm(dir / "x.pgm");
  CHECK(back.pixels == s.pixels);
  CHECK(test::slurp(dir / "x.pgm").rfind("P5\n8 16\n255\n", 0) == 0);
  CHECK_THROWS_AS(visualize::write_pgm("/nonexistent/dir/x.pgm", s), IoError);
}

TEST_CASE("export_saliency writes one image-sized map per input") {
  const auto& dir = test::small_dataset();
  const auto m = data::load_manifest(dir);
  const auto split = data::gather(data::load_split(dir, m, "query"), {0, 1});
  model::Model net(TrainConfig{}.model_config(4), 1);
  const auto out = test::temp_dir("export_sal");
  const auto files = visualize::export_saliency(net, split.images, out, "full");
  REQUIRE(files.size() == 2);
  const auto g = visualize::read_pgm(files[0]);
  CHECK(g.height == 64);
  CHECK(g.width == 32);
}
