#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "magnifier/config.hpp"
#include "magnifier/data.hpp"
#include "magnifier/errors.hpp"
#include "magnifier/evalkit.hpp"
#include "magnifier/train.hpp"
#include "magnifier/visualize.hpp"

namespace fs = std::filesystem;
using namespace magnifier;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
};

int cmd_gen_data(const Globals& g, const std::string& out, std::size_t ids, std::size_t per_id,
                 double occ) {
  data::DatasetSpec spec;
  if (g.seed) spec.seed = *g.seed;
  spec.num_ids = ids;
  spec.imgs_per_id = per_id;
  spec.occlusion_rate = occ;
  const auto m = data::generate_dataset(spec, out);
  std::cout << "wrote " << m.train.size() << " train, " << m.query.size() << " query, "
            << m.gallery.size() << " gallery, " << m.occluded.size() << " occluded to " << out
            << "\n";
  return 0;
}

TrainConfig load_config(const Globals& g) {
  TrainConfig c = g.config.empty() ? TrainConfig{} : TrainConfig::from_file(g.config);
  if (g.seed) c.seed = *g.seed;
  c.validate();
  return c;
}

int cmd_train(const Globals& g, const std::string& data_dir, const std::string& out,
              const std::string& resume, std::size_t max_steps, bool no_eval, bool init_only,
              bool quiet) {
  auto cfg = load_config(g);
  if (max_steps) cfg.max_steps = max_steps;
  if (init_only) {
    const auto manifest = data::load_manifest(data_dir);
    const auto train = data::load_split(data_dir, manifest, "train");
    train::TrainState st;
    st.num_classes = manifest.num_train_ids;
    st.batches_per_epoch =
        data::batches_per_epoch(st.num_classes, train.size(), cfg.batch_p, cfg.batch_q);
    model::Model m(cfg.model_config(st.num_classes), RngStream::derive(cfg.seed, "init"));
    fs::create_directories(out);
    train::save_checkpoint(fs::path(out) / "last.ckpt", cfg, st, m);
    std::cout << "wrote untrained checkpoint " << (fs::path(out) / "last.ckpt").string() << "\n";
    return 0;
  }
  train::TrainOptions opt;
  opt.out_dir = out;
  if (!resume.empty()) opt.resume = resume;
  opt.evaluate = !no_eval;
  opt.verbose = !quiet;
  const auto r = train::train_two_stage(cfg, data_dir, opt);
  std::cout << (r.finished ? "finished" : "stopped") << " at step " << r.state.global_step
            << "; checkpoint " << r.last_checkpoint.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& report, const std::string& embeddings) {
  auto ck = train::load_checkpoint(ckpt);
  const auto manifest = data::load_manifest(data_dir);
  const auto gallery = data::load_split(data_dir, manifest, "gallery");
  const auto query =
      data::load_split(data_dir, manifest, split == "occluded" ? "occluded" : "query");
  auto& model = *ck.model;
  const auto q = evalkit::extract_embeddings(model, query);
  const auto gm = evalkit::extract_embeddings(model, gallery);
  const auto r = evalkit::retrieve(q, gm);
  auto j = nlohmann::json::parse(evalkit::report_json(r, split, ckpt));
  j["components"] = ck.config.components.name();
  j["global_step"] = ck.state.global_step;
  if (model.config().components.mask) {
    const auto iou = evalkit::mask_iou(model, gallery);
    j["mask_iou"] = std::vector<double>(iou.begin(), iou.end());
  }
  if (r.skipped) std::cerr << "warning: " << r.skipped << " queries had no valid gallery match\n";
  if (!report.empty()) {
    std::ofstream os(report);
    if (!os) throw IoError("cannot write " + report);
    os << j.dump(2) << "\n";
  }
  if (!embeddings.empty()) {
    fs::create_directories(embeddings);
    evalkit::export_embeddings(fs::path(embeddings) / (split + "_query.mgt"), q);
    evalkit::export_embeddings(fs::path(embeddings) / "gallery.mgt", gm);
  }
  std::printf("%s rank1 %.4f map %.4f (%zu queries)\n", split.c_str(), r.rank1(), r.map, r.valid);
  return 0;
}

int cmd_visualize(const std::vector<std::string>& ckpts, const std::string& data_dir,
                  const std::string& split, std::size_t count, const std::string& out) {
  const auto manifest = data::load_manifest(data_dir);
  const auto samples = data::load_split(data_dir, manifest, split);
  std::vector<std::size_t> idx(std::min(count, samples.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto batch = data::gather(samples, idx);
  for (const auto& path : ckpts) {
    auto ck = train::load_checkpoint(path);
    auto tag = fs::path(path).stem().string() + "_" + ck.config.components.name();
    for (auto& ch : tag)
      if (ch == '+') ch = '-';
    const auto files = visualize::export_saliency(*ck.model, batch.images, out, tag);
    std::cout << "wrote " << files.size() << " maps for " << path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"magnifier: part-aware person re-identification on synthetic data"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for gen-data / train (overrides config)");
  app.add_option("--config", g.config, "Training config JSON");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  std::string gen_out;
  std::size_t ids = 32, per_id = 16;
  double occ = 1.0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--num-ids", ids, "Identities (half train, half test)")->capture_default_str();
  gen->add_option("--imgs-per-id", per_id, "Images per identity")->capture_default_str();
  gen->add_option("--occlusion-rate", occ, "Fraction of occluded queries")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Two-stage training");
  std::string tr_data, tr_out, tr_resume;
  std::size_t max_steps = 0;
  bool no_eval = false, init_only = false, quiet = false;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--resume", tr_resume, "Checkpoint to continue from");
  tr->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
  tr->add_flag("--no-eval", no_eval, "Skip retrieval metrics during training");
  tr->add_flag("--init-only", init_only, "Write an untrained checkpoint and exit");
  tr->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  auto* ev = app.add_subcommand("eval", "Retrieval metrics for a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_report, ev_emb;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--split", ev_split, "test or occluded")
      ->check(CLI::IsMember({"test", "occluded"}))
      ->capture_default_str();
  ev->add_option("--report", ev_report, "Report JSON path");
  ev->add_option("--embeddings", ev_emb, "Directory for MGT1 embedding export");

  auto* vis = app.add_subcommand("visualize", "Export feature-activation maps as PGM");
  std::vector<std::string> vis_ckpts;
  std::string vis_data, vis_split = "query", vis_out;
  std::size_t vis_count = 4;
  vis->add_option("--ckpt", vis_ckpts, "One or more checkpoints")->required();
  vis->add_option("--data", vis_data, "Dataset directory")->required();
  vis->add_option("--split", vis_split, "train, query, gallery or occluded")
      ->check(CLI::IsMember({"train", "query", "gallery", "occluded"}))
      ->capture_default_str();
  vis->add_option("--count", vis_count, "Images to render")->capture_default_str();
  vis->add_option("--out", vis_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    // Usage errors: the message, then the flags of the subcommand that failed.
    std::cerr << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.back()->help());
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(g, gen_out, ids, per_id, occ);
    if (*tr) return cmd_train(g, tr_data, tr_out, tr_resume, max_steps, no_eval, init_only, quiet);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_report, ev_emb);
    if (*vis) return cmd_visualize(vis_ckpts, vis_data, vis_split, vis_count, vis_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
