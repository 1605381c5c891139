#include "magnifier/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "magnifier/data.hpp"
#include "magnifier/errors.hpp"
#include "magnifier/evalkit.hpp"
#include "magnifier/mgt.hpp"
#include "magnifier/optim.hpp"
#include "magnifier/rng.hpp"

namespace magnifier::train {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'M', 'G', 'C', '1'};

json loss_json(const losses::LossReport& r) {
  return json{{"l_cls", r.l_cls},   {"l_tri", r.l_tri},     {"l_sd", r.l_sd},
              {"l_mask", r.l_mask}, {"l_total", r.l_total}};
}

std::size_t stage_of(const TrainConfig& c, std::size_t epoch) {
  return epoch < c.stage1_epochs ? 1 : 2;
}

bool any_nonzero(const Tensor<float>& t) {
  for (float v : t.storage())
    if (v != 0.f) return true;
  return false;
}

}  // namespace

void EpochAccum::add(const losses::LossReport& r) {
  l_cls += r.l_cls;
  l_tri += r.l_tri;
  l_sd += r.l_sd;
  l_mask += r.l_mask;
  l_total += r.l_total;
  ++steps;
}

losses::LossReport EpochAccum::mean() const {
  losses::LossReport r;
  if (steps == 0) return r;
  const double n = static_cast<double>(steps);
  r.l_cls = l_cls / n;
  r.l_tri = l_tri / n;
  r.l_sd = l_sd / n;
  r.l_mask = l_mask / n;
  r.l_total = l_total / n;
  return r;
}

std::string to_json_line(const StepRecord& r) {
  json j{{"step", r.step}, {"epoch", r.epoch}, {"stage", r.stage}};
  j.update(loss_json(r.loss));
  return j.dump();
}

std::string to_json_line(const EpochRecord& r) {
  json j{{"epoch", r.epoch}, {"stage", r.stage}};
  j.update(loss_json(r.loss));
  if (r.evaluated) {
    j["rank1"] = r.rank1;
    j["map"] = r.map;
    j["occluded_rank1"] = r.occluded_rank1;
    j["occluded_map"] = r.occluded_map;
  } else {
    j["rank1"] = nullptr;
    j["map"] = nullptr;
  }
  return j.dump();
}

void save_checkpoint(const fs::path& path, const TrainConfig& config, const TrainState& state,
                     const model::Model& model) {
  json h;
  h["config"] = json::parse(config.to_json());
  h["config_hash"] = config.hash();
  h["global_step"] = state.global_step;
  h["batches_per_epoch"] = state.batches_per_epoch;
  h["num_classes"] = state.num_classes;
  h["epoch"] = state.epoch();
  h["stage"] = stage_of(config, state.epoch());
  h["accum"] = {{"l_cls", state.accum.l_cls},   {"l_tri", state.accum.l_tri},
                {"l_sd", state.accum.l_sd},     {"l_mask", state.accum.l_mask},
                {"l_total", state.accum.l_total}, {"steps", state.accum.steps}};
  json params = json::array();
  for (const auto& [name, p] : model.params()) params.push_back({{"name", name}, {"step", p.step}});
  h["params"] = params;
  json bns = json::array();
  for (const auto& [name, s] : model.bn_stats()) bns.push_back(name);
  h["batchnorm"] = bns;
  const std::string header = h.dump();

  // Write to a sibling file first so an interrupted save never clobbers the last good one.
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, 4);
    std::uint64_t len = header.size();
    unsigned char lb[8];
    for (int i = 0; i < 8; ++i) lb[i] = static_cast<unsigned char>(len >> (8 * i));
    os.write(reinterpret_cast<const char*>(lb), 8);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, p] : model.params()) {
      write_mgt(os, p.value);
      write_mgt(os, p.moment1);
      write_mgt(os, p.moment2);
    }
    for (const auto& [name, s] : model.bn_stats()) {
      write_mgt(os, s.running_mean);
      write_mgt(os, s.running_var);
    }
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  unsigned char lb[8];
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(lb), 8);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError(path.string() + " is not a checkpoint (bad magic)");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lb[i]) << (8 * i);
  if (len > (1u << 26)) throw IoError(path.string() + ": implausible header length");
  std::string header(len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(path.string() + ": truncated header");

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": corrupt header: " + e.what());
  }
  Checkpoint ck;
  ck.config = TrainConfig::from_json(h.at("config").dump());
  ck.config_hash = h.at("config_hash").get<std::string>();
  if (ck.config_hash != ck.config.hash())
    throw IoError(path.string() + ": stored config hash does not match its config");
  ck.state.global_step = h.at("global_step").get<std::uint64_t>();
  ck.state.batches_per_epoch = h.at("batches_per_epoch").get<std::size_t>();
  ck.state.num_classes = h.at("num_classes").get<std::size_t>();
  const auto& a = h.at("accum");
  ck.state.accum.l_cls = a.at("l_cls").get<double>();
  ck.state.accum.l_tri = a.at("l_tri").get<double>();
  ck.state.accum.l_sd = a.at("l_sd").get<double>();
  ck.state.accum.l_mask = a.at("l_mask").get<double>();
  ck.state.accum.l_total = a.at("l_total").get<double>();
  ck.state.accum.steps = a.at("steps").get<std::size_t>();
  ck.epoch = h.at("epoch").get<std::size_t>();
  ck.stage = h.at("stage").get<std::size_t>();

  ck.model = std::make_unique<model::Model>(ck.config.model_config(ck.state.num_classes),
                                            RngStream::derive(ck.config.seed, "init"));
  auto& params = ck.model->params();
  const auto& names = h.at("params");
  if (names.size() != params.size())
    throw IoError(path.string() + ": parameter count " + std::to_string(names.size()) +
                  " does not match the model (" + std::to_string(params.size()) + ")");
  auto read_into = [&](Tensor<float>& dst, const std::string& what) {
    auto t = read_mgt(is);
    if (t.shape() != dst.shape())
      throw IoError(path.string() + ": shape mismatch for " + what + ": " + shape_str(t.shape()) +
                    " vs " + shape_str(dst.shape()));
    dst = std::move(t);
  };
  for (const auto& e : names) {
    const auto name = e.at("name").get<std::string>();
    if (!params.contains(name)) throw IoError(path.string() + ": unknown parameter " + name);
    auto& p = params.at(name);
    read_into(p.value, name);
    read_into(p.moment1, name + " moment1");
    read_into(p.moment2, name + " moment2");
    p.step = e.at("step").get<std::uint64_t>();
  }
  auto& stats = ck.model->bn_stats();
  for (const auto& e : h.at("batchnorm")) {
    const auto name = e.get<std::string>();
    auto it = stats.find(name);
    if (it == stats.end()) throw IoError(path.string() + ": unknown batchnorm " + name);
    read_into(it->second.running_mean, name + " running_mean");
    read_into(it->second.running_var, name + " running_var");
  }
  return ck;
}

TrainResult train_two_stage(const TrainConfig& config, const fs::path& data_dir,
                            const TrainOptions& options) {
  config.validate();
  const auto manifest = data::load_manifest(data_dir);
  const auto train_split = data::load_split(data_dir, manifest, "train");
  const std::size_t num_classes = manifest.num_train_ids;
  const std::size_t bpe =
      data::batches_per_epoch(num_classes, train_split.size(), config.batch_p, config.batch_q);
  const std::size_t total_epochs = config.stage1_epochs + config.stage2_epochs;

  std::unique_ptr<model::Model> model;
  TrainState state;
  if (options.resume) {
    auto ck = load_checkpoint(*options.resume);
    if (ck.config_hash != config.hash()) {
      std::string msg = "resume: checkpoint config differs from the requested config:";
      for (const auto& line : config_diff(ck.config, config)) msg += "\n  " + line;
      throw ConfigError(msg);
    }
    if (ck.state.batches_per_epoch != bpe || ck.state.num_classes != num_classes)
      throw ConfigError("resume: checkpoint was trained on a different dataset layout");
    model = std::move(ck.model);
    state = ck.state;
  } else {
    model = std::make_unique<model::Model>(config.model_config(num_classes),
                                           RngStream::derive(config.seed, "init"));
    state.batches_per_epoch = bpe;
    state.num_classes = num_classes;
  }

  fs::create_directories(options.out_dir);
  const auto mode = options.resume ? std::ios::app : std::ios::trunc;
  std::ofstream steps_log(options.out_dir / "steps.jsonl", std::ios::out | mode);
  std::ofstream metrics_log(options.out_dir / "metrics.jsonl", std::ios::out | mode);
  if (!steps_log || !metrics_log) throw IoError("cannot write logs in " + options.out_dir.string());

  std::optional<data::SplitData> query, gallery, occluded;
  if (options.evaluate) {
    query = data::load_split(data_dir, manifest, "query");
    gallery = data::load_split(data_dir, manifest, "gallery");
    occluded = data::load_split(data_dir, manifest, "occluded");
  }

  TrainResult result;
  result.last_checkpoint = options.out_dir / "last.ckpt";
  std::set<std::string> alive;
  bool tracked_epoch0 = state.global_step == 0;

  for (std::size_t epoch = state.epoch(); epoch < total_epochs; ++epoch) {
    const std::size_t stage = stage_of(config, epoch);
    losses::LossWeights weights = config.loss;
    if (stage == 1) weights.gamma = 0.0;
    const double lr = stage == 1 ? config.lr : config.stage2_lr;

    RngStream epoch_rng(RngStream::derive(config.seed, "epoch", epoch));
    const auto batches =
        data::pk_batch_sampler(train_split.labels, config.batch_p, config.batch_q, bpe, epoch_rng);

    for (std::size_t b = state.batch_in_epoch(); b < bpe; ++b) {
      if (config.max_steps && state.global_step >= config.max_steps) {
        save_checkpoint(result.last_checkpoint, config, state, *model);
        result.state = state;
        return result;
      }
      const auto batch = data::gather(train_split, batches[b]);
      RngStream step_rng(RngStream::derive(config.seed, "sab-step", state.global_step));
      model::TrainContext ctx{config.strategy, config.k_hat, &step_rng, weights};
      Tape<float> tape;
      auto fwd = model->forward(tape, batch.images, &batch.masks, batch.labels, BnMode::kTrain, &ctx);
      tape.backward(fwd.loss.total);
      if (epoch == 0)
        for (const auto& [name, p] : model->params())
          if (!alive.count(name) && any_nonzero(p.grad)) alive.insert(name);
      optimizer_step(model->params(), lr, config.optimizer);

      StepRecord rec{state.global_step, epoch, stage, fwd.loss.report};
      steps_log << to_json_line(rec) << "\n";
      result.steps.push_back(rec);
      state.accum.add(rec.loss);
      ++state.global_step;
    }
    steps_log.flush();

    if (epoch == 0 && tracked_epoch0) {
      for (const auto& [name, p] : model->params())
        if (!alive.count(name)) result.dead_parameters.push_back(name);
      if (!result.dead_parameters.empty()) {
        std::cerr << "warning: parameters without gradient in epoch 0:";
        for (const auto& n : result.dead_parameters) std::cerr << " " << n;
        std::cerr << "\n";
        json j{{"event", "dead_parameters"}, {"names", result.dead_parameters}};
        metrics_log << j.dump() << "\n";
      }
    }

    EpochRecord er;
    er.epoch = epoch;
    er.stage = stage;
    er.loss = state.accum.mean();
    const bool last = epoch + 1 == total_epochs;
    const bool boundary = epoch + 1 == config.stage1_epochs;
    if (options.evaluate && ((epoch + 1) % config.eval_every == 0 || last || boundary)) {
      const auto g = evalkit::extract_embeddings(*model, *gallery);
      const auto r = evalkit::retrieve(evalkit::extract_embeddings(*model, *query), g);
      const auto o = evalkit::retrieve(evalkit::extract_embeddings(*model, *occluded), g);
      er.evaluated = true;
      er.rank1 = r.rank1();
      er.map = r.map;
      er.occluded_rank1 = o.rank1();
      er.occluded_map = o.map;
    }
    metrics_log << to_json_line(er) << "\n";
    metrics_log.flush();
    result.epochs.push_back(er);
    state.accum = EpochAccum{};

    save_checkpoint(result.last_checkpoint, config, state, *model);
    if (boundary) fs::copy_file(result.last_checkpoint, options.out_dir / "stage1.ckpt",
                                fs::copy_options::overwrite_existing);
    if (options.verbose) {
      std::cerr << "epoch " << epoch << " stage " << stage << " l_total " << er.loss.l_total;
      if (er.evaluated)
        std::cerr << " rank1 " << er.rank1 << " map " << er.map << " occ_rank1 "
                  << er.occluded_rank1;
      std::cerr << "\n";
    }
  }
  result.state = state;
  result.finished = true;
  return result;
}

}  // namespace magnifier::train
