#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "magnifier/config.hpp"
#include "magnifier/losses.hpp"
#include "magnifier/model.hpp"

namespace magnifier::train {

// Running sums of the current epoch, kept in checkpoints so a mid-epoch
// resume reports the same epoch means.
struct EpochAccum {
  double l_cls = 0, l_tri = 0, l_sd = 0, l_mask = 0, l_total = 0;
  std::size_t steps = 0;

  void add(const losses::LossReport& r);
  losses::LossReport mean() const;
};

struct TrainState {
  std::uint64_t global_step = 0;
  std::size_t batches_per_epoch = 0;
  std::size_t num_classes = 0;
  EpochAccum accum;

  std::size_t epoch() const noexcept { return global_step / batches_per_epoch; }
  std::size_t batch_in_epoch() const noexcept { return global_step % batches_per_epoch; }
};

// Single-file checkpoint:
//   "MGC1", u64 little-endian header length, JSON header (config, state, record names),
//   then MGT1 records: value, moment1, moment2 for every parameter in name order,
//   running mean and running var for every batchnorm in name order.
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config,
                     const TrainState& state, const model::Model& model);

struct Checkpoint {
  TrainConfig config;
  std::string config_hash;
  TrainState state;
  std::size_t epoch = 0;
  std::size_t stage = 1;
  std::unique_ptr<model::Model> model;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

struct StepRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  std::size_t stage = 1;
  losses::LossReport loss;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t stage = 1;
  losses::LossReport loss;  // epoch means
  bool evaluated = false;
  double rank1 = 0, map = 0;
  double occluded_rank1 = 0, occluded_map = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  bool evaluate = true;  // run retrieval at eval epochs
  bool verbose = false;  // progress lines on stderr
};

struct TrainResult {
  std::vector<StepRecord> steps;   // steps run by this call
  std::vector<EpochRecord> epochs;  // epochs completed by this call
  std::vector<std::string> dead_parameters;  // never got a nonzero gradient in epoch 0
  TrainState state;
  bool finished = false;  // false when stopped by max_steps
  std::filesystem::path last_checkpoint;
};

// Stage 1 runs stage1_epochs with gamma forced to 0 at lr; stage 2 runs
// stage2_epochs with the configured gamma at stage2_lr. Writes
// out_dir/{steps.jsonl, metrics.jsonl, last.ckpt, stage1.ckpt}.
// Resuming refuses a checkpoint whose config hash differs and lists the diff.
TrainResult train_two_stage(const TrainConfig& config, const std::filesystem::path& data_dir,
                            const TrainOptions& options);

std::string to_json_line(const StepRecord& r);
std::string to_json_line(const EpochRecord& r);

}  // namespace magnifier::train
