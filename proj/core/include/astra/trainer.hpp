#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "astra/model.hpp"

namespace astra {

// Constant or step-decay learning rate.
struct LrSchedule {
  double base = 0.01;
  int decay_every = 0;       // 0 disables decay
  double decay_factor = 1.0;

  double at(std::uint64_t step) const;
};

struct TrainConfig {
  LrSchedule lr;
  double momentum = 0.0;
  double weight_decay = 0.0;  // coupled L2: added to the gradient before momentum
  int batch_size = 32;
  int epochs = 1;
  std::uint64_t init_seed = 1;
  std::uint64_t batch_seed = 2;
  int checkpoint_every_epochs = 1;  // epoch stride for stored snapshots
};

struct Checkpoint {
  std::uint64_t step = 0;
  ParamVector params;
};

// A finished training run: snapshots (always including step 0 and the final
// step), plus the realized per-step learning rates.
struct Trajectory {
  std::vector<Checkpoint> checkpoints;
  std::vector<double> step_lrs;
  std::uint64_t total_steps = 0;

  const ParamVector& final_params() const;
};

// Mini-batch SGD with momentum and coupled weight decay.  `mask` (when
// non-empty) flags which examples participate; excluded examples are never
// touched.  Batch order reshuffles every epoch from batch_seed; parameter
// init comes from init_seed unless `init_override` is given.  Training aborts
// with DivergenceError on a non-finite loss or parameter.
Trajectory train(const MlpSpec& spec, std::span<const Example> examples,
                 const TrainConfig& config, std::span<const std::uint8_t> mask = {},
                 const ParamVector* init_override = nullptr);

// Near-equal segmentation of [0, total_steps) into `count` spans (remainder
// steps go to the earliest spans).  Each segment carries its step count, mean
// learning rate, and the unweighted mean of the checkpoints stored inside its
// span (the final checkpoint counts toward the last span).
struct Segment {
  int index = 0;
  std::uint64_t steps = 0;
  double mean_lr = 0.0;
  ParamVector mean_params;
};
std::vector<Segment> segment_trajectory(const Trajectory& trajectory, int count);

// --- checkpoint persistence -------------------------------------------------
// Binary layout: magic "ASTK", u32 version, u32 layer count, per-layer
// u32 rows / u32 cols, u64 step index, then the flat parameters as raw
// little-endian doubles.
void save_checkpoint(const std::string& path, const MlpSpec& spec,
                     const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path, const MlpSpec& spec);

// Training manifest: one "step,lr" row per optimizer step.
void save_lr_manifest(const std::string& path, const Trajectory& trajectory);
std::vector<double> load_lr_manifest(const std::string& path);

// Writes every checkpoint of the trajectory into `dir` (ckpt_<step>.bin) plus
// steps.csv; returns the checkpoint file names in order.
std::vector<std::string> save_trajectory(const std::string& dir, const MlpSpec& spec,
                                         const Trajectory& trajectory);
Trajectory load_trajectory(const std::string& dir, const MlpSpec& spec);

}  // namespace astra
