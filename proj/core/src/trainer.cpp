#include "astra/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "astra/error.hpp"
#include "astra/linalg.hpp"
#include "astra/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary artifact formats assume a little-endian host");

namespace astra {

double LrSchedule::at(std::uint64_t step) const {
  if (decay_every <= 0) return base;
  const std::uint64_t k = step / static_cast<std::uint64_t>(decay_every);
  return base * std::pow(decay_factor, static_cast<double>(k));
}

const ParamVector& Trajectory::final_params() const {
  if (checkpoints.empty()) throw MissingArtifactError("Trajectory: no checkpoints");
  return checkpoints.back().params;
}

Trajectory train(const MlpSpec& spec, std::span<const Example> examples,
                 const TrainConfig& config, std::span<const std::uint8_t> mask,
                 const ParamVector* init_override) {
  validate_spec(spec);
  if (config.batch_size <= 0) throw ConfigError("train: batch_size must be positive");
  if (config.epochs < 0) throw ConfigError("train: epochs must be non-negative");
  if (!mask.empty() && mask.size() != examples.size())
    throw DimensionError("train: mask length must match the dataset");

  std::vector<int> active;
  for (std::size_t i = 0; i < examples.size(); ++i)
    if (mask.empty() || mask[i]) active.push_back(static_cast<int>(i));
  if (active.empty() && config.epochs > 0)
    throw ConfigError("train: mask excludes every example");

  const ParamLayout layout = ParamLayout::from_spec(spec);
  ParamVector params = init_override ? *init_override : init_params(spec, config.init_seed);
  if (params.size() != layout.total)
    throw DimensionError("train: init override has the wrong length");

  Trajectory traj;
  traj.checkpoints.push_back({0, params});

  const int steps_per_epoch =
      active.empty() ? 0
                     : static_cast<int>((active.size() + config.batch_size - 1) /
                                        static_cast<std::size_t>(config.batch_size));
  ParamVector momentum_buf(layout.total, 0.0);
  std::vector<const Example*> batch_ptrs;
  std::vector<Example> batch;  // contiguous copy for span-based kernels
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order = active;
    Rng shuffle_rng(mix_seed(config.batch_seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    for (int b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = static_cast<std::size_t>(b) * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(examples[order[i]]);

      const double lr = config.lr.at(step);
      ParamVector g = mean_grad(spec, params, batch);
      if (config.weight_decay != 0.0) axpy(config.weight_decay, params, g);
      for (std::size_t i = 0; i < params.size(); ++i) {
        momentum_buf[i] = config.momentum * momentum_buf[i] + g[i];
        params[i] -= lr * momentum_buf[i];
      }
      traj.step_lrs.push_back(lr);
      ++step;

      for (double v : params)
        if (!std::isfinite(v))
          throw DivergenceError("train: non-finite parameter at step " +
                                    std::to_string(step),
                                static_cast<int>(step));
    }
    const bool boundary = config.checkpoint_every_epochs > 0 &&
                          ((epoch + 1) % config.checkpoint_every_epochs == 0);
    const bool last = epoch + 1 == config.epochs;
    if (boundary && !last) traj.checkpoints.push_back({step, params});
  }
  traj.total_steps = step;
  if (step > 0) traj.checkpoints.push_back({step, params});  // final state, always stored
  return traj;
}

std::vector<Segment> segment_trajectory(const Trajectory& trajectory, int count) {
  if (count <= 0) throw ConfigError("segment_trajectory: count must be positive");
  const std::uint64_t total = trajectory.total_steps;
  if (total == 0) throw ConfigError("segment_trajectory: trajectory has no steps");
  if (static_cast<std::uint64_t>(count) > total)
    throw ConfigError("segment_trajectory: more segments than steps");
  if (trajectory.step_lrs.size() != total)
    throw DimensionError("segment_trajectory: lr record does not match step count");

  const std::uint64_t base = total / static_cast<std::uint64_t>(count);
  const std::uint64_t rem = total % static_cast<std::uint64_t>(count);
  std::vector<Segment> segments;
  std::uint64_t begin = 0;
  for (int l = 0; l < count; ++l) {
    Segment seg;
    seg.index = l;
    seg.steps = base + (static_cast<std::uint64_t>(l) < rem ? 1 : 0);
    const std::uint64_t end = begin + seg.steps;

    double lr_sum = 0.0;
    for (std::uint64_t s = begin; s < end; ++s) lr_sum += trajectory.step_lrs[s];
    seg.mean_lr = lr_sum / static_cast<double>(seg.steps);

    // Mean of the checkpoints inside [begin, end); the final stored state
    // (step == total) belongs to the last span.
    std::size_t used = 0;
    for (const Checkpoint& ck : trajectory.checkpoints) {
      const bool in_span = (ck.step >= begin && ck.step < end) ||
                           (l + 1 == count && ck.step == total);
      if (!in_span) continue;
      if (seg.mean_params.empty()) seg.mean_params.assign(ck.params.size(), 0.0);
      axpy(1.0, ck.params, seg.mean_params);
      ++used;
    }
    if (used == 0)
      throw ConfigError("segment_trajectory: span " + std::to_string(l) +
                        " holds no checkpoints; reduce segments or store more snapshots");
    scale(1.0 / static_cast<double>(used), seg.mean_params);
    segments.push_back(std::move(seg));
    begin = end;
  }
  return segments;
}

// --- binary checkpoint format ------------------------------------------------

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
std::uint32_t read_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw MissingArtifactError("checkpoint: truncated reading " + what);
  return v;
}
std::uint64_t read_u64(std::istream& in, const std::string& what) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw MissingArtifactError("checkpoint: truncated reading " + what);
  return v;
}

constexpr char kCheckpointMagic[4] = {'A', 'S', 'T', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const MlpSpec& spec,
                     const Checkpoint& checkpoint) {
  const ParamLayout layout = ParamLayout::from_spec(spec);
  if (checkpoint.params.size() != layout.total)
    throw DimensionError("save_checkpoint: parameter length mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("save_checkpoint: cannot write '" + path + "'");
  out.write(kCheckpointMagic, 4);
  write_u32(out, kCheckpointVersion);
  write_u32(out, static_cast<std::uint32_t>(layout.layers.size()));
  for (const LayerShape& shape : layout.layers) {
    write_u32(out, static_cast<std::uint32_t>(shape.out));
    write_u32(out, static_cast<std::uint32_t>(shape.in_plus_one));
  }
  write_u64(out, checkpoint.step);
  out.write(reinterpret_cast<const char*>(checkpoint.params.data()),
            static_cast<std::streamsize>(checkpoint.params.size() * sizeof(double)));
  if (!out) throw ConfigError("save_checkpoint: short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path, const MlpSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw ConfigError("load_checkpoint: '" + path + "' is not a checkpoint file");
  const std::uint32_t version = read_u32(in, "version");
  if (version != kCheckpointVersion)
    throw ConfigError("load_checkpoint: unsupported version " + std::to_string(version));
  const ParamLayout layout = ParamLayout::from_spec(spec);
  const std::uint32_t layers = read_u32(in, "layer count");
  if (layers != layout.layers.size())
    throw DimensionError("load_checkpoint: layer count mismatch");
  for (const LayerShape& shape : layout.layers) {
    const std::uint32_t rows = read_u32(in, "layer rows");
    const std::uint32_t cols = read_u32(in, "layer cols");
    if (rows != static_cast<std::uint32_t>(shape.out) ||
        cols != static_cast<std::uint32_t>(shape.in_plus_one))
      throw DimensionError("load_checkpoint: layer shape mismatch");
  }
  Checkpoint ck;
  ck.step = read_u64(in, "step");
  ck.params.resize(layout.total);
  if (!in.read(reinterpret_cast<char*>(ck.params.data()),
               static_cast<std::streamsize>(layout.total * sizeof(double))))
    throw MissingArtifactError("load_checkpoint: truncated parameter block");
  return ck;
}

void save_lr_manifest(const std::string& path, const Trajectory& trajectory) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_lr_manifest: cannot write '" + path + "'");
  out << "step,lr\n";
  out.precision(17);
  for (std::size_t s = 0; s < trajectory.step_lrs.size(); ++s)
    out << s << "," << trajectory.step_lrs[s] << "\n";
}

std::vector<double> load_lr_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("load_lr_manifest: cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);  // header
  std::vector<double> lrs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw ConfigError("load_lr_manifest: malformed row '" + line + "'");
    lrs.push_back(std::stod(line.substr(comma + 1)));
  }
  return lrs;
}

std::vector<std::string> save_trajectory(const std::string& dir, const MlpSpec& spec,
                                         const Trajectory& trajectory) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::string> names;
  for (const Checkpoint& ck : trajectory.checkpoints) {
    std::ostringstream name;
    name << "ckpt_";
    name.width(8);
    name.fill('0');
    name << ck.step << ".bin";
    save_checkpoint((fs::path(dir) / name.str()).string(), spec, ck);
    names.push_back(name.str());
  }
  save_lr_manifest((fs::path(dir) / "steps.csv").string(), trajectory);
  return names;
}

Trajectory load_trajectory(const std::string& dir, const MlpSpec& spec) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir))
    throw MissingArtifactError("load_trajectory: '" + dir + "' is not a directory");
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0 && name.size() > 9 &&
        name.substr(name.size() - 4) == ".bin")
      files.push_back(entry.path().string());
  }
  if (files.empty())
    throw MissingArtifactError("load_trajectory: no checkpoints under '" + dir + "'");
  std::sort(files.begin(), files.end());
  Trajectory traj;
  for (const std::string& f : files) traj.checkpoints.push_back(load_checkpoint(f, spec));
  std::sort(traj.checkpoints.begin(), traj.checkpoints.end(),
            [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });
  traj.step_lrs = load_lr_manifest((fs::path(dir) / "steps.csv").string());
  traj.total_steps = traj.checkpoints.back().step;
  if (traj.step_lrs.size() != traj.total_steps)
    throw ConfigError("load_trajectory: steps.csv row count disagrees with checkpoints");
  return traj;
}

}  // namespace astra
