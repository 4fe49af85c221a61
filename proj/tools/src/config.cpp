#include "astra_cli/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "astra/error.hpp"

namespace astra_cli {

namespace {

std::string trim(const std::string& s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

[[noreturn]] void bad_value(const std::string& section, const std::string& key,
                            const std::string& value, const std::string& want) {
  throw astra::ConfigError("config key [" + section + "] " + key + " = \"" +
                           value + "\" is not " + want);
}

long long to_int(const std::string& section, const std::string& key,
                 const std::string& value) {
  try {
    std::size_t used = 0;
    long long parsed = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return parsed;
  } catch (const std::exception&) {
    bad_value(section, key, value, "an integer");
  }
}

double to_double(const std::string& section, const std::string& key,
                 const std::string& value) {
  try {
    std::size_t used = 0;
    double parsed = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return parsed;
  } catch (const std::exception&) {
    bad_value(section, key, value, "a number");
  }
}

std::uint64_t to_seed(const std::string& section, const std::string& key,
                      const std::string& value) {
  try {
    std::size_t used = 0;
    std::uint64_t parsed = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return parsed;
  } catch (const std::exception&) {
    bad_value(section, key, value, "a non-negative integer");
  }
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::stringstream stream(value);
  std::string part;
  while (std::getline(stream, part, ',')) {
    part = trim(part);
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

// Schema: every key the loader understands, used to reject typos up front.
const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> kSchema = {
      {"data",
       {"kind", "n", "d", "noise_std", "classes", "margin", "label_noise",
        "seed", "path", "target_column", "task", "n_query", "split_seed"}},
      {"model", {"hidden"}},
      {"train",
       {"lr", "momentum", "weight_decay", "batch_size", "epochs", "init_seed",
        "batch_seed", "checkpoint_every_epochs", "lr_decay_every",
        "lr_decay_factor"}},
      {"solver",
       {"method", "lr", "damping", "precond_damping", "iterations",
        "batch_size", "momentum", "lr_decay_every", "lr_decay_factor",
        "repeats", "seed", "snapshot_stride", "query_index"}},
      {"source", {"segments", "stats_seed", "mode"}},
      {"eval",
       {"masks", "beta", "repeats", "mask_seed", "truth_seed", "null_trials",
        "null_seed", "bins", "scan_queries", "scan_damping", "scan_iterations",
        "scan_stride", "scan_sni_lr", "scan_astra_lr"}},
  };
  return kSchema;
}

class Reader {
 public:
  explicit Reader(const RawConfig& raw) : raw_(raw) {}

  std::string str(const std::string& s, const std::string& k,
                  const std::string& fallback) {
    return raw_.get(s, k, fallback);
  }
  int integer(const std::string& s, const std::string& k, int fallback) {
    if (!raw_.has(s, k)) return fallback;
    long long v = to_int(s, k, raw_.get(s, k, ""));
    if (v < std::numeric_limits<int>::min() ||
        v > std::numeric_limits<int>::max())
      bad_value(s, k, raw_.get(s, k, ""), "in integer range");
    return static_cast<int>(v);
  }
  double real(const std::string& s, const std::string& k, double fallback) {
    if (!raw_.has(s, k)) return fallback;
    return to_double(s, k, raw_.get(s, k, ""));
  }
  std::uint64_t seed(const std::string& s, const std::string& k,
                     std::uint64_t fallback) {
    if (!raw_.has(s, k)) return fallback;
    return to_seed(s, k, raw_.get(s, k, ""));
  }
  std::vector<int> int_list(const std::string& s, const std::string& k,
                            std::vector<int> fallback) {
    if (!raw_.has(s, k)) return fallback;
    std::vector<int> out;
    for (const auto& part : split_list(raw_.get(s, k, "")))
      out.push_back(static_cast<int>(to_int(s, k, part)));
    return out;
  }
  std::vector<double> double_list(const std::string& s, const std::string& k,
                                  std::vector<double> fallback) {
    if (!raw_.has(s, k)) return fallback;
    std::vector<double> out;
    for (const auto& part : split_list(raw_.get(s, k, "")))
      out.push_back(to_double(s, k, part));
    return out;
  }

 private:
  const RawConfig& raw_;
};

void check_schema(const RawConfig& raw) {
  for (const auto& [section, entries] : raw.sections) {
    auto it = schema().find(section);
    if (it == schema().end())
      throw astra::ConfigError("unknown config section [" + section + "] in " +
                               raw.path);
    for (const auto& [key, value] : entries) {
      (void)value;
      if (!it->second.count(key))
        throw astra::ConfigError("unknown config key [" + section + "] " +
                                 key + " in " + raw.path);
    }
  }
}

void check_positive(const char* what, double v) {
  if (!(v > 0.0))
    throw astra::ConfigError(std::string(what) + " must be positive, got " +
                             std::to_string(v));
}

}  // namespace

bool RawConfig::has(const std::string& section, const std::string& key) const {
  auto it = sections.find(section);
  return it != sections.end() && it->second.count(key) > 0;
}

std::string RawConfig::get(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
  auto it = sections.find(section);
  if (it == sections.end()) return fallback;
  auto kt = it->second.find(key);
  return kt == it->second.end() ? fallback : kt->second;
}

RawConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw astra::MissingArtifactError("config file not found: " + path);
  RawConfig raw;
  raw.path = path;
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string text = trim(line);
    if (text.empty() || text[0] == '#' || text[0] == ';') continue;
    if (text.front() == '[') {
      if (text.back() != ']')
        throw astra::ConfigError(path + ":" + std::to_string(line_no) +
                                 ": unterminated section header");
      section = trim(text.substr(1, text.size() - 2));
      if (section.empty())
        throw astra::ConfigError(path + ":" + std::to_string(line_no) +
                                 ": empty section name");
      raw.sections[section];  // record even if empty
      continue;
    }
    auto eq = text.find('=');
    if (eq == std::string::npos)
      throw astra::ConfigError(path + ":" + std::to_string(line_no) +
                               ": expected 'key = value'");
    if (section.empty())
      throw astra::ConfigError(path + ":" + std::to_string(line_no) +
                               ": key outside any [section]");
    std::string key = trim(text.substr(0, eq));
    std::string value = trim(text.substr(eq + 1));
    if (key.empty())
      throw astra::ConfigError(path + ":" + std::to_string(line_no) +
                               ": empty key");
    if (raw.sections[section].count(key))
      throw astra::ConfigError(path + ":" + std::to_string(line_no) +
                               ": duplicate key '" + key + "' in [" + section +
                               "]");
    raw.sections[section][key] = value;
  }
  return raw;
}

std::uint64_t config_hash(const RawConfig& raw) {
  // std::map keeps sections and keys sorted, so serialization is canonical.
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64 offset basis
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0x1f;  // field separator
    h *= 1099511628211ull;
  };
  for (const auto& [section, entries] : raw.sections) {
    mix(section);
    for (const auto& [key, value] : entries) {
      mix(key);
      mix(value);
    }
  }
  return h;
}

std::string config_hash_prefix(const RawConfig& raw) {
  static const char* kHex = "0123456789abcdef";
  std::uint64_t h = config_hash(raw);
  std::string out;
  for (int i = 15; i >= 4; --i)  // leading 12 of 16 nibbles
    out.push_back(kHex[(h >> (4 * i)) & 0xf]);
  return out;
}

astra::TaskKind ExperimentConfig::task_kind() const {
  if (data.kind == "synth-regression") return astra::TaskKind::kRegression;
  if (data.kind == "synth-classification")
    return astra::TaskKind::kClassification;
  return data.task == "classification" ? astra::TaskKind::kClassification
                                       : astra::TaskKind::kRegression;
}

astra::MlpSpec ExperimentConfig::mlp_spec() const {
  astra::MlpSpec spec;
  spec.task = task_kind();
  spec.layer_dims.push_back(data.d);
  for (int h : model.hidden) spec.layer_dims.push_back(h);
  spec.layer_dims.push_back(
      spec.task == astra::TaskKind::kClassification ? data.classes : 1);
  return spec;
}

ExperimentConfig make_experiment_config(const RawConfig& raw) {
  check_schema(raw);
  Reader r(raw);
  ExperimentConfig cfg;
  cfg.hash = config_hash(raw);
  cfg.hash_prefix = config_hash_prefix(raw);

  DataSection& d = cfg.data;
  d.kind = r.str("data", "kind", "synth-regression");
  d.n = r.integer("data", "n", d.n);
  d.d = r.integer("data", "d", d.d);
  d.noise_std = r.real("data", "noise_std", d.noise_std);
  d.classes = r.integer("data", "classes", d.classes);
  d.margin = r.real("data", "margin", d.margin);
  d.label_noise = r.real("data", "label_noise", d.label_noise);
  d.seed = r.seed("data", "seed", d.seed);
  d.path = r.str("data", "path", d.path);
  d.target_column = r.str("data", "target_column", d.target_column);
  d.task = r.str("data", "task", d.task);
  d.n_query = r.integer("data", "n_query", d.n_query);
  d.split_seed = r.seed("data", "split_seed", d.split_seed);

  if (d.kind != "synth-regression" && d.kind != "synth-classification" &&
      d.kind != "csv")
    throw astra::ConfigError(
        "config key [data] kind must be synth-regression, "
        "synth-classification, or csv, got \"" +
        d.kind + "\"");
  if (d.kind == "csv" && d.path.empty())
    throw astra::ConfigError("config key [data] path is required when kind = csv");
  if (d.task != "regression" && d.task != "classification")
    bad_value("data", "task", d.task, "regression or classification");
  if (d.kind != "csv") {
    if (d.n <= 0) bad_value("data", "n", std::to_string(d.n), "positive");
    if (d.d <= 0) bad_value("data", "d", std::to_string(d.d), "positive");
  }
  if (d.n_query <= 0)
    bad_value("data", "n_query", std::to_string(d.n_query), "positive");
  if (d.kind == "synth-classification" && d.classes < 2)
    bad_value("data", "classes", std::to_string(d.classes), "at least 2");
  if (d.label_noise < 0.0 || d.label_noise > 1.0)
    bad_value("data", "label_noise", std::to_string(d.label_noise),
              "in [0, 1]");

  cfg.model.hidden = r.int_list("model", "hidden", cfg.model.hidden);
  for (int width : cfg.model.hidden)
    if (width <= 0)
      throw astra::ConfigError("config key [model] hidden widths must be "
                               "positive");

  astra::TrainConfig& t = cfg.train.config;
  t.lr.base = r.real("train", "lr", 0.05);
  t.lr.decay_every = r.integer("train", "lr_decay_every", 0);
  t.lr.decay_factor = r.real("train", "lr_decay_factor", 1.0);
  t.momentum = r.real("train", "momentum", 0.0);
  t.weight_decay = r.real("train", "weight_decay", 0.0);
  t.batch_size = r.integer("train", "batch_size", 32);
  t.epochs = r.integer("train", "epochs", 10);
  t.init_seed = r.seed("train", "init_seed", 11);
  t.batch_seed = r.seed("train", "batch_seed", 12);
  t.checkpoint_every_epochs = r.integer("train", "checkpoint_every_epochs", 1);
  check_positive("[train] lr", t.lr.base);
  if (t.epochs <= 0) bad_value("train", "epochs", std::to_string(t.epochs), "positive");
  if (t.batch_size <= 0)
    bad_value("train", "batch_size", std::to_string(t.batch_size), "positive");
  if (t.checkpoint_every_epochs <= 0)
    bad_value("train", "checkpoint_every_epochs",
              std::to_string(t.checkpoint_every_epochs), "positive");

  SolverSection& s = cfg.solver;
  s.method = r.str("solver", "method", s.method);
  if (s.method != "identity" && s.method != "ekfac" && s.method != "sni" &&
      s.method != "astra" && s.method != "exact")
    bad_value("solver", "method", s.method,
              "identity, ekfac, sni, astra, or exact");
  astra::SolverConfig& sc = s.config;
  sc.lr = r.real("solver", "lr", 0.0);          // <= 0: derive as 0.1 * damping
  sc.damping = r.real("solver", "damping", 0.0);  // <= 0: segment-implied
  sc.precond_damping = r.real("solver", "precond_damping", -1.0);
  sc.iterations = r.integer("solver", "iterations", 200);
  sc.batch_size = r.integer("solver", "batch_size", 0);
  sc.momentum = r.real("solver", "momentum", 0.9);
  sc.lr_decay_every = r.integer("solver", "lr_decay_every", 0);
  sc.lr_decay_factor = r.real("solver", "lr_decay_factor", 1.0);
  sc.repeats = r.integer("solver", "repeats", 1);
  sc.seed = r.seed("solver", "seed", 21);
  sc.snapshot_stride = r.integer("solver", "snapshot_stride", 0);
  s.query_index = r.integer("solver", "query_index", 0);
  if (sc.iterations <= 0)
    bad_value("solver", "iterations", std::to_string(sc.iterations),
              "positive");
  if (sc.repeats <= 0)
    bad_value("solver", "repeats", std::to_string(sc.repeats), "positive");
  if (s.query_index < 0)
    bad_value("solver", "query_index", std::to_string(s.query_index),
              "non-negative");
  if (s.query_index >= d.n_query)
    throw astra::ConfigError(
        "config key [solver] query_index = " + std::to_string(s.query_index) +
        " is out of range for [data] n_query = " + std::to_string(d.n_query));

  SourceSection& src = cfg.source;
  src.segments = r.integer("source", "segments", src.segments);
  src.stats_seed = r.seed("source", "stats_seed", src.stats_seed);
  src.mode = r.str("source", "mode", src.mode);
  if (src.segments <= 0)
    bad_value("source", "segments", std::to_string(src.segments), "positive");
  if (src.mode != "ekfac" && src.mode != "astra")
    bad_value("source", "mode", src.mode, "ekfac or astra");

  EvalSection& e = cfg.eval;
  e.masks = r.integer("eval", "masks", e.masks);
  e.beta = r.real("eval", "beta", e.beta);
  e.repeats = r.integer("eval", "repeats", e.repeats);
  e.mask_seed = r.seed("eval", "mask_seed", e.mask_seed);
  e.truth_seed = r.seed("eval", "truth_seed", e.truth_seed);
  e.null_trials = r.integer("eval", "null_trials", e.null_trials);
  e.null_seed = r.seed("eval", "null_seed", e.null_seed);
  e.bins = r.double_list("eval", "bins", e.bins);
  e.scan_queries = r.integer("eval", "scan_queries", e.scan_queries);
  e.scan_damping = r.real("eval", "scan_damping", e.scan_damping);
  e.scan_iterations = r.integer("eval", "scan_iterations", e.scan_iterations);
  e.scan_stride = r.integer("eval", "scan_stride", e.scan_stride);
  e.scan_sni_lr = r.real("eval", "scan_sni_lr", e.scan_sni_lr);
  e.scan_astra_lr = r.real("eval", "scan_astra_lr", e.scan_astra_lr);
  if (e.masks < 2)
    bad_value("eval", "masks", std::to_string(e.masks), "at least 2");
  if (!(e.beta > 0.0 && e.beta < 1.0))
    bad_value("eval", "beta", std::to_string(e.beta), "strictly inside (0, 1)");
  if (e.repeats <= 0)
    bad_value("eval", "repeats", std::to_string(e.repeats), "positive");
  if (e.null_trials < 2)
    bad_value("eval", "null_trials", std::to_string(e.null_trials),
              "at least 2");
  if (e.bins.empty())
    throw astra::ConfigError("config key [eval] bins must not be empty");
  for (std::size_t i = 0; i < e.bins.size(); ++i) {
    if (!(e.bins[i] > 0.0))
      throw astra::ConfigError("config key [eval] bins must be positive");
    if (i > 0 && !(e.bins[i] < e.bins[i - 1]))
      throw astra::ConfigError(
          "config key [eval] bins must be strictly decreasing");
  }
  if (e.scan_queries <= 0)
    bad_value("eval", "scan_queries", std::to_string(e.scan_queries),
              "positive");
  check_positive("[eval] scan_damping", e.scan_damping);
  if (e.scan_iterations <= 0)
    bad_value("eval", "scan_iterations", std::to_string(e.scan_iterations),
              "positive");
  if (e.scan_stride <= 0)
    bad_value("eval", "scan_stride", std::to_string(e.scan_stride), "positive");
  check_positive("[eval] scan_sni_lr", e.scan_sni_lr);
  check_positive("[eval] scan_astra_lr", e.scan_astra_lr);

  astra::validate_spec(cfg.mlp_spec());
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  return make_experiment_config(parse_config_file(path));
}

}  // namespace astra_cli
