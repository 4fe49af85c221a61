#include "astra/data.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "astra/error.hpp"
#include "astra/rng.hpp"

namespace astra {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

double parse_cell(const std::string& cell, std::size_t row, const std::string& column) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(cell, &pos);
    while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
    if (pos != cell.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("CSV row " + std::to_string(row) + ", column '" + column +
                      "': cannot parse '" + cell + "' as a number");
  }
}

}  // namespace

Dataset load_csv(const std::string& path, const std::string& target_column,
                 TaskKind task) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("load_csv: '" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_line(line);

  int target_idx = -1;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == target_column) target_idx = static_cast<int>(i);
  if (target_idx < 0)
    throw ConfigError("load_csv: target column '" + target_column + "' not found in '" +
                      path + "'");

  const int d = static_cast<int>(header.size()) - 1;
  if (d < 1) throw ConfigError("load_csv: no feature columns in '" + path + "'");

  Dataset ds;
  ds.task = task;
  ds.feature_dim = d;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size())
      throw ConfigError("CSV row " + std::to_string(row) + ": expected " +
                        std::to_string(header.size()) + " cells, got " +
                        std::to_string(cells.size()));
    Example ex;
    ex.x.reserve(d);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const double v = parse_cell(cells[i], row, header[i]);
      if (static_cast<int>(i) == target_idx)
        ex.target = v;
      else
        ex.x.push_back(v);
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw ConfigError("load_csv: '" + path + "' has no data rows");

  // Standardize features (and regression targets) over the full file.
  const double n = static_cast<double>(ds.examples.size());
  Standardization st;
  st.feature_mean.assign(d, 0.0);
  st.feature_std.assign(d, 0.0);
  for (const Example& ex : ds.examples)
    for (int j = 0; j < d; ++j) st.feature_mean[j] += ex.x[j];
  for (int j = 0; j < d; ++j) st.feature_mean[j] /= n;
  for (const Example& ex : ds.examples)
    for (int j = 0; j < d; ++j) {
      const double dv = ex.x[j] - st.feature_mean[j];
      st.feature_std[j] += dv * dv;
    }
  for (int j = 0; j < d; ++j) {
    st.feature_std[j] = std::sqrt(st.feature_std[j] / n);
    if (st.feature_std[j] == 0.0) st.feature_std[j] = 1.0;  // constant column
  }
  for (Example& ex : ds.examples)
    for (int j = 0; j < d; ++j) ex.x[j] = (ex.x[j] - st.feature_mean[j]) / st.feature_std[j];

  if (task == TaskKind::kRegression) {
    double tm = 0.0;
    for (const Example& ex : ds.examples) tm += ex.target;
    tm /= n;
    double tv = 0.0;
    for (const Example& ex : ds.examples) tv += (ex.target - tm) * (ex.target - tm);
    double tstd = std::sqrt(tv / n);
    if (tstd == 0.0) tstd = 1.0;
    for (Example& ex : ds.examples) ex.target = (ex.target - tm) / tstd;
    st.target_mean = tm;
    st.target_std = tstd;
    st.target_standardized = true;
  } else {
    int classes = 0;
    for (const Example& ex : ds.examples) classes = std::max(classes, ex.label() + 1);
    ds.num_classes = classes;
  }
  ds.standardization = std::move(st);
  return ds;
}

Dataset synth_regression(int n, int d, double noise_std, std::uint64_t seed) {
  if (n <= 0 || d <= 0) throw ConfigError("synth_regression: n and d must be positive");
  Rng rng(seed);
  std::vector<double> w(d);
  for (double& v : w) v = rng.normal();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Dataset ds;
  ds.task = TaskKind::kRegression;
  ds.feature_dim = d;
  ds.examples.reserve(n);
  for (int i = 0; i < n; ++i) {
    Example ex;
    ex.x.resize(d);
    double t = 0.0;
    for (int j = 0; j < d; ++j) {
      ex.x[j] = rng.normal();
      t += w[j] * ex.x[j];
    }
    ex.target = t * inv_sqrt_d + noise_std * rng.normal();
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Dataset synth_classification(int n, int d, int classes, double margin,
                             std::uint64_t seed, double label_noise_fraction) {
  if (n <= 0 || d <= 0) throw ConfigError("synth_classification: n and d must be positive");
  if (classes < 2) throw ConfigError("synth_classification: need at least two classes");
  if (label_noise_fraction < 0.0 || label_noise_fraction > 1.0)
    throw ConfigError("synth_classification: label noise fraction outside [0, 1]");
  Rng rng(seed);
  // Cluster centers: random unit directions scaled to the requested margin.
  std::vector<std::vector<double>> centers(classes, std::vector<double>(d));
  for (auto& c : centers) {
    double nrm = 0.0;
    for (double& v : c) {
      v = rng.normal();
      nrm += v * v;
    }
    nrm = std::sqrt(nrm);
    for (double& v : c) v = margin * v / (nrm > 0.0 ? nrm : 1.0);
  }
  Dataset ds;
  ds.task = TaskKind::kClassification;
  ds.feature_dim = d;
  ds.num_classes = classes;
  ds.examples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
    Example ex;
    ex.x.resize(d);
    for (int j = 0; j < d; ++j) ex.x[j] = centers[c][j] + rng.normal();
    int lbl = c;
    if (label_noise_fraction > 0.0 && rng.next_double() < label_noise_fraction) {
      // Resample uniformly among the wrong classes.
      const int shift = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(classes - 1)));
      lbl = (c + shift) % classes;
    }
    ex.target = static_cast<double>(lbl);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

SplitResult split(const Dataset& dataset, int n_query, std::uint64_t seed) {
  if (n_query < 0 || n_query >= dataset.size())
    throw ConfigError("split: query count must lie in [0, dataset size)");
  std::vector<int> order(dataset.examples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  SplitResult out;
  out.train.task = dataset.task;
  out.train.feature_dim = dataset.feature_dim;
  out.train.num_classes = dataset.num_classes;
  out.train.standardization = dataset.standardization;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (static_cast<int>(i) < n_query)
      out.queries.push_back(dataset.examples[order[i]]);
    else
      out.train.examples.push_back(dataset.examples[order[i]]);
  }
  return out;
}

std::string dataset_manifest_json(const Dataset& dataset, const std::string& kind,
                                  std::uint64_t seed, const std::string& source_path) {
  std::ostringstream os;
  os << "{\n";
  os << "  \"kind\": \"" << kind << "\",\n";
  os << "  \"task\": \"" << (dataset.task == TaskKind::kRegression ? "regression"
                                                                   : "classification")
     << "\",\n";
  os << "  \"n\": " << dataset.size() << ",\n";
  os << "  \"d\": " << dataset.feature_dim << ",\n";
  if (dataset.task == TaskKind::kClassification)
    os << "  \"classes\": " << dataset.num_classes << ",\n";
  os << "  \"seed\": " << seed << ",\n";
  os << "  \"source_path\": \"" << source_path << "\",\n";
  os << "  \"standardized\": " << (dataset.standardization ? "true" : "false");
  if (dataset.standardization && dataset.standardization->target_standardized) {
    os << ",\n  \"target_mean\": " << dataset.standardization->target_mean;
    os << ",\n  \"target_std\": " << dataset.standardization->target_std;
  }
  os << "\n}\n";
  return os.str();
}

void save_examples_csv(const std::string& path, const std::vector<Example>& examples,
                       int feature_dim) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_examples_csv: cannot write '" + path + "'");
  for (int j = 0; j < feature_dim; ++j) out << "f" << j << ",";
  out << "target\n";
  out.precision(17);
  for (const Example& ex : examples) {
    if (static_cast<int>(ex.x.size()) != feature_dim)
      throw DimensionError("save_examples_csv: feature width mismatch");
    for (double v : ex.x) out << v << ",";
    out << ex.target << "\n";
  }
}

std::vector<Example> load_examples_csv(const std::string& path, int feature_dim) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("load_examples_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line))
    throw ConfigError("load_examples_csv: '" + path + "' is empty");
  std::vector<Example> examples;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (static_cast<int>(cells.size()) != feature_dim + 1)
      throw ConfigError("load_examples_csv row " + std::to_string(row) +
                        ": expected " + std::to_string(feature_dim + 1) + " cells");
    Example ex;
    ex.x.reserve(feature_dim);
    for (int j = 0; j < feature_dim; ++j)
      ex.x.push_back(parse_cell(cells[j], row, "f" + std::to_string(j)));
    ex.target = parse_cell(cells[feature_dim], row, "target");
    examples.push_back(std::move(ex));
  }
  return examples;
}

}  // namespace astra
