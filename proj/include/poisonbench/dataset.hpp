#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonbench/io.hpp"
#include "poisonbench/nn.hpp"
#include "poisonbench/rng.hpp"

namespace poisonbench {

enum class Label : int { benign = 0, malware = 1 };
enum class Provenance { clean, poison_benign, trigger_malware };
enum class Split { train, test };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::clean: return "clean";
    case Provenance::poison_benign: return "poison_benign";
    case Provenance::trigger_malware: return "trigger_malware";
  }
  return "clean";
}

// family_id 0 is reserved for benign samples.
struct Sample {
  std::vector<double> features;
  Label label = Label::benign;
  int family_id = 0;
  Provenance provenance = Provenance::clean;
  std::string source_id;

  int label_int() const { return static_cast<int>(label); }

  void validate() const {
    if (label == Label::benign && family_id != 0) {
      throw std::invalid_argument("Sample: benign samples must have family_id 0 (" + source_id + ")");
    }
    if (label == Label::malware && family_id == 0) {
      throw std::invalid_argument("Sample: malware samples need family_id >= 1 (" + source_id + ")");
    }
    for (double f : features) {
      if (!std::isfinite(f)) throw std::invalid_argument("Sample: non-finite feature (" + source_id + ")");
    }
  }
};

struct NormParams {
  std::vector<double> min;
  std::vector<double> max;
  bool fitted() const { return !min.empty(); }
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<Split> split;
  std::map<int, std::vector<int>> family_index;
  NormParams norm_params;

  int feature_dim() const { return samples.empty() ? 0 : static_cast<int>(samples[0].features.size()); }
  std::size_t size() const { return samples.size(); }

  void rebuild_family_index() {
    family_index.clear();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      family_index[samples[i].family_id].push_back(static_cast<int>(i));
    }
  }

  std::vector<int> indices_where(auto&& pred) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (pred(static_cast<int>(i))) out.push_back(static_cast<int>(i));
    }
    return out;
  }

  std::vector<int> train_indices() const {
    return indices_where([&](int i) { return split[static_cast<std::size_t>(i)] == Split::train; });
  }
  std::vector<int> test_indices() const {
    return indices_where([&](int i) { return split[static_cast<std::size_t>(i)] == Split::test; });
  }
  std::vector<int> benign_train_indices() const {
    return indices_where([&](int i) {
      return split[static_cast<std::size_t>(i)] == Split::train &&
             samples[static_cast<std::size_t>(i)].label == Label::benign;
    });
  }
  std::vector<int> family_test_indices(int family_id) const {
    return indices_where([&](int i) {
      return split[static_cast<std::size_t>(i)] == Split::test &&
             samples[static_cast<std::size_t>(i)].family_id == family_id;
    });
  }
  std::vector<int> family_train_indices(int family_id) const {
    return indices_where([&](int i) {
      return split[static_cast<std::size_t>(i)] == Split::train &&
             samples[static_cast<std::size_t>(i)].family_id == family_id;
    });
  }
};

// Borrowed slice of a dataset: the dataset plus a list of sample indices.
struct DatasetView {
  const Dataset* dataset = nullptr;
  std::vector<int> indices;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  const Sample& operator[](std::size_t i) const {
    return dataset->samples[static_cast<std::size_t>(indices[i])];
  }

  std::vector<std::span<const double>> feature_spans() const {
    std::vector<std::span<const double>> spans;
    spans.reserve(indices.size());
    for (int idx : indices) spans.emplace_back(dataset->samples[static_cast<std::size_t>(idx)].features);
    return spans;
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (int idx : indices) out.push_back(dataset->samples[static_cast<std::size_t>(idx)].label_int());
    return out;
  }
};

inline DatasetView train_view(const Dataset& ds) { return {&ds, ds.train_indices()}; }
inline DatasetView test_view(const Dataset& ds) { return {&ds, ds.test_indices()}; }
inline DatasetView benign_train_view(const Dataset& ds) { return {&ds, ds.benign_train_indices()}; }

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("euclidean_distance: dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    total += d * d;
  }
  return std::sqrt(total);
}

struct SynthConfig {
  int feature_dim = 64;
  int n_families = 20;
  int samples_per_family = 150;
  int n_benign = 3000;
  double cluster_spread = 0.06;
  double benign_malware_overlap = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (feature_dim < 8) throw std::invalid_argument("SynthConfig: feature_dim must be >= 8");
    if (n_families < 1) throw std::invalid_argument("SynthConfig: n_families must be >= 1");
    if (samples_per_family < 1) throw std::invalid_argument("SynthConfig: samples_per_family must be >= 1");
    if (n_benign < 1) throw std::invalid_argument("SynthConfig: n_benign must be >= 1");
    if (!(cluster_spread > 0.0)) throw std::invalid_argument("SynthConfig: cluster_spread must be > 0");
    if (benign_malware_overlap < 0.0 || benign_malware_overlap > 1.0) {
      throw std::invalid_argument("SynthConfig: benign_malware_overlap must be in [0,1]");
    }
  }
};

namespace detail {

// Per-group 75/25 train/test split, seeded shuffle within each group.
inline void assign_stratified_split(Dataset& ds, std::uint64_t seed) {
  ds.split.assign(ds.samples.size(), Split::train);
  ds.rebuild_family_index();
  Rng rng(seed);
  for (auto& [family, members] : ds.family_index) {
    std::vector<int> order = members;
    rng.shuffle(order);
    std::size_t n_train = (order.size() * 3) / 4;
    if (order.size() > 1 && n_train == order.size()) n_train = order.size() - 1;
    for (std::size_t i = n_train; i < order.size(); ++i) {
      ds.split[static_cast<std::size_t>(order[i])] = Split::test;
    }
  }
}

inline std::string zero_padded(int value, int width) {
  std::string s = std::to_string(value);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace detail

/// Seeded synthetic corpus: each malware family is a Gaussian cluster in
/// [0,1]^d; benign data comes from a broad mixture, with a configurable
/// fraction drawn near malware family centers.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const int d = cfg.feature_dim;

  auto draw_center = [&]() {
    std::vector<double> c(static_cast<std::size_t>(d));
    for (double& v : c) v = rng.uniform(0.2, 0.8);
    return c;
  };
  auto draw_around = [&](const std::vector<double>& center, double spread) {
    std::vector<double> x(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
      x[static_cast<std::size_t>(i)] = std::clamp(center[static_cast<std::size_t>(i)] + spread * rng.normal(), 0.0, 1.0);
    }
    return x;
  };

  std::vector<std::vector<double>> family_centers;
  family_centers.reserve(static_cast<std::size_t>(cfg.n_families));
  for (int f = 0; f < cfg.n_families; ++f) family_centers.push_back(draw_center());

  constexpr int kBenignClusters = 8;
  std::vector<std::vector<double>> benign_centers;
  for (int i = 0; i < kBenignClusters; ++i) benign_centers.push_back(draw_center());

  Dataset ds;
  ds.samples.reserve(static_cast<std::size_t>(cfg.n_benign) +
                     static_cast<std::size_t>(cfg.n_families) * cfg.samples_per_family);
  const double benign_spread = cfg.cluster_spread * 2.5;
  const double overlap_spread = cfg.cluster_spread * 1.5;
  for (int i = 0; i < cfg.n_benign; ++i) {
    Sample s;
    s.label = Label::benign;
    s.family_id = 0;
    s.source_id = "synth-b-" + detail::zero_padded(i, 5);
    if (rng.next_double() < cfg.benign_malware_overlap) {
      const auto& center = family_centers[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(cfg.n_families)))];
      s.features = draw_around(center, overlap_spread);
    } else {
      const auto& center = benign_centers[static_cast<std::size_t>(rng.below(kBenignClusters))];
      s.features = draw_around(center, benign_spread);
    }
    ds.samples.push_back(std::move(s));
  }
  for (int f = 1; f <= cfg.n_families; ++f) {
    const auto& center = family_centers[static_cast<std::size_t>(f - 1)];
    for (int i = 0; i < cfg.samples_per_family; ++i) {
      Sample s;
      s.label = Label::malware;
      s.family_id = f;
      s.source_id = "synth-f" + detail::zero_padded(f, 3) + "-" + detail::zero_padded(i, 4);
      s.features = draw_around(center, cfg.cluster_spread);
      ds.samples.push_back(std::move(s));
    }
  }
  detail::assign_stratified_split(ds, cfg.seed ^ 0x5eedu);
  return ds;
}

inline void apply_normalization(const NormParams& params, std::vector<double>& features) {
  if (features.size() != params.min.size()) {
    throw std::invalid_argument("apply_normalization: dimension mismatch");
  }
  constexpr double kConstantEps = 1e-12;
  for (std::size_t j = 0; j < features.size(); ++j) {
    double range = params.max[j] - params.min[j];
    if (range < kConstantEps) {
      features[j] = 0.0;
    } else {
      features[j] = std::clamp((features[j] - params.min[j]) / range, 0.0, 1.0);
    }
  }
}

/// Min-max scaling fitted on the train split only, applied everywhere;
/// constant features map to 0 and out-of-range values clip to [0,1].
inline Dataset normalize(const Dataset& input) {
  std::vector<int> train = input.train_indices();
  if (train.empty()) throw std::invalid_argument("normalize: empty train split");
  const int d = input.feature_dim();
  Dataset ds = input;
  ds.norm_params.min.assign(static_cast<std::size_t>(d), std::numeric_limits<double>::infinity());
  ds.norm_params.max.assign(static_cast<std::size_t>(d), -std::numeric_limits<double>::infinity());
  for (int idx : train) {
    const auto& f = input.samples[static_cast<std::size_t>(idx)].features;
    for (int j = 0; j < d; ++j) {
      ds.norm_params.min[static_cast<std::size_t>(j)] = std::min(ds.norm_params.min[static_cast<std::size_t>(j)], f[static_cast<std::size_t>(j)]);
      ds.norm_params.max[static_cast<std::size_t>(j)] = std::max(ds.norm_params.max[static_cast<std::size_t>(j)], f[static_cast<std::size_t>(j)]);
    }
  }
  for (auto& sample : ds.samples) {
    apply_normalization(ds.norm_params, sample.features);
  }
  return ds;
}

/// All benign train indices ordered by ascending Euclidean distance to the
/// target's features; ties break toward the lower sample index.
inline std::vector<int> sorted_benign_by_distance(const Dataset& ds, const Sample& target) {
  std::vector<int> benign = ds.benign_train_indices();
  if (benign.empty()) throw std::invalid_argument("sorted_benign_by_distance: no benign train samples");
  std::vector<std::pair<double, int>> keyed;
  keyed.reserve(benign.size());
  for (int idx : benign) {
    keyed.emplace_back(euclidean_distance(ds.samples[static_cast<std::size_t>(idx)].features, target.features), idx);
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<int> out;
  out.reserve(keyed.size());
  for (auto& [dist, idx] : keyed) out.push_back(idx);
  return out;
}

/// Seeded uniform draw of benign train indices, without replacement.
inline std::vector<int> random_benign_subset(const Dataset& ds, int count, std::uint64_t seed) {
  std::vector<int> benign = ds.benign_train_indices();
  if (count < 0 || static_cast<std::size_t>(count) > benign.size()) {
    throw std::invalid_argument("random_benign_subset: count exceeds benign train samples");
  }
  Rng rng(seed);
  return rng.sample_without_replacement(benign, static_cast<std::size_t>(count));
}

// ---------------------------------------------------------------------------
// Dataset files. CSV header: source_id,label,family_id,f0..f{d-1}; JSONL rows
// mirror the same fields with a "features" array. Normalization parameters
// are exported next to any saved dataset.

inline std::string dataset_to_csv(const Dataset& ds) {
  std::string out = "source_id,label,family_id";
  const int d = ds.feature_dim();
  for (int j = 0; j < d; ++j) out += ",f" + std::to_string(j);
  out += "\n";
  for (const auto& s : ds.samples) {
    out += s.source_id;
    out += ',';
    out += std::to_string(s.label_int());
    out += ',';
    out += std::to_string(s.family_id);
    for (double f : s.features) {
      out += ',';
      out += format_double(f);
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::json norm_params_to_json(const NormParams& params) {
  return nlohmann::json{{"min", params.min}, {"max", params.max}};
}

inline NormParams norm_params_from_json(const nlohmann::json& j) {
  NormParams p;
  p.min = j.at("min").get<std::vector<double>>();
  p.max = j.at("max").get<std::vector<double>>();
  if (p.min.size() != p.max.size()) throw std::runtime_error("norm params: size mismatch");
  return p;
}

inline void save_dataset(const std::filesystem::path& csv_path, const Dataset& ds) {
  atomic_write_file(csv_path, dataset_to_csv(ds));
  std::filesystem::path norm_path = csv_path;
  norm_path.replace_extension(".norm.json");
  atomic_write_file(norm_path, norm_params_to_json(ds.norm_params).dump(2) + "\n");
}

enum class IngestFormat { csv, jsonl };

namespace detail {

[[noreturn]] inline void ingest_error(std::size_t row, const std::string& field, const std::string& what) {
  throw std::runtime_error("ingest: row " + std::to_string(row) + ", field '" + field + "': " + what);
}

inline double parse_feature(std::size_t row, const std::string& field, const std::string& text) {
  try {
    std::size_t consumed = 0;
    double v = std::stod(text, &consumed);
    if (consumed != text.size()) ingest_error(row, field, "trailing characters in '" + text + "'");
    if (!std::isfinite(v)) ingest_error(row, field, "non-finite value");
    return v;
  } catch (const std::invalid_argument&) {
    ingest_error(row, field, "not a number: '" + text + "'");
  } catch (const std::out_of_range&) {
    ingest_error(row, field, "out of range: '" + text + "'");
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(current);
      current.clear();
    } else if (c != '\r') {
      current += c;
    }
  }
  fields.push_back(current);
  return fields;
}

inline Sample parse_ingest_row(std::size_t row, const std::string& source_id,
                               const std::string& label_text, const std::string& family_text,
                               const std::vector<double>& features) {
  Sample s;
  s.source_id = source_id;
  if (s.source_id.empty()) ingest_error(row, "source_id", "empty");
  if (label_text == "0") {
    s.label = Label::benign;
  } else if (label_text == "1") {
    s.label = Label::malware;
  } else {
    ingest_error(row, "label", "expected 0 or 1, got '" + label_text + "'");
  }
  try {
    s.family_id = std::stoi(family_text);
  } catch (...) {
    ingest_error(row, "family_id", "not an integer: '" + family_text + "'");
  }
  if (s.family_id < 0) ingest_error(row, "family_id", "negative");
  if (s.label == Label::benign && s.family_id != 0) {
    ingest_error(row, "family_id", "benign rows must use family_id 0");
  }
  if (s.label == Label::malware && s.family_id == 0) {
    ingest_error(row, "family_id", "malware rows need family_id >= 1");
  }
  s.features = features;
  return s;
}

}  // namespace detail

/// Parse an external feature file (schema above), assign the deterministic
/// stratified 75/25 split, and normalize by fitting on the train rows.
inline Dataset ingest(const std::filesystem::path& path, IngestFormat format) {
  std::string text = read_text_file(path);
  Dataset ds;
  std::istringstream lines(text);
  std::string line;
  std::size_t row = 0;
  int expected_dim = -1;
  if (format == IngestFormat::csv) {
    if (!std::getline(lines, line)) throw std::runtime_error("ingest: empty file");
    ++row;
    auto header = detail::split_csv_line(line);
    if (header.size() < 4 || header[0] != "source_id" || header[1] != "label" || header[2] != "family_id") {
      throw std::runtime_error("ingest: bad header, expected source_id,label,family_id,f0..");
    }
    for (std::size_t j = 3; j < header.size(); ++j) {
      if (header[j] != "f" + std::to_string(j - 3)) {
        throw std::runtime_error("ingest: bad header column '" + header[j] + "'");
      }
    }
    expected_dim = static_cast<int>(header.size()) - 3;
    while (std::getline(lines, line)) {
      ++row;
      if (line.empty()) continue;
      auto fields = detail::split_csv_line(line);
      if (static_cast<int>(fields.size()) != expected_dim + 3) {
        detail::ingest_error(row, "row", "expected " + std::to_string(expected_dim + 3) +
                                             " fields, got " + std::to_string(fields.size()));
      }
      std::vector<double> features(static_cast<std::size_t>(expected_dim));
      for (int j = 0; j < expected_dim; ++j) {
        features[static_cast<std::size_t>(j)] =
            detail::parse_feature(row, "f" + std::to_string(j), fields[static_cast<std::size_t>(j) + 3]);
      }
      ds.samples.push_back(detail::parse_ingest_row(row, fields[0], fields[1], fields[2], features));
    }
  } else {
    while (std::getline(lines, line)) {
      ++row;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        detail::ingest_error(row, "row", std::string("invalid JSON: ") + e.what());
      }
      if (!j.contains("source_id")) detail::ingest_error(row, "source_id", "missing");
      if (!j.contains("label")) detail::ingest_error(row, "label", "missing");
      if (!j.contains("family_id")) detail::ingest_error(row, "family_id", "missing");
      if (!j.contains("features")) detail::ingest_error(row, "features", "missing");
      if (!j.at("source_id").is_string()) detail::ingest_error(row, "source_id", "expected a string");
      std::vector<double> features;
      try {
        features = j.at("features").get<std::vector<double>>();
      } catch (const nlohmann::json::exception&) {
        detail::ingest_error(row, "features", "expected an array of numbers");
      }
      for (double f : features) {
        if (!std::isfinite(f)) detail::ingest_error(row, "features", "non-finite value");
      }
      ds.samples.push_back(detail::parse_ingest_row(row, j.at("source_id").get<std::string>(),
                                                    j.at("label").dump(), j.at("family_id").dump(),
                                                    features));
    }
  }
  if (ds.samples.empty()) throw std::runtime_error("ingest: no data rows");
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (expected_dim < 0) expected_dim = static_cast<int>(ds.samples[i].features.size());
    if (static_cast<int>(ds.samples[i].features.size()) != expected_dim) {
      detail::ingest_error(i + 1, "features", "inconsistent dimension");
    }
  }
  // Split assignment is derived from file order so re-ingesting the same
  // file reproduces the same split without a seed parameter.
  detail::assign_stratified_split(ds, fnv1a64("ingest-split"));
  return normalize(ds);
}

// ---------------------------------------------------------------------------
// Model adapters.

inline MlpModel train_classifier(const MlpModel& model, const DatasetView& view, const TrainConfig& cfg) {
  return train(model, view.feature_spans(), view.labels(), cfg);
}

inline double accuracy(const MlpModel& model, const DatasetView& view) {
  if (view.empty()) throw std::invalid_argument("accuracy: empty view");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < view.size(); ++i) {
    if (predict_label(model, view[i].features) == view[i].label_int()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(view.size());
}

// Fraction of a view classified as malware.
inline double detection_rate(const MlpModel& model, const DatasetView& view) {
  if (view.empty()) throw std::invalid_argument("detection_rate: empty view");
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < view.size(); ++i) {
    if (predict_label(model, view[i].features) == 1) ++flagged;
  }
  return static_cast<double>(flagged) / static_cast<double>(view.size());
}

}  // namespace poisonbench
