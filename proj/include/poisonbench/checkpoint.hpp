#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "poisonbench/io.hpp"
#include "poisonbench/nn.hpp"

namespace poisonbench {

// Checkpoint container: versioned JSON with the layer spec, the init seed,
// and row-major parameter arrays. Layout documented in docs/formats.md.
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointKind = "poisonbench-model";

inline nlohmann::json model_to_json(const MlpModel& model) {
  nlohmann::json j;
  j["kind"] = kCheckpointKind;
  j["version"] = kCheckpointVersion;
  j["spec"] = {
      {"input_dim", model.spec.input_dim},
      {"hidden_dims", model.spec.hidden_dims},
      {"output_dim", model.spec.output_dim},
      {"activation", to_string(model.spec.activation)},
      {"dropout_rate", model.spec.dropout_rate},
  };
  j["rng_seed"] = model.rng_seed;
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& w : model.weights) {
    weights.push_back({{"rows", w.rows}, {"cols", w.cols}, {"data", w.data}});
  }
  j["weights"] = std::move(weights);
  j["biases"] = model.biases;
  return j;
}

inline MlpModel model_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != kCheckpointKind) {
    throw std::runtime_error("checkpoint: unexpected kind");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version");
  }
  MlpModel model;
  const auto& spec = j.at("spec");
  model.spec.input_dim = spec.at("input_dim").get<int>();
  model.spec.hidden_dims = spec.at("hidden_dims").get<std::vector<int>>();
  model.spec.output_dim = spec.at("output_dim").get<int>();
  model.spec.activation = activation_from_string(spec.at("activation").get<std::string>());
  model.spec.dropout_rate = spec.at("dropout_rate").get<double>();
  model.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  for (const auto& wj : j.at("weights")) {
    Matrix w(wj.at("rows").get<int>(), wj.at("cols").get<int>());
    w.data = wj.at("data").get<std::vector<double>>();
    if (w.data.size() != static_cast<std::size_t>(w.rows) * static_cast<std::size_t>(w.cols)) {
      throw std::runtime_error("checkpoint: weight payload size mismatch");
    }
    model.weights.push_back(std::move(w));
  }
  model.biases = j.at("biases").get<std::vector<std::vector<double>>>();
  model.validate();
  return model;
}

inline void save_model(const std::filesystem::path& path, const MlpModel& model) {
  atomic_write_file(path, model_to_json(model).dump(2) + "\n");
}

inline MlpModel load_model(const std::filesystem::path& path) {
  return model_from_json(nlohmann::json::parse(read_text_file(path)));
}

}  // namespace poisonbench
