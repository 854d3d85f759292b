#include <set>

#include "dynasty/bundle.hpp"
#include "dynasty/error.hpp"
#include "dynasty/model.hpp"

namespace dynasty {

namespace {
const char* kCheckpointFormat = "dynasty-checkpoint";
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"feature_dim", c.feature_dim},
                     {"hidden_dim", c.hidden_dim},
                     {"num_heads", c.num_heads},
                     {"num_layers", c.num_layers},
                     {"history_len", c.history_len},
                     {"horizon", c.horizon},
                     {"max_history_len", c.max_history_len},
                     {"edge_dropout_rate", c.edge_dropout_rate},
                     {"feature_dropout_rate", c.feature_dropout_rate},
                     {"temporal_attention", c.temporal_attention},
                     {"bias_mlp_hidden", c.bias_mlp_hidden},
                     {"bias_mlp_layers", c.bias_mlp_layers},
                     {"tie_reconstruction_head", c.tie_reconstruction_head},
                     {"layer_norm_eps", c.layer_norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  nlohmann::json defaults = c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError("unknown model config key '" + it.key() + "'");
  }
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    read("feature_dim", c.feature_dim);
    read("hidden_dim", c.hidden_dim);
    read("num_heads", c.num_heads);
    read("num_layers", c.num_layers);
    read("history_len", c.history_len);
    read("horizon", c.horizon);
    read("max_history_len", c.max_history_len);
    read("edge_dropout_rate", c.edge_dropout_rate);
    read("feature_dropout_rate", c.feature_dropout_rate);
    read("temporal_attention", c.temporal_attention);
    read("bias_mlp_hidden", c.bias_mlp_hidden);
    read("bias_mlp_layers", c.bias_mlp_layers);
    read("tie_reconstruction_head", c.tie_reconstruction_head);
    read("layer_norm_eps", c.layer_norm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir, const nlohmann::json& extra) {
  Bundle bundle;
  bundle.metadata = {{"model_config", model.config()}, {"extra", extra}};
  nlohmann::json frozen = nlohmann::json::array();
  for (const auto& nt : model.named_parameters()) {
    if (!nt.tensor.requires_grad()) frozen.push_back(nt.name);
    bundle.tensors.push_back({nt.name, nt.tensor.to_array()});
  }
  bundle.metadata["frozen"] = frozen;
  write_bundle(dir, kCheckpointFormat, bundle);
}

Model load_checkpoint(const std::filesystem::path& dir, nlohmann::json* extra) {
  Bundle bundle = read_bundle(dir, kCheckpointFormat);
  if (extra) *extra = bundle.metadata.value("extra", nlohmann::json::object());
  ModelConfig config;
  try {
    config = bundle.metadata.at("model_config").get<ModelConfig>();
  } catch (const nlohmann::json::out_of_range&) {
    throw DataError("checkpoint " + dir.string() + " has no model_config");
  }
  std::set<std::string> frozen;
  if (bundle.metadata.contains("frozen")) {
    for (const auto& name : bundle.metadata["frozen"]) frozen.insert(name.get<std::string>());
  }
  Model model = Model::initialize(config, 0);
  auto named = model.named_parameters();
  if (named.size() != bundle.tensors.size()) {
    throw DataError("checkpoint " + dir.string() + " holds " + std::to_string(bundle.tensors.size()) +
                    " tensors, configuration expects " + std::to_string(named.size()));
  }
  for (auto& nt : named) {
    const NdArray& array = bundle.get(nt.name);
    if (array.shape != nt.tensor.shape()) {
      throw DataError("checkpoint tensor '" + nt.name + "' has shape " + shape_to_string(array.shape) +
                      ", expected " + shape_to_string(nt.tensor.shape()));
    }
    std::copy(array.values.begin(), array.values.end(), nt.tensor.mutable_values().begin());
    if (frozen.count(nt.name)) nt.tensor.set_requires_grad(false);
  }
  return model;
}

}  // namespace dynasty
