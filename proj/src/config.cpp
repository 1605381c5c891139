#include "magnifier/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "magnifier/errors.hpp"
#include "magnifier/semantics.hpp"
#include "magnifier/sfb.hpp"

namespace magnifier {

using json = nlohmann::json;

namespace {

const std::set<std::string> kRunControls{"eval_every", "max_steps"};

void flatten_into(const json& j, const std::string& prefix, json& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten_into(*it, key, out);
    } else {
      if (out.contains(key)) throw ConfigError("config: key '" + key + "' given twice");
      out[key] = *it;
    }
  }
}

json to_flat_json(const TrainConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["stage1_epochs"] = c.stage1_epochs;
  j["stage2_epochs"] = c.stage2_epochs;
  j["lr"] = c.lr;
  j["stage2_lr"] = c.stage2_lr;
  j["batch.p"] = c.batch_p;
  j["batch.q"] = c.batch_q;
  j["optimizer.kind"] = to_string(c.optimizer.kind);
  j["optimizer.beta1"] = c.optimizer.beta1;
  j["optimizer.beta2"] = c.optimizer.beta2;
  j["optimizer.eps"] = c.optimizer.eps;
  j["optimizer.weight_decay"] = c.optimizer.weight_decay;
  j["sab.k_hat"] = c.k_hat;
  j["sab.strategy"] = sab::to_string(c.strategy);
  j["loss.gamma"] = c.loss.gamma;
  j["loss.lambda_mask"] = c.loss.lambda_mask;
  j["loss.margin"] = c.loss.margin;
  j["loss.sd_epsilon"] = c.loss.sd_epsilon;
  j["mask.threshold"] = c.mask_threshold;
  j["model.components"] = c.components.name();
  j["model.channels"] = c.channels;
  j["model.backbone_kernel"] = c.backbone_kernel;
  j["sfb.hidden_dim"] = c.hidden_dim;
  std::vector<std::string> order;
  for (auto k : c.region_order) order.emplace_back(semantics::region_names().at(k));
  j["sfb.region_order"] = order;
  j["sfb.use_ablation_branch"] = c.components.ablation;
  j["eval_every"] = c.eval_every;
  j["max_steps"] = c.max_steps;
  return j;
}

template <typename V>
V get(const json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + key + "': " + j.dump());
  }
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    const json j = to_flat_json(TrainConfig{});
    for (auto it = j.begin(); it != j.end(); ++it) k.push_back(it.key());
    k.push_back("mask.lambda");  // alias of loss.lambda_mask
    return k;
  }();
  return keys;
}

void TrainConfig::validate() const {
  if (batch_p < 2 || batch_q < 2) throw ConfigError("config: batch.p and batch.q must be >= 2");
  if (!(lr > 0) || !(stage2_lr > 0)) throw ConfigError("config: learning rates must be positive");
  if (stage1_epochs + stage2_epochs == 0) throw ConfigError("config: no epochs to run");
  if (eval_every == 0) throw ConfigError("config: eval_every must be >= 1");
  loss.validate();
  components.validate();
  sfb::validate_region_order(region_order, semantics::kNumRegions);
  if (components.sab) sab::validate_k_hat(strategy, k_hat);
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 &&
        optimizer.beta2 < 1 && optimizer.eps > 0 && optimizer.weight_decay >= 0))
    throw ConfigError("config: optimizer hyperparameters out of range");
  model_config(2).validate();
}

std::map<std::string, std::string> TrainConfig::flatten(bool include_run_controls) const {
  std::map<std::string, std::string> out;
  const json j = to_flat_json(*this);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!include_run_controls && kRunControls.count(it.key())) continue;
    out[it.key()] = it->dump();
  }
  return out;
}

std::string TrainConfig::to_json() const {
  json nested;
  const json flat = to_flat_json(*this);
  for (auto it = flat.begin(); it != flat.end(); ++it) nested[json::json_pointer("/" + [&] {
    std::string k = it.key();
    for (auto& ch : k)
      if (ch == '.') ch = '/';
    return k;
  }())] = *it;
  return nested.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be an object");
  json flat = json::object();
  flatten_into(root, "", flat);
  if (flat.contains("mask.lambda")) {
    if (flat.contains("loss.lambda_mask"))
      throw ConfigError("config: give either mask.lambda or loss.lambda_mask, not both");
    flat["loss.lambda_mask"] = flat["mask.lambda"];
    flat.erase("mask.lambda");
  }

  TrainConfig c;
  const auto& keys = config_keys();
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
      std::string list;
      for (const auto& k : keys) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("config: unknown key '" + it.key() + "'; valid keys: " + list);
    }
  }
  bool ablation = c.components.ablation;
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    const std::string& k = it.key();
    const json& v = *it;
    if (k == "seed") c.seed = get<std::uint64_t>(v, k);
    else if (k == "stage1_epochs") c.stage1_epochs = get<std::size_t>(v, k);
    else if (k == "stage2_epochs") c.stage2_epochs = get<std::size_t>(v, k);
    else if (k == "lr") c.lr = get<double>(v, k);
    else if (k == "stage2_lr") c.stage2_lr = get<double>(v, k);
    else if (k == "batch.p") c.batch_p = get<std::size_t>(v, k);
    else if (k == "batch.q") c.batch_q = get<std::size_t>(v, k);
    else if (k == "optimizer.kind") c.optimizer.kind = parse_optimizer_kind(get<std::string>(v, k));
    else if (k == "optimizer.beta1") c.optimizer.beta1 = get<double>(v, k);
    else if (k == "optimizer.beta2") c.optimizer.beta2 = get<double>(v, k);
    else if (k == "optimizer.eps") c.optimizer.eps = get<double>(v, k);
    else if (k == "optimizer.weight_decay") c.optimizer.weight_decay = get<double>(v, k);
    else if (k == "sab.k_hat") c.k_hat = get<std::size_t>(v, k);
    else if (k == "sab.strategy") c.strategy = sab::parse_strategy(get<std::string>(v, k));
    else if (k == "loss.gamma") c.loss.gamma = get<double>(v, k);
    else if (k == "loss.lambda_mask") c.loss.lambda_mask = get<double>(v, k);
    else if (k == "loss.margin") c.loss.margin = get<double>(v, k);
    else if (k == "loss.sd_epsilon") c.loss.sd_epsilon = get<double>(v, k);
    else if (k == "mask.threshold") c.mask_threshold = get<double>(v, k);
    else if (k == "model.components") c.components = model::Components::parse(get<std::string>(v, k));
    else if (k == "model.channels") c.channels = get<std::size_t>(v, k);
    else if (k == "model.backbone_kernel") c.backbone_kernel = get<std::size_t>(v, k);
    else if (k == "sfb.hidden_dim") c.hidden_dim = get<std::size_t>(v, k);
    else if (k == "sfb.use_ablation_branch") ablation = get<bool>(v, k);
    else if (k == "eval_every") c.eval_every = get<std::size_t>(v, k);
    else if (k == "max_steps") c.max_steps = get<std::size_t>(v, k);
    else if (k == "sfb.region_order") {
      if (!v.is_array()) throw ConfigError("config: sfb.region_order must be a list");
      c.region_order.clear();
      for (const auto& e : v)
        c.region_order.push_back(e.is_string() ? semantics::region_index(e.get<std::string>())
                                               : get<std::size_t>(e, k));
    }
  }
  // The flag and the components string describe the same switch; the flag wins when given.
  if (flat.contains("sfb.use_ablation_branch")) c.components.ablation = ablation;
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

std::string TrainConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : flatten(false)) {
    for (unsigned char ch : k + "=" + v + ";") {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

model::ModelConfig TrainConfig::model_config(std::size_t num_classes) const {
  model::ModelConfig m;
  m.components = components;
  m.channels = channels;
  m.backbone_kernel = backbone_kernel;
  m.hidden_dim = hidden_dim;
  m.region_order = region_order;
  m.num_classes = num_classes;
  m.mask_threshold = mask_threshold;
  return m;
}

std::vector<std::string> config_diff(const TrainConfig& a, const TrainConfig& b) {
  std::vector<std::string> out;
  const auto fa = a.flatten(false), fb = b.flatten(false);
  for (const auto& [k, v] : fa) {
    const auto it = fb.find(k);
    if (it == fb.end() || it->second != v)
      out.push_back(k + ": " + v + " -> " + (it == fb.end() ? "<missing>" : it->second));
  }
  return out;
}

}  // namespace magnifier
