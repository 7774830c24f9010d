#pragma once

// Run configuration: a JSON document merged over built-in defaults.
//
// Every key a user supplies must already exist in the defaults; unknown keys
// and type mismatches are errors that name the file, line and dotted key.
// Command-line overrides use the same dotted paths (optimizer.lr=0.02).

#include <cnsg/dataset.hpp>
#include <cnsg/segnet.hpp>

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace cnsg::config {

using nlohmann::json;

struct ConfigError : Error {
  using Error::Error;
};

struct OptimizerConfig {
  double lr = 0.01;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  double poly_power = 0.9;
};

struct LossConfig {
  bool use_nsfr = true;
  bool use_nsca = true;
  double w_s = 1.0;
  double w_cls = 1.0;
  double w_sca = 1.0;
};

struct TrainConfig {
  int64_t iterations = 1000;
  int64_t batch_size = 4;
  double augment_strength = 1.0;
  int64_t log_every = 1;
  bool log_centroids = false;
};

struct DataConfig {
  std::string root;
  std::string source_domain = "daylight";
  synth::DatasetSpec spec;
};

struct ExperimentConfig {
  std::vector<uint64_t> seeds{0, 1, 2};
  std::vector<double> alphas{0.0, 0.3, 0.9};
};

struct RunConfig {
  uint64_t seed = 0;
  segnet::ModelConfig model;
  double alpha = nonsalient::kDefaultAlpha;
  double ema_lambda = nonsalient::kDefaultEmaLambda;
  OptimizerConfig optimizer;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;
  ExperimentConfig experiment;

  void validate() const {
    model.validate();
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid config: " + what);
    };
    need(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
    need(ema_lambda >= 0.0 && ema_lambda <= 1.0, "ema_lambda must lie in [0, 1]");
    need(loss.w_s >= 0 && loss.w_cls >= 0 && loss.w_sca >= 0, "loss weights must be non-negative");
    need(optimizer.lr > 0, "optimizer.lr must be positive");
    need(train.iterations >= 1 && train.batch_size >= 1, "train.iterations and train.batch_size must be positive");
    need(model.num_classes == data.spec.scene.num_classes, "model.num_classes must equal data.num_classes");
    need(model.image_h == data.spec.scene.height && model.image_w == data.spec.scene.width,
         "model image size must equal data resolution");
    for (double a : experiment.alphas) need(a >= 0.0 && a <= 1.0, "experiment.alphas must lie in [0, 1]");
  }
};

inline json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& s = c.data.spec;
  return json{
      {"seed", c.seed},
      {"model",
       {{"num_classes", m.num_classes},
        {"image_h", m.image_h},
        {"image_w", m.image_w},
        {"stage_channels", m.stage_channels},
        {"strides", m.strides},
        {"stage_depth", m.stage_depth},
        {"conv_bias", m.conv_bias},
        {"batch_norm", m.batch_norm},
        {"aspp_channels", m.aspp_channels},
        {"aspp_rates", m.aspp_rates},
        {"head_channels", m.head_channels},
        {"reason_dim", m.reason_dim}}},
      {"alpha", c.alpha},
      {"ema_lambda", c.ema_lambda},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"weight_decay", c.optimizer.weight_decay},
        {"momentum", c.optimizer.momentum},
        {"poly_power", c.optimizer.poly_power}}},
      {"loss",
       {{"use_nsfr", c.loss.use_nsfr},
        {"use_nsca", c.loss.use_nsca},
        {"w_s", c.loss.w_s},
        {"w_cls", c.loss.w_cls},
        {"w_sca", c.loss.w_sca}}},
      {"train",
       {{"iterations", c.train.iterations},
        {"batch_size", c.train.batch_size},
        {"augment_strength", c.train.augment_strength},
        {"log_every", c.train.log_every},
        {"log_centroids", c.train.log_centroids}}},
      {"data",
       {{"root", c.data.root},
        {"source_domain", c.data.source_domain},
        {"domains", s.domains},
        {"train_samples", s.train_samples},
        {"eval_samples", s.eval_samples},
        {"eval_seed_offset", s.eval_seed_offset},
        {"num_classes", s.scene.num_classes},
        {"height", s.scene.height},
        {"width", s.scene.width},
        {"num_objects", s.scene.num_objects},
        {"max_object_motion", s.scene.max_object_motion},
        {"max_camera_motion", s.scene.max_camera_motion},
        {"min_radius", s.scene.min_radius},
        {"max_radius", s.scene.max_radius}}},
      {"experiment", {{"seeds", c.experiment.seeds}, {"alphas", c.experiment.alphas}}}};
}

inline RunConfig from_json(const json& j) {
  RunConfig c;
  const auto& m = j.at("model");
  m.at("num_classes").get_to(c.model.num_classes);
  m.at("image_h").get_to(c.model.image_h);
  m.at("image_w").get_to(c.model.image_w);
  m.at("stage_channels").get_to(c.model.stage_channels);
  m.at("strides").get_to(c.model.strides);
  m.at("stage_depth").get_to(c.model.stage_depth);
  m.at("conv_bias").get_to(c.model.conv_bias);
  m.at("batch_norm").get_to(c.model.batch_norm);
  m.at("aspp_channels").get_to(c.model.aspp_channels);
  m.at("aspp_rates").get_to(c.model.aspp_rates);
  m.at("head_channels").get_to(c.model.head_channels);
  m.at("reason_dim").get_to(c.model.reason_dim);
  j.at("seed").get_to(c.seed);
  j.at("alpha").get_to(c.alpha);
  j.at("ema_lambda").get_to(c.ema_lambda);
  const auto& o = j.at("optimizer");
  o.at("lr").get_to(c.optimizer.lr);
  o.at("weight_decay").get_to(c.optimizer.weight_decay);
  o.at("momentum").get_to(c.optimizer.momentum);
  o.at("poly_power").get_to(c.optimizer.poly_power);
  const auto& l = j.at("loss");
  l.at("use_nsfr").get_to(c.loss.use_nsfr);
  l.at("use_nsca").get_to(c.loss.use_nsca);
  l.at("w_s").get_to(c.loss.w_s);
  l.at("w_cls").get_to(c.loss.w_cls);
  l.at("w_sca").get_to(c.loss.w_sca);
  const auto& t = j.at("train");
  t.at("iterations").get_to(c.train.iterations);
  t.at("batch_size").get_to(c.train.batch_size);
  t.at("augment_strength").get_to(c.train.augment_strength);
  t.at("log_every").get_to(c.train.log_every);
  t.at("log_centroids").get_to(c.train.log_centroids);
  const auto& d = j.at("data");
  d.at("root").get_to(c.data.root);
  d.at("source_domain").get_to(c.data.source_domain);
  auto& s = c.data.spec;
  d.at("domains").get_to(s.domains);
  d.at("train_samples").get_to(s.train_samples);
  d.at("eval_samples").get_to(s.eval_samples);
  d.at("eval_seed_offset").get_to(s.eval_seed_offset);
  d.at("num_classes").get_to(s.scene.num_classes);
  d.at("height").get_to(s.scene.height);
  d.at("width").get_to(s.scene.width);
  d.at("num_objects").get_to(s.scene.num_objects);
  d.at("max_object_motion").get_to(s.scene.max_object_motion);
  d.at("max_camera_motion").get_to(s.scene.max_camera_motion);
  d.at("min_radius").get_to(s.scene.min_radius);
  d.at("max_radius").get_to(s.scene.max_radius);
  const auto& e = j.at("experiment");
  e.at("seeds").get_to(c.experiment.seeds);
  e.at("alphas").get_to(c.experiment.alphas);
  return c;
}

namespace detail {

inline bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

inline int64_t line_of_offset(const std::string& text, size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n');
}

inline int64_t line_of_key(const std::string& text, const std::string& key) {
  const auto pos = text.find("\"" + key + "\"");
  return pos == std::string::npos ? 0 : line_of_offset(text, pos);
}

inline std::string where(const std::string& source, const std::string& text, const std::string& key,
                         const std::string& path) {
  std::ostringstream os;
  os << source;
  if (const auto line = line_of_key(text, key); line > 0) os << ":" << line;
  os << ": key '" << path << "'";
  return os.str();
}

/// Recursively overlay `user` onto `base`, rejecting keys and types the base does not have.
inline void merge_checked(json& base, const json& user, const std::string& prefix, const std::string& source,
                          const std::string& text) {
  if (!user.is_object()) throw ConfigError(source + ": top level must be a JSON object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(where(source, text, it.key(), path) + " is not a known setting");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      if (!it.value().is_object())
        throw ConfigError(where(source, text, it.key(), path) + " must be an object");
      merge_checked(slot, it.value(), path, source, text);
    } else {
      if (!same_kind(slot, it.value()) && !(slot.is_array() && it.value().is_array()))
        throw ConfigError(where(source, text, it.key(), path) + " has type " + it.value().type_name() +
                          ", expected " + slot.type_name());
      slot = it.value();
    }
  }
}

}  // namespace detail

inline json default_json() { return to_json(RunConfig{}); }

/// Parse config text over the defaults. `source` names the origin in diagnostics.
inline json parse_config_text(const std::string& text, const std::string& source) {
  json user;
  try {
    user = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(detail::line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1)) +
                      ": parse error: " + e.what());
  }
  auto merged = default_json();
  detail::merge_checked(merged, user, "", source, text);
  return merged;
}

inline json load_config_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

/// Apply one "dotted.key=value" override. The value is parsed as JSON, falling back to a string.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json* node = &cfg;
  std::stringstream parts(key);
  std::string part;
  while (std::getline(parts, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("override: unknown key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ConfigError("override: key '" + key + "' names a section, not a value");
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  if (!detail::same_kind(*node, value) && !(node->is_array() && value.is_array()))
    throw ConfigError("override: key '" + key + "' has type " + value.type_name() + ", expected " +
                      node->type_name());
  *node = value;
}

inline RunConfig resolve(const json& j) {
  RunConfig c;
  try {
    c = from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Stable FNV-1a digest of the canonical JSON dump, as 16 hex digits.
inline std::string config_hash(const json& j) {
  const std::string text = j.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) h = (h ^ ch) * 1099511628211ull;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return config_hash(to_json(c)); }

}  // namespace cnsg::config
