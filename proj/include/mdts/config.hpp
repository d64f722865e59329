#ifndef MDTS_CONFIG_HPP
#define MDTS_CONFIG_HPP

#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "mdts/checkpoint.hpp"
#include "mdts/corpus.hpp"
#include "mdts/finetune.hpp"
#include "mdts/io.hpp"
#include "mdts/model.hpp"
#include "mdts/training.hpp"

namespace mdts {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string manifest;  // resolved against the config file directory
  bool normalize = true;
};

struct AnalyzeConfig {
  std::string domain;
  std::string layout;  // CSV of planted coordinates, one row per variate
  int components = 3;
  int align_dims = 2;
  int permutations = 1000;
};

struct ForecastConfig {
  int sample = 0;  // manifest index of the series to plot
};

struct RunConfig {
  std::uint64_t seed = 0;
  SynthConfig synth;
  DataConfig data;
  ModelConfig model = ModelConfig::tiny();
  TrainConfig pretrain;
  FinetuneConfig finetune;
  AnalyzeConfig analyze;
  ForecastConfig forecast;

  nlohmann::json to_json() const;
};

namespace detail {

/// Reads keys off a JSON object and rejects anything it did not consume.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() == 0) finish();
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + path_ + "." + key + "' has the wrong type");
    }
  }

  const nlohmann::json* child(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("unknown config key '" + path_ + "." + it.key() + "'");
    used_.clear();
    for (auto it = j_.begin(); it != j_.end(); ++it) used_.insert(it.key());
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline SynthTask parse_synth_task(const std::string& s) {
  if (s == "none") return SynthTask::None;
  if (s == "class") return SynthTask::Class;
  if (s == "mixture") return SynthTask::Mixture;
  if (s == "periodic") return SynthTask::Periodic;
  throw ConfigError("unknown synth task '" + s + "'");
}

inline std::string synth_task_name(SynthTask t) {
  switch (t) {
    case SynthTask::None: return "none";
    case SynthTask::Class: return "class";
    case SynthTask::Mixture: return "mixture";
    case SynthTask::Periodic: return "periodic";
  }
  return "none";
}

inline void read_stack(const nlohmann::json& j, const std::string& path, StackConfig& s) {
  Section sec(j, path);
  sec.get("layers", s.layers);
  sec.get("dim", s.dim);
  sec.get("mlp", s.mlp);
  sec.get("heads", s.heads);
  sec.get("head_dim", s.head_dim);
}

}  // namespace detail

/// Parses a run configuration. Relative paths are resolved against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& root, const std::string& base_dir = ".") {
  RunConfig c;
  detail::Section top(root, "config");
  top.get("seed", c.seed);
  const auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (std::filesystem::path(base_dir) / p).lexically_normal().string();
  };

  if (const auto* s = top.child("synth")) {
    detail::Section sec(*s, "synth");
    if (const auto* doms = sec.child("domains")) {
      if (!doms->is_array()) throw ConfigError("synth.domains must be an array");
      for (std::size_t i = 0; i < doms->size(); ++i) {
        SynthDomainConfig d;
        detail::Section ds((*doms)[i], "synth.domains[" + std::to_string(i) + "]");
        std::string task = "none";
        ds.get("name", d.name);
        ds.get("variates", d.variates);
        ds.get("samples", d.samples);
        ds.get("length", d.length);
        ds.get("frequency_hz", d.frequency_hz);
        ds.get("band_lo", d.band_lo);
        ds.get("band_hi", d.band_hi);
        ds.get("sources", d.sources);
        ds.get("layout_dims", d.layout_dims);
        ds.get("length_scale", d.length_scale);
        ds.get("source_radius", d.source_radius);
        ds.get("noise", d.noise);
        ds.get("task", task);
        ds.get("class_bands", d.class_bands);
        ds.get("period", d.period);
        d.task = detail::parse_synth_task(task);
        c.synth.domains.push_back(d);
      }
    }
  }
  if (const auto* s = top.child("data")) {
    detail::Section sec(*s, "data");
    sec.get("manifest", c.data.manifest);
    sec.get("normalize", c.data.normalize);
    resolve(c.data.manifest);
  }
  if (const auto* s = top.child("model")) {
    detail::Section sec(*s, "model");
    std::string variant = c.model.variant;
    sec.get("variant", variant);
    try {
      c.model = ModelConfig::variant_named(variant);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    sec.get("patch_size", c.model.patch_size);
    sec.get("context_length", c.model.context_length);
    if (const auto* e = sec.child("encoder")) detail::read_stack(*e, "model.encoder", c.model.encoder);
    if (const auto* e = sec.child("decoder")) detail::read_stack(*e, "model.decoder", c.model.decoder);
  }
  if (const auto* s = top.child("pretrain")) {
    detail::Section sec(*s, "pretrain");
    auto& p = c.pretrain;
    sec.get("epochs", p.epochs);
    sec.get("batch_size", p.batch_size);
    sec.get("lr", p.lr);
    sec.get("warmup_fraction", p.warmup_fraction);
    sec.get("weight_decay", p.weight_decay);
    sec.get("mask_ratio", p.mask_ratio);
    sec.get("ncc_lambda", p.ncc_lambda);
    sec.get("val_fraction", p.val_fraction);
    sec.get("clip_norm", p.clip_norm);
    sec.get("domain_weights", p.domain_weights);
  }
  if (const auto* s = top.child("finetune")) {
    detail::Section sec(*s, "finetune");
    auto& f = c.finetune;
    std::string task = task_name(f.task);
    sec.get("task", task);
    try {
      f.task = parse_task(task);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    sec.get("epochs", f.epochs);
    sec.get("batch_size", f.batch_size);
    sec.get("lr", f.lr);
    sec.get("warmup_fraction", f.warmup_fraction);
    sec.get("layer_decay", f.layer_decay);
    sec.get("weight_decay", f.weight_decay);
    sec.get("drop_path", f.drop_path);
    sec.get("label_smoothing", f.label_smoothing);
    sec.get("ncc_lambda", f.ncc_lambda);
    sec.get("val_fraction", f.val_fraction);
    sec.get("clip_norm", f.clip_norm);
    sec.get("context", f.context);
    sec.get("horizon", f.horizon);
  }
  if (const auto* s = top.child("analyze")) {
    detail::Section sec(*s, "analyze");
    sec.get("domain", c.analyze.domain);
    sec.get("layout", c.analyze.layout);
    sec.get("components", c.analyze.components);
    sec.get("align_dims", c.analyze.align_dims);
    sec.get("permutations", c.analyze.permutations);
    resolve(c.analyze.layout);
  }
  if (const auto* s = top.child("forecast")) {
    detail::Section sec(*s, "forecast");
    sec.get("sample", c.forecast.sample);
  }
  top.finish();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j, std::filesystem::path(path).parent_path().string());
}

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  nlohmann::json doms = nlohmann::json::array();
  for (const auto& d : synth.domains)
    doms.push_back({{"name", d.name},
                    {"variates", d.variates},
                    {"samples", d.samples},
                    {"length", d.length},
                    {"frequency_hz", d.frequency_hz},
                    {"band_lo", d.band_lo},
                    {"band_hi", d.band_hi},
                    {"sources", d.sources},
                    {"layout_dims", d.layout_dims},
                    {"length_scale", d.length_scale},
                    {"source_radius", d.source_radius},
                    {"noise", d.noise},
                    {"task", detail::synth_task_name(d.task)},
                    {"class_bands", d.class_bands},
                    {"period", d.period}});
  j["synth"] = {{"domains", doms}};
  j["data"] = {{"manifest", data.manifest}, {"normalize", data.normalize}};
  j["model"] = mdts::to_json(model);
  j["pretrain"] = {{"epochs", pretrain.epochs},
                   {"batch_size", pretrain.batch_size},
                   {"lr", pretrain.lr},
                   {"warmup_fraction", pretrain.warmup_fraction},
                   {"weight_decay", pretrain.weight_decay},
                   {"mask_ratio", pretrain.mask_ratio},
                   {"ncc_lambda", pretrain.ncc_lambda},
                   {"val_fraction", pretrain.val_fraction},
                   {"clip_norm", pretrain.clip_norm},
                   {"domain_weights", pretrain.domain_weights}};
  j["finetune"] = {{"task", task_name(finetune.task)},
                   {"epochs", finetune.epochs},
                   {"batch_size", finetune.batch_size},
                   {"lr", finetune.lr},
                   {"warmup_fraction", finetune.warmup_fraction},
                   {"layer_decay", finetune.layer_decay},
                   {"weight_decay", finetune.weight_decay},
                   {"drop_path", finetune.drop_path},
                   {"label_smoothing", finetune.label_smoothing},
                   {"ncc_lambda", finetune.ncc_lambda},
                   {"val_fraction", finetune.val_fraction},
                   {"clip_norm", finetune.clip_norm},
                   {"context", finetune.context},
                   {"horizon", finetune.horizon}};
  j["analyze"] = {{"domain", analyze.domain},
                  {"layout", analyze.layout},
                  {"components", analyze.components},
                  {"align_dims", analyze.align_dims},
                  {"permutations", analyze.permutations}};
  j["forecast"] = {{"sample", forecast.sample}};
  return j;
}

}  // namespace mdts

#endif  // MDTS_CONFIG_HPP
