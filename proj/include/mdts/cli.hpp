#ifndef MDTS_CLI_HPP
#define MDTS_CLI_HPP

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mdts/analysis.hpp"
#include "mdts/checkpoint.hpp"
#include "mdts/config.hpp"
#include "mdts/corpus.hpp"
#include "mdts/finetune.hpp"
#include "mdts/training.hpp"

namespace mdts::cli {

namespace fs = std::filesystem;

enum : std::uint64_t { kStreamSynth = 21, kStreamAnalysis = 22 };

struct Options {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string checkpoint;
  std::string task;
  std::string manifest;
  std::optional<int> horizon;
  std::optional<int> context;
};

struct MetricRow {
  std::string task, metric;
  double value;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows, std::uint64_t seed) {
  std::string s = "task,metric,value,seed\n";
  for (const auto& r : rows) s += r.task + "," + r.metric + "," + io::format_number(r.value) + "," + std::to_string(seed) + "\n";
  return s;
}

inline RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.manifest.empty()) c.data.manifest = o.manifest;
  if (!o.task.empty()) c.finetune.task = parse_task(o.task);
  if (o.horizon) c.finetune.horizon = *o.horizon;
  if (o.context) c.finetune.context = *o.context;
  c.pretrain.seed = c.seed;
  c.finetune.seed = c.seed;
  c.pretrain.workers = c.finetune.workers = default_workers();
  return c;
}

inline void write_resolved(const std::string& out, const RunConfig& c) {
  io::write_text((fs::path(out) / "resolved_config.json").string(), c.to_json().dump(2) + "\n");
}

inline std::vector<TimeSeriesSample> load_corpus(const RunConfig& c) {
  if (c.data.manifest.empty()) throw ConfigError("no manifest given (data.manifest or --manifest)");
  auto samples = load_manifest(c.data.manifest);
  if (c.data.normalize)
    for (auto& s : samples) s = normalize_channelwise(std::move(s));
  return samples;
}

inline Checkpoint<float> require_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError(o.command + " needs --checkpoint");
  return load_checkpoint<float>(o.checkpoint);
}

inline void write_layout_csv(const std::string& path, const Matrix<double>& layout) {
  static const char* axes[] = {"x", "y", "z"};
  std::vector<std::string> header(axes, axes + layout.cols());
  write_series_csv(path, header, layout.transpose());
}

inline Matrix<double> read_layout_csv(const std::string& path) {
  return read_series_csv(path, nullptr).transpose();
}

/// Task head sized from the labels in `data`.
inline TaskHead<float> make_head(TaskKind kind, const Model<float>& model, const std::vector<TimeSeriesSample>& data,
                                 const FinetuneConfig& f, std::uint64_t seed) {
  Rng rng = derive_rng(seed, {kStreamHead});
  int outputs = 0;
  if (kind == TaskKind::Classification) {
    for (const auto& s : data) {
      const auto* c = s.label ? std::get_if<ClassLabel>(&*s.label) : nullptr;
      if (!c) throw DataError("classification needs a class label on every sample");
      outputs = std::max(outputs, c->id + 1);
    }
    if (outputs < 2) throw DataError("classification needs at least two classes");
  } else if (kind == TaskKind::Regression) {
    for (const auto& s : data) {
      const auto* t = s.label ? std::get_if<TargetLabel>(&*s.label) : nullptr;
      if (!t) throw DataError("regression needs a target label on every sample");
      if (outputs == 0) outputs = static_cast<int>(t->values.size());
      if (outputs != static_cast<int>(t->values.size())) throw DataError("regression targets differ in dimension");
    }
  }
  return TaskHead<float>(kind, model.config.encoder.dim, outputs, f.horizon, rng);
}

inline void include_all(Model<float>& model, const std::vector<TimeSeriesSample>& data, std::uint64_t seed, std::ostream& log) {
  std::set<std::string> seen;
  for (const auto& s : data) {
    if (!seen.insert(s.domain->name).second) continue;
    Rng rng = derive_rng(seed, {kStreamDomain, stable_hash(s.domain->name)});
    const auto r = include_domain(model, *s.domain, rng);
    if (r == IncludeOutcome::Registered) log << "included unseen domain '" << s.domain->name << "'\n";
    if (r == IncludeOutcome::Extended) log << "extended domain '" << s.domain->name << "'\n";
  }
}

inline std::vector<MetricRow> metric_rows(TaskKind kind, const TaskMetrics& m) {
  std::vector<MetricRow> rows;
  for (const auto& [k, v] : m.values) rows.push_back({task_name(kind), k, v});
  return rows;
}

// -- commands ------------------------------------------------------------------

inline void cmd_synth(const Options& o, RunConfig& c, std::ostream& log) {
  if (c.synth.domains.empty()) throw ConfigError("synth needs synth.domains in the config");
  Rng rng = derive_rng(c.seed, {kStreamSynth});
  const SynthCorpus corpus = synth_corpus(c.synth, rng);
  write_manifest(o.out, corpus.samples);
  for (const auto& [name, layout] : corpus.layouts) {
    fs::create_directories(fs::path(o.out) / "layouts");
    write_layout_csv((fs::path(o.out) / "layouts" / (name + ".csv")).string(), layout);
  }
  log << "wrote " << corpus.samples.size() << " samples to " << o.out << "\n";
}

inline void cmd_pretrain(const Options& o, RunConfig& c, std::ostream& log) {
  const auto corpus = load_corpus(c);
  Checkpoint<float> ck;
  if (!o.checkpoint.empty()) {
    ck = load_checkpoint<float>(o.checkpoint);
    for (const char* key : {"model", "pretrain", "seed"})
      if (ck.config.at(key) != c.to_json().at(key))
        throw ConfigError(std::string("resume checkpoint was produced with a different '") + key + "' configuration");
  } else {
    Rng rng = derive_rng(c.seed, {kStreamInit});
    ck.model = Model<float>(c.model, rng);
  }
  ck.config = c.to_json();
  ck.seed = c.seed;
  register_corpus_domains(ck.model, corpus, c.seed);
  pretrain(ck.model, ck.optimizer, corpus, c.pretrain, ck.state, std::nullopt, [&](const EpochRecord& r) {
    log << "epoch " << r.epoch << " " << r.split << " total " << io::format_number(r.total) << "\n";
  });
  save_checkpoint(ck, (fs::path(o.out) / "checkpoint.bin").string());
  io::write_text((fs::path(o.out) / "loss_history.csv").string(), history_csv(ck.state.history));
}

inline void cmd_finetune(const Options& o, RunConfig& c, std::ostream& log) {
  Checkpoint<float> ck = require_checkpoint(o);
  const auto data = load_corpus(c);
  include_all(ck.model, data, c.seed, log);
  TaskHead<float> head = make_head(c.finetune.task, ck.model, data, c.finetune, c.seed);
  AdamW<float> opt;
  const FinetuneResult res = finetune(ck.model, head, opt, data, c.finetune);
  std::string hist = "epoch,train_loss,lr\n";
  for (const auto& r : res.history)
    hist += std::to_string(r.epoch) + "," + io::format_number(r.train_loss) + "," + io::format_number(r.lr) + "\n";
  io::write_text((fs::path(o.out) / "finetune_history.csv").string(), hist);
  io::write_text((fs::path(o.out) / "metrics.csv").string(), metrics_csv(metric_rows(head.kind, res.held_out), c.seed));

  Checkpoint<float> out;
  out.model = std::move(ck.model);
  out.head = std::move(head);
  out.optimizer = std::move(opt);
  out.config = c.to_json();
  out.seed = c.seed;
  save_checkpoint(out, (fs::path(o.out) / "task_checkpoint.bin").string());
  nlohmann::json report = {{"task", task_name(c.finetune.task)}, {"held_out", res.held_out.values},
                           {"train_samples", res.split.train.size()}, {"held_out_samples", res.split.val.size()}};
  io::write_text((fs::path(o.out) / "report.json").string(), report.dump(2) + "\n");
}

inline void cmd_evaluate(const Options& o, RunConfig& c, std::ostream& log) {
  Checkpoint<float> ck = require_checkpoint(o);
  const auto data = load_corpus(c);
  include_all(ck.model, data, c.seed, log);
  if (!ck.head || (!o.task.empty() && ck.head->kind != c.finetune.task)) {
    if (!ck.head) log << "checkpoint carries no task head; initialising one from the seed\n";
    ck.head = make_head(c.finetune.task, ck.model, data, c.finetune, c.seed);
  }
  c.finetune.task = ck.head->kind;
  const CorpusSplit split = split_corpus(data.size(), c.finetune.val_fraction, c.seed);
  const TaskMetrics m = evaluate_task(ck.model, *ck.head, data, split.val.empty() ? split.train : split.val, c.finetune);
  io::write_text((fs::path(o.out) / "metrics.csv").string(), metrics_csv(metric_rows(ck.head->kind, m), c.seed));
}

inline void cmd_forecast(const Options& o, RunConfig& c, std::ostream& log) {
  Checkpoint<float> ck = require_checkpoint(o);
  const auto data = load_corpus(c);
  include_all(ck.model, data, c.seed, log);
  const auto& f = c.finetune;
  if (c.forecast.sample < 0 || c.forecast.sample >= static_cast<int>(data.size()))
    throw ConfigError("forecast.sample is outside the manifest");
  const auto& s = data[static_cast<std::size_t>(c.forecast.sample)];
  if (s.length() < f.context + f.horizon) throw DataError("forecast sample shorter than context + horizon");
  // The final context + horizon points of the series.
  const Eigen::Index off = s.length() - f.context - f.horizon;
  ForecastPlot plot;
  plot.context = s.values.middleCols(off, f.context);
  plot.truth = s.values.middleCols(off + f.context, f.horizon);
  const ForecastWindow w = forecast_window(plot.context, f.horizon, ck.model.config.patch_size);
  plot.prediction = forecast(ck.model, w, s.domain->name, s.variate_subset);
  export_forecast_plot(plot, (fs::path(o.out) / "forecast_plot.csv").string());
  const Matrix<double> base = persistence_forecast(plot.context, f.horizon);
  const double n = static_cast<double>(plot.truth.size());
  io::write_text((fs::path(o.out) / "metrics.csv").string(),
                 metrics_csv({{"fcst", "MSE", (plot.prediction - plot.truth).squaredNorm() / n},
                              {"fcst", "MSE_persistence", (base - plot.truth).squaredNorm() / n}},
                             c.seed));
}

inline void cmd_analyze(const Options& o, RunConfig& c, std::ostream&) {
  Checkpoint<float> ck = require_checkpoint(o);
  std::string domain = c.analyze.domain;
  if (domain.empty()) {
    if (ck.model.registry.entries().size() != 1) throw ConfigError("analyze.domain must name one of the registered domains");
    domain = ck.model.registry.entries().begin()->first;
  }
  const Matrix<double> emb = ck.model.registry.at(domain).table.value.cast<double>();
  const Pca pca = pca_project(emb, std::max(c.analyze.components, c.analyze.align_dims));
  std::optional<LayoutAlignment> align;
  std::optional<PermutationNull> null;
  if (!c.analyze.layout.empty()) {
    const Matrix<double> layout = read_layout_csv(c.analyze.layout);
    if (layout.rows() != emb.rows()) throw DataError("layout rows do not match the domain's variate count");
    const Matrix<double> proj = pca.projection.leftCols(c.analyze.align_dims);
    const Matrix<double> target = layout.leftCols(std::min<Eigen::Index>(layout.cols(), c.analyze.align_dims));
    align = align_layout(proj, target);
    Rng rng = derive_rng(c.seed, {kStreamAnalysis});
    null = permutation_null(proj, target, c.analyze.permutations, rng);
  }
  const auto report = analysis_report(pca, c.analyze.components, align ? &*align : nullptr, null ? &*null : nullptr);
  io::write_text((fs::path(o.out) / "analysis.json").string(), report.dump(2) + "\n");
}

/// Whole command-line program; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"mdts: masked pre-training for multi-domain time series"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  int horizon = 0, context = 0;
  std::vector<CLI::App*> subs;
  const std::pair<const char*, const char*> commands[] = {
      {"synth", "write a synthetic corpus, manifest and planted layouts"},
      {"pretrain", "masked reconstruction pre-training; writes checkpoint.bin and loss_history.csv"},
      {"finetune", "fine-tune a task head on a pre-trained checkpoint"},
      {"evaluate", "score a checkpoint on the validation split; writes metrics.csv"},
      {"forecast", "predict the final horizon of one series; writes forecast_plot.csv and metrics.csv"},
      {"analyze", "PCA of variate embeddings, optionally aligned to a layout"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint to start from")->check(CLI::ExistingFile);
    sub->add_option("--task", o.task, "fine-tuning task")->check(CLI::IsMember({"cls", "reg", "fcst"}));
    sub->add_option("--horizon", horizon, "forecast horizon in time points")->check(CLI::PositiveNumber);
    sub->add_option("--context", context, "forecast context in time points")->check(CLI::PositiveNumber);
    sub->add_option("--manifest", o.manifest, "override the configured manifest")->check(CLI::ExistingFile);
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, log, err);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return 2;
  }
  for (auto* sub : subs) {
    if (!sub->parsed()) continue;
    o.command = sub->get_name();
    if (sub->count("--seed")) o.seed = seed;
    if (sub->count("--horizon")) o.horizon = horizon;
    if (sub->count("--context")) o.context = context;
  }
  try {
    RunConfig c = resolve_config(o);
    fs::create_directories(o.out);
    write_resolved(o.out, c);
    if (o.command == "synth") cmd_synth(o, c, log);
    else if (o.command == "pretrain") cmd_pretrain(o, c, log);
    else if (o.command == "finetune") cmd_finetune(o, c, log);
    else if (o.command == "evaluate") cmd_evaluate(o, c, log);
    else if (o.command == "forecast") cmd_forecast(o, c, log);
    else cmd_analyze(o, c, log);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << o.command << ": " << msg << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mdts::cli

#endif  // MDTS_CLI_HPP
