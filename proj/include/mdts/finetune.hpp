#ifndef MDTS_FINETUNE_HPP
#define MDTS_FINETUNE_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdts/training.hpp"

namespace mdts {

enum class TaskKind { Classification, Regression, Forecasting };

inline std::string task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Classification: return "cls";
    case TaskKind::Regression: return "reg";
    case TaskKind::Forecasting: return "fcst";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "cls") return TaskKind::Classification;
  if (s == "reg") return TaskKind::Regression;
  if (s == "fcst") return TaskKind::Forecasting;
  throw std::invalid_argument("unknown task '" + s + "' (expected cls, reg or fcst)");
}

/// Linear head on the mean-pooled encoder features. Forecasting reuses the
/// pre-trained decoder and carries no weights here.
template <typename S>
struct TaskHead {
  TaskKind kind = TaskKind::Classification;
  int outputs = 0;  // classes or target dimension
  int horizon = 0;  // forecasting only, in time points
  LayerNorm<S> norm;
  Linear<S> linear;

  TaskHead() = default;
  TaskHead(TaskKind k, int model_dim, int outs, int horizon_, Rng& rng) : kind(k), outputs(outs), horizon(horizon_) {
    if (k != TaskKind::Forecasting) {
      if (outs < 1) throw std::invalid_argument("task head needs at least one output");
      norm = LayerNorm<S>(model_dim);
      linear = Linear<S>(model_dim, outs, rng);
    } else if (horizon_ <= 0) {
      throw std::invalid_argument("forecast horizon must be > 0");
    }
  }

  bool has_weights() const { return kind != TaskKind::Forecasting; }

  void visit(const ParamVisitor<S>& fn) {
    if (!has_weights()) return;
    norm.visit("head/norm", fn);
    linear.visit("head/linear", fn);
  }
};

struct FinetuneConfig {
  TaskKind task = TaskKind::Classification;
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double warmup_fraction = 0.10;
  double layer_decay = 0.75;
  double weight_decay = 0.05;
  double drop_path = 0.0;
  double label_smoothing = 0.0;
  double ncc_lambda = kDefaultNccLambda;
  double val_fraction = 0.2;
  double clip_norm = 1.0;
  int context = 336;  // forecasting, time points
  int horizon = 96;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const {
    for (double f : {layer_decay, drop_path, label_smoothing, warmup_fraction})
      if (!(f >= 0 && f <= 1)) throw std::invalid_argument("fine-tuning factors must lie in [0, 1]");
    if (!(drop_path < 1)) throw std::invalid_argument("drop path rate must be < 1");
    if (epochs < 0 || batch_size < 1 || !(lr > 0)) throw std::invalid_argument("invalid fine-tuning schedule");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw std::invalid_argument("val fraction must lie in [0, 1)");
    if (task == TaskKind::Forecasting && (context < 1 || horizon < 1)) throw std::invalid_argument("forecast context and horizon must be > 0");
  }
};

/// lr * decay^(L - depth), with L = encoder layers + 1 (heads and decoder).
inline double layer_lr(const std::string& name, double base_lr, double decay, int encoder_layers) {
  const int depth = parameter_depth(name, encoder_layers);
  return base_lr * std::pow(decay, encoder_layers + 1 - depth);
}

enum class IncludeOutcome { Registered, Extended, Unchanged };

/// Adds an unseen domain with a fresh embedding table. A known name with
/// extra variates is extended instead; an identical catalogue is a no-op.
template <typename S>
IncludeOutcome include_domain(Model<S>& model, const DomainSpec& spec, Rng& rng) {
  if (!model.registry.contains(spec.name)) {
    model.registry.register_domain(spec, rng);
    return IncludeOutcome::Registered;
  }
  const auto& cat = model.registry.at(spec.name).catalogue;
  std::vector<std::string> fresh;
  for (const auto& v : spec.analysis_variates())
    if (std::find(cat.begin(), cat.end(), v) == cat.end()) fresh.push_back(v);
  if (fresh.empty()) return IncludeOutcome::Unchanged;
  model.registry.extend_domain(spec.name, fresh, rng);
  return IncludeOutcome::Extended;
}

// ---------------------------------------------------------------------------
// Classification / regression

/// Encoder over all valid tokens, mean-pooled into h* (1 x D).
template <typename S>
ad::Var pooled_features(ad::Tape<S>& t, Model<S>& model, const SampleInput& in, DropPath<S>* drop = nullptr) {
  const Patches patches = patchify(*in.sample, model.config.patch_size);
  model.registry.check_subset(in.domain, in.variate_subset);
  if (static_cast<Eigen::Index>(in.variate_subset.size()) != patches.variates)
    throw std::invalid_argument("variate subset length does not match sample rows");
  const std::vector<bool> validity = token_validity(patches, std::max(in.padded_variates, patches.variates));
  std::vector<Eigen::Index> slots;
  for (std::size_t s = 0; s < validity.size(); ++s)
    if (validity[s]) slots.push_back(static_cast<Eigen::Index>(s));
  if (slots.empty()) throw std::invalid_argument("no valid tokens to pool");
  const Matrix<S> temporal = temporal_embeddings<S>(patches.per_variate, model.tokeniser());
  ad::Var tokens = embed_tokens(t, patches, slots, temporal, t.param(model.registry.at(in.domain).table), in.variate_subset,
                                model.projector);
  return t.mean_rows(model.run_encoder(t, tokens, drop));
}

template <typename S>
ad::Var head_forward(ad::Tape<S>& t, Model<S>& model, TaskHead<S>& head, const SampleInput& in, DropPath<S>* drop = nullptr) {
  if (!head.has_weights()) throw std::invalid_argument("forecasting heads have no linear layer");
  ad::Var h = pooled_features(t, model, in, drop);
  return head.linear(t, head.norm(t, h));
}

template <typename S>
RowVector<S> classify_forward(Model<S>& model, TaskHead<S>& head, const SampleInput& in) {
  ad::Tape<S> t(false);
  return t.value(head_forward(t, model, head, in)).row(0);
}

template <typename S>
RowVector<S> regress_forward(Model<S>& model, TaskHead<S>& head, const SampleInput& in) {
  return classify_forward(model, head, in);
}

/// Cross-entropy against a label-smoothed one-hot target; returns the loss
/// and d loss / d logits.
template <typename S>
double smoothed_cross_entropy(const RowVector<S>& logits, int label, double smoothing, Matrix<S>* grad) {
  const auto k = logits.size();
  if (label < 0 || label >= k) throw std::out_of_range("class label outside head range");
  const double mx = static_cast<double>(logits.maxCoeff());
  std::vector<double> p(static_cast<std::size_t>(k));
  double z = 0;
  for (Eigen::Index i = 0; i < k; ++i) z += (p[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits(i)) - mx));
  double loss = 0;
  if (grad) grad->resize(1, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double pi = p[static_cast<std::size_t>(i)] / z;
    const double qi = (i == label ? 1.0 - smoothing : 0.0) + smoothing / static_cast<double>(k);
    loss -= qi * (static_cast<double>(logits(i)) - mx - std::log(z));
    if (grad) (*grad)(0, i) = static_cast<S>(pi - qi);
  }
  return loss;
}

/// 1 - SS_res / SS_tot, averaged over target dimensions.
inline double r_squared(const std::vector<std::vector<double>>& truth, const std::vector<std::vector<double>>& pred) {
  if (truth.empty() || truth.size() != pred.size()) throw std::invalid_argument("r_squared: size mismatch");
  const std::size_t dims = truth.front().size();
  double acc = 0;
  for (std::size_t d = 0; d < dims; ++d) {
    double mean = 0;
    for (const auto& t : truth) mean += t[d];
    mean /= static_cast<double>(truth.size());
    double ss_res = 0, ss_tot = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      ss_res += (truth[i][d] - pred[i][d]) * (truth[i][d] - pred[i][d]);
      ss_tot += (truth[i][d] - mean) * (truth[i][d] - mean);
    }
    acc += ss_tot > 0 ? 1.0 - ss_res / ss_tot : (ss_res == 0 ? 1.0 : 0.0);
  }
  return acc / static_cast<double>(dims);
}

// ---------------------------------------------------------------------------
// Forecasting

struct ForecastWindow {
  PreparedSample prepared;  // context + horizon, rounded up to whole patches
  Eigen::Index context = 0;
  Eigen::Index horizon = 0;
};

/// Lays out `context` (V x C) followed by `future` (V x H, may be empty:
/// zeros are used) on a grid of whole patches. Points past C+H are padding.
inline ForecastWindow forecast_window(const Matrix<double>& context, Eigen::Index horizon, int patch_size,
                                      const Matrix<double>* future = nullptr) {
  if (horizon <= 0) throw std::invalid_argument("forecast horizon must be > 0");
  if (context.cols() < patch_size || context.cols() % patch_size != 0)
    throw std::invalid_argument("forecast context must be a positive multiple of the patch size");
  const Eigen::Index h_patches = (horizon + patch_size - 1) / patch_size;
  const Eigen::Index len = context.cols() + h_patches * patch_size;
  ForecastWindow w;
  w.context = context.cols();
  w.horizon = horizon;
  w.prepared.values = Matrix<double>::Zero(context.rows(), len);
  w.prepared.values.leftCols(context.cols()) = context;
  if (future) {
    if (future->rows() != context.rows() || future->cols() < horizon) throw std::invalid_argument("future block too short");
    w.prepared.values.middleCols(context.cols(), horizon) = future->leftCols(horizon);
  }
  w.prepared.time_validity.assign(static_cast<std::size_t>(len), true);
  for (Eigen::Index t = context.cols() + horizon; t < len; ++t) w.prepared.time_validity[static_cast<std::size_t>(t)] = false;
  return w;
}

inline MaskPlan forecast_plan(const ForecastWindow& w, int patch_size) {
  return prefix_mask(w.prepared.values.rows(), w.prepared.values.cols() / patch_size, w.context / patch_size);
}

/// Predicted continuation (V x horizon). Whatever sits in the horizon slots
/// of `w` never reaches the encoder.
template <typename S>
Matrix<double> forecast(Model<S>& model, const ForecastWindow& w, const std::string& domain, const std::vector<int>& subset) {
  const MaskPlan plan = forecast_plan(w, model.config.patch_size);
  SampleInput in{&w.prepared, domain, subset, w.prepared.values.rows()};
  const Matrix<S> full = model.forward_reconstruct(in, plan);
  return full.middleCols(w.context, w.horizon).template cast<double>();
}

/// Repeat-the-last-value forecaster.
inline Matrix<double> persistence_forecast(const Matrix<double>& context, Eigen::Index horizon) {
  Matrix<double> out(context.rows(), horizon);
  for (Eigen::Index v = 0; v < context.rows(); ++v) out.row(v).setConstant(context(v, context.cols() - 1));
  return out;
}

/// Random (or, for evaluation, seeded) window of context+horizon points.
inline ForecastWindow sample_forecast_window(const TimeSeriesSample& s, int context, int horizon, int patch_size, Rng& rng) {
  const Eigen::Index need = context + horizon;
  if (s.length() < need) throw std::invalid_argument("sample shorter than context + horizon");
  std::uniform_int_distribution<Eigen::Index> pick(0, s.length() - need);
  const Eigen::Index off = pick(rng);
  const Matrix<double> ctx = s.values.middleCols(off, context);
  const Matrix<double> fut = s.values.middleCols(off + context, horizon);
  return forecast_window(ctx, horizon, patch_size, &fut);
}

// ---------------------------------------------------------------------------
// Fine-tuning loop

struct TaskMetrics {
  std::map<std::string, double> values;  // ACC / R2 / MSE / MSE_persistence / loss
};

struct FinetuneRecord {
  int epoch = 0;
  double train_loss = 0;
  double lr = 0;
};

enum : std::uint64_t { kStreamFinetune = 11, kStreamFinetuneEval = 12, kStreamHead = 13 };

template <typename S>
struct TaskStep {
  double loss = 0;
  ad::Gradients<S> grads;
};

template <typename S>
TaskStep<S> task_step(Model<S>& model, TaskHead<S>& head, const TimeSeriesSample& s, const FinetuneConfig& cfg, Rng& rng,
                      bool want_grad) {
  TaskStep<S> out;
  ad::Tape<S> t(want_grad);
  DropPath<S> drop{want_grad ? cfg.drop_path : 0.0, &rng};
  if (head.kind == TaskKind::Forecasting) {
    const ForecastWindow w = sample_forecast_window(s, cfg.context, cfg.horizon, model.config.patch_size, rng);
    const MaskPlan plan = forecast_plan(w, model.config.patch_size);
    SampleInput in{&w.prepared, s.domain->name, s.variate_subset, w.prepared.values.rows()};
    auto g = model.reconstruct(t, in, plan, &drop);
    const Eigen::Index rows = w.prepared.values.rows();
    ad::Var grid = t.scatter_rows(g.patches_hat, g.dec_slots, rows * g.per_variate);
    const Matrix<S>& gv = t.value(grid);
    Eigen::Map<const Matrix<S>> xhat(gv.data(), rows, w.prepared.values.cols());
    // Only the horizon counts; the context is visible to the encoder anyway.
    BoolGrid valid = BoolGrid::Constant(rows, w.prepared.values.cols(), false);
    valid.middleCols(w.context, w.horizon).setConstant(true);
    Matrix<S> dx;
    const LossReport r = total_loss<S>(w.prepared.values.template cast<S>(), xhat, valid, model.config.patch_size, cfg.ncc_lambda,
                                       want_grad ? &dx : nullptr);
    out.loss = r.total;
    if (want_grad) t.backward(t.scalar(grid, static_cast<S>(r.total), Eigen::Map<const Matrix<S>>(dx.data(), gv.rows(), gv.cols())));
  } else {
    const PreparedSample p = prepare(s, model.config.context_length, model.config.patch_size, rng);
    SampleInput in{&p, s.domain->name, s.variate_subset, p.values.rows()};
    ad::Var out_v = head_forward(t, model, head, in, &drop);
    const RowVector<S> pred = t.value(out_v).row(0);
    Matrix<S> d;
    if (!s.label) throw std::invalid_argument("fine-tuning sample without label");
    if (head.kind == TaskKind::Classification) {
      const auto* c = std::get_if<ClassLabel>(&*s.label);
      if (!c) throw std::invalid_argument("classification needs class labels");
      out.loss = smoothed_cross_entropy(pred, c->id, want_grad ? cfg.label_smoothing : 0.0, &d);
    } else {
      const auto* tl = std::get_if<TargetLabel>(&*s.label);
      if (!tl || static_cast<int>(tl->values.size()) != head.outputs) throw std::invalid_argument("regression target dimension mismatch");
      d.resize(1, head.outputs);
      out.loss = 0;
      for (int k = 0; k < head.outputs; ++k) {
        const double diff = static_cast<double>(pred(k)) - tl->values[static_cast<std::size_t>(k)];
        out.loss += diff * diff / head.outputs;
        d(0, k) = static_cast<S>(2.0 * diff / head.outputs);
      }
    }
    if (want_grad) t.backward(t.scalar(out_v, static_cast<S>(out.loss), std::move(d)));
  }
  if (!std::isfinite(out.loss)) throw std::runtime_error("fine-tuning loss diverged (non-finite)");
  if (want_grad) out.grads = t.gradients();
  return out;
}

/// Parameters a task may update: classification/regression train the
/// tokeniser, encoder and head; forecasting trains tokeniser, encoder and
/// decoder.
template <typename S>
NamedParameters<S> task_parameters(Model<S>& model, TaskHead<S>& head) {
  NamedParameters<S> out;
  const bool use_decoder = head.kind == TaskKind::Forecasting;
  model.visit([&](const std::string& n, ad::Parameter<S>& p) {
    if (!use_decoder && n.rfind("decoder/", 0) == 0) return;
    out.emplace_back(n, &p);
  });
  head.visit([&](const std::string& n, ad::Parameter<S>& p) { out.emplace_back(n, &p); });
  return out;
}

template <typename S>
TaskMetrics evaluate_task(Model<S>& model, TaskHead<S>& head, const std::vector<TimeSeriesSample>& data,
                          const std::vector<std::size_t>& indices, const FinetuneConfig& cfg) {
  TaskMetrics m;
  if (indices.empty()) return m;
  std::size_t correct = 0;
  std::vector<std::vector<double>> truth, pred;
  double mse = 0, mse_persist = 0, loss = 0;
  std::size_t points = 0;
  for (auto i : indices) {
    const auto& s = data[i];
    Rng rng = derive_rng(cfg.seed, {kStreamFinetuneEval, i});
    if (head.kind == TaskKind::Forecasting) {
      const ForecastWindow w = sample_forecast_window(s, cfg.context, cfg.horizon, model.config.patch_size, rng);
      const Matrix<double> ctx = w.prepared.values.leftCols(w.context);
      const Matrix<double> fut = w.prepared.values.middleCols(w.context, w.horizon);
      ForecastWindow blind = forecast_window(ctx, w.horizon, model.config.patch_size);
      const Matrix<double> yhat = forecast(model, blind, s.domain->name, s.variate_subset);
      const Matrix<double> base = persistence_forecast(ctx, w.horizon);
      mse += (yhat - fut).squaredNorm();
      mse_persist += (base - fut).squaredNorm();
      points += static_cast<std::size_t>(fut.size());
    } else {
      const PreparedSample p = prepare(s, model.config.context_length, model.config.patch_size, rng);
      SampleInput in{&p, s.domain->name, s.variate_subset, p.values.rows()};
      const RowVector<S> out = classify_forward(model, head, in);
      if (!s.label) throw std::invalid_argument("evaluation sample without label");
      if (head.kind == TaskKind::Classification) {
        const int label = std::get<ClassLabel>(*s.label).id;
        Eigen::Index arg = 0;
        out.maxCoeff(&arg);
        correct += arg == label ? 1 : 0;
        loss += smoothed_cross_entropy<S>(out, label, 0.0, nullptr);
      } else {
        truth.push_back(std::get<TargetLabel>(*s.label).values);
        std::vector<double> p_row;
        for (Eigen::Index k = 0; k < out.size(); ++k) p_row.push_back(static_cast<double>(out(k)));
        pred.push_back(std::move(p_row));
      }
    }
  }
  const double n = static_cast<double>(indices.size());
  if (head.kind == TaskKind::Classification) {
    m.values["ACC"] = static_cast<double>(correct) / n;
    m.values["CE"] = loss / n;
  } else if (head.kind == TaskKind::Regression) {
    m.values["R2"] = r_squared(truth, pred);
    double se = 0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
      for (std::size_t k = 0; k < truth[i].size(); ++k, ++cnt) se += (truth[i][k] - pred[i][k]) * (truth[i][k] - pred[i][k]);
    m.values["MSE"] = se / static_cast<double>(cnt);
  } else {
    m.values["MSE"] = mse / static_cast<double>(points);
    m.values["MSE_persistence"] = mse_persist / static_cast<double>(points);
  }
  return m;
}

struct FinetuneResult {
  std::vector<FinetuneRecord> history;
  TaskMetrics held_out;
  CorpusSplit split;
};

template <typename S>
FinetuneResult finetune(Model<S>& model, TaskHead<S>& head, AdamW<S>& opt, const std::vector<TimeSeriesSample>& data,
                        const FinetuneConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("finetune: empty dataset");
  if (head.kind != cfg.task) throw std::invalid_argument("task head does not match fine-tuning task");
  for (const auto& s : data)
    if (!model.registry.contains(s.domain->name))
      throw std::invalid_argument("finetune: domain '" + s.domain->name + "' is not registered (include it first)");
  FinetuneResult res;
  res.split = split_corpus(data.size(), cfg.val_fraction, cfg.seed);
  const auto params = task_parameters(model, head);
  const int layers = model.config.encoder.layers;
  const long per_epoch = static_cast<long>((res.split.train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  TrainConfig order_cfg;
  order_cfg.seed = cfg.seed;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(data, res.split.train, order_cfg, epoch);
    double loss_sum = 0;
    double lr = 0;
    for (long b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t begin = static_cast<std::size_t>(b) * static_cast<std::size_t>(cfg.batch_size);
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TaskStep<S>> parts(end - begin);
      parallel_for(parts.size(), cfg.workers, [&](std::size_t i) {
        Rng rng = derive_rng(cfg.seed, {kStreamFinetune, static_cast<std::uint64_t>(step), i});
        parts[i] = task_step(model, head, data[order[begin + i]], cfg, rng, true);
      });
      ad::Gradients<S> grads;
      double loss = 0;
      for (auto& p : parts) {
        loss += p.loss;
        add_gradients(grads, p.grads);
      }
      for (auto& [p, g] : grads) g /= static_cast<S>(parts.size());
      loss /= static_cast<double>(parts.size());
      clip_grad_norm(grads, cfg.clip_norm);
      lr = lr_at(step, total, cfg.lr, cfg.warmup_fraction);
      opt.step(params, grads, [&](const std::string& n) { return layer_lr(n, lr, cfg.layer_decay, layers); }, cfg.weight_decay);
      loss_sum += loss;
    }
    res.history.push_back({epoch, loss_sum / static_cast<double>(per_epoch), lr});
  }
  res.held_out = evaluate_task(model, head, data, res.split.val.empty() ? res.split.train : res.split.val, cfg);
  return res;
}

}  // namespace mdts

#endif  // MDTS_FINETUNE_HPP
