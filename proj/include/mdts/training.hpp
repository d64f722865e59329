#ifndef MDTS_TRAINING_HPP
#define MDTS_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mdts/autodiff.hpp"
#include "mdts/corpus.hpp"
#include "mdts/losses.hpp"
#include "mdts/masking.hpp"
#include "mdts/model.hpp"

namespace mdts {

// Stream tags for derive_rng(); each purpose draws from its own stream.
enum : std::uint64_t {
  kStreamSplit = 1,
  kStreamEpoch = 2,
  kStreamSample = 3,
  kStreamValidation = 4,
  kStreamInit = 5,
  kStreamDomain = 6,
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double warmup_fraction = 0.10;
  double weight_decay = 0.05;
  double mask_ratio = 0.75;
  double ncc_lambda = kDefaultNccLambda;
  double val_fraction = 0.10;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  int workers = 1;
  std::map<std::string, double> domain_weights;  // empty = uniform over samples
  std::optional<MaskScheme> force_scheme;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be > 0");
    if (!(warmup_fraction >= 0 && warmup_fraction < 1)) throw std::invalid_argument("warmup fraction must lie in [0, 1)");
    if (!(mask_ratio >= 0 && mask_ratio < 1)) throw std::invalid_argument("mask ratio must lie in [0, 1)");
    if (!(ncc_lambda >= 0)) throw std::invalid_argument("ncc lambda must be >= 0");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw std::invalid_argument("val fraction must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
  }
};

/// Linear warmup over the first `warmup_fraction` of steps, cosine decay after.
inline double lr_at(long step, long total_steps, double base_lr, double warmup_fraction = 0.10) {
  if (total_steps < 1 || step < 0 || step >= total_steps) throw std::out_of_range("lr_at: step out of range");
  const long warmup = static_cast<long>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename S>
using NamedParameters = std::vector<std::pair<std::string, ad::Parameter<S>*>>;

template <typename S>
NamedParameters<S> named_parameters(Model<S>& model) {
  NamedParameters<S> out;
  model.visit([&](const std::string& n, ad::Parameter<S>& p) { out.emplace_back(n, &p); });
  return out;
}

template <typename S>
struct AdamMoments {
  Matrix<S> m;
  Matrix<S> v;
};

/// Adam with decoupled weight decay. Moments are keyed by parameter name so
/// they survive checkpointing and registry growth.
template <typename S>
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::map<std::string, AdamMoments<S>> moments;
  std::map<std::string, long> counts;

  /// `lr_for(name)` gives each parameter's learning rate for this step.
  void step(const NamedParameters<S>& params, const ad::Gradients<S>& grads, const std::function<double(const std::string&)>& lr_for,
            double weight_decay) {
    for (const auto& [name, p] : params) {
      auto git = grads.find(p);
      if (git == grads.end()) continue;
      const Matrix<S>& g = git->second;
      AdamMoments<S>& st = moments[name];
      fit(st.m, p->value);
      fit(st.v, p->value);
      const long t = ++counts[name];
      const double lr = lr_for(name);
      const auto b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
      st.m = b1 * st.m + (S(1) - b1) * g;
      st.v = b2 * st.v + (S(1) - b2) * g.cwiseProduct(g);
      const auto c1 = static_cast<S>(1.0 - std::pow(beta1, static_cast<double>(t)));
      const auto c2 = static_cast<S>(1.0 - std::pow(beta2, static_cast<double>(t)));
      if (p->decay && weight_decay > 0) p->value *= static_cast<S>(1.0 - lr * weight_decay);
      p->value.array() -= static_cast<S>(lr) * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + static_cast<S>(eps));
    }
  }

 private:
  static void fit(Matrix<S>& state, const Matrix<S>& like) {
    if (state.rows() == like.rows() && state.cols() == like.cols()) return;
    Matrix<S> grown = Matrix<S>::Zero(like.rows(), like.cols());
    const auto r = std::min(state.rows(), like.rows()), c = std::min(state.cols(), like.cols());
    grown.topLeftCorner(r, c) = state.topLeftCorner(r, c);
    state = std::move(grown);
  }
};

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
template <typename S>
double clip_grad_norm(ad::Gradients<S>& grads, double max_norm) {
  // Map order follows pointer values; sort so the sum does not depend on it.
  std::vector<double> parts;
  for (const auto& [p, g] : grads) parts.push_back(static_cast<double>(g.squaredNorm()));
  std::sort(parts.begin(), parts.end());
  const double norm = std::sqrt(std::accumulate(parts.begin(), parts.end(), 0.0));
  if (max_norm > 0 && norm > max_norm) {
    const auto s = static_cast<S>(max_norm / (norm + 1e-6));
    for (auto& [p, g] : grads) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Batches

struct BatchItem {
  const TimeSeriesSample* source = nullptr;
  PreparedSample prepared;
  MaskPlan plan;
};

struct Batch {
  std::vector<BatchItem> items;
  Eigen::Index padded_variates = 0;  // max V_S over the batch

  SampleInput input(std::size_t i) const {
    const auto& it = items[i];
    return SampleInput{&it.prepared, it.source->domain->name, it.source->variate_subset, padded_variates};
  }
};

/// Crops/pads and masks each sample with its own generator; padding to the
/// batch-wide variate count is implicit in `padded_variates`.
inline Batch make_batch(const std::vector<const TimeSeriesSample*>& samples, const TokeniserConfig& tok,
                        const std::function<Rng(std::size_t)>& rng_for, double mask_ratio,
                        std::optional<MaskScheme> force = std::nullopt) {
  Batch b;
  for (const auto* s : samples) b.padded_variates = std::max(b.padded_variates, s->num_variates());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng = rng_for(i);
    BatchItem item;
    item.source = samples[i];
    item.prepared = prepare(*samples[i], tok.context_length, tok.patch_size, rng);
    item.plan = draw_dual_mask(samples[i]->num_variates(), tok.patches(), mask_ratio, rng, force);
    // Make sure at least one real token stays visible after padding is removed.
    const Patches p = patchify(item.prepared, tok.patch_size);
    bool any = false;
    std::vector<Eigen::Index> valid_cells;
    for (Eigen::Index v = 0; v < p.variates; ++v)
      for (Eigen::Index t = 0; t < p.per_variate; ++t)
        if (p.valid[static_cast<std::size_t>(v * p.per_variate + t)]) {
          valid_cells.push_back(v * p.per_variate + t);
          any = any || item.plan.visible(v, t);
        }
    if (!any && !valid_cells.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, valid_cells.size() - 1);
      const auto c = valid_cells[pick(rng)];
      item.plan.visible(c / p.per_variate, c % p.per_variate) = true;
    }
    b.items.push_back(std::move(item));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Per-sample objective

template <typename S>
struct SampleResult {
  LossReport loss;
  ad::Gradients<S> grads;
};

/// Point-wise validity of a sample padded to `padded` variates.
inline BoolGrid point_validity(const PreparedSample& s, Eigen::Index padded) {
  BoolGrid valid = BoolGrid::Constant(padded, s.values.cols(), false);
  for (Eigen::Index v = 0; v < s.values.rows(); ++v)
    for (Eigen::Index t = 0; t < s.values.cols(); ++t) valid(v, t) = s.time_validity[static_cast<std::size_t>(t)];
  return valid;
}

/// Reconstruction loss (already normalised per sample) and, optionally, its
/// parameter gradients.
template <typename S>
SampleResult<S> reconstruction_step(Model<S>& model, const SampleInput& in, const MaskPlan& plan, double lambda,
                                    bool want_grad) {
  ad::Tape<S> t(want_grad);
  auto g = model.reconstruct(t, in, plan);
  const Eigen::Index padded = std::max(in.padded_variates, in.sample->values.rows());
  ad::Var grid = t.scatter_rows(g.patches_hat, g.dec_slots, padded * g.per_variate);
  const Matrix<S>& grid_v = t.value(grid);
  Eigen::Map<const Matrix<S>> xhat(grid_v.data(), padded, g.per_variate * model.config.patch_size);
  Matrix<S> target = Matrix<S>::Zero(padded, in.sample->values.cols());
  target.topRows(in.sample->values.rows()) = in.sample->values.template cast<S>();
  const BoolGrid valid = point_validity(*in.sample, padded);
  Matrix<S> dxhat;
  SampleResult<S> r;
  r.loss = total_loss<S>(target, xhat, valid, model.config.patch_size, lambda, want_grad ? &dxhat : nullptr);
  if (!std::isfinite(r.loss.total)) throw std::runtime_error("loss diverged (non-finite)");
  if (want_grad) {
    Matrix<S> dgrid = Eigen::Map<const Matrix<S>>(dxhat.data(), grid_v.rows(), grid_v.cols());
    ad::Var loss = t.scalar(grid, static_cast<S>(r.loss.total), std::move(dgrid));
    t.backward(loss);
    r.grads = t.gradients();
  }
  return r;
}

inline int default_workers() {
  if (const char* env = std::getenv("MDTS_WORKERS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads. Results must be
/// written to per-index slots so that reductions can run in index order.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(workers)) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Batch-mean of per-sample results; gradients are reduced in sample order.
template <typename S>
SampleResult<S> reduce_batch(std::vector<SampleResult<S>>& parts) {
  SampleResult<S> out;
  if (parts.empty()) return out;
  for (auto& p : parts) {
    out.loss.mse += p.loss.mse;
    out.loss.ncc += p.loss.ncc;
    out.loss.total += p.loss.total;
    add_gradients(out.grads, p.grads);
  }
  const double n = static_cast<double>(parts.size());
  out.loss.mse /= n;
  out.loss.ncc /= n;
  out.loss.total /= n;
  out.loss.lambda = parts.front().loss.lambda;
  for (auto& [p, g] : out.grads) g /= static_cast<S>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Pre-training loop

struct EpochRecord {
  int epoch = 0;
  std::string split;
  double mse = 0, ncc = 0, total = 0, lr = 0;
};

/// Everything besides parameters and moments needed to resume a run.
struct TrainState {
  long step = 0;
  // Running sums for the epoch in progress.
  double epoch_mse = 0, epoch_ncc = 0, epoch_total = 0;
  long epoch_batches = 0;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
};

struct CorpusSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

inline CorpusSplit split_corpus(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_rng(seed, {kStreamSplit});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
  CorpusSplit s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, n > 0 ? n - 1 : 0)));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(s.val.size()), order.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

/// Sample order for one epoch: a permutation, or weighted draws with
/// replacement when per-domain weights are configured.
inline std::vector<std::size_t> epoch_order(const std::vector<TimeSeriesSample>& corpus, const std::vector<std::size_t>& train,
                                            const TrainConfig& cfg, int epoch) {
  Rng rng = derive_rng(cfg.seed, {kStreamEpoch, static_cast<std::uint64_t>(epoch)});
  std::vector<std::size_t> order = train;
  if (cfg.domain_weights.empty()) {
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }
  std::vector<double> w;
  for (auto i : train) {
    auto it = cfg.domain_weights.find(corpus[i].domain->name);
    w.push_back(it == cfg.domain_weights.end() ? 1.0 : it->second);
  }
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  for (auto& o : order) o = train[pick(rng)];
  return order;
}

template <typename S>
LossReport evaluate_reconstruction(Model<S>& model, const std::vector<TimeSeriesSample>& corpus,
                                   const std::vector<std::size_t>& indices, const TrainConfig& cfg) {
  std::vector<const TimeSeriesSample*> samples;
  for (auto i : indices) samples.push_back(&corpus[i]);
  const auto tok = model.tokeniser();
  Batch b = make_batch(
      samples, tok, [&](std::size_t i) { return derive_rng(cfg.seed, {kStreamValidation, indices[i]}); }, cfg.mask_ratio,
      cfg.force_scheme);
  std::vector<SampleResult<S>> parts(b.items.size());
  parallel_for(b.items.size(), cfg.workers,
               [&](std::size_t i) { parts[i] = reconstruction_step(model, b.input(i), b.items[i].plan, cfg.ncc_lambda, false); });
  return reduce_batch(parts).loss;
}

/// Registers every domain the corpus references that the model lacks.
template <typename S>
void register_corpus_domains(Model<S>& model, const std::vector<TimeSeriesSample>& corpus, std::uint64_t seed) {
  for (const auto& s : corpus) {
    if (model.registry.contains(s.domain->name)) continue;
    Rng rng = derive_rng(seed, {kStreamDomain, stable_hash(s.domain->name)});
    model.registry.register_domain(*s.domain, rng);
  }
}

/// Masked reconstruction pre-training. Picks up from `state.step`, so a
/// run restored from a checkpoint continues the same trajectory. Stops early
/// after `stop_at_step` when given.
template <typename S>
void pretrain(Model<S>& model, AdamW<S>& opt, const std::vector<TimeSeriesSample>& corpus, const TrainConfig& cfg,
              TrainState& state, std::optional<long> stop_at_step = std::nullopt,
              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
  for (const auto& s : corpus)
    if (!model.registry.contains(s.domain->name))
      throw std::invalid_argument("pretrain: domain '" + s.domain->name + "' is not registered");
  opt.beta1 = cfg.beta1;
  opt.beta2 = cfg.beta2;
  opt.eps = cfg.adam_eps;

  const CorpusSplit split = split_corpus(corpus.size(), cfg.val_fraction, cfg.seed);
  const long per_epoch = static_cast<long>((split.train.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  const auto tok = model.tokeniser();
  auto params = named_parameters(model);

  while (state.step < total) {
    if (stop_at_step && state.step >= *stop_at_step) return;
    const int epoch = static_cast<int>(state.step / per_epoch);
    const long pos = state.step % per_epoch;
    const auto order = epoch_order(corpus, split.train, cfg, epoch);
    const std::size_t begin = static_cast<std::size_t>(pos) * static_cast<std::size_t>(cfg.batch_size);
    const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
    std::vector<const TimeSeriesSample*> samples;
    for (std::size_t i = begin; i < end; ++i) samples.push_back(&corpus[order[i]]);
    const long step = state.step;
    Batch b = make_batch(
        samples, tok, [&](std::size_t i) { return derive_rng(cfg.seed, {kStreamSample, static_cast<std::uint64_t>(step), i}); },
        cfg.mask_ratio, cfg.force_scheme);

    std::vector<SampleResult<S>> parts(b.items.size());
    parallel_for(b.items.size(), cfg.workers,
                 [&](std::size_t i) { parts[i] = reconstruction_step(model, b.input(i), b.items[i].plan, cfg.ncc_lambda, true); });
    SampleResult<S> r = reduce_batch(parts);
    clip_grad_norm(r.grads, cfg.clip_norm);
    const double lr = lr_at(step, total, cfg.lr, cfg.warmup_fraction);
    opt.step(params, r.grads, [lr](const std::string&) { return lr; }, cfg.weight_decay);

    state.step_losses.push_back(r.loss.total);
    state.epoch_mse += r.loss.mse;
    state.epoch_ncc += r.loss.ncc;
    state.epoch_total += r.loss.total;
    ++state.epoch_batches;
    ++state.step;

    if (state.step % per_epoch == 0) {
      const double n = static_cast<double>(state.epoch_batches);
      EpochRecord tr{epoch, "train", state.epoch_mse / n, state.epoch_ncc / n, state.epoch_total / n, lr};
      state.history.push_back(tr);
      if (on_epoch) on_epoch(tr);
      if (!split.val.empty()) {
        const LossReport v = evaluate_reconstruction(model, corpus, split.val, cfg);
        EpochRecord vr{epoch, "val", v.mse, v.ncc, v.total, lr};
        state.history.push_back(vr);
        if (on_epoch) on_epoch(vr);
      }
      state.epoch_mse = state.epoch_ncc = state.epoch_total = 0;
      state.epoch_batches = 0;
    }
  }
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string s = "epoch,split,mse,ncc,total,lr\n";
  for (const auto& r : history)
    s += std::to_string(r.epoch) + "," + r.split + "," + io::format_number(r.mse) + "," + io::format_number(r.ncc) + "," +
         io::format_number(r.total) + "," + io::format_number(r.lr) + "\n";
  return s;
}

}  // namespace mdts

#endif  // MDTS_TRAINING_HPP
