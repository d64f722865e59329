#ifndef MDTS_TOKENISER_HPP
#define MDTS_TOKENISER_HPP

#include <cmath>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdts/autodiff.hpp"
#include "mdts/corpus.hpp"
#include "mdts/layers.hpp"

namespace mdts {

inline constexpr double kEmbeddingInitStd = 0.02;

struct TokeniserConfig {
  int patch_size = 24;
  int model_dim = 192;
  int context_length = 1008;

  int patches() const { return context_length / patch_size; }

  void validate() const {
    if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
    if (model_dim < 2 || model_dim % 2 != 0) throw std::invalid_argument("model_dim must be even and >= 2");
    if (context_length < patch_size || context_length % patch_size != 0)
      throw std::invalid_argument("context_length must be a positive multiple of patch_size");
  }
};

/// Non-overlapping patches of a prepared sample, variate-major:
/// row v*T'+t holds values[v, t*P:(t+1)*P].
struct Patches {
  Matrix<double> rows;
  std::vector<bool> valid;  // a patch is valid if any of its time points is real data
  Eigen::Index variates = 0;
  Eigen::Index per_variate = 0;
};

inline Patches patchify(const PreparedSample& sample, int patch_size) {
  const Eigen::Index len = sample.values.cols();
  if (patch_size < 1 || len % patch_size != 0 || static_cast<Eigen::Index>(sample.time_validity.size()) != len)
    throw std::invalid_argument("patchify: sample length " + std::to_string(len) + " incompatible with patch size " +
                                std::to_string(patch_size));
  Patches p;
  p.variates = sample.values.rows();
  p.per_variate = len / patch_size;
  // Row-major Vx(T'P) and (VT')xP share a layout.
  p.rows = Eigen::Map<const Matrix<double>>(sample.values.data(), p.variates * p.per_variate, patch_size);
  p.valid.assign(static_cast<std::size_t>(p.variates * p.per_variate), false);
  for (Eigen::Index t = 0; t < p.per_variate; ++t) {
    bool any = false;
    for (int k = 0; k < patch_size; ++k) any = any || sample.time_validity[static_cast<std::size_t>(t * patch_size + k)];
    for (Eigen::Index v = 0; v < p.variates; ++v) p.valid[static_cast<std::size_t>(v * p.per_variate + t)] = any;
  }
  return p;
}

/// Conv1d(kernel P, stride P) -> LayerNorm -> GELU, shared by every variate
/// of every domain. The conv is stored as a P x D matrix.
template <typename S>
struct PatchProjector {
  Linear<S> conv;
  LayerNorm<S> norm;

  PatchProjector() = default;
  PatchProjector(int patch_size, int dim, Rng& rng) : conv(patch_size, dim, rng), norm(dim) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(patch_size));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < conv.weight.value.size(); ++i) conv.weight.value.data()[i] = static_cast<S>(u(rng));
    for (Eigen::Index i = 0; i < conv.bias.value.size(); ++i) conv.bias.value.data()[i] = static_cast<S>(u(rng));
  }

  ad::Var operator()(ad::Tape<S>& t, ad::Var patch_rows) { return t.gelu(norm(t, conv(t, patch_rows))); }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    conv.visit(prefix + "/conv", fn);
    norm.visit(prefix + "/norm", fn);
  }
};

/// Embeds patch rows (N x P) without a caller-managed tape.
template <typename S>
Matrix<S> embed_patches(const Matrix<double>& patch_rows, PatchProjector<S>& projector) {
  ad::Tape<S> t(false);
  return t.value(projector(t, t.constant(patch_rows.template cast<S>())));
}

/// Standard sin/cos table: row t, columns (2i, 2i+1) = (sin, cos)(t / 10000^(2i/D)).
template <typename S>
Matrix<S> sinusoidal_table(Eigen::Index rows, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal embeddings need an even dimension");
  Matrix<double> m(rows, dim);
  for (Eigen::Index t = 0; t < rows; ++t)
    for (int i = 0; i < dim / 2; ++i) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, 2.0 * i / dim);
      m(t, 2 * i) = std::sin(angle);
      m(t, 2 * i + 1) = std::cos(angle);
    }
  return m.template cast<S>();
}

/// Temporal table for `target` patches. Beyond the pre-training length the
/// T'-row table is linearly interpolated in index space: new row j sits at
/// old position j*T'/target (clamped to the last row).
template <typename S>
Matrix<S> temporal_embeddings(Eigen::Index target, const TokeniserConfig& config) {
  if (target < 1) throw std::invalid_argument("temporal_embeddings: target must be >= 1");
  const Eigen::Index base_rows = config.patches();
  if (target <= base_rows) return sinusoidal_table<S>(target, config.model_dim);
  const Matrix<double> base = sinusoidal_table<double>(base_rows, config.model_dim);
  Matrix<double> out(target, config.model_dim);
  for (Eigen::Index j = 0; j < target; ++j) {
    const double src = static_cast<double>(j) * static_cast<double>(base_rows) / static_cast<double>(target);
    const auto lo = static_cast<Eigen::Index>(std::floor(src));
    if (lo >= base_rows - 1) {
      out.row(j) = base.row(base_rows - 1);
    } else {
      const double frac = src - static_cast<double>(lo);
      out.row(j) = (1.0 - frac) * base.row(lo) + frac * base.row(lo + 1);
    }
  }
  return out.template cast<S>();
}

/// Per-domain variate catalogues plus their learnable embedding tables.
template <typename S>
class DomainRegistry {
 public:
  struct Entry {
    std::vector<std::string> catalogue;
    bool multivariate = true;
    double frequency = 0.0;
    ad::Parameter<S> table;  // V x D
  };

  DomainRegistry() = default;
  explicit DomainRegistry(int dim) : dim_(dim) {}

  int dim() const { return dim_; }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown domain '" + name + "'");
    return it->second;
  }
  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown domain '" + name + "'");
    return it->second;
  }

  void register_domain(const DomainSpec& spec, Rng& rng) {
    spec.validate();
    if (contains(spec.name)) throw std::invalid_argument("domain '" + spec.name + "' already registered");
    Entry e;
    e.catalogue = spec.analysis_variates();
    e.multivariate = spec.multivariate;
    e.frequency = spec.nominal_frequency;
    // Embedding tables stay out of weight decay.
    e.table = {normal_matrix<S>(static_cast<Eigen::Index>(e.catalogue.size()), dim_, kEmbeddingInitStd, rng), false};
    entries_.emplace(spec.name, std::move(e));
  }

  /// Appends rows for `new_variates`; existing rows are left untouched.
  void extend_domain(const std::string& name, const std::vector<std::string>& new_variates, Rng& rng) {
    Entry& e = at(name);
    if (!e.multivariate) throw std::invalid_argument("cannot extend uni-variate domain '" + name + "'");
    std::set<std::string> seen(e.catalogue.begin(), e.catalogue.end());
    for (const auto& v : new_variates)
      if (!seen.insert(v).second) throw std::invalid_argument("variate '" + v + "' already in domain '" + name + "'");
    if (new_variates.empty()) return;
    const Eigen::Index old_rows = e.table.value.rows();
    Matrix<S> grown(old_rows + static_cast<Eigen::Index>(new_variates.size()), dim_);
    grown.topRows(old_rows) = e.table.value;
    grown.bottomRows(static_cast<Eigen::Index>(new_variates.size())) =
        normal_matrix<S>(static_cast<Eigen::Index>(new_variates.size()), dim_, kEmbeddingInitStd, rng);
    e.table.value = std::move(grown);
    e.catalogue.insert(e.catalogue.end(), new_variates.begin(), new_variates.end());
  }

  /// Catalogue indices of `names`, in the given order.
  std::vector<int> resolve(const std::string& name, const std::vector<std::string>& names) const {
    const Entry& e = at(name);
    std::vector<int> idx;
    for (const auto& n : names) {
      auto it = std::find(e.catalogue.begin(), e.catalogue.end(), n);
      if (it == e.catalogue.end()) throw std::out_of_range("variate '" + n + "' not in domain '" + name + "'");
      idx.push_back(static_cast<int>(it - e.catalogue.begin()));
    }
    return idx;
  }

  void check_subset(const std::string& name, std::span<const int> subset) const {
    const Entry& e = at(name);
    std::set<int> seen;
    for (int v : subset) {
      if (v < 0 || v >= static_cast<int>(e.catalogue.size()))
        throw std::out_of_range("variate index " + std::to_string(v) + " out of range for domain '" + name + "'");
      if (!seen.insert(v).second) throw std::invalid_argument("variate index " + std::to_string(v) + " repeated");
    }
  }

  void visit(const ParamVisitor<S>& fn) {
    for (auto& [name, e] : entries_) fn("registry/" + name, e.table);
  }

  /// Direct insertion used when restoring from a checkpoint.
  void restore(const std::string& name, Entry e) { entries_[name] = std::move(e); }

 private:
  int dim_ = 0;
  std::map<std::string, Entry> entries_;
};

/// Token grid validity for a sample padded to `padded_variates` rows:
/// false for padded variates and for patches lying wholly in zero-padding.
inline std::vector<bool> token_validity(const Patches& patches, Eigen::Index padded_variates) {
  std::vector<bool> valid(static_cast<std::size_t>(padded_variates * patches.per_variate), false);
  for (Eigen::Index v = 0; v < patches.variates; ++v)
    for (Eigen::Index t = 0; t < patches.per_variate; ++t)
      valid[static_cast<std::size_t>(v * patches.per_variate + t)] = patches.valid[static_cast<std::size_t>(v * patches.per_variate + t)];
  return valid;
}

/// Tokens e = e^P + e^T + e^V for the listed grid slots (variate-major
/// indices), one output row per slot.
template <typename S>
ad::Var embed_tokens(ad::Tape<S>& t, const Patches& patches, std::span<const Eigen::Index> slots,
                     const Matrix<S>& temporal, ad::Var variate_table, std::span<const int> subset,
                     PatchProjector<S>& projector) {
  const Eigen::Index per = patches.per_variate;
  const auto n = static_cast<Eigen::Index>(slots.size());
  Matrix<S> raw(n, patches.rows.cols());
  Matrix<S> temp(n, temporal.cols());
  std::vector<Eigen::Index> rows_of_table(slots.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index g = slots[static_cast<std::size_t>(i)];
    const Eigen::Index v = g / per, tt = g % per;
    raw.row(i) = patches.rows.row(g).template cast<S>();
    temp.row(i) = temporal.row(tt);
    rows_of_table[static_cast<std::size_t>(i)] = subset[static_cast<std::size_t>(v)];
  }
  ad::Var e = projector(t, t.constant(std::move(raw)));
  e = t.add(e, t.constant(std::move(temp)));
  return t.add(e, t.gather_rows(variate_table, std::move(rows_of_table)));
}

template <typename S>
struct TokenSequence {
  Matrix<S> tokens;             // (V * T') x D, zero on invalid slots
  std::vector<bool> validity;   // length V * T'
  Eigen::Index variates = 0;
  Eigen::Index patches = 0;
};

template <typename S>
TokenSequence<S> assemble(const PreparedSample& sample, const std::string& domain, std::span<const int> variate_subset,
                          DomainRegistry<S>& registry, PatchProjector<S>& projector, const TokeniserConfig& config,
                          Eigen::Index padded_variates = -1) {
  registry.check_subset(domain, variate_subset);
  if (static_cast<Eigen::Index>(variate_subset.size()) != sample.values.rows())
    throw std::invalid_argument("variate subset length does not match sample rows");
  if (padded_variates < 0) padded_variates = sample.values.rows();
  if (padded_variates < sample.values.rows()) throw std::invalid_argument("padded variate count below sample variates");
  const Patches patches = patchify(sample, config.patch_size);
  TokenSequence<S> seq;
  seq.variates = padded_variates;
  seq.patches = patches.per_variate;
  seq.validity = token_validity(patches, padded_variates);
  std::vector<Eigen::Index> slots;
  for (std::size_t g = 0; g < seq.validity.size(); ++g)
    if (seq.validity[g]) slots.push_back(static_cast<Eigen::Index>(g));
  seq.tokens = Matrix<S>::Zero(padded_variates * patches.per_variate, config.model_dim);
  if (slots.empty()) return seq;
  ad::Tape<S> t(false);
  const Matrix<S> temporal = temporal_embeddings<S>(patches.per_variate, config);
  ad::Var e = embed_tokens(t, patches, slots, temporal, t.param(registry.at(domain).table), variate_subset, projector);
  const Matrix<S>& ev = t.value(e);
  for (std::size_t i = 0; i < slots.size(); ++i) seq.tokens.row(slots[i]) = ev.row(static_cast<Eigen::Index>(i));
  return seq;
}

}  // namespace mdts

#endif  // MDTS_TOKENISER_HPP
