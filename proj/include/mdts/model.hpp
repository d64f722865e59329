#ifndef MDTS_MODEL_HPP
#define MDTS_MODEL_HPP

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdts/autodiff.hpp"
#include "mdts/layers.hpp"
#include "mdts/masking.hpp"
#include "mdts/tokeniser.hpp"

namespace mdts {

struct ModelConfig {
  std::string variant = "tiny";
  int patch_size = 24;
  int context_length = 1008;
  StackConfig encoder;
  StackConfig decoder;

  TokeniserConfig tokeniser() const { return {patch_size, encoder.dim, context_length}; }

  void validate() const {
    tokeniser().validate();
    for (const auto* s : {&encoder, &decoder}) {
      if (s->layers < 0 || s->dim < 1 || s->mlp < 1 || s->heads < 1 || s->head_dim < 1)
        throw std::invalid_argument("model stack dimensions must be positive");
    }
    if (decoder.dim % 2 != 0) throw std::invalid_argument("decoder width must be even");
  }

  /// Shallow decoder shared by all published variants: 4 layers, width 160,
  /// MLP 640, 5 heads.
  static StackConfig standard_decoder() { return {4, 160, 640, 5, 32}; }

  static ModelConfig base() { return {"base", 24, 1008, {12, 192, 768, 3, 64}, standard_decoder()}; }
  static ModelConfig large() { return {"large", 24, 1008, {18, 384, 1536, 6, 64}, standard_decoder()}; }
  static ModelConfig huge() { return {"huge", 24, 1008, {24, 576, 2304, 8, 72}, standard_decoder()}; }
  /// Desk-scale variant for tests and demos.
  static ModelConfig tiny() { return {"tiny", 24, 1008, {4, 32, 64, 2, 16}, {2, 32, 64, 2, 16}}; }

  static ModelConfig variant_named(const std::string& name) {
    if (name == "tiny") return tiny();
    if (name == "base") return base();
    if (name == "large") return large();
    if (name == "huge") return huge();
    throw std::invalid_argument("unknown model variant '" + name + "'");
  }
};

/// Per-block residual-branch scales for stochastic depth.
template <typename S>
struct DropPath {
  double rate = 0.0;  // rate of the deepest block; shallower blocks scale linearly
  Rng* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }

  S draw(int block, int blocks) {
    if (!active()) return S(1);
    const double p = blocks > 1 ? rate * block / (blocks - 1) : rate;
    if (p <= 0.0) return S(1);
    std::bernoulli_distribution keep(1.0 - p);
    return keep(*rng) ? static_cast<S>(1.0 / (1.0 - p)) : S(0);
  }
};

template <typename S>
struct EncoderOutput {
  Matrix<S> h;                     // N1 x D
  std::vector<Eigen::Index> slots; // grid slot of each row
};

/// One sample's inputs to the network: prepared values padded (implicitly)
/// to `padded_variates` rows.
struct SampleInput {
  const PreparedSample* sample = nullptr;
  std::string domain;
  std::vector<int> variate_subset;
  Eigen::Index padded_variates = 0;
};

template <typename S>
class Model {
 public:
  ModelConfig config;
  PatchProjector<S> projector;
  DomainRegistry<S> registry;
  std::vector<TransformerBlock<S>> encoder;
  Linear<S> adapter;             // encoder width -> decoder width
  ad::Parameter<S> pos_proj;     // encoder width -> decoder width, positional re-encoding
  ad::Parameter<S> mask_token;   // 1 x decoder width
  std::vector<TransformerBlock<S>> decoder;
  LayerNorm<S> decoder_norm;
  Linear<S> head;                // decoder width -> P

  Model() = default;

  Model(const ModelConfig& c, Rng& rng) : config(c) {
    c.validate();
    projector = PatchProjector<S>(c.patch_size, c.encoder.dim, rng);
    registry = DomainRegistry<S>(c.encoder.dim);
    for (int i = 0; i < c.encoder.layers; ++i) encoder.emplace_back(c.encoder, rng);
    adapter = Linear<S>(c.encoder.dim, c.decoder.dim, rng);
    pos_proj = {Linear<S>(c.encoder.dim, c.decoder.dim, rng).weight.value, true};
    mask_token = {normal_matrix<S>(1, c.decoder.dim, kEmbeddingInitStd, rng), false};
    for (int i = 0; i < c.decoder.layers; ++i) decoder.emplace_back(c.decoder, rng);
    decoder_norm = LayerNorm<S>(c.decoder.dim);
    head = Linear<S>(c.decoder.dim, c.patch_size, rng);
  }

  TokeniserConfig tokeniser() const { return config.tokeniser(); }

  void visit(const ParamVisitor<S>& fn) {
    projector.visit("tok/proj", fn);
    registry.visit(fn);
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].visit("encoder/" + std::to_string(i), fn);
    adapter.visit("decoder/adapter", fn);
    fn("decoder/pos_proj", pos_proj);
    fn("decoder/mask_token", mask_token);
    for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit("decoder/" + std::to_string(i), fn);
    decoder_norm.visit("decoder/norm", fn);
    head.visit("decoder/head", fn);
  }

  // -- tape-level building blocks --------------------------------------------

  ad::Var run_encoder(ad::Tape<S>& t, ad::Var x, DropPath<S>* drop = nullptr) {
    const int n = static_cast<int>(encoder.size());
    for (int i = 0; i < n; ++i) {
      const S a = drop ? drop->draw(i, n) : S(1);
      const S m = drop ? drop->draw(i, n) : S(1);
      x = encoder[static_cast<std::size_t>(i)](t, x, a, m);
    }
    return x;
  }

  /// Positional terms for decoder slots: (temporal[t] + e^V[v]) * pos_proj.
  ad::Var decoder_positions(ad::Tape<S>& t, std::span<const Eigen::Index> slots, Eigen::Index per_variate,
                            const Matrix<S>& temporal, const std::string& domain, std::span<const int> subset) {
    Matrix<S> temp(static_cast<Eigen::Index>(slots.size()), temporal.cols());
    std::vector<Eigen::Index> rows(slots.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
      temp.row(static_cast<Eigen::Index>(i)) = temporal.row(slots[i] % per_variate);
      rows[i] = subset[static_cast<std::size_t>(slots[i] / per_variate)];
    }
    ad::Var e = t.add(t.constant(std::move(temp)), t.gather_rows(t.param(registry.at(domain).table), std::move(rows)));
    return t.matmul(e, t.param(pos_proj));
  }

  /// Scatter adapted encoder rows into the decoder slot list and put the mask
  /// token everywhere else. `visible_pos[i]` is the index into `dec_slots` of
  /// encoder row i.
  ad::Var scatter_with_mask_tokens(ad::Tape<S>& t, ad::Var h, const std::vector<Eigen::Index>& visible_pos,
                                   std::size_t dec_slots) {
    ad::Var adapted = adapter(t, h);
    ad::Var grid = t.scatter_rows(adapted, visible_pos, static_cast<Eigen::Index>(dec_slots));
    std::vector<bool> masked(dec_slots, true);
    for (auto p : visible_pos) masked[static_cast<std::size_t>(p)] = false;
    if (std::find(masked.begin(), masked.end(), true) == masked.end()) return grid;
    return t.add(grid, t.fill_rows(t.param(mask_token), std::move(masked)));
  }

  ad::Var run_decoder(ad::Tape<S>& t, ad::Var hprime) {
    for (auto& b : decoder) hprime = b(t, hprime);
    return head(t, decoder_norm(t, hprime));
  }

  struct Graph {
    ad::Var patches_hat;                  // one row of P values per decoder slot
    ad::Var encoded;                      // N1 x D
    std::vector<Eigen::Index> dec_slots;  // all valid grid slots
    std::vector<Eigen::Index> vis_slots;  // effective-visible grid slots
    Eigen::Index per_variate = 0;
  };

  /// assemble -> encode -> insert mask tokens -> decode, on a tape.
  Graph reconstruct(ad::Tape<S>& t, const SampleInput& in, const MaskPlan& plan, DropPath<S>* drop = nullptr) {
    const Patches patches = patchify(*in.sample, config.patch_size);
    registry.check_subset(in.domain, in.variate_subset);
    if (static_cast<Eigen::Index>(in.variate_subset.size()) != patches.variates)
      throw std::invalid_argument("variate subset length does not match sample rows");
    const Eigen::Index padded = std::max(in.padded_variates, patches.variates);
    if (plan.visible.cols() != patches.per_variate || plan.visible.rows() < patches.variates || plan.visible.rows() > padded)
      throw std::invalid_argument("mask plan does not match the token grid");
    const std::vector<bool> validity = token_validity(patches, padded);
    const std::vector<bool> visible = effective_visible(plan, validity, padded);

    Graph g;
    g.per_variate = patches.per_variate;
    std::vector<Eigen::Index> visible_pos;
    for (std::size_t s = 0; s < validity.size(); ++s) {
      if (!validity[s]) continue;
      if (visible[s]) {
        visible_pos.push_back(static_cast<Eigen::Index>(g.dec_slots.size()));
        g.vis_slots.push_back(static_cast<Eigen::Index>(s));
      }
      g.dec_slots.push_back(static_cast<Eigen::Index>(s));
    }
    if (g.vis_slots.empty()) throw std::invalid_argument("encode: no visible token after validity masking");

    const Matrix<S> temporal = temporal_embeddings<S>(patches.per_variate, tokeniser());
    ad::Var table = t.param(registry.at(in.domain).table);
    ad::Var tokens = embed_tokens(t, patches, g.vis_slots, temporal, table, in.variate_subset, projector);
    g.encoded = run_encoder(t, tokens, drop);
    ad::Var hprime = scatter_with_mask_tokens(t, g.encoded, visible_pos, g.dec_slots.size());
    hprime = t.add(hprime, decoder_positions(t, g.dec_slots, patches.per_variate, temporal, in.domain, in.variate_subset));
    g.patches_hat = run_decoder(t, hprime);
    return g;
  }

  /// Decoded patch rows laid out as a padded_variates x T̄ series (zeros on
  /// slots that were not decoded).
  static Matrix<S> unfold(const Matrix<S>& patch_rows, const std::vector<Eigen::Index>& slots, Eigen::Index variates,
                          Eigen::Index per_variate, int patch_size) {
    Matrix<S> grid = Matrix<S>::Zero(variates * per_variate, patch_size);
    for (std::size_t i = 0; i < slots.size(); ++i) grid.row(slots[i]) = patch_rows.row(static_cast<Eigen::Index>(i));
    return Eigen::Map<const Matrix<S>>(grid.data(), variates, per_variate * patch_size);
  }

  // -- tape-free operations ----------------------------------------------------

  /// Encoder over the effective-visible tokens of an assembled sequence.
  EncoderOutput<S> encode(const TokenSequence<S>& tokens, const MaskPlan& plan) {
    const std::vector<bool> visible = effective_visible(plan, tokens.validity, tokens.variates);
    EncoderOutput<S> out;
    for (std::size_t s = 0; s < visible.size(); ++s)
      if (visible[s]) out.slots.push_back(static_cast<Eigen::Index>(s));
    if (out.slots.empty()) throw std::invalid_argument("encode: no visible token after validity masking");
    ad::Tape<S> t(false);
    ad::Var x = t.gather_rows(t.constant(tokens.tokens), out.slots);
    out.h = t.value(run_encoder(t, x));
    return out;
  }

  /// Full-grid decoder input ((V*T') x decoder width); slots with
  /// validity=false are left zero.
  Matrix<S> insert_mask_tokens(const EncoderOutput<S>& enc, const TokenSequence<S>& tokens, const std::string& domain,
                               std::span<const int> subset) {
    if (enc.h.rows() != static_cast<Eigen::Index>(enc.slots.size()))
      throw std::invalid_argument("insert_mask_tokens: row count does not match visible slots");
    std::vector<Eigen::Index> dec_slots, visible_pos;
    std::size_t k = 0;
    for (std::size_t s = 0; s < tokens.validity.size(); ++s) {
      if (!tokens.validity[s]) continue;
      if (k < enc.slots.size() && enc.slots[k] == static_cast<Eigen::Index>(s)) {
        visible_pos.push_back(static_cast<Eigen::Index>(dec_slots.size()));
        ++k;
      }
      dec_slots.push_back(static_cast<Eigen::Index>(s));
    }
    if (k != enc.slots.size()) throw std::invalid_argument("insert_mask_tokens: encoder slots not valid in grid");
    ad::Tape<S> t(false);
    ad::Var hp = scatter_with_mask_tokens(t, t.constant(enc.h), visible_pos, dec_slots.size());
    const Matrix<S> temporal = temporal_embeddings<S>(tokens.patches, tokeniser());
    hp = t.add(hp, decoder_positions(t, dec_slots, tokens.patches, temporal, domain, subset));
    Matrix<S> full = Matrix<S>::Zero(tokens.variates * tokens.patches, config.decoder.dim);
    for (std::size_t i = 0; i < dec_slots.size(); ++i) full.row(dec_slots[i]) = t.value(hp).row(static_cast<Eigen::Index>(i));
    return full;
  }

  /// Decoder over the valid rows of a full grid; returns V x T̄.
  Matrix<S> decode(const Matrix<S>& hprime, const std::vector<bool>& validity, Eigen::Index variates) {
    std::vector<Eigen::Index> slots;
    for (std::size_t s = 0; s < validity.size(); ++s)
      if (validity[s]) slots.push_back(static_cast<Eigen::Index>(s));
    if (variates < 1 || hprime.rows() % variates != 0) throw std::invalid_argument("decode: grid rows not divisible by variates");
    const Eigen::Index per = hprime.rows() / variates;
    ad::Tape<S> t(false);
    ad::Var out = run_decoder(t, t.gather_rows(t.constant(hprime), slots));
    return unfold(t.value(out), slots, variates, per, config.patch_size);
  }

  Matrix<S> forward_reconstruct(const SampleInput& in, const MaskPlan& plan) {
    ad::Tape<S> t(false);
    Graph g = reconstruct(t, in, plan);
    const Eigen::Index padded = std::max(in.padded_variates, in.sample->values.rows());
    return unfold(t.value(g.patches_hat), g.dec_slots, padded, g.per_variate, config.patch_size);
  }
};

/// Layer-wise learning-rate depth: tokeniser 0, encoder block i -> i+1,
/// everything after the encoder (decoder, task heads) -> encoder layers + 1.
inline int parameter_depth(const std::string& name, int encoder_layers) {
  if (name.rfind("tok/", 0) == 0 || name.rfind("registry/", 0) == 0) return 0;
  if (name.rfind("encoder/", 0) == 0) {
    const auto slash = name.find('/', 8);
    return std::stoi(name.substr(8, slash - 8)) + 1;
  }
  return encoder_layers + 1;
}

}  // namespace mdts

#endif  // MDTS_MODEL_HPP
