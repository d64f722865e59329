#ifndef MDTS_LAYERS_HPP
#define MDTS_LAYERS_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mdts/autodiff.hpp"

namespace mdts {

template <typename S>
using ParamVisitor = std::function<void(const std::string&, ad::Parameter<S>&)>;

inline constexpr double kLayerNormEps = 1e-6;

template <typename S>
struct Linear {
  ad::Parameter<S> weight;  // in x out
  ad::Parameter<S> bias;    // 1 x out

  Linear() = default;
  Linear(int in, int out, Rng& rng) {
    // Xavier-uniform weights, zero bias.
    const double bound = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    weight = {Matrix<S>(in, out), true};
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = static_cast<S>(u(rng));
    bias = {Matrix<S>::Zero(1, out), false};
  }

  ad::Var operator()(ad::Tape<S>& t, ad::Var x) { return t.linear(x, t.param(weight), t.param(bias)); }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + "/weight", weight);
    fn(prefix + "/bias", bias);
  }
};

template <typename S>
struct LayerNorm {
  ad::Parameter<S> gamma;
  ad::Parameter<S> beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim) : gamma(Matrix<S>::Ones(1, dim), false), beta(Matrix<S>::Zero(1, dim), false) {}

  ad::Var operator()(ad::Tape<S>& t, ad::Var x) {
    return t.layer_norm(x, t.param(gamma), t.param(beta), static_cast<S>(kLayerNormEps));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + "/gamma", gamma);
    fn(prefix + "/beta", beta);
  }
};

struct StackConfig {
  int layers = 0;
  int dim = 0;
  int mlp = 0;
  int heads = 1;
  int head_dim = 0;
};

/// Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)). No positional
/// information is added inside, so the block is permutation-equivariant.
template <typename S>
struct TransformerBlock {
  int heads = 1;
  int head_dim = 0;
  LayerNorm<S> norm1;
  Linear<S> qkv;
  Linear<S> proj;
  LayerNorm<S> norm2;
  Linear<S> fc1;
  Linear<S> fc2;

  TransformerBlock() = default;
  TransformerBlock(const StackConfig& c, Rng& rng)
      : heads(c.heads),
        head_dim(c.head_dim),
        norm1(c.dim),
        qkv(c.dim, 3 * c.heads * c.head_dim, rng),
        proj(c.heads * c.head_dim, c.dim, rng),
        norm2(c.dim),
        fc1(c.dim, c.mlp, rng),
        fc2(c.mlp, c.dim, rng) {}

  /// `branch_scale` multiplies both residual branches (drop-path); 1 keeps them.
  ad::Var operator()(ad::Tape<S>& t, ad::Var x, S attn_scale_branch = S(1), S mlp_scale_branch = S(1)) {
    if (attn_scale_branch != S(0)) {
      ad::Var a = attention(t, norm1(t, x));
      if (attn_scale_branch != S(1)) a = t.scale(a, attn_scale_branch);
      x = t.add(x, a);
    }
    if (mlp_scale_branch != S(0)) {
      ad::Var m = fc2(t, t.gelu(fc1(t, norm2(t, x))));
      if (mlp_scale_branch != S(1)) m = t.scale(m, mlp_scale_branch);
      x = t.add(x, m);
    }
    return x;
  }

  ad::Var attention(ad::Tape<S>& t, ad::Var x) {
    ad::Var q_k_v = qkv(t, x);
    const Eigen::Index width = static_cast<Eigen::Index>(heads) * head_dim;
    const S scale = S(1) / std::sqrt(static_cast<S>(head_dim));
    std::vector<ad::Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      ad::Var q = t.cols(q_k_v, h * head_dim, head_dim);
      ad::Var k = t.cols(q_k_v, width + h * head_dim, head_dim);
      ad::Var v = t.cols(q_k_v, 2 * width + h * head_dim, head_dim);
      ad::Var p = t.softmax_rows(t.scale(t.matmul_nt(q, k), scale));
      outs.push_back(t.matmul(p, v));
    }
    ad::Var cat = heads == 1 ? outs.front() : t.hcat(outs);
    return proj(t, cat);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    norm1.visit(prefix + "/norm1", fn);
    qkv.visit(prefix + "/qkv", fn);
    proj.visit(prefix + "/proj", fn);
    norm2.visit(prefix + "/norm2", fn);
    fc1.visit(prefix + "/fc1", fn);
    fc2.visit(prefix + "/fc2", fn);
  }
};

}  // namespace mdts

#endif  // MDTS_LAYERS_HPP
