#ifndef MDTS_LOSSES_HPP
#define MDTS_LOSSES_HPP

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mdts/tensor.hpp"

namespace mdts {

inline constexpr double kDefaultNccLambda = 0.1;
inline constexpr double kNccEpsilon = 1e-8;

struct LossReport {
  double mse = 0.0;
  double ncc = 0.0;
  double total = 0.0;
  double lambda = kDefaultNccLambda;
};

template <typename S>
using ConstRef = Eigen::Ref<const Matrix<S>>;

namespace detail {

template <typename S>
void check_loss_shapes(const ConstRef<S>& x, const ConstRef<S>& xhat, const BoolGrid& valid) {
  if (x.rows() != xhat.rows() || x.cols() != xhat.cols() || x.rows() != valid.rows() || x.cols() != valid.cols())
    throw std::invalid_argument("loss inputs have mismatched shapes");
}

}  // namespace detail

/// Sum over valid time points of squared error, divided by the number of
/// patches holding at least one valid point. With no padding this is the
/// per-patch squared L2 norm averaged over all V*T' patches.
template <typename S>
double mse_loss(const ConstRef<S>& x, const ConstRef<S>& xhat, const BoolGrid& valid, int patch_size,
                Matrix<S>* grad = nullptr) {
  detail::check_loss_shapes<S>(x, xhat, valid);
  if (patch_size < 1 || x.cols() % patch_size != 0) throw std::invalid_argument("mse_loss: length not a multiple of patch size");
  const Eigen::Index per = x.cols() / patch_size;
  Eigen::Index patches = 0;
  for (Eigen::Index v = 0; v < x.rows(); ++v)
    for (Eigen::Index t = 0; t < per; ++t)
      if (valid.row(v).segment(t * patch_size, patch_size).any()) ++patches;
  if (patches == 0) throw std::invalid_argument("mse_loss: no valid patch");
  double sum = 0.0;
  for (Eigen::Index v = 0; v < x.rows(); ++v)
    for (Eigen::Index t = 0; t < x.cols(); ++t)
      if (valid(v, t)) {
        const double d = static_cast<double>(x(v, t)) - static_cast<double>(xhat(v, t));
        sum += d * d;
      }
  const double n = static_cast<double>(patches);
  if (grad) {
    grad->setZero(x.rows(), x.cols());
    for (Eigen::Index v = 0; v < x.rows(); ++v)
      for (Eigen::Index t = 0; t < x.cols(); ++t)
        if (valid(v, t)) (*grad)(v, t) = static_cast<S>(-2.0 * (static_cast<double>(x(v, t)) - static_cast<double>(xhat(v, t))) / n);
  }
  return sum / n;
}

/// Mean over variates of the Pearson correlation between x and xhat on each
/// variate's valid time points (population statistics). Variates with fewer
/// than two valid points are skipped. The product of standard deviations is
/// floored at kNccEpsilon so flat signals contribute ~0 instead of NaN.
template <typename S>
double ncc(const ConstRef<S>& x, const ConstRef<S>& xhat, const BoolGrid& valid, Matrix<S>* grad = nullptr) {
  detail::check_loss_shapes<S>(x, xhat, valid);
  if (grad) grad->setZero(x.rows(), x.cols());
  double total = 0.0;
  int counted = 0;
  std::vector<Eigen::Index> idx;
  std::vector<double> a, b;
  struct Pending {
    Eigen::Index row;
    std::vector<Eigen::Index> idx;
    std::vector<double> da;
  };
  std::vector<Pending> pending;
  for (Eigen::Index v = 0; v < x.rows(); ++v) {
    idx.clear();
    for (Eigen::Index t = 0; t < x.cols(); ++t)
      if (valid(v, t)) idx.push_back(t);
    if (idx.size() < 2) continue;
    const double n = static_cast<double>(idx.size());
    double mx = 0, mh = 0;
    for (auto t : idx) {
      mx += x(v, t);
      mh += xhat(v, t);
    }
    mx /= n;
    mh /= n;
    a.assign(idx.size(), 0.0);
    b.assign(idx.size(), 0.0);
    double sxx = 0, shh = 0, sxh = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      a[i] = x(v, idx[i]) - mx;
      b[i] = xhat(v, idx[i]) - mh;
      sxx += a[i] * a[i];
      shh += b[i] * b[i];
      sxh += a[i] * b[i];
    }
    const double sx = std::sqrt(sxx / n), sh = std::sqrt(shh / n), cov = sxh / n;
    const double prod = sx * sh;
    const bool floored = prod < kNccEpsilon;
    const double den = floored ? kNccEpsilon : prod;
    total += cov / den;
    ++counted;
    if (grad) {
      Pending p{v, idx, std::vector<double>(idx.size())};
      double mean_a = 0;
      for (double ai : a) mean_a += ai;
      mean_a /= n;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double d = (a[i] - mean_a) / (n * den);
        if (!floored && sh > 0) d -= cov * sx * b[i] / (n * sh * den * den);
        p.da[i] = d;
      }
      pending.push_back(std::move(p));
    }
  }
  if (counted == 0) throw std::invalid_argument("ncc: no variate with two valid time points");
  if (grad)
    for (const auto& p : pending)
      for (std::size_t i = 0; i < p.idx.size(); ++i) (*grad)(p.row, p.idx[i]) = static_cast<S>(p.da[i] / counted);
  return total / counted;
}

/// total = mse + lambda * (1 - ncc); `grad` receives d total / d xhat.
template <typename S>
LossReport total_loss(const ConstRef<S>& x, const ConstRef<S>& xhat, const BoolGrid& valid, int patch_size,
                      double lambda = kDefaultNccLambda, Matrix<S>* grad = nullptr) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("ncc lambda must be >= 0");
  LossReport r;
  r.lambda = lambda;
  Matrix<S> g_mse, g_ncc;
  r.mse = mse_loss<S>(x, xhat, valid, patch_size, grad ? &g_mse : nullptr);
  r.ncc = ncc<S>(x, xhat, valid, grad ? &g_ncc : nullptr);
  r.total = r.mse + lambda * (1.0 - r.ncc);
  if (grad) *grad = g_mse - static_cast<S>(lambda) * g_ncc;
  return r;
}

}  // namespace mdts

#endif  // MDTS_LOSSES_HPP
