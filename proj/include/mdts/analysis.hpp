#ifndef MDTS_ANALYSIS_HPP
#define MDTS_ANALYSIS_HPP

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "mdts/io.hpp"
#include "mdts/tensor.hpp"

namespace mdts {

struct Pca {
  Matrix<double> projection;     // V x k
  std::vector<double> explained; // fraction per component, all D components
  Matrix<double> components;     // D x D, column j = j-th principal axis
  RowVector<double> mean;        // 1 x D
};

/// Mean-centred PCA through the covariance eigendecomposition. Axes are
/// sorted by descending eigenvalue and flipped so that the largest-magnitude
/// coordinate of each axis is positive.
inline Pca pca_project(const Matrix<double>& x, int k) {
  if (k < 1) throw std::invalid_argument("pca: k must be >= 1");
  if (x.rows() < k) throw std::invalid_argument("pca: fewer rows than requested components");
  if (x.cols() < k) throw std::invalid_argument("pca: more components than dimensions");
  Pca out;
  out.mean = x.colwise().mean();
  const Matrix<double> centred = x.rowwise() - out.mean;
  const Matrix<double> cov = centred.transpose() * centred / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Matrix<double>> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");
  const Eigen::Index d = x.cols();
  out.components.resize(d, d);
  std::vector<double> values(static_cast<std::size_t>(d));
  for (Eigen::Index j = 0; j < d; ++j) {
    // Eigen sorts ascending.
    const Eigen::Index src = d - 1 - j;
    Eigen::VectorXd axis = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    out.components.col(j) = axis;
    values[static_cast<std::size_t>(j)] = std::max(0.0, eig.eigenvalues()(src));
  }
  const double total = std::accumulate(values.begin(), values.end(), 0.0);
  out.explained.resize(values.size());
  for (std::size_t j = 0; j < values.size(); ++j) out.explained[j] = total > 0 ? values[j] / total : 0.0;
  out.projection = centred * out.components.leftCols(k);
  return out;
}

/// Maps a projection onto the leading axes back to centred embedding space.
inline Matrix<double> pca_back_project(const Pca& p, const Matrix<double>& projection) {
  return projection * p.components.leftCols(projection.cols()).transpose();
}

struct LayoutAlignment {
  Matrix<double> map;      // k x k
  RowVector<double> offset;
  Matrix<double> fitted;   // V x k
  std::vector<double> r_squared_per_axis;
  double r_squared = 0.0;  // pooled over coordinates
};

/// Least-squares affine fit projection -> layout.
inline LayoutAlignment align_layout(const Matrix<double>& projection, const Matrix<double>& layout) {
  if (projection.rows() != layout.rows()) throw std::invalid_argument("align_layout: row counts differ");
  const Eigen::Index n = projection.rows(), k = projection.cols();
  if (n <= k) throw std::invalid_argument("align_layout: need more points than dimensions");
  Matrix<double> a(n, k + 1);
  a.leftCols(k) = projection;
  a.col(k).setOnes();
  Eigen::ColPivHouseholderQR<Matrix<double>> qr(a);
  if (qr.rank() < k + 1) throw std::invalid_argument("align_layout: projection is rank deficient");
  {
    const Matrix<double> centred = layout.rowwise() - layout.colwise().mean();
    Eigen::ColPivHouseholderQR<Matrix<double>> lq(centred);
    if (lq.rank() < layout.cols()) throw std::invalid_argument("align_layout: layout is rank deficient");
  }
  const Matrix<double> coef = qr.solve(layout);
  LayoutAlignment out;
  out.map = coef.topRows(k);
  out.offset = coef.row(k);
  out.fitted = a * coef;
  const RowVector<double> mean = layout.colwise().mean();
  double res_all = 0, tot_all = 0;
  for (Eigen::Index j = 0; j < layout.cols(); ++j) {
    const double res = (layout.col(j) - out.fitted.col(j)).squaredNorm();
    const double tot = (layout.col(j).array() - mean(j)).matrix().squaredNorm();
    out.r_squared_per_axis.push_back(1.0 - res / tot);
    res_all += res;
    tot_all += tot;
  }
  out.r_squared = 1.0 - res_all / tot_all;
  return out;
}

struct PermutationNull {
  double observed = 0.0;
  double p_value = 1.0;
  std::vector<double> null;
};

/// Pooled-R² null from permuting which layout point each row is matched to.
/// p = (1 + #{null >= observed}) / (1 + permutations).
inline PermutationNull permutation_null(const Matrix<double>& projection, const Matrix<double>& layout, int permutations,
                                        Rng& rng) {
  PermutationNull out;
  out.observed = align_layout(projection, layout).r_squared;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(layout.rows()));
  std::iota(order.begin(), order.end(), 0);
  int at_least = 0;
  Matrix<double> shuffled(layout.rows(), layout.cols());
  for (int i = 0; i < permutations; ++i) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index r = 0; r < layout.rows(); ++r) shuffled.row(r) = layout.row(order[static_cast<std::size_t>(r)]);
    const double r2 = align_layout(projection, shuffled).r_squared;
    out.null.push_back(r2);
    if (r2 >= out.observed) ++at_least;
  }
  out.p_value = static_cast<double>(1 + at_least) / static_cast<double>(1 + permutations);
  return out;
}

inline nlohmann::json analysis_report(const Pca& pca, int k_report, const LayoutAlignment* align, const PermutationNull* null) {
  nlohmann::json j;
  std::vector<double> ev(pca.explained.begin(), pca.explained.begin() + std::min<std::size_t>(pca.explained.size(), static_cast<std::size_t>(k_report)));
  j["explained_variance"] = ev;
  j["explained_variance_total"] = std::accumulate(ev.begin(), ev.end(), 0.0);
  nlohmann::json proj = nlohmann::json::array();
  for (Eigen::Index r = 0; r < pca.projection.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(pca.projection.cols()));
    for (Eigen::Index c = 0; c < pca.projection.cols(); ++c) row[static_cast<std::size_t>(c)] = pca.projection(r, c);
    proj.push_back(row);
  }
  j["projection"] = proj;
  if (align) {
    j["r_squared"] = align->r_squared;
    j["r_squared_per_axis"] = align->r_squared_per_axis;
  }
  if (null) {
    j["permutation_p_value"] = null->p_value;
    j["permutations"] = null->null.size();
  }
  return j;
}

// ---------------------------------------------------------------------------
// Forecast plot data

struct ForecastPlot {
  Matrix<double> context;     // V x C
  Matrix<double> truth;       // V x H
  Matrix<double> prediction;  // V x H
};

/// One row per (variate, t) over C + H steps. Context cells are blank on the
/// horizon; truth and prediction cells are blank on the context.
inline std::string forecast_plot_csv(const ForecastPlot& p) {
  if (p.truth.rows() != p.context.rows() || p.prediction.rows() != p.context.rows() || p.truth.cols() != p.prediction.cols())
    throw std::invalid_argument("forecast plot: misaligned arrays");
  std::string s = "t,variate,context,truth,prediction,visible_flag\n";
  const Eigen::Index c = p.context.cols(), h = p.truth.cols();
  for (Eigen::Index v = 0; v < p.context.rows(); ++v)
    for (Eigen::Index t = 0; t < c + h; ++t) {
      s += std::to_string(t) + "," + std::to_string(v) + ",";
      if (t < c) {
        s += io::format_number(p.context(v, t)) + ",,,1\n";
      } else {
        s += "," + io::format_number(p.truth(v, t - c)) + "," + io::format_number(p.prediction(v, t - c)) + ",0\n";
      }
    }
  return s;
}

inline void export_forecast_plot(const ForecastPlot& p, const std::string& path) { io::write_text(path, forecast_plot_csv(p)); }

inline ForecastPlot parse_forecast_plot(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || io::trim(line) != "t,variate,context,truth,prediction,visible_flag")
    throw std::invalid_argument("forecast plot: unexpected header");
  struct Row {
    long long t, v;
    double value, pred;
    bool visible;
  };
  std::vector<Row> rows;
  long long max_t = -1, max_v = -1, max_ctx = -1;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, ',');
    if (f.size() != 6) throw std::invalid_argument("forecast plot: expected 6 fields");
    Row r{};
    if (!io::parse_int(f[0], r.t) || !io::parse_int(f[1], r.v)) throw std::invalid_argument("forecast plot: bad index");
    r.visible = f[5] == "1";
    const bool ok = r.visible ? io::parse_number(f[2], r.value)
                              : io::parse_number(f[3], r.value) && io::parse_number(f[4], r.pred);
    if (!ok) throw std::invalid_argument("forecast plot: bad value");
    max_t = std::max(max_t, r.t);
    max_v = std::max(max_v, r.v);
    if (r.visible) max_ctx = std::max(max_ctx, r.t);
    rows.push_back(r);
  }
  const Eigen::Index c = max_ctx + 1, h = max_t - max_ctx;
  if (rows.empty() || c < 1 || h < 1 || static_cast<Eigen::Index>(rows.size()) != (max_v + 1) * (c + h))
    throw std::invalid_argument("forecast plot: rows do not form a complete variate x time grid");
  ForecastPlot p{Matrix<double>::Zero(max_v + 1, c), Matrix<double>::Zero(max_v + 1, h), Matrix<double>::Zero(max_v + 1, h)};
  std::vector<bool> seen(rows.size(), false);
  for (const auto& r : rows) {
    if (r.t < 0 || r.v < 0 || r.visible != (r.t < c)) throw std::invalid_argument("forecast plot: misaligned context/horizon rows");
    const auto cell = static_cast<std::size_t>(r.v * (c + h) + r.t);
    if (seen[cell]) throw std::invalid_argument("forecast plot: duplicate row");
    seen[cell] = true;
    if (r.visible) {
      p.context(r.v, r.t) = r.value;
    } else {
      p.truth(r.v, r.t - c) = r.value;
      p.prediction(r.v, r.t - c) = r.pred;
    }
  }
  return p;
}

inline ForecastPlot read_forecast_plot(const std::string& path) { return parse_forecast_plot(io::read_text(path)); }

}  // namespace mdts

#endif  // MDTS_ANALYSIS_HPP
