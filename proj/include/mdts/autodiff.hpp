#ifndef MDTS_AUTODIFF_HPP
#define MDTS_AUTODIFF_HPP

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. One Tape is built per sample and thrown away after backward();
// parameters live outside the tape and only their gradients are collected.

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mdts/tensor.hpp"

namespace mdts::ad {

template <typename S>
struct Parameter {
  Matrix<S> value;
  bool decay = true;  // subject to decoupled weight decay

  Parameter() = default;
  Parameter(Matrix<S> v, bool d) : value(std::move(v)), decay(d) {}
};

template <typename S>
using Gradients = std::unordered_map<const Parameter<S>*, Matrix<S>>;

/// acc += other, allocating entries on first touch.
template <typename S>
void add_gradients(Gradients<S>& acc, const Gradients<S>& other) {
  for (const auto& [p, g] : other) {
    auto it = acc.find(p);
    if (it == acc.end()) {
      acc.emplace(p, g);
    } else {
      it->second += g;
    }
  }
}

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename S>
class Tape {
 public:
  using Mat = Matrix<S>;
  using Index = Eigen::Index;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Mat m) { return push(std::move(m), false, {}); }

  Var param(Parameter<S>& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return Var{it->second};
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.needs_grad = record_;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    leaves_.emplace(&p, id);
    return Var{id};
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }

  /// Gradient of the last backward() target w.r.t. v; empty if v was unreached.
  const Mat& grad(Var v) const { return nodes_.at(v.id).grad; }

  void backward(Var out) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    const Mat& y = value(out);
    if (y.rows() != 1 || y.cols() != 1) throw std::invalid_argument("backward target must be 1x1");
    nodes_[out.id].grad = Mat::Ones(1, 1);
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
    }
  }

  /// Parameter gradients reached by the last backward().
  Gradients<S> gradients() const {
    Gradients<S> out;
    for (const auto& [p, id] : leaves_) {
      const Mat& g = nodes_[id].grad;
      if (g.size() != 0) out.emplace(p, g);
    }
    return out;
  }

  // -- ops -----------------------------------------------------------------

  Var matmul(Var a, Var b) {
    Mat y = value(a) * value(b);
    return push(std::move(y), needs(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.needs(a)) t.acc(a, g * t.value(b).transpose());
      if (t.needs(b)) t.acc(b, t.value(a).transpose() * g);
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    Mat y = value(a) * value(b).transpose();
    return push(std::move(y), needs(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.needs(a)) t.acc(a, g * t.value(b));
      if (t.needs(b)) t.acc(b, g.transpose() * t.value(a));
    });
  }

  /// x * w + b, with b a 1 x out row broadcast over rows.
  Var linear(Var x, Var w, Var b) {
    Mat y = value(x) * value(w);
    y.rowwise() += value(b).row(0);
    return push(std::move(y), needs(x, w) || needs(b), [x, w, b](Tape& t, const Mat& g) {
      if (t.needs(x)) t.acc(x, g * t.value(w).transpose());
      if (t.needs(w)) t.acc(w, t.value(x).transpose() * g);
      if (t.needs(b)) t.acc(b, g.colwise().sum());
    });
  }

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Mat y = value(a) + value(b);
    return push(std::move(y), needs(a, b), [a, b](Tape& t, const Mat& g) {
      if (t.needs(a)) t.acc(a, g);
      if (t.needs(b)) t.acc(b, g);
    });
  }

  Var add_row(Var a, Var row) {
    Mat y = value(a);
    y.rowwise() += value(row).row(0);
    return push(std::move(y), needs(a, row), [a, row](Tape& t, const Mat& g) {
      if (t.needs(a)) t.acc(a, g);
      if (t.needs(row)) t.acc(row, g.colwise().sum());
    });
  }

  Var scale(Var a, S s) {
    Mat y = value(a) * s;
    return push(std::move(y), needs(a), [a, s](Tape& t, const Mat& g) { t.acc(a, g * s); });
  }

  Var layer_norm(Var x, Var gamma, Var beta, S eps) {
    const Mat& xv = value(x);
    const Index d = xv.cols();
    Mat xhat(xv.rows(), d);
    RowVector<S> rstd(xv.rows());
    for (Index r = 0; r < xv.rows(); ++r) {
      const S mu = xv.row(r).mean();
      const S var = (xv.row(r).array() - mu).square().mean();
      rstd(r) = S(1) / std::sqrt(var + eps);
      xhat.row(r) = (xv.row(r).array() - mu) * rstd(r);
    }
    Mat y = xhat;
    y.array().rowwise() *= value(gamma).row(0).array();
    y.rowwise() += value(beta).row(0);
    const bool ng = needs(x, gamma) || needs(beta);
    return push(std::move(y), ng,
                [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Mat& g) {
                  if (t.needs(gamma)) t.acc(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
                  if (t.needs(beta)) t.acc(beta, g.colwise().sum());
                  if (!t.needs(x)) return;
                  Mat dxhat = g;
                  dxhat.array().rowwise() *= t.value(gamma).row(0).array();
                  Mat dx(g.rows(), g.cols());
                  for (Index r = 0; r < g.rows(); ++r) {
                    const S m1 = dxhat.row(r).mean();
                    const S m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                    dx.row(r) = rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                  t.acc(x, dx);
                });
  }

  /// Exact (erf) GELU.
  Var gelu(Var x) {
    const Mat& xv = value(x);
    Mat y = xv.unaryExpr([](S v) { return S(0.5) * v * (S(1) + std::erf(v * S(M_SQRT1_2))); });
    return push(std::move(y), needs(x), [x](Tape& t, const Mat& g) {
      const Mat& xv = t.value(x);
      Mat d = xv.unaryExpr([](S v) {
        const S cdf = S(0.5) * (S(1) + std::erf(v * S(M_SQRT1_2)));
        const S pdf = std::exp(S(-0.5) * v * v) * S(0.3989422804014327);
        return cdf + v * pdf;
      });
      t.acc(x, (g.array() * d.array()).matrix());
    });
  }

  Var softmax_rows(Var x) {
    const Mat& xv = value(x);
    Mat y(xv.rows(), xv.cols());
    for (Index r = 0; r < xv.rows(); ++r) {
      const S mx = xv.row(r).maxCoeff();
      y.row(r) = (xv.row(r).array() - mx).exp();
      y.row(r) /= y.row(r).sum();
    }
    const int self = static_cast<int>(nodes_.size());
    return push(std::move(y), needs(x), [x, self](Tape& t, const Mat& g) {
      const Mat& yv = t.nodes_[self].value;
      Mat dx = yv.array() * g.array();
      const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = dx.rowwise().sum();
      dx -= (yv.array().colwise() * dots.array()).matrix();
      t.acc(x, dx);
    });
  }

  Var cols(Var x, Index start, Index n) {
    Mat y = value(x).middleCols(start, n);
    return push(std::move(y), needs(x), [x, start, n](Tape& t, const Mat& g) {
      t.acc_block(x, 0, start, g);
      (void)n;
    });
  }

  Var hcat(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("hcat of nothing");
    const Index rows = value(parts[0]).rows();
    Index total = 0;
    bool ng = false;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw std::invalid_argument("hcat row mismatch");
      total += value(p).cols();
      ng = ng || needs(p);
    }
    Mat y(rows, total);
    Index off = 0;
    for (Var p : parts) {
      y.middleCols(off, value(p).cols()) = value(p);
      off += value(p).cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return push(std::move(y), ng, [ps = std::move(ps)](Tape& t, const Mat& g) {
      Index off = 0;
      for (Var p : ps) {
        const Index c = t.value(p).cols();
        if (t.needs(p)) t.acc(p, g.middleCols(off, c));
        off += c;
      }
    });
  }

  /// y[i] = x[idx[i]]
  Var gather_rows(Var x, std::vector<Index> idx) {
    const Mat& xv = value(x);
    Mat y(static_cast<Index>(idx.size()), xv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= xv.rows()) throw std::out_of_range("gather_rows index");
      y.row(static_cast<Index>(i)) = xv.row(idx[i]);
    }
    return push(std::move(y), needs(x), [x, idx = std::move(idx)](Tape& t, const Mat& g) {
      const Mat& xv = t.value(x);
      Mat dx = Mat::Zero(xv.rows(), xv.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += g.row(static_cast<Index>(i));
      t.acc(x, dx);
    });
  }

  /// y = zeros(rows, cols(x)); y[idx[i]] = x[i]
  Var scatter_rows(Var x, std::vector<Index> idx, Index rows) {
    const Mat& xv = value(x);
    if (static_cast<Index>(idx.size()) != xv.rows()) throw std::invalid_argument("scatter_rows size mismatch");
    Mat y = Mat::Zero(rows, xv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) y.row(idx[i]) = xv.row(static_cast<Index>(i));
    return push(std::move(y), needs(x), [x, idx = std::move(idx)](Tape& t, const Mat& g) {
      Mat dx(static_cast<Index>(idx.size()), g.cols());
      for (std::size_t i = 0; i < idx.size(); ++i) dx.row(static_cast<Index>(i)) = g.row(idx[i]);
      t.acc(x, dx);
    });
  }

  /// rows x cols(row) matrix holding `row` where flags[i] is set, zero elsewhere.
  Var fill_rows(Var row, std::vector<bool> flags) {
    const Mat& rv = value(row);
    Mat y = Mat::Zero(static_cast<Index>(flags.size()), rv.cols());
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (flags[i]) y.row(static_cast<Index>(i)) = rv.row(0);
    return push(std::move(y), needs(row), [row, flags = std::move(flags)](Tape& t, const Mat& g) {
      Mat d = Mat::Zero(1, g.cols());
      for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i]) d += g.row(static_cast<Index>(i));
      t.acc(row, d);
    });
  }

  Var mean_rows(Var x) {
    const Mat& xv = value(x);
    if (xv.rows() == 0) throw std::invalid_argument("mean_rows of empty matrix");
    Mat y = xv.colwise().mean();
    return push(std::move(y), needs(x), [x](Tape& t, const Mat& g) {
      const Index n = t.value(x).rows();
      Mat dx = g.replicate(n, 1) / static_cast<S>(n);
      t.acc(x, dx);
    });
  }

  /// Scalar node whose gradient w.r.t. x was computed outside the tape.
  Var scalar(Var x, S value_, Mat dvalue_dx) {
    Mat y(1, 1);
    y(0, 0) = value_;
    return push(std::move(y), needs(x), [x, d = std::move(dvalue_dx)](Tape& t, const Mat& g) {
      t.acc(x, d * g(0, 0));
    });
  }

  Var sum(std::span<const Var> scalars) {
    Mat y = Mat::Zero(1, 1);
    bool ng = false;
    for (Var s : scalars) {
      y += value(s);
      ng = ng || needs(s);
    }
    std::vector<Var> ss(scalars.begin(), scalars.end());
    return push(std::move(y), ng, [ss = std::move(ss)](Tape& t, const Mat& g) {
      for (Var s : ss)
        if (t.needs(s)) t.acc(s, g);
    });
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    const Mat* external = nullptr;
    Parameter<S>* param = nullptr;
    bool needs_grad = false;
    std::function<void(Tape&, const Mat&)> backward;
  };

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  bool needs(Var a, Var b) const { return needs(a) || needs(b); }

  void check_same(Var a, Var b, const char* what) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }

  template <typename Expr>
  void acc(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void acc_block(Var v, Index r0, Index c0, const Mat& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(value(v).rows(), value(v).cols());
    n.grad.block(r0, c0, g.rows(), g.cols()) += g;
  }

  Var push(Mat v, bool needs_grad, std::function<void(Tape&, const Mat&)> bw) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<S>*, int> leaves_;
};

}  // namespace mdts::ad

#endif  // MDTS_AUTODIFF_HPP
