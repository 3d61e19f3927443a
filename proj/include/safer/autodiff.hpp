#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "safer/error.hpp"
#include "safer/matrix.hpp"

namespace safer {

using VarId = int;

// Reverse-mode tape over matrix-valued nodes. Operations append nodes, so
// creation order is already a topological order; backward() walks it once in
// reverse. Tapes are built per batch and thrown away.
class Tape {
 public:
  VarId leaf(Matrix v) { return push(std::move(v), nullptr); }

  // Same storage as a leaf; named separately so call sites state intent when a
  // tensor participates in the graph but its gradient is never read.
  VarId constant(Matrix v) { return push(std::move(v), nullptr); }

  const Matrix& value(VarId id) const {
    check(id);
    return nodes_[id].value;
  }

  const Matrix& grad(VarId id) const {
    check(id);
    return nodes_[id].grad;
  }

  size_t size() const { return nodes_.size(); }

  // Number of nodes touched by the last backward() call; each node is visited
  // exactly once, so this equals root + 1.
  int nodes_visited() const { return visited_; }

  VarId add(VarId a, VarId b) {
    VarId out = push(safer::add(value(a), value(b)), [a, b, id = next_id()](Tape& t) {
      accumulate(t.nodes_[a].grad, t.nodes_[id].grad, 1.0);
      accumulate(t.nodes_[b].grad, t.nodes_[id].grad, 1.0);
    });
    return out;
  }

  VarId sub(VarId a, VarId b) {
    VarId out = push(safer::sub(value(a), value(b)), [a, b, id = next_id()](Tape& t) {
      accumulate(t.nodes_[a].grad, t.nodes_[id].grad, 1.0);
      accumulate(t.nodes_[b].grad, t.nodes_[id].grad, -1.0);
    });
    return out;
  }

  VarId hadamard(VarId a, VarId b) {
    VarId out = push(safer::hadamard(value(a), value(b)), [a, b, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      accumulate_prod(t.nodes_[a].grad, g, t.nodes_[b].value);
      accumulate_prod(t.nodes_[b].grad, g, t.nodes_[a].value);
    });
    return out;
  }

  VarId scale(VarId a, double s) {
    VarId out = push(safer::scale(value(a), s), [a, s, id = next_id()](Tape& t) {
      accumulate(t.nodes_[a].grad, t.nodes_[id].grad, s);
    });
    return out;
  }

  // Adds a fixed matrix (positions, masks); nothing flows into the addend.
  VarId add_const(VarId a, const Matrix& m) {
    VarId out = push(safer::add(value(a), m), [a, id = next_id()](Tape& t) {
      accumulate(t.nodes_[a].grad, t.nodes_[id].grad, 1.0);
    });
    return out;
  }

  // a (r x n) + bias (1 x n) broadcast over rows.
  VarId add_rowvec(VarId a, VarId bias) {
    const Matrix& av = value(a);
    const Matrix& bv = value(bias);
    if (bv.rows() != 1 || bv.cols() != av.cols())
      throw ShapeError("add_rowvec: " + av.shape_str() + " + " + bv.shape_str());
    Matrix out = av;
    for (int i = 0; i < out.rows(); ++i)
      for (int j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
    return push(std::move(out), [a, bias, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      accumulate(t.nodes_[a].grad, g, 1.0);
      Matrix& bg = t.nodes_[bias].grad;
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) bg(0, j) += g(i, j);
    });
  }

  VarId matmul(VarId a, VarId b) {
    VarId out = push(safer::matmul(value(a), value(b)), [a, b, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      add_into(t.nodes_[a].grad, safer::matmul_nt(g, t.nodes_[b].value));
      add_into(t.nodes_[b].grad, safer::matmul_tn(t.nodes_[a].value, g));
    });
    return out;
  }

  // c = a * b^T.
  VarId matmul_nt(VarId a, VarId b) {
    VarId out = push(safer::matmul_nt(value(a), value(b)), [a, b, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      add_into(t.nodes_[a].grad, safer::matmul(g, t.nodes_[b].value));
      add_into(t.nodes_[b].grad, safer::matmul_tn(g, t.nodes_[a].value));
    });
    return out;
  }

  VarId tanh_op(VarId a) {
    Matrix out = value(a);
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = std::tanh(out.data()[i]);
    return push(std::move(out), [a, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      const Matrix& y = t.nodes_[id].value;
      Matrix& ag = t.nodes_[a].grad;
      for (size_t i = 0; i < g.size(); ++i)
        ag.data()[i] += g.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
    });
  }

  VarId sigmoid_op(VarId a) {
    Matrix out = value(a);
    for (size_t i = 0; i < out.size(); ++i) out.data()[i] = stable_sigmoid(out.data()[i]);
    return push(std::move(out), [a, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      const Matrix& y = t.nodes_[id].value;
      Matrix& ag = t.nodes_[a].grad;
      for (size_t i = 0; i < g.size(); ++i)
        ag.data()[i] += g.data()[i] * y.data()[i] * (1.0 - y.data()[i]);
    });
  }

  // Row-wise softmax with max subtraction. Entries pushed below the underflow
  // threshold by an additive mask come out as exact zeros, which is what makes
  // causal masking exact rather than approximate.
  VarId row_softmax(VarId a) {
    Matrix out = value(a);
    for (int i = 0; i < out.rows(); ++i) {
      double mx = out(i, 0);
      for (int j = 1; j < out.cols(); ++j) mx = std::max(mx, out(i, j));
      double denom = 0.0;
      for (int j = 0; j < out.cols(); ++j) {
        out(i, j) = std::exp(out(i, j) - mx);
        denom += out(i, j);
      }
      for (int j = 0; j < out.cols(); ++j) out(i, j) /= denom;
    }
    return push(std::move(out), [a, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      const Matrix& y = t.nodes_[id].value;
      Matrix& ag = t.nodes_[a].grad;
      for (int i = 0; i < g.rows(); ++i) {
        double dot = 0.0;
        for (int j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
        for (int j = 0; j < g.cols(); ++j) ag(i, j) += y(i, j) * (g(i, j) - dot);
      }
    });
  }

  VarId concat_cols(VarId a, VarId b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.rows() != bv.rows())
      throw ShapeError("concat_cols: " + av.shape_str() + " | " + bv.shape_str());
    Matrix out(av.rows(), av.cols() + bv.cols());
    for (int i = 0; i < av.rows(); ++i) {
      for (int j = 0; j < av.cols(); ++j) out(i, j) = av(i, j);
      for (int j = 0; j < bv.cols(); ++j) out(i, av.cols() + j) = bv(i, j);
    }
    return push(std::move(out), [a, b, ac = av.cols(), id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      Matrix& ag = t.nodes_[a].grad;
      Matrix& bg = t.nodes_[b].grad;
      for (int i = 0; i < g.rows(); ++i) {
        for (int j = 0; j < ag.cols(); ++j) ag(i, j) += g(i, j);
        for (int j = 0; j < bg.cols(); ++j) bg(i, j) += g(i, ac + j);
      }
    });
  }

  VarId row(VarId a, int r) {
    const Matrix& av = value(a);
    if (r < 0 || r >= av.rows())
      throw IndexError("row " + std::to_string(r) + " out of range for " + av.shape_str());
    Matrix out(1, av.cols());
    for (int j = 0; j < av.cols(); ++j) out(0, j) = av(r, j);
    return push(std::move(out), [a, r, id = next_id()](Tape& t) {
      const Matrix& g = t.nodes_[id].grad;
      Matrix& ag = t.nodes_[a].grad;
      for (int j = 0; j < g.cols(); ++j) ag(r, j) += g(0, j);
    });
  }

  // Scalar sum of squares; the building block for L2 penalties.
  VarId sum_squares(VarId a) {
    const Matrix& av = value(a);
    double s = 0.0;
    for (size_t i = 0; i < av.size(); ++i) s += av.data()[i] * av.data()[i];
    Matrix out(1, 1);
    out(0, 0) = s;
    return push(std::move(out), [a, id = next_id()](Tape& t) {
      const double g = t.nodes_[id].grad(0, 0);
      const Matrix& y = t.nodes_[a].value;
      Matrix& ag = t.nodes_[a].grad;
      for (size_t i = 0; i < y.size(); ++i) ag.data()[i] += 2.0 * g * y.data()[i];
    });
  }

  // -log softmax(z)[label] from a 1 x K logits row. Gradient w.r.t. the logits
  // is softmax(z) - onehot(label).
  VarId cross_entropy_logits(VarId z, int label) {
    const Matrix& zv = value(z);
    if (zv.rows() != 1) throw ShapeError("cross_entropy_logits: logits must be 1 x K");
    if (label < 0 || label >= zv.cols())
      throw IndexError("cross_entropy_logits: label " + std::to_string(label) +
                       " out of range for K=" + std::to_string(zv.cols()));
    Matrix out(1, 1);
    out(0, 0) = log_sum_exp(zv) - zv(0, label);
    return push(std::move(out), [z, label, id = next_id()](Tape& t) {
      const double g = t.nodes_[id].grad(0, 0);
      const Matrix& zv2 = t.nodes_[z].value;
      Matrix p = softmax_row(zv2);
      Matrix& zg = t.nodes_[z].grad;
      for (int j = 0; j < zv2.cols(); ++j)
        zg(0, j) += g * (p(0, j) - (j == label ? 1.0 : 0.0));
    });
  }

  // KL(softmax(zp) || softmax(zq)) from two 1 x K logit rows. Gradients:
  // d/dzp = p * (log p - log q - kl), d/dzq = q - p.
  VarId kl_logits(VarId zp, VarId zq) {
    const Matrix& pv = value(zp);
    const Matrix& qv = value(zq);
    if (pv.rows() != 1 || qv.rows() != 1 || pv.cols() != qv.cols())
      throw ShapeError("kl_logits: " + pv.shape_str() + " vs " + qv.shape_str());
    Matrix lp = log_softmax_row(pv);
    Matrix lq = log_softmax_row(qv);
    double kl = 0.0;
    for (int j = 0; j < pv.cols(); ++j) kl += std::exp(lp(0, j)) * (lp(0, j) - lq(0, j));
    Matrix out(1, 1);
    out(0, 0) = kl;
    return push(std::move(out), [zp, zq, id = next_id()](Tape& t) {
      const double g = t.nodes_[id].grad(0, 0);
      const double kl = t.nodes_[id].value(0, 0);
      Matrix lp = log_softmax_row(t.nodes_[zp].value);
      Matrix lq = log_softmax_row(t.nodes_[zq].value);
      Matrix& pg = t.nodes_[zp].grad;
      Matrix& qg = t.nodes_[zq].grad;
      for (int j = 0; j < lp.cols(); ++j) {
        const double p = std::exp(lp(0, j));
        const double q = std::exp(lq(0, j));
        pg(0, j) += g * p * (lp(0, j) - lq(0, j) - kl);
        qg(0, j) += g * (q - p);
      }
    });
  }

  // Binary cross-entropy from a 1 x 1 logit, computed in the softplus form that
  // never exponentiates a positive argument.
  VarId bce_logit(VarId z, double target) {
    const Matrix& zv = value(z);
    if (zv.rows() != 1 || zv.cols() != 1) throw ShapeError("bce_logit: logit must be 1 x 1");
    const double x = zv(0, 0);
    Matrix out(1, 1);
    out(0, 0) = std::max(x, 0.0) - target * x + std::log1p(std::exp(-std::fabs(x)));
    return push(std::move(out), [z, target, id = next_id()](Tape& t) {
      const double g = t.nodes_[id].grad(0, 0);
      const double x2 = t.nodes_[z].value(0, 0);
      t.nodes_[z].grad(0, 0) += g * (stable_sigmoid(x2) - target);
    });
  }

  // Seeds d(root)=1 and sweeps the tape once in reverse creation order. The
  // root must be a 1 x 1 scalar.
  void backward(VarId root) {
    check(root);
    if (nodes_[root].value.rows() != 1 || nodes_[root].value.cols() != 1)
      throw ShapeError("backward: root must be scalar, got " +
                       nodes_[root].value.shape_str());
    nodes_[root].grad(0, 0) += 1.0;
    visited_ = 0;
    for (VarId id = root; id >= 0; --id) {
      ++visited_;
      if (nodes_[id].back) nodes_[id].back(*this);
    }
  }

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double log_sum_exp(const Matrix& z) {
    double mx = z(0, 0);
    for (int j = 1; j < z.cols(); ++j) mx = std::max(mx, z(0, j));
    double s = 0.0;
    for (int j = 0; j < z.cols(); ++j) s += std::exp(z(0, j) - mx);
    return mx + std::log(s);
  }

  static Matrix softmax_row(const Matrix& z) {
    Matrix p = z;
    double mx = z(0, 0);
    for (int j = 1; j < z.cols(); ++j) mx = std::max(mx, z(0, j));
    double denom = 0.0;
    for (int j = 0; j < z.cols(); ++j) {
      p(0, j) = std::exp(z(0, j) - mx);
      denom += p(0, j);
    }
    for (int j = 0; j < z.cols(); ++j) p(0, j) /= denom;
    return p;
  }

  static Matrix log_softmax_row(const Matrix& z) {
    Matrix lp = z;
    const double lse = log_sum_exp(z);
    for (int j = 0; j < z.cols(); ++j) lp(0, j) -= lse;
    return lp;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&)> back;
  };

  VarId next_id() const { return static_cast<VarId>(nodes_.size()); }

  VarId push(Matrix v, std::function<void(Tape&)> back) {
    Node n;
    n.grad = Matrix(v.rows(), v.cols());
    n.value = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size()) - 1;
  }

  void check(VarId id) const {
    if (id < 0 || id >= static_cast<VarId>(nodes_.size()))
      throw IndexError("tape node " + std::to_string(id) + " out of range");
  }

  static void accumulate(Matrix& dst, const Matrix& src, double w) {
    for (size_t i = 0; i < dst.size(); ++i) dst.data()[i] += w * src.data()[i];
  }

  static void accumulate_prod(Matrix& dst, const Matrix& a, const Matrix& b) {
    for (size_t i = 0; i < dst.size(); ++i) dst.data()[i] += a.data()[i] * b.data()[i];
  }

  static void add_into(Matrix& dst, const Matrix& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
  }

  std::vector<Node> nodes_;
  int visited_ = 0;
};

}  // namespace safer
