#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "safer/autodiff.hpp"
#include "safer/error.hpp"
#include "safer/matrix.hpp"

namespace safer {

// Sinusoidal positional table: pe(t, 2i) = sin(t / 10000^(2i/d)), pe(t, 2i+1)
// = cos of the same argument. Positions start at t = 0; d must be even.
inline Matrix sinusoidal_pe(int t_len, int d) {
  if (d <= 0 || d % 2 != 0)
    throw ConfigError("sinusoidal_pe: dimension must be positive and even, got " +
                      std::to_string(d));
  if (t_len < 0) throw ConfigError("sinusoidal_pe: negative length");
  Matrix pe(t_len, d);
  for (int t = 0; t < t_len; ++t) {
    for (int i = 0; 2 * i < d; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d);
      pe(t, 2 * i) = std::sin(t * freq);
      pe(t, 2 * i + 1) = std::cos(t * freq);
    }
  }
  return pe;
}

// Additive causal mask: 0 on and below the diagonal, -1e9 strictly above. The
// offset is large enough that masked entries underflow to exact zeros in the
// softmax even after the 1/sqrt(d_k) scaling.
inline Matrix causal_mask(int t_len) {
  constexpr double kMaskedLogit = -1e9;
  Matrix m(t_len, t_len);
  for (int i = 0; i < t_len; ++i)
    for (int j = i + 1; j < t_len; ++j) m(i, j) = kMaskedLogit;
  return m;
}

// Single-head masked self-attention over an embedded sequence x (T x d_k):
//
//   softmax(((x Wq)(x Wk)^T + mask) / sqrt(d_k)) (x Wv) + pe
//
// The mask is applied to the raw logits before scaling, and the positional
// table is added after the value product.
inline VarId masked_self_attention(Tape& t, VarId x, VarId wq, VarId wk, VarId wv,
                                   const Matrix& mask, const Matrix& pe) {
  const int d_k = t.value(wq).cols();
  VarId q = t.matmul(x, wq);
  VarId k = t.matmul(x, wk);
  VarId v = t.matmul(x, wv);
  VarId logits = t.scale(t.add_const(t.matmul_nt(q, k), mask), 1.0 / std::sqrt(d_k));
  VarId attn = t.matmul(t.row_softmax(logits), v);
  return t.add_const(attn, pe);
}

// Bidirectional cross-attention between the two self-attended sequences. Each
// branch queries with one modality and reads keys and values from the other;
// outputs are concatenated along columns to T x 2d_k. No mask and no
// positional term here.
inline VarId cross_attention(Tape& t, VarId s_struct, VarId s_note, VarId wq_into_struct,
                             VarId wk_into_struct, VarId wv_into_struct, VarId wq_into_note,
                             VarId wk_into_note, VarId wv_into_note) {
  const int d_k = t.value(wq_into_struct).cols();
  const double inv_sqrt = 1.0 / std::sqrt(d_k);

  VarId q1 = t.matmul(s_note, wq_into_struct);
  VarId k1 = t.matmul(s_struct, wk_into_struct);
  VarId v1 = t.matmul(s_struct, wv_into_struct);
  VarId branch1 = t.matmul(t.row_softmax(t.scale(t.matmul_nt(q1, k1), inv_sqrt)), v1);

  VarId q2 = t.matmul(s_struct, wq_into_note);
  VarId k2 = t.matmul(s_note, wk_into_note);
  VarId v2 = t.matmul(s_note, wv_into_note);
  VarId branch2 = t.matmul(t.row_softmax(t.scale(t.matmul_nt(q2, k2), inv_sqrt)), v2);

  return t.concat_cols(branch1, branch2);
}

// Named handle on a parameter matrix owned by a model struct.
struct ParamRef {
  std::string name;
  Matrix* value;
};

// One training-log row shared by every trainer.
struct EpochLoss {
  int epoch;
  double mean_loss;
};

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list, which therefore must be stable across steps.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef>& params, const std::vector<Matrix>& grads) {
    if (params.size() != grads.size())
      throw ShapeError("adam: " + std::to_string(params.size()) + " params vs " +
                       std::to_string(grads.size()) + " grads");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value->rows(), p.value->cols());
        v_.emplace_back(p.value->rows(), p.value->cols());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Matrix& w = *params[i].value;
      const Matrix& g = grads[i];
      if (!w.same_shape(g))
        throw ShapeError("adam: gradient shape " + g.shape_str() + " for parameter " +
                         params[i].name + " of shape " + w.shape_str());
      if (!g.all_finite())
        throw NumericError("adam: non-finite gradient for parameter " + params[i].name);
      for (size_t k = 0; k < w.size(); ++k) {
        double& m = m_[i].data()[k];
        double& v = v_[i].data()[k];
        const double gk = g.data()[k];
        m = beta1_ * m + (1.0 - beta1_) * gk;
        v = beta2_ * v + (1.0 - beta2_) * gk * gk;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        w.data()[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
};

// Compares analytic gradients against central finite differences, coordinate
// by coordinate, through the live parameter pointers. loss() must be a pure
// function of the current parameter values; analytic() returns gradients
// aligned with params.
inline GradCheckReport grad_check(const std::vector<ParamRef>& params,
                                  const std::function<double()>& loss,
                                  const std::function<std::vector<Matrix>()>& analytic,
                                  double h = 1e-5) {
  std::vector<Matrix> grads = analytic();
  if (grads.size() != params.size())
    throw ShapeError("grad_check: analytic() returned " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(params.size()) + " parameters");
  GradCheckReport report;
  for (size_t i = 0; i < params.size(); ++i) {
    Matrix& w = *params[i].value;
    if (!w.same_shape(grads[i]))
      throw ShapeError("grad_check: gradient shape mismatch for " + params[i].name);
    for (size_t k = 0; k < w.size(); ++k) {
      const double saved = w.data()[k];
      w.data()[k] = saved + h;
      const double up = loss();
      w.data()[k] = saved - h;
      const double down = loss();
      w.data()[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double an = grads[i].data()[k];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
      const double rel = std::fabs(fd - an) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[i].name;
        report.worst_index = static_cast<int>(k);
      }
    }
  }
  return report;
}

// Plain (non-tape) helpers shared by inference paths.
inline std::vector<double> softmax_vector(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p(z.size());
  double denom = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

// -log p[label] on an explicit probability vector. The vector must be a
// strictly positive distribution; gradients live on the logits path instead.
inline double cross_entropy(const std::vector<double>& pred, int label) {
  if (label < 0 || label >= static_cast<int>(pred.size()))
    throw IndexError("cross_entropy: label " + std::to_string(label) +
                     " out of range for K=" + std::to_string(pred.size()));
  double sum = 0.0;
  for (double v : pred) {
    if (v <= 0.0) throw NumericError("cross_entropy: nonpositive probability entry");
    sum += v;
  }
  if (std::fabs(sum - 1.0) > 1e-6)
    throw NumericError("cross_entropy: probabilities sum to " + std::to_string(sum));
  return -std::log(pred[label]);
}

}  // namespace safer
