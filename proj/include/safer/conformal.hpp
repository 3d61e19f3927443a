#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "safer/error.hpp"
#include "safer/matrix.hpp"

namespace safer {

// Ridge regression from fused features to divergence scores:
// beta = (X^T X + lambda I)^-1 X^T y, solved by Cholesky. With an intercept
// the system is solved on centered data and the penalty applies to the slopes
// only. lambda = 0 degrades to plain least squares and fails loudly on
// singular designs.
struct RidgeModel {
  std::vector<double> beta;
  double intercept = 0.0;
  double lambda = 0.0;
};

namespace conformal_detail {

// In-place Cholesky solve of A x = b for symmetric positive definite A.
inline std::vector<double> cholesky_solve(std::vector<double> a, std::vector<double> b, int n) {
  for (int j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (int k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (d <= 1e-12)
      throw NumericError(
          "ridge: normal equations are numerically singular; use lambda > 0");
    const double l = std::sqrt(d);
    a[j * n + j] = l;
    for (int i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / l;
    }
  }
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (int k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return b;
}

}  // namespace conformal_detail

inline RidgeModel fit_score_predictor(const Matrix& x, const std::vector<double>& y, double lambda,
                                      bool fit_intercept = true) {
  const int n = x.rows();
  const int d = x.cols();
  if (n == 0 || d == 0) throw DataError("ridge: empty design matrix");
  if (static_cast<int>(y.size()) != n)
    throw ShapeError("ridge: " + std::to_string(n) + " rows vs " + std::to_string(y.size()) +
                     " targets");
  if (lambda < 0.0) throw ConfigError("ridge: lambda must be >= 0");

  std::vector<double> x_mean(d, 0.0);
  double y_mean = 0.0;
  if (fit_intercept) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) x_mean[j] += x(i, j);
      y_mean += y[i];
    }
    for (int j = 0; j < d; ++j) x_mean[j] /= n;
    y_mean /= n;
  }

  std::vector<double> gram(static_cast<size_t>(d) * d, 0.0);
  std::vector<double> rhs(d, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      const double xj = x(i, j) - x_mean[j];
      rhs[j] += xj * (y[i] - y_mean);
      for (int k = j; k < d; ++k) gram[j * d + k] += xj * (x(i, k) - x_mean[k]);
    }
  }
  for (int j = 0; j < d; ++j) {
    gram[j * d + j] += lambda;
    for (int k = j + 1; k < d; ++k) gram[k * d + j] = gram[j * d + k];
  }

  RidgeModel model;
  model.lambda = lambda;
  model.beta = conformal_detail::cholesky_solve(std::move(gram), std::move(rhs), d);
  if (fit_intercept) {
    model.intercept = y_mean;
    for (int j = 0; j < d; ++j) model.intercept -= model.beta[j] * x_mean[j];
  }
  return model;
}

inline double predict_score(const RidgeModel& model, const Matrix& x_row) {
  if (x_row.rows() != 1 || x_row.cols() != static_cast<int>(model.beta.size()))
    throw ShapeError("predict_score: feature row " + x_row.shape_str() + " vs " +
                     std::to_string(model.beta.size()) + " coefficients");
  double s = model.intercept;
  for (int j = 0; j < x_row.cols(); ++j) s += model.beta[j] * x_row(0, j);
  return s;
}

// One calibration patient: the label-free predicted score and the pipeline
// divergence it stands in for.
struct CalRecord {
  std::string id;
  double kappa_pred = 0.0;
  double kappa_true = 0.0;
};

// Conformal p-value for the hypothesis "true divergence >= c" at a test point
// with predicted score kappa_pred_test:
//
//   p = [ #\{kappa_pred_i < test, kappa_true_i >= c\}
//         + u * (1 + #\{kappa_pred_i = test, kappa_true_i >= c\}) ] / (n + 1)
//
// where n is the full calibration size and u is the caller's tie-break draw.
inline double conformal_pvalue(const std::vector<CalRecord>& cal, double kappa_pred_test, double c,
                               double u) {
  if (u < 0.0 || u > 1.0) throw ConfigError("conformal_pvalue: u outside [0, 1]");
  if (c <= 0.0) throw ConfigError("conformal_pvalue: threshold c must be > 0");
  int strictly_below = 0, tied = 0;
  for (const auto& r : cal) {
    if (r.kappa_true < c) continue;
    if (r.kappa_pred < kappa_pred_test)
      ++strictly_below;
    else if (r.kappa_pred == kappa_pred_test)
      ++tied;
  }
  return (strictly_below + u * (1.0 + tied)) / (cal.size() + 1.0);
}

// Nonconformity score J = kappa + 2M * 1(label exceeds the threshold). Inputs
// live in [0, M]; the offset separates the two label classes by a full band.
inline double nonconformity_J(double kappa, bool label_exceeds_c, double m_bound) {
  if (m_bound <= 0.0) throw ConfigError("nonconformity_J: M must be > 0");
  if (kappa < 0.0 || kappa > m_bound)
    throw DataError("nonconformity_J: kappa outside [0, M]");
  return kappa + (label_exceeds_c ? 2.0 * m_bound : 0.0);
}

// The same p-value computed through the nonconformity reformulation: every
// calibration point gets a scalar J score and the count runs over all of them
// with no null filter. Non-null points are pushed one band above every
// possible test score, so they can never count; null points keep their raw
// predicted score, which also keeps the comparison bit-exact against
// conformal_pvalue. The test side evaluates J at the threshold label itself,
// where the band offset vanishes.
inline double jscore_pvalue(const std::vector<CalRecord>& cal, double kappa_pred_test, double c,
                            double m_bound, double u) {
  if (u < 0.0 || u > 1.0) throw ConfigError("jscore_pvalue: u outside [0, 1]");
  if (kappa_pred_test < 0.0 || kappa_pred_test > m_bound)
    throw DataError("jscore_pvalue: test score outside [0, M]");
  const double j_test = kappa_pred_test;
  int strictly_below = 0, tied = 0;
  for (const auto& r : cal) {
    if (r.kappa_pred < 0.0 || r.kappa_pred > m_bound)
      throw DataError("jscore_pvalue: calibration score outside [0, M]");
    const double j_i = r.kappa_pred + (r.kappa_true >= c ? 0.0 : 2.0 * m_bound);
    if (j_i < j_test)
      ++strictly_below;
    else if (j_i == j_test)
      ++tied;
  }
  return (strictly_below + u * (1.0 + tied)) / (cal.size() + 1.0);
}

struct BhResult {
  std::vector<int> selected;  // ascending original indices
  int k = 0;                  // largest rank whose sorted p-value clears alpha * r / m
  double threshold = 0.0;     // p_(k), or 0 when nothing is selected
};

// Step-up selection: k = max r with p_(r) <= alpha * r / m, select everything
// at or below p_(k). Duplicate p-values at the cutoff cannot occur beyond rank
// k, so |selected| = k.
inline BhResult bh_select(const std::vector<double>& pvalues, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("bh_select: alpha outside [0, 1]");
  BhResult result;
  const int m = static_cast<int>(pvalues.size());
  if (m == 0) return result;
  std::vector<double> sorted = pvalues;
  for (double p : sorted)
    if (!(p >= 0.0) || p > 1.0) throw DataError("bh_select: p-value outside [0, 1]");
  std::sort(sorted.begin(), sorted.end());
  for (int r = m; r >= 1; --r) {
    if (sorted[r - 1] <= alpha * r / m) {
      result.k = r;
      result.threshold = sorted[r - 1];
      break;
    }
  }
  if (result.k == 0) return result;
  for (int j = 0; j < m; ++j)
    if (pvalues[j] <= result.threshold) result.selected.push_back(j);
  return result;
}

// Upper quantile by linear interpolation on the sorted sample; the clip bound
// M defaults to the 99.9th percentile of training divergences.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile: empty sample");
  if (q < 0.0 || q > 1.0) throw ConfigError("percentile: q outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * (values.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - lo) * (values[hi] - values[lo]);
}

// A pooled evaluation patient for the replicated selection experiments.
struct ScoredPatient {
  double kappa_pred = 0.0;
  double kappa_true = 0.0;
};

struct SweepConfig {
  std::vector<double> alphas;
  std::vector<double> cs;
  int replicates = 500;
  int n_cal = 0;
  int n_test = 0;
  uint64_t seed = 1;
  int threads = 1;
};

struct SweepCell {
  double c = 0.0;
  double alpha = 0.0;
  double mean_fdr = 0.0;
  double se_fdr = 0.0;
  double mean_power = 0.0;
  double se_power = 0.0;
  int replicates = 0;
};

// Replicated false-discovery / power estimates over a frozen score pool. Each
// replicate redraws the calibration/test partition and fresh tie-break
// variables; oracle null status is kappa_true >= c. Replicates are
// independent, so they may run on worker threads; aggregation always walks
// them in index order, keeping results identical for any thread count.
inline std::vector<SweepCell> estimate_fdr_power(const std::vector<ScoredPatient>& pool,
                                                 const SweepConfig& cfg) {
  if (cfg.alphas.empty() || cfg.cs.empty())
    throw ConfigError("sweep: alpha and c grids must be non-empty");
  for (double a : cfg.alphas)
    if (a < 0.0 || a > 1.0) throw ConfigError("sweep: alpha outside [0, 1]");
  for (double c : cfg.cs)
    if (c <= 0.0) throw ConfigError("sweep: thresholds must be > 0");
  if (cfg.replicates < 1) throw ConfigError("sweep: replicates must be >= 1");
  if (cfg.n_cal < 1 || cfg.n_test < 1)
    throw ConfigError("sweep: calibration and test sizes must be >= 1");
  if (static_cast<size_t>(cfg.n_cal) + cfg.n_test > pool.size())
    throw DataError("sweep: pool smaller than n_cal + n_test");

  const int n_cells = static_cast<int>(cfg.cs.size() * cfg.alphas.size());
  std::vector<std::vector<double>> fdp(n_cells, std::vector<double>(cfg.replicates));
  std::vector<std::vector<double>> power(n_cells, std::vector<double>(cfg.replicates));

  auto run_replicate = [&](int rep) {
    std::vector<int> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x5EE9, static_cast<uint64_t>(rep)));
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<CalRecord> cal(cfg.n_cal);
    for (int i = 0; i < cfg.n_cal; ++i)
      cal[i] = {"", pool[order[i]].kappa_pred, pool[order[i]].kappa_true};
    std::vector<const ScoredPatient*> test(cfg.n_test);
    for (int j = 0; j < cfg.n_test; ++j) test[j] = &pool[order[cfg.n_cal + j]];

    std::vector<double> u(cfg.n_test);
    for (int j = 0; j < cfg.n_test; ++j) {
      std::mt19937_64 tie_rng(
          mix_seed(cfg.seed, 0x71EB, static_cast<uint64_t>(rep), static_cast<uint64_t>(j)));
      u[j] = std::uniform_real_distribution<double>(0.0, 1.0)(tie_rng);
    }

    std::vector<double> pvals(cfg.n_test);
    for (size_t ci = 0; ci < cfg.cs.size(); ++ci) {
      const double c = cfg.cs[ci];
      int n_false_null = 0;
      for (int j = 0; j < cfg.n_test; ++j)
        if (test[j]->kappa_true < c) ++n_false_null;
      for (int j = 0; j < cfg.n_test; ++j)
        pvals[j] = conformal_pvalue(cal, test[j]->kappa_pred, c, u[j]);
      for (size_t ai = 0; ai < cfg.alphas.size(); ++ai) {
        const BhResult sel = bh_select(pvals, cfg.alphas[ai]);
        int v = 0, tp = 0;
        for (int j : sel.selected) {
          if (test[j]->kappa_true >= c)
            ++v;
          else
            ++tp;
        }
        const int cell = static_cast<int>(ci * cfg.alphas.size() + ai);
        fdp[cell][rep] = static_cast<double>(v) / std::max(1, static_cast<int>(sel.selected.size()));
        power[cell][rep] = static_cast<double>(tp) / std::max(1, n_false_null);
      }
    }
  };

  const int threads = std::max(1, cfg.threads);
  if (threads == 1) {
    for (int rep = 0; rep < cfg.replicates; ++rep) run_replicate(rep);
  } else {
    std::vector<std::thread> workers;
    for (int w = 0; w < threads; ++w)
      workers.emplace_back([&, w]() {
        for (int rep = w; rep < cfg.replicates; rep += threads) run_replicate(rep);
      });
    for (auto& t : workers) t.join();
  }

  std::vector<SweepCell> cells;
  cells.reserve(n_cells);
  for (size_t ci = 0; ci < cfg.cs.size(); ++ci) {
    for (size_t ai = 0; ai < cfg.alphas.size(); ++ai) {
      const int cell = static_cast<int>(ci * cfg.alphas.size() + ai);
      SweepCell out;
      out.c = cfg.cs[ci];
      out.alpha = cfg.alphas[ai];
      out.replicates = cfg.replicates;
      double fsum = 0.0, psum = 0.0;
      for (int rep = 0; rep < cfg.replicates; ++rep) {
        fsum += fdp[cell][rep];
        psum += power[cell][rep];
      }
      out.mean_fdr = fsum / cfg.replicates;
      out.mean_power = psum / cfg.replicates;
      if (cfg.replicates > 1) {
        double fvar = 0.0, pvar = 0.0;
        for (int rep = 0; rep < cfg.replicates; ++rep) {
          fvar += (fdp[cell][rep] - out.mean_fdr) * (fdp[cell][rep] - out.mean_fdr);
          pvar += (power[cell][rep] - out.mean_power) * (power[cell][rep] - out.mean_power);
        }
        out.se_fdr = std::sqrt(fvar / (cfg.replicates - 1)) / std::sqrt(cfg.replicates);
        out.se_power = std::sqrt(pvar / (cfg.replicates - 1)) / std::sqrt(cfg.replicates);
      }
      cells.push_back(out);
    }
  }
  return cells;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
  std::ofstream out(path);
  if (!out) throw DataError("write_sweep_csv: cannot open " + path);
  out << "c,alpha,mean_fdr,se_fdr,mean_power,se_power,replicates\n";
  char buf[40];
  auto put = [&](double v, char sep) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    out << buf << sep;
  };
  for (const auto& cell : cells) {
    put(cell.c, ',');
    put(cell.alpha, ',');
    put(cell.mean_fdr, ',');
    put(cell.se_fdr, ',');
    put(cell.mean_power, ',');
    put(cell.se_power, ',');
    out << cell.replicates << "\n";
  }
}

inline void write_calibration_csv(const std::string& path, const std::vector<CalRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("write_calibration_csv: cannot open " + path);
  out << "patient_id,kappa_pred,kappa_true\n";
  char a[40], b[40];
  for (const auto& r : records) {
    std::snprintf(a, sizeof(a), "%.9g", r.kappa_pred);
    std::snprintf(b, sizeof(b), "%.9g", r.kappa_true);
    out << r.id << "," << a << "," << b << "\n";
  }
}

inline std::vector<CalRecord> read_calibration_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_calibration_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "patient_id,kappa_pred,kappa_true")
    throw ParseError("read_calibration_csv: " + path + " has an unexpected header");
  std::vector<CalRecord> records;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw ParseError("read_calibration_csv: " + path + " line " + std::to_string(line_no) +
                       ": expected 3 columns");
    CalRecord r;
    r.id = line.substr(0, c1);
    try {
      r.kappa_pred = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      r.kappa_true = std::stod(line.substr(c2 + 1));
    } catch (const std::exception&) {
      throw ParseError("read_calibration_csv: " + path + " line " + std::to_string(line_no) +
                       ": malformed number");
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace safer
