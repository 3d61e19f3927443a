#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "safer/autodiff.hpp"
#include "safer/checkpoint.hpp"
#include "safer/conformal.hpp"
#include "safer/matrix.hpp"
#include "safer/nn.hpp"
#include "safer/synthgen.hpp"

namespace safer {

// Single-gate recurrent death model. Inputs are per-step feature rows
// [structured_t (+) onehot(treatment_t)] for the observed windows, then one
// extra step that re-uses the last structured row with the decision-window
// treatment. The final hidden state feeds a scalar death logit, so the
// decision treatment interacts with the whole trajectory through the
// recurrence rather than through an additive head.
struct OutcomeModel {
  int d_struct = 0;
  int n_classes = 0;
  int d_hidden = 0;
  bool trained = false;

  Matrix w_update, u_update, b_update;  // gate z_t
  Matrix w_cand, u_cand, b_cand;        // candidate g_t
  Matrix w_out, b_out;                  // death logit head

  static OutcomeModel init(int d_struct, int n_classes, int d_hidden, uint64_t seed) {
    if (d_struct < 1 || n_classes < 2 || d_hidden < 1)
      throw ConfigError("outcome model: invalid dimensions");
    OutcomeModel m;
    m.d_struct = d_struct;
    m.n_classes = n_classes;
    m.d_hidden = d_hidden;
    const int d_in = d_struct + n_classes;
    std::mt19937_64 rng(mix_seed(seed, 0x0CAFE));
    m.w_update = gaussian_init(d_in, d_hidden, 1.0 / std::sqrt(d_in), rng);
    m.u_update = gaussian_init(d_hidden, d_hidden, 1.0 / std::sqrt(d_hidden), rng);
    m.b_update = Matrix::zeros(1, d_hidden);
    m.w_cand = gaussian_init(d_in, d_hidden, 1.0 / std::sqrt(d_in), rng);
    m.u_cand = gaussian_init(d_hidden, d_hidden, 1.0 / std::sqrt(d_hidden), rng);
    m.b_cand = Matrix::zeros(1, d_hidden);
    m.w_out = gaussian_init(d_hidden, 1, 1.0 / std::sqrt(d_hidden), rng);
    m.b_out = Matrix::zeros(1, 1);
    return m;
  }

  std::vector<ParamRef> refs() {
    return {{"outcome_w_update", &w_update}, {"outcome_u_update", &u_update},
            {"outcome_b_update", &b_update}, {"outcome_w_cand", &w_cand},
            {"outcome_u_cand", &u_cand},     {"outcome_b_cand", &b_cand},
            {"outcome_w_out", &w_out},       {"outcome_b_out", &b_out}};
  }

  std::vector<NamedTensor> tensors() const {
    return {{"outcome_w_update", w_update}, {"outcome_u_update", u_update},
            {"outcome_b_update", b_update}, {"outcome_w_cand", w_cand},
            {"outcome_u_cand", u_cand},     {"outcome_b_cand", b_cand},
            {"outcome_w_out", w_out},       {"outcome_b_out", b_out}};
  }

  void save(const std::string& path) const { write_checkpoint(path, tensors()); }

  static OutcomeModel load(const std::string& path, int d_struct, int n_classes, int d_hidden) {
    OutcomeModel m = init(d_struct, n_classes, d_hidden, 0);
    auto r = m.refs();
    load_into(read_checkpoint(path), r);
    m.trained = true;
    return m;
  }
};

namespace outcome_detail {

// Input rows for one patient, with the treatment sequence under evaluation.
// steps.size() == T + 1; the last row holds the decision-window treatment.
inline std::vector<std::vector<double>> input_rows(const OutcomeModel& m, const PatientRecord& rec,
                                                   const std::vector<int>& treatments,
                                                   int next_treatment) {
  const int t_len = rec.structured.rows();
  if (static_cast<int>(treatments.size()) != t_len)
    throw ShapeError("outcome model: treatment sequence length mismatch");
  if (rec.structured.cols() != m.d_struct)
    throw ShapeError("outcome model: structured width " + std::to_string(rec.structured.cols()) +
                     " vs " + std::to_string(m.d_struct));
  const int d_in = m.d_struct + m.n_classes;
  std::vector<std::vector<double>> rows(t_len + 1, std::vector<double>(d_in, 0.0));
  for (int t = 0; t <= t_len; ++t) {
    const int src = std::min(t, t_len - 1);
    for (int j = 0; j < m.d_struct; ++j) rows[t][j] = rec.structured(src, j);
    const int label = (t < t_len) ? treatments[t] : next_treatment;
    if (label < 0 || label >= m.n_classes)
      throw IndexError("outcome model: treatment label " + std::to_string(label) +
                       " outside [0, " + std::to_string(m.n_classes) + ")");
    rows[t][m.d_struct + label] = 1.0;
  }
  return rows;
}

inline double forward_logit(const OutcomeModel& m, const std::vector<std::vector<double>>& rows) {
  std::vector<double> h(m.d_hidden, 0.0), z(m.d_hidden), g(m.d_hidden);
  for (const auto& x : rows) {
    for (int j = 0; j < m.d_hidden; ++j) {
      double az = m.b_update(0, j), ag = m.b_cand(0, j);
      for (size_t i = 0; i < x.size(); ++i) {
        if (x[i] == 0.0) continue;
        az += x[i] * m.w_update(static_cast<int>(i), j);
        ag += x[i] * m.w_cand(static_cast<int>(i), j);
      }
      for (int i = 0; i < m.d_hidden; ++i) {
        az += h[i] * m.u_update(i, j);
        ag += h[i] * m.u_cand(i, j);
      }
      z[j] = Tape::stable_sigmoid(az);
      g[j] = std::tanh(ag);
    }
    for (int j = 0; j < m.d_hidden; ++j) h[j] = (1.0 - z[j]) * h[j] + z[j] * g[j];
  }
  double logit = m.b_out(0, 0);
  for (int j = 0; j < m.d_hidden; ++j) logit += h[j] * m.w_out(j, 0);
  return logit;
}

// Tape version of the same recurrence, for training.
inline VarId forward_logit_tape(Tape& tape, const OutcomeModel& m,
                                const std::vector<std::vector<double>>& rows, VarId w_update,
                                VarId u_update, VarId b_update, VarId w_cand, VarId u_cand,
                                VarId b_cand, VarId w_out, VarId b_out) {
  VarId h = tape.constant(Matrix::zeros(1, m.d_hidden));
  for (const auto& x : rows) {
    const VarId xv = tape.constant(Matrix::row_vector(x));
    const VarId z = tape.sigmoid_op(
        tape.add(tape.add(tape.matmul(xv, w_update), tape.matmul(h, u_update)), b_update));
    const VarId g = tape.tanh_op(
        tape.add(tape.add(tape.matmul(xv, w_cand), tape.matmul(h, u_cand)), b_cand));
    h = tape.add(tape.sub(h, tape.hadamard(z, h)), tape.hadamard(z, g));
  }
  return tape.add(tape.matmul(h, w_out), b_out);
}

}  // namespace outcome_detail

inline double predict_death(const OutcomeModel& model, const PatientRecord& rec,
                            int next_treatment = -1) {
  if (!model.trained) throw StateError("outcome model used before training");
  const int next = next_treatment < 0 ? rec.next_treatment : next_treatment;
  return Tape::stable_sigmoid(
      outcome_detail::forward_logit(model, outcome_detail::input_rows(model, rec, rec.treatments, next)));
}

struct OutcomeHyper {
  int epochs = 60;
  double lr = 3e-3;
  int batch_size = 32;
  uint64_t seed = 1;
};

inline std::vector<EpochLoss> train_outcome_model(OutcomeModel& model,
                                                  const std::vector<PatientRecord>& records,
                                                  const OutcomeHyper& hyper) {
  if (records.empty()) throw DataError("outcome training: empty cohort");
  if (hyper.epochs < 0 || hyper.lr <= 0.0 || hyper.batch_size < 1)
    throw ConfigError("outcome training: invalid hyperparameters");
  bool any_death = false, any_survival = false;
  for (const auto& r : records) (r.survived ? any_survival : any_death) = true;
  if (!any_death || !any_survival)
    throw DataError("outcome training: cohort has a single outcome class");

  auto refs = model.refs();
  Adam opt(hyper.lr);
  std::vector<int> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLoss> log;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(hyper.seed, 0xD0C5, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const size_t stop = std::min(order.size(), start + hyper.batch_size);
      Tape tape;
      std::vector<VarId> leaves;
      leaves.reserve(refs.size());
      for (auto& p : refs) leaves.push_back(tape.leaf(*p.value));
      VarId total = -1;
      for (size_t i = start; i < stop; ++i) {
        const auto& rec = records[order[i]];
        const VarId logit = outcome_detail::forward_logit_tape(
            tape, model, outcome_detail::input_rows(model, rec, rec.treatments, rec.next_treatment),
            leaves[0], leaves[1], leaves[2], leaves[3], leaves[4], leaves[5], leaves[6], leaves[7]);
        const VarId loss = tape.bce_logit(logit, rec.survived ? 0.0 : 1.0);
        total = (total < 0) ? loss : tape.add(total, loss);
      }
      total = tape.scale(total, 1.0 / static_cast<double>(stop - start));
      tape.backward(total);
      const double batch_loss = tape.value(total)(0, 0);
      if (!std::isfinite(batch_loss))
        throw NumericError("outcome training: non-finite loss at epoch " + std::to_string(epoch));
      epoch_loss += batch_loss;
      ++batches;
      std::vector<Matrix> grads;
      grads.reserve(leaves.size());
      for (VarId v : leaves) grads.push_back(tape.grad(v));
      opt.step(refs, grads);
    }
    log.push_back({epoch, epoch_loss / std::max(1, batches)});
  }
  model.trained = true;
  return log;
}

struct CounterfactualOptions {
  int n_boot = 1000;
  uint64_t seed = 1;
  bool stepwise = false;  // swap every observed window, not just the decision one
};

struct CounterfactualResult {
  double reduction = 0.0;  // observed death rate minus mean counterfactual estimate
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double observed_rate = 0.0;
  double mean_counterfactual = 0.0;
  std::string positivity_warning;  // empty when support looks adequate
};

// Overlap screen for the decision window: every recommended treatment must be
// observed somewhere in the cohort, and the recommended distribution must not
// sit almost entirely off the observed one.
inline std::string positivity_warning(const std::vector<int>& observed,
                                      const std::vector<int>& recommended, int n_classes) {
  if (observed.empty() || observed.size() != recommended.size())
    throw ShapeError("positivity check: observed and recommended sizes differ");
  std::vector<double> p_obs(n_classes, 0.0), p_rec(n_classes, 0.0);
  for (int y : observed) p_obs.at(y) += 1.0 / observed.size();
  for (int y : recommended) p_rec.at(y) += 1.0 / recommended.size();
  for (int k = 0; k < n_classes; ++k)
    if (p_rec[k] > 0.0 && p_obs[k] == 0.0)
      return "recommended treatment " + std::to_string(k) +
             " is never observed at the decision window";
  double tv = 0.0;
  for (int k = 0; k < n_classes; ++k) tv += std::fabs(p_rec[k] - p_obs[k]);
  tv *= 0.5;
  if (tv > 0.95) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", tv);
    return std::string("recommended and observed treatment distributions barely overlap (TV = ") +
           buf + ")";
  }
  return "";
}

// Counterfactual mortality contrast: the observed death rate minus the mean
// model-estimated death probability had the recommended treatments been given.
// recommended_next supplies the decision-window swap; recommended_steps (one
// row per patient, T entries) is consulted only in stepwise mode.
inline CounterfactualResult counterfactual_mortality_reduction(
    const OutcomeModel& model, const std::vector<PatientRecord>& records,
    const std::vector<int>& recommended_next,
    const CounterfactualOptions& options = CounterfactualOptions{},
    const std::vector<std::vector<int>>& recommended_steps = {}) {
  if (!model.trained) throw StateError("outcome model used before training");
  if (records.empty()) throw DataError("counterfactual evaluation: empty cohort");
  if (recommended_next.size() != records.size())
    throw ShapeError("counterfactual evaluation: one recommendation per patient required");
  if (options.stepwise && recommended_steps.size() != records.size())
    throw ShapeError("counterfactual evaluation: stepwise mode needs per-window recommendations");

  const size_t n = records.size();
  std::vector<double> died(n), p_cf(n);
  std::vector<int> observed_next(n);
  for (size_t i = 0; i < n; ++i) {
    const auto& rec = records[i];
    observed_next[i] = rec.next_treatment;
    died[i] = rec.survived ? 0.0 : 1.0;
    const std::vector<int>& steps =
        options.stepwise ? recommended_steps[i] : rec.treatments;
    p_cf[i] = Tape::stable_sigmoid(outcome_detail::forward_logit(
        model, outcome_detail::input_rows(model, rec, steps, recommended_next[i])));
  }

  CounterfactualResult result;
  result.positivity_warning =
      positivity_warning(observed_next, recommended_next, model.n_classes);
  for (size_t i = 0; i < n; ++i) {
    result.observed_rate += died[i] / n;
    result.mean_counterfactual += p_cf[i] / n;
  }
  result.reduction = result.observed_rate - result.mean_counterfactual;

  if (options.n_boot < 1) throw ConfigError("counterfactual evaluation: n_boot must be >= 1");
  std::mt19937_64 rng(mix_seed(options.seed, 0xB007));
  std::uniform_int_distribution<size_t> pick(0, n - 1);
  std::vector<double> boot(options.n_boot);
  for (int b = 0; b < options.n_boot; ++b) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const size_t j = pick(rng);
      s += died[j] - p_cf[j];
    }
    boot[b] = s / n;
  }
  result.ci_lo = percentile(boot, 0.025);
  result.ci_hi = percentile(boot, 0.975);
  return result;
}

}  // namespace safer
