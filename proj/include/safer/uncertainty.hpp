#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "safer/autodiff.hpp"
#include "safer/checkpoint.hpp"
#include "safer/error.hpp"
#include "safer/matrix.hpp"
#include "safer/nn.hpp"
#include "safer/synthgen.hpp"
#include "safer/teacher.hpp"

namespace safer {

// A patient as the uncertainty stack sees it: the frozen fused embedding, the
// decision-window label and the outcome flag.
struct EmbeddedPatient {
  std::string id;
  Matrix h;  // 1 x 3*d_k
  int label = 0;
  bool survived = true;
};

inline std::vector<EmbeddedPatient> embed_cohort(FusionParams& teacher,
                                                 const std::vector<PatientRecord>& records) {
  std::vector<EmbeddedPatient> out;
  out.reserve(records.size());
  for (const auto& rec : records)
    out.push_back({rec.id, encode_patient(teacher, rec), rec.next_treatment, rec.survived});
  return out;
}

// Classifier head applied to an explicit fused vector, outside any tape.
inline std::vector<double> classifier_logits(const FusionParams& p, const Matrix& h) {
  Matrix hidden = add(matmul(h, p.head_w1), p.head_b1);
  for (size_t i = 0; i < hidden.size(); ++i) hidden.data()[i] = std::tanh(hidden.data()[i]);
  return add(matmul(hidden, p.head_w2), p.head_b2).row_as_vector(0);
}

// Student: one tanh hidden layer from the fused space down to d_hidden, then a
// linear map to the treatment classes.
struct StudentParams {
  int d_in = 0, d_hidden = 0, n_classes = 0;
  Matrix w1, b1, w2, b2;

  static StudentParams init(int d_in, int d_hidden, int n_classes, uint64_t seed) {
    StudentParams p;
    p.d_in = d_in;
    p.d_hidden = d_hidden;
    p.n_classes = n_classes;
    std::mt19937_64 rng(mix_seed(seed, 0x57D));
    p.w1 = gaussian_init(d_in, d_hidden, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
    p.b1 = Matrix(1, d_hidden);
    p.w2 = gaussian_init(d_hidden, n_classes, 1.0 / std::sqrt(static_cast<double>(d_hidden)), rng);
    p.b2 = Matrix(1, n_classes);
    return p;
  }

  std::vector<ParamRef> refs() {
    return {{"student_w1", &w1}, {"student_b1", &b1}, {"student_w2", &w2}, {"student_b2", &b2}};
  }

  std::vector<NamedTensor> tensors() {
    std::vector<NamedTensor> out;
    for (const auto& r : refs()) out.push_back({r.name, *r.value});
    return out;
  }

  void save(const std::string& path) { write_checkpoint(path, tensors()); }

  static StudentParams load(const std::string& path, int d_in, int d_hidden, int n_classes) {
    StudentParams p = init(d_in, d_hidden, n_classes, 0);
    load_into(read_checkpoint(path), p.refs());
    return p;
  }
};

inline std::vector<double> student_logits(const StudentParams& p, const Matrix& h) {
  Matrix hidden = add(matmul(h, p.w1), p.b1);
  for (size_t i = 0; i < hidden.size(); ++i) hidden.data()[i] = std::tanh(hidden.data()[i]);
  return add(matmul(hidden, p.w2), p.b2).row_as_vector(0);
}

struct StudentHyper {
  int epochs = 200;
  double lr = 3e-3;
  int batch_size = 32;
  double weight_decay = 1e-4;
  uint64_t seed = 1;
};

// Trains the student on survivor embeddings only; a deceased patient in the
// input is a contract violation, not something to silently filter.
inline std::vector<EpochLoss> train_student(StudentParams& params,
                                            const std::vector<EmbeddedPatient>& patients,
                                            const StudentHyper& hyper) {
  if (patients.empty()) throw DataError("train_student: empty input");
  for (const auto& p : patients)
    if (!p.survived)
      throw DataError("train_student: deceased patient " + p.id + " in training input");
  if (hyper.weight_decay < 0.0) throw ConfigError("train_student: negative weight decay");
  if (hyper.epochs < 0 || hyper.batch_size < 1 || hyper.lr <= 0.0)
    throw ConfigError("train_student: invalid hyperparameters");

  const int n = static_cast<int>(patients.size());
  Adam opt(hyper.lr);
  auto refs = params.refs();
  std::vector<EpochLoss> log;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(hyper.seed, 0x57D2, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (int start = 0; start < n; start += hyper.batch_size) {
      const int end = std::min(n, start + hyper.batch_size);
      Tape tape;
      std::vector<VarId> leaves;
      for (const auto& r : refs) leaves.push_back(tape.leaf(*r.value));
      VarId total = -1;
      for (int b = start; b < end; ++b) {
        const EmbeddedPatient& p = patients[order[b]];
        VarId hidden = tape.tanh_op(
            tape.add_rowvec(tape.matmul(tape.constant(p.h), leaves[0]), leaves[1]));
        VarId logits = tape.add_rowvec(tape.matmul(hidden, leaves[2]), leaves[3]);
        VarId ce = tape.cross_entropy_logits(logits, p.label);
        total = (total < 0) ? ce : tape.add(total, ce);
      }
      VarId loss = tape.scale(total, 1.0 / (end - start));
      if (hyper.weight_decay > 0.0) {
        VarId penalty = tape.add(tape.sum_squares(leaves[0]), tape.sum_squares(leaves[2]));
        loss = tape.add(loss, tape.scale(penalty, hyper.weight_decay));
      }
      const double loss_value = tape.value(loss)(0, 0);
      if (!std::isfinite(loss_value))
        throw NumericError("train_student: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += loss_value * (end - start);
      tape.backward(loss);
      std::vector<Matrix> grads;
      for (VarId leaf : leaves) grads.push_back(tape.grad(leaf));
      opt.step(refs, grads);
    }
    log.push_back({epoch, loss_sum / n});
  }
  return log;
}

// Weight decay keeps both layer norms finite; their product is an empirical
// Lipschitz bound for the (1-Lipschitz tanh) student map.
inline double student_lipschitz_bound(const StudentParams& p) {
  return spectral_norm(p.w1) * spectral_norm(p.w2);
}

// KL(p || q) on explicit distributions. Both must be strictly positive and
// normalized; a zero in the student distribution is a numeric error because
// the divergence is unbounded there.
inline double kl_uncertainty(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size())
    throw ShapeError("kl_uncertainty: " + std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()) + " classes");
  double ps = 0.0, qs = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (q[i] <= 0.0) throw NumericError("kl_uncertainty: zero entry in student distribution");
    if (p[i] <= 0.0) throw NumericError("kl_uncertainty: zero entry in teacher distribution");
    ps += p[i];
    qs += q[i];
  }
  if (std::fabs(ps - 1.0) > 1e-6 || std::fabs(qs - 1.0) > 1e-6)
    throw NumericError("kl_uncertainty: inputs are not normalized distributions");
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

// Teacher-student divergence on one patient, computed in log space so extreme
// logits cannot produce zero probabilities. Nonnegative by construction.
inline double kappa_divergence(FusionParams& teacher, const StudentParams& student,
                               const PatientRecord& rec, int prefix_len = -1) {
  const Matrix h = encode_patient(teacher, rec, prefix_len);
  const Matrix zt = Matrix::row_vector(classifier_logits(teacher, h));
  const Matrix zs = Matrix::row_vector(student_logits(student, h));
  const Matrix lp = Tape::log_softmax_row(zt);
  const Matrix lq = Tape::log_softmax_row(zs);
  double kl = 0.0;
  for (int j = 0; j < lp.cols(); ++j) kl += std::exp(lp(0, j)) * (lp(0, j) - lq(0, j));
  return std::max(kl, 0.0);
}

struct NormStats {
  double min = 0.0;
  double max = 0.0;
};

// Min-max normalization over a reference set. A degenerate set (all values
// equal) maps everything to zero.
inline NormStats norm_stats(const std::vector<double>& kappas) {
  if (kappas.empty()) throw DataError("normalize_uncertainty: empty input");
  NormStats s{kappas[0], kappas[0]};
  for (double k : kappas) {
    s.min = std::min(s.min, k);
    s.max = std::max(s.max, k);
  }
  return s;
}

inline double apply_normalization(const NormStats& s, double kappa) {
  if (s.max <= s.min) return 0.0;
  return std::clamp((kappa - s.min) / (s.max - s.min), 0.0, 1.0);
}

inline std::vector<double> normalize_uncertainty(const std::vector<double>& kappas) {
  const NormStats s = norm_stats(kappas);
  std::vector<double> out(kappas.size());
  for (size_t i = 0; i < kappas.size(); ++i) out[i] = apply_normalization(s, kappas[i]);
  return out;
}

struct UncertaintyRecord {
  std::string id;
  bool survived = true;
  double kappa = 0.0;
  double kappa_hat = 0.0;
};

inline std::vector<UncertaintyRecord> uncertainty_table(FusionParams& teacher,
                                                        const StudentParams& student,
                                                        const std::vector<PatientRecord>& records) {
  std::vector<double> kappas;
  kappas.reserve(records.size());
  for (const auto& rec : records) kappas.push_back(kappa_divergence(teacher, student, rec));
  const std::vector<double> hats = normalize_uncertainty(kappas);
  std::vector<UncertaintyRecord> out(records.size());
  for (size_t i = 0; i < records.size(); ++i)
    out[i] = {records[i].id, records[i].survived, kappas[i], hats[i]};
  return out;
}

inline void write_uncertainty_csv(const std::string& path,
                                  const std::vector<UncertaintyRecord>& table) {
  std::ofstream out(path);
  if (!out) throw DataError("write_uncertainty_csv: cannot open " + path);
  out << "patient_id,survived,kappa,kappa_hat\n";
  char a[40], b[40];
  for (const auto& r : table) {
    std::snprintf(a, sizeof(a), "%.9g", r.kappa);
    std::snprintf(b, sizeof(b), "%.9g", r.kappa_hat);
    out << r.id << "," << (r.survived ? 1 : 0) << "," << a << "," << b << "\n";
  }
}

struct FinetuneHyper {
  double gamma = 0.1;
  int rounds = 1;
  int epochs_per_round = 1;
  double lr = 1e-3;
  int batch_size = 32;
  uint64_t seed = 1;
};

// One minibatch of the risk-aware objective: per patient
// (1 - kappa_hat_i) * CE_i + gamma * kappa_i^2, averaged over the batch.
// kappa_hat weights enter as fixed scalars; the squared divergence is
// evaluated through the live graph (teacher logits and the fused embedding
// both flow into it, with the student as constants), otherwise gamma could
// not influence the optimum.
inline VarId risk_batch_loss(Tape& tape, TeacherGraph& graph, const StudentParams& student,
                             const std::vector<PatientRecord>& records,
                             const std::vector<int>& batch, const std::vector<double>& weights,
                             double gamma) {
  if (batch.empty()) throw DataError("risk_batch_loss: empty batch");
  const VarId sw1 = tape.constant(student.w1);
  const VarId sb1 = tape.constant(student.b1);
  const VarId sw2 = tape.constant(student.w2);
  const VarId sb2 = tape.constant(student.b2);
  VarId total = -1;
  for (int i : batch) {
    const PatientRecord& rec = records.at(i);
    VarId h = graph.embed(rec, rec.structured.rows());
    VarId tlogits = graph.logits(h);
    VarId contribution = tape.scale(tape.cross_entropy_logits(tlogits, rec.next_treatment),
                                    1.0 - weights.at(i));
    if (gamma > 0.0) {
      VarId shidden = tape.tanh_op(tape.add_rowvec(tape.matmul(h, sw1), sb1));
      VarId slogits = tape.add_rowvec(tape.matmul(shidden, sw2), sb2);
      VarId kl = tape.kl_logits(tlogits, slogits);
      contribution = tape.add(contribution, tape.scale(tape.hadamard(kl, kl), gamma));
    }
    total = (total < 0) ? contribution : tape.add(total, contribution);
  }
  return tape.scale(total, 1.0 / static_cast<double>(batch.size()));
}

// Risk-aware fine-tuning of the teacher against a frozen student. The
// (1 - kappa_hat) weights are snapshots refreshed once per round. Returns one
// entry per epoch across rounds.
inline std::vector<EpochLoss> risk_aware_finetune(FusionParams& teacher,
                                                  const StudentParams& student,
                                                  const std::vector<PatientRecord>& records,
                                                  const FinetuneHyper& hyper) {
  if (hyper.gamma < 0.0) throw ConfigError("risk_aware_finetune: gamma must be >= 0");
  if (records.empty()) throw DataError("risk_aware_finetune: empty cohort");
  if (hyper.rounds < 0 || hyper.epochs_per_round < 1 || hyper.batch_size < 1 || hyper.lr <= 0.0)
    throw ConfigError("risk_aware_finetune: invalid hyperparameters");

  const int n = static_cast<int>(records.size());
  Adam opt(hyper.lr);
  auto refs = teacher.refs();
  std::vector<EpochLoss> log;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  int global_epoch = 0;

  for (int round = 0; round < hyper.rounds; ++round) {
    std::vector<double> kappas;
    kappas.reserve(n);
    for (const auto& rec : records) kappas.push_back(kappa_divergence(teacher, student, rec));
    const std::vector<double> weights = normalize_uncertainty(kappas);

    for (int e = 0; e < hyper.epochs_per_round; ++e, ++global_epoch) {
      std::mt19937_64 rng(mix_seed(hyper.seed, 0xF17E, static_cast<uint64_t>(global_epoch)));
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0.0;
      for (int start = 0; start < n; start += hyper.batch_size) {
        const int end = std::min(n, start + hyper.batch_size);
        Tape tape;
        TeacherGraph graph(tape, teacher);
        const std::vector<int> batch(order.begin() + start, order.begin() + end);
        VarId loss = risk_batch_loss(tape, graph, student, records, batch, weights, hyper.gamma);
        const double loss_value = tape.value(loss)(0, 0);
        if (!std::isfinite(loss_value))
          throw NumericError("risk_aware_finetune: non-finite loss at epoch " +
                             std::to_string(global_epoch));
        loss_sum += loss_value * (end - start);
        tape.backward(loss);
        std::vector<Matrix> grads;
        for (VarId leaf : graph.leaves()) grads.push_back(tape.grad(leaf));
        opt.step(refs, grads);
      }
      log.push_back({global_epoch, loss_sum / n});
    }
  }
  return log;
}

struct GapResult {
  double gap = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  int n_deceased = 0;
  int n_survivors = 0;
};

// Mean divergence gap between outcome groups with a percentile bootstrap CI
// (resampling within each group, sizes preserved).
inline GapResult uncertainty_gap(FusionParams& teacher, const StudentParams& student,
                                 const std::vector<PatientRecord>& records, int n_boot = 1000,
                                 uint64_t seed = 1) {
  std::vector<double> surv, dec;
  for (const auto& rec : records) {
    const double k = kappa_divergence(teacher, student, rec);
    (rec.survived ? surv : dec).push_back(k);
  }
  if (surv.empty() || dec.empty())
    throw DataError("uncertainty_gap: cohort has a single outcome class");

  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / v.size();
  };
  GapResult result;
  result.gap = mean(dec) - mean(surv);
  result.n_deceased = static_cast<int>(dec.size());
  result.n_survivors = static_cast<int>(surv.size());

  std::mt19937_64 rng(mix_seed(seed, 0x6A9));
  std::uniform_int_distribution<size_t> pick_s(0, surv.size() - 1);
  std::uniform_int_distribution<size_t> pick_d(0, dec.size() - 1);
  std::vector<double> gaps(n_boot);
  for (int b = 0; b < n_boot; ++b) {
    double sd = 0.0, ss = 0.0;
    for (size_t i = 0; i < dec.size(); ++i) sd += dec[pick_d(rng)];
    for (size_t i = 0; i < surv.size(); ++i) ss += surv[pick_s(rng)];
    gaps[b] = sd / dec.size() - ss / surv.size();
  }
  std::sort(gaps.begin(), gaps.end());
  const auto pct = [&gaps](double q) {
    const double pos = q * (gaps.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, gaps.size() - 1);
    return gaps[lo] + (pos - lo) * (gaps[hi] - gaps[lo]);
  };
  result.ci_lo = pct(0.025);
  result.ci_hi = pct(0.975);
  return result;
}

// Divergence at each prefix window. Window lengths are 1-based and must not
// exceed the record length.
inline std::vector<double> uncertainty_trajectory(FusionParams& teacher,
                                                  const StudentParams& student,
                                                  const PatientRecord& rec,
                                                  const std::vector<int>& windows) {
  if (windows.empty()) throw ConfigError("uncertainty_trajectory: empty window list");
  std::vector<double> out;
  out.reserve(windows.size());
  for (int w : windows) {
    if (w < 1 || w > rec.structured.rows())
      throw ConfigError("uncertainty_trajectory: window " + std::to_string(w) + " outside [1, " +
                        std::to_string(rec.structured.rows()) + "]");
    out.push_back(kappa_divergence(teacher, student, rec, w));
  }
  return out;
}

}  // namespace safer
