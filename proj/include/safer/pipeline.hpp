#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "safer/config.hpp"
#include "safer/conformal.hpp"
#include "safer/metrics.hpp"
#include "safer/outcomes.hpp"
#include "safer/synthgen.hpp"
#include "safer/teacher.hpp"
#include "safer/uncertainty.hpp"

namespace safer {

// Stage-seed tags. Every stage derives its own stream from the master seed,
// so a single seed pins the entire run.
namespace stage {
inline constexpr uint64_t kGen = 1;
inline constexpr uint64_t kSplit = 2;
inline constexpr uint64_t kTeacherInit = 3;
inline constexpr uint64_t kTeacherTrain = 4;
inline constexpr uint64_t kStudentInit = 5;
inline constexpr uint64_t kStudentTrain = 6;
inline constexpr uint64_t kFinetune = 7;
inline constexpr uint64_t kOutcomeInit = 8;
inline constexpr uint64_t kOutcomeTrain = 9;
inline constexpr uint64_t kSweep = 10;
inline constexpr uint64_t kSelectTie = 11;
inline constexpr uint64_t kGap = 12;
}  // namespace stage

struct PipelineSettings {
  CohortConfig cohort;
  TeacherConfig teacher;
  TrainHyper teacher_hyper;
  StudentHyper student_hyper;
  FinetuneHyper finetune_hyper;
  OutcomeHyper outcome_hyper;
  int student_hidden = 0;  // 0: use teacher d_k
  double split_train = 0.6;
  double split_cal = 0.2;
  double split_test = 0.2;
  double ridge_lambda = 1.0;
  double clip_percentile = 0.999;
  double select_c = 0.2;
  double select_alpha = 0.1;
  std::vector<double> sweep_cs{0.1, 0.2, 0.3, 0.4};
  std::vector<double> sweep_alphas;
  int sweep_replicates = 500;
  int threads = 1;
  int case_survivors = 10;
  int case_deceased = 10;
  uint64_t seed = 1;
};

inline std::vector<double> parse_grid(const std::string& text) {
  if (text.empty()) throw ConfigError("grid: empty specification");
  std::vector<double> out;
  const size_t c1 = text.find(':');
  if (c1 != std::string::npos) {
    const size_t c2 = text.find(':', c1 + 1);
    if (c2 == std::string::npos) throw ConfigError("grid: expected start:stop:step in " + text);
    double start, stop, step;
    try {
      start = std::stod(text.substr(0, c1));
      stop = std::stod(text.substr(c1 + 1, c2 - c1 - 1));
      step = std::stod(text.substr(c2 + 1));
    } catch (const std::exception&) {
      throw ConfigError("grid: malformed number in " + text);
    }
    if (step <= 0.0) throw ConfigError("grid: step must be > 0 in " + text);
    for (double v = start; v <= stop + 1e-12; v += step) out.push_back(v);
    return out;
  }
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("grid: malformed number in " + text);
    }
  }
  if (out.empty()) throw ConfigError("grid: empty specification");
  return out;
}

inline std::vector<double> default_alpha_grid() {
  return parse_grid("0.05:0.95:0.05");
}

inline PipelineSettings settings_from_config(const Config& cfg) {
  PipelineSettings s;
  s.cohort.n_survivors = cfg.get_int("cohort.n_survivors", s.cohort.n_survivors);
  s.cohort.n_deceased = cfg.get_int("cohort.n_deceased", s.cohort.n_deceased);
  s.cohort.T = cfg.get_int("cohort.T", s.cohort.T);
  s.cohort.d_struct = cfg.get_int("cohort.d_struct", s.cohort.d_struct);
  s.cohort.d_note = cfg.get_int("cohort.d_note", s.cohort.d_note);
  s.cohort.d_static = cfg.get_int("cohort.d_static", s.cohort.d_static);
  s.cohort.n_classes = cfg.get_int("cohort.n_classes", s.cohort.n_classes);
  s.cohort.latent_shift = cfg.get_double("cohort.latent_shift", s.cohort.latent_shift);
  s.cohort.deceased_label_noise =
      cfg.get_double("cohort.deceased_label_noise", s.cohort.deceased_label_noise);
  s.cohort.treatment_effect = cfg.get_double("cohort.treatment_effect", s.cohort.treatment_effect);

  s.teacher.d_struct = s.cohort.d_struct;
  s.teacher.d_note = s.cohort.d_note;
  s.teacher.d_static = s.cohort.d_static;
  s.teacher.n_classes = s.cohort.n_classes;
  s.teacher.T = s.cohort.T;
  s.teacher.d_k = cfg.get_int("teacher.d_k", 128);
  s.teacher_hyper.epochs = cfg.get_int("teacher.epochs", s.teacher_hyper.epochs);
  s.teacher_hyper.lr = cfg.get_double("teacher.lr", s.teacher_hyper.lr);
  s.teacher_hyper.batch_size = cfg.get_int("teacher.batch_size", s.teacher_hyper.batch_size);

  s.student_hidden = cfg.get_int("student.d_hidden", 0);
  s.student_hyper.epochs = cfg.get_int("student.epochs", s.student_hyper.epochs);
  s.student_hyper.lr = cfg.get_double("student.lr", s.student_hyper.lr);
  s.student_hyper.batch_size = cfg.get_int("student.batch_size", s.student_hyper.batch_size);
  s.student_hyper.weight_decay =
      cfg.get_double("student.weight_decay", s.student_hyper.weight_decay);

  s.finetune_hyper.gamma = cfg.get_double("finetune.gamma", s.finetune_hyper.gamma);
  s.finetune_hyper.rounds = cfg.get_int("finetune.rounds", s.finetune_hyper.rounds);
  s.finetune_hyper.epochs_per_round =
      cfg.get_int("finetune.epochs_per_round", s.finetune_hyper.epochs_per_round);
  s.finetune_hyper.lr = cfg.get_double("finetune.lr", s.finetune_hyper.lr);
  s.finetune_hyper.batch_size = cfg.get_int("finetune.batch_size", s.finetune_hyper.batch_size);

  s.outcome_hyper.epochs = cfg.get_int("outcome.epochs", s.outcome_hyper.epochs);
  s.outcome_hyper.lr = cfg.get_double("outcome.lr", s.outcome_hyper.lr);
  s.outcome_hyper.batch_size = cfg.get_int("outcome.batch_size", s.outcome_hyper.batch_size);

  s.split_train = cfg.get_double("split.train", s.split_train);
  s.split_cal = cfg.get_double("split.cal", s.split_cal);
  s.split_test = cfg.get_double("split.test", s.split_test);

  s.ridge_lambda = cfg.get_double("conformal.lambda", s.ridge_lambda);
  s.clip_percentile = cfg.get_double("conformal.clip_percentile", s.clip_percentile);
  s.select_c = cfg.get_double("conformal.c", s.select_c);
  s.select_alpha = cfg.get_double("conformal.alpha", s.select_alpha);
  s.sweep_cs = parse_grid(cfg.get_str("conformal.cs", "0.1,0.2,0.3,0.4"));
  s.sweep_alphas = parse_grid(cfg.get_str("conformal.alphas", "0.05:0.95:0.05"));
  s.sweep_replicates = cfg.get_int("conformal.replicates", s.sweep_replicates);
  s.threads = cfg.get_int("threads", s.threads);
  s.case_survivors = cfg.get_int("case_study.survivors", s.case_survivors);
  s.case_deceased = cfg.get_int("case_study.deceased", s.case_deceased);
  s.seed = cfg.get_u64("seed", s.seed);
  return s;
}

struct PipelineResult {
  std::string outdir;
  std::vector<std::string> artifacts;
  int n_train = 0, n_cal = 0, n_test = 0;
  double m_bound = 0.0;
  int n_selected = 0;
  GapResult gap;
  MetricsReport survivor_metrics;
  CounterfactualResult counterfactual;
};

namespace pipeline_detail {

inline int student_dim(const PipelineSettings& s) {
  return s.student_hidden > 0 ? s.student_hidden : s.teacher.d_k;
}

inline std::vector<int> teacher_recommendations(FusionParams& teacher,
                                                const std::vector<PatientRecord>& records) {
  std::vector<int> rec;
  rec.reserve(records.size());
  for (const auto& r : records) {
    const std::vector<double> p = predict_treatment(teacher, r);
    rec.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
  }
  return rec;
}

inline void write_case_study_csv(const std::string& path, FusionParams& teacher,
                                 const StudentParams& student,
                                 const std::vector<PatientRecord>& records, int n_survivors,
                                 int n_deceased, int t_len) {
  std::vector<const PatientRecord*> surv, dead;
  for (const auto& r : records) {
    if (r.survived && static_cast<int>(surv.size()) < n_survivors) surv.push_back(&r);
    if (!r.survived && static_cast<int>(dead.size()) < n_deceased) dead.push_back(&r);
  }
  if (surv.empty() || dead.empty())
    throw DataError("case study: need at least one patient of each outcome");
  std::vector<int> windows(t_len);
  std::iota(windows.begin(), windows.end(), 1);
  auto mean_curve = [&](const std::vector<const PatientRecord*>& group) {
    std::vector<double> mean(t_len, 0.0);
    for (const PatientRecord* r : group) {
      const std::vector<double> traj = uncertainty_trajectory(teacher, student, *r, windows);
      for (int w = 0; w < t_len; ++w) mean[w] += traj[w] / group.size();
    }
    return mean;
  };
  const std::vector<double> mean_surv = mean_curve(surv);
  const std::vector<double> mean_dead = mean_curve(dead);
  std::ofstream out(path);
  if (!out) throw DataError("case study: cannot open " + path);
  out << "window,mean_kappa_survivors,mean_kappa_deceased,n_survivors,n_deceased\n";
  char a[40], b[40];
  for (int w = 0; w < t_len; ++w) {
    std::snprintf(a, sizeof(a), "%.9g", mean_surv[w]);
    std::snprintf(b, sizeof(b), "%.9g", mean_dead[w]);
    out << windows[w] << "," << a << "," << b << "," << surv.size() << "," << dead.size() << "\n";
  }
}

inline void write_selection_csv(const std::string& path, const std::vector<std::string>& ids,
                                const std::vector<double>& preds,
                                const std::vector<double>& pvals, const BhResult& sel) {
  std::vector<char> mark(ids.size(), 0);
  for (int j : sel.selected) mark[j] = 1;
  std::ofstream out(path);
  if (!out) throw DataError("write_selection_csv: cannot open " + path);
  out << "patient_id,kappa_pred,p_value,selected\n";
  char a[40], b[40];
  for (size_t j = 0; j < ids.size(); ++j) {
    std::snprintf(a, sizeof(a), "%.9g", preds[j]);
    std::snprintf(b, sizeof(b), "%.9g", pvals[j]);
    out << ids[j] << "," << a << "," << b << "," << int(mark[j]) << "\n";
  }
}

inline void write_gap_csv(const std::string& path, const GapResult& gap) {
  std::ofstream out(path);
  if (!out) throw DataError("write_gap_csv: cannot open " + path);
  out << "gap,ci_lo,ci_hi,n_deceased,n_survivors\n";
  char a[40], b[40], c[40];
  std::snprintf(a, sizeof(a), "%.9g", gap.gap);
  std::snprintf(b, sizeof(b), "%.9g", gap.ci_lo);
  std::snprintf(c, sizeof(c), "%.9g", gap.ci_hi);
  out << a << "," << b << "," << c << "," << gap.n_deceased << "," << gap.n_survivors << "\n";
}

inline void write_outcome_csv(const std::string& path, const CounterfactualResult& r) {
  std::ofstream out(path);
  if (!out) throw DataError("write_outcome_csv: cannot open " + path);
  out << "reduction,ci_lo,ci_hi,observed_rate,mean_counterfactual,positivity_warning\n";
  char bufs[5][40];
  const double vals[5] = {r.reduction, r.ci_lo, r.ci_hi, r.observed_rate, r.mean_counterfactual};
  for (int i = 0; i < 5; ++i) std::snprintf(bufs[i], sizeof(bufs[i]), "%.9g", vals[i]);
  out << bufs[0] << "," << bufs[1] << "," << bufs[2] << "," << bufs[3] << "," << bufs[4] << ","
      << r.positivity_warning << "\n";
}

}  // namespace pipeline_detail

// Full deterministic run: generate, split, train, distill, fine-tune, score,
// calibrate, select, sweep, evaluate. Every artifact lands under outdir with
// a fixed name; a rerun with the same settings reproduces each byte.
inline PipelineResult run_pipeline(const PipelineSettings& settings, const std::string& outdir) {
  PipelineResult result;
  result.outdir = outdir;
  auto artifact = [&](const std::string& name) {
    result.artifacts.push_back(outdir + "/" + name);
    return result.artifacts.back();
  };

  CohortConfig gen_cfg = settings.cohort;
  gen_cfg.seed = mix_seed(settings.seed, stage::kGen);
  const Cohort cohort = generate_cohort(gen_cfg);
  write_cohort(artifact("cohort.jsonl"), cohort);

  const std::vector<Cohort> splits =
      split_cohort(cohort, {settings.split_train, settings.split_cal, settings.split_test},
                   mix_seed(settings.seed, stage::kSplit));
  write_cohort(artifact("train.jsonl"), splits[0]);
  write_cohort(artifact("cal.jsonl"), splits[1]);
  write_cohort(artifact("test.jsonl"), splits[2]);
  const std::vector<PatientRecord>& train = splits[0].records;
  const std::vector<PatientRecord>& cal = splits[1].records;
  const std::vector<PatientRecord>& test = splits[2].records;
  result.n_train = static_cast<int>(train.size());
  result.n_cal = static_cast<int>(cal.size());
  result.n_test = static_cast<int>(test.size());

  FusionParams teacher =
      FusionParams::init(settings.teacher, mix_seed(settings.seed, stage::kTeacherInit));
  TrainHyper teacher_hyper = settings.teacher_hyper;
  teacher_hyper.seed = mix_seed(settings.seed, stage::kTeacherTrain);
  write_training_log(artifact("teacher_train_log.csv"),
                     train_teacher(teacher, train, teacher_hyper));
  teacher.save(artifact("teacher_initial.ckpt"));

  StudentParams student =
      StudentParams::init(3 * settings.teacher.d_k, pipeline_detail::student_dim(settings),
                          settings.teacher.n_classes, mix_seed(settings.seed, stage::kStudentInit));
  std::vector<PatientRecord> train_survivors;
  for (const auto& r : train)
    if (r.survived) train_survivors.push_back(r);
  StudentHyper student_hyper = settings.student_hyper;
  student_hyper.seed = mix_seed(settings.seed, stage::kStudentTrain);
  write_training_log(artifact("student_train_log.csv"),
                     train_student(student, embed_cohort(teacher, train_survivors), student_hyper));
  student.save(artifact("student.ckpt"));

  FinetuneHyper finetune_hyper = settings.finetune_hyper;
  finetune_hyper.seed = mix_seed(settings.seed, stage::kFinetune);
  write_training_log(artifact("finetune_log.csv"),
                     risk_aware_finetune(teacher, student, train, finetune_hyper));
  teacher.save(artifact("teacher.ckpt"));

  const std::vector<UncertaintyRecord> train_table = uncertainty_table(teacher, student, train);
  write_uncertainty_csv(artifact("uncertainty.csv"), train_table);

  // Label-free score predictor fitted on the training cohort.
  Matrix x_train = Matrix::zeros(result.n_train, 3 * settings.teacher.d_k);
  std::vector<double> kappa_train(result.n_train);
  for (int i = 0; i < result.n_train; ++i) {
    const Matrix h = encode_patient(teacher, train[i]);
    for (int j = 0; j < h.cols(); ++j) x_train(i, j) = h(0, j);
    kappa_train[i] = kappa_divergence(teacher, student, train[i]);
  }
  const RidgeModel score_model = fit_score_predictor(x_train, kappa_train, settings.ridge_lambda);
  const double m_bound = percentile(kappa_train, settings.clip_percentile);
  result.m_bound = m_bound;

  auto score_patient = [&](const PatientRecord& rec) {
    const double raw = predict_score(score_model, encode_patient(teacher, rec));
    return std::clamp(raw, 0.0, m_bound);
  };
  std::vector<CalRecord> cal_records(cal.size());
  for (size_t i = 0; i < cal.size(); ++i)
    cal_records[i] = {cal[i].id, score_patient(cal[i]),
                      std::min(kappa_divergence(teacher, student, cal[i]), m_bound)};
  write_calibration_csv(artifact("calibration.csv"), cal_records);
  {
    nlohmann::json meta;
    meta["m_bound"] = m_bound;
    meta["clip_percentile"] = settings.clip_percentile;
    meta["n_cal"] = result.n_cal;
    meta["ridge_lambda"] = settings.ridge_lambda;
    std::ofstream out(artifact("calibration_meta.json"));
    out << meta.dump(2) << "\n";
  }

  std::vector<std::string> test_ids(test.size());
  std::vector<double> test_pred(test.size()), test_kappa(test.size()), pvals(test.size());
  for (size_t j = 0; j < test.size(); ++j) {
    test_ids[j] = test[j].id;
    test_pred[j] = score_patient(test[j]);
    test_kappa[j] = std::min(kappa_divergence(teacher, student, test[j]), m_bound);
    std::mt19937_64 tie_rng(mix_seed(settings.seed, stage::kSelectTie, static_cast<uint64_t>(j)));
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(tie_rng);
    pvals[j] = conformal_pvalue(cal_records, test_pred[j], settings.select_c, u);
  }
  const BhResult selection = bh_select(pvals, settings.select_alpha);
  result.n_selected = static_cast<int>(selection.selected.size());
  pipeline_detail::write_selection_csv(artifact("selection.csv"), test_ids, test_pred, pvals,
                                       selection);

  std::vector<ScoredPatient> pool;
  pool.reserve(cal.size() + test.size());
  for (const auto& r : cal_records) pool.push_back({r.kappa_pred, r.kappa_true});
  for (size_t j = 0; j < test.size(); ++j) pool.push_back({test_pred[j], test_kappa[j]});
  SweepConfig sweep_cfg;
  sweep_cfg.alphas = settings.sweep_alphas.empty() ? default_alpha_grid() : settings.sweep_alphas;
  sweep_cfg.cs = settings.sweep_cs;
  sweep_cfg.replicates = settings.sweep_replicates;
  sweep_cfg.n_cal = static_cast<int>(cal.size());
  sweep_cfg.n_test = static_cast<int>(test.size());
  sweep_cfg.seed = mix_seed(settings.seed, stage::kSweep);
  sweep_cfg.threads = settings.threads;
  write_sweep_csv(artifact("sweep.csv"), estimate_fdr_power(pool, sweep_cfg));

  OutcomeModel outcome =
      OutcomeModel::init(settings.cohort.d_struct, settings.cohort.n_classes, 32,
                         mix_seed(settings.seed, stage::kOutcomeInit));
  OutcomeHyper outcome_hyper = settings.outcome_hyper;
  outcome_hyper.seed = mix_seed(settings.seed, stage::kOutcomeTrain);
  write_training_log(artifact("outcome_train_log.csv"),
                     train_outcome_model(outcome, train, outcome_hyper));
  outcome.save(artifact("outcome.ckpt"));

  CounterfactualOptions cf_opts;
  cf_opts.seed = mix_seed(settings.seed, stage::kOutcomeTrain, 1);
  result.counterfactual = counterfactual_mortality_reduction(
      outcome, test, pipeline_detail::teacher_recommendations(teacher, test), cf_opts);
  pipeline_detail::write_outcome_csv(artifact("outcome_eval.csv"), result.counterfactual);

  std::vector<PatientRecord> test_survivors;
  for (const auto& r : test)
    if (r.survived) test_survivors.push_back(r);
  if (!test_survivors.empty()) {
    result.survivor_metrics = evaluate_model(teacher, test_survivors);
    write_metrics_csv(artifact("metrics.csv"), result.survivor_metrics);
    write_predictions_csv(artifact("predictions.csv"), teacher, test_survivors);
  }

  result.gap = uncertainty_gap(teacher, student, cohort.records, 1000,
                               mix_seed(settings.seed, stage::kGap));
  pipeline_detail::write_gap_csv(artifact("gap.csv"), result.gap);

  pipeline_detail::write_case_study_csv(artifact("case_study.csv"), teacher, student,
                                        cohort.records, settings.case_survivors,
                                        settings.case_deceased, settings.cohort.T);
  return result;
}

}  // namespace safer
