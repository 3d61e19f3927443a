// Command-line front end: each subcommand reads a config file plus flags,
// writes its artifacts, and records a manifest with content digests.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "safer/config.hpp"
#include "safer/pipeline.hpp"

namespace {

using safer::Config;
using safer::PipelineSettings;

struct CommonArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  int threads = 0;
};

struct Ctx {
  Config cfg;
  PipelineSettings settings;
  uint64_t seed = 1;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  safer::RunManifest manifest;

  explicit Ctx(const CommonArgs& args, const std::string& command) {
    if (!args.config_path.empty()) cfg = Config::from_file(args.config_path);
    seed = safer::resolve_seed(cfg, args.seed);
    cfg.set("seed", std::to_string(seed));
    settings = safer::settings_from_config(cfg);
    settings.seed = seed;
    if (args.threads > 0) settings.threads = args.threads;
    manifest.command = command;
    manifest.seed = seed;
    manifest.config_snapshot = cfg.values();
  }

  void finish(const std::string& manifest_path) {
    manifest.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    safer::write_manifest(manifest_path, manifest);
  }
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_threads = false) {
  cmd->add_option("--config", args.config_path, "configuration file");
  cmd->add_option("--seed", args.seed, "master seed (overrides config and SAFER_SEED)");
  if (with_threads) cmd->add_option("--threads", args.threads, "worker threads for replicates");
}

safer::TeacherConfig teacher_config_for(const PipelineSettings& settings,
                                        const safer::CohortConfig& cohort_cfg) {
  safer::TeacherConfig tc = settings.teacher;
  tc.d_struct = cohort_cfg.d_struct;
  tc.d_note = cohort_cfg.d_note;
  tc.d_static = cohort_cfg.d_static;
  tc.n_classes = cohort_cfg.n_classes;
  tc.T = cohort_cfg.T;
  return tc;
}

int student_dim(const PipelineSettings& settings, const safer::TeacherConfig& tc) {
  return settings.student_hidden > 0 ? settings.student_hidden : tc.d_k;
}

// Shared by calibrate (fit + score) and select (score only): ridge state is
// persisted in the calibration meta JSON so selection stays label-free.
safer::RidgeModel ridge_from_meta(const nlohmann::json& meta) {
  safer::RidgeModel model;
  model.intercept = meta.at("ridge_intercept").get<double>();
  model.lambda = meta.at("ridge_lambda").get<double>();
  model.beta = meta.at("ridge_beta").get<std::vector<double>>();
  return model;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"risk-aware treatment recommendation pipeline"};
  app.require_subcommand(1);

  // gen
  CommonArgs gen_args;
  std::string gen_out = "cohort.jsonl";
  auto* gen = app.add_subcommand("gen", "generate a synthetic cohort");
  add_common(gen, gen_args);
  gen->add_option("--out", gen_out, "output cohort path");

  // split
  CommonArgs split_args;
  std::string split_in, split_outdir = ".";
  auto* split = app.add_subcommand("split", "partition a cohort into train/cal/test");
  add_common(split, split_args);
  split->add_option("--in", split_in, "input cohort")->required();
  split->add_option("--out-dir", split_outdir, "output directory");

  // train
  CommonArgs train_args;
  std::string train_in, train_out = "teacher.ckpt", train_log;
  auto* train = app.add_subcommand("train", "train the fusion teacher");
  add_common(train, train_args);
  train->add_option("--in", train_in, "training cohort")->required();
  train->add_option("--out", train_out, "teacher checkpoint path");
  train->add_option("--log", train_log, "per-epoch loss CSV");

  // student
  CommonArgs student_args;
  std::string student_teacher, student_in, student_out = "student.ckpt", student_log;
  auto* student = app.add_subcommand("student", "distill the survivor-only student");
  add_common(student, student_args);
  student->add_option("--teacher", student_teacher, "teacher checkpoint")->required();
  student->add_option("--in", student_in, "training cohort")->required();
  student->add_option("--out", student_out, "student checkpoint path");
  student->add_option("--log", student_log, "per-epoch loss CSV");

  // finetune
  CommonArgs ft_args;
  std::string ft_teacher, ft_student, ft_in, ft_out = "teacher_finetuned.ckpt", ft_log;
  auto* finetune = app.add_subcommand("finetune", "risk-aware fine-tuning of the teacher");
  add_common(finetune, ft_args);
  finetune->add_option("--teacher", ft_teacher, "teacher checkpoint")->required();
  finetune->add_option("--student", ft_student, "student checkpoint")->required();
  finetune->add_option("--in", ft_in, "training cohort")->required();
  finetune->add_option("--out", ft_out, "fine-tuned teacher checkpoint path");
  finetune->add_option("--log", ft_log, "per-epoch loss CSV");

  // calibrate
  CommonArgs cal_args;
  std::string cal_teacher, cal_student, cal_train, cal_cohort, cal_out = "calibration.csv";
  auto* calibrate = app.add_subcommand(
      "calibrate", "fit the score predictor and score a calibration cohort");
  add_common(calibrate, cal_args);
  calibrate->add_option("--teacher", cal_teacher, "fine-tuned teacher checkpoint")->required();
  calibrate->add_option("--student", cal_student, "student checkpoint")->required();
  calibrate->add_option("--train", cal_train, "training cohort (fits ridge and clip bound)")
      ->required();
  calibrate->add_option("--cal", cal_cohort, "cohort to score")->required();
  calibrate->add_option("--out", cal_out, "calibration CSV path");

  // select
  CommonArgs sel_args;
  std::string sel_teacher, sel_calibration, sel_meta, sel_in, sel_out = "selection.csv";
  double sel_c = -1.0, sel_alpha = -1.0;
  auto* select = app.add_subcommand("select", "conformal p-values and BH selection");
  add_common(select, sel_args);
  select->add_option("--teacher", sel_teacher, "fine-tuned teacher checkpoint")->required();
  select->add_option("--calibration", sel_calibration, "calibration CSV")->required();
  select->add_option("--meta", sel_meta, "calibration meta JSON")->required();
  select->add_option("--in", sel_in, "test cohort")->required();
  select->add_option("--out", sel_out, "selection CSV path");
  select->add_option("--c", sel_c, "uncertainty threshold");
  select->add_option("--alpha", sel_alpha, "target FDR level");

  // sweep
  CommonArgs sweep_args;
  std::vector<std::string> sweep_pools;
  std::string sweep_alphas, sweep_cs, sweep_out = "sweep.csv";
  int sweep_reps = 0, sweep_ncal = 0, sweep_ntest = 0;
  auto* sweep = app.add_subcommand("sweep", "replicated FDR/power curves over a score pool");
  add_common(sweep, sweep_args, true);
  sweep->add_option("--pool", sweep_pools, "scored cohort CSVs (calibration format)")
      ->required()
      ->expected(-1);
  sweep->add_option("--alphas", sweep_alphas, "alpha grid, start:stop:step or comma list");
  sweep->add_option("--cs", sweep_cs, "threshold grid, start:stop:step or comma list");
  sweep->add_option("--reps", sweep_reps, "replicates");
  sweep->add_option("--n-cal", sweep_ncal, "calibration size per replicate");
  sweep->add_option("--n-test", sweep_ntest, "test size per replicate");
  sweep->add_option("--out", sweep_out, "sweep CSV path");

  // eval
  CommonArgs eval_args;
  std::string eval_teacher, eval_in, eval_outdir = ".", eval_train;
  bool eval_all = false;
  auto* eval = app.add_subcommand("eval", "ranking metrics on a cohort");
  add_common(eval, eval_args);
  eval->add_option("--teacher", eval_teacher, "teacher checkpoint")->required();
  eval->add_option("--in", eval_in, "evaluation cohort")->required();
  eval->add_option("--out-dir", eval_outdir, "output directory");
  eval->add_option("--outcome-train", eval_train,
                   "cohort for the outcome model; adds counterfactual evaluation");
  eval->add_flag("--all-patients", eval_all, "evaluate every patient, not only survivors");

  // case-study
  CommonArgs case_args;
  std::string case_teacher, case_student, case_in, case_out = "case_study.csv";
  int case_survivors = 10, case_deceased = 10;
  auto* case_study = app.add_subcommand("case-study", "per-window mean uncertainty curves");
  add_common(case_study, case_args);
  case_study->add_option("--teacher", case_teacher, "fine-tuned teacher checkpoint")->required();
  case_study->add_option("--student", case_student, "student checkpoint")->required();
  case_study->add_option("--in", case_in, "cohort")->required();
  case_study->add_option("--survivors", case_survivors, "surviving patients in the panel");
  case_study->add_option("--deceased", case_deceased, "deceased patients in the panel");
  case_study->add_option("--out", case_out, "case study CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (*gen) {
      Ctx ctx(gen_args, "gen");
      safer::CohortConfig cc = ctx.settings.cohort;
      cc.seed = safer::mix_seed(ctx.seed, safer::stage::kGen);
      safer::write_cohort(gen_out, safer::generate_cohort(cc));
      ctx.manifest.outputs = {gen_out};
      ctx.finish(gen_out + ".manifest.json");
    } else if (*split) {
      Ctx ctx(split_args, "split");
      const safer::Cohort cohort = safer::read_cohort(split_in);
      const auto parts = safer::split_cohort(
          cohort, {ctx.settings.split_train, ctx.settings.split_cal, ctx.settings.split_test},
          safer::mix_seed(ctx.seed, safer::stage::kSplit));
      std::filesystem::create_directories(split_outdir);
      const std::string names[3] = {"train.jsonl", "cal.jsonl", "test.jsonl"};
      ctx.manifest.inputs = {split_in};
      for (int i = 0; i < 3; ++i) {
        const std::string path = split_outdir + "/" + names[i];
        safer::write_cohort(path, parts[i]);
        ctx.manifest.outputs.push_back(path);
      }
      ctx.finish(split_outdir + "/split.manifest.json");
    } else if (*train) {
      Ctx ctx(train_args, "train");
      const safer::Cohort cohort = safer::read_cohort(train_in);
      const safer::TeacherConfig tc = teacher_config_for(ctx.settings, cohort.config);
      safer::FusionParams params =
          safer::FusionParams::init(tc, safer::mix_seed(ctx.seed, safer::stage::kTeacherInit));
      safer::TrainHyper hyper = ctx.settings.teacher_hyper;
      hyper.seed = safer::mix_seed(ctx.seed, safer::stage::kTeacherTrain);
      const auto log = safer::train_teacher(params, cohort.records, hyper);
      params.save(train_out);
      ctx.manifest.inputs = {train_in};
      ctx.manifest.outputs = {train_out};
      if (!train_log.empty()) {
        safer::write_training_log(train_log, log);
        ctx.manifest.outputs.push_back(train_log);
      }
      ctx.finish(train_out + ".manifest.json");
    } else if (*student) {
      Ctx ctx(student_args, "student");
      const safer::Cohort cohort = safer::read_cohort(student_in);
      const safer::TeacherConfig tc = teacher_config_for(ctx.settings, cohort.config);
      safer::FusionParams teacher = safer::FusionParams::load(student_teacher, tc);
      safer::StudentParams params = safer::StudentParams::init(
          3 * tc.d_k, student_dim(ctx.settings, tc), tc.n_classes,
          safer::mix_seed(ctx.seed, safer::stage::kStudentInit));
      std::vector<safer::PatientRecord> survivors;
      for (const auto& r : cohort.records)
        if (r.survived) survivors.push_back(r);
      safer::StudentHyper hyper = ctx.settings.student_hyper;
      hyper.seed = safer::mix_seed(ctx.seed, safer::stage::kStudentTrain);
      const auto log =
          safer::train_student(params, safer::embed_cohort(teacher, survivors), hyper);
      params.save(student_out);
      ctx.manifest.inputs = {student_teacher, student_in};
      ctx.manifest.outputs = {student_out};
      if (!student_log.empty()) {
        safer::write_training_log(student_log, log);
        ctx.manifest.outputs.push_back(student_log);
      }
      ctx.finish(student_out + ".manifest.json");
    } else if (*finetune) {
      Ctx ctx(ft_args, "finetune");
      const safer::Cohort cohort = safer::read_cohort(ft_in);
      const safer::TeacherConfig tc = teacher_config_for(ctx.settings, cohort.config);
      safer::FusionParams teacher = safer::FusionParams::load(ft_teacher, tc);
      const safer::StudentParams student_params = safer::StudentParams::load(
          ft_student, 3 * tc.d_k, student_dim(ctx.settings, tc), tc.n_classes);
      safer::FinetuneHyper hyper = ctx.settings.finetune_hyper;
      hyper.seed = safer::mix_seed(ctx.seed, safer::stage::kFinetune);
      const auto log = safer::risk_aware_finetune(teacher, student_params, cohort.records, hyper);
      teacher.save(ft_out);
      ctx.manifest.inputs = {ft_teacher, ft_student, ft_in};
      ctx.manifest.outputs = {ft_out};
      if (!ft_log.empty()) {
        safer::write_training_log(ft_log, log);
        ctx.manifest.outputs.push_back(ft_log);
      }
      ctx.finish(ft_out + ".manifest.json");
    } else if (*calibrate) {
      Ctx ctx(cal_args, "calibrate");
      const safer::Cohort train_cohort = safer::read_cohort(cal_train);
      const safer::Cohort cal_cohort_data = safer::read_cohort(cal_cohort);
      const safer::TeacherConfig tc = teacher_config_for(ctx.settings, train_cohort.config);
      safer::FusionParams teacher = safer::FusionParams::load(cal_teacher, tc);
      const safer::StudentParams student_params = safer::StudentParams::load(
          cal_student, 3 * tc.d_k, student_dim(ctx.settings, tc), tc.n_classes);

      const int n = static_cast<int>(train_cohort.records.size());
      safer::Matrix x = safer::Matrix::zeros(n, 3 * tc.d_k);
      std::vector<double> kappa(n);
      for (int i = 0; i < n; ++i) {
        const safer::Matrix h = safer::encode_patient(teacher, train_cohort.records[i]);
        for (int j = 0; j < h.cols(); ++j) x(i, j) = h(0, j);
        kappa[i] = safer::kappa_divergence(teacher, student_params, train_cohort.records[i]);
      }
      const safer::RidgeModel ridge =
          safer::fit_score_predictor(x, kappa, ctx.settings.ridge_lambda);
      const double m_bound = safer::percentile(kappa, ctx.settings.clip_percentile);

      std::vector<safer::CalRecord> records(cal_cohort_data.records.size());
      for (size_t i = 0; i < cal_cohort_data.records.size(); ++i) {
        const auto& rec = cal_cohort_data.records[i];
        const double pred =
            safer::predict_score(ridge, safer::encode_patient(teacher, rec));
        records[i] = {rec.id, std::clamp(pred, 0.0, m_bound),
                      std::min(safer::kappa_divergence(teacher, student_params, rec), m_bound)};
      }
      safer::write_calibration_csv(cal_out, records);
      nlohmann::json meta;
      meta["m_bound"] = m_bound;
      meta["clip_percentile"] = ctx.settings.clip_percentile;
      meta["ridge_lambda"] = ridge.lambda;
      meta["ridge_intercept"] = ridge.intercept;
      meta["ridge_beta"] = ridge.beta;
      meta["n_cal"] = records.size();
      const std::string meta_path = cal_out + ".meta.json";
      { std::ofstream out(meta_path); out << meta.dump(2) << "\n"; }
      ctx.manifest.inputs = {cal_teacher, cal_student, cal_train, cal_cohort};
      ctx.manifest.outputs = {cal_out, meta_path};
      ctx.finish(cal_out + ".manifest.json");
    } else if (*select) {
      Ctx ctx(sel_args, "select");
      const auto cal_records = safer::read_calibration_csv(sel_calibration);
      nlohmann::json meta;
      {
        std::ifstream in(sel_meta);
        if (!in) throw safer::DataError("select: cannot open " + sel_meta);
        in >> meta;
      }
      const double m_bound = meta.at("m_bound").get<double>();
      const safer::RidgeModel ridge = ridge_from_meta(meta);
      const safer::Cohort test_cohort = safer::read_cohort(sel_in);
      const safer::TeacherConfig tc = teacher_config_for(ctx.settings, test_cohort.config);
      safer::FusionParams teacher = safer::FusionParams::load(sel_teacher, tc);
      const double c = sel_c > 0 ? sel_c : ctx.settings.select_c;
      const double alpha = sel_alpha >= 0 ? sel_alpha : ctx.settings.select_alpha;

      std::vector<std::string> ids;
      std::vector<double> preds, pvals;
      for (size_t j = 0; j < test_cohort.records.size(); ++j) {
        const auto& rec = test_cohort.records[j];
        const double pred = std::clamp(
            safer::predict_score(ridge, safer::encode_patient(teacher, rec)), 0.0, m_bound);
        std::mt19937_64 tie_rng(
            safer::mix_seed(ctx.seed, safer::stage::kSelectTie, static_cast<uint64_t>(j)));
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(tie_rng);
        ids.push_back(rec.id);
        preds.push_back(pred);
        pvals.push_back(safer::conformal_pvalue(cal_records, pred, c, u));
      }
      const safer::BhResult sel = safer::bh_select(pvals, alpha);
      safer::pipeline_detail::write_selection_csv(sel_out, ids, preds, pvals, sel);
      std::cout << "selected " << sel.selected.size() << " of " << pvals.size()
                << " test patients at c=" << c << " alpha=" << alpha << "\n";
      ctx.manifest.inputs = {sel_teacher, sel_calibration, sel_meta, sel_in};
      ctx.manifest.outputs = {sel_out};
      ctx.finish(sel_out + ".manifest.json");
    } else if (*sweep) {
      Ctx ctx(sweep_args, "sweep");
      std::vector<safer::ScoredPatient> pool;
      int first_file_count = 0;
      for (size_t f = 0; f < sweep_pools.size(); ++f) {
        const auto records = safer::read_calibration_csv(sweep_pools[f]);
        if (f == 0) first_file_count = static_cast<int>(records.size());
        for (const auto& r : records) pool.push_back({r.kappa_pred, r.kappa_true});
      }
      safer::SweepConfig scfg;
      scfg.alphas = sweep_alphas.empty() ? (ctx.settings.sweep_alphas.empty()
                                                ? safer::default_alpha_grid()
                                                : ctx.settings.sweep_alphas)
                                         : safer::parse_grid(sweep_alphas);
      scfg.cs = sweep_cs.empty() ? ctx.settings.sweep_cs : safer::parse_grid(sweep_cs);
      scfg.replicates = sweep_reps > 0 ? sweep_reps : ctx.settings.sweep_replicates;
      scfg.n_cal = sweep_ncal > 0 ? sweep_ncal : first_file_count;
      scfg.n_test = sweep_ntest > 0 ? sweep_ntest
                                    : static_cast<int>(pool.size()) - scfg.n_cal;
      scfg.seed = safer::mix_seed(ctx.seed, safer::stage::kSweep);
      scfg.threads = ctx.settings.threads;
      safer::write_sweep_csv(sweep_out, safer::estimate_fdr_power(pool, scfg));
      ctx.manifest.inputs = sweep_pools;
      ctx.manifest.outputs = {sweep_out};
      ctx.finish(sweep_out + ".manifest.json");
    } else if (*eval) {
      Ctx ctx(eval_args, "eval");
      const safer::Cohort cohort = safer::read_cohort(eval_in);
      const safer::TeacherConfig tc = teacher_config_for(ctx.settings, cohort.config);
      safer::FusionParams teacher = safer::FusionParams::load(eval_teacher, tc);
      std::vector<safer::PatientRecord> subset;
      for (const auto& r : cohort.records)
        if (eval_all || r.survived) subset.push_back(r);
      if (subset.empty()) throw safer::DataError("eval: no patients in the requested subset");
      std::filesystem::create_directories(eval_outdir);
      const safer::MetricsReport report = safer::evaluate_model(teacher, subset);
      safer::write_metrics_csv(eval_outdir + "/metrics.csv", report);
      safer::write_predictions_csv(eval_outdir + "/predictions.csv", teacher, subset);
      std::cout << "n=" << report.n << " micro_auc=" << report.micro_auc
                << " macro_auc=" << report.macro_auc << " hr@3=" << report.hit_rate_3
                << " mrr@3=" << report.mrr_3 << "\n";
      ctx.manifest.inputs = {eval_teacher, eval_in};
      ctx.manifest.outputs = {eval_outdir + "/metrics.csv", eval_outdir + "/predictions.csv"};
      if (!eval_train.empty()) {
        const safer::Cohort train_cohort = safer::read_cohort(eval_train);
        safer::OutcomeModel outcome = safer::OutcomeModel::init(
            tc.d_struct, tc.n_classes, 32, safer::mix_seed(ctx.seed, safer::stage::kOutcomeInit));
        safer::OutcomeHyper ohyper = ctx.settings.outcome_hyper;
        ohyper.seed = safer::mix_seed(ctx.seed, safer::stage::kOutcomeTrain);
        safer::train_outcome_model(outcome, train_cohort.records, ohyper);
        safer::CounterfactualOptions opts;
        opts.seed = safer::mix_seed(ctx.seed, safer::stage::kOutcomeTrain, 1);
        const auto cf = safer::counterfactual_mortality_reduction(
            outcome, cohort.records,
            safer::pipeline_detail::teacher_recommendations(teacher, cohort.records), opts);
        safer::pipeline_detail::write_outcome_csv(eval_outdir + "/outcome_eval.csv", cf);
        if (!cf.positivity_warning.empty())
          std::cerr << "warning: " << cf.positivity_warning << "\n";
        std::cout << "counterfactual mortality reduction=" << cf.reduction << " [" << cf.ci_lo
                  << ", " << cf.ci_hi << "]\n";
        ctx.manifest.inputs.push_back(eval_train);
        ctx.manifest.outputs.push_back(eval_outdir + "/outcome_eval.csv");
      }
      ctx.finish(eval_outdir + "/eval.manifest.json");
    } else if (*case_study) {
      Ctx ctx(case_args, "case-study");
      const safer::Cohort cohort = safer::read_cohort(case_in);
      const safer::TeacherConfig tc = teacher_config_for(ctx.settings, cohort.config);
      safer::FusionParams teacher = safer::FusionParams::load(case_teacher, tc);
      const safer::StudentParams student_params = safer::StudentParams::load(
          case_student, 3 * tc.d_k, student_dim(ctx.settings, tc), tc.n_classes);
      safer::pipeline_detail::write_case_study_csv(case_out, teacher, student_params,
                                                   cohort.records, case_survivors, case_deceased,
                                                   tc.T);
      ctx.manifest.inputs = {case_teacher, case_student, case_in};
      ctx.manifest.outputs = {case_out};
      ctx.finish(case_out + ".manifest.json");
    }
  } catch (const safer::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
