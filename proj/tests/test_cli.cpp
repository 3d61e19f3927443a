// End-to-end checks of the command line tool: exit codes, seed precedence,
// byte-identical reruns, and the full subcommand chain on a tiny cohort.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include "safer/config.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

// Scratch directory shared by every case in this file; wiped once per run.
const std::string& scratch() {
  static const std::string dir = [] {
    fs::remove_all("t_cli");
    fs::create_directories("t_cli");
    return std::string("t_cli");
  }();
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int line_count(const std::string& path) {
  int n = 0;
  for (char ch : slurp(path))
    if (ch == '\n') ++n;
  return n;
}

std::string first_line(const std::string& path) {
  const std::string text = slurp(path);
  return text.substr(0, text.find('\n'));
}

// Runs the binary through the shell so environment prefixes work; stdout and
// stderr are captured in per-call files under the scratch directory.
RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int call_id = 0;
  const std::string tag = scratch() + "/io_" + std::to_string(call_id++);
  const std::string cmd =
      env_prefix + std::string(SAFER_CLI_PATH) + " " + args + " > " + tag + ".out 2> " + tag + ".err";
  const int status = std::system(cmd.c_str());
  RunResult r;
  REQUIRE(WIFEXITED(status));
  r.code = WEXITSTATUS(status);
  r.out = slurp(tag + ".out");
  r.err = slurp(tag + ".err");
  return r;
}

// Small cohort and short schedules keep every subcommand under a second.
const std::string& config_path() {
  static const std::string path = [] {
    const std::string p = scratch() + "/exercise.ini";
    std::ofstream out(p);
    out << "seed = 5\n"
        << "\n"
        << "[cohort]\n"
        << "n_survivors = 40\n"
        << "n_deceased = 12\n"
        << "T = 3\n"
        << "d_struct = 6\n"
        << "d_note = 4\n"
        << "d_static = 2\n"
        << "\n"
        << "[teacher]\n"
        << "d_k = 8\n"
        << "epochs = 2\n"
        << "batch_size = 8\n"
        << "\n"
        << "[student]\n"
        << "epochs = 4\n"
        << "batch_size = 8\n"
        << "\n"
        << "[finetune]\n"
        << "gamma = 0.1\n"
        << "rounds = 1\n"
        << "epochs_per_round = 1\n"
        << "batch_size = 8\n"
        << "\n"
        << "[outcome]\n"
        << "epochs = 2\n"
        << "batch_size = 8\n"
        << "\n"
        << "[conformal]\n"
        << "lambda = 1.0\n"
        << "c = 0.2\n"
        << "alpha = 0.3\n";
    return p;
  }();
  return path;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  nlohmann::json j;
  in >> j;
  return j;
}

}  // namespace

TEST_CASE("help and bad invocations map to the documented exit codes") {
  const std::string cfg = config_path();

  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("gen --help").code == 0);

  CHECK(run_cli("").code == 1);               // missing subcommand
  CHECK(run_cli("frobnicate").code == 1);     // unknown subcommand
  CHECK(run_cli("train").code == 1);          // missing required --in
  CHECK(run_cli("gen --no-such-flag").code == 1);

  const RunResult missing_cfg = run_cli("gen --config t_cli/absent.ini --out t_cli/x.jsonl");
  CHECK(missing_cfg.code == 1);
  CHECK(missing_cfg.err.find("config error:") != std::string::npos);

  const RunResult missing_input =
      run_cli("train --config " + cfg + " --in t_cli/absent.jsonl --out t_cli/x.ckpt");
  CHECK(missing_input.code == 2);
  CHECK(missing_input.err.find("error:") != std::string::npos);
}

TEST_CASE("cohort generation is deterministic and seed precedence holds") {
  const std::string cfg = config_path();

  REQUIRE(run_cli("gen --config " + cfg + " --out t_cli/a.jsonl").code == 0);
  REQUIRE(run_cli("gen --config " + cfg + " --out t_cli/b.jsonl").code == 0);
  const std::string bytes_a = slurp("t_cli/a.jsonl");
  CHECK(bytes_a == slurp("t_cli/b.jsonl"));
  CHECK(line_count("t_cli/a.jsonl") == 1 + 52);

  // --seed beats the config value and produces a different cohort.
  REQUIRE(run_cli("gen --config " + cfg + " --seed 6 --out t_cli/c.jsonl").code == 0);
  const std::string bytes_c = slurp("t_cli/c.jsonl");
  CHECK(bytes_c != bytes_a);

  // SAFER_SEED beats the config value but loses to --seed.
  REQUIRE(run_cli("gen --config " + cfg + " --out t_cli/d.jsonl", "SAFER_SEED=6 ").code == 0);
  CHECK(slurp("t_cli/d.jsonl") == bytes_c);
  REQUIRE(
      run_cli("gen --config " + cfg + " --seed 5 --out t_cli/e.jsonl", "SAFER_SEED=6 ").code == 0);
  CHECK(slurp("t_cli/e.jsonl") == bytes_a);

  const RunResult bad_env = run_cli("gen --config " + cfg + " --out t_cli/f.jsonl", "SAFER_SEED=zzz ");
  CHECK(bad_env.code == 1);
  CHECK(bad_env.err.find("config error:") != std::string::npos);

  const nlohmann::json manifest = read_json("t_cli/a.jsonl.manifest.json");
  CHECK(manifest.at("command").get<std::string>() == "gen");
  CHECK(manifest.at("code_version").get<std::string>() == std::string(safer::kCodeVersion));
  CHECK(manifest.at("seed").get<uint64_t>() == 5);
  CHECK(manifest.at("config").at("seed").get<std::string>() == "5");
  CHECK(manifest.at("config").at("cohort.n_survivors").get<std::string>() == "40");
  CHECK(manifest.at("inputs").size() == 0);
  REQUIRE(manifest.at("outputs").size() == 1);
  CHECK(manifest.at("outputs")[0].at("path").get<std::string>() == "t_cli/a.jsonl");
  CHECK(manifest.at("outputs")[0].at("fnv1a64").get<std::string>() ==
        safer::hex64(safer::fnv1a_file("t_cli/a.jsonl")));
  CHECK(manifest.at("wall_clock_seconds").get<double>() >= 0.0);
}

TEST_CASE("the full subcommand chain runs end to end") {
  const std::string cfg = config_path();
  const std::string common = " --config " + cfg;

  REQUIRE(run_cli("gen" + common + " --out t_cli/cohort.jsonl").code == 0);

  REQUIRE(run_cli("split" + common + " --in t_cli/cohort.jsonl --out-dir t_cli/splits").code == 0);
  const int n_train = line_count("t_cli/splits/train.jsonl") - 1;
  const int n_cal = line_count("t_cli/splits/cal.jsonl") - 1;
  const int n_test = line_count("t_cli/splits/test.jsonl") - 1;
  CHECK(n_train + n_cal + n_test == 52);
  CHECK(n_train > n_cal);
  CHECK(n_cal >= 1);
  CHECK(n_test >= 1);
  CHECK(read_json("t_cli/splits/split.manifest.json").at("outputs").size() == 3);

  REQUIRE(run_cli("train" + common +
                  " --in t_cli/splits/train.jsonl --out t_cli/teacher0.ckpt"
                  " --log t_cli/teacher_log.csv")
              .code == 0);
  CHECK(fs::exists("t_cli/teacher0.ckpt"));
  CHECK(line_count("t_cli/teacher_log.csv") == 1 + 2);
  CHECK(first_line("t_cli/teacher_log.csv") == "epoch,mean_loss");

  REQUIRE(run_cli("student" + common +
                  " --teacher t_cli/teacher0.ckpt --in t_cli/splits/train.jsonl"
                  " --out t_cli/student.ckpt --log t_cli/student_log.csv")
              .code == 0);
  CHECK(line_count("t_cli/student_log.csv") == 1 + 4);

  REQUIRE(run_cli("finetune" + common +
                  " --teacher t_cli/teacher0.ckpt --student t_cli/student.ckpt"
                  " --in t_cli/splits/train.jsonl --out t_cli/teacher.ckpt"
                  " --log t_cli/finetune_log.csv")
              .code == 0);
  CHECK(line_count("t_cli/finetune_log.csv") == 1 + 1);
  // Fine-tuning must actually move the weights.
  CHECK(slurp("t_cli/teacher.ckpt") != slurp("t_cli/teacher0.ckpt"));

  REQUIRE(run_cli("calibrate" + common +
                  " --teacher t_cli/teacher.ckpt --student t_cli/student.ckpt"
                  " --train t_cli/splits/train.jsonl --cal t_cli/splits/cal.jsonl"
                  " --out t_cli/calibration.csv")
              .code == 0);
  CHECK(first_line("t_cli/calibration.csv") == "patient_id,kappa_pred,kappa_true");
  CHECK(line_count("t_cli/calibration.csv") == 1 + n_cal);
  const nlohmann::json meta = read_json("t_cli/calibration.csv.meta.json");
  CHECK(meta.at("m_bound").get<double>() > 0.0);
  CHECK(meta.at("ridge_beta").size() == 3 * 8);
  CHECK(meta.at("n_cal").get<int>() == n_cal);

  const RunResult sel = run_cli("select" + common +
                                " --teacher t_cli/teacher.ckpt --calibration t_cli/calibration.csv"
                                " --meta t_cli/calibration.csv.meta.json"
                                " --in t_cli/splits/test.jsonl --out t_cli/selection.csv");
  REQUIRE(sel.code == 0);
  CHECK(sel.out.find("selected ") == 0);
  CHECK(sel.out.find(" test patients at c=0.2 alpha=0.3") != std::string::npos);
  CHECK(first_line("t_cli/selection.csv") == "patient_id,kappa_pred,p_value,selected");
  CHECK(line_count("t_cli/selection.csv") == 1 + n_test);

  // Selection is a pure function of its inputs and the seed.
  REQUIRE(run_cli("select" + common +
                  " --teacher t_cli/teacher.ckpt --calibration t_cli/calibration.csv"
                  " --meta t_cli/calibration.csv.meta.json"
                  " --in t_cli/splits/test.jsonl --out t_cli/selection2.csv")
              .code == 0);
  CHECK(slurp("t_cli/selection.csv") == slurp("t_cli/selection2.csv"));

  // Score the test split as a second pool file for the sweep.
  REQUIRE(run_cli("calibrate" + common +
                  " --teacher t_cli/teacher.ckpt --student t_cli/student.ckpt"
                  " --train t_cli/splits/train.jsonl --cal t_cli/splits/test.jsonl"
                  " --out t_cli/test_scores.csv")
              .code == 0);

  REQUIRE(run_cli("sweep" + common +
                  " --pool t_cli/calibration.csv --pool t_cli/test_scores.csv"
                  " --alphas 0.2,0.5 --cs 0.2,0.3 --reps 4 --out t_cli/sweep.csv")
              .code == 0);
  CHECK(first_line("t_cli/sweep.csv") ==
        "c,alpha,mean_fdr,se_fdr,mean_power,se_power,replicates");
  CHECK(line_count("t_cli/sweep.csv") == 1 + 4);

  REQUIRE(run_cli("sweep" + common +
                  " --pool t_cli/calibration.csv --pool t_cli/test_scores.csv"
                  " --alphas 0.2,0.5 --cs 0.2,0.3 --reps 4 --threads 2 --out t_cli/sweep2.csv")
              .code == 0);
  CHECK(slurp("t_cli/sweep.csv") == slurp("t_cli/sweep2.csv"));

  const RunResult ev =
      run_cli("eval" + common + " --teacher t_cli/teacher.ckpt --in t_cli/splits/test.jsonl"
              " --out-dir t_cli/eval");
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("micro_auc=") != std::string::npos);
  CHECK(first_line("t_cli/eval/metrics.csv") ==
        "n,micro_auc,macro_auc,hit_rate_1,hit_rate_3,mrr_3,skipped_classes");
  CHECK(line_count("t_cli/eval/metrics.csv") == 2);
  const int survivor_rows = line_count("t_cli/eval/predictions.csv") - 1;
  CHECK(survivor_rows >= 1);
  CHECK(survivor_rows < n_test);

  REQUIRE(run_cli("eval" + common + " --teacher t_cli/teacher.ckpt --in t_cli/splits/test.jsonl"
                  " --all-patients --out-dir t_cli/eval_all")
              .code == 0);
  CHECK(line_count("t_cli/eval_all/predictions.csv") == 1 + n_test);

  const RunResult ev_cf =
      run_cli("eval" + common + " --teacher t_cli/teacher.ckpt --in t_cli/splits/test.jsonl"
              " --outcome-train t_cli/splits/train.jsonl --out-dir t_cli/eval_cf");
  REQUIRE(ev_cf.code == 0);
  CHECK(ev_cf.out.find("counterfactual mortality reduction=") != std::string::npos);
  CHECK(first_line("t_cli/eval_cf/outcome_eval.csv") ==
        "reduction,ci_lo,ci_hi,observed_rate,mean_counterfactual,positivity_warning");
  CHECK(line_count("t_cli/eval_cf/outcome_eval.csv") == 2);
  const nlohmann::json eval_manifest = read_json("t_cli/eval_cf/eval.manifest.json");
  CHECK(eval_manifest.at("command").get<std::string>() == "eval");
  CHECK(eval_manifest.at("inputs").size() == 3);
  CHECK(eval_manifest.at("outputs").size() == 3);

  const RunResult cs = run_cli("case-study" + common +
                               " --teacher t_cli/teacher.ckpt --student t_cli/student.ckpt"
                               " --in t_cli/cohort.jsonl --survivors 5 --deceased 3"
                               " --out t_cli/case.csv");
  REQUIRE(cs.code == 0);
  CHECK(first_line("t_cli/case.csv") ==
        "window,mean_kappa_survivors,mean_kappa_deceased,n_survivors,n_deceased");
  CHECK(line_count("t_cli/case.csv") == 1 + 3);
  const std::string case_text = slurp("t_cli/case.csv");
  CHECK(case_text.find(",5,3\n") != std::string::npos);
}
