#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "safer/teacher.hpp"

using namespace safer;

namespace {

TeacherConfig tiny_teacher() {
  TeacherConfig cfg;
  cfg.d_struct = 6;
  cfg.d_note = 4;
  cfg.d_static = 3;
  cfg.d_k = 8;
  cfg.T = 4;
  return cfg;
}

CohortConfig matching_cohort(const TeacherConfig& t, int n_surv, int n_dec) {
  CohortConfig cfg;
  cfg.n_survivors = n_surv;
  cfg.n_deceased = n_dec;
  cfg.T = t.T;
  cfg.d_struct = t.d_struct;
  cfg.d_note = t.d_note;
  cfg.d_static = t.d_static;
  cfg.seed = 7;
  return cfg;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    const auto p = softmax_vector(logits.row_as_vector(i));
    for (int j = 0; j < logits.cols(); ++j) out(i, j) = p[j];
  }
  return out;
}

Matrix plain_self_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                            const Matrix& mask, const Matrix& pe) {
  const double inv = 1.0 / std::sqrt(double(wq.cols()));
  const Matrix scores = scale(add(matmul_nt(matmul(x, wq), matmul(x, wk)), mask), inv);
  return add(matmul(softmax_rows(scores), matmul(x, wv)), pe);
}

Matrix add_bias_row(const Matrix& x, const Matrix& b) {
  Matrix out = x;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) += b(0, j);
  return out;
}

// Full forward pass reimplemented with plain matrix calls only.
std::vector<double> oracle_logits(const FusionParams& p, const PatientRecord& rec, int prefix) {
  const TeacherConfig& cfg = p.cfg;
  Matrix xs(prefix, cfg.d_struct), xn(prefix, cfg.d_note);
  for (int t = 0; t < prefix; ++t) {
    for (int j = 0; j < cfg.d_struct; ++j) xs(t, j) = rec.structured(t, j);
    for (int j = 0; j < cfg.d_note; ++j) xn(t, j) = rec.notes(t, j);
  }
  const Matrix mask = causal_mask(prefix);
  const Matrix pe = sinusoidal_pe(prefix, cfg.d_k);

  const Matrix es = add_bias_row(matmul(xs, p.embed_struct_w), p.embed_struct_b);
  const Matrix en = add_bias_row(matmul(xn, p.embed_note_w), p.embed_note_b);
  const Matrix ss = plain_self_attention(es, p.self_struct_q, p.self_struct_k, p.self_struct_v,
                                         mask, pe);
  const Matrix sn = plain_self_attention(en, p.self_note_q, p.self_note_k, p.self_note_v, mask, pe);

  const double inv = 1.0 / std::sqrt(double(cfg.d_k));
  const Matrix b1 = matmul(
      softmax_rows(scale(
          matmul_nt(matmul(sn, p.cross_into_struct_q), matmul(ss, p.cross_into_struct_k)), inv)),
      matmul(ss, p.cross_into_struct_v));
  const Matrix b2 = matmul(
      softmax_rows(scale(
          matmul_nt(matmul(ss, p.cross_into_note_q), matmul(sn, p.cross_into_note_k)), inv)),
      matmul(sn, p.cross_into_note_v));

  const Matrix stat = add_bias_row(
      matmul(Matrix::row_vector(rec.static_features), p.embed_static_w), p.embed_static_b);

  Matrix h(1, 3 * cfg.d_k);
  for (int j = 0; j < cfg.d_k; ++j) {
    h(0, j) = b1(prefix - 1, j);
    h(0, cfg.d_k + j) = b2(prefix - 1, j);
    h(0, 2 * cfg.d_k + j) = stat(0, j);
  }
  Matrix hidden = add_bias_row(matmul(h, p.head_w1), p.head_b1);
  for (size_t k = 0; k < hidden.size(); ++k) hidden.data()[k] = std::tanh(hidden.data()[k]);
  const Matrix out = add_bias_row(matmul(hidden, p.head_w2), p.head_b2);
  return out.row_as_vector(0);
}

}  // namespace

TEST_CASE("forward pass agrees with a direct reimplementation") {
  const TeacherConfig cfg = tiny_teacher();
  const Cohort cohort = generate_cohort(matching_cohort(cfg, 1, 1));
  FusionParams params = FusionParams::init(cfg, 11);
  for (const auto& rec : cohort.records) {
    for (int prefix : {1, 2, cfg.T}) {
      const auto got = teacher_logits(params, rec, prefix);
      const auto want = oracle_logits(params, rec, prefix);
      REQUIRE(got.size() == 25);
      for (int k = 0; k < 25; ++k) CHECK(got[k] == Catch::Approx(want[k]).margin(1e-9));
    }
  }
}

TEST_CASE("default prefix is the full stay") {
  const TeacherConfig cfg = tiny_teacher();
  const Cohort cohort = generate_cohort(matching_cohort(cfg, 1, 0));
  FusionParams params = FusionParams::init(cfg, 3);
  const auto full = teacher_logits(params, cohort.records[0], cfg.T);
  const auto defaulted = teacher_logits(params, cohort.records[0]);
  for (int k = 0; k < 25; ++k) CHECK(defaulted[k] == full[k]);
  const auto probs = predict_treatment(params, cohort.records[0]);
  double sum = 0.0;
  for (double v : probs) {
    CHECK(v > 0.0);
    sum += v;
  }
  CHECK(sum == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("fused representation stacks cross output and static embedding") {
  const TeacherConfig cfg = tiny_teacher();
  const Cohort cohort = generate_cohort(matching_cohort(cfg, 1, 0));
  FusionParams params = FusionParams::init(cfg, 5);
  const Matrix h = encode_patient(params, cohort.records[0]);
  REQUIRE(h.rows() == 1);
  REQUIRE(h.cols() == 3 * cfg.d_k);
  const Matrix stat = add_bias_row(
      matmul(Matrix::row_vector(cohort.records[0].static_features), params.embed_static_w),
      params.embed_static_b);
  for (int j = 0; j < cfg.d_k; ++j)
    CHECK(h(0, 2 * cfg.d_k + j) == Catch::Approx(stat(0, j)).margin(1e-12));
}

TEST_CASE("prefix and shape validation") {
  const TeacherConfig cfg = tiny_teacher();
  const Cohort cohort = generate_cohort(matching_cohort(cfg, 1, 0));
  FusionParams params = FusionParams::init(cfg, 5);
  CHECK_THROWS_AS(teacher_logits(params, cohort.records[0], 0), ConfigError);
  CHECK_THROWS_AS(teacher_logits(params, cohort.records[0], cfg.T + 1), ConfigError);

  PatientRecord bad = cohort.records[0];
  bad.static_features.push_back(0.0);
  CHECK_THROWS_AS(teacher_logits(params, bad, 1), ShapeError);
  PatientRecord bad2 = cohort.records[0];
  bad2.structured = Matrix(cfg.T, cfg.d_struct + 1);
  CHECK_THROWS_AS(teacher_logits(params, bad2, 1), ShapeError);

  TeacherConfig odd = cfg;
  odd.d_k = 7;
  CHECK_THROWS_AS(FusionParams::init(odd, 1), ConfigError);
}

TEST_CASE("checkpoints restore the teacher bit for bit") {
  namespace fs = std::filesystem;
  const TeacherConfig cfg = tiny_teacher();
  const Cohort cohort = generate_cohort(matching_cohort(cfg, 1, 1));
  FusionParams params = FusionParams::init(cfg, 21);
  train_teacher(params, cohort.records, {2, 3e-3, 8, 1});

  const std::string path = "t_teacher.ckpt";
  params.save(path);
  FusionParams loaded = FusionParams::load(path, cfg);
  auto a = params.refs();
  auto b = loaded.refs();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(*a[i].value, *b[i].value) == 0.0);
  const auto la = teacher_logits(params, cohort.records[0]);
  const auto lb = teacher_logits(loaded, cohort.records[0]);
  for (int k = 0; k < 25; ++k) CHECK(la[k] == lb[k]);
  fs::remove(path);
}

TEST_CASE("training reduces the loss and is bit-deterministic") {
  const TeacherConfig cfg = tiny_teacher();
  const Cohort cohort = generate_cohort(matching_cohort(cfg, 12, 4));
  TrainHyper hyper;
  hyper.epochs = 6;
  hyper.batch_size = 8;
  hyper.seed = 2;

  FusionParams p1 = FusionParams::init(cfg, 11);
  const auto log1 = train_teacher(p1, cohort.records, hyper);
  REQUIRE(log1.size() == 6);
  CHECK(log1.front().mean_loss > log1.back().mean_loss);
  // Blind 25-way start: first-epoch mean loss sits near log(25).
  CHECK(log1.front().mean_loss == Catch::Approx(std::log(25.0)).margin(0.8));

  FusionParams p2 = FusionParams::init(cfg, 11);
  const auto log2 = train_teacher(p2, cohort.records, hyper);
  for (size_t e = 0; e < log1.size(); ++e) CHECK(log1[e].mean_loss == log2[e].mean_loss);
  auto r1 = p1.refs();
  auto r2 = p2.refs();
  for (size_t i = 0; i < r1.size(); ++i) CHECK(max_abs_diff(*r1[i].value, *r2[i].value) == 0.0);

  CHECK_THROWS_AS(train_teacher(p1, {}, hyper), DataError);
  TrainHyper bad = hyper;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train_teacher(p1, cohort.records, bad), ConfigError);
}

TEST_CASE("training log file uses nine-digit floats") {
  const std::string path = "t_teacher_log.csv";
  write_training_log(path, {{0, 3.2188758248682006}, {1, 1.0}});
  std::ifstream in(path);
  std::string header, line0, line1;
  std::getline(in, header);
  std::getline(in, line0);
  std::getline(in, line1);
  CHECK(header == "epoch,mean_loss");
  CHECK(line0 == "0,3.21887582");
  CHECK(line1 == "1,1");
  std::filesystem::remove(path);
}

TEST_CASE("whole-network gradients match finite differences") {
  const TeacherConfig cfg = [] {
    TeacherConfig c = tiny_teacher();
    c.T = 3;
    return c;
  }();
  const Cohort cohort = generate_cohort(matching_cohort(cfg, 2, 1));
  FusionParams params = FusionParams::init(cfg, 31);

  auto batch_loss_grads = [&](bool want_grads) {
    Tape tape;
    TeacherGraph graph(tape, params);
    VarId total = -1;
    for (const auto& rec : cohort.records) {
      VarId ce = tape.cross_entropy_logits(graph.logits(rec, cfg.T), rec.next_treatment);
      total = (total < 0) ? ce : tape.add(total, ce);
    }
    VarId loss = tape.scale(total, 1.0 / double(cohort.records.size()));
    const double value = tape.value(loss)(0, 0);
    std::vector<Matrix> grads;
    if (want_grads) {
      tape.backward(loss);
      for (VarId leaf : graph.leaves()) grads.push_back(tape.grad(leaf));
    }
    return std::make_pair(value, grads);
  };

  const auto report = grad_check(
      params.refs(), [&] { return batch_loss_grads(false).first; },
      [&] { return batch_loss_grads(true).second; });
  INFO("worst " << report.worst_param << "[" << report.worst_index << "]");
  CHECK(report.max_rel_err < 1e-4);
}
