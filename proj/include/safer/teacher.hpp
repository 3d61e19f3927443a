#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "safer/autodiff.hpp"
#include "safer/checkpoint.hpp"
#include "safer/error.hpp"
#include "safer/matrix.hpp"
#include "safer/nn.hpp"
#include "safer/synthgen.hpp"

namespace safer {

struct TeacherConfig {
  int d_struct = 44;
  int d_note = 16;
  int d_static = 5;
  int d_k = 128;
  int n_classes = 25;
  int T = 8;
};

// Parameters of the fusion classifier: per-modality embeddings, per-modality
// masked self-attention, bidirectional cross-attention, a static-feature
// embedding and a one-hidden-layer head on the 3*d_k fused vector.
struct FusionParams {
  TeacherConfig cfg;

  Matrix embed_struct_w, embed_struct_b;
  Matrix embed_note_w, embed_note_b;
  Matrix self_struct_q, self_struct_k, self_struct_v;
  Matrix self_note_q, self_note_k, self_note_v;
  // "into_struct" weights serve the branch whose keys and values come from the
  // structured sequence (queried by the note sequence), and vice versa.
  Matrix cross_into_struct_q, cross_into_struct_k, cross_into_struct_v;
  Matrix cross_into_note_q, cross_into_note_k, cross_into_note_v;
  Matrix embed_static_w, embed_static_b;
  Matrix head_w1, head_b1;
  Matrix head_w2, head_b2;

  static FusionParams init(const TeacherConfig& cfg, uint64_t seed) {
    if (cfg.d_k <= 0 || cfg.d_k % 2 != 0)
      throw ConfigError("teacher: d_k must be positive and even, got " +
                        std::to_string(cfg.d_k));
    FusionParams p;
    p.cfg = cfg;
    std::mt19937_64 rng(mix_seed(seed, 0x7EAC4));
    auto dense = [&rng](int in, int out) {
      return gaussian_init(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    };
    p.embed_struct_w = dense(cfg.d_struct, cfg.d_k);
    p.embed_struct_b = Matrix(1, cfg.d_k);
    p.embed_note_w = dense(cfg.d_note, cfg.d_k);
    p.embed_note_b = Matrix(1, cfg.d_k);
    p.self_struct_q = dense(cfg.d_k, cfg.d_k);
    p.self_struct_k = dense(cfg.d_k, cfg.d_k);
    p.self_struct_v = dense(cfg.d_k, cfg.d_k);
    p.self_note_q = dense(cfg.d_k, cfg.d_k);
    p.self_note_k = dense(cfg.d_k, cfg.d_k);
    p.self_note_v = dense(cfg.d_k, cfg.d_k);
    p.cross_into_struct_q = dense(cfg.d_k, cfg.d_k);
    p.cross_into_struct_k = dense(cfg.d_k, cfg.d_k);
    p.cross_into_struct_v = dense(cfg.d_k, cfg.d_k);
    p.cross_into_note_q = dense(cfg.d_k, cfg.d_k);
    p.cross_into_note_k = dense(cfg.d_k, cfg.d_k);
    p.cross_into_note_v = dense(cfg.d_k, cfg.d_k);
    p.embed_static_w = dense(cfg.d_static, cfg.d_k);
    p.embed_static_b = Matrix(1, cfg.d_k);
    p.head_w1 = dense(3 * cfg.d_k, cfg.d_k);
    p.head_b1 = Matrix(1, cfg.d_k);
    p.head_w2 = dense(cfg.d_k, cfg.n_classes);
    p.head_b2 = Matrix(1, cfg.n_classes);
    return p;
  }

  std::vector<ParamRef> refs() {
    return {
        {"embed_struct_w", &embed_struct_w},
        {"embed_struct_b", &embed_struct_b},
        {"embed_note_w", &embed_note_w},
        {"embed_note_b", &embed_note_b},
        {"self_struct_q", &self_struct_q},
        {"self_struct_k", &self_struct_k},
        {"self_struct_v", &self_struct_v},
        {"self_note_q", &self_note_q},
        {"self_note_k", &self_note_k},
        {"self_note_v", &self_note_v},
        {"cross_into_struct_q", &cross_into_struct_q},
        {"cross_into_struct_k", &cross_into_struct_k},
        {"cross_into_struct_v", &cross_into_struct_v},
        {"cross_into_note_q", &cross_into_note_q},
        {"cross_into_note_k", &cross_into_note_k},
        {"cross_into_note_v", &cross_into_note_v},
        {"embed_static_w", &embed_static_w},
        {"embed_static_b", &embed_static_b},
        {"head_w1", &head_w1},
        {"head_b1", &head_b1},
        {"head_w2", &head_w2},
        {"head_b2", &head_b2},
    };
  }

  std::vector<NamedTensor> tensors() {
    std::vector<NamedTensor> out;
    for (const auto& r : refs()) out.push_back({r.name, *r.value});
    return out;
  }

  void save(const std::string& path) { write_checkpoint(path, tensors()); }

  static FusionParams load(const std::string& path, const TeacherConfig& cfg) {
    FusionParams p = init(cfg, 0);
    load_into(read_checkpoint(path), p.refs());
    return p;
  }
};

// Binds a parameter set to a tape as leaves and builds patient forward passes
// on it. Leaves are aligned with FusionParams::refs() so gradients can be
// collected positionally.
class TeacherGraph {
 public:
  TeacherGraph(Tape& tape, FusionParams& params) : tape_(&tape), params_(&params) {
    for (const auto& r : params.refs()) leaves_.push_back(tape.leaf(*r.value));
  }

  const std::vector<VarId>& leaves() const { return leaves_; }

  // Fused representation over the first prefix_len steps: last cross-attention
  // row concatenated with the static embedding, shape 1 x 3*d_k.
  VarId embed(const PatientRecord& rec, int prefix_len) {
    Tape& t = *tape_;
    const TeacherConfig& cfg = params_->cfg;
    if (prefix_len < 1 || prefix_len > rec.structured.rows())
      throw ConfigError("teacher: prefix length " + std::to_string(prefix_len) +
                        " outside [1, " + std::to_string(rec.structured.rows()) + "]");
    if (rec.structured.cols() != cfg.d_struct || rec.notes.cols() != cfg.d_note ||
        static_cast<int>(rec.static_features.size()) != cfg.d_static)
      throw ShapeError("teacher: record " + rec.id + " does not match model dimensions");

    Matrix xs(prefix_len, cfg.d_struct), xn(prefix_len, cfg.d_note);
    for (int t_i = 0; t_i < prefix_len; ++t_i) {
      for (int j = 0; j < cfg.d_struct; ++j) xs(t_i, j) = rec.structured(t_i, j);
      for (int j = 0; j < cfg.d_note; ++j) xn(t_i, j) = rec.notes(t_i, j);
    }
    const Matrix mask = causal_mask(prefix_len);
    const Matrix pe = sinusoidal_pe(prefix_len, cfg.d_k);

    VarId es = t.add_rowvec(t.matmul(t.constant(std::move(xs)), L(0)), L(1));
    VarId en = t.add_rowvec(t.matmul(t.constant(std::move(xn)), L(2)), L(3));
    VarId ss = masked_self_attention(t, es, L(4), L(5), L(6), mask, pe);
    VarId sn = masked_self_attention(t, en, L(7), L(8), L(9), mask, pe);
    VarId fused = cross_attention(t, ss, sn, L(10), L(11), L(12), L(13), L(14), L(15));
    VarId static_emb =
        t.add_rowvec(t.matmul(t.constant(Matrix::row_vector(rec.static_features)), L(16)), L(17));
    return t.concat_cols(t.row(fused, prefix_len - 1), static_emb);
  }

  VarId logits(VarId h) {
    Tape& t = *tape_;
    VarId hidden = t.tanh_op(t.add_rowvec(t.matmul(h, L(18)), L(19)));
    return t.add_rowvec(t.matmul(hidden, L(20)), L(21));
  }

  VarId logits(const PatientRecord& rec, int prefix_len) { return logits(embed(rec, prefix_len)); }

 private:
  VarId L(int i) const { return leaves_[i]; }

  Tape* tape_;
  FusionParams* params_;
  std::vector<VarId> leaves_;
};

inline Matrix encode_patient(FusionParams& params, const PatientRecord& rec, int prefix_len = -1) {
  Tape tape;
  TeacherGraph graph(tape, params);
  if (prefix_len < 0) prefix_len = rec.structured.rows();
  return tape.value(graph.embed(rec, prefix_len));
}

inline std::vector<double> teacher_logits(FusionParams& params, const PatientRecord& rec,
                                          int prefix_len = -1) {
  Tape tape;
  TeacherGraph graph(tape, params);
  if (prefix_len < 0) prefix_len = rec.structured.rows();
  return tape.value(graph.logits(rec, prefix_len)).row_as_vector(0);
}

inline std::vector<double> predict_treatment(FusionParams& params, const PatientRecord& rec,
                                             int prefix_len = -1) {
  return softmax_vector(teacher_logits(params, rec, prefix_len));
}

struct TrainHyper {
  int epochs = 100;
  double lr = 3e-3;
  int batch_size = 32;
  uint64_t seed = 1;
};

// Cross-entropy training on the decision-window label, one instance per
// patient. Shuffled fixed-size minibatches, last partial batch kept; the whole
// routine is bit-deterministic for a given seed.
inline std::vector<EpochLoss> train_teacher(FusionParams& params,
                                            const std::vector<PatientRecord>& records,
                                            const TrainHyper& hyper) {
  if (records.empty()) throw DataError("train_teacher: empty cohort");
  if (hyper.epochs < 0 || hyper.batch_size < 1 || hyper.lr <= 0.0)
    throw ConfigError("train_teacher: invalid hyperparameters");
  const int n = static_cast<int>(records.size());
  Adam opt(hyper.lr);
  std::vector<EpochLoss> log;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  auto refs = params.refs();
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(hyper.seed, 0x5C3D, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (int start = 0; start < n; start += hyper.batch_size) {
      const int end = std::min(n, start + hyper.batch_size);
      Tape tape;
      TeacherGraph graph(tape, params);
      VarId total = -1;
      for (int b = start; b < end; ++b) {
        const PatientRecord& rec = records[order[b]];
        VarId ce = tape.cross_entropy_logits(graph.logits(rec, rec.structured.rows()),
                                             rec.next_treatment);
        total = (total < 0) ? ce : tape.add(total, ce);
      }
      VarId loss = tape.scale(total, 1.0 / (end - start));
      const double loss_value = tape.value(loss)(0, 0);
      if (!std::isfinite(loss_value))
        throw NumericError("train_teacher: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += loss_value * (end - start);
      tape.backward(loss);
      std::vector<Matrix> grads;
      grads.reserve(refs.size());
      for (VarId leaf : graph.leaves()) grads.push_back(tape.grad(leaf));
      opt.step(refs, grads);
    }
    log.push_back({epoch, loss_sum / n});
  }
  return log;
}

inline void write_training_log(const std::string& path, const std::vector<EpochLoss>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("write_training_log: cannot open " + path);
  out << "epoch,mean_loss\n";
  char buf[40];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%.9g", e.mean_loss);
    out << e.epoch << "," << buf << "\n";
  }
}

}  // namespace safer
