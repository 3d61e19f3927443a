#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "safer/error.hpp"
#include "safer/teacher.hpp"

namespace safer {

// Mann-Whitney AUC via average ranks; tied scores contribute 1/2.
inline double binary_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw ShapeError("binary_auc: scores and labels differ in length");
  const size_t n = scores.size();
  if (n == 0) throw DataError("binary_auc: empty input");
  size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("binary_auc: labels must be 0 or 1");
    n_pos += y;
  }
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("binary_auc: all labels identical");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (i + 1 + j);  // mean of ranks i+1 .. j
    for (size_t t = i; t < j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  return (rank_sum_pos - 0.5 * n_pos * (n_pos + 1)) / (static_cast<double>(n_pos) * n_neg);
}

struct OvrAucResult {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<int> skipped;  // classes without both a positive and a negative
};

// One-vs-rest AUC. Micro flattens every (patient, class) pair into a single
// binary problem; macro averages per-class AUCs and records classes it had to
// skip. Every class skipped is an error.
inline OvrAucResult ovr_auc(const std::vector<std::vector<double>>& probs,
                            const std::vector<int>& labels, int n_classes) {
  if (probs.size() != labels.size())
    throw ShapeError("ovr_auc: probabilities and labels differ in length");
  if (probs.empty()) throw DataError("ovr_auc: empty input");
  for (const auto& row : probs)
    if (static_cast<int>(row.size()) != n_classes)
      throw ShapeError("ovr_auc: probability row width mismatch");
  for (int y : labels)
    if (y < 0 || y >= n_classes) throw IndexError("ovr_auc: label outside class range");

  OvrAucResult result;
  std::vector<double> micro_scores;
  std::vector<int> micro_labels;
  micro_scores.reserve(probs.size() * n_classes);
  micro_labels.reserve(probs.size() * n_classes);
  double macro_sum = 0.0;
  int macro_n = 0;
  for (int k = 0; k < n_classes; ++k) {
    std::vector<double> s(probs.size());
    std::vector<int> y(probs.size());
    size_t n_pos = 0;
    for (size_t r = 0; r < probs.size(); ++r) {
      s[r] = probs[r][k];
      y[r] = labels[r] == k ? 1 : 0;
      n_pos += y[r];
      micro_scores.push_back(s[r]);
      micro_labels.push_back(y[r]);
    }
    if (n_pos == 0 || n_pos == probs.size()) {
      result.skipped.push_back(k);
      continue;
    }
    macro_sum += binary_auc(s, y);
    ++macro_n;
  }
  if (macro_n == 0) throw DataError("ovr_auc: every class lacks both label values");
  result.macro = macro_sum / macro_n;
  result.micro = binary_auc(micro_scores, micro_labels);
  return result;
}

// 1-based rank of the true class; ties are broken by ascending class index,
// so an equal-scoring class only outranks the true one if its index is lower.
inline int prediction_rank(const std::vector<double>& scores, int true_label) {
  if (true_label < 0 || true_label >= static_cast<int>(scores.size()))
    throw IndexError("prediction_rank: label outside score range");
  const double s_true = scores[true_label];
  int rank = 1;
  for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
    if (scores[j] > s_true || (scores[j] == s_true && j < true_label)) ++rank;
  }
  return rank;
}

inline double hit_rate_at_k(const std::vector<int>& ranks, int k) {
  if (ranks.empty()) throw DataError("hit_rate_at_k: empty input");
  if (k < 1) throw ConfigError("hit_rate_at_k: k must be >= 1");
  int hits = 0;
  for (int r : ranks) hits += (r <= k);
  return static_cast<double>(hits) / ranks.size();
}

inline double mrr_at_k(const std::vector<int>& ranks, int k) {
  if (ranks.empty()) throw DataError("mrr_at_k: empty input");
  if (k < 1) throw ConfigError("mrr_at_k: k must be >= 1");
  double s = 0.0;
  for (int r : ranks)
    if (r <= k) s += 1.0 / r;
  return s / ranks.size();
}

struct MetricsReport {
  int n = 0;
  double micro_auc = 0.0;
  double macro_auc = 0.0;
  std::vector<int> skipped_classes;
  double hit_rate_1 = 0.0;
  double hit_rate_3 = 0.0;
  double mrr_3 = 0.0;
};

// Decision-window evaluation: the model scores all treatments at the full
// observed prefix and is judged against the recorded next treatment.
inline MetricsReport evaluate_model(FusionParams& params,
                                    const std::vector<PatientRecord>& records) {
  if (records.empty()) throw DataError("evaluate_model: empty cohort");
  std::vector<std::vector<double>> probs;
  std::vector<int> labels, ranks;
  probs.reserve(records.size());
  for (const auto& rec : records) {
    probs.push_back(predict_treatment(params, rec));
    labels.push_back(rec.next_treatment);
    ranks.push_back(prediction_rank(probs.back(), rec.next_treatment));
  }
  MetricsReport report;
  report.n = static_cast<int>(records.size());
  const OvrAucResult auc = ovr_auc(probs, labels, static_cast<int>(probs.front().size()));
  report.micro_auc = auc.micro;
  report.macro_auc = auc.macro;
  report.skipped_classes = auc.skipped;
  report.hit_rate_1 = hit_rate_at_k(ranks, 1);
  report.hit_rate_3 = hit_rate_at_k(ranks, 3);
  report.mrr_3 = mrr_at_k(ranks, 3);
  return report;
}

inline void write_metrics_csv(const std::string& path, const MetricsReport& r) {
  std::ofstream out(path);
  if (!out) throw DataError("write_metrics_csv: cannot open " + path);
  out << "n,micro_auc,macro_auc,hit_rate_1,hit_rate_3,mrr_3,skipped_classes\n";
  char buf[40];
  out << r.n << ",";
  for (double v : {r.micro_auc, r.macro_auc, r.hit_rate_1, r.hit_rate_3, r.mrr_3}) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    out << buf << ",";
  }
  for (size_t i = 0; i < r.skipped_classes.size(); ++i)
    out << (i ? ";" : "") << r.skipped_classes[i];
  out << "\n";
}

inline void write_predictions_csv(const std::string& path, FusionParams& params,
                                  const std::vector<PatientRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("write_predictions_csv: cannot open " + path);
  out << "patient_id,true_treatment,top_treatment,rank,p_true\n";
  char buf[40];
  for (const auto& rec : records) {
    const std::vector<double> p = predict_treatment(params, rec);
    const int top =
        static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    std::snprintf(buf, sizeof(buf), "%.9g", p[rec.next_treatment]);
    out << rec.id << "," << rec.next_treatment << "," << top << ","
        << prediction_rank(p, rec.next_treatment) << "," << buf << "\n";
  }
}

}  // namespace safer
