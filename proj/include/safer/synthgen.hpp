#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "safer/error.hpp"
#include "safer/matrix.hpp"

namespace safer {

// Cohort generation knobs. latent_shift is the distance between the survivor
// and deceased latent means, reached at the final window; deceased trajectories
// drift toward the shifted mean as the stay progresses. treatment_effect is
// the log-odds of death added when the final treatment misses the
// generative-optimal one; at 0, survival flags are assigned by the configured
// group counts instead of being drawn from the outcome law.
struct CohortConfig {
  int n_survivors = 312;
  int n_deceased = 43;
  int T = 8;
  int d_struct = 44;
  int d_note = 16;
  int d_static = 5;
  int n_classes = 25;
  double latent_shift = 1.5;
  double deceased_label_noise = 0.3;
  double treatment_effect = 0.0;
  uint64_t seed = 1;
};

// Everything the generator knows that the pipeline must not see. Read only by
// evaluation harnesses; no training routine accepts this type.
struct GenerativeTruth {
  std::vector<int> optimal_steps;
  int optimal_next = 0;
  bool high_risk = false;
  double p_death_optimal = 0.0;
  double p_death_wrong = 0.0;
  std::vector<double> latent_mean;
  std::vector<double> latent_final;
};

struct PatientRecord {
  std::string id;
  Matrix structured;  // T x d_struct, z-scored over the cohort
  Matrix notes;       // T x d_note
  std::vector<double> static_features;
  std::vector<int> treatments;  // one label per step
  int next_treatment = 0;       // decision-window label, the training target
  bool survived = true;
};

struct Cohort {
  CohortConfig config;
  std::vector<PatientRecord> records;
  std::vector<GenerativeTruth> truth;  // aligned with records; may be empty
};

namespace gen_detail {

// Latent process constants. Six latent dimensions follow a stationary AR(1)
// around the group mean; the treatment grid lives on the first two.
constexpr int kLatentDim = 6;
constexpr double kAr1Rho = 0.85;
constexpr double kStructNoiseSd = 0.5;
constexpr double kNoteNoiseSd = 0.7;
constexpr double kBaseDeathLogitLow = -2.9444389791664403;   // logit(0.05)
constexpr double kBaseDeathLogitHigh = 0.0;                  // logit(0.5)

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// 5 x 5 anchor grid over the first two latent dimensions; the optimal
// treatment is the softmax-policy argmax, i.e. the nearest anchor.
inline std::array<std::pair<double, double>, 25> policy_anchors() {
  const double coords[5] = {-1.6, -0.8, 0.0, 0.8, 1.6};
  std::array<std::pair<double, double>, 25> anchors;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) anchors[5 * r + c] = {coords[r], coords[c]};
  return anchors;
}

inline int optimal_treatment(const std::vector<double>& z) {
  static const auto anchors = policy_anchors();
  int best = 0;
  double best_d = 1e300;
  for (int k = 0; k < 25; ++k) {
    const double dr = z[0] - anchors[k].first;
    const double dc = z[1] - anchors[k].second;
    const double d = dr * dr + dc * dc;
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// Rounds to nine significant decimal digits, the precision every float keeps
// on disk. Values are quantized at generation time so file round-trips are
// bit-exact.
inline double quantize9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}

inline std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace gen_detail

inline void validate_config(const CohortConfig& cfg) {
  if (cfg.n_survivors < 0 || cfg.n_deceased < 0 || cfg.n_survivors + cfg.n_deceased == 0)
    throw ConfigError("cohort: group counts must be nonnegative and sum to > 0");
  if (cfg.T < 1) throw ConfigError("cohort: T must be >= 1");
  if (cfg.d_struct < 1 || cfg.d_note < 1 || cfg.d_static < 1)
    throw ConfigError("cohort: feature dimensions must be >= 1");
  if (cfg.n_classes != 25)
    throw ConfigError("cohort: the treatment grid is fixed at 25 classes");
  if (cfg.deceased_label_noise < 0.0 || cfg.deceased_label_noise > 1.0)
    throw ConfigError("cohort: deceased_label_noise must lie in [0, 1]");
  if (cfg.latent_shift < 0.0) throw ConfigError("cohort: latent_shift must be >= 0");
  if (cfg.treatment_effect < 0.0) throw ConfigError("cohort: treatment_effect must be >= 0");
}

inline Cohort generate_cohort(const CohortConfig& cfg) {
  using namespace gen_detail;
  validate_config(cfg);
  const int n = cfg.n_survivors + cfg.n_deceased;
  const int dz = kLatentDim;

  // Fixed loading matrices for the two modalities, one draw per cohort.
  std::mt19937_64 loading_rng(mix_seed(cfg.seed, 0xA11CE));
  Matrix a_struct = gaussian_init(dz, cfg.d_struct, 1.0 / std::sqrt(dz), loading_rng);
  Matrix a_note = gaussian_init(dz, cfg.d_note, 1.0 / std::sqrt(dz), loading_rng);

  const double inv_sqrt_dz = 1.0 / std::sqrt(static_cast<double>(dz));

  Cohort cohort;
  cohort.config = cfg;
  cohort.config.latent_shift = quantize9(cfg.latent_shift);
  cohort.config.deceased_label_noise = quantize9(cfg.deceased_label_noise);
  cohort.config.treatment_effect = quantize9(cfg.treatment_effect);
  cohort.records.resize(n);
  cohort.truth.resize(n);

  for (int i = 0; i < n; ++i) {
    const bool high_risk = i >= cfg.n_survivors;
    std::mt19937_64 rng(mix_seed(cfg.seed, 0xBEEF, static_cast<uint64_t>(i)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    // Stationary AR(1) residual plus a group mean that ramps linearly to the
    // configured shift at the final step (and stays there for the decision
    // window). Survivors keep a zero mean throughout.
    std::vector<std::vector<double>> z(cfg.T + 1, std::vector<double>(dz));
    std::vector<double> x(dz);
    for (int d = 0; d < dz; ++d) x[d] = normal(rng);
    for (int t = 0; t <= cfg.T; ++t) {
      if (t > 0) {
        const double innov = std::sqrt(1.0 - kAr1Rho * kAr1Rho);
        for (int d = 0; d < dz; ++d) x[d] = kAr1Rho * x[d] + innov * normal(rng);
      }
      const double ramp = std::min(1.0, static_cast<double>(t + 1) / cfg.T);
      const double mean = high_risk ? cfg.latent_shift * ramp * inv_sqrt_dz : 0.0;
      for (int d = 0; d < dz; ++d) z[t][d] = mean + x[d];
    }

    PatientRecord& rec = cohort.records[i];
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "P%05d", i);
    rec.id = idbuf;
    rec.structured = Matrix(cfg.T, cfg.d_struct);
    rec.notes = Matrix(cfg.T, cfg.d_note);
    rec.static_features.resize(cfg.d_static);
    rec.treatments.resize(cfg.T);

    for (int t = 0; t < cfg.T; ++t) {
      for (int j = 0; j < cfg.d_struct; ++j) {
        double v = 0.0;
        for (int d = 0; d < dz; ++d) v += z[t][d] * a_struct(d, j);
        rec.structured(t, j) = v + kStructNoiseSd * normal(rng);
      }
      for (int j = 0; j < cfg.d_note; ++j) {
        double v = 0.0;
        for (int d = 0; d < dz; ++d) v += z[t][d] * a_note(d, j);
        rec.notes(t, j) = v + kNoteNoiseSd * normal(rng);
      }
    }
    for (int j = 0; j < cfg.d_static; ++j)
      rec.static_features[j] = quantize9(normal(rng));

    GenerativeTruth& truth = cohort.truth[i];
    truth.high_risk = high_risk;
    truth.optimal_steps.resize(cfg.T);
    truth.latent_mean.assign(dz, 0.0);
    for (int t = 0; t < cfg.T; ++t) {
      truth.optimal_steps[t] = optimal_treatment(z[t]);
      for (int d = 0; d < dz; ++d) truth.latent_mean[d] += z[t][d] / cfg.T;
    }
    truth.optimal_next = optimal_treatment(z[cfg.T]);
    truth.latent_final.resize(dz);
    for (int d = 0; d < dz; ++d) {
      truth.latent_final[d] = quantize9(z[cfg.T][d]);
      truth.latent_mean[d] = quantize9(truth.latent_mean[d]);
    }

    // Stored labels: generative-optimal for the low-risk group, resampled away
    // from the optimum with the configured probability for the high-risk one.
    auto noisy_label = [&](int optimal) {
      if (!high_risk || unif(rng) >= cfg.deceased_label_noise) return optimal;
      int draw = static_cast<int>(unif(rng) * 24.0);
      if (draw >= 24) draw = 23;
      return draw >= optimal ? draw + 1 : draw;
    };
    for (int t = 0; t < cfg.T; ++t) rec.treatments[t] = noisy_label(truth.optimal_steps[t]);
    rec.next_treatment = noisy_label(truth.optimal_next);

    const bool wrong_next = rec.next_treatment != truth.optimal_next;
    if (cfg.treatment_effect > 0.0) {
      const double base = high_risk ? kBaseDeathLogitHigh : kBaseDeathLogitLow;
      truth.p_death_optimal = quantize9(sigmoid(base));
      truth.p_death_wrong = quantize9(sigmoid(base + cfg.treatment_effect));
      const double p = wrong_next ? truth.p_death_wrong : truth.p_death_optimal;
      rec.survived = unif(rng) >= p;
    } else {
      truth.p_death_optimal = high_risk ? 1.0 : 0.0;
      truth.p_death_wrong = truth.p_death_optimal;
      rec.survived = !high_risk;
    }
  }

  // z-score the structured block per feature over the whole cohort, then
  // quantize everything that goes to disk.
  for (int j = 0; j < cfg.d_struct; ++j) {
    double mean = 0.0, sq = 0.0;
    const double count = static_cast<double>(n) * cfg.T;
    for (const auto& rec : cohort.records)
      for (int t = 0; t < cfg.T; ++t) mean += rec.structured(t, j);
    mean /= count;
    for (const auto& rec : cohort.records)
      for (int t = 0; t < cfg.T; ++t) {
        const double d = rec.structured(t, j) - mean;
        sq += d * d;
      }
    double sd = std::sqrt(sq / count);
    if (sd < 1e-12) sd = 1.0;
    for (auto& rec : cohort.records)
      for (int t = 0; t < cfg.T; ++t)
        rec.structured(t, j) = quantize9((rec.structured(t, j) - mean) / sd);
  }
  for (auto& rec : cohort.records)
    for (int t = 0; t < cfg.T; ++t)
      for (int j = 0; j < cfg.d_note; ++j) rec.notes(t, j) = quantize9(rec.notes(t, j));

  return cohort;
}

// Patient-level split by shuffled assignment. Sizes use largest-remainder
// rounding; on remainder ties the earlier split wins.
inline std::vector<Cohort> split_cohort(const Cohort& cohort, const std::vector<double>& fractions,
                                        uint64_t seed) {
  const int n = static_cast<int>(cohort.records.size());
  if (fractions.empty()) throw ConfigError("split: no fractions given");
  double total = 0.0;
  for (double f : fractions) {
    if (f <= 0.0) throw ConfigError("split: fractions must be positive");
    total += f;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw ConfigError("split: fractions sum to " + std::to_string(total) + ", expected 1");

  const int k = static_cast<int>(fractions.size());
  std::vector<int> sizes(k);
  std::vector<std::pair<double, int>> remainders(k);
  int assigned = 0;
  for (int s = 0; s < k; ++s) {
    const double exact = fractions[s] * n;
    sizes[s] = static_cast<int>(std::floor(exact));
    remainders[s] = {exact - sizes[s], s};
    assigned += sizes[s];
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int r = 0; r < n - assigned; ++r) sizes[remainders[r % k].second] += 1;
  for (int s = 0; s < k; ++s)
    if (sizes[s] == 0)
      throw ConfigError("split: fraction " + std::to_string(fractions[s]) +
                        " yields an empty split at n=" + std::to_string(n));

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x59117));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Cohort> splits(k);
  int pos = 0;
  for (int s = 0; s < k; ++s) {
    splits[s].config = cohort.config;
    for (int r = 0; r < sizes[s]; ++r, ++pos) {
      splits[s].records.push_back(cohort.records[order[pos]]);
      if (!cohort.truth.empty()) splits[s].truth.push_back(cohort.truth[order[pos]]);
    }
  }
  return splits;
}

namespace gen_detail {

inline void append_double_array(std::string& out, const std::vector<double>& v) {
  out += '[';
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += fmt9(v[i]);
  }
  out += ']';
}

inline void append_int_array(std::string& out, const std::vector<int>& v) {
  out += '[';
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  out += ']';
}

inline void append_matrix(std::string& out, const Matrix& m) {
  out += '[';
  for (int i = 0; i < m.rows(); ++i) {
    if (i) out += ',';
    out += '[';
    for (int j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += fmt9(m(i, j));
    }
    out += ']';
  }
  out += ']';
}

}  // namespace gen_detail

// One JSON object per line: a self-describing header with the generation
// config, then one patient per line. All floats are written with nine
// significant digits, matching the in-memory quantization.
inline void write_cohort(const std::string& path, const Cohort& cohort) {
  using namespace gen_detail;
  std::ofstream out(path);
  if (!out) throw DataError("write_cohort: cannot open " + path);
  const CohortConfig& c = cohort.config;
  std::string line = "{\"format\":\"safer-cohort\",\"version\":1,\"config\":{";
  line += "\"n_survivors\":" + std::to_string(c.n_survivors);
  line += ",\"n_deceased\":" + std::to_string(c.n_deceased);
  line += ",\"T\":" + std::to_string(c.T);
  line += ",\"d_struct\":" + std::to_string(c.d_struct);
  line += ",\"d_note\":" + std::to_string(c.d_note);
  line += ",\"d_static\":" + std::to_string(c.d_static);
  line += ",\"n_classes\":" + std::to_string(c.n_classes);
  line += ",\"latent_shift\":" + fmt9(c.latent_shift);
  line += ",\"deceased_label_noise\":" + fmt9(c.deceased_label_noise);
  line += ",\"treatment_effect\":" + fmt9(c.treatment_effect);
  line += ",\"seed\":" + std::to_string(c.seed);
  line += "}}\n";
  out << line;

  for (size_t i = 0; i < cohort.records.size(); ++i) {
    const PatientRecord& r = cohort.records[i];
    line = "{\"id\":\"" + r.id + "\",\"survived\":";
    line += r.survived ? "true" : "false";
    line += ",\"structured\":";
    append_matrix(line, r.structured);
    line += ",\"notes\":";
    append_matrix(line, r.notes);
    line += ",\"static\":";
    append_double_array(line, r.static_features);
    line += ",\"treatments\":";
    append_int_array(line, r.treatments);
    line += ",\"next_treatment\":" + std::to_string(r.next_treatment);
    if (i < cohort.truth.size()) {
      const GenerativeTruth& g = cohort.truth[i];
      line += ",\"truth\":{\"optimal_steps\":";
      append_int_array(line, g.optimal_steps);
      line += ",\"optimal_next\":" + std::to_string(g.optimal_next);
      line += ",\"high_risk\":";
      line += g.high_risk ? "true" : "false";
      line += ",\"p_death_optimal\":" + fmt9(g.p_death_optimal);
      line += ",\"p_death_wrong\":" + fmt9(g.p_death_wrong);
      line += ",\"latent_mean\":";
      append_double_array(line, g.latent_mean);
      line += ",\"latent_final\":";
      append_double_array(line, g.latent_final);
      line += "}";
    }
    line += "}\n";
    out << line;
  }
  if (!out) throw DataError("write_cohort: short write to " + path);
}

inline Cohort read_cohort(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_cohort: cannot open " + path);
  Cohort cohort;
  bool have_config = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("read_cohort: " + path + " line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    auto fail = [&](const std::string& what) {
      throw ParseError("read_cohort: " + path + " line " + std::to_string(line_no) + ": " + what);
    };
    if (j.contains("format")) {
      if (j["format"] != "safer-cohort") fail("unknown format tag");
      try {
        const auto& c = j.at("config");
        cohort.config.n_survivors = c.at("n_survivors");
        cohort.config.n_deceased = c.at("n_deceased");
        cohort.config.T = c.at("T");
        cohort.config.d_struct = c.at("d_struct");
        cohort.config.d_note = c.at("d_note");
        cohort.config.d_static = c.at("d_static");
        cohort.config.n_classes = c.at("n_classes");
        cohort.config.latent_shift = c.at("latent_shift");
        cohort.config.deceased_label_noise = c.at("deceased_label_noise");
        cohort.config.treatment_effect = c.at("treatment_effect");
        cohort.config.seed = c.at("seed");
      } catch (const nlohmann::json::exception& e) {
        fail(e.what());
      }
      have_config = true;
      continue;
    }
    PatientRecord rec;
    try {
      rec.id = j.at("id");
      rec.survived = j.at("survived");
      const auto& s = j.at("structured");
      const auto& notes = j.at("notes");
      const int t_len = static_cast<int>(s.size());
      if (t_len == 0) fail("empty structured block");
      if (static_cast<int>(notes.size()) != t_len)
        fail("notes have " + std::to_string(notes.size()) + " steps, structured has " +
             std::to_string(t_len));
      rec.structured = Matrix(t_len, static_cast<int>(s[0].size()));
      for (int t = 0; t < t_len; ++t) {
        if (s[t].size() != s[0].size()) fail("ragged structured row");
        for (int k = 0; k < rec.structured.cols(); ++k) rec.structured(t, k) = s[t][k];
      }
      rec.notes = Matrix(t_len, static_cast<int>(notes[0].size()));
      for (int t = 0; t < t_len; ++t) {
        if (notes[t].size() != notes[0].size()) fail("ragged notes row");
        for (int k = 0; k < rec.notes.cols(); ++k) rec.notes(t, k) = notes[t][k];
      }
      rec.static_features = j.at("static").get<std::vector<double>>();
      rec.treatments = j.at("treatments").get<std::vector<int>>();
      if (static_cast<int>(rec.treatments.size()) != t_len)
        fail("record has " + std::to_string(rec.treatments.size()) + " treatments for " +
             std::to_string(t_len) + " steps");
      rec.next_treatment = j.at("next_treatment");
      for (int y : rec.treatments)
        if (y < 0 || y >= 25) fail("treatment index " + std::to_string(y) + " out of range");
      if (rec.next_treatment < 0 || rec.next_treatment >= 25)
        fail("treatment index " + std::to_string(rec.next_treatment) + " out of range");
      if (j.contains("truth")) {
        const auto& g = j["truth"];
        GenerativeTruth truth;
        truth.optimal_steps = g.at("optimal_steps").get<std::vector<int>>();
        truth.optimal_next = g.at("optimal_next");
        truth.high_risk = g.at("high_risk");
        truth.p_death_optimal = g.at("p_death_optimal");
        truth.p_death_wrong = g.at("p_death_wrong");
        truth.latent_mean = g.at("latent_mean").get<std::vector<double>>();
        truth.latent_final = g.at("latent_final").get<std::vector<double>>();
        cohort.truth.push_back(std::move(truth));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    }
    cohort.records.push_back(std::move(rec));
  }
  if (cohort.records.empty())
    throw ParseError("read_cohort: " + path + " contains no patient records");
  if (!cohort.truth.empty() && cohort.truth.size() != cohort.records.size())
    throw ParseError("read_cohort: " + path + " mixes records with and without truth blocks");
  if (!have_config) {
    cohort.config.T = cohort.records[0].structured.rows();
    cohort.config.d_struct = cohort.records[0].structured.cols();
    cohort.config.d_note = cohort.records[0].notes.cols();
    cohort.config.d_static = static_cast<int>(cohort.records[0].static_features.size());
  }
  for (size_t i = 0; i < cohort.records.size(); ++i) {
    const PatientRecord& r = cohort.records[i];
    if (r.structured.rows() != cohort.config.T)
      throw ParseError("read_cohort: " + path + ": record " + r.id + " has " +
                       std::to_string(r.structured.rows()) + " steps, cohort uses " +
                       std::to_string(cohort.config.T));
  }
  return cohort;
}

}  // namespace safer
