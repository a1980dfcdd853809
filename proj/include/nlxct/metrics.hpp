#pragma once

// Classification metrics and the sequential-batch (continual) metric suite.
// Continual metrics work in percent units on a square matrix F where F[t][b]
// is the macro F1 on batch b after training through step t; entries with
// b > t are pre-adaptation evaluations.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nlxct/error.hpp"

namespace nlxct {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ContractError("confusion matrix needs at least one class");
  }

  void add(int truth, int predicted) {
    if (truth < 0 || predicted < 0 || std::size_t(truth) >= classes_ || std::size_t(predicted) >= classes_) {
      throw IndexError("confusion matrix: label pair (" + std::to_string(truth) + ", " + std::to_string(predicted) +
                       ") out of range");
    }
    ++counts_[std::size_t(truth) * classes_ + std::size_t(predicted)];
  }

  void add(std::span<const int> truth, std::span<const int> predicted) {
    if (truth.size() != predicted.size()) throw DimensionError("confusion matrix: label vectors differ in length");
    for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], predicted[i]);
  }

  std::size_t classes() const { return classes_; }
  long long at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * classes_ + predicted); }
  long long& at(std::size_t truth, std::size_t predicted) { return counts_.at(truth * classes_ + predicted); }

  long long total() const { return std::accumulate(counts_.begin(), counts_.end(), 0LL); }
  long long row_sum(std::size_t c) const {
    long long s = 0;
    for (std::size_t j = 0; j < classes_; ++j) s += at(c, j);
    return s;
  }
  long long col_sum(std::size_t c) const {
    long long s = 0;
    for (std::size_t i = 0; i < classes_; ++i) s += at(i, c);
    return s;
  }

  double accuracy() const {
    const long long n = total();
    if (n == 0) throw ContractError("accuracy of an empty confusion matrix");
    long long diag = 0;
    for (std::size_t c = 0; c < classes_; ++c) diag += at(c, c);
    return double(diag) / double(n);
  }

  /// Rows scaled to sum to 1; empty rows stay zero.
  std::vector<std::vector<double>> row_normalized() const {
    std::vector<std::vector<double>> out(classes_, std::vector<double>(classes_, 0.0));
    for (std::size_t i = 0; i < classes_; ++i) {
      const long long r = row_sum(i);
      if (r == 0) continue;
      for (std::size_t j = 0; j < classes_; ++j) out[i][j] = double(at(i, j)) / double(r);
    }
    return out;
  }

 private:
  std::size_t classes_;
  std::vector<long long> counts_;
};

struct ClassScores {
  std::vector<double> precision, recall, f1;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
};

inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

/// Per-class precision/recall/F1 and their unweighted means; any vanishing
/// denominator yields 0.
inline ClassScores class_scores(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("macro F1 of an empty confusion matrix");
  ClassScores s;
  const std::size_t C = cm.classes();
  for (std::size_t c = 0; c < C; ++c) {
    const double tp = double(cm.at(c, c));
    const double p = safe_ratio(tp, double(cm.col_sum(c)));
    const double r = safe_ratio(tp, double(cm.row_sum(c)));
    s.precision.push_back(p);
    s.recall.push_back(r);
    s.f1.push_back(safe_ratio(2.0 * p * r, p + r));
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); };
  s.macro_precision = mean(s.precision);
  s.macro_recall = mean(s.recall);
  s.macro_f1 = mean(s.f1);
  return s;
}

inline double macro_average(std::span<const double> per_class) {
  if (per_class.empty()) throw ContractError("macro average of no classes");
  return std::accumulate(per_class.begin(), per_class.end(), 0.0) / double(per_class.size());
}

inline double macro_f1(const ConfusionMatrix& cm) { return class_scores(cm).macro_f1; }

// ---------------------------------------------------------------------------

class PerfMatrix {
 public:
  explicit PerfMatrix(std::size_t batches) : n_(batches), f_(batches * batches, std::nan("")) {
    if (batches == 0) throw ContractError("performance matrix needs at least one batch");
  }
  PerfMatrix(std::initializer_list<std::initializer_list<double>> rows) : PerfMatrix(rows.size()) {
    std::size_t t = 0;
    for (const auto& row : rows) {
      if (row.size() != n_) throw DimensionError("performance matrix must be square");
      std::size_t b = 0;
      for (double v : row) set(t, b++, v);
      ++t;
    }
  }

  std::size_t size() const { return n_; }
  double at(std::size_t t, std::size_t b) const { return f_.at(t * n_ + b); }
  bool has(std::size_t t, std::size_t b) const { return !std::isnan(at(t, b)); }
  void set(std::size_t t, std::size_t b, double v) {
    if (!(v >= 0.0 && v <= 100.0)) throw ContractError("performance entries must lie in [0, 100]");
    f_.at(t * n_ + b) = v;
  }

 private:
  std::size_t n_;
  std::vector<double> f_;
};

struct Forgetting {
  std::vector<double> per_batch;
  double mean = 0.0;
  double max = 0.0;
};

namespace detail {

inline void require_batches(const PerfMatrix& F, const char* what) {
  if (F.size() < 2) throw ContractError(std::string(what) + " needs at least two batches");
}

inline double entry(const PerfMatrix& F, std::size_t t, std::size_t b, const char* what) {
  if (!F.has(t, b)) {
    throw ContractError(std::string(what) + ": missing entry F[" + std::to_string(t) + "][" + std::to_string(b) + "]");
  }
  return F.at(t, b);
}

}  // namespace detail

/// Forgetting of batch b: max over post-update rows t ≥ b of F[t][b] minus
/// the final F[T][b], for every batch but the last.
inline Forgetting forgetting(const PerfMatrix& F) {
  detail::require_batches(F, "forgetting");
  const std::size_t last = F.size() - 1;
  Forgetting out;
  for (std::size_t b = 0; b < last; ++b) {
    double best = detail::entry(F, b, b, "forgetting");
    for (std::size_t t = b + 1; t <= last; ++t) best = std::max(best, detail::entry(F, t, b, "forgetting"));
    out.per_batch.push_back(best - detail::entry(F, last, b, "forgetting"));
  }
  out.mean = std::accumulate(out.per_batch.begin(), out.per_batch.end(), 0.0) / double(out.per_batch.size());
  out.max = *std::max_element(out.per_batch.begin(), out.per_batch.end());
  return out;
}

/// Mean over earlier batches of F[T][b] − F[b][b].
inline double backward_transfer(const PerfMatrix& F) {
  detail::require_batches(F, "backward transfer");
  const std::size_t last = F.size() - 1;
  double s = 0.0;
  for (std::size_t b = 0; b < last; ++b) s += detail::entry(F, last, b, "bwt") - detail::entry(F, b, b, "bwt");
  return s / double(last);
}

/// Mean over t ≥ 1 of the post-update minus pre-adaptation score on batch t.
inline double adaptation_gain(const PerfMatrix& F) {
  detail::require_batches(F, "adaptation gain");
  double s = 0.0;
  for (std::size_t t = 1; t < F.size(); ++t) s += detail::entry(F, t, t, "iag") - detail::entry(F, t - 1, t, "iag");
  return s / double(F.size() - 1);
}

/// Mean of the final row.
inline double average_final(const PerfMatrix& F) {
  const std::size_t last = F.size() - 1;
  double s = 0.0;
  for (std::size_t b = 0; b < F.size(); ++b) s += detail::entry(F, last, b, "avg");
  return s / double(F.size());
}

struct ContinualReport {
  Forgetting forgetting;
  double bwt = 0.0;
  double iag = 0.0;
  double avg_final = 0.0;
};

inline ContinualReport continual_report(const PerfMatrix& F) {
  return {forgetting(F), backward_transfer(F), adaptation_gain(F), average_final(F)};
}

// ---------------------------------------------------------------------------
// CSV output

using MetricRows = std::vector<std::pair<std::string, double>>;

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos && s.front() == '-') s.erase(0, 1);  // no "-0.0000"
  return s;
}

inline std::string metrics_csv(const MetricRows& rows) {
  std::string out = "name,value\n";
  for (const auto& [name, value] : rows) out += name + "," + format_fixed(value, 4) + "\n";
  return out;
}

inline MetricRows continual_rows(const ContinualReport& r) {
  MetricRows rows;
  for (std::size_t b = 0; b < r.forgetting.per_batch.size(); ++b)
    rows.emplace_back("forgetting_batch" + std::to_string(b + 1), r.forgetting.per_batch[b]);
  rows.emplace_back("mean_forgetting", r.forgetting.mean);
  rows.emplace_back("max_forgetting", r.forgetting.max);
  rows.emplace_back("bwt", r.bwt);
  rows.emplace_back("iag", r.iag);
  rows.emplace_back("avg_batch_macro_f1", r.avg_final);
  return rows;
}

inline MetricRows classification_rows(const ConfusionMatrix& cm) {
  const ClassScores s = class_scores(cm);
  MetricRows rows{{"accuracy", cm.accuracy()},
                  {"macro_precision", s.macro_precision},
                  {"macro_recall", s.macro_recall},
                  {"macro_f1", s.macro_f1}};
  for (std::size_t c = 0; c < cm.classes(); ++c) rows.emplace_back("f1_class" + std::to_string(c), s.f1[c]);
  return rows;
}

/// Header `step,batch1..batchN`; missing entries are left empty.
inline std::string perf_matrix_csv(const PerfMatrix& F) {
  std::string out = "step";
  for (std::size_t b = 0; b < F.size(); ++b) out += ",batch" + std::to_string(b + 1);
  out += "\n";
  for (std::size_t t = 0; t < F.size(); ++t) {
    out += std::to_string(t + 1);
    for (std::size_t b = 0; b < F.size(); ++b) out += "," + (F.has(t, b) ? format_fixed(F.at(t, b), 4) : std::string());
    out += "\n";
  }
  return out;
}

inline std::string confusion_csv(const ConfusionMatrix& cm, bool normalized) {
  std::string out = "true\\pred";
  for (std::size_t c = 0; c < cm.classes(); ++c) out += "," + std::to_string(c);
  out += "\n";
  const auto norm = cm.row_normalized();
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    out += std::to_string(i);
    for (std::size_t j = 0; j < cm.classes(); ++j)
      out += "," + (normalized ? format_fixed(norm[i][j], 4) : std::to_string(cm.at(i, j)));
    out += "\n";
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("failed writing '" + path + "'");
}

}  // namespace nlxct
