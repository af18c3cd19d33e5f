#pragma once

// Synthetic-data quality metrics: per-column divergences (KS for numerics,
// total variation for categoricals) rolled up into a fidelity score, distance
// to closest record for privacy, and machine-learning efficacy where a model
// fit on synthetic rows is scored against held-out real rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "difflm/data.hpp"
#include "difflm/error.hpp"

namespace difflm {

// Two-sample Kolmogorov-Smirnov statistic: sup_x |F_a(x) - F_b(x)|.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty())
    throw DataError("ks_statistic: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = double(a.size()), nb = double(b.size());
  size_t i = 0, j = 0;
  double sup = 0;
  while (i < a.size() || j < b.size()) {
    double v;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j]))
      v = a[i];
    else
      v = b[j];
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    sup = std::max(sup, std::abs(double(i) / na - double(j) / nb));
  }
  return sup;
}

// Total variation distance between two empirical category distributions:
// 0.5 * sum_c |p_c - q_c|. Categories present in either sample count.
inline double tv_distance(const std::vector<std::string> &a,
                          const std::vector<std::string> &b) {
  if (a.empty() || b.empty())
    throw DataError("tv_distance: empty sample");
  std::map<std::string, double> pa, pb;
  for (const auto &c : a) pa[c] += 1.0;
  for (const auto &c : b) pb[c] += 1.0;
  double dist = 0;
  for (auto &[c, n] : pa) {
    const double q = pb.count(c) ? pb[c] / double(b.size()) : 0.0;
    dist += std::abs(n / double(a.size()) - q);
  }
  for (auto &[c, n] : pb)
    if (!pa.count(c)) dist += n / double(b.size());
  return 0.5 * dist;
}

namespace detail {

inline std::vector<double> numeric_column(const std::vector<Record> &rows,
                                          size_t col) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto &r : rows) out.push_back(r.values[col].num);
  return out;
}

inline std::vector<std::string> categorical_column(
    const std::vector<Record> &rows, size_t col) {
  std::vector<std::string> out;
  out.reserve(rows.size());
  for (const auto &r : rows) out.push_back(r.values[col].cat);
  return out;
}

}  // namespace detail

// Per-column divergence between real and synthetic rows, in schema order.
// Every schema column participates, the target included.
inline std::vector<std::pair<std::string, double>> per_column_divergence(
    const std::vector<Record> &real, const std::vector<Record> &syn,
    const TableSchema &schema) {
  if (real.empty() || syn.empty())
    throw DataError("column divergence: empty dataset");
  std::vector<std::pair<std::string, double>> out;
  for (size_t c = 0; c < schema.columns.size(); ++c) {
    const auto &col = schema.columns[c];
    double d;
    if (col.kind == ColumnKind::kNumeric)
      d = ks_statistic(detail::numeric_column(real, c),
                       detail::numeric_column(syn, c));
    else
      d = tv_distance(detail::categorical_column(real, c),
                      detail::categorical_column(syn, c));
    out.push_back({col.name, d});
  }
  return out;
}

// Column density score: 100 * mean per-column divergence. 0 means the
// synthetic marginals match the real ones exactly; lower is better.
inline double rho(const std::vector<Record> &real,
                  const std::vector<Record> &syn, const TableSchema &schema) {
  const auto cols = per_column_divergence(real, syn, schema);
  double acc = 0;
  for (auto &[name, d] : cols) acc += d;
  return 100.0 * acc / double(cols.size());
}

// Feature encoding shared by the privacy and efficacy metrics: categoricals
// one-hot over the schema vocabulary, numerics min-max scaled with the range
// fit on a reference set. Zero-range numerics encode as the constant 0.5;
// out-of-range values extrapolate unclamped.
class ColumnEncoder {
 public:
  ColumnEncoder(const TableSchema &schema, const std::vector<Record> &fit_rows,
                bool skip_target = false)
      : schema_(schema), skip_target_(skip_target) {
    if (fit_rows.empty()) throw DataError("column encoder: empty fit set");
    lo_.assign(schema.columns.size(), 0.0);
    hi_.assign(schema.columns.size(), 0.0);
    for (size_t c = 0; c < schema.columns.size(); ++c) {
      if (schema.columns[c].kind != ColumnKind::kNumeric) continue;
      double lo = fit_rows[0].values[c].num, hi = lo;
      for (const auto &r : fit_rows) {
        lo = std::min(lo, r.values[c].num);
        hi = std::max(hi, r.values[c].num);
      }
      lo_[c] = lo;
      hi_[c] = hi;
    }
    dim_ = 0;
    for (size_t c = 0; c < schema.columns.size(); ++c) {
      if (skips(c)) continue;
      dim_ += schema.columns[c].kind == ColumnKind::kNumeric
                  ? 1
                  : int64_t(schema.columns[c].categories.size());
    }
  }

  int64_t dim() const { return dim_; }

  std::vector<double> encode(const Record &r) const {
    std::vector<double> out;
    out.reserve(size_t(dim_));
    for (size_t c = 0; c < schema_.columns.size(); ++c) {
      if (skips(c)) continue;
      const auto &col = schema_.columns[c];
      if (col.kind == ColumnKind::kNumeric) {
        const double range = hi_[c] - lo_[c];
        out.push_back(range > 0 ? (r.values[c].num - lo_[c]) / range : 0.5);
      } else {
        for (const auto &cat : col.categories)
          out.push_back(r.values[c].cat == cat ? 1.0 : 0.0);
      }
    }
    return out;
  }

 private:
  bool skips(size_t c) const {
    return skip_target_ && schema_.columns[c].name == schema_.target;
  }

  TableSchema schema_;
  bool skip_target_;
  std::vector<double> lo_, hi_;
  int64_t dim_ = 0;
};

// Distance to closest record: per synthetic row, the minimum L1 distance to
// any training row in encoded feature space. Zero means an exact copy.
inline std::vector<double> dcr(const std::vector<Record> &synthetic,
                               const std::vector<Record> &train,
                               const TableSchema &schema) {
  if (synthetic.empty() || train.empty())
    throw DataError("dcr: empty dataset");
  ColumnEncoder enc(schema, train);
  std::vector<std::vector<double>> train_enc;
  train_enc.reserve(train.size());
  for (const auto &r : train) train_enc.push_back(enc.encode(r));
  std::vector<double> out;
  out.reserve(synthetic.size());
  for (const auto &r : synthetic) {
    const auto e = enc.encode(r);
    double best = std::numeric_limits<double>::infinity();
    for (const auto &t : train_enc) {
      double d = 0;
      for (size_t j = 0; j < e.size(); ++j) d += std::abs(e[j] - t[j]);
      best = std::min(best, d);
    }
    out.push_back(best);
  }
  return out;
}

// ---- machine-learning efficacy ---------------------------------------------

struct MleResult {
  bool ok = false;
  std::string metric;  // "auc" or "rmse"
  double value = 0;
  std::string error;  // set when ok is false
};

namespace detail {

// Rows sorted lexicographically by features then label, so the fitted model
// is a function of the multiset of rows rather than their order.
struct LabeledRow {
  std::vector<double> x;
  double y;
  bool operator<(const LabeledRow &o) const {
    if (x != o.x) return x < o.x;
    return y < o.y;
  }
};

inline std::vector<LabeledRow> encode_labeled(const std::vector<Record> &rows,
                                              const TableSchema &schema,
                                              const ColumnEncoder &enc) {
  const size_t target = size_t(schema.column_index(schema.target));
  const auto &tcol = schema.columns[target];
  std::vector<LabeledRow> out;
  out.reserve(rows.size());
  for (const auto &r : rows) {
    LabeledRow lr;
    lr.x = enc.encode(r);
    if (tcol.kind == ColumnKind::kNumeric) {
      lr.y = r.values[target].num;
    } else {
      if (tcol.categories.size() != 2)
        throw MetricError("mle: classification target must be binary");
      lr.y = r.values[target].cat == tcol.categories[1] ? 1.0 : 0.0;
    }
    out.push_back(std::move(lr));
  }
  return out;
}

// Full-batch gradient descent on mean loss; runs until the loss stops moving.
template <typename GradFn>
void gd_fit(std::vector<double> &w, double &b, const GradFn &grad_step,
            double lr, int max_iters) {
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iters; ++it) {
    const double loss = grad_step(w, b, lr);
    if (!std::isfinite(loss)) throw MetricError("mle: diverged");
    if (std::abs(prev - loss) < 1e-12 * std::max(1.0, std::abs(prev))) break;
    prev = loss;
  }
}

// Mann-Whitney AUC with midrank ties.
inline double auc_from_scores(const std::vector<double> &scores,
                              const std::vector<double> &labels) {
  std::vector<size_t> idx(scores.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0;
  size_t n_pos = 0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * (double(i + 1) + double(j));
    for (size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1.0) rank_sum_pos += midrank;
    i = j;
  }
  for (double l : labels) n_pos += (l == 1.0);
  const size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw MetricError("mle: test labels are single-class, auc undefined");
  return (rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0) /
         (double(n_pos) * double(n_neg));
}

}  // namespace detail

// Fits a linear model on `train` with full-batch gradient descent and scores
// it on `test`: logistic regression / AUC for a binary categorical target,
// linear regression / RMSE for a numeric one. The feature encoding is fit on
// the union of both sets so either side may introduce a wider numeric range.
// Degenerate label sets come back flagged instead of thrown.
inline MleResult mle(const std::vector<Record> &train,
                     const std::vector<Record> &test,
                     const TableSchema &schema) {
  if (train.empty() || test.empty())
    throw DataError("mle: empty train or test set");
  const auto &tcol =
      schema.columns[size_t(schema.column_index(schema.target))];
  const bool classify = tcol.kind == ColumnKind::kCategorical;

  MleResult res;
  res.metric = classify ? "auc" : "rmse";

  std::vector<Record> fit_union = train;
  fit_union.insert(fit_union.end(), test.begin(), test.end());
  ColumnEncoder enc(schema, fit_union, /*skip_target=*/true);

  std::vector<detail::LabeledRow> tr, te;
  try {
    tr = detail::encode_labeled(train, schema, enc);
    te = detail::encode_labeled(test, schema, enc);
  } catch (const MetricError &e) {
    res.error = e.what();
    return res;
  }
  std::sort(tr.begin(), tr.end());

  if (classify) {
    bool has0 = false, has1 = false;
    for (const auto &r : tr) (r.y == 1.0 ? has1 : has0) = true;
    if (!has0 || !has1) {
      res.error = "training labels are single-class";
      return res;
    }
  }

  const int64_t d = enc.dim();
  std::vector<double> w(size_t(d), 0.0);
  double b = 0;
  const double n = double(tr.size());

  if (classify) {
    auto step = [&](std::vector<double> &wv, double &bv, double lr) {
      std::vector<double> gw(wv.size(), 0.0);
      double gb = 0, loss = 0;
      for (const auto &r : tr) {
        double z = bv;
        for (size_t j = 0; j < wv.size(); ++j) z += wv[j] * r.x[j];
        const double p = 1.0 / (1.0 + std::exp(-z));
        const double e = p - r.y;
        for (size_t j = 0; j < wv.size(); ++j) gw[j] += e * r.x[j];
        gb += e;
        loss += r.y == 1.0 ? -std::log(std::max(p, 1e-300))
                           : -std::log(std::max(1.0 - p, 1e-300));
      }
      for (size_t j = 0; j < wv.size(); ++j) wv[j] -= lr * gw[j] / n;
      bv -= lr * gb / n;
      return loss / n;
    };
    try {
      detail::gd_fit(w, b, step, 1.0, 5000);
      std::vector<double> scores, labels;
      for (const auto &r : te) {
        double z = b;
        for (size_t j = 0; j < w.size(); ++j) z += w[j] * r.x[j];
        scores.push_back(z);
        labels.push_back(r.y);
      }
      res.value = detail::auc_from_scores(scores, labels);
      res.ok = true;
    } catch (const MetricError &e) {
      res.error = e.what();
    }
    return res;
  }

  // Regression: center the target for conditioning, report RMSE in raw units.
  double y_mean = 0;
  for (const auto &r : tr) y_mean += r.y;
  y_mean /= n;
  auto step = [&](std::vector<double> &wv, double &bv, double lr) {
    std::vector<double> gw(wv.size(), 0.0);
    double gb = 0, loss = 0;
    for (const auto &r : tr) {
      double z = bv;
      for (size_t j = 0; j < wv.size(); ++j) z += wv[j] * r.x[j];
      const double e = z - (r.y - y_mean);
      for (size_t j = 0; j < wv.size(); ++j) gw[j] += e * r.x[j];
      gb += e;
      loss += e * e;
    }
    for (size_t j = 0; j < wv.size(); ++j) wv[j] -= lr * gw[j] / n;
    bv -= lr * gb / n;
    return loss / n;
  };
  try {
    detail::gd_fit(w, b, step, 0.5, 5000);
  } catch (const MetricError &e) {
    res.error = e.what();
    return res;
  }
  double se = 0;
  for (const auto &r : te) {
    double z = b + y_mean;
    for (size_t j = 0; j < w.size(); ++j) z += w[j] * r.x[j];
    se += (z - r.y) * (z - r.y);
  }
  res.value = std::sqrt(se / double(te.size()));
  res.ok = true;
  return res;
}

// ---- report ------------------------------------------------------------------

struct EvalReport {
  std::vector<std::pair<std::string, double>> per_column;
  double rho_value = 0;
  MleResult mle_synthetic;  // model fit on synthetic rows
  MleResult mle_real;       // baseline fit on real training rows
  std::vector<double> dcr_values;
  double dcr_min = 0;
  int64_t exact_copies = 0;   // dcr == 0 entries
  int64_t copies_removed = 0; // dropped by dedup before evaluation
  uint64_t seed = 0;
  json config;  // snapshot of the run configuration
};

inline EvalReport evaluate(const std::vector<Record> &real_train,
                           const std::vector<Record> &real_test,
                           const std::vector<Record> &synthetic,
                           const TableSchema &schema) {
  EvalReport rep;
  rep.per_column = per_column_divergence(real_test, synthetic, schema);
  double acc = 0;
  for (auto &[n, d] : rep.per_column) acc += d;
  rep.rho_value = 100.0 * acc / double(rep.per_column.size());
  rep.mle_synthetic = mle(synthetic, real_test, schema);
  rep.mle_real = mle(real_train, real_test, schema);
  rep.dcr_values = dcr(synthetic, real_train, schema);
  rep.dcr_min = *std::min_element(rep.dcr_values.begin(),
                                  rep.dcr_values.end());
  for (double d : rep.dcr_values) rep.exact_copies += (d == 0.0);
  return rep;
}

namespace detail {

inline nlohmann::ordered_json mle_to_json(const MleResult &m) {
  nlohmann::ordered_json j;
  j["ok"] = m.ok;
  j["metric"] = m.metric;
  if (m.ok)
    j["value"] = m.value;
  else
    j["error"] = m.error;
  return j;
}

}  // namespace detail

// Deterministic serialization: given equal report contents the emitted bytes
// are equal. DCR values are summarized, the full list goes to the histogram.
inline std::string report_to_json(const EvalReport &r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["rho"] = r.rho_value;
  nlohmann::ordered_json cols;
  for (auto &[name, d] : r.per_column) cols[name] = d;
  j["per_column"] = cols;
  j["mle_synthetic"] = detail::mle_to_json(r.mle_synthetic);
  j["mle_real"] = detail::mle_to_json(r.mle_real);
  j["dcr_min"] = r.dcr_min;
  j["dcr_mean"] = r.dcr_values.empty()
                      ? 0.0
                      : std::accumulate(r.dcr_values.begin(),
                                        r.dcr_values.end(), 0.0) /
                            double(r.dcr_values.size());
  j["exact_copies"] = r.exact_copies;
  j["copies_removed"] = r.copies_removed;
  j["n_synthetic"] = r.dcr_values.size();
  j["config"] = r.config;
  return j.dump(2) + "\n";
}

// Histogram of DCR values as CSV (bin_lo, bin_hi, count) for quick plotting.
inline void export_dcr_histogram(const std::string &path,
                                 const std::vector<double> &values,
                                 int n_bins = 20) {
  if (n_bins < 1) throw ConfigError("dcr histogram: need at least one bin");
  if (values.empty()) throw DataError("dcr histogram: no values");
  const double hi = *std::max_element(values.begin(), values.end());
  const double width = hi > 0 ? hi / double(n_bins) : 1.0;
  std::vector<int64_t> counts(size_t(n_bins), 0);
  for (double v : values) {
    int64_t b = int64_t(v / width);
    if (b >= n_bins) b = n_bins - 1;
    counts[size_t(b)] += 1;
  }
  std::string out = "bin_lo,bin_hi,count\n";
  for (int i = 0; i < n_bins; ++i) {
    out += render_number(double(i) * width) + "," +
           render_number(double(i + 1) * width) + "," +
           std::to_string(counts[size_t(i)]) + "\n";
  }
  write_file(path, out);
}

}  // namespace difflm
