#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "difflm/eval.hpp"
#include "testutil.hpp"

using namespace difflm;

namespace {

Value num(double v) {
  Value x;
  x.is_number = true;
  x.num = v;
  return x;
}

Value cat(const std::string &c) {
  Value x;
  x.is_number = false;
  x.cat = c;
  return x;
}

// ---- independent oracles ----------------------------------------------------

double ks_brute(const std::vector<double> &a, const std::vector<double> &b) {
  auto ecdf = [](const std::vector<double> &v, double x) {
    size_t c = 0;
    for (double u : v) c += (u <= x);
    return double(c) / double(v.size());
  };
  double sup = 0;
  for (double x : a) sup = std::max(sup, std::abs(ecdf(a, x) - ecdf(b, x)));
  for (double x : b) sup = std::max(sup, std::abs(ecdf(a, x) - ecdf(b, x)));
  return sup;
}

double tvd_brute(const std::vector<std::string> &a,
                 const std::vector<std::string> &b) {
  std::set<std::string> cats(a.begin(), a.end());
  cats.insert(b.begin(), b.end());
  double d = 0;
  for (const auto &c : cats) {
    double pa = 0, pb = 0;
    for (const auto &x : a) pa += (x == c);
    for (const auto &x : b) pb += (x == c);
    d += std::abs(pa / double(a.size()) - pb / double(b.size()));
  }
  return 0.5 * d;
}

// Hand-rolled encoding + quadratic min-L1, independent of ColumnEncoder.
std::vector<double> dcr_brute(const std::vector<Record> &syn,
                              const std::vector<Record> &train,
                              const TableSchema &schema) {
  std::vector<double> lo(schema.columns.size()), hi(schema.columns.size());
  for (size_t c = 0; c < schema.columns.size(); ++c) {
    if (schema.columns[c].kind != ColumnKind::kNumeric) continue;
    lo[c] = hi[c] = train[0].values[c].num;
    for (const auto &r : train) {
      lo[c] = std::min(lo[c], r.values[c].num);
      hi[c] = std::max(hi[c], r.values[c].num);
    }
  }
  auto enc = [&](const Record &r) {
    std::vector<double> e;
    for (size_t c = 0; c < schema.columns.size(); ++c) {
      const auto &col = schema.columns[c];
      if (col.kind == ColumnKind::kNumeric) {
        const double range = hi[c] - lo[c];
        e.push_back(range > 0 ? (r.values[c].num - lo[c]) / range : 0.5);
      } else {
        for (const auto &cc : col.categories)
          e.push_back(r.values[c].cat == cc ? 1.0 : 0.0);
      }
    }
    return e;
  };
  std::vector<double> out;
  for (const auto &s : syn) {
    const auto es = enc(s);
    double best = std::numeric_limits<double>::infinity();
    for (const auto &t : train) {
      const auto et = enc(t);
      double d = 0;
      for (size_t j = 0; j < es.size(); ++j) d += std::abs(es[j] - et[j]);
      best = std::min(best, d);
    }
    out.push_back(best);
  }
  return out;
}

// ---- fixtures ---------------------------------------------------------------

TableSchema mixed_schema() {
  TableSchema s;
  s.columns = {
      {"x1", ColumnKind::kNumeric, {}, false, 0, 0},
      {"x2", ColumnKind::kNumeric, {}, false, 0, 0},
      {"c1", ColumnKind::kCategorical, {"a", "b", "c"}, false, 0, 0},
      {"y", ColumnKind::kCategorical, {"no", "yes"}, false, 0, 0},
  };
  s.target = "y";
  s.task = TaskKind::kBinaryClassification;
  s.validate();
  return s;
}

Record mixed_record(double x1, double x2, const std::string &c1,
                    const std::string &y) {
  Record r;
  r.values = {num(x1), num(x2), cat(c1), cat(y)};
  return r;
}

std::vector<Record> random_mixed_rows(Rng &rng, size_t n) {
  std::vector<Record> out;
  const char *cats[3] = {"a", "b", "c"};
  const char *ys[2] = {"no", "yes"};
  for (size_t i = 0; i < n; ++i)
    out.push_back(mixed_record(rng.uniform(-3.0, 3.0),
                               rng.uniform(0.0, 100.0),
                               cats[rng.uniform_int(3)],
                               ys[rng.uniform_int(2)]));
  return out;
}

// ---- ks ----------------------------------------------------------------------

TEST(Ks, LiteralFixture) {
  EXPECT_DOUBLE_EQ(ks_statistic({1, 2, 3, 4}, {1, 2, 3, 10}), 0.25);
}

TEST(Ks, IdenticalZeroDisjointOne) {
  std::vector<double> a = {3.0, 1.0, 2.0, 2.0};
  EXPECT_DOUBLE_EQ(ks_statistic(a, a), 0.0);
  EXPECT_DOUBLE_EQ(ks_statistic({1, 2}, {5, 6, 7}), 1.0);
}

TEST(Ks, SymmetricAndBounded) {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> a, b;
    for (size_t i = 0; i < 3 + rng.uniform_int(20); ++i)
      a.push_back(rng.uniform(-2.0, 2.0));
    for (size_t i = 0; i < 3 + rng.uniform_int(20); ++i)
      b.push_back(std::floor(rng.uniform(-4.0, 4.0)));  // force ties
    const double d1 = ks_statistic(a, b);
    EXPECT_DOUBLE_EQ(d1, ks_statistic(b, a));
    EXPECT_GE(d1, 0.0);
    EXPECT_LE(d1, 1.0);
  }
}

TEST(Ks, EmptyThrows) {
  EXPECT_THROW(ks_statistic({}, {1.0}), DataError);
  EXPECT_THROW(ks_statistic({1.0}, {}), DataError);
}

// ---- tvd ---------------------------------------------------------------------

TEST(Tvd, LiteralFixture) {
  EXPECT_DOUBLE_EQ(tv_distance({"A", "A", "A", "B"}, {"A", "B", "B", "B"}),
                   0.5);
}

TEST(Tvd, IdenticalZeroDisjointOne) {
  std::vector<std::string> a = {"x", "y", "x"};
  EXPECT_DOUBLE_EQ(tv_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(tv_distance({"x", "x"}, {"y", "z"}), 1.0);
}

TEST(Tvd, EmptyThrows) {
  EXPECT_THROW(tv_distance({}, {"a"}), DataError);
}

// ---- rho ---------------------------------------------------------------------

TEST(Rho, CompositionFixture) {
  TableSchema s;
  s.columns = {
      {"v", ColumnKind::kNumeric, {}, false, 0, 0},
      {"y", ColumnKind::kCategorical, {"A", "B"}, false, 0, 0},
  };
  s.target = "y";
  s.task = TaskKind::kBinaryClassification;
  // KS component 0.25 and TVD component 0.5: rho = 100 * (0.25 + 0.5) / 2.
  std::vector<Record> real, syn;
  const double rv[4] = {1, 2, 3, 4}, sv[4] = {1, 2, 3, 10};
  const char *rc[4] = {"A", "A", "A", "B"};
  const char *sc[4] = {"A", "B", "B", "B"};
  for (int i = 0; i < 4; ++i) {
    Record r, q;
    r.values = {num(rv[i]), cat(rc[i])};
    q.values = {num(sv[i]), cat(sc[i])};
    real.push_back(r);
    syn.push_back(q);
  }
  EXPECT_DOUBLE_EQ(rho(real, syn, s), 37.5);
  EXPECT_DOUBLE_EQ(rho(real, real, s), 0.0);

  const auto cols = per_column_divergence(real, syn, s);
  ASSERT_EQ(cols.size(), 2u);
  EXPECT_EQ(cols[0].first, "v");
  EXPECT_DOUBLE_EQ(cols[0].second, 0.25);
  EXPECT_EQ(cols[1].first, "y");
  EXPECT_DOUBLE_EQ(cols[1].second, 0.5);
}

TEST(Rho, SelfIsExactlyZero) {
  Rng rng(17);
  const auto s = mixed_schema();
  auto rows = random_mixed_rows(rng, 40);
  EXPECT_EQ(rho(rows, rows, s), 0.0);
}

// ---- randomized brute-force agreement ----------------------------------------

TEST(Metrics, MatchBruteForceOnRandomFixtures) {
  Rng rng(99);
  const auto schema = mixed_schema();
  for (int trial = 0; trial < 200; ++trial) {
    const size_t na = 5 + rng.uniform_int(45);
    const size_t nb = 5 + rng.uniform_int(45);
    auto real = random_mixed_rows(rng, na);
    auto syn = random_mixed_rows(rng, nb);
    // Occasionally force duplicates and ties across the sets.
    if (trial % 3 == 0) syn[0] = real[0];
    if (trial % 5 == 0)
      syn[1].values[0] = real[1 % na].values[0];

    for (size_t c = 0; c < 2; ++c) {
      std::vector<double> a, b;
      for (const auto &r : real) a.push_back(r.values[c].num);
      for (const auto &r : syn) b.push_back(r.values[c].num);
      ASSERT_NEAR(ks_statistic(a, b), ks_brute(a, b), 1e-12);
    }
    for (size_t c = 2; c < 4; ++c) {
      std::vector<std::string> a, b;
      for (const auto &r : real) a.push_back(r.values[c].cat);
      for (const auto &r : syn) b.push_back(r.values[c].cat);
      ASSERT_NEAR(tv_distance(a, b), tvd_brute(a, b), 1e-12);
    }
    const auto fast = dcr(syn, real, schema);
    const auto slow = dcr_brute(syn, real, schema);
    ASSERT_EQ(fast.size(), slow.size());
    for (size_t i = 0; i < fast.size(); ++i)
      ASSERT_NEAR(fast[i], slow[i], 1e-12);
  }
}

// ---- dcr ---------------------------------------------------------------------

TEST(Dcr, ZeroIffExactCopyAndOneHotFlip) {
  const auto s = mixed_schema();
  std::vector<Record> train = {
      mixed_record(0.0, 0.0, "a", "no"),
      mixed_record(1.0, 10.0, "b", "yes"),
  };
  // Exact copy of a train row.
  auto d = dcr({train[1]}, train, s);
  EXPECT_EQ(d[0], 0.0);
  // Categorical flip only: one-hot L1 distance is exactly 2.
  auto flipped = train[1];
  flipped.values[2] = cat("c");
  d = dcr({flipped}, train, s);
  EXPECT_DOUBLE_EQ(d[0], 2.0);
  // Not a copy: strictly positive.
  auto shifted = train[1];
  shifted.values[0] = num(0.5);
  d = dcr({shifted}, train, s);
  EXPECT_GT(d[0], 0.0);
}

TEST(Dcr, ZeroRangeColumnEncodesConstant) {
  const auto s = mixed_schema();
  std::vector<Record> train = {
      mixed_record(7.0, 0.0, "a", "no"),
      mixed_record(7.0, 10.0, "b", "yes"),
  };
  // x1 range is zero in train, so any x1 value encodes to 0.5 and the
  // distance ignores the column entirely.
  auto probe = train[0];
  probe.values[0] = num(1234.0);
  auto d = dcr({probe}, train, s);
  EXPECT_EQ(d[0], 0.0);
}

TEST(Dcr, OutOfRangeExtrapolatesUnclamped) {
  const auto s = mixed_schema();
  std::vector<Record> train = {
      mixed_record(0.0, 0.0, "a", "no"),
      mixed_record(10.0, 10.0, "a", "no"),
  };
  auto far = train[0];
  far.values[0] = num(30.0);  // encodes to 3.0, two beyond the max
  auto d = dcr({far}, train, s);
  // |3.0 - 0.0| to the first row, |3.0 - 1.0| + |0.0 - 1.0| to the second.
  // A clamped encoding would report 1.0 instead.
  EXPECT_DOUBLE_EQ(d[0], 3.0);
}

// ---- mle ----------------------------------------------------------------------

std::vector<Record> labeled_rows(Rng &rng, size_t n, double flip_prob) {
  // y depends on x1 through a threshold; x2 and c1 are noise.
  std::vector<Record> out;
  const char *cats[3] = {"a", "b", "c"};
  for (size_t i = 0; i < n; ++i) {
    const double x1 = rng.uniform(0.0, 1.0);
    bool yes = x1 > 0.5;
    if (rng.uniform() < flip_prob) yes = !yes;
    out.push_back(mixed_record(x1, rng.uniform(0.0, 1.0),
                               cats[rng.uniform_int(3)],
                               yes ? "yes" : "no"));
  }
  return out;
}

TEST(Mle, LearnableSignalGivesHighAuc) {
  Rng rng(7);
  const auto s = mixed_schema();
  auto train = labeled_rows(rng, 300, 0.05);
  auto test = labeled_rows(rng, 200, 0.05);
  auto res = mle(train, test, s);
  ASSERT_TRUE(res.ok) << res.error;
  EXPECT_EQ(res.metric, "auc");
  EXPECT_GT(res.value, 0.9);
}

TEST(Mle, IndependentLabelsGiveChanceAuc) {
  Rng rng(8);
  const auto s = mixed_schema();
  auto train = random_mixed_rows(rng, 400);  // labels independent of features
  auto test = random_mixed_rows(rng, 400);
  auto res = mle(train, test, s);
  ASSERT_TRUE(res.ok) << res.error;
  EXPECT_NEAR(res.value, 0.5, 0.05);
}

TEST(Mle, SingleClassTrainFlaggedNotThrown) {
  Rng rng(9);
  const auto s = mixed_schema();
  auto train = random_mixed_rows(rng, 50);
  for (auto &r : train) r.values[3] = cat("yes");
  auto test = random_mixed_rows(rng, 50);
  auto res = mle(train, test, s);
  EXPECT_FALSE(res.ok);
  EXPECT_FALSE(res.error.empty());
  EXPECT_EQ(res.metric, "auc");
}

TEST(Mle, SingleClassTestFlaggedNotThrown) {
  Rng rng(10);
  const auto s = mixed_schema();
  auto train = random_mixed_rows(rng, 50);
  auto test = random_mixed_rows(rng, 50);
  for (auto &r : test) r.values[3] = cat("no");
  auto res = mle(train, test, s);
  EXPECT_FALSE(res.ok);
  EXPECT_FALSE(res.error.empty());
}

TEST(Mle, OrderInvariantToTheByte) {
  Rng rng(11);
  const auto s = mixed_schema();
  auto train = labeled_rows(rng, 120, 0.1);
  auto test = labeled_rows(rng, 80, 0.1);
  auto res1 = mle(train, test, s);
  std::reverse(train.begin(), train.end());
  Rng sh(3);
  sh.shuffle(train);
  auto res2 = mle(train, test, s);
  ASSERT_TRUE(res1.ok && res2.ok);
  EXPECT_EQ(res1.value, res2.value);
}

TableSchema regression_schema() {
  TableSchema s;
  s.columns = {
      {"x", ColumnKind::kNumeric, {}, false, 0, 0},
      {"y", ColumnKind::kNumeric, {}, false, 0, 0},
  };
  s.target = "y";
  s.task = TaskKind::kRegression;
  s.validate();
  return s;
}

TEST(Mle, RegressionRecoversLinearSignal) {
  Rng rng(12);
  const auto s = regression_schema();
  std::vector<Record> train, test;
  for (int i = 0; i < 300; ++i) {
    const double x = rng.uniform(0.0, 1.0);
    Record r;
    r.values = {num(x), num(3.0 * x + 0.05 * rng.gaussian())};
    (i < 200 ? train : test).push_back(r);
  }
  auto res = mle(train, test, s);
  ASSERT_TRUE(res.ok) << res.error;
  EXPECT_EQ(res.metric, "rmse");
  EXPECT_LT(res.value, 0.1);  // close to the noise floor
}

TEST(Mle, ConstantPredictionMatchesTestStd) {
  Rng rng(13);
  const auto s = regression_schema();
  std::vector<Record> test;
  double y_sum = 0;
  for (int i = 0; i < 200; ++i) {
    const double y = 5.0 + 2.0 * rng.gaussian();
    Record r;
    r.values = {num(rng.uniform(0.0, 1.0)), num(y)};
    test.push_back(r);
    y_sum += y;
  }
  const double y_mean = y_sum / 200.0;
  double var = 0;
  for (const auto &r : test) {
    const double d = r.values[1].num - y_mean;
    var += d * d;
  }
  const double y_std = std::sqrt(var / 200.0);

  // Synthetic rows whose target is the constant mean of the real test set:
  // the best the model can do is predict that constant, so RMSE equals the
  // test-set standard deviation.
  std::vector<Record> train;
  for (int i = 0; i < 100; ++i) {
    Record r;
    r.values = {num(rng.uniform(0.0, 1.0)), num(y_mean)};
    train.push_back(r);
  }
  auto res = mle(train, test, s);
  ASSERT_TRUE(res.ok) << res.error;
  EXPECT_NEAR(res.value, y_std, 0.02 * y_std);
}

// ---- report -------------------------------------------------------------------

TEST(Report, EvaluatePopulatesAllFields) {
  Rng rng(14);
  const auto s = mixed_schema();
  auto train = labeled_rows(rng, 100, 0.1);
  auto test = labeled_rows(rng, 60, 0.1);
  auto syn = labeled_rows(rng, 80, 0.1);
  syn[0] = train[0];  // one exact copy

  auto rep = evaluate(train, test, syn, s);
  ASSERT_EQ(rep.per_column.size(), 4u);
  EXPECT_GE(rep.rho_value, 0.0);
  EXPECT_TRUE(rep.mle_synthetic.ok);
  EXPECT_TRUE(rep.mle_real.ok);
  ASSERT_EQ(rep.dcr_values.size(), syn.size());
  EXPECT_EQ(rep.dcr_min, 0.0);
  EXPECT_GE(rep.exact_copies, 1);

  const std::string j1 = report_to_json(rep);
  const std::string j2 = report_to_json(rep);
  EXPECT_EQ(j1, j2);
  EXPECT_NE(j1.find("\"rho\""), std::string::npos);
  EXPECT_NE(j1.find("\"mle_synthetic\""), std::string::npos);
  EXPECT_NE(j1.find("\"dcr_min\""), std::string::npos);

  // Identical synthetic and test sets: rho exactly 0.
  auto self_rep = evaluate(train, test, test, s);
  EXPECT_EQ(self_rep.rho_value, 0.0);
}

TEST(Report, DcrHistogramBinsSumToCount) {
  testutil::TempDir dir("hist");
  const std::string path = (dir.path() / "h.csv").string();
  std::vector<double> vals;
  Rng rng(15);
  for (int i = 0; i < 500; ++i) vals.push_back(rng.uniform(0.0, 4.0));
  export_dcr_histogram(path, vals, 10);
  auto lines = read_lines(path);
  ASSERT_EQ(lines.size(), 11u);
  EXPECT_EQ(lines[0], "bin_lo,bin_hi,count");
  int64_t total = 0;
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto p = lines[i].rfind(',');
    total += std::stoll(lines[i].substr(p + 1));
  }
  EXPECT_EQ(total, 500);
  EXPECT_THROW(export_dcr_histogram(path, {}, 10), DataError);
  EXPECT_THROW(export_dcr_histogram(path, vals, 0), ConfigError);
}

}  // namespace
