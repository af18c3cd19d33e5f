#pragma once

// Synthetic tabular benchmark: two categorical columns, two numeric columns
// drawn from Gaussians whose mean depends on the paired categorical (so the
// joint structure is not a product of marginals), and a binary target driven
// by one numeric and one categorical column, which gives a linear classifier
// real signal to find.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "difflm/data.hpp"
#include "difflm/rng.hpp"

namespace difflm {

inline TableSchema toy_schema() {
  TableSchema s;
  s.columns = {
      {"c1", ColumnKind::kCategorical, {"red", "green", "blue"}, false, 0, 0},
      {"c2",
       ColumnKind::kCategorical,
       {"north", "south", "east", "west"},
       false, 0, 0},
      {"x1", ColumnKind::kNumeric, {}, false, 0, 0},
      {"x2", ColumnKind::kNumeric, {}, false, 0, 0},
      {"y", ColumnKind::kCategorical, {"no", "yes"}, false, 0, 0},
  };
  s.target = "y";
  s.task = TaskKind::kBinaryClassification;
  s.validate();
  return s;
}

namespace detail {

inline size_t pick_weighted(Rng &rng, const std::vector<double> &w) {
  double u = rng.uniform();
  for (size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0) return i;
  }
  return w.size() - 1;
}

inline double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

}  // namespace detail

inline std::vector<Record> make_toy_dataset(size_t n, Rng &rng) {
  const std::vector<double> p1 = {0.5, 0.3, 0.2};
  const std::vector<double> p2 = {0.4, 0.3, 0.2, 0.1};
  const double mu1[3] = {-2.0, 0.0, 2.0};
  const double mu2[4] = {-3.0, -1.0, 1.0, 3.0};
  const double bias1[3] = {0.75, 0.0, -0.75};
  const auto schema = toy_schema();

  std::vector<Record> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const size_t a = detail::pick_weighted(rng, p1);
    const size_t b = detail::pick_weighted(rng, p2);
    const double x1 = detail::round3(mu1[a] + 0.5 * rng.gaussian());
    const double x2 = detail::round3(mu2[b] + 0.5 * rng.gaussian());
    const double logit = 1.5 * x1 + bias1[a];
    const bool yes = rng.uniform() < 1.0 / (1.0 + std::exp(-logit));

    Record r;
    Value v1, v2, n1, n2, t;
    v1.cat = schema.columns[0].categories[a];
    v2.cat = schema.columns[1].categories[b];
    n1.is_number = true;
    n1.num = x1;
    n2.is_number = true;
    n2.num = x2;
    t.cat = yes ? "yes" : "no";
    r.values = {v1, v2, n1, n2, t};
    out.push_back(std::move(r));
  }
  return out;
}

// Writes toy.csv and toy_schema.json under dir; returns the two paths.
inline std::pair<std::string, std::string> write_toy_dataset(
    const std::string &dir, size_t n, uint64_t seed) {
  std::filesystem::create_directories(dir);
  Rng rng(seed);
  const auto schema = toy_schema();
  const auto rows = make_toy_dataset(n, rng);
  const std::string csv = dir + "/toy.csv";
  const std::string sj = dir + "/toy_schema.json";
  save_csv(csv, rows, schema);
  write_file(sj, schema_to_json(schema).dump(2) + "\n");
  return {csv, sj};
}

}  // namespace difflm
