#pragma once

// Tabular data layer: typed schemas, records, CSV input, canonical JSON
// serialization, byte-level tokenization and split/dedup utilities.
//
// Canonical JSON is the contract everything else leans on: keys in schema
// order, no whitespace, numbers rendered shortest-round-trip. Two records are
// equal iff their canonical strings are equal, so generation, dedup and
// checkpointed sample files can compare bytes.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "difflm/error.hpp"
#include "difflm/rng.hpp"

namespace difflm {

using json = nlohmann::json;

// ---- schema -----------------------------------------------------------------

enum class ColumnKind { kNumeric, kCategorical };
enum class TaskKind { kBinaryClassification, kRegression };

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
  std::vector<std::string> categories;  // categorical only
  bool has_range = false;               // optional numeric bounds
  double range_min = 0.0, range_max = 0.0;
};

struct TableSchema {
  std::vector<Column> columns;
  std::string target;
  TaskKind task = TaskKind::kBinaryClassification;

  int64_t column_index(const std::string &name) const {
    for (size_t i = 0; i < columns.size(); ++i)
      if (columns[i].name == name) return static_cast<int64_t>(i);
    return -1;
  }

  void validate() const {
    if (columns.empty()) throw ConfigError("schema: no columns");
    std::unordered_set<std::string> seen;
    for (const auto &c : columns) {
      if (c.name.empty()) throw ConfigError("schema: empty column name");
      if (!seen.insert(c.name).second)
        throw ConfigError("schema: duplicate column '" + c.name + "'");
      if (c.kind == ColumnKind::kCategorical) {
        if (c.categories.empty())
          throw ConfigError("schema: column '" + c.name + "' has no categories");
        std::unordered_set<std::string> cats(c.categories.begin(),
                                             c.categories.end());
        if (cats.size() != c.categories.size())
          throw ConfigError("schema: column '" + c.name +
                            "' has duplicate categories");
      } else if (c.has_range && !(c.range_min <= c.range_max)) {
        throw ConfigError("schema: column '" + c.name + "' has inverted range");
      }
    }
    const int64_t t = column_index(target);
    if (t < 0) throw ConfigError("schema: target '" + target + "' not a column");
    const Column &tc = columns[static_cast<size_t>(t)];
    if (task == TaskKind::kBinaryClassification) {
      if (tc.kind != ColumnKind::kCategorical || tc.categories.size() != 2)
        throw ConfigError(
            "schema: binary classification target must be categorical with "
            "exactly 2 categories");
    } else if (tc.kind != ColumnKind::kNumeric) {
      throw ConfigError("schema: regression target must be numeric");
    }
  }
};

inline TableSchema schema_from_json(const json &j) {
  TableSchema s;
  if (!j.is_object() || !j.contains("columns") || !j["columns"].is_array())
    throw ConfigError("schema: expected object with 'columns' array");
  for (const auto &cj : j["columns"]) {
    Column c;
    c.name = cj.at("name").get<std::string>();
    const std::string kind = cj.at("kind").get<std::string>();
    if (kind == "numeric") {
      c.kind = ColumnKind::kNumeric;
      if (cj.contains("range")) {
        c.has_range = true;
        c.range_min = cj["range"].at(0).get<double>();
        c.range_max = cj["range"].at(1).get<double>();
      }
    } else if (kind == "categorical") {
      c.kind = ColumnKind::kCategorical;
      c.categories = cj.at("categories").get<std::vector<std::string>>();
    } else {
      throw ConfigError("schema: unknown column kind '" + kind + "'");
    }
    s.columns.push_back(std::move(c));
  }
  s.target = j.at("target").get<std::string>();
  const std::string task = j.at("task").get<std::string>();
  if (task == "binary_classification")
    s.task = TaskKind::kBinaryClassification;
  else if (task == "regression")
    s.task = TaskKind::kRegression;
  else
    throw ConfigError("schema: unknown task '" + task + "'");
  s.validate();
  return s;
}

inline json schema_to_json(const TableSchema &s) {
  json cols = json::array();
  for (const auto &c : s.columns) {
    json cj;
    cj["name"] = c.name;
    if (c.kind == ColumnKind::kNumeric) {
      cj["kind"] = "numeric";
      if (c.has_range) cj["range"] = {c.range_min, c.range_max};
    } else {
      cj["kind"] = "categorical";
      cj["categories"] = c.categories;
    }
    cols.push_back(std::move(cj));
  }
  json j;
  j["columns"] = std::move(cols);
  j["target"] = s.target;
  j["task"] = s.task == TaskKind::kBinaryClassification
                  ? "binary_classification"
                  : "regression";
  return j;
}

inline TableSchema load_schema(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open schema file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception &e) {
    throw ConfigError("schema: invalid JSON in " + path + ": " + e.what());
  }
  return schema_from_json(j);
}

// ---- records ----------------------------------------------------------------

struct Value {
  bool is_number = false;
  double num = 0.0;
  std::string cat;

  bool operator==(const Value &o) const {
    if (is_number != o.is_number) return false;
    return is_number ? num == o.num : cat == o.cat;
  }
};

// Values are stored in schema column order, which keeps the key set and the
// canonical serialization implicit.
struct Record {
  std::vector<Value> values;
  bool operator==(const Record &o) const { return values == o.values; }
};

// Shortest representation that parses back to the same double.
inline std::string render_number(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc())
    throw ContractError("render_number: value does not fit buffer");
  return std::string(buf, p);
}

inline bool parse_number(const std::string &text, double &out) {
  const char *first = text.data();
  const char *last = text.data() + text.size();
  auto [p, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && p == last && std::isfinite(out);
}

inline std::string to_canonical_json(const Record &r, const TableSchema &s) {
  if (r.values.size() != s.columns.size())
    throw ContractError("to_canonical_json: record width " +
                        std::to_string(r.values.size()) +
                        " does not match schema width " +
                        std::to_string(s.columns.size()));
  std::string out = "{";
  for (size_t i = 0; i < s.columns.size(); ++i) {
    if (i) out += ",";
    out += json(s.columns[i].name).dump();
    out += ":";
    const Value &v = r.values[i];
    if (s.columns[i].kind == ColumnKind::kNumeric) {
      if (!v.is_number)
        throw ContractError("to_canonical_json: column '" + s.columns[i].name +
                            "' holds a category but schema says numeric");
      out += render_number(v.num);
    } else {
      if (v.is_number)
        throw ContractError("to_canonical_json: column '" + s.columns[i].name +
                            "' holds a number but schema says categorical");
      out += json(v.cat).dump();
    }
  }
  out += "}";
  return out;
}

// ---- candidate parsing --------------------------------------------------------

enum class RejectReason {
  kNone,
  kNotJson,
  kMissingColumn,
  kBadType,
  kUnknownCategory,
  kExtraKey,
};

inline const char *reject_label(RejectReason r) {
  switch (r) {
    case RejectReason::kNone: return "accepted";
    case RejectReason::kNotJson: return "not_json";
    case RejectReason::kMissingColumn: return "missing_column";
    case RejectReason::kBadType: return "bad_type";
    case RejectReason::kUnknownCategory: return "unknown_category";
    case RejectReason::kExtraKey: return "extra_key";
  }
  return "unknown";
}

struct ParseResult {
  std::optional<Record> record;
  RejectReason reason = RejectReason::kNone;
  std::string column;  // offending column/key where applicable

  bool accepted() const { return record.has_value(); }
};

// Validates generated text against the schema. Never throws on bad input:
// every malformed candidate maps to a structured reject reason so samplers
// can keep histograms.
inline ParseResult parse_candidate(const std::string &text,
                                   const TableSchema &schema) {
  ParseResult res;
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) {
    res.reason = RejectReason::kNotJson;
    return res;
  }
  for (const auto &item : j.items()) {
    if (schema.column_index(item.key()) < 0) {
      res.reason = RejectReason::kExtraKey;
      res.column = item.key();
      return res;
    }
  }
  Record r;
  for (const auto &col : schema.columns) {
    if (!j.contains(col.name)) {
      res.reason = RejectReason::kMissingColumn;
      res.column = col.name;
      return res;
    }
    const json &cell = j[col.name];
    Value v;
    if (col.kind == ColumnKind::kNumeric) {
      if (!cell.is_number() ||
          (cell.is_number_float() && !std::isfinite(cell.get<double>()))) {
        res.reason = RejectReason::kBadType;
        res.column = col.name;
        return res;
      }
      v.is_number = true;
      v.num = cell.get<double>();
    } else {
      if (!cell.is_string()) {
        res.reason = RejectReason::kBadType;
        res.column = col.name;
        return res;
      }
      v.cat = cell.get<std::string>();
      bool known = false;
      for (const auto &c : col.categories) known |= (c == v.cat);
      if (!known) {
        res.reason = RejectReason::kUnknownCategory;
        res.column = col.name;
        return res;
      }
    }
    r.values.push_back(std::move(v));
  }
  res.record = std::move(r);
  return res;
}

// ---- CSV --------------------------------------------------------------------

namespace detail {

// RFC-4180-style fields: optional double-quote wrapping, "" escapes a quote,
// quoted fields may contain commas and newlines.
inline std::vector<std::vector<std::string>> parse_csv(const std::string &text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  size_t i = 0;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (row.size() > 1 || !row[0].empty()) rows.push_back(std::move(row));
    row.clear();
  };
  while (i < text.size()) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
      ++i;
    } else if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
      ++i;
    } else if (c == ',') {
      end_field();
      ++i;
    } else if (c == '\n') {
      end_row();
      ++i;
    } else if (c == '\r') {
      ++i;  // swallow; \r\n handled by the \n branch
    } else {
      field += c;
      field_started = true;
      ++i;
    }
  }
  if (in_quotes) throw DataError("csv: unterminated quoted field");
  if (!field.empty() || !row.empty()) end_row();
  return rows;
}

inline std::string csv_escape(const std::string &s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += "\"";
  return out;
}

}  // namespace detail

// Loads a header-bearing CSV and types each cell against the schema. The
// header must contain exactly the schema's columns (any order).
inline std::vector<Record> load_csv(const std::string &path,
                                    const TableSchema &schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open csv file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto rows = detail::parse_csv(ss.str());
  if (rows.empty()) throw DataError("csv: empty file " + path);

  const auto &header = rows[0];
  if (header.size() != schema.columns.size())
    throw DataError("csv: header has " + std::to_string(header.size()) +
                    " columns, schema expects " +
                    std::to_string(schema.columns.size()));
  // col_of[i] = position in the CSV row of schema column i.
  std::vector<size_t> col_of(schema.columns.size());
  for (size_t i = 0; i < schema.columns.size(); ++i) {
    bool found = false;
    for (size_t h = 0; h < header.size(); ++h) {
      if (header[h] == schema.columns[i].name) {
        col_of[i] = h;
        found = true;
        break;
      }
    }
    if (!found)
      throw DataError("csv: schema column '" + schema.columns[i].name +
                      "' missing from header");
  }

  std::vector<Record> out;
  out.reserve(rows.size() - 1);
  for (size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != header.size())
      throw DataError("csv: row " + std::to_string(r + 1) + " has " +
                      std::to_string(rows[r].size()) + " fields, expected " +
                      std::to_string(header.size()));
    Record rec;
    for (size_t i = 0; i < schema.columns.size(); ++i) {
      const Column &col = schema.columns[i];
      const std::string &cell = rows[r][col_of[i]];
      Value v;
      if (col.kind == ColumnKind::kNumeric) {
        v.is_number = true;
        if (!parse_number(cell, v.num))
          throw DataError("csv: row " + std::to_string(r + 1) + " column '" +
                          col.name + "': cannot parse number from '" + cell +
                          "'");
      } else {
        bool known = false;
        for (const auto &c : col.categories) known |= (c == cell);
        if (!known)
          throw DataError("csv: row " + std::to_string(r + 1) + " column '" +
                          col.name + "': unknown category '" + cell + "'");
        v.cat = cell;
      }
      rec.values.push_back(std::move(v));
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw DataError("csv: no data rows in " + path);
  return out;
}

inline void save_csv(const std::string &path, const std::vector<Record> &recs,
                     const TableSchema &schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write csv file: " + path);
  for (size_t i = 0; i < schema.columns.size(); ++i)
    out << (i ? "," : "") << detail::csv_escape(schema.columns[i].name);
  out << "\n";
  for (const auto &r : recs) {
    for (size_t i = 0; i < schema.columns.size(); ++i) {
      if (i) out << ",";
      const Value &v = r.values[i];
      out << (v.is_number ? render_number(v.num) : detail::csv_escape(v.cat));
    }
    out << "\n";
  }
}

// ---- tokens -----------------------------------------------------------------

// Byte-level vocabulary: 0..255 raw bytes, then PAD/BOS/EOS.
struct Tokens {
  static constexpr int32_t kPad = 256;
  static constexpr int32_t kBos = 257;
  static constexpr int32_t kEos = 258;
  static constexpr int32_t kVocab = 259;
};

struct TokenSequence {
  std::vector<int32_t> ids;

  int64_t length() const { return static_cast<int64_t>(ids.size()); }
};

// UTF-8 text to [BOS, bytes..., EOS]. With max_len > 0 the byte payload is
// truncated so the whole sequence (specials included) fits.
inline TokenSequence encode_text(const std::string &text, int64_t max_len = 0) {
  TokenSequence t;
  size_t n = text.size();
  if (max_len > 0) {
    if (max_len < 2)
      throw ContractError("encode_text: max_len must be at least 2");
    n = std::min(n, static_cast<size_t>(max_len - 2));
  }
  t.ids.reserve(n + 2);
  t.ids.push_back(Tokens::kBos);
  for (size_t i = 0; i < n; ++i)
    t.ids.push_back(static_cast<unsigned char>(text[i]));
  t.ids.push_back(Tokens::kEos);
  return t;
}

// Inverse of encode_text: drops specials, maps byte ids back to chars.
inline std::string decode_tokens(const TokenSequence &t) {
  std::string out;
  out.reserve(t.ids.size());
  for (int32_t id : t.ids) {
    if (id == Tokens::kBos || id == Tokens::kPad) continue;
    if (id == Tokens::kEos) break;
    if (id < 0 || id > 255)
      throw ContractError("decode_tokens: id " + std::to_string(id) +
                          " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

// ---- splits / dedup -----------------------------------------------------------

struct Splits {
  std::vector<Record> train, val, test;
};

// Shuffled three-way split with floor sizing; the last split takes the
// remainder. Every part must end up non-empty.
inline Splits split_records(const std::vector<Record> &records, double f_train,
                            double f_val, double f_test, Rng &rng) {
  for (double f : {f_train, f_val, f_test})
    if (!(f > 0.0))
      throw ConfigError("split: fractions must be positive");
  if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
    throw ConfigError("split: fractions must sum to 1");
  const size_t n = records.size();
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  const size_t n_train = static_cast<size_t>(n * f_train);
  const size_t n_val = static_cast<size_t>(n * f_val);
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw DataError("split: " + std::to_string(n) +
                    " records leave an empty split");
  Splits s;
  for (size_t i = 0; i < n; ++i) {
    const Record &r = records[idx[i]];
    if (i < n_train)
      s.train.push_back(r);
    else if (i < n_train + n_val)
      s.val.push_back(r);
    else
      s.test.push_back(r);
  }
  return s;
}

struct DedupResult {
  std::vector<Record> kept;
  int64_t removed = 0;
};

// Drops synthetic records that exactly match a training record (canonical
// string equality).
inline DedupResult dedup_against_train(const std::vector<Record> &synthetic,
                                       const std::vector<Record> &train,
                                       const TableSchema &schema) {
  std::unordered_set<std::string> seen;
  seen.reserve(train.size() * 2);
  for (const auto &r : train) seen.insert(to_canonical_json(r, schema));
  DedupResult out;
  for (const auto &r : synthetic) {
    if (seen.count(to_canonical_json(r, schema)))
      ++out.removed;
    else
      out.kept.push_back(r);
  }
  return out;
}

// ---- small file helpers --------------------------------------------------------

inline std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string &path, const std::string &content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out << content;
}

inline std::vector<std::string> read_lines(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline void write_jsonl_records(const std::string &path,
                                const std::vector<Record> &recs,
                                const TableSchema &schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  for (const auto &r : recs) out << to_canonical_json(r, schema) << "\n";
}

inline std::vector<Record> load_jsonl_records(const std::string &path,
                                              const TableSchema &schema) {
  std::vector<Record> out;
  for (const auto &line : read_lines(path)) {
    ParseResult pr = parse_candidate(line, schema);
    if (!pr.accepted())
      throw DataError("jsonl: line " + std::to_string(out.size() + 1) +
                      " rejected (" + reject_label(pr.reason) + " " +
                      pr.column + ") in " + path);
    out.push_back(std::move(*pr.record));
  }
  return out;
}

}  // namespace difflm
