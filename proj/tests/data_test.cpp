#include "difflm/data.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "testutil.hpp"

using namespace difflm;

namespace {

TableSchema demo_schema() {
  TableSchema s;
  s.columns = {
      {"age", ColumnKind::kNumeric, {}, false, 0, 0},
      {"income", ColumnKind::kNumeric, {}, false, 0, 0},
      {"city", ColumnKind::kCategorical, {"NY", "SF", "LA"}, false, 0, 0},
  };
  s.target = "city";
  s.task = TaskKind::kBinaryClassification;
  // Not validated: 3-category target is fine for serialization tests.
  return s;
}

Record make_record(double age, double income, const std::string &city) {
  Record r;
  r.values = {{true, age, ""}, {true, income, ""}, {false, 0.0, city}};
  return r;
}

}  // namespace

TEST(Tokens, EncodeDecodeRoundTrip) {
  const std::string samples[] = {
      "", "a", "hello world", "{\"k\":1.5}", "tab\tnewline\n",
      "unicode: \xc3\xa9\xe6\x97\xa5\xf0\x9f\x99\x82"};
  for (const auto &s : samples) {
    const TokenSequence t = encode_text(s);
    ASSERT_EQ(t.ids.front(), Tokens::kBos);
    ASSERT_EQ(t.ids.back(), Tokens::kEos);
    EXPECT_EQ(decode_tokens(t), s);
  }
}

TEST(Tokens, EncodeSingleChar) {
  const TokenSequence t = encode_text("a");
  EXPECT_EQ(t.ids, (std::vector<int32_t>{257, 97, 258}));
}

TEST(Tokens, DecodeSkipsPadding) {
  TokenSequence t;
  t.ids = {Tokens::kBos, 'h', 'i', Tokens::kEos, Tokens::kPad, Tokens::kPad};
  EXPECT_EQ(decode_tokens(t), "hi");
}

TEST(Tokens, TruncationKeepsTerminalEos) {
  const TokenSequence t = encode_text("abcdefgh", 6);
  EXPECT_EQ(t.ids.size(), 6u);
  EXPECT_EQ(t.ids.front(), Tokens::kBos);
  EXPECT_EQ(t.ids.back(), Tokens::kEos);
  EXPECT_EQ(decode_tokens(t), "abcd");
}

TEST(Tokens, RandomStringsRoundTrip) {
  Rng rng(404);
  for (int it = 0; it < 200; ++it) {
    std::string s;
    const int len = static_cast<int>(rng.uniform_int(64));
    for (int i = 0; i < len; ++i)
      s.push_back(static_cast<char>(rng.uniform_int(256)));
    EXPECT_EQ(decode_tokens(encode_text(s)), s);
  }
}

TEST(CanonicalJson, MatchesExpectedLiteral) {
  const TableSchema s = demo_schema();
  const Record r = make_record(34.0, 50000.5, "NY");
  EXPECT_EQ(to_canonical_json(r, s),
            "{\"age\":34,\"income\":50000.5,\"city\":\"NY\"}");
}

TEST(CanonicalJson, IntegralDoublesRenderWithoutFraction) {
  EXPECT_EQ(render_number(34.0), "34");
  EXPECT_EQ(render_number(-2.345), "-2.345");
  EXPECT_EQ(render_number(0.0), "0");
  EXPECT_EQ(render_number(0.1), "0.1");
}

TEST(CanonicalJson, RoundTripsRandomRecords) {
  const TableSchema s = demo_schema();
  Rng rng(777);
  for (int it = 0; it < 1000; ++it) {
    double age, income;
    switch (rng.uniform_int(4)) {
      case 0: age = static_cast<double>(rng.uniform_int(120)); break;
      case 1: age = rng.uniform(-1e6, 1e6); break;
      case 2: age = rng.gaussian() * 1e-8; break;
      default: age = rng.gaussian() * 1e12; break;
    }
    income = std::round(rng.uniform(-5e4, 5e4) * 1000.0) / 1000.0;
    const Record r = make_record(
        age, income, s.columns[2].categories[rng.uniform_int(3)]);
    const std::string text = to_canonical_json(r, s);
    const ParseResult pr = parse_candidate(text, s);
    ASSERT_TRUE(pr.accepted()) << text;
    EXPECT_EQ(*pr.record, r) << text;
    // Serialization must be a fixed point.
    EXPECT_EQ(to_canonical_json(*pr.record, s), text);
  }
}

TEST(ParseCandidate, RejectsWithStructuredReasons) {
  const TableSchema s = demo_schema();
  auto r1 = parse_candidate("not json at all", s);
  EXPECT_EQ(r1.reason, RejectReason::kNotJson);

  auto r2 = parse_candidate("{\"age\":34,\"income\":1.5}", s);
  EXPECT_EQ(r2.reason, RejectReason::kMissingColumn);
  EXPECT_EQ(r2.column, "city");

  auto r3 = parse_candidate(
      "{\"age\":\"x\",\"income\":1.5,\"city\":\"NY\"}", s);
  EXPECT_EQ(r3.reason, RejectReason::kBadType);
  EXPECT_EQ(r3.column, "age");

  auto r4 = parse_candidate(
      "{\"age\":34,\"income\":1.5,\"city\":\"Tokyo\"}", s);
  EXPECT_EQ(r4.reason, RejectReason::kUnknownCategory);
  EXPECT_EQ(r4.column, "city");

  auto r5 = parse_candidate(
      "{\"age\":34,\"income\":1.5,\"city\":\"NY\",\"zip\":1}", s);
  EXPECT_EQ(r5.reason, RejectReason::kExtraKey);
  EXPECT_EQ(r5.column, "zip");

  auto r6 = parse_candidate("[1,2,3]", s);
  EXPECT_EQ(r6.reason, RejectReason::kNotJson);

  // Categorical value in a numeric slot and vice versa.
  auto r7 = parse_candidate(
      "{\"age\":34,\"income\":1.5,\"city\":7}", s);
  EXPECT_EQ(r7.reason, RejectReason::kBadType);
  EXPECT_EQ(r7.column, "city");
}

TEST(Csv, LoadsTypedRowsWithQuoting) {
  testutil::TempDir tmp("csv");
  const std::string path = (tmp.path() / "t.csv").string();
  write_file(path,
             "age,income,city\n"
             "34,50000.5,NY\n"
             "\"21\",\"1,000.5 is not this\",\"SF\"\n");
  // Quoted numeric "1,000.5 is not this" must fail to parse as a number.
  const TableSchema s = demo_schema();
  EXPECT_THROW(load_csv(path, s), DataError);

  write_file(path,
             "age,income,city\n"
             "34,50000.5,NY\n"
             "21,-3.25,\"SF\"\n");
  const auto recs = load_csv(path, s);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0], make_record(34, 50000.5, "NY"));
  EXPECT_EQ(recs[1], make_record(21, -3.25, "SF"));
}

TEST(Csv, HeaderMayPermuteColumns) {
  testutil::TempDir tmp("csvp");
  const std::string path = (tmp.path() / "t.csv").string();
  write_file(path, "city,age,income\nNY,34,1.5\n");
  const auto recs = load_csv(path, demo_schema());
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0], make_record(34, 1.5, "NY"));
}

TEST(Csv, ErrorsNameTheRow) {
  testutil::TempDir tmp("csve");
  const std::string path = (tmp.path() / "t.csv").string();
  write_file(path, "age,income,city\n34,1.5,NY\nbogus,1.5,NY\n");
  try {
    load_csv(path, demo_schema());
    FAIL() << "expected DataError";
  } catch (const DataError &e) {
    EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos)
        << e.what();
  }
}

TEST(Csv, QuotedFieldWithCommaAndEscapedQuote) {
  TableSchema s;
  s.columns = {{"label", ColumnKind::kCategorical,
                {"a,b", "say \"hi\"", "plain"}, false, 0, 0}};
  s.target = "label";
  testutil::TempDir tmp("csvq");
  const std::string path = (tmp.path() / "t.csv").string();
  write_file(path, "label\n\"a,b\"\n\"say \"\"hi\"\"\"\nplain\n");
  const auto recs = load_csv(path, s);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].values[0].cat, "a,b");
  EXPECT_EQ(recs[1].values[0].cat, "say \"hi\"");
  EXPECT_EQ(recs[2].values[0].cat, "plain");
  // save_csv must quote these back so the file round-trips.
  const std::string path2 = (tmp.path() / "t2.csv").string();
  save_csv(path2, recs, s);
  EXPECT_EQ(load_csv(path2, s), recs);
}

TEST(Split, SizesAndMultisetPreserved) {
  const TableSchema s = demo_schema();
  std::vector<Record> recs;
  for (int i = 0; i < 10; ++i)
    recs.push_back(make_record(i, i * 0.5, "NY"));
  Rng rng(1);
  const Splits sp = split_records(recs, 0.8, 0.1, 0.1, rng);
  EXPECT_EQ(sp.train.size(), 8u);
  EXPECT_EQ(sp.val.size(), 1u);
  EXPECT_EQ(sp.test.size(), 1u);

  // Union is the input multiset.
  std::multiset<std::string> before, after;
  for (const auto &r : recs) before.insert(to_canonical_json(r, s));
  for (const auto *part : {&sp.train, &sp.val, &sp.test})
    for (const auto &r : *part) after.insert(to_canonical_json(r, s));
  EXPECT_EQ(before, after);
}

TEST(Split, DeterministicGivenSeed) {
  std::vector<Record> recs;
  for (int i = 0; i < 50; ++i) recs.push_back(make_record(i, i, "NY"));
  Rng a(99), b(99);
  const Splits sa = split_records(recs, 0.6, 0.2, 0.2, a);
  const Splits sb = split_records(recs, 0.6, 0.2, 0.2, b);
  EXPECT_EQ(sa.train, sb.train);
  EXPECT_EQ(sa.val, sb.val);
  EXPECT_EQ(sa.test, sb.test);
}

TEST(Split, RejectsDegenerateInputs) {
  std::vector<Record> two = {make_record(1, 1, "NY"), make_record(2, 2, "SF")};
  Rng rng(3);
  EXPECT_THROW(split_records(two, 0.8, 0.1, 0.1, rng), DataError);
  EXPECT_THROW(split_records(two, 0.5, 0.5, 0.5, rng), ConfigError);
  EXPECT_THROW(split_records(two, 1.0, 0.0, 0.0, rng), ConfigError);
}

TEST(Dedup, MatchesQuadraticOracle) {
  const TableSchema s = demo_schema();
  Rng rng(55);
  std::vector<Record> train, synth;
  for (int i = 0; i < 100; ++i)
    train.push_back(make_record(rng.uniform_int(30), rng.uniform_int(5), "NY"));
  for (int i = 0; i < 100; ++i)
    synth.push_back(make_record(rng.uniform_int(30), rng.uniform_int(5), "NY"));

  const DedupResult got = dedup_against_train(synth, train, s);

  int64_t expect_removed = 0;
  std::vector<Record> expect_kept;
  for (const auto &r : synth) {
    bool dup = false;
    for (const auto &t : train) dup |= (t == r);
    if (dup)
      ++expect_removed;
    else
      expect_kept.push_back(r);
  }
  EXPECT_GT(expect_removed, 0) << "oracle should exercise real collisions";
  EXPECT_EQ(got.removed, expect_removed);
  EXPECT_EQ(got.kept, expect_kept);
}

TEST(Schema, JsonRoundTripAndValidation) {
  TableSchema s;
  s.columns = {
      {"x1", ColumnKind::kNumeric, {}, true, -1.0, 1.0},
      {"c1", ColumnKind::kCategorical, {"a", "b"}, false, 0, 0},
  };
  s.target = "c1";
  s.task = TaskKind::kBinaryClassification;
  s.validate();
  const TableSchema s2 = schema_from_json(schema_to_json(s));
  EXPECT_EQ(s2.columns.size(), 2u);
  EXPECT_EQ(s2.columns[0].name, "x1");
  EXPECT_TRUE(s2.columns[0].has_range);
  EXPECT_EQ(s2.columns[1].categories, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(s2.target, "c1");

  TableSchema bad = s;
  bad.target = "nope";
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = s;
  bad.columns[1].categories = {"a", "b", "c"};
  EXPECT_THROW(bad.validate(), ConfigError);  // binary target needs 2 classes
  bad = s;
  bad.columns.push_back(bad.columns[0]);
  EXPECT_THROW(bad.validate(), ConfigError);  // duplicate name
}

TEST(Jsonl, WriteLoadRoundTrip) {
  const TableSchema s = demo_schema();
  std::vector<Record> recs = {make_record(1, 2.5, "NY"),
                              make_record(3, -4.5, "LA")};
  testutil::TempDir tmp("jsonl");
  const std::string path = (tmp.path() / "r.jsonl").string();
  write_jsonl_records(path, recs, s);
  EXPECT_EQ(load_jsonl_records(path, s), recs);
}
