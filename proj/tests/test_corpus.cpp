#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "doctest.h"
#include "offkd/corpus.hpp"
#include "offkd/error.hpp"
#include "offkd/tsv.hpp"
#include "support/synthetic.hpp"

using namespace offkd;
using offkd::testing::TempDir;

namespace {

std::filesystem::path write_tsv(const TempDir& dir, const std::string& name, const std::string& body) {
  const auto p = dir / name;
  write_file_atomic(p, body);
  return p;
}

const char* kOlidHeader = "id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c\n";

LabeledExample labelled(std::map<TaskId, std::size_t> hard) {
  LabeledExample ex;
  ex.id = "x";
  ex.hard = std::move(hard);
  return ex;
}

}  // namespace

TEST_CASE("label sets are fixed and ordered") {
  CHECK(num_labels(TaskId::A) == 2);
  CHECK(label_name(TaskId::A, 0) == "OFF");
  CHECK(label_name(TaskId::A, 1) == "NOT");
  CHECK(label_name(TaskId::B, 0) == "TIN");
  CHECK(label_name(TaskId::C, 2) == "OTH");
  CHECK(label_index(TaskId::C, "GRP") == 1u);
  CHECK_FALSE(label_index(TaskId::A, "TIN").has_value());
  CHECK(parse_task("B") == TaskId::B);
  CHECK_FALSE(parse_task("D").has_value());
}

TEST_CASE("soft distributions validate and break argmax ties low") {
  CHECK_THROWS_AS(make_distribution(TaskId::A, {0.7, 0.4}), InvalidArgument);
  CHECK_THROWS_AS(make_distribution(TaskId::A, {0.5, 0.3, 0.2}), InvalidArgument);
  CHECK(make_distribution(TaskId::C, {0.2, 0.4, 0.4}).argmax() == 1);
  CHECK(uniform(TaskId::C).is_valid());
  CHECK(one_hot(TaskId::B, 1).probs == std::vector<double>{0.0, 1.0});
}

TEST_CASE("text normalization masks urls and mentions, keeps case") {
  CHECK(normalize_text("Hey @bob see https://x.co/a NOW") == "Hey @USER see URL NOW");
  CHECK(normalize_text("www.example.com and @a_b1") == "URL and @USER");
  CHECK(normalize_text("no change") == "no change");
}

TEST_CASE("parse_olid reads rows and NULL labels") {
  TempDir dir("olid");
  const auto p = write_tsv(dir, "a.tsv",
                           std::string(kOlidHeader) + "1\tsome text\tOFF\tUNT\tNULL\n2\tother text\tNOT\tNULL\tNULL\n"
                                                      "3\t@someone hi\tOFF\tTIN\tIND\n4\tempty cells\tNOT\t\t\n");
  const auto data = parse_olid(p, "da");
  REQUIRE(data.size() == 4);
  CHECK(data[0].hard.at(TaskId::A) == 0);
  CHECK(data[0].hard.at(TaskId::B) == 1);
  CHECK_FALSE(data[0].hard.contains(TaskId::C));
  CHECK(data[1].hard.at(TaskId::A) == 1);
  CHECK(data[1].hard.size() == 1);
  CHECK(data[2].text == "@USER hi");
  CHECK(data[2].hard.at(TaskId::C) == 0);
  CHECK(data[3].hard.size() == 1);
  CHECK(data[0].language == "da");
}

TEST_CASE("parse_olid accepts files with only subtask_a") {
  TempDir dir("olid");
  const auto p = write_tsv(dir, "a.tsv", "id\ttweet\tsubtask_a\n1\tx\tOFF\n");
  CHECK(parse_olid(p, "en").size() == 1);
}

TEST_CASE("parse_olid reports the line of a malformed row") {
  TempDir dir("olid");
  const auto p = write_tsv(dir, "bad.tsv", std::string(kOlidHeader) + "1\tok\tNOT\tNULL\tNULL\n2\tshort\n");
  try {
    parse_olid(p, "en");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  const auto q = write_tsv(dir, "label.tsv", std::string(kOlidHeader) + "1\tok\tMAYBE\tNULL\tNULL\n");
  CHECK_THROWS_AS(parse_olid(q, "en"), ParseError);
  CHECK_THROWS_AS(parse_olid(dir / "missing.tsv", "en"), IoError);
}

TEST_CASE("parse_olid lists every id that breaks the hierarchy") {
  TempDir dir("olid");
  const auto p = write_tsv(dir, "h.tsv",
                           std::string(kOlidHeader) + "1\ta\tNOT\tTIN\tNULL\n2\tb\tOFF\tTIN\tIND\n"
                                                      "3\tc\tOFF\tUNT\tGRP\n");
  try {
    parse_olid(p, "en");
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.ids() == std::vector<std::string>{"1", "3"});
  }
}

TEST_CASE("validate_hierarchy names each broken rule") {
  CHECK(validate_hierarchy(labelled({{TaskId::A, 1}, {TaskId::B, 0}})).size() == 1);
  CHECK(validate_hierarchy(labelled({{TaskId::A, 0}, {TaskId::B, 0}, {TaskId::C, 0}})).empty());
  CHECK(validate_hierarchy(labelled({{TaskId::A, 0}, {TaskId::B, 1}, {TaskId::C, 0}})).size() == 1);
  CHECK(validate_hierarchy(labelled({{TaskId::B, 0}})).size() == 1);
  CHECK(validate_hierarchy(labelled({{TaskId::C, 1}})).size() == 1);
}

TEST_CASE("confidence_to_soft") {
  const auto b = confidence_to_soft(0.8, TaskId::B);
  CHECK(b.probs[0] == 0.8);
  CHECK(b.probs[1] == 0.2);
  const auto a = confidence_to_soft(1.0, TaskId::A);
  CHECK(a.probs == std::vector<double>{1.0, 0.0});
  const std::vector<double> c{0.2, 0.2, 0.6};
  const auto sc = confidence_to_soft(c, TaskId::C);
  CHECK(sc.probs[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(sc.probs[2] == doctest::Approx(0.6).epsilon(1e-15));
  const std::vector<double> zero{0.0, 0.0, 0.0};
  CHECK_THROWS_AS(confidence_to_soft(zero, TaskId::C), InvalidArgument);
  CHECK_THROWS_AS(confidence_to_soft(1.2, TaskId::A), InvalidArgument);
  CHECK_THROWS_AS(confidence_to_soft(0.5, TaskId::C), InvalidArgument);
}

TEST_CASE("binary soft labels sum to exactly one") {
  char buf[32];
  for (int k = 0; k <= 100000; ++k) {
    std::snprintf(buf, sizeof buf, "%.5f", k / 100000.0);
    const double conf = std::strtod(buf, nullptr);
    const auto s = confidence_to_soft(conf, TaskId::A);
    REQUIRE(s.probs[0] + s.probs[1] == 1.0);
    REQUIRE(s.is_valid());
  }
}

TEST_CASE("parse_solid_distant") {
  TempDir dir("solid");
  SUBCASE("task A/B rows carry average and std") {
    const auto p = write_tsv(dir, "a.tsv", "id\ttext\taverage\tstd\nq1\thi there\t0.8\t0.1\nq2\tyo\t1.0\t0\n");
    const auto data = parse_solid_distant(p, TaskId::A);
    REQUIRE(data.size() == 2);
    CHECK(data[0].soft.at(TaskId::A).probs == std::vector<double>{0.8, 0.2});
    CHECK(data[0].confidence_std == std::vector<double>{0.1});
    CHECK(data[0].hard.empty());
    const auto b = parse_solid_distant(write_tsv(dir, "b.tsv", "id\ttext\taverage\tstd\nq\tt\t1.0\t0.0\n"), TaskId::B);
    CHECK(b[0].soft.at(TaskId::B).probs == std::vector<double>{1.0, 0.0});
  }
  SUBCASE("task C confidences are renormalised") {
    const auto p = write_tsv(dir, "c.tsv", "id\ttext\tIND\tGRP\tOTH\nq1\tx\t0.5\t0.4\t0.3\n");
    const auto data = parse_solid_distant(p, TaskId::C);
    const auto& q = data[0].soft.at(TaskId::C).probs;
    // 0.5/1.2, 0.4/1.2, 0.3/1.2
    CHECK(q[0] == doctest::Approx(5.0 / 12.0).epsilon(1e-14));
    CHECK(q[1] == doctest::Approx(4.0 / 12.0).epsilon(1e-14));
    CHECK(q[2] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(std::round(q[0] * 1e5) / 1e5 == doctest::Approx(0.41667));
  }
  SUBCASE("bad rows") {
    CHECK_THROWS_AS(parse_solid_distant(write_tsv(dir, "r.tsv", "id\ttext\taverage\tstd\nq\tx\t1.5\t0\n"), TaskId::A),
                    ParseError);
    CHECK_THROWS_AS(parse_solid_distant(write_tsv(dir, "m.tsv", "id\ttext\taverage\tstd\nq\tx\n"), TaskId::A),
                    ParseError);
  }
}

TEST_CASE("mix_multilingual namespaces ids and keeps order") {
  offkd::testing::Lexicon lex{offkd::testing::pseudo_words(30, 1), offkd::testing::pseudo_words(5, 2, 3)};
  auto en = offkd::testing::make_posts(lex, 100, 0.3, 3, "en", "");
  auto da = offkd::testing::make_posts(lex, 50, 0.3, 4, "da", "");
  const auto mixed = mix_multilingual({{"en", en}, {"da", da}});
  REQUIRE(mixed.size() == 150);
  CHECK(mixed.front().id == "en:0");
  CHECK(mixed[100].id == "da:0");
  CHECK(mixed[100].language == "da");
  CHECK_THROWS_AS(mix_multilingual({{"en", en}, {"en", en}}), ValidationError);
  CHECK(mix_multilingual({}).empty());

  const auto whole = stats(mixed);
  const auto part_en = stats(en).overall(TaskId::A);
  const auto part_da = stats(da).overall(TaskId::A);
  CHECK(whole.overall(TaskId::A).total == part_en.total + part_da.total);
  CHECK(whole.overall(TaskId::A).counts[0] == part_en.counts[0] + part_da.counts[0]);
}

TEST_CASE("duplicate texts are reported, not removed") {
  std::vector<LabeledExample> d(3);
  d[0].id = "a";
  d[0].text = "same";
  d[1].id = "b";
  d[1].text = "other";
  d[2].id = "c";
  d[2].text = "same";
  const auto groups = find_duplicate_texts(d);
  REQUIRE(groups.size() == 1);
  CHECK(groups[0] == std::vector<std::string>{"a", "c"});
}

TEST_CASE("stratified_kfold") {
  std::vector<LabeledExample> ten;
  for (int i = 0; i < 10; ++i) {
    LabeledExample ex;
    ex.id = std::to_string(i);
    ex.language = "en";
    ex.hard[TaskId::A] = i < 4 ? 0 : 1;
    ten.push_back(ex);
  }
  SUBCASE("10 examples, k=5") {
    const auto split = stratified_kfold(ten, TaskId::A, 5, 7);
    for (std::size_t f = 0; f < 5; ++f) {
      const auto held = split.held_out(f);
      CHECK(held.size() == 2);
      const auto off = std::count_if(held.begin(), held.end(), [&](auto i) { return ten[i].hard.at(TaskId::A) == 0; });
      CHECK(off <= 1);
    }
  }
  SUBCASE("preconditions") {
    CHECK_THROWS_AS(stratified_kfold(ten, TaskId::A, 11, 0), InvalidArgument);
    CHECK_THROWS_AS(stratified_kfold(ten, TaskId::A, 1, 0), InvalidArgument);
    auto missing = ten;
    missing[3].hard.clear();
    CHECK_THROWS_AS(stratified_kfold(missing, TaskId::A, 2, 0), ValidationError);
  }
  SUBCASE("100 examples, k=10: partition, balance, determinism") {
    offkd::testing::Lexicon lex{offkd::testing::pseudo_words(30, 1), offkd::testing::pseudo_words(5, 2, 3)};
    auto en = offkd::testing::make_posts(lex, 60, 0.3, 5, "en", "e");
    auto da = offkd::testing::make_posts(lex, 40, 0.5, 6, "da", "d");
    const auto data = mix_multilingual({{"en", en}, {"da", da}});
    const auto split = stratified_kfold(data, TaskId::A, 10, 11);
    std::set<std::size_t> seen;
    for (std::size_t f = 0; f < 10; ++f) {
      const auto held = split.held_out(f);
      CHECK(held.size() == 10);
      for (auto i : held) CHECK(seen.insert(i).second);
      CHECK(split.training(f).size() == 90);
    }
    CHECK(seen.size() == 100);
    // per (label, language) group, fold counts differ by at most one
    for (const std::string lang : {"en", "da"}) {
      for (std::size_t label = 0; label < 2; ++label) {
        std::vector<int> per_fold(10, 0);
        for (std::size_t i = 0; i < data.size(); ++i) {
          if (data[i].language == lang && data[i].hard.at(TaskId::A) == label) ++per_fold[split.folds[i]];
        }
        const auto [lo, hi] = std::minmax_element(per_fold.begin(), per_fold.end());
        CHECK(*hi - *lo <= 1);
      }
    }
    CHECK(stratified_kfold(data, TaskId::A, 10, 11).folds == split.folds);
    CHECK(split.fold_of(data[0].id).has_value());
  }
}

TEST_CASE("stats counts per language") {
  CHECK(stats({}).by_language.empty());
  CHECK(stats({}).overall(TaskId::A).total == 0);
  std::vector<LabeledExample> five;
  for (int i = 0; i < 5; ++i) {
    LabeledExample ex;
    ex.id = std::to_string(i);
    ex.language = "en";
    ex.hard[TaskId::A] = i < 3 ? 0 : 1;
    five.push_back(ex);
  }
  const auto s = stats(five);
  const auto* a = s.find("en", TaskId::A);
  REQUIRE(a != nullptr);
  CHECK(a->counts == std::vector<std::size_t>{3, 2});
  CHECK(a->total == 5);
  CHECK(format_stats(s).find("en\tA\tTOTAL\t5") != std::string::npos);
}

TEST_CASE("bundled fixture parses cleanly") {
  const auto data = parse_olid(offkd::testing::fixture("olid_synth.tsv"), "en");
  CHECK(data.size() == 200);
  for (const auto& ex : data) CHECK(validate_hierarchy(ex).empty());
  const auto solid = parse_solid_distant(offkd::testing::fixture("solid_a.tsv"), TaskId::A);
  CHECK(solid.size() == 60);
}
