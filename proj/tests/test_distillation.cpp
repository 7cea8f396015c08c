#include <algorithm>
#include <memory>
#include <sstream>

#include "doctest.h"
#include "offkd/checkpoint.hpp"
#include "offkd/distillation.hpp"
#include "offkd/error.hpp"
#include "offkd/tsv.hpp"
#include "support/synthetic.hpp"

using namespace offkd;

namespace {

std::vector<LabeledExample> plain(std::size_t n) {
  std::vector<LabeledExample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = "x" + std::to_string(i);
    out[i].text = "post " + std::to_string(i);
  }
  return out;
}

std::shared_ptr<const PredictionSource> constant(const std::string& id, std::vector<double> probs) {
  return std::make_shared<FunctionTeacher>(id, [probs](const LabeledExample&, TaskId task) {
    return std::optional<SoftDistribution>(SoftDistribution{task, probs});
  });
}

// Deterministic per-example distribution so teachers disagree row by row.
std::shared_ptr<const PredictionSource> varying(const std::string& id, std::uint64_t salt) {
  return std::make_shared<FunctionTeacher>(id, [salt](const LabeledExample& ex, TaskId task) {
    Rng rng(mix_seed({salt, std::hash<std::string>{}(ex.id)}));
    std::vector<double> p(num_labels(task));
    double s = 0;
    for (auto& v : p) s += (v = 0.05 + rng.uniform());
    for (auto& v : p) v /= s;
    return std::optional<SoftDistribution>(SoftDistribution{task, p});
  });
}

}  // namespace

TEST_CASE("single teacher passes through unchanged") {
  const auto data = plain(6);
  const auto ens = TeacherEnsemble::make({varying("t", 1)});
  const auto out = ensemble_soft_labels(ens, data, TaskId::C);
  const auto direct = varying("t", 1)->predict(data, TaskId::C);
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(out[i].soft.at(TaskId::C).probs == direct[i]->probs);
  CHECK(out[2].id == data[2].id);
  CHECK(out[2].text == data[2].text);
}

TEST_CASE("equal weights average") {
  const auto data = plain(3);
  const auto ens = TeacherEnsemble::make({constant("a", {0.9, 0.1}), constant("b", {0.5, 0.5})});
  for (const auto& ex : ensemble_soft_labels(ens, data, TaskId::A)) {
    CHECK(ex.soft.at(TaskId::A).probs[0] == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(ex.soft.at(TaskId::A).probs[1] == doctest::Approx(0.3).epsilon(1e-15));
  }
}

TEST_CASE("weights are normalised with a notice") {
  std::ostringstream log;
  const auto ens = TeacherEnsemble::make({constant("a", {1, 0}), constant("b", {0, 1})}, {2, 2}, &log);
  CHECK(ens.weights == std::vector<double>{0.5, 0.5});
  CHECK_FALSE(log.str().empty());
  std::ostringstream quiet;
  TeacherEnsemble::make({constant("a", {1, 0}), constant("b", {0, 1})}, {0.25, 0.75}, &quiet);
  CHECK(quiet.str().empty());
  const auto skewed = TeacherEnsemble::make({constant("a", {1, 0}), constant("b", {0, 1})}, {1, 3});
  const auto out = ensemble_soft_labels(skewed, plain(1), TaskId::A);
  CHECK(out[0].soft.at(TaskId::A).probs == std::vector<double>{0.25, 0.75});

  CHECK_THROWS_AS(TeacherEnsemble::make({constant("a", {1, 0})}, {-1}), InvalidArgument);
  CHECK_THROWS_AS(TeacherEnsemble::make({constant("a", {1, 0}), constant("b", {1, 0})}, {0, 0}), InvalidArgument);
  CHECK_THROWS_AS(TeacherEnsemble::make({constant("a", {1, 0}), constant("a", {1, 0})}), InvalidArgument);
  CHECK_THROWS_AS(TeacherEnsemble::make({constant("a", {1, 0})}, {0.5, 0.5}), InvalidArgument);
  CHECK_THROWS_AS(TeacherEnsemble::make({}), InvalidArgument);
}

TEST_CASE("ensemble output is a distribution and ignores teacher order") {
  const auto data = plain(20);
  std::vector<std::shared_ptr<const PredictionSource>> ts{varying("a", 1), varying("b", 2), varying("c", 3)};
  const std::vector<double> ws{0.2, 0.3, 0.5};
  const auto base = ensemble_soft_labels(TeacherEnsemble::make(ts, ws), data, TaskId::C);
  for (const auto& ex : base) CHECK(ex.soft.at(TaskId::C).is_valid(1e-12));
  std::vector<std::size_t> order{0, 1, 2};
  while (std::next_permutation(order.begin(), order.end())) {
    std::vector<std::shared_ptr<const PredictionSource>> pt;
    std::vector<double> pw;
    for (auto i : order) {
      pt.push_back(ts[i]);
      pw.push_back(ws[i]);
    }
    const auto again = ensemble_soft_labels(TeacherEnsemble::make(pt, pw), data, TaskId::C, 2);
    for (std::size_t i = 0; i < data.size(); ++i) {
      CHECK(again[i].soft.at(TaskId::C).probs == base[i].soft.at(TaskId::C).probs);
    }
  }
}

TEST_CASE("teacher coverage errors") {
  auto data = plain(4);
  std::map<std::string, SoftDistribution> table{{"x0", {TaskId::A, {0.6, 0.4}}}, {"x2", {TaskId::A, {0.1, 0.9}}}};
  const auto ens = TeacherEnsemble::make({std::make_shared<TableTeacher>("table", TaskId::A, table)});
  try {
    ensemble_soft_labels(ens, data, TaskId::A);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.ids() == std::vector<std::string>{"x1", "x3"});
    CHECK(std::string(e.what()).find("table") != std::string::npos);
  }
  const auto broken = TeacherEnsemble::make({constant("bad", {0.9, 0.3})});
  CHECK_THROWS_AS(ensemble_soft_labels(broken, data, TaskId::A), InvalidArgument);
}

TEST_CASE("soft label files round trip") {
  auto data = plain(5);
  const auto labelled = ensemble_soft_labels(TeacherEnsemble::make({varying("v", 9)}), data, TaskId::C);
  offkd::testing::TempDir dir("soft");
  write_soft_labels(dir / "q.tsv", labelled, TaskId::C);
  CHECK(read_file(dir / "q.tsv").rfind("id\tIND\tGRP\tOTH\n", 0) == 0);
  const auto back = read_soft_labels(dir / "q.tsv", TaskId::C);
  REQUIRE(back.size() == 5);
  for (const auto& ex : labelled) CHECK(back.at(ex.id).probs == ex.soft.at(TaskId::C).probs);

  const auto teacher = TableTeacher::load("file", dir / "q.tsv", TaskId::C);
  const auto again = ensemble_soft_labels(TeacherEnsemble::make({std::make_shared<TableTeacher>(teacher)}), data, TaskId::C);
  for (std::size_t i = 0; i < 5; ++i) CHECK(again[i].soft.at(TaskId::C).probs == labelled[i].soft.at(TaskId::C).probs);

  write_file_atomic(dir / "bad.tsv", "id\tOFF\tNOT\nx0\t0.5\t0.7\n");
  CHECK_THROWS_AS(read_soft_labels(dir / "bad.tsv", TaskId::A), ParseError);
  write_file_atomic(dir / "dup.tsv", "id\tOFF\tNOT\nx0\t0.5\t0.5\nx0\t0.5\t0.5\n");
  CHECK_THROWS_AS(read_soft_labels(dir / "dup.tsv", TaskId::A), ParseError);
  write_file_atomic(dir / "hdr.tsv", "id\tNOT\tOFF\nx0\t0.5\t0.5\n");
  CHECK_THROWS_AS(read_soft_labels(dir / "hdr.tsv", TaskId::A), ParseError);
}

TEST_CASE("student distillation") {
  const offkd::testing::Lexicon lex{offkd::testing::pseudo_words(30, 11), offkd::testing::pseudo_words(4, 12, 3)};
  const auto data = offkd::testing::make_posts(lex, 80, 0.4, 3, "en", "s");
  const auto vocab = build_vocab(offkd::testing::texts_of(data), 350);
  auto config = offkd::testing::micro_config(vocab.size());
  config.task_classes = {{TaskId::A, 2}};
  TrainConfig train;
  train.learning_rate = 2e-3;
  train.epochs = 3;
  train.seed = 4;

  SUBCASE("one-hot targets reproduce hard training") {
    auto soft = data;
    for (auto& ex : soft) ex.soft[TaskId::A] = one_hot(TaskId::A, ex.hard.at(TaskId::A));
    const auto init = init_params<float>(config, 6);
    const auto student = distill_student(init, vocab, soft, TaskId::A, train);
    const auto hard = finetune(init, vocab, data, TaskId::A, train, LossMode::hard);
    CHECK(serialize_checkpoint(student.params) == serialize_checkpoint(hard.params));
  }
  SUBCASE("hard labels alone are refused") {
    CHECK_THROWS_AS(distill_student(init_params<float>(config, 6), vocab, data, TaskId::A, train), ValidationError);
  }
  SUBCASE("model teacher") {
    const auto teacher = std::make_shared<ModelTeacher>("m", init_params<float>(config, 8), vocab);
    const auto out = ensemble_soft_labels(TeacherEnsemble::make({teacher}), data, TaskId::A);
    const auto direct = predict_proba(init_params<float>(config, 8), vocab, data, TaskId::A);
    for (std::size_t i = 0; i < data.size(); ++i) CHECK(out[i].soft.at(TaskId::A).probs == direct[i].probs);
  }
}
