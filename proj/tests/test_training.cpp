#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <set>
#include <vector>

#include "doctest.h"
#include "offkd/checkpoint.hpp"
#include "offkd/error.hpp"
#include "offkd/training.hpp"
#include "support/synthetic.hpp"

using namespace offkd;
using offkd::testing::random_batch;

namespace {

long double ce_oracle(const std::vector<double>& q, const std::vector<double>& p) {
  long double s = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] > 0) s -= static_cast<long double>(q[i]) * std::log(static_cast<long double>(p[i]));
  }
  return s;
}

SoftDistribution random_dist(Rng& rng, std::size_t k, TaskId task) {
  std::vector<double> v(k);
  double sum = 0;
  for (auto& x : v) {
    x = 0.01 + rng.uniform();
    sum += x;
  }
  for (auto& x : v) x /= sum;
  return SoftDistribution{task, v};
}

std::vector<std::map<std::size_t, TokenId>> mask_batch(std::vector<TokenSequence>& batch, std::size_t vocab) {
  MaskingPolicy policy;
  policy.mask_fraction = 0.3;
  std::vector<std::map<std::size_t, TokenId>> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto m = mask_tokens(batch[b], policy, vocab, 100 + b);
    batch[b] = m.sequence;
    targets.push_back(m.targets);
  }
  return targets;
}

template <typename T>
std::vector<std::uint8_t> bytes_of(const ModelParameters<T>& p) {
  return serialize_checkpoint(p);
}

}  // namespace

TEST_CASE("soft cross-entropy examples") {
  CHECK(soft_cross_entropy({TaskId::A, {1.0, 0.0}}, {TaskId::A, {1.0, 0.0}}) == 0.0);
  CHECK(soft_cross_entropy({TaskId::A, {0.5, 0.5}}, {TaskId::A, {0.5, 0.5}}) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  const double v = soft_cross_entropy({TaskId::A, {0.7, 0.3}}, {TaskId::A, {0.6, 0.4}});
  CHECK(std::fabs(v - static_cast<double>(ce_oracle({0.7, 0.3}, {0.6, 0.4}))) < 1e-15);
  CHECK(v == doctest::Approx(0.632465).epsilon(1e-6));
  // Q(c)=0 with P(c)=0 contributes nothing; P is floored elsewhere.
  CHECK(soft_cross_entropy({TaskId::A, {1.0, 0.0}}, {TaskId::A, {0.0, 1.0}}) ==
        doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("cross-entropy against a long double oracle and Gibbs' inequality") {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const TaskId task = i % 2 ? TaskId::C : TaskId::A;
    const auto q = random_dist(rng, num_labels(task), task);
    const auto p = random_dist(rng, num_labels(task), task);
    const double got = soft_cross_entropy(q, p);
    CHECK(std::fabs(got - static_cast<double>(ce_oracle(q.probs, p.probs))) < 1e-9);
    CHECK(got >= soft_cross_entropy(q, q) - 1e-12);
    CHECK(kl_divergence(q, p) >= -1e-12);
  }
  CHECK(kl_divergence({TaskId::A, {0.3, 0.7}}, {TaskId::A, {0.3, 0.7}}) == doctest::Approx(0.0));
}

TEST_CASE("hard cross-entropy is the one-hot special case") {
  CHECK(hard_cross_entropy(0, {TaskId::A, {0.5, 0.5}}) == doctest::Approx(std::numbers::ln2));
  CHECK(hard_cross_entropy(1, {TaskId::A, {0.0, 1.0}}) == 0.0);
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const auto p = random_dist(rng, 3, TaskId::C);
    const std::size_t y = rng.below(3);
    const double h = hard_cross_entropy(y, p);
    const double s = soft_cross_entropy(one_hot(TaskId::C, y), p);
    CHECK(std::memcmp(&h, &s, sizeof h) == 0);
  }
  CHECK_THROWS_AS(hard_cross_entropy(2, {TaskId::A, {0.5, 0.5}}), InvalidArgument);
}

TEST_CASE("mask_tokens") {
  const std::size_t V = 300;
  MaskingPolicy policy;
  SUBCASE("fraction zero leaves the sequence alone") {
    policy.mask_fraction = 0.0;
    const auto seq = random_batch(1, 12, 9, V, 1)[0];
    const auto m = mask_tokens(seq, policy, V, 5);
    CHECK(m.sequence.ids == seq.ids);
    CHECK(m.targets.empty());
  }
  SUBCASE("seeded trials") {
    std::size_t masked = 0, kept = 0, random = 0;
    for (std::uint64_t t = 0; t < 10000; ++t) {
      const std::size_t len = 16, valid = 3 + t % 14;
      const auto seq = random_batch(1, len, valid, V, t)[0];
      const auto m = mask_tokens(seq, policy, V, t);
      const std::size_t eligible = valid - 2;
      const auto want = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(0.15 * eligible)), 1, eligible);
      CHECK(m.targets.size() == want);
      for (std::size_t i = 0; i < len; ++i) {
        const auto it = m.targets.find(i);
        if (it == m.targets.end()) {
          CHECK(m.sequence.ids[i] == seq.ids[i]);
          continue;
        }
        CHECK_FALSE(Vocabulary::is_special(seq.ids[i]));
        CHECK(seq.attention_mask[i] == 1);
        CHECK(it->second == seq.ids[i]);
        const TokenId now = m.sequence.ids[i];
        if (now == Vocabulary::kMask) {
          ++masked;
        } else if (now == seq.ids[i]) {
          ++kept;
        } else {
          CHECK(now >= Vocabulary::kNumSpecial);
          CHECK(now < static_cast<TokenId>(V));
          ++random;
        }
      }
      CHECK(m.sequence.attention_mask == seq.attention_mask);
      CHECK(mask_tokens(seq, policy, V, t).sequence.ids == m.sequence.ids);
    }
    const double total = static_cast<double>(masked + kept + random);
    CHECK(masked / total == doctest::Approx(0.8).epsilon(0.03));
    // A random draw can land on the original token, so "kept" absorbs a sliver.
    CHECK(kept / total == doctest::Approx(0.1).epsilon(0.15));
    CHECK(random / total == doctest::Approx(0.1).epsilon(0.15));
  }
  SUBCASE("bad policy") {
    policy.mask_prob = 0.9;
    CHECK_THROWS_AS(policy.validate(), InvalidArgument);
  }
}

TEST_CASE("adam first step and zero gradient") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.clip_norm = 0.0;
  std::vector<double> theta{0.0};
  std::vector<double> grad{1.0};
  std::span<double> ps[] = {theta};
  std::span<const double> gs[] = {grad};
  OptimizerState<double> state;
  adam_step<double>(ps, gs, state, cfg);
  CHECK(theta[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(state.step == 1);

  std::vector<double> zero{0.0};
  std::vector<double> fresh{0.25};
  std::span<double> fs[] = {fresh};
  std::span<const double> zs[] = {zero};
  OptimizerState<double> s2;
  for (int i = 0; i < 3; ++i) adam_step<double>(fs, zs, s2, cfg);
  CHECK(fresh[0] == 0.25);

  // Warmup scales the first of four steps by 1/4.
  cfg.warmup_steps = 4;
  std::vector<double> w{0.0};
  std::span<double> ws[] = {w};
  OptimizerState<double> s3;
  adam_step<double>(ws, gs, s3, cfg);
  CHECK(w[0] == doctest::Approx(-0.25e-3).epsilon(1e-6));
}

TEST_CASE("adam on theta^2 follows a hand-computed trace") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.clip_norm = 0.0;
  std::vector<double> theta{1.0};
  OptimizerState<double> state;
  long double ref = 1.0L, m = 0, v = 0;
  const long double b1 = 0.9L, b2 = 0.999L, eps = 1e-8L, lr = 1e-3L;
  for (int t = 1; t <= 10; ++t) {
    std::vector<double> grad{2.0 * theta[0]};
    std::span<double> ps[] = {theta};
    std::span<const double> gs[] = {grad};
    adam_step<double>(ps, gs, state, cfg);

    const long double g = 2 * ref;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const long double mh = m / (1 - std::pow(b1, t));
    const long double vh = v / (1 - std::pow(b2, t));
    ref -= lr * mh / (std::sqrt(vh) + eps);
    CHECK(std::fabs(theta[0] - static_cast<double>(ref)) < 1e-10);
  }
}

TEST_CASE("global norm clipping") {
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.clip_norm = 1.0;
  cfg.epsilon = 0.0;
  // Two steps: the first fixes the moments, the second compares directions.
  std::vector<double> a{0.0, 0.0}, b{0.0, 0.0};
  std::vector<double> g1{3.0, 4.0}, g2{0.3, 0.4};
  std::span<double> pa[] = {a}, pb[] = {b};
  std::span<const double> ga[] = {g1}, gb[] = {g2};
  OptimizerState<double> sa, sb;
  adam_step<double>(pa, ga, sa, cfg);
  adam_step<double>(pb, gb, sb, cfg);
  // Clipped (3,4) becomes (0.6,0.8); unclipped (0.3,0.4) stays below the norm.
  CHECK(sa.first_moment[0][0] == doctest::Approx(0.1 * 0.6));
  CHECK(sb.first_moment[0][0] == doctest::Approx(0.1 * 0.3));
}

TEST_CASE("gradients match finite differences") {
  const std::size_t V = 300;
  auto c = offkd::testing::micro_config(V, 16);
  c.task_classes = {{TaskId::A, 2}, {TaskId::C, 3}};
  const auto params = init_params<double>(c, 17);
  auto batch = random_batch(3, 12, 10, V, 8);
  batch[2] = random_batch(1, 12, 6, V, 9)[0];

  SUBCASE("hard") {
    const auto spec = LossSpec::hard(TaskId::A, {0, 1, 1});
    const auto r = grad_check(params, batch, spec, 1e-4);
    CHECK(r.coordinates >= 200);
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("soft") {
    const auto spec = LossSpec::soft(TaskId::C, {{TaskId::C, {0.2, 0.5, 0.3}},
                                                  {TaskId::C, {1.0, 0.0, 0.0}},
                                                  {TaskId::C, {0.1, 0.1, 0.8}}});
    CHECK(grad_check(params, batch, spec, 1e-4).max_relative_error < 1e-4);
  }
  SUBCASE("mlm") {
    const auto targets = mask_batch(batch, V);
    CHECK(grad_check(params, batch, LossSpec::mlm(targets), 1e-4).max_relative_error < 1e-4);
  }
  SUBCASE("mlm with tied projection") {
    auto tied = c;
    tied.tie_mlm = true;
    const auto targets = mask_batch(batch, V);
    CHECK(grad_check(init_params<double>(tied, 3), batch, LossSpec::mlm(targets), 1e-4).max_relative_error < 1e-4);
  }
  SUBCASE("linear head alone") {
    // Only the last affine map before the softmax: the loss is smooth enough
    // for truncation error to vanish.
    const auto spec = LossSpec::hard(TaskId::A, {1, 0, 1});
    const auto r = grad_check(params, batch, spec, 1e-5, 1000, 0,
                              [](const std::string& n) { return n.rfind("heads.A.", 0) == 0; });
    CHECK(r.coordinates == 16 * 2 + 2);
    CHECK(r.max_relative_error < 1e-8);
  }
  SUBCASE("eps must be positive") {
    CHECK_THROWS_AS(grad_check(params, batch, LossSpec::hard(TaskId::A, {0, 1, 1}), 0.0), InvalidArgument);
  }
}

TEST_CASE("backward gradients are finite and skip unused heads") {
  const std::size_t V = 300;
  auto c = offkd::testing::micro_config(V, 16);
  c.task_classes = {{TaskId::A, 2}, {TaskId::B, 2}};
  const auto params = init_params<double>(c, 4);
  const auto batch = random_batch(4, 10, 8, V, 3);
  const auto r = backward(params, batch, LossSpec::hard(TaskId::A, {0, 1, 0, 1}));
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss == doctest::Approx(compute_loss(params, batch, LossSpec::hard(TaskId::A, {0, 1, 0, 1}))));
  r.grads.visit([](const std::string& name, const Tensor<double>& t) {
    for (double g : t.data) REQUIRE(std::isfinite(g));
    if (name.rfind("heads.B.", 0) == 0 || name.rfind("mlm.", 0) == 0) {
      for (double g : t.data) CHECK(g == 0.0);
    }
  });
  CHECK_THROWS_AS(backward(params, batch, LossSpec::hard(TaskId::A, {0, 1})), InvalidArgument);
  CHECK_THROWS_AS(backward(params, batch, LossSpec::hard(TaskId::C, {0, 1, 0, 1})), InvalidArgument);
}

TEST_CASE("pretraining") {
  // Cyclic letter runs: every token is fixed by its left neighbour.
  const std::string alphabet = "abcdefghijklmnop";
  std::vector<std::string> corpus;
  Rng rng(1);
  for (int i = 0; i < 160; ++i) {
    const std::size_t start = rng.below(alphabet.size());
    std::string line;
    for (std::size_t j = 0; j < 10; ++j) line += alphabet[(start + j) % alphabet.size()];
    corpus.push_back(line);
  }
  const Vocabulary vocab;  // bytes only, so one token per letter
  auto config = offkd::testing::micro_config(vocab.size(), 16);
  config.task_classes.clear();
  TrainConfig train;
  train.learning_rate = 3e-3;
  train.batch_size = 16;
  train.seed = 3;
  MaskingPolicy policy;

  SUBCASE("zero epochs keep the initialisation") {
    train.epochs = 0;
    const auto r = pretrain_mlm<float>(corpus, vocab, config, train, policy);
    CHECK(r.history.empty());
    CHECK(bytes_of(r.params) == bytes_of(init_params<float>(config, train.seed)));
  }
  SUBCASE("loss falls and masked tokens become predictable") {
    train.epochs = 200;
    std::vector<std::size_t> seen;
    const auto r = pretrain_mlm<float>(corpus, vocab, config, train, policy,
                                       [&](std::size_t e, const ModelParameters<float>&) { seen.push_back(e); });
    REQUIRE(r.history.size() == 200);
    CHECK(seen.size() == 200);
    CHECK(r.history.back().train_loss < r.history.front().train_loss);
    const double acc = masked_token_accuracy(r.params, corpus, vocab, policy, 99);
    MESSAGE("masked-token accuracy " << acc);
    CHECK(acc > 0.9);
  }
}

TEST_CASE("fine-tuning") {
  const offkd::testing::Lexicon lex{offkd::testing::pseudo_words(30, 1), offkd::testing::pseudo_words(4, 2, 3)};
  const auto data = offkd::testing::make_posts(lex, 120, 0.4, 7, "en", "t");
  const auto vocab = build_vocab(offkd::testing::texts_of(data), 400);
  auto config = offkd::testing::micro_config(vocab.size(), 32);
  config.task_classes = {{TaskId::A, 2}};
  TrainConfig train;
  train.learning_rate = 2e-3;
  train.batch_size = 16;
  train.seed = 5;

  SUBCASE("separable task reaches high train F1") {
    train.epochs = 30;
    std::size_t epochs_run = 0;
    FinetuneOptions<float> opts;
    opts.validation = data;
    const auto r = finetune(init_params<float>(config, 1), vocab, data, TaskId::A, train, LossMode::hard, opts);
    for (const auto& h : r.history) {
      ++epochs_run;
      REQUIRE(h.val_macro_f1.has_value());
    }
    CHECK(epochs_run == 30);
    const auto f1 = evaluate_macro_f1(r.params, vocab, data, TaskId::A);
    REQUIRE(f1.has_value());
    CHECK(*f1 >= 0.95);
  }
  SUBCASE("soft mode with one-hot labels is bitwise hard mode") {
    train.epochs = 3;
    auto soft_data = data;
    for (auto& ex : soft_data) {
      ex.soft[TaskId::A] = one_hot(TaskId::A, ex.hard.at(TaskId::A));
      ex.hard.clear();
    }
    const auto init = init_params<float>(config, 2);
    const auto hard = finetune(init, vocab, data, TaskId::A, train, LossMode::hard);
    FinetuneOptions<float> opts;
    opts.hard_as_soft = false;
    const auto soft = finetune(init, vocab, soft_data, TaskId::A, train, LossMode::soft, opts);
    CHECK(bytes_of(hard.params) == bytes_of(soft.params));
    // Hard labels used as one-hot soft targets give the same run too.
    const auto mixed = finetune(init, vocab, data, TaskId::A, train, LossMode::soft);
    CHECK(bytes_of(hard.params) == bytes_of(mixed.params));
    for (std::size_t e = 0; e < 3; ++e) CHECK(hard.history[e].train_loss == soft.history[e].train_loss);
  }
  SUBCASE("full runs are deterministic, including dropout") {
    train.epochs = 2;
    config.dropout = 0.1;
    const auto a = finetune(init_params<float>(config, 3), vocab, data, TaskId::A, train, LossMode::hard);
    const auto b = finetune(init_params<float>(config, 3), vocab, data, TaskId::A, train, LossMode::hard);
    CHECK(bytes_of(a.params) == bytes_of(b.params));
    CHECK(history_to_jsonl(a.history) == history_to_jsonl(b.history));
  }
  SUBCASE("input errors") {
    train.epochs = 1;
    const std::vector<LabeledExample> none;
    CHECK_THROWS_AS(finetune(init_params<float>(config, 1), vocab, none, TaskId::A, train, LossMode::hard),
                    InvalidArgument);
    CHECK_THROWS_AS(finetune(init_params<float>(config, 1), vocab, data, TaskId::C, train, LossMode::hard),
                    InvalidArgument);
    auto unlabeled = data;
    unlabeled[3].hard.clear();
    try {
      finetune(init_params<float>(config, 1), vocab, unlabeled, TaskId::A, train, LossMode::hard);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(e.ids() == std::vector<std::string>{"t3"});
    }
    FinetuneOptions<float> strict;
    strict.hard_as_soft = false;
    CHECK_THROWS_AS(finetune(init_params<float>(config, 1), vocab, data, TaskId::A, train, LossMode::soft, strict),
                    ValidationError);
  }
}

TEST_CASE("train config") {
  TrainConfig c;
  CHECK(c.resolved_warmup(100) == 10);
  c.warmup_steps = 0;
  CHECK(c.resolved_warmup(100) == 0);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  const std::vector<EpochRecord> h{{1, 0.5, std::nullopt}, {2, 0.25, 0.75}};
  const auto text = history_to_jsonl(h);
  CHECK(text.find("\"epoch\":1") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 2);
}
