#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "offkd/corpus.hpp"
#include "offkd/encoder.hpp"
#include "offkd/labels.hpp"
#include "offkd/tokenizer.hpp"

namespace offkd {

struct TrainConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 16;
  std::size_t epochs = 3;
  // Linear warmup length in optimizer steps; unset means 10% of all steps.
  std::optional<std::size_t> warmup_steps;
  // Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t resolved_warmup(std::size_t total_steps) const noexcept;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update. Gradients are clipped to `clip_norm` by
// global norm first; for step t < warmup the learning rate is scaled by
// t / warmup (warmup taken from config.warmup_steps, default 0 here).
template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               OptimizerState<T>& state, const TrainConfig& config);
template <typename T>
void adam_step(ModelParameters<T>& params, const ModelParameters<T>& grads,
               OptimizerState<T>& state, const TrainConfig& config);

// Loss = -sum_c Q(c) ln P(c), natural log. P is clamped below at 1e-12 and
// classes with Q(c) = 0 contribute exactly 0.
double soft_cross_entropy(const SoftDistribution& q, const SoftDistribution& p);
// Mean over examples.
double soft_cross_entropy(std::span<const SoftDistribution> q, std::span<const SoftDistribution> p);
// Defined as soft_cross_entropy(one_hot(y), p), so the two agree bitwise.
double hard_cross_entropy(std::size_t label, const SoftDistribution& p);
double kl_divergence(const SoftDistribution& q, const SoftDistribution& p);

struct MaskingPolicy {
  double mask_fraction = 0.15;
  double mask_prob = 0.8;    // replace with [MASK]
  double random_prob = 0.1;  // replace with a random ordinary token
  double keep_prob = 0.1;    // keep the original token

  void validate() const;
};

struct MaskedSequence {
  TokenSequence sequence;
  std::map<std::size_t, TokenId> targets;  // position -> original id
};

// Selects round(fraction * eligible) positions (at least one when the
// fraction is positive) among non-special, unpadded positions.
MaskedSequence mask_tokens(const TokenSequence& seq, const MaskingPolicy& policy,
                           std::size_t vocab_size, std::uint64_t seed);

enum class LossKind { mlm, hard_ce, soft_ce };

struct LossSpec {
  LossKind kind = LossKind::soft_ce;
  TaskId task = TaskId::A;
  std::vector<std::size_t> labels;                            // hard_ce
  std::vector<SoftDistribution> targets;                      // soft_ce
  std::vector<std::map<std::size_t, TokenId>> mlm_targets;   // mlm

  static LossSpec mlm(std::vector<std::map<std::size_t, TokenId>> targets);
  static LossSpec hard(TaskId task, std::vector<std::size_t> labels);
  static LossSpec soft(TaskId task, std::vector<SoftDistribution> targets);
};

template <typename T>
struct LossAndGradients {
  double loss = 0.0;
  ModelParameters<T> grads;
};

// Mean batch loss and its gradient w.r.t. every parameter tensor. Throws
// NumericError naming the first non-finite tensor if the loss is not finite.
template <typename T>
LossAndGradients<T> backward(const ModelParameters<T>& params, std::span<const TokenSequence> batch,
                             const LossSpec& spec, bool train_mode = false, std::uint64_t seed = 0);

// Forward-only version of the loss `backward` differentiates.
template <typename T>
double compute_loss(const ModelParameters<T>& params, std::span<const TokenSequence> batch,
                    const LossSpec& spec, bool train_mode = false, std::uint64_t seed = 0);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central differences on a sample of coordinates covering every tensor
// (optionally only those `tensor_filter` accepts). Relative error is
// |a - n| / max(|a|, |n|, 1e-6); eps around 1e-4 keeps
// round-off well below that floor.
GradCheckResult grad_check(const ModelParameters<double>& params,
                           std::span<const TokenSequence> batch, const LossSpec& spec, double eps,
                           std::size_t min_coordinates = 200, std::uint64_t seed = 0,
                           const std::function<bool(const std::string&)>& tensor_filter = {});

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_macro_f1;
};

std::string history_to_jsonl(std::span<const EpochRecord> history);

template <typename T>
struct TrainResult {
  ModelParameters<T> params;
  std::vector<EpochRecord> history;
};

template <typename T>
using EpochCallback = std::function<void(std::size_t epoch, const ModelParameters<T>&)>;

// Masked-language-model pretraining from init_params(config, train.seed).
template <typename T>
TrainResult<T> pretrain_mlm(std::span<const std::string> corpus, const Vocabulary& vocab,
                            const EncoderConfig& config, const TrainConfig& train,
                            const MaskingPolicy& policy, const EpochCallback<T>& on_epoch_end = {});

// Fraction of masked positions whose argmax MLM prediction is the original
// token, evaluated without dropout.
template <typename T>
double masked_token_accuracy(const ModelParameters<T>& params, std::span<const std::string> corpus,
                             const Vocabulary& vocab, const MaskingPolicy& policy,
                             std::uint64_t seed);

enum class LossMode { hard, soft };

template <typename T>
struct FinetuneOptions {
  std::span<const LabeledExample> validation;
  // Soft mode: examples with only a hard label train on its one-hot target.
  bool hard_as_soft = true;
  EpochCallback<T> on_epoch_end;
};

template <typename T>
TrainResult<T> finetune(ModelParameters<T> init, const Vocabulary& vocab,
                        std::span<const LabeledExample> dataset, TaskId task,
                        const TrainConfig& config, LossMode mode,
                        const FinetuneOptions<T>& options = {});

// Model class probabilities for each example, evaluated without dropout.
template <typename T>
std::vector<SoftDistribution> predict_proba(const ModelParameters<T>& params,
                                            const Vocabulary& vocab,
                                            std::span<const LabeledExample> examples, TaskId task);

// Macro-F1 of argmax predictions against hard labels; examples without a hard
// label for `task` are skipped. nullopt when none remain.
template <typename T>
std::optional<double> evaluate_macro_f1(const ModelParameters<T>& params, const Vocabulary& vocab,
                                        std::span<const LabeledExample> examples, TaskId task);

}  // namespace offkd
