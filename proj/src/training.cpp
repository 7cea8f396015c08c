#include "offkd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "encoder_kernels.hpp"
#include "json.hpp"
#include "offkd/evaluation.hpp"

namespace offkd {
namespace {

constexpr double kProbabilityFloor = 1e-12;
constexpr double kRelativeErrorFloor = 1e-6;

template <typename T>
std::vector<std::span<T>> flat_views(ModelParameters<T>& p) {
  std::vector<std::span<T>> out;
  p.visit([&](const std::string&, Tensor<T>& t) { out.emplace_back(t.data); });
  return out;
}

template <typename T>
std::vector<std::span<const T>> flat_views(const ModelParameters<T>& p) {
  std::vector<std::span<const T>> out;
  p.visit([&](const std::string&, const Tensor<T>& t) { out.emplace_back(t.data); });
  return out;
}

template <typename T>
std::string first_non_finite(const ModelParameters<T>& p) {
  std::string found;
  p.visit([&](const std::string& name, const Tensor<T>& t) {
    if (!found.empty()) return;
    for (T v : t.data) {
      if (!std::isfinite(v)) {
        found = name;
        return;
      }
    }
  });
  return found;
}

std::vector<SoftDistribution> classification_targets(const LossSpec& spec, std::size_t batch) {
  if (spec.kind == LossKind::hard_ce) {
    if (spec.labels.size() != batch) throw InvalidArgument("hard-label count does not match batch size");
    std::vector<SoftDistribution> q;
    q.reserve(batch);
    for (auto y : spec.labels) q.push_back(one_hot(spec.task, y));
    return q;
  }
  if (spec.targets.size() != batch) throw InvalidArgument("soft-target count does not match batch size");
  for (const auto& t : spec.targets) {
    if (t.task != spec.task || t.probs.size() != num_labels(spec.task)) {
      throw InvalidArgument("soft target does not match the task's label set");
    }
  }
  return spec.targets;
}

// Shared loss evaluation; accumulates gradients when `grads` is non-null.
template <typename T>
double run_loss(const ModelParameters<T>& params, std::span<const TokenSequence> batch,
                const LossSpec& spec, bool train_mode, std::uint64_t seed,
                ModelParameters<T>* grads) {
  if (batch.empty()) throw InvalidArgument("loss needs a non-empty batch");
  const auto& cfg = params.config;
  const std::size_t d = cfg.hidden;
  const bool is_mlm = spec.kind == LossKind::mlm;

  std::vector<SoftDistribution> q;
  const ClassifierHead<T>* head = nullptr;
  ClassifierHead<T>* head_grad = nullptr;
  std::size_t masked_total = 0;
  if (is_mlm) {
    if (spec.mlm_targets.size() != batch.size()) {
      throw InvalidArgument("MLM target maps do not match batch size");
    }
    for (const auto& m : spec.mlm_targets) masked_total += m.size();
  } else {
    q = classification_targets(spec, batch.size());
    const auto it = params.heads.find(spec.task);
    if (it == params.heads.end()) {
      throw InvalidArgument("model has no classification head for task " +
                            std::string(task_name(spec.task)));
    }
    head = &it->second;
    if (grads) head_grad = &grads->heads.at(spec.task);
  }

  detail::SequenceCache<T> cache;
  std::vector<T> d_top;
  std::vector<T> row;
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& seq = batch[b];
    const auto n = std::max<std::size_t>(seq.valid_length(), 1);
    if (is_mlm && spec.mlm_targets[b].empty() && !grads) continue;
    detail::DropoutPlan plan{cfg.dropout, seed, b};
    detail::encode_sequence(params, std::span(seq.ids).first(std::min(n, seq.ids.size())),
                            std::span(seq.attention_mask).first(std::min(n, seq.ids.size())),
                            train_mode ? &plan : nullptr, cache);
    const auto& top = cache.top();
    if (grads) d_top.assign(n * d, T(0));

    if (!is_mlm) {
      const auto logits = detail::head_logits(*head, top.data(), d);
      const SoftDistribution p{spec.task, detail::softmax(logits)};
      loss_sum += soft_cross_entropy(q[b], p);
      if (grads) {
        double q_sum = 0.0;
        for (double v : q[b].probs) q_sum += v;
        const std::size_t classes = logits.size();
        std::vector<T> dlogits(classes);
        for (std::size_t c = 0; c < classes; ++c) {
          dlogits[c] = static_cast<T>((p.probs[c] * q_sum - q[b].probs[c]) /
                                      static_cast<double>(batch.size()));
        }
        for (std::size_t i = 0; i < d; ++i) {
          const T* w = head->weight.data.data() + i * classes;
          T* dw = head_grad->weight.data.data() + i * classes;
          T acc = T(0);
          for (std::size_t c = 0; c < classes; ++c) {
            dw[c] += top[i] * dlogits[c];
            acc += w[c] * dlogits[c];
          }
          d_top[i] += acc;
        }
        for (std::size_t c = 0; c < classes; ++c) head_grad->bias.data[c] += dlogits[c];
      }
    } else {
      const std::size_t vocab = cfg.vocab_size;
      for (const auto& [pos, target] : spec.mlm_targets[b]) {
        if (pos >= n) throw InvalidArgument("MLM target position outside the unpadded sequence");
        if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
          throw InvalidArgument("MLM target id out of vocabulary range");
        }
        const T* h = top.data() + pos * d;
        detail::mlm_row_logits(params, h, row);
        const auto p = detail::softmax(std::vector<double>(row.begin(), row.end()));
        const auto tgt = static_cast<std::size_t>(target);
        loss_sum += -std::log(std::max(p[tgt], kProbabilityFloor));
        if (!grads) continue;
        T* dh = d_top.data() + pos * d;
        for (std::size_t v = 0; v < vocab; ++v) {
          const T g = static_cast<T>((p[v] - (v == tgt ? 1.0 : 0.0)) /
                                     static_cast<double>(masked_total));
          grads->mlm_bias.data[v] += g;
          if (cfg.tie_mlm) {
            const T* e = params.token_embedding.data.data() + v * d;
            T* de = grads->token_embedding.data.data() + v * d;
            for (std::size_t i = 0; i < d; ++i) {
              de[i] += g * h[i];
              dh[i] += g * e[i];
            }
          } else {
            for (std::size_t i = 0; i < d; ++i) {
              grads->mlm_weight.data[i * vocab + v] += g * h[i];
              dh[i] += g * params.mlm_weight.data[i * vocab + v];
            }
          }
        }
      }
    }
    if (grads) detail::backprop_sequence(params, cache, std::move(d_top), *grads);
  }

  if (is_mlm) return masked_total == 0 ? 0.0 : loss_sum / static_cast<double>(masked_total);
  return loss_sum / static_cast<double>(batch.size());
}

template <typename T>
std::vector<TokenSequence> encode_all(std::span<const LabeledExample> examples,
                                      const Vocabulary& vocab, std::size_t max_len) {
  std::vector<TokenSequence> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode(ex.text, vocab, max_len));
  return out;
}

void check_vocab(const Vocabulary& vocab, const EncoderConfig& config) {
  if (vocab.size() > config.vocab_size) {
    throw InvalidArgument("vocabulary has " + std::to_string(vocab.size()) +
                          " tokens but the encoder embeds only " +
                          std::to_string(config.vocab_size));
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidArgument("invalid training config: " + what);
  };
  require(learning_rate > 0.0, "learning rate must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must lie in [0,1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must lie in [0,1)");
  require(epsilon > 0.0, "epsilon must be > 0");
  require(batch_size >= 1, "batch size must be >= 1");
}

std::size_t TrainConfig::resolved_warmup(std::size_t total_steps) const noexcept {
  return warmup_steps.value_or(total_steps / 10);
}

template <typename T>
void adam_step(std::span<const std::span<T>> params, std::span<const std::span<const T>> grads,
               OptimizerState<T>& state, const TrainConfig& config) {
  if (params.size() != grads.size()) throw InvalidArgument("adam_step: tensor count mismatch");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T(0));
      state.second_moment.emplace_back(p.size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw InvalidArgument("adam_step: optimizer state does not match parameters");
  }
  double norm_sq = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size() || state.first_moment[k].size() != params[k].size()) {
      throw InvalidArgument("adam_step: shape mismatch in tensor " + std::to_string(k));
    }
    for (T g : grads[k]) norm_sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(norm_sq);
  const double clip = config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;

  const std::uint64_t t = ++state.step;
  const std::size_t warmup = config.warmup_steps.value_or(0);
  double lr = config.learning_rate;
  if (warmup > 0 && t < warmup) lr *= static_cast<double>(t) / static_cast<double>(warmup);
  const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    auto p = params[k];
    const auto g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * clip;
      const double mi = config.beta1 * static_cast<double>(m[i]) + (1.0 - config.beta1) * gi;
      const double vi = config.beta2 * static_cast<double>(v[i]) + (1.0 - config.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / bias1) / (std::sqrt(vi / bias2) + config.epsilon);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
    }
  }
}

template <typename T>
void adam_step(ModelParameters<T>& params, const ModelParameters<T>& grads,
               OptimizerState<T>& state, const TrainConfig& config) {
  const auto p = flat_views(params);
  const auto g = flat_views(grads);
  adam_step<T>(std::span<const std::span<T>>(p), std::span<const std::span<const T>>(g), state, config);
}

double soft_cross_entropy(const SoftDistribution& q, const SoftDistribution& p) {
  if (q.probs.size() != p.probs.size()) {
    throw InvalidArgument("cross entropy over distributions of different sizes (" +
                          std::to_string(q.probs.size()) + " vs " + std::to_string(p.probs.size()) + ")");
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < q.probs.size(); ++c) {
    if (q.probs[c] == 0.0) continue;
    sum += q.probs[c] * std::log(std::max(p.probs[c], kProbabilityFloor));
  }
  return -sum;
}

double soft_cross_entropy(std::span<const SoftDistribution> q, std::span<const SoftDistribution> p) {
  if (q.size() != p.size()) throw InvalidArgument("cross entropy batch size mismatch");
  if (q.empty()) throw InvalidArgument("cross entropy of an empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) sum += soft_cross_entropy(q[i], p[i]);
  return sum / static_cast<double>(q.size());
}

double hard_cross_entropy(std::size_t label, const SoftDistribution& p) {
  if (label >= p.probs.size()) {
    throw InvalidArgument("label " + std::to_string(label) + " outside a " +
                          std::to_string(p.probs.size()) + "-class distribution");
  }
  return soft_cross_entropy(one_hot(p.task, label), p);
}

double kl_divergence(const SoftDistribution& q, const SoftDistribution& p) {
  return soft_cross_entropy(q, p) - soft_cross_entropy(q, q);
}

void MaskingPolicy::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(mask_fraction) || !in_unit(mask_prob) || !in_unit(random_prob) || !in_unit(keep_prob)) {
    throw InvalidArgument("masking fractions must lie in [0,1]");
  }
  if (std::abs(mask_prob + random_prob + keep_prob - 1.0) > 1e-9) {
    throw InvalidArgument("masking action split must sum to 1");
  }
}

MaskedSequence mask_tokens(const TokenSequence& seq, const MaskingPolicy& policy,
                           std::size_t vocab_size, std::uint64_t seed) {
  policy.validate();
  MaskedSequence out{seq, {}};
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.attention_mask[i] != 0 && !Vocabulary::is_special(seq.ids[i])) eligible.push_back(i);
  }
  if (eligible.empty() || policy.mask_fraction <= 0.0) return out;
  auto count = static_cast<std::size_t>(
      std::llround(policy.mask_fraction * static_cast<double>(eligible.size())));
  count = std::clamp<std::size_t>(count, 1, eligible.size());

  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());
  const auto ordinary = vocab_size > static_cast<std::size_t>(Vocabulary::kNumSpecial)
                            ? vocab_size - static_cast<std::size_t>(Vocabulary::kNumSpecial)
                            : 0;
  for (auto pos : eligible) {
    out.targets[pos] = seq.ids[pos];
    const double u = rng.uniform();
    if (u < policy.mask_prob) {
      out.sequence.ids[pos] = Vocabulary::kMask;
    } else if (u < policy.mask_prob + policy.random_prob && ordinary > 0) {
      out.sequence.ids[pos] =
          static_cast<TokenId>(Vocabulary::kNumSpecial + static_cast<TokenId>(rng.below(ordinary)));
    }
  }
  return out;
}

LossSpec LossSpec::mlm(std::vector<std::map<std::size_t, TokenId>> targets) {
  LossSpec s;
  s.kind = LossKind::mlm;
  s.mlm_targets = std::move(targets);
  return s;
}

LossSpec LossSpec::hard(TaskId task, std::vector<std::size_t> labels) {
  LossSpec s;
  s.kind = LossKind::hard_ce;
  s.task = task;
  s.labels = std::move(labels);
  return s;
}

LossSpec LossSpec::soft(TaskId task, std::vector<SoftDistribution> targets) {
  LossSpec s;
  s.kind = LossKind::soft_ce;
  s.task = task;
  s.targets = std::move(targets);
  return s;
}

template <typename T>
LossAndGradients<T> backward(const ModelParameters<T>& params, std::span<const TokenSequence> batch,
                             const LossSpec& spec, bool train_mode, std::uint64_t seed) {
  LossAndGradients<T> out{0.0, zeros_like(params)};
  out.loss = run_loss(params, batch, spec, train_mode, seed, &out.grads);
  if (!std::isfinite(out.loss)) {
    auto name = first_non_finite(params);
    if (name.empty()) name = first_non_finite(out.grads);
    if (name.empty()) name = "loss";
    throw NumericError("non-finite loss; first non-finite tensor: " + name);
  }
  return out;
}

template <typename T>
double compute_loss(const ModelParameters<T>& params, std::span<const TokenSequence> batch,
                    const LossSpec& spec, bool train_mode, std::uint64_t seed) {
  return run_loss<T>(params, batch, spec, train_mode, seed, nullptr);
}

GradCheckResult grad_check(const ModelParameters<double>& params,
                           std::span<const TokenSequence> batch, const LossSpec& spec, double eps,
                           std::size_t min_coordinates, std::uint64_t seed,
                           const std::function<bool(const std::string&)>& tensor_filter) {
  if (!(eps > 0.0)) throw InvalidArgument("grad_check needs eps > 0");
  const auto analytic = backward(params, batch, spec, false, 0).grads;
  auto work = params;

  struct Entry {
    std::string name;
    Tensor<double>* value;
    const Tensor<double>* grad;
    std::vector<std::size_t> candidates;
  };
  std::vector<Entry> entries;
  std::vector<const Tensor<double>*> grad_tensors;
  analytic.visit([&](const std::string&, const Tensor<double>& t) { grad_tensors.push_back(&t); });

  std::set<TokenId> used_tokens;
  std::size_t max_rows = 0;
  for (const auto& seq : batch) {
    const auto n = std::max<std::size_t>(seq.valid_length(), 1);
    max_rows = std::max(max_rows, n);
    for (std::size_t i = 0; i < n; ++i) used_tokens.insert(seq.ids[i]);
  }
  const std::size_t d = params.config.hidden;
  std::size_t index = 0;
  work.visit([&](const std::string& name, Tensor<double>& t) {
    const auto* g = grad_tensors[index++];
    if (tensor_filter && !tensor_filter(name)) return;
    Entry e{name, &t, g, {}};
    if (name == "embeddings.token" && !params.config.tie_mlm) {
      for (auto tok : used_tokens) {
        for (std::size_t i = 0; i < d; ++i) e.candidates.push_back(static_cast<std::size_t>(tok) * d + i);
      }
    } else if (name == "embeddings.position") {
      for (std::size_t k = 0; k < max_rows * d; ++k) e.candidates.push_back(k);
    } else {
      e.candidates.resize(t.size());
      std::iota(e.candidates.begin(), e.candidates.end(), std::size_t{0});
    }
    Rng rng(mix_seed({seed, index}));
    rng.shuffle(e.candidates);
    entries.push_back(std::move(e));
  });
  if (entries.empty()) throw InvalidArgument("grad_check: no tensors selected");

  // Round-robin over tensors so every tensor is represented.
  std::vector<std::size_t> taken(entries.size(), 0);
  std::size_t total = 0;
  const std::size_t per_tensor = (min_coordinates + entries.size() - 1) / entries.size();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    taken[k] = std::min(per_tensor, entries[k].candidates.size());
    total += taken[k];
  }
  bool progress = true;
  while (total < min_coordinates && progress) {
    progress = false;
    for (std::size_t k = 0; k < entries.size() && total < min_coordinates; ++k) {
      if (taken[k] < entries[k].candidates.size()) {
        ++taken[k];
        ++total;
        progress = true;
      }
    }
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto& e = entries[k];
    for (std::size_t c = 0; c < taken[k]; ++c) {
      const auto idx = e.candidates[c];
      const double original = e.value->data[idx];
      e.value->data[idx] = original + eps;
      const double plus = compute_loss(work, batch, spec);
      e.value->data[idx] = original - eps;
      const double minus = compute_loss(work, batch, spec);
      e.value->data[idx] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = e.grad->data[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), kRelativeErrorFloor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_relative_error || result.worst_tensor.empty()) {
        result.max_relative_error = std::max(result.max_relative_error, rel);
        if (rel >= result.max_relative_error) {
          result.worst_tensor = e.name;
          result.worst_index = idx;
          result.worst_analytic = a;
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

std::string history_to_jsonl(std::span<const EpochRecord> history) {
  std::string out;
  for (const auto& r : history) {
    nlohmann::json j{{"epoch", r.epoch}, {"train_loss", r.train_loss}};
    if (r.val_macro_f1) j["val_macro_f1"] = *r.val_macro_f1;
    out += j.dump() + "\n";
  }
  return out;
}

template <typename T>
TrainResult<T> pretrain_mlm(std::span<const std::string> corpus, const Vocabulary& vocab,
                            const EncoderConfig& config, const TrainConfig& train,
                            const MaskingPolicy& policy, const EpochCallback<T>& on_epoch_end) {
  config.validate();
  train.validate();
  policy.validate();
  if (corpus.empty()) throw InvalidArgument("pretraining corpus is empty");
  check_vocab(vocab, config);

  TrainResult<T> result{init_params<T>(config, train.seed), {}};
  std::vector<TokenSequence> seqs;
  seqs.reserve(corpus.size());
  for (const auto& doc : corpus) seqs.push_back(encode(doc, vocab, config.max_len));

  const std::size_t n = seqs.size();
  const std::size_t steps_per_epoch = (n + train.batch_size - 1) / train.batch_size;
  TrainConfig opt = train;
  opt.warmup_steps = train.resolved_warmup(steps_per_epoch * train.epochs);
  OptimizerState<T> state;
  std::uint64_t step = 0;
  std::vector<TokenSequence> batch;
  std::vector<std::map<std::size_t, TokenId>> targets;
  for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(mix_seed({train.seed, epoch, 0x5EED})).shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += train.batch_size) {
      batch.clear();
      targets.clear();
      for (std::size_t i = start; i < std::min(n, start + train.batch_size); ++i) {
        auto masked = mask_tokens(seqs[order[i]], policy, config.vocab_size,
                                  mix_seed({train.seed, epoch, order[i]}));
        batch.push_back(std::move(masked.sequence));
        targets.push_back(std::move(masked.targets));
      }
      auto lg = backward(result.params, std::span<const TokenSequence>(batch),
                         LossSpec::mlm(targets), true, mix_seed({train.seed, epoch, ++step}));
      adam_step(result.params, lg.grads, state, opt);
      loss_sum += lg.loss;
      ++batches;
    }
    result.history.push_back({epoch, loss_sum / static_cast<double>(batches), std::nullopt});
    if (on_epoch_end) on_epoch_end(epoch, result.params);
  }
  return result;
}

template <typename T>
double masked_token_accuracy(const ModelParameters<T>& params, std::span<const std::string> corpus,
                             const Vocabulary& vocab, const MaskingPolicy& policy,
                             std::uint64_t seed) {
  std::size_t hits = 0;
  std::size_t total = 0;
  detail::SequenceCache<T> cache;
  std::vector<T> row;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto seq = encode(corpus[i], vocab, params.config.max_len);
    const auto masked = mask_tokens(seq, policy, params.config.vocab_size, mix_seed({seed, i}));
    if (masked.targets.empty()) continue;
    const auto n = masked.sequence.valid_length();
    detail::encode_sequence(params, std::span(masked.sequence.ids).first(n),
                            std::span(masked.sequence.attention_mask).first(n), nullptr, cache);
    for (const auto& [pos, target] : masked.targets) {
      detail::mlm_row_logits(params, cache.top().data() + pos * params.config.hidden, row);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      hits += best == target ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

template <typename T>
std::vector<SoftDistribution> predict_proba(const ModelParameters<T>& params,
                                            const Vocabulary& vocab,
                                            std::span<const LabeledExample> examples, TaskId task) {
  const auto seqs = encode_all<T>(examples, vocab, params.config.max_len);
  return classify(params, std::span<const TokenSequence>(seqs), task);
}

template <typename T>
std::optional<double> evaluate_macro_f1(const ModelParameters<T>& params, const Vocabulary& vocab,
                                        std::span<const LabeledExample> examples, TaskId task) {
  std::vector<LabeledExample> scored;
  std::vector<std::size_t> golds;
  for (const auto& ex : examples) {
    const auto it = ex.hard.find(task);
    if (it == ex.hard.end()) continue;
    scored.push_back(ex);
    golds.push_back(it->second);
  }
  if (scored.empty()) return std::nullopt;
  const auto probs = predict_proba(params, vocab, std::span<const LabeledExample>(scored), task);
  std::vector<std::size_t> preds;
  preds.reserve(probs.size());
  for (const auto& p : probs) preds.push_back(p.argmax());
  return macro_f1(confusion(std::span<const std::size_t>(golds), std::span<const std::size_t>(preds), task));
}

template <typename T>
TrainResult<T> finetune(ModelParameters<T> init, const Vocabulary& vocab,
                        std::span<const LabeledExample> dataset, TaskId task,
                        const TrainConfig& config, LossMode mode,
                        const FinetuneOptions<T>& options) {
  config.validate();
  init.config.validate();
  if (dataset.empty()) throw InvalidArgument("fine-tuning dataset is empty");
  check_vocab(vocab, init.config);
  if (!init.heads.contains(task)) {
    throw InvalidArgument("model has no classification head for task " + std::string(task_name(task)));
  }

  std::vector<std::size_t> labels;
  std::vector<SoftDistribution> soft_targets;
  std::vector<std::string> missing;
  for (const auto& ex : dataset) {
    const auto hard = ex.hard.find(task);
    if (mode == LossMode::hard) {
      if (hard == ex.hard.end()) {
        missing.push_back(ex.id);
      } else {
        labels.push_back(hard->second);
      }
      continue;
    }
    const auto soft = ex.soft.find(task);
    if (soft != ex.soft.end()) {
      soft_targets.push_back(soft->second);
    } else if (options.hard_as_soft && hard != ex.hard.end()) {
      soft_targets.push_back(one_hot(task, hard->second));
    } else {
      missing.push_back(ex.id);
    }
  }
  if (!missing.empty()) {
    throw ValidationError(std::string("examples lack a ") + (mode == LossMode::hard ? "hard" : "soft") +
                              " subtask_" + std::string(task_name(task)) + " label",
                          std::move(missing));
  }

  const auto seqs = encode_all<T>(dataset, vocab, init.config.max_len);
  const std::size_t n = seqs.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  TrainConfig opt = config;
  opt.warmup_steps = config.resolved_warmup(steps_per_epoch * config.epochs);

  TrainResult<T> result{std::move(init), {}};
  OptimizerState<T> state;
  std::uint64_t step = 0;
  std::vector<TokenSequence> batch;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(mix_seed({config.seed, epoch, 0x5EED})).shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      batch.clear();
      LossSpec spec = mode == LossMode::hard ? LossSpec::hard(task, {}) : LossSpec::soft(task, {});
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(seqs[order[i]]);
        if (mode == LossMode::hard) {
          spec.labels.push_back(labels[order[i]]);
        } else {
          spec.targets.push_back(soft_targets[order[i]]);
        }
      }
      auto lg = backward(result.params, std::span<const TokenSequence>(batch), spec, true,
                         mix_seed({config.seed, epoch, ++step}));
      adam_step(result.params, lg.grads, state, opt);
      loss_sum += lg.loss;
      ++batches;
    }
    EpochRecord record{epoch, loss_sum / static_cast<double>(batches), std::nullopt};
    if (!options.validation.empty()) {
      record.val_macro_f1 = evaluate_macro_f1(result.params, vocab, options.validation, task);
    }
    result.history.push_back(record);
    if (options.on_epoch_end) options.on_epoch_end(epoch, result.params);
  }
  return result;
}

#define OFFKD_INSTANTIATE(T)                                                                       \
  template void adam_step<T>(std::span<const std::span<T>>, std::span<const std::span<const T>>,  \
                             OptimizerState<T>&, const TrainConfig&);                              \
  template void adam_step<T>(ModelParameters<T>&, const ModelParameters<T>&, OptimizerState<T>&,   \
                             const TrainConfig&);                                                  \
  template LossAndGradients<T> backward<T>(const ModelParameters<T>&,                              \
                                           std::span<const TokenSequence>, const LossSpec&, bool,  \
                                           std::uint64_t);                                         \
  template double compute_loss<T>(const ModelParameters<T>&, std::span<const TokenSequence>,       \
                                  const LossSpec&, bool, std::uint64_t);                           \
  template TrainResult<T> pretrain_mlm<T>(std::span<const std::string>, const Vocabulary&,         \
                                          const EncoderConfig&, const TrainConfig&,                \
                                          const MaskingPolicy&, const EpochCallback<T>&);          \
  template double masked_token_accuracy<T>(const ModelParameters<T>&, std::span<const std::string>, \
                                           const Vocabulary&, const MaskingPolicy&, std::uint64_t); \
  template TrainResult<T> finetune<T>(ModelParameters<T>, const Vocabulary&,                       \
                                      std::span<const LabeledExample>, TaskId, const TrainConfig&, \
                                      LossMode, const FinetuneOptions<T>&);                        \
  template std::vector<SoftDistribution> predict_proba<T>(                                         \
      const ModelParameters<T>&, const Vocabulary&, std::span<const LabeledExample>, TaskId);      \
  template std::optional<double> evaluate_macro_f1<T>(                                             \
      const ModelParameters<T>&, const Vocabulary&, std::span<const LabeledExample>, TaskId);

OFFKD_INSTANTIATE(float)
OFFKD_INSTANTIATE(double)
#undef OFFKD_INSTANTIATE

}  // namespace offkd
