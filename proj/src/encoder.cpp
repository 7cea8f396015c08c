#include "offkd/encoder.hpp"

#include "encoder_kernels.hpp"

namespace offkd {
namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

bool is_bias_or_norm(const std::string& name) {
  return name.ends_with(".bias") || name.ends_with(".gain");
}

}  // namespace

void EncoderConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidArgument("invalid encoder config: " + what);
  };
  require(layers >= 1, "layers must be >= 1");
  require(hidden >= 1, "hidden must be >= 1");
  require(heads >= 1, "heads must be >= 1");
  require(ffn >= 1, "ffn must be >= 1");
  require(max_len >= 2, "max_len must be >= 2");
  require(vocab_size >= 1, "vocab_size must be >= 1");
  require(hidden % heads == 0, "hidden (" + std::to_string(hidden) +
                                   ") must be divisible by heads (" + std::to_string(heads) + ")");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
  for (const auto& [task, classes] : task_classes) {
    require(classes == num_labels(task), "task " + std::string(task_name(task)) + " head needs " +
                                             std::to_string(num_labels(task)) + " classes");
  }
}

template <typename T>
ModelParameters<T> zero_params(const EncoderConfig& config) {
  config.validate();
  const auto d = config.hidden;
  const auto f = config.ffn;
  ModelParameters<T> p;
  p.config = config;
  p.token_embedding = Tensor<T>({config.vocab_size, d});
  p.position_embedding = Tensor<T>({config.max_len, d});
  p.layers.resize(config.layers);
  for (auto& l : p.layers) {
    l.query_weight = Tensor<T>({d, d});
    l.query_bias = Tensor<T>({d});
    l.key_weight = Tensor<T>({d, d});
    l.key_bias = Tensor<T>({d});
    l.value_weight = Tensor<T>({d, d});
    l.value_bias = Tensor<T>({d});
    l.output_weight = Tensor<T>({d, d});
    l.output_bias = Tensor<T>({d});
    l.attention_norm_gain = Tensor<T>({d});
    l.attention_norm_bias = Tensor<T>({d});
    l.ffn_in_weight = Tensor<T>({d, f});
    l.ffn_in_bias = Tensor<T>({f});
    l.ffn_out_weight = Tensor<T>({f, d});
    l.ffn_out_bias = Tensor<T>({d});
    l.ffn_norm_gain = Tensor<T>({d});
    l.ffn_norm_bias = Tensor<T>({d});
  }
  if (!config.tie_mlm) p.mlm_weight = Tensor<T>({d, config.vocab_size});
  p.mlm_bias = Tensor<T>({config.vocab_size});
  for (const auto& [task, classes] : config.task_classes) {
    p.heads[task] = ClassifierHead<T>{Tensor<T>({d, classes}), Tensor<T>({classes})};
  }
  return p;
}

template <typename T>
ModelParameters<T> zeros_like(const ModelParameters<T>& params) {
  return zero_params<T>(params.config);
}

template <typename T>
ModelParameters<T> init_params(const EncoderConfig& config, std::uint64_t seed) {
  auto p = zero_params<T>(config);
  p.visit([&](const std::string& name, Tensor<T>& t) {
    if (name.ends_with(".gain")) {
      std::fill(t.data.begin(), t.data.end(), T(1));
      return;
    }
    if (is_bias_or_norm(name)) return;
    Rng rng(mix_seed({seed, fnv1a(name)}));
    for (auto& v : t.data) {
      double z = rng.normal();
      while (std::abs(z) > 2.0) z = rng.normal();
      v = static_cast<T>(0.02 * z);
    }
  });
  return p;
}

template <typename T>
std::size_t param_count(const ModelParameters<T>& params) {
  std::size_t n = 0;
  params.visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename To, typename From>
ModelParameters<To> cast_params(const ModelParameters<From>& params) {
  auto out = zero_params<To>(params.config);
  std::vector<const Tensor<From>*> src;
  params.visit([&](const std::string&, const Tensor<From>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit([&](const std::string&, Tensor<To>& t) {
    const auto& s = *src[i++];
    for (std::size_t k = 0; k < t.size(); ++k) t.data[k] = static_cast<To>(s.data[k]);
  });
  return out;
}

template <typename T>
Tensor<T> mlm_projection(const ModelParameters<T>& params) {
  if (!params.config.tie_mlm) return params.mlm_weight;
  const auto d = params.config.hidden;
  const auto vocab = params.config.vocab_size;
  Tensor<T> out({d, vocab});
  for (std::size_t v = 0; v < vocab; ++v) {
    for (std::size_t i = 0; i < d; ++i) out.data[i * vocab + v] = params.token_embedding.data[v * d + i];
  }
  return out;
}

template <typename T>
EncoderOutput<T> forward(const ModelParameters<T>& params, std::span<const TokenSequence> batch,
                         bool train_mode, std::uint64_t seed) {
  if (batch.empty()) throw InvalidArgument("forward needs a non-empty batch");
  const std::size_t seq = batch[0].length();
  const std::size_t d = params.config.hidden;
  EncoderOutput<T> out;
  out.batch = batch.size();
  out.seq_len = seq;
  out.hidden = d;
  out.hidden_states.resize(batch.size() * seq * d);
  out.cls_embedding.resize(batch.size() * d);
  detail::SequenceCache<T> cache;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].length() != seq) throw InvalidArgument("all sequences in a batch need one length");
    detail::DropoutPlan plan{params.config.dropout, seed, b};
    detail::encode_sequence(params, batch[b].ids, batch[b].attention_mask,
                            train_mode ? &plan : nullptr, cache);
    const auto& top = cache.top();
    std::copy(top.begin(), top.end(), out.hidden_states.begin() + static_cast<std::ptrdiff_t>(b * seq * d));
    std::copy_n(top.begin(), d, out.cls_embedding.begin() + static_cast<std::ptrdiff_t>(b * d));
  }
  return out;
}

template <typename T>
std::vector<SoftDistribution> classify(const ModelParameters<T>& params,
                                       std::span<const TokenSequence> batch, TaskId task) {
  const auto head = params.heads.find(task);
  if (head == params.heads.end()) {
    throw InvalidArgument("model has no classification head for task " +
                          std::string(task_name(task)));
  }
  std::vector<SoftDistribution> out;
  out.reserve(batch.size());
  detail::SequenceCache<T> cache;
  for (const auto& seq : batch) {
    // Padded keys never influence unpadded rows, so only the valid prefix is
    // evaluated.
    const auto n = std::max<std::size_t>(seq.valid_length(), 1);
    detail::encode_sequence(params, std::span(seq.ids).first(n),
                            std::span(seq.attention_mask).first(n), nullptr, cache);
    auto logits = detail::head_logits(head->second, cache.top().data(), params.config.hidden);
    out.push_back(SoftDistribution{task, detail::softmax(logits)});
  }
  return out;
}

template <typename T>
MlmLogits<T> mlm_logits(const ModelParameters<T>& params, std::span<const TokenSequence> batch) {
  const auto enc = forward(params, batch, false, 0);
  MlmLogits<T> out;
  out.batch = enc.batch;
  out.seq_len = enc.seq_len;
  out.vocab = params.config.vocab_size;
  out.values.resize(out.batch * out.seq_len * out.vocab);
  std::vector<T> row;
  for (std::size_t r = 0; r < out.batch * out.seq_len; ++r) {
    detail::mlm_row_logits(params, enc.hidden_states.data() + r * enc.hidden, row);
    std::copy(row.begin(), row.end(), out.values.begin() + static_cast<std::ptrdiff_t>(r * out.vocab));
  }
  return out;
}

#define OFFKD_INSTANTIATE(T)                                                                     \
  template ModelParameters<T> zero_params<T>(const EncoderConfig&);                              \
  template ModelParameters<T> zeros_like<T>(const ModelParameters<T>&);                          \
  template ModelParameters<T> init_params<T>(const EncoderConfig&, std::uint64_t);               \
  template std::size_t param_count<T>(const ModelParameters<T>&);                                \
  template Tensor<T> mlm_projection<T>(const ModelParameters<T>&);                               \
  template EncoderOutput<T> forward<T>(const ModelParameters<T>&, std::span<const TokenSequence>, \
                                       bool, std::uint64_t);                                     \
  template std::vector<SoftDistribution> classify<T>(const ModelParameters<T>&,                  \
                                                     std::span<const TokenSequence>, TaskId);    \
  template MlmLogits<T> mlm_logits<T>(const ModelParameters<T>&, std::span<const TokenSequence>);

OFFKD_INSTANTIATE(float)
OFFKD_INSTANTIATE(double)
#undef OFFKD_INSTANTIATE

template ModelParameters<double> cast_params<double, float>(const ModelParameters<float>&);
template ModelParameters<float> cast_params<float, double>(const ModelParameters<double>&);
template ModelParameters<float> cast_params<float, float>(const ModelParameters<float>&);
template ModelParameters<double> cast_params<double, double>(const ModelParameters<double>&);

}  // namespace offkd
