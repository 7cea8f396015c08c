#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "offkd/labels.hpp"
#include "offkd/tokenizer.hpp"

namespace offkd {

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t vocab_size = 2048;
  std::size_t max_len = 128;
  // One classification head per task; class counts must match the schema.
  std::map<TaskId, std::size_t> task_classes{{TaskId::A, 2}, {TaskId::B, 2}, {TaskId::C, 3}};
  double dropout = 0.1;
  // When set, the MLM projection reuses the token embedding (transposed).
  bool tie_mlm = false;

  // Throws InvalidArgument naming the first broken constraint.
  void validate() const;
  std::size_t head_dim() const noexcept { return hidden / heads; }
  bool operator==(const EncoderConfig&) const = default;
};

// Dense row-major tensor. Weight matrices are stored [in][out].
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, T fill = T(0))
      : shape(std::move(dims)), data(element_count(shape), fill) {}

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }

  static std::size_t element_count(const std::vector<std::size_t>& dims) noexcept {
    std::size_t n = dims.empty() ? 0 : 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

template <typename T>
struct LayerParams {
  Tensor<T> query_weight, query_bias;
  Tensor<T> key_weight, key_bias;
  Tensor<T> value_weight, value_bias;
  Tensor<T> output_weight, output_bias;
  Tensor<T> attention_norm_gain, attention_norm_bias;
  Tensor<T> ffn_in_weight, ffn_in_bias;
  Tensor<T> ffn_out_weight, ffn_out_bias;
  Tensor<T> ffn_norm_gain, ffn_norm_bias;
};

template <typename T>
struct ClassifierHead {
  Tensor<T> weight;  // hidden x classes
  Tensor<T> bias;    // classes
};

// Every learnable tensor of the encoder plus its MLM and classifier heads.
// The same type doubles as a gradient container.
template <typename T>
struct ModelParameters {
  EncoderConfig config;
  Tensor<T> token_embedding;     // vocab x hidden
  Tensor<T> position_embedding;  // max_len x hidden
  std::vector<LayerParams<T>> layers;
  Tensor<T> mlm_weight;  // hidden x vocab; empty when tied
  Tensor<T> mlm_bias;    // vocab
  std::map<TaskId, ClassifierHead<T>> heads;

  // Visits (name, tensor) in manifest order. Checkpoints, optimizers and
  // gradient checks all rely on this order being stable.
  template <typename F>
  void visit(F&& fn) {
    visit_impl(*this, fn);
  }
  template <typename F>
  void visit(F&& fn) const {
    visit_impl(*this, fn);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& fn) {
    fn(std::string("embeddings.token"), self.token_embedding);
    fn(std::string("embeddings.position"), self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "attention.query.weight", layer.query_weight);
      fn(p + "attention.query.bias", layer.query_bias);
      fn(p + "attention.key.weight", layer.key_weight);
      fn(p + "attention.key.bias", layer.key_bias);
      fn(p + "attention.value.weight", layer.value_weight);
      fn(p + "attention.value.bias", layer.value_bias);
      fn(p + "attention.output.weight", layer.output_weight);
      fn(p + "attention.output.bias", layer.output_bias);
      fn(p + "attention.norm.gain", layer.attention_norm_gain);
      fn(p + "attention.norm.bias", layer.attention_norm_bias);
      fn(p + "ffn.in.weight", layer.ffn_in_weight);
      fn(p + "ffn.in.bias", layer.ffn_in_bias);
      fn(p + "ffn.out.weight", layer.ffn_out_weight);
      fn(p + "ffn.out.bias", layer.ffn_out_bias);
      fn(p + "ffn.norm.gain", layer.ffn_norm_gain);
      fn(p + "ffn.norm.bias", layer.ffn_norm_bias);
    }
    if (!self.config.tie_mlm) fn(std::string("mlm.weight"), self.mlm_weight);
    fn(std::string("mlm.bias"), self.mlm_bias);
    for (auto& [task, head] : self.heads) {
      const std::string p = "heads." + std::string(task_name(task)) + ".";
      fn(p + "weight", head.weight);
      fn(p + "bias", head.bias);
    }
  }
};

// All tensors zero-filled with the shapes `config` implies.
template <typename T>
ModelParameters<T> zero_params(const EncoderConfig& config);
template <typename T>
ModelParameters<T> zeros_like(const ModelParameters<T>& params);

// Weights ~ N(0, 0.02^2) truncated at two standard deviations, biases 0,
// layer-norm gains 1. Deterministic per (config, seed).
template <typename T>
ModelParameters<T> init_params(const EncoderConfig& config, std::uint64_t seed);

template <typename T>
std::size_t param_count(const ModelParameters<T>& params);

template <typename To, typename From>
ModelParameters<To> cast_params(const ModelParameters<From>& params);

// hidden x vocab matrix used by the MLM head (the transposed token embedding
// when the config ties them).
template <typename T>
Tensor<T> mlm_projection(const ModelParameters<T>& params);

template <typename T>
struct EncoderOutput {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t hidden = 0;
  std::vector<T> hidden_states;  // batch x seq_len x hidden
  std::vector<T> cls_embedding;  // batch x hidden, position 0 of the top layer
};

// All sequences in `batch` must share one length <= config.max_len. Dropout
// runs only in train mode and is a pure function of (seed, example, site).
template <typename T>
EncoderOutput<T> forward(const ModelParameters<T>& params, std::span<const TokenSequence> batch,
                         bool train_mode = false, std::uint64_t seed = 0);

// softmax(head(X)) for each example, evaluated in eval mode.
template <typename T>
std::vector<SoftDistribution> classify(const ModelParameters<T>& params,
                                       std::span<const TokenSequence> batch, TaskId task);

template <typename T>
struct MlmLogits {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t vocab = 0;
  std::vector<T> values;  // batch x seq_len x vocab

  T at(std::size_t b, std::size_t pos, std::size_t token) const {
    return values[(b * seq_len + pos) * vocab + token];
  }
};

template <typename T>
MlmLogits<T> mlm_logits(const ModelParameters<T>& params, std::span<const TokenSequence> batch);

}  // namespace offkd
