#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "offkd/corpus.hpp"
#include "offkd/encoder.hpp"
#include "offkd/evaluation.hpp"
#include "offkd/tokenizer.hpp"
#include "offkd/training.hpp"

namespace offkd {

// Member i was trained with fold i of `split` held out.
struct CvEnsemble {
  std::vector<ModelParameters<float>> members;
  DatasetSplit split;
  std::vector<MetricsReport> fold_reports;
};

struct CvOptions {
  // Architecture for fresh members (init seed = train seed + fold) when no
  // pretrained starting point is given.
  EncoderConfig config;
  const ModelParameters<float>* init = nullptr;
  LossMode mode = LossMode::hard;
  std::size_t jobs = 1;  // folds trained concurrently
};

// k trainings; fold i uses seed train.seed + i. Requires 2 <= k <= n.
CvEnsemble train_cv_ensemble(std::span<const LabeledExample> dataset, const Vocabulary& vocab,
                             TaskId task, std::size_t k, const TrainConfig& train,
                             const CvOptions& options);

struct EnsemblePrediction {
  SoftDistribution probs;
  std::size_t label = 0;  // argmax, lowest index on ties
};

// Unweighted mean of member probabilities. Members are summed in order of a
// content fingerprint, so the result does not depend on their list order.
// Throws InvalidArgument on an empty ensemble or mismatched architectures.
std::vector<EnsemblePrediction> predict_ensemble(std::span<const ModelParameters<float>> members,
                                                 const Vocabulary& vocab,
                                                 std::span<const LabeledExample> examples,
                                                 TaskId task);

// FNV-1a over the config and every tensor's raw bytes.
std::uint64_t fingerprint(const ModelParameters<float>& params);

enum class PredictionFormat { tsv, csv };

// tsv: `id\tlabel` header plus `p_<label>` columns when `with_probs`.
// csv: `id,label` rows with no header.
std::string format_predictions(std::span<const std::string> ids,
                               std::span<const EnsemblePrediction> predictions, TaskId task,
                               PredictionFormat format, bool with_probs = true);

// Reads the tsv form (probability columns optional) or headerless csv form.
std::vector<std::pair<std::string, std::string>> read_predictions(const std::filesystem::path& path);

}  // namespace offkd
