#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "offkd/corpus.hpp"
#include "offkd/encoder.hpp"
#include "offkd/labels.hpp"
#include "offkd/tokenizer.hpp"
#include "offkd/training.hpp"

namespace offkd {

// Anything that maps examples to class distributions: a trained model, a
// stored prediction file, or a synthetic oracle in tests.
class PredictionSource {
 public:
  virtual ~PredictionSource() = default;
  virtual const std::string& id() const noexcept = 0;
  // One entry per example, in order; nullopt where the source has nothing.
  virtual std::vector<std::optional<SoftDistribution>> predict(
      std::span<const LabeledExample> examples, TaskId task) const = 0;
};

class ModelTeacher final : public PredictionSource {
 public:
  ModelTeacher(std::string id, ModelParameters<float> params, Vocabulary vocab);
  const std::string& id() const noexcept override { return id_; }
  std::vector<std::optional<SoftDistribution>> predict(std::span<const LabeledExample> examples,
                                                       TaskId task) const override;

 private:
  std::string id_;
  ModelParameters<float> params_;
  Vocabulary vocab_;
};

// Looks predictions up by example id.
class TableTeacher final : public PredictionSource {
 public:
  TableTeacher(std::string id, TaskId task, std::map<std::string, SoftDistribution> table);
  static TableTeacher load(std::string id, const std::filesystem::path& path, TaskId task);
  const std::string& id() const noexcept override { return id_; }
  std::vector<std::optional<SoftDistribution>> predict(std::span<const LabeledExample> examples,
                                                       TaskId task) const override;

 private:
  std::string id_;
  TaskId task_;
  std::map<std::string, SoftDistribution> table_;
};

class FunctionTeacher final : public PredictionSource {
 public:
  using Fn = std::function<std::optional<SoftDistribution>(const LabeledExample&, TaskId)>;
  FunctionTeacher(std::string id, Fn fn);
  const std::string& id() const noexcept override { return id_; }
  std::vector<std::optional<SoftDistribution>> predict(std::span<const LabeledExample> examples,
                                                       TaskId task) const override;

 private:
  std::string id_;
  Fn fn_;
};

struct TeacherEnsemble {
  std::vector<std::shared_ptr<const PredictionSource>> teachers;
  std::vector<double> weights;  // normalised, one per teacher

  // Empty `weights` means uniform. Weights must be non-negative with a
  // positive sum; if they do not already sum to 1 a notice goes to `log`.
  // Teacher ids must be unique.
  static TeacherEnsemble make(std::vector<std::shared_ptr<const PredictionSource>> teachers,
                              std::vector<double> weights = {}, std::ostream* log = nullptr);
};

// Copies `dataset` with soft[task] = sum_i w_i P_i. The sum runs in sorted
// teacher-id order, so permuting teachers and weights together is a no-op.
// Throws ValidationError naming the teacher and the ids it does not cover.
// With jobs > 1 teachers predict concurrently.
std::vector<LabeledExample> ensemble_soft_labels(const TeacherEnsemble& ensemble,
                                                 std::span<const LabeledExample> dataset,
                                                 TaskId task, std::size_t jobs = 1);

// Fine-tunes `init` in soft mode on soft[task]. Unlike plain finetune, hard
// labels are never substituted: every example must carry a soft target.
template <typename T>
TrainResult<T> distill_student(ModelParameters<T> init, const Vocabulary& vocab,
                               std::span<const LabeledExample> soft_dataset, TaskId task,
                               const TrainConfig& config,
                               std::span<const LabeledExample> validation = {},
                               const EpochCallback<T>& on_epoch_end = {});

// TSV with an `id` column then one probability column per label in schema
// order, written with 17 significant digits.
std::string format_soft_labels(std::span<const LabeledExample> examples, TaskId task);
void write_soft_labels(const std::filesystem::path& path, std::span<const LabeledExample> examples,
                       TaskId task);
std::map<std::string, SoftDistribution> read_soft_labels(const std::filesystem::path& path,
                                                         TaskId task);

}  // namespace offkd
