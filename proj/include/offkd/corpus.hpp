#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "offkd/labels.hpp"

namespace offkd {

// One post with its language tag and whatever labels the source provides.
// Hard labels are indices into the task's label set.
struct LabeledExample {
  std::string id;
  std::string text;
  std::string language;
  std::map<TaskId, std::size_t> hard;
  std::map<TaskId, SoftDistribution> soft;
  // Weak-label `std` columns, kept for provenance only.
  std::vector<double> confidence_std;
};

// URLs become `URL`, user mentions become `@USER`. Case is preserved.
std::string normalize_text(std::string_view text);

// Reads an OLID-style TSV: `id  tweet  subtask_a [subtask_b [subtask_c]]`.
// `NULL` and empty label cells mean "absent". Throws ParseError with the
// 1-based line number for malformed rows and ValidationError listing every id
// that breaks the label hierarchy.
std::vector<LabeledExample> parse_olid(const std::filesystem::path& tsv_path,
                                       std::string_view language);

// Reads SOLID-style weakly labelled data. Tasks A/B: `id text average std`;
// task C: `id text <IND> <GRP> <OTH> [std...]` confidences.
std::vector<LabeledExample> parse_solid_distant(const std::filesystem::path& tsv_path,
                                                TaskId task);

// A/B: (conf, 1 - conf) over the ordered label set. C: renormalised vector.
SoftDistribution confidence_to_soft(double confidence, TaskId task);
SoftDistribution confidence_to_soft(std::span<const double> confidences, TaskId task);

// Empty iff the hard labels respect A -> B -> C; one message per broken rule.
std::vector<std::string> validate_hierarchy(const LabeledExample& example);

enum class MixStrategy { concat };

struct LanguageDataset {
  std::string language;
  std::vector<LabeledExample> examples;
};

// Concatenates per-language datasets in the given order, namespacing ids as
// `language:id`. Throws ValidationError on a namespaced id collision.
std::vector<LabeledExample> mix_multilingual(std::vector<LanguageDataset> datasets,
                                             MixStrategy strategy = MixStrategy::concat);

// Groups of example ids whose text is identical. Not applied automatically;
// callers decide whether overlapping train/test posts should be dropped.
std::vector<std::vector<std::string>> find_duplicate_texts(
    std::span<const LabeledExample> examples);

// Fold assignment, parallel to the dataset it was computed from.
struct DatasetSplit {
  std::size_t k = 0;
  std::vector<std::string> ids;
  std::vector<std::size_t> folds;

  std::optional<std::size_t> fold_of(std::string_view id) const;
  std::vector<std::size_t> held_out(std::size_t fold) const;
  std::vector<std::size_t> training(std::size_t fold) const;
};

// Stratified on the (label, language) pair for `task`'s hard labels.
// Requires 2 <= k <= n.
DatasetSplit stratified_kfold(std::span<const LabeledExample> dataset, TaskId task,
                              std::size_t k, std::uint64_t seed);

struct LabelCounts {
  std::vector<std::size_t> counts;  // per label, schema order
  std::size_t total = 0;
};

// language -> task -> counts, over hard labels only.
struct CorpusStats {
  std::map<std::string, std::map<TaskId, LabelCounts>> by_language;

  LabelCounts overall(TaskId task) const;
  const LabelCounts* find(std::string_view language, TaskId task) const;
};

CorpusStats stats(std::span<const LabeledExample> dataset);
std::string format_stats(const CorpusStats& stats);

}  // namespace offkd
