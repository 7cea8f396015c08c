#include "offkd/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include "offkd/error.hpp"
#include "offkd/rng.hpp"
#include "offkd/tsv.hpp"

namespace offkd {
namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c == '_' || c >= 0x80; }
bool is_space_byte(unsigned char c) { return std::isspace(c) != 0; }

bool starts_url(std::string_view text, std::size_t pos) {
  const auto rest = text.substr(pos);
  return rest.starts_with("http://") || rest.starts_with("https://") || rest.starts_with("www.");
}

std::optional<std::size_t> parse_label_cell(TaskId task, const std::string& cell,
                                            const std::string& path, std::size_t line) {
  if (cell.empty() || cell == "NULL") return std::nullopt;
  auto idx = label_index(task, cell);
  if (!idx) {
    throw ParseError(path, line,
                     "unknown subtask_" + std::string(1, static_cast<char>(std::tolower(
                                                             task_name(task)[0]))) +
                         " label '" + cell + "'");
  }
  return idx;
}

double parse_confidence(const std::string& cell, const std::string& path, std::size_t line) {
  double value = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last || cell.empty()) {
    throw ParseError(path, line, "invalid confidence '" + cell + "'");
  }
  if (!(value >= 0.0 && value <= 1.0)) {
    throw ParseError(path, line, "confidence " + cell + " outside [0,1]");
  }
  return value;
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    const bool boundary = i == 0 || !is_word_byte(static_cast<unsigned char>(text[i - 1]));
    if (boundary && starts_url(text, i)) {
      while (i < text.size() && !is_space_byte(static_cast<unsigned char>(text[i]))) ++i;
      out += "URL";
      continue;
    }
    if (c == '@' && boundary && i + 1 < text.size() &&
        is_word_byte(static_cast<unsigned char>(text[i + 1]))) {
      ++i;
      while (i < text.size() && is_word_byte(static_cast<unsigned char>(text[i]))) ++i;
      out += "@USER";
      continue;
    }
    out.push_back(static_cast<char>(c));
    ++i;
  }
  return out;
}

std::vector<LabeledExample> parse_olid(const std::filesystem::path& tsv_path,
                                       std::string_view language) {
  const auto path = tsv_path.string();
  const TsvTable table = read_tsv(tsv_path);
  const auto& h = table.header;
  if (h.size() < 3 || h.size() > 5 || h[0] != "id" || h[1] != "tweet" || h[2] != "subtask_a" ||
      (h.size() > 3 && h[3] != "subtask_b") || (h.size() > 4 && h[4] != "subtask_c")) {
    throw ParseError(path, 1,
                     "expected header 'id\\ttweet\\tsubtask_a[\\tsubtask_b[\\tsubtask_c]]'");
  }

  std::vector<LabeledExample> examples;
  examples.reserve(table.rows.size());
  std::vector<std::string> violating;
  for (const auto& row : table.rows) {
    if (row.fields.size() != h.size()) {
      throw ParseError(path, row.line,
                       "expected " + std::to_string(h.size()) + " columns, got " +
                           std::to_string(row.fields.size()));
    }
    if (row.fields[0].empty()) throw ParseError(path, row.line, "empty id");
    LabeledExample ex;
    ex.id = row.fields[0];
    ex.text = normalize_text(row.fields[1]);
    ex.language = std::string(language);
    for (std::size_t col = 2; col < h.size(); ++col) {
      const auto task = kAllTasks[col - 2];
      if (auto label = parse_label_cell(task, row.fields[col], path, row.line)) {
        ex.hard[task] = *label;
      }
    }
    if (!validate_hierarchy(ex).empty()) violating.push_back(ex.id);
    examples.push_back(std::move(ex));
  }
  if (!violating.empty()) {
    throw ValidationError(path + ": label hierarchy violated", std::move(violating));
  }
  return examples;
}

std::vector<LabeledExample> parse_solid_distant(const std::filesystem::path& tsv_path,
                                                TaskId task) {
  const auto path = tsv_path.string();
  const TsvTable table = read_tsv(tsv_path);
  const std::size_t n_conf = task == TaskId::C ? num_labels(TaskId::C) : 1;
  const std::size_t required = 2 + n_conf + (task == TaskId::C ? 0 : 1);
  if (table.header.size() < required || table.header[0] != "id") {
    throw ParseError(path, 1,
                     "expected at least " + std::to_string(required) +
                         " columns starting with 'id' in header for task " +
                         std::string(task_name(task)));
  }

  std::vector<LabeledExample> examples;
  examples.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    if (row.fields.size() != table.header.size()) {
      throw ParseError(path, row.line,
                       "expected " + std::to_string(table.header.size()) + " columns, got " +
                           std::to_string(row.fields.size()));
    }
    if (row.fields[0].empty()) throw ParseError(path, row.line, "empty id");
    LabeledExample ex;
    ex.id = row.fields[0];
    ex.text = normalize_text(row.fields[1]);
    ex.language = "en";
    std::vector<double> conf;
    for (std::size_t i = 0; i < n_conf; ++i) {
      conf.push_back(parse_confidence(row.fields[2 + i], path, row.line));
    }
    for (std::size_t col = 2 + n_conf; col < row.fields.size(); ++col) {
      double value = 0.0;
      const auto& cell = row.fields[col];
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      if (ec != std::errc{} || ptr != cell.data() + cell.size()) {
        throw ParseError(path, row.line, "invalid std value '" + cell + "'");
      }
      ex.confidence_std.push_back(value);
    }
    try {
      ex.soft[task] = task == TaskId::C ? confidence_to_soft(conf, task)
                                        : confidence_to_soft(conf[0], task);
    } catch (const InvalidArgument& e) {
      throw ParseError(path, row.line, e.what());
    }
    examples.push_back(std::move(ex));
  }
  return examples;
}

namespace {

// 1 - c as the decimal a person would write (1 - 0.8 gives 0.2, not
// 0.19999999999999996), provided the pair still sums to exactly 1.
double complement(double c) {
  const double raw = 1.0 - c;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", raw);
  const double candidates[] = {std::strtod(buf, nullptr), raw, std::nextafter(raw, 0.0),
                               std::nextafter(raw, 1.0)};
  for (double d : candidates) {
    if (d >= 0.0 && c + d == 1.0) return d;
  }
  return raw;
}

}  // namespace

SoftDistribution confidence_to_soft(double confidence, TaskId task) {
  if (task == TaskId::C) {
    throw InvalidArgument("task C confidences are per label; pass a vector");
  }
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw InvalidArgument("confidence " + std::to_string(confidence) + " outside [0,1]");
  }
  return SoftDistribution{task, {confidence, complement(confidence)}};
}

SoftDistribution confidence_to_soft(std::span<const double> confidences, TaskId task) {
  if (task != TaskId::C) {
    if (confidences.size() != 1) {
      throw InvalidArgument("tasks A/B take a single confidence value");
    }
    return confidence_to_soft(confidences[0], task);
  }
  if (confidences.size() != num_labels(task)) {
    throw InvalidArgument("task C needs " + std::to_string(num_labels(task)) + " confidences");
  }
  double sum = 0.0;
  for (double c : confidences) {
    if (!(c >= 0.0 && c <= 1.0)) {
      throw InvalidArgument("confidence " + std::to_string(c) + " outside [0,1]");
    }
    sum += c;
  }
  if (sum == 0.0) throw InvalidArgument("all-zero task C confidences define no distribution");
  SoftDistribution dist{task, {}};
  dist.probs.reserve(confidences.size());
  for (double c : confidences) dist.probs.push_back(c / sum);
  return dist;
}

std::vector<std::string> validate_hierarchy(const LabeledExample& example) {
  std::vector<std::string> violations;
  const auto a = example.hard.find(TaskId::A);
  const auto b = example.hard.find(TaskId::B);
  const auto c = example.hard.find(TaskId::C);
  const auto off = *label_index(TaskId::A, "OFF");
  const auto tin = *label_index(TaskId::B, "TIN");
  if (b != example.hard.end()) {
    if (a == example.hard.end()) {
      violations.emplace_back("subtask_b label present without subtask_a=OFF");
    } else if (a->second != off) {
      violations.emplace_back("subtask_b label requires subtask_a=OFF, found " +
                              std::string(label_name(TaskId::A, a->second)));
    }
  }
  if (c != example.hard.end()) {
    if (b == example.hard.end()) {
      violations.emplace_back("subtask_c label present without subtask_b=TIN");
    } else if (b->second != tin) {
      violations.emplace_back("subtask_c label requires subtask_b=TIN, found " +
                              std::string(label_name(TaskId::B, b->second)));
    }
  }
  return violations;
}

std::vector<LabeledExample> mix_multilingual(std::vector<LanguageDataset> datasets,
                                             MixStrategy strategy) {
  if (strategy != MixStrategy::concat) throw InvalidArgument("unsupported mixing strategy");
  std::vector<LabeledExample> mixed;
  std::set<std::string> seen;
  std::vector<std::string> duplicates;
  for (auto& dataset : datasets) {
    for (auto& ex : dataset.examples) {
      ex.id = dataset.language + ":" + ex.id;
      ex.language = dataset.language;
      if (!seen.insert(ex.id).second) duplicates.push_back(ex.id);
      mixed.push_back(std::move(ex));
    }
  }
  if (!duplicates.empty()) {
    throw ValidationError("duplicate example ids after language namespacing",
                          std::move(duplicates));
  }
  return mixed;
}

std::vector<std::vector<std::string>> find_duplicate_texts(
    std::span<const LabeledExample> examples) {
  std::map<std::string_view, std::vector<std::string>> by_text;
  for (const auto& ex : examples) by_text[ex.text].push_back(ex.id);
  std::vector<std::vector<std::string>> groups;
  for (auto& [text, ids] : by_text) {
    if (ids.size() > 1) groups.push_back(std::move(ids));
  }
  return groups;
}

std::optional<std::size_t> DatasetSplit::fold_of(std::string_view id) const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == id) return folds[i];
  }
  return std::nullopt;
}

std::vector<std::size_t> DatasetSplit::held_out(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    if (folds[i] == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> DatasetSplit::training(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    if (folds[i] != fold) out.push_back(i);
  }
  return out;
}

DatasetSplit stratified_kfold(std::span<const LabeledExample> dataset, TaskId task,
                              std::size_t k, std::uint64_t seed) {
  if (k < 2) throw InvalidArgument("k-fold needs k >= 2, got " + std::to_string(k));
  if (k > dataset.size()) {
    throw InvalidArgument("k=" + std::to_string(k) + " exceeds dataset size " +
                          std::to_string(dataset.size()));
  }
  // Groups keyed by (label, language): a label's groups are adjacent, so one
  // rolling round-robin keeps per-label, per-(label, language) and total fold
  // counts each within one of each other.
  std::map<std::pair<std::size_t, std::string>, std::vector<std::size_t>> groups;
  std::vector<std::string> unlabeled;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto it = dataset[i].hard.find(task);
    if (it == dataset[i].hard.end()) {
      unlabeled.push_back(dataset[i].id);
      continue;
    }
    groups[{it->second, dataset[i].language}].push_back(i);
  }
  if (!unlabeled.empty()) {
    throw ValidationError("stratified split needs a hard subtask_" +
                              std::string(task_name(task)) + " label on every example",
                          std::move(unlabeled));
  }

  DatasetSplit split;
  split.k = k;
  split.folds.assign(dataset.size(), 0);
  split.ids.reserve(dataset.size());
  for (const auto& ex : dataset) split.ids.push_back(ex.id);

  Rng rng(seed);
  std::size_t next = 0;
  for (auto& [key, members] : groups) {
    rng.shuffle(members);
    for (auto index : members) {
      split.folds[index] = next;
      next = (next + 1) % k;
    }
  }
  return split;
}

LabelCounts CorpusStats::overall(TaskId task) const {
  LabelCounts total{std::vector<std::size_t>(num_labels(task), 0), 0};
  for (const auto& [language, tasks] : by_language) {
    const auto it = tasks.find(task);
    if (it == tasks.end()) continue;
    for (std::size_t i = 0; i < total.counts.size(); ++i) total.counts[i] += it->second.counts[i];
    total.total += it->second.total;
  }
  return total;
}

const LabelCounts* CorpusStats::find(std::string_view language, TaskId task) const {
  const auto lang = by_language.find(std::string(language));
  if (lang == by_language.end()) return nullptr;
  const auto it = lang->second.find(task);
  return it == lang->second.end() ? nullptr : &it->second;
}

CorpusStats stats(std::span<const LabeledExample> dataset) {
  CorpusStats out;
  for (const auto& ex : dataset) {
    for (const auto& [task, label] : ex.hard) {
      auto& counts = out.by_language[ex.language][task];
      if (counts.counts.empty()) counts.counts.assign(num_labels(task), 0);
      ++counts.counts[label];
      ++counts.total;
    }
  }
  return out;
}

std::string format_stats(const CorpusStats& stats) {
  std::ostringstream out;
  out << "language\ttask\tlabel\tcount\n";
  auto emit = [&](const std::string& language, TaskId task, const LabelCounts& counts) {
    for (std::size_t i = 0; i < counts.counts.size(); ++i) {
      out << language << '\t' << task_name(task) << '\t' << label_name(task, i) << '\t'
          << counts.counts[i] << '\n';
    }
    out << language << '\t' << task_name(task) << "\tTOTAL\t" << counts.total << '\n';
  };
  for (const auto& [language, tasks] : stats.by_language) {
    for (const auto& [task, counts] : tasks) emit(language, task, counts);
  }
  if (stats.by_language.size() > 1) {
    for (auto task : kAllTasks) {
      const auto total = stats.overall(task);
      if (total.total > 0) emit("ALL", task, total);
    }
  }
  return out.str();
}

}  // namespace offkd
