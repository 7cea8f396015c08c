#include "offkd/distillation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <numeric>
#include <ostream>
#include <set>

#include "offkd/error.hpp"
#include "offkd/tsv.hpp"

namespace offkd {

ModelTeacher::ModelTeacher(std::string id, ModelParameters<float> params, Vocabulary vocab)
    : id_(std::move(id)), params_(std::move(params)), vocab_(std::move(vocab)) {}

std::vector<std::optional<SoftDistribution>> ModelTeacher::predict(
    std::span<const LabeledExample> examples, TaskId task) const {
  const auto probs = predict_proba(params_, vocab_, examples, task);
  return {probs.begin(), probs.end()};
}

TableTeacher::TableTeacher(std::string id, TaskId task, std::map<std::string, SoftDistribution> table)
    : id_(std::move(id)), task_(task), table_(std::move(table)) {}

TableTeacher TableTeacher::load(std::string id, const std::filesystem::path& path, TaskId task) {
  return TableTeacher(std::move(id), task, read_soft_labels(path, task));
}

std::vector<std::optional<SoftDistribution>> TableTeacher::predict(
    std::span<const LabeledExample> examples, TaskId task) const {
  if (task != task_) {
    throw InvalidArgument("teacher " + id_ + " holds subtask_" + std::string(task_name(task_)) +
                          " predictions, not subtask_" + std::string(task_name(task)));
  }
  std::vector<std::optional<SoftDistribution>> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto it = table_.find(ex.id);
    out.push_back(it == table_.end() ? std::nullopt : std::optional(it->second));
  }
  return out;
}

FunctionTeacher::FunctionTeacher(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}

std::vector<std::optional<SoftDistribution>> FunctionTeacher::predict(
    std::span<const LabeledExample> examples, TaskId task) const {
  std::vector<std::optional<SoftDistribution>> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(fn_(ex, task));
  return out;
}

TeacherEnsemble TeacherEnsemble::make(std::vector<std::shared_ptr<const PredictionSource>> teachers,
                                      std::vector<double> weights, std::ostream* log) {
  if (teachers.empty()) throw InvalidArgument("teacher ensemble needs at least one teacher");
  std::set<std::string> ids;
  for (const auto& t : teachers) {
    if (!t) throw InvalidArgument("null teacher");
    if (!ids.insert(t->id()).second) throw InvalidArgument("duplicate teacher id: " + t->id());
  }
  if (weights.empty()) weights.assign(teachers.size(), 1.0 / static_cast<double>(teachers.size()));
  if (weights.size() != teachers.size()) {
    throw InvalidArgument("got " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(teachers.size()) + " teachers");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("teacher weights must be finite and >= 0");
    sum += w;
  }
  if (!(sum > 0.0)) throw InvalidArgument("teacher weights sum to zero");
  if (std::abs(sum - 1.0) > 1e-12) {
    if (log) *log << "note: teacher weights sum to " << sum << "; normalising\n";
    for (auto& w : weights) w /= sum;
  }
  return TeacherEnsemble{std::move(teachers), std::move(weights)};
}

std::vector<LabeledExample> ensemble_soft_labels(const TeacherEnsemble& ensemble,
                                                 std::span<const LabeledExample> dataset,
                                                 TaskId task, std::size_t jobs) {
  const auto& teachers = ensemble.teachers;
  if (teachers.empty()) throw InvalidArgument("teacher ensemble needs at least one teacher");
  if (ensemble.weights.size() != teachers.size()) throw InvalidArgument("weights do not match teachers");

  std::vector<std::vector<std::optional<SoftDistribution>>> predictions(teachers.size());
  if (jobs > 1 && teachers.size() > 1) {
    for (std::size_t start = 0; start < teachers.size(); start += jobs) {
      std::vector<std::future<std::vector<std::optional<SoftDistribution>>>> pending;
      for (std::size_t i = start; i < std::min(teachers.size(), start + jobs); ++i) {
        pending.push_back(std::async(std::launch::async,
                                     [&, i] { return teachers[i]->predict(dataset, task); }));
      }
      for (std::size_t i = start; i < std::min(teachers.size(), start + jobs); ++i) {
        predictions[i] = pending[i - start].get();
      }
    }
  } else {
    for (std::size_t i = 0; i < teachers.size(); ++i) predictions[i] = teachers[i]->predict(dataset, task);
  }

  const std::size_t classes = num_labels(task);
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    if (predictions[i].size() != dataset.size()) {
      throw InvalidArgument("teacher " + teachers[i]->id() + " returned the wrong number of predictions");
    }
    std::vector<std::string> missing;
    for (std::size_t e = 0; e < dataset.size(); ++e) {
      const auto& p = predictions[i][e];
      if (!p) {
        missing.push_back(dataset[e].id);
      } else if (p->probs.size() != classes || !p->is_valid(1e-6)) {
        throw InvalidArgument("teacher " + teachers[i]->id() + " gave an invalid distribution for " +
                              dataset[e].id);
      }
    }
    if (!missing.empty()) {
      throw ValidationError("teacher " + teachers[i]->id() + " has no prediction for " +
                                std::to_string(missing.size()) + " example(s)",
                            std::move(missing));
    }
  }

  std::vector<std::size_t> order(teachers.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return teachers[a]->id() < teachers[b]->id(); });

  std::vector<LabeledExample> out(dataset.begin(), dataset.end());
  for (std::size_t e = 0; e < out.size(); ++e) {
    SoftDistribution q{task, std::vector<double>(classes, 0.0)};
    for (auto i : order) {
      const auto& p = predictions[i][e]->probs;
      for (std::size_t c = 0; c < classes; ++c) q.probs[c] += ensemble.weights[i] * p[c];
    }
    out[e].soft[task] = std::move(q);
  }
  return out;
}

template <typename T>
TrainResult<T> distill_student(ModelParameters<T> init, const Vocabulary& vocab,
                               std::span<const LabeledExample> soft_dataset, TaskId task,
                               const TrainConfig& config, std::span<const LabeledExample> validation,
                               const EpochCallback<T>& on_epoch_end) {
  FinetuneOptions<T> options;
  options.validation = validation;
  options.hard_as_soft = false;
  options.on_epoch_end = on_epoch_end;
  return finetune(std::move(init), vocab, soft_dataset, task, config, LossMode::soft, options);
}

template TrainResult<float> distill_student<float>(ModelParameters<float>, const Vocabulary&,
                                                   std::span<const LabeledExample>, TaskId,
                                                   const TrainConfig&, std::span<const LabeledExample>,
                                                   const EpochCallback<float>&);
template TrainResult<double> distill_student<double>(ModelParameters<double>, const Vocabulary&,
                                                     std::span<const LabeledExample>, TaskId,
                                                     const TrainConfig&, std::span<const LabeledExample>,
                                                     const EpochCallback<double>&);

std::string format_soft_labels(std::span<const LabeledExample> examples, TaskId task) {
  std::string out = "id";
  for (auto name : label_names(task)) out += "\t" + std::string(name);
  out += "\n";
  char buf[32];
  for (const auto& ex : examples) {
    const auto it = ex.soft.find(task);
    if (it == ex.soft.end()) throw InvalidArgument("example " + ex.id + " has no soft label to write");
    out += ex.id;
    for (double p : it->second.probs) {
      std::snprintf(buf, sizeof buf, "\t%.17g", p);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void write_soft_labels(const std::filesystem::path& path, std::span<const LabeledExample> examples,
                       TaskId task) {
  write_file_atomic(path, format_soft_labels(examples, task));
}

std::map<std::string, SoftDistribution> read_soft_labels(const std::filesystem::path& path,
                                                         TaskId task) {
  const auto table = read_tsv(path);
  const auto names = label_names(task);
  if (table.header.size() != names.size() + 1 || table.header[0] != "id") {
    throw ParseError(path.string(), 1, "expected header id + " + std::to_string(names.size()) +
                                           " label columns for subtask_" + std::string(task_name(task)));
  }
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (table.header[c + 1] != names[c]) {
      throw ParseError(path.string(), 1, "column " + std::to_string(c + 2) + " should be " +
                                             std::string(names[c]));
    }
  }
  std::map<std::string, SoftDistribution> out;
  for (const auto& row : table.rows) {
    if (row.fields.size() != names.size() + 1) {
      throw ParseError(path.string(), row.line, "wrong number of columns");
    }
    std::vector<double> probs;
    for (std::size_t c = 1; c < row.fields.size(); ++c) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(row.fields[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != row.fields[c].size() || row.fields[c].empty()) {
        throw ParseError(path.string(), row.line, "not a number: " + row.fields[c]);
      }
      probs.push_back(v);
    }
    SoftDistribution q;
    try {
      q = make_distribution(task, std::move(probs), 1e-6);
    } catch (const InvalidArgument& e) {
      throw ParseError(path.string(), row.line, e.what());
    }
    if (!out.emplace(row.fields[0], std::move(q)).second) {
      throw ParseError(path.string(), row.line, "duplicate id " + row.fields[0]);
    }
  }
  return out;
}

}  // namespace offkd
