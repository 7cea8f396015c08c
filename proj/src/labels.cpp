#include "offkd/labels.hpp"

#include <cmath>

#include "offkd/error.hpp"

namespace offkd {
namespace {

constexpr std::array<std::string_view, 2> kTaskALabels{"OFF", "NOT"};
constexpr std::array<std::string_view, 2> kTaskBLabels{"TIN", "UNT"};
constexpr std::array<std::string_view, 3> kTaskCLabels{"IND", "GRP", "OTH"};

}  // namespace

std::span<const std::string_view> label_names(TaskId task) noexcept {
  switch (task) {
    case TaskId::A:
      return kTaskALabels;
    case TaskId::B:
      return kTaskBLabels;
    case TaskId::C:
      return kTaskCLabels;
  }
  return {};
}

std::size_t num_labels(TaskId task) noexcept { return label_names(task).size(); }

std::optional<std::size_t> label_index(TaskId task, std::string_view name) noexcept {
  const auto names = label_names(task);
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return i;
  }
  return std::nullopt;
}

std::string_view label_name(TaskId task, std::size_t index) {
  const auto names = label_names(task);
  if (index >= names.size()) {
    throw InvalidArgument("label index " + std::to_string(index) + " out of range for task " +
                          std::string(task_name(task)));
  }
  return names[index];
}

std::string_view task_name(TaskId task) noexcept {
  switch (task) {
    case TaskId::A:
      return "A";
    case TaskId::B:
      return "B";
    case TaskId::C:
      return "C";
  }
  return "?";
}

std::optional<TaskId> parse_task(std::string_view name) noexcept {
  if (name == "A" || name == "a") return TaskId::A;
  if (name == "B" || name == "b") return TaskId::B;
  if (name == "C" || name == "c") return TaskId::C;
  return std::nullopt;
}

bool SoftDistribution::is_valid(double tolerance) const noexcept {
  if (probs.size() != num_labels(task)) return false;
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) return false;
    sum += p;
  }
  return std::abs(sum - 1.0) <= tolerance;
}

std::size_t SoftDistribution::argmax() const noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

SoftDistribution make_distribution(TaskId task, std::vector<double> probs, double tolerance) {
  SoftDistribution dist{task, std::move(probs)};
  if (dist.probs.size() != num_labels(task)) {
    throw InvalidArgument("distribution for task " + std::string(task_name(task)) + " needs " +
                          std::to_string(num_labels(task)) + " entries, got " +
                          std::to_string(dist.probs.size()));
  }
  if (!dist.is_valid(tolerance)) {
    throw InvalidArgument("not a probability distribution over task " +
                          std::string(task_name(task)) + " labels");
  }
  return dist;
}

SoftDistribution one_hot(TaskId task, std::size_t label) {
  if (label >= num_labels(task)) {
    throw InvalidArgument("label index " + std::to_string(label) + " out of range for task " +
                          std::string(task_name(task)));
  }
  SoftDistribution dist{task, std::vector<double>(num_labels(task), 0.0)};
  dist.probs[label] = 1.0;
  return dist;
}

SoftDistribution uniform(TaskId task) {
  const auto n = num_labels(task);
  return SoftDistribution{task, std::vector<double>(n, 1.0 / static_cast<double>(n))};
}

}  // namespace offkd
