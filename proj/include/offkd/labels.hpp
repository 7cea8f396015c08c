#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace offkd {

// The three levels of the offensive-language annotation hierarchy.
//   A: offensive or not          {OFF, NOT}
//   B: targeted or untargeted    {TIN, UNT}
//   C: target type               {IND, GRP, OTH}
enum class TaskId { A, B, C };

inline constexpr std::array<TaskId, 3> kAllTasks{TaskId::A, TaskId::B, TaskId::C};

std::span<const std::string_view> label_names(TaskId task) noexcept;
std::size_t num_labels(TaskId task) noexcept;
std::optional<std::size_t> label_index(TaskId task, std::string_view name) noexcept;
std::string_view label_name(TaskId task, std::size_t index);

std::string_view task_name(TaskId task) noexcept;
std::optional<TaskId> parse_task(std::string_view name) noexcept;

// Probability vector over a task's ordered label set. Used both for teacher
// targets Q(c|x) and for model outputs P(c|x).
struct SoftDistribution {
  TaskId task = TaskId::A;
  std::vector<double> probs;

  // Entries in [0,1] and summing to 1 within `tolerance`.
  bool is_valid(double tolerance = 1e-9) const noexcept;
  // Lowest index among the maximal entries.
  std::size_t argmax() const noexcept;
};

// Throws InvalidArgument if `probs` is not a distribution over `task`'s labels.
SoftDistribution make_distribution(TaskId task, std::vector<double> probs,
                                   double tolerance = 1e-9);
SoftDistribution one_hot(TaskId task, std::size_t label);
SoftDistribution uniform(TaskId task);

}  // namespace offkd
