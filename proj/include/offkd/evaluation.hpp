#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "offkd/labels.hpp"

namespace offkd {

// counts[gold][predicted], schema label order.
struct ConfusionMatrix {
  TaskId task = TaskId::A;
  std::vector<std::vector<std::uint64_t>> counts;

  explicit ConfusionMatrix(TaskId t = TaskId::A);
  std::uint64_t total() const noexcept;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

ConfusionMatrix confusion(std::span<const std::size_t> golds, std::span<const std::size_t> preds,
                          TaskId task);
ConfusionMatrix confusion(std::span<const std::string> golds, std::span<const std::string> preds,
                          TaskId task);

// Unweighted mean of per-class F1. F1 is 0 when precision or recall is
// undefined; classes with no gold and no predicted occurrences are left out.
// Throws InvalidArgument when nothing was scored.
double macro_f1(const ConfusionMatrix& matrix);

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
  bool included = true;  // part of the macro average
};

struct MetricsReport {
  TaskId task = TaskId::A;
  std::vector<ClassMetrics> classes;
  double macro_f1 = 0.0;
  std::uint64_t total = 0;
};

MetricsReport report(const ConfusionMatrix& matrix);

enum class TableFormat { text, tsv };

// Four decimals, ties to even.
std::string format_metric(double value);

// One row per run (per-class F1 columns then macro-F1) and a trailing `mean`
// row. All reports must share one task.
std::string compare_runs(std::span<const std::pair<std::string, MetricsReport>> runs,
                         TableFormat format);

std::string format_report(const MetricsReport& report, TableFormat format);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single value
};
MeanStd mean_std(std::span<const double> values);

}  // namespace offkd
