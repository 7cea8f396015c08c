#include "offkd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "offkd/error.hpp"

namespace offkd {

ConfusionMatrix::ConfusionMatrix(TaskId t)
    : task(t), counts(num_labels(t), std::vector<std::uint64_t>(num_labels(t), 0)) {}

std::uint64_t ConfusionMatrix::total() const noexcept {
  std::uint64_t n = 0;
  for (const auto& row : counts) {
    for (auto c : row) n += c;
  }
  return n;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.task != task) throw InvalidArgument("cannot merge confusion matrices of different tasks");
  for (std::size_t g = 0; g < counts.size(); ++g) {
    for (std::size_t p = 0; p < counts.size(); ++p) counts[g][p] += other.counts[g][p];
  }
  return *this;
}

ConfusionMatrix confusion(std::span<const std::size_t> golds, std::span<const std::size_t> preds,
                          TaskId task) {
  if (golds.size() != preds.size()) {
    throw InvalidArgument("gold/prediction length mismatch: " + std::to_string(golds.size()) +
                          " vs " + std::to_string(preds.size()));
  }
  ConfusionMatrix m(task);
  const auto n = num_labels(task);
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (golds[i] >= n || preds[i] >= n) {
      throw InvalidArgument("label index out of range for task " + std::string(task_name(task)));
    }
    ++m.counts[golds[i]][preds[i]];
  }
  return m;
}

ConfusionMatrix confusion(std::span<const std::string> golds, std::span<const std::string> preds,
                          TaskId task) {
  if (golds.size() != preds.size()) {
    throw InvalidArgument("gold/prediction length mismatch: " + std::to_string(golds.size()) +
                          " vs " + std::to_string(preds.size()));
  }
  std::vector<std::size_t> g, p;
  g.reserve(golds.size());
  p.reserve(preds.size());
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const auto gi = label_index(task, golds[i]);
    const auto pi = label_index(task, preds[i]);
    if (!gi) throw InvalidArgument("unknown label '" + golds[i] + "' for task " + std::string(task_name(task)));
    if (!pi) throw InvalidArgument("unknown label '" + preds[i] + "' for task " + std::string(task_name(task)));
    g.push_back(*gi);
    p.push_back(*pi);
  }
  return confusion(std::span<const std::size_t>(g), std::span<const std::size_t>(p), task);
}

MetricsReport report(const ConfusionMatrix& matrix) {
  MetricsReport r;
  r.task = matrix.task;
  r.total = matrix.total();
  const auto n = matrix.counts.size();
  double f1_sum = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t tp = matrix.counts[c][c];
    std::uint64_t gold = 0, predicted = 0;
    for (std::size_t k = 0; k < n; ++k) {
      gold += matrix.counts[c][k];
      predicted += matrix.counts[k][c];
    }
    ClassMetrics m;
    m.label = std::string(label_name(matrix.task, c));
    m.support = gold;
    m.precision = predicted == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted);
    m.recall = gold == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(gold);
    m.f1 = (m.precision + m.recall) == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    m.included = gold > 0 || predicted > 0;
    if (m.included) {
      f1_sum += m.f1;
      ++included;
    }
    r.classes.push_back(std::move(m));
  }
  r.macro_f1 = included == 0 ? 0.0 : f1_sum / static_cast<double>(included);
  return r;
}

double macro_f1(const ConfusionMatrix& matrix) {
  if (matrix.total() == 0) throw InvalidArgument("macro-F1 of an empty confusion matrix is undefined");
  return report(matrix).macro_f1;
}

std::string format_metric(double value) {
  // printf rounds the exact binary value and breaks exact ties to even.
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", value);
  return buf;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

namespace {

std::string render(const std::vector<std::vector<std::string>>& rows, TableFormat format) {
  std::ostringstream out;
  if (format == TableFormat::tsv) {
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "\t" : "") << row[i];
      out << '\n';
    }
    return out.str();
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) line += "  ";
      line += i == 0 ? row[i] + std::string(width[i] - row[i].size(), ' ')
                     : std::string(width[i] - row[i].size(), ' ') + row[i];
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << '\n';
  }
  return out.str();
}

}  // namespace

std::string compare_runs(std::span<const std::pair<std::string, MetricsReport>> runs,
                         TableFormat format) {
  if (runs.empty()) throw InvalidArgument("compare_runs needs at least one report");
  const TaskId task = runs.front().second.task;
  const auto n = num_labels(task);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"run"};
  for (std::size_t c = 0; c < n; ++c) header.push_back("F1_" + std::string(label_name(task, c)));
  header.emplace_back("macro_F1");
  rows.push_back(header);

  std::vector<double> sums(n + 1, 0.0);
  for (const auto& [name, r] : runs) {
    if (r.task != task) throw InvalidArgument("compare_runs: reports mix tasks");
    std::vector<std::string> row{name};
    for (std::size_t c = 0; c < n; ++c) {
      row.push_back(format_metric(r.classes[c].f1));
      sums[c] += r.classes[c].f1;
    }
    row.push_back(format_metric(r.macro_f1));
    sums[n] += r.macro_f1;
    rows.push_back(std::move(row));
  }
  std::vector<std::string> mean{"mean"};
  for (double s : sums) mean.push_back(format_metric(s / static_cast<double>(runs.size())));
  rows.push_back(std::move(mean));
  return render(rows, format);
}

std::string format_report(const MetricsReport& r, TableFormat format) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"label", "precision", "recall", "F1", "support"});
  for (const auto& c : r.classes) {
    rows.push_back({c.label, format_metric(c.precision), format_metric(c.recall),
                    format_metric(c.f1), std::to_string(c.support)});
  }
  rows.push_back({"macro", "", "", format_metric(r.macro_f1), std::to_string(r.total)});
  return render(rows, format);
}

}  // namespace offkd
