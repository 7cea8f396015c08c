#include "offkd/ensemble.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <future>
#include <numeric>

#include "offkd/checkpoint.hpp"
#include "offkd/error.hpp"
#include "offkd/tsv.hpp"

namespace offkd {
namespace {

ModelParameters<float> train_fold(std::span<const LabeledExample> dataset, const Vocabulary& vocab,
                                  TaskId task, const DatasetSplit& split, std::size_t fold,
                                  const TrainConfig& train, const CvOptions& options,
                                  MetricsReport& fold_report) {
  TrainConfig cfg = train;
  cfg.seed = train.seed + fold;
  std::vector<LabeledExample> train_set;
  std::vector<LabeledExample> held;
  for (auto i : split.training(fold)) train_set.push_back(dataset[i]);
  for (auto i : split.held_out(fold)) held.push_back(dataset[i]);

  auto init = options.init ? *options.init : init_params<float>(options.config, cfg.seed);
  auto result = finetune(std::move(init), vocab, std::span<const LabeledExample>(train_set), task, cfg,
                         options.mode);

  const auto probs = predict_proba(result.params, vocab, std::span<const LabeledExample>(held), task);
  std::vector<std::size_t> golds;
  std::vector<std::size_t> preds;
  for (std::size_t i = 0; i < held.size(); ++i) {
    golds.push_back(held[i].hard.at(task));
    preds.push_back(probs[i].argmax());
  }
  fold_report = report(confusion(std::span<const std::size_t>(golds),
                                 std::span<const std::size_t>(preds), task));
  return std::move(result.params);
}

}  // namespace

CvEnsemble train_cv_ensemble(std::span<const LabeledExample> dataset, const Vocabulary& vocab,
                             TaskId task, std::size_t k, const TrainConfig& train,
                             const CvOptions& options) {
  CvEnsemble out;
  out.split = stratified_kfold(dataset, task, k, train.seed);
  out.members.resize(k);
  out.fold_reports.resize(k);
  const std::size_t jobs = std::max<std::size_t>(options.jobs, 1);
  if (jobs == 1) {
    for (std::size_t f = 0; f < k; ++f) {
      out.members[f] = train_fold(dataset, vocab, task, out.split, f, train, options, out.fold_reports[f]);
    }
    return out;
  }
  for (std::size_t start = 0; start < k; start += jobs) {
    const std::size_t end = std::min(k, start + jobs);
    std::vector<std::future<ModelParameters<float>>> pending;
    for (std::size_t f = start; f < end; ++f) {
      pending.push_back(std::async(std::launch::async, [&, f] {
        return train_fold(dataset, vocab, task, out.split, f, train, options, out.fold_reports[f]);
      }));
    }
    for (std::size_t f = start; f < end; ++f) out.members[f] = pending[f - start].get();
  }
  return out;
}

std::uint64_t fingerprint(const ModelParameters<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  const auto config = config_to_json(params.config);
  feed(config.data(), config.size());
  params.visit([&](const std::string& name, const Tensor<float>& t) {
    feed(name.data(), name.size());
    feed(t.data.data(), t.data.size() * sizeof(float));
  });
  return h;
}

std::vector<EnsemblePrediction> predict_ensemble(std::span<const ModelParameters<float>> members,
                                                 const Vocabulary& vocab,
                                                 std::span<const LabeledExample> examples,
                                                 TaskId task) {
  if (members.empty()) throw InvalidArgument("ensemble has no members");
  for (std::size_t m = 1; m < members.size(); ++m) {
    if (!(members[m].config == members[0].config)) {
      throw InvalidArgument("ensemble member " + std::to_string(m) +
                            " has a different architecture from member 0");
    }
  }
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t m = 0; m < members.size(); ++m) order.emplace_back(fingerprint(members[m]), m);
  std::sort(order.begin(), order.end());

  const std::size_t classes = num_labels(task);
  std::vector<std::vector<double>> sums(examples.size(), std::vector<double>(classes, 0.0));
  for (const auto& [fp, m] : order) {
    const auto probs = predict_proba(members[m], vocab, examples, task);
    for (std::size_t e = 0; e < examples.size(); ++e) {
      for (std::size_t c = 0; c < classes; ++c) sums[e][c] += probs[e].probs[c];
    }
  }
  std::vector<EnsemblePrediction> out;
  out.reserve(examples.size());
  const auto count = static_cast<double>(members.size());
  for (auto& s : sums) {
    for (auto& v : s) v /= count;
    EnsemblePrediction p{SoftDistribution{task, std::move(s)}, 0};
    p.label = p.probs.argmax();
    out.push_back(std::move(p));
  }
  return out;
}

std::string format_predictions(std::span<const std::string> ids,
                               std::span<const EnsemblePrediction> predictions, TaskId task,
                               PredictionFormat format, bool with_probs) {
  if (ids.size() != predictions.size()) throw InvalidArgument("ids and predictions differ in length");
  std::string out;
  const auto names = label_names(task);
  const bool csv = format == PredictionFormat::csv;
  if (!csv) {
    out = "id\tlabel";
    if (with_probs) {
      for (auto n : names) out += "\tp_" + std::string(n);
    }
    out += "\n";
  }
  char buf[32];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += ids[i];
    out += csv ? ',' : '\t';
    out += label_name(task, predictions[i].label);
    if (!csv && with_probs) {
      for (double p : predictions[i].probs.probs) {
        std::snprintf(buf, sizeof buf, "\t%.9f", p);
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> read_predictions(const std::filesystem::path& path) {
  const auto content = read_file(path);
  std::vector<std::pair<std::string, std::string>> out;
  const bool tsv = content.rfind("id\tlabel", 0) == 0;
  if (tsv) {
    const auto table = parse_tsv(content, path.string());
    for (const auto& row : table.rows) {
      if (row.fields.size() < 2) throw ParseError(path.string(), row.line, "expected id and label");
      out.emplace_back(row.fields[0], row.fields[1]);
    }
    return out;
  }
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    auto end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    std::string line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw ParseError(path.string(), line_no, "expected id,label");
    out.emplace_back(line.substr(0, comma), line.substr(comma + 1));
  }
  return out;
}

}  // namespace offkd
