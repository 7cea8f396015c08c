#include "offkd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "offkd/checkpoint.hpp"
#include "offkd/corpus.hpp"
#include "offkd/distillation.hpp"
#include "offkd/ensemble.hpp"
#include "offkd/evaluation.hpp"
#include "offkd/tokenizer.hpp"
#include "offkd/tsv.hpp"

namespace offkd::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- value parsing ---------------------------------------------------------

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::optional<std::uint64_t> to_uint(std::string_view s) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::optional<double> to_real(std::string_view s) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
    return std::nullopt;
  }
  return v;
}

std::optional<bool> to_bool(std::string_view s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  return std::nullopt;
}

// Shortest text that reads back to the same double.
std::string real_str(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ec == std::errc() ? end : buf);
}

// ---- config table ----------------------------------------------------------

struct Setting {
  std::string name;  // section.key
  std::function<bool(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Ref>
Setting size_setting(std::string name, Ref ref) {
  return {std::move(name),
          [ref](RunConfig& c, std::string_view v) {
            const auto n = to_uint(v);
            if (!n) return false;
            ref(c) = static_cast<std::size_t>(*n);
            return true;
          },
          [ref](const RunConfig& c) { return std::to_string(ref(c)); }};
}

template <typename Ref>
Setting real_setting(std::string name, Ref ref) {
  return {std::move(name),
          [ref](RunConfig& c, std::string_view v) {
            const auto x = to_real(v);
            if (!x) return false;
            ref(c) = *x;
            return true;
          },
          [ref](const RunConfig& c) { return real_str(ref(c)); }};
}

const std::vector<Setting>& settings() {
  static const std::vector<Setting> table = [] {
    std::vector<Setting> t;
    t.push_back(size_setting("model.layers", [](auto& c) -> auto& { return c.model.layers; }));
    t.push_back(size_setting("model.hidden", [](auto& c) -> auto& { return c.model.hidden; }));
    t.push_back(size_setting("model.heads", [](auto& c) -> auto& { return c.model.heads; }));
    t.push_back(size_setting("model.ffn", [](auto& c) -> auto& { return c.model.ffn; }));
    t.push_back(size_setting("model.max_len", [](auto& c) -> auto& { return c.model.max_len; }));
    t.push_back(real_setting("model.dropout", [](auto& c) -> auto& { return c.model.dropout; }));
    t.push_back({"model.tie_mlm",
                 [](RunConfig& c, std::string_view v) {
                   const auto b = to_bool(v);
                   if (b) c.model.tie_mlm = *b;
                   return b.has_value();
                 },
                 [](const RunConfig& c) { return std::string(c.model.tie_mlm ? "true" : "false"); }});
    t.push_back(real_setting("training.lr", [](auto& c) -> auto& { return c.training.learning_rate; }));
    t.push_back(real_setting("training.beta1", [](auto& c) -> auto& { return c.training.beta1; }));
    t.push_back(real_setting("training.beta2", [](auto& c) -> auto& { return c.training.beta2; }));
    t.push_back(real_setting("training.epsilon", [](auto& c) -> auto& { return c.training.epsilon; }));
    t.push_back(size_setting("training.batch_size", [](auto& c) -> auto& { return c.training.batch_size; }));
    t.push_back(size_setting("training.epochs", [](auto& c) -> auto& { return c.training.epochs; }));
    t.push_back({"training.warmup_steps",
                 [](RunConfig& c, std::string_view v) {
                   if (v == "auto") {
                     c.training.warmup_steps.reset();
                     return true;
                   }
                   const auto n = to_uint(v);
                   if (n) c.training.warmup_steps = static_cast<std::size_t>(*n);
                   return n.has_value();
                 },
                 [](const RunConfig& c) {
                   return c.training.warmup_steps ? std::to_string(*c.training.warmup_steps)
                                                  : std::string("auto");
                 }});
    t.push_back(real_setting("training.clip_norm", [](auto& c) -> auto& { return c.training.clip_norm; }));
    t.push_back({"training.seed",
                 [](RunConfig& c, std::string_view v) {
                   const auto n = to_uint(v);
                   if (n) c.training.seed = *n;
                   return n.has_value();
                 },
                 [](const RunConfig& c) { return std::to_string(c.training.seed); }});
    t.push_back(real_setting("masking.fraction", [](auto& c) -> auto& { return c.masking.mask_fraction; }));
    t.push_back(real_setting("masking.mask", [](auto& c) -> auto& { return c.masking.mask_prob; }));
    t.push_back(real_setting("masking.random", [](auto& c) -> auto& { return c.masking.random_prob; }));
    t.push_back(real_setting("masking.keep", [](auto& c) -> auto& { return c.masking.keep_prob; }));
    t.push_back(size_setting("vocab.size", [](auto& c) -> auto& { return c.vocab_size; }));
    return t;
  }();
  return table;
}

void set_value(RunConfig& config, const std::string& name, std::string_view value,
               const std::string& where) {
  for (const auto& s : settings()) {
    if (s.name != name) continue;
    if (!s.set(config, value)) {
      throw UsageError(where + ": invalid value for " + name + ": '" + std::string(value) + "'");
    }
    return;
  }
  throw UsageError(where + ": unknown setting " + name);
}

// ---- paths, hashing, manifests --------------------------------------------

const std::set<std::string>& path_flags() {
  static const std::set<std::string> flags{
      "--corpus", "--vocab", "--config", "--out",  "--init", "--data", "--validation", "--teachers",
      "--student-config", "--model", "--ensemble", "--gold", "--pred", "--test", "--soft-labels",
      "--manifest"};
  return flags;
}

std::string absolute_path(const std::string& p) {
  return fs::absolute(fs::path(p)).lexically_normal().string();
}

bool looks_like_language(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

std::string absolute_value(const std::string& flag, const std::string& value) {
  if (flag == "--teachers") {
    std::string out;
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (!out.empty()) out += ",";
      out += absolute_path(part);
    }
    return out;
  }
  const auto eq = value.find('=');
  if (eq != std::string::npos && looks_like_language(std::string_view(value).substr(0, eq))) {
    return value.substr(0, eq + 1) + absolute_path(value.substr(eq + 1));
  }
  return absolute_path(value);
}

std::vector<std::string> absolutize_args(std::vector<std::string> args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto eq = args[i].find('=');
    if (args[i].rfind("--", 0) == 0 && eq != std::string::npos) {
      const auto flag = args[i].substr(0, eq);
      if (path_flags().contains(flag)) args[i] = flag + "=" + absolute_value(flag, args[i].substr(eq + 1));
    } else if (path_flags().contains(args[i]) && i + 1 < args.size()) {
      args[i + 1] = absolute_value(args[i], args[i + 1]);
      ++i;
    }
  }
  return args;
}

std::string hash_file(const fs::path& path) {
  const auto content = read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : content) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Removes a run directory unless commit() was reached.
class RunDir {
 public:
  explicit RunDir(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
      if (!fs::is_directory(path_) || !fs::is_empty(path_)) {
        throw IoError("output directory " + path_.string() + " exists and is not empty");
      }
    } else {
      fs::create_directories(path_);
      created_ = true;
    }
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;
  ~RunDir() {
    if (committed_) return;
    std::error_code ec;
    if (created_) {
      fs::remove_all(path_, ec);
    } else {
      for (const auto& entry : fs::directory_iterator(path_, ec)) fs::remove_all(entry.path(), ec);
    }
  }
  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  void commit() noexcept { committed_ = true; }

 private:
  fs::path path_;
  bool created_ = false;
  bool committed_ = false;
};

struct Context {
  std::string command;
  std::vector<std::string> argv;  // absolute paths, as recorded in manifests
  RunConfig config;
  std::ostream& out;
  std::ostream& err;
  std::vector<fs::path> inputs;
};

void write_manifest(const Context& ctx, const RunDir& dir) {
  json config = json::object();
  for (const auto& s : settings()) config[s.name] = s.get(ctx.config);
  json inputs = json::object();
  for (const auto& p : ctx.inputs) {
    if (fs::is_regular_file(p)) inputs[p.string()] = hash_file(p);
  }
  const json manifest{{"tool", "offkd"},
                      {"tool_version", kToolVersion},
                      {"command", ctx.command},
                      {"argv", ctx.argv},
                      {"seed", ctx.config.training.seed},
                      {"config", config},
                      {"inputs", inputs},
                      {"output", dir.path().string()}};
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---- loading helpers -------------------------------------------------------

struct DataArg {
  std::string language = "en";
  fs::path path;
};

DataArg parse_data_arg(const std::string& value) {
  const auto eq = value.find('=');
  if (eq != std::string::npos && looks_like_language(std::string_view(value).substr(0, eq))) {
    return {value.substr(0, eq), value.substr(eq + 1)};
  }
  return {"en", value};
}

std::vector<LabeledExample> load_labeled(const DataArg& arg, TaskId task) {
  const auto content = read_file(arg.path);
  const auto header = content.substr(0, content.find('\n'));
  if (header.rfind("id\ttweet", 0) == 0) return parse_olid(arg.path, arg.language);
  if (header.rfind("id\ttext", 0) == 0) {
    auto examples = parse_solid_distant(arg.path, task);
    for (auto& ex : examples) ex.language = arg.language;
    return examples;
  }
  throw ParseError(arg.path.string(), 1, "unrecognised header; expected `id\\ttweet...` or `id\\ttext...`");
}

std::vector<LabeledExample> load_data(const std::vector<std::string>& specs, TaskId task,
                                      Context& ctx) {
  if (specs.empty()) throw UsageError("--data is required");
  std::vector<LanguageDataset> sets;
  for (const auto& s : specs) {
    const auto arg = parse_data_arg(s);
    ctx.inputs.push_back(arg.path);
    sets.push_back({arg.language, load_labeled(arg, task)});
  }
  if (sets.size() == 1) return std::move(sets.front().examples);
  return mix_multilingual(std::move(sets));
}

std::vector<std::string> load_texts(const fs::path& path) {
  std::vector<std::string> texts;
  if (path.extension() == ".tsv") {
    const auto table = read_tsv(path);
    auto col = table.column("tweet");
    if (col == std::string::npos) col = table.column("text");
    if (col == std::string::npos) throw ParseError(path.string(), 1, "no `tweet` or `text` column");
    for (const auto& row : table.rows) {
      if (col < row.fields.size()) texts.push_back(normalize_text(row.fields[col]));
    }
  } else {
    for (const auto& line : read_lines(path)) texts.push_back(normalize_text(line));
  }
  return texts;
}

struct LoadedModel {
  ModelParameters<float> params;
  std::optional<Vocabulary> vocab;
};

LoadedModel load_model(const fs::path& path, Context& ctx) {
  const bool dir = fs::is_directory(path);
  const auto ckpt = dir ? path / "model.ckpt" : path;
  const auto vocab_path = (dir ? path : path.parent_path()) / "vocab.bpe";
  ctx.inputs.push_back(ckpt);
  LoadedModel m{load_checkpoint<float>(ckpt), std::nullopt};
  if (fs::exists(vocab_path)) {
    ctx.inputs.push_back(vocab_path);
    m.vocab = Vocabulary::load(vocab_path);
  }
  return m;
}

Vocabulary require_vocab(const std::string& flag_value, const std::optional<Vocabulary>& fallback,
                         Context& ctx) {
  if (!flag_value.empty()) {
    ctx.inputs.push_back(flag_value);
    return Vocabulary::load(flag_value);
  }
  if (fallback) return *fallback;
  throw UsageError("--vocab is required when no vocabulary sits next to the model");
}

// --vocab, else the one stored with the starting model, else learned from the
// training texts with vocab.size.
Vocabulary training_vocab(const std::string& flag_value, const std::optional<LoadedModel>& init,
                          const std::vector<LabeledExample>& data, Context& ctx) {
  if (!flag_value.empty() || (init && init->vocab)) {
    return require_vocab(flag_value, init ? init->vocab : std::nullopt, ctx);
  }
  if (init) throw UsageError("--vocab is required when no vocabulary sits next to the model");
  std::vector<std::string> texts;
  for (const auto& ex : data) texts.push_back(ex.text);
  return build_vocab(texts, ctx.config.vocab_size);
}

TaskId task_of(const std::string& name) {
  const auto t = parse_task(name);
  if (!t) throw UsageError("--task: expected A, B or C, got '" + name + "'");
  return *t;
}

void print_history(std::ostream& out, const std::vector<EpochRecord>& history) {
  char buf[96];
  for (const auto& r : history) {
    if (r.val_macro_f1) {
      std::snprintf(buf, sizeof buf, "epoch %zu  loss %.6f  val_macro_f1 %s\n", r.epoch, r.train_loss,
                    format_metric(*r.val_macro_f1).c_str());
    } else {
      std::snprintf(buf, sizeof buf, "epoch %zu  loss %.6f\n", r.epoch, r.train_loss);
    }
    out << buf;
  }
}

MetricsReport score(const std::vector<LabeledExample>& gold, const std::vector<EnsemblePrediction>& preds,
                    TaskId task) {
  std::vector<std::size_t> g;
  std::vector<std::size_t> p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto it = gold[i].hard.find(task);
    if (it == gold[i].hard.end()) continue;
    g.push_back(it->second);
    p.push_back(preds[i].label);
  }
  return report(confusion(std::span<const std::size_t>(g), std::span<const std::size_t>(p), task));
}

bool has_labels(const std::vector<LabeledExample>& data, TaskId task) {
  return std::any_of(data.begin(), data.end(), [&](const auto& ex) { return ex.hard.contains(task); });
}

std::vector<std::string> ids_of(const std::vector<LabeledExample>& data) {
  std::vector<std::string> ids;
  ids.reserve(data.size());
  for (const auto& ex : data) ids.push_back(ex.id);
  return ids;
}

std::string sweep_summary(const std::vector<std::pair<std::string, MetricsReport>>& runs) {
  std::vector<double> f1;
  for (const auto& [name, r] : runs) f1.push_back(r.macro_f1);
  const auto ms = mean_std(std::span<const double>(f1));
  return "macro_F1 mean " + format_metric(ms.mean) + " std " + format_metric(ms.stddev) + " over " +
         std::to_string(f1.size()) + " seeds\n";
}

// ---- commands --------------------------------------------------------------

struct Flags {
  std::vector<std::string> corpus;
  std::string vocab, config_path, out, init, task = "A", loss = "hard", model, ensemble, gold, pred,
      student_config, soft_labels, manifest, format = "tsv", report_format = "text", test;
  std::vector<std::string> data, validation, teachers, sets;
  std::vector<double> weights;
  std::size_t size = 0, k = 10, seeds = 1, jobs = 1;
  bool no_probs = false, no_hard_as_soft = false;
  // Explicit overrides; applied after the config file and --set.
  std::optional<std::size_t> epochs, batch_size, warmup;
  std::optional<double> lr, dropout;
  std::optional<std::uint64_t> seed;
};

int cmd_build_vocab(Context& ctx, const Flags& f) {
  std::vector<std::string> texts;
  for (const auto& c : f.corpus) {
    ctx.inputs.push_back(c);
    auto t = load_texts(c);
    texts.insert(texts.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
  }
  const std::size_t size = f.size ? f.size : ctx.config.vocab_size;
  const auto vocab = build_vocab(texts, size);
  vocab.save(f.out);
  ctx.out << "vocab " << vocab.size() << " tokens (" << vocab.merges().size() << " merges) -> " << f.out
          << "\n";
  return 0;
}

int cmd_pretrain(Context& ctx, const Flags& f) {
  std::vector<std::string> texts;
  for (const auto& c : f.corpus) {
    ctx.inputs.push_back(c);
    auto t = load_texts(c);
    texts.insert(texts.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
  }
  const auto vocab = require_vocab(f.vocab, std::nullopt, ctx);
  auto model = ctx.config.model;
  model.vocab_size = vocab.size();
  model.validate();
  RunDir dir(f.out);
  write_manifest(ctx, dir);
  const EpochCallback<float> per_epoch = [&dir](std::size_t epoch, const ModelParameters<float>& p) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch-%02zu.ckpt", epoch);
    save_checkpoint(p, dir / name);
  };
  const auto result =
      pretrain_mlm<float>(texts, vocab, model, ctx.config.training, ctx.config.masking, per_epoch);
  print_history(ctx.out, result.history);
  save_checkpoint(result.params, dir / "model.ckpt");
  vocab.save(dir / "vocab.bpe");
  write_file_atomic(dir / "history.jsonl", history_to_jsonl(result.history));
  dir.commit();
  return 0;
}

void attach_soft_labels(std::vector<LabeledExample>& data, const fs::path& path, TaskId task,
                        Context& ctx) {
  ctx.inputs.push_back(path);
  const auto table = read_soft_labels(path, task);
  for (auto& ex : data) {
    const auto it = table.find(ex.id);
    if (it != table.end()) ex.soft[task] = it->second;
  }
}

int cmd_finetune(Context& ctx, const Flags& f) {
  const auto task = task_of(f.task);
  std::optional<LoadedModel> init;
  if (!f.init.empty()) init = load_model(f.init, ctx);
  auto data = load_data(f.data, task, ctx);
  const auto vocab = training_vocab(f.vocab, init, data, ctx);
  if (!f.soft_labels.empty()) attach_soft_labels(data, f.soft_labels, task, ctx);
  std::vector<LabeledExample> validation;
  if (!f.validation.empty()) validation = load_data(f.validation, task, ctx);
  if (f.seeds > 1 && validation.empty()) throw UsageError("--seeds needs --validation to score each run");
  auto model = init ? init->params.config : ctx.config.model;
  if (!init) model.vocab_size = vocab.size();
  model.validate();
  const auto mode = f.loss == "soft" ? LossMode::soft : LossMode::hard;

  RunDir dir(f.out);
  write_manifest(ctx, dir);
  vocab.save(dir / "vocab.bpe");
  std::vector<std::pair<std::string, MetricsReport>> sweep;
  for (std::size_t s = 0; s < f.seeds; ++s) {
    auto train = ctx.config.training;
    train.seed += s;
    FinetuneOptions<float> options;
    options.validation = validation;
    options.hard_as_soft = !f.no_hard_as_soft;
    auto start = init ? init->params : init_params<float>(model, train.seed);
    const auto result = finetune(std::move(start), vocab, std::span<const LabeledExample>(data), task,
                                 train, mode, options);
    if (f.seeds > 1) ctx.out << "seed " << train.seed << "\n";
    print_history(ctx.out, result.history);
    const std::string suffix = s == 0 ? "" : "-seed" + std::to_string(train.seed);
    save_checkpoint(result.params, dir / ("model" + suffix + ".ckpt"));
    write_file_atomic(dir / ("history" + suffix + ".jsonl"), history_to_jsonl(result.history));
    if (!validation.empty() && f.seeds > 1) {
      const auto probs = predict_proba(result.params, vocab, std::span<const LabeledExample>(validation), task);
      std::vector<EnsemblePrediction> preds;
      for (const auto& p : probs) preds.push_back({p, p.argmax()});
      sweep.emplace_back("seed-" + std::to_string(train.seed), score(validation, preds, task));
    }
  }
  if (!sweep.empty()) {
    write_file_atomic(dir / "sweep.tsv", compare_runs(sweep, TableFormat::tsv));
    ctx.out << compare_runs(sweep, TableFormat::text) << sweep_summary(sweep);
  }
  dir.commit();
  return 0;
}

int cmd_distill(Context& ctx, const Flags& f) {
  const auto task = task_of(f.task);
  if (f.teachers.empty()) throw UsageError("--teachers is required");
  std::vector<std::shared_ptr<const PredictionSource>> teachers;
  std::optional<Vocabulary> teacher_vocab;
  for (const auto& list : f.teachers) {
    std::stringstream ss(list);
    std::string t;
    while (std::getline(ss, t, ',')) {
      if (t.empty()) continue;
      if (fs::path(t).extension() == ".tsv") {
        ctx.inputs.push_back(t);
        teachers.push_back(std::make_shared<TableTeacher>(TableTeacher::load(t, t, task)));
      } else {
        auto m = load_model(t, ctx);
        if (!m.vocab) throw UsageError("--teachers: no vocab.bpe next to " + t);
        if (!teacher_vocab) teacher_vocab = m.vocab;
        teachers.push_back(std::make_shared<ModelTeacher>(t, std::move(m.params), *m.vocab));
      }
    }
  }
  if (!f.weights.empty() && f.weights.size() != teachers.size()) {
    throw UsageError("--weights: got " + std::to_string(f.weights.size()) + " values for " +
                     std::to_string(teachers.size()) + " teachers");
  }
  const auto ensemble = TeacherEnsemble::make(std::move(teachers), f.weights, &ctx.err);

  std::optional<LoadedModel> init;
  if (!f.init.empty()) init = load_model(f.init, ctx);
  const auto vocab = require_vocab(f.vocab, init ? init->vocab : teacher_vocab, ctx);
  const auto data = load_data(f.data, task, ctx);
  auto model = init ? init->params.config : ctx.config.model;
  if (!init) model.vocab_size = vocab.size();
  model.validate();

  RunDir dir(f.out);
  write_manifest(ctx, dir);
  const auto soft = ensemble_soft_labels(ensemble, std::span<const LabeledExample>(data), task, f.jobs);
  write_soft_labels(dir / "soft_labels.tsv", soft, task);
  auto start = init ? init->params : init_params<float>(model, ctx.config.training.seed);
  const auto result = distill_student(std::move(start), vocab, std::span<const LabeledExample>(soft), task,
                                      ctx.config.training);
  print_history(ctx.out, result.history);
  save_checkpoint(result.params, dir / "model.ckpt");
  vocab.save(dir / "vocab.bpe");
  write_file_atomic(dir / "history.jsonl", history_to_jsonl(result.history));
  dir.commit();
  return 0;
}

int cmd_crossval(Context& ctx, const Flags& f) {
  const auto task = task_of(f.task);
  std::optional<LoadedModel> init;
  if (!f.init.empty()) init = load_model(f.init, ctx);
  const auto data = load_data(f.data, task, ctx);
  std::vector<LabeledExample> test;
  if (!f.test.empty()) test = load_data({f.test}, task, ctx);
  if (f.seeds > 1 && !has_labels(test, task)) throw UsageError("--seeds needs a labelled --test set");
  const auto vocab = training_vocab(f.vocab, init, data, ctx);
  CvOptions options;
  options.config = ctx.config.model;
  options.config.vocab_size = vocab.size();
  options.init = init ? &init->params : nullptr;
  options.mode = f.loss == "soft" ? LossMode::soft : LossMode::hard;
  options.jobs = f.jobs;
  if (!init) options.config.validate();

  RunDir dir(f.out);
  write_manifest(ctx, dir);
  vocab.save(dir / "vocab.bpe");
  const auto& eval_set = test.empty() ? data : test;
  std::vector<std::pair<std::string, MetricsReport>> sweep;
  for (std::size_t s = 0; s < f.seeds; ++s) {
    auto train = ctx.config.training;
    train.seed += s;
    const auto sub = s == 0 ? dir.path() : dir.path() / ("seed-" + std::to_string(train.seed));
    fs::create_directories(sub / "members");
    const auto ens = train_cv_ensemble(std::span<const LabeledExample>(data), vocab, task, f.k, train, options);
    char name[32];
    std::vector<std::pair<std::string, MetricsReport>> folds;
    std::string split = "id\tfold\n";
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
      std::snprintf(name, sizeof name, "fold-%02zu", i);
      save_checkpoint(ens.members[i], sub / "members" / (std::string(name) + ".ckpt"));
      folds.emplace_back(name, ens.fold_reports[i]);
    }
    for (std::size_t i = 0; i < ens.split.ids.size(); ++i) {
      split += ens.split.ids[i] + "\t" + std::to_string(ens.split.folds[i]) + "\n";
    }
    write_file_atomic(sub / "split.tsv", split);
    write_file_atomic(sub / "folds.tsv", compare_runs(folds, TableFormat::tsv));
    ctx.out << compare_runs(folds, TableFormat::text);
    const auto preds = predict_ensemble(ens.members, vocab, std::span<const LabeledExample>(eval_set), task);
    const auto ids = ids_of(eval_set);
    write_file_atomic(sub / "predictions.tsv",
                      format_predictions(ids, preds, task, PredictionFormat::tsv, true));
    if (has_labels(eval_set, task)) {
      const auto rep = score(eval_set, preds, task);
      write_file_atomic(sub / "report.txt", format_report(rep, TableFormat::text));
      ctx.out << (test.empty() ? "ensemble on training data\n" : "ensemble on test data\n")
              << format_report(rep, TableFormat::text);
      sweep.emplace_back("seed-" + std::to_string(train.seed), rep);
    }
  }
  if (f.seeds > 1) {
    write_file_atomic(dir / "sweep.tsv", compare_runs(sweep, TableFormat::tsv));
    ctx.out << compare_runs(sweep, TableFormat::text) << sweep_summary(sweep);
  }
  dir.commit();
  return 0;
}

int cmd_predict(Context& ctx, const Flags& f) {
  const auto task = task_of(f.task);
  if (f.model.empty() == f.ensemble.empty()) throw UsageError("give exactly one of --model or --ensemble");
  std::vector<ModelParameters<float>> members;
  std::optional<Vocabulary> found_vocab;
  if (!f.model.empty()) {
    auto m = load_model(f.model, ctx);
    members.push_back(std::move(m.params));
    found_vocab = std::move(m.vocab);
  } else {
    const fs::path root(f.ensemble);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root / "members")) {
      if (e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no member checkpoints under " + (root / "members").string());
    for (const auto& p : files) {
      ctx.inputs.push_back(p);
      members.push_back(load_checkpoint<float>(p));
    }
    if (fs::exists(root / "vocab.bpe")) found_vocab = Vocabulary::load(root / "vocab.bpe");
  }
  const auto vocab = require_vocab(f.vocab, found_vocab, ctx);
  const auto data = load_data(f.data, task, ctx);
  const auto preds = predict_ensemble(members, vocab, std::span<const LabeledExample>(data), task);
  const auto format = f.format == "csv" ? PredictionFormat::csv : PredictionFormat::tsv;
  write_file_atomic(f.out, format_predictions(ids_of(data), preds, task, format, !f.no_probs));
  ctx.out << preds.size() << " predictions -> " << f.out << "\n";
  return 0;
}

int cmd_evaluate(Context& ctx, const Flags& f) {
  const auto task = task_of(f.task);
  const auto gold = load_labeled(parse_data_arg(f.gold), task);
  const auto preds = read_predictions(f.pred);
  std::map<std::string, std::string> by_id;
  for (const auto& [id, label] : preds) {
    if (!by_id.emplace(id, label).second) throw ValidationError("duplicate prediction id", {id});
  }
  std::vector<std::size_t> g;
  std::vector<std::size_t> p;
  std::vector<std::string> missing;
  for (const auto& ex : gold) {
    const auto gl = ex.hard.find(task);
    if (gl == ex.hard.end()) continue;
    const auto it = by_id.find(ex.id);
    if (it == by_id.end()) {
      missing.push_back(ex.id);
      continue;
    }
    const auto idx = label_index(task, it->second);
    if (!idx) throw ValidationError("unknown label '" + it->second + "' in predictions", {ex.id});
    g.push_back(gl->second);
    p.push_back(*idx);
  }
  if (!missing.empty()) throw ValidationError("gold examples without a prediction", std::move(missing));
  const auto rep = report(confusion(std::span<const std::size_t>(g), std::span<const std::size_t>(p), task));
  const auto text = format_report(rep, f.report_format == "tsv" ? TableFormat::tsv : TableFormat::text);
  if (f.out.empty()) {
    ctx.out << text;
  } else {
    write_file_atomic(f.out, text);
  }
  return 0;
}

int cmd_stats(Context& ctx, const Flags& f) {
  if (f.data.empty()) throw UsageError("--data is required");
  std::vector<LabeledExample> all;
  for (const auto& spec : f.data) {
    auto part = load_labeled(parse_data_arg(spec), task_of(f.task));
    all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  auto text = format_stats(stats(all));
  const auto dups = find_duplicate_texts(all);
  std::size_t dup_posts = 0;
  for (const auto& g : dups) dup_posts += g.size();
  text += "duplicate_texts\t" + std::to_string(dups.size()) + " groups, " + std::to_string(dup_posts) +
          " posts\n";
  if (f.out.empty()) {
    ctx.out << text;
  } else {
    write_file_atomic(f.out, text);
  }
  return 0;
}

std::vector<std::string> replay_args(const fs::path& manifest_path, const std::string& out_dir) {
  const auto manifest = json::parse(read_file(manifest_path), nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("argv") || !manifest.contains("config")) {
    throw ParseError(manifest_path.string(), 0, "not a run manifest");
  }
  std::vector<std::string> changed;
  for (const auto& [path, hash] : manifest.at("inputs").items()) {
    if (!fs::exists(path) || hash_file(path) != hash.get<std::string>()) changed.push_back(path);
  }
  if (!changed.empty()) throw ValidationError("inputs differ from the manifest", std::move(changed));

  const auto argv = manifest.at("argv").get<std::vector<std::string>>();
  std::vector<std::string> args;
  for (std::size_t i = 0; i < argv.size(); ++i) {
    const auto& a = argv[i];
    if (a == "--config" || a == "--set" || a == "--out") {
      ++i;
      continue;
    }
    if (a.rfind("--config=", 0) == 0 || a.rfind("--set=", 0) == 0 || a.rfind("--out=", 0) == 0) continue;
    args.push_back(a);
  }
  args.push_back("--out");
  args.push_back(out_dir);
  for (const auto& [key, value] : manifest.at("config").items()) {
    args.push_back("--set");
    args.push_back(key + "=" + value.get<std::string>());
  }
  return args;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (c == '\n') {
      out += "\\n";
    } else if (c == '\t') {
      out += "\\t";
    } else {
      out += c;
    }
  }
  return out;
}

}  // namespace

void apply_config_text(RunConfig& config, std::string_view text, const std::string& origin) {
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.resize(comment);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw UsageError(where + ": malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + ": expected key = value");
    if (section.empty()) throw UsageError(where + ": setting outside a section");
    set_value(config, section + "." + trim(std::string_view(line).substr(0, eq)),
              trim(std::string_view(line).substr(eq + 1)), where);
  }
}

void apply_setting(RunConfig& config, std::string_view assignment, const std::string& origin) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw UsageError(origin + ": expected section.key=value");
  set_value(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), origin);
}

std::string format_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& s : settings()) {
    const auto dot = s.name.find('.');
    const auto sec = s.name.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "[" : "\n[") + sec + "]\n";
      section = sec;
    }
    out += s.name.substr(dot + 1) + " = " + s.get(config) + "\n";
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Offensive-language classification toolkit", "offkd"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  Flags f;

  auto training_flags = [&f](CLI::App* sub) {
    sub->add_option("--config", f.config_path, "Config file (flat key = value with sections)");
    sub->add_option("--set", f.sets, "Override one setting, section.key=value")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    sub->add_option("--epochs", f.epochs, "Training epochs");
    sub->add_option("--batch-size", f.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
    sub->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    sub->add_option("--warmup", f.warmup, "Linear warmup steps");
    sub->add_option("--dropout", f.dropout, "Dropout rate")->check(CLI::Range(0.0, 0.99));
    sub->add_option("--seed", f.seed, "Random seed");
  };
  auto task_flag = [&f](CLI::App* sub) {
    sub->add_option("--task", f.task, "Sub-task")->check(CLI::IsMember({"A", "B", "C"}));
  };

  auto* build = app.add_subcommand("build-vocab", "Learn a byte-level BPE vocabulary");
  build->add_option("--corpus", f.corpus, "Text (one post per line) or TSV file")->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  build->add_option("--size", f.size, "Target vocabulary size")->check(CLI::Range(261, 1 << 20));
  build->add_option("--out", f.out, "Vocabulary file to write")->required();
  build->add_option("--config", f.config_path, "Config file");

  auto* pretrain = app.add_subcommand("pretrain", "Masked-language-model pretraining");
  pretrain->add_option("--corpus", f.corpus, "Unlabelled text")->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  pretrain->add_option("--vocab", f.vocab, "Vocabulary file")->required();
  pretrain->add_option("--out", f.out, "Run directory")->required();
  training_flags(pretrain);

  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a classifier head and encoder");
  finetune_cmd->add_option("--init", f.init, "Pretrained run directory or checkpoint");
  finetune_cmd->add_option("--vocab", f.vocab, "Vocabulary file");
  finetune_cmd->add_option("--data", f.data, "Training data, [LANG=]PATH; repeat to mix languages")
      ->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  finetune_cmd->add_option("--validation", f.validation, "Validation data, [LANG=]PATH")->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  finetune_cmd->add_option("--soft-labels", f.soft_labels, "Soft-label TSV to attach by id");
  finetune_cmd->add_option("--loss", f.loss, "hard or soft targets")->check(CLI::IsMember({"hard", "soft"}));
  finetune_cmd->add_flag("--no-hard-as-soft", f.no_hard_as_soft,
                         "Soft mode: reject examples without soft labels instead of using one-hot");
  finetune_cmd->add_option("--seeds", f.seeds, "Repeat with N consecutive seeds")->check(CLI::PositiveNumber);
  finetune_cmd->add_option("--out", f.out, "Run directory")->required();
  task_flag(finetune_cmd);
  training_flags(finetune_cmd);

  auto* distill = app.add_subcommand("distill", "Train a student on teacher-ensemble soft labels");
  distill->add_option("--teachers", f.teachers, "Run directories, checkpoints or soft-label TSVs")
      ->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  distill->add_option("--weights", f.weights, "One weight per teacher")->delimiter(',');
  distill->add_option("--data", f.data, "Examples to label, [LANG=]PATH")->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  distill->add_option("--student-config", f.student_config, "Config file for the student");
  distill->add_option("--init", f.init, "Student starting point");
  distill->add_option("--vocab", f.vocab, "Student vocabulary");
  distill->add_option("--jobs", f.jobs, "Teachers predicting concurrently")->check(CLI::PositiveNumber);
  distill->add_option("--out", f.out, "Run directory")->required();
  task_flag(distill);
  training_flags(distill);

  auto* crossval = app.add_subcommand("crossval", "k-fold cross-validation ensemble");
  crossval->add_option("--data", f.data, "Training data, [LANG=]PATH")->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  crossval->add_option("--test", f.test, "Held-out data for ensemble predictions");
  crossval->add_option("--k", f.k, "Number of folds")->check(CLI::Range(2, 1000));
  crossval->add_option("--init", f.init, "Pretrained run directory or checkpoint");
  crossval->add_option("--vocab", f.vocab, "Vocabulary file");
  crossval->add_option("--loss", f.loss, "hard or soft targets")->check(CLI::IsMember({"hard", "soft"}));
  crossval->add_option("--seeds", f.seeds, "Repeat with N consecutive seeds")->check(CLI::PositiveNumber);
  crossval->add_option("--jobs", f.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);
  crossval->add_option("--out", f.out, "Run directory")->required();
  task_flag(crossval);
  training_flags(crossval);

  auto* predict = app.add_subcommand("predict", "Write predictions from a model or ensemble");
  predict->add_option("--model", f.model, "Run directory or checkpoint");
  predict->add_option("--ensemble", f.ensemble, "crossval run directory");
  predict->add_option("--vocab", f.vocab, "Vocabulary file");
  predict->add_option("--data", f.data, "Examples, [LANG=]PATH")->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  predict->add_option("--format", f.format, "tsv or csv")->check(CLI::IsMember({"tsv", "csv"}));
  predict->add_flag("--no-probs", f.no_probs, "Omit probability columns");
  predict->add_option("--out", f.out, "Prediction file")->required();
  task_flag(predict);

  auto* evaluate = app.add_subcommand("evaluate", "Score predictions against gold labels");
  evaluate->add_option("--gold", f.gold, "Gold TSV")->required();
  evaluate->add_option("--pred", f.pred, "Prediction file")->required();
  evaluate->add_option("--format", f.report_format, "text or tsv")->check(CLI::IsMember({"text", "tsv"}));
  evaluate->add_option("--out", f.out, "Write the report here instead of stdout");
  task_flag(evaluate);

  auto* stats_cmd = app.add_subcommand("stats", "Label counts per language");
  stats_cmd->add_option("--data", f.data, "Dataset, [LANG=]PATH; repeatable")->required()->expected(1)->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  stats_cmd->add_option("--out", f.out, "Write here instead of stdout");
  task_flag(stats_cmd);

  auto* replay = app.add_subcommand("replay", "Re-run a command from its manifest");
  replay->add_option("--manifest", f.manifest, "manifest.json of an earlier run")->required();
  replay->add_option("--out", f.out, "New run directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\nRun with --help for more information.\n";
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  Context ctx{command, absolutize_args(args), {}, out, err, {}};
  try {
    if (command == "replay") {
      if (fs::absolute(f.out) == fs::absolute(fs::path(f.manifest).parent_path())) {
        throw UsageError("--out: replay must write to a new directory");
      }
      return run(replay_args(f.manifest, absolute_path(f.out)), out, err);
    }
    if (!f.config_path.empty()) {
      ctx.inputs.push_back(f.config_path);
      apply_config_text(ctx.config, read_file(f.config_path), f.config_path);
    }
    if (!f.student_config.empty()) {
      ctx.inputs.push_back(f.student_config);
      apply_config_text(ctx.config, read_file(f.student_config), f.student_config);
    }
    for (const auto& s : f.sets) apply_setting(ctx.config, s, "--set");
    auto& tc = ctx.config.training;
    if (f.epochs) tc.epochs = *f.epochs;
    if (f.batch_size) tc.batch_size = *f.batch_size;
    if (f.lr) tc.learning_rate = *f.lr;
    if (f.warmup) tc.warmup_steps = *f.warmup;
    if (f.seed) tc.seed = *f.seed;
    if (f.dropout) ctx.config.model.dropout = *f.dropout;
    try {
      tc.validate();
      ctx.config.masking.validate();
      ctx.config.model.validate();
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }

    if (command == "build-vocab") return cmd_build_vocab(ctx, f);
    if (command == "pretrain") return cmd_pretrain(ctx, f);
    if (command == "finetune") return cmd_finetune(ctx, f);
    if (command == "distill") return cmd_distill(ctx, f);
    if (command == "crossval") return cmd_crossval(ctx, f);
    if (command == "predict") return cmd_predict(ctx, f);
    if (command == "evaluate") return cmd_evaluate(ctx, f);
    if (command == "stats") return cmd_stats(ctx, f);
    throw UsageError("unknown command " + command);
  } catch (const UsageError& e) {
    err << "error: command=" << command << " kind=usage message=\"" << escape(e.what()) << "\"\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: command=" << command << " kind=io message=\"" << escape(e.what()) << "\"\n";
    return 1;
  } catch (const Error& e) {
    err << "error: command=" << command << " kind=" << e.kind() << " message=\"" << escape(e.what())
        << "\"\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: command=" << command << " kind=internal message=\"" << escape(e.what()) << "\"\n";
    return 1;
  }
}

}  // namespace offkd::cli
