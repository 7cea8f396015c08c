#pragma once

// Synthetic data shared by the unit and acceptance tests.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "offkd/corpus.hpp"
#include "offkd/encoder.hpp"
#include "offkd/rng.hpp"
#include "offkd/tokenizer.hpp"

namespace offkd::testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(OFFKD_FIXTURE_DIR) / name;
}

// Fresh directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    const auto stamp = std::random_device{}();
    path_ = std::filesystem::temp_directory_path() /
            ("offkd-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::string> pseudo_words(std::size_t n, std::uint64_t seed, std::size_t syllables = 2) {
  static const char* cons = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  Rng rng(seed);
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += cons[rng.below(14)];
      w += vowels[rng.below(5)];
    }
    bool seen = false;
    for (const auto& o : out) seen = seen || o == w;
    if (!seen) out.push_back(w);
  }
  return out;
}

struct Lexicon {
  std::vector<std::string> neutral;
  std::vector<std::string> offensive;
};

// Posts of 5-8 neutral words; offensive posts carry one offensive word at a
// random slot. Only the subtask A hard label is set.
inline std::vector<LabeledExample> make_posts(const Lexicon& lex, std::size_t n, double off_rate,
                                              std::uint64_t seed, const std::string& language,
                                              const std::string& id_prefix) {
  Rng rng(seed);
  std::vector<LabeledExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 5 + rng.below(4);
    std::vector<std::string> words;
    for (std::size_t w = 0; w < len; ++w) words.push_back(lex.neutral[rng.below(lex.neutral.size())]);
    const bool off = rng.uniform() < off_rate;
    if (off) words[rng.below(len)] = lex.offensive[rng.below(lex.offensive.size())];
    LabeledExample ex;
    ex.id = id_prefix + std::to_string(i);
    ex.language = language;
    for (std::size_t w = 0; w < words.size(); ++w) ex.text += (w ? " " : "") + words[w];
    ex.hard[TaskId::A] = off ? 0 : 1;  // OFF is index 0
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<std::string> texts_of(const std::vector<LabeledExample>& data) {
  std::vector<std::string> out;
  for (const auto& ex : data) out.push_back(ex.text);
  return out;
}

// L=2, d=16, h=2 encoder with dropout off.
inline EncoderConfig micro_config(std::size_t vocab_size, std::size_t max_len = 32) {
  EncoderConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  c.vocab_size = vocab_size;
  c.max_len = max_len;
  c.dropout = 0.0;
  return c;
}

// Equal-length sequences of random ordinary tokens, `valid` real positions
// each ([CLS] ... [SEP]) followed by padding.
inline std::vector<TokenSequence> random_batch(std::size_t n, std::size_t len, std::size_t valid,
                                               std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out(n);
  for (auto& s : out) {
    s.ids.assign(len, Vocabulary::kPad);
    s.attention_mask.assign(len, 0);
    s.ids[0] = Vocabulary::kCls;
    for (std::size_t i = 1; i + 1 < valid; ++i) {
      s.ids[i] = static_cast<TokenId>(Vocabulary::kNumSpecial + rng.below(vocab - Vocabulary::kNumSpecial));
    }
    s.ids[valid - 1] = Vocabulary::kSep;
    for (std::size_t i = 0; i < valid; ++i) s.attention_mask[i] = 1;
  }
  return out;
}

}  // namespace offkd::testing
