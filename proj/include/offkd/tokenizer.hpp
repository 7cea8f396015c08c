#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace offkd {

using TokenId = std::int32_t;

// Byte-level BPE vocabulary shared by every language.
//
// Id layout: specials 0..4, the 256 single bytes at 5..260, then one id per
// merge in creation order. Immutable once built, so it can be shared freely.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kMask = 4;
  static constexpr TokenId kNumSpecial = 5;
  static constexpr TokenId kByteBase = kNumSpecial;
  static constexpr std::size_t kMinSize = 256 + kNumSpecial;

  using Merge = std::pair<TokenId, TokenId>;

  Vocabulary();  // bytes + specials, no merges

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<Merge>& merges() const noexcept { return merges_; }

  static bool is_special(TokenId id) noexcept { return id >= 0 && id < kNumSpecial; }
  static TokenId byte_token(unsigned char b) noexcept {
    return static_cast<TokenId>(kByteBase + b);
  }
  // Raw bytes a token stands for; specials map to their bracketed names.
  const std::string& token_bytes(TokenId id) const;
  // Rank of merging (left, right), or -1 when that pair is not a merge.
  std::int64_t merge_rank(TokenId left, TokenId right) const noexcept;
  TokenId merged_id(std::size_t rank) const noexcept {
    return static_cast<TokenId>(kMinSize + rank);
  }

  bool contains_bytes(const std::string& bytes) const { return by_bytes_.contains(bytes); }

  // Appends a merge of two existing tokens; returns the new id. The merged
  // byte string must not already be a token.
  TokenId add_merge(TokenId left, TokenId right);

  // `bpe-v1 <size>` followed by one merge per line, tokens rendered with the
  // printable byte-to-unicode alphabet and separated by a space.
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view content, const std::string& source = "<memory>");
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::size_t> ranks_;
  std::unordered_map<std::string, TokenId> by_bytes_;
};

// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go to
// the lexicographically smallest pair of byte strings) until the vocabulary
// holds `target_size` tokens or no pair remains.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size);

// Whitespace-attached chunks that merges never cross: a new chunk starts at a
// whitespace byte that follows a non-whitespace byte.
std::vector<std::string_view> split_chunks(std::string_view text);

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attention_mask;

  std::size_t length() const noexcept { return ids.size(); }
  // Number of leading positions with mask 1.
  std::size_t valid_length() const noexcept;
};

// Subword ids for `text` without specials.
std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);

// [CLS] subwords [SEP] [PAD]...; truncated so [SEP] always survives.
TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

// Drops specials; invalid UTF-8 is replaced with U+FFFD.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

}  // namespace offkd
