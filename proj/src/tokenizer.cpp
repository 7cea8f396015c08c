#include "offkd/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <map>

#include "offkd/error.hpp"
#include "offkd/tsv.hpp"

namespace offkd {
namespace {

constexpr std::array<std::string_view, Vocabulary::kNumSpecial> kSpecialNames{
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

std::uint64_t pair_key(TokenId a, TokenId b) noexcept {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

// GPT-2 style reversible byte -> printable code point table.
struct ByteAlphabet {
  std::array<std::uint32_t, 256> to_code{};
  std::map<std::uint32_t, unsigned char> to_byte;

  ByteAlphabet() {
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    std::uint32_t extra = 0;
    for (int b = 0; b < 256; ++b) {
      to_code[b] = direct[b] ? static_cast<std::uint32_t>(b) : 256 + extra++;
      to_byte[to_code[b]] = static_cast<unsigned char>(b);
    }
  }
};

const ByteAlphabet& alphabet() {
  static const ByteAlphabet table;
  return table;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Length of the valid UTF-8 sequence starting at s[i], or 0 if invalid.
std::size_t utf8_sequence_length(std::string_view s, std::size_t i, std::uint32_t* cp_out) {
  const auto c0 = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  std::uint32_t cp = 0;
  std::uint32_t min = 0;
  if (c0 < 0x80) {
    if (cp_out) *cp_out = c0;
    return 1;
  } else if ((c0 & 0xE0) == 0xC0) {
    len = 2, cp = c0 & 0x1F, min = 0x80;
  } else if ((c0 & 0xF0) == 0xE0) {
    len = 3, cp = c0 & 0x0F, min = 0x800;
  } else if ((c0 & 0xF8) == 0xF0) {
    len = 4, cp = c0 & 0x07, min = 0x10000;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto c = static_cast<unsigned char>(s[i + k]);
    if ((c & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (c & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  if (cp_out) *cp_out = cp;
  return len;
}

std::string render_token(const std::string& bytes) {
  std::string out;
  for (unsigned char b : bytes) append_utf8(out, alphabet().to_code[b]);
  return out;
}

std::string unrender_token(std::string_view text, const std::string& source, std::size_t line) {
  std::string bytes;
  std::size_t i = 0;
  while (i < text.size()) {
    std::uint32_t cp = 0;
    const auto len = utf8_sequence_length(text, i, &cp);
    if (len == 0) throw ParseError(source, line, "invalid UTF-8 in merge token");
    const auto it = alphabet().to_byte.find(cp);
    if (it == alphabet().to_byte.end()) {
      throw ParseError(source, line, "character outside the byte alphabet in merge token");
    }
    bytes.push_back(static_cast<char>(it->second));
    i += len;
  }
  return bytes;
}

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

// Merges every occurrence of the lowest-rank pair until no merge applies.
void apply_merges(std::vector<TokenId>& symbols, const Vocabulary& vocab) {
  while (symbols.size() > 1) {
    std::int64_t best_rank = -1;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const auto rank = vocab.merge_rank(symbols[i], symbols[i + 1]);
      if (rank >= 0 && (best_rank < 0 || rank < best_rank)) best_rank = rank;
    }
    if (best_rank < 0) break;
    const auto& [left, right] = vocab.merges()[static_cast<std::size_t>(best_rank)];
    const TokenId merged = vocab.merged_id(static_cast<std::size_t>(best_rank));
    std::size_t out = 0;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        symbols[out++] = merged;
        ++i;
      } else {
        symbols[out++] = symbols[i];
      }
    }
    symbols.resize(out);
  }
}

}  // namespace

Vocabulary::Vocabulary() {
  tokens_.reserve(kMinSize);
  for (auto name : kSpecialNames) tokens_.emplace_back(name);
  for (int b = 0; b < 256; ++b) {
    tokens_.emplace_back(1, static_cast<char>(b));
    by_bytes_.emplace(tokens_.back(), static_cast<TokenId>(tokens_.size() - 1));
  }
}

const std::string& Vocabulary::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InvalidArgument("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::int64_t Vocabulary::merge_rank(TokenId left, TokenId right) const noexcept {
  const auto it = ranks_.find(pair_key(left, right));
  return it == ranks_.end() ? -1 : static_cast<std::int64_t>(it->second);
}

TokenId Vocabulary::add_merge(TokenId left, TokenId right) {
  if (is_special(left) || is_special(right)) {
    throw InvalidArgument("special tokens cannot take part in merges");
  }
  std::string merged = token_bytes(left) + token_bytes(right);
  if (!ranks_.emplace(pair_key(left, right), merges_.size()).second) {
    throw InvalidArgument("duplicate merge");
  }
  if (by_bytes_.contains(merged)) {
    ranks_.erase(pair_key(left, right));
    throw InvalidArgument("merge spells an existing token");
  }
  merges_.emplace_back(left, right);
  tokens_.push_back(merged);
  const auto id = static_cast<TokenId>(tokens_.size() - 1);
  by_bytes_.emplace(std::move(merged), id);
  return id;
}

std::string Vocabulary::serialize() const {
  std::string out = "bpe-v1 " + std::to_string(size()) + "\n";
  for (const auto& [left, right] : merges_) {
    out += render_token(token_bytes(left));
    out += ' ';
    out += render_token(token_bytes(right));
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view content, const std::string& source) {
  const auto first_nl = content.find('\n');
  const std::string_view header = content.substr(0, first_nl);
  if (!header.starts_with("bpe-v1 ")) throw ParseError(source, 1, "expected 'bpe-v1 <size>' header");
  std::size_t declared = 0;
  try {
    declared = std::stoull(std::string(header.substr(7)));
  } catch (const std::exception&) {
    throw ParseError(source, 1, "invalid vocabulary size in header");
  }

  Vocabulary vocab;
  std::size_t line_no = 1;
  std::size_t pos = first_nl == std::string_view::npos ? content.size() : first_nl + 1;
  while (pos < content.size()) {
    auto end = content.find('\n', pos);
    if (end == std::string_view::npos) end = content.size();
    const std::string_view line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    const auto space = line.find(' ');
    if (space == std::string_view::npos || line.find(' ', space + 1) != std::string_view::npos) {
      throw ParseError(source, line_no, "merge line must hold exactly two tokens");
    }
    const auto left = unrender_token(line.substr(0, space), source, line_no);
    const auto right = unrender_token(line.substr(space + 1), source, line_no);
    const auto l = vocab.by_bytes_.find(left);
    const auto r = vocab.by_bytes_.find(right);
    if (l == vocab.by_bytes_.end() || r == vocab.by_bytes_.end()) {
      throw ParseError(source, line_no, "merge references an unknown token");
    }
    try {
      vocab.add_merge(l->second, r->second);
    } catch (const InvalidArgument& e) {
      throw ParseError(source, line_no, e.what());
    }
  }
  if (vocab.size() != declared) {
    throw ParseError(source, 1,
                     "header declares " + std::to_string(declared) + " tokens but merges give " +
                         std::to_string(vocab.size()));
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  write_file_atomic(path, serialize());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return deserialize(read_file(path), path.string());
}

std::vector<std::string_view> split_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    if (is_space(static_cast<unsigned char>(text[i])) &&
        !is_space(static_cast<unsigned char>(text[i - 1]))) {
      chunks.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) chunks.push_back(text.substr(start));
  return chunks;
}

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size) {
  if (corpus.empty()) throw InvalidArgument("cannot build a vocabulary from an empty corpus");
  if (target_size < Vocabulary::kMinSize) {
    throw InvalidArgument("vocabulary size must be at least " +
                          std::to_string(Vocabulary::kMinSize) + ", got " +
                          std::to_string(target_size));
  }

  std::map<std::string_view, std::size_t> chunk_counts;
  for (const auto& doc : corpus) {
    for (auto chunk : split_chunks(doc)) ++chunk_counts[chunk];
  }
  struct Word {
    std::vector<TokenId> symbols;
    std::size_t count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char b : chunk) w.symbols.push_back(Vocabulary::byte_token(b));
    words.push_back(std::move(w));
  }

  Vocabulary vocab;
  std::unordered_map<std::uint64_t, std::size_t> pair_counts;
  while (vocab.size() < target_size) {
    pair_counts.clear();
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        pair_counts[pair_key(w.symbols[i], w.symbols[i + 1])] += w.count;
      }
    }
    if (pair_counts.empty()) break;

    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [key, count] : pair_counts) {
      if (count < best_count) continue;
      // Token strings stay unique so the vocabulary file is unambiguous.
      if (vocab.contains_bytes(vocab.token_bytes(static_cast<TokenId>(key >> 32)) +
                               vocab.token_bytes(static_cast<TokenId>(key & 0xFFFFFFFFu)))) {
        continue;
      }
      if (count > best_count) {
        best = key;
        best_count = count;
        continue;
      }
      const auto a_left = static_cast<TokenId>(key >> 32);
      const auto a_right = static_cast<TokenId>(key & 0xFFFFFFFFu);
      const auto b_left = static_cast<TokenId>(best >> 32);
      const auto b_right = static_cast<TokenId>(best & 0xFFFFFFFFu);
      const auto& al = vocab.token_bytes(a_left);
      const auto& bl = vocab.token_bytes(b_left);
      if (al < bl || (al == bl && vocab.token_bytes(a_right) < vocab.token_bytes(b_right))) {
        best = key;
      }
    }

    if (best_count == 0) break;
    const auto left = static_cast<TokenId>(best >> 32);
    const auto right = static_cast<TokenId>(best & 0xFFFFFFFFu);
    const TokenId merged = vocab.add_merge(left, right);
    for (auto& w : words) {
      std::size_t out = 0;
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          w.symbols[out++] = merged;
          ++i;
        } else {
          w.symbols[out++] = w.symbols[i];
        }
      }
      w.symbols.resize(out);
    }
  }
  return vocab;
}

std::size_t TokenSequence::valid_length() const noexcept {
  std::size_t n = 0;
  while (n < attention_mask.size() && attention_mask[n] != 0) ++n;
  return n;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  std::vector<TokenId> symbols;
  for (auto chunk : split_chunks(text)) {
    symbols.clear();
    for (unsigned char b : chunk) symbols.push_back(Vocabulary::byte_token(b));
    apply_merges(symbols, vocab);
    ids.insert(ids.end(), symbols.begin(), symbols.end());
  }
  return ids;
}

TokenSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw InvalidArgument("max_len must be at least 2");
  auto subwords = tokenize(text, vocab);
  if (subwords.size() > max_len - 2) subwords.resize(max_len - 2);

  TokenSequence seq;
  seq.ids.assign(max_len, Vocabulary::kPad);
  seq.attention_mask.assign(max_len, 0);
  seq.ids[0] = Vocabulary::kCls;
  std::copy(subwords.begin(), subwords.end(), seq.ids.begin() + 1);
  seq.ids[subwords.size() + 1] = Vocabulary::kSep;
  std::fill_n(seq.attention_mask.begin(), subwords.size() + 2, 1);
  return seq;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string bytes;
  for (auto id : ids) {
    const auto& token = vocab.token_bytes(id);
    if (!Vocabulary::is_special(id)) bytes += token;
  }
  std::string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  while (i < bytes.size()) {
    const auto len = utf8_sequence_length(bytes, i, nullptr);
    if (len == 0) {
      out += "\xEF\xBF\xBD";
      ++i;
    } else {
      out.append(bytes, i, len);
      i += len;
    }
  }
  return out;
}

}  // namespace offkd
