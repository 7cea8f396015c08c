#include <map>
#include <set>
#include <string>

#include "doctest.h"
#include "offkd/error.hpp"
#include "offkd/tokenizer.hpp"
#include "offkd/tsv.hpp"
#include "support/synthetic.hpp"

using namespace offkd;

namespace {

// Brute-force oracle: most frequent adjacent byte pair, ties to the
// lexicographically smallest. Whitespace opens a new chunk, so a pair of
// (non-space, space) never merges.
std::pair<std::string, std::string> first_merge_oracle(const std::vector<std::string>& corpus) {
  std::map<std::pair<std::string, std::string>, int> counts;
  for (const auto& doc : corpus) {
    for (std::size_t i = 0; i + 1 < doc.size(); ++i) {
      if (doc[i] != ' ' && doc[i + 1] == ' ') continue;
      ++counts[{doc.substr(i, 1), doc.substr(i + 1, 1)}];
    }
  }
  std::pair<std::string, std::string> best;
  int best_count = 0;
  for (const auto& [pair, c] : counts) {
    if (c > best_count) {
      best = pair;
      best_count = c;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("first merge on low/low/lowest") {
  const std::vector<std::string> corpus{"low", "low", "lowest"};
  const auto vocab = build_vocab(corpus, 262);
  REQUIRE(vocab.merges().size() == 1);
  const auto [l, r] = vocab.merges()[0];
  const auto oracle = first_merge_oracle(corpus);
  CHECK(vocab.token_bytes(l) == oracle.first);
  CHECK(vocab.token_bytes(r) == oracle.second);
  CHECK(vocab.token_bytes(l) == "l");
  CHECK(vocab.token_bytes(r) == "o");
}

TEST_CASE("first merge agrees with the oracle on synthetic corpora") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    offkd::testing::Lexicon lex{offkd::testing::pseudo_words(20, seed), offkd::testing::pseudo_words(3, seed + 99, 3)};
    const auto corpus = offkd::testing::texts_of(offkd::testing::make_posts(lex, 30, 0.3, seed, "en", ""));
    const auto vocab = build_vocab(corpus, 262);
    REQUIRE(vocab.merges().size() == 1);
    const auto oracle = first_merge_oracle(corpus);
    CHECK(vocab.token_bytes(vocab.merges()[0].first) == oracle.first);
    CHECK(vocab.token_bytes(vocab.merges()[0].second) == oracle.second);
  }
}

TEST_CASE("build_vocab boundaries") {
  const std::vector<std::string> corpus{"abc abd"};
  CHECK(build_vocab(corpus, 261).merges().empty());
  CHECK(build_vocab(corpus, 261).size() == 261);
  CHECK_THROWS_AS(build_vocab(corpus, 100), InvalidArgument);
  CHECK_THROWS_AS(build_vocab({}, 300), InvalidArgument);
}

TEST_CASE("vocabulary layout") {
  Vocabulary v;
  CHECK(v.size() == 261);
  CHECK(Vocabulary::kPad == 0);
  CHECK(Vocabulary::kMask == 4);
  CHECK(v.token_bytes(Vocabulary::byte_token('a')) == "a");
  CHECK(Vocabulary::is_special(Vocabulary::kSep));
  CHECK_FALSE(Vocabulary::is_special(Vocabulary::byte_token(0)));
}

TEST_CASE("token byte strings stay unique") {
  const auto corpus = offkd::testing::texts_of(offkd::testing::make_posts(
      {offkd::testing::pseudo_words(40, 3), offkd::testing::pseudo_words(6, 4, 3)}, 300, 0.3, 5, "en", ""));
  const auto vocab = build_vocab(corpus, 700);
  std::set<std::string> seen;
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    CHECK(seen.insert(vocab.token_bytes(static_cast<TokenId>(id))).second);
  }
}

TEST_CASE("vocab file round trip and rebuild determinism") {
  const auto corpus = offkd::testing::texts_of(offkd::testing::make_posts(
      {offkd::testing::pseudo_words(40, 3), offkd::testing::pseudo_words(6, 4, 3)}, 200, 0.3, 5, "en", ""));
  const auto vocab = build_vocab(corpus, 500);
  const auto text = vocab.serialize();
  // Merges can run out before the target on a small corpus.
  CHECK(vocab.size() <= 500);
  CHECK(text.rfind("bpe-v1 " + std::to_string(vocab.size()) + "\n", 0) == 0);
  CHECK(build_vocab(corpus, 500).serialize() == text);
  const auto back = Vocabulary::deserialize(text);
  CHECK(back.serialize() == text);
  CHECK(back.size() == vocab.size());
  offkd::testing::TempDir dir("vocab");
  vocab.save(dir / "v.bpe");
  CHECK(Vocabulary::load(dir / "v.bpe").serialize() == text);
  CHECK_THROWS_AS(Vocabulary::deserialize("bpe-v2 261\n"), ParseError);
  CHECK_THROWS_AS(Vocabulary::deserialize("bpe-v1 263\nzz qq\n"), ParseError);
}

TEST_CASE("non-ASCII text survives byte-level encoding") {
  const std::vector<std::string> corpus{"ødelæggende søde ord", "çok güzel değil"};
  const auto vocab = build_vocab(corpus, 300);
  const auto back = Vocabulary::deserialize(vocab.serialize());
  CHECK(back.serialize() == vocab.serialize());
  for (const auto& s : corpus) {
    const auto seq = encode(s, vocab, 64);
    CHECK(decode(seq.ids, vocab) == s);
  }
}

TEST_CASE("encode layout") {
  const auto vocab = build_vocab(std::vector<std::string>{"hello world"}, 270);
  SUBCASE("empty text") {
    const auto seq = encode("", vocab, 8);
    CHECK(seq.ids == std::vector<TokenId>{2, 3, 0, 0, 0, 0, 0, 0});
    CHECK(seq.attention_mask == std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0, 0, 0});
    CHECK(seq.valid_length() == 2);
  }
  SUBCASE("truncation keeps SEP") {
    const std::string text(1000, 'x');
    const auto seq = encode(text, vocab, 16);
    CHECK(seq.ids.size() == 16);
    CHECK(seq.ids.front() == Vocabulary::kCls);
    CHECK(seq.ids.back() == Vocabulary::kSep);
  }
  SUBCASE("specials only at the ends") {
    const auto seq = encode("hello [CLS] world", vocab, 32);
    const auto n = seq.valid_length();
    for (std::size_t i = 1; i + 1 < n; ++i) CHECK_FALSE(Vocabulary::is_special(seq.ids[i]));
    CHECK(seq.ids[n - 1] == Vocabulary::kSep);
    for (std::size_t i = n; i < seq.ids.size(); ++i) {
      CHECK(seq.ids[i] == Vocabulary::kPad);
      CHECK(seq.attention_mask[i] == 0);
    }
  }
  CHECK_THROWS_AS(encode("x", vocab, 1), InvalidArgument);
}

TEST_CASE("merges apply in creation order") {
  const auto vocab = build_vocab(std::vector<std::string>{"hello hello hello"}, 265);
  const auto ids = tokenize("hello", vocab);
  CHECK(ids.size() < 5);
  CHECK(decode(ids, vocab) == "hello");
}

TEST_CASE("decode") {
  const auto vocab = build_vocab(std::vector<std::string>{"abc abd abe"}, 270);
  CHECK(decode(std::vector<TokenId>{Vocabulary::kCls, Vocabulary::kSep}, vocab).empty());
  CHECK(decode(encode("abc", vocab, 16).ids, vocab) == "abc");
  for (const std::string s : {"a quick test", "  spaces  around ", "Tab\tand\nnewline", "UPPER lower 123 !?"}) {
    CHECK(decode(encode(s, vocab, 64).ids, vocab) == s);
  }
  const std::vector<TokenId> bad{static_cast<TokenId>(vocab.size())};
  CHECK_THROWS_AS(decode(bad, vocab), InvalidArgument);
  const std::vector<TokenId> broken{Vocabulary::byte_token(0xC3)};
  CHECK(decode(broken, vocab) == "\xEF\xBF\xBD");
}
