#include <gtest/gtest.h>

#include <filesystem>

#include "ocat/text.hpp"
#include "ocat/tokenizer.hpp"

using namespace ocat;

namespace {

const std::vector<std::string> kCorpus{"hello world", "hello there", "the world is wide", "where is the hello"};

}  // namespace

TEST(Text, NormalizeComposesAndCollapsesWhitespace) {
  EXPECT_EQ(text::normalize("  e\xCC\x81t\xC3\xA9 \t  x  "), "\xC3\xA9t\xC3\xA9 x");
  EXPECT_EQ(text::normalize(""), "");
}

TEST(Text, CodePointsSplitMultibyte) {
  EXPECT_EQ(text::code_points("a\xC3\xA9\xE2\x96\x81"), (std::vector<std::string>{"a", "\xC3\xA9", "\xE2\x96\x81"}));
}

TEST(Bpe, MostFrequentPairMergesFirst) {
  // specials 4 + characters {marker, a, b} + 2 merges.
  const auto tok = train_subword({"aaab aaab"}, 9, {});
  ASSERT_GE(tok.model().merges.size(), 2u);
  EXPECT_EQ(tok.model().merges[0], std::make_pair(std::string("a"), std::string("a")));
  EXPECT_EQ(tok.vocab().size(), 9);
}

TEST(Bpe, ExactVocabularySize) {
  const auto tok = train_subword(kCorpus, 32, {"<A>", "<HQ>"});
  EXPECT_EQ(tok.vocab().size(), 32);
  EXPECT_EQ(tok.vocab().num_tags(), 2);
}

TEST(Bpe, ReservedTagsNeverProducedFromRawText) {
  const auto tok = train_subword({"x <HQ> y", "<HQ> <HQ>"}, 16, {"<HQ>"});
  const TokenId hq = tok.vocab().tag_id("<HQ>");
  EXPECT_TRUE(tok.vocab().is_tag(hq));
  EXPECT_EQ(hq, Vocabulary::kNumSpecials);
  for (TokenId id : tok.encode("x <HQ> y <HQ>")) EXPECT_FALSE(tok.vocab().is_reserved(id));
}

TEST(Bpe, DeterministicRetraining) {
  const auto a = train_subword(kCorpus, 32, {"<A>"});
  const auto b = train_subword(kCorpus, 32, {"<A>"});
  EXPECT_TRUE(a.vocab() == b.vocab());
  EXPECT_EQ(a.model(), b.model());
}

TEST(Bpe, TooSmallAndTooLargeAreErrors) {
  EXPECT_THROW(train_subword(kCorpus, 10, {}), Error);
  EXPECT_THROW(train_subword({"ab"}, 500, {}), Error);
  EXPECT_THROW(train_subword(kCorpus, 32, {"<A>", "<A>"}), Error);
  EXPECT_THROW(train_subword(kCorpus, 32, {"</s>"}), Error);
}

TEST(Tokenizer, EncodeDecode) {
  const auto tok = train_subword(kCorpus, 32, {});
  EXPECT_TRUE(tok.encode("").empty());
  EXPECT_EQ(tok.decode(tok.encode("hello")), "hello");
  EXPECT_EQ(tok.decode(tok.encode("  the   hello world ")), "the hello world");
}

TEST(Tokenizer, UnknownCharacterMapsToUnk) {
  const auto tok = train_subword(kCorpus, 32, {});
  const auto ids = tok.encode("hello q");
  EXPECT_NE(std::find(ids.begin(), ids.end(), Vocabulary::kUnk), ids.end());
}

TEST(Tokenizer, DecodeDropsControlTokensAndRejectsBadIds) {
  const auto tok = train_subword(kCorpus, 32, {"<A>"});
  auto ids = tok.encode("hello");
  ids.insert(ids.begin(), Vocabulary::kBos);
  ids.push_back(Vocabulary::kEos);
  EXPECT_EQ(tok.decode(ids), "hello");
  EXPECT_THROW(tok.decode({999}), Error);
}

TEST(Tokenizer, SaveLoadRoundTrip) {
  const auto tok = train_subword(kCorpus, 32, {"<A>", "<B>"});
  const auto dir = std::filesystem::temp_directory_path() / "ocat_tok_test";
  std::filesystem::create_directories(dir);
  tok.save(dir / "v.txt", dir / "v.json");
  const auto back = Tokenizer::load(dir / "v.txt", dir / "v.json");
  EXPECT_TRUE(back.vocab() == tok.vocab());
  EXPECT_EQ(back.model(), tok.model());
  EXPECT_EQ(back.encode("where is the world"), tok.encode("where is the world"));
  std::filesystem::remove_all(dir);
}

TEST(Vocabulary, UnknownTagIsAnError) {
  const auto tok = train_subword(kCorpus, 32, {"<A>"});
  EXPECT_THROW(tok.vocab().tag_id("<B>"), Error);
  EXPECT_FALSE(tok.vocab().has_tag("</s>"));
}
