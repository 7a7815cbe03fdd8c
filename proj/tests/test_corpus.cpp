#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "ocat/corpus.hpp"

using namespace ocat;

namespace {

std::vector<CorpusRecord> with_domains(const std::vector<std::pair<std::string, int>>& counts) {
  std::vector<CorpusRecord> out;
  for (const auto& [d, n] : counts)
    for (int i = 0; i < n; ++i)
      out.push_back({"s" + std::to_string(out.size()), "t", "pc", "https://www." + d + ".com/p" + std::to_string(i)});
  return out;
}

Tokenizer small_tokenizer(const std::vector<std::string>& tags) {
  return train_subword({"hello world", "bonjour le monde", "hello"}, 40, tags);
}

}  // namespace

TEST(Ingest, ParsesFieldsAndCountsMalformed) {
  std::istringstream in("hello\tbonjour\nhi\tsalut\thttp://a.com/x\nloner\n\tempty\n");
  const auto r = ingest_tsv(in, "c");
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[0], (CorpusRecord{"hello", "bonjour", "c", std::nullopt}));
  EXPECT_EQ(r.records[1].url, std::optional<std::string>("http://a.com/x"));
  EXPECT_EQ(r.malformed, 2u);
  EXPECT_EQ(r.lines, 4u);
}

TEST(Ingest, WriteThenReadRoundTrips) {
  const std::vector<CorpusRecord> recs{{"a b", "c", "x", std::nullopt}, {"d", "e f", "x", "http://q.org"}};
  std::stringstream s;
  write_tsv(s, recs);
  EXPECT_EQ(ingest_tsv(s, "x").records, recs);
}

TEST(UrlDomain, RegistrableLabel) {
  EXPECT_EQ(url_domain_label("https://www.baunat.com/en/x"), "baunat");
  EXPECT_EQ(url_domain_label("http://shop.example.co.uk/a?b"), "example");
  EXPECT_EQ(url_domain_label("HTTP://User@Host.ORG:8080/"), "host");
  EXPECT_EQ(url_domain_label("localhost"), "localhost");
  EXPECT_THROW(url_domain_label("http:///x"), Error);
}

TEST(SplitByDomain, TopKAndOther) {
  const auto out = split_by_url_domain(with_domains({{"a", 5}, {"b", 3}, {"c", 1}}), 2);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out.at("<pc-a>").size(), 5u);
  EXPECT_EQ(out.at("<pc-b>").size(), 3u);
  EXPECT_EQ(out.at("<pc-other>").size(), 1u);
  EXPECT_EQ(out.at("<pc-other>")[0].corpus_id, "pc-other");
}

TEST(SplitByDomain, TiesBreakLexicographically) {
  const auto out = split_by_url_domain(with_domains({{"b", 2}, {"a", 2}}), 1);
  EXPECT_EQ(out.at("<pc-a>").size(), 2u);
  EXPECT_EQ(out.at("<pc-other>").size(), 2u);
}

TEST(SplitByDomain, PartitionsInput) {
  const auto in = with_domains({{"a", 4}, {"b", 3}, {"c", 2}, {"d", 2}, {"e", 1}});
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const auto& [tag, recs] : split_by_url_domain(in, 2)) {
    total += recs.size();
    for (const auto& r : recs) EXPECT_TRUE(seen.insert(r.source).second);
  }
  EXPECT_EQ(total, in.size());
}

TEST(SplitByDomain, LongTailMakesOtherTheLargestBucket) {
  std::vector<std::pair<std::string, int>> counts;
  for (int i = 0; i < 400; ++i) counts.emplace_back("d" + std::to_string(i), 1 + 200 / (i + 1));
  const auto out = split_by_url_domain(with_domains(counts), 20);
  std::size_t largest = 0;
  std::string largest_tag;
  for (const auto& [tag, recs] : out)
    if (recs.size() > largest) {
      largest = recs.size();
      largest_tag = tag;
    }
  EXPECT_EQ(largest_tag, "<pc-other>");
}

TEST(SplitByDomain, Preconditions) {
  EXPECT_THROW(split_by_url_domain(with_domains({{"a", 1}}), 0), Error);
  EXPECT_THROW(split_by_url_domain({{"s", "t", "pc", std::nullopt}}, 1), Error);
}

TEST(Mixture, CapLimitsEachTag) {
  std::map<std::string, std::vector<CorpusRecord>> c;
  TagRegistry reg;
  reg.add_corpus("A", TagOrigin::NamedCorpus);
  reg.add_corpus("B", TagOrigin::NamedCorpus);
  for (int i = 0; i < 100; ++i) c["<A>"].push_back({"a" + std::to_string(i), "x", "A", std::nullopt});
  for (int i = 0; i < 5; ++i) c["<B>"].push_back({"b" + std::to_string(i), "x", "B", std::nullopt});
  const auto m = build_mixture(c, {10, 3}, reg);
  EXPECT_EQ(std::count_if(m.begin(), m.end(), [](const MixtureItem& x) { return x.tag == "<A>"; }), 10);
  EXPECT_EQ(std::count_if(m.begin(), m.end(), [](const MixtureItem& x) { return x.tag == "<B>"; }), 5);
  EXPECT_EQ(build_mixture(c, {10, 3}, reg), m);
  EXPECT_NE(build_mixture(c, {10, 4}, reg), m);
  EXPECT_EQ(mixture_manifest(c, m, {10, 3})["per_tag"]["<A>"]["selected"], 10);
}

TEST(Mixture, LargeCapIsPermutationOfUnion) {
  std::map<std::string, std::vector<CorpusRecord>> c;
  TagRegistry reg;
  reg.add_corpus("A", TagOrigin::NamedCorpus);
  reg.add_corpus("B", TagOrigin::NamedCorpus);
  std::multiset<std::string> want;
  for (int i = 0; i < 7; ++i) {
    c["<A>"].push_back({"a" + std::to_string(i), "x", "A", std::nullopt});
    c["<B>"].push_back({"b" + std::to_string(i), "x", "B", std::nullopt});
    want.insert("a" + std::to_string(i));
    want.insert("b" + std::to_string(i));
  }
  std::multiset<std::string> got;
  for (const auto& m : build_mixture(c, {1000, 1}, reg)) got.insert(m.record.source);
  EXPECT_EQ(got, want);
}

TEST(Mixture, RejectsUnregisteredTagsAndBadCap) {
  std::map<std::string, std::vector<CorpusRecord>> c{{"<Z>", {{"a", "b", "Z", std::nullopt}}}};
  EXPECT_THROW(build_mixture(c, {1, 0}, TagRegistry{}), Error);
  TagRegistry reg;
  reg.add_corpus("Z", TagOrigin::NamedCorpus);
  EXPECT_THROW(build_mixture(c, {0, 0}, reg), Error);
}

TEST(Registry, TagsAndOrigins) {
  TagRegistry r;
  r.add_corpus("OPUS-v1", TagOrigin::NamedCorpus);
  r.add_tag("<HQ>", TagOrigin::HighQuality);
  EXPECT_EQ(r.tag_for("OPUS-v1"), "<OPUS-v1>");
  EXPECT_EQ(r.origin("<HQ>"), TagOrigin::HighQuality);
  EXPECT_THROW(r.add_tag("<HQ>", TagOrigin::Synthetic), Error);
  EXPECT_THROW(r.add_tag("HQ", TagOrigin::Synthetic), Error);
  EXPECT_THROW(r.tag_for("nope"), Error);
  const auto back = TagRegistry::from_json(r.to_json());
  EXPECT_EQ(back.tags(), r.tags());
  EXPECT_EQ(back.origin("<OPUS-v1>"), TagOrigin::NamedCorpus);
}

TEST(InjectTag, TagSitsBeforeEos) {
  const auto tok = small_tokenizer({"<OPUS-v1>"});
  TagRegistry reg;
  reg.add_corpus("OPUS-v1", TagOrigin::NamedCorpus);
  const auto ex = inject_tag({"hello world", "bonjour le monde", "OPUS-v1", std::nullopt}, reg, tok);
  ASSERT_GE(ex.source_tokens.size(), 2u);
  EXPECT_EQ(ex.source_tokens[ex.source_tokens.size() - 2], tok.vocab().tag_id("<OPUS-v1>"));
  EXPECT_EQ(ex.source_tokens.back(), Vocabulary::kEos);
  EXPECT_EQ(ex.target_tokens.back(), Vocabulary::kEos);
  for (TokenId t : ex.target_tokens) EXPECT_FALSE(tok.vocab().is_tag(t));
}

TEST(InjectTag, EmptySourceIsAnError) {
  const auto tok = small_tokenizer({"<A>"});
  try {
    inject_tag({"   ", "x", "A", std::nullopt}, "<A>", tok);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "empty source");
  }
}

TEST(InjectTag, DifferentTagsDifferOnlyInTagPosition) {
  const auto tok = small_tokenizer({"<A>", "<B>"});
  const CorpusRecord r{"hello world", "le monde", "x", std::nullopt};
  const auto a = inject_tag(r, "<A>", tok), b = inject_tag(r, "<B>", tok);
  ASSERT_EQ(a.source_tokens.size(), b.source_tokens.size());
  std::vector<std::size_t> diff;
  for (std::size_t i = 0; i < a.source_tokens.size(); ++i)
    if (a.source_tokens[i] != b.source_tokens[i]) diff.push_back(i);
  EXPECT_EQ(diff, std::vector<std::size_t>{a.source_tokens.size() - 2});
  EXPECT_EQ(a.target_tokens, b.target_tokens);
}

TEST(InjectTag, UntaggedHasNoTag) {
  const auto tok = small_tokenizer({"<A>"});
  const auto ex = make_untagged({"hello", "monde", "x", std::nullopt}, tok);
  EXPECT_EQ(ex.tag_id, kNoTag);
  auto want = tok.encode("hello");
  want.push_back(Vocabulary::kEos);
  EXPECT_EQ(ex.source_tokens, want);
}
