#include <gtest/gtest.h>

#include <fstream>

#include "oracles.hpp"
#include "ocat/eval.hpp"

using namespace ocat;

namespace {

std::string random_string(Rng& rng, std::size_t max_len) {
  static const std::string alphabet = "abcd ef";
  std::string s;
  const auto n = uniform_index(rng, max_len + 1);
  for (std::size_t i = 0; i < n; ++i) s += alphabet[uniform_index(rng, alphabet.size())];
  return s;
}

}  // namespace

TEST(ChrF, HandCase) {
  ChrFConfig c;
  c.char_order = 2;
  EXPECT_NEAR(chrf_segment("abc", "ab", c).score, 87.5, 1e-12);
}

TEST(ChrF, IdentityAndDisjoint) {
  EXPECT_DOUBLE_EQ(chrf_segment("the cat sat", "the cat sat").score, 100.0);
  EXPECT_DOUBLE_EQ(chrf_segment("aaaa", "bbbb").score, 0.0);
}

TEST(ChrF, MatchesBruteForceOracle) {
  Rng rng = make_rng(2024);
  ChrFConfig c;
  for (int i = 0; i < 50; ++i) {
    const auto h = random_string(rng, 14), r = random_string(rng, 14);
    auto h_nows = h, r_nows = r;
    h_nows.erase(std::remove(h_nows.begin(), h_nows.end(), ' '), h_nows.end());
    r_nows.erase(std::remove(r_nows.begin(), r_nows.end(), ' '), r_nows.end());
    if (h_nows.empty() && r_nows.empty()) continue;
    EXPECT_NEAR(chrf_segment(h, r, c).score, oracle::chrf(h, r, c.char_order, c.beta), 1e-9) << h << " | " << r;
  }
}

TEST(ChrF, CorpusOfOneEqualsSegment) {
  EXPECT_DOUBLE_EQ(chrf_corpus({"a quick fox"}, {"the quick fox"}), chrf_segment("a quick fox", "the quick fox").score);
}

TEST(ChrF, DuplicationInvariant) {
  const std::vector<std::string> h{"abc d", "xyz"}, r{"abd c", "xzy"};
  EXPECT_DOUBLE_EQ(chrf_corpus(h, r), chrf_corpus({h[0], h[1], h[0], h[1]}, {r[0], r[1], r[0], r[1]}));
}

TEST(ChrF, TwoSegmentHandCounts) {
  // order 1: matched 2+1, hyp 3+2, ref 2+3; order 2: matched 1+0, hyp 2+1, ref 1+2.
  ChrFConfig c;
  c.char_order = 2;
  const double p = (3.0 / 5 + 1.0 / 3) / 2, r = (3.0 / 5 + 1.0 / 3) / 2;
  EXPECT_NEAR(chrf_corpus({"abc", "xy"}, {"ab", "xzz"}, c), 100 * 5 * p * r / (4 * p + r), 1e-12);
}

TEST(ChrF, MulticharacterCodePointsCountOnce) {
  ChrFConfig c;
  c.char_order = 1;
  EXPECT_NEAR(chrf_segment("\xC3\xA9t\xC3\xA9", "\xC3\xA9t", c).score, oracle::chrf("ete", "et", 1, 2.0), 1e-12);
}

TEST(ChrF, BetaSwapSymmetry) {
  Rng rng = make_rng(31);
  for (int i = 0; i < 50; ++i) {
    SegmentStats st, swapped;
    for (int o = 0; o < 6; ++o) {
      const auto m = static_cast<long long>(uniform_index(rng, 5));
      const OrderCounts c{m, m + static_cast<long long>(uniform_index(rng, 6)), m + static_cast<long long>(uniform_index(rng, 6))};
      st.orders.push_back(c);
      swapped.orders.push_back({c.matched, c.ref, c.hyp});
    }
    ChrFConfig a, b;
    a.beta = 0.5 + 3 * uniform01(rng);
    b.beta = 1 / a.beta;
    EXPECT_NEAR(chrf_from_stats(st, a), chrf_from_stats(swapped, b), 1e-9);
  }
}

TEST(ChrF, SymmetricAtBetaOne) {
  Rng rng = make_rng(37);
  ChrFConfig c;
  c.beta = 1.0;
  for (int i = 0; i < 30; ++i) {
    const auto h = random_string(rng, 12) + "x", r = random_string(rng, 12) + "y";
    EXPECT_NEAR(chrf_segment(h, r, c).score, chrf_segment(r, h, c).score, 1e-12);
  }
}

TEST(ChrF, ExtraMatchNeverLowersScore) {
  Rng rng = make_rng(41);
  for (int i = 0; i < 50; ++i) {
    SegmentStats st;
    for (int o = 0; o < 6; ++o) {
      const auto h = 1 + static_cast<long long>(uniform_index(rng, 8)), r = 1 + static_cast<long long>(uniform_index(rng, 8));
      st.orders.push_back({static_cast<long long>(uniform_index(rng, static_cast<std::size_t>(std::min(h, r)))), h, r});
    }
    const double before = chrf_from_stats(st, {});
    const auto o = uniform_index(rng, 6);
    st.orders[o].matched += 1;
    EXPECT_GE(chrf_from_stats(st, {}), before);
  }
}

TEST(ChrF, EmptyInputs) {
  EXPECT_DOUBLE_EQ(chrf_segment("", "").score, 100.0);
  EXPECT_DOUBLE_EQ(chrf_segment("", "abc").score, 0.0);
  EXPECT_THROW(chrf_corpus({}, {}), Error);
  EXPECT_THROW(chrf_corpus({"a"}, {}), Error);
}

TEST(Bootstrap, IdenticalSystemsGivePOne) {
  const std::vector<std::string> h{"abc", "de f", "g"}, r{"abd", "de", "gh"};
  const auto res = paired_bootstrap(h, h, r, {}, 1000, 7);
  EXPECT_EQ(res.delta, 0.0);
  EXPECT_EQ(res.p_value, 1.0);
}

TEST(Bootstrap, DominanceFixture) {
  std::vector<std::string> refs, empty(50);
  for (int i = 0; i < 50; ++i) refs.push_back("sentence number " + std::to_string(i));
  const auto res = paired_bootstrap(refs, empty, refs, {}, 1000, 7);
  EXPECT_LT(res.p_value, 0.01);
  EXPECT_DOUBLE_EQ(res.delta, 100.0);
}

TEST(Bootstrap, FixedSeedIsDeterministic) {
  const std::vector<std::string> a{"abc", "de", "fgh", "ij"}, b{"abd", "df", "fgi", "ik"}, r{"abc", "de", "fgg", "ik"};
  EXPECT_EQ(paired_bootstrap(a, b, r, {}, 500, 3).p_value, paired_bootstrap(a, b, r, {}, 500, 3).p_value);
  EXPECT_THROW(paired_bootstrap(a, b, r, {}, 10, 3), Error);
}

namespace {

// Two systems whose bootstrap p-value against each other is known.
double p_of(const SystemOutputs& a, const SystemOutputs& b, const std::vector<std::string>& refs,
            const ScoreTableOptions& o) {
  return paired_bootstrap(a.hyps.at("t"), b.hyps.at("t"), refs, o.chrf, o.n_resamples, o.seed).p_value;
}

}  // namespace

TEST(ScoreTable, BoldFollowsAlpha) {
  std::vector<std::string> refs;
  SystemOutputs a{"A", "-", {}}, b{"B", "-", {}};
  Rng rng = make_rng(11);
  for (int i = 0; i < 40; ++i) {
    refs.push_back("abcdefgh");
    a.hyps["t"].push_back(uniform01(rng) < 0.55 ? "abcdefgh" : "abcdxxxx");
    b.hyps["t"].push_back(uniform01(rng) < 0.45 ? "abcdefgh" : "abcdxxxx");
  }
  ScoreTableOptions o;
  const double p = p_of(a, b, refs, o);
  ASSERT_GT(p, 0.0);
  ASSERT_LT(p, 1.0);
  for (double alpha : {p - 1e-9, p}) {
    o.alpha = alpha;
    const auto rep = score_table({a, b}, {{"t", refs}}, o);
    const bool a_top = rep.rows[0][2].get<double>() >= rep.rows[1][2].get<double>();
    const std::size_t top = a_top ? 0 : 1;
    EXPECT_EQ(rep.bold[top][2], alpha >= p);
    EXPECT_FALSE(rep.bold[1 - top][2]);
  }
}

TEST(ScoreTable, ThresholdSemantics) {
  SystemOutputs a{"A", "-", {{"t", {}}}}, b{"B", "-", {{"t", {}}}};
  std::vector<std::string> refs;
  for (int i = 0; i < 30; ++i) {
    refs.push_back("xyzw");
    a.hyps["t"].push_back(i < 20 ? "xyzw" : "xy");
    b.hyps["t"].push_back(i < 10 ? "xyzw" : "xy");
  }
  ScoreTableOptions o;
  ASSERT_LE(p_of(a, b, refs, o), 0.04);
  o.alpha = 0.05;
  EXPECT_TRUE(score_table({a, b}, {{"t", refs}}, o).bold[0][2]);
  SystemOutputs same = a;
  same.system = "A2";
  EXPECT_FALSE(score_table({a, same}, {{"t", refs}}, o).bold[0][2]);
}

TEST(ScoreTable, GoldenFixtureReproducesStoredScores) {
  std::ifstream in(OCAT_FIXTURE_DIR "/tag_table.json");
  ASSERT_TRUE(in);
  const auto j = nlohmann::json::parse(in);
  std::vector<SystemOutputs> systems;
  for (const auto& s : j.at("systems")) {
    SystemOutputs o{s.at("system"), s.at("tag"), {}};
    for (const auto& [k, v] : s.at("hyps").items()) o.hyps[k] = v.get<std::vector<std::string>>();
    systems.push_back(std::move(o));
  }
  std::vector<std::pair<std::string, std::vector<std::string>>> sets;
  for (const auto& [k, v] : j.at("refs").items()) sets.emplace_back(k, v.get<std::vector<std::string>>());
  const auto rep = score_table(systems, sets);
  const auto& want = j.at("expected");
  ASSERT_EQ(rep.rows.size(), want.size());
  for (std::size_t i = 0; i < rep.rows.size(); ++i)
    for (std::size_t c = 2; c < rep.columns.size(); ++c) {
      EXPECT_EQ(rep.rows[i][c].get<double>(), want[i].at(rep.columns[c]).at("score").get<double>());
      EXPECT_EQ(rep.bold[i][c], want[i].at(rep.columns[c]).at("bold").get<bool>());
    }
}

TEST(Report, JsonRoundTrip) {
  Report r;
  r.name = "x";
  r.meta["seed"] = 3;
  r.columns = {"a", "b"};
  r.add_row({"s", 1.5});
  r.bold.back()[1] = true;
  const auto back = Report::from_json(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
}

TEST(Report, MetricSignatureNamesSettings) {
  const auto s = metric_signature({});
  EXPECT_NE(s.find("chrF2"), std::string::npos);
  EXPECT_NE(s.find("nc:6"), std::string::npos);
  EXPECT_NE(s.find("tok:13a"), std::string::npos);
}
