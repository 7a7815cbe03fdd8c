#include <gtest/gtest.h>

#include <cstring>

#include "ocat/finetune.hpp"

using namespace ocat;

namespace {

const std::vector<std::string> kText{"the cat sat", "a dog ran far", "the dog sat", "a cat ran"};

struct Fixture {
  Tokenizer tok = train_subword(kText, 32, {"<A>", "<B>", kHqTag});
  ModelConfig cfg = [this] {
    ModelConfig c;
    c.d_model = 16;
    c.d_ffn = 32;
    c.n_heads = 2;
    c.head_dim = 8;
    c.vocab_size = tok.vocab().size();
    c.max_len = 32;
    return c;
  }();
  Parameters<float> params = init_params<float>(cfg);
  std::vector<CorpusRecord> data = [] {
    std::vector<CorpusRecord> d;
    for (const auto& s : kText) d.push_back({s, s, "ft", std::nullopt});
    return d;
  }();
};

bool same_row(const Mat<float>& a, const Mat<float>& b, Eigen::Index r) {
  return std::memcmp(a.row(r).eval().data(), b.row(r).eval().data(), sizeof(float) * static_cast<std::size_t>(a.cols())) == 0;
}

long long changed_coordinates(const Parameters<float>& before, const Parameters<float>& after) {
  long long n = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& a = before.at(i);
    const auto& b = after.get(before.names()[i]);
    for (Eigen::Index k = 0; k < a.size(); ++k) n += a.data()[k] != b.data()[k];
  }
  return n;
}

FinetuneOptions quick(long steps, double lr) {
  FinetuneOptions o;
  o.steps = steps;
  o.lr = lr;
  return o;
}

}  // namespace

TEST(Ocat, OnlyTargetRowChanges) {
  Fixture f;
  OcatPlan plan;
  plan.finetune_data = f.data;
  plan.options = quick(40, 1e-2);
  const auto r = ocat_finetune(f.cfg, f.params, plan, f.tok);
  EXPECT_EQ(r.trainable, f.cfg.d_model);
  const TokenId hq = f.tok.vocab().tag_id(kHqTag);
  ASSERT_EQ(r.params.names(), f.params.names());
  for (std::size_t i = 0; i < f.params.size(); ++i) {
    const auto& name = f.params.names()[i];
    for (Eigen::Index row = 0; row < f.params.at(i).rows(); ++row) {
      const bool target = name == names::kEmbed && row == hq;
      EXPECT_EQ(same_row(f.params.at(i), r.params.at(i), row), !target) << name << " row " << row;
    }
  }
}

TEST(Ocat, ZeroStepsLeavesParametersUntouched) {
  Fixture f;
  OcatPlan plan;
  plan.finetune_data = f.data;
  plan.options = quick(0, 1e-2);
  const auto r = ocat_finetune(f.cfg, f.params, plan, f.tok);
  EXPECT_EQ(changed_coordinates(f.params, r.params), 0);
  EXPECT_EQ(r.trainable, f.cfg.d_model);
}

TEST(Ocat, InitFromCopiesSourceRow) {
  Fixture f;
  OcatPlan plan;
  plan.finetune_data = f.data;
  plan.init_from = "<A>";
  plan.options = quick(1, 1e-12);
  const auto r = ocat_finetune(f.cfg, f.params, plan, f.tok);
  const auto& E0 = f.params.get(names::kEmbed);
  const auto& E1 = r.params.get(names::kEmbed);
  EXPECT_LT((E1.row(f.tok.vocab().tag_id(kHqTag)) - E0.row(f.tok.vocab().tag_id("<A>"))).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Ocat, Errors) {
  Fixture f;
  OcatPlan plan;
  plan.options = quick(1, 1e-3);
  EXPECT_THROW(ocat_finetune(f.cfg, f.params, plan, f.tok), Error);
  plan.finetune_data = f.data;
  plan.target_tag = "<Z>";
  EXPECT_THROW(ocat_finetune(f.cfg, f.params, plan, f.tok), Error);
}

TEST(Baselines, TrainableCountsAndFrozenBase) {
  Fixture f;
  const auto opt = quick(10, 1e-2);
  const auto full = full_finetune(f.cfg, f.params, f.data, f.tok, std::nullopt, opt);
  EXPECT_EQ(full.trainable, count_params(f.cfg));

  OcatPlan plan;
  plan.finetune_data = f.data;
  plan.options = opt;
  const auto ocat = ocat_finetune(f.cfg, f.params, plan, f.tok);
  EXPECT_GT(changed_coordinates(f.params, full.params), 100 * changed_coordinates(f.params, ocat.params));

  const AdapterConfig ac;
  const auto ad = adapter_finetune(f.cfg, f.params, ac, f.data, f.tok, std::nullopt, opt);
  EXPECT_EQ(ad.trainable, count_adapter_params(f.cfg, ac.bottleneck_dim));
  EXPECT_EQ(changed_coordinates(f.params, ad.params), 0);

  const LoraConfig lc;
  const auto lo = lora_finetune(f.cfg, f.params, lc, f.data, f.tok, std::nullopt, opt);
  EXPECT_EQ(lo.trainable, count_lora_params(f.cfg, lc.rank));
  EXPECT_EQ(changed_coordinates(f.params, lo.params), 0);
}

TEST(RankTags, SortedWithStableTies) {
  Fixture f;
  auto& E = f.params.get(names::kEmbed);
  E.row(f.tok.vocab().tag_id("<A>")) = E.row(f.tok.vocab().tag_id("<B>")).eval();
  DecodeConfig dc;
  dc.beam_size = 2;
  const auto ranked = rank_tags(f.cfg, f.params, f.tok, {"<B>", "<HQ>", "<A>"}, kText, kText, dc);
  ASSERT_EQ(ranked.size(), 3u);
  for (std::size_t i = 1; i < ranked.size(); ++i) EXPECT_GE(ranked[i - 1].second, ranked[i].second);
  std::size_t pos_a = 0, pos_b = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i].first == "<A>") pos_a = i;
    if (ranked[i].first == "<B>") pos_b = i;
  }
  EXPECT_EQ(ranked[pos_a].second, ranked[pos_b].second);
  EXPECT_LT(pos_b, pos_a);
}

TEST(OcatDataset, Composition) {
  const std::map<std::string, std::vector<CorpusRecord>> corpora{
      {"<A>", {{"a1", "x", "A", std::nullopt}, {"a2", "x", "A", std::nullopt}}},
      {"<B>", {{"b1", "x", "B", std::nullopt}}}};
  const std::vector<CorpusRecord> val{{"v1", "y", "dev", std::nullopt}};
  const std::vector<std::pair<std::string, double>> ranked{{"<B>", 50.0}, {"<A>", 40.0}};
  EXPECT_EQ(build_ocat_dataset(ranked, corpora, val, 0, true), val);
  const auto one = build_ocat_dataset(ranked, corpora, val, 1, true);
  ASSERT_EQ(one.size(), 2u);
  EXPECT_EQ(one[0].corpus_id, "B");
  EXPECT_EQ(one[1].corpus_id, "dev");
  EXPECT_EQ(build_ocat_dataset(ranked, corpora, val, 1, false).size(), 1u);
  EXPECT_EQ(build_ocat_dataset(ranked, corpora, val, 2, false).size(), 3u);
  EXPECT_THROW(build_ocat_dataset(ranked, corpora, val, 3, false), Error);
  EXPECT_THROW(build_ocat_dataset({{"<C>", 1.0}}, corpora, val, 1, false), Error);
}
