#include <gtest/gtest.h>

#include <filesystem>

#include "tiny_lab.hpp"

using namespace ocat;

namespace {

SyntheticTaskSpec one_corpus(NoiseKind k, double p, int size = 200) {
  SyntheticTaskSpec s;
  s.corpora = {{"c", size, k, p}};
  return s;
}

double fraction_correct(const SyntheticData& d, const std::vector<CorpusRecord>& recs) {
  int ok = 0;
  for (const auto& r : recs) ok += d.transform(r.source) == r.target;
  return static_cast<double>(ok) / static_cast<double>(recs.size());
}

}  // namespace

TEST(Synthetic, CleanCorpusAndHeldOutSetsAreCorrect) {
  const auto d = make_synthetic_corpora(one_corpus(NoiseKind::None, 0), 3);
  EXPECT_EQ(fraction_correct(d, d.corpora.at("c")), 1.0);
  EXPECT_EQ(fraction_correct(d, d.dev), 1.0);
  EXPECT_EQ(fraction_correct(d, d.test), 1.0);
  EXPECT_EQ(fraction_correct(d, d.pool), 1.0);
  EXPECT_EQ(d.dev.size(), 200u);
}

TEST(Synthetic, SubstitutionAtZeroEqualsClean) {
  const auto a = make_synthetic_corpora(one_corpus(NoiseKind::None, 0), 3);
  const auto b = make_synthetic_corpora(one_corpus(NoiseKind::Substitution, 0), 3);
  EXPECT_EQ(a.corpora.at("c"), b.corpora.at("c"));
}

TEST(Synthetic, NoiseKindsDegradeAsConfigured) {
  const auto sub = make_synthetic_corpora(one_corpus(NoiseKind::Substitution, 0.3), 3);
  const double s = fraction_correct(sub, sub.corpora.at("c"));
  EXPECT_GT(s, 0.05);
  EXPECT_LT(s, 0.6);
  const auto mis = make_synthetic_corpora(one_corpus(NoiseKind::Misaligned, 0, 1000), 3);
  EXPECT_LT(fraction_correct(mis, mis.corpora.at("c")), 0.05);
  const auto rem = make_synthetic_corpora(one_corpus(NoiseKind::Remap, 0.3), 3);
  EXPECT_LT(fraction_correct(rem, rem.corpora.at("c")), 0.9);
  EXPECT_EQ(fraction_correct(rem, rem.dev), 1.0);
}

TEST(Synthetic, SeededDeterminism) {
  const auto spec = ExperimentConfig::desk_default().task;
  const auto a = make_synthetic_corpora(spec, 9), b = make_synthetic_corpora(spec, 9),
             c = make_synthetic_corpora(spec, 10);
  EXPECT_EQ(a.corpora, b.corpora);
  EXPECT_EQ(a.dev, b.dev);
  EXPECT_NE(a.dev, c.dev);
}

TEST(Synthetic, InvalidSpecs) {
  auto s = one_corpus(NoiseKind::None, 0);
  s.corpora.push_back(s.corpora[0]);
  EXPECT_THROW(make_synthetic_corpora(s, 1), Error);
  EXPECT_THROW(make_synthetic_corpora(one_corpus(NoiseKind::Substitution, 1.5), 1), Error);
  EXPECT_THROW(noise_kind_from_string("loud"), Error);
}

TEST(Config, JsonRoundTrip) {
  const auto c = tiny::experiment();
  const auto back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(ExperimentConfig::from_json(nlohmann::json::object()).to_json(), ExperimentConfig::desk_default().to_json());
}

TEST(Checks, ThresholdsOnHandBuiltReports) {
  Report o;
  o.name = "overfit";
  o.columns = {"system", "delta", "finetune_set"};
  o.add_row({"OCAT", -1.0, 90.0});
  o.add_row({"full FT", -5.0, 95.5});
  EXPECT_TRUE(check_overfit(o).pass);
  o.rows[1][2] = 95.0;
  EXPECT_FALSE(check_overfit(o).pass);

  Report z;
  z.name = "sweep_size";
  z.columns = {"n", "heldout", "delta"};
  z.add_row({1, 90.0, -2.0});
  z.add_row({10, 91.0, -1.0});
  EXPECT_TRUE(check_size_sweep(z).pass);
  z.rows[0][2] = -2.01;
  EXPECT_FALSE(check_size_sweep(z).pass);

  Report s;
  s.name = "sweep_stability";
  s.columns = {"method", "lr", "steps", "heldout", "finetune_set", "delta"};
  s.add_row({"ocat", 1e-3, 500L, 90.0, 0.0, 0.0});
  s.add_row({"ocat", 1e-2, 500L, 92.0, 0.0, 0.0});
  s.add_row({"ocat", 1e-2, 50L, 10.0, 0.0, 0.0});
  s.add_row({"full", 1e-2, 500L, 50.0, 0.0, -5.5});
  EXPECT_TRUE(check_stability(s, 500).pass);
  EXPECT_TRUE(check_stability(s, 50).pass);
  s.rows[1][3] = 92.5;
  EXPECT_FALSE(check_stability(s, 500).pass);
  s.rows[1][3] = 92.0;
  s.rows[3][5] = -5.0;
  EXPECT_FALSE(check_stability(s, 500).pass);
  EXPECT_FALSE(check_stability(s, 200).pass);
}

class TinyLab : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { lab_ = new Lab(tiny::experiment()); }
  static void TearDownTestSuite() {
    delete lab_;
    lab_ = nullptr;
  }
  static Lab* lab_;
};

Lab* TinyLab::lab_ = nullptr;

TEST_F(TinyLab, CatReportHasEveryTagPlusTwoRows) {
  const auto rep = run_cat_experiment(*lab_);
  EXPECT_EQ(rep.rows.size(), lab_->corpus_tags().size() + 2);
  EXPECT_EQ(rep.columns, (std::vector<std::string>{"system", "tag", "dev", "test"}));
  EXPECT_EQ(rep.meta.at("best_tag"), lab_->best_tag());
  EXPECT_NO_THROW(check_tag_sensitivity(rep, lab_->config()));
  EXPECT_NO_THROW(check_ocat_improvement(rep));
}

TEST_F(TinyLab, FinetuneTableCounts) {
  const auto rep = run_finetune_table(*lab_);
  ASSERT_EQ(rep.rows.size(), 7u);
  const auto& c = lab_->config();
  const auto tc = rep.column("trainable");
  EXPECT_EQ(rep.rows[1][tc].get<long long>(), c.model.d_model);
  EXPECT_EQ(rep.rows[4][tc].get<long long>(), count_params(c.model));
  EXPECT_EQ(rep.rows[5][tc].get<long long>(), count_adapter_params(c.model, c.adapter.bottleneck_dim));
  EXPECT_EQ(rep.rows[6][tc].get<long long>(), count_lora_params(c.model, c.lora.rank));
}

TEST_F(TinyLab, OverfitReportShape) {
  const auto rep = run_overfit(*lab_);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_NO_THROW(check_overfit(rep));
}

TEST_F(TinyLab, StabilityGridShape) {
  const auto& sw = lab_->config().sweep;
  const auto rep = sweep_stability(*lab_);
  EXPECT_EQ(rep.rows.size(), sw.lrs.size() * sw.steps.size() * sw.methods.size());
  EXPECT_NO_THROW(check_stability(rep, 4));
}

TEST_F(TinyLab, SizeSweep) {
  EXPECT_TRUE(sweep_finetune_size(*lab_, {}).rows.empty());
  const auto rep = sweep_finetune_size(*lab_, {1, 3});
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0][0], 1);
  EXPECT_THROW(sweep_finetune_size(*lab_, {1000}), Error);
}

TEST(LabPersistence, ReloadedArtefactsAndReportsAreIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "ocat_lab_test";
  std::filesystem::remove_all(dir);
  nlohmann::ordered_json first;
  {
    Lab lab(tiny::experiment(), dir);
    first = rank_tags_report(lab).to_json();
    write_report(rank_tags_report(lab), dir / "reports");
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "cat.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "reports" / "rank_tags.tsv"));
  Lab again(tiny::experiment(), dir);
  EXPECT_EQ(rank_tags_report(again).to_json(), first);
  Lab fresh(tiny::experiment());
  EXPECT_EQ(rank_tags_report(fresh).to_json(), first);
  std::filesystem::remove_all(dir);
}
