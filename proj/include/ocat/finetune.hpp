#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ocat/corpus.hpp"
#include "ocat/decode.hpp"
#include "ocat/eval.hpp"
#include "ocat/trainer.hpp"

namespace ocat {

inline const std::string kHqTag = "<HQ>";
inline const std::string kRandomInit = "random";

struct FinetuneOptions {
  long steps = 500;
  double lr = 1e-3;
  int max_tokens = 1024;
  std::uint64_t seed = 1;
  // Invoke the hook every ckpt_every steps (0 = never).
  int ckpt_every = 0;
};

struct OcatPlan {
  std::string target_tag = kHqTag;
  // A tag whose row seeds the target row, "random", or the target tag itself
  // (keep the current row).
  std::string init_from = kRandomInit;
  std::vector<CorpusRecord> finetune_data;
  FinetuneOptions options;
};

struct AdapterConfig {
  int bottleneck_dim = 8;
  std::uint64_t seed = 7;
};

struct LoraConfig {
  int rank = 8;
  double alpha = 8;
  std::uint64_t seed = 11;
};

template <class T>
struct FinetuneResult {
  Parameters<T> params;
  long long trainable = 0;
};

// Decodes the dev set under every corpus tag and sorts by chrF, best first.
// Equal scores keep registry order.
template <class T>
std::vector<std::pair<std::string, double>> rank_tags(const ModelConfig& cfg, const Parameters<T>& params,
                                                      const Tokenizer& tok, const std::vector<std::string>& tags,
                                                      const std::vector<std::string>& dev_sources,
                                                      const std::vector<std::string>& dev_refs, DecodeConfig dc,
                                                      const ChrFConfig& chrf = {}) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& tag : tags) {
    dc.inference_tag = tag;
    out.emplace_back(tag, chrf_corpus(decode_corpus(cfg, params, dev_sources, dc, tok), dev_refs, chrf));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

// Records of the take_top best-ranked corpora, optionally followed by the
// validation records. corpus_id provenance is preserved.
inline std::vector<CorpusRecord> build_ocat_dataset(const std::vector<std::pair<std::string, double>>& ranked,
                                                    const std::map<std::string, std::vector<CorpusRecord>>& corpora,
                                                    const std::vector<CorpusRecord>& validation, std::size_t take_top,
                                                    bool include_validation) {
  if (take_top > ranked.size()) throw Error("build_ocat_dataset: take_top exceeds the number of ranked tags");
  std::vector<CorpusRecord> out;
  for (std::size_t i = 0; i < take_top; ++i) {
    auto it = corpora.find(ranked[i].first);
    if (it == corpora.end()) throw Error("build_ocat_dataset: no records for tag " + ranked[i].first);
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  if (include_validation) out.insert(out.end(), validation.begin(), validation.end());
  return out;
}

namespace detail {

inline std::vector<TaggedExample> examples_for(const std::vector<CorpusRecord>& data, TokenId tag,
                                               const Tokenizer& tok) {
  if (data.empty()) throw Error("fine-tune data is empty");
  std::vector<TaggedExample> out;
  out.reserve(data.size());
  for (const auto& r : data) out.push_back(make_example(r.source, r.target, tag, tok));
  return out;
}

template <class T>
FinetuneResult<T> run_finetune(const ModelConfig& cfg, Parameters<T> params, std::vector<TaggedExample> data,
                               const FreezeMask& mask, const FinetuneOptions& opt, const CheckpointHook<T>& hook) {
  FinetuneResult<T> res;
  res.trainable = mask.trainable_count(params);
  if (opt.steps == 0) {
    res.params = std::move(params);
    return res;
  }
  BatchStream stream(std::move(data), opt.max_tokens, opt.seed);
  TrainConfig tc;
  tc.schedule = Schedule::fixed(opt.lr);
  tc.steps = opt.steps;
  tc.seed = opt.seed;
  tc.ckpt_every = hook ? opt.ckpt_every : 0;
  tc.keep_last = 1;
  res.params = train_loop(std::move(params), cfg, stream, tc, mask, static_cast<OptimizerState<T>*>(nullptr), hook).params;
  return res;
}

}  // namespace detail

// Trains only the embedding row of the target tag, with every fine-tune
// example re-tagged with that tag. Fresh optimizer state.
template <class T>
FinetuneResult<T> ocat_finetune(const ModelConfig& cfg, Parameters<T> params, const OcatPlan& plan,
                                const Tokenizer& tok, const std::type_identity_t<CheckpointHook<T>>& hook = {}) {
  const TokenId target = tok.vocab().tag_id(plan.target_tag);
  const FreezeMask mask = FreezeMask::row(names::kEmbed, target);
  auto data = detail::examples_for(plan.finetune_data, target, tok);
  if (plan.options.steps == 0) {
    const auto trainable = mask.trainable_count(params);
    return {std::move(params), trainable};
  }
  auto& E = params.get(names::kEmbed);
  if (plan.init_from == kRandomInit) {
    Rng rng = make_rng(plan.options.seed, 0x4e11);
    Mat<T> row(1, E.cols());
    detail::xavier_uniform(row, rng, static_cast<double>(E.rows()), static_cast<double>(E.cols()));
    E.row(target) = row.row(0);
  } else if (plan.init_from != plan.target_tag) {
    E.row(target) = E.row(tok.vocab().tag_id(plan.init_from)).eval();
  }
  return detail::run_finetune(cfg, std::move(params), std::move(data), mask, plan.options, hook);
}

// All coordinates trainable. `tag` selects the tag appended to sources
// (absent = untagged).
template <class T>
FinetuneResult<T> full_finetune(const ModelConfig& cfg, Parameters<T> params, const std::vector<CorpusRecord>& data,
                                const Tokenizer& tok, std::optional<std::string> tag, const FinetuneOptions& opt,
                                const std::type_identity_t<CheckpointHook<T>>& hook = {}) {
  auto ex = detail::examples_for(data, tag ? tok.vocab().tag_id(*tag) : kNoTag, tok);
  return detail::run_finetune(cfg, std::move(params), std::move(ex), FreezeMask::everything(), opt, hook);
}

template <class T>
FinetuneResult<T> adapter_finetune(const ModelConfig& cfg, Parameters<T> params, const AdapterConfig& ac,
                                   const std::vector<CorpusRecord>& data, const Tokenizer& tok,
                                   std::optional<std::string> tag, const FinetuneOptions& opt,
                                   const std::type_identity_t<CheckpointHook<T>>& hook = {}) {
  auto ex = detail::examples_for(data, tag ? tok.vocab().tag_id(*tag) : kNoTag, tok);
  add_adapters(params, cfg, ac.bottleneck_dim, ac.seed);
  const auto mask = FreezeMask::tensors_where(
      params.names(), [](const std::string& n) { return n.find(".adapter.") != std::string::npos; });
  return detail::run_finetune(cfg, std::move(params), std::move(ex), mask, opt, hook);
}

template <class T>
FinetuneResult<T> lora_finetune(const ModelConfig& cfg, Parameters<T> params, const LoraConfig& lc,
                                const std::vector<CorpusRecord>& data, const Tokenizer& tok,
                                std::optional<std::string> tag, const FinetuneOptions& opt,
                                const std::type_identity_t<CheckpointHook<T>>& hook = {}) {
  auto ex = detail::examples_for(data, tag ? tok.vocab().tag_id(*tag) : kNoTag, tok);
  add_lora(params, cfg, lc.rank, lc.alpha, lc.seed);
  const auto mask = FreezeMask::tensors_where(
      params.names(), [](const std::string& n) { return n.find(".lora_") != std::string::npos; });
  return detail::run_finetune(cfg, std::move(params), std::move(ex), mask, opt, hook);
}

}  // namespace ocat
