#pragma once

#include <chrono>
#include <numeric>
#include <sstream>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ocat/corpus.hpp"
#include "ocat/decode.hpp"
#include "ocat/eval.hpp"
#include "ocat/finetune.hpp"
#include "ocat/tokenizer.hpp"
#include "ocat/trainer.hpp"

namespace ocat {

// ---------------------------------------------------------------- synthetic

enum class NoiseKind { None, Substitution, Misaligned, Remap };

inline std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::None: return "none";
    case NoiseKind::Substitution: return "substitution";
    case NoiseKind::Misaligned: return "misaligned";
    case NoiseKind::Remap: return "remap";
  }
  return "?";
}

inline NoiseKind noise_kind_from_string(const std::string& s) {
  for (auto k : {NoiseKind::None, NoiseKind::Substitution, NoiseKind::Misaligned, NoiseKind::Remap})
    if (to_string(k) == s) return k;
  throw Error("unknown noise kind: " + s);
}

struct SyntheticCorpusSpec {
  std::string name;
  int size = 1000;
  NoiseKind noise = NoiseKind::None;
  // substitution: per-word probability; remap: fraction of the lexicon
  // translated through an alternative mapping.
  double noise_param = 0;
};

// Word-level "translation": every source word maps through a fixed bijection
// onto the target lexicon and the sentence is reversed.
struct SyntheticTaskSpec {
  int vocab_size = 100;  // words per side
  int min_words = 3;
  int max_words = 8;
  int min_word_len = 3;
  int max_word_len = 6;
  std::vector<SyntheticCorpusSpec> corpora;
  int dev_size = 200;
  int test_size = 200;
  // Extra clean pairs available to fine-tune-size sweeps.
  int pool_size = 400;

  void validate() const {
    if (vocab_size < 2) throw Error("synthetic: vocab_size must be >= 2");
    if (min_words < 1 || max_words < min_words) throw Error("synthetic: bad sentence length range");
    if (min_word_len < 1 || max_word_len < min_word_len) throw Error("synthetic: bad word length range");
    std::set<std::string> seen;
    for (const auto& c : corpora) {
      if (c.size < 1) throw Error("synthetic: corpus size must be >= 1");
      if (!seen.insert(c.name).second) throw Error("synthetic: duplicate corpus " + c.name);
      if (c.noise_param < 0 || c.noise_param > 1) throw Error("synthetic: noise_param must be in [0,1]");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : corpora)
      cs.push_back({{"name", c.name}, {"size", c.size}, {"noise", to_string(c.noise)}, {"noise_param", c.noise_param}});
    return {{"vocab_size", vocab_size}, {"min_words", min_words},       {"max_words", max_words},
            {"min_word_len", min_word_len}, {"max_word_len", max_word_len}, {"corpora", cs},
            {"dev_size", dev_size},     {"test_size", test_size},       {"pool_size", pool_size}};
  }

  static SyntheticTaskSpec from_json(const nlohmann::json& j) {
    SyntheticTaskSpec s;
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.min_words = j.value("min_words", s.min_words);
    s.max_words = j.value("max_words", s.max_words);
    s.min_word_len = j.value("min_word_len", s.min_word_len);
    s.max_word_len = j.value("max_word_len", s.max_word_len);
    s.dev_size = j.value("dev_size", s.dev_size);
    s.test_size = j.value("test_size", s.test_size);
    s.pool_size = j.value("pool_size", s.pool_size);
    if (j.contains("corpora"))
      for (const auto& c : j.at("corpora"))
        s.corpora.push_back({c.at("name").get<std::string>(), c.at("size").get<int>(),
                             noise_kind_from_string(c.value("noise", std::string("none"))), c.value("noise_param", 0.0)});
    s.validate();
    return s;
  }
};

struct SyntheticData {
  std::vector<std::string> source_words, target_words;
  std::map<std::string, std::vector<CorpusRecord>> corpora;  // by corpus name
  std::vector<CorpusRecord> dev, test, pool;                 // clean

  // Correct translation of a source sentence.
  std::string transform(const std::string& source) const {
    std::map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < source_words.size(); ++i) idx.emplace(source_words[i], i);
    auto words = text::split_whitespace(source);
    std::string out;
    for (auto it = words.rbegin(); it != words.rend(); ++it) {
      auto f = idx.find(*it);
      if (f == idx.end()) throw Error("synthetic: word outside the lexicon: " + *it);
      out += (out.empty() ? "" : " ") + target_words[f->second];
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::string> make_lexicon(int n, char first, char last, int min_len, int max_len, Rng& rng) {
  std::set<std::string> seen;
  std::vector<std::string> out;
  const auto letters = static_cast<std::size_t>(last - first + 1);
  int attempts = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > 1000 * n) throw Error("synthetic: cannot draw enough distinct words");
    const int len = min_len + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(max_len - min_len + 1)));
    std::string w;
    for (int i = 0; i < len; ++i) w += static_cast<char>(first + static_cast<char>(uniform_index(rng, letters)));
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

}  // namespace detail

inline SyntheticData make_synthetic_corpora(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticData d;
  Rng lex = make_rng(seed, 0x1e7);
  d.source_words = detail::make_lexicon(spec.vocab_size, 'a', 'm', spec.min_word_len, spec.max_word_len, lex);
  d.target_words = detail::make_lexicon(spec.vocab_size, 'n', 'z', spec.min_word_len, spec.max_word_len, lex);
  const auto V = static_cast<std::size_t>(spec.vocab_size);

  // Draws word indices for one sentence.
  auto sentence = [&](Rng& rng) {
    const auto n = static_cast<std::size_t>(spec.min_words) +
                   uniform_index(rng, static_cast<std::size_t>(spec.max_words - spec.min_words + 1));
    std::vector<std::size_t> w(n);
    for (auto& x : w) x = uniform_index(rng, V);
    return w;
  };
  auto join = [](const std::vector<std::string>& lex_words, const std::vector<std::size_t>& w, bool reverse) {
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const auto k = reverse ? w[w.size() - 1 - i] : w[i];
      s += (i ? " " : "") + lex_words[k];
    }
    return s;
  };
  auto clean_set = [&](const std::string& id, int n, std::uint64_t stream) {
    Rng rng = make_rng(seed, stream);
    std::vector<CorpusRecord> out;
    for (int i = 0; i < n; ++i) {
      const auto w = sentence(rng);
      out.push_back({join(d.source_words, w, false), join(d.target_words, w, true), id, std::nullopt});
    }
    return out;
  };

  for (const auto& c : spec.corpora) {
    Rng rng = make_rng(seed, fnv1a64(c.name));
    std::vector<std::size_t> mapping(V);
    for (std::size_t i = 0; i < V; ++i) mapping[i] = i;
    if (c.noise == NoiseKind::Remap) {
      // A fixed subset of words is rendered through a rotation of the subset.
      std::vector<std::size_t> order = mapping;
      shuffle(order, rng);
      const auto k = static_cast<std::size_t>(std::llround(c.noise_param * static_cast<double>(V)));
      for (std::size_t i = 0; k > 1 && i < k; ++i) mapping[order[i]] = order[(i + 1) % k];
    }
    std::vector<CorpusRecord> recs;
    for (int i = 0; i < c.size; ++i) {
      const auto w = sentence(rng);
      std::vector<std::size_t> t(w.rbegin(), w.rend());
      for (auto& x : t) x = mapping[x];
      if (c.noise == NoiseKind::Substitution && c.noise_param > 0)
        for (auto& x : t)
          if (uniform01(rng) < c.noise_param) x = uniform_index(rng, V);
      recs.push_back({join(d.source_words, w, false), join(d.target_words, t, false), c.name, std::nullopt});
    }
    if (c.noise == NoiseKind::Misaligned) {
      std::vector<std::string> targets;
      for (const auto& r : recs) targets.push_back(r.target);
      shuffle(targets, rng);
      for (std::size_t i = 0; i < recs.size(); ++i) recs[i].target = targets[i];
    }
    d.corpora[c.name] = std::move(recs);
  }
  d.dev = clean_set("dev", spec.dev_size, 0xde5);
  d.test = clean_set("test", spec.test_size, 0x7e57);
  d.pool = clean_set("pool", spec.pool_size, 0x9001);
  return d;
}

// --------------------------------------------------------------- experiment

struct PretrainSpec {
  long steps = 3000;
  double lr_max = 2e-3;
  int warmup = 400;
  int max_tokens = 1024;
  int ckpt_every = 100;
  int average_last = 5;
};

// Warmup plus inverse-sqrt decay; returns the mean of the last
// average_last checkpoints (or the final state when checkpointing is off).
inline Parameters<float> pretrain(const ModelConfig& model, const PretrainSpec& ps, std::vector<TaggedExample> data,
                                  std::uint64_t seed, const std::filesystem::path& ckpt_dir = {},
                                  bool verbose = false) {
  BatchStream stream(std::move(data), ps.max_tokens, seed);
  TrainConfig tc;
  tc.schedule = {ps.lr_max, ps.warmup, false};
  tc.steps = ps.steps;
  tc.seed = seed;
  tc.ckpt_every = ps.ckpt_every;
  tc.keep_last = ps.average_last;
  tc.log_every = 500;
  tc.verbose = verbose;
  if (!ckpt_dir.empty()) tc.ckpt_dir = ckpt_dir.string();
  auto res = train_loop(init_params<float>(model), model, stream, tc);
  return res.checkpoints.empty() ? std::move(res.params) : average_checkpoints(res.checkpoints);
}

struct SweepSpec {
  std::vector<double> lrs{1e-4, 1e-3, 1e-2, 1e-1};
  std::vector<long> steps{50, 200, 500, 1000};
  std::vector<std::string> methods{"ocat", "full", "adapter", "lora"};
  // Fine-tune set size drawn from the dev set (0 = whole dev set).
  int finetune_pairs = 0;
  int eval_size = 200;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  SyntheticTaskSpec task;
  ModelConfig model = ModelConfig::desk_preset();
  long long per_tag_cap = 1000000;
  PretrainSpec pretrain;
  DecodeConfig decode;
  ChrFConfig chrf;
  int bootstrap_resamples = 1000;
  std::uint64_t bootstrap_seed = 12345;
  FinetuneOptions ocat{500, 1e-3, 1024, 1, 0};
  FinetuneOptions baseline{500, 1e-3, 1024, 1, 0};
  double full_ft_lr = 1e-3;
  AdapterConfig adapter;
  LoraConfig lora;
  int overfit_pairs = 16;
  long overfit_steps = 1000;
  SweepSpec sweep;
  std::vector<int> sizes{1, 10, 100, 400};

  static ExperimentConfig desk_default() {
    ExperimentConfig c;
    c.task.corpora = {{"clean", 2000, NoiseKind::None, 0},
                      {"noisy", 2000, NoiseKind::Substitution, 0.3},
                      {"misaligned", 2000, NoiseKind::Misaligned, 0},
                      {"remap", 4000, NoiseKind::Remap, 0.3}};
    return c;
  }

  nlohmann::json to_json() const {
    auto opts = [](const FinetuneOptions& o) {
      return nlohmann::json{{"steps", o.steps}, {"lr", o.lr}, {"max_tokens", o.max_tokens}, {"seed", o.seed}};
    };
    return {{"seed", seed},
            {"task", task.to_json()},
            {"model", model.to_json()},
            {"per_tag_cap", per_tag_cap},
            {"pretrain",
             {{"steps", pretrain.steps},
              {"lr_max", pretrain.lr_max},
              {"warmup", pretrain.warmup},
              {"max_tokens", pretrain.max_tokens},
              {"ckpt_every", pretrain.ckpt_every},
              {"average_last", pretrain.average_last}}},
            {"decode",
             {{"beam", decode.beam_size},
              {"length_penalty", decode.length_penalty},
              {"max_len_ratio", decode.max_len_ratio},
              {"batch_sentences", decode.batch_sentences}}},
            {"chrf", {{"char_order", chrf.char_order}, {"word_order", chrf.word_order}, {"beta", chrf.beta}}},
            {"bootstrap", {{"resamples", bootstrap_resamples}, {"seed", bootstrap_seed}}},
            {"ocat", opts(ocat)},
            {"baseline", opts(baseline)},
            {"full_ft_lr", full_ft_lr},
            {"adapter", {{"bottleneck_dim", adapter.bottleneck_dim}, {"seed", adapter.seed}}},
            {"lora", {{"rank", lora.rank}, {"alpha", lora.alpha}, {"seed", lora.seed}}},
            {"overfit", {{"pairs", overfit_pairs}, {"steps", overfit_steps}}},
            {"sweep",
             {{"lrs", sweep.lrs},
              {"steps", sweep.steps},
              {"methods", sweep.methods},
              {"finetune_pairs", sweep.finetune_pairs},
              {"eval_size", sweep.eval_size}}},
            {"sizes", sizes}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c = desk_default();
    c.seed = j.value("seed", c.seed);
    if (j.contains("task")) c.task = SyntheticTaskSpec::from_json(j.at("task"));
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    c.per_tag_cap = j.value("per_tag_cap", c.per_tag_cap);
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      c.pretrain.steps = p.value("steps", c.pretrain.steps);
      c.pretrain.lr_max = p.value("lr_max", c.pretrain.lr_max);
      c.pretrain.warmup = p.value("warmup", c.pretrain.warmup);
      c.pretrain.max_tokens = p.value("max_tokens", c.pretrain.max_tokens);
      c.pretrain.ckpt_every = p.value("ckpt_every", c.pretrain.ckpt_every);
      c.pretrain.average_last = p.value("average_last", c.pretrain.average_last);
    }
    if (j.contains("decode")) {
      const auto& d = j.at("decode");
      c.decode.beam_size = d.value("beam", c.decode.beam_size);
      c.decode.length_penalty = d.value("length_penalty", c.decode.length_penalty);
      c.decode.max_len_ratio = d.value("max_len_ratio", c.decode.max_len_ratio);
      c.decode.batch_sentences = d.value("batch_sentences", c.decode.batch_sentences);
    }
    if (j.contains("chrf")) {
      const auto& m = j.at("chrf");
      c.chrf.char_order = m.value("char_order", c.chrf.char_order);
      c.chrf.word_order = m.value("word_order", c.chrf.word_order);
      c.chrf.beta = m.value("beta", c.chrf.beta);
    }
    if (j.contains("bootstrap")) {
      c.bootstrap_resamples = j.at("bootstrap").value("resamples", c.bootstrap_resamples);
      c.bootstrap_seed = j.at("bootstrap").value("seed", c.bootstrap_seed);
    }
    auto opts = [&](const char* key, FinetuneOptions& o) {
      if (!j.contains(key)) return;
      const auto& x = j.at(key);
      o.steps = x.value("steps", o.steps);
      o.lr = x.value("lr", o.lr);
      o.max_tokens = x.value("max_tokens", o.max_tokens);
      o.seed = x.value("seed", o.seed);
    };
    opts("ocat", c.ocat);
    opts("baseline", c.baseline);
    c.full_ft_lr = j.value("full_ft_lr", c.full_ft_lr);
    if (j.contains("adapter")) {
      c.adapter.bottleneck_dim = j.at("adapter").value("bottleneck_dim", c.adapter.bottleneck_dim);
      c.adapter.seed = j.at("adapter").value("seed", c.adapter.seed);
    }
    if (j.contains("lora")) {
      c.lora.rank = j.at("lora").value("rank", c.lora.rank);
      c.lora.alpha = j.at("lora").value("alpha", c.lora.alpha);
      c.lora.seed = j.at("lora").value("seed", c.lora.seed);
    }
    if (j.contains("overfit")) {
      c.overfit_pairs = j.at("overfit").value("pairs", c.overfit_pairs);
      c.overfit_steps = j.at("overfit").value("steps", c.overfit_steps);
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      c.sweep.lrs = s.value("lrs", c.sweep.lrs);
      c.sweep.steps = s.value("steps", c.sweep.steps);
      c.sweep.methods = s.value("methods", c.sweep.methods);
      c.sweep.finetune_pairs = s.value("finetune_pairs", c.sweep.finetune_pairs);
      c.sweep.eval_size = s.value("eval_size", c.sweep.eval_size);
    }
    c.sizes = j.value("sizes", c.sizes);
    return c;
  }

  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }
};

// Lazily builds and caches every artefact of one experiment: corpora,
// tokenizer, CAT and untagged pretrained models. With a work directory the
// artefacts are persisted and reloaded when the config hash matches.
class Lab {
 public:
  using P = Parameters<float>;

  explicit Lab(ExperimentConfig cfg, std::filesystem::path workdir = {}, bool verbose = false)
      : cfg_(std::move(cfg)), dir_(std::move(workdir)), verbose_(verbose) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& workdir() const { return dir_; }

  const SyntheticData& data() {
    if (!data_) {
      data_ = make_synthetic_corpora(cfg_.task, cfg_.seed);
      if (!dir_.empty()) {
        for (const auto& [name, recs] : data_->corpora) write_tsv(dir_ / (name + ".tsv"), recs);
        write_tsv(dir_ / "dev.tsv", data_->dev);
        write_tsv(dir_ / "test.tsv", data_->test);
        write_tsv(dir_ / "pool.tsv", data_->pool);
      }
    }
    return *data_;
  }

  const TagRegistry& registry() {
    if (!registry_) {
      TagRegistry r;
      for (const auto& c : cfg_.task.corpora) r.add_corpus(c.name, TagOrigin::Synthetic);
      r.add_tag(kHqTag, TagOrigin::HighQuality);
      registry_ = std::move(r);
    }
    return *registry_;
  }

  // Tags of the pretraining corpora, in registry order.
  std::vector<std::string> corpus_tags() {
    std::vector<std::string> out;
    for (const auto& t : registry().tags())
      if (registry().origin(t) != TagOrigin::HighQuality) out.push_back(t);
    return out;
  }

  const std::vector<MixtureItem>& mixture() {
    if (!mixture_) {
      const auto by_tag = corpora_by_tag();
      MixtureSpec ms{cfg_.per_tag_cap, cfg_.seed};
      mixture_ = build_mixture(by_tag, ms, registry());
      if (!dir_.empty()) std::ofstream(dir_ / "mixture.json") << mixture_manifest(by_tag, *mixture_, ms).dump(2) << '\n';
    }
    return *mixture_;
  }

  const Tokenizer& tokenizer() {
    if (!tok_) {
      const auto vf = dir_ / "vocab.txt", sf = dir_ / "vocab.json";
      if (!dir_.empty() && std::filesystem::exists(vf) && std::filesystem::exists(sf) && stamp_ok("tokenizer")) {
        tok_ = Tokenizer::load(vf, sf);
      } else {
        std::vector<std::string> text;
        for (const auto& m : mixture()) {
          text.push_back(m.record.source);
          text.push_back(m.record.target);
        }
        tok_ = train_subword(text, cfg_.model.vocab_size, registry().tags());
        if (!dir_.empty()) {
          tok_->save(vf, sf);
          write_stamp("tokenizer");
        }
      }
    }
    return *tok_;
  }

  const P& cat_model() { return pretrained(true); }
  const P& base_model() { return pretrained(false); }

  std::vector<std::string> translate(const P& params, const std::vector<std::string>& sources,
                                     std::optional<std::string> tag, std::optional<int> beam = std::nullopt) {
    DecodeConfig dc = cfg_.decode;
    dc.inference_tag = std::move(tag);
    if (beam) dc.beam_size = *beam;
    return decode_corpus(cfg_.model, params, sources, dc, tokenizer());
  }

  double score(const P& params, const std::vector<CorpusRecord>& set, std::optional<std::string> tag,
               std::optional<int> beam = std::nullopt) {
    std::vector<std::string> src, ref;
    for (const auto& r : set) {
      src.push_back(r.source);
      ref.push_back(r.target);
    }
    return chrf_corpus(translate(params, src, std::move(tag), beam), ref, cfg_.chrf);
  }

  // Dev-set ranking of the pretraining corpus tags under the CAT model.
  const std::vector<std::pair<std::string, double>>& ranking() {
    if (!ranking_) {
      std::vector<std::string> src, ref;
      for (const auto& r : data().dev) {
        src.push_back(r.source);
        ref.push_back(r.target);
      }
      ranking_ = rank_tags(cfg_.model, cat_model(), tokenizer(), corpus_tags(), src, ref, cfg_.decode, cfg_.chrf);
    }
    return *ranking_;
  }

  const std::string& best_tag() { return ranking().front().first; }

  FinetuneResult<float> run_ocat(const std::vector<CorpusRecord>& data, const FinetuneOptions& opt,
                                 const CheckpointHook<float>& hook = {}) {
    OcatPlan plan;
    plan.target_tag = kHqTag;
    plan.init_from = best_tag();
    plan.finetune_data = data;
    plan.options = opt;
    return ocat_finetune(cfg_.model, cat_model(), plan, tokenizer(), hook);
  }

  // CAT model after OCAT on the dev set with the configured options.
  const P& ocat_model() {
    if (!ocat_) ocat_ = run_ocat(data().dev, cfg_.ocat).params;
    return *ocat_;
  }

  // Pretraining corpora keyed by tag.
  std::map<std::string, std::vector<CorpusRecord>> corpora_by_tag() {
    std::map<std::string, std::vector<CorpusRecord>> out;
    for (const auto& [name, recs] : data().corpora) out[registry().tag_for(name)] = recs;
    return out;
  }

  nlohmann::ordered_json meta() {
    nlohmann::ordered_json m;
    m["config_hash"] = hex64(cfg_.hash());
    m["model_hash"] = hex64(cfg_.model.hash());
    m["seed"] = cfg_.seed;
    m["model_seed"] = cfg_.model.seed;
    m["bootstrap_seed"] = cfg_.bootstrap_seed;
    m["metric"] = metric_signature(cfg_.chrf);
    return m;
  }

  void log(const std::string& msg) const {
    if (verbose_) std::cerr << "[lab] " << msg << std::endl;
  }

 private:
  std::string stamp_value(const std::string& what) const {
    const nlohmann::json j = cfg_.to_json();
    nlohmann::json key{j["seed"], j["task"], j["model"]["vocab_size"], j["per_tag_cap"]};
    if (what != "tokenizer") key = {j["seed"], j["task"], j["model"], j["per_tag_cap"], j["pretrain"]};
    return hex64(fnv1a64(key.dump()));
  }
  bool stamp_ok(const std::string& what) const {
    std::ifstream in(dir_ / (what + ".stamp"));
    std::string s;
    return in && std::getline(in, s) && s == stamp_value(what);
  }
  void write_stamp(const std::string& what) const { std::ofstream(dir_ / (what + ".stamp")) << stamp_value(what) << '\n'; }

  const P& pretrained(bool tagged) {
    auto& slot = tagged ? cat_ : base_;
    if (slot) return *slot;
    const std::string name = tagged ? "cat" : "base";
    const auto file = dir_ / (name + ".bin");
    if (!dir_.empty() && std::filesystem::exists(file) && stamp_ok(name) && stamp_ok("tokenizer")) {
      slot = load_checkpoint<float>(file).params;
      return *slot;
    }
    const auto& tok = tokenizer();
    std::vector<TaggedExample> ex;
    for (const auto& m : mixture())
      ex.push_back(tagged ? inject_tag(m.record, m.tag, tok) : make_untagged(m.record, tok));
    const auto t0 = std::chrono::steady_clock::now();
    slot = pretrain(cfg_.model, cfg_.pretrain, std::move(ex), cfg_.seed,
                    dir_.empty() ? std::filesystem::path() : dir_ / (name + "_ckpt"), verbose_);
    log(name + " pretrain " + std::to_string(cfg_.pretrain.steps) + " steps in " +
        std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + "s");
    if (!dir_.empty()) {
      save_checkpoint(file, Checkpoint<float>{cfg_.model, *slot, cfg_.pretrain.steps, cfg_.model.hash()});
      write_stamp(name);
    }
    return *slot;
  }

  ExperimentConfig cfg_;
  std::filesystem::path dir_;
  bool verbose_;
  std::optional<SyntheticData> data_;
  std::optional<TagRegistry> registry_;
  std::optional<std::vector<MixtureItem>> mixture_;
  std::optional<Tokenizer> tok_;
  std::optional<P> cat_, base_, ocat_;
  std::optional<std::vector<std::pair<std::string, double>>> ranking_;
};

// ------------------------------------------------------------------ reports

inline std::vector<std::string> sources_of(const std::vector<CorpusRecord>& recs) {
  std::vector<std::string> out;
  for (const auto& r : recs) out.push_back(r.source);
  return out;
}

inline std::vector<std::string> targets_of(const std::vector<CorpusRecord>& recs) {
  std::vector<std::string> out;
  for (const auto& r : recs) out.push_back(r.target);
  return out;
}

namespace detail {

inline void stamp(Report& rep, Lab& lab) {
  const auto meta = lab.meta();
  for (const auto& [k, v] : meta.items()) rep.meta[k] = v;
}

inline std::vector<CorpusRecord> head(const std::vector<CorpusRecord>& v, std::size_t n) {
  if (n == 0 || n >= v.size()) return v;
  return {v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n)};
}

}  // namespace detail

// Dev chrF of every corpus tag, best first.
inline Report rank_tags_report(Lab& lab) {
  Report rep;
  rep.name = "rank_tags";
  detail::stamp(rep, lab);
  rep.columns = {"rank", "tag", "dev"};
  int i = 0;
  for (const auto& [tag, score] : lab.ranking()) rep.add_row({++i, tag, score});
  return rep;
}

// One row per inference tag of the CAT model, plus the untagged baseline and
// CAT+OCAT (dev-only fine-tune into <HQ>).
inline Report run_cat_experiment(Lab& lab) {
  const auto& cfg = lab.config();
  const auto& d = lab.data();
  auto outputs = [&](const std::string& sys, const std::string& label, const Parameters<float>& p,
                     std::optional<std::string> tag) {
    SystemOutputs s{sys, label, {}};
    s.hyps["dev"] = lab.translate(p, sources_of(d.dev), tag);
    s.hyps["test"] = lab.translate(p, sources_of(d.test), tag);
    return s;
  };
  std::vector<SystemOutputs> systems;
  systems.push_back(outputs("no-CAT", "-", lab.base_model(), std::nullopt));
  for (const auto& t : lab.corpus_tags()) systems.push_back(outputs("CAT", t, lab.cat_model(), t));
  systems.push_back(outputs("CAT+OCAT", kHqTag, lab.ocat_model(), kHqTag));
  const ScoreTableOptions opt{cfg.chrf, cfg.bootstrap_resamples, cfg.bootstrap_seed, 0.05};
  Report rep = score_table(systems, {{"dev", targets_of(d.dev)}, {"test", targets_of(d.test)}}, opt);
  rep.name = "cat_experiment";
  detail::stamp(rep, lab);
  rep.meta["best_tag"] = lab.best_tag();
  rep.meta["ocat"] = {{"data", "dev"}, {"init_from", lab.best_tag()}, {"steps", cfg.ocat.steps}, {"lr", cfg.ocat.lr}};
  return rep;
}

// Trainable-parameter and score comparison of OCAT against full, adapter and
// LoRA fine-tuning of the untagged model, all tuned on the dev set.
inline Report run_finetune_table(Lab& lab) {
  const auto& cfg = lab.config();
  const auto& d = lab.data();
  const auto big = ModelConfig::preset_69m(48000);
  Report rep;
  rep.name = "finetune_table";
  detail::stamp(rep, lab);
  rep.meta["preset_69m_adapter_dim"] = 8;
  rep.meta["preset_69m_lora_rank"] = 32;
  rep.columns = {"system", "trainable", "trainable_preset_69m", "finetune_data", "dev", "test"};
  const std::string best = lab.best_tag();
  auto row = [&](const std::string& sys, long long trainable, long long big_count, const std::string& data,
                 const Parameters<float>& p, std::optional<std::string> tag) {
    rep.add_row({sys, trainable, big_count, data, lab.score(p, d.dev, tag), lab.score(p, d.test, tag)});
  };
  const long long full_desk = lab.cat_model().count();
  row("CAT " + best, 0, 0, "-", lab.cat_model(), best);
  row("+ OCAT", cfg.model.d_model, big.d_model, "dev", lab.ocat_model(), kHqTag);
  {
    const auto data = build_ocat_dataset(lab.ranking(), lab.corpora_by_tag(), d.dev, 1, true);
    const auto r = lab.run_ocat(data, cfg.ocat);
    row("+ OCAT", r.trainable, big.d_model, best + " + dev", r.params, kHqTag);
  }
  row("no-CAT", 0, 0, "-", lab.base_model(), std::nullopt);
  FinetuneOptions full_opt = cfg.baseline;
  full_opt.lr = cfg.full_ft_lr;
  {
    const auto r = full_finetune(cfg.model, lab.base_model(), d.dev, lab.tokenizer(), std::nullopt, full_opt);
    row("+ full FT", r.trainable, count_params(big), "dev", r.params, std::nullopt);
  }
  {
    const auto r = adapter_finetune(cfg.model, lab.base_model(), cfg.adapter, d.dev, lab.tokenizer(), std::nullopt,
                                    cfg.baseline);
    row("+ adapter", r.trainable, count_adapter_params(big, 8), "dev", r.params, std::nullopt);
  }
  {
    const auto r =
        lora_finetune(cfg.model, lab.base_model(), cfg.lora, d.dev, lab.tokenizer(), std::nullopt, cfg.baseline);
    row("+ LoRA", r.trainable, count_lora_params(big, 32), "dev", r.params, std::nullopt);
  }
  rep.meta["full_model_params"] = full_desk;
  return rep;
}

// OCAT versus full fine-tuning on a tiny tuning set: held-out change and
// tuning-set fit.
inline Report run_overfit(Lab& lab) {
  const auto& cfg = lab.config();
  const auto& d = lab.data();
  const auto ft = detail::head(d.dev, static_cast<std::size_t>(cfg.overfit_pairs));
  Report rep;
  rep.name = "overfit";
  detail::stamp(rep, lab);
  rep.columns = {"system", "pairs", "steps", "lr", "test_before", "test_after", "delta", "finetune_set"};
  const std::string best = lab.best_tag();
  {
    const double before = lab.score(lab.cat_model(), d.test, best);
    const auto r = lab.run_ocat(ft, cfg.ocat);
    const double after = lab.score(r.params, d.test, kHqTag);
    rep.add_row({"OCAT", ft.size(), cfg.ocat.steps, cfg.ocat.lr, before, after, after - before,
                 lab.score(r.params, ft, kHqTag)});
  }
  {
    FinetuneOptions opt = cfg.baseline;
    opt.steps = cfg.overfit_steps;
    opt.lr = cfg.full_ft_lr;
    const double before = lab.score(lab.base_model(), d.test, std::nullopt);
    const auto r = full_finetune(cfg.model, lab.base_model(), ft, lab.tokenizer(), std::nullopt, opt);
    const double after = lab.score(r.params, d.test, std::nullopt);
    rep.add_row({"full FT", ft.size(), opt.steps, opt.lr, before, after, after - before,
                 lab.score(r.params, ft, std::nullopt)});
  }
  return rep;
}

// Fine-tune lr x steps grid for every method. One run per (method, lr) at the
// largest step count, evaluated at each grid step (the fine-tune lr is
// constant, so intermediate states equal shorter runs).
inline Report sweep_stability(Lab& lab) {
  const auto& cfg = lab.config();
  const auto& sw = cfg.sweep;
  const auto& d = lab.data();
  if (sw.lrs.empty() || sw.steps.empty()) throw Error("sweep: empty lr or step grid");
  long max_steps = 0, every = 0;
  for (long s : sw.steps) {
    if (s < 1) throw Error("sweep: steps must be >= 1");
    max_steps = std::max(max_steps, s);
    every = std::gcd(every, s);
  }
  const auto ft = detail::head(d.dev, static_cast<std::size_t>(sw.finetune_pairs));
  const auto held = detail::head(d.test, static_cast<std::size_t>(sw.eval_size));
  Report rep;
  rep.name = "sweep_stability";
  detail::stamp(rep, lab);
  rep.columns = {"method", "lr", "steps", "heldout", "finetune_set", "delta"};
  const std::string best = lab.best_tag();
  const double ref_cat = lab.score(lab.cat_model(), held, best);
  const double ref_base = lab.score(lab.base_model(), held, std::nullopt);
  rep.meta["reference_cat"] = ref_cat;
  rep.meta["reference_no_cat"] = ref_base;
  rep.meta["finetune_pairs"] = ft.size();
  rep.meta["heldout_pairs"] = held.size();
  rep.meta["lrs"] = sw.lrs;
  rep.meta["steps"] = sw.steps;
  for (const auto& method : sw.methods) {
    const bool ocat = method == "ocat";
    const std::optional<std::string> tag = ocat ? std::optional<std::string>(kHqTag) : std::nullopt;
    const double ref = ocat ? ref_cat : ref_base;
    for (double lr : sw.lrs) {
      std::map<long, std::pair<double, double>> cells;
      CheckpointHook<float> hook = [&](long step, const Parameters<float>& p) {
        if (std::find(sw.steps.begin(), sw.steps.end(), step) == sw.steps.end()) return;
        cells[step] = {lab.score(p, held, tag), lab.score(p, ft, tag)};
      };
      FinetuneOptions opt = ocat ? cfg.ocat : cfg.baseline;
      opt.steps = max_steps;
      opt.lr = lr;
      opt.ckpt_every = static_cast<int>(every);
      const auto t0 = std::chrono::steady_clock::now();
      if (ocat)
        lab.run_ocat(ft, opt, hook);
      else if (method == "full")
        full_finetune(cfg.model, lab.base_model(), ft, lab.tokenizer(), std::nullopt, opt, hook);
      else if (method == "adapter")
        adapter_finetune(cfg.model, lab.base_model(), cfg.adapter, ft, lab.tokenizer(), std::nullopt, opt, hook);
      else if (method == "lora")
        lora_finetune(cfg.model, lab.base_model(), cfg.lora, ft, lab.tokenizer(), std::nullopt, opt, hook);
      else
        throw Error("sweep: unknown method " + method);
      lab.log("sweep " + method + " lr " + std::to_string(lr) + " in " +
              std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + "s");
      for (long s : sw.steps) {
        const auto& [h, f] = cells.at(s);
        rep.add_row({method, lr, s, h, f, h - ref});
      }
    }
  }
  return rep;
}

// OCAT on nested random subsets of the clean pool; held-out change relative
// to the best pretrained tag.
inline Report sweep_finetune_size(Lab& lab, const std::vector<int>& sizes) {
  Report rep;
  rep.name = "sweep_size";
  rep.columns = {"n", "heldout", "delta"};
  if (sizes.empty()) {
    detail::stamp(rep, lab);
    return rep;
  }
  const auto& cfg = lab.config();
  const auto& d = lab.data();
  std::vector<std::size_t> order(d.pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = make_rng(cfg.seed, 0x512e);
  shuffle(order, rng);
  detail::stamp(rep, lab);
  const double ref = lab.score(lab.cat_model(), d.test, lab.best_tag());
  rep.meta["reference_cat"] = ref;
  for (int n : sizes) {
    if (n < 1 || static_cast<std::size_t>(n) > d.pool.size())
      throw Error("sweep_size: size " + std::to_string(n) + " outside [1, pool size]");
    std::vector<CorpusRecord> sample;
    for (int i = 0; i < n; ++i) sample.push_back(d.pool[order[static_cast<std::size_t>(i)]]);
    const auto r = lab.run_ocat(sample, cfg.ocat);
    const double h = lab.score(r.params, d.test, kHqTag);
    rep.add_row({n, h, h - ref});
  }
  return rep;
}

// ---------------------------------------------------------------- checks

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << v;
  return s.str();
}

inline const std::vector<nlohmann::ordered_json>& find_row(const Report& rep, const std::string& col,
                                                          const std::string& value, const std::string& col2 = {},
                                                          const std::string& value2 = {}) {
  const auto c = rep.column(col);
  for (const auto& r : rep.rows)
    if (r[c] == value && (col2.empty() || r[rep.column(col2)] == value2)) return r;
  throw Error("report " + rep.name + " has no row " + col + "=" + value);
}

inline std::string tag_with_noise(const ExperimentConfig& cfg, NoiseKind k) {
  for (const auto& c : cfg.task.corpora)
    if (c.noise == k) return tag_for_corpus(c.name);
  throw Error("config has no corpus with noise " + to_string(k));
}

}  // namespace detail

// Clean-tag versus misaligned-tag chrF on the clean test set.
inline CheckResult check_tag_sensitivity(const Report& cat, const ExperimentConfig& cfg, double min_gap = 5.0) {
  const auto clean = detail::tag_with_noise(cfg, NoiseKind::None);
  const auto bad = detail::tag_with_noise(cfg, NoiseKind::Misaligned);
  const auto t = cat.column("test");
  const double a = detail::find_row(cat, "system", "CAT", "tag", clean)[t].get<double>();
  const double b = detail::find_row(cat, "system", "CAT", "tag", bad)[t].get<double>();
  return {"tag sensitivity", a - b >= min_gap,
          clean + " " + detail::fmt(a) + " - " + bad + " " + detail::fmt(b) + " = " + detail::fmt(a - b) +
              " (need >= " + detail::fmt(min_gap) + ")"};
}

inline CheckResult check_ocat_improvement(const Report& cat) {
  const auto t = cat.column("test");
  double best = -1;
  std::string best_tag;
  for (const auto& r : cat.rows)
    if (r[cat.column("system")] == "CAT" && r[t].get<double>() > best) {
      best = r[t].get<double>();
      best_tag = r[cat.column("tag")].get<std::string>();
    }
  const double ocat = detail::find_row(cat, "system", "CAT+OCAT")[t].get<double>();
  const double base = detail::find_row(cat, "system", "no-CAT")[t].get<double>();
  const bool pass = ocat >= best - 0.5 && ocat >= base + 1.0;
  return {"OCAT improvement", pass,
          "OCAT " + detail::fmt(ocat) + ", best tag " + best_tag + " " + detail::fmt(best) + " (need >= " +
              detail::fmt(best - 0.5) + "), no-CAT " + detail::fmt(base) + " (need >= " + detail::fmt(base + 1.0) + ")"};
}

inline CheckResult check_overfit(const Report& rep) {
  const auto dc = rep.column("delta"), fc = rep.column("finetune_set");
  const auto& o = detail::find_row(rep, "system", "OCAT");
  const auto& f = detail::find_row(rep, "system", "full FT");
  const double od = o[dc].get<double>(), fd = f[dc].get<double>(), ff = f[fc].get<double>();
  return {"overfitting resilience", od >= -1.0 && fd <= -5.0 && ff > 95.0,
          "OCAT delta " + detail::fmt(od) + " (need >= -1.00), full FT delta " + detail::fmt(fd) +
              " (need <= -5.00), full FT tuning-set " + detail::fmt(ff) + " (need > 95.00)"};
}

// OCAT range along the lr axis at the OCAT step budget, and whether any
// baseline cell degrades by more than 5 chrF.
inline CheckResult check_stability(const Report& rep, long ocat_steps) {
  const auto mc = rep.column("method"), sc = rep.column("steps"), hc = rep.column("heldout"),
             dc = rep.column("delta");
  double lo = 1e300, hi = -1e300, worst_other = 1e300, worst_col_range = 0;
  std::map<long, std::pair<double, double>> per_steps;
  for (const auto& r : rep.rows) {
    if (r[mc] == "ocat") {
      const long s = r[sc].get<long>();
      const double h = r[hc].get<double>();
      auto [it, fresh] = per_steps.try_emplace(s, h, h);
      it->second.first = std::min(it->second.first, h);
      it->second.second = std::max(it->second.second, h);
      if (s == ocat_steps) {
        lo = std::min(lo, h);
        hi = std::max(hi, h);
      }
    } else {
      worst_other = std::min(worst_other, r[dc].get<double>());
    }
  }
  for (const auto& [s, mm] : per_steps) worst_col_range = std::max(worst_col_range, mm.second - mm.first);
  if (lo > hi) return {"stability sweep", false, "no OCAT rows at " + std::to_string(ocat_steps) + " steps"};
  const double range = hi - lo;
  return {"stability sweep", range <= 2.0 && worst_other < -5.0,
          "OCAT lr-axis range at " + std::to_string(ocat_steps) + " steps " + detail::fmt(range) +
              " (need <= 2.00; widest over all step columns " + detail::fmt(worst_col_range) +
              "), worst baseline delta " + detail::fmt(worst_other) + " (need < -5.00)"};
}

inline CheckResult check_size_sweep(const Report& rep) {
  const auto nc = rep.column("n"), dc = rep.column("delta");
  std::optional<double> d1;
  int max_n = 0;
  double dmax = 0;
  for (const auto& r : rep.rows) {
    const int n = r[nc].get<int>();
    if (n == 1) d1 = r[dc].get<double>();
    if (n > max_n) {
      max_n = n;
      dmax = r[dc].get<double>();
    }
  }
  if (!d1) return {"fine-tune size sweep", false, "no n=1 row"};
  return {"fine-tune size sweep", *d1 >= -2.0 && dmax >= *d1,
          "delta(n=1) " + detail::fmt(*d1) + " (need >= -2.00), delta(n=" + std::to_string(max_n) + ") " +
              detail::fmt(dmax) + " (need >= delta(n=1))"};
}

inline void write_report(const Report& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / (rep.name + ".json")) << rep.to_json().dump(2) << '\n';
  std::ofstream tsv(dir / (rep.name + ".tsv"));
  rep.write_tsv(tsv);
}

}  // namespace ocat
