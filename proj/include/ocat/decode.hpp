#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ocat/tokenizer.hpp"
#include "ocat/transformer.hpp"

namespace ocat {

struct DecodeConfig {
  // Absent tag decodes without a tag (the untagged baseline).
  std::optional<std::string> inference_tag;
  int beam_size = 4;
  double max_len_ratio = 2.0;
  double length_penalty = 1.0;
  bool forbid_tags_in_output = true;
  // Sentences decoded together in one batched search.
  int batch_sentences = 16;

  void validate() const {
    if (beam_size < 1) throw Error("decode: beam_size must be >= 1");
    if (!(max_len_ratio > 0)) throw Error("decode: max_len_ratio must be > 0");
    if (batch_sentences < 1) throw Error("decode: batch_sentences must be >= 1");
  }
};

struct Hypothesis {
  TokenIds tokens;  // generated tokens, ending in EOS
  double logprob = 0;
  double score = 0;  // logprob / len^length_penalty
  int finish_step = 0;
};

// Tokens that may be generated. PAD and BOS never; UNK, other specials and
// tags only when not forbidden.
inline std::vector<char> allowed_outputs(const Vocabulary& v, bool forbid_tags) {
  std::vector<char> a(static_cast<std::size_t>(v.size()), 1);
  a[Vocabulary::kPad] = 0;
  a[Vocabulary::kBos] = 0;
  if (forbid_tags)
    for (int i = 0; i < v.size(); ++i)
      if ((v.is_special(i) && i != Vocabulary::kEos) || v.is_tag(i)) a[static_cast<std::size_t>(i)] = 0;
  return a;
}

inline int max_decode_len(int src_len, double ratio, int model_max_len) {
  return std::max(1, std::min(static_cast<int>(std::ceil(ratio * src_len)), model_max_len));
}

// Beam bookkeeping for one sentence, independent of the scoring model.
// Each step the top 2K continuations are ranked; EOS candidates within the
// top K finish, the first K non-EOS candidates stay live. Search ends once K
// hypotheses finished or max_len is reached (the last step forces EOS).
class BeamSearch {
 public:
  BeamSearch(int beam, int max_len, double length_penalty, std::vector<char> allowed)
      : beam_(beam), max_len_(max_len), lp_(length_penalty), allowed_(std::move(allowed)) {
    if (beam_ < 1) throw Error("beam_size must be >= 1");
    if (max_len_ < 1) throw Error("max_len must be >= 1");
    if (allowed_.size() <= static_cast<std::size_t>(Vocabulary::kEos) || !allowed_[Vocabulary::kEos])
      throw Error("beam search: EOS must be allowed");
    live_.push_back({});
    live_score_.push_back(0.0);
  }

  bool done() const { return done_; }
  int step() const { return step_; }
  const std::vector<TokenIds>& live() const { return live_; }

  TokenId last_token(std::size_t i) const { return live_[i].empty() ? Vocabulary::kBos : live_[i].back(); }

  // Rows [row0, row0 + live().size()) of logprobs score the live prefixes.
  // Returns, for each new live hypothesis, the index of its parent.
  template <class Matrix>
  std::vector<int> advance(const Matrix& logprobs, Eigen::Index row0 = 0) {
    if (done_) throw Error("beam search: advance after completion");
    const bool forced = step_ == max_len_ - 1;
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < live_.size(); ++i) {
      const Eigen::Index r = row0 + static_cast<Eigen::Index>(i);
      if (forced) {
        cands.push_back({live_score_[i] + static_cast<double>(logprobs(r, Vocabulary::kEos)), static_cast<int>(i),
                         Vocabulary::kEos});
        continue;
      }
      for (std::size_t t = 0; t < allowed_.size(); ++t)
        if (allowed_[t])
          cands.push_back({live_score_[i] + static_cast<double>(logprobs(r, static_cast<Eigen::Index>(t))),
                           static_cast<int>(i), static_cast<TokenId>(t)});
    }
    const std::size_t k = std::min(cands.size(), static_cast<std::size_t>(2 * beam_));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k), cands.end(), better);
    std::vector<TokenIds> next;
    std::vector<double> next_score;
    std::vector<int> parents;
    for (std::size_t r = 0; r < k; ++r) {
      const auto& c = cands[r];
      if (c.tok == Vocabulary::kEos) {
        if (r < static_cast<std::size_t>(beam_)) {
          Hypothesis h;
          h.tokens = live_[static_cast<std::size_t>(c.parent)];
          h.tokens.push_back(Vocabulary::kEos);
          h.logprob = c.score;
          h.score = normalize(c.score, h.tokens.size());
          h.finish_step = step_;
          finished_.push_back(std::move(h));
        }
      } else if (next.size() < static_cast<std::size_t>(beam_)) {
        next.push_back(live_[static_cast<std::size_t>(c.parent)]);
        next.back().push_back(c.tok);
        next_score.push_back(c.score);
        parents.push_back(c.parent);
      }
    }
    ++step_;
    live_ = std::move(next);
    live_score_ = std::move(next_score);
    if (finished_.size() >= static_cast<std::size_t>(beam_) || live_.empty() || step_ >= max_len_) {
      done_ = true;
      live_.clear();
      live_score_.clear();
      parents.clear();
    }
    return parents;
  }

  const std::vector<Hypothesis>& finished() const { return finished_; }

  // Highest normalised score; ties go to the earlier finish, then the
  // lexicographically smaller token sequence.
  Hypothesis best() const {
    if (finished_.empty()) throw Error("beam search: no finished hypothesis");
    return *std::min_element(finished_.begin(), finished_.end(), [](const Hypothesis& a, const Hypothesis& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.finish_step != b.finish_step) return a.finish_step < b.finish_step;
      return a.tokens < b.tokens;
    });
  }

  double normalize(double logprob, std::size_t len) const {
    return lp_ == 0 ? logprob : logprob / std::pow(static_cast<double>(len), lp_);
  }

 private:
  struct Cand {
    double score;
    int parent;
    TokenId tok;
  };
  static bool better(const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.parent != b.parent) return a.parent < b.parent;
    return a.tok < b.tok;
  }

  int beam_;
  int max_len_;
  double lp_;
  std::vector<char> allowed_;
  std::vector<TokenIds> live_;
  std::vector<double> live_score_;
  std::vector<Hypothesis> finished_;
  int step_ = 0;
  bool done_ = false;
};

// Batched beam search: sentences share encoder and decoder passes.
template <class T>
std::vector<Hypothesis> beam_search_batch(const Transformer<T>& model, const std::vector<TokenIds>& sources, int beam,
                                          double max_len_ratio, double length_penalty,
                                          const std::vector<char>& allowed) {
  if (sources.empty()) return {};
  const int n = static_cast<int>(sources.size());
  int S = 0;
  for (const auto& s : sources) {
    if (s.empty()) throw Error("beam search: empty source");
    S = std::max(S, static_cast<int>(s.size()));
  }
  std::vector<TokenId> src(static_cast<std::size_t>(n * S), Vocabulary::kPad);
  std::vector<int> lens;
  for (int i = 0; i < n; ++i) {
    const auto& s = sources[static_cast<std::size_t>(i)];
    std::copy(s.begin(), s.end(), src.begin() + i * S);
    lens.push_back(static_cast<int>(s.size()));
  }
  const auto memory = model.encode(src, n, S, lens);
  std::vector<BeamSearch> searches;
  int cap = 1;
  std::vector<int> hyp_src;
  for (int i = 0; i < n; ++i) {
    const int ml = max_decode_len(lens[static_cast<std::size_t>(i)], max_len_ratio, model.config().max_len);
    cap = std::max(cap, ml);
    searches.emplace_back(beam, ml, length_penalty, allowed);
    hyp_src.push_back(i);
  }
  auto state = model.start_decode(memory, S, lens, hyp_src, cap);
  while (true) {
    std::vector<TokenId> tokens;
    for (const auto& s : searches)
      for (std::size_t h = 0; h < s.live().size(); ++h) tokens.push_back(s.last_token(h));
    if (tokens.empty()) break;
    const auto lp = model.decode_step(state, tokens);
    std::vector<int> parents, next_src;
    Eigen::Index row0 = 0;
    for (int i = 0; i < n; ++i) {
      auto& s = searches[static_cast<std::size_t>(i)];
      const auto live = static_cast<Eigen::Index>(s.live().size());
      if (live == 0) continue;
      for (int p : s.advance(lp, row0)) {
        parents.push_back(static_cast<int>(row0) + p);
        next_src.push_back(i);
      }
      row0 += live;
    }
    if (parents.empty()) break;
    model.reorder(state, parents, std::move(next_src));
  }
  std::vector<Hypothesis> out;
  for (const auto& s : searches) out.push_back(s.best());
  return out;
}

template <class T>
Hypothesis beam_search(const Transformer<T>& model, const TokenIds& source, int beam, double max_len_ratio,
                       double length_penalty, const std::vector<char>& allowed) {
  return beam_search_batch(model, {source}, beam, max_len_ratio, length_penalty, allowed).front();
}

// Argmax rollout by full recomputation of the decoder at every step.
template <class T>
Hypothesis greedy_decode(const Transformer<T>& model, const TokenIds& source, double max_len_ratio,
                         const std::vector<char>& allowed) {
  if (source.empty()) throw Error("greedy: empty source");
  const int S = static_cast<int>(source.size());
  const int max_len = max_decode_len(S, max_len_ratio, model.config().max_len);
  const auto memory = model.encode(source, 1, S, {S});
  Hypothesis h;
  std::vector<TokenId> prefix{Vocabulary::kBos};
  for (int step = 0; step < max_len; ++step) {
    const auto lp = model.next_token_logprobs(memory, S, {S}, prefix, 1, static_cast<int>(prefix.size()));
    TokenId best = Vocabulary::kEos;
    if (step < max_len - 1) {
      double bv = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < allowed.size(); ++t) {
        if (!allowed[t]) continue;
        const double v = static_cast<double>(lp(0, static_cast<Eigen::Index>(t)));
        if (v > bv) {
          bv = v;
          best = static_cast<TokenId>(t);
        }
      }
    }
    h.logprob += static_cast<double>(lp(0, best));
    h.tokens.push_back(best);
    prefix.push_back(best);
    if (best == Vocabulary::kEos) {
      h.finish_step = step;
      break;
    }
  }
  h.score = h.logprob;
  return h;
}

// Source ids with the inference tag (if any) placed before EOS. Over-long
// sources are truncated to fit the model.
inline TokenIds decode_source(const std::string& text, const Tokenizer& tok, std::optional<TokenId> tag,
                              int model_max_len) {
  TokenIds ids = tok.encode(text);
  const std::size_t room = static_cast<std::size_t>(model_max_len) - (tag ? 2 : 1);
  if (ids.size() > room) ids.resize(room);
  if (tag) ids.push_back(*tag);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

template <class T>
std::vector<std::string> decode_corpus(const ModelConfig& cfg, const Parameters<T>& params,
                                       const std::vector<std::string>& sources, const DecodeConfig& dc,
                                       const Tokenizer& tok) {
  dc.validate();
  std::optional<TokenId> tag;
  if (dc.inference_tag) tag = tok.vocab().tag_id(*dc.inference_tag);
  if (sources.empty()) return {};
  if (tok.vocab().size() != cfg.vocab_size) throw Error("decode: vocabulary size does not match model");
  const Transformer<T> model(cfg, params);
  const auto allowed = allowed_outputs(tok.vocab(), dc.forbid_tags_in_output);
  std::vector<std::string> out;
  out.reserve(sources.size());
  for (std::size_t b = 0; b < sources.size(); b += static_cast<std::size_t>(dc.batch_sentences)) {
    const std::size_t e = std::min(sources.size(), b + static_cast<std::size_t>(dc.batch_sentences));
    std::vector<TokenIds> ids;
    for (std::size_t i = b; i < e; ++i) ids.push_back(decode_source(sources[i], tok, tag, cfg.max_len));
    for (const auto& h : beam_search_batch(model, ids, dc.beam_size, dc.max_len_ratio, dc.length_penalty, allowed))
      out.push_back(tok.decode(h.tokens));
  }
  return out;
}

}  // namespace ocat
