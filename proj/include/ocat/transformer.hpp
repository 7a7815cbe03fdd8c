#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ocat/corpus.hpp"
#include "ocat/model.hpp"

namespace ocat {

// Padded batch. Token arrays are row-major [batch x len].
struct Batch {
  int batch = 0;
  int src_len = 0;
  int tgt_len = 0;
  std::vector<TokenId> src;
  std::vector<TokenId> tgt_in;   // BOS-shifted target
  std::vector<TokenId> tgt_out;  // target ending in EOS
  std::vector<int> src_lengths;
  std::vector<int> tgt_lengths;

  int loss_tokens() const {
    int n = 0;
    for (TokenId t : tgt_out) n += t != Vocabulary::kPad;
    return n;
  }
};

inline Batch make_batch(const std::vector<const TaggedExample*>& examples) {
  Batch b;
  b.batch = static_cast<int>(examples.size());
  for (const auto* e : examples) {
    b.src_len = std::max(b.src_len, static_cast<int>(e->source_tokens.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<int>(e->target_tokens.size()));
  }
  b.src.assign(static_cast<std::size_t>(b.batch * b.src_len), Vocabulary::kPad);
  b.tgt_in.assign(static_cast<std::size_t>(b.batch * b.tgt_len), Vocabulary::kPad);
  b.tgt_out.assign(static_cast<std::size_t>(b.batch * b.tgt_len), Vocabulary::kPad);
  for (int i = 0; i < b.batch; ++i) {
    const auto& e = *examples[static_cast<std::size_t>(i)];
    for (std::size_t t = 0; t < e.source_tokens.size(); ++t)
      b.src[static_cast<std::size_t>(i * b.src_len) + t] = e.source_tokens[t];
    for (std::size_t t = 0; t < e.target_tokens.size(); ++t) {
      b.tgt_out[static_cast<std::size_t>(i * b.tgt_len) + t] = e.target_tokens[t];
      b.tgt_in[static_cast<std::size_t>(i * b.tgt_len) + t] = t == 0 ? Vocabulary::kBos : e.target_tokens[t - 1];
    }
    b.src_lengths.push_back(static_cast<int>(e.source_tokens.size()));
    b.tgt_lengths.push_back(static_cast<int>(e.target_tokens.size()));
  }
  return b;
}

inline Batch make_batch(const std::vector<TaggedExample>& examples) {
  std::vector<const TaggedExample*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return make_batch(ptrs);
}

enum class Mode { Train, Eval };

// Selects which parameter gradients backward() materialises. Activation
// gradients always flow through the whole network.
struct GradRequest {
  std::function<bool(const std::string&)> filter;

  bool wants(const std::string& name) const { return !filter || filter(name); }

  static GradRequest all() { return {}; }
  static GradRequest only(std::vector<std::string> names) {
    return {[names = std::move(names)](const std::string& n) {
      return std::find(names.begin(), names.end(), n) != names.end();
    }};
  }
  static GradRequest containing(std::string needle) {
    return {[needle = std::move(needle)](const std::string& n) { return n.find(needle) != std::string::npos; }};
  }
};

template <class T>
class Transformer {
 public:
  using M = Mat<T>;
  using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  struct LNCache {
    M xhat;
    Col rstd;
  };
  struct AttnCache {
    M q, k, v, p, ctx, xa_q, xa_v;
  };
  struct FfnCache {
    M h;
  };
  struct AdapterCache {
    M x, h;
  };
  struct SubCache {
    M in;
    LNCache ln;
    AdapterCache ad;
    M mask;
  };
  struct EncLayerCache {
    SubCache attn_sub, ffn_sub;
    AttnCache attn;
    FfnCache ffn;
  };
  struct DecLayerCache {
    SubCache self_sub, cross_sub, ffn_sub;
    AttnCache self, cross;
    FfnCache ffn;
  };
  struct Cache {
    M enc_emb_mask, dec_emb_mask;
    std::vector<EncLayerCache> enc;
    std::vector<DecLayerCache> dec;
    LNCache enc_final, dec_final;
    M memory, dec_out;
  };

  struct Output {
    M logits;  // [batch*tgt_len x vocab]
    T loss = 0;
    int tokens = 0;
    std::vector<T> example_loss;  // summed token loss per example
  };

  Transformer(const ModelConfig& cfg, const Parameters<T>& params) : cfg_(cfg), p_(params) {
    cfg_.validate();
    const auto& e = p_.get(names::kEmbed);
    if (e.rows() != cfg_.vocab_size || e.cols() != cfg_.d_model)
      throw Error("parameters do not match model config (embedding shape)");
    pe_ = M::Zero(cfg_.max_len, cfg_.d_model);
    for (int pos = 0; pos < cfg_.max_len; ++pos) {
      for (int i = 0; i < cfg_.d_model; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / cfg_.d_model);
        pe_(pos, i) = static_cast<T>(std::sin(pos * freq));
        if (i + 1 < cfg_.d_model) pe_(pos, i + 1) = static_cast<T>(std::cos(pos * freq));
      }
    }
    emb_scale_ = cfg_.scale_embeddings ? static_cast<T>(std::sqrt(static_cast<double>(cfg_.d_model))) : T(1);
  }

  const ModelConfig& config() const { return cfg_; }
  const Parameters<T>& params() const { return p_; }

  // Label-smoothed cross-entropy averaged over non-PAD targets.
  Output forward(const Batch& b, Mode mode, Rng* rng = nullptr, Cache* cache = nullptr) const {
    validate(b);
    const int n_tokens = b.loss_tokens();
    if (n_tokens == 0) throw Error("no loss tokens");
    Ctx ctx{mode, rng};
    if (cache) {
      cache->enc.assign(static_cast<std::size_t>(cfg_.enc_layers), {});
      cache->dec.assign(static_cast<std::size_t>(cfg_.dec_layers), {});
    }
    M memory = run_encoder(b.src, b.batch, b.src_len, b.src_lengths, ctx, cache);
    M h = run_decoder(b.tgt_in, b.batch, b.tgt_len, b.tgt_lengths, memory, b.src_len, b.src_lengths, ctx, cache);
    Output out;
    out.logits.noalias() = h * p_.get(names::kEmbed).transpose();
    if (cache) {
      cache->memory = std::move(memory);
      cache->dec_out = std::move(h);
    }
    const T eps = static_cast<T>(cfg_.label_smoothing);
    const int V = cfg_.vocab_size;
    out.example_loss.assign(static_cast<std::size_t>(b.batch), T(0));
    double total = 0;
    for (int r = 0; r < b.batch * b.tgt_len; ++r) {
      const TokenId y = b.tgt_out[static_cast<std::size_t>(r)];
      if (y == Vocabulary::kPad) continue;
      auto row = out.logits.row(r);
      const T mx = row.maxCoeff();
      const T lse = mx + std::log((row.array() - mx).exp().sum());
      const T nll = lse - row(y);
      const T smooth = lse - row.sum() / static_cast<T>(V);
      const T l = (T(1) - eps) * nll + eps * smooth;
      out.example_loss[static_cast<std::size_t>(r / b.tgt_len)] += l;
      total += static_cast<double>(l);
    }
    out.tokens = n_tokens;
    out.loss = static_cast<T>(total / n_tokens);
    return out;
  }

  // Exact gradient of loss_scale * loss, accumulated into grads.
  void backward(const Batch& b, const Output& out, const Cache& cache, Parameters<T>& grads,
                const GradRequest& req = {}, T loss_scale = T(1)) const {
    const T eps = static_cast<T>(cfg_.label_smoothing);
    const int V = cfg_.vocab_size;
    const T inv_n = loss_scale / static_cast<T>(out.tokens);
    M dlogits = M::Zero(out.logits.rows(), out.logits.cols());
    for (int r = 0; r < b.batch * b.tgt_len; ++r) {
      const TokenId y = b.tgt_out[static_cast<std::size_t>(r)];
      if (y == Vocabulary::kPad) continue;
      auto row = out.logits.row(r);
      const T mx = row.maxCoeff();
      auto e = (row.array() - mx).exp();
      const T z = e.sum();
      dlogits.row(r) = (e / z - eps / static_cast<T>(V)) * inv_n;
      dlogits(r, y) -= (T(1) - eps) * inv_n;
    }
    const auto& E = p_.get(names::kEmbed);
    const bool want_embed = req.wants(names::kEmbed);
    if (want_embed) grads.get(names::kEmbed).noalias() += dlogits.transpose() * cache.dec_out;
    M dh = dlogits * E;
    M dmemory = M::Zero(cache.memory.rows(), cache.memory.cols());
    M demb = decoder_backward(b, cache, dh, dmemory, grads, req);
    if (want_embed) accumulate_embedding(b.tgt_in, demb, grads.get(names::kEmbed));
    M dsrc = encoder_backward(b, cache, dmemory, grads, req);
    if (want_embed) accumulate_embedding(b.src, dsrc, grads.get(names::kEmbed));
  }

  // Inference: encoder states for a padded source batch.
  M encode(const std::vector<TokenId>& src, int batch, int src_len, const std::vector<int>& lengths) const {
    Ctx ctx{Mode::Eval, nullptr};
    check_ids(src, src_len);
    return run_encoder(src, batch, src_len, lengths, ctx, nullptr);
  }

  // Inference: log-probabilities of the next token after each prefix.
  // prefixes is [batch x len], all rows of equal length, starting with BOS.
  M next_token_logprobs(const M& memory, int src_len, const std::vector<int>& src_lengths,
                        const std::vector<TokenId>& prefixes, int batch, int len) const {
    Ctx ctx{Mode::Eval, nullptr};
    check_ids(prefixes, len);
    std::vector<int> lens(static_cast<std::size_t>(batch), len);
    M h = run_decoder(prefixes, batch, len, lens, memory, src_len, src_lengths, ctx, nullptr);
    M last(batch, cfg_.d_model);
    for (int i = 0; i < batch; ++i) last.row(i) = h.row(i * len + len - 1);
    M logits = last * p_.get(names::kEmbed).transpose();
    for (int i = 0; i < batch; ++i) {
      auto row = logits.row(i);
      const T mx = row.maxCoeff();
      const T lse = mx + std::log((row.array() - mx).exp().sum());
      row.array() -= lse;
    }
    return logits;
  }

  // Incremental decoding over a set of hypotheses, each tied to one source row
  // of the encoded memory.
  struct DecodeState {
    int steps = 0;
    int cap = 0;
    int src_len = 0;
    std::vector<int> src_lengths;
    std::vector<int> hyp_src;
    std::vector<M> self_k, self_v;    // per layer, [hyps*cap x d]
    std::vector<M> cross_k, cross_v;  // per layer, [n_src*src_len x d]
  };

  DecodeState start_decode(const M& memory, int src_len, const std::vector<int>& src_lengths,
                           std::vector<int> hyp_src, int cap) const {
    if (cap > cfg_.max_len) throw Error("decode length exceeds max_len");
    DecodeState st;
    st.cap = cap;
    st.src_len = src_len;
    st.src_lengths = src_lengths;
    st.hyp_src = std::move(hyp_src);
    const auto n = static_cast<Eigen::Index>(st.hyp_src.size());
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const auto pre = names::dec(l) + ".cross";
      st.cross_k.push_back(linear_fwd(pre + ".k", memory, nullptr));
      st.cross_v.push_back(linear_fwd(pre + ".v", memory, nullptr));
      st.self_k.push_back(M::Zero(n * cap, cfg_.d_model));
      st.self_v.push_back(M::Zero(n * cap, cfg_.d_model));
    }
    return st;
  }

  // Feeds one token per hypothesis; returns next-token log-probabilities.
  M decode_step(DecodeState& st, const std::vector<TokenId>& tokens) const {
    const int n = static_cast<int>(st.hyp_src.size());
    const int t = st.steps;
    if (static_cast<int>(tokens.size()) != n) throw Error("decode_step: token count mismatch");
    if (t >= st.cap) throw Error("decode_step: state capacity exceeded");
    check_ids(tokens, 1);
    const auto& E = p_.get(names::kEmbed);
    M x(n, cfg_.d_model);
    for (int i = 0; i < n; ++i) x.row(i) = emb_scale_ * E.row(tokens[static_cast<std::size_t>(i)]) + pe_.row(t);
    const Ctx ctx{Mode::Eval, nullptr};
    const int H = cfg_.n_heads, dh = cfg_.head_dim;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    auto attend = [&](const M& q, const M& K, const M& V, auto key_block) {
      M out(n, cfg_.d_model);
      Eigen::Matrix<T, 1, Eigen::Dynamic> s;
      for (int i = 0; i < n; ++i) {
        const auto [row0, len] = key_block(i);
        for (int h = 0; h < H; ++h) {
          s.noalias() = q.block(i, h * dh, 1, dh) * K.block(row0, h * dh, len, dh).transpose();
          s *= scale;
          const T mx = s.maxCoeff();
          s = (s.array() - mx).exp();
          s /= s.sum();
          out.block(i, h * dh, 1, dh).noalias() = s * V.block(row0, h * dh, len, dh);
        }
      }
      return out;
    };
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const auto pre = names::dec(l);
      const auto ul = static_cast<std::size_t>(l);
      x = sublayer_fwd(x, pre + ".ln1", pre + ".self", ctx, nullptr, [&](const M& in) {
        M q = linear_fwd(pre + ".self.q", in, nullptr);
        M k = linear_fwd(pre + ".self.k", in, nullptr);
        M v = linear_fwd(pre + ".self.v", in, nullptr);
        for (int i = 0; i < n; ++i) {
          st.self_k[ul].row(i * st.cap + t) = k.row(i);
          st.self_v[ul].row(i * st.cap + t) = v.row(i);
        }
        M c = attend(q, st.self_k[ul], st.self_v[ul], [&](int i) { return std::pair<int, int>(i * st.cap, t + 1); });
        return linear_fwd(pre + ".self.o", c, nullptr);
      });
      x = sublayer_fwd(x, pre + ".ln2", pre + ".cross", ctx, nullptr, [&](const M& in) {
        M q = linear_fwd(pre + ".cross.q", in, nullptr);
        M c = attend(q, st.cross_k[ul], st.cross_v[ul], [&](int i) {
          const int s = st.hyp_src[static_cast<std::size_t>(i)];
          return std::pair<int, int>(s * st.src_len, st.src_lengths[static_cast<std::size_t>(s)]);
        });
        return linear_fwd(pre + ".cross.o", c, nullptr);
      });
      x = sublayer_fwd(x, pre + ".ln3", pre + ".ffn", ctx, nullptr,
                       [&](const M& in) { return ffn_fwd(pre + ".ffn", in, nullptr); });
    }
    if (cfg_.pre_norm) x = ln_fwd("dec.final_ln", x, nullptr);
    M logits = x * E.transpose();
    for (int i = 0; i < n; ++i) {
      auto row = logits.row(i);
      const T mx = row.maxCoeff();
      const T lse = mx + std::log((row.array() - mx).exp().sum());
      row.array() -= lse;
    }
    ++st.steps;
    return logits;
  }

  // Hypothesis i of the new state continues old hypothesis parents[i].
  void reorder(DecodeState& st, const std::vector<int>& parents, std::vector<int> hyp_src) const {
    const auto n = static_cast<Eigen::Index>(parents.size());
    for (std::size_t l = 0; l < st.self_k.size(); ++l) {
      M k(n * st.cap, cfg_.d_model), v(n * st.cap, cfg_.d_model);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int p = parents[static_cast<std::size_t>(i)];
        k.block(i * st.cap, 0, st.steps, cfg_.d_model) = st.self_k[l].block(p * st.cap, 0, st.steps, cfg_.d_model);
        v.block(i * st.cap, 0, st.steps, cfg_.d_model) = st.self_v[l].block(p * st.cap, 0, st.steps, cfg_.d_model);
      }
      st.self_k[l] = std::move(k);
      st.self_v[l] = std::move(v);
    }
    st.hyp_src = std::move(hyp_src);
  }

 private:
  struct Ctx {
    Mode mode;
    Rng* rng;
  };

  void check_ids(const std::vector<TokenId>& ids, int len) const {
    if (len > cfg_.max_len) throw Error("sequence length exceeds max_len");
    for (TokenId t : ids)
      if (t < 0 || t >= cfg_.vocab_size) throw Error("token id out of range");
  }

  void validate(const Batch& b) const {
    if (b.batch <= 0) throw Error("empty batch");
    check_ids(b.src, b.src_len);
    check_ids(b.tgt_in, b.tgt_len);
    check_ids(b.tgt_out, b.tgt_len);
    for (int l : b.src_lengths)
      if (l < 1) throw Error("empty source sequence");
  }

  bool dropout_active(const Ctx& ctx) const { return ctx.mode == Mode::Train && cfg_.dropout > 0 && ctx.rng; }

  M dropout_fwd(M x, const Ctx& ctx, M* mask) const {
    if (!dropout_active(ctx)) return x;
    const double keep = 1.0 - cfg_.dropout;
    M m(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = uniform01(*ctx.rng) < keep ? static_cast<T>(1.0 / keep) : T(0);
    x.array() *= m.array();
    if (mask) *mask = std::move(m);
    return x;
  }

  static M dropout_bwd(M dy, const M& mask) {
    if (mask.size() == 0) return dy;
    dy.array() *= mask.array();
    return dy;
  }

  M embed(const std::vector<TokenId>& ids, int batch, int len) const {
    const auto& E = p_.get(names::kEmbed);
    M x(batch * len, cfg_.d_model);
    for (int b = 0; b < batch; ++b)
      for (int t = 0; t < len; ++t) {
        const int r = b * len + t;
        x.row(r) = emb_scale_ * E.row(ids[static_cast<std::size_t>(r)]) + pe_.row(t);
      }
    return x;
  }

  void accumulate_embedding(const std::vector<TokenId>& ids, const M& dx, M& gE) const {
    for (Eigen::Index r = 0; r < dx.rows(); ++r) gE.row(ids[static_cast<std::size_t>(r)]) += emb_scale_ * dx.row(r);
  }

  bool has_lora(const std::string& name) const { return p_.ext.lora_rank > 0 && p_.has(name + ".lora_a"); }

  M linear_fwd(const std::string& name, const M& x, M* xa_out) const {
    M y = x * p_.get(name + ".w");
    y.rowwise() += p_.get(name + ".b").row(0);
    if (has_lora(name)) {
      M xa = x * p_.get(name + ".lora_a");
      y.noalias() += static_cast<T>(p_.ext.lora_scale()) * (xa * p_.get(name + ".lora_b"));
      if (xa_out) *xa_out = std::move(xa);
    }
    return y;
  }

  M linear_bwd(const std::string& name, const M& x, const M& xa, const M& dy, Parameters<T>& g,
               const GradRequest& req) const {
    const auto& W = p_.get(name + ".w");
    if (req.wants(name + ".w")) g.get(name + ".w").noalias() += x.transpose() * dy;
    if (req.wants(name + ".b")) g.get(name + ".b").row(0) += dy.colwise().sum();
    M dx = dy * W.transpose();
    if (has_lora(name)) {
      const T s = static_cast<T>(p_.ext.lora_scale());
      const auto& A = p_.get(name + ".lora_a");
      const auto& B = p_.get(name + ".lora_b");
      if (req.wants(name + ".lora_b")) g.get(name + ".lora_b").noalias() += s * (xa.transpose() * dy);
      M dxa = s * (dy * B.transpose());
      if (req.wants(name + ".lora_a")) g.get(name + ".lora_a").noalias() += x.transpose() * dxa;
      dx.noalias() += dxa * A.transpose();
    }
    return dx;
  }

  M ln_fwd(const std::string& name, const M& x, LNCache* c) const {
    const T eps = static_cast<T>(1e-5);
    const auto& g = p_.get(name + ".g");
    const auto& bias = p_.get(name + ".b");
    M xhat(x.rows(), x.cols());
    Col rstd(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const T mu = x.row(r).mean();
      const T var = (x.row(r).array() - mu).square().mean();
      rstd(r) = T(1) / std::sqrt(var + eps);
      xhat.row(r) = (x.row(r).array() - mu) * rstd(r);
    }
    M y = xhat.array().rowwise() * g.row(0).array();
    y.rowwise() += bias.row(0);
    if (c) {
      c->xhat = std::move(xhat);
      c->rstd = std::move(rstd);
    }
    return y;
  }

  M ln_bwd(const std::string& name, const M& dy, const LNCache& c, Parameters<T>& grads, const GradRequest& req) const {
    const auto& g = p_.get(name + ".g");
    if (req.wants(name + ".g")) grads.get(name + ".g").row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    if (req.wants(name + ".b")) grads.get(name + ".b").row(0) += dy.colwise().sum();
    M dxhat = dy.array().rowwise() * g.row(0).array();
    M dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const T m1 = dxhat.row(r).mean();
      const T m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
      dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
    }
    return dx;
  }

  M ffn_fwd(const std::string& pre, const M& x, FfnCache* c) const {
    M h = x * p_.get(pre + ".w1");
    h.rowwise() += p_.get(pre + ".b1").row(0);
    h = h.cwiseMax(T(0));
    M y = h * p_.get(pre + ".w2");
    y.rowwise() += p_.get(pre + ".b2").row(0);
    if (c) c->h = std::move(h);
    return y;
  }

  M ffn_bwd(const std::string& pre, const M& x, const FfnCache& c, const M& dy, Parameters<T>& g,
            const GradRequest& req) const {
    if (req.wants(pre + ".w2")) g.get(pre + ".w2").noalias() += c.h.transpose() * dy;
    if (req.wants(pre + ".b2")) g.get(pre + ".b2").row(0) += dy.colwise().sum();
    M dh = dy * p_.get(pre + ".w2").transpose();
    dh = (c.h.array() > T(0)).select(dh, T(0));
    if (req.wants(pre + ".w1")) g.get(pre + ".w1").noalias() += x.transpose() * dh;
    if (req.wants(pre + ".b1")) g.get(pre + ".b1").row(0) += dh.colwise().sum();
    return dh * p_.get(pre + ".w1").transpose();
  }

  bool has_adapter(const std::string& site) const { return p_.ext.adapter_dim > 0 && p_.has(site + ".adapter.down"); }

  M adapter_fwd(const std::string& site, M x, AdapterCache* c) const {
    if (!has_adapter(site)) return x;
    M h = (x * p_.get(site + ".adapter.down")).cwiseMax(T(0));
    M y = x + h * p_.get(site + ".adapter.up");
    if (c) {
      c->x = std::move(x);
      c->h = std::move(h);
    }
    return y;
  }

  M adapter_bwd(const std::string& site, M dy, const AdapterCache& c, Parameters<T>& g, const GradRequest& req) const {
    if (!has_adapter(site)) return dy;
    const auto& down = p_.get(site + ".adapter.down");
    const auto& up = p_.get(site + ".adapter.up");
    if (req.wants(site + ".adapter.up")) g.get(site + ".adapter.up").noalias() += c.h.transpose() * dy;
    M dh = dy * up.transpose();
    dh = (c.h.array() > T(0)).select(dh, T(0));
    if (req.wants(site + ".adapter.down")) g.get(site + ".adapter.down").noalias() += c.x.transpose() * dh;
    dy.noalias() += dh * down.transpose();
    return dy;
  }

  // Multi-head attention; rows of xq are [batch x lq], rows of xkv [batch x lk].
  M attn_fwd(const std::string& pre, const M& xq, const M& xkv, int batch, int lq, int lk,
             const std::vector<int>& key_len, bool causal, AttnCache* c) const {
    const int H = cfg_.n_heads, dh = cfg_.head_dim;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    M xa_q, xa_v;
    M q = linear_fwd(pre + ".q", xq, &xa_q);
    M k = linear_fwd(pre + ".k", xkv, nullptr);
    M v = linear_fwd(pre + ".v", xkv, &xa_v);
    M ctx(batch * lq, cfg_.d_model);
    M probs;
    if (c) probs.resize(batch * H * lq, lk);
    M s(lq, lk);
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (int b = 0; b < batch; ++b) {
      const int klen = key_len[static_cast<std::size_t>(b)];
      for (int h = 0; h < H; ++h) {
        s.noalias() = q.block(b * lq, h * dh, lq, dh) * k.block(b * lk, h * dh, lk, dh).transpose();
        s *= scale;
        for (int i = 0; i < lq; ++i) {
          for (int j = 0; j < lk; ++j)
            if (j >= klen || (causal && j > i)) s(i, j) = neg_inf;
          const T mx = s.row(i).maxCoeff();
          s.row(i) = (s.row(i).array() - mx).exp();
          s.row(i) /= s.row(i).sum();
        }
        ctx.block(b * lq, h * dh, lq, dh).noalias() = s * v.block(b * lk, h * dh, lk, dh);
        if (c) probs.block((b * H + h) * lq, 0, lq, lk) = s;
      }
    }
    M out = linear_fwd(pre + ".o", ctx, nullptr);
    if (c) {
      c->q = std::move(q);
      c->k = std::move(k);
      c->v = std::move(v);
      c->p = std::move(probs);
      c->ctx = std::move(ctx);
      c->xa_q = std::move(xa_q);
      c->xa_v = std::move(xa_v);
    }
    return out;
  }

  // Returns d(xq); adds d(xkv) into dxkv.
  M attn_bwd(const std::string& pre, const M& xq, const M& xkv, int batch, int lq, int lk, const AttnCache& c,
             const M& dout, M& dxkv, Parameters<T>& g, const GradRequest& req) const {
    const int H = cfg_.n_heads, dh = cfg_.head_dim;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    M dctx = linear_bwd(pre + ".o", c.ctx, M(), dout, g, req);
    M dq = M::Zero(batch * lq, cfg_.d_model);
    M dk = M::Zero(batch * lk, cfg_.d_model);
    M dv = M::Zero(batch * lk, cfg_.d_model);
    M dp(lq, lk);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto P = c.p.block((b * H + h) * lq, 0, lq, lk);
        const auto dC = dctx.block(b * lq, h * dh, lq, dh);
        dp.noalias() = dC * c.v.block(b * lk, h * dh, lk, dh).transpose();
        dv.block(b * lk, h * dh, lk, dh).noalias() += P.transpose() * dC;
        for (int i = 0; i < lq; ++i) {
          const T dot = (dp.row(i).array() * P.row(i).array()).sum();
          dp.row(i) = (P.row(i).array() * (dp.row(i).array() - dot)) * scale;
        }
        dq.block(b * lq, h * dh, lq, dh).noalias() += dp * c.k.block(b * lk, h * dh, lk, dh);
        dk.block(b * lk, h * dh, lk, dh).noalias() += dp.transpose() * c.q.block(b * lq, h * dh, lq, dh);
      }
    }
    dxkv += linear_bwd(pre + ".k", xkv, M(), dk, g, req);
    dxkv += linear_bwd(pre + ".v", xkv, c.xa_v, dv, g, req);
    return linear_bwd(pre + ".q", xq, c.xa_q, dq, g, req);
  }

  // Residual unit around an inner sublayer, post-norm or pre-norm.
  template <class Inner>
  M sublayer_fwd(const M& x, const std::string& ln, const std::string& site, const Ctx& ctx, SubCache* sc,
                 Inner&& inner) const {
    M in = cfg_.pre_norm ? ln_fwd(ln, x, sc ? &sc->ln : nullptr) : x;
    M y = inner(in);
    y = adapter_fwd(site, std::move(y), sc ? &sc->ad : nullptr);
    y = dropout_fwd(std::move(y), ctx, sc ? &sc->mask : nullptr);
    M r = x + y;
    if (sc) sc->in = std::move(in);
    if (cfg_.pre_norm) return r;
    return ln_fwd(ln, r, sc ? &sc->ln : nullptr);
  }

  template <class InnerBwd>
  M sublayer_bwd(const M& dy, const std::string& ln, const std::string& site, const SubCache& sc, Parameters<T>& g,
                 const GradRequest& req, InnerBwd&& inner_bwd) const {
    M dr = cfg_.pre_norm ? dy : ln_bwd(ln, dy, sc.ln, g, req);
    M dout = dropout_bwd(dr, sc.mask);
    dout = adapter_bwd(site, std::move(dout), sc.ad, g, req);
    M din = inner_bwd(dout, sc.in);
    if (cfg_.pre_norm)
      dr += ln_bwd(ln, din, sc.ln, g, req);
    else
      dr += din;
    return dr;
  }

  M run_encoder(const std::vector<TokenId>& src, int batch, int len, const std::vector<int>& lens, const Ctx& ctx,
                Cache* cache) const {
    M x = dropout_fwd(embed(src, batch, len), ctx, cache ? &cache->enc_emb_mask : nullptr);
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      const auto pre = names::enc(l);
      EncLayerCache* lc = cache ? &cache->enc[static_cast<std::size_t>(l)] : nullptr;
      x = sublayer_fwd(x, pre + ".ln1", pre + ".self", ctx, lc ? &lc->attn_sub : nullptr, [&](const M& in) {
        return attn_fwd(pre + ".self", in, in, batch, len, len, lens, false, lc ? &lc->attn : nullptr);
      });
      x = sublayer_fwd(x, pre + ".ln2", pre + ".ffn", ctx, lc ? &lc->ffn_sub : nullptr,
                       [&](const M& in) { return ffn_fwd(pre + ".ffn", in, lc ? &lc->ffn : nullptr); });
    }
    if (cfg_.pre_norm) x = ln_fwd("enc.final_ln", x, cache ? &cache->enc_final : nullptr);
    return x;
  }

  M run_decoder(const std::vector<TokenId>& tgt, int batch, int len, const std::vector<int>& lens, const M& memory,
                int src_len, const std::vector<int>& src_lens, const Ctx& ctx, Cache* cache) const {
    M x = dropout_fwd(embed(tgt, batch, len), ctx, cache ? &cache->dec_emb_mask : nullptr);
    for (int l = 0; l < cfg_.dec_layers; ++l) {
      const auto pre = names::dec(l);
      DecLayerCache* lc = cache ? &cache->dec[static_cast<std::size_t>(l)] : nullptr;
      x = sublayer_fwd(x, pre + ".ln1", pre + ".self", ctx, lc ? &lc->self_sub : nullptr, [&](const M& in) {
        return attn_fwd(pre + ".self", in, in, batch, len, len, lens, true, lc ? &lc->self : nullptr);
      });
      x = sublayer_fwd(x, pre + ".ln2", pre + ".cross", ctx, lc ? &lc->cross_sub : nullptr, [&](const M& in) {
        return attn_fwd(pre + ".cross", in, memory, batch, len, src_len, src_lens, false, lc ? &lc->cross : nullptr);
      });
      x = sublayer_fwd(x, pre + ".ln3", pre + ".ffn", ctx, lc ? &lc->ffn_sub : nullptr,
                       [&](const M& in) { return ffn_fwd(pre + ".ffn", in, lc ? &lc->ffn : nullptr); });
    }
    if (cfg_.pre_norm) x = ln_fwd("dec.final_ln", x, cache ? &cache->dec_final : nullptr);
    return x;
  }

  // Returns the gradient w.r.t. the decoder input embeddings (after dropout).
  M decoder_backward(const Batch& b, const Cache& cache, M dx, M& dmemory, Parameters<T>& g,
                     const GradRequest& req) const {
    if (cfg_.pre_norm) dx = ln_bwd("dec.final_ln", dx, cache.dec_final, g, req);
    const int len = b.tgt_len;
    for (int l = cfg_.dec_layers - 1; l >= 0; --l) {
      const auto pre = names::dec(l);
      const auto& lc = cache.dec[static_cast<std::size_t>(l)];
      dx = sublayer_bwd(dx, pre + ".ln3", pre + ".ffn", lc.ffn_sub, g, req, [&](const M& dout, const M& in) {
        return ffn_bwd(pre + ".ffn", in, lc.ffn, dout, g, req);
      });
      dx = sublayer_bwd(dx, pre + ".ln2", pre + ".cross", lc.cross_sub, g, req, [&](const M& dout, const M& in) {
        return attn_bwd(pre + ".cross", in, cache.memory, b.batch, len, b.src_len, lc.cross, dout, dmemory, g, req);
      });
      dx = sublayer_bwd(dx, pre + ".ln1", pre + ".self", lc.self_sub, g, req, [&](const M& dout, const M& in) {
        M dkv = M::Zero(in.rows(), in.cols());
        M dq = attn_bwd(pre + ".self", in, in, b.batch, len, len, lc.self, dout, dkv, g, req);
        return M(dq + dkv);
      });
    }
    return dropout_bwd(std::move(dx), cache.dec_emb_mask);
  }

  M encoder_backward(const Batch& b, const Cache& cache, M dx, Parameters<T>& g, const GradRequest& req) const {
    if (cfg_.pre_norm) dx = ln_bwd("enc.final_ln", dx, cache.enc_final, g, req);
    const int len = b.src_len;
    for (int l = cfg_.enc_layers - 1; l >= 0; --l) {
      const auto pre = names::enc(l);
      const auto& lc = cache.enc[static_cast<std::size_t>(l)];
      dx = sublayer_bwd(dx, pre + ".ln2", pre + ".ffn", lc.ffn_sub, g, req, [&](const M& dout, const M& in) {
        return ffn_bwd(pre + ".ffn", in, lc.ffn, dout, g, req);
      });
      dx = sublayer_bwd(dx, pre + ".ln1", pre + ".self", lc.attn_sub, g, req, [&](const M& dout, const M& in) {
        M dkv = M::Zero(in.rows(), in.cols());
        M dq = attn_bwd(pre + ".self", in, in, b.batch, len, len, lc.attn, dout, dkv, g, req);
        return M(dq + dkv);
      });
    }
    return dropout_bwd(std::move(dx), cache.enc_emb_mask);
  }

  ModelConfig cfg_;
  const Parameters<T>& p_;
  M pe_;
  T emb_scale_;
};

}  // namespace ocat
