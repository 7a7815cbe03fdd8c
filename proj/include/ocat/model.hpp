#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <nlohmann/json.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "ocat/common.hpp"

namespace ocat {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int enc_layers = 2;
  int dec_layers = 2;
  int d_model = 64;
  int d_ffn = 256;
  int n_heads = 4;
  int head_dim = 16;
  int vocab_size = 512;
  int max_len = 256;
  double dropout = 0.0;
  bool share_embeddings = true;
  std::uint64_t seed = 1;
  double label_smoothing = 0.1;
  // Post-norm (LN after each residual add) unless set.
  bool pre_norm = false;
  bool scale_embeddings = true;

  void validate() const {
    if (enc_layers < 1 || dec_layers < 1) throw Error("model: need at least one encoder and decoder layer");
    if (n_heads < 1 || head_dim < 1 || n_heads * head_dim != d_model)
      throw Error("model: n_heads * head_dim must equal d_model");
    if (d_ffn < 1 || vocab_size < 5 || max_len < 2) throw Error("model: invalid sizes");
    if (!(dropout >= 0 && dropout < 1)) throw Error("model: dropout must be in [0,1)");
    if (!(label_smoothing >= 0 && label_smoothing < 1)) throw Error("model: label_smoothing must be in [0,1)");
    if (!share_embeddings) throw Error("model: only shared embeddings are supported");
  }

  // 6+6 layers, d=512, ffn 2048, 8 heads of 64.
  static ModelConfig preset_69m(int vocab = 48000) {
    ModelConfig c;
    c.enc_layers = c.dec_layers = 6;
    c.d_model = 512;
    c.d_ffn = 2048;
    c.n_heads = 8;
    c.head_dim = 64;
    c.vocab_size = vocab;
    c.max_len = 1024;
    c.dropout = 0.1;
    return c;
  }

  static ModelConfig desk_preset(int vocab = 512) {
    ModelConfig c;
    c.vocab_size = vocab;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"enc_layers", enc_layers}, {"dec_layers", dec_layers}, {"d_model", d_model},
            {"d_ffn", d_ffn},           {"n_heads", n_heads},       {"head_dim", head_dim},
            {"vocab_size", vocab_size}, {"max_len", max_len},       {"dropout", dropout},
            {"share_embeddings", share_embeddings}, {"seed", seed}, {"label_smoothing", label_smoothing},
            {"pre_norm", pre_norm},     {"scale_embeddings", scale_embeddings}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.enc_layers = j.value("enc_layers", c.enc_layers);
    c.dec_layers = j.value("dec_layers", c.dec_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ffn = j.value("d_ffn", c.d_ffn);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.head_dim = j.value("head_dim", c.d_model / c.n_heads);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_len = j.value("max_len", c.max_len);
    c.dropout = j.value("dropout", c.dropout);
    c.share_embeddings = j.value("share_embeddings", c.share_embeddings);
    c.seed = j.value("seed", c.seed);
    c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
    c.pre_norm = j.value("pre_norm", c.pre_norm);
    c.scale_embeddings = j.value("scale_embeddings", c.scale_embeddings);
    c.validate();
    return c;
  }

  // Hash of the architecture only; seed and regularisation do not change
  // tensor layout.
  std::uint64_t hash() const {
    nlohmann::json j = to_json();
    j.erase("seed");
    j.erase("dropout");
    j.erase("label_smoothing");
    return fnv1a64(j.dump());
  }
};

// Parameter-efficient extensions carried alongside the base tensors.
struct Extensions {
  int adapter_dim = 0;
  int lora_rank = 0;
  double lora_alpha = 0;

  double lora_scale() const { return lora_rank > 0 ? lora_alpha / lora_rank : 0.0; }
  bool operator==(const Extensions&) const = default;
};

// Ordered named-tensor collection. Biases and LN vectors are 1 x n.
template <class T>
class Parameters {
 public:
  using Tensor = Mat<T>;

  Tensor& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw Error("duplicate parameter: " + name);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(Tensor::Zero(rows, cols));
    return tensors_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("no parameter named " + name);
    return tensors_[it->second];
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("no parameter named " + name);
    return tensors_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }
  Tensor& at(std::size_t i) { return tensors_[i]; }
  const Tensor& at(std::size_t i) const { return tensors_[i]; }

  long long count() const {
    long long n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  Parameters zeros_like() const {
    Parameters z;
    z.ext = ext;
    for (std::size_t i = 0; i < size(); ++i) z.add(names_[i], tensors_[i].rows(), tensors_[i].cols());
    return z;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.ext = ext;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].rows(), tensors_[i].cols()) = tensors_[i].template cast<U>();
    return out;
  }

  void set_zero() {
    for (auto& t : tensors_) t.setZero();
  }

  // Bit-exact equality (names, shapes, values).
  bool operator==(const Parameters& o) const {
    if (names_ != o.names_ || !(ext == o.ext)) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = tensors_[i];
      const auto& b = o.tensors_[i];
      if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
      if (std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.size())) != 0) return false;
    }
    return true;
  }

  Extensions ext;

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Tensor> tensors_;
};

namespace names {

inline std::string enc(int l) { return "enc." + std::to_string(l); }
inline std::string dec(int l) { return "dec." + std::to_string(l); }
inline const std::string kEmbed = "embed";

// Attention blocks, each with q/k/v/o projections.
inline std::vector<std::string> attention_blocks(const ModelConfig& c) {
  std::vector<std::string> out;
  for (int l = 0; l < c.enc_layers; ++l) out.push_back(enc(l) + ".self");
  for (int l = 0; l < c.dec_layers; ++l) {
    out.push_back(dec(l) + ".self");
    out.push_back(dec(l) + ".cross");
  }
  return out;
}

// Sublayer outputs that can host a bottleneck adapter.
inline std::vector<std::string> adapter_sites(const ModelConfig& c) {
  std::vector<std::string> out;
  for (int l = 0; l < c.enc_layers; ++l) {
    out.push_back(enc(l) + ".self");
    out.push_back(enc(l) + ".ffn");
  }
  for (int l = 0; l < c.dec_layers; ++l) {
    out.push_back(dec(l) + ".self");
    out.push_back(dec(l) + ".cross");
    out.push_back(dec(l) + ".ffn");
  }
  return out;
}

inline std::vector<std::string> lora_targets(const ModelConfig& c) {
  std::vector<std::string> out;
  for (const auto& a : attention_blocks(c)) {
    out.push_back(a + ".q");
    out.push_back(a + ".v");
  }
  return out;
}

}  // namespace names

// Closed-form parameter count of the base model.
inline long long count_params(const ModelConfig& c) {
  const long long d = c.d_model, f = c.d_ffn, v = c.vocab_size;
  const long long attn = 4 * (d * d + d);
  const long long ffn = d * f + f + f * d + d;
  const long long ln = 2 * d;
  long long n = v * d;
  n += c.enc_layers * (attn + ffn + 2 * ln);
  n += c.dec_layers * (2 * attn + ffn + 3 * ln);
  if (c.pre_norm) n += 2 * ln;
  return n;
}

// Bottleneck adapters (bias-free down/up projections) at every adapter site.
inline long long count_adapter_params(const ModelConfig& c, int bottleneck) {
  return static_cast<long long>(names::adapter_sites(c).size()) * 2LL * c.d_model * bottleneck;
}

// Low-rank A (d x r) and B (r x d) for every query/value projection.
inline long long count_lora_params(const ModelConfig& c, int rank) {
  return static_cast<long long>(names::lora_targets(c).size()) * 2LL * c.d_model * rank;
}

namespace detail {

template <class T>
void xavier_uniform(Mat<T>& m, Rng& rng, double fan_in, double fan_out) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>((2.0 * uniform01(rng) - 1.0) * a);
}

template <class T>
void add_attention(Parameters<T>& p, const std::string& prefix, int d, Rng& rng) {
  for (const char* proj : {"q", "k", "v", "o"}) {
    xavier_uniform(p.add(prefix + "." + proj + ".w", d, d), rng, d, d);
    p.add(prefix + "." + proj + ".b", 1, d);
  }
}

template <class T>
void add_ln(Parameters<T>& p, const std::string& prefix, int d) {
  p.add(prefix + ".g", 1, d).setOnes();
  p.add(prefix + ".b", 1, d);
}

template <class T>
void add_ffn(Parameters<T>& p, const std::string& prefix, int d, int f, Rng& rng) {
  xavier_uniform(p.add(prefix + ".w1", d, f), rng, d, f);
  p.add(prefix + ".b1", 1, f);
  xavier_uniform(p.add(prefix + ".w2", f, d), rng, f, d);
  p.add(prefix + ".b2", 1, d);
}

}  // namespace detail

// Seeded Xavier-uniform weights, zero biases, unit LN scales.
template <class T = float>
Parameters<T> init_params(const ModelConfig& c) {
  c.validate();
  Rng rng = make_rng(c.seed, 0x1a17);
  Parameters<T> p;
  const int d = c.d_model;
  detail::xavier_uniform(p.add(names::kEmbed, c.vocab_size, d), rng, c.vocab_size, d);
  for (int l = 0; l < c.enc_layers; ++l) {
    const auto pre = names::enc(l);
    detail::add_attention(p, pre + ".self", d, rng);
    detail::add_ln(p, pre + ".ln1", d);
    detail::add_ffn(p, pre + ".ffn", d, c.d_ffn, rng);
    detail::add_ln(p, pre + ".ln2", d);
  }
  if (c.pre_norm) detail::add_ln(p, "enc.final_ln", d);
  for (int l = 0; l < c.dec_layers; ++l) {
    const auto pre = names::dec(l);
    detail::add_attention(p, pre + ".self", d, rng);
    detail::add_ln(p, pre + ".ln1", d);
    detail::add_attention(p, pre + ".cross", d, rng);
    detail::add_ln(p, pre + ".ln2", d);
    detail::add_ffn(p, pre + ".ffn", d, c.d_ffn, rng);
    detail::add_ln(p, pre + ".ln3", d);
  }
  if (c.pre_norm) detail::add_ln(p, "dec.final_ln", d);
  return p;
}

// Adds zero-output adapters: down-projection random, up-projection zero.
template <class T>
void add_adapters(Parameters<T>& p, const ModelConfig& c, int bottleneck, std::uint64_t seed) {
  if (bottleneck < 1 || bottleneck >= c.d_model) throw Error("adapter: bottleneck_dim must be in [1, d_model)");
  if (p.ext.adapter_dim) throw Error("adapter: parameters already carry adapters");
  Rng rng = make_rng(seed, 0xada);
  for (const auto& site : names::adapter_sites(c)) {
    detail::xavier_uniform(p.add(site + ".adapter.down", c.d_model, bottleneck), rng, c.d_model, bottleneck);
    p.add(site + ".adapter.up", bottleneck, c.d_model);
  }
  p.ext.adapter_dim = bottleneck;
}

// Adds low-rank deltas on q/v projections: A random, B zero.
template <class T>
void add_lora(Parameters<T>& p, const ModelConfig& c, int rank, double alpha, std::uint64_t seed) {
  if (rank < 1 || rank >= c.d_model) throw Error("lora: rank must be in [1, d_model)");
  if (p.ext.lora_rank) throw Error("lora: parameters already carry LoRA deltas");
  Rng rng = make_rng(seed, 0x10fa);
  for (const auto& t : names::lora_targets(c)) {
    detail::xavier_uniform(p.add(t + ".lora_a", c.d_model, rank), rng, c.d_model, rank);
    p.add(t + ".lora_b", rank, c.d_model);
  }
  p.ext.lora_rank = rank;
  p.ext.lora_alpha = alpha;
}

// Folds W += scale * A B into the base projections and drops the deltas.
template <class T>
Parameters<T> merge_lora(const Parameters<T>& p, const ModelConfig& c) {
  if (!p.ext.lora_rank) return p;
  Parameters<T> out;
  out.ext = p.ext;
  out.ext.lora_rank = 0;
  out.ext.lora_alpha = 0;
  const T scale = static_cast<T>(p.ext.lora_scale());
  for (const auto& name : p.names()) {
    if (name.find(".lora_") != std::string::npos) continue;
    const auto& src = p.get(name);
    auto& dst = out.add(name, src.rows(), src.cols());
    dst = src;
  }
  for (const auto& t : names::lora_targets(c)) {
    out.get(t + ".w").noalias() += scale * (p.get(t + ".lora_a") * p.get(t + ".lora_b"));
  }
  return out;
}

}  // namespace ocat
