#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ocat/transformer.hpp"

namespace ocat {

struct Schedule {
  double lr_max = 4e-4;
  int warmup_steps = 4000;
  // Constant schedules hold lr_max from step 1 (used for fine-tuning).
  bool constant = false;

  static Schedule fixed(double lr) { return {lr, 1, true}; }
};

inline double lr_at(const Schedule& s, long step) {
  if (step < 1) throw Error("lr_at: step must be >= 1");
  if (!(s.lr_max > 0)) throw Error("lr_at: lr_max must be > 0");
  if (s.constant) return s.lr_max;
  if (s.warmup_steps < 1) throw Error("lr_at: warmup_steps must be >= 1");
  if (step <= s.warmup_steps) return s.lr_max * static_cast<double>(step) / s.warmup_steps;
  return s.lr_max * std::sqrt(static_cast<double>(s.warmup_steps) / static_cast<double>(step));
}

// Trainable coordinates: everything, or whole rows of named tensors.
struct FreezeMask {
  struct Entry {
    std::string path;
    std::optional<std::pair<Eigen::Index, Eigen::Index>> rows;  // [begin, end)
  };

  bool all = true;
  std::vector<Entry> entries;

  static FreezeMask everything() { return {}; }
  static FreezeMask none() { return {false, {}}; }
  static FreezeMask row(const std::string& path, Eigen::Index r) { return {false, {{path, std::make_pair(r, r + 1)}}}; }
  static FreezeMask rows(const std::string& path, Eigen::Index begin, Eigen::Index end) {
    return {false, {{path, std::make_pair(begin, end)}}};
  }
  template <class Pred>
  static FreezeMask tensors_where(const std::vector<std::string>& names, Pred pred) {
    FreezeMask m{false, {}};
    for (const auto& n : names)
      if (pred(n)) m.entries.push_back({n, std::nullopt});
    return m;
  }

  // Row ranges of tensor `name` that are trainable.
  template <class T>
  std::vector<std::pair<Eigen::Index, Eigen::Index>> ranges(const std::string& name, const Mat<T>& t) const {
    if (all) return {{0, t.rows()}};
    std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
    for (const auto& e : entries) {
      if (e.path != name) continue;
      if (!e.rows) return {{0, t.rows()}};
      if (e.rows->first < 0 || e.rows->second > t.rows() || e.rows->first >= e.rows->second)
        throw Error("freeze mask: row range out of bounds for " + name);
      out.push_back(*e.rows);
    }
    return out;
  }

  template <class T>
  void check(const Parameters<T>& p) const {
    for (const auto& e : entries)
      if (!p.has(e.path)) throw Error("freeze mask: unknown parameter " + e.path);
  }

  template <class T>
  long long trainable_count(const Parameters<T>& p) const {
    check(p);
    long long n = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      std::vector<char> seen(static_cast<std::size_t>(p.at(i).rows()), 0);
      for (auto [b, e] : ranges(p.names()[i], p.at(i)))
        for (Eigen::Index r = b; r < e; ++r) seen[static_cast<std::size_t>(r)] = 1;
      for (char s : seen) n += s ? p.at(i).cols() : 0;
    }
    return n;
  }

  GradRequest grad_request() const {
    if (all) return GradRequest::all();
    std::vector<std::string> names;
    for (const auto& e : entries) names.push_back(e.path);
    return GradRequest::only(std::move(names));
  }
};

template <class T>
struct OptimizerState {
  Parameters<T> m, v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;

  static OptimizerState fresh(const Parameters<T>& p) {
    OptimizerState s;
    s.m = p.zeros_like();
    s.v = p.zeros_like();
    return s;
  }
};

// Adam with bias correction. Masked coordinates keep parameters and both
// moments untouched.
template <class T>
void adam_step(Parameters<T>& params, const Parameters<T>& grads, OptimizerState<T>& st, const FreezeMask& mask,
               double lr) {
  if (grads.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size())
    throw Error("adam_step: tensor count mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.at(i);
    const auto& g = grads.at(i);
    auto& m = st.m.at(i);
    auto& v = st.v.at(i);
    if (g.rows() != p.rows() || g.cols() != p.cols() || m.rows() != p.rows() || m.cols() != p.cols() ||
        v.rows() != p.rows() || v.cols() != p.cols())
      throw Error("adam_step: shape mismatch for " + params.names()[i]);
    for (auto [rb, re] : mask.ranges(params.names()[i], p)) {
      for (Eigen::Index r = rb; r < re; ++r) {
        for (Eigen::Index c = 0; c < p.cols(); ++c) {
          const double gi = static_cast<double>(g(r, c));
          const double mi = st.beta1 * static_cast<double>(m(r, c)) + (1.0 - st.beta1) * gi;
          const double vi = st.beta2 * static_cast<double>(v(r, c)) + (1.0 - st.beta2) * gi * gi;
          m(r, c) = static_cast<T>(mi);
          v(r, c) = static_cast<T>(vi);
          const double upd = lr * (mi / c1) / (std::sqrt(vi / c2) + st.eps);
          p(r, c) = static_cast<T>(static_cast<double>(p(r, c)) - upd);
        }
      }
    }
  }
}

template <class T>
struct Checkpoint {
  ModelConfig config;
  Parameters<T> params;
  long step = 0;
  std::uint64_t config_hash = 0;
};

namespace detail {

constexpr char kCkptMagic[8] = {'O', 'C', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

template <class V>
void put(std::ostream& o, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  o.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& in) {
  V v;
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw Error("checkpoint: truncated file");
  return v;
}

inline nlohmann::json extensions_json(const Extensions& e) {
  return {{"adapter_dim", e.adapter_dim}, {"lora_rank", e.lora_rank}, {"lora_alpha", e.lora_alpha}};
}

}  // namespace detail

// Layout (little-endian): "OCATCKPT", u32 version, u32 header length, JSON
// header {config, extensions}, u64 step, u64 config hash, u32 tensor count,
// then per tensor: u32 name length, name bytes, u32 rows, u32 cols,
// rows*cols float32 values in row-major order.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw Error("checkpoint: cannot write " + path.string());
  o.write(detail::kCkptMagic, 8);
  detail::put<std::uint32_t>(o, detail::kCkptVersion);
  const std::string header =
      nlohmann::json{{"config", ck.config.to_json()}, {"extensions", detail::extensions_json(ck.params.ext)}}.dump();
  detail::put<std::uint32_t>(o, static_cast<std::uint32_t>(header.size()));
  o.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put<std::uint64_t>(o, static_cast<std::uint64_t>(ck.step));
  detail::put<std::uint64_t>(o, ck.config_hash);
  detail::put<std::uint32_t>(o, static_cast<std::uint32_t>(ck.params.size()));
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& name = ck.params.names()[i];
    const auto& t = ck.params.at(i);
    detail::put<std::uint32_t>(o, static_cast<std::uint32_t>(name.size()));
    o.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(o, static_cast<std::uint32_t>(t.rows()));
    detail::put<std::uint32_t>(o, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index k = 0; k < t.size(); ++k) detail::put<float>(o, static_cast<float>(t.data()[k]));
  }
  if (!o) throw Error("checkpoint: write failed for " + path.string());
}

template <class T = float>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCkptMagic, 8) != 0) throw Error("checkpoint: bad magic in " + path.string());
  if (detail::get<std::uint32_t>(in) != detail::kCkptVersion) throw Error("checkpoint: unsupported version");
  std::string header(detail::get<std::uint32_t>(in), '\0');
  in.read(header.data(), static_cast<std::streamsize>(header.size()));
  const auto hj = nlohmann::json::parse(header);
  Checkpoint<T> ck;
  ck.config = ModelConfig::from_json(hj.at("config"));
  const auto& ej = hj.at("extensions");
  ck.params.ext.adapter_dim = ej.at("adapter_dim").get<int>();
  ck.params.ext.lora_rank = ej.at("lora_rank").get<int>();
  ck.params.ext.lora_alpha = ej.at("lora_alpha").get<double>();
  ck.step = static_cast<long>(detail::get<std::uint64_t>(in));
  ck.config_hash = detail::get<std::uint64_t>(in);
  const auto n = detail::get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(detail::get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rows = detail::get<std::uint32_t>(in);
    const auto cols = detail::get<std::uint32_t>(in);
    auto& t = ck.params.add(name, rows, cols);
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<T>(detail::get<float>(in));
  }
  return ck;
}

// Elementwise mean, accumulated in double.
template <class T>
Parameters<T> average_checkpoints(const std::vector<Checkpoint<T>>& cks) {
  if (cks.empty()) throw Error("average_checkpoints: empty list");
  for (const auto& c : cks) {
    if (c.config_hash != cks.front().config_hash) throw Error("average_checkpoints: config hash mismatch");
    if (c.params.names() != cks.front().params.names()) throw Error("average_checkpoints: tensor layout mismatch");
  }
  Parameters<double> sum = cks.front().params.template cast<double>();
  sum.set_zero();
  for (const auto& c : cks)
    for (std::size_t i = 0; i < sum.size(); ++i) sum.at(i) += c.params.at(i).template cast<double>();
  const double k = static_cast<double>(cks.size());
  for (std::size_t i = 0; i < sum.size(); ++i) sum.at(i) /= k;
  return sum.template cast<T>();
}

// Token-budget batches with length bucketing. Each epoch: seeded shuffle,
// stable sort by length, pack, shuffle batch order.
class BatchStream {
 public:
  BatchStream(std::vector<TaggedExample> data, int max_tokens, std::uint64_t seed)
      : data_(std::move(data)), max_tokens_(max_tokens), rng_(make_rng(seed, 0xba7c)) {
    if (data_.empty()) throw Error("batch stream: no examples");
    if (max_tokens_ < 1) throw Error("batch stream: max_tokens must be >= 1");
  }

  Batch next() {
    if (cursor_ >= batches_.size()) refill();
    const auto& idx = batches_[cursor_++];
    std::vector<const TaggedExample*> ptrs;
    for (std::size_t i : idx) ptrs.push_back(&data_[i]);
    return make_batch(ptrs);
  }

  std::size_t size() const { return data_.size(); }
  int epoch() const { return epoch_; }

 private:
  std::size_t len(std::size_t i) const {
    return std::max(data_[i].source_tokens.size(), data_[i].target_tokens.size());
  }

  void refill() {
    std::vector<std::size_t> order(data_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, rng_);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return len(a) < len(b); });
    batches_.clear();
    std::vector<std::size_t> cur;
    std::size_t cur_max = 0;
    for (std::size_t i : order) {
      const std::size_t m = std::max(cur_max, len(i));
      if (!cur.empty() && m * (cur.size() + 1) > static_cast<std::size_t>(max_tokens_)) {
        batches_.push_back(std::move(cur));
        cur.clear();
        cur_max = 0;
      }
      cur.push_back(i);
      cur_max = std::max(cur_max, len(i));
    }
    if (!cur.empty()) batches_.push_back(std::move(cur));
    shuffle(batches_, rng_);
    cursor_ = 0;
    ++epoch_;
  }

  std::vector<TaggedExample> data_;
  int max_tokens_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
};

struct TrainConfig {
  Schedule schedule;
  long steps = 0;
  std::uint64_t seed = 1;
  int log_every = 100;
  int ckpt_every = 0;
  // Keep only the most recent checkpoints in memory (0 = all).
  int keep_last = 0;
  std::string ckpt_dir;
  // Global L2 gradient-norm clip; 0 disables.
  double clip_norm = 0;
  bool verbose = false;
};

template <class T>
struct TrainResult {
  Parameters<T> params;
  std::vector<Checkpoint<T>> checkpoints;
  std::vector<std::pair<long, double>> loss_log;  // (step, mean loss over interval)
};

template <class T>
using CheckpointHook = std::function<void(long step, const Parameters<T>&)>;

template <class T>
TrainResult<T> train_loop(Parameters<T> params, const ModelConfig& cfg, BatchStream& data, const TrainConfig& tc,
                          const FreezeMask& mask = FreezeMask::everything(), OptimizerState<T>* state = nullptr,
                          const std::type_identity_t<CheckpointHook<T>>& on_checkpoint = {}) {
  mask.check(params);
  OptimizerState<T> local;
  if (!state) {
    local = OptimizerState<T>::fresh(params);
    state = &local;
  }
  TrainResult<T> res;
  if (!tc.ckpt_dir.empty()) std::filesystem::create_directories(tc.ckpt_dir);
  nlohmann::json meta = {{"config", cfg.to_json()}, {"config_hash", hex64(cfg.hash())}, {"seed", tc.seed},
                         {"checkpoints", nlohmann::json::array()}};
  const GradRequest req = mask.grad_request();
  Rng drop_rng = make_rng(tc.seed, 0xd40f);
  Parameters<T> grads = params.zeros_like();
  double interval_loss = 0;
  long interval_n = 0;
  for (long step = 1; step <= tc.steps; ++step) {
    Batch b = data.next();
    Transformer<T> model(cfg, params);
    typename Transformer<T>::Cache cache;
    auto out = model.forward(b, Mode::Train, &drop_rng, &cache);
    if (!std::isfinite(static_cast<double>(out.loss)))
      throw Error("non-finite loss at step " + std::to_string(step) + " (lr " + std::to_string(lr_at(tc.schedule, step)) +
                  ")");
    grads.set_zero();
    model.backward(b, out, cache, grads, req);
    if (tc.clip_norm > 0) {
      double sq = 0;
      for (std::size_t i = 0; i < grads.size(); ++i) sq += grads.at(i).template cast<double>().squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > tc.clip_norm)
        for (std::size_t i = 0; i < grads.size(); ++i) grads.at(i) *= static_cast<T>(tc.clip_norm / norm);
    }
    adam_step(params, grads, *state, mask, lr_at(tc.schedule, step));
    interval_loss += static_cast<double>(out.loss);
    ++interval_n;
    if ((tc.log_every > 0 && step % tc.log_every == 0) || step == tc.steps) {
      res.loss_log.emplace_back(step, interval_loss / static_cast<double>(interval_n));
      if (tc.verbose) std::cerr << "step " << step << " loss " << interval_loss / static_cast<double>(interval_n) << '\n';
      interval_loss = 0;
      interval_n = 0;
    }
    if (tc.ckpt_every > 0 && step % tc.ckpt_every == 0) {
      Checkpoint<T> ck{cfg, params, step, cfg.hash()};
      if (!tc.ckpt_dir.empty()) {
        const auto file = "ckpt_" + std::to_string(step) + ".bin";
        save_checkpoint(std::filesystem::path(tc.ckpt_dir) / file, ck);
        meta["checkpoints"].push_back({{"step", step}, {"file", file}});
      }
      if (on_checkpoint) on_checkpoint(step, params);
      res.checkpoints.push_back(std::move(ck));
      if (tc.keep_last > 0 && res.checkpoints.size() > static_cast<std::size_t>(tc.keep_last))
        res.checkpoints.erase(res.checkpoints.begin());
    }
  }
  if (!tc.ckpt_dir.empty()) {
    std::ofstream(std::filesystem::path(tc.ckpt_dir) / "meta.json") << meta.dump(2) << '\n';
  }
  res.params = std::move(params);
  return res;
}

}  // namespace ocat
