#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ocat/transformer.hpp"

namespace oracle {

// Character n-gram chrF by direct substring counting. ASCII input; spaces
// are dropped before counting. Orders with no n-grams contribute zero.
inline double chrf(std::string hyp, std::string ref, int order, double beta) {
  hyp.erase(std::remove(hyp.begin(), hyp.end(), ' '), hyp.end());
  ref.erase(std::remove(ref.begin(), ref.end(), ' '), ref.end());
  auto occurrences = [](const std::string& s, const std::string& g) {
    long long c = 0;
    for (std::size_t i = 0; i + g.size() <= s.size(); ++i)
      if (s.compare(i, g.size(), g) == 0) ++c;
    return c;
  };
  double p = 0, r = 0;
  for (int n = 1; n <= order; ++n) {
    const auto un = static_cast<std::size_t>(n);
    const long long hn = hyp.size() >= un ? static_cast<long long>(hyp.size() - un + 1) : 0;
    const long long rn = ref.size() >= un ? static_cast<long long>(ref.size() - un + 1) : 0;
    long long m = 0;
    std::vector<std::string> seen;
    for (std::size_t i = 0; i + un <= hyp.size(); ++i) {
      const std::string g = hyp.substr(i, un);
      if (std::find(seen.begin(), seen.end(), g) != seen.end()) continue;
      seen.push_back(g);
      m += std::min(occurrences(hyp, g), occurrences(ref, g));
    }
    p += hn ? static_cast<double>(m) / static_cast<double>(hn) : 0.0;
    r += rn ? static_cast<double>(m) / static_cast<double>(rn) : 0.0;
  }
  p /= order;
  r /= order;
  const double b2 = beta * beta;
  if (b2 * p + r <= 0) return 0.0;
  return 100.0 * (1 + b2) * p * r / (b2 * p + r);
}

// One bias-corrected Adam update from zero moments.
inline double adam_first_step(double x, double g, double lr, double b1, double b2, double eps) {
  const double m = (1 - b1) * g;
  const double v = (1 - b2) * g * g;
  const double mhat = m / (1 - b1);
  const double vhat = v / (1 - b2);
  return x - lr * mhat / (std::sqrt(vhat) + eps);
}

struct GradCheck {
  std::string worst_tensor;
  double worst = 0;
};

// Central differences against backward() for every coordinate of every
// tensor. Per tensor: max |a - f| / max(|a|, |f|, floor) over coordinates.
inline GradCheck finite_difference(const ocat::ModelConfig& cfg, ocat::Parameters<double>& p, const ocat::Batch& b,
                                   double h = 1e-5, double floor = 1e-6) {
  ocat::Transformer<double> model(cfg, p);
  typename ocat::Transformer<double>::Cache cache;
  const auto out = model.forward(b, ocat::Mode::Eval, nullptr, &cache);
  auto g = p.zeros_like();
  model.backward(b, out, cache, g);
  GradCheck res;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double worst = 0;
    for (Eigen::Index k = 0; k < p.at(i).size(); ++k) {
      double& x = p.at(i).data()[k];
      const double x0 = x;
      x = x0 + h;
      const double lp = model.forward(b, ocat::Mode::Eval).loss;
      x = x0 - h;
      const double lm = model.forward(b, ocat::Mode::Eval).loss;
      x = x0;
      const double f = (lp - lm) / (2 * h);
      const double a = g.at(i).data()[k];
      worst = std::max(worst, std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor}));
    }
    if (worst >= res.worst) {
      res.worst = worst;
      res.worst_tensor = p.names()[i];
    }
  }
  return res;
}

// 2+2 layers, d=16: the gradient-check model.
inline ocat::ModelConfig grad_config(bool pre_norm = false) {
  ocat::ModelConfig c;
  c.d_model = 16;
  c.d_ffn = 32;
  c.n_heads = 2;
  c.head_dim = 8;
  c.vocab_size = 20;
  c.max_len = 16;
  c.pre_norm = pre_norm;
  return c;
}

inline ocat::Batch grad_batch() {
  std::vector<ocat::TaggedExample> ex(3);
  ex[0].source_tokens = {5, 6, 7, 2};
  ex[0].target_tokens = {8, 9, 2};
  ex[1].source_tokens = {5, 2};
  ex[1].target_tokens = {10, 11, 12, 13, 2};
  ex[2].source_tokens = {15, 16, 17, 18, 19, 2};
  ex[2].target_tokens = {2};
  return ocat::make_batch(ex);
}

// Biases, LN vectors and zero-initialised extension tensors get
// deterministic offsets so no gradient path sits at a special point.
inline void perturb(ocat::Parameters<double>& p) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& n = p.names()[i];
    const bool zero_ext = n.find("adapter.up") != std::string::npos || n.find("lora_b") != std::string::npos;
    if (!zero_ext && p.at(i).rows() != 1) continue;
    for (Eigen::Index k = 0; k < p.at(i).size(); ++k)
      p.at(i).data()[k] += 0.1 * std::sin(static_cast<double>(3 * k + 7 * static_cast<Eigen::Index>(i)));
  }
}

}  // namespace oracle
