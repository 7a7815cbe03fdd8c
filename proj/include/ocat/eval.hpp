#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ocat/common.hpp"
#include "ocat/text.hpp"

namespace ocat {

struct ChrFConfig {
  int char_order = 6;
  int word_order = 0;
  double beta = 2.0;
  bool remove_whitespace = true;
  // When set, precision/recall are averaged only over orders where both
  // sides have n-grams (sacrebleu 2.x behaviour). Off by default.
  bool effective_order = false;

  void validate() const {
    if (char_order < 1) throw Error("chrF: char_order must be >= 1");
    if (word_order < 0) throw Error("chrF: word_order must be >= 0");
    if (!(beta > 0)) throw Error("chrF: beta must be > 0");
  }
  int orders() const { return char_order + word_order; }
};

inline std::string metric_signature(const ChrFConfig& c) {
  std::ostringstream s;
  s << "chrF" << c.beta << "|nrefs:1|case:mixed|eff:" << (c.effective_order ? "yes" : "no")
    << "|nc:" << c.char_order << "|nw:" << c.word_order << "|tok:13a|space:" << (c.remove_whitespace ? "no" : "yes")
    << "|impl:ocat";
  return s.str();
}

struct OrderCounts {
  long long matched = 0;
  long long hyp = 0;
  long long ref = 0;

  bool operator==(const OrderCounts&) const = default;
};

// Character orders first (1..char_order), then word orders.
struct SegmentStats {
  std::vector<OrderCounts> orders;

  SegmentStats& operator+=(const SegmentStats& o) {
    if (orders.size() < o.orders.size()) orders.resize(o.orders.size());
    for (std::size_t i = 0; i < o.orders.size(); ++i) {
      orders[i].matched += o.orders[i].matched;
      orders[i].hyp += o.orders[i].hyp;
      orders[i].ref += o.orders[i].ref;
    }
    return *this;
  }
  bool operator==(const SegmentStats&) const = default;
};

namespace detail {

inline std::vector<std::string> chrf_units(const std::string& s, bool remove_whitespace) {
  std::vector<std::string> out;
  for (auto& cp : text::code_points(s)) {
    if (remove_whitespace && text::is_space(text::decode_cp(cp))) continue;
    out.push_back(std::move(cp));
  }
  return out;
}

inline std::map<std::string, long long> ngram_counts(const std::vector<std::string>& units, int n,
                                                     const std::string& joiner) {
  std::map<std::string, long long> counts;
  const auto un = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + un <= units.size(); ++i) {
    std::string g = units[i];
    for (std::size_t k = 1; k < un; ++k) g += joiner + units[i + k];
    ++counts[g];
  }
  return counts;
}

inline OrderCounts match_counts(const std::vector<std::string>& hyp, const std::vector<std::string>& ref, int n,
                                const std::string& joiner) {
  OrderCounts oc;
  const auto h = ngram_counts(hyp, n, joiner);
  const auto r = ngram_counts(ref, n, joiner);
  for (const auto& [g, c] : h) {
    oc.hyp += c;
    if (auto it = r.find(g); it != r.end()) oc.matched += std::min(c, it->second);
  }
  for (const auto& [g, c] : r) oc.ref += c;
  return oc;
}

}  // namespace detail

inline SegmentStats chrf_stats(const std::string& hyp, const std::string& ref, const ChrFConfig& cfg) {
  cfg.validate();
  SegmentStats st;
  const auto hc = detail::chrf_units(hyp, cfg.remove_whitespace);
  const auto rc = detail::chrf_units(ref, cfg.remove_whitespace);
  for (int n = 1; n <= cfg.char_order; ++n) st.orders.push_back(detail::match_counts(hc, rc, n, ""));
  if (cfg.word_order > 0) {
    const auto hw = text::split_whitespace(hyp);
    const auto rw = text::split_whitespace(ref);
    for (int n = 1; n <= cfg.word_order; ++n) st.orders.push_back(detail::match_counts(hw, rw, n, " "));
  }
  return st;
}

// F-beta over order-averaged precision and recall, scaled to [0, 100].
inline double chrf_from_stats(const SegmentStats& st, const ChrFConfig& cfg) {
  double p = 0, r = 0;
  int used = 0;
  for (const auto& o : st.orders) {
    if (cfg.effective_order && (o.hyp == 0 || o.ref == 0)) continue;
    p += o.hyp > 0 ? static_cast<double>(o.matched) / static_cast<double>(o.hyp) : 0.0;
    r += o.ref > 0 ? static_cast<double>(o.matched) / static_cast<double>(o.ref) : 0.0;
    ++used;
  }
  if (used == 0) return 0.0;
  p /= used;
  r /= used;
  const double b2 = cfg.beta * cfg.beta;
  const double denom = b2 * p + r;
  if (denom <= 0) return 0.0;
  return 100.0 * (1 + b2) * p * r / denom;
}

struct SegmentScore {
  double score;
  SegmentStats stats;
};

inline SegmentScore chrf_segment(const std::string& hyp, const std::string& ref, const ChrFConfig& cfg = {}) {
  SegmentStats st = chrf_stats(hyp, ref, cfg);
  const bool both_empty = std::all_of(st.orders.begin(), st.orders.end(),
                                      [](const OrderCounts& o) { return o.hyp == 0 && o.ref == 0; });
  if (both_empty) {
    // Identity convention: scores 100, adds nothing to corpus counts.
    return {100.0, st};
  }
  return {chrf_from_stats(st, cfg), st};
}

inline std::vector<SegmentStats> chrf_segment_stats(const std::vector<std::string>& hyps,
                                                    const std::vector<std::string>& refs, const ChrFConfig& cfg) {
  if (hyps.size() != refs.size()) throw Error("chrF: hypothesis/reference count mismatch");
  std::vector<SegmentStats> out;
  out.reserve(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) out.push_back(chrf_stats(hyps[i], refs[i], cfg));
  return out;
}

// Micro-aggregated corpus chrF: counts summed over segments, then one F.
inline double chrf_corpus(const std::vector<std::string>& hyps, const std::vector<std::string>& refs,
                          const ChrFConfig& cfg = {}) {
  if (hyps.size() != refs.size()) throw Error("chrF: hypothesis/reference count mismatch");
  if (hyps.empty()) throw Error("chrF: empty corpus");
  SegmentStats total;
  total.orders.resize(static_cast<std::size_t>(cfg.orders()));
  for (const auto& s : chrf_segment_stats(hyps, refs, cfg)) total += s;
  return chrf_from_stats(total, cfg);
}

struct SignificanceResult {
  double delta = 0;
  double p_value = 1;
  int n_resamples = 0;
  std::uint64_t seed = 0;
};

// One-sided paired bootstrap: p is the fraction of resamples where
// score(A) - score(B) <= 0.
inline SignificanceResult paired_bootstrap(const std::vector<std::string>& hyps_a,
                                           const std::vector<std::string>& hyps_b,
                                           const std::vector<std::string>& refs, const ChrFConfig& cfg,
                                           int n_resamples, std::uint64_t seed) {
  if (hyps_a.size() != refs.size() || hyps_b.size() != refs.size())
    throw Error("paired_bootstrap: length mismatch");
  if (refs.empty()) throw Error("paired_bootstrap: empty test set");
  if (n_resamples < 100) throw Error("paired_bootstrap: n_resamples must be >= 100");
  const auto sa = chrf_segment_stats(hyps_a, refs, cfg);
  const auto sb = chrf_segment_stats(hyps_b, refs, cfg);
  auto corpus = [&](const std::vector<SegmentStats>& s, const std::vector<std::size_t>* idx) {
    SegmentStats t;
    t.orders.resize(static_cast<std::size_t>(cfg.orders()));
    if (idx)
      for (std::size_t i : *idx) t += s[i];
    else
      for (const auto& x : s) t += x;
    return chrf_from_stats(t, cfg);
  };
  SignificanceResult res;
  res.delta = corpus(sa, nullptr) - corpus(sb, nullptr);
  res.n_resamples = n_resamples;
  res.seed = seed;
  Rng rng = make_rng(seed, 0xb007);
  std::vector<std::size_t> idx(refs.size());
  int not_better = 0;
  for (int r = 0; r < n_resamples; ++r) {
    for (auto& i : idx) i = uniform_index(rng, refs.size());
    if (corpus(sa, &idx) - corpus(sb, &idx) <= 0) ++not_better;
  }
  res.p_value = static_cast<double>(not_better) / n_resamples;
  return res;
}

// Generic tabular report: typed cells, optional bold flags, and a metadata
// block carrying signature, seeds and config hash.
struct Report {
  std::string name;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<std::string> columns;
  std::vector<std::vector<nlohmann::ordered_json>> rows;
  std::vector<std::vector<bool>> bold;

  void add_row(std::vector<nlohmann::ordered_json> cells) {
    if (cells.size() != columns.size()) throw Error("report row width mismatch");
    bold.emplace_back(cells.size(), false);
    rows.push_back(std::move(cells));
  }

  std::size_t column(const std::string& c) const {
    auto it = std::find(columns.begin(), columns.end(), c);
    if (it == columns.end()) throw Error("report has no column " + c);
    return static_cast<std::size_t>(it - columns.begin());
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["name"] = name;
    j["meta"] = meta;
    j["columns"] = columns;
    nlohmann::ordered_json rs = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      nlohmann::ordered_json r = nlohmann::ordered_json::object();
      for (std::size_t c = 0; c < columns.size(); ++c) r[columns[c]] = rows[i][c];
      nlohmann::ordered_json b = nlohmann::ordered_json::array();
      for (std::size_t c = 0; c < columns.size(); ++c)
        if (bold[i][c]) b.push_back(columns[c]);
      if (!b.empty()) r["bold"] = b;
      rs.push_back(r);
    }
    j["rows"] = rs;
    return j;
  }

  static Report from_json(const nlohmann::ordered_json& j) {
    Report r;
    r.name = j.at("name").get<std::string>();
    r.meta = j.at("meta");
    r.columns = j.at("columns").get<std::vector<std::string>>();
    for (const auto& row : j.at("rows")) {
      std::vector<nlohmann::ordered_json> cells;
      for (const auto& c : r.columns) cells.push_back(row.at(c));
      r.add_row(std::move(cells));
      if (row.contains("bold"))
        for (const auto& b : row.at("bold")) r.bold.back()[r.column(b.get<std::string>())] = true;
    }
    return r;
  }

  // Metadata lines start with '#'; bold cells are wrapped in '*'.
  void write_tsv(std::ostream& out) const {
    for (const auto& [k, v] : meta.items()) out << "# " << k << ": " << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "\t" : "") << columns[c];
    out << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < columns.size(); ++c) {
        if (c) out << '\t';
        const auto& v = rows[i][c];
        std::string cell;
        if (v.is_number_float()) {
          const double x = v.get<double>();
          std::ostringstream s;
          if (x != 0 && std::abs(x) < 0.01) {
            s << x;
          } else {
            s.setf(std::ios::fixed);
            s.precision(2);
            s << x;
          }
          cell = s.str();
        } else if (v.is_string()) {
          cell = v.get<std::string>();
        } else {
          cell = v.dump();
        }
        out << (bold[i][c] ? "*" + cell + "*" : cell);
      }
      out << '\n';
    }
  }
};

struct SystemOutputs {
  std::string system;
  std::string tag;
  // testset name -> hypotheses
  std::map<std::string, std::vector<std::string>> hyps;
};

struct ScoreTableOptions {
  ChrFConfig chrf;
  int n_resamples = 1000;
  std::uint64_t seed = 12345;
  double alpha = 0.05;
};

// Top-1 in a column is bold when it beats the runner-up with p <= alpha.
// Equal scores keep row order.
inline Report score_table(const std::vector<SystemOutputs>& systems,
                          const std::vector<std::pair<std::string, std::vector<std::string>>>& testsets,
                          const ScoreTableOptions& opt = {}) {
  Report rep;
  rep.name = "score_table";
  rep.meta["metric"] = metric_signature(opt.chrf);
  rep.meta["bootstrap_resamples"] = opt.n_resamples;
  rep.meta["bootstrap_seed"] = opt.seed;
  rep.meta["alpha"] = opt.alpha;
  rep.columns = {"system", "tag"};
  for (const auto& [name, refs] : testsets) rep.columns.push_back(name);
  for (const auto& s : systems) {
    std::vector<nlohmann::ordered_json> cells{s.system, s.tag};
    for (const auto& [name, refs] : testsets) cells.emplace_back(chrf_corpus(s.hyps.at(name), refs, opt.chrf));
    rep.add_row(std::move(cells));
  }
  if (systems.size() < 2) return rep;
  for (std::size_t t = 0; t < testsets.size(); ++t) {
    const std::size_t col = 2 + t;
    std::vector<std::size_t> order(systems.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return rep.rows[a][col].get<double>() > rep.rows[b][col].get<double>();
    });
    const auto& name = testsets[t].first;
    const auto& refs = testsets[t].second;
    const auto sig = paired_bootstrap(systems[order[0]].hyps.at(name), systems[order[1]].hyps.at(name), refs,
                                      opt.chrf, opt.n_resamples, opt.seed);
    if (sig.p_value <= opt.alpha) rep.bold[order[0]][col] = true;
  }
  return rep;
}

}  // namespace ocat
