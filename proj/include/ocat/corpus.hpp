#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "ocat/common.hpp"
#include "ocat/text.hpp"
#include "ocat/tokenizer.hpp"

namespace ocat {

struct CorpusRecord {
  std::string source;
  std::string target;
  std::string corpus_id;
  std::optional<std::string> url;

  bool operator==(const CorpusRecord&) const = default;
};

enum class TagOrigin { NamedCorpus, UrlDomain, Synthetic, HighQuality };

inline std::string to_string(TagOrigin o) {
  switch (o) {
    case TagOrigin::NamedCorpus: return "named-corpus";
    case TagOrigin::UrlDomain: return "url-domain";
    case TagOrigin::Synthetic: return "synthetic";
    case TagOrigin::HighQuality: return "hq";
  }
  return "unknown";
}

inline TagOrigin tag_origin_from_string(const std::string& s) {
  if (s == "named-corpus") return TagOrigin::NamedCorpus;
  if (s == "url-domain") return TagOrigin::UrlDomain;
  if (s == "synthetic") return TagOrigin::Synthetic;
  if (s == "hq") return TagOrigin::HighQuality;
  throw Error("unknown tag origin: " + s);
}

inline std::string tag_for_corpus(const std::string& corpus_id) { return "<" + corpus_id + ">"; }

// Ordered tag inventory. Each corpus id maps to exactly one tag "<corpus_id>".
class TagRegistry {
 public:
  const std::string& add_corpus(const std::string& corpus_id, TagOrigin origin) {
    return add_tag(tag_for_corpus(corpus_id), origin);
  }

  const std::string& add_tag(const std::string& tag, TagOrigin origin) {
    if (tag.size() < 3 || tag.front() != '<' || tag.back() != '>')
      throw Error("tag must be delimited as <name>: " + tag);
    if (tag.find_first_of(" \t\n") != std::string::npos) throw Error("tag must not contain whitespace: " + tag);
    auto it = origin_.find(tag);
    if (it != origin_.end()) {
      if (it->second != origin) throw Error("tag re-registered with a different origin: " + tag);
      return *std::find(tags_.begin(), tags_.end(), tag);
    }
    origin_.emplace(tag, origin);
    tags_.push_back(tag);
    return tags_.back();
  }

  bool contains(const std::string& tag) const { return origin_.count(tag) != 0; }
  bool has_corpus(const std::string& corpus_id) const { return contains(tag_for_corpus(corpus_id)); }

  const std::string& tag_for(const std::string& corpus_id) const {
    auto it = std::find(tags_.begin(), tags_.end(), tag_for_corpus(corpus_id));
    if (it == tags_.end()) throw Error("corpus not registered: " + corpus_id);
    return *it;
  }

  TagOrigin origin(const std::string& tag) const {
    auto it = origin_.find(tag);
    if (it == origin_.end()) throw Error("unregistered tag: " + tag);
    return it->second;
  }

  const std::vector<std::string>& tags() const { return tags_; }
  std::size_t index_of(const std::string& tag) const {
    auto it = std::find(tags_.begin(), tags_.end(), tag);
    if (it == tags_.end()) throw Error("unregistered tag: " + tag);
    return static_cast<std::size_t>(it - tags_.begin());
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& t : tags_) j.push_back({{"tag", t}, {"origin", to_string(origin_.at(t))}});
    return j;
  }

  static TagRegistry from_json(const nlohmann::json& j) {
    TagRegistry r;
    for (const auto& e : j) r.add_tag(e.at("tag").get<std::string>(), tag_origin_from_string(e.at("origin")));
    return r;
  }

 private:
  std::vector<std::string> tags_;
  std::map<std::string, TagOrigin> origin_;
};

struct MixtureSpec {
  long long per_tag_cap = 1;
  std::uint64_t shuffle_seed = 0;
};

struct MixtureItem {
  std::string tag;
  CorpusRecord record;

  bool operator==(const MixtureItem&) const = default;
};

struct IngestResult {
  std::vector<CorpusRecord> records;
  std::size_t lines = 0;
  std::size_t malformed = 0;
};

// One record per line "source \t target [\t url]". Lines with fewer than two
// fields, or with an empty side after trimming, are skipped and counted.
inline IngestResult ingest_tsv(std::istream& in, const std::string& corpus_id) {
  IngestResult r;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++r.lines;
    auto fields = text::split(line, '\t');
    if (fields.size() < 2) {
      ++r.malformed;
      continue;
    }
    CorpusRecord rec{text::trim(fields[0]), text::trim(fields[1]), corpus_id, std::nullopt};
    if (rec.source.empty() || rec.target.empty()) {
      ++r.malformed;
      continue;
    }
    if (fields.size() >= 3 && !text::trim(fields[2]).empty()) rec.url = text::trim(fields[2]);
    r.records.push_back(std::move(rec));
  }
  return r;
}

inline IngestResult ingest_tsv(const std::filesystem::path& path, const std::string& corpus_id) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path.string());
  return ingest_tsv(in, corpus_id);
}

inline void write_tsv(std::ostream& out, const std::vector<CorpusRecord>& records) {
  for (const auto& r : records) {
    out << r.source << '\t' << r.target;
    if (r.url) out << '\t' << *r.url;
    out << '\n';
  }
}

inline void write_tsv(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_tsv(out, records);
}

// Second-level label of the registrable domain, lowercased:
// "https://www.baunat.com/en/x" -> "baunat", "shop.example.co.uk" -> "example".
inline std::string url_domain_label(const std::string& url) {
  std::string host = url;
  if (auto p = host.find("://"); p != std::string::npos) host = host.substr(p + 3);
  if (auto p = host.find_first_of("/?#"); p != std::string::npos) host = host.substr(0, p);
  if (auto p = host.rfind('@'); p != std::string::npos) host = host.substr(p + 1);
  if (auto p = host.find(':'); p != std::string::npos) host = host.substr(0, p);
  host = text::to_lower_ascii(text::trim(host));
  while (!host.empty() && host.back() == '.') host.pop_back();
  if (host.empty()) throw Error("url has no host: " + url);
  auto labels = text::split(host, '.');
  if (labels.size() == 1) return labels[0];
  if (std::all_of(host.begin(), host.end(), [](char c) { return (c >= '0' && c <= '9') || c == '.'; }))
    return host;
  static const std::array<std::string, 14> second_level{"co", "com", "net", "org", "gov", "edu", "ac",
                                                        "or", "ne",  "go",  "mil", "nom", "sch", "ltd"};
  const std::string& sld = labels[labels.size() - 2];
  const bool cc_tld = labels.back().size() == 2;
  if (labels.size() >= 3 && cc_tld && std::find(second_level.begin(), second_level.end(), sld) != second_level.end())
    return labels[labels.size() - 3];
  return sld;
}

// Ranks domains by record count (desc, ties lexicographic), tags the top_k as
// "<{corpus}-{domain}>" and pools the rest under "<{corpus}-other>". Output
// records carry corpus_id "{corpus}-{domain}" / "{corpus}-other".
inline std::map<std::string, std::vector<CorpusRecord>> split_by_url_domain(const std::vector<CorpusRecord>& records,
                                                                            std::size_t top_k) {
  if (top_k < 1) throw Error("split_by_url_domain: top_k must be >= 1");
  std::map<std::string, std::size_t> counts;
  std::vector<std::string> domain_of(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.url) throw Error("split_by_url_domain: record without url (filter first)");
    if (r.corpus_id != records.front().corpus_id)
      throw Error("split_by_url_domain: records from more than one corpus");
    domain_of[i] = url_domain_label(*r.url);
    ++counts[domain_of[i]];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::map<std::string, bool> kept;
  for (std::size_t i = 0; i < ranked.size() && i < top_k; ++i) kept[ranked[i].first] = true;

  std::map<std::string, std::vector<CorpusRecord>> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string bucket = kept.count(domain_of[i]) ? domain_of[i] : std::string("other");
    CorpusRecord r = records[i];
    r.corpus_id = records[i].corpus_id + "-" + bucket;
    out[tag_for_corpus(r.corpus_id)].push_back(std::move(r));
  }
  return out;
}

// Each tag contributes min(count, cap) records chosen uniformly without
// replacement; the union is then shuffled. Deterministic for a fixed seed.
inline std::vector<MixtureItem> build_mixture(const std::map<std::string, std::vector<CorpusRecord>>& corpora,
                                              const MixtureSpec& spec, const TagRegistry& registry) {
  if (spec.per_tag_cap < 1) throw Error("per_tag_cap must be >= 1");
  std::vector<MixtureItem> out;
  for (const auto& [tag, recs] : corpora) {
    if (!registry.contains(tag)) throw Error("build_mixture: unregistered tag " + tag);
    std::vector<std::size_t> idx(recs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto cap = static_cast<std::size_t>(spec.per_tag_cap);
    if (idx.size() > cap) {
      Rng rng = make_rng(spec.shuffle_seed, fnv1a64(tag));
      // Partial Fisher-Yates, then restore corpus order among the chosen.
      for (std::size_t i = 0; i < cap; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
      idx.resize(cap);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) out.push_back({tag, recs[i]});
  }
  Rng rng = make_rng(spec.shuffle_seed, 0x5eed);
  shuffle(out, rng);
  return out;
}

inline nlohmann::json mixture_manifest(const std::map<std::string, std::vector<CorpusRecord>>& corpora,
                                       const std::vector<MixtureItem>& mixture, const MixtureSpec& spec) {
  nlohmann::json per_tag = nlohmann::json::object();
  for (const auto& [tag, recs] : corpora) per_tag[tag] = {{"available", recs.size()}, {"selected", 0}};
  for (const auto& m : mixture) per_tag[m.tag]["selected"] = per_tag[m.tag]["selected"].get<long long>() + 1;
  return {{"per_tag", per_tag}, {"cap", spec.per_tag_cap}, {"seed", spec.shuffle_seed}, {"total", mixture.size()}};
}

constexpr TokenId kNoTag = -1;

// source ends in [tag, EOS] (or just EOS for untagged examples); target ends
// in EOS and never contains a tag.
struct TaggedExample {
  TokenIds source_tokens;
  TokenIds target_tokens;
  TokenId tag_id = kNoTag;

  bool operator==(const TaggedExample&) const = default;
};

inline TaggedExample make_example(const std::string& source, const std::string& target, TokenId tag_id,
                                  const Tokenizer& tok) {
  TaggedExample ex;
  ex.source_tokens = tok.encode(source);
  if (ex.source_tokens.empty()) throw Error("empty source");
  ex.target_tokens = tok.encode(target);
  if (ex.target_tokens.empty()) throw Error("empty target");
  if (tag_id != kNoTag) {
    if (!tok.vocab().is_tag(tag_id)) throw Error("inject_tag: id is not a reserved tag");
    ex.source_tokens.push_back(tag_id);
  }
  ex.source_tokens.push_back(Vocabulary::kEos);
  ex.target_tokens.push_back(Vocabulary::kEos);
  ex.tag_id = tag_id;
  return ex;
}

inline TaggedExample inject_tag(const CorpusRecord& record, const std::string& tag, const Tokenizer& tok) {
  return make_example(record.source, record.target, tok.vocab().tag_id(tag), tok);
}

inline TaggedExample inject_tag(const CorpusRecord& record, const TagRegistry& registry, const Tokenizer& tok) {
  const std::string& tag = registry.tag_for(record.corpus_id);
  return inject_tag(record, tag, tok);
}

inline TaggedExample make_untagged(const CorpusRecord& record, const Tokenizer& tok) {
  return make_example(record.source, record.target, kNoTag, tok);
}

}  // namespace ocat
