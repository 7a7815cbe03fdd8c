#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ocat/common.hpp"
#include "ocat/text.hpp"

namespace ocat {

// Word-initial marker, prepended to every whitespace-delimited word.
inline const std::string kWordMarker = "\xE2\x96\x81";  // U+2581

// Joint subword inventory. Layout: ids 0..3 are PAD, BOS, EOS, UNK; then a
// contiguous block of reserved tag tokens; then single characters; then
// merged units in merge order.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr int kNumSpecials = 4;

  static const std::vector<std::string>& special_strings() {
    static const std::vector<std::string> s{"<pad>", "<s>", "</s>", "<unk>"};
    return s;
  }

  Vocabulary() = default;

  Vocabulary(std::vector<std::string> tags, std::vector<std::string> units_after_tags) : num_tags_(tags.size()) {
    units_ = special_strings();
    for (auto& t : tags) units_.push_back(std::move(t));
    for (auto& u : units_after_tags) units_.push_back(std::move(u));
    for (std::size_t i = 0; i < units_.size(); ++i) {
      if (!index_.emplace(units_[i], static_cast<TokenId>(i)).second)
        throw Error("duplicate vocabulary unit: " + units_[i]);
    }
  }

  int size() const { return static_cast<int>(units_.size()); }
  int num_tags() const { return static_cast<int>(num_tags_); }
  const std::vector<std::string>& units() const { return units_; }
  const std::string& unit(TokenId id) const { return units_.at(static_cast<std::size_t>(id)); }

  std::vector<std::string> tags() const {
    return {units_.begin() + kNumSpecials, units_.begin() + kNumSpecials + static_cast<std::ptrdiff_t>(num_tags_)};
  }

  bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecials; }
  bool is_tag(TokenId id) const { return id >= kNumSpecials && id < kNumSpecials + static_cast<TokenId>(num_tags_); }
  bool is_reserved(TokenId id) const { return is_special(id) || is_tag(id); }

  bool has_tag(const std::string& tag) const {
    auto it = index_.find(tag);
    return it != index_.end() && is_tag(it->second);
  }

  TokenId tag_id(const std::string& tag) const {
    auto it = index_.find(tag);
    if (it == index_.end() || !is_tag(it->second)) throw Error("unregistered tag: " + tag);
    return it->second;
  }

  // Id of a non-reserved subword unit, if present.
  std::optional<TokenId> unit_id(const std::string& unit) const {
    auto it = index_.find(unit);
    if (it == index_.end() || is_reserved(it->second)) return std::nullopt;
    return it->second;
  }

  bool operator==(const Vocabulary& o) const { return units_ == o.units_ && num_tags_ == o.num_tags_; }

 private:
  std::vector<std::string> units_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t num_tags_ = 0;
};

struct TokenizerModel {
  std::vector<std::pair<std::string, std::string>> merges;
  std::string normalization = "nfc+collapse-whitespace";

  bool operator==(const TokenizerModel&) const = default;
};

class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(TokenizerModel model, Vocabulary vocab) : model_(std::move(model)), vocab_(std::move(vocab)) {
    for (std::size_t i = 0; i < model_.merges.size(); ++i) {
      rank_.emplace(pair_key(model_.merges[i].first, model_.merges[i].second), static_cast<int>(i));
    }
  }

  const TokenizerModel& model() const { return model_; }
  const Vocabulary& vocab() const { return vocab_; }

  // Raw text never yields reserved ids: literal tag strings are segmented as
  // ordinary characters.
  TokenIds encode(std::string_view raw) const {
    TokenIds ids;
    for (const std::string& word : text::split_whitespace(text::normalize(raw))) {
      for (const std::string& piece : segment_word(word)) {
        auto id = vocab_.unit_id(piece);
        ids.push_back(id ? *id : Vocabulary::kUnk);
      }
    }
    return ids;
  }

  std::vector<std::string> encode_pieces(std::string_view raw) const {
    std::vector<std::string> out;
    for (TokenId id : encode(raw)) out.push_back(vocab_.unit(id));
    return out;
  }

  // PAD/BOS/EOS are dropped; tags and UNK are rendered as standalone words.
  std::string decode(const TokenIds& ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id < 0 || id >= vocab_.size()) throw Error("decode: token id out of range");
      if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
      if (vocab_.is_reserved(id)) {
        out += kWordMarker + vocab_.unit(id);
        continue;
      }
      out += vocab_.unit(id);
    }
    std::string s;
    std::size_t pos = 0;
    while (pos < out.size()) {
      if (out.compare(pos, kWordMarker.size(), kWordMarker) == 0) {
        s.push_back(' ');
        pos += kWordMarker.size();
      } else {
        s.push_back(out[pos++]);
      }
    }
    return text::trim(s);
  }

  // Vocabulary file: one unit per line, line number = id. The JSON sidecar
  // carries the special/tag layout and the ordered merge list.
  void save(const std::filesystem::path& vocab_file, const std::filesystem::path& sidecar) const {
    std::ofstream v(vocab_file);
    if (!v) throw Error("cannot write " + vocab_file.string());
    for (const auto& u : vocab_.units()) v << u << '\n';
    nlohmann::json j;
    j["specials"] = {{"pad", Vocabulary::kPad}, {"bos", Vocabulary::kBos}, {"eos", Vocabulary::kEos},
                     {"unk", Vocabulary::kUnk}};
    nlohmann::json tags = nlohmann::json::object();
    for (const auto& t : vocab_.tags()) tags[t] = vocab_.tag_id(t);
    j["tags"] = tags;
    j["tag_order"] = vocab_.tags();
    j["size"] = vocab_.size();
    j["normalization"] = model_.normalization;
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : model_.merges) merges.push_back({a, b});
    j["merges"] = merges;
    std::ofstream s(sidecar);
    if (!s) throw Error("cannot write " + sidecar.string());
    s << j.dump(1) << '\n';
  }

  static Tokenizer load(const std::filesystem::path& vocab_file, const std::filesystem::path& sidecar) {
    std::ifstream v(vocab_file);
    if (!v) throw Error("cannot read " + vocab_file.string());
    std::vector<std::string> units;
    for (std::string line; std::getline(v, line);) units.push_back(line);
    std::ifstream s(sidecar);
    if (!s) throw Error("cannot read " + sidecar.string());
    const auto j = nlohmann::json::parse(s);
    const auto tag_order = j.at("tag_order").get<std::vector<std::string>>();
    if (units.size() < Vocabulary::kNumSpecials + tag_order.size()) throw Error("vocabulary file too short");
    std::vector<std::string> rest(units.begin() + Vocabulary::kNumSpecials + static_cast<std::ptrdiff_t>(tag_order.size()),
                                  units.end());
    TokenizerModel model;
    for (const auto& m : j.at("merges")) model.merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    model.normalization = j.value("normalization", model.normalization);
    Vocabulary vocab(tag_order, std::move(rest));
    if (vocab.size() != j.at("size").get<int>()) throw Error("vocabulary size mismatch with sidecar");
    return Tokenizer(std::move(model), std::move(vocab));
  }

  std::vector<std::string> segment_word(const std::string& word) const {
    std::vector<std::string> sym;
    sym.push_back(kWordMarker);
    for (auto& cp : text::code_points(word)) sym.push_back(std::move(cp));
    while (sym.size() > 1) {
      int best_rank = -1;
      std::size_t best_pos = 0;
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
        auto it = rank_.find(pair_key(sym[i], sym[i + 1]));
        if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best_pos = i;
        }
      }
      if (best_rank < 0) break;
      sym[best_pos] += sym[best_pos + 1];
      sym.erase(sym.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
    return sym;
  }

 private:
  static std::string pair_key(const std::string& a, const std::string& b) { return a + '\x01' + b; }

  TokenizerModel model_;
  Vocabulary vocab_;
  std::unordered_map<std::string, int> rank_;
};

// Frequency-greedy BPE. Produces exactly vocab_size entries (specials +
// reserved tags + characters + merges). Ties between equally frequent pairs go
// to the lexicographically smallest (left, right).
inline Tokenizer train_subword(const std::vector<std::string>& corpus_text, int vocab_size,
                               const std::vector<std::string>& reserved) {
  std::map<std::string, long long> word_freq;
  for (const auto& line : corpus_text)
    for (auto& w : text::split_whitespace(text::normalize(line))) ++word_freq[w];

  std::vector<std::string> forbidden = Vocabulary::special_strings();
  forbidden.insert(forbidden.end(), reserved.begin(), reserved.end());
  auto is_forbidden = [&](const std::string& u) {
    return std::find(forbidden.begin(), forbidden.end(), u) != forbidden.end();
  };
  for (std::size_t i = 0; i < reserved.size(); ++i) {
    if (std::find(reserved.begin(), reserved.begin() + static_cast<std::ptrdiff_t>(i), reserved[i]) !=
        reserved.begin() + static_cast<std::ptrdiff_t>(i))
      throw Error("duplicate reserved tag: " + reserved[i]);
    if (std::find(Vocabulary::special_strings().begin(), Vocabulary::special_strings().end(), reserved[i]) !=
        Vocabulary::special_strings().end())
      throw Error("reserved tag collides with special token: " + reserved[i]);
  }

  struct WordEntry {
    std::vector<std::string> sym;
    long long freq;
  };
  std::vector<WordEntry> words;
  std::map<std::string, int> chars;
  for (const auto& [w, f] : word_freq) {
    WordEntry e{{kWordMarker}, f};
    for (auto& cp : text::code_points(w)) e.sym.push_back(std::move(cp));
    for (const auto& s : e.sym) chars.emplace(s, 0);
    words.push_back(std::move(e));
  }
  std::vector<std::string> units;
  for (const auto& [c, unused] : chars) {
    if (is_forbidden(c)) continue;
    units.push_back(c);
  }

  const long long base = Vocabulary::kNumSpecials + static_cast<long long>(reserved.size()) +
                         static_cast<long long>(units.size());
  if (vocab_size <= base) {
    throw Error("vocab_size " + std::to_string(vocab_size) + " too small: specials + reserved + characters = " +
                std::to_string(base));
  }

  TokenizerModel model;
  std::map<std::string, int> seen_units;
  for (const auto& u : units) seen_units.emplace(u, 0);
  while (static_cast<long long>(units.size()) + Vocabulary::kNumSpecials + static_cast<long long>(reserved.size()) <
         vocab_size) {
    std::map<std::pair<std::string, std::string>, long long> pair_freq;
    for (const auto& e : words)
      for (std::size_t i = 0; i + 1 < e.sym.size(); ++i) pair_freq[{e.sym[i], e.sym[i + 1]}] += e.freq;
    const std::pair<std::string, std::string>* best = nullptr;
    long long best_f = 0;
    for (const auto& [p, f] : pair_freq) {
      if (f <= best_f) continue;  // std::map iteration order gives the lexicographic tie-break
      if (is_forbidden(p.first + p.second)) continue;
      best = &p;
      best_f = f;
    }
    if (!best) {
      throw Error("vocab_size " + std::to_string(vocab_size) + " exceeds the mergeable inventory (" +
                  std::to_string(units.size() + Vocabulary::kNumSpecials + reserved.size()) + " units)");
    }
    const auto [left, right] = *best;
    const std::string merged = left + right;
    for (auto& e : words) {
      std::vector<std::string> out;
      out.reserve(e.sym.size());
      for (std::size_t i = 0; i < e.sym.size(); ++i) {
        if (i + 1 < e.sym.size() && e.sym[i] == left && e.sym[i + 1] == right) {
          out.push_back(merged);
          ++i;
        } else {
          out.push_back(e.sym[i]);
        }
      }
      e.sym = std::move(out);
    }
    model.merges.emplace_back(left, right);
    // Different merge paths can build the same string; keep one id for it.
    if (seen_units.emplace(merged, 0).second) units.push_back(merged);
  }
  return Tokenizer(std::move(model), Vocabulary(reserved, std::move(units)));
}

}  // namespace ocat
