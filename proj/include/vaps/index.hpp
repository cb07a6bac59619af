#pragma once

#include <algorithm>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "vaps/corpus.hpp"
#include "vaps/error.hpp"
#include "vaps/text.hpp"

namespace vaps {

/// Scenario term -> sorted, deduplicated list of items whose title or
/// attributes contain the term.
class InvertedIndex {
 public:
  using Postings = std::map<std::string, std::vector<ItemId>>;

  InvertedIndex() = default;
  explicit InvertedIndex(Postings postings) : postings_(std::move(postings)) {}

  const Postings& postings() const { return postings_; }

  bool contains(const std::string& term) const { return postings_.count(term) != 0; }

  std::size_t term_count(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : it->second.size();
  }

  std::size_t size() const { return postings_.size(); }

  bool operator==(const InvertedIndex&) const = default;

 private:
  Postings postings_;
};

/// Title and attribute text of an item, space joined.
inline std::string item_text(const Item& item) {
  std::string s = item.title;
  for (const auto& a : item.attributes) {
    s += ' ';
    s += a;
  }
  return s;
}

inline InvertedIndex build_index(const Corpus& corpus) {
  InvertedIndex::Postings postings;
  // items is an ordered map, so every postings list comes out sorted.
  for (const auto& [id, item] : corpus.items) {
    for (const auto& term : token_set(item_text(item))) postings[term].push_back(id);
  }
  return InvertedIndex(std::move(postings));
}

/// Distinct index terms occurring as tokens of the consultation (I_c).
inline std::set<std::string> matched_terms(const InvertedIndex& index, const Consultation& c) {
  std::set<std::string> out;
  for (const auto& tok : token_set(c.text())) {
    if (index.contains(tok)) out.insert(tok);
  }
  return out;
}

struct ScopeParams {
  int lambda_thresh = 4;
};

/// Thresholded coverage: x / lambda below the threshold, 1 at or above it.
inline double scope_fraction(std::size_t matched, int lambda_thresh) {
  if (lambda_thresh < 1) throw ConfigError("lambda_thresh must be >= 1");
  if (matched >= static_cast<std::size_t>(lambda_thresh)) return 1.0;
  return static_cast<double>(matched) / static_cast<double>(lambda_thresh);
}

inline double scope_value(const InvertedIndex& index, const Consultation& c, const ScopeParams& p) {
  return scope_fraction(matched_terms(index, c).size(), p.lambda_thresh);
}

/// One {"term", "items"} object per line, terms in lexicographic order.
inline void write_index(std::ostream& out, const InvertedIndex& index) {
  for (const auto& [term, items] : index.postings()) {
    out << nlohmann::json{{"term", term}, {"items", items}}.dump() << '\n';
  }
}

inline InvertedIndex read_index(std::istream& in) {
  InvertedIndex::Postings postings;
  detail::for_each_json_line(in, "index", [&](const nlohmann::json& j, std::size_t line) {
    auto term = detail::require_string(j, "term", line);
    auto it = j.find("items");
    if (it == j.end() || !it->is_array()) {
      throw DataError("index line " + std::to_string(line) + ": missing 'items' list");
    }
    postings[term] = it->get<std::vector<ItemId>>();
  });
  return InvertedIndex(std::move(postings));
}

}  // namespace vaps
