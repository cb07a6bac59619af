#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vaps/corpus.hpp"
#include "vaps/error.hpp"
#include "vaps/index.hpp"
#include "vaps/text.hpp"

namespace vaps {

enum class LinkRule { full_text, item_content_majority, query_term_majority };

inline std::string_view to_string(LinkRule r) {
  switch (r) {
    case LinkRule::full_text: return "full-text";
    case LinkRule::item_content_majority: return "item-content-majority";
    case LinkRule::query_term_majority: return "query-term-majority";
  }
  return "?";
}

inline LinkRule parse_link_rule(std::string_view s) {
  if (s == "full-text") return LinkRule::full_text;
  if (s == "item-content-majority") return LinkRule::item_content_majority;
  if (s == "query-term-majority") return LinkRule::query_term_majority;
  throw DataError("unknown link rule '" + std::string(s) + "'");
}

struct LinkageParams {
  int window_days = 14;
};

struct LinkedAction {
  Interaction action;
  LinkRule rule = LinkRule::full_text;

  bool operator==(const LinkedAction&) const = default;
};

/// Per user: consultation id -> posterior actions related to it, time sorted.
/// Every consultation of every user has an entry, possibly empty.
struct LinkageTable {
  std::map<UserId, std::map<ConsultationId, std::vector<LinkedAction>>> links;

  const std::vector<LinkedAction>& actions(const UserId& u, const ConsultationId& c) const {
    static const std::vector<LinkedAction> kEmpty;
    auto uit = links.find(u);
    if (uit == links.end()) return kEmpty;
    auto cit = uit->second.find(c);
    return cit == uit->second.end() ? kEmpty : cit->second;
  }

  bool operator==(const LinkageTable&) const = default;
};

/// Text the action exposes for matching: the query for searches, the item
/// title followed by its attributes for clicks and purchases.
inline std::string action_text(const Interaction& a, const Corpus& corpus) {
  if (a.type == ActionType::search) {
    if (!a.target_query) throw DataError("search action without query");
    return a.target_query->text;
  }
  if (!a.target_item) throw DataError("item action without item");
  return item_text(corpus.item(*a.target_item));
}

/// Normalized views of a consultation, computed once and reused across actions.
struct ConsultationTokens {
  std::vector<std::string> sequence;
  std::set<std::string> distinct;

  explicit ConsultationTokens(const Consultation& c)
      : sequence(tokenize(c.text())), distinct(sequence.begin(), sequence.end()) {}
};

namespace detail {

inline bool strict_majority(const std::set<std::string>& needles, const std::set<std::string>& hay) {
  if (needles.empty()) return false;
  std::size_t hit = 0;
  for (const auto& t : needles) hit += hay.count(t);
  return 2 * hit > needles.size();
}

}  // namespace detail

inline std::optional<LinkRule> related_rule(const ConsultationTokens& c, const Interaction& a,
                                            const Corpus& corpus) {
  if (a.type == ActionType::search) {
    auto q = tokenize(action_text(a, corpus));
    if (contains_sequence(c.sequence, q)) return LinkRule::full_text;
    if (detail::strict_majority({q.begin(), q.end()}, c.distinct)) return LinkRule::query_term_majority;
    return std::nullopt;
  }
  const Item& item = corpus.item(*a.target_item);
  if (contains_sequence(c.sequence, tokenize(item.title))) return LinkRule::full_text;
  if (detail::strict_majority(token_set(item_text(item)), c.distinct)) return LinkRule::item_content_majority;
  return std::nullopt;
}

/// Tests the three relatedness rules in order and reports the first that fires.
inline std::pair<bool, std::optional<LinkRule>> is_related(const Consultation& c, const Interaction& a,
                                                           const Corpus& corpus) {
  auto rule = related_rule(ConsultationTokens(c), a, corpus);
  return {rule.has_value(), rule};
}

/// Action-keyed table x: one entry per (action index in the user's
/// interaction list, related consultation id).
struct ForwardLink {
  std::size_t action_index = 0;
  ConsultationId consultation;
  LinkRule rule = LinkRule::full_text;
};

inline std::vector<ForwardLink> forward_links(const UserHistory& h, const Corpus& corpus,
                                              const LinkageParams& params) {
  if (params.window_days <= 0) throw ConfigError("window_days must be positive");
  const std::int64_t window_hours = static_cast<std::int64_t>(params.window_days) * 24;
  std::vector<ConsultationTokens> toks;
  toks.reserve(h.consultations.size());
  for (const auto& c : h.consultations) toks.emplace_back(c);

  std::vector<ForwardLink> out;
  for (std::size_t ai = 0; ai < h.interactions.size(); ++ai) {
    const auto& a = h.interactions[ai];
    for (std::size_t ci = 0; ci < h.consultations.size(); ++ci) {
      const auto& c = h.consultations[ci];
      auto dt = a.timestamp.hours - c.timestamp.hours;
      if (dt < 0 || dt > window_hours) continue;
      if (auto rule = related_rule(toks[ci], a, corpus)) out.push_back({ai, c.id, *rule});
    }
  }
  return out;
}

inline LinkageTable build_linkage(const Corpus& corpus, const LinkageParams& params = {}) {
  LinkageTable table;
  for (const auto& [uid, h] : corpus.users) {
    auto& per_user = table.links[uid];
    for (const auto& c : h.consultations) per_user[c.id];
    // Forward links are produced in action order, so inverting keeps each
    // consultation's list time sorted.
    for (const auto& f : forward_links(h, corpus, params)) {
      per_user[f.consultation].push_back({h.interactions[f.action_index], f.rule});
    }
  }
  return table;
}

inline std::string action_target(const Interaction& a) {
  return a.type == ActionType::search ? a.target_query->text : *a.target_item;
}

inline void write_linkage(std::ostream& out, const LinkageTable& table) {
  for (const auto& [uid, per_user] : table.links) {
    for (const auto& [cid, acts] : per_user) {
      auto arr = nlohmann::json::array();
      for (const auto& la : acts) {
        arr.push_back({{"type", std::string(to_string(la.action.type))},
                       {"ts_hours", la.action.timestamp.hours},
                       {"target", action_target(la.action)},
                       {"rule", std::string(to_string(la.rule))}});
      }
      out << nlohmann::json{{"user", uid}, {"cid", cid}, {"actions", arr}}.dump() << '\n';
    }
  }
}

inline LinkageTable read_linkage(std::istream& in) {
  LinkageTable table;
  detail::for_each_json_line(in, "linkage", [&](const nlohmann::json& j, std::size_t line) {
    auto uid = detail::require_string(j, "user", line);
    auto cid = detail::require_string(j, "cid", line);
    auto& acts = table.links[uid][cid];
    for (const auto& a : j.at("actions")) {
      auto type = detail::require_string(a, "type", line);
      Timestamp ts{a.at("ts_hours").get<std::int64_t>()};
      auto target = detail::require_string(a, "target", line);
      Interaction act = type == "search" ? Interaction::search(Query{target, ts})
                                         : Interaction::on_item(type == "buy" ? ActionType::buy : ActionType::click,
                                                                target, ts);
      acts.push_back({act, parse_link_rule(detail::require_string(a, "rule", line))});
    }
  });
  return table;
}

}  // namespace vaps
