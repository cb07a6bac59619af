#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vaps/error.hpp"

namespace vaps {

using ItemId = std::string;
using UserId = std::string;
using ConsultationId = std::string;

/// Hour-granularity point in time.
struct Timestamp {
  std::int64_t hours = 0;

  friend auto operator<=>(const Timestamp&, const Timestamp&) = default;
};

enum class ActionType { search, click, buy };

inline constexpr ActionType kActionTypes[] = {ActionType::search, ActionType::click,
                                              ActionType::buy};
inline constexpr std::size_t kNumActionTypes = 3;

inline std::string_view to_string(ActionType a) {
  switch (a) {
    case ActionType::search: return "search";
    case ActionType::click: return "click";
    case ActionType::buy: return "buy";
  }
  return "?";
}

inline std::size_t index_of(ActionType a) { return static_cast<std::size_t>(a); }

struct Item {
  ItemId id;
  std::string title;
  std::vector<std::string> attributes;

  bool operator==(const Item&) const = default;
};

struct Query {
  std::string text;
  Timestamp timestamp;

  bool operator==(const Query&) const = default;
};

/// One user action. Search actions carry the query; click/buy carry the item.
struct Interaction {
  ActionType type = ActionType::search;
  std::optional<ItemId> target_item;
  std::optional<Query> target_query;
  Timestamp timestamp;

  bool operator==(const Interaction&) const = default;

  static Interaction search(Query q) {
    Interaction a;
    a.type = ActionType::search;
    a.timestamp = q.timestamp;
    a.target_query = std::move(q);
    return a;
  }
  static Interaction on_item(ActionType type, ItemId item, Timestamp ts) {
    Interaction a;
    a.type = type;
    a.target_item = std::move(item);
    a.timestamp = ts;
    return a;
  }
};

struct SearchSession {
  Query query;
  Interaction interaction;
  ItemId ground_truth_item;

  bool operator==(const SearchSession&) const = default;
};

struct Consultation {
  ConsultationId id;
  std::string user_turn;
  std::string assistant_turn;
  Timestamp timestamp;

  bool operator==(const Consultation&) const = default;

  std::string text() const { return user_turn + " " + assistant_turn; }
};

/// All events of one user. Every list is sorted by timestamp; `interactions`
/// also holds the search action of every session in `searches`.
struct UserHistory {
  UserId user_id;
  std::vector<SearchSession> searches;
  std::vector<Consultation> consultations;
  std::vector<Interaction> interactions;

  bool operator==(const UserHistory&) const = default;
};

struct Corpus {
  std::map<ItemId, Item> items;
  std::map<UserId, UserHistory> users;

  bool operator==(const Corpus&) const = default;

  const Item& item(const ItemId& id) const {
    auto it = items.find(id);
    if (it == items.end()) throw DataError("unknown item id '" + id + "'");
    return it->second;
  }
};

struct HistorySlice {
  std::span<const Consultation> consultations_before;
  std::span<const Interaction> interactions_from;
};

/// Consultations strictly before `t` and interactions at or after `t`.
inline HistorySlice slice_before(const UserHistory& h, Timestamp t) {
  auto c_end = std::lower_bound(h.consultations.begin(), h.consultations.end(), t,
                                [](const Consultation& c, Timestamp ts) { return c.timestamp < ts; });
  auto a_begin = std::lower_bound(h.interactions.begin(), h.interactions.end(), t,
                                  [](const Interaction& a, Timestamp ts) { return a.timestamp < ts; });
  return {std::span<const Consultation>(h.consultations.data(),
                                        static_cast<std::size_t>(c_end - h.consultations.begin())),
          std::span<const Interaction>(h.interactions.data() + (a_begin - h.interactions.begin()),
                                       static_cast<std::size_t>(h.interactions.end() - a_begin))};
}

/// Interactions strictly before `t` (the observable history at search time).
inline std::span<const Interaction> interactions_before(const UserHistory& h, Timestamp t) {
  auto end = std::lower_bound(h.interactions.begin(), h.interactions.end(), t,
                              [](const Interaction& a, Timestamp ts) { return a.timestamp < ts; });
  return {h.interactions.data(), static_cast<std::size_t>(end - h.interactions.begin())};
}

namespace detail {

inline std::string require_string(const nlohmann::json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw DataError("line " + std::to_string(line) + ": missing string field '" + key + "'");
  }
  return it->get<std::string>();
}

inline Timestamp require_hours(const nlohmann::json& j, std::size_t line) {
  auto it = j.find("ts_hours");
  if (it == j.end() || !it->is_number()) {
    throw DataError("line " + std::to_string(line) + ": missing numeric field 'ts_hours'");
  }
  // Sub-hour resolution is floored away.
  double v = std::floor(it->get<double>());
  if (v < 0) throw DataError("line " + std::to_string(line) + ": negative ts_hours");
  return Timestamp{static_cast<std::int64_t>(v)};
}

template <typename Fn>
void for_each_json_line(std::istream& in, std::string_view what, Fn&& fn) {
  std::string buf;
  std::size_t line = 0;
  while (std::getline(in, buf)) {
    ++line;
    if (buf.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(buf);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(std::string(what) + " line " + std::to_string(line) + ": " + e.what());
    }
    if (!j.is_object()) {
      throw DataError(std::string(what) + " line " + std::to_string(line) + ": not a JSON object");
    }
    fn(j, line);
  }
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return in;
}

}  // namespace detail

inline std::map<ItemId, Item> load_items(std::istream& in) {
  std::map<ItemId, Item> items;
  detail::for_each_json_line(in, "items", [&](const nlohmann::json& j, std::size_t line) {
    Item it;
    it.id = detail::require_string(j, "id", line);
    it.title = detail::require_string(j, "title", line);
    if (it.title.empty()) throw DataError("items line " + std::to_string(line) + ": empty title");
    if (auto a = j.find("attributes"); a != j.end()) {
      if (!a->is_array()) throw DataError("items line " + std::to_string(line) + ": attributes must be a list");
      for (const auto& s : *a) {
        if (!s.is_string()) throw DataError("items line " + std::to_string(line) + ": attribute must be a string");
        it.attributes.push_back(s.get<std::string>());
      }
    }
    if (items.count(it.id) != 0) {
      throw DataError("items line " + std::to_string(line) + ": duplicate item id '" + it.id + "'");
    }
    items.emplace(it.id, std::move(it));
  });
  return items;
}

/// Parses an events stream against an already loaded item table. Events are
/// grouped per user and stably sorted by timestamp.
inline Corpus load_corpus(std::istream& items_in, std::istream& events_in) {
  Corpus corpus;
  corpus.items = load_items(items_in);

  auto check_item = [&](const ItemId& id, std::size_t line) {
    if (corpus.items.count(id) == 0) {
      throw DataError("events line " + std::to_string(line) + ": dangling item id '" + id + "'");
    }
  };

  std::map<UserId, std::set<ConsultationId>> seen_cids;
  detail::for_each_json_line(events_in, "events", [&](const nlohmann::json& j, std::size_t line) {
    const auto user = detail::require_string(j, "user", line);
    const auto type = detail::require_string(j, "type", line);
    const auto ts = detail::require_hours(j, line);
    auto& h = corpus.users[user];
    h.user_id = user;
    if (type == "search") {
      Query q{detail::require_string(j, "query", line), ts};
      if (q.text.empty()) throw DataError("events line " + std::to_string(line) + ": empty query");
      auto gt = detail::require_string(j, "ground_truth_item", line);
      check_item(gt, line);
      auto act = Interaction::search(q);
      h.searches.push_back(SearchSession{q, act, gt});
      h.interactions.push_back(std::move(act));
    } else if (type == "click" || type == "buy") {
      auto item = detail::require_string(j, "item", line);
      check_item(item, line);
      h.interactions.push_back(
          Interaction::on_item(type == "click" ? ActionType::click : ActionType::buy, item, ts));
    } else if (type == "consult") {
      Consultation c{detail::require_string(j, "cid", line), "", "", ts};
      if (auto u = j.find("user_turn"); u != j.end() && u->is_string()) c.user_turn = u->get<std::string>();
      if (auto a = j.find("assistant_turn"); a != j.end() && a->is_string()) c.assistant_turn = a->get<std::string>();
      if (c.user_turn.empty() && c.assistant_turn.empty()) {
        throw DataError("events line " + std::to_string(line) + ": consultation with no text");
      }
      if (!seen_cids[user].insert(c.id).second) {
        throw DataError("events line " + std::to_string(line) + ": duplicate consultation id '" + c.id + "'");
      }
      h.consultations.push_back(std::move(c));
    } else {
      throw DataError("events line " + std::to_string(line) + ": unknown event type '" + type + "'");
    }
  });

  auto by_time = [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; };
  for (auto& [_, h] : corpus.users) {
    std::stable_sort(h.searches.begin(), h.searches.end(),
                     [](const SearchSession& a, const SearchSession& b) { return a.query.timestamp < b.query.timestamp; });
    std::stable_sort(h.consultations.begin(), h.consultations.end(), by_time);
    std::stable_sort(h.interactions.begin(), h.interactions.end(), by_time);
  }
  return corpus;
}

inline Corpus load_corpus(const std::string& items_path, const std::string& events_path) {
  auto items = detail::open_input(items_path);
  auto events = detail::open_input(events_path);
  return load_corpus(items, events);
}

inline void write_items(std::ostream& out, const Corpus& corpus) {
  for (const auto& [id, it] : corpus.items) {
    nlohmann::json j{{"id", it.id}, {"title", it.title}, {"attributes", it.attributes}};
    out << j.dump() << '\n';
  }
}

/// Canonical event order: users by id, then events by timestamp; at equal
/// timestamps interactions precede consultations and list order is kept.
inline void write_events(std::ostream& out, const Corpus& corpus) {
  for (const auto& [uid, h] : corpus.users) {
    std::vector<std::pair<Timestamp, nlohmann::json>> rows;
    std::size_t next_search = 0;
    for (const auto& a : h.interactions) {
      nlohmann::json j{{"user", uid}, {"type", std::string(to_string(a.type))}, {"ts_hours", a.timestamp.hours}};
      if (a.type == ActionType::search) {
        const auto& s = h.searches.at(next_search++);
        j["query"] = s.query.text;
        j["ground_truth_item"] = s.ground_truth_item;
      } else {
        j["item"] = *a.target_item;
      }
      rows.emplace_back(a.timestamp, std::move(j));
    }
    std::size_t n_actions = rows.size();
    for (const auto& c : h.consultations) {
      rows.emplace_back(c.timestamp, nlohmann::json{{"user", uid},
                                                    {"type", "consult"},
                                                    {"ts_hours", c.timestamp.hours},
                                                    {"cid", c.id},
                                                    {"user_turn", c.user_turn},
                                                    {"assistant_turn", c.assistant_turn}});
    }
    // Merge the two already-sorted runs; equal timestamps keep interactions first.
    std::inplace_merge(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_actions), rows.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& r : rows) out << r.second.dump() << '\n';
  }
}

inline void write_corpus(const Corpus& corpus, const std::string& items_path, const std::string& events_path) {
  std::ofstream items(items_path);
  std::ofstream events(events_path);
  if (!items || !events) throw DataError("cannot write corpus files");
  write_items(items, corpus);
  write_events(events, corpus);
}

}  // namespace vaps
