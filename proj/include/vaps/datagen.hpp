#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "vaps/corpus.hpp"
#include "vaps/error.hpp"
#include "vaps/random.hpp"

namespace vaps {

/// Probability that a consultation slot preceding a search is filled with
/// each pattern; the remaining mass leaves the slot empty.
struct PatternRates {
  double in_scope_verified = 0.25;
  double in_scope_unverified = 0.2;
  double out_of_scope = 0.3;
  double out_of_date = 0.15;

  double total() const { return in_scope_verified + in_scope_unverified + out_of_scope + out_of_date; }
};

/// Term pools. Items come in families sharing a "<brand> <category> <series>"
/// title and differing in colour and spec; off-topic terms never occur in
/// any item.
struct GenVocab {
  std::vector<std::string> categories = {"gaming laptop",  "folding phone",   "running shoes", "espresso machine",
                                         "robot vacuum",   "smart watch",     "office chair",  "camping tent",
                                         "electric kettle", "studio headphones"};
  std::vector<std::string> brands = {"zenbrook", "aurora", "nimbus", "vertex", "solace",  "kestrel",
                                     "orion",    "lumen",  "pixelo", "tundra", "helixon", "marlow"};
  std::vector<std::string> series = {"pro", "lite", "max", "plus", "air", "ultra"};
  std::vector<std::string> colors = {"black", "silver", "white", "red", "blue", "green", "gold", "graphite"};
  std::vector<std::string> specs = {"16gb", "32gb", "compact", "wireless", "waterproof", "quiet"};
  std::vector<std::string> off_topic = {"election", "senate",    "weather",  "forecast",   "football",
                                        "recipe",   "poetry",    "history",  "vacation",   "movie",
                                        "philosophy", "parliament", "soccer", "painting", "astronomy",
                                        "novel",    "traffic",   "gossip",   "opera",      "climate"};
};

struct GenSpec {
  std::size_t n_users = 200;
  std::size_t n_items = 500;
  std::int64_t horizon_hours = 24 * 365;
  PatternRates rates;
  GenVocab vocab;
  std::uint64_t seed = 7;
  std::size_t min_searches = 4;
  std::size_t max_searches = 6;
  std::size_t consult_slots = 6;  // consultation slots drawn before each search
  std::size_t noise_clicks = 3;   // clicks on sibling variants of the target before each search
  std::size_t family_size = 5;    // variants sharing one title

  void validate() const {
    if (n_users == 0) throw ConfigError("datagen: n_users must be positive");
    if (n_items < 2) throw ConfigError("datagen: n_items must be at least 2");
    if (family_size == 0) throw ConfigError("datagen: family_size must be positive");
    const double r[] = {rates.in_scope_verified, rates.in_scope_unverified, rates.out_of_scope, rates.out_of_date};
    for (double x : r) {
      if (x < 0.0) throw ConfigError("datagen: pattern rates must be non-negative");
    }
    if (rates.total() > 1.0 + 1e-12) throw ConfigError("datagen: pattern rates sum above 1");
    if (min_searches == 0 || max_searches < min_searches) throw ConfigError("datagen: bad search count range");
    if (horizon_hours <= 0) throw ConfigError("datagen: horizon_hours must be positive");
    if (vocab.categories.empty() || vocab.brands.empty() || vocab.series.empty() || vocab.colors.empty() ||
        vocab.specs.empty() || vocab.off_topic.empty()) {
      throw ConfigError("datagen: empty vocabulary pool");
    }
  }
};

enum class Pattern { in_scope_verified, in_scope_unverified, out_of_scope, out_of_date };

enum class Usefulness { high, low };

struct OracleKey {
  UserId user;
  std::int64_t search_ts = 0;
  ConsultationId cid;

  auto operator<=>(const OracleKey&) const = default;
};

using Oracle = std::map<OracleKey, Usefulness>;

struct GeneratedData {
  Corpus corpus;
  Oracle oracle;
  std::map<std::pair<UserId, ConsultationId>, Pattern> patterns;
};

namespace detail {

inline std::string padded(char prefix, std::size_t n, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%0*zu", prefix, width, n);
  return buf;
}

struct GenItem {
  ItemId id;
  std::size_t family = 0;
};

inline void sort_history(UserHistory& h) {
  auto by_time = [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; };
  std::stable_sort(h.consultations.begin(), h.consultations.end(), by_time);
  std::stable_sort(h.interactions.begin(), h.interactions.end(), by_time);
  std::stable_sort(h.searches.begin(), h.searches.end(),
                   [](const SearchSession& a, const SearchSession& b) { return a.query.timestamp < b.query.timestamp; });
}

}  // namespace detail

inline GeneratedData generate(const GenSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto& voc = spec.vocab;
  GeneratedData out;

  std::vector<detail::GenItem> items;
  std::vector<std::vector<std::size_t>> families;
  std::vector<std::size_t> family_category;
  std::string title;
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    const std::size_t fam = i / spec.family_size;
    const std::size_t variant = i % spec.family_size;
    if (variant == 0) {
      family_category.push_back(fam % voc.categories.size());
      families.emplace_back();
      title = rng.pick(voc.brands) + " " + voc.categories[family_category.back()] + " " + rng.pick(voc.series);
    }
    Item it;
    it.id = detail::padded('i', i, 4);
    it.title = title;
    it.attributes = {voc.colors[(fam + variant) % voc.colors.size()], rng.pick(voc.specs)};
    families[fam].push_back(items.size());
    items.push_back({it.id, fam});
    out.corpus.items.emplace(it.id, std::move(it));
  }

  auto item_of = [&](std::size_t idx) -> const Item& { return out.corpus.items.at(items[idx].id); };
  auto in_scope_text = [&](const Item& it) {
    return std::make_pair("tell me about the " + it.title, "the " + it.title + " is popular with buyers");
  };
  auto sibling_of = [&](std::size_t target) {
    const auto& pool = families[items[target].family];
    if (pool.size() < 2) return target;
    for (;;) {
      auto pick = pool[rng.index(pool.size())];
      if (pick != target) return pick;
    }
  };

  const double cut_verified = spec.rates.in_scope_verified;
  const double cut_unverified = cut_verified + spec.rates.in_scope_unverified;
  const double cut_scope = cut_unverified + spec.rates.out_of_scope;
  const double cut_date = cut_scope + spec.rates.out_of_date;

  for (std::size_t u = 0; u < spec.n_users; ++u) {
    UserHistory h;
    h.user_id = detail::padded('u', u, 4);
    std::size_t n_cid = 0;
    auto new_cid = [&] { return h.user_id + "-" + detail::padded('c', n_cid++, 3); };

    std::size_t n_search = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.min_searches), static_cast<std::int64_t>(spec.max_searches)));
    std::int64_t t = 24 * 90 + rng.uniform_int(0, std::max<std::int64_t>(spec.horizon_hours / 4, 1));
    std::int64_t prev = t - 240;
    // Sibling browsing happens at least this long before the search, and
    // before any consultation planted for it.
    constexpr std::int64_t kBrowseLead = 64;
    std::vector<std::pair<std::int64_t, std::vector<std::pair<ConsultationId, bool>>>> planted;

    for (std::size_t k = 0; k < n_search; ++k) {
      if (k > 0) t += rng.uniform_int(120, 240);
      const std::size_t target = rng.index(items.size());
      const Item& tgt = item_of(target);

      for (std::size_t n = 0; n < spec.noise_clicks; ++n) {
        auto other = sibling_of(target);
        h.interactions.push_back(Interaction::on_item(ActionType::click, items[other].id,
                                                      Timestamp{rng.uniform_int(prev + 2, t - kBrowseLead)}));
      }

      std::vector<std::pair<ConsultationId, bool>> slots;
      for (std::size_t slot = 0; slot < spec.consult_slots; ++slot) {
        double r = rng.uniform01();
        if (r >= cut_date) continue;
        Consultation c;
        c.id = new_cid();
        Pattern p;
        if (r < cut_verified) {
          p = Pattern::in_scope_verified;
          c.timestamp = Timestamp{t - rng.uniform_int(12, 48)};
          std::tie(c.user_turn, c.assistant_turn) = in_scope_text(tgt);
          h.interactions.push_back(Interaction::on_item(
              ActionType::click, tgt.id, Timestamp{rng.uniform_int(c.timestamp.hours + 1, t - 1)}));
        } else if (r < cut_unverified) {
          p = Pattern::in_scope_unverified;
          c.timestamp = Timestamp{t - rng.uniform_int(1, 36)};
          std::tie(c.user_turn, c.assistant_turn) = in_scope_text(item_of(rng.index(items.size())));
        } else if (r < cut_scope) {
          p = Pattern::out_of_scope;
          c.timestamp = Timestamp{t - rng.uniform_int(1, 24)};
          const auto& w1 = rng.pick(voc.off_topic);
          const auto& w2 = rng.pick(voc.off_topic);
          const auto& w3 = rng.pick(voc.off_topic);
          c.user_turn = "what do you think about " + w1 + " and " + w2;
          c.assistant_turn = "opinions on " + w1 + " " + w3 + " vary widely";
        } else {
          p = Pattern::out_of_date;
          c.timestamp = Timestamp{t - rng.uniform_int(24 * 30, 24 * 90)};
          std::tie(c.user_turn, c.assistant_turn) = in_scope_text(item_of(rng.index(items.size())));
        }
        out.patterns[{h.user_id, c.id}] = p;
        slots.emplace_back(c.id, p == Pattern::in_scope_verified);
        h.consultations.push_back(std::move(c));
      }
      planted.emplace_back(t, std::move(slots));

      Query q{voc.categories[family_category[items[target].family]], Timestamp{t}};
      auto act = Interaction::search(q);
      h.searches.push_back({q, act, tgt.id});
      h.interactions.push_back(act);
      h.interactions.push_back(Interaction::on_item(ActionType::buy, tgt.id, Timestamp{t + 1}));
      prev = t + 1;
    }
    detail::sort_history(h);

    // Label every (search, earlier consultation) pair: only the verified
    // consultations planted for that very search are useful to it.
    for (const auto& [ts, slots] : planted) {
      std::map<ConsultationId, bool> own(slots.begin(), slots.end());
      for (const auto& c : slice_before(h, Timestamp{ts}).consultations_before) {
        auto it = own.find(c.id);
        bool high = it != own.end() && it->second;
        out.oracle[{h.user_id, ts, c.id}] = high ? Usefulness::high : Usefulness::low;
      }
    }
    out.corpus.users.emplace(h.user_id, std::move(h));
  }
  return out;
}

inline void write_oracle(std::ostream& out, const Oracle& oracle) {
  for (const auto& [k, label] : oracle) {
    out << nlohmann::json{{"user", k.user},
                          {"search_ts", k.search_ts},
                          {"cid", k.cid},
                          {"label", label == Usefulness::high ? "high" : "low"}}
               .dump()
        << '\n';
  }
}

inline Oracle read_oracle(std::istream& in) {
  Oracle oracle;
  detail::for_each_json_line(in, "oracle", [&](const nlohmann::json& j, std::size_t line) {
    OracleKey k{detail::require_string(j, "user", line), j.at("search_ts").get<std::int64_t>(),
                detail::require_string(j, "cid", line)};
    oracle[k] = detail::require_string(j, "label", line) == "high" ? Usefulness::high : Usefulness::low;
  });
  return oracle;
}

}  // namespace vaps
