#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vaps/corpus.hpp"
#include "vaps/error.hpp"
#include "vaps/index.hpp"
#include "vaps/linkage.hpp"
#include "vaps/text.hpp"
#include "vaps/value.hpp"

namespace vaps {

using TokenIds = std::vector<std::size_t>;

/// Token string <-> id. Id 0 is reserved for unknown tokens.
class Vocabulary {
 public:
  static constexpr std::size_t kUnknown = 0;

  Vocabulary() : tokens_{"<unk>"} { ids_.emplace(tokens_[0], 0); }

  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) add(t);
  }

  /// Every normalized token of every item, query and consultation, sorted.
  static Vocabulary from_corpus(const Corpus& corpus) {
    std::set<std::string> all;
    auto take = [&](const std::string& text) {
      for (auto& t : tokenize(text)) all.insert(std::move(t));
    };
    for (const auto& [_, item] : corpus.items) take(item_text(item));
    for (const auto& [_, h] : corpus.users) {
      for (const auto& s : h.searches) take(s.query.text);
      for (const auto& c : h.consultations) take(c.text());
    }
    return Vocabulary({all.begin(), all.end()});
  }

  std::size_t add(const std::string& token) {
    auto [it, inserted] = ids_.emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnknown : it->second;
  }

  TokenIds encode(std::string_view text, std::size_t max_tokens) const {
    TokenIds out;
    for (const auto& t : tokenize(text)) {
      if (out.size() == max_tokens) break;
      out.push_back(id(t));
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

/// Dense indices for items and users, in corpus (id) order.
class Catalog {
 public:
  Catalog() = default;
  Catalog(const Corpus& corpus, const Vocabulary& vocab, std::size_t max_tokens) {
    for (const auto& [id, item] : corpus.items) {
      item_index_.emplace(id, item_ids_.size());
      item_ids_.push_back(id);
      item_tokens_.push_back(vocab.encode(item_text(item), max_tokens));
    }
    for (const auto& [uid, _] : corpus.users) {
      user_index_.emplace(uid, user_ids_.size());
      user_ids_.push_back(uid);
    }
  }

  std::size_t n_items() const { return item_ids_.size(); }
  std::size_t n_users() const { return user_ids_.size(); }
  const std::vector<ItemId>& item_ids() const { return item_ids_; }
  const std::vector<TokenIds>& item_tokens() const { return item_tokens_; }

  std::size_t item(const ItemId& id) const {
    auto it = item_index_.find(id);
    if (it == item_index_.end()) throw DataError("unknown item id '" + id + "'");
    return it->second;
  }
  std::size_t user(const UserId& id) const {
    auto it = user_index_.find(id);
    if (it == user_index_.end()) throw DataError("unknown user id '" + id + "'");
    return it->second;
  }

 private:
  std::vector<ItemId> item_ids_;
  std::vector<TokenIds> item_tokens_;
  std::unordered_map<ItemId, std::size_t> item_index_;
  std::vector<UserId> user_ids_;
  std::unordered_map<UserId, std::size_t> user_index_;
};

struct ActionInput {
  ActionType type = ActionType::search;
  std::size_t item = 0;  // click/buy
  TokenIds query;        // search
  std::size_t time_bucket = 0;
};

/// Everything the model reads for one search session, as plain indices.
struct SessionInput {
  UserId user_id;
  Timestamp ts;
  std::size_t user = 0;
  std::vector<TokenIds> consultations;  // kept after filtering
  std::vector<std::size_t> consultation_buckets;
  std::vector<ActionInput> actions;  // interactions before the search, oldest first
  std::vector<TokenIds> query_history;
  std::vector<std::size_t> item_history;
  std::string query_text;
  TokenIds query;
  std::size_t target = 0;
  std::vector<std::pair<std::size_t, std::size_t>> va_pairs;  // (consultation, action) linked pairs
};

enum class FilterMode { value, recency };

/// Interaction histories (actions, past queries, past items) are cut to the
/// last `history_len` entries; the consultation budget comes from the
/// valuer's l_seq.
struct FeatureParams {
  std::size_t history_len = 30;
  std::size_t time_bucket_count = 13;
  std::size_t max_tokens = 64;
  FilterMode filter = FilterMode::value;
};

/// Turns (user history, search session) pairs into SessionInputs.
class Featurizer {
 public:
  Featurizer(const Corpus& corpus, const Vocabulary& vocab, const Catalog& catalog, const LinkageTable& linkage,
             const ConsultationValuer& valuer, FeatureParams params)
      : corpus_(corpus), vocab_(vocab), catalog_(catalog), linkage_(linkage), valuer_(valuer), params_(params) {}

  const FeatureParams& params() const { return params_; }

  SessionInput build(const UserHistory& h, const SearchSession& s) const {
    SessionInput in;
    in.user_id = h.user_id;
    in.ts = s.query.timestamp;
    in.user = catalog_.user(h.user_id);
    in.query_text = s.query.text;
    in.query = vocab_.encode(s.query.text, params_.max_tokens);
    in.target = catalog_.item(s.ground_truth_item);
    const auto anchor = s.query.timestamp.hours;

    auto prior = interactions_before(h, s.query.timestamp);
    const std::size_t hist = params_.history_len;
    const std::size_t first = prior.size() > hist ? prior.size() - hist : 0;
    std::vector<const Interaction*> acts;
    for (std::size_t i = first; i < prior.size(); ++i) {
      const auto& a = prior[i];
      acts.push_back(&a);
      ActionInput ai;
      ai.type = a.type;
      ai.time_bucket = time_bucket(anchor - a.timestamp.hours, params_.time_bucket_count);
      if (a.type == ActionType::search) {
        ai.query = vocab_.encode(a.target_query->text, params_.max_tokens);
      } else {
        ai.item = catalog_.item(*a.target_item);
      }
      in.actions.push_back(std::move(ai));
    }

    std::vector<const Interaction*> searches, items;
    for (const auto& a : prior) (a.type == ActionType::search ? searches : items).push_back(&a);
    auto tail = [&](const std::vector<const Interaction*>& v) {
      return v.size() > hist ? v.end() - static_cast<std::ptrdiff_t>(hist) : v.begin();
    };
    for (auto it = tail(searches); it != searches.end(); ++it) {
      in.query_history.push_back(vocab_.encode((*it)->target_query->text, params_.max_tokens));
    }
    for (auto it = tail(items); it != items.end(); ++it) in.item_history.push_back(catalog_.item(*(*it)->target_item));

    std::vector<const Consultation*> kept = params_.filter == FilterMode::value
                                                ? valuer_.rank_and_filter(h, s).kept
                                                : most_recent(h, s, valuer_.params().l_seq);
    for (std::size_t ci = 0; ci < kept.size(); ++ci) {
      const auto* c = kept[ci];
      in.consultations.push_back(vocab_.encode(c->text(), params_.max_tokens));
      in.consultation_buckets.push_back(time_bucket(anchor - c->timestamp.hours, params_.time_bucket_count));
      for (const auto& la : linkage_.actions(h.user_id, c->id)) {
        for (std::size_t aj = 0; aj < acts.size(); ++aj) {
          if (*acts[aj] == la.action) {
            in.va_pairs.emplace_back(ci, aj);
            break;
          }
        }
      }
    }
    return in;
  }

 private:
  const Corpus& corpus_;
  const Vocabulary& vocab_;
  const Catalog& catalog_;
  const LinkageTable& linkage_;
  const ConsultationValuer& valuer_;
  FeatureParams params_;
};

}  // namespace vaps
