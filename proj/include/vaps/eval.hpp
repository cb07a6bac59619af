#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vaps/corpus.hpp"
#include "vaps/error.hpp"
#include "vaps/features.hpp"
#include "vaps/index.hpp"
#include "vaps/random.hpp"
#include "vaps/text.hpp"

namespace vaps {

inline constexpr std::array<std::size_t, 4> kMetricCutoffs = {5, 10, 20, 50};

/// Candidates sorted by descending score; ties broken by ascending item id.
struct RankedList {
  std::vector<ItemId> items;
  std::vector<double> scores;
  ItemId ground_truth;

  static RankedList rank(const std::vector<ItemId>& candidates, const std::vector<double>& scores, ItemId truth) {
    if (candidates.size() != scores.size()) throw DataError("rank: candidate and score counts differ");
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return candidates[a] < candidates[b];
    });
    RankedList out;
    out.ground_truth = std::move(truth);
    for (auto i : order) {
      out.items.push_back(candidates[i]);
      out.scores.push_back(scores[i]);
    }
    return out;
  }

  /// 1-based position of the ground truth; 0 when it is absent.
  std::size_t truth_rank() const {
    auto it = std::find(items.begin(), items.end(), ground_truth);
    return it == items.end() ? 0 : static_cast<std::size_t>(it - items.begin()) + 1;
  }
};

inline double hr_from_rank(std::size_t rank, std::size_t k) { return rank >= 1 && rank <= k ? 1.0 : 0.0; }
inline double ndcg_from_rank(std::size_t rank, std::size_t k) {
  return rank >= 1 && rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}
inline double mrr_from_rank(std::size_t rank, std::size_t k) {
  return rank >= 1 && rank <= k ? 1.0 / static_cast<double>(rank) : 0.0;
}

inline double hr_at_k(const RankedList& l, std::size_t k) { return hr_from_rank(l.truth_rank(), k); }
inline double ndcg_at_k(const RankedList& l, std::size_t k) { return ndcg_from_rank(l.truth_rank(), k); }
inline double mrr_at_k(const RankedList& l, std::size_t k) { return mrr_from_rank(l.truth_rank(), k); }

/// Ground truth plus `n_neg` distinct uniform negatives, shuffled by `seed`.
inline std::vector<ItemId> make_candidates(const ItemId& truth, const std::vector<ItemId>& all_items, std::size_t n_neg,
                                           std::uint64_t seed) {
  std::vector<ItemId> pool;
  pool.reserve(all_items.size());
  bool found = false;
  for (const auto& id : all_items) {
    if (id == truth) {
      found = true;
    } else {
      pool.push_back(id);
    }
  }
  if (!found) throw DataError("make_candidates: ground truth '" + truth + "' not in the item set");
  if (pool.size() < n_neg) throw DataError("make_candidates: too few items for the requested negatives");
  Rng rng(seed);
  rng.sample_prefix(pool, n_neg);
  std::vector<ItemId> out(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_neg));
  out.push_back(truth);
  rng.shuffle(out);
  return out;
}

inline std::uint64_t session_seed(std::uint64_t seed, const UserId& user, Timestamp ts) {
  return mix_seed(seed, fnv1a(user) ^ static_cast<std::uint64_t>(ts.hours));
}

/// Okapi BM25 over item title + attributes. Collection statistics come from
/// the whole item set; idf uses the non-negative ln(1 + (N - df + .5)/(df + .5)) form.
class Bm25 {
 public:
  explicit Bm25(const Corpus& corpus, double k1 = 1.2, double b = 0.75) : k1_(k1), b_(b) {
    double total_len = 0.0;
    for (const auto& [id, item] : corpus.items) {
      auto toks = tokenize(item_text(item));
      Doc doc;
      doc.length = static_cast<double>(toks.size());
      for (const auto& t : toks) doc.tf[t] += 1.0;
      for (const auto& [t, _] : doc.tf) df_[t] += 1.0;
      total_len += doc.length;
      docs_.emplace(id, std::move(doc));
    }
    n_docs_ = static_cast<double>(docs_.size());
    avgdl_ = n_docs_ > 0 ? total_len / n_docs_ : 0.0;
  }

  double idf(const std::string& term) const {
    auto it = df_.find(term);
    const double df = it == df_.end() ? 0.0 : it->second;
    return std::log(1.0 + (n_docs_ - df + 0.5) / (df + 0.5));
  }

  double score(std::string_view query, const ItemId& item) const {
    auto it = docs_.find(item);
    if (it == docs_.end()) throw DataError("bm25: unknown item id '" + item + "'");
    const Doc& doc = it->second;
    double s = 0.0;
    for (const auto& term : token_set(query)) {
      auto tf_it = doc.tf.find(term);
      if (tf_it == doc.tf.end()) continue;
      const double tf = tf_it->second;
      const double norm = avgdl_ > 0 ? doc.length / avgdl_ : 0.0;
      s += idf(term) * tf * (k1_ + 1.0) / (tf + k1_ * (1.0 - b_ + b_ * norm));
    }
    return s;
  }

 private:
  struct Doc {
    double length = 0.0;
    std::map<std::string, double> tf;
  };
  double k1_, b_;
  double n_docs_ = 0.0, avgdl_ = 0.0;
  std::unordered_map<ItemId, Doc> docs_;
  std::unordered_map<std::string, double> df_;
};

inline RankedList bm25_rank(const Query& query, const std::vector<ItemId>& candidates, const Corpus& corpus,
                            const ItemId& truth, double k1 = 1.2, double b = 0.75) {
  Bm25 bm(corpus, k1, b);
  std::vector<double> scores;
  for (const auto& c : candidates) scores.push_back(bm.score(query.text, c));
  return RankedList::rank(candidates, scores, truth);
}

struct SessionRank {
  UserId user;
  Timestamp ts;
  std::size_t rank = 0;
};

/// Macro-averaged HR/NDCG/MRR at every cutoff, per user and overall.
struct MetricReport {
  std::string protocol;
  std::string split;
  std::vector<SessionRank> sessions;
  std::map<std::string, double> metrics;
  std::map<UserId, std::map<std::string, double>> per_user;

  double at(const std::string& name) const { return metrics.at(name); }

  static std::map<std::string, double> summarize(std::span<const std::size_t> ranks) {
    std::map<std::string, double> m;
    for (auto k : kMetricCutoffs) {
      double hr = 0, ndcg = 0, mrr = 0;
      for (auto r : ranks) {
        hr += hr_from_rank(r, k);
        ndcg += ndcg_from_rank(r, k);
        mrr += mrr_from_rank(r, k);
      }
      const double n = ranks.empty() ? 1.0 : static_cast<double>(ranks.size());
      m["HR@" + std::to_string(k)] = hr / n;
      m["NDCG@" + std::to_string(k)] = ndcg / n;
      m["MRR@" + std::to_string(k)] = mrr / n;
    }
    return m;
  }

  static MetricReport from_sessions(std::string protocol, std::string split, std::vector<SessionRank> sessions) {
    MetricReport r;
    r.protocol = std::move(protocol);
    r.split = std::move(split);
    std::vector<std::size_t> all;
    std::map<UserId, std::vector<std::size_t>> by_user;
    for (const auto& s : sessions) {
      all.push_back(s.rank);
      by_user[s.user].push_back(s.rank);
    }
    r.metrics = summarize(all);
    for (const auto& [u, ranks] : by_user) r.per_user[u] = summarize(ranks);
    r.sessions = std::move(sessions);
    return r;
  }
};

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json per_session = nlohmann::json::array();
  for (const auto& s : r.sessions) per_session.push_back({{"user", s.user}, {"search_ts", s.ts.hours}, {"rank", s.rank}});
  return {{"protocol", r.protocol}, {"split", r.split},         {"n_sessions", r.sessions.size()},
          {"metrics", r.metrics},   {"per_user", r.per_user}, {"per_session", per_session}};
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.protocol = j.at("protocol").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  r.per_user = j.at("per_user").get<std::map<UserId, std::map<std::string, double>>>();
  for (const auto& s : j.at("per_session")) {
    r.sessions.push_back({s.at("user").get<std::string>(), Timestamp{s.at("search_ts").get<std::int64_t>()},
                          s.at("rank").get<std::size_t>()});
  }
  return r;
}

enum class Protocol { ranking, retrieval };

inline std::string_view to_string(Protocol p) { return p == Protocol::ranking ? "ranking" : "retrieval"; }

/// Scores candidate item indices for a batch of sessions.
using BatchScorer = std::function<std::vector<std::vector<double>>(std::span<const SessionInput* const>,
                                                                   const std::vector<std::vector<std::size_t>>&)>;

struct EvalOptions {
  Protocol protocol = Protocol::ranking;
  std::size_t n_neg = 99;
  std::uint64_t seed = 7;
  std::size_t batch_size = 64;
  std::string split = "test";
};

/// Ranks every session's candidates with `scorer` and averages the metrics.
/// Ranking protocol: ground truth + n_neg sampled negatives per session
/// (session-derived seed). Retrieval protocol: the full item set.
inline MetricReport evaluate(const BatchScorer& scorer, std::span<const SessionInput> sessions, const Catalog& catalog,
                             const EvalOptions& opt) {
  if (sessions.empty()) throw DataError("evaluate: empty split");
  std::vector<std::size_t> all_items(catalog.n_items());
  for (std::size_t i = 0; i < all_items.size(); ++i) all_items[i] = i;
  std::vector<SessionRank> ranks;
  for (std::size_t start = 0; start < sessions.size(); start += opt.batch_size) {
    const std::size_t end = std::min(sessions.size(), start + opt.batch_size);
    std::vector<const SessionInput*> batch;
    std::vector<std::vector<std::size_t>> cands;
    std::vector<std::vector<ItemId>> cand_ids;
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = sessions[i];
      batch.push_back(&s);
      std::vector<ItemId> ids;
      if (opt.protocol == Protocol::ranking) {
        ids = make_candidates(catalog.item_ids()[s.target], catalog.item_ids(), opt.n_neg,
                              session_seed(opt.seed, s.user_id, s.ts));
      } else {
        ids = catalog.item_ids();
      }
      std::vector<std::size_t> idx;
      for (const auto& id : ids) idx.push_back(catalog.item(id));
      cands.push_back(std::move(idx));
      cand_ids.push_back(std::move(ids));
    }
    auto scores = scorer(batch, cands);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto list = RankedList::rank(cand_ids[b], scores[b], catalog.item_ids()[batch[b]->target]);
      ranks.push_back({batch[b]->user_id, batch[b]->ts, list.truth_rank()});
    }
  }
  return MetricReport::from_sessions(std::string(to_string(opt.protocol)), opt.split, std::move(ranks));
}

/// BM25 over the session's query text.
inline BatchScorer bm25_scorer(const Corpus& corpus, const Catalog& catalog) {
  auto bm = std::make_shared<Bm25>(corpus);
  return [bm, &catalog](std::span<const SessionInput* const> batch, const std::vector<std::vector<std::size_t>>& cands) {
    std::vector<std::vector<double>> out;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::vector<double> s;
      for (auto c : cands[b]) s.push_back(bm->score(batch[b]->query_text, catalog.item_ids()[c]));
      out.push_back(std::move(s));
    }
    return out;
  };
}

/// Fixed-width comparison table: one row per method, HR/NDCG/MRR columns.
inline void write_metric_table(std::ostream& out, const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::vector<std::string> cols;
  for (const char* m : {"HR", "NDCG", "MRR"})
    for (auto k : kMetricCutoffs) cols.push_back(std::string(m) + "@" + std::to_string(k));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-16s", "Method");
  out << buf;
  for (const auto& c : cols) {
    std::snprintf(buf, sizeof buf, " %8s", c.c_str());
    out << buf;
  }
  out << '\n';
  for (const auto& [name, rep] : rows) {
    std::snprintf(buf, sizeof buf, "%-16s", name.c_str());
    out << buf;
    for (const auto& c : cols) {
      std::snprintf(buf, sizeof buf, " %8.4f", rep.metrics.count(c) ? rep.metrics.at(c) : 0.0);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace vaps
