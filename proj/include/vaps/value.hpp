#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vaps/corpus.hpp"
#include "vaps/error.hpp"
#include "vaps/index.hpp"
#include "vaps/linkage.hpp"

namespace vaps {

inline constexpr std::size_t kQuantileBuckets = 11;
inline constexpr std::size_t kCutPoints = kQuantileBuckets - 1;

struct ValueParams {
  double alpha = 0.99;
  double lambda1 = 0.5;
  double lambda2 = 0.3;
  std::size_t l_seq = 30;
  std::size_t time_bucket_count = 13;
  ScopeParams scope;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
    if (!(lambda1 >= 0.0 && lambda1 <= 1.0)) throw ConfigError("lambda1 must lie in [0,1]");
    if (!(lambda2 >= 0.0 && lambda2 <= 1.0)) throw ConfigError("lambda2 must lie in [0,1]");
    if (l_seq == 0) throw ConfigError("l_seq must be positive");
    if (time_bucket_count < 2) throw ConfigError("time_bucket_count must be >= 2");
    if (scope.lambda_thresh < 1) throw ConfigError("lambda_thresh must be >= 1");
  }
};

/// alpha^(t_s - t_c), exponent in hours.
inline double time_decay_value(Timestamp search_ts, Timestamp consult_ts, double alpha) {
  if (consult_ts > search_ts) throw DataError("consultation is later than the search it is valued for");
  return std::pow(alpha, static_cast<double>(search_ts.hours - consult_ts.hours));
}

/// min(floor(log2(delta + 1)), b - 1).
inline std::size_t time_bucket(std::int64_t delta_hours, std::size_t b) {
  if (b < 2) throw ConfigError("time bucket count must be >= 2");
  if (delta_hours < 0) throw DataError("negative time interval");
  auto v = static_cast<std::uint64_t>(delta_hours) + 1;
  auto bucket = static_cast<std::size_t>(std::bit_width(v) - 1);
  return std::min(bucket, b - 1);
}

using CutPoints = std::array<std::int64_t, kCutPoints>;

/// Per action type, the 10 inner cut points of an 11-way equal-mass split of
/// the per-consultation linked-action counts.
struct BucketTable {
  std::array<CutPoints, kNumActionTypes> cuts{};

  const CutPoints& row(ActionType a) const { return cuts[index_of(a)]; }
  bool operator==(const BucketTable&) const = default;
};

/// Nearest-rank quantiles at k/11, k = 1..10. Empty sample gives all zeros.
inline CutPoints nearest_rank_cuts(std::vector<std::int64_t> sample) {
  CutPoints cuts{};
  if (sample.empty()) return cuts;
  std::sort(sample.begin(), sample.end());
  const std::size_t n = sample.size();
  for (std::size_t k = 1; k <= kCutPoints; ++k) {
    std::size_t rank = (k * n + kQuantileBuckets - 1) / kQuantileBuckets;  // ceil(k n / 11)
    rank = std::max<std::size_t>(rank, 1);
    cuts[k - 1] = sample[rank - 1];
  }
  return cuts;
}

inline std::array<std::int64_t, kNumActionTypes> linked_counts(const std::vector<LinkedAction>& acts) {
  std::array<std::int64_t, kNumActionTypes> n{};
  for (const auto& la : acts) ++n[index_of(la.action.type)];
  return n;
}

inline BucketTable fit_buckets(const LinkageTable& linkage) {
  std::array<std::vector<std::int64_t>, kNumActionTypes> samples;
  for (const auto& [_, per_user] : linkage.links) {
    for (const auto& [__, acts] : per_user) {
      auto n = linked_counts(acts);
      for (std::size_t t = 0; t < kNumActionTypes; ++t) samples[t].push_back(n[t]);
    }
  }
  BucketTable table;
  for (std::size_t t = 0; t < kNumActionTypes; ++t) table.cuts[t] = nearest_rank_cuts(std::move(samples[t]));
  return table;
}

/// Bucket index (count of cut points strictly below freq) divided by 10.
inline double bucketize(std::int64_t freq, const CutPoints& cuts) {
  std::size_t bucket = 0;
  for (auto c : cuts) bucket += c < freq ? 1 : 0;
  return static_cast<double>(bucket) / static_cast<double>(kCutPoints);
}

/// Inverse-count weights over the action types present in `posterior`,
/// normalized to sum to one. Absent types get no entry.
inline std::map<ActionType, double> gamma_weights(std::span<const Interaction> posterior) {
  std::array<std::size_t, kNumActionTypes> count{};
  for (const auto& a : posterior) ++count[index_of(a.type)];
  double inv_sum = 0.0;
  for (auto n : count) {
    if (n > 0) inv_sum += 1.0 / static_cast<double>(n);
  }
  std::map<ActionType, double> gamma;
  for (auto a : kActionTypes) {
    auto n = count[index_of(a)];
    if (n > 0) gamma[a] = (1.0 / static_cast<double>(n)) / inv_sum;
  }
  return gamma;
}

/// Counts of linked actions per type occurring at or after `from`.
inline std::array<std::int64_t, kNumActionTypes> posterior_counts(const std::vector<LinkedAction>& acts,
                                                                  Timestamp from) {
  std::array<std::int64_t, kNumActionTypes> n{};
  for (const auto& la : acts) {
    if (la.action.timestamp >= from) ++n[index_of(la.action.type)];
  }
  return n;
}

inline double action_value_from(const std::map<ActionType, double>& gamma,
                                 const std::array<std::int64_t, kNumActionTypes>& freq,
                                 const BucketTable& buckets) {
  double v = 0.0;
  for (const auto& [a, g] : gamma) v += g * bucketize(freq[index_of(a)], buckets.row(a));
  return std::clamp(v, 0.0, 1.0);
}

inline double action_value(const Consultation& c, Timestamp search_ts, const LinkageTable& linkage,
                           const BucketTable& buckets, const UserHistory& history) {
  auto gamma = gamma_weights(slice_before(history, search_ts).interactions_from);
  auto freq = posterior_counts(linkage.actions(history.user_id, c.id), search_ts);
  return action_value_from(gamma, freq, buckets);
}

/// (1 - l1) o_time + l1 (l2 o_scope + (1 - l2) o_action).
inline double aggregate_value(double o_time, double o_scope, double o_action, const ValueParams& p) {
  auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!in_unit(o_time) || !in_unit(o_scope) || !in_unit(o_action)) {
    throw DataError("value component outside [0,1]");
  }
  return (1.0 - p.lambda1) * o_time + p.lambda1 * (p.lambda2 * o_scope + (1.0 - p.lambda2) * o_action);
}

struct ValueReport {
  UserId user;
  Timestamp search_ts;
  ConsultationId cid;
  double o_time = 0.0;
  double o_scope = 0.0;
  double o_action = 0.0;
  double o_aggregate = 0.0;
  std::size_t rank = 0;  // 1-based position after sorting

  bool operator==(const ValueReport&) const = default;
};

struct RankedConsultations {
  std::vector<const Consultation*> kept;  // top l_seq, best first
  std::vector<ValueReport> reports;       // every scored consultation, rank order
};

/// Sorts descending by aggregate value, then later timestamp first, then id.
inline void sort_by_value(std::vector<std::pair<ValueReport, const Consultation*>>& rows) {
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.first.o_aggregate != b.first.o_aggregate) return a.first.o_aggregate > b.first.o_aggregate;
    if (a.second->timestamp != b.second->timestamp) return a.second->timestamp > b.second->timestamp;
    return a.first.cid < b.first.cid;
  });
}

/// Scores and filters consultation histories against search sessions. Holds
/// references to the index, linkage and bucket table, and caches the
/// search-independent scope value of every consultation.
class ConsultationValuer {
 public:
  ConsultationValuer(const Corpus& corpus, const InvertedIndex& index, const LinkageTable& linkage,
                     const BucketTable& buckets, ValueParams params)
      : linkage_(linkage), buckets_(buckets), params_(params) {
    params_.validate();
    for (const auto& [uid, h] : corpus.users) {
      auto& per_user = scope_[uid];
      for (const auto& c : h.consultations) per_user[c.id] = scope_value(index, c, params_.scope);
    }
  }

  const ValueParams& params() const { return params_; }

  RankedConsultations rank_and_filter(const UserHistory& history, const SearchSession& s) const {
    const Timestamp ts = s.query.timestamp;
    auto slice = slice_before(history, ts);
    auto gamma = gamma_weights(slice.interactions_from);
    const auto& scopes = scope_.at(history.user_id);

    std::vector<std::pair<ValueReport, const Consultation*>> rows;
    rows.reserve(slice.consultations_before.size());
    for (const auto& c : slice.consultations_before) {
      ValueReport r;
      r.user = history.user_id;
      r.search_ts = ts;
      r.cid = c.id;
      r.o_time = time_decay_value(ts, c.timestamp, params_.alpha);
      r.o_scope = scopes.at(c.id);
      r.o_action = action_value_from(gamma, posterior_counts(linkage_.actions(history.user_id, c.id), ts), buckets_);
      r.o_aggregate = aggregate_value(r.o_time, r.o_scope, r.o_action, params_);
      rows.emplace_back(std::move(r), &c);
    }
    sort_by_value(rows);

    RankedConsultations out;
    out.reports.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i].first.rank = i + 1;
      if (i < params_.l_seq) out.kept.push_back(rows[i].second);
      out.reports.push_back(std::move(rows[i].first));
    }
    return out;
  }

 private:
  const LinkageTable& linkage_;
  const BucketTable& buckets_;
  ValueParams params_;
  std::unordered_map<UserId, std::unordered_map<ConsultationId, double>> scope_;
};

/// Recency-only filter: the `l_seq` latest consultations before the search.
inline std::vector<const Consultation*> most_recent(const UserHistory& history, const SearchSession& s,
                                                    std::size_t l_seq) {
  auto before = slice_before(history, s.query.timestamp).consultations_before;
  std::vector<const Consultation*> out;
  for (auto it = before.rbegin(); it != before.rend() && out.size() < l_seq; ++it) out.push_back(&*it);
  return out;
}

/// Every (user, search) pair of the corpus, in user then search order.
inline std::vector<ValueReport> assess_corpus(const Corpus& corpus, const ConsultationValuer& valuer) {
  std::vector<ValueReport> all;
  for (const auto& [_, h] : corpus.users) {
    for (const auto& s : h.searches) {
      auto r = valuer.rank_and_filter(h, s);
      all.insert(all.end(), std::make_move_iterator(r.reports.begin()), std::make_move_iterator(r.reports.end()));
    }
  }
  return all;
}

inline std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_value_report(std::ostream& out, const ValueReport& r) {
  out << "{\"user\":" << nlohmann::json(r.user).dump() << ",\"search_ts\":" << r.search_ts.hours
      << ",\"cid\":" << nlohmann::json(r.cid).dump() << ",\"o_time\":" << fixed6(r.o_time)
      << ",\"o_scope\":" << fixed6(r.o_scope) << ",\"o_action\":" << fixed6(r.o_action)
      << ",\"o_aggregate\":" << fixed6(r.o_aggregate) << ",\"rank\":" << r.rank << "}\n";
}

inline void write_values(std::ostream& out, const std::vector<ValueReport>& reports) {
  for (const auto& r : reports) write_value_report(out, r);
}

inline std::vector<ValueReport> read_values(std::istream& in) {
  std::vector<ValueReport> out;
  detail::for_each_json_line(in, "values", [&](const nlohmann::json& j, std::size_t line) {
    ValueReport r;
    r.user = detail::require_string(j, "user", line);
    r.search_ts = Timestamp{j.at("search_ts").get<std::int64_t>()};
    r.cid = detail::require_string(j, "cid", line);
    r.o_time = j.at("o_time").get<double>();
    r.o_scope = j.at("o_scope").get<double>();
    r.o_action = j.at("o_action").get<double>();
    r.o_aggregate = j.at("o_aggregate").get<double>();
    r.rank = j.at("rank").get<std::size_t>();
    out.push_back(std::move(r));
  });
  return out;
}

/// Text histograms (10 equal-width bins over [0,1]) of each value component.
inline void write_value_summary(std::ostream& out, const std::vector<ValueReport>& reports) {
  struct Column {
    const char* name;
    double ValueReport::*field;
  };
  const Column cols[] = {{"o_time", &ValueReport::o_time},
                         {"o_scope", &ValueReport::o_scope},
                         {"o_action", &ValueReport::o_action},
                         {"o_aggregate", &ValueReport::o_aggregate}};
  out << "scored (search, consultation) pairs: " << reports.size() << '\n';
  for (const auto& col : cols) {
    std::array<std::size_t, 10> bins{};
    double sum = 0.0;
    for (const auto& r : reports) {
      double v = r.*col.field;
      sum += v;
      bins[std::min<std::size_t>(static_cast<std::size_t>(v * 10.0), 9)]++;
    }
    double mean = reports.empty() ? 0.0 : sum / static_cast<double>(reports.size());
    out << '\n' << col.name << "  mean=" << fixed6(mean) << '\n';
    std::size_t peak = std::max<std::size_t>(1, *std::max_element(bins.begin(), bins.end()));
    for (std::size_t b = 0; b < bins.size(); ++b) {
      char label[32];
      std::snprintf(label, sizeof label, "  [%.1f,%.1f%c ", b / 10.0, (b + 1) / 10.0, b == 9 ? ']' : ')');
      out << label << std::string(bins[b] * 40 / peak, '#') << ' ' << bins[b] << '\n';
    }
  }
}

}  // namespace vaps
