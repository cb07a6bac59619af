#pragma once

#include <cmath>
#include <string>

#include "support.hpp"
#include "vaps/index.hpp"
#include "vaps/linkage.hpp"
#include "vaps/value.hpp"

// Worked examples for the index, linkage and value modules. Closed-form
// expectations are recomputed here from first principles, not read back
// from the library.

namespace vaps::testing {

inline void index_examples(Checker& ck) {
  {
    auto idx = build_index(corpus_of({make_item("i1", "folding phone")}));
    InvertedIndex::Postings want{{"folding", {"i1"}}, {"phone", {"i1"}}};
    ck.check(idx.postings() == want, "single item 'folding phone' gives {folding:[i1], phone:[i1]}");
  }
  {
    auto idx = build_index(corpus_of({make_item("i2", "gaming laptop"), make_item("i1", "office laptop")}));
    auto p = idx.postings().at("laptop");
    ck.check(p == std::vector<ItemId>{"i1", "i2"}, "shared term 'laptop' lists both items, sorted");
    ck.check(idx.term_count("laptop") == 2, "term_count(laptop) = 2");
  }
  {
    auto idx = build_index(corpus_of({make_item("i1", "the of and a")}));
    ck.check(idx.size() == 0, "stopword-only title contributes no terms");
  }
  const auto idx = build_index(corpus_of({make_item("i1", "folding phone")}));
  ck.check(matched_terms(idx, consult("c", "the senate election was close", 0)).empty(),
           "politics consultation matches no terms");
  ck.check(matched_terms(idx, consult("c", "is a folding phone durable", 0)) == std::set<std::string>{"folding", "phone"},
           "consultation naming 'folding phone' matches {folding, phone}");
  ck.check(matched_terms(idx, consult("c", "phone", 0, "phone phone")).size() == 1, "repeated term counted once");

  const auto wide = build_index(corpus_of({make_item("i1", "alpha beta gamma delta epsilon zeta eta theta iota kappa")}));
  ScopeParams sp;
  ck.near(scope_value(wide, consult("c", "nothing relevant here", 0), sp), 0.0, 1e-12, "|I_c| = 0 gives 0");
  ck.near(scope_value(wide, consult("c", "alpha and beta", 0), sp), 2.0 / 4.0, 1e-12, "|I_c| = 2, thresh 4 gives 0.5");
  ck.near(scope_value(wide, consult("c", "alpha beta gamma delta epsilon zeta eta theta iota kappa", 0), sp), 1.0,
          1e-12, "|I_c| = 10, thresh 4 gives 1.0");
}

inline void linkage_examples(Checker& ck) {
  auto corpus = corpus_of({make_item("g14", "Laptop OG G14", {"16GB"}),
                           make_item("case", "phone case", {"red"}),
                           make_item("col", "graphite", {"graphite", "silver", "compact", "wireless"})});
  ck.check(action_text(search("gaming laptop", 0), corpus) == "gaming laptop", "search text is the query");
  ck.check(action_text(buy("g14", 0), corpus) == "Laptop OG G14 16GB", "buy text is title then attributes");
  ck.throws([&] { action_text(click("missing", 0), corpus); }, "click on a missing item is an error");

  {
    auto [ok, rule] = is_related(consult("c", "what do you think of the Laptop OG G14", 0), buy("g14", 5), corpus);
    ck.check(ok && rule == LinkRule::full_text, "verbatim title mention links by full text");
  }
  {
    auto [ok, rule] = is_related(consult("c", "my phone keeps dying", 0), search("red folding phone case", 5), corpus);
    ck.check(!ok && !rule, "1 of 4 query tokens does not link");
  }
  {
    auto [ok, rule] = is_related(consult("c", "silver compact wireless please", 0), click("col", 5), corpus);
    ck.check(ok && rule == LinkRule::item_content_majority, "3 of 4 item tokens link by item-content majority");
  }

  auto one_user = [&](std::vector<Consultation> cs, std::vector<Interaction> acts) {
    Corpus c = corpus;
    UserHistory h;
    h.user_id = "u1";
    h.consultations = std::move(cs);
    h.interactions = std::move(acts);
    c.users.emplace("u1", std::move(h));
    return c;
  };
  {
    auto c = one_user({consult("c1", "tell me about the Laptop OG G14", 0)}, {buy("g14", 15 * 24)});
    auto table = build_linkage(c, LinkageParams{14});
    ck.check(table.actions("u1", "c1").empty(), "action 15 days later is outside a 14 day window");
  }
  {
    auto c = one_user({consult("c1", "tell me about the Laptop OG G14", 0), consult("c2", "weather", 3)}, {});
    auto table = build_linkage(c);
    bool all_empty = table.links.at("u1").size() == 2;
    for (const auto& [_, acts] : table.links.at("u1")) all_empty = all_empty && acts.empty();
    ck.check(all_empty, "no interactions: every consultation maps to []");
  }
  {
    auto c = one_user({consult("c1", "tell me about the Laptop OG G14", 0)}, {buy("g14", 48)});
    auto table = build_linkage(c);
    const auto& acts = table.actions("u1", "c1");
    ck.check(acts.size() == 1 && acts[0].action == buy("g14", 48) && acts[0].rule == LinkRule::full_text,
             "purchase 2 days later is the consultation's only link");
  }
}

inline LinkedAction linked(ActionType t, std::int64_t ts) {
  return LinkedAction{t == ActionType::search ? search("q", ts) : Interaction::on_item(t, "i", Timestamp{ts}),
                      LinkRule::full_text};
}

inline void value_examples(Checker& ck) {
  // time decay, hours as exponent
  ck.near(time_decay_value(Timestamp{100}, Timestamp{100}, 0.99), 1.0, 1e-12, "dt = 0 gives 1");
  ck.near(time_decay_value(Timestamp{101}, Timestamp{100}, 0.99), 0.99, 1e-12, "dt = 1 gives 0.99");
  const double decay720 = std::exp(720.0 * std::log(0.99));
  ck.near(time_decay_value(Timestamp{720}, Timestamp{0}, 0.99), decay720, 1e-9 * decay720, "dt = 720 gives 0.99^720");
  ck.near(time_decay_value(Timestamp{720}, Timestamp{0}, 0.99), 7.24e-4, 5e-6, "0.99^720 is about 7.24e-4");
  ck.throws([] { time_decay_value(Timestamp{0}, Timestamp{1}, 0.99); }, "consultation after search is an error");

  ck.check(time_bucket(0, 13) == 0, "time bucket of 0 is 0");
  ck.check(time_bucket(7, 13) == 3, "time bucket of 7 is floor(log2 8) = 3");
  ck.check(time_bucket(1000000, 13) == 12, "time bucket of 1e6 clamps to 12");

  // quantile buckets
  {
    LinkageTable t;
    for (int i = 1; i <= 110; ++i) {
      std::vector<LinkedAction> acts;
      for (int k = 0; k < i; ++k) acts.push_back(linked(ActionType::click, k));
      t.links["u"]["c" + std::to_string(i)] = acts;
    }
    auto b = fit_buckets(t);
    bool decades = true;
    for (std::size_t k = 0; k < kCutPoints; ++k) decades = decades && b.row(ActionType::click)[k] == 10 * static_cast<std::int64_t>(k + 1);
    ck.check(decades, "click counts 1..110 give cut points 10, 20, ..., 100");
    bool zero = true;
    for (auto c : b.row(ActionType::buy)) zero = zero && c == 0;
    ck.check(zero, "no buys anywhere gives all-zero buy cut points");
    ck.near(bucketize(1, b.row(ActionType::buy)), 1.0, 0.0, "positive buy count over all-zero cuts is bucket 10");
    ck.near(bucketize(5, b.row(ActionType::click)), 0.0, 0.0, "count below the lowest cut is bucket 0");
    ck.near(bucketize(55, b.row(ActionType::click)), 0.5, 1e-12, "count in bucket 5 maps to 0.5");
    ck.near(bucketize(500, b.row(ActionType::click)), 1.0, 1e-12, "count above the top cut maps to 1.0");
  }
  {
    LinkageTable t;
    t.links["u"]["c"] = {linked(ActionType::search, 0), linked(ActionType::search, 1), linked(ActionType::buy, 2)};
    auto b = fit_buckets(t);
    bool same = true;
    for (auto c : b.row(ActionType::search)) same = same && c == 2;
    for (auto c : b.row(ActionType::buy)) same = same && c == 1;
    ck.check(same, "single consultation: every cut point equals its count");
  }

  // gamma weights
  std::vector<Interaction> posterior;
  for (int i = 0; i < 10; ++i) posterior.push_back(search("q", i));
  for (int i = 0; i < 20; ++i) posterior.push_back(click("i", i));
  for (int i = 0; i < 2; ++i) posterior.push_back(buy("i", i));
  auto g = gamma_weights(posterior);
  const double inv = 1.0 / 10 + 1.0 / 20 + 1.0 / 2;
  ck.near(g.at(ActionType::buy), 0.5 / inv, 1e-12, "gamma(buy) = (1/2) / (1/10 + 1/20 + 1/2)");
  ck.near(g.at(ActionType::search), 0.1 / inv, 1e-12, "gamma(search)");
  ck.near(g.at(ActionType::click), 0.05 / inv, 1e-12, "gamma(click)");
  ck.near(g.at(ActionType::buy), 0.7692, 5e-5, "gamma(buy) is about 0.7692");
  {
    std::vector<Interaction> one = {click("i", 0), click("i", 1)};
    auto g1 = gamma_weights(one);
    ck.check(g1.size() == 1 && g1.at(ActionType::click) == 1.0, "single present type gets weight 1");
    std::vector<Interaction> two = {click("i", 0), buy("i", 1)};
    auto g2 = gamma_weights(two);
    ck.check(g2.at(ActionType::click) == 0.5 && g2.at(ActionType::buy) == 0.5, "equal counts split evenly");
  }

  // action value
  {
    UserHistory h;
    h.user_id = "u";
    h.consultations = {consult("c", "hello", 0)};
    h.interactions = {click("i", 10), buy("i", 11)};
    LinkageTable t;
    t.links["u"]["c"] = {};
    ck.near(action_value(h.consultations[0], Timestamp{5}, t, fit_buckets(t), h), 0.0, 0.0,
            "consultation with no linked actions has action value 0");
  }
  {
    BucketTable b;
    std::map<ActionType, double> only_buy{{ActionType::buy, 1.0}};
    ck.near(action_value_from(only_buy, {0, 0, 3}, b), 1.0, 1e-12, "gamma {buy: 1} with buy in bucket 10 gives 1");
    for (std::size_t k = 0; k < kCutPoints; ++k) b.cuts[index_of(ActionType::search)][k] = 10 * static_cast<std::int64_t>(k + 1);
    // R = {buy: 1.0, search: 0.5, click: 0.0}
    auto v = action_value_from(g, {55, 0, 3}, b);
    ck.near(v, 0.5 / inv * 1.0 + 0.1 / inv * 0.5, 1e-12, "weighted sum of gamma and R");
    ck.near(v, 0.8461, 1e-4, "action value is 0.8461 to four places");  // quoted truncated
  }

  // aggregation
  ValueParams p;
  ck.near(aggregate_value(1, 1, 1, p), 1.0, 1e-12, "all ones aggregate to 1");
  ck.near(aggregate_value(0.8, 1.0, 0.5, p), 0.5 * 0.8 + 0.5 * (0.3 * 1.0 + 0.7 * 0.5), 1e-12, "mixed inputs");
  ck.near(aggregate_value(0.8, 1.0, 0.5, p), 0.725, 1e-9, "mixed inputs give 0.725");
  {
    ValueParams p0;
    p0.lambda1 = 0.0;
    ck.near(aggregate_value(0.3, 1.0, 0.2, p0), 0.3, 0.0, "lambda1 = 0 returns o_time");
  }
  ck.throws([&] { aggregate_value(1.5, 0, 0, p); }, "input outside [0,1] is an error");

  // rank and filter
  auto ranked = [](std::size_t n, std::size_t l_seq) {
    Corpus c = corpus_of({make_item("i1", "folding phone", {"red"})});
    UserHistory h;
    h.user_id = "u";
    for (std::size_t k = 0; k < n; ++k) {
      // Varying age and scope so aggregates differ.
      h.consultations.push_back(consult("c" + std::to_string(100 + k), k % 2 ? "folding phone red" : "weather today",
                                        static_cast<std::int64_t>(k) * 3));
    }
    const std::int64_t ts = static_cast<std::int64_t>(n) * 3 + 1;
    h.interactions = {search("folding phone", ts)};
    h.searches = {SearchSession{Query{"folding phone", Timestamp{ts}}, search("folding phone", ts), "i1"}};
    c.users.emplace("u", h);
    auto index = build_index(c);
    auto link = build_linkage(c);
    auto buckets = fit_buckets(link);
    ValueParams vp;
    vp.l_seq = l_seq;
    ConsultationValuer val(c, index, link, buckets, vp);
    return val.rank_and_filter(c.users.at("u"), c.users.at("u").searches[0]);
  };
  {
    auto r = ranked(3, 30);
    bool sorted = true;
    for (std::size_t i = 1; i < r.reports.size(); ++i) sorted = sorted && r.reports[i - 1].o_aggregate >= r.reports[i].o_aggregate;
    ck.check(r.kept.size() == 3 && sorted, "3 consultations under capacity: all kept, sorted by score");
  }
  {
    auto r = ranked(40, 30);
    double min_kept = 1.0, max_dropped = 0.0;
    for (const auto& rep : r.reports) {
      bool kept = false;
      for (const auto* c : r.kept) kept = kept || c->id == rep.cid;
      if (kept) min_kept = std::min(min_kept, rep.o_aggregate);
      else max_dropped = std::max(max_dropped, rep.o_aggregate);
    }
    ck.check(r.kept.size() == 30 && r.reports.size() == 40 && min_kept >= max_dropped,
             "40 consultations, l_seq 30: the 30 highest are kept");
  }
}

}  // namespace vaps::testing
