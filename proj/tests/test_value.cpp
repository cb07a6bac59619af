#include <gtest/gtest.h>

#include <sstream>

#include "gtest_checker.hpp"
#include "module_examples.hpp"
#include "value_oracle.hpp"
#include "vaps/datagen.hpp"
#include "vaps/pipeline.hpp"
#include "vaps/value.hpp"

using namespace vaps;
using namespace vaps::testing;

TEST(Value, Examples) {
  GtestChecker ck;
  value_examples(ck);
}

TEST(ValueProperty, TimeDecayStrictlyDecreasing) {
  double prev = 2.0;
  for (std::int64_t dt = 0; dt < 2000; dt += 7) {
    double v = time_decay_value(Timestamp{dt}, Timestamp{0}, 0.99);
    EXPECT_LT(v, prev);
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 1.0);
    prev = v;
  }
}

TEST(ValueProperty, BucketizeMonotoneTenths) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::int64_t> sample(1 + rng.index(60));
    for (auto& x : sample) x = rng.uniform_int(0, 9);
    auto cuts = nearest_rank_cuts(sample);
    EXPECT_TRUE(std::is_sorted(cuts.begin(), cuts.end()));
    double prev = 0.0;
    for (std::int64_t f = 0; f < 12; ++f) {
      double r = bucketize(f, cuts);
      EXPECT_GE(r, prev);
      EXPECT_NEAR(r * 10.0, std::round(r * 10.0), 1e-12);
      EXPECT_GE(r, 0.0);
      EXPECT_LE(r, 1.0);
      prev = r;
    }
  }
}

TEST(ValueProperty, GammaSumsToOneAndFavoursScarcity) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Interaction> post;
    std::array<std::size_t, 3> n{rng.index(6), rng.index(6), rng.index(6)};
    for (std::size_t i = 0; i < n[0]; ++i) post.push_back(search("q", 0));
    for (std::size_t i = 0; i < n[1]; ++i) post.push_back(click("i", 0));
    for (std::size_t i = 0; i < n[2]; ++i) post.push_back(buy("i", 0));
    auto g = gamma_weights(post);
    if (post.empty()) {
      EXPECT_TRUE(g.empty());
      continue;
    }
    double sum = 0.0;
    for (auto& [_, w] : g) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    for (auto a : kActionTypes)
      for (auto b : kActionTypes) {
        if (n[index_of(a)] > 0 && n[index_of(b)] > 0 && n[index_of(a)] < n[index_of(b)]) EXPECT_GT(g.at(a), g.at(b));
      }
  }
}

TEST(ValueProperty, AggregateMonotoneInEachArgument) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    ValueParams p;
    p.lambda1 = rng.uniform01();
    p.lambda2 = rng.uniform01();
    double x[3] = {rng.uniform01(), rng.uniform01(), rng.uniform01()};
    double base = aggregate_value(x[0], x[1], x[2], p);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);
    for (int k = 0; k < 3; ++k) {
      double y[3] = {x[0], x[1], x[2]};
      y[k] = std::min(1.0, y[k] + rng.uniform01() * (1.0 - y[k]));
      EXPECT_GE(aggregate_value(y[0], y[1], y[2], p), base);
    }
  }
}

TEST(ValueProperty, RankAndFilterDeterministic) {
  auto g = generate(GenSpec{});
  Prepared p(std::move(g.corpus), 64);
  ConsultationValuer v(p.corpus, p.index, p.linkage, p.buckets, ValueParams{});
  EXPECT_EQ(values_jsonl(assess_corpus(p.corpus, v)), values_jsonl(assess_corpus(p.corpus, v)));
}

TEST(ValueProperty, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto corpus = random_micro_corpus(seed);
    Prepared p(corpus, 64);
    ConsultationValuer v(p.corpus, p.index, p.linkage, p.buckets, ValueParams{});
    EXPECT_EQ(values_jsonl(assess_corpus(p.corpus, v)), values_jsonl(oracle_values(corpus, OracleParams{})))
        << "seed " << seed;
  }
}

TEST(Value, ReportsCarryTheirAggregate) {
  auto g = generate(GenSpec{});
  Prepared p(std::move(g.corpus), 64);
  ValueParams vp;
  ConsultationValuer v(p.corpus, p.index, p.linkage, p.buckets, vp);
  for (const auto& r : assess_corpus(p.corpus, v)) {
    EXPECT_EQ(r.o_aggregate, aggregate_value(r.o_time, r.o_scope, r.o_action, vp));
  }
}

TEST(Value, JsonlUsesSixDecimalsAndRoundTrips) {
  ValueReport r{"u1", Timestamp{12}, "c1", 0.123456789, 0.5, 0.0, 1.0, 1};
  std::ostringstream out;
  write_values(out, {r});
  EXPECT_EQ(out.str(),
            "{\"user\":\"u1\",\"search_ts\":12,\"cid\":\"c1\",\"o_time\":0.123457,\"o_scope\":0.500000,"
            "\"o_action\":0.000000,\"o_aggregate\":1.000000,\"rank\":1}\n");
  std::istringstream in(out.str());
  auto back = read_values(in);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].cid, "c1");
  EXPECT_DOUBLE_EQ(back[0].o_time, 0.123457);
}
