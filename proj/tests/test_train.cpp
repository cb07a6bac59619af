#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "vaps/train.hpp"

using namespace vaps;
using namespace vaps::testing;
using ad::Tensor;

namespace {

// -log softmax(logits / tau)[0], computed directly.
double nll_oracle(const std::vector<double>& logits, double tau) {
  double z = 0.0;
  for (double l : logits) z += std::exp(l / tau);
  return -(logits[0] / tau - std::log(z));
}

// Mean attention weight on the linked action over every (consultation, action) pair.
double linked_attention_mass(const Model& model, const std::vector<SessionInput>& sessions, std::size_t& pairs) {
  ad::NoGradGuard ng;
  double mass = 0.0;
  pairs = 0;
  for (const auto& s : sessions) {
    if (s.va_pairs.empty()) continue;
    const SessionInput* one[] = {&s};
    auto enc = model.encode_batch(one, {});
    const auto& att = enc.cai[0].attention;
    if (!att.defined()) continue;
    for (auto [ci, aj] : s.va_pairs) {
      mass += att.at(ci, aj);
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : mass / static_cast<double>(pairs);
}

}  // namespace

TEST(Loss, UniformLogitsGiveLogOfCandidateCount) {
  EXPECT_NEAR(softmax_nll(Tensor::zeros({1, 11}), 0.1).item(), std::log(11.0), 1e-12);
  for (std::size_t k : {1u, 4u, 127u}) {
    auto l = loss_va(Tensor::zeros({3, 4}), Tensor::zeros({k + 1, 4}), 0.1);
    EXPECT_NEAR(softmax_nll(Tensor::zeros({3, k + 1}), 0.1).item(), std::log(k + 1.0), 1e-12);
    EXPECT_NEAR(l.item(), std::log(k + 1.0), 1e-12);
  }
}

TEST(Loss, MatchesDirectFormula) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 2 + rng.index(12);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-3, 3);
    double tau = rng.uniform(0.05, 2.0);
    EXPECT_NEAR(softmax_nll(Tensor::row(v), tau).item(), nll_oracle(v, tau), 1e-9);
  }
}

TEST(Loss, DominantPositiveTendsToZero) {
  std::vector<double> v(11, 0.0);
  v[0] = 10.0;
  EXPECT_LT(softmax_nll(Tensor::row(v), 0.1).item(), 1e-12);
}

TEST(Loss, SharperTemperatureNeverHurtsAWinningPositive) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(8);
    for (auto& x : v) x = rng.uniform(-1, 1);
    v[0] = *std::max_element(v.begin(), v.end()) + 0.01;
    double prev = 1e300;
    for (double tau : {2.0, 1.0, 0.5, 0.1, 0.05}) {
      double l = softmax_nll(Tensor::row(v), tau).item();
      EXPECT_LE(l, prev + 1e-15);
      prev = l;
    }
  }
}

TEST(Loss, DuplicateNegativesCountTwice) {
  double got = softmax_nll(Tensor::row({1.0, 0.5, 0.5}), 1.0).item();
  EXPECT_NEAR(got, -std::log(std::exp(1.0) / (std::exp(1.0) + 2 * std::exp(0.5))), 1e-12);
}

TEST(Loss, TotalCombinesTerms) {
  TrainConfig cfg;
  auto t = total_loss(Tensor::scalar(2.0), Tensor::scalar(1.0), Tensor::scalar(500.0), cfg);
  EXPECT_NEAR(t.item(), 2.0 + 0.1 * 1.0 + 1e-5 * 500.0, 1e-12);
  cfg.lambda_va = 0.0;
  cfg.lambda_l2 = 0.0;
  EXPECT_EQ(total_loss(Tensor::scalar(2.0), Tensor::scalar(1.0), Tensor::scalar(500.0), cfg).item(), 2.0);
}

TEST(Loss, L2PenaltyIsSumOfSquares) {
  std::vector<Tensor> ps{Tensor::parameter({1, 2}, {1.0, 2.0}), Tensor::parameter({2, 1}, {-3.0, 0.5})};
  EXPECT_DOUBLE_EQ(l2_penalty(ps).item(), 1 + 4 + 9 + 0.25);
}

TEST(Sampling, NegativesExcludeThePositive) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n_items = 2 + rng.index(30), pos = rng.index(n_items);
    for (auto x : sample_negatives(pos, n_items, 10, rng)) {
      EXPECT_NE(x, pos);
      EXPECT_LT(x, n_items);
    }
  }
  EXPECT_THROW(sample_negatives(0, 1, 3, rng), DataError);
}

TEST(Split, LeaveLastOut) {
  World w(30, 100);
  std::map<UserId, std::vector<Timestamp>> by_user;
  for (const auto& [u, h] : w.data.corpus.users) {
    for (const auto& s : h.searches) by_user[u].push_back(s.query.timestamp);
  }
  std::map<UserId, std::int64_t> test_ts;
  for (const auto& s : w.split.test) {
    EXPECT_FALSE(test_ts.count(s.user_id));
    test_ts[s.user_id] = s.ts.hours;
  }
  for (const auto& s : w.split.valid) EXPECT_LT(s.ts.hours, test_ts.at(s.user_id));
  for (const auto& s : w.split.train) EXPECT_LT(s.ts.hours, test_ts.at(s.user_id));
  EXPECT_EQ(w.split.train.size() + w.split.valid.size() + w.split.test.size(),
            std::accumulate(by_user.begin(), by_user.end(), std::size_t{0},
                            [](std::size_t a, const auto& kv) { return a + kv.second.size(); }));
}

TEST(Train, SmokeRunLogsOneFiniteEpoch) {
  World w(5, 20);
  auto model = w.model();
  TrainConfig tc;
  tc.max_epochs = 1;
  auto r = train(model, w.split.train, w.split.valid, w.prep->catalog, tc);
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.log[0].total));
  EXPECT_GE(r.log[0].l_search, 0.0);
  EXPECT_GE(r.log[0].l_va, 0.0);
  std::ostringstream csv;
  write_epoch_csv(csv, r.log);
  EXPECT_EQ(csv.str().rfind("epoch,l_search,l_va,total,valid_ndcg10,elapsed_seconds\n1,", 0), 0u);
}

TEST(Train, DeterministicUnderSeed) {
  auto run = [] {
    World w(15, 60);
    auto model = w.model();
    TrainConfig tc;
    tc.max_epochs = 3;
    auto r = train(model, w.split.train, w.split.valid, w.prep->catalog, tc);
    std::vector<double> out;
    for (const auto& e : r.log) out.insert(out.end(), {e.l_search, e.l_va, e.total, e.valid_ndcg10});
    for (const auto& p : model.parameters()) out.insert(out.end(), p.data().begin(), p.data().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, EarlyStoppingHonoursPatience) {
  World w(20, 80);
  auto model = w.model();
  TrainConfig tc;
  tc.patience = 2;
  tc.max_epochs = 40;
  tc.lr = 0.05;  // noisy enough that validation plateaus quickly
  auto r = train(model, w.split.train, w.split.valid, w.prep->catalog, tc);
  EXPECT_LE(r.log.size() - r.best_epoch, tc.patience);
  double best = 0.0;
  for (const auto& e : r.log) best = std::max(best, e.valid_ndcg10);
  EXPECT_EQ(r.best_valid_ndcg10, best);
  for (const auto& e : r.log) {
    EXPECT_TRUE(std::isfinite(e.total));
    EXPECT_GE(e.l_search, 0.0);
    EXPECT_GE(e.l_va, 0.0);
  }
}

TEST(Train, ValueAlignmentRaisesLinkedAttention) {
  World w(60, 200);
  auto model = w.model();
  std::size_t pairs = 0;
  const double before = linked_attention_mass(model, w.split.train, pairs);
  ASSERT_GE(pairs, 100u);
  TrainConfig tc;
  tc.max_epochs = 15;
  tc.early_stopping = false;
  tc.lambda_va = 1.0;
  train(model, w.split.train, {}, w.prep->catalog, tc);
  const double after = linked_attention_mass(model, w.split.train, pairs);
  EXPECT_GT(after, before);
}

TEST(Train, RejectsBadConfigAndEmptyData) {
  World w(5, 20);
  auto model = w.model();
  TrainConfig tc;
  tc.tau1 = 0.0;
  EXPECT_THROW(train(model, w.split.train, {}, w.prep->catalog, tc), ConfigError);
  EXPECT_THROW(train(model, {}, {}, w.prep->catalog, TrainConfig{}), DataError);
}
