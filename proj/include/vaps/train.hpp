#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vaps/error.hpp"
#include "vaps/eval.hpp"
#include "vaps/features.hpp"
#include "vaps/model.hpp"
#include "vaps/random.hpp"
#include "vaps/tensor.hpp"

namespace vaps {

struct TrainConfig {
  double tau1 = 0.1;
  double tau2 = 0.1;
  double lambda_va = 0.1;
  double lambda_l2 = 1e-5;
  std::size_t n_neg_search = 10;
  std::size_t va_batch = 128;
  std::size_t batch_size = 72;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  double lr = 1e-3;
  bool early_stopping = true;
  std::uint64_t seed = 7;

  void validate() const {
    if (!(tau1 > 0.0) || !(tau2 > 0.0)) throw ConfigError("train: temperatures must be positive");
    if (lambda_va < 0.0 || lambda_l2 < 0.0) throw ConfigError("train: loss weights must be non-negative");
    if (n_neg_search < 1 || va_batch < 1 || batch_size < 1 || max_epochs < 1 || patience < 1) {
      throw ConfigError("train: counts must be at least 1");
    }
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  }
};

/// Mean over rows of -log softmax(logits / tau)[row, 0]: every row holds
/// one positive in column 0 followed by its negatives.
inline Tensor softmax_nll(const Tensor& logits, double tau) {
  if (logits.rows() == 0 || logits.cols() == 0) throw ShapeError("softmax_nll: empty logits");
  const std::size_t m = logits.rows();
  std::vector<std::size_t> first(m);
  for (std::size_t r = 0; r < m; ++r) first[r] = r * logits.cols();
  Tensor lp = ad::pick(ad::log_softmax(ad::scale(logits, 1.0 / tau)), first, {m, 1});
  return ad::scale(ad::sum(lp), -1.0 / static_cast<double>(m));
}

/// Search loss for one session: the positive item vector is row 0 of
/// `candidates`, negatives follow (duplicates count separately).
inline Tensor loss_search(const Tensor& e_final_q, const Tensor& candidates, double tau2) {
  return softmax_nll(ad::matmul_bt(e_final_q, candidates), tau2);
}

/// Consultation-action contrastive loss for one linked pair: the projected
/// consultation query `q` against projected action keys, positive in row 0.
/// The positive stays in the denominator.
inline Tensor loss_va(const Tensor& q, const Tensor& keys, double tau1) {
  return softmax_nll(ad::matmul_bt(q, keys), tau1);
}

/// Logit matrix whose row r holds q[rows[r]] . k[c] for c in cols[r].
inline Tensor gather_logits(const Tensor& q, const Tensor& k, std::span<const std::size_t> rows,
                            const std::vector<std::vector<std::size_t>>& cols) {
  const std::size_t w = cols.empty() ? 0 : cols.front().size();
  std::vector<std::size_t> flat;
  flat.reserve(cols.size() * w);
  for (const auto& c : cols) {
    if (c.size() != w) throw ShapeError("gather_logits: ragged candidate lists");
    flat.insert(flat.end(), c.begin(), c.end());
  }
  return ad::gathered_dots(q, k, rows, flat, w);
}

inline Tensor l2_penalty(std::span<const Tensor> params) {
  std::vector<Tensor> terms;
  for (const auto& p : params) terms.push_back(ad::l2_norm_sq(p));
  if (terms.empty()) return Tensor::scalar(0.0);
  return ad::sum(ad::concat_rows(terms));
}

inline Tensor total_loss(const Tensor& l_search, const Tensor& l_va, const Tensor& reg, const TrainConfig& cfg) {
  return ad::add(ad::add(l_search, ad::scale(l_va, cfg.lambda_va)), ad::scale(reg, cfg.lambda_l2));
}

/// `n` uniform draws from [0, n_items) excluding `positive`, with replacement.
inline std::vector<std::size_t> sample_negatives(std::size_t positive, std::size_t n_items, std::size_t n, Rng& rng) {
  if (n_items < 2) throw DataError("sample_negatives: need at least two items");
  std::vector<std::size_t> out;
  out.reserve(n);
  while (out.size() < n) {
    auto c = rng.index(n_items - 1);
    out.push_back(c >= positive ? c + 1 : c);
  }
  return out;
}

/// Chronological leave-last-out per user: last search is test, the one
/// before it valid, the rest train.
struct SessionSplit {
  std::vector<SessionInput> train, valid, test;
};

inline SessionSplit split_sessions(const Corpus& corpus, const Featurizer& featurizer) {
  SessionSplit out;
  for (const auto& [_, h] : corpus.users) {
    const std::size_t n = h.searches.size();
    for (std::size_t i = 0; i < n; ++i) {
      auto in = featurizer.build(h, h.searches[i]);
      if (i + 1 == n) {
        out.test.push_back(std::move(in));
      } else if (i + 2 == n) {
        out.valid.push_back(std::move(in));
      } else {
        out.train.push_back(std::move(in));
      }
    }
  }
  return out;
}

struct BatchLosses {
  Tensor l_search, l_va, total;
  std::size_t n_va_pairs = 0;
};

/// Builds the graph for one batch: mean search loss over sessions, mean VA
/// loss over linked pairs (negatives from the session's other actions, then
/// actions of other sessions in the batch, up to va_batch - 1), and the total.
inline BatchLosses batch_losses(const Model& model, std::span<const SessionInput* const> batch,
                                const TrainConfig& cfg, Rng& rng) {
  const std::size_t n_items = model.config().n_items;
  std::vector<std::vector<std::size_t>> cands;
  std::vector<std::size_t> extra;
  for (const auto* s : batch) {
    std::vector<std::size_t> c{s->target};
    auto neg = sample_negatives(s->target, n_items, cfg.n_neg_search, rng);
    c.insert(c.end(), neg.begin(), neg.end());
    extra.insert(extra.end(), c.begin(), c.end());
    cands.push_back(std::move(c));
  }
  auto enc = model.encode_batch(batch, extra);

  BatchLosses out;
  {
    std::vector<std::vector<std::size_t>> cols;
    std::vector<std::size_t> rows(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      rows[b] = b;
      cols.push_back(enc.rows_of(cands[b]));
    }
    out.l_search = softmax_nll(gather_logits(enc.e_final, enc.item_matrix, rows, cols), cfg.tau2);
  }

  // Queries and keys of every session stacked; offsets locate each block.
  std::vector<Tensor> q_blocks, k_blocks;
  std::vector<std::size_t> q_offset, k_offset;
  std::size_t n_q = 0, n_k = 0;
  for (const auto& c : enc.cai) {
    q_offset.push_back(n_q);
    k_offset.push_back(n_k);
    if (c.q_proj.defined() && c.k_proj.defined()) {
      q_blocks.push_back(c.q_proj);
      k_blocks.push_back(c.k_proj);
      n_q += c.q_proj.rows();
      n_k += c.k_proj.rows();
    }
  }
  const std::size_t width = std::min(cfg.va_batch, n_k);
  std::vector<std::size_t> pair_rows;
  std::vector<std::vector<std::size_t>> pair_cols;
  if (cfg.lambda_va > 0.0 && width > 1) {
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = *batch[b];
      const auto& c = enc.cai[b];
      if (s.va_pairs.empty() || !c.k_proj.defined() || !c.q_proj.defined()) continue;
      const std::size_t own = c.k_proj.rows();
      std::vector<std::size_t> others;
      for (std::size_t r = 0; r < n_k; ++r) {
        if (r < k_offset[b] || r >= k_offset[b] + own) others.push_back(r);
      }
      for (const auto& [ci, aj] : s.va_pairs) {
        std::vector<std::size_t> cols{k_offset[b] + aj};
        for (std::size_t j = 0; j < own && cols.size() < width; ++j) {
          if (j != aj) cols.push_back(k_offset[b] + j);
        }
        if (cols.size() < width) {
          // Top up with a uniform sample of other sessions' actions.
          const std::size_t need = width - cols.size();
          rng.sample_prefix(others, need);
          cols.insert(cols.end(), others.begin(), others.begin() + static_cast<std::ptrdiff_t>(need));
        }
        pair_rows.push_back(q_offset[b] + ci);
        pair_cols.push_back(std::move(cols));
      }
    }
  }
  out.n_va_pairs = pair_rows.size();
  if (pair_rows.empty()) {
    out.l_va = Tensor::scalar(0.0);
  } else {
    out.l_va = softmax_nll(
        gather_logits(ad::concat_rows(q_blocks), ad::concat_rows(k_blocks), pair_rows, pair_cols), cfg.tau1);
  }
  auto params = model.parameters();
  Tensor reg = cfg.lambda_l2 > 0.0 ? l2_penalty(params) : Tensor::scalar(0.0);
  out.total = total_loss(out.l_search, out.l_va, reg, cfg);
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;
  double l_search = 0.0;
  double l_va = 0.0;
  double total = 0.0;
  double valid_ndcg10 = 0.0;
  double elapsed_seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_valid_ndcg10 = 0.0;
};

inline void write_epoch_csv(std::ostream& out, std::span<const EpochLog> log) {
  out << "epoch,l_search,l_va,total,valid_ndcg10,elapsed_seconds\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.3f\n", e.epoch, e.l_search, e.l_va, e.total,
                  e.valid_ndcg10, e.elapsed_seconds);
    out << buf;
  }
}

inline BatchScorer model_scorer(const Model& model) {
  return [&model](std::span<const SessionInput* const> batch, const std::vector<std::vector<std::size_t>>& cands) {
    return model.score_batch(batch, cands);
  };
}

/// Mini-batch Adam over the training sessions. After each epoch the model is
/// scored on `valid` (ranking protocol, NDCG@10); training stops `patience`
/// epochs after the best one and the best parameters are restored. With an
/// empty validation split, or early stopping off, the last epoch is kept.
inline TrainResult train(Model& model, std::span<const SessionInput> train_set, std::span<const SessionInput> valid,
                         const Catalog& catalog, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  Rng rng(mix_seed(cfg.seed, 0x7472616eULL));
  ad::AdamState adam;
  adam.lr = cfg.lr;
  auto params = model.parameters();
  const bool use_valid = !valid.empty();
  EvalOptions eo;
  eo.protocol = Protocol::ranking;
  eo.seed = cfg.seed;
  eo.split = "valid";
  eo.n_neg = std::min<std::size_t>(99, catalog.n_items() - 1);

  TrainResult result;
  std::vector<std::vector<double>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : params) best.emplace_back(p.data().begin(), p.data().end());
  };
  double best_score = -1.0;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    std::size_t n_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      std::vector<const SessionInput*> batch;
      for (std::size_t i = b0; i < std::min(order.size(), b0 + cfg.batch_size); ++i) batch.push_back(&train_set[order[i]]);
      auto losses = batch_losses(model, batch, cfg, rng);
      for (auto& p : params) p.zero_grad();
      ad::backward(losses.total);
      ad::adam_step(params, adam);
      log.l_search += losses.l_search.item();
      log.l_va += losses.l_va.item();
      log.total += losses.total.item();
      ++n_batches;
    }
    log.l_search /= static_cast<double>(n_batches);
    log.l_va /= static_cast<double>(n_batches);
    log.total /= static_cast<double>(n_batches);
    if (use_valid) log.valid_ndcg10 = evaluate(model_scorer(model), valid, catalog, eo).at("NDCG@10");
    log.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (use_valid && log.valid_ndcg10 > best_score) {
      best_score = log.valid_ndcg10;
      result.best_epoch = epoch;
      snapshot();
    }
    if (cfg.early_stopping && use_valid && epoch - result.best_epoch >= cfg.patience) break;
  }
  if (cfg.early_stopping && use_valid && !best.empty()) {
    for (std::size_t k = 0; k < params.size(); ++k) std::copy(best[k].begin(), best[k].end(), params[k].mutable_data().begin());
  } else {
    result.best_epoch = result.log.back().epoch;
  }
  result.best_valid_ndcg10 = use_valid ? std::max(best_score, 0.0) : 0.0;
  if (!(cfg.early_stopping && use_valid)) result.best_valid_ndcg10 = result.log.back().valid_ndcg10;
  return result;
}

}  // namespace vaps
