#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vaps/corpus.hpp"
#include "vaps/datagen.hpp"
#include "vaps/eval.hpp"
#include "vaps/features.hpp"
#include "vaps/index.hpp"
#include "vaps/linkage.hpp"
#include "vaps/model.hpp"
#include "vaps/train.hpp"
#include "vaps/value.hpp"

namespace vaps {

/// Everything derived from a corpus before any model exists.
struct Prepared {
  Corpus corpus;
  InvertedIndex index;
  LinkageTable linkage;
  BucketTable buckets;
  Vocabulary vocab;
  Catalog catalog;

  Prepared(Corpus c, std::size_t max_tokens, const LinkageParams& lp = {})
      : corpus(std::move(c)),
        index(build_index(corpus)),
        linkage(build_linkage(corpus, lp)),
        buckets(fit_buckets(linkage)),
        vocab(Vocabulary::from_corpus(corpus)),
        catalog(corpus, vocab, max_tokens) {}

  /// From artifacts built by earlier stages.
  Prepared(Corpus c, InvertedIndex idx, LinkageTable link, std::size_t max_tokens)
      : corpus(std::move(c)),
        index(std::move(idx)),
        linkage(std::move(link)),
        buckets(fit_buckets(linkage)),
        vocab(Vocabulary::from_corpus(corpus)),
        catalog(corpus, vocab, max_tokens) {}

  Prepared(const Prepared&) = delete;
  Prepared& operator=(const Prepared&) = delete;
};

/// Share of (search, high, low) consultation triples in which the high
/// consultation gets the strictly larger aggregate value.
struct Separation {
  std::size_t triples = 0;
  std::size_t correct = 0;
  double rate() const { return triples == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(triples); }
};

inline Separation planted_separation(const std::vector<ValueReport>& reports, const Oracle& oracle) {
  std::map<std::pair<UserId, std::int64_t>, std::vector<std::pair<double, bool>>> by_search;
  for (const auto& r : reports) {
    auto it = oracle.find({r.user, r.search_ts.hours, r.cid});
    if (it == oracle.end()) continue;
    by_search[{r.user, r.search_ts.hours}].emplace_back(r.o_aggregate, it->second == Usefulness::high);
  }
  Separation s;
  for (const auto& [_, rows] : by_search) {
    for (const auto& hi : rows) {
      if (!hi.second) continue;
      for (const auto& lo : rows) {
        if (lo.second) continue;
        ++s.triples;
        if (hi.first > lo.first) ++s.correct;
      }
    }
  }
  return s;
}

/// One row of the ablation table: which value components, losses and
/// modules are active.
struct Variant {
  std::string name = "VAPS";
  double lambda1 = 0.5;
  double lambda2 = 0.3;
  FilterMode filter = FilterMode::value;
  bool use_va = true;
  bool use_cai = true;
};

/// Full model, the five single ablations, and the semantic-only baseline
/// (most recent consultations, no VA loss, no CAI). `lambda1`/`lambda2` are
/// the full model's weights.
inline std::vector<Variant> ablation_variants(double lambda1 = 0.5, double lambda2 = 0.3) {
  auto base = [&](std::string name) {
    Variant v;
    v.name = std::move(name);
    v.lambda1 = lambda1;
    v.lambda2 = lambda2;
    return v;
  };
  std::vector<Variant> out;
  out.push_back(base("VAPS"));
  auto v = base("w/o O_time");
  v.lambda1 = 1.0;
  out.push_back(v);
  v = base("w/o O_scope");
  v.lambda2 = 0.0;
  out.push_back(v);
  v = base("w/o O_action");
  v.lambda2 = 1.0;
  out.push_back(v);
  v = base("w/o L_VA");
  v.use_va = false;
  out.push_back(v);
  v = base("w/o CAI");
  v.use_cai = false;
  out.push_back(v);
  v = base("semantic-only");
  v.filter = FilterMode::recency;
  v.use_va = false;
  v.use_cai = false;
  out.push_back(v);
  return out;
}

struct ExperimentConfig {
  ValueParams value;
  ModelConfig model;
  TrainConfig train;
  FeatureParams features;
  std::size_t eval_negatives = 99;
};

struct VariantResult {
  std::string name;
  TrainResult train;
  MetricReport test;
  MetricReport valid;
};

/// Sessions for the given value weights and filter, split leave-last-out.
inline SessionSplit featurize(const Prepared& p, const ValueParams& vp, FeatureParams fp) {
  ConsultationValuer valuer(p.corpus, p.index, p.linkage, p.buckets, vp);
  fp.time_bucket_count = vp.time_bucket_count;
  Featurizer featurizer(p.corpus, p.vocab, p.catalog, p.linkage, valuer, fp);
  return split_sessions(p.corpus, featurizer);
}

inline ModelConfig sized_model(const Prepared& p, ModelConfig m, const FeatureParams& fp, const ValueParams& vp) {
  m.vocab_size = p.vocab.size();
  m.n_items = p.catalog.n_items();
  m.n_users = p.catalog.n_users();
  m.n_time_buckets = vp.time_bucket_count;
  m.max_tokens = fp.max_tokens;
  return m;
}

/// Trains one variant from scratch under `seed` and evaluates it on test.
inline VariantResult run_variant(const Prepared& p, const Variant& v, ExperimentConfig cfg, std::uint64_t seed,
                                 const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.value.lambda1 = v.lambda1;
  cfg.value.lambda2 = v.lambda2;
  cfg.features.filter = v.filter;
  if (!v.use_va) cfg.train.lambda_va = 0.0;
  if (!v.use_cai) cfg.model.lambda3_skip = 0.0;
  cfg.model.seed = seed;
  cfg.train.seed = seed;

  auto split = featurize(p, cfg.value, cfg.features);
  Model model(sized_model(p, cfg.model, cfg.features, cfg.value), p.catalog.item_tokens());
  VariantResult r;
  r.name = v.name;
  r.train = train(model, split.train, split.valid, p.catalog, cfg.train, on_epoch);
  EvalOptions eo;
  eo.seed = seed;
  eo.n_neg = std::min(cfg.eval_negatives, p.catalog.n_items() - 1);
  eo.split = "test";
  r.test = evaluate(model_scorer(model), split.test, p.catalog, eo);
  if (!split.valid.empty()) {
    eo.split = "valid";
    r.valid = evaluate(model_scorer(model), split.valid, p.catalog, eo);
  }
  return r;
}

}  // namespace vaps
