#pragma once

#include <memory>

#include "vaps/datagen.hpp"
#include "vaps/pipeline.hpp"

namespace vaps::testing {

/// A generated corpus with everything derived from it, featurized under
/// default value settings.
struct World {
  GeneratedData data;
  std::unique_ptr<Prepared> prep;
  ExperimentConfig cfg;
  SessionSplit split;

  World(std::size_t n_users, std::size_t n_items, std::size_t d = 8, std::uint64_t seed = 7) {
    GenSpec spec;
    spec.n_users = n_users;
    spec.n_items = n_items;
    spec.seed = seed;
    data = generate(spec);
    prep = std::make_unique<Prepared>(data.corpus, cfg.features.max_tokens);
    cfg.model.d = d;
    split = featurize(*prep, cfg.value, cfg.features);
  }

  ModelConfig model_config() const { return sized_model(*prep, cfg.model, cfg.features, cfg.value); }
  Model model() const { return Model(model_config(), prep->catalog.item_tokens()); }

  static std::vector<const SessionInput*> ptrs(const std::vector<SessionInput>& v, std::size_t n = SIZE_MAX) {
    std::vector<const SessionInput*> out;
    for (std::size_t i = 0; i < v.size() && i < n; ++i) out.push_back(&v[i]);
    return out;
  }
};

}  // namespace vaps::testing
