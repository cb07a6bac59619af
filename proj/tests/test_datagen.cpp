#include <gtest/gtest.h>

#include <sstream>

#include "vaps/datagen.hpp"
#include "vaps/index.hpp"
#include "vaps/linkage.hpp"
#include "vaps/pipeline.hpp"

using namespace vaps;

namespace {

std::string dump(const GeneratedData& g) {
  std::ostringstream ss;
  write_items(ss, g.corpus);
  write_events(ss, g.corpus);
  write_oracle(ss, g.oracle);
  return ss.str();
}

GenSpec small_spec() {
  GenSpec s;
  s.n_users = 40;
  s.n_items = 100;
  return s;
}

}  // namespace

TEST(Datagen, OutOfScopeOnlyHasNoScenarioTermsAndLowLabels) {
  auto spec = small_spec();
  spec.rates = {0.0, 0.0, 1.0, 0.0};
  auto g = generate(spec);
  auto index = build_index(g.corpus);
  std::size_t n = 0;
  for (const auto& [_, h] : g.corpus.users) {
    for (const auto& c : h.consultations) {
      EXPECT_TRUE(matched_terms(index, c).empty()) << c.text();
      ++n;
    }
  }
  EXPECT_GT(n, 0u);
  for (const auto& [_, label] : g.oracle) EXPECT_EQ(label, Usefulness::low);
}

TEST(Datagen, SameSeedIsByteIdentical) {
  auto spec = small_spec();
  EXPECT_EQ(dump(generate(spec)), dump(generate(spec)));
  auto other = spec;
  other.seed = spec.seed + 1;
  EXPECT_NE(dump(generate(spec)), dump(generate(other)));
}

TEST(Datagen, RejectsEmptySpecs) {
  auto spec = small_spec();
  spec.n_users = 0;
  EXPECT_THROW(generate(spec), ConfigError);
  spec = small_spec();
  spec.n_items = 0;
  EXPECT_THROW(generate(spec), ConfigError);
  spec = small_spec();
  spec.rates = {0.5, 0.5, 0.5, 0.0};
  EXPECT_THROW(generate(spec), ConfigError);
}

TEST(Datagen, CorpusIsValid) {
  auto g = generate(small_spec());
  std::ostringstream items, events;
  write_items(items, g.corpus);
  write_events(events, g.corpus);
  std::istringstream a(items.str()), b(events.str());
  EXPECT_EQ(load_corpus(a, b), g.corpus);
  for (const auto& [_, h] : g.corpus.users) {
    for (const auto& s : h.searches) EXPECT_TRUE(g.corpus.items.count(s.ground_truth_item));
  }
}

TEST(Datagen, VerifiedConsultationsAreLinkable) {
  auto g = generate(small_spec());
  auto link = build_linkage(g.corpus);
  std::size_t verified = 0;
  for (const auto& [key, pattern] : g.patterns) {
    if (pattern != Pattern::in_scope_verified) continue;
    ++verified;
    const auto& acts = link.actions(key.first, key.second);
    bool posterior_item_action = false;
    for (const auto& la : acts) posterior_item_action = posterior_item_action || la.action.type != ActionType::search;
    EXPECT_TRUE(posterior_item_action) << key.first << " " << key.second;
  }
  EXPECT_GT(verified, 0u);
}

TEST(Datagen, HighLabelsOnlyOnVerifiedConsultations) {
  auto g = generate(small_spec());
  for (const auto& [key, label] : g.oracle) {
    if (label == Usefulness::high) EXPECT_EQ(g.patterns.at({key.user, key.cid}), Pattern::in_scope_verified);
  }
}

TEST(Datagen, PlantedSeparationOnDefaultSpec) {
  auto g = generate(GenSpec{});
  Prepared p(std::move(g.corpus), 64);
  ConsultationValuer valuer(p.corpus, p.index, p.linkage, p.buckets, ValueParams{});
  auto sep = planted_separation(assess_corpus(p.corpus, valuer), g.oracle);
  EXPECT_GT(sep.triples, 1000u);
  EXPECT_GE(sep.rate(), 0.95);
}
