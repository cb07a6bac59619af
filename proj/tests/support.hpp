#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "vaps/corpus.hpp"

namespace vaps::testing {

/// Sink for example checks so the same checks drive both the unit suite and
/// the acceptance binary.
class Checker {
 public:
  virtual ~Checker() = default;
  virtual void check(bool ok, const std::string& what) = 0;

  void near(double got, double want, double tol, const std::string& what) {
    char buf[96];
    std::snprintf(buf, sizeof buf, " (got %.12g, want %.12g)", got, want);
    check(std::abs(got - want) <= tol, what + buf);
  }

  template <typename Fn>
  void throws(Fn&& fn, const std::string& what) {
    bool threw = false;
    try {
      fn();
    } catch (const std::exception&) {
      threw = true;
    }
    check(threw, what);
  }
};

/// Collects failure messages.
class ListChecker : public Checker {
 public:
  void check(bool ok, const std::string& what) override {
    ++total;
    if (!ok) failures.push_back(what);
  }
  std::size_t total = 0;
  std::vector<std::string> failures;
};

inline Item make_item(std::string id, std::string title, std::vector<std::string> attrs = {}) {
  return Item{std::move(id), std::move(title), std::move(attrs)};
}

inline Corpus corpus_of(const std::vector<Item>& items) {
  Corpus c;
  for (const auto& it : items) c.items.emplace(it.id, it);
  return c;
}

inline Consultation consult(std::string id, std::string user_turn, std::int64_t ts, std::string assistant_turn = "") {
  return Consultation{std::move(id), std::move(user_turn), std::move(assistant_turn), Timestamp{ts}};
}

inline Interaction click(std::string item, std::int64_t ts) {
  return Interaction::on_item(ActionType::click, std::move(item), Timestamp{ts});
}

inline Interaction buy(std::string item, std::int64_t ts) {
  return Interaction::on_item(ActionType::buy, std::move(item), Timestamp{ts});
}

inline Interaction search(std::string text, std::int64_t ts) { return Interaction::search(Query{std::move(text), Timestamp{ts}}); }

}  // namespace vaps::testing
