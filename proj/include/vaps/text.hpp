#pragma once

#include <algorithm>
#include <iterator>
#include <cctype>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace vaps {

/// Small English function-word list. Terms in this list never become index
/// terms and are skipped when matching consultations or queries.
inline constexpr std::string_view kStopwords[] = {
    "a",    "about", "after", "all",   "also", "an",   "and",   "any",  "are",
    "as",   "at",    "be",    "been",  "but",  "by",   "can",   "do",   "for",
    "from", "had",   "has",   "have",  "he",   "her",  "his",   "how",  "if",
    "in",   "into",  "is",    "it",    "its",  "me",   "my",    "no",   "not",
    "of",   "on",    "or",    "our",   "she",  "so",   "than",  "that", "the",
    "their", "them", "then",  "there", "they", "this", "to"};

inline bool is_stopword(std::string_view token) {
  return std::find(std::begin(kStopwords), std::end(kStopwords), token) != std::end(kStopwords);
}

/// Lowercase, split on anything that is not an ASCII letter or digit, drop
/// stopwords and single-character tokens. Order and repeats are preserved.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.size() > 1 && !is_stopword(cur)) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc) != 0) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

inline std::set<std::string> token_set(std::string_view text) {
  auto toks = tokenize(text);
  return {toks.begin(), toks.end()};
}

/// True when `needle` occurs as a contiguous run inside `haystack`.
/// An empty needle never matches.
inline bool contains_sequence(const std::vector<std::string>& haystack,
                              const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) !=
         haystack.end();
}

}  // namespace vaps
