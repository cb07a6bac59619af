#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vaps/datagen.hpp"
#include "vaps/error.hpp"
#include "vaps/features.hpp"
#include "vaps/linkage.hpp"
#include "vaps/model.hpp"
#include "vaps/pipeline.hpp"
#include "vaps/train.hpp"
#include "vaps/value.hpp"

namespace vaps {

/// Every knob of a pipeline run in one flat namespace. The global seed
/// drives generation, initialization, batching and negative sampling.
struct RunConfig {
  std::uint64_t seed = 7;
  std::string out = "run";
  std::string items_path;   // ingest input
  std::string events_path;  // ingest input
  GenSpec gen;
  LinkageParams linkage;
  ValueParams value;
  FeatureParams features;
  ModelConfig model;
  TrainConfig train;
  std::string variant = "VAPS";
  std::size_t eval_negatives = 99;
  std::string protocol = "ranking";
  std::string split = "test";
};

namespace detail {

enum class Kind { uint, real, boolean, text };

struct Field {
  const char* name;
  Kind kind;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const RunConfig&)> get;
};

template <typename Access>
Field field(const char* name, Kind kind, Access access) {
  return {name, kind,
          [access](RunConfig& c, const nlohmann::json& v) {
            auto& ref = access(c);
            ref = v.get<std::remove_reference_t<decltype(ref)>>();
          },
          [access](const RunConfig& c) {
            RunConfig copy = c;
            return nlohmann::json(access(copy));
          }};
}

#define VAPS_FIELD(key, kind, expr) field(key, Kind::kind, [](RunConfig& c) -> auto& { return expr; })

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      VAPS_FIELD("seed", uint, c.seed),
      VAPS_FIELD("out", text, c.out),
      VAPS_FIELD("items_path", text, c.items_path),
      VAPS_FIELD("events_path", text, c.events_path),
      VAPS_FIELD("n_users", uint, c.gen.n_users),
      VAPS_FIELD("n_items", uint, c.gen.n_items),
      VAPS_FIELD("horizon_hours", uint, c.gen.horizon_hours),
      VAPS_FIELD("rate_in_scope_verified", real, c.gen.rates.in_scope_verified),
      VAPS_FIELD("rate_in_scope_unverified", real, c.gen.rates.in_scope_unverified),
      VAPS_FIELD("rate_out_of_scope", real, c.gen.rates.out_of_scope),
      VAPS_FIELD("rate_out_of_date", real, c.gen.rates.out_of_date),
      VAPS_FIELD("min_searches", uint, c.gen.min_searches),
      VAPS_FIELD("max_searches", uint, c.gen.max_searches),
      VAPS_FIELD("consult_slots", uint, c.gen.consult_slots),
      VAPS_FIELD("noise_clicks", uint, c.gen.noise_clicks),
      VAPS_FIELD("family_size", uint, c.gen.family_size),
      VAPS_FIELD("window_days", uint, c.linkage.window_days),
      VAPS_FIELD("alpha", real, c.value.alpha),
      VAPS_FIELD("lambda1", real, c.value.lambda1),
      VAPS_FIELD("lambda2", real, c.value.lambda2),
      VAPS_FIELD("l_seq", uint, c.value.l_seq),
      VAPS_FIELD("time_bucket_count", uint, c.value.time_bucket_count),
      VAPS_FIELD("lambda_thresh", uint, c.value.scope.lambda_thresh),
      VAPS_FIELD("history_len", uint, c.features.history_len),
      VAPS_FIELD("max_tokens", uint, c.features.max_tokens),
      VAPS_FIELD("d", uint, c.model.d),
      VAPS_FIELD("lambda3_skip", real, c.model.lambda3_skip),
      VAPS_FIELD("encoder_layers", uint, c.model.encoder_layers),
      VAPS_FIELD("tau1", real, c.train.tau1),
      VAPS_FIELD("tau2", real, c.train.tau2),
      VAPS_FIELD("lambda_va", real, c.train.lambda_va),
      VAPS_FIELD("lambda_l2", real, c.train.lambda_l2),
      VAPS_FIELD("n_neg_search", uint, c.train.n_neg_search),
      VAPS_FIELD("va_batch", uint, c.train.va_batch),
      VAPS_FIELD("batch_size", uint, c.train.batch_size),
      VAPS_FIELD("max_epochs", uint, c.train.max_epochs),
      VAPS_FIELD("patience", uint, c.train.patience),
      VAPS_FIELD("lr", real, c.train.lr),
      VAPS_FIELD("early_stopping", boolean, c.train.early_stopping),
      VAPS_FIELD("variant", text, c.variant),
      VAPS_FIELD("eval_negatives", uint, c.eval_negatives),
      VAPS_FIELD("protocol", text, c.protocol),
      VAPS_FIELD("split", text, c.split),
  };
  return table;
}

#undef VAPS_FIELD

inline const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.name) return &f;
  }
  return nullptr;
}

inline bool kind_matches(Kind k, const nlohmann::json& v) {
  switch (k) {
    case Kind::uint: return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    case Kind::real: return v.is_number();
    case Kind::boolean: return v.is_boolean();
    case Kind::text: return v.is_string();
  }
  return false;
}

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::uint: return "a non-negative integer";
    case Kind::real: return "a number";
    case Kind::boolean: return "true or false";
    case Kind::text: return "a string";
  }
  return "?";
}

inline std::string join_lines(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& e : v) s += "\n  " + e;
  return s;
}

}  // namespace detail

/// Applies a flat JSON object onto `cfg`. Every unknown key and every type
/// mismatch is reported in one ConfigError.
inline void apply_config(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::string> bad;
  for (const auto& [key, v] : j.items()) {
    const auto* f = detail::find_field(key);
    if (f == nullptr) {
      bad.push_back(key + ": unknown key");
    } else if (!detail::kind_matches(f->kind, v)) {
      bad.push_back(key + ": expected " + detail::kind_name(f->kind));
    }
  }
  if (!bad.empty()) throw ConfigError("invalid config keys:" + detail::join_lines(bad));
  for (const auto& [key, v] : j.items()) detail::find_field(key)->set(cfg, v);
}

/// Parses "key=value" overrides; the value is read as JSON when it parses,
/// as a bare string otherwise.
inline nlohmann::json parse_overrides(const std::vector<std::string>& assignments) {
  nlohmann::json j = nlohmann::json::object();
  std::vector<std::string> bad;
  for (const auto& a : assignments) {
    auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) {
      bad.push_back(a + ": expected key=value");
      continue;
    }
    auto key = a.substr(0, eq);
    auto text = a.substr(eq + 1);
    auto v = nlohmann::json::parse(text, nullptr, false);
    j[key] = v.is_discarded() ? nlohmann::json(text) : v;
  }
  if (!bad.empty()) throw ConfigError("invalid overrides:" + detail::join_lines(bad));
  return j;
}

inline nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::fields()) j[f.name] = f.get(cfg);
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON");
  RunConfig cfg;
  apply_config(cfg, j);
  return cfg;
}

/// The named row of the ablation table, with the configured value weights.
/// "BM25" is also accepted by validate() as an eval-only baseline.
inline Variant resolve_variant(const RunConfig& cfg) {
  for (auto& v : ablation_variants(cfg.value.lambda1, cfg.value.lambda2)) {
    if (v.name == cfg.variant) return v;
  }
  std::string names;
  for (const auto& v : ablation_variants()) names += (names.empty() ? "" : ", ") + v.name;
  throw ConfigError("variant: unknown '" + cfg.variant + "' (one of: " + names + ")");
}

/// Directory-safe variant name: "w/o O_time" -> "wo-o-time".
inline std::string variant_slug(const std::string& name) {
  std::string s;
  for (std::size_t i = 0; i < name.size(); ++i) {
    if (name.compare(i, 3, "w/o") == 0) {
      s += "wo";
      i += 2;
      continue;
    }
    char ch = name[i];
    if (ch == ' ' || ch == '_' || ch == '/') {
      if (!s.empty() && s.back() != '-') s += '-';
    } else {
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  return s;
}

/// Runs every module's own validation and collects all failures.
inline void validate(const RunConfig& cfg) {
  std::vector<std::string> bad;
  auto check = [&](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      bad.push_back(e.what());
    }
  };
  check([&] { cfg.gen.validate(); });
  check([&] { cfg.value.validate(); });
  check([&] { cfg.train.validate(); });
  check([&] {
    if (cfg.linkage.window_days <= 0) throw ConfigError("window_days: must be positive");
  });
  check([&] {
    if (cfg.model.d == 0) throw ConfigError("d: must be positive");
    if (cfg.model.lambda3_skip < 0.0) throw ConfigError("lambda3_skip: must be non-negative");
    if (cfg.model.encoder_layers != 1) throw ConfigError("encoder_layers: only 1 is supported");
  });
  check([&] {
    if (cfg.features.history_len == 0) throw ConfigError("history_len: must be positive");
    if (cfg.features.max_tokens == 0) throw ConfigError("max_tokens: must be positive");
  });
  check([&] {
    if (cfg.variant != "BM25") resolve_variant(cfg);
  });
  check([&] {
    if (cfg.protocol != "ranking" && cfg.protocol != "retrieval") {
      throw ConfigError("protocol: expected ranking or retrieval");
    }
  });
  check([&] {
    if (cfg.split != "test" && cfg.split != "valid") throw ConfigError("split: expected test or valid");
  });
  check([&] {
    if (cfg.out.empty()) throw ConfigError("out: must not be empty");
  });
  if (!bad.empty()) throw ConfigError("invalid config:" + detail::join_lines(bad));
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a(to_json(cfg).dump())); }

}  // namespace vaps
