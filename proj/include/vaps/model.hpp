#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vaps/error.hpp"
#include "vaps/features.hpp"
#include "vaps/random.hpp"
#include "vaps/tensor.hpp"

namespace vaps {

using ad::Tensor;

struct ModelConfig {
  std::size_t d = 64;
  std::size_t vocab_size = 1;
  std::size_t n_items = 1;
  std::size_t n_users = 1;
  std::size_t n_action_types = kNumActionTypes;
  std::size_t n_time_buckets = 13;
  double lambda3_skip = 1.0;
  std::size_t encoder_layers = 1;
  std::size_t max_tokens = 64;
  std::uint64_t seed = 7;

  void validate() const {
    if (d == 0) throw ConfigError("model: d must be positive");
    if (lambda3_skip < 0.0) throw ConfigError("model: lambda3_skip must be non-negative");
    if (encoder_layers != 1) throw ConfigError("model: only a single encoder layer is supported");
    if (n_action_types != kNumActionTypes) throw ConfigError("model: n_action_types must be 3");
    if (vocab_size == 0 || n_items == 0 || n_users == 0 || n_time_buckets < 2 || max_tokens == 0) {
      throw ConfigError("model: table sizes must be positive");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d", c.d},
       {"vocab_size", c.vocab_size},
       {"n_items", c.n_items},
       {"n_users", c.n_users},
       {"n_action_types", c.n_action_types},
       {"n_time_buckets", c.n_time_buckets},
       {"lambda3_skip", c.lambda3_skip},
       {"encoder_layers", c.encoder_layers},
       {"max_tokens", c.max_tokens},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("d").get_to(c.d);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("n_items").get_to(c.n_items);
  j.at("n_users").get_to(c.n_users);
  j.at("n_action_types").get_to(c.n_action_types);
  j.at("n_time_buckets").get_to(c.n_time_buckets);
  j.at("lambda3_skip").get_to(c.lambda3_skip);
  j.at("encoder_layers").get_to(c.encoder_layers);
  j.at("max_tokens").get_to(c.max_tokens);
  j.at("seed").get_to(c.seed);
}

/// Segment tags of the cascaded encoder input sequence.
enum class Segment : std::size_t { user = 0, consultation, query_history, item_history, current_query };
inline constexpr std::size_t kNumSegments = 5;

struct EncodedTexts {
  Tensor rows;                          // [n x d]
  std::vector<std::size_t> empty_rows;  // inputs that had no tokens; their rows are zero
};

/// Consultation-action cross-attention result.
struct CaiOutput {
  Tensor h;          // [M x d] consultation states after the skip connection
  Tensor q_proj;     // [M x d] projected attention queries
  Tensor k_proj;     // [K x d] projected attention keys
  Tensor attention;  // [M x K] softmax weights; undefined when K = 0
};

/// Per-batch result of the full forward pass.
struct BatchEncoding {
  Tensor e_final;                                   // [B x d]
  std::vector<CaiOutput> cai;                       // per session
  Tensor item_matrix;                               // item vectors of every referenced item
  std::unordered_map<std::size_t, std::size_t> item_row;

  std::vector<std::size_t> rows_of(std::span<const std::size_t> items) const {
    std::vector<std::size_t> r;
    r.reserve(items.size());
    for (auto i : items) r.push_back(item_row.at(i));
    return r;
  }
};

/// Trainable tables and projections, plus the forward computations that use
/// them. Parameters are leaves shared by every graph built from this object.
class Model {
 public:
  Model(ModelConfig cfg, std::vector<TokenIds> item_tokens) : cfg_(cfg), item_tokens_(std::move(item_tokens)) {
    cfg_.validate();
    if (item_tokens_.size() != cfg_.n_items) throw ConfigError("model: item token table size differs from n_items");
    Rng rng(cfg_.seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
    auto uniform = [&](const std::string& name, std::size_t rows) {
      std::vector<double> v(rows * cfg_.d);
      for (auto& x : v) x = rng.uniform(-bound, bound);
      params_.emplace_back(name, Tensor::parameter({rows, cfg_.d}, std::move(v)));
      return params_.back().second;
    };
    auto zeros = [&](const std::string& name) {
      params_.emplace_back(name, Tensor::zeros({1, cfg_.d}, true));
      return params_.back().second;
    };
    const std::size_t d = cfg_.d;
    token_emb_ = uniform("token_emb", cfg_.vocab_size);
    item_emb_ = uniform("item_emb", cfg_.n_items);
    user_emb_ = uniform("user_emb", cfg_.n_users);
    time_emb_ = uniform("time_emb", cfg_.n_time_buckets);
    action_emb_ = uniform("action_emb", cfg_.n_action_types);
    text_w_ = uniform("text_w", d);
    text_b_ = zeros("text_b");
    cai_wq_ = uniform("cai_wq", d);
    cai_wk_ = uniform("cai_wk", d);
    cai_wv_ = uniform("cai_wv", d);
    seg_emb_ = uniform("segment_emb", kNumSegments);
    enc_wq_ = uniform("enc_wq", d);
    enc_wk_ = uniform("enc_wk", d);
    enc_wv_ = uniform("enc_wv", d);
    enc_wo_ = uniform("enc_wo", d);
    ffn_w1_ = uniform("ffn_w1", d);
    ffn_b1_ = zeros("ffn_b1");
    ffn_w2_ = uniform("ffn_w2", d);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  void set_lambda3_skip(double v) {
    if (v < 0.0) throw ConfigError("model: lambda3_skip must be non-negative");
    cfg_.lambda3_skip = v;
  }
  ad::NamedTensors& named_parameters() { return params_; }
  const ad::NamedTensors& named_parameters() const { return params_; }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& [_, t] : params_) out.push_back(t);
    return out;
  }
  const Tensor& parameter(const std::string& name) const {
    for (const auto& [n, t] : params_) {
      if (n == name) return t;
    }
    throw ConfigError("model: no parameter named '" + name + "'");
  }

  /// Mean of token embeddings followed by tanh(x W + b), batched. Inputs
  /// longer than max_tokens are truncated; empty inputs encode to zero.
  EncodedTexts encode_texts(const std::vector<TokenIds>& seqs) const {
    EncodedTexts out;
    std::vector<std::size_t> flat;
    std::vector<std::size_t> offsets{0};
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const auto n = std::min(seqs[i].size(), cfg_.max_tokens);
      if (n == 0) out.empty_rows.push_back(i);
      flat.insert(flat.end(), seqs[i].begin(), seqs[i].begin() + static_cast<std::ptrdiff_t>(n));
      offsets.push_back(flat.size());
    }
    Tensor pooled = ad::segment_mean(ad::embedding_lookup(token_emb_, flat), offsets);
    Tensor enc = ad::tanh(ad::add_row(ad::matmul(pooled, text_w_), text_b_));
    if (!out.empty_rows.empty()) {
      std::vector<double> mask(enc.size(), 1.0);
      for (auto r : out.empty_rows) std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(r * cfg_.d), cfg_.d, 0.0);
      enc = ad::mul(enc, Tensor::constant(enc.shape(), std::move(mask)));
    }
    out.rows = enc;
    return out;
  }

  Tensor encode_text(const TokenIds& tokens) const { return encode_texts({tokens}).rows; }

  /// Item representation: ItemEmb row plus the encoding of the item's text.
  Tensor item_vectors(std::span<const std::size_t> items) const {
    std::vector<TokenIds> texts;
    texts.reserve(items.size());
    for (auto i : items) texts.push_back(item_tokens_.at(i));
    return ad::add(ad::gather_rows(item_emb_, items), encode_texts(texts).rows);
  }

  /// ActionEmb(type) + item vector for click/buy, + query encoding for search.
  Tensor action_embedding(const ActionInput& a) const {
    const std::size_t type[] = {index_of(a.type)};
    Tensor base;
    if (a.type == ActionType::search) {
      base = encode_text(a.query);
    } else {
      const std::size_t item[] = {a.item};
      base = item_vectors(item);
    }
    return ad::add(ad::gather_rows(action_emb_, type), base);
  }

  /// Consultations attend over actions. Queries are consultation text plus
  /// time embedding; keys and values are action embeddings plus time
  /// embedding. h = c_text + lambda3 * attended value.
  CaiOutput cai_forward(const Tensor& consult_text, std::span<const std::size_t> consult_buckets,
                        const Tensor& actions, std::span<const std::size_t> action_buckets) const {
    CaiOutput out;
    const std::size_t m = consult_text.defined() ? consult_text.rows() : 0;
    const std::size_t k = actions.defined() ? actions.rows() : 0;
    if (m != consult_buckets.size() || k != action_buckets.size()) {
      throw ShapeError("cai_forward: bucket lists do not match input rows");
    }
    if (m == 0) return out;
    Tensor eq = ad::add(consult_text, ad::gather_rows(time_emb_, consult_buckets));
    out.q_proj = ad::matmul(eq, cai_wq_);
    if (k == 0) {
      out.h = consult_text;
      return out;
    }
    Tensor ek = ad::add(actions, ad::gather_rows(time_emb_, action_buckets));
    out.k_proj = ad::matmul(ek, cai_wk_);
    if (cfg_.lambda3_skip == 0.0) {
      out.h = consult_text;
      return out;
    }
    Tensor vp = ad::matmul(ek, cai_wv_);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
    out.attention = ad::softmax(ad::scale(ad::matmul_bt(out.q_proj, out.k_proj), inv_sqrt_d));
    out.h = ad::add(consult_text, ad::scale(ad::matmul(out.attention, vp), cfg_.lambda3_skip));
    return out;
  }

  /// One positionless self-attention layer over [u; H_c; E_queries; E_items;
  /// current query] with segment embeddings; returns the state at the
  /// current-query position. Empty history parts are skipped.
  Tensor cascaded_encode(const Tensor& h_c, const Tensor& e_items, const Tensor& e_queries, const Tensor& user,
                         const Tensor& query) const {
    std::vector<Tensor> parts;
    std::vector<std::size_t> seg;
    auto push = [&](const Tensor& t, Segment s) {
      if (!t.defined() || t.rows() == 0) return;
      parts.push_back(t);
      seg.insert(seg.end(), t.rows(), static_cast<std::size_t>(s));
    };
    push(user, Segment::user);
    push(h_c, Segment::consultation);
    push(e_queries, Segment::query_history);
    push(e_items, Segment::item_history);
    push(query, Segment::current_query);
    if (query.rows() != 1) throw ShapeError("cascaded_encode: current query must be a single row");

    Tensor x = ad::add(ad::concat_rows(parts), ad::gather_rows(seg_emb_, seg));
    Tensor last = ad::row_of(x, x.rows() - 1);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.d));
    // q K^T computed as (q Wk^T) X^T, and att V as (att X) Wv.
    Tensor q = ad::matmul(last, enc_wq_);
    Tensor logits = ad::scale(ad::matmul_bt(ad::matmul_bt(q, enc_wk_), x), inv_sqrt_d);
    Tensor ctx = ad::matmul(ad::matmul(ad::softmax(logits), x), enc_wv_);
    Tensor h = ad::add(last, ad::matmul(ctx, enc_wo_));
    return ad::add(h, ad::matmul(ad::tanh(ad::add_row(ad::matmul(h, ffn_w1_), ffn_b1_)), ffn_w2_));
  }

  /// Dot product of the final query embedding with each candidate's item vector.
  std::vector<double> score_candidates(const Tensor& e_final, std::span<const std::size_t> candidates) const {
    for (auto c : candidates) {
      if (c >= cfg_.n_items) throw DataError("score_candidates: unknown item index " + std::to_string(c));
    }
    if (candidates.empty()) return {};
    ad::NoGradGuard no_grad;
    Tensor s = ad::matmul_bt(e_final, item_vectors(candidates));
    return {s.data().begin(), s.data().end()};
  }

  /// Full forward pass over a batch of sessions. `extra_items` are added to
  /// the item matrix so their scores can be read off the same graph.
  BatchEncoding encode_batch(std::span<const SessionInput* const> batch,
                             std::span<const std::size_t> extra_items) const {
    BatchEncoding out;
    std::vector<std::size_t> items(extra_items.begin(), extra_items.end());
    for (const auto* s : batch) {
      items.insert(items.end(), s->item_history.begin(), s->item_history.end());
      for (const auto& a : s->actions) {
        if (a.type != ActionType::search) items.push_back(a.item);
      }
    }
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    for (std::size_t r = 0; r < items.size(); ++r) out.item_row.emplace(items[r], r);

    std::vector<TokenIds> texts;
    std::map<TokenIds, std::size_t> text_row;
    auto text_index = [&](const TokenIds& t) {
      auto [it, inserted] = text_row.emplace(t, texts.size());
      if (inserted) texts.push_back(t);
      return it->second;
    };
    std::vector<std::size_t> item_text_rows;
    for (auto i : items) item_text_rows.push_back(text_index(item_tokens_.at(i)));
    struct Rows {
      std::vector<std::size_t> consult, action_base, action_type, query_hist, item_hist;
      std::size_t query = 0;
    };
    std::vector<Rows> rows(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = *batch[b];
      auto& r = rows[b];
      for (const auto& c : s.consultations) r.consult.push_back(text_index(c));
      for (const auto& q : s.query_history) r.query_hist.push_back(text_index(q));
      r.query = text_index(s.query);
      for (auto i : s.item_history) r.item_hist.push_back(out.item_row.at(i));
    }
    // Action bases index into [item vectors; text encodings].
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (const auto& a : batch[b]->actions) {
        rows[b].action_type.push_back(index_of(a.type));
        rows[b].action_base.push_back(a.type == ActionType::search ? items.size() + text_index(a.query)
                                                                   : out.item_row.at(a.item));
      }
    }

    Tensor text = encode_texts(texts).rows;
    out.item_matrix = items.empty() ? Tensor::zeros({0, cfg_.d})
                                    : ad::add(ad::gather_rows(item_emb_, items), ad::gather_rows(text, item_text_rows));
    Tensor pool = items.empty() ? text : ad::concat_rows({out.item_matrix, text});

    std::vector<Tensor> finals;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = *batch[b];
      const auto& r = rows[b];
      Tensor consult = r.consult.empty() ? Tensor() : ad::gather_rows(text, r.consult);
      Tensor acts = r.action_base.empty()
                        ? Tensor()
                        : ad::add(ad::gather_rows(pool, r.action_base), ad::gather_rows(action_emb_, r.action_type));
      std::vector<std::size_t> a_buckets;
      for (const auto& a : s.actions) a_buckets.push_back(a.time_bucket);
      out.cai.push_back(cai_forward(consult, s.consultation_buckets, acts, a_buckets));
      const std::size_t u[] = {s.user};
      const std::size_t q[] = {r.query};
      Tensor e_q = r.query_hist.empty() ? Tensor() : ad::gather_rows(text, r.query_hist);
      Tensor e_i = r.item_hist.empty() ? Tensor() : ad::gather_rows(out.item_matrix, r.item_hist);
      finals.push_back(cascaded_encode(out.cai.back().h, e_i, e_q, ad::gather_rows(user_emb_, u),
                                       ad::gather_rows(text, q)));
    }
    out.e_final = finals.empty() ? Tensor::zeros({0, cfg_.d}) : ad::concat_rows(finals);
    return out;
  }

  /// Scores of `candidates` for every session in a batch, no graph recorded.
  std::vector<std::vector<double>> score_batch(std::span<const SessionInput* const> batch,
                                               const std::vector<std::vector<std::size_t>>& candidates) const {
    ad::NoGradGuard no_grad;
    std::vector<std::size_t> extra;
    for (const auto& c : candidates) extra.insert(extra.end(), c.begin(), c.end());
    auto enc = encode_batch(batch, extra);
    std::vector<std::vector<double>> out;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto rows = enc.rows_of(candidates[b]);
      Tensor s = ad::matmul_bt(ad::row_of(enc.e_final, b), ad::gather_rows(enc.item_matrix, rows));
      out.emplace_back(s.data().begin(), s.data().end());
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  std::vector<TokenIds> item_tokens_;
  ad::NamedTensors params_;
  Tensor token_emb_, item_emb_, user_emb_, time_emb_, action_emb_;
  Tensor text_w_, text_b_;
  Tensor cai_wq_, cai_wk_, cai_wv_;
  Tensor seg_emb_;
  Tensor enc_wq_, enc_wk_, enc_wv_, enc_wo_;
  Tensor ffn_w1_, ffn_b1_, ffn_w2_;
};

}  // namespace vaps
