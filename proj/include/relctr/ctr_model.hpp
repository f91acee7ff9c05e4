#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "relctr/encoder.hpp"
#include "relctr/errors.hpp"
#include "relctr/ops.hpp"
#include "relctr/preference.hpp"
#include "relctr/synth.hpp"
#include "relctr/tensor.hpp"

// Relevance-decomposed CTR model. A shared trunk reads sparse ids, dense
// stats and text embeddings, then two heads factor the click probability:
// a 4-way relevance distribution and one conditional click head per level.
// The final ranking score fuses the mixture with the personalized
// incentive from the preference module.

namespace relctr::ctr {

enum class FusionMode {
  tau_product,   // rank = tau * p_click
  one_plus_tau,  // rank = max(0, 1 + tau) * p_click
};

struct ModelConfig {
  std::size_t n_users = 0;
  std::size_t n_queries = 0;
  std::size_t n_items = 0;
  std::size_t n_categories = 0;
  std::size_t dense_dim = 4;
  std::size_t d_emb = 8;
  std::size_t d_hidden = 32;
  std::size_t incentive_hidden = 8;
  double lambda_rsl = 1.0;
  FusionMode fusion = FusionMode::tau_product;

  static constexpr std::size_t kRelevanceLevels = 4;

  void validate() const {
    if (n_users == 0 || n_queries == 0 || n_items == 0 || n_categories == 0)
      throw ConfigError("model config: vocabulary sizes must be positive");
    if (dense_dim == 0 || d_emb == 0 || d_hidden == 0 || incentive_hidden == 0)
      throw ConfigError("model config: layer widths must be positive");
    if (lambda_rsl < 0.0)
      throw ConfigError("model config: lambda_rsl must be non-negative");
  }
};

// Sparse ids map to row id+1 of their table; anything outside the
// vocabulary lands on the reserved row 0.
inline std::size_t table_row(long long id, std::size_t vocab) {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab) return 0;
  return static_cast<std::size_t>(id) + 1;
}

inline std::size_t rsl_row(int rsl) {
  if (rsl < 1 || rsl > static_cast<int>(ModelConfig::kRelevanceLevels)) return 0;
  return static_cast<std::size_t>(rsl);
}

struct RankModelParams {
  ModelConfig config;
  text::EncoderParams encoder;
  pref::IncentiveHead incentive;
  Tensor user_table, query_table, item_table, category_table, rsl_table;
  Tensor dense_w, dense_b;
  Tensor trunk_w1, trunk_b1, trunk_w2, trunk_b2;
  Tensor rsl_w, rsl_b;      // relevance-distribution head (softmax)
  Tensor click_w, click_b;  // conditional click heads (sigmoid per level)

  std::size_t text_width() const { return encoder.config.d_model; }

  // 5 sparse fields + projected dense, then 5 text features.
  std::size_t trunk_width() const {
    return 6 * config.d_emb + 5 * text_width();
  }

  static RankModelParams init(const ModelConfig& cfg,
                              const text::EncoderConfig& enc_cfg,
                              std::uint64_t seed, bool trainable = true,
                              bool encoder_trainable = true) {
    cfg.validate();
    enc_cfg.validate();
    RankModelParams p;
    p.config = cfg;
    p.encoder = text::EncoderParams::init(enc_cfg, mix64(seed ^ 0x111),
                                          trainable && encoder_trainable);
    p.incentive = pref::IncentiveHead::init(enc_cfg.d_model,
                                            cfg.incentive_hidden,
                                            mix64(seed ^ 0x222), trainable);
    RngStream rng(seed, "rank.init");
    const double s = 0.05;
    const std::size_t k = ModelConfig::kRelevanceLevels;
    auto table = [&](std::size_t vocab) {
      return Tensor::randn({vocab + 1, cfg.d_emb}, rng, s, trainable);
    };
    p.user_table = table(cfg.n_users);
    p.query_table = table(cfg.n_queries);
    p.item_table = table(cfg.n_items);
    p.category_table = table(cfg.n_categories);
    p.rsl_table = table(k);
    p.dense_w = Tensor::randn({cfg.dense_dim, cfg.d_emb}, rng, s, trainable);
    p.dense_b = Tensor::zeros({1, cfg.d_emb}, trainable);
    p.trunk_w1 = Tensor::randn({p.trunk_width(), cfg.d_hidden}, rng, s, trainable);
    p.trunk_b1 = Tensor::zeros({1, cfg.d_hidden}, trainable);
    p.trunk_w2 = Tensor::randn({cfg.d_hidden, cfg.d_hidden}, rng, s, trainable);
    p.trunk_b2 = Tensor::zeros({1, cfg.d_hidden}, trainable);
    p.rsl_w = Tensor::randn({cfg.d_hidden, k}, rng, s, trainable);
    p.rsl_b = Tensor::zeros({1, k}, trainable);
    p.click_w = Tensor::randn({cfg.d_hidden, k}, rng, s, trainable);
    p.click_b = Tensor::zeros({1, k}, trainable);
    return p;
  }

  // Head/trunk/table parameters only; encoder and incentive listed via
  // their own helpers so callers can freeze them independently.
  std::vector<Tensor> own() const {
    return {user_table, query_table, item_table, category_table, rsl_table,
            dense_w,    dense_b,     trunk_w1,   trunk_b1,       trunk_w2,
            trunk_b2,   rsl_w,       rsl_b,      click_w,        click_b};
  }

  std::vector<Tensor> all() const {
    std::vector<Tensor> v = encoder.all();
    for (const Tensor& t : incentive.all()) v.push_back(t);
    for (const Tensor& t : own()) v.push_back(t);
    return v;
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> v = encoder.named("encoder");
    for (auto& kv : incentive.named("incentive")) v.push_back(kv);
    const std::pair<const char*, Tensor> own_named[] = {
        {"rank.user_table", user_table},   {"rank.query_table", query_table},
        {"rank.item_table", item_table},   {"rank.category_table", category_table},
        {"rank.rsl_table", rsl_table},     {"rank.dense_w", dense_w},
        {"rank.dense_b", dense_b},         {"rank.trunk_w1", trunk_w1},
        {"rank.trunk_b1", trunk_b1},       {"rank.trunk_w2", trunk_w2},
        {"rank.trunk_b2", trunk_b2},       {"rank.rsl_w", rsl_w},
        {"rank.rsl_b", rsl_b},             {"rank.click_w", click_w},
        {"rank.click_b", click_b}};
    for (const auto& kv : own_named) v.emplace_back(kv.first, kv.second);
    return v;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : all()) n += t.size();
    return n;
  }
};

// Memoizes text encodings. Entries stay valid only while the encoder
// parameters are unchanged: clear() between updates when the encoder
// trains, keep the cache for the whole run when it is frozen.
class TextCache {
 public:
  Tensor text(const text::EncoderParams& p, const std::vector<int>& tokens) {
    auto it = text_.find(tokens);
    if (it != text_.end()) return it->second;
    Tensor e = text::encode_text(p, tokens);
    text_.emplace(tokens, e);
    return e;
  }

  Tensor pair(const text::EncoderParams& p, const std::vector<int>& query,
              const std::vector<int>& item) {
    const auto key = std::make_pair(query, item);
    auto it = pair_.find(key);
    if (it != pair_.end()) return it->second;
    Tensor e = text::encode_pair(p, query, item);
    pair_.emplace(key, e);
    return e;
  }

  void clear() {
    text_.clear();
    pair_.clear();
  }

  std::size_t size() const { return text_.size() + pair_.size(); }

 private:
  std::map<std::vector<int>, Tensor> text_;
  std::map<std::pair<std::vector<int>, std::vector<int>>, Tensor> pair_;
};

namespace detail {

inline Tensor cached_text(const text::EncoderParams& p, TextCache* cache,
                          const std::vector<int>& tokens) {
  return cache ? cache->text(p, tokens) : text::encode_text(p, tokens);
}

inline Tensor cached_pair(const text::EncoderParams& p, TextCache* cache,
                          const std::vector<int>& q, const std::vector<int>& i) {
  return cache ? cache->pair(p, q, i) : text::encode_pair(p, q, i);
}

}  // namespace detail

inline pref::SequenceEmbeddings embed_sequence(const text::EncoderParams& enc,
                                               const pref::MergedSequence& seq,
                                               TextCache* cache = nullptr) {
  pref::SequenceEmbeddings out;
  out.m = seq.own.size();
  out.k = seq.cross.size();
  std::vector<Tensor> keys, values;
  for (const auto& ev : seq.own) {
    keys.push_back(detail::cached_text(enc, cache, ev.query_tokens));
    values.push_back(detail::cached_pair(enc, cache, ev.query_tokens, ev.item_tokens));
  }
  if (out.m > 0) {
    out.own_keys = concat_rows(keys);
    out.own_values = concat_rows(values);
  }
  keys.clear();
  values.clear();
  for (const auto& ev : seq.cross) {
    keys.push_back(detail::cached_text(enc, cache, ev.query_tokens));
    values.push_back(detail::cached_pair(enc, cache, ev.query_tokens, ev.item_tokens));
  }
  if (out.k > 0) {
    out.cross_keys = concat_rows(keys);
    out.cross_values = concat_rows(values);
  }
  return out;
}

// Per-sample resolved features: table rows for sparse ids plus the text
// and preference embeddings, all ready for the batched trunk.
struct SampleFeatures {
  std::size_t user_row = 0, query_row = 0, item_row = 0, category_row = 0,
              rsl_feature_row = 0;
  std::vector<double> dense;
  Tensor q_emb, i_emb, r_cur;   // [1 x d_txt]
  Tensor r_user, r_cate;        // [1 x d_txt]
};

inline SampleFeatures featurize(const RankModelParams& params,
                                const synth::SearchSample& s,
                                const pref::MergedSequence& seq,
                                TextCache* cache = nullptr) {
  const ModelConfig& cfg = params.config;
  if (s.dense.size() != cfg.dense_dim)
    throw InputError("featurize: dense width mismatch");
  SampleFeatures f;
  f.user_row = table_row(s.user_id, cfg.n_users);
  f.query_row = table_row(s.query_id, cfg.n_queries);
  f.item_row = table_row(s.item_id, cfg.n_items);
  f.category_row = table_row(static_cast<long long>(s.category), cfg.n_categories);
  f.rsl_feature_row = rsl_row(s.rsl);
  f.dense = s.dense;
  f.q_emb = detail::cached_text(params.encoder, cache, s.query_tokens);
  f.i_emb = detail::cached_text(params.encoder, cache, s.item_tokens);
  f.r_cur = detail::cached_pair(params.encoder, cache, s.query_tokens, s.item_tokens);
  const auto seq_emb = embed_sequence(params.encoder, seq, cache);
  f.r_user = pref::user_preference(params.incentive, seq_emb, f.q_emb);
  f.r_cate = pref::category_preference(params.incentive, seq_emb, f.q_emb);
  return f;
}

struct BatchPrediction {
  Tensor p_rsl;             // [n x 4]
  Tensor p_click_given_rsl; // [n x 4]
  Tensor p_click;           // [n x 1]
  Tensor tau;               // [n x 1]
  Tensor rank_score;        // [n x 1]
  std::size_t n = 0;
};

inline BatchPrediction forward(const RankModelParams& params,
                               const std::vector<SampleFeatures>& batch) {
  if (batch.empty()) throw InputError("forward: empty batch");
  const ModelConfig& cfg = params.config;
  const std::size_t n = batch.size();

  std::vector<std::size_t> u, q, it, c, r;
  std::vector<double> dense;
  std::vector<Tensor> qe, ie, rcur, ruser, rcate;
  for (const auto& f : batch) {
    u.push_back(f.user_row);
    q.push_back(f.query_row);
    it.push_back(f.item_row);
    c.push_back(f.category_row);
    r.push_back(f.rsl_feature_row);
    if (f.dense.size() != cfg.dense_dim)
      throw InputError("forward: dense width mismatch");
    dense.insert(dense.end(), f.dense.begin(), f.dense.end());
    qe.push_back(f.q_emb);
    ie.push_back(f.i_emb);
    rcur.push_back(f.r_cur);
    ruser.push_back(f.r_user);
    rcate.push_back(f.r_cate);
  }

  const Tensor dense_in = Tensor::from({n, cfg.dense_dim}, std::move(dense));
  const Tensor x = concat_cols({gather_rows(params.user_table, u),
                                gather_rows(params.query_table, q),
                                gather_rows(params.item_table, it),
                                gather_rows(params.category_table, c),
                                gather_rows(params.rsl_table, r),
                                add(matmul(dense_in, params.dense_w), params.dense_b),
                                concat_rows(qe), concat_rows(ie),
                                concat_rows(rcur), concat_rows(ruser),
                                concat_rows(rcate)});
  const Tensor h1 = gelu(add(matmul(x, params.trunk_w1), params.trunk_b1));
  const Tensor h2 = gelu(add(matmul(h1, params.trunk_w2), params.trunk_b2));

  BatchPrediction out;
  out.n = n;
  out.p_rsl = softmax_rows(add(matmul(h2, params.rsl_w), params.rsl_b));
  out.p_click_given_rsl = sigmoid(add(matmul(h2, params.click_w), params.click_b));
  out.p_click = row_sums(mul(out.p_rsl, out.p_click_given_rsl));
  assert_finite(out.p_click, "forward: p_click");
  out.tau = pref::incentive_tau(params.incentive, concat_rows(ruser),
                                concat_rows(rcate), concat_rows(rcur));
  assert_finite(out.tau, "forward: tau");
  switch (cfg.fusion) {
    case FusionMode::tau_product:
      out.rank_score = mul(out.tau, out.p_click);
      break;
    case FusionMode::one_plus_tau:
      out.rank_score = mul(relu(add_scalar(out.tau, 1.0)), out.p_click);
      break;
  }
  return out;
}

struct Prediction {
  std::array<double, ModelConfig::kRelevanceLevels> p_rsl{};
  std::array<double, ModelConfig::kRelevanceLevels> p_click_given_rsl{};
  double p_click = 0.0;
  double tau = 0.0;
  double rank_score = 0.0;
};

inline Prediction predict(const RankModelParams& params,
                          const synth::SearchSample& s,
                          const pref::MergedSequence& seq,
                          TextCache* cache = nullptr) {
  const auto pred = forward(params, {featurize(params, s, seq, cache)});
  Prediction out;
  for (std::size_t i = 0; i < ModelConfig::kRelevanceLevels; ++i) {
    out.p_rsl[i] = pred.p_rsl.at(i);
    out.p_click_given_rsl[i] = pred.p_click_given_rsl.at(i);
  }
  out.p_click = pred.p_click.item();
  out.tau = pred.tau.item();
  out.rank_score = pred.rank_score.item();
  return out;
}

// BCE on the mixture click probability, relevance cross-entropy on exposed
// rows only, plus the externally supplied debias penalty.
inline Tensor main_loss(const RankModelParams& params,
                        const BatchPrediction& pred,
                        const std::vector<double>& clicks,
                        const std::vector<int>& rsls,
                        const std::vector<char>& exposed,
                        const Tensor* r_debias = nullptr) {
  const std::size_t n = pred.n;
  if (clicks.size() != n || rsls.size() != n || exposed.size() != n)
    throw InputError("main_loss: label count mismatch");
  for (double y : clicks)
    if (y != 0.0 && y != 1.0) throw InputError("main_loss: labels must be 0/1");

  // A click probability pinned to exactly 0 or 1 means the logits overflowed
  // the sigmoid; treat as divergence rather than tripping bce's input guard.
  for (std::size_t i = 0; i < pred.p_click.size(); ++i) {
    const double v = pred.p_click.at(i);
    if (!(v > 0.0 && v < 1.0))
      throw DivergenceError("main_loss: click probability saturated");
  }

  Tensor loss = bce(pred.p_click, Tensor::from({n, 1}, clicks));

  std::vector<std::size_t> rows;
  std::vector<std::size_t> cls;
  for (std::size_t i = 0; i < n; ++i) {
    if (!exposed[i]) continue;
    if (rsls[i] < 1 || rsls[i] > static_cast<int>(ModelConfig::kRelevanceLevels))
      throw InputError("main_loss: exposed sample with invalid relevance label");
    rows.push_back(i);
    cls.push_back(static_cast<std::size_t>(rsls[i] - 1));
  }
  if (!rows.empty() && params.config.lambda_rsl > 0.0) {
    const Tensor ce = cross_entropy(gather_rows(pred.p_rsl, rows), cls);
    loss = add(loss, scale(ce, params.config.lambda_rsl));
  }
  if (r_debias != nullptr) loss = add(loss, *r_debias);
  assert_finite(loss, "main_loss");
  return loss;
}

struct ScoredCandidate {
  long long item_id = 0;
  double p_click = 0.0;
  double tau = 0.0;
  double rank_score = 0.0;
  std::size_t rank = 0;  // 1-based
};

// Scores a candidate list for one (user, query) context and returns it
// sorted by rank_score descending, ties broken by item_id ascending.
inline std::vector<ScoredCandidate> score_candidates(
    const RankModelParams& params,
    const std::vector<synth::SearchSample>& candidates,
    const pref::MergedSequence& seq, TextCache* cache = nullptr) {
  if (candidates.empty()) return {};
  std::vector<SampleFeatures> feats;
  feats.reserve(candidates.size());
  for (const auto& s : candidates) feats.push_back(featurize(params, s, seq, cache));
  const auto pred = forward(params, feats);

  std::vector<ScoredCandidate> out(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out[i].item_id = candidates[i].item_id;
    out[i].p_click = pred.p_click.at(i);
    out[i].tau = pred.tau.at(i);
    out[i].rank_score = pred.rank_score.at(i);
  }
  std::sort(out.begin(), out.end(),
            [](const ScoredCandidate& a, const ScoredCandidate& b) {
              if (a.rank_score != b.rank_score) return a.rank_score > b.rank_score;
              return a.item_id < b.item_id;
            });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = i + 1;
  return out;
}

}  // namespace relctr::ctr
