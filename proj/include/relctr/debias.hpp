#pragma once

#include <cstdint>
#include <vector>

#include "relctr/ctr_model.hpp"
#include "relctr/errors.hpp"
#include "relctr/ops.hpp"
#include "relctr/rng.hpp"
#include "relctr/synth.hpp"
#include "relctr/tensor.hpp"

// Exposure-bias correction. Clicked, strongly relevant samples spawn
// synthetic hard negatives that keep every feature except a downgraded
// relevance label and a noised query-side text embedding. A margin-limited
// pairwise penalty pushes positives above their shadows without the
// unbounded drift of a plain pairwise loss, and the whole term switches
// off when the batch already scores positives high enough.

namespace relctr::debias {

enum class NoiseSide { query, item };

struct DebiasConfig {
  double p1 = 0.2;
  double p2 = 0.6;
  double margin = 0.075;
  double threshold = 0.08;
  double w = 1.0;
  double noise_sigma = 1.0;
  NoiseSide noise_side = NoiseSide::query;
  bool enabled = true;

  void validate() const {
    if (!(p1 > 0.0 && p1 < p2 && p2 < 1.0))
      throw ConfigError("debias config: need 0 < p1 < p2 < 1");
    if (!(margin > 0.0)) throw ConfigError("debias config: margin must be positive");
    if (!(threshold > 0.0 && threshold < 1.0))
      throw ConfigError("debias config: threshold must lie in (0,1)");
    if (w < 0.0) throw ConfigError("debias config: weight must be non-negative");
    if (noise_sigma < 0.0)
      throw ConfigError("debias config: noise sigma must be non-negative");
  }
};

// Pure interval semantics for the label downgrade: one uniform draw u
// selects 1 on [0,p1), 2 on [p1,p2), 3 on [p2,1). Equal cut points are
// tolerated here (the middle class just gets probability zero); training
// configs reject them upstream in DebiasConfig::validate.
inline int fake_rsl_from_uniform(double p1, double p2, double u) {
  if (!(p1 > 0.0 && p1 <= p2 && p2 < 1.0))
    throw ConfigError("fake_rsl: need 0 < p1 <= p2 < 1");
  if (u < p1) return 1;
  if (u < p2) return 2;
  return 3;
}

inline int sample_fake_rsl(double p1, double p2, RngStream& rng) {
  return fake_rsl_from_uniform(p1, p2, rng.uniform());
}

// Adds iid N(0, sigma^2) noise element-wise. The noise enters the graph as
// a constant, so gradients pass through to the original embedding.
inline Tensor inject_noise(const Tensor& emb, RngStream& rng,
                           double sigma = 1.0) {
  std::vector<double> eps(emb.size());
  for (double& e : eps) e = rng.gaussian() * sigma;
  return add(emb, Tensor::from(emb.shape(), std::move(eps)));
}

struct DebiasPair {
  synth::SearchSample positive;
  synth::SearchSample negative;  // identical to positive except rsl
  int fake_rsl = 1;
  std::uint64_t noise_seed = 0;
};

inline bool qualifies(const synth::SearchSample& s) {
  return s.click == 1 && s.rsl == 4;
}

// One negative per clicked, strongly relevant sample; everything besides
// the relevance label is shared. The embedding noise is drawn later from
// the per-pair seed so featurization stays replayable.
inline std::vector<DebiasPair> make_pairs(
    const std::vector<synth::SearchSample>& batch, const DebiasConfig& cfg,
    RngStream& rng) {
  cfg.validate();
  std::vector<DebiasPair> pairs;
  for (const auto& s : batch) {
    if (!qualifies(s)) continue;
    DebiasPair pr;
    pr.positive = s;
    pr.fake_rsl = sample_fake_rsl(cfg.p1, cfg.p2, rng);
    pr.negative = s;
    pr.negative.rsl = pr.fake_rsl;
    pr.noise_seed = rng.next_u64();
    pairs.push_back(std::move(pr));
  }
  return pairs;
}

// Features of the synthetic negative: the downgraded relevance row plus
// noise on the chosen text-embedding side. Preference embeddings are built
// from the clean query, matching the positive's context.
inline ctr::SampleFeatures negative_features(const ctr::RankModelParams& params,
                                             const DebiasPair& pair,
                                             const pref::MergedSequence& seq,
                                             const DebiasConfig& cfg,
                                             ctr::TextCache* cache = nullptr) {
  ctr::SampleFeatures f = ctr::featurize(params, pair.negative, seq, cache);
  RngStream noise(pair.noise_seed, "debias.noise");
  if (cfg.noise_side == NoiseSide::query)
    f.q_emb = inject_noise(f.q_emb, noise, cfg.noise_sigma);
  else
    f.i_emb = inject_noise(f.i_emb, noise, cfg.noise_sigma);
  return f;
}

// Plain pairwise ordering loss: sum_i log(1 + e^{-(f+ - f-)}).
inline Tensor pairwise_loss_naive(const Tensor& pos_scores,
                                  const Tensor& neg_scores) {
  if (pos_scores.shape() != neg_scores.shape() || pos_scores.cols() != 1)
    throw InputError("pairwise loss: expected matching [n x 1] score columns");
  return sum_all(softplus(neg(sub(pos_scores, neg_scores))));
}

// Margin-limited, truncated penalty: w * sum_i log(1 + e^{max(0, margin - gap_i)}).
// Each term saturates at ln 2 with an exactly-zero gradient once the gap
// clears the margin; the whole penalty is the constant 0 whenever the
// batch's mean positive score already reaches the threshold (decided on
// values, before any graph is built).
inline Tensor debias_penalty(const Tensor& pos_scores,
                             const Tensor& neg_scores,
                             const DebiasConfig& cfg) {
  if (pos_scores.shape() != neg_scores.shape() || pos_scores.cols() != 1)
    throw InputError("debias penalty: expected matching [n x 1] score columns");
  double mean_pos = 0.0;
  for (std::size_t i = 0; i < pos_scores.size(); ++i)
    mean_pos += pos_scores.at(i);
  mean_pos /= static_cast<double>(pos_scores.size());
  if (mean_pos >= cfg.threshold) return Tensor::scalar(0.0);
  const Tensor gap = sub(pos_scores, neg_scores);
  const Tensor hinge = relu(add_scalar(neg(gap), cfg.margin));
  return scale(sum_all(softplus(hinge)), cfg.w);
}

// Scores both sides of every pair with the model. `seq_for` resolves the
// behavior context of a positive sample.
template <typename SeqFor>
std::pair<ctr::BatchPrediction, ctr::BatchPrediction> score_pair_sides(
    const ctr::RankModelParams& params, const std::vector<DebiasPair>& pairs,
    SeqFor&& seq_for, const DebiasConfig& cfg, ctr::TextCache* cache) {
  std::vector<ctr::SampleFeatures> pos_f, neg_f;
  pos_f.reserve(pairs.size());
  neg_f.reserve(pairs.size());
  for (const auto& pr : pairs) {
    const pref::MergedSequence& seq = seq_for(pr.positive);
    pos_f.push_back(ctr::featurize(params, pr.positive, seq, cache));
    neg_f.push_back(negative_features(params, pr, seq, cfg, cache));
  }
  return {ctr::forward(params, pos_f), ctr::forward(params, neg_f)};
}

// Full path: margin-limited truncated penalty over the scored pairs.
template <typename SeqFor>
Tensor debias_loss(const ctr::RankModelParams& params,
                   const std::vector<DebiasPair>& pairs, SeqFor&& seq_for,
                   const DebiasConfig& cfg, ctr::TextCache* cache = nullptr) {
  if (!cfg.enabled || pairs.empty() || cfg.w == 0.0) return Tensor::scalar(0.0);
  const auto [pos, neg] = score_pair_sides(params, pairs, seq_for, cfg, cache);
  return debias_penalty(pos.p_click, neg.p_click, cfg);
}

// Same scoring path with the plain pairwise loss in place of the truncated
// margin penalty. Kept for side-by-side calibration comparisons; the weight
// still applies so the two modes are swappable under one config.
template <typename SeqFor>
Tensor debias_loss_naive(const ctr::RankModelParams& params,
                         const std::vector<DebiasPair>& pairs, SeqFor&& seq_for,
                         const DebiasConfig& cfg, ctr::TextCache* cache = nullptr) {
  if (!cfg.enabled || pairs.empty() || cfg.w == 0.0) return Tensor::scalar(0.0);
  const auto [pos, neg] = score_pair_sides(params, pairs, seq_for, cfg, cache);
  return scale(pairwise_loss_naive(pos.p_click, neg.p_click), cfg.w);
}

}  // namespace relctr::debias
