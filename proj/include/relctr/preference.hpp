#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "relctr/ops.hpp"
#include "relctr/rng.hpp"
#include "relctr/synth.hpp"
#include "relctr/tensor.hpp"

// Cross-user preference mining. For a (user, query) request we merge the
// user's own clicked history with behaviors mined from other users who
// clicked in the same category, ranked by query-text similarity. Target
// attention over the two sequences yields user-level and category-level
// relevance preferences, and a two-expert mixture turns them into a
// personalized incentive score.

namespace relctr::pref {

struct PoolEvent {
  long long user_id = 0;
  std::size_t event_index = 0;  // position within that user's click stream
  std::size_t category = 0;
  std::vector<int> query_tokens;
  std::vector<int> item_tokens;
  int rsl = 1;

  bool operator==(const PoolEvent&) const = default;
};

// Click-only snapshot of the logs, indexed by category. Event order within
// a user follows the input row order, which is canonical in our datasets.
class BehaviorPool {
 public:
  static BehaviorPool from_samples(const std::vector<synth::SearchSample>& rows) {
    BehaviorPool pool;
    std::map<long long, std::size_t> next_index;
    for (const auto& s : rows) {
      if (s.click != 1) continue;
      PoolEvent ev;
      ev.user_id = s.user_id;
      ev.event_index = next_index[s.user_id]++;
      ev.category = s.category;
      ev.query_tokens = s.query_tokens;
      ev.item_tokens = s.item_tokens;
      ev.rsl = s.rsl;
      pool.insert(std::move(ev));
    }
    pool.finalize();
    return pool;
  }

  // Historical click sequences carry knowledge the exposure-gated log lacks;
  // pooling them is what gives mining an edge over the training rows alone.
  static BehaviorPool from_behaviors(
      const std::vector<synth::BehaviorSequence>& seqs) {
    BehaviorPool pool;
    for (const auto& seq : seqs) {
      for (std::size_t e = 0; e < seq.events.size(); ++e) {
        const auto& src = seq.events[e];
        PoolEvent ev;
        ev.user_id = seq.user_id;
        ev.event_index = e;
        ev.category = src.category;
        ev.query_tokens = src.query_tokens;
        ev.item_tokens = src.item_tokens;
        ev.rsl = src.rsl;
        pool.insert(std::move(ev));
      }
    }
    pool.finalize();
    return pool;
  }

  std::size_t categories() const { return by_category_.size(); }

  const std::vector<PoolEvent>& events_in(std::size_t category) const {
    static const std::vector<PoolEvent> kEmpty;
    return category < by_category_.size() ? by_category_[category] : kEmpty;
  }

  const std::vector<long long>& users_in(std::size_t category) const {
    static const std::vector<long long> kEmpty;
    return category < users_by_category_.size() ? users_by_category_[category]
                                                : kEmpty;
  }

 private:
  void insert(PoolEvent ev) {
    if (ev.category >= by_category_.size())
      by_category_.resize(ev.category + 1);
    by_category_[ev.category].push_back(std::move(ev));
  }

  void finalize() {
    for (auto& events : by_category_) {
      std::sort(events.begin(), events.end(),
                [](const PoolEvent& a, const PoolEvent& b) {
                  if (a.user_id != b.user_id) return a.user_id < b.user_id;
                  return a.event_index < b.event_index;
                });
    }
    users_by_category_.resize(by_category_.size());
    for (std::size_t c = 0; c < by_category_.size(); ++c) {
      std::set<long long> uniq;
      for (const auto& ev : by_category_[c]) uniq.insert(ev.user_id);
      users_by_category_[c].assign(uniq.begin(), uniq.end());
    }
  }

  std::vector<std::vector<PoolEvent>> by_category_;
  std::vector<std::vector<long long>> users_by_category_;
};

// Jaccard similarity over token sets: deterministic and parameter-free.
inline double query_similarity(const std::vector<int>& a,
                               const std::vector<int>& b) {
  if (a.empty() || b.empty())
    throw InputError("query_similarity: empty token list");
  const std::set<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t inter = 0;
  for (int t : sa) inter += sb.count(t);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MergedSequence {
  std::vector<synth::BehaviorEvent> own;  // S_u, length m
  std::vector<PoolEvent> cross;           // S_q, length k
  bool empty() const { return own.empty() && cross.empty(); }
};

// Merges the user's own history with top-k similar same-category behaviors
// of up to `n_users` other users (uniform sample without replacement, seeded
// per (user, query) so reruns reproduce). Merge is unconditional: active
// users also receive cross events, the gate decides how much to use them.
inline MergedSequence build_merged_sequence(
    long long user_id, const synth::BehaviorSequence& own,
    const std::vector<int>& current_query, std::size_t current_category,
    const BehaviorPool& pool, std::size_t n_users, std::size_t top_k,
    std::size_t max_own_len, std::uint64_t seed) {
  MergedSequence out;
  out.own = own.events;
  if (out.own.size() > max_own_len) out.own.resize(max_own_len);

  std::vector<long long> candidates;
  for (long long u : pool.users_in(current_category))
    if (u != user_id) candidates.push_back(u);
  if (candidates.empty() || top_k == 0 || n_users == 0) return out;

  std::uint64_t qhash = fnv1a64(current_query.data(),
                                current_query.size() * sizeof(int));
  qhash = mix64(qhash ^ current_category);
  RngStream rng(seed, "pref.sample", static_cast<std::uint64_t>(user_id), qhash);
  const std::size_t take = std::min(n_users, candidates.size());
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.uniform_index(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  const std::set<long long> sampled(candidates.begin(), candidates.begin() + take);

  struct Scored {
    double sim;
    const PoolEvent* ev;
  };
  std::vector<Scored> scored;
  for (const auto& ev : pool.events_in(current_category)) {
    if (!sampled.count(ev.user_id)) continue;
    scored.push_back({query_similarity(current_query, ev.query_tokens), &ev});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    if (a.ev->user_id != b.ev->user_id) return a.ev->user_id < b.ev->user_id;
    return a.ev->event_index < b.ev->event_index;
  });
  const std::size_t k = std::min(top_k, scored.size());
  out.cross.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.cross.push_back(*scored[i].ev);
  return out;
}

// ---------------------------------------------------------------------------
// Incentive head: target attention at user and category level feeding a
// gated pair of experts.

struct IncentiveHead {
  std::size_t d_model = 0;
  Tensor wq_user, wk_user;  // learned projections; values pass through
  Tensor wq_cate, wk_cate;
  Tensor default_r_user;  // fallback when the user has no own events
  Tensor default_r_cate;  // fallback when no cross events exist
  Tensor gate_w, gate_b;  // r_user -> 2 logits
  Tensor plus_w1, plus_b1, plus_w2, plus_b2;
  Tensor minus_w1, minus_b1, minus_w2, minus_b2;

  static IncentiveHead init(std::size_t d, std::size_t hidden,
                            std::uint64_t seed, bool trainable = true) {
    RngStream rng(seed, "incentive.init");
    const double s = 0.1;
    IncentiveHead h;
    h.d_model = d;
    h.wq_user = Tensor::randn({d, d}, rng, s, trainable);
    h.wk_user = Tensor::randn({d, d}, rng, s, trainable);
    h.wq_cate = Tensor::randn({d, d}, rng, s, trainable);
    h.wk_cate = Tensor::randn({d, d}, rng, s, trainable);
    h.default_r_user = Tensor::randn({1, d}, rng, s, trainable);
    h.default_r_cate = Tensor::randn({1, d}, rng, s, trainable);
    h.gate_w = Tensor::randn({d, 2}, rng, s, trainable);
    h.gate_b = Tensor::zeros({1, 2}, trainable);
    h.plus_w1 = Tensor::randn({3 * d, hidden}, rng, s, trainable);
    h.plus_b1 = Tensor::zeros({1, hidden}, trainable);
    h.plus_w2 = Tensor::randn({hidden, 1}, rng, s, trainable);
    h.plus_b2 = Tensor::zeros({1, 1}, trainable);
    h.minus_w1 = Tensor::randn({3 * d, hidden}, rng, s, trainable);
    h.minus_b1 = Tensor::zeros({1, hidden}, trainable);
    h.minus_w2 = Tensor::randn({hidden, 1}, rng, s, trainable);
    h.minus_b2 = Tensor::zeros({1, 1}, trainable);
    return h;
  }

  std::vector<Tensor> all() const {
    return {wq_user, wk_user, wq_cate,        wk_cate,        default_r_user,
            default_r_cate, gate_w, gate_b,   plus_w1,        plus_b1,
            plus_w2,  plus_b2,  minus_w1,     minus_b1,       minus_w2,
            minus_b2};
  }

  std::vector<std::pair<std::string, Tensor>> named(
      const std::string& prefix = "incentive") const {
    return {{prefix + ".wq_user", wq_user},
            {prefix + ".wk_user", wk_user},
            {prefix + ".wq_cate", wq_cate},
            {prefix + ".wk_cate", wk_cate},
            {prefix + ".default_r_user", default_r_user},
            {prefix + ".default_r_cate", default_r_cate},
            {prefix + ".gate_w", gate_w},
            {prefix + ".gate_b", gate_b},
            {prefix + ".plus_w1", plus_w1},
            {prefix + ".plus_b1", plus_b1},
            {prefix + ".plus_w2", plus_w2},
            {prefix + ".plus_b2", plus_b2},
            {prefix + ".minus_w1", minus_w1},
            {prefix + ".minus_b1", minus_b1},
            {prefix + ".minus_w2", minus_w2},
            {prefix + ".minus_b2", minus_b2}};
  }
};

// Per-event embeddings of a merged sequence: keys are query embeddings,
// values are pair (relevance) embeddings.
struct SequenceEmbeddings {
  Tensor own_keys;     // [m x d]
  Tensor own_values;   // [m x d]
  Tensor cross_keys;   // [k x d]
  Tensor cross_values; // [k x d]
  std::size_t m = 0;
  std::size_t k = 0;
};

// Attention of the current query over the user's own events; falls back to
// the learned default vector when the history is empty.
inline Tensor user_preference(const IncentiveHead& h,
                              const SequenceEmbeddings& seq,
                              const Tensor& q_cur_emb) {
  if (seq.m == 0) return h.default_r_user;
  const Tensor q = matmul(q_cur_emb, h.wq_user);
  const Tensor k = matmul(seq.own_keys, h.wk_user);
  return target_attention(q, k, seq.own_values, h.d_model);
}

inline Tensor category_preference(const IncentiveHead& h,
                                  const SequenceEmbeddings& seq,
                                  const Tensor& q_cur_emb) {
  if (seq.k == 0) return h.default_r_cate;
  const Tensor q = matmul(q_cur_emb, h.wq_cate);
  const Tensor k = matmul(seq.cross_keys, h.wk_cate);
  return target_attention(q, k, seq.cross_values, h.d_model);
}

inline Tensor gate_weights(const IncentiveHead& h, const Tensor& r_user) {
  return softmax_rows(add(matmul(r_user, h.gate_w), h.gate_b));
}

namespace detail {

inline Tensor expert(const Tensor& x, const Tensor& w1, const Tensor& b1,
                     const Tensor& w2, const Tensor& b2) {
  return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
}

}  // namespace detail

// tau = w1 * softplus(E+) - w2 * softplus(E-): a gated tug between a
// positive and a negative incentive expert.
inline Tensor incentive_tau(const IncentiveHead& h, const Tensor& r_user,
                            const Tensor& r_cate, const Tensor& r_cur) {
  if (r_user.cols() != h.d_model || r_cate.cols() != h.d_model ||
      r_cur.cols() != h.d_model)
    throw InputError("incentive_tau: embedding width mismatch");
  const Tensor w = gate_weights(h, r_user);
  const Tensor x = concat_cols({r_user, r_cate, r_cur});
  const Tensor f_plus =
      softplus(detail::expert(x, h.plus_w1, h.plus_b1, h.plus_w2, h.plus_b2));
  const Tensor f_minus = neg(
      softplus(detail::expert(x, h.minus_w1, h.minus_b1, h.minus_w2, h.minus_b2)));
  const Tensor w1 = slice_cols(w, 0, 1);
  const Tensor w2 = slice_cols(w, 1, 2);
  return add(mul(w1, f_plus), mul(w2, f_minus));
}

}  // namespace relctr::pref
