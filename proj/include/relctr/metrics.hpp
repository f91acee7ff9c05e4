#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <ostream>
#include <vector>

#include "relctr/errors.hpp"

// Offline ranking/calibration metrics. AUC uses the rank formulation with
// average ranks on ties, which agrees with O(n^2) pair counting exactly:
// every intermediate quantity is a multiple of 1/2 well inside the range
// doubles represent without rounding.

namespace relctr::metrics {

inline void check_binary(const std::vector<int>& labels) {
  for (int y : labels)
    if (y != 0 && y != 1) throw InputError("labels must be 0 or 1");
}

inline double auc(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw InputError("auc: scores/labels length mismatch");
  check_binary(labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positives = 0.0, negatives = 0.0, pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = static_cast<double>(i + 1 + j) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) {
        positives += 1.0;
        pos_rank_sum += avg_rank;
      } else {
        negatives += 1.0;
      }
    }
    i = j;
  }
  if (positives == 0.0 || negatives == 0.0)
    throw UndefinedMetricError("auc: needs at least one positive and one negative");
  const double u = pos_rank_sum - positives * (positives + 1.0) / 2.0;
  return u / (positives * negatives);
}

namespace detail {

// Per-user index groups in ascending user-id order; the deterministic order
// makes the weighted aggregation reproducible bit-for-bit.
inline std::map<long long, std::vector<std::size_t>> group_by_user(
    const std::vector<long long>& user_ids) {
  std::map<long long, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < user_ids.size(); ++i)
    groups[user_ids[i]].push_back(i);
  return groups;
}

inline bool has_both_classes(const std::vector<int>& labels,
                             const std::vector<std::size_t>& idx) {
  bool pos = false, neg = false;
  for (std::size_t i : idx) (labels[i] == 1 ? pos : neg) = true;
  return pos && neg;
}

}  // namespace detail

// Impression-weighted mean of per-user AUC; users whose samples are all one
// class contribute neither AUC nor weight. Weight defaults to the user's
// sample count, or comes from `impressions` when supplied.
inline double gauc(const std::vector<double>& scores,
                   const std::vector<int>& labels,
                   const std::vector<long long>& user_ids,
                   const std::map<long long, double>* impressions = nullptr) {
  if (scores.size() != labels.size() || scores.size() != user_ids.size())
    throw InputError("gauc: input length mismatch");
  check_binary(labels);
  double num = 0.0, den = 0.0;
  for (const auto& [user, idx] : detail::group_by_user(user_ids)) {
    if (!detail::has_both_classes(labels, idx)) continue;
    std::vector<double> s;
    std::vector<int> l;
    s.reserve(idx.size());
    l.reserve(idx.size());
    for (std::size_t i : idx) {
      s.push_back(scores[i]);
      l.push_back(labels[i]);
    }
    double w = static_cast<double>(idx.size());
    if (impressions) {
      const auto it = impressions->find(user);
      if (it == impressions->end())
        throw InputError("gauc: missing impression weight for user");
      w = it->second;
    }
    num += w * auc(s, l);
    den += w;
  }
  if (den == 0.0)
    throw UndefinedMetricError("gauc: no user has both classes");
  return num / den;
}

// Relative improvement over a baseline, both measured against the random
// 0.5 floor, in percent.
inline double relaimpr(double measured_auc, double base_auc) {
  if (!(base_auc > 0.5))
    throw UndefinedMetricError("relaimpr: base AUC must exceed 0.5");
  return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0;
}

// Predicted-clicks-over-observed-clicks calibration ratio; ideal is 1.
inline double pcoc(const std::vector<double>& predictions,
                   const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw InputError("pcoc: input length mismatch or empty");
  check_binary(labels);
  double psum = 0.0, ysum = 0.0;
  for (double p : predictions) psum += p;
  for (int y : labels) ysum += y;
  if (ysum == 0.0) throw UndefinedMetricError("pcoc: no clicks observed");
  const double n = static_cast<double>(predictions.size());
  return (psum / n) / (ysum / n);
}

// Fraction of irrelevant results (true relevance level 1) in each query's
// top ten, averaged over queries. Lists shorter than ten are evaluated at
// their own length and reported on `warn` when given.
inline double irrelevant_rate_at_10(
    const std::vector<std::vector<int>>& ranked_rsl,
    std::ostream* warn = nullptr) {
  if (ranked_rsl.empty())
    throw UndefinedMetricError("irrelevant_rate_at_10: no queries");
  std::size_t short_lists = 0;
  double total = 0.0;
  for (const auto& list : ranked_rsl) {
    if (list.empty())
      throw InputError("irrelevant_rate_at_10: empty candidate list");
    const std::size_t depth = std::min<std::size_t>(10, list.size());
    if (list.size() < 10) ++short_lists;
    double bad = 0.0;
    for (std::size_t i = 0; i < depth; ++i)
      if (list[i] == 1) bad += 1.0;
    total += bad / static_cast<double>(depth);
  }
  if (short_lists > 0 && warn)
    *warn << "warning: " << short_lists
          << " ranked list(s) shorter than 10; rate computed at list length\n";
  return total / static_cast<double>(ranked_rsl.size());
}

}  // namespace relctr::metrics
