#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "relctr/errors.hpp"
#include "relctr/rng.hpp"

// Synthetic search world. Relevance between a query and an item is defined
// by concept geometry: each category owns a block of token ids, and each
// concept within a category is a 5-token window advancing by 2, so adjacent
// concepts share 3 tokens, concepts two apart share 1, and anything further
// (or cross-category) shares none. Relevance level is therefore recoverable
// from the texts alone, which is what lets a text encoder learn it.

namespace relctr::synth {

struct WorldConfig {
  std::size_t n_users = 200;
  std::size_t n_items = 400;
  std::size_t n_queries = 300;
  std::size_t n_categories = 6;
  std::size_t concepts_per_category = 8;
  double sensitivity_gap = 0.4;        // spread of per-category mean sensitivity
  double cold_user_fraction = 0.3;     // users with 0-2 history events
  double cold_traffic_factor = 1.0;    // log-impression rate of cold users vs active
  double candidate_low_rsl_share = 0.45;  // cross-category share of candidates
  std::size_t dense_dim = 4;
  std::size_t max_behavior_len = 25;

  void validate() const {
    if (n_categories == 0) throw ConfigError("world: n_categories must be >= 1");
    if (n_users == 0 || n_items == 0 || n_queries == 0)
      throw ConfigError("world: counts must be >= 1");
    if (concepts_per_category == 0)
      throw ConfigError("world: concepts_per_category must be >= 1");
    if (sensitivity_gap < 0.0 || sensitivity_gap > 1.0)
      throw ConfigError("world: sensitivity_gap must lie in [0,1]");
    if (cold_user_fraction < 0.0 || cold_user_fraction > 1.0)
      throw ConfigError("world: cold_user_fraction must lie in [0,1]");
    if (cold_traffic_factor < 0.0 || cold_traffic_factor > 1.0)
      throw ConfigError("world: cold_traffic_factor must lie in [0,1]");
    if (candidate_low_rsl_share < 0.0 || candidate_low_rsl_share > 1.0)
      throw ConfigError("world: candidate_low_rsl_share must lie in [0,1]");
    if (dense_dim == 0) throw ConfigError("world: dense_dim must be >= 1");
    if (max_behavior_len == 0)
      throw ConfigError("world: max_behavior_len must be >= 1");
  }

  std::uint64_t hash() const {
    std::ostringstream os;
    os << n_users << '|' << n_items << '|' << n_queries << '|' << n_categories
       << '|' << concepts_per_category << '|' << sensitivity_gap << '|'
       << cold_user_fraction << '|' << cold_traffic_factor << '|'
       << candidate_low_rsl_share << '|' << dense_dim << '|' << max_behavior_len;
    return fnv1a64(os.str());
  }
};

struct UserProfile {
  long long id = 0;
  double sensitivity = 0.5;  // in [0,1]
  bool cold = false;
  std::size_t home_category = 0;
  std::size_t history_len = 0;
};

struct ItemProfile {
  long long id = 0;
  std::size_t category = 0;
  std::size_t concept_id = 0;
  double quality = 0.5;
  std::vector<int> tokens;
};

struct QueryProfile {
  long long id = 0;
  std::size_t category = 0;
  std::size_t concept_id = 0;
  std::vector<int> tokens;
};

struct World {
  WorldConfig config;
  std::uint64_t seed = 0;
  std::vector<UserProfile> users;
  std::vector<ItemProfile> items;
  std::vector<QueryProfile> queries;
  std::vector<double> category_sensitivity;  // per-category mean
  std::vector<std::vector<std::size_t>> queries_by_category;
  std::vector<std::vector<std::vector<std::size_t>>> items_by_cat_concept;
  std::vector<std::vector<std::size_t>> items_by_category;

  std::size_t tokens_per_category() const {
    return 2 * config.concepts_per_category + 3;
  }
  std::size_t generic_base() const {
    return config.n_categories * tokens_per_category();
  }
  static constexpr std::size_t kGenericPool = 32;
  std::size_t vocab_size() const { return generic_base() + kGenericPool; }
};

// Vocabulary size implied by a config, without materializing the world.
// Must agree with World::vocab_size().
inline std::size_t vocab_size_for(const WorldConfig& c) {
  return c.n_categories * (2 * c.concepts_per_category + 3) + World::kGenericPool;
}

struct SearchSample {
  long long user_id = 0;
  long long query_id = 0;
  long long item_id = 0;
  std::size_t category = 0;
  std::vector<int> query_tokens;
  std::vector<int> item_tokens;
  int rsl = 1;  // 1 irrelevant .. 4 strongly relevant
  int exposed = 0;
  int click = 0;
  std::vector<double> dense;

  bool operator==(const SearchSample&) const = default;
};

struct BehaviorEvent {
  std::vector<int> query_tokens;
  std::vector<int> item_tokens;
  int rsl = 1;
  std::size_t category = 0;

  bool operator==(const BehaviorEvent&) const = default;
};

struct BehaviorSequence {
  long long user_id = 0;
  bool cold = false;
  std::vector<BehaviorEvent> events;

  bool operator==(const BehaviorSequence&) const = default;
};

struct ClickModel {
  double bias = -1.0;
  double w_quality = 1.0;
  double w_rsl_base = 0.1;
  double w_rsl_sens = 2.0;
  std::optional<double> force_p;  // overrides the model when set
};

namespace detail {

inline double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Five-token window of a concept inside its category block.
inline int window_start(const World& w, std::size_t category, std::size_t concept_id) {
  return static_cast<int>(category * w.tokens_per_category() + 2 * concept_id);
}

inline std::vector<int> sample_text(const World& w, std::size_t category,
                                    std::size_t concept_id, std::size_t min_len,
                                    std::size_t max_len, RngStream& rng) {
  const std::size_t len = min_len + rng.uniform_index(max_len - min_len + 1);
  const int start = window_start(w, category, concept_id);
  std::vector<int> out;
  out.reserve(len);
  for (std::size_t i = 0; i < len; ++i) {
    if (rng.bernoulli(0.15))
      out.push_back(static_cast<int>(w.generic_base() + rng.uniform_index(World::kGenericPool)));
    else
      out.push_back(start + static_cast<int>(rng.uniform_index(5)));
  }
  return out;
}

}  // namespace detail

// Ground-truth relevance between a query and an item: same concept is a
// perfect match, one concept apart is relevant, further apart within the
// category is weakly relevant, and a category mismatch is irrelevant.
inline int relevance_level(const QueryProfile& q, const ItemProfile& it) {
  if (q.category != it.category) return 1;
  const std::size_t d =
      q.concept_id > it.concept_id ? q.concept_id - it.concept_id : it.concept_id - q.concept_id;
  if (d == 0) return 4;
  if (d == 1) return 3;
  return 2;
}

inline double user_category_sensitivity(const World& w, const UserProfile& u,
                                        std::size_t category) {
  return detail::clamp01(w.category_sensitivity[category] +
                         (u.sensitivity - 0.5));
}

inline World generate_world(const WorldConfig& config, std::uint64_t seed) {
  config.validate();
  World w;
  w.config = config;
  w.seed = seed;

  w.category_sensitivity.resize(config.n_categories, 0.5);
  if (config.n_categories > 1) {
    for (std::size_t c = 0; c < config.n_categories; ++c)
      w.category_sensitivity[c] =
          0.5 - config.sensitivity_gap / 2.0 +
          config.sensitivity_gap * static_cast<double>(c) /
              static_cast<double>(config.n_categories - 1);
  }

  w.users.resize(config.n_users);
  for (std::size_t i = 0; i < config.n_users; ++i) {
    RngStream rng(seed, "world.user", i);
    auto& u = w.users[i];
    u.id = static_cast<long long>(i);
    u.sensitivity = rng.uniform();
    u.cold = rng.bernoulli(config.cold_user_fraction);
    u.home_category = rng.uniform_index(config.n_categories);
    const std::size_t active_span = std::max<std::size_t>(config.max_behavior_len, 5) - 4;
    u.history_len = u.cold ? rng.uniform_index(3)
                           : 5 + rng.uniform_index(active_span);
    u.history_len = std::min(u.history_len, config.max_behavior_len);
  }

  w.items.resize(config.n_items);
  for (std::size_t i = 0; i < config.n_items; ++i) {
    RngStream rng(seed, "world.item", i);
    auto& it = w.items[i];
    it.id = static_cast<long long>(i);
    it.category = i % config.n_categories;
    it.concept_id = (i / config.n_categories) % config.concepts_per_category;
    it.quality = rng.uniform();
    it.tokens = detail::sample_text(w, it.category, it.concept_id, 4, 8, rng);
  }

  w.queries.resize(config.n_queries);
  for (std::size_t i = 0; i < config.n_queries; ++i) {
    RngStream rng(seed, "world.query", i);
    auto& q = w.queries[i];
    q.id = static_cast<long long>(i);
    q.category = i % config.n_categories;
    q.concept_id = (i / config.n_categories) % config.concepts_per_category;
    q.tokens = detail::sample_text(w, q.category, q.concept_id, 3, 6, rng);
  }

  w.queries_by_category.assign(config.n_categories, {});
  for (std::size_t i = 0; i < w.queries.size(); ++i)
    w.queries_by_category[w.queries[i].category].push_back(i);
  w.items_by_category.assign(config.n_categories, {});
  w.items_by_cat_concept.assign(
      config.n_categories,
      std::vector<std::vector<std::size_t>>(config.concepts_per_category));
  for (std::size_t i = 0; i < w.items.size(); ++i) {
    w.items_by_category[w.items[i].category].push_back(i);
    w.items_by_cat_concept[w.items[i].category][w.items[i].concept_id].push_back(i);
  }
  return w;
}

namespace detail {

// Impression traffic skews away from cold users when cold_traffic_factor < 1
// (new users browse less). Rejection-resampled with a bounded retry count so
// pathological configs still terminate; factor 1 draws uniformly and consumes
// exactly one index per call.
inline std::size_t pick_user(const World& w, RngStream& rng) {
  const double f = w.config.cold_traffic_factor;
  for (int tries = 0; tries < 64; ++tries) {
    const std::size_t ui = rng.uniform_index(w.users.size());
    if (!w.users[ui].cold || f >= 1.0 || rng.bernoulli(f)) return ui;
  }
  return rng.uniform_index(w.users.size());
}

// Candidate item for a query, drawn so the ground-truth relevance mix is
// controlled: `low_share` lands in a foreign category (rsl 1); the rest
// splits 1/4 exact concept_id, 1/2 adjacent, 1/4 farther within the category.
// Falls back gracefully when a bucket is empty in tiny worlds.
inline std::size_t pick_candidate_item(const World& w, const QueryProfile& q,
                                       RngStream& rng) {
  const auto uniform_from = [&](const std::vector<std::size_t>& pool)
      -> std::optional<std::size_t> {
    if (pool.empty()) return std::nullopt;
    return pool[rng.uniform_index(pool.size())];
  };

  const double roll = rng.uniform();
  if (roll < w.config.candidate_low_rsl_share && w.config.n_categories > 1) {
    std::size_t other = rng.uniform_index(w.config.n_categories - 1);
    if (other >= q.category) ++other;
    if (const auto pick = uniform_from(w.items_by_category[other])) return *pick;
  }

  const auto& cells = w.items_by_cat_concept[q.category];
  const std::size_t G = w.config.concepts_per_category;
  const double sub = rng.uniform();
  std::vector<std::size_t> pool;
  if (sub < 0.25) {
    pool = cells[q.concept_id];
  } else if (sub < 0.75) {
    if (q.concept_id > 0)
      pool.insert(pool.end(), cells[q.concept_id - 1].begin(), cells[q.concept_id - 1].end());
    if (q.concept_id + 1 < G)
      pool.insert(pool.end(), cells[q.concept_id + 1].begin(), cells[q.concept_id + 1].end());
  } else {
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t d = g > q.concept_id ? g - q.concept_id : q.concept_id - g;
      if (d >= 2) pool.insert(pool.end(), cells[g].begin(), cells[g].end());
    }
  }
  if (const auto pick = uniform_from(pool)) return *pick;
  if (const auto pick = uniform_from(w.items_by_category[q.category])) return *pick;
  return rng.uniform_index(w.items.size());
}

inline std::vector<double> dense_features(const World& w, const UserProfile& u,
                                          const QueryProfile& q,
                                          const ItemProfile& it) {
  std::vector<double> f;
  f.reserve(w.config.dense_dim);
  f.push_back(it.quality);
  f.push_back(static_cast<double>(q.tokens.size()) / 10.0);
  f.push_back(static_cast<double>(mix64(static_cast<std::uint64_t>(it.id) + 0x51ed) & 0xffff) / 65535.0);
  f.push_back(static_cast<double>(u.history_len) /
              static_cast<double>(w.config.max_behavior_len));
  while (f.size() < w.config.dense_dim) f.push_back(0.0);
  f.resize(w.config.dense_dim);
  return f;
}

}  // namespace detail

// Exposure probability of a relevance level under the gate: full strength at
// the top level, decaying by (1 - strictness) per level below it. strictness
// 0 exposes independently of relevance; strictness 1 exposes only rsl 4.
inline double exposure_probability(int rsl, double strictness,
                                   double p_max = 0.9) {
  const double beta = 1.0 - strictness;
  double p = p_max;
  for (int k = rsl; k < 4; ++k) p *= beta;
  return p;
}

// Emits `n` candidate rows (exposed and unexposed alike; clicks all zero).
// Each row draws from its own counter-based stream, so generation order is
// irrelevant and reruns are bit-exact.
inline std::vector<SearchSample> simulate_exposure(const World& w,
                                                   double strictness,
                                                   std::size_t n,
                                                   std::uint64_t seed) {
  if (n == 0) throw InputError("simulate_exposure: n must be >= 1");
  if (strictness < 0.0 || strictness > 1.0)
    throw InputError("simulate_exposure: strictness must lie in [0,1]");
  std::vector<SearchSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng(seed, "exposure", i);
    const auto& u = w.users[detail::pick_user(w, rng)];
    std::size_t qi;
    const auto& home = w.queries_by_category[u.home_category];
    if (!home.empty() && rng.bernoulli(0.8))
      qi = home[rng.uniform_index(home.size())];
    else
      qi = rng.uniform_index(w.queries.size());
    const auto& q = w.queries[qi];
    const auto& it = w.items[detail::pick_candidate_item(w, q, rng)];

    SearchSample s;
    s.user_id = u.id;
    s.query_id = q.id;
    s.item_id = it.id;
    s.category = q.category;
    s.query_tokens = q.tokens;
    s.item_tokens = it.tokens;
    s.rsl = relevance_level(q, it);
    s.exposed = rng.bernoulli(exposure_probability(s.rsl, strictness)) ? 1 : 0;
    s.click = 0;
    s.dense = detail::dense_features(w, u, q, it);
    out.push_back(std::move(s));
  }
  return out;
}

// Counterfactual view with the exposure gate forced open: every candidate
// becomes eligible for a click draw, giving unbiased full-space labels.
inline void expose_all(std::vector<SearchSample>& samples) {
  for (auto& s : samples) s.exposed = 1;
}

inline double true_click_probability(const World& w, const SearchSample& s,
                                     const ClickModel& m = {}) {
  if (m.force_p) return *m.force_p;
  const auto& u = w.users[static_cast<std::size_t>(s.user_id)];
  const auto& it = w.items[static_cast<std::size_t>(s.item_id)];
  const double sens = user_category_sensitivity(w, u, s.category);
  const double z = m.bias + m.w_quality * (it.quality - 0.5) +
                   (m.w_rsl_base + m.w_rsl_sens * sens) *
                       (static_cast<double>(s.rsl) - 2.5);
  return detail::sigmoid(z);
}

// Draws click labels for exposed rows in place; unexposed rows stay 0.
inline void simulate_clicks(const World& w, std::vector<SearchSample>& samples,
                            std::uint64_t seed, const ClickModel& m = {}) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& s = samples[i];
    if (!s.exposed) {
      s.click = 0;
      continue;
    }
    RngStream rng(seed, "clicks", i);
    s.click = rng.bernoulli(true_click_probability(w, s, m)) ? 1 : 0;
  }
}

// Per-user clicked history. Lengths were fixed at world generation (cold
// users 0-2, active users 5..max). Each event proposes (query, item) pairs
// and keeps the first one the click model accepts, so a history reflects
// what its owner would actually click: relevance-sensitive users accumulate
// matched pairs while insensitive users keep whatever quality served them,
// and the clicked-relevance mix varies across users and categories.
inline std::vector<BehaviorSequence> generate_behaviors(const World& w,
                                                        std::uint64_t seed,
                                                        const ClickModel& m = {}) {
  std::vector<BehaviorSequence> out;
  out.reserve(w.users.size());
  for (const auto& u : w.users) {
    RngStream rng(w.seed ^ seed, "behavior", static_cast<std::uint64_t>(u.id));
    BehaviorSequence seq;
    seq.user_id = u.id;
    seq.cold = u.cold;
    for (std::size_t e = 0; e < u.history_len; ++e) {
      // The proposal mix keeps every relevance level reachable; acceptance,
      // not the proposals, shapes the final mix. The attempt cap only guards
      // against force_p = 0 style degenerate click models.
      std::size_t qi = 0, item_index = 0;
      for (int attempt = 0; attempt < 40; ++attempt) {
        const auto& home = w.queries_by_category[u.home_category];
        if (!home.empty() && rng.bernoulli(0.8))
          qi = home[rng.uniform_index(home.size())];
        else
          qi = rng.uniform_index(w.queries.size());
        const auto& q = w.queries[qi];
        const double roll = rng.uniform();
        const auto& cells = w.items_by_cat_concept[q.category];
        std::vector<std::size_t> pool;
        if (roll < 0.4) {
          pool = cells[q.concept_id];
        } else if (roll < 0.7) {
          if (q.concept_id > 0)
            pool.insert(pool.end(), cells[q.concept_id - 1].begin(), cells[q.concept_id - 1].end());
          if (q.concept_id + 1 < w.config.concepts_per_category)
            pool.insert(pool.end(), cells[q.concept_id + 1].begin(), cells[q.concept_id + 1].end());
        } else if (roll < 0.88) {
          for (std::size_t g = 0; g < w.config.concepts_per_category; ++g) {
            const std::size_t d = g > q.concept_id ? g - q.concept_id : q.concept_id - g;
            if (d >= 2) pool.insert(pool.end(), cells[g].begin(), cells[g].end());
          }
        } else if (w.config.n_categories > 1) {
          std::size_t other = rng.uniform_index(w.config.n_categories - 1);
          if (other >= q.category) ++other;
          pool = w.items_by_category[other];
        }
        if (!pool.empty())
          item_index = pool[rng.uniform_index(pool.size())];
        else if (!w.items_by_category[q.category].empty())
          item_index = w.items_by_category[q.category][rng.uniform_index(
              w.items_by_category[q.category].size())];
        else
          item_index = rng.uniform_index(w.items.size());
        SearchSample probe;
        probe.user_id = u.id;
        probe.item_id = w.items[item_index].id;
        probe.category = q.category;
        probe.rsl = relevance_level(q, w.items[item_index]);
        if (rng.bernoulli(true_click_probability(w, probe, m))) break;
      }
      const auto& q = w.queries[qi];
      const auto& it = w.items[item_index];
      seq.events.push_back({q.tokens, it.tokens, relevance_level(q, it), q.category});
    }
    if (seq.events.size() > w.config.max_behavior_len)
      seq.events.resize(w.config.max_behavior_len);
    out.push_back(std::move(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization. Text, UTF-8, TAB-separated fields; doubles printed with the
// shortest representation that round-trips bit-exactly.

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw IoError("dataset: malformed floating-point field '" + std::string(s) + "'");
  return v;
}

inline long long parse_ll(std::string_view s) {
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw IoError("dataset: malformed integer field '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string join_tokens(const std::vector<int>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out.push_back(' ');
    out += std::to_string(toks[i]);
  }
  return out;
}

inline std::vector<int> parse_tokens(std::string_view field) {
  std::vector<int> out;
  if (field.empty()) return out;
  for (const auto part : split(field, ' '))
    out.push_back(static_cast<int>(parse_ll(part)));
  return out;
}

}  // namespace detail

struct DatasetMeta {
  int schema_version = 1;
  std::uint64_t config_hash = 0;
};

inline void emit_dataset(const std::vector<SearchSample>& samples,
                         const std::string& path, const DatasetMeta& meta) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "#relctr-dataset\tv" << meta.schema_version << "\t" << std::hex
    << meta.config_hash << std::dec << "\n";
  for (const auto& s : samples) {
    f << s.user_id << '\t' << s.query_id << '\t' << s.item_id << '\t'
      << s.category << '\t' << detail::join_tokens(s.query_tokens) << '\t'
      << detail::join_tokens(s.item_tokens) << '\t' << s.rsl << '\t'
      << s.exposed << '\t' << s.click << '\t';
    for (std::size_t i = 0; i < s.dense.size(); ++i) {
      if (i) f << ',';
      f << detail::format_double(s.dense[i]);
    }
    f << '\n';
  }
  if (!f) throw IoError("write failure: " + path);
}

inline std::pair<DatasetMeta, std::vector<SearchSample>> load_dataset(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(f, line) || !line.starts_with("#relctr-dataset"))
    throw IoError("dataset: missing header line in " + path);
  DatasetMeta meta;
  {
    const auto fields = detail::split(line, '\t');
    if (fields.size() != 3 || fields[1].size() < 2 || fields[1][0] != 'v')
      throw IoError("dataset: malformed header in " + path);
    meta.schema_version = static_cast<int>(detail::parse_ll(fields[1].substr(1)));
    std::uint64_t h = 0;
    const auto hs = fields[2];
    const auto res = std::from_chars(hs.data(), hs.data() + hs.size(), h, 16);
    if (res.ec != std::errc()) throw IoError("dataset: bad config hash in " + path);
    meta.config_hash = h;
  }
  std::vector<SearchSample> samples;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split(line, '\t');
    if (fields.size() != 10)
      throw IoError("dataset: expected 10 fields, got " +
                    std::to_string(fields.size()) + " in " + path);
    SearchSample s;
    s.user_id = detail::parse_ll(fields[0]);
    s.query_id = detail::parse_ll(fields[1]);
    s.item_id = detail::parse_ll(fields[2]);
    s.category = static_cast<std::size_t>(detail::parse_ll(fields[3]));
    s.query_tokens = detail::parse_tokens(fields[4]);
    s.item_tokens = detail::parse_tokens(fields[5]);
    s.rsl = static_cast<int>(detail::parse_ll(fields[6]));
    s.exposed = static_cast<int>(detail::parse_ll(fields[7]));
    s.click = static_cast<int>(detail::parse_ll(fields[8]));
    if (s.rsl < 1 || s.rsl > 4) throw IoError("dataset: rsl out of range in " + path);
    if (s.click == 1 && s.exposed != 1)
      throw IoError("dataset: click without exposure in " + path);
    if (!fields[9].empty())
      for (const auto part : detail::split(fields[9], ','))
        s.dense.push_back(detail::parse_double(part));
    samples.push_back(std::move(s));
  }
  return {meta, std::move(samples)};
}

inline void emit_behaviors(const std::vector<BehaviorSequence>& seqs,
                           const std::string& path, const DatasetMeta& meta) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << "#relctr-behaviors\tv" << meta.schema_version << "\t" << std::hex
    << meta.config_hash << std::dec << "\n";
  for (const auto& seq : seqs) {
    f << "u\t" << seq.user_id << '\t' << (seq.cold ? 1 : 0) << "\n";
    for (std::size_t e = 0; e < seq.events.size(); ++e) {
      const auto& ev = seq.events[e];
      f << "e\t" << seq.user_id << '\t' << e << '\t'
        << detail::join_tokens(ev.query_tokens) << '\t'
        << detail::join_tokens(ev.item_tokens) << '\t' << ev.rsl << '\t'
        << ev.category << "\n";
    }
  }
  if (!f) throw IoError("write failure: " + path);
}

inline std::pair<DatasetMeta, std::vector<BehaviorSequence>> load_behaviors(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(f, line) || !line.starts_with("#relctr-behaviors"))
    throw IoError("behaviors: missing header line in " + path);
  DatasetMeta meta;
  {
    const auto fields = detail::split(line, '\t');
    if (fields.size() != 3 || fields[1].size() < 2 || fields[1][0] != 'v')
      throw IoError("behaviors: malformed header in " + path);
    meta.schema_version = static_cast<int>(detail::parse_ll(fields[1].substr(1)));
    std::uint64_t h = 0;
    const auto hs = fields[2];
    const auto res = std::from_chars(hs.data(), hs.data() + hs.size(), h, 16);
    if (res.ec != std::errc()) throw IoError("behaviors: bad config hash in " + path);
    meta.config_hash = h;
  }
  std::vector<BehaviorSequence> seqs;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split(line, '\t');
    if (fields[0] == "u") {
      if (fields.size() != 3) throw IoError("behaviors: malformed user line in " + path);
      BehaviorSequence seq;
      seq.user_id = detail::parse_ll(fields[1]);
      seq.cold = detail::parse_ll(fields[2]) != 0;
      seqs.push_back(std::move(seq));
    } else if (fields[0] == "e") {
      if (fields.size() != 7) throw IoError("behaviors: malformed event line in " + path);
      if (seqs.empty() || seqs.back().user_id != detail::parse_ll(fields[1]))
        throw IoError("behaviors: event before its user line in " + path);
      BehaviorEvent ev;
      ev.query_tokens = detail::parse_tokens(fields[3]);
      ev.item_tokens = detail::parse_tokens(fields[4]);
      ev.rsl = static_cast<int>(detail::parse_ll(fields[5]));
      ev.category = static_cast<std::size_t>(detail::parse_ll(fields[6]));
      seqs.back().events.push_back(std::move(ev));
    } else {
      throw IoError("behaviors: unknown record type in " + path);
    }
  }
  return {meta, std::move(seqs)};
}

}  // namespace relctr::synth
