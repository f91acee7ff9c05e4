#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "relctr/synth.hpp"

namespace sy = relctr::synth;

namespace {

sy::WorldConfig small_config() {
  sy::WorldConfig c;
  c.n_users = 60;
  c.n_items = 240;
  c.n_queries = 120;
  c.n_categories = 4;
  c.concepts_per_category = 6;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST(World, DeterministicForSeed) {
  const auto cfg = small_config();
  const auto a = sy::generate_world(cfg, 77);
  const auto b = sy::generate_world(cfg, 77);
  ASSERT_EQ(a.users.size(), b.users.size());
  for (std::size_t i = 0; i < a.users.size(); ++i) {
    EXPECT_EQ(a.users[i].sensitivity, b.users[i].sensitivity);
    EXPECT_EQ(a.users[i].cold, b.users[i].cold);
    EXPECT_EQ(a.users[i].history_len, b.users[i].history_len);
  }
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    EXPECT_EQ(a.items[i].tokens, b.items[i].tokens);
    EXPECT_EQ(a.items[i].quality, b.items[i].quality);
  }
  const auto c = sy::generate_world(cfg, 78);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.items.size() && !any_diff; ++i)
    any_diff = a.items[i].tokens != c.items[i].tokens;
  EXPECT_TRUE(any_diff);
}

TEST(World, BoundarySizes) {
  sy::WorldConfig c;
  c.n_users = 1;
  c.n_items = 1;
  c.n_queries = 1;
  c.n_categories = 1;
  const auto w = sy::generate_world(c, 1);
  EXPECT_EQ(w.users.size(), 1u);
  EXPECT_EQ(w.items.size(), 1u);
  EXPECT_EQ(w.queries.size(), 1u);
}

TEST(World, ZeroCategoriesRejected) {
  sy::WorldConfig c;
  c.n_categories = 0;
  EXPECT_THROW(sy::generate_world(c, 1), relctr::ConfigError);
}

TEST(World, ColdFractionRoughlyHonored) {
  auto cfg = small_config();
  cfg.n_users = 2000;
  cfg.cold_user_fraction = 0.3;
  const auto w = sy::generate_world(cfg, 5);
  std::size_t cold = 0;
  for (const auto& u : w.users) {
    if (u.cold) {
      ++cold;
      EXPECT_LE(u.history_len, 2u);
    } else {
      EXPECT_GE(u.history_len, 5u);
      EXPECT_LE(u.history_len, 25u);
    }
  }
  EXPECT_NEAR(static_cast<double>(cold) / 2000.0, 0.3, 0.05);
}

TEST(Relevance, TokenOverlapTracksLevel) {
  const auto w = sy::generate_world(small_config(), 9);
  // Window geometry: same concept shares all 5 window tokens, adjacent
  // concepts share 3, two apart share 1, farther or cross-category none.
  const auto overlap = [&](std::size_t cat_a, std::size_t g_a, std::size_t cat_b,
                           std::size_t g_b) {
    const int a0 = static_cast<int>(cat_a * w.tokens_per_category() + 2 * g_a);
    const int b0 = static_cast<int>(cat_b * w.tokens_per_category() + 2 * g_b);
    int n = 0;
    for (int t = a0; t < a0 + 5; ++t)
      if (t >= b0 && t < b0 + 5) ++n;
    return n;
  };
  EXPECT_EQ(overlap(0, 2, 0, 2), 5);
  EXPECT_EQ(overlap(0, 2, 0, 3), 3);
  EXPECT_EQ(overlap(0, 2, 0, 4), 1);
  EXPECT_EQ(overlap(0, 2, 0, 5), 0);
  EXPECT_EQ(overlap(0, 2, 1, 2), 0);

  sy::QueryProfile q;
  q.category = 0;
  q.concept_id = 2;
  sy::ItemProfile it;
  it.category = 0;
  it.concept_id = 2;
  EXPECT_EQ(sy::relevance_level(q, it), 4);
  it.concept_id = 3;
  EXPECT_EQ(sy::relevance_level(q, it), 3);
  it.concept_id = 5;
  EXPECT_EQ(sy::relevance_level(q, it), 2);
  it.category = 1;
  EXPECT_EQ(sy::relevance_level(q, it), 1);
}

TEST(Exposure, NoGateMatchesCandidateDistribution) {
  const auto w = sy::generate_world(small_config(), 11);
  const auto samples = sy::simulate_exposure(w, 0.0, 100000, 21);
  std::array<double, 5> cand{}, expd{};
  double n_exp = 0.0;
  for (const auto& s : samples) {
    cand[s.rsl] += 1.0;
    if (s.exposed) {
      expd[s.rsl] += 1.0;
      n_exp += 1.0;
    }
  }
  ASSERT_GT(n_exp, 0.0);
  for (int r = 1; r <= 4; ++r)
    EXPECT_NEAR(expd[r] / n_exp, cand[r] / 100000.0, 0.02) << "rsl " << r;
}

TEST(Exposure, DefaultGateSkewsHighRelevance) {
  const auto w = sy::generate_world(small_config(), 11);
  const auto samples = sy::simulate_exposure(w, 0.8, 100000, 22);
  double high = 0.0, total = 0.0;
  for (const auto& s : samples) {
    if (!s.exposed) continue;
    total += 1.0;
    if (s.rsl >= 3) high += 1.0;
  }
  ASSERT_GT(total, 1000.0);
  EXPECT_GE(high / total, 0.80);
}

TEST(Exposure, FullStrictnessExposesOnlyTopLevel) {
  const auto w = sy::generate_world(small_config(), 11);
  const auto samples = sy::simulate_exposure(w, 1.0, 20000, 23);
  std::size_t exposed = 0;
  for (const auto& s : samples) {
    if (s.exposed) {
      ++exposed;
      EXPECT_EQ(s.rsl, 4);
    }
  }
  EXPECT_GT(exposed, 100u);
}

TEST(Exposure, ColdTrafficFactorThinsColdImpressions) {
  auto cfg = small_config();
  cfg.cold_user_fraction = 0.4;
  const auto w_even = sy::generate_world(cfg, 11);
  cfg.cold_traffic_factor = 0.1;
  const auto w_thin = sy::generate_world(cfg, 11);

  const auto share_cold = [](const sy::World& w, std::uint64_t seed) {
    const auto samples = sy::simulate_exposure(w, 0.8, 40000, seed);
    double cold = 0.0;
    for (const auto& s : samples)
      if (w.users[static_cast<std::size_t>(s.user_id)].cold) cold += 1.0;
    return cold / static_cast<double>(samples.size());
  };

  // factor 1: impressions mirror the population; factor 0.1: cold users keep
  // 0.1 weight each, i.e. share 0.04/(0.6 + 0.04).
  EXPECT_NEAR(share_cold(w_even, 33), 0.4, 0.02);
  EXPECT_NEAR(share_cold(w_thin, 33), 0.04 / 0.64, 0.01);
}

TEST(Exposure, DeterministicAndOrderFree) {
  const auto w = sy::generate_world(small_config(), 11);
  const auto a = sy::simulate_exposure(w, 0.8, 500, 31);
  const auto b = sy::simulate_exposure(w, 0.8, 500, 31);
  EXPECT_EQ(a, b);
  // Prefix property: row i does not depend on how many rows were requested.
  const auto c = sy::simulate_exposure(w, 0.8, 100, 31);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(a[i], c[i]);
}

TEST(Clicks, ForcedProbabilities) {
  const auto w = sy::generate_world(small_config(), 11);
  auto samples = sy::simulate_exposure(w, 0.8, 2000, 41);
  sy::ClickModel zero;
  zero.force_p = 0.0;
  sy::simulate_clicks(w, samples, 51, zero);
  for (const auto& s : samples) EXPECT_EQ(s.click, 0);
  sy::ClickModel one;
  one.force_p = 1.0;
  sy::simulate_clicks(w, samples, 51, one);
  for (const auto& s : samples) EXPECT_EQ(s.click, s.exposed);
}

TEST(Clicks, EmpiricalCtrMatchesModelMean) {
  const auto w = sy::generate_world(small_config(), 11);
  auto samples = sy::simulate_exposure(w, 0.8, 120000, 42);
  sy::simulate_clicks(w, samples, 52);
  double clicks = 0.0, exposed = 0.0, model_mean = 0.0;
  for (const auto& s : samples) {
    if (!s.exposed) continue;
    exposed += 1.0;
    clicks += s.click;
    model_mean += sy::true_click_probability(w, s);
  }
  ASSERT_GT(exposed, 100000.0 * 0.15);
  model_mean /= exposed;
  const double ctr = clicks / exposed;
  EXPECT_NEAR(ctr, model_mean, 0.1 * model_mean);
}

TEST(Clicks, MonotoneInRelevance) {
  const auto w = sy::generate_world(small_config(), 11);
  sy::SearchSample s;
  s.user_id = 3;
  s.item_id = 5;
  s.category = w.users[3].home_category;
  double prev = -1.0;
  for (int r = 1; r <= 4; ++r) {
    s.rsl = r;
    const double p = sy::true_click_probability(w, s);
    EXPECT_GT(p, prev);
    prev = p;
  }
}

TEST(Clicks, ClickImpliesExposure) {
  const auto w = sy::generate_world(small_config(), 11);
  auto samples = sy::simulate_exposure(w, 0.8, 30000, 43);
  sy::simulate_clicks(w, samples, 53);
  for (const auto& s : samples)
    if (s.click == 1) EXPECT_EQ(s.exposed, 1);
}

TEST(Sensitivity, CategoryGapShowsInClickedRelevance) {
  sy::WorldConfig cfg;
  cfg.n_users = 400;
  cfg.n_items = 400;
  cfg.n_queries = 200;
  cfg.n_categories = 2;
  cfg.concepts_per_category = 6;
  cfg.sensitivity_gap = 0.4;
  const auto w = sy::generate_world(cfg, 13);
  // Ungated exposure so clicks span the whole relevance range.
  auto samples = sy::simulate_exposure(w, 0.0, 120000, 44);
  sy::simulate_clicks(w, samples, 54);
  std::array<double, 2> rsl_sum{}, n_clicks{};
  for (const auto& s : samples) {
    if (!s.click) continue;
    rsl_sum[s.category] += s.rsl;
    n_clicks[s.category] += 1.0;
  }
  ASSERT_GT(n_clicks[0] + n_clicks[1], 10000.0);
  const double mean_low = rsl_sum[0] / n_clicks[0];
  const double mean_high = rsl_sum[1] / n_clicks[1];
  EXPECT_GE(mean_high - mean_low, 0.3);
}

TEST(Behaviors, LengthsAndDeterminism) {
  const auto w = sy::generate_world(small_config(), 15);
  const auto a = sy::generate_behaviors(w, 61);
  const auto b = sy::generate_behaviors(w, 61);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), w.users.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].events.size(), w.users[i].history_len);
    EXPECT_LE(a[i].events.size(), w.config.max_behavior_len);
    EXPECT_EQ(a[i].cold, w.users[i].cold);
    if (a[i].cold) EXPECT_LE(a[i].events.size(), 2u);
  }
}

TEST(Behaviors, HistorySkewsRelevant) {
  const auto w = sy::generate_world(small_config(), 15);
  const auto seqs = sy::generate_behaviors(w, 61);
  double sum = 0.0, n = 0.0;
  for (const auto& s : seqs)
    for (const auto& e : s.events) {
      sum += e.rsl;
      n += 1.0;
    }
  ASSERT_GT(n, 100.0);
  EXPECT_GE(sum / n, 3.0);
}

TEST(Behaviors, ClickedMixTracksSensitivity) {
  auto cfg = small_config();
  cfg.n_users = 200;
  cfg.max_behavior_len = 25;
  cfg.cold_user_fraction = 0.0;  // every user contributes a long history
  const auto w = sy::generate_world(cfg, 15);
  const auto seqs = sy::generate_behaviors(w, 61);
  double lo_sum = 0, lo_n = 0, hi_sum = 0, hi_n = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const double sens = w.users[i].sensitivity;
    if (sens > 0.3 && sens < 0.7) continue;  // contrast the tails
    const bool hi = sens >= 0.7;
    for (const auto& e : seqs[i].events) {
      (hi ? hi_sum : lo_sum) += e.rsl;
      (hi ? hi_n : lo_n) += 1.0;
    }
  }
  ASSERT_GT(lo_n, 300.0);
  ASSERT_GT(hi_n, 300.0);
  EXPECT_GE(hi_sum / hi_n - lo_sum / lo_n, 0.3);
}

TEST(Behaviors, ForcedAcceptanceReducesToProposalMix) {
  auto cfg = small_config();
  cfg.n_users = 200;
  cfg.cold_user_fraction = 0.0;
  const auto w = sy::generate_world(cfg, 15);
  sy::ClickModel always;
  always.force_p = 1.0;
  const auto seqs = sy::generate_behaviors(w, 61, always);
  std::array<double, 5> hist{};
  double n = 0;
  for (const auto& s : seqs)
    for (const auto& e : s.events) {
      hist[static_cast<std::size_t>(e.rsl)] += 1.0;
      n += 1.0;
    }
  ASSERT_GT(n, 1000.0);
  // First proposal always accepted: shares follow the proposal mix
  // (0.40 exact, 0.30 adjacent, 0.18 far, 0.12 foreign).
  EXPECT_NEAR(hist[4] / n, 0.40, 0.03);
  EXPECT_NEAR(hist[3] / n, 0.30, 0.03);
  EXPECT_NEAR(hist[2] / n, 0.18, 0.03);
  EXPECT_NEAR(hist[1] / n, 0.12, 0.03);
}

TEST(DatasetIo, EmptyRoundTrip) {
  const std::string path = temp_path("relctr_empty.tsv");
  sy::emit_dataset({}, path, {1, 0xabcdef});
  const auto [meta, rows] = sy::load_dataset(path);
  EXPECT_EQ(meta.schema_version, 1);
  EXPECT_EQ(meta.config_hash, 0xabcdefu);
  EXPECT_TRUE(rows.empty());
  std::remove(path.c_str());
}

TEST(DatasetIo, SmallRoundTrip) {
  const auto w = sy::generate_world(small_config(), 15);
  auto samples = sy::simulate_exposure(w, 0.8, 3, 71);
  const std::string path = temp_path("relctr_three.tsv");
  sy::emit_dataset(samples, path, {1, w.config.hash()});
  const auto [meta, rows] = sy::load_dataset(path);
  EXPECT_EQ(meta.config_hash, w.config.hash());
  EXPECT_EQ(rows, samples);
  std::remove(path.c_str());
}

TEST(DatasetIo, LargeRoundTripBitExact) {
  const auto w = sy::generate_world(small_config(), 15);
  auto samples = sy::simulate_exposure(w, 0.8, 100000, 72);
  sy::simulate_clicks(w, samples, 73);
  const std::string path = temp_path("relctr_big.tsv");
  sy::emit_dataset(samples, path, {1, w.config.hash()});
  const auto [meta, rows] = sy::load_dataset(path);
  ASSERT_EQ(rows.size(), samples.size());
  EXPECT_EQ(rows, samples);
  std::remove(path.c_str());
}

TEST(DatasetIo, RejectsMalformedRows) {
  const std::string path = temp_path("relctr_bad.tsv");
  {
    std::ofstream f(path);
    f << "#relctr-dataset\tv1\tff\n";
    f << "1\t2\t3\t0\t4 5\t6 7\t9\t1\t0\t0.5\n";  // rsl 9 out of range
  }
  EXPECT_THROW(sy::load_dataset(path), relctr::IoError);
  std::remove(path.c_str());
}

TEST(BehaviorIo, RoundTrip) {
  const auto w = sy::generate_world(small_config(), 15);
  const auto seqs = sy::generate_behaviors(w, 61);
  const std::string path = temp_path("relctr_hist.tsv");
  sy::emit_behaviors(seqs, path, {1, w.config.hash()});
  const auto [meta, loaded] = sy::load_behaviors(path);
  EXPECT_EQ(meta.config_hash, w.config.hash());
  EXPECT_EQ(loaded, seqs);
  std::remove(path.c_str());
}

}  // namespace
