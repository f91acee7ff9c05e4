#pragma once

// Experiment orchestration: the config schema shared by every CLI command,
// data generation, the SGD loop, offline evaluation and report serialization.
// Reports are canonical JSON (sorted keys, shortest-roundtrip numbers), so a
// fixed seed reproduces the file byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "relctr/checkpoint.hpp"
#include "relctr/config.hpp"
#include "relctr/ctr_model.hpp"
#include "relctr/debias.hpp"
#include "relctr/encoder.hpp"
#include "relctr/errors.hpp"
#include "relctr/metrics.hpp"
#include "relctr/preference.hpp"
#include "relctr/rng.hpp"
#include "relctr/synth.hpp"
#include "relctr/tensor.hpp"

namespace relctr::train {

using Json = nlohmann::json;

struct MiningConfig {
  bool enabled = true;
  std::size_t n_users = 50;
  std::size_t top_k = 10;
  std::size_t max_own_len = 25;

  void validate() const {
    if (enabled && (n_users == 0 || top_k == 0))
      throw ConfigError("mining: enabled but n_users or top_k is 0");
  }
};

// Paper-scale defaults; desk configs override batch size and rate.
// learning_rate 0 is allowed and means "evaluate the initial model":
// the loop runs but takes no steps.
struct FitConfig {
  std::size_t batch_size = 4096;
  double learning_rate = 1e-4;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;
  double encoder_lr_multiplier = 0.0;  // 0 freezes the encoder during fitting
  double test_fraction = 0.25;
  std::size_t cold_threshold = 5;  // own-history events below this = cold user
  double base_auc = 0.0;           // <= 0.5 leaves relaimpr_vs_base null
  bool use_pretrained_encoder = true;

  void validate() const {
    if (batch_size < 2)
      throw ConfigError("train: batch_size must be >= 2");
    if (learning_rate < 0.0)
      throw ConfigError("train: learning_rate must be >= 0");
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw ConfigError("train: test_fraction must lie in (0,1)");
    if (encoder_lr_multiplier < 0.0)
      throw ConfigError("train: encoder_lr_multiplier must be >= 0");
    if (cold_threshold == 0)
      throw ConfigError("train: cold_threshold must be >= 1");
  }
};

struct DataConfig {
  double strictness = 0.8;
  std::size_t train_rows = 16000;
  std::size_t full_rows = 4000;
  std::uint64_t seed = 7;

  void validate() const {
    if (strictness < 0.0 || strictness > 1.0)
      throw ConfigError("data: strictness must lie in [0,1]");
    if (train_rows < 4 || full_rows < 4)
      throw ConfigError("data: row counts must be >= 4");
  }
};

struct Paths {
  std::string samples = "samples.tsv";
  std::string full_space = "full_space.tsv";
  std::string behaviors = "behaviors.tsv";
  std::string encoder_ckpt = "encoder.ckpt";
  std::string report = "report.json";
  std::string model_ckpt = "model.ckpt";
  std::string sweep = "sweep.csv";
  std::string ablate = "ablate.json";
};

struct PretrainSection {
  text::PretrainConfig cfg;
  std::size_t pairs = 1200;
  std::size_t eval_pairs = 300;
  std::size_t teacher_d_model = 48;
  std::uint64_t teacher_seed = 1234;

  void validate() const {
    if (pairs == 0 || eval_pairs == 0)
      throw ConfigError("pretrain: pairs and eval_pairs must be >= 1");
    if (teacher_d_model == 0)
      throw ConfigError("pretrain: teacher_d_model must be >= 1");
  }
};

struct ExperimentConfig {
  synth::WorldConfig world;
  std::uint64_t world_seed = 11;
  DataConfig data;
  text::EncoderConfig encoder;  // vocab is always derived from the world
  PretrainSection pretrain;
  std::size_t d_emb = 8;
  std::size_t d_hidden = 32;
  std::size_t incentive_hidden = 8;
  double lambda_rsl = 1.0;
  ctr::FusionMode fusion = ctr::FusionMode::tau_product;
  FitConfig fit;
  MiningConfig mining;
  debias::DebiasConfig debias;
  bool debias_naive = false;
  std::vector<double> sweep_p1 = {0.1, 0.2, 0.3};
  std::vector<double> sweep_p2 = {0.4, 0.6, 0.8};
  std::vector<std::uint64_t> ablate_seeds = {1};
  Paths paths;
  std::uint64_t config_hash = 0;

  ExperimentConfig() {
    // Desk-scale encoder; the library default is the heavier preset.
    encoder.d_model = 16;
    encoder.n_layers = 1;
    encoder.n_heads = 2;
    encoder.d_ff = 32;
    encoder.max_seq_len = 32;
    pretrain.cfg.epochs = 6;
  }

  ctr::ModelConfig model_config() const {
    ctr::ModelConfig mc;
    mc.n_users = world.n_users;
    mc.n_queries = world.n_queries;
    mc.n_items = world.n_items;
    mc.n_categories = world.n_categories;
    mc.dense_dim = world.dense_dim;
    mc.d_emb = d_emb;
    mc.d_hidden = d_hidden;
    mc.incentive_hidden = incentive_hidden;
    mc.lambda_rsl = lambda_rsl;
    mc.fusion = fusion;
    return mc;
  }

  text::EncoderConfig encoder_config() const {
    text::EncoderConfig c = encoder;
    c.vocab = synth::vocab_size_for(world);
    return c;
  }

  // Identifies one generated world; stamped into every emitted data file.
  std::uint64_t world_stamp() const { return mix64(world.hash() ^ world_seed); }

  void validate() const {
    world.validate();
    data.validate();
    fit.validate();
    mining.validate();
    pretrain.validate();
    if (debias.enabled) debias.validate();
  }
};

namespace detail {

inline std::vector<double> parse_double_list(const std::string& s,
                                             const std::string& key) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    const std::string t = cfg::detail::trim(part);
    if (t.empty()) continue;
    double v = 0.0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size())
      throw ConfigError("config: " + key + " has a non-numeric entry: " + t);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("config: " + key + " is empty");
  return out;
}

inline std::vector<std::uint64_t> parse_u64_list(const std::string& s,
                                                 const std::string& key) {
  std::vector<std::uint64_t> out;
  std::istringstream in(s);
  std::string part;
  while (std::getline(in, part, ',')) {
    const std::string t = cfg::detail::trim(part);
    if (t.empty()) continue;
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size())
      throw ConfigError("config: " + key + " has a non-integer entry: " + t);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("config: " + key + " is empty");
  return out;
}

inline std::string hex_u64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline ctr::FusionMode parse_fusion(const std::string& s) {
  if (s == "tau_product") return ctr::FusionMode::tau_product;
  if (s == "one_plus_tau") return ctr::FusionMode::one_plus_tau;
  throw ConfigError("config: model.fusion must be tau_product or one_plus_tau, got: " + s);
}

inline debias::NoiseSide parse_noise_side(const std::string& s) {
  if (s == "query") return debias::NoiseSide::query;
  if (s == "item") return debias::NoiseSide::item;
  throw ConfigError("config: debias.noise_side must be query or item, got: " + s);
}

// Single source of truth for the key schema. Every command consumes the full
// set, so one config file can drive the whole pipeline and a typo anywhere
// fails regardless of which command sees it first.
inline ExperimentConfig parse_experiment_config(const cfg::KeyValues& kv) {
  ExperimentConfig ec;

  auto& w = ec.world;
  w.n_users = kv.get_size("world.users", w.n_users);
  w.n_items = kv.get_size("world.items", w.n_items);
  w.n_queries = kv.get_size("world.queries", w.n_queries);
  w.n_categories = kv.get_size("world.categories", w.n_categories);
  w.concepts_per_category =
      kv.get_size("world.concepts_per_category", w.concepts_per_category);
  w.sensitivity_gap = kv.get_double("world.sensitivity_gap", w.sensitivity_gap);
  w.cold_user_fraction =
      kv.get_double("world.cold_fraction", w.cold_user_fraction);
  w.cold_traffic_factor =
      kv.get_double("world.cold_traffic_factor", w.cold_traffic_factor);
  w.candidate_low_rsl_share =
      kv.get_double("world.low_rsl_share", w.candidate_low_rsl_share);
  w.dense_dim = kv.get_size("world.dense_dim", w.dense_dim);
  w.max_behavior_len = kv.get_size("world.max_behavior_len", w.max_behavior_len);
  ec.world_seed = kv.get_u64("world.seed", ec.world_seed);

  ec.data.strictness = kv.get_double("data.strictness", ec.data.strictness);
  ec.data.train_rows = kv.get_size("data.train_rows", ec.data.train_rows);
  ec.data.full_rows = kv.get_size("data.full_rows", ec.data.full_rows);
  ec.data.seed = kv.get_u64("data.seed", ec.data.seed);
  ec.paths.samples = kv.get_string("data.samples_path", ec.paths.samples);
  ec.paths.full_space =
      kv.get_string("data.full_space_path", ec.paths.full_space);
  ec.paths.behaviors = kv.get_string("data.behaviors_path", ec.paths.behaviors);

  ec.encoder.d_model = kv.get_size("encoder.d_model", ec.encoder.d_model);
  ec.encoder.n_layers = kv.get_size("encoder.layers", ec.encoder.n_layers);
  ec.encoder.n_heads = kv.get_size("encoder.heads", ec.encoder.n_heads);
  ec.encoder.d_ff = kv.get_size("encoder.d_ff", ec.encoder.d_ff);
  ec.encoder.max_seq_len =
      kv.get_size("encoder.max_seq_len", ec.encoder.max_seq_len);
  ec.paths.encoder_ckpt =
      kv.get_string("encoder.checkpoint_path", ec.paths.encoder_ckpt);

  auto& pt = ec.pretrain;
  pt.cfg.epochs = kv.get_size("pretrain.epochs", pt.cfg.epochs);
  pt.cfg.batch_size = kv.get_size("pretrain.batch_size", pt.cfg.batch_size);
  pt.cfg.learning_rate =
      kv.get_double("pretrain.learning_rate", pt.cfg.learning_rate);
  pt.cfg.sft_weight = kv.get_double("pretrain.sft_weight", pt.cfg.sft_weight);
  pt.cfg.distill_weight =
      kv.get_double("pretrain.distill_weight", pt.cfg.distill_weight);
  pt.cfg.seed = kv.get_u64("pretrain.seed", pt.cfg.seed);
  pt.pairs = kv.get_size("pretrain.pairs", pt.pairs);
  pt.eval_pairs = kv.get_size("pretrain.eval_pairs", pt.eval_pairs);
  pt.teacher_d_model =
      kv.get_size("pretrain.teacher_d_model", pt.teacher_d_model);
  pt.teacher_seed = kv.get_u64("pretrain.teacher_seed", pt.teacher_seed);

  ec.d_emb = kv.get_size("model.d_emb", ec.d_emb);
  ec.d_hidden = kv.get_size("model.d_hidden", ec.d_hidden);
  ec.incentive_hidden =
      kv.get_size("model.incentive_hidden", ec.incentive_hidden);
  ec.lambda_rsl = kv.get_double("model.lambda_rsl", ec.lambda_rsl);
  ec.fusion = parse_fusion(kv.get_string("model.fusion", "tau_product"));

  auto& f = ec.fit;
  f.batch_size = kv.get_size("train.batch_size", f.batch_size);
  f.learning_rate = kv.get_double("train.learning_rate", f.learning_rate);
  f.epochs = kv.get_size("train.epochs", f.epochs);
  f.seed = kv.get_u64("train.seed", f.seed);
  f.encoder_lr_multiplier =
      kv.get_double("train.encoder_lr_multiplier", f.encoder_lr_multiplier);
  f.test_fraction = kv.get_double("train.test_fraction", f.test_fraction);
  f.cold_threshold = kv.get_size("train.cold_threshold", f.cold_threshold);
  f.base_auc = kv.get_double("train.base_auc", f.base_auc);
  f.use_pretrained_encoder =
      kv.get_bool("train.pretrained_encoder", f.use_pretrained_encoder);

  ec.mining.enabled = kv.get_bool("mining.enabled", ec.mining.enabled);
  ec.mining.n_users = kv.get_size("mining.n_users", ec.mining.n_users);
  ec.mining.top_k = kv.get_size("mining.top_k", ec.mining.top_k);
  ec.mining.max_own_len =
      kv.get_size("mining.max_own_len", ec.mining.max_own_len);

  auto& db = ec.debias;
  db.enabled = kv.get_bool("debias.enabled", db.enabled);
  db.p1 = kv.get_double("debias.p1", db.p1);
  db.p2 = kv.get_double("debias.p2", db.p2);
  db.margin = kv.get_double("debias.margin", db.margin);
  db.threshold = kv.get_double("debias.threshold", db.threshold);
  db.w = kv.get_double("debias.w", db.w);
  db.noise_sigma = kv.get_double("debias.noise_sigma", db.noise_sigma);
  db.noise_side = parse_noise_side(kv.get_string("debias.noise_side", "query"));
  ec.debias_naive = kv.get_bool("debias.naive", ec.debias_naive);

  if (kv.has("sweep.p1_values"))
    ec.sweep_p1 = detail::parse_double_list(
        kv.get_string("sweep.p1_values", ""), "sweep.p1_values");
  if (kv.has("sweep.p2_values"))
    ec.sweep_p2 = detail::parse_double_list(
        kv.get_string("sweep.p2_values", ""), "sweep.p2_values");
  if (kv.has("ablate.seeds"))
    ec.ablate_seeds = detail::parse_u64_list(kv.get_string("ablate.seeds", ""),
                                             "ablate.seeds");

  ec.paths.report = kv.get_string("out.report_path", ec.paths.report);
  ec.paths.model_ckpt =
      kv.get_string("out.checkpoint_path", ec.paths.model_ckpt);
  ec.paths.sweep = kv.get_string("out.sweep_path", ec.paths.sweep);
  ec.paths.ablate = kv.get_string("out.ablate_path", ec.paths.ablate);

  kv.finish();
  ec.config_hash = kv.hash();
  ec.validate();
  return ec;
}

// ---------------------------------------------------------------------------
// Data generation and loading

struct GenerateSummary {
  std::size_t samples = 0;
  std::size_t exposed = 0;
  std::size_t clicks = 0;
  std::size_t full_rows = 0;
  std::size_t full_clicks = 0;
  std::size_t behaviors = 0;
};

inline GenerateSummary generate_all(const ExperimentConfig& ec) {
  ec.validate();
  const synth::World world = synth::generate_world(ec.world, ec.world_seed);
  auto samples =
      synth::simulate_exposure(world, ec.data.strictness, ec.data.train_rows,
                               ec.data.seed);
  synth::simulate_clicks(world, samples, ec.data.seed);

  // Counterfactual eval rows: same candidate generator, exposure forced
  // open, clicks drawn from the true propensity for every row.
  auto full = synth::simulate_exposure(world, 0.0, ec.data.full_rows,
                                       mix64(ec.data.seed ^ 0xF001ULL));
  synth::expose_all(full);
  synth::simulate_clicks(world, full, mix64(ec.data.seed ^ 0xF002ULL));

  const auto behaviors = synth::generate_behaviors(world, ec.data.seed);

  const synth::DatasetMeta meta{1, ec.world_stamp()};
  synth::emit_dataset(samples, ec.paths.samples, meta);
  synth::emit_dataset(full, ec.paths.full_space, meta);
  synth::emit_behaviors(behaviors, ec.paths.behaviors, meta);

  GenerateSummary g;
  g.samples = samples.size();
  for (const auto& s : samples) {
    g.exposed += static_cast<std::size_t>(s.exposed);
    g.clicks += static_cast<std::size_t>(s.click);
  }
  g.full_rows = full.size();
  for (const auto& s : full) g.full_clicks += static_cast<std::size_t>(s.click);
  g.behaviors = behaviors.size();
  return g;
}

struct LoadedData {
  std::vector<synth::SearchSample> samples;
  std::vector<synth::SearchSample> full_space;
  std::vector<synth::BehaviorSequence> behaviors;
};

inline LoadedData load_inputs(const ExperimentConfig& ec,
                              bool need_encoder_ckpt, bool need_model_ckpt) {
  namespace fs = std::filesystem;
  std::vector<std::string> missing;
  auto want = [&](const std::string& p) {
    if (p.empty() || !fs::exists(p)) missing.push_back(p.empty() ? "(unset path)" : p);
  };
  want(ec.paths.samples);
  want(ec.paths.full_space);
  want(ec.paths.behaviors);
  if (need_encoder_ckpt) want(ec.paths.encoder_ckpt);
  if (need_model_ckpt) want(ec.paths.model_ckpt);
  if (!missing.empty()) {
    std::string msg = "missing input file(s):";
    for (const auto& m : missing) msg += " " + m;
    throw ConfigError(msg);
  }

  LoadedData d;
  synth::DatasetMeta ms, mf, mb;
  std::tie(ms, d.samples) = synth::load_dataset(ec.paths.samples);
  std::tie(mf, d.full_space) = synth::load_dataset(ec.paths.full_space);
  std::tie(mb, d.behaviors) = synth::load_behaviors(ec.paths.behaviors);
  if (ms.config_hash != mf.config_hash || ms.config_hash != mb.config_hash)
    throw ConfigError("input files come from different generation runs");
  if (ms.config_hash != ec.world_stamp())
    throw ConfigError(
        "input files do not match the configured world; regenerate data");
  return d;
}

// ---------------------------------------------------------------------------
// Behavior context resolution

// Resolves and memoizes the merged behavior sequence per (user, query).
// Values are deterministic in (user, query tokens), so the memo does not
// affect results, only speed.
class SequenceProvider {
 public:
  SequenceProvider(pref::BehaviorPool pool,
                   std::map<long long, synth::BehaviorSequence> own,
                   const MiningConfig& mining, std::uint64_t seed)
      : pool_(std::move(pool)),
        own_(std::move(own)),
        mining_(mining),
        seed_(seed) {}

  const pref::MergedSequence& for_sample(const synth::SearchSample& s) {
    const auto key = std::make_pair(s.user_id, s.query_id);
    const auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;
    static const synth::BehaviorSequence kNoHistory{};
    const auto oit = own_.find(s.user_id);
    const synth::BehaviorSequence& own =
        oit == own_.end() ? kNoHistory : oit->second;
    const std::size_t top_k = mining_.enabled ? mining_.top_k : 0;
    pref::MergedSequence seq = pref::build_merged_sequence(
        s.user_id, own, s.query_tokens, s.category, pool_, mining_.n_users,
        top_k, mining_.max_own_len, seed_);
    return memo_.emplace(key, std::move(seq)).first->second;
  }

  std::size_t own_history_len(long long user) const {
    const auto it = own_.find(user);
    return it == own_.end() ? 0 : it->second.events.size();
  }

 private:
  pref::BehaviorPool pool_;
  std::map<long long, synth::BehaviorSequence> own_;
  MiningConfig mining_;
  std::uint64_t seed_;
  std::map<std::pair<long long, long long>, pref::MergedSequence> memo_;
};

// ---------------------------------------------------------------------------
// Fitting

struct EpochLog {
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

struct FitResult {
  std::vector<EpochLog> epochs;
  std::size_t observed = 0;
  std::size_t debias_pairs = 0;
};

inline FitResult fit_model(ctr::RankModelParams& params,
                           const std::vector<synth::SearchSample>& observed,
                           SequenceProvider& seqs, const ExperimentConfig& ec,
                           ctr::TextCache* cache) {
  const FitConfig& fc = ec.fit;
  if (observed.size() < 2)
    throw InputError("fit: need at least 2 exposed training rows");

  std::vector<Tensor> fast_params = params.own();
  for (const Tensor& t : params.incentive.all()) fast_params.push_back(t);
  const std::vector<Tensor> enc_params = params.encoder.all();
  const bool enc_trains =
      fc.encoder_lr_multiplier > 0.0 && fc.learning_rate > 0.0;

  std::vector<std::size_t> order(observed.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  FitResult res;
  res.observed = observed.size();
  for (std::size_t epoch = 0; epoch < fc.epochs; ++epoch) {
    RngStream shuffle(fc.seed, "train.shuffle", epoch);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle.uniform_index(i)]);

    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += fc.batch_size) {
      const std::size_t end = std::min(start + fc.batch_size, order.size());
      if (end - start < 2) break;  // pairwise terms need batch statistics

      std::vector<synth::SearchSample> rows;
      rows.reserve(end - start);
      for (std::size_t i = start; i < end; ++i)
        rows.push_back(observed[order[i]]);

      std::vector<ctr::SampleFeatures> feats;
      feats.reserve(rows.size());
      std::vector<double> clicks;
      std::vector<int> rsls;
      std::vector<char> exposed;
      for (const auto& s : rows) {
        feats.push_back(ctr::featurize(params, s, seqs.for_sample(s), cache));
        clicks.push_back(static_cast<double>(s.click));
        rsls.push_back(s.rsl);
        exposed.push_back(1);
      }
      const auto pred = ctr::forward(params, feats);

      Tensor r_debias = Tensor::scalar(0.0);
      bool has_debias = false;
      if (ec.debias.enabled) {
        RngStream pair_rng(fc.seed, "train.debias", epoch, steps);
        const auto pairs = debias::make_pairs(rows, ec.debias, pair_rng);
        res.debias_pairs += pairs.size();
        auto seq_for =
            [&](const synth::SearchSample& s) -> const pref::MergedSequence& {
          return seqs.for_sample(s);
        };
        r_debias = ec.debias_naive
                       ? debias::debias_loss_naive(params, pairs, seq_for,
                                                   ec.debias, cache)
                       : debias::debias_loss(params, pairs, seq_for, ec.debias,
                                             cache);
        has_debias = true;
      }

      const Tensor loss = ctr::main_loss(params, pred, clicks, rsls, exposed,
                                         has_debias ? &r_debias : nullptr);
      loss_sum += loss.item();
      ++steps;

      if (fc.learning_rate > 0.0) {
        GradTape tape(loss);
        tape.run();
        text::sgd_step(fast_params, fc.learning_rate);
        if (enc_trains)
          text::sgd_step(enc_params,
                         fc.learning_rate * fc.encoder_lr_multiplier);
        text::zero_grads(params.all());
        // Cached text encodings go stale the moment the encoder moves.
        if (enc_trains && cache != nullptr) cache->clear();
      }
    }
    res.epochs.push_back(
        {steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0, steps});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ScoredRows {
  std::vector<double> p_click;
  std::vector<double> rank_score;
  std::vector<int> click;
  std::vector<long long> user;
};

inline ScoredRows score_all(const ctr::RankModelParams& params,
                            const std::vector<synth::SearchSample>& rows,
                            SequenceProvider& seqs, ctr::TextCache* cache,
                            std::size_t chunk = 256) {
  ScoredRows out;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t end = std::min(start + chunk, rows.size());
    std::vector<ctr::SampleFeatures> feats;
    feats.reserve(end - start);
    for (std::size_t i = start; i < end; ++i)
      feats.push_back(
          ctr::featurize(params, rows[i], seqs.for_sample(rows[i]), cache));
    const auto pred = ctr::forward(params, feats);
    for (std::size_t j = 0; j < feats.size(); ++j) {
      out.p_click.push_back(pred.p_click.at(j));
      out.rank_score.push_back(pred.rank_score.at(j));
    }
  }
  for (const auto& s : rows) {
    out.click.push_back(s.click);
    out.user.push_back(s.user_id);
  }
  return out;
}

namespace detail {

template <typename F>
Json guarded_metric(F&& f) {
  try {
    return Json(f());
  } catch (const UndefinedMetricError&) {
    return Json(nullptr);
  }
}

inline ScoredRows select(const ScoredRows& s, const std::vector<std::size_t>& idx) {
  ScoredRows out;
  for (std::size_t i : idx) {
    out.p_click.push_back(s.p_click[i]);
    out.rank_score.push_back(s.rank_score[i]);
    out.click.push_back(s.click[i]);
    out.user.push_back(s.user[i]);
  }
  return out;
}

inline Json slice_block(const ScoredRows& s) {
  Json j;
  j["rows"] = s.click.size();
  if (s.click.empty()) {
    j["auc"] = nullptr;
    j["gauc"] = nullptr;
    return j;
  }
  j["auc"] = guarded_metric([&] { return metrics::auc(s.p_click, s.click); });
  j["gauc"] = guarded_metric(
      [&] { return metrics::gauc(s.p_click, s.click, s.user); });
  return j;
}

}  // namespace detail

// Groups full-space rows per query, ranks by rank_score (ties by item id),
// and reads the true relevance labels off in rank order.
inline double full_space_irrelevant_rate(
    const std::vector<synth::SearchSample>& rows,
    const std::vector<double>& rank_scores, std::ostream* warn = nullptr) {
  if (rows.size() != rank_scores.size())
    throw InputError("irrelevant rate: row/score length mismatch");
  std::map<long long, std::vector<std::size_t>> by_query;
  for (std::size_t i = 0; i < rows.size(); ++i)
    by_query[rows[i].query_id].push_back(i);
  std::vector<std::vector<int>> ranked;
  ranked.reserve(by_query.size());
  for (auto& [qid, idx] : by_query) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (rank_scores[a] != rank_scores[b])
        return rank_scores[a] > rank_scores[b];
      return rows[a].item_id < rows[b].item_id;
    });
    std::vector<int> rsls;
    rsls.reserve(idx.size());
    for (std::size_t i : idx) rsls.push_back(rows[i].rsl);
    ranked.push_back(std::move(rsls));
  }
  return metrics::irrelevant_rate_at_10(ranked, warn);
}

// ---------------------------------------------------------------------------
// Orchestration

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << body;
  if (!f) throw IoError("write failure: " + path);
}

// Trains (or, for eval_only, loads) a model and produces the full report.
// Headline metrics propagate undefined-metric errors; slice metrics may be
// null when a slice degenerates to a single class.
inline Json run_experiment(const ExperimentConfig& ec, bool eval_only = false) {
  ec.validate();
  const FitConfig& fc = ec.fit;
  const bool need_encoder = !eval_only && fc.use_pretrained_encoder;
  const LoadedData data = load_inputs(ec, need_encoder, eval_only);

  // Temporal split: the log is in generation order, later rows are the
  // held-out period.
  const std::size_t n = data.samples.size();
  const auto n_test = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * fc.test_fraction));
  if (n_test == 0 || n_test >= n)
    throw ConfigError("train: test_fraction leaves an empty split");
  const std::size_t n_train = n - n_test;

  std::vector<synth::SearchSample> train_rows(data.samples.begin(),
                                              data.samples.begin() + n_train);
  std::vector<synth::SearchSample> observed;
  for (const auto& s : train_rows)
    if (s.exposed) observed.push_back(s);
  std::vector<synth::SearchSample> test_exposed;
  for (std::size_t i = n_train; i < n; ++i)
    if (data.samples[i].exposed) test_exposed.push_back(data.samples[i]);

  // Behavior context: the cross-user pool comes from the historical click
  // sequences, which predate the logging window and carry relevance variety
  // the exposure gate filters out of the log itself.
  pref::BehaviorPool pool = pref::BehaviorPool::from_behaviors(data.behaviors);
  std::map<long long, synth::BehaviorSequence> own;
  for (const auto& b : data.behaviors) own[b.user_id] = b;
  SequenceProvider seqs(std::move(pool), std::move(own), ec.mining, fc.seed);

  const ctr::ModelConfig mc = ec.model_config();
  const text::EncoderConfig encfg = ec.encoder_config();
  const bool enc_trains =
      !eval_only && fc.encoder_lr_multiplier > 0.0 && fc.learning_rate > 0.0;
  ctr::RankModelParams params =
      ctr::RankModelParams::init(mc, encfg, fc.seed, true, enc_trains);
  if (eval_only) {
    ckpt::apply(params.named(), ckpt::load(ec.paths.model_ckpt));
  } else if (fc.use_pretrained_encoder) {
    ckpt::apply(params.encoder.named("encoder"),
                ckpt::load(ec.paths.encoder_ckpt));
  }

  ctr::TextCache cache;
  FitResult fit;
  fit.observed = observed.size();
  if (!eval_only) fit = fit_model(params, observed, seqs, ec, &cache);

  const ScoredRows exp_scored = score_all(params, test_exposed, seqs, &cache);
  const ScoredRows full_scored =
      score_all(params, data.full_space, seqs, &cache);

  if (exp_scored.click.empty())
    throw UndefinedMetricError("eval: no exposed test rows");

  const double auc = metrics::auc(exp_scored.p_click, exp_scored.click);
  const double gauc =
      metrics::gauc(exp_scored.p_click, exp_scored.click, exp_scored.user);
  const double pcoc = metrics::pcoc(exp_scored.p_click, exp_scored.click);
  const double auc_full =
      metrics::auc(full_scored.p_click, full_scored.click);
  const double gauc_full =
      metrics::gauc(full_scored.p_click, full_scored.click, full_scored.user);
  const double pcoc_full =
      metrics::pcoc(full_scored.p_click, full_scored.click);
  const double irr = full_space_irrelevant_rate(
      data.full_space, full_scored.rank_score, nullptr);

  Json report;
  report["schema"] = 1;
  report["config_hash"] = detail::hex_u64(ec.config_hash);
  report["seed"] = fc.seed;
  report["counts"] = {{"log_rows", n},
                      {"train_rows", n_train},
                      {"train_exposed", observed.size()},
                      {"test_exposed", test_exposed.size()},
                      {"full_space", data.full_space.size()}};
  {
    Json losses = Json::array();
    for (const auto& e : fit.epochs) losses.push_back(e.mean_loss);
    report["fit"] = {{"epoch_mean_loss", losses},
                     {"debias_pairs", fit.debias_pairs},
                     {"eval_only", eval_only}};
  }

  Json exposed_block = {{"auc", auc},
                        {"gauc", gauc},
                        {"pcoc", pcoc},
                        {"pcoc_deviation", std::abs(pcoc - 1.0)}};
  exposed_block["relaimpr_vs_base"] =
      fc.base_auc > 0.5 ? Json(metrics::relaimpr(auc, fc.base_auc))
                        : Json(nullptr);
  report["metrics"]["exposed"] = exposed_block;
  report["metrics"]["full"] = {{"auc", auc_full},
                               {"gauc", gauc_full},
                               {"pcoc", pcoc_full},
                               {"pcoc_deviation", std::abs(pcoc_full - 1.0)},
                               {"irrelevant_rate_at_10", irr}};

  // Cold/active decided by own-history length, not by what the model saw.
  auto split_idx = [&](const ScoredRows& s, bool cold) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < s.user.size(); ++i) {
      const bool is_cold = seqs.own_history_len(s.user[i]) < fc.cold_threshold;
      if (is_cold == cold) idx.push_back(i);
    }
    return idx;
  };
  for (const bool cold : {true, false}) {
    const char* name = cold ? "cold" : "active";
    report["metrics"]["slices"][name]["exposed"] =
        detail::slice_block(detail::select(exp_scored, split_idx(exp_scored, cold)));
    report["metrics"]["slices"][name]["full"] =
        detail::slice_block(detail::select(full_scored, split_idx(full_scored, cold)));
  }

  if (!ec.paths.report.empty())
    write_text_file(ec.paths.report, report.dump(2) + "\n");
  if (!eval_only && !ec.paths.model_ckpt.empty())
    ckpt::save(ec.paths.model_ckpt, params.named());
  return report;
}

// Pretrains the text encoder against a frozen teacher on labeled pairs taken
// from the head of the generated log, and saves the encoder checkpoint.
inline Json run_pretrain(const ExperimentConfig& ec) {
  ec.validate();
  namespace fs = std::filesystem;
  if (ec.paths.samples.empty() || !fs::exists(ec.paths.samples))
    throw ConfigError("missing input file(s): " +
                      (ec.paths.samples.empty() ? "(unset path)"
                                                : ec.paths.samples));
  if (ec.paths.encoder_ckpt.empty())
    throw ConfigError("pretrain: encoder.checkpoint_path is required");

  auto [meta, samples] = synth::load_dataset(ec.paths.samples);
  if (meta.config_hash != ec.world_stamp())
    throw ConfigError(
        "input files do not match the configured world; regenerate data");
  const PretrainSection& pt = ec.pretrain;
  if (samples.size() < pt.pairs + pt.eval_pairs)
    throw ConfigError("pretrain: log too small for pretrain.pairs + eval_pairs");

  auto to_pairs = [&](std::size_t begin, std::size_t count) {
    std::vector<text::LabeledPair> out;
    out.reserve(count);
    for (std::size_t i = begin; i < begin + count; ++i)
      out.push_back({samples[i].query_tokens, samples[i].item_tokens,
                     samples[i].rsl});
    return out;
  };
  const auto train_set = to_pairs(0, pt.pairs);
  const auto eval_set = to_pairs(pt.pairs, pt.eval_pairs);

  const text::EncoderConfig scfg = ec.encoder_config();
  text::EncoderConfig tcfg = scfg;
  tcfg.d_model = pt.teacher_d_model;
  tcfg.d_ff = 2 * pt.teacher_d_model;
  tcfg.validate();
  const text::TeacherOracle teacher{
      text::EncoderParams::init(tcfg, pt.teacher_seed, false)};

  text::EncoderParams student = text::EncoderParams::init(scfg, pt.cfg.seed);
  text::SftHead head =
      text::SftHead::init(scfg.d_model, mix64(pt.cfg.seed ^ 0x5F7ULL));
  RngStream wm_rng(pt.cfg.seed, "pretrain.width_map");
  Tensor width_map =
      Tensor::randn({tcfg.d_model, scfg.d_model}, wm_rng, 0.05, true);

  const text::PretrainLog log =
      text::pretrain(student, head, width_map, teacher, train_set, eval_set,
                     pt.cfg);
  ckpt::save(ec.paths.encoder_ckpt, student.named("encoder"));

  Json report;
  report["config_hash"] = detail::hex_u64(ec.config_hash);
  report["seed"] = pt.cfg.seed;
  report["pairs"] = {{"train", pt.pairs}, {"eval", pt.eval_pairs}};
  report["parameters"] = student.parameter_count();
  Json epochs = Json::array();
  for (const auto& st : log.eval)
    epochs.push_back({{"accuracy", st.accuracy},
                      {"sft_loss", st.sft_loss},
                      {"distill_loss", st.distill_loss}});
  report["eval"] = epochs;  // entry 0 is the untrained model
  return report;
}

// Grid sweep over the fake-relevance interval bounds. Invalid corners
// (p1 >= p2) are skipped; each valid cell is a full train+eval run.
inline std::string run_sweep(const ExperimentConfig& base) {
  std::string csv = "p1,p2,auc_exposed,auc_full,pcoc_exposed\n";
  for (const double p1 : base.sweep_p1) {
    for (const double p2 : base.sweep_p2) {
      if (!(p1 > 0.0 && p1 < p2 && p2 < 1.0)) continue;
      ExperimentConfig ec = base;
      ec.debias.enabled = true;
      ec.debias.p1 = p1;
      ec.debias.p2 = p2;
      ec.paths.report.clear();
      ec.paths.model_ckpt.clear();
      const Json r = run_experiment(ec);
      csv += Json(p1).dump() + "," + Json(p2).dump() + "," +
             r["metrics"]["exposed"]["auc"].dump() + "," +
             r["metrics"]["full"]["auc"].dump() + "," +
             r["metrics"]["exposed"]["pcoc"].dump() + "\n";
    }
  }
  if (!base.paths.sweep.empty()) write_text_file(base.paths.sweep, csv);
  return csv;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InputError("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Component toggles, each evaluated against both the everything-on and the
// everything-off reference across the configured seeds.
inline Json run_ablate(const ExperimentConfig& base) {
  struct Variant {
    const char* name;
    bool mining, debias, pretrained;
  };
  const Variant variants[] = {
      {"all_on", true, true, true},
      {"no_mining", false, true, true},
      {"no_debias", true, false, true},
      {"no_pretrained_encoder", true, true, false},
      {"all_off", false, false, false},
  };

  const char* kMetricKeys[] = {"auc", "gauc", "auc_full", "gauc_full"};
  std::map<std::string, std::map<std::string, std::vector<double>>> values;

  Json per_seed = Json::object();
  for (const auto& v : variants) {
    Json rows = Json::array();
    for (const std::uint64_t seed : base.ablate_seeds) {
      ExperimentConfig ec = base;
      ec.mining.enabled = v.mining;
      ec.debias.enabled = v.debias;
      ec.fit.use_pretrained_encoder = v.pretrained;
      ec.fit.seed = seed;
      ec.paths.report.clear();
      ec.paths.model_ckpt.clear();
      const Json r = run_experiment(ec);
      const double auc = r["metrics"]["exposed"]["auc"];
      const double gauc = r["metrics"]["exposed"]["gauc"];
      const double auc_full = r["metrics"]["full"]["auc"];
      const double gauc_full = r["metrics"]["full"]["gauc"];
      rows.push_back({{"seed", seed},
                      {"auc", auc},
                      {"gauc", gauc},
                      {"auc_full", auc_full},
                      {"gauc_full", gauc_full}});
      values[v.name]["auc"].push_back(auc);
      values[v.name]["gauc"].push_back(gauc);
      values[v.name]["auc_full"].push_back(auc_full);
      values[v.name]["gauc_full"].push_back(gauc_full);
    }
    per_seed[v.name] = rows;
  }

  Json medians = Json::object();
  for (const auto& v : variants)
    for (const char* k : kMetricKeys)
      medians[v.name][k] = median(values[v.name][k]);

  Json deltas_on = Json::object();
  Json deltas_off = Json::object();
  for (const auto& v : variants) {
    for (const char* k : kMetricKeys) {
      deltas_on[v.name][k] =
          double(medians[v.name][k]) - double(medians["all_on"][k]);
      deltas_off[v.name][k] =
          double(medians[v.name][k]) - double(medians["all_off"][k]);
    }
  }

  Json report;
  report["config_hash"] = detail::hex_u64(base.config_hash);
  report["seeds"] = base.ablate_seeds;
  report["per_seed"] = per_seed;
  report["median"] = medians;
  report["delta_vs_all_on"] = deltas_on;
  report["delta_vs_all_off"] = deltas_off;
  if (!base.paths.ablate.empty())
    write_text_file(base.paths.ablate, report.dump(2) + "\n");
  return report;
}

}  // namespace relctr::train
