#pragma once

#include <algorithm>
#include <cstddef>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "relctr/ops.hpp"
#include "relctr/rng.hpp"
#include "relctr/tensor.hpp"

// Compact transformer text encoder with two-stage pretraining: a relevance
// classification head trained with cross-entropy, plus embedding
// distillation toward a frozen wider teacher through a jointly trained
// width-reconciliation map. Sentence embeddings are read at the [CLS]
// position.

namespace relctr::text {

struct EncoderConfig {
  std::size_t vocab = 512;      // world token ids live in [0, vocab)
  std::size_t d_model = 32;
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t max_seq_len = 32;

  std::size_t cls_id() const { return vocab; }
  std::size_t sep_id() const { return vocab + 1; }
  std::size_t table_rows() const { return vocab + 2; }
  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab == 0) throw ConfigError("encoder: vocab must be >= 1");
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0)
      throw ConfigError("encoder: dimensions must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("encoder: d_model must be divisible by n_heads");
    if (max_seq_len < 4)
      throw ConfigError("encoder: max_seq_len must allow [CLS] t [SEP] t [SEP]");
  }

  // Production-sized preset: three layers, ~2M parameters.
  static EncoderConfig paper_scale() {
    EncoderConfig c;
    c.vocab = 12000;
    c.d_model = 128;
    c.n_layers = 3;
    c.n_heads = 4;
    c.d_ff = 512;
    c.max_seq_len = 64;
    return c;
  }
};

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;
};

struct EncoderParams {
  EncoderConfig config;
  Tensor tok_emb;  // [vocab+2 x d]
  Tensor pos_emb;  // [max_seq_len x d]
  std::vector<LayerParams> layers;
  Tensor final_gain, final_bias;

  static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed,
                            bool trainable = true) {
    cfg.validate();
    RngStream rng(seed, "encoder.init");
    const double s = 0.02;
    EncoderParams p;
    p.config = cfg;
    p.tok_emb = Tensor::randn({cfg.table_rows(), cfg.d_model}, rng, s, trainable);
    p.pos_emb = Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, s, trainable);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerParams lp;
      lp.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, trainable);
      lp.bq = Tensor::zeros({1, cfg.d_model}, trainable);
      lp.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, trainable);
      lp.bk = Tensor::zeros({1, cfg.d_model}, trainable);
      lp.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, trainable);
      lp.bv = Tensor::zeros({1, cfg.d_model}, trainable);
      lp.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, trainable);
      lp.bo = Tensor::zeros({1, cfg.d_model}, trainable);
      lp.ln1_gain = Tensor::full({1, cfg.d_model}, 1.0, trainable);
      lp.ln1_bias = Tensor::zeros({1, cfg.d_model}, trainable);
      lp.w1 = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, s, trainable);
      lp.b1 = Tensor::zeros({1, cfg.d_ff}, trainable);
      lp.w2 = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, s, trainable);
      lp.b2 = Tensor::zeros({1, cfg.d_model}, trainable);
      lp.ln2_gain = Tensor::full({1, cfg.d_model}, 1.0, trainable);
      lp.ln2_bias = Tensor::zeros({1, cfg.d_model}, trainable);
      p.layers.push_back(std::move(lp));
    }
    p.final_gain = Tensor::full({1, cfg.d_model}, 1.0, trainable);
    p.final_bias = Tensor::zeros({1, cfg.d_model}, trainable);
    return p;
  }

  std::vector<Tensor> all() const {
    std::vector<Tensor> out{tok_emb, pos_emb};
    for (const auto& l : layers) {
      out.insert(out.end(), {l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                             l.ln1_gain, l.ln1_bias, l.w1, l.b1, l.w2, l.b2,
                             l.ln2_gain, l.ln2_bias});
    }
    out.push_back(final_gain);
    out.push_back(final_bias);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named(
      const std::string& prefix = "encoder") const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(prefix + ".tok_emb", tok_emb);
    out.emplace_back(prefix + ".pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = prefix + ".layer" + std::to_string(l);
      const auto& lp = layers[l];
      out.emplace_back(base + ".wq", lp.wq);
      out.emplace_back(base + ".bq", lp.bq);
      out.emplace_back(base + ".wk", lp.wk);
      out.emplace_back(base + ".bk", lp.bk);
      out.emplace_back(base + ".wv", lp.wv);
      out.emplace_back(base + ".bv", lp.bv);
      out.emplace_back(base + ".wo", lp.wo);
      out.emplace_back(base + ".bo", lp.bo);
      out.emplace_back(base + ".ln1_gain", lp.ln1_gain);
      out.emplace_back(base + ".ln1_bias", lp.ln1_bias);
      out.emplace_back(base + ".w1", lp.w1);
      out.emplace_back(base + ".b1", lp.b1);
      out.emplace_back(base + ".w2", lp.w2);
      out.emplace_back(base + ".b2", lp.b2);
      out.emplace_back(base + ".ln2_gain", lp.ln2_gain);
      out.emplace_back(base + ".ln2_bias", lp.ln2_bias);
    }
    out.emplace_back(prefix + ".final_gain", final_gain);
    out.emplace_back(prefix + ".final_bias", final_bias);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : all()) n += t.size();
    return n;
  }
};

// Input formatted as [CLS] query [SEP] item [SEP].
struct PairInput {
  std::vector<int> ids;
  bool truncated = false;

  void validate(const EncoderConfig& cfg) const {
    if (ids.empty() || ids[0] != static_cast<int>(cfg.cls_id()))
      throw InputError("pair input: missing [CLS] at position 0");
    std::size_t cls = 0, sep = 0;
    for (int t : ids) {
      if (t == static_cast<int>(cfg.cls_id())) ++cls;
      if (t == static_cast<int>(cfg.sep_id())) ++sep;
    }
    if (cls != 1 || sep != 2 || ids.back() != static_cast<int>(cfg.sep_id()))
      throw InputError("pair input: expected exactly one [CLS] and two [SEP]");
  }
};

namespace detail {

inline void check_tokens(const EncoderConfig& cfg, const std::vector<int>& t) {
  if (t.empty()) throw InputError("encoder: empty token list");
  for (int id : t)
    if (id < 0 || id >= static_cast<int>(cfg.vocab))
      throw InputError("encoder: token id out of vocabulary range");
}

}  // namespace detail

// Builds the pair sequence, trimming the item side first when over budget
// (queries are short and intent-bearing), then the query if it alone
// overflows.
inline PairInput format_pair(const EncoderConfig& cfg,
                             const std::vector<int>& query,
                             const std::vector<int>& item) {
  detail::check_tokens(cfg, query);
  detail::check_tokens(cfg, item);
  const std::size_t budget = cfg.max_seq_len - 3;  // [CLS] + two [SEP]
  std::vector<int> q = query, it = item;
  PairInput out;
  if (q.size() + it.size() > budget) {
    out.truncated = true;
    const std::size_t item_keep =
        q.size() < budget ? std::min(it.size(), budget - q.size()) : 1;
    it.resize(std::max<std::size_t>(item_keep, 1));
    if (q.size() + it.size() > budget) q.resize(budget - it.size());
  }
  out.ids.reserve(q.size() + it.size() + 3);
  out.ids.push_back(static_cast<int>(cfg.cls_id()));
  out.ids.insert(out.ids.end(), q.begin(), q.end());
  out.ids.push_back(static_cast<int>(cfg.sep_id()));
  out.ids.insert(out.ids.end(), it.begin(), it.end());
  out.ids.push_back(static_cast<int>(cfg.sep_id()));
  return out;
}

namespace detail {

inline Tensor transformer_block(const LayerParams& lp, const Tensor& x,
                                const EncoderConfig& cfg) {
  const std::size_t h = cfg.n_heads, dh = cfg.head_dim();
  const Tensor xn = layer_norm_rows(x, lp.ln1_gain, lp.ln1_bias);
  const Tensor q = add(matmul(xn, lp.wq), lp.bq);
  const Tensor k = add(matmul(xn, lp.wk), lp.bk);
  const Tensor v = add(matmul(xn, lp.wv), lp.bv);
  std::vector<Tensor> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    const Tensor qi = slice_cols(q, i * dh, (i + 1) * dh);
    const Tensor ki = slice_cols(k, i * dh, (i + 1) * dh);
    const Tensor vi = slice_cols(v, i * dh, (i + 1) * dh);
    const Tensor scores =
        scale(matmul_nt(qi, ki), 1.0 / std::sqrt(static_cast<double>(dh)));
    heads.push_back(matmul(softmax_rows(scores), vi));
  }
  const Tensor attn = add(matmul(concat_cols(heads), lp.wo), lp.bo);
  const Tensor mid = add(x, attn);
  const Tensor mn = layer_norm_rows(mid, lp.ln2_gain, lp.ln2_bias);
  const Tensor ff =
      add(matmul(gelu(add(matmul(mn, lp.w1), lp.b1)), lp.w2), lp.b2);
  return add(mid, ff);
}

inline Tensor encode_ids(const EncoderParams& p, const std::vector<int>& ids) {
  if (ids.size() > p.config.max_seq_len)
    throw InputError("encoder: formatted sequence exceeds max_seq_len");
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  Tensor x = add(gather_rows(p.tok_emb, rows),
                 slice_rows(p.pos_emb, 0, ids.size()));
  for (const auto& lp : p.layers) x = transformer_block(lp, x, p.config);
  x = layer_norm_rows(x, p.final_gain, p.final_bias);
  return slice_rows(x, 0, 1);  // [CLS] position
}

}  // namespace detail

// Sentence embedding of one text: [CLS] tokens..., pooled at [CLS].
// Overlong inputs are truncated from the tail with a warning.
inline Tensor encode_text(const EncoderParams& p, const std::vector<int>& tokens,
                          std::ostream* warn = &std::cerr) {
  detail::check_tokens(p.config, tokens);
  std::vector<int> t = tokens;
  if (t.size() + 1 > p.config.max_seq_len) {
    if (warn)
      *warn << "warning: input of " << t.size() << " tokens truncated to "
            << (p.config.max_seq_len - 1) << "\n";
    t.resize(p.config.max_seq_len - 1);
  }
  std::vector<int> ids;
  ids.reserve(t.size() + 1);
  ids.push_back(static_cast<int>(p.config.cls_id()));
  ids.insert(ids.end(), t.begin(), t.end());
  return detail::encode_ids(p, ids);
}

inline Tensor encode_pair_input(const EncoderParams& p, const PairInput& pair) {
  pair.validate(p.config);
  return detail::encode_ids(p, pair.ids);
}

inline Tensor encode_pair(const EncoderParams& p, const std::vector<int>& query,
                          const std::vector<int>& item,
                          std::ostream* warn = &std::cerr) {
  const PairInput pair = format_pair(p.config, query, item);
  if (pair.truncated && warn)
    *warn << "warning: pair input truncated to fit max_seq_len="
          << p.config.max_seq_len << "\n";
  return detail::encode_ids(p, pair.ids);
}

// ---------------------------------------------------------------------------
// Pretraining: relevance SFT + teacher distillation.

struct SftHead {
  Tensor proj;  // [d x 4]
  Tensor bias;  // [1 x 4]

  static SftHead init(std::size_t d_model, std::uint64_t seed,
                      bool trainable = true) {
    RngStream rng(seed, "sft.head");
    SftHead h;
    h.proj = Tensor::randn({d_model, 4}, rng, 0.02, trainable);
    h.bias = Tensor::zeros({1, 4}, trainable);
    return h;
  }

  std::vector<Tensor> all() const { return {proj, bias}; }
  std::vector<std::pair<std::string, Tensor>> named(
      const std::string& prefix = "sft_head") const {
    return {{prefix + ".proj", proj}, {prefix + ".bias", bias}};
  }
};

struct LabeledPair {
  std::vector<int> query_tokens;
  std::vector<int> item_tokens;
  int rsl = 1;
};

// Frozen reference encoder; its parameters are never touched by training.
struct TeacherOracle {
  EncoderParams params;

  Tensor encode(const std::vector<int>& query,
                const std::vector<int>& item) const {
    return encode_pair(params, query, item, nullptr);
  }
};

inline Tensor batch_pair_embeddings(const EncoderParams& p,
                                    const std::vector<LabeledPair>& batch) {
  if (batch.empty()) throw InputError("encoder: empty batch");
  std::vector<Tensor> rows;
  rows.reserve(batch.size());
  for (const auto& ex : batch)
    rows.push_back(encode_pair(p, ex.query_tokens, ex.item_tokens, nullptr));
  return concat_rows(rows);
}

inline Tensor sft_logits(const Tensor& embeddings, const SftHead& head) {
  return add(matmul(embeddings, head.proj), head.bias);
}

// Mean cross-entropy of relevance classification over the batch.
inline Tensor sft_loss(const EncoderParams& p, const SftHead& head,
                       const std::vector<LabeledPair>& batch) {
  std::vector<std::size_t> cls;
  cls.reserve(batch.size());
  for (const auto& ex : batch) {
    if (ex.rsl < 1 || ex.rsl > 4)
      throw InputError("sft: relevance label must lie in {1,2,3,4}");
    cls.push_back(static_cast<std::size_t>(ex.rsl - 1));
  }
  const Tensor logits = sft_logits(batch_pair_embeddings(p, batch), head);
  return nll_rows(log_softmax_rows(logits), cls);
}

// Mean squared distance between student embeddings and width-mapped teacher
// embeddings. The teacher is constant; the map trains with the student.
inline Tensor distill_loss(const EncoderParams& student,
                           const TeacherOracle& teacher,
                           const Tensor& width_map,
                           const std::vector<LabeledPair>& batch) {
  const Tensor s = batch_pair_embeddings(student, batch);
  std::vector<Tensor> trows;
  trows.reserve(batch.size());
  for (const auto& ex : batch)
    trows.push_back(teacher.encode(ex.query_tokens, ex.item_tokens));
  const Tensor mapped = matmul(concat_rows(trows), width_map);
  return mse(s, mapped);
}

// Unweighted sum of the two pretraining components.
inline Tensor overall_loss(const Tensor& distill, const Tensor& sft) {
  return add(distill, sft);
}

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double sft_weight = 1.0;
  double distill_weight = 1.0;
  std::uint64_t seed = 1;
};

struct EpochStats {
  double sft_loss = 0.0;
  double distill_loss = 0.0;
  double accuracy = 0.0;
};

struct PretrainLog {
  // eval[0] is the untrained model; eval[e+1] follows epoch e.
  std::vector<EpochStats> eval;
};

inline EpochStats evaluate_pretrain(const EncoderParams& student,
                                    const SftHead& head,
                                    const TeacherOracle& teacher,
                                    const Tensor& width_map,
                                    const std::vector<LabeledPair>& eval_set) {
  EpochStats st;
  if (eval_set.empty()) return st;
  const Tensor emb = batch_pair_embeddings(student, eval_set);
  std::vector<std::size_t> cls;
  for (const auto& ex : eval_set)
    cls.push_back(static_cast<std::size_t>(ex.rsl - 1));
  const Tensor logits = sft_logits(emb, head);
  st.sft_loss = nll_rows(log_softmax_rows(logits), cls).item();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 4; ++j)
      if (logits(i, j) > logits(i, best)) best = j;
    if (best == cls[i]) ++hits;
  }
  st.accuracy = static_cast<double>(hits) / static_cast<double>(eval_set.size());
  std::vector<Tensor> trows;
  for (const auto& ex : eval_set)
    trows.push_back(teacher.encode(ex.query_tokens, ex.item_tokens));
  st.distill_loss = mse(emb, matmul(concat_rows(trows), width_map)).item();
  return st;
}

inline void sgd_step(const std::vector<Tensor>& params, double lr) {
  for (Tensor p : params) {
    if (!p.requires_grad()) continue;
    auto& v = p.mutable_values();
    const auto& g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

inline void zero_grads(const std::vector<Tensor>& params) {
  for (Tensor p : params) p.zero_grad();
}

// Joint SFT + distillation training of the student (and the width map).
// Throws DivergenceError on a non-finite loss.
inline PretrainLog pretrain(EncoderParams& student, SftHead& head,
                            Tensor& width_map, const TeacherOracle& teacher,
                            std::vector<LabeledPair> train,
                            const std::vector<LabeledPair>& eval_set,
                            const PretrainConfig& cfg) {
  if (train.empty()) throw InputError("pretrain: empty training set");
  if (cfg.batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
  if (cfg.learning_rate < 0.0)
    throw ConfigError("pretrain: learning_rate must be >= 0");
  std::vector<Tensor> params = student.all();
  for (const auto& t : head.all()) params.push_back(t);
  params.push_back(width_map);

  PretrainLog log;
  log.eval.push_back(
      evaluate_pretrain(student, head, teacher, width_map, eval_set));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream shuffle_rng(cfg.seed, "pretrain.shuffle", epoch);
    for (std::size_t i = train.size(); i > 1; --i)
      std::swap(train[i - 1], train[shuffle_rng.uniform_index(i)]);
    for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, train.size());
      const std::vector<LabeledPair> batch(train.begin() + start,
                                           train.begin() + end);
      const Tensor emb = batch_pair_embeddings(student, batch);
      std::vector<std::size_t> cls;
      for (const auto& ex : batch) {
        if (ex.rsl < 1 || ex.rsl > 4)
          throw InputError("pretrain: relevance label must lie in {1,2,3,4}");
        cls.push_back(static_cast<std::size_t>(ex.rsl - 1));
      }
      const Tensor sft =
          nll_rows(log_softmax_rows(sft_logits(emb, head)), cls);
      std::vector<Tensor> trows;
      for (const auto& ex : batch)
        trows.push_back(teacher.encode(ex.query_tokens, ex.item_tokens));
      const Tensor dist = mse(emb, matmul(concat_rows(trows), width_map));
      const Tensor loss = add(scale(dist, cfg.distill_weight),
                              scale(sft, cfg.sft_weight));
      assert_finite(loss, "pretrain loss");
      zero_grads(params);
      backward(loss);
      sgd_step(params, cfg.learning_rate);
    }
    log.eval.push_back(
        evaluate_pretrain(student, head, teacher, width_map, eval_set));
  }
  return log;
}

}  // namespace relctr::text
