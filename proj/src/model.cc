#include "mtner/model.h"

#include <algorithm>
#include <cmath>

#include "mtner/relation_grid.h"

namespace mtner {

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError(why); };
  if (d_h < 1 || n_heads < 1) fail("d_h and n_heads must be positive");
  if (d_h % n_heads != 0) {
    fail("d_h=" + std::to_string(d_h) + " is not divisible by n_heads=" +
         std::to_string(n_heads));
  }
  if (n_layers_enc < 1 || n_layers_dec < 1) fail("need at least one encoder and decoder layer");
  if (d_ff < 1 || d_rel < 1 || d_down < 1 || d_up < 1) fail("layer widths must be positive");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) fail("conv_kernel must be odd");
  if (n_types < 1) fail("n_types must be positive");
  if (vocab_size < 3) fail("vocab_size must cover the reserved ids and at least one token");
  if (!(eps_ln > 0.0)) fail("eps_ln must be positive");
  if (use_tra && !use_rp) {
    fail("use_tra requires use_rp: the relation prediction task is a necessary "
         "component for token relation attention");
  }
}

Seq2SeqNer::Seq2SeqNer(const ModelConfig& config, RowMixture type_mixture,
                       std::uint64_t init_seed)
    : config_(config), mixture_(std::move(type_mixture)), params_(init_seed) {
  config_.validate();
  if (static_cast<int>(mixture_.size()) != config_.n_types) {
    throw ConfigError("type mixture has " + std::to_string(mixture_.size()) +
                      " rows, config expects " + std::to_string(config_.n_types));
  }
  for (const auto& row : mixture_) {
    for (const auto& [id, w] : row) {
      if (id < 0 || id >= config_.vocab_size) throw ConfigError("type mixture id out of range");
    }
  }
  const auto d = static_cast<std::size_t>(config_.d_h);
  embed_ = params_.create("embed.tokens", {static_cast<std::size_t>(config_.vocab_size), d},
                          Init::normal(1.0));
  for (int l = 0; l < config_.n_layers_enc; ++l) {
    const std::string p = "enc" + std::to_string(l);
    enc_layers_.push_back({make_attention(p + ".attn"), make_norm(p + ".ln1"),
                           make_norm(p + ".ln2"), make_ff(p + ".ff")});
  }
  for (int l = 0; l < config_.n_layers_dec; ++l) {
    const std::string p = "dec" + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = make_attention(p + ".self");
    layer.cross_attn = make_attention(p + ".cross");
    layer.ln1 = make_norm(p + ".ln1");
    layer.ln2 = make_norm(p + ".ln2");
    layer.ln3 = make_norm(p + ".ln3");
    layer.ff = make_ff(p + ".ff");
    if (config_.use_tra) {
      const auto r = static_cast<std::size_t>(config_.d_rel);
      layer.rel_k_w = params_.create(p + ".relk.w", {r, d}, Init::xavier());
      layer.rel_k_b = params_.create(p + ".relk.b", {d}, Init::zeros());
      layer.rel_v_w = params_.create(p + ".relv.w", {r, d}, Init::xavier());
      layer.rel_v_b = params_.create(p + ".relv.b", {d}, Init::zeros());
    }
    dec_layers_.push_back(std::move(layer));
  }
  start_ = params_.create("pointer.start", {1, d}, Init::normal(1.0));
  eos_ = params_.create("pointer.eos", {1, d}, Init::normal(1.0));

  if (config_.use_rp) {
    const auto r = static_cast<std::size_t>(config_.d_rel);
    cln_alpha_w_ = params_.create("cln.alpha.w", {d, d}, Init::xavier());
    cln_alpha_b_ = params_.create("cln.alpha.b", {d}, Init::constant(1.0));
    cln_beta_w_ = params_.create("cln.beta.w", {d, d}, Init::xavier());
    cln_beta_b_ = params_.create("cln.beta.b", {d}, Init::zeros());
    rel_reduce_w_ = params_.create("rel.reduce.w", {d, r}, Init::xavier());
    rel_reduce_b_ = params_.create("rel.reduce.b", {r}, Init::zeros());
    rel_mlp1_w_ = params_.create("rel.mlp1.w", {r, r}, Init::xavier());
    rel_mlp1_b_ = params_.create("rel.mlp1.b", {r}, Init::zeros());
    rel_mlp2_w_ = params_.create("rel.mlp2.w", {r, static_cast<std::size_t>(kRelationClasses)},
                                 Init::xavier());
    rel_mlp2_b_ = params_.create("rel.mlp2.b", {static_cast<std::size_t>(kRelationClasses)},
                                 Init::zeros());
  }
  if (config_.use_tra) {
    const auto r = static_cast<std::size_t>(config_.d_rel);
    const auto k = static_cast<std::size_t>(config_.conv_kernel);
    conv_kernel_ = params_.create("rel.conv.k", {k, k, r, r}, Init::xavier());
    conv_bias_ = params_.create("rel.conv.b", {r}, Init::zeros());
  }
  if (config_.use_eta) {
    const int sites = config_.n_layers_enc + 2 * config_.n_layers_dec;
    type_projector_ = TypeProjector(params_, config_.d_h, config_.d_down, config_.d_up,
                                    config_.n_heads, sites, config_.type_activation);
  }
}

Seq2SeqNer::AttentionParams Seq2SeqNer::make_attention(const std::string& p) {
  const auto d = static_cast<std::size_t>(config_.d_h);
  AttentionParams a;
  a.wq = params_.create(p + ".q.w", {d, d}, Init::xavier());
  a.bq = params_.create(p + ".q.b", {d}, Init::zeros());
  a.wk = params_.create(p + ".k.w", {d, d}, Init::xavier());
  a.bk = params_.create(p + ".k.b", {d}, Init::zeros());
  a.wv = params_.create(p + ".v.w", {d, d}, Init::xavier());
  a.bv = params_.create(p + ".v.b", {d}, Init::zeros());
  a.wo = params_.create(p + ".o.w", {d, d}, Init::xavier());
  a.bo = params_.create(p + ".o.b", {d}, Init::zeros());
  return a;
}

Seq2SeqNer::NormParams Seq2SeqNer::make_norm(const std::string& p) {
  const auto d = static_cast<std::size_t>(config_.d_h);
  return {params_.create(p + ".gain", {d}, Init::constant(1.0)),
          params_.create(p + ".bias", {d}, Init::zeros())};
}

Seq2SeqNer::FeedForward Seq2SeqNer::make_ff(const std::string& p) {
  const auto d = static_cast<std::size_t>(config_.d_h);
  const auto f = static_cast<std::size_t>(config_.d_ff);
  return {params_.create(p + ".w1", {d, f}, Init::xavier()),
          params_.create(p + ".b1", {f}, Init::zeros()),
          params_.create(p + ".w2", {f, d}, Init::xavier()),
          params_.create(p + ".b2", {d}, Init::zeros())};
}

Tensor Seq2SeqNer::layer_norm(const Tensor& x, const NormParams& p) const {
  return add(mul(normalize_rows(x, config_.eps_ln), p.gain), p.bias);
}

Tensor Seq2SeqNer::feed_forward(const Tensor& x, const FeedForward& p) const {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

void Seq2SeqNer::check_ids(std::span<const int> ids) const {
  if (ids.empty()) throw std::invalid_argument("encode: empty input sequence");
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config_.vocab_size));
    }
  }
}

// ---------------------------------------------------------------------------
// Relation branch

Tensor Seq2SeqNer::cln(const Tensor& h_i, const Tensor& h_j) const {
  if (!config_.use_rp) throw ConfigError("cln requires use_rp");
  const std::size_t d = config_.d_h;
  Tensor hi = reshape(h_i, {1, d});
  Tensor hj = reshape(h_j, {1, d});
  Tensor gamma = linear(hi, cln_alpha_w_, cln_alpha_b_);
  Tensor shift = linear(hi, cln_beta_w_, cln_beta_b_);
  return reshape(add(mul(gamma, normalize_rows(hj, config_.eps_ln)), shift), {d});
}

Tensor Seq2SeqNer::cln_grid(const Tensor& hidden) const {
  if (!config_.use_rp) throw ConfigError("cln_grid requires use_rp");
  Tensor gamma = linear(hidden, cln_alpha_w_, cln_alpha_b_);
  Tensor shift = linear(hidden, cln_beta_w_, cln_beta_b_);
  return conditional_grid(gamma, shift, normalize_rows(hidden, config_.eps_ln));
}

Tensor Seq2SeqNer::relation_head(const Tensor& relation) const {
  const std::size_t n = relation.dim(0);
  Tensor flat = reshape(relation, {n * n, static_cast<std::size_t>(config_.d_rel)});
  Tensor hidden = relu(linear(flat, rel_mlp1_w_, rel_mlp1_b_));
  Tensor logits = linear(hidden, rel_mlp2_w_, rel_mlp2_b_);
  return reshape(logits, {n, n, static_cast<std::size_t>(kRelationClasses)});
}

Tensor Seq2SeqNer::relation_logits(const EncoderOutput& enc) const {
  if (!config_.use_rp) throw ConfigError("relation_logits requires use_rp");
  return relation_head(enc.relation);
}

Tensor Seq2SeqNer::pooled_relation_features(const Tensor& relation) const {
  return max_over_first_axis(conv2d(relation, conv_kernel_, conv_bias_));
}

RelationAttentionBank Seq2SeqNer::relation_features(const EncoderOutput& enc) const {
  RelationAttentionBank bank;
  if (!config_.use_tra) return bank;
  Tensor pooled = pooled_relation_features(enc.relation);
  for (const auto& layer : dec_layers_) {
    bank.keys.push_back(linear(pooled, layer.rel_k_w, layer.rel_k_b));
    bank.values.push_back(linear(pooled, layer.rel_v_w, layer.rel_v_b));
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Encoder

Tensor Seq2SeqNer::type_embeddings() const {
  Tensor table = config_.freeze_type_embeddings ? embed_.detach() : embed_;
  return compute_type_embeddings(mixture_, table);
}

EncoderOutput Seq2SeqNer::encode(std::span<const int> token_ids) const {
  check_ids(token_ids);
  const std::size_t n = token_ids.size();
  const std::size_t d = config_.d_h;
  EncoderOutput out;
  out.type_embeddings = type_embeddings();
  if (config_.use_eta) out.type_bottleneck = type_projector_.bottleneck(out.type_embeddings);

  out.token_embeddings = gather_rows(embed_, token_ids);
  Tensor x = add(out.token_embeddings, sinusoidal_positions(n, d));
  for (int l = 0; l < config_.n_layers_enc; ++l) {
    const auto& layer = enc_layers_[l];
    Tensor q = linear(x, layer.attn.wq, layer.attn.bq);
    Tensor k = linear(x, layer.attn.wk, layer.attn.bk);
    Tensor v = linear(x, layer.attn.wv, layer.attn.bv);
    Tensor tk, tv;
    if (config_.use_eta) {
      TypeKeyValues kv = type_projector_.project(out.type_bottleneck, enc_site(l));
      tk = kv.keys;
      tv = kv.values;
    }
    Tensor attn = type_augmented_self_attention(q, k, v, tk, tv, config_.n_heads,
                                                config_.auxiliary_score_offset)
                      .output;
    x = layer_norm(add(x, linear(attn, layer.attn.wo, layer.attn.bo)), layer.ln1);
    x = layer_norm(add(x, feed_forward(x, layer.ff)), layer.ln2);
  }
  out.hidden = x;
  if (config_.use_rp) {
    Tensor grid = cln_grid(x);
    Tensor flat = reshape(grid, {n * n, d});
    Tensor reduced = linear(flat, rel_reduce_w_, rel_reduce_b_);
    out.relation = reshape(reduced, {n, n, static_cast<std::size_t>(config_.d_rel)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoder

Tensor Seq2SeqNer::decoder_states(const EncoderOutput& enc, const RelationAttentionBank& bank,
                                  std::span<const int> prefix) const {
  const int n = static_cast<int>(enc.hidden.dim(0));
  const int n_types = config_.n_types;
  const int eos = n + n_types;
  const std::size_t d = config_.d_h;
  // Row 0 start, rows 1..N source, then types, then EOS.
  Tensor source = config_.source_input_from_encoder ? enc.hidden : enc.token_embeddings;
  Tensor table = concat({start_, source, enc.type_embeddings, eos_}, 0);
  std::vector<int> rows;
  rows.reserve(prefix.size() + 1);
  rows.push_back(0);
  for (int p : prefix) {
    if (p < 0 || p > eos) {
      throw std::out_of_range("pointer index " + std::to_string(p) + " outside [0, " +
                              std::to_string(eos) + "]");
    }
    rows.push_back(p + 1);
  }
  const std::size_t length = rows.size();
  Tensor x = add(gather_rows(table, rows), sinusoidal_positions(length, d));

  for (int l = 0; l < config_.n_layers_dec; ++l) {
    const auto& layer = dec_layers_[l];
    Tensor self_tk, self_tv, cross_tk, cross_tv;
    if (config_.use_eta) {
      TypeKeyValues self_kv = type_projector_.project(enc.type_bottleneck, dec_self_site(l));
      TypeKeyValues cross_kv = type_projector_.project(enc.type_bottleneck, dec_cross_site(l));
      self_tk = self_kv.keys;
      self_tv = self_kv.values;
      cross_tk = cross_kv.keys;
      cross_tv = cross_kv.values;
    }
    const auto& sa = layer.self_attn;
    Tensor q = linear(x, sa.wq, sa.bq);
    Tensor k = linear(x, sa.wk, sa.bk);
    Tensor v = linear(x, sa.wv, sa.bv);
    Tensor self_out = type_augmented_self_attention(q, k, v, self_tk, self_tv, config_.n_heads,
                                                    config_.auxiliary_score_offset, true)
                          .output;
    x = layer_norm(add(x, linear(self_out, sa.wo, sa.bo)), layer.ln1);

    const auto& ca = layer.cross_attn;
    Tensor cq = linear(x, ca.wq, ca.bq);
    Tensor ck = linear(enc.hidden, ca.wk, ca.bk);
    Tensor cv = linear(enc.hidden, ca.wv, ca.bv);
    Tensor rk, rv;
    if (config_.use_tra) {
      rk = bank.keys.at(l);
      rv = bank.values.at(l);
    }
    Tensor cross_out =
        relation_type_cross_attention(cq, rk, rv, cross_tk, cross_tv, ck, cv, config_.n_heads,
                                      config_.auxiliary_score_offset)
            .output;
    x = layer_norm(add(x, linear(cross_out, ca.wo, ca.bo)), layer.ln2);
    x = layer_norm(add(x, feed_forward(x, layer.ff)), layer.ln3);
  }
  return x;
}

Tensor Seq2SeqNer::pointer_distribution(const EncoderOutput& enc, const Tensor& states) const {
  Tensor targets = concat({enc.hidden, enc.type_embeddings, eos_}, 0);
  return softmax(matmul(states, transpose(targets)), 1);
}

Tensor Seq2SeqNer::decode_step(const EncoderOutput& enc, const RelationAttentionBank& bank,
                               std::span<const int> prefix) const {
  Tensor states = decoder_states(enc, bank, prefix);
  Tensor last = slice_rows(states, states.dim(0) - 1, 1);
  Tensor probs = pointer_distribution(enc, last);
  return reshape(probs, {probs.size()});
}

ForwardResult Seq2SeqNer::forward_teacher_forced(std::span<const int> token_ids,
                                                 const PointerTarget& gold) const {
  if (gold.indices.empty()) throw std::invalid_argument("gold target is empty");
  ForwardResult result;
  result.encoder = encode(token_ids);
  RelationAttentionBank bank = relation_features(result.encoder);
  std::span<const int> prefix(gold.indices.data(), gold.indices.size() - 1);
  Tensor states = decoder_states(result.encoder, bank, prefix);
  result.step_probs = pointer_distribution(result.encoder, states);
  if (config_.use_rp) result.relation_logits = relation_logits(result.encoder);
  return result;
}

PointerTarget Seq2SeqNer::greedy_generate(std::span<const int> token_ids, int max_len) const {
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  NoGradGuard no_grad;
  EncoderOutput enc = encode(token_ids);
  RelationAttentionBank bank = relation_features(enc);
  const int eos = static_cast<int>(token_ids.size()) + config_.n_types;
  PointerTarget out;
  while (static_cast<int>(out.indices.size()) < max_len) {
    Tensor probs = decode_step(enc, bank, out.indices);
    auto p = probs.data();
    // max_element returns the first maximum: ties go to the lowest index.
    const int best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    out.indices.push_back(best);
    if (best == eos) break;
  }
  return out;
}

}  // namespace mtner
