#ifndef MTNER_MODEL_H_
#define MTNER_MODEL_H_

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtner/corpus.h"
#include "mtner/params.h"
#include "mtner/tensor.h"
#include "mtner/type_base.h"

namespace mtner {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int d_h = 32;
  int n_layers_enc = 1;
  int n_layers_dec = 1;
  int n_heads = 2;
  int d_ff = 64;
  int d_rel = 16;
  int conv_kernel = 3;
  int d_down = 16;
  int d_up = 32;
  int n_types = 4;
  int vocab_size = 0;
  double eps_ln = 1e-5;
  // Ablation switches: relation prediction, token relation attention,
  // entity type attention.
  bool use_rp = true;
  bool use_tra = true;
  bool use_eta = true;
  Activation type_activation = Activation::kTanh;
  PhraseWeighting phrase_weighting = PhraseWeighting::kFrequency;
  // Computes E_T from a detached copy of the embedding table.
  bool freeze_type_embeddings = false;
  // Decoder input for a source pointer: encoder row (true) or raw token
  // embedding (false).
  bool source_input_from_encoder = true;
  // Added to every attention score on type and relation slots. -1e9 switches
  // those slots off without removing their parameters.
  double auxiliary_score_offset = 0.0;

  // Throws ConfigError on inconsistent values.
  void validate() const;
};

// Scaled dot-product attention over the concatenation of key/value blocks.
struct SlotBlock {
  Tensor keys;    // S x d_h
  Tensor values;  // S x d_h
  double score_offset = 0.0;
  // Query i sees key j only when j <= i.
  bool causal = false;
};

struct AttentionResult {
  Tensor output;                 // M x d_h, heads concatenated
  std::vector<Tensor> weights;   // per head, M x total slots
};

AttentionResult multi_head_attention(const Tensor& queries,
                                     const std::vector<SlotBlock>& blocks, int n_heads);

// Keys/values [K_T; K]. Undefined type tensors mean no type slots.
AttentionResult type_augmented_self_attention(const Tensor& q, const Tensor& k,
                                              const Tensor& v, const Tensor& type_k,
                                              const Tensor& type_v, int n_heads,
                                              double type_offset = 0.0,
                                              bool causal = false);

// Keys/values [K_R; K_T; K]. Undefined bank tensors contribute no slots.
AttentionResult relation_type_cross_attention(const Tensor& q, const Tensor& rel_k,
                                              const Tensor& rel_v, const Tensor& type_k,
                                              const Tensor& type_v, const Tensor& k,
                                              const Tensor& v, int n_heads,
                                              double auxiliary_offset = 0.0);

Tensor sinusoidal_positions(std::size_t length, std::size_t dim);

struct EncoderOutput {
  Tensor hidden;            // H^e, N x d_h
  Tensor relation;          // r reduced to d_rel, N x N x d_rel; iff use_rp
  Tensor type_embeddings;   // E_T, |T| x d_h
  Tensor type_bottleneck;   // proj-down/up output; iff use_eta
  Tensor token_embeddings;  // raw embedding rows, N x d_h
};

// Per decoder layer K_R, V_R (N x d_h); empty unless use_tra.
struct RelationAttentionBank {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
};

struct ForwardResult {
  Tensor step_probs;        // |gold| x (N + |T| + 1)
  Tensor relation_logits;   // N x N x 3; iff use_rp
  EncoderOutput encoder;
};

class Seq2SeqNer {
 public:
  Seq2SeqNer(const ModelConfig& config, RowMixture type_mixture, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const RowMixture& type_mixture() const { return mixture_; }
  Tensor token_embedding_table() const { return embed_; }

  // Conditional layer norm of h_j conditioned on h_i (both 1 x d_h or d_h).
  Tensor cln(const Tensor& h_i, const Tensor& h_j) const;
  // CLN over all pairs, N x N x d_h.
  Tensor cln_grid(const Tensor& hidden) const;

  Tensor type_embeddings() const;
  EncoderOutput encode(std::span<const int> token_ids) const;
  Tensor relation_logits(const EncoderOutput& enc) const;
  // Relation MLP applied to an arbitrary N x N x d_rel grid.
  Tensor relation_head(const Tensor& relation) const;
  RelationAttentionBank relation_features(const EncoderOutput& enc) const;
  // Max-pooled convolution features, N x d_rel.
  Tensor pooled_relation_features(const Tensor& relation) const;

  // Decoder hidden states for inputs [start, prefix...]; (|prefix|+1) x d_h.
  Tensor decoder_states(const EncoderOutput& enc, const RelationAttentionBank& bank,
                        std::span<const int> prefix) const;
  // Pointer distributions for every decoder state; rows sum to one.
  Tensor pointer_distribution(const EncoderOutput& enc, const Tensor& states) const;
  // Distribution for the next index given the generated prefix.
  Tensor decode_step(const EncoderOutput& enc, const RelationAttentionBank& bank,
                     std::span<const int> prefix) const;

  ForwardResult forward_teacher_forced(std::span<const int> token_ids,
                                       const PointerTarget& gold) const;
  PointerTarget greedy_generate(std::span<const int> token_ids, int max_len) const;

 private:
  struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct NormParams {
    Tensor gain, bias;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    AttentionParams attn;
    NormParams ln1, ln2;
    FeedForward ff;
  };
  struct DecoderLayer {
    AttentionParams self_attn, cross_attn;
    NormParams ln1, ln2, ln3;
    FeedForward ff;
    Tensor rel_k_w, rel_k_b, rel_v_w, rel_v_b;
  };

  AttentionParams make_attention(const std::string& prefix);
  NormParams make_norm(const std::string& prefix);
  FeedForward make_ff(const std::string& prefix);
  Tensor layer_norm(const Tensor& x, const NormParams& p) const;
  Tensor feed_forward(const Tensor& x, const FeedForward& p) const;
  int enc_site(int layer) const { return layer; }
  int dec_self_site(int layer) const { return config_.n_layers_enc + layer; }
  int dec_cross_site(int layer) const {
    return config_.n_layers_enc + config_.n_layers_dec + layer;
  }
  void check_ids(std::span<const int> ids) const;

  ModelConfig config_;
  RowMixture mixture_;
  ParameterStore params_;

  Tensor embed_;
  std::vector<EncoderLayer> enc_layers_;
  std::vector<DecoderLayer> dec_layers_;
  Tensor start_, eos_;
  Tensor cln_alpha_w_, cln_alpha_b_, cln_beta_w_, cln_beta_b_;
  Tensor rel_reduce_w_, rel_reduce_b_;
  Tensor rel_mlp1_w_, rel_mlp1_b_, rel_mlp2_w_, rel_mlp2_b_;
  Tensor conv_kernel_, conv_bias_;
  TypeProjector type_projector_;
};

}  // namespace mtner

#endif  // MTNER_MODEL_H_
