#include <cmath>

#include "mtner/model.h"

namespace mtner {

namespace {

constexpr double kMasked = -1e9;

}  // namespace

AttentionResult multi_head_attention(const Tensor& queries,
                                     const std::vector<SlotBlock>& blocks, int n_heads) {
  if (blocks.empty()) throw DimensionError("attention: no key/value blocks");
  const std::size_t m = queries.dim(0);
  const std::size_t d = queries.dim(1);
  if (n_heads < 1 || d % n_heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  std::vector<Tensor> keys, values;
  std::size_t total = 0;
  bool needs_mask = false;
  for (const auto& b : blocks) {
    if (b.keys.rank() != 2 || b.values.rank() != 2 || b.keys.dim(0) != b.values.dim(0)) {
      throw DimensionError("attention: key block " + shape_to_string(b.keys.shape()) +
                           " and value block " + shape_to_string(b.values.shape()) +
                           " disagree on slot count");
    }
    if (b.keys.dim(1) != d || b.values.dim(1) != d) {
      throw DimensionError("attention: block width does not match queries " +
                           shape_to_string(queries.shape()));
    }
    if (b.causal && b.keys.dim(0) != m) {
      throw DimensionError("attention: causal block needs one key per query");
    }
    needs_mask = needs_mask || b.causal || b.score_offset != 0.0;
    keys.push_back(b.keys);
    values.push_back(b.values);
    total += b.keys.dim(0);
  }

  Tensor mask;
  if (needs_mask) {
    std::vector<double> mv(m * total, 0.0);
    std::size_t col = 0;
    for (const auto& b : blocks) {
      const std::size_t s = b.keys.dim(0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
          double v = b.score_offset;
          if (b.causal && j > i) v += kMasked;
          mv[i * total + col + j] = v;
        }
      }
      col += s;
    }
    mask = Tensor::from({m, total}, std::move(mv));
  }

  Tensor all_keys = keys.size() == 1 ? keys.front() : concat(keys, 0);
  Tensor all_values = values.size() == 1 ? values.front() : concat(values, 0);
  const std::size_t dk = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  AttentionResult result;
  std::vector<Tensor> outputs;
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = n_heads == 1 ? queries : slice_cols(queries, h * dk, dk);
    Tensor kh = n_heads == 1 ? all_keys : slice_cols(all_keys, h * dk, dk);
    Tensor vh = n_heads == 1 ? all_values : slice_cols(all_values, h * dk, dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (mask.defined()) scores = add(scores, mask);
    Tensor weights = softmax(scores, 1);
    outputs.push_back(matmul(weights, vh));
    result.weights.push_back(weights);
  }
  result.output = outputs.size() == 1 ? outputs.front() : concat(outputs, 1);
  return result;
}

AttentionResult type_augmented_self_attention(const Tensor& q, const Tensor& k,
                                              const Tensor& v, const Tensor& type_k,
                                              const Tensor& type_v, int n_heads,
                                              double type_offset, bool causal) {
  std::vector<SlotBlock> blocks;
  if (type_k.defined() || type_v.defined()) {
    blocks.push_back({type_k, type_v, type_offset, false});
  }
  blocks.push_back({k, v, 0.0, causal});
  return multi_head_attention(q, blocks, n_heads);
}

AttentionResult relation_type_cross_attention(const Tensor& q, const Tensor& rel_k,
                                              const Tensor& rel_v, const Tensor& type_k,
                                              const Tensor& type_v, const Tensor& k,
                                              const Tensor& v, int n_heads,
                                              double auxiliary_offset) {
  std::vector<SlotBlock> blocks;
  if (rel_k.defined() || rel_v.defined()) {
    blocks.push_back({rel_k, rel_v, auxiliary_offset, false});
  }
  if (type_k.defined() || type_v.defined()) {
    blocks.push_back({type_k, type_v, auxiliary_offset, false});
  }
  blocks.push_back({k, v, 0.0, false});
  return multi_head_attention(q, blocks, n_heads);
}

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  std::vector<double> pe(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({length, dim}, std::move(pe));
}

}  // namespace mtner
