#pragma once

#include <random>
#include <string>

#include "cbias/ops.hpp"
#include "cbias/param_store.hpp"

// Language map: the outer product of the subject and object label
// embeddings, pooled and convolved into a per-channel bias for edge features.
namespace cbias::lmm {

struct LMMConfig {
  std::size_t num_objects = 20;
  std::size_t embed_dim = 16;  // D_w
  std::size_t channels = 8;    // C, must equal the edge channel count
  std::size_t pool_size = 4;   // S: the map is average-pooled to S x S
  // Reuse the experience module's w_s / w_o tables.
  bool share_embeddings = true;
  // Zero the last conv layer so the module starts as an exact no-op. With
  // a relu-terminated stack this also blocks all gradient (relu'(0) = 0),
  // so it is off by default.
  bool zero_init = false;

  std::string subject_embedding() const;
  std::string object_embedding() const;
  void validate() const;
};

// Registers lmm.conv1 / lmm.conv2 (and lmm.w_s / lmm.w_o when unshared).
void init_params(ParamStore& params, const LMMConfig& config, std::mt19937_64& rng);

// x_ij[a][b] = emb_s[a] * emb_o[b], shaped [1 x D_w x D_w].
Tensor language_map(const ParamStore& params, const LMMConfig& config, int subject_category,
                    int object_category);

// avg-pool to S x S, conv3x3(1 -> C/2) + relu, conv3x3(C/2 -> C) + relu,
// global average pool -> [C x 1 x 1].
Tensor channel_attention(const ParamStore& params, const LMMConfig& config, const Tensor& map);

// e + broadcast(f) over the D_p x D_p grid.
Tensor apply_edge_bias(const Tensor& edge, const Tensor& attention);

}  // namespace cbias::lmm
