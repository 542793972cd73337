#pragma once

#include <random>
#include <span>
#include <vector>

#include "cbias/corpus.hpp"
#include "cbias/ops.hpp"
#include "cbias/param_store.hpp"

// Scene extractor: stacked multi-head self-attention over label + position
// tokens of every entity in a scene. Consumes labels and boxes only.
namespace cbias::sem {

struct SEMConfig {
  std::size_t num_objects = 20;
  std::size_t embed_dim = 16;  // label embedding w_c
  std::size_t pos_dim = 16;    // per-box position embedding
  std::size_t model_dim = 32;  // d_m
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ffn_dim = 64;
  std::size_t out_dim = 32;  // D_s
  // Extra residual around attention (x = X + MHA(X)). Off: x = MHA(X).
  bool attention_residual = false;
  double ln_eps = 1e-5;

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;
};

void init_params(ParamStore& params, const SEMConfig& config, std::mt19937_64& rng);

class EmptySceneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Row i = [w_c^T c_i : relu(pos(box_i))] projected to d_m -> [n x d_m].
Tensor pack_input(const ParamStore& params, const SEMConfig& config, std::span<const int> labels,
                  std::span<const corpus::Box> boxes);

// Multi-head attention of block `layer`, heads merged by the affine psi.
// When `weights` is given, receives one [n x n] attention matrix per head.
Tensor attention_layer(const ParamStore& params, const SEMConfig& config, std::size_t layer,
                       const Tensor& x, std::vector<Tensor>* weights = nullptr);

// L blocks of LayerNorm(x + FFN(x)) over the attention output, then a
// final linear map to D_s -> [n x D_s].
Tensor scene_encode(const ParamStore& params, const SEMConfig& config, const Tensor& input);

// [s_i : n_i] -> [n x (D_s + D_n)].
Tensor node_update(const Tensor& scene_rep, const Tensor& node_features);

}  // namespace cbias::sem
