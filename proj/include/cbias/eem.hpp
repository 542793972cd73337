#pragma once

#include <random>
#include <span>
#include <vector>

#include "cbias/corpus.hpp"
#include "cbias/ops.hpp"
#include "cbias/param_store.hpp"

// Experience estimation: predicts a relation distribution d_ij from the
// subject/object labels and their boxes. Trained with a cosine objective
// against the product of subject and object marginals.
namespace cbias::eem {

struct EEMConfig {
  std::size_t num_objects = 20;
  std::size_t num_predicates = 15;
  std::size_t embed_dim = 16;    // D_w
  std::size_t hidden = 64;       // width of phi_s, phi_o, phi_p
  std::size_t mlp_hidden = 256;  // hidden layer of the output perceptron
};

// Parameter names (all under "eem.").
inline constexpr const char* kSubjectEmbedding = "eem.w_s";
inline constexpr const char* kObjectEmbedding = "eem.w_o";

void init_params(ParamStore& params, const EEMConfig& config, std::mt19937_64& rng);

struct PairBatch {
  std::vector<int> subject_categories;
  std::vector<int> object_categories;
  std::vector<corpus::Box> subject_boxes;
  std::vector<corpus::Box> object_boxes;

  std::size_t size() const { return subject_categories.size(); }
  void push_back(int s, int o, const corpus::Box& sb, const corpus::Box& ob);
};

// phi_p over (x_i, y_i, w_i, h_i, x_j, y_j, w_j, h_j) -> [B x hidden].
Tensor position_embed(const ParamStore& params, std::span<const corpus::Box> subject_boxes,
                      std::span<const corpus::Box> object_boxes);

// Raw (unsquashed) [B x N_r] scores. Throws std::out_of_range on a bad id.
Tensor estimate(const ParamStore& params, const PairBatch& batch);

// Constant [B x N_r] matrix of joint targets for the batch's category pairs.
Tensor joint_targets(const PairBatch& batch, const corpus::StatsTables& stats);

// sum_b (1 - cos(d_b, target_b)).
Tensor est_loss(const Tensor& estimates, const Tensor& targets);

}  // namespace cbias::eem
