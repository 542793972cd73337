#include "cbias/eem.hpp"

#include <cmath>

#include "cbias/layers.hpp"

namespace cbias::eem {

void init_params(ParamStore& params, const EEMConfig& config, std::mt19937_64& rng) {
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  params.add(kSubjectEmbedding, uniform_init({config.num_objects, config.embed_dim}, emb_bound, rng));
  params.add(kObjectEmbedding, uniform_init({config.num_objects, config.embed_dim}, emb_bound, rng));
  add_linear(params, "eem.phi_s", config.embed_dim, config.hidden, rng);
  add_linear(params, "eem.phi_o", config.embed_dim, config.hidden, rng);
  add_linear(params, "eem.phi_p", 8, config.hidden, rng);
  add_linear(params, "eem.mlp.0", 3 * config.hidden, config.mlp_hidden, rng);
  add_linear(params, "eem.mlp.1", config.mlp_hidden, config.num_predicates, rng);
}

void PairBatch::push_back(int s, int o, const corpus::Box& sb, const corpus::Box& ob) {
  subject_categories.push_back(s);
  object_categories.push_back(o);
  subject_boxes.push_back(sb);
  object_boxes.push_back(ob);
}

Tensor position_embed(const ParamStore& params, std::span<const corpus::Box> subject_boxes,
                      std::span<const corpus::Box> object_boxes) {
  if (subject_boxes.size() != object_boxes.size() || subject_boxes.empty())
    throw ShapeError("position_embed: box lists must be non-empty and equal length");
  std::vector<double> coords;
  coords.reserve(subject_boxes.size() * 8);
  for (std::size_t b = 0; b < subject_boxes.size(); ++b) {
    const auto& s = subject_boxes[b];
    const auto& o = object_boxes[b];
    coords.insert(coords.end(), {s.x, s.y, s.w, s.h, o.x, o.y, o.w, o.h});
  }
  auto x = Tensor::from({subject_boxes.size(), 8}, std::move(coords));
  return ops::relu(linear(params, "eem.phi_p", x));
}

Tensor estimate(const ParamStore& params, const PairBatch& batch) {
  if (batch.size() == 0) throw ShapeError("estimate: empty batch");
  auto subj = ops::gather_rows(params.get(kSubjectEmbedding), batch.subject_categories);
  auto obj = ops::gather_rows(params.get(kObjectEmbedding), batch.object_categories);
  auto hs = ops::relu(linear(params, "eem.phi_s", subj));
  auto ho = ops::relu(linear(params, "eem.phi_o", obj));
  auto hp = position_embed(params, batch.subject_boxes, batch.object_boxes);
  auto joined = ops::concat({hs, ho, hp}, 1);
  auto hidden = ops::relu(linear(params, "eem.mlp.0", joined));
  return linear(params, "eem.mlp.1", hidden);
}

Tensor joint_targets(const PairBatch& batch, const corpus::StatsTables& stats) {
  std::vector<double> values;
  values.reserve(batch.size() * stats.num_predicates);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto row = corpus::joint_target(batch.subject_categories[b], batch.object_categories[b], stats);
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor::from({batch.size(), stats.num_predicates}, std::move(values));
}

Tensor est_loss(const Tensor& estimates, const Tensor& targets) {
  auto cos = ops::row_cosine(estimates, targets);
  const auto n = static_cast<double>(cos.numel());
  return ops::sub(Tensor::scalar(n), ops::sum(cos));
}

}  // namespace cbias::eem
