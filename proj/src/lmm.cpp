#include "cbias/lmm.hpp"

#include <cmath>
#include <stdexcept>

#include "cbias/eem.hpp"

namespace cbias::lmm {

std::string LMMConfig::subject_embedding() const {
  return share_embeddings ? eem::kSubjectEmbedding : "lmm.w_s";
}

std::string LMMConfig::object_embedding() const {
  return share_embeddings ? eem::kObjectEmbedding : "lmm.w_o";
}

void LMMConfig::validate() const {
  if (channels < 2 || channels % 2 != 0)
    throw std::invalid_argument("lmm.channels must be an even number >= 2");
  if (pool_size == 0 || embed_dim % pool_size != 0)
    throw std::invalid_argument("pooling incompatibility: embedding dim " +
                                std::to_string(embed_dim) + " is not divisible by pool size " +
                                std::to_string(pool_size));
}

void init_params(ParamStore& params, const LMMConfig& config, std::mt19937_64& rng) {
  config.validate();
  if (!config.share_embeddings) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
    params.add("lmm.w_s", uniform_init({config.num_objects, config.embed_dim}, bound, rng));
    params.add("lmm.w_o", uniform_init({config.num_objects, config.embed_dim}, bound, rng));
  }
  const std::size_t mid = config.channels / 2;
  // He-uniform over the 3x3 receptive field.
  const double b1 = std::sqrt(6.0 / 9.0);
  const double b2 = std::sqrt(6.0 / (9.0 * static_cast<double>(mid)));
  params.add("lmm.conv1.weight", uniform_init({mid, 1, 3, 3}, b1, rng));
  params.add("lmm.conv1.bias", Tensor::zeros({mid}));
  auto w2 = uniform_init({config.channels, mid, 3, 3}, b2, rng);
  if (config.zero_init) w2 = Tensor::zeros({config.channels, mid, 3, 3});
  params.add("lmm.conv2.weight", std::move(w2));
  params.add("lmm.conv2.bias", Tensor::zeros({config.channels}));
}

Tensor language_map(const ParamStore& params, const LMMConfig& config, int subject_category,
                    int object_category) {
  const int s[] = {subject_category};
  const int o[] = {object_category};
  auto emb_s = ops::gather_rows(params.get(config.subject_embedding()), s);  // 1 x D_w
  auto emb_o = ops::gather_rows(params.get(config.object_embedding()), o);   // 1 x D_w
  auto outer = ops::matmul(ops::transpose(emb_s), emb_o);                    // D_w x D_w
  return ops::reshape(outer, {1, config.embed_dim, config.embed_dim});
}

Tensor channel_attention(const ParamStore& params, const LMMConfig& config, const Tensor& map) {
  config.validate();
  if (map.rank() != 3 || map.dim(0) != 1 || map.dim(1) != map.dim(2) ||
      map.dim(1) % config.pool_size != 0)
    throw ShapeError("pooling incompatibility: language map " + shape_string(map.shape()) +
                     " cannot be pooled to " + std::to_string(config.pool_size) + "x" +
                     std::to_string(config.pool_size));
  const std::size_t k = map.dim(1) / config.pool_size;
  auto pooled = ops::pool2d(map, ops::PoolMode::avg, k, k);
  auto h1 = ops::relu(ops::conv2d(pooled, params.get("lmm.conv1.weight"),
                                  params.get("lmm.conv1.bias"), 1, 1));
  auto h2 = ops::relu(ops::conv2d(h1, params.get("lmm.conv2.weight"),
                                  params.get("lmm.conv2.bias"), 1, 1));
  return ops::pool2d(h2, ops::PoolMode::global_avg);
}

Tensor apply_edge_bias(const Tensor& edge, const Tensor& attention) {
  if (edge.rank() != 3) throw ShapeError("apply_edge_bias: edge must be C x D_p x D_p");
  if (attention.rank() != 3 || attention.dim(0) != edge.dim(0))
    throw ShapeError("apply_edge_bias: channel mismatch between edge " +
                     shape_string(edge.shape()) + " and attention " +
                     shape_string(attention.shape()));
  return ops::add(edge, ops::broadcast_channels(attention, edge.dim(1), edge.dim(2)));
}

}  // namespace cbias::lmm
