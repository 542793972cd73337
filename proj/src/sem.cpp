#include "cbias/sem.hpp"

#include <cmath>
#include <string>

#include "cbias/layers.hpp"

namespace cbias::sem {
namespace {

std::string block(std::size_t layer) { return "sem.layer" + std::to_string(layer); }

std::string head(std::size_t layer, std::size_t h) {
  return block(layer) + ".head" + std::to_string(h);
}

}  // namespace

void SEMConfig::validate() const {
  if (heads == 0 || model_dim % heads != 0)
    throw std::invalid_argument("sem.dim must be divisible by sem.heads");
  if (layers == 0) throw std::invalid_argument("sem.layers must be positive");
}

void init_params(ParamStore& params, const SEMConfig& config, std::mt19937_64& rng) {
  config.validate();
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  params.add("sem.w_c", uniform_init({config.num_objects, config.embed_dim}, emb_bound, rng));
  add_linear(params, "sem.pos", 4, config.pos_dim, rng);
  add_linear(params, "sem.input", config.embed_dim + config.pos_dim, config.model_dim, rng);
  const std::size_t dk = config.head_dim();
  for (std::size_t l = 0; l < config.layers; ++l) {
    for (std::size_t h = 0; h < config.heads; ++h) {
      params.add(head(l, h) + ".q", glorot_init(config.model_dim, dk, rng));
      params.add(head(l, h) + ".k", glorot_init(config.model_dim, dk, rng));
      params.add(head(l, h) + ".v", glorot_init(config.model_dim, dk, rng));
    }
    add_linear(params, block(l) + ".psi", config.model_dim, config.model_dim, rng);
    add_linear(params, block(l) + ".ffn1", config.model_dim, config.ffn_dim, rng);
    add_linear(params, block(l) + ".ffn2", config.ffn_dim, config.model_dim, rng);
    params.add(block(l) + ".ln.gain", Tensor::full({config.model_dim}, 1.0));
    params.add(block(l) + ".ln.bias", Tensor::zeros({config.model_dim}));
  }
  add_linear(params, "sem.output", config.model_dim, config.out_dim, rng);
}

Tensor pack_input(const ParamStore& params, const SEMConfig& config, std::span<const int> labels,
                  std::span<const corpus::Box> boxes) {
  (void)config;
  if (labels.empty()) throw EmptySceneError("scene extractor needs at least one entity");
  if (labels.size() != boxes.size())
    throw ShapeError("pack_input: " + std::to_string(labels.size()) + " labels but " +
                     std::to_string(boxes.size()) + " boxes");
  std::vector<double> coords;
  coords.reserve(boxes.size() * 4);
  for (const auto& b : boxes) coords.insert(coords.end(), {b.x, b.y, b.w, b.h});
  auto pos = ops::relu(linear(params, "sem.pos", Tensor::from({boxes.size(), 4}, std::move(coords))));
  auto emb = ops::gather_rows(params.get("sem.w_c"), labels);
  return linear(params, "sem.input", ops::concat({emb, pos}, 1));
}

Tensor attention_layer(const ParamStore& params, const SEMConfig& config, std::size_t layer,
                       const Tensor& x, std::vector<Tensor>* weights) {
  if (x.rank() != 2 || x.dim(1) != config.model_dim)
    throw ShapeError("attention_layer: expected [n x " + std::to_string(config.model_dim) +
                     "], got " + shape_string(x.shape()));
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(config.head_dim()));
  std::vector<Tensor> heads;
  heads.reserve(config.heads);
  for (std::size_t h = 0; h < config.heads; ++h) {
    auto q = ops::matmul(x, params.get(head(layer, h) + ".q"));
    auto k = ops::matmul(x, params.get(head(layer, h) + ".k"));
    auto v = ops::matmul(x, params.get(head(layer, h) + ".v"));
    auto attn = ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt_dk), 1);
    if (weights) weights->push_back(attn);
    heads.push_back(ops::matmul(attn, v));
  }
  return linear(params, block(layer) + ".psi", ops::concat(heads, 1));
}

Tensor scene_encode(const ParamStore& params, const SEMConfig& config, const Tensor& input) {
  config.validate();
  Tensor x = input;
  for (std::size_t l = 0; l < config.layers; ++l) {
    auto att = attention_layer(params, config, l, x);
    if (config.attention_residual) att = ops::add(x, att);
    auto ffn = linear(params, block(l) + ".ffn2",
                      ops::relu(linear(params, block(l) + ".ffn1", att)));
    x = ops::layer_norm(ops::add(att, ffn), params.get(block(l) + ".ln.gain"),
                        params.get(block(l) + ".ln.bias"), config.ln_eps);
  }
  return linear(params, "sem.output", x);
}

Tensor node_update(const Tensor& scene_rep, const Tensor& node_features) {
  if (scene_rep.rank() != 2 || node_features.rank() != 2 ||
      scene_rep.dim(0) != node_features.dim(0))
    throw ShapeError("node_update: " + shape_string(scene_rep.shape()) + " scene rows vs " +
                     shape_string(node_features.shape()) + " node rows");
  return ops::concat({scene_rep, node_features}, 1);
}

}  // namespace cbias::sem
