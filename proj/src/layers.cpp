#include "cbias/layers.hpp"

namespace cbias {

void add_linear(ParamStore& params, const std::string& name, std::size_t in,
                std::size_t out, std::mt19937_64& rng, bool zero_weight) {
  auto weight = glorot_init(in, out, rng);
  if (zero_weight) weight = Tensor::zeros({in, out});
  params.add(name + ".weight", std::move(weight));
  params.add(name + ".bias", Tensor::zeros({out}));
}

Tensor linear(const ParamStore& params, const std::string& name, const Tensor& x) {
  return ops::add_row_bias(ops::matmul(x, params.get(name + ".weight")),
                           params.get(name + ".bias"));
}

}  // namespace cbias
