#pragma once

#include <random>
#include <string>

#include "cbias/ops.hpp"
#include "cbias/param_store.hpp"

namespace cbias {

// Registers "<name>.weight" [in x out] (Glorot) and "<name>.bias" [out] (zero).
void add_linear(ParamStore& params, const std::string& name, std::size_t in,
                std::size_t out, std::mt19937_64& rng, bool zero_weight = false);

// x [n x in] -> x W + b
Tensor linear(const ParamStore& params, const std::string& name, const Tensor& x);

}  // namespace cbias
