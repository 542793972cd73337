#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cbias/tensor.hpp"

namespace cbias {

// Named, trainable parameters. Names are dotted paths such as
// "eem.phi_s.weight"; iteration order is lexicographic.
class ParamStore {
 public:
  // Registers a new parameter (requires_grad is forced on). Throws on a
  // duplicate name.
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;
  std::vector<std::string> names() const;
  const std::map<std::string, Tensor>& entries() const { return params_; }

  void zero_grad();
  // Deep copy with fresh leaves, used for frozen snapshots.
  ParamStore clone() const;

  // Checkpoint text document: {name: {"shape": [...], "values": [...]}}.
  std::string to_text() const;
  static ParamStore from_text(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static ParamStore load(const std::filesystem::path& path);

  // Overwrites values of existing parameters from `other`; shapes must match
  // and every name in `other` must exist here.
  void assign_from(const ParamStore& other);

 private:
  std::map<std::string, Tensor> params_;
};

// p -= lr * grad, then zeroes every gradient.
void sgd_step(ParamStore& params, double lr);

// Initializers.
Tensor uniform_init(Shape shape, double bound, std::mt19937_64& rng);
// Glorot-uniform over a [fan_in x fan_out] matrix.
Tensor glorot_init(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

// splitmix64 of (seed, stream); used to derive independent child seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace cbias
