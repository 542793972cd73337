#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbias/corpus.hpp"
#include "cbias/pipeline.hpp"

// Flat dotted-key configuration shared by every command. Files hold one
// `key = value` per line; `#` starts a comment.
namespace cbias::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  RunConfig();  // desk-scale defaults

  // Applies every assignment in the file. Unknown keys are rejected.
  void merge_file(const std::filesystem::path& path);
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  // "key=value"
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t seed() const;
  bool flag(const std::string& key) const;
  std::vector<std::size_t> count_list(const std::string& key) const;

  // Sorted `key = value` lines; merging it into a fresh RunConfig
  // reproduces this one.
  std::string snapshot() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  // Typed views. Each throws ConfigError on a malformed or out-of-range value.
  corpus::GeneratorConfig generator() const;
  double train_fraction() const { return number("data.train_fraction"); }
  double val_fraction() const { return number("data.val_fraction"); }
  double smoothing() const { return number("data.smoothing"); }
  pipeline::ModelSpec model(const corpus::Dataset& dataset) const;
  pipeline::PipelineConfig pipeline() const;
  std::vector<std::size_t> ks() const { return count_list("eval.ks"); }
  std::vector<pipeline::PipelineConfig> ablation_grid() const;

  // Checks every key converts to its declared type.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

// "eem+lmm" style label -> toggles on top of `base`.
pipeline::PipelineConfig parse_variant(const std::string& label,
                                       const pipeline::PipelineConfig& base);

}  // namespace cbias::cli
