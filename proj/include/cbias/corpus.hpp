#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cbias/param_store.hpp"

namespace cbias::corpus {

// Predicate id 0 is the background "no relation" class.
inline constexpr int kBackground = 0;

struct Vocabulary {
  std::vector<std::string> objects;
  std::vector<std::string> predicates;

  std::size_t num_objects() const { return objects.size(); }
  std::size_t num_predicates() const { return predicates.size(); }
  void validate() const;

  static Vocabulary make(std::size_t num_objects, std::size_t num_predicates);
  bool operator==(const Vocabulary&) const = default;
};

// Normalized to the unit image.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  bool valid() const;
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct Entity {
  int category = 0;
  Box box;
  std::vector<double> feature;  // node_dim
  bool operator==(const Entity&) const = default;
};

// Entity-index triplet within one scene.
struct Triplet {
  int subject = 0;
  int object = 0;
  int predicate = 0;
  auto operator<=>(const Triplet&) const = default;
};

// Category-level triplet, used for zero-shot bookkeeping.
struct TripletKey {
  int subject_category = 0;
  int object_category = 0;
  int predicate = 0;
  auto operator<=>(const TripletKey&) const = default;
};

struct FeatureDims {
  std::size_t node_dim = 64;  // D_n
  std::size_t channels = 8;   // C
  std::size_t patch = 4;      // D_p
  std::size_t edge_size() const { return channels * patch * patch; }
  bool operator==(const FeatureDims&) const = default;
};

using PairKey = std::pair<int, int>;

struct SceneSample {
  std::int64_t scene_id = 0;
  std::vector<Entity> entities;
  // Ordered pair (i, j), i != j -> C x D_p x D_p values, row-major.
  std::map<PairKey, std::vector<double>> edge_features;
  std::vector<Triplet> triplets;

  const std::vector<double>& edge(int subject, int object) const;
  // Throws std::invalid_argument describing the first broken invariant.
  void validate(const Vocabulary& vocab, const FeatureDims& dims) const;
  bool operator==(const SceneSample&) const = default;
};

struct Dataset {
  Vocabulary vocab;
  FeatureDims dims;
  std::vector<SceneSample> scenes;

  std::size_t num_triplets() const;
  std::set<TripletKey> triplet_keys() const;
  bool operator==(const Dataset&) const = default;
};

struct GeneratorConfig {
  std::size_t num_objects = 20;     // N_o
  std::size_t num_predicates = 15;  // N_r, including background
  std::size_t min_entities = 3;
  std::size_t max_entities = 6;
  std::size_t num_scenes = 500;
  double zipf_exponent = 1.2;
  // Share of the predicate signal carried by the category pair; the visual
  // edge signal is attenuated by (1 - language_dominance).
  double language_dominance = 0.9;
  double noise_sigma = 0.5;
  // Probability that an ordered entity pair carries an annotation.
  double relation_density = 0.3;
  // Log-scale spread of per-category predicate affinities.
  double affinity_sharpness = 1.5;
  // Zipf exponent of the object-category frequencies.
  double category_skew = 0.5;
  FeatureDims dims;
  // Category-level combinations withheld from training scenes.
  std::size_t zero_shot_count = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SceneRole {
  train,  // zero-shot combinations never sampled
  test,   // all combinations allowed
};

// Latent ground truth behind a generated corpus: category frequencies, the
// per-pair predicate table T[s][o], and feature prototypes.
class World {
 public:
  explicit World(const GeneratorConfig& config);

  const GeneratorConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  double category_probability(int category) const;
  // T[s][o]: a distribution over predicates (entry 0 is zero).
  std::span<const double> predicate_distribution(int subject_category,
                                                 int object_category) const;
  std::span<const double> global_prior() const { return global_prior_; }
  const std::vector<TripletKey>& zero_shot() const { return zero_shot_; }

  // Expected accuracy of predicting argmax T[s][o] for an annotated pair.
  double pair_bayes_accuracy() const;

  SceneSample scene(std::int64_t scene_id, SceneRole role,
                    std::optional<TripletKey> forced = std::nullopt) const;

 private:
  GeneratorConfig config_;
  Vocabulary vocab_;
  std::vector<double> category_prob_;
  std::vector<double> global_prior_;
  std::vector<double> table_;  // N_o x N_o x N_r
  std::vector<double> node_prototypes_;       // N_o x D_n
  std::vector<double> predicate_prototypes_;  // N_r x C
  std::vector<TripletKey> zero_shot_;
  std::set<TripletKey> zero_shot_set_;
};

// `config.num_scenes` training-role scenes with ids 0..n-1.
Dataset generate_dataset(const GeneratorConfig& config);

struct DatasetSplits {
  Dataset train, val, test;
  std::vector<TripletKey> zero_shot;
};

// Scenes are assigned to splits by id order (train first). Zero-shot
// combinations are absent from train/val and each is forced into a test scene.
DatasetSplits generate_splits(const GeneratorConfig& config, double train_fraction = 0.7,
                              double val_fraction = 0.1);

inline constexpr double kDefaultSmoothing = 1e-3;

struct StatsTables {
  std::size_t num_objects = 0;
  std::size_t num_predicates = 0;
  double alpha = kDefaultSmoothing;
  std::vector<double> s_marg;  // N_o x N_r
  std::vector<double> o_marg;  // N_o x N_r
  std::vector<double> freq;    // N_o x N_o x N_r raw triplet counts
  std::vector<double> subject_totals;
  std::vector<double> object_totals;
  double triplet_total = 0;

  std::span<const double> subject_row(int category) const;
  std::span<const double> object_row(int category) const;
  double count(int s, int o, int p) const;

  // Checkpoint-style text document with "stats.*" entries.
  ParamStore to_params() const;
  static StatsTables from_params(const ParamStore& params);
  void save(const std::filesystem::path& path) const;
  static StatsTables load(const std::filesystem::path& path);
};

// Additive-smoothed subject/object marginals and raw FREQ counts.
StatsTables compute_marginals(const Dataset& dataset, double alpha = kDefaultSmoothing);

// s_marg[s] (elementwise) o_marg[o]; not renormalized.
std::vector<double> joint_target(int subject_category, int object_category,
                                 const StatsTables& stats);

// Smoothed per-pair triplet distribution, N_o x N_o x N_r.
class FreqPrior {
 public:
  FreqPrior() = default;
  FreqPrior(const StatsTables& stats, double alpha = kDefaultSmoothing);
  std::span<const double> distribution(int subject_category, int object_category) const;
  std::size_t num_predicates() const { return num_predicates_; }

 private:
  std::size_t num_objects_ = 0;
  std::size_t num_predicates_ = 0;
  std::vector<double> table_;
};

FreqPrior freq_table(const Dataset& dataset, double alpha = kDefaultSmoothing);

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline constexpr int kDatasetSchemaVersion = 1;

std::string serialize_dataset(const Dataset& dataset);
Dataset parse_dataset(const std::string& text);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// FNV-1a over the serialized dataset.
std::uint64_t dataset_fingerprint(const Dataset& dataset);

}  // namespace cbias::corpus
