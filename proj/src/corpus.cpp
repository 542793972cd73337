#include "cbias/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace cbias::corpus {
namespace {

constexpr int kMaxBoxAttempts = 200;
constexpr double kMaxBoxOverlap = 0.5;
constexpr double kNodePrototypeStd = 1.0;

std::string indexed_name(const char* prefix, std::size_t i) {
  std::ostringstream out;
  out << prefix << std::setw(2) << std::setfill('0') << i;
  return out.str();
}

int sample_index(std::span<const double> weights, std::mt19937_64& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::uniform_real_distribution<double> unit(0.0, total);
  const double u = unit(rng);
  double acc = 0.0;
  int last = -1;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last = static_cast<int>(i);
    if (u < acc) return last;
  }
  return last;
}

void normalize(std::span<double> v) {
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  for (auto& x : v) x /= total;
}

}  // namespace

void Vocabulary::validate() const {
  if (objects.size() < 2) throw std::invalid_argument("vocabulary needs at least 2 object categories");
  if (predicates.size() < 2) throw std::invalid_argument("vocabulary needs at least 2 predicates");
  for (const auto* names : {&objects, &predicates}) {
    std::set<std::string> unique(names->begin(), names->end());
    if (unique.size() != names->size()) throw std::invalid_argument("vocabulary names must be unique");
  }
}

Vocabulary Vocabulary::make(std::size_t num_objects, std::size_t num_predicates) {
  Vocabulary v;
  for (std::size_t i = 0; i < num_objects; ++i) v.objects.push_back(indexed_name("object_", i));
  v.predicates.push_back("__background__");
  for (std::size_t i = 1; i < num_predicates; ++i) v.predicates.push_back(indexed_name("pred_", i));
  v.validate();
  return v;
}

bool Box::valid() const {
  return x >= 0.0 && y >= 0.0 && w > 0.0 && h > 0.0 && x + w <= 1.0 && y + h <= 1.0;
}

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

const std::vector<double>& SceneSample::edge(int subject, int object) const {
  auto it = edge_features.find({subject, object});
  if (it == edge_features.end()) {
    throw std::out_of_range("scene " + std::to_string(scene_id) + " has no edge feature for (" +
                            std::to_string(subject) + ", " + std::to_string(object) + ")");
  }
  return it->second;
}

void SceneSample::validate(const Vocabulary& vocab, const FeatureDims& dims) const {
  const auto n = static_cast<int>(entities.size());
  const std::string where = "scene " + std::to_string(scene_id) + ": ";
  for (const auto& e : entities) {
    if (e.category < 0 || static_cast<std::size_t>(e.category) >= vocab.num_objects())
      throw std::invalid_argument(where + "entity category out of range");
    if (!e.box.valid()) throw std::invalid_argument(where + "invalid box");
    if (e.feature.size() != dims.node_dim)
      throw std::invalid_argument(where + "node feature has wrong length");
  }
  for (const auto& [key, values] : edge_features) {
    if (key.first < 0 || key.first >= n || key.second < 0 || key.second >= n ||
        key.first == key.second)
      throw std::invalid_argument(where + "edge feature on invalid pair");
    if (values.size() != dims.edge_size())
      throw std::invalid_argument(where + "edge feature has wrong length");
  }
  std::set<Triplet> seen;
  for (const auto& t : triplets) {
    if (t.subject < 0 || t.subject >= n || t.object < 0 || t.object >= n || t.subject == t.object)
      throw std::invalid_argument(where + "triplet entity index out of range");
    if (t.predicate <= kBackground ||
        static_cast<std::size_t>(t.predicate) >= vocab.num_predicates())
      throw std::invalid_argument(where + "triplet predicate out of range");
    if (!seen.insert(t).second) throw std::invalid_argument(where + "duplicate triplet");
    if (!edge_features.count({t.subject, t.object}))
      throw std::invalid_argument(where + "annotated pair without edge feature");
  }
}

std::size_t Dataset::num_triplets() const {
  std::size_t n = 0;
  for (const auto& s : scenes) n += s.triplets.size();
  return n;
}

std::set<TripletKey> Dataset::triplet_keys() const {
  std::set<TripletKey> keys;
  for (const auto& s : scenes)
    for (const auto& t : s.triplets)
      keys.insert({s.entities[t.subject].category, s.entities[t.object].category, t.predicate});
  return keys;
}

void GeneratorConfig::validate() const {
  if (num_objects < 2) throw std::invalid_argument("num_objects must be >= 2");
  if (num_predicates < 2) throw std::invalid_argument("num_predicates must be >= 2");
  if (min_entities < 2 || min_entities > max_entities)
    throw std::invalid_argument("entity range must satisfy 2 <= min <= max");
  if (!(language_dominance >= 0.0 && language_dominance <= 1.0))
    throw std::invalid_argument("language_dominance must lie in [0, 1]");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be >= 0");
  if (!(relation_density >= 0.0 && relation_density <= 1.0))
    throw std::invalid_argument("relation_density must lie in [0, 1]");
  if (!(zipf_exponent >= 0.0) || !(category_skew >= 0.0) || !(affinity_sharpness >= 0.0))
    throw std::invalid_argument("exponents must be >= 0");
  if (dims.node_dim == 0 || dims.channels == 0 || dims.patch == 0)
    throw std::invalid_argument("feature dims must be positive");
}

World::World(const GeneratorConfig& config) : config_(config) {
  config_.validate();
  vocab_ = Vocabulary::make(config_.num_objects, config_.num_predicates);
  const std::size_t no = config_.num_objects, nr = config_.num_predicates;
  std::mt19937_64 rng(derive_seed(config_.seed, 0));
  std::normal_distribution<double> gauss(0.0, 1.0);

  category_prob_.resize(no);
  for (std::size_t c = 0; c < no; ++c)
    category_prob_[c] = 1.0 / std::pow(static_cast<double>(c + 1), config_.category_skew);
  normalize(category_prob_);

  global_prior_.assign(nr, 0.0);
  for (std::size_t r = 1; r < nr; ++r)
    global_prior_[r] = 1.0 / std::pow(static_cast<double>(r), config_.zipf_exponent);
  normalize(global_prior_);

  // Role-specific affinities: a category prefers different predicates as
  // subject than as object.
  std::vector<double> subj_aff(no * nr), obj_aff(no * nr);
  for (auto* aff : {&subj_aff, &obj_aff})
    for (auto& a : *aff) a = std::exp(config_.affinity_sharpness * gauss(rng));

  const double lambda = config_.language_dominance;
  table_.assign(no * no * nr, 0.0);
  std::vector<double> peaked(nr);
  for (std::size_t s = 0; s < no; ++s) {
    for (std::size_t o = 0; o < no; ++o) {
      peaked[0] = 0.0;
      for (std::size_t r = 1; r < nr; ++r)
        peaked[r] = global_prior_[r] * subj_aff[s * nr + r] * obj_aff[o * nr + r];
      normalize(peaked);
      double* row = &table_[(s * no + o) * nr];
      for (std::size_t r = 0; r < nr; ++r)
        row[r] = (1.0 - lambda) * global_prior_[r] + lambda * peaked[r];
    }
  }

  node_prototypes_.resize(no * config_.dims.node_dim);
  for (auto& v : node_prototypes_) v = kNodePrototypeStd * gauss(rng);
  predicate_prototypes_.assign(nr * config_.dims.channels, 0.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t r = 1; r < nr; ++r)
    for (std::size_t c = 0; c < config_.dims.channels; ++c)
      predicate_prototypes_[r * config_.dims.channels + c] = coin(rng) ? 1.0 : -1.0;

  std::uniform_int_distribution<int> pick_cat(0, static_cast<int>(no) - 1);
  for (int attempt = 0;
       zero_shot_.size() < config_.zero_shot_count && attempt < 1000 * static_cast<int>(no * no);
       ++attempt) {
    const int s = pick_cat(rng), o = pick_cat(rng);
    const int p = sample_index(predicate_distribution(s, o), rng);
    TripletKey key{s, o, p};
    if (p > 0 && zero_shot_set_.insert(key).second) zero_shot_.push_back(key);
  }
  if (zero_shot_.size() < config_.zero_shot_count)
    throw GenerationError("could not select the requested number of zero-shot combinations");
}

double World::category_probability(int category) const {
  return category_prob_.at(static_cast<std::size_t>(category));
}

std::span<const double> World::predicate_distribution(int subject_category,
                                                      int object_category) const {
  const std::size_t no = config_.num_objects, nr = config_.num_predicates;
  if (subject_category < 0 || object_category < 0 ||
      static_cast<std::size_t>(subject_category) >= no ||
      static_cast<std::size_t>(object_category) >= no)
    throw std::out_of_range("category id out of range");
  return {&table_[(static_cast<std::size_t>(subject_category) * no +
                   static_cast<std::size_t>(object_category)) * nr],
          nr};
}

double World::pair_bayes_accuracy() const {
  double acc = 0.0;
  const int no = static_cast<int>(config_.num_objects);
  for (int s = 0; s < no; ++s)
    for (int o = 0; o < no; ++o) {
      auto row = predicate_distribution(s, o);
      acc += category_prob_[s] * category_prob_[o] * *std::max_element(row.begin(), row.end());
    }
  return acc;
}

SceneSample World::scene(std::int64_t scene_id, SceneRole role,
                         std::optional<TripletKey> forced) const {
  std::mt19937_64 rng(derive_seed(derive_seed(config_.seed, 1), static_cast<std::uint64_t>(scene_id)));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& dims = config_.dims;

  SceneSample scene;
  scene.scene_id = scene_id;
  std::uniform_int_distribution<std::size_t> count(config_.min_entities, config_.max_entities);
  const std::size_t n = count(rng);
  scene.entities.resize(n);
  for (std::size_t i = 0; i < n; ++i) scene.entities[i].category = sample_index(category_prob_, rng);
  if (forced) {
    scene.entities[0].category = forced->subject_category;
    scene.entities[1].category = forced->object_category;
  }

  for (std::size_t i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxBoxAttempts && !placed; ++attempt) {
      Box b;
      b.w = 0.1 + 0.3 * unit(rng);
      b.h = 0.1 + 0.3 * unit(rng);
      b.x = (1.0 - b.w) * unit(rng);
      b.y = (1.0 - b.h) * unit(rng);
      placed = b.valid();
      for (std::size_t k = 0; placed && k < i; ++k)
        placed = iou(b, scene.entities[k].box) <= kMaxBoxOverlap;
      if (placed) scene.entities[i].box = b;
    }
    if (!placed)
      throw GenerationError("scene " + std::to_string(scene_id) + ": could not place box " +
                            std::to_string(i) + " after " + std::to_string(kMaxBoxAttempts) +
                            " attempts");
  }

  for (auto& e : scene.entities) {
    e.feature.resize(dims.node_dim);
    for (std::size_t d = 0; d < dims.node_dim; ++d)
      e.feature[d] = node_prototypes_[static_cast<std::size_t>(e.category) * dims.node_dim + d] +
                     config_.noise_sigma * gauss(rng);
  }

  const std::size_t nr = config_.num_predicates;
  auto pair_weights = [&](int i, int j) {
    const int s = scene.entities[i].category, o = scene.entities[j].category;
    auto row = predicate_distribution(s, o);
    std::vector<double> w(row.begin(), row.end());
    if (role == SceneRole::train) {
      for (std::size_t p = 1; p < nr; ++p)
        if (zero_shot_set_.count({s, o, static_cast<int>(p)})) w[p] = 0.0;
    }
    return w;
  };
  auto has_mass = [](const std::vector<double>& w) {
    return std::any_of(w.begin(), w.end(), [](double v) { return v > 0.0; });
  };

  std::vector<int> label(n * n, kBackground);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double u = unit(rng);
      if (forced && i == 0 && j == 1) {
        label[i * n + j] = forced->predicate;
        continue;
      }
      if (u >= config_.relation_density) continue;
      auto w = pair_weights(static_cast<int>(i), static_cast<int>(j));
      if (has_mass(w)) label[i * n + j] = sample_index(w, rng);
    }
  }
  if (std::all_of(label.begin(), label.end(), [](int p) { return p == kBackground; })) {
    std::uniform_int_distribution<std::size_t> start(0, n * n - 1);
    const std::size_t offset = start(rng);
    for (std::size_t k = 0; k < n * n; ++k) {
      const std::size_t idx = (offset + k) % (n * n);
      const std::size_t i = idx / n, j = idx % n;
      if (i == j) continue;
      auto w = pair_weights(static_cast<int>(i), static_cast<int>(j));
      if (!has_mass(w)) continue;
      label[idx] = sample_index(w, rng);
      break;
    }
  }

  const double attenuation = 1.0 - config_.language_dominance;
  const std::size_t plane = dims.patch * dims.patch;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const int p = label[i * n + j];
      if (p != kBackground)
        scene.triplets.push_back({static_cast<int>(i), static_cast<int>(j), p});
      std::vector<double> feat(dims.edge_size());
      for (std::size_t c = 0; c < dims.channels; ++c) {
        const double proto =
            attenuation * predicate_prototypes_[static_cast<std::size_t>(p) * dims.channels + c];
        for (std::size_t q = 0; q < plane; ++q)
          feat[c * plane + q] = proto + config_.noise_sigma * gauss(rng);
      }
      scene.edge_features.emplace(PairKey{static_cast<int>(i), static_cast<int>(j)},
                                  std::move(feat));
    }
  }
  return scene;
}

Dataset generate_dataset(const GeneratorConfig& config) {
  World world(config);
  Dataset ds;
  ds.vocab = world.vocabulary();
  ds.dims = config.dims;
  ds.scenes.reserve(config.num_scenes);
  for (std::size_t i = 0; i < config.num_scenes; ++i)
    ds.scenes.push_back(world.scene(static_cast<std::int64_t>(i), SceneRole::train));
  return ds;
}

DatasetSplits generate_splits(const GeneratorConfig& config, double train_fraction,
                              double val_fraction) {
  if (!(train_fraction > 0.0) || !(val_fraction >= 0.0) || train_fraction + val_fraction >= 1.0)
    throw std::invalid_argument("split fractions must satisfy 0 < train, 0 <= val, train + val < 1");
  World world(config);
  const std::size_t total = config.num_scenes;
  const auto n_train = static_cast<std::size_t>(std::floor(total * train_fraction));
  const auto n_val = static_cast<std::size_t>(std::floor(total * val_fraction));
  const std::size_t n_test = total - n_train - n_val;
  if (n_test < world.zero_shot().size())
    throw GenerationError("test split has " + std::to_string(n_test) + " scenes, fewer than " +
                          std::to_string(world.zero_shot().size()) + " zero-shot combinations");

  DatasetSplits out;
  out.zero_shot = world.zero_shot();
  for (auto* d : {&out.train, &out.val, &out.test}) {
    d->vocab = world.vocabulary();
    d->dims = config.dims;
  }
  for (std::size_t i = 0; i < total; ++i) {
    const auto id = static_cast<std::int64_t>(i);
    if (i < n_train) {
      out.train.scenes.push_back(world.scene(id, SceneRole::train));
    } else if (i < n_train + n_val) {
      out.val.scenes.push_back(world.scene(id, SceneRole::train));
    } else {
      const std::size_t k = i - n_train - n_val;
      std::optional<TripletKey> forced;
      if (k < out.zero_shot.size()) forced = out.zero_shot[k];
      out.test.scenes.push_back(world.scene(id, SceneRole::test, forced));
    }
  }
  return out;
}

}  // namespace cbias::corpus
