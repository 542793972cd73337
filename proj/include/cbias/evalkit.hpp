#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cbias/corpus.hpp"

// Scene-graph metrics under the graph-constrained, unconstrained and
// zero-shot protocols. Ground-truth boxes are given, so a triplet is hit
// only by an exact (subject, object, predicate) match.
namespace cbias::evalkit {

// Fused logits for scored ordered pairs of one scene.
struct RelationScores {
  std::int64_t scene_id = 0;
  std::size_t num_predicates = 0;
  std::vector<corpus::PairKey> pairs;
  std::vector<double> logits;  // pairs.size() x num_predicates

  std::span<const double> row(std::size_t pair) const {
    return {&logits[pair * num_predicates], num_predicates};
  }
};

struct Candidate {
  int subject = 0;
  int object = 0;
  int predicate = 0;
  double score = 0.0;
  bool operator==(const Candidate&) const = default;
};

// Candidates sorted by score descending, ties broken by lower subject,
// then lower object, then lower predicate.
struct RankedPrediction {
  std::int64_t scene_id = 0;
  std::vector<Candidate> candidates;
  bool operator==(const RankedPrediction&) const = default;
};

void sort_candidates(std::vector<Candidate>& candidates);

// Top-1 non-background predicate per pair (softmax over all N_r classes,
// background dropped), pairs ranked by that probability.
RankedPrediction rank_constrained(const RelationScores& scores);
// Every (pair, non-background predicate) candidate, ranked by probability.
RankedPrediction rank_unconstrained(const RelationScores& scores);

struct RecallResult {
  // Indexed by predicate id; background entries stay zero.
  std::vector<std::size_t> hits;
  std::vector<std::size_t> totals;
  double mean = 0.0;  // over predicates with at least one GT instance
  std::size_t predicates_counted = 0;

  std::optional<double> recall(int predicate) const;
  std::size_t total_hits() const;
};

// Predictions are matched to ground truth by scene id; every ground-truth
// scene must have a prediction entry (possibly empty).
RecallResult mean_recall_at_k(std::span<const RankedPrediction> predictions,
                              std::span<const corpus::SceneSample> ground_truth,
                              std::size_t num_predicates, std::size_t k);

struct ZeroShotResult {
  std::optional<double> recall;  // empty when no zero-shot GT exists
  std::size_t hits = 0;
  std::size_t total = 0;
};

// Recall@K restricted to GT triplets whose category combination is absent
// from `train_keys`, aggregated over all scenes.
ZeroShotResult zero_shot_recall(std::span<const RankedPrediction> predictions,
                                std::span<const corpus::SceneSample> ground_truth,
                                const std::set<corpus::TripletKey>& train_keys, std::size_t k);

struct KMetrics {
  std::size_t k = 0;
  RecallResult constrained;
  RecallResult unconstrained;
  ZeroShotResult zero_shot;
};

struct MetricsReport {
  std::vector<std::string> predicate_names;
  std::size_t num_scenes = 0;
  std::size_t num_gt = 0;
  std::size_t num_zero_shot_gt = 0;
  std::vector<KMetrics> per_k;

  const KMetrics& at(std::size_t k) const;
};

inline const std::vector<std::size_t> kDefaultKs{1, 5, 10, 20, 50, 100};

// Throws std::invalid_argument on an empty dataset or a scene id mismatch.
MetricsReport report(std::span<const RelationScores> scores, const corpus::Dataset& dataset,
                     const std::set<corpus::TripletKey>& train_keys,
                     std::span<const std::size_t> ks = kDefaultKs);

inline constexpr int kReportSchemaVersion = 1;
inline constexpr int kPredictionsSchemaVersion = 1;

std::string report_json(const MetricsReport& report);
MetricsReport parse_report_json(const std::string& text);
// Human-readable summary with the per-predicate recall table at `table_k`.
std::string report_text(const MetricsReport& report, std::size_t table_k = 100);

// One header line, then one {scene_id, candidates: [[s, o, p, score]...]}
// record per scene.
void save_predictions(std::span<const RankedPrediction> predictions,
                      const std::filesystem::path& path);
std::vector<RankedPrediction> load_predictions(const std::filesystem::path& path);

}  // namespace cbias::evalkit
