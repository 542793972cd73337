#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbias/corpus.hpp"
#include "cbias/eem.hpp"
#include "cbias/evalkit.hpp"
#include "cbias/lmm.hpp"
#include "cbias/param_store.hpp"
#include "cbias/sem.hpp"

// Full model: label-biased node/edge features feed a small reference
// predictor whose logits are fused with the experience estimate.
namespace cbias::pipeline {

// Architecture sizes. Defaults are desk scale.
struct ModelSpec {
  std::size_t num_objects = 20;
  std::size_t num_predicates = 15;
  corpus::FeatureDims dims;
  std::size_t embed_dim = 16;  // D_w
  std::size_t eem_hidden = 64;
  std::size_t eem_mlp_hidden = 256;
  std::size_t lmm_pool = 4;
  bool share_embeddings = true;
  bool lmm_zero_init = false;
  std::size_t sem_layers = 2;
  std::size_t sem_heads = 4;
  std::size_t sem_dim = 32;
  std::size_t sem_ffn = 64;
  std::size_t sem_out = 32;  // D_s
  bool sem_attention_residual = false;
  std::size_t classifier_hidden = 128;

  eem::EEMConfig eem() const;
  lmm::LMMConfig lmm() const;
  sem::SEMConfig sem() const;
  std::size_t classifier_input() const;  // 2 (D_s + D_n) + C
  void validate() const;

  static ModelSpec for_dataset(const corpus::Dataset& dataset);
};

struct PipelineConfig {
  bool use_eem = false;
  bool use_lmm = false;
  bool use_sem = false;
  bool use_freq_baseline = false;
  double lambda_est = 1.0;
  double learning_rate = 0.05;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  // Unannotated pairs sampled per annotated pair as background targets.
  std::size_t negative_ratio = 1;
  // Block classification-loss gradient from flowing into the estimate.
  bool eem_stop_gradient = false;
  bool freeze_embeddings = false;
  // Epochs of estimate-only training before joint training starts.
  std::size_t eem_pretrain_epochs = 0;

  void validate() const;
  std::string label() const;  // "baseline", "+EEM", "+EEM+LMM", ...
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ParamStore init_params(const ModelSpec& spec, std::uint64_t seed);

// Everything the fused output depends on that is not a parameter.
struct Priors {
  const corpus::StatsTables* stats = nullptr;  // needed for the estimate loss
  const corpus::FreqPrior* freq = nullptr;     // needed when use_freq_baseline
};

struct ForwardOutputs {
  std::vector<corpus::PairKey> pairs;
  Tensor baseline_logits;  // [P x N_r]
  Tensor estimate;         // [P x N_r], undefined unless use_eem
  Tensor fused;            // [P x N_r]

  evalkit::RelationScores scores(std::int64_t scene_id) const;
};

std::vector<corpus::PairKey> all_pairs(const corpus::SceneSample& sample);

// Scores the given ordered pairs (all pairs when empty).
ForwardOutputs forward_scene(const corpus::SceneSample& sample, const ParamStore& params,
                             const ModelSpec& spec, const PipelineConfig& config,
                             const Priors& priors, std::span<const corpus::PairKey> pairs = {});

// Annotated pairs plus sampled background pairs, with their targets.
struct TrainingPairs {
  std::vector<corpus::PairKey> pairs;
  std::vector<int> labels;
};

TrainingPairs training_pairs(const corpus::SceneSample& sample, std::size_t negative_ratio,
                             std::mt19937_64& rng);

struct LossTerms {
  Tensor total;
  double classification = 0.0;
  double estimate = 0.0;
};

// mean cross entropy + lambda_est * sum_pairs (1 - cos(d, joint target)).
LossTerms loss(const corpus::SceneSample& sample, const ForwardOutputs& outputs,
               std::span<const int> labels, const ModelSpec& spec, const PipelineConfig& config,
               const Priors& priors);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_mr50;
};

struct TrainResult {
  ParamStore params;
  std::vector<EpochLog> log;
};

std::string epoch_log_line(const EpochLog& entry);

// Plain SGD at a fixed learning rate. Throws DivergenceError on a
// non-finite loss. `on_epoch` is called after each epoch.
TrainResult train(const corpus::Dataset& train_set, const corpus::Dataset* val_set,
                  const ModelSpec& spec, const PipelineConfig& config, const Priors& priors,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Scores every scene against frozen parameters. `threads` > 1 splits
// scenes across workers; results do not depend on the thread count.
std::vector<evalkit::RelationScores> score_dataset(const corpus::Dataset& dataset,
                                                   const ParamStore& params, const ModelSpec& spec,
                                                   const PipelineConfig& config,
                                                   const Priors& priors, std::size_t threads = 1);

struct AblationRow {
  std::string label;
  PipelineConfig config;
  double mr20 = 0.0, mr50 = 0.0, mr100 = 0.0;
};

// Trains and evaluates each configuration on identical data and seeds,
// in the order given.
std::vector<AblationRow> ablate(const corpus::Dataset& train_set, const corpus::Dataset& test_set,
                                const ModelSpec& spec, std::span<const PipelineConfig> grid,
                                const Priors& priors, std::size_t threads = 1);

std::string ablation_table(std::span<const AblationRow> rows);

}  // namespace cbias::pipeline
