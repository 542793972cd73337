#include "cbias/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "cbias/layers.hpp"
#include "json.hpp"

namespace cbias::pipeline {
namespace {

eem::PairBatch pair_batch(const corpus::SceneSample& sample,
                          std::span<const corpus::PairKey> pairs) {
  eem::PairBatch batch;
  for (const auto& [i, j] : pairs) {
    const auto& a = sample.entities.at(static_cast<std::size_t>(i));
    const auto& b = sample.entities.at(static_cast<std::size_t>(j));
    batch.push_back(a.category, b.category, a.box, b.box);
  }
  return batch;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

eem::EEMConfig ModelSpec::eem() const {
  return {num_objects, num_predicates, embed_dim, eem_hidden, eem_mlp_hidden};
}

lmm::LMMConfig ModelSpec::lmm() const {
  lmm::LMMConfig c;
  c.num_objects = num_objects;
  c.embed_dim = embed_dim;
  c.channels = dims.channels;
  c.pool_size = lmm_pool;
  c.share_embeddings = share_embeddings;
  c.zero_init = lmm_zero_init;
  return c;
}

sem::SEMConfig ModelSpec::sem() const {
  sem::SEMConfig c;
  c.num_objects = num_objects;
  c.embed_dim = embed_dim;
  c.pos_dim = embed_dim;
  c.model_dim = sem_dim;
  c.heads = sem_heads;
  c.layers = sem_layers;
  c.ffn_dim = sem_ffn;
  c.out_dim = sem_out;
  c.attention_residual = sem_attention_residual;
  return c;
}

std::size_t ModelSpec::classifier_input() const {
  return 2 * (sem_out + dims.node_dim) + dims.channels;
}

void ModelSpec::validate() const {
  if (num_objects < 2 || num_predicates < 2)
    throw std::invalid_argument("model needs >= 2 object categories and >= 2 predicates");
  lmm().validate();
  sem().validate();
}

ModelSpec ModelSpec::for_dataset(const corpus::Dataset& dataset) {
  ModelSpec spec;
  spec.num_objects = dataset.vocab.num_objects();
  spec.num_predicates = dataset.vocab.num_predicates();
  spec.dims = dataset.dims;
  return spec;
}

void PipelineConfig::validate() const {
  if (!(lambda_est >= 0.0)) throw std::invalid_argument("lambda_est must be >= 0");
  if (use_eem && use_freq_baseline)
    throw std::invalid_argument("use_eem and use_freq_baseline are mutually exclusive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (eem_pretrain_epochs > 0 && !use_eem)
    throw std::invalid_argument("eem_pretrain_epochs requires use_eem");
}

std::string PipelineConfig::label() const {
  std::string s = "baseline";
  if (use_freq_baseline) s += "+FREQ";
  if (use_eem) s += "+EEM";
  if (use_lmm) s += "+LMM";
  if (use_sem) s += "+SEM";
  return s;
}

ParamStore init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamStore params;
  std::mt19937_64 base_rng(derive_seed(seed, 100));
  add_linear(params, "baseline.fc1", spec.classifier_input(), spec.classifier_hidden, base_rng);
  add_linear(params, "baseline.fc2", spec.classifier_hidden, spec.num_predicates, base_rng);
  std::mt19937_64 eem_rng(derive_seed(seed, 101));
  eem::init_params(params, spec.eem(), eem_rng);
  std::mt19937_64 lmm_rng(derive_seed(seed, 102));
  lmm::init_params(params, spec.lmm(), lmm_rng);
  std::mt19937_64 sem_rng(derive_seed(seed, 103));
  sem::init_params(params, spec.sem(), sem_rng);
  return params;
}

evalkit::RelationScores ForwardOutputs::scores(std::int64_t scene_id) const {
  evalkit::RelationScores s;
  s.scene_id = scene_id;
  s.pairs = pairs;
  if (!pairs.empty()) {
    s.num_predicates = fused.dim(1);
    s.logits.assign(fused.data().begin(), fused.data().end());
  }
  return s;
}

std::vector<corpus::PairKey> all_pairs(const corpus::SceneSample& sample) {
  std::vector<corpus::PairKey> pairs;
  const auto n = static_cast<int>(sample.entities.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) pairs.emplace_back(i, j);
  return pairs;
}

ForwardOutputs forward_scene(const corpus::SceneSample& sample, const ParamStore& params,
                             const ModelSpec& spec, const PipelineConfig& config,
                             const Priors& priors, std::span<const corpus::PairKey> pairs) {
  ForwardOutputs out;
  out.pairs = pairs.empty() ? all_pairs(sample)
                            : std::vector<corpus::PairKey>(pairs.begin(), pairs.end());
  if (out.pairs.empty()) return out;  // fewer than two entities
  const std::size_t n = sample.entities.size();
  const auto& dims = spec.dims;

  std::vector<double> node_values;
  node_values.reserve(n * dims.node_dim);
  std::vector<int> labels;
  std::vector<corpus::Box> boxes;
  for (const auto& e : sample.entities) {
    if (e.feature.size() != dims.node_dim)
      throw ShapeError("node feature length " + std::to_string(e.feature.size()) +
                       " does not match model node_dim " + std::to_string(dims.node_dim));
    node_values.insert(node_values.end(), e.feature.begin(), e.feature.end());
    labels.push_back(e.category);
    boxes.push_back(e.box);
  }
  auto nodes = Tensor::from({n, dims.node_dim}, std::move(node_values));
  Tensor scene_rep;
  if (config.use_sem) {
    const auto sem_config = spec.sem();
    scene_rep = sem::scene_encode(params, sem_config, sem::pack_input(params, sem_config, labels, boxes));
  } else {
    scene_rep = Tensor::zeros({n, spec.sem_out});
  }
  auto node_hat = sem::node_update(scene_rep, nodes);

  std::vector<int> subj_idx, obj_idx;
  for (const auto& [i, j] : out.pairs) {
    subj_idx.push_back(i);
    obj_idx.push_back(j);
  }

  const auto lmm_config = spec.lmm();
  std::map<std::pair<int, int>, Tensor> attention_cache;
  std::vector<Tensor> pooled;
  pooled.reserve(out.pairs.size());
  for (const auto& [i, j] : out.pairs) {
    const auto& values = sample.edge(i, j);
    if (values.size() != dims.edge_size())
      throw ShapeError("edge feature length does not match model dims");
    auto edge = Tensor::from({dims.channels, dims.patch, dims.patch}, values);
    if (config.use_lmm) {
      const std::pair<int, int> cats{labels[static_cast<std::size_t>(i)],
                                     labels[static_cast<std::size_t>(j)]};
      auto it = attention_cache.find(cats);
      if (it == attention_cache.end()) {
        auto f = lmm::channel_attention(params, lmm_config,
                                        lmm::language_map(params, lmm_config, cats.first, cats.second));
        it = attention_cache.emplace(cats, std::move(f)).first;
      }
      edge = lmm::apply_edge_bias(edge, it->second);
    }
    pooled.push_back(ops::reshape(ops::pool2d(edge, ops::PoolMode::global_avg), {1, dims.channels}));
  }

  auto features = ops::concat({ops::gather_rows(node_hat, subj_idx),
                               ops::gather_rows(node_hat, obj_idx), ops::concat(pooled, 0)},
                              1);
  out.baseline_logits =
      linear(params, "baseline.fc2", ops::relu(linear(params, "baseline.fc1", features)));
  out.fused = out.baseline_logits;

  if (config.use_eem) {
    out.estimate = eem::estimate(params, pair_batch(sample, out.pairs));
    out.fused = ops::add(out.fused, config.eem_stop_gradient ? out.estimate.detach() : out.estimate);
  }
  if (config.use_freq_baseline) {
    if (!priors.freq) throw std::invalid_argument("use_freq_baseline needs a FREQ prior");
    std::vector<double> log_prior;
    log_prior.reserve(out.pairs.size() * spec.num_predicates);
    for (const auto& [i, j] : out.pairs) {
      auto dist = priors.freq->distribution(labels[static_cast<std::size_t>(i)],
                                            labels[static_cast<std::size_t>(j)]);
      for (double p : dist) log_prior.push_back(std::log(p));
    }
    out.fused = ops::add(out.fused,
                         Tensor::from({out.pairs.size(), spec.num_predicates}, std::move(log_prior)));
  }
  return out;
}

TrainingPairs training_pairs(const corpus::SceneSample& sample, std::size_t negative_ratio,
                             std::mt19937_64& rng) {
  TrainingPairs tp;
  std::set<corpus::PairKey> annotated;
  for (const auto& t : sample.triplets) {
    tp.pairs.emplace_back(t.subject, t.object);
    tp.labels.push_back(t.predicate);
    annotated.emplace(t.subject, t.object);
  }
  std::vector<corpus::PairKey> background;
  for (const auto& p : all_pairs(sample))
    if (!annotated.count(p)) background.push_back(p);
  std::shuffle(background.begin(), background.end(), rng);
  const std::size_t wanted = std::min(background.size(), negative_ratio * sample.triplets.size());
  for (std::size_t k = 0; k < wanted; ++k) {
    tp.pairs.push_back(background[k]);
    tp.labels.push_back(corpus::kBackground);
  }
  return tp;
}

LossTerms loss(const corpus::SceneSample& sample, const ForwardOutputs& outputs,
               std::span<const int> labels, const ModelSpec& spec, const PipelineConfig& config,
               const Priors& priors) {
  (void)spec;
  LossTerms terms;
  auto ce = ops::mean_cross_entropy(outputs.fused, labels);
  terms.classification = ce.item();
  terms.total = ce;
  if (config.use_eem && config.lambda_est > 0.0) {
    if (!priors.stats) throw std::invalid_argument("estimate loss needs statistics tables");
    auto targets = eem::joint_targets(pair_batch(sample, outputs.pairs), *priors.stats);
    auto est = eem::est_loss(outputs.estimate, targets);
    terms.estimate = est.item();
    terms.total = ops::add(ce, ops::scale(est, config.lambda_est));
  }
  return terms;
}

std::string epoch_log_line(const EpochLog& entry) {
  nlohmann::ordered_json j;
  j["epoch"] = entry.epoch;
  j["train_loss"] = entry.train_loss;
  j["val_mR@50"] = entry.val_mr50 ? nlohmann::ordered_json(*entry.val_mr50)
                                  : nlohmann::ordered_json(nullptr);
  return j.dump();
}

std::vector<evalkit::RelationScores> score_dataset(const corpus::Dataset& dataset,
                                                   const ParamStore& params, const ModelSpec& spec,
                                                   const PipelineConfig& config,
                                                   const Priors& priors, std::size_t threads) {
  std::vector<evalkit::RelationScores> out(dataset.scenes.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    NoGradGuard no_grad;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& scene = dataset.scenes[i];
      out[i] = forward_scene(scene, params, spec, config, priors).scores(scene.scene_id);
      if (out[i].num_predicates == 0) out[i].num_predicates = spec.num_predicates;
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, dataset.scenes.size()));
  if (threads == 1) {
    work(0, dataset.scenes.size());
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (dataset.scenes.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk, end = std::min(dataset.scenes.size(), begin + chunk);
    pool.emplace_back([&, t, begin, end] {
      try {
        work(begin, end);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

namespace {

double constrained_mr(const corpus::Dataset& dataset, const ParamStore& params,
                      const ModelSpec& spec, const PipelineConfig& config, const Priors& priors,
                      std::size_t k) {
  const auto scores = score_dataset(dataset, params, spec, config, priors);
  std::vector<evalkit::RankedPrediction> ranked;
  for (const auto& s : scores) ranked.push_back(evalkit::rank_constrained(s));
  return evalkit::mean_recall_at_k(ranked, dataset.scenes, spec.num_predicates, k).mean;
}

void check_finite(double value, std::size_t epoch) {
  if (!finite(value))
    throw DivergenceError("loss became non-finite in epoch " + std::to_string(epoch));
}

void clear_frozen(ParamStore& params, const PipelineConfig& config, const ModelSpec& spec) {
  if (!config.freeze_embeddings) return;
  std::vector<std::string> names{eem::kSubjectEmbedding, eem::kObjectEmbedding, "sem.w_c"};
  if (!spec.share_embeddings) {
    names.push_back("lmm.w_s");
    names.push_back("lmm.w_o");
  }
  for (const auto& name : names) params.get(name).zero_grad();
}

}  // namespace

TrainResult train(const corpus::Dataset& train_set, const corpus::Dataset* val_set,
                  const ModelSpec& spec, const PipelineConfig& config, const Priors& priors,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  spec.validate();
  if (train_set.scenes.empty()) throw std::invalid_argument("cannot train on an empty dataset");
  TrainResult result{init_params(spec, config.seed), {}};
  auto& params = result.params;
  std::mt19937_64 rng(derive_seed(config.seed, 200));
  std::vector<std::size_t> order(train_set.scenes.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t total_epochs = config.eem_pretrain_epochs + config.epochs;

  for (std::size_t epoch = 1; epoch <= total_epochs; ++epoch) {
    const bool pretrain = epoch <= config.eem_pretrain_epochs;
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const auto& scene = train_set.scenes[order[b]];
        auto tp = training_pairs(scene, config.negative_ratio, rng);
        if (tp.pairs.empty()) continue;
        Tensor scene_loss;
        if (pretrain) {
          if (!priors.stats) throw std::invalid_argument("estimate pretraining needs statistics");
          auto batch = pair_batch(scene, tp.pairs);
          scene_loss = ops::scale(eem::est_loss(eem::estimate(params, batch),
                                                eem::joint_targets(batch, *priors.stats)),
                                  config.lambda_est);
        } else {
          auto outputs = forward_scene(scene, params, spec, config, priors, tp.pairs);
          scene_loss = loss(scene, outputs, tp.labels, spec, config, priors).total;
        }
        const double value = scene_loss.item();
        check_finite(value, epoch);
        loss_sum += value;
        backward(ops::scale(scene_loss, inv_batch));
      }
      clear_frozen(params, config, spec);
      sgd_step(params, config.learning_rate);
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(order.size());
    check_finite(entry.train_loss, epoch);
    if (val_set && !val_set->scenes.empty())
      entry.val_mr50 = constrained_mr(*val_set, params, spec, config, priors, 50);
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return result;
}

std::vector<AblationRow> ablate(const corpus::Dataset& train_set, const corpus::Dataset& test_set,
                                const ModelSpec& spec, std::span<const PipelineConfig> grid,
                                const Priors& priors, std::size_t threads) {
  std::vector<AblationRow> rows;
  const auto train_keys = train_set.triplet_keys();
  const std::size_t ks[] = {20, 50, 100};
  for (const auto& config : grid) {
    auto trained = train(train_set, nullptr, spec, config, priors);
    auto scores = score_dataset(test_set, trained.params, spec, config, priors, threads);
    auto rep = evalkit::report(scores, test_set, train_keys, ks);
    rows.push_back({config.label(), config, rep.at(20).constrained.mean,
                    rep.at(50).constrained.mean, rep.at(100).constrained.mean});
  }
  return rows;
}

std::string ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << std::left << std::setw(28) << "model" << std::setw(10) << "mR@20" << std::setw(10)
      << "mR@50" << "mR@100\n";
  out << std::fixed << std::setprecision(2);
  for (const auto& r : rows)
    out << std::setw(28) << r.label << std::setw(10) << 100.0 * r.mr20 << std::setw(10)
        << 100.0 * r.mr50 << 100.0 * r.mr100 << "\n";
  return out.str();
}

}  // namespace cbias::pipeline
