#include "cbias/commands.hpp"

#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

namespace cbias::cli {
namespace fs = std::filesystem;

std::string files::snapshot(const std::string& command) { return command + ".config"; }

std::size_t worker_threads() {
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv(kThreadsEnv); cap && *cap) {
    char* end = nullptr;
    const long v = std::strtol(cap, &end, 10);
    if (*end != '\0' || v < 1)
      throw ConfigError(std::string(kThreadsEnv) + " must be a positive integer, got '" + cap + "'");
    threads = std::min(threads, static_cast<std::size_t>(v));
  }
  return threads;
}

namespace {

void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw ConfigError("output path " + dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw ConfigError("output directory " + dir.string() + " already exists; pass --force to overwrite");
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Runs `load`, turning any failure into a DataError that names the file.
template <class F>
auto load_input(const fs::path& path, F&& load) {
  if (!fs::exists(path)) throw DataError("missing file " + path.string());
  try {
    return load(path);
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

corpus::Dataset load_split(const fs::path& data_dir, const std::string& split) {
  std::string name;
  if (split == "train") name = files::train;
  else if (split == "val") name = files::val;
  else if (split == "test") name = files::test;
  else throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
  return load_input(data_dir / name, [](const fs::path& p) { return corpus::load_dataset(p); });
}

corpus::StatsTables load_stats(const fs::path& data_dir) {
  return load_input(data_dir / files::stats,
                    [](const fs::path& p) { return corpus::StatsTables::load(p); });
}

void check_stats(const corpus::StatsTables& stats, const corpus::Dataset& dataset) {
  if (stats.num_objects != dataset.vocab.num_objects() ||
      stats.num_predicates != dataset.vocab.num_predicates())
    throw DataError("stats tables do not match the dataset vocabulary");
}

std::string zero_shot_manifest(const corpus::DatasetSplits& splits) {
  nlohmann::ordered_json doc;
  doc["schema"] = "cbias.zero_shot";
  doc["version"] = 1;
  auto combos = nlohmann::ordered_json::array();
  const auto& vocab = splits.train.vocab;
  for (const auto& k : splits.zero_shot) {
    combos.push_back({{"subject", vocab.objects[static_cast<std::size_t>(k.subject_category)]},
                      {"predicate", vocab.predicates[static_cast<std::size_t>(k.predicate)]},
                      {"object", vocab.objects[static_cast<std::size_t>(k.object_category)]},
                      {"ids", {k.subject_category, k.predicate, k.object_category}}});
  }
  doc["combinations"] = std::move(combos);
  return doc.dump(1) + "\n";
}

ParamStore load_checkpoint(const fs::path& run_dir, const pipeline::ModelSpec& spec,
                           std::uint64_t seed) {
  auto stored = load_input(run_dir / files::checkpoint,
                           [](const fs::path& p) { return ParamStore::load(p); });
  auto params = pipeline::init_params(spec, seed);
  if (stored.names() != params.names())
    throw DataError("checkpoint parameters do not match the configured model");
  try {
    params.assign_from(stored);
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint does not fit the configured model: ") + e.what());
  }
  return params;
}

}  // namespace

void generate(const RunConfig& config, const fs::path& out_dir, bool force, std::ostream& log) {
  config.validate();
  corpus::DatasetSplits splits;
  try {
    splits = corpus::generate_splits(config.generator(), config.train_fraction(),
                                     config.val_fraction());
  } catch (const corpus::GenerationError& e) {
    throw ConfigError(e.what());
  }
  if (splits.train.scenes.empty()) throw ConfigError("train split is empty; raise data.scenes");
  // Statistics come from the training split only.
  const auto stats = corpus::compute_marginals(splits.train, config.smoothing());
  prepare_output(out_dir, force);
  corpus::save_dataset(splits.train, out_dir / files::train);
  corpus::save_dataset(splits.val, out_dir / files::val);
  corpus::save_dataset(splits.test, out_dir / files::test);
  stats.save(out_dir / files::stats);
  write_text(out_dir / files::zero_shot, zero_shot_manifest(splits));
  write_text(out_dir / files::snapshot("generate"), config.snapshot());
  log << "generated " << splits.train.scenes.size() << "/" << splits.val.scenes.size() << "/"
      << splits.test.scenes.size() << " train/val/test scenes (" << splits.train.num_triplets()
      << " training triplets) in " << out_dir.string() << "\n";
}

void train(const RunConfig& config, const fs::path& data_dir, const fs::path& out_dir, bool force,
           std::ostream& log) {
  config.validate();
  const auto train_set = load_split(data_dir, "train");
  const auto val_set = load_split(data_dir, "val");
  const auto stats = load_stats(data_dir);
  check_stats(stats, train_set);
  const corpus::FreqPrior freq(stats, stats.alpha);
  const pipeline::Priors priors{&stats, &freq};
  const auto spec = config.model(train_set);
  const auto pcfg = config.pipeline();
  if (train_set.scenes.empty()) throw DataError("training split has no scenes");

  prepare_output(out_dir, force);
  write_text(out_dir / files::snapshot("train"), config.snapshot());
  std::ofstream log_file(out_dir / files::train_log, std::ios::binary);
  auto result = pipeline::train(train_set, &val_set, spec, pcfg, priors,
                                [&](const pipeline::EpochLog& entry) {
                                  const auto line = pipeline::epoch_log_line(entry);
                                  log_file << line << "\n" << std::flush;
                                  log << line << "\n";
                                });
  result.params.save(out_dir / files::checkpoint);
  log << "trained " << pcfg.label() << " for " << result.log.size() << " epochs; checkpoint "
      << (out_dir / files::checkpoint).string() << "\n";
}

void evaluate(const RunConfig& config, const fs::path& data_dir, const fs::path& run_dir,
              const std::string& split, const fs::path& out_dir, std::ostream& log) {
  config.validate();
  const auto dataset = load_split(data_dir, split);
  const auto train_set = load_split(data_dir, "train");
  const auto stats = load_stats(data_dir);
  check_stats(stats, dataset);
  const corpus::FreqPrior freq(stats, stats.alpha);
  const pipeline::Priors priors{&stats, &freq};
  const auto spec = config.model(dataset);
  const auto pcfg = config.pipeline();
  const auto params = load_checkpoint(run_dir, spec, pcfg.seed);
  if (dataset.scenes.empty()) throw DataError("split '" + split + "' has no scenes");

  const auto scores = pipeline::score_dataset(dataset, params, spec, pcfg, priors, worker_threads());
  const auto ks = config.ks();
  const auto rep = evalkit::report(scores, dataset, train_set.triplet_keys(), ks);
  std::vector<evalkit::RankedPrediction> ranked;
  ranked.reserve(scores.size());
  for (const auto& s : scores) ranked.push_back(evalkit::rank_constrained(s));

  fs::create_directories(out_dir);
  write_text(out_dir / files::report, evalkit::report_json(rep));
  evalkit::save_predictions(ranked, out_dir / files::predictions);
  write_text(out_dir / files::snapshot("eval"), config.snapshot());
  log << evalkit::report_text(rep, ks.back());
}

void ablate(const RunConfig& config, const fs::path& data_dir, const std::string& split,
            const fs::path& out_dir, std::ostream& log) {
  config.validate();
  const auto train_set = load_split(data_dir, "train");
  const auto test_set = load_split(data_dir, split);
  const auto stats = load_stats(data_dir);
  check_stats(stats, train_set);
  const corpus::FreqPrior freq(stats, stats.alpha);
  const pipeline::Priors priors{&stats, &freq};
  const auto spec = config.model(train_set);
  const auto grid = config.ablation_grid();
  if (test_set.scenes.empty()) throw DataError("split '" + split + "' has no scenes");

  const auto rows = pipeline::ablate(train_set, test_set, spec, grid, priors, worker_threads());
  const auto table = pipeline::ablation_table(rows);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(out_dir / files::ablation, table);
    write_text(out_dir / files::snapshot("ablate"), config.snapshot());
  }
  log << table;
}

void report(const fs::path& report_path, std::size_t k, std::ostream& out) {
  const auto rep = load_input(report_path, [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return evalkit::parse_report_json(buf.str());
  });
  out << evalkit::report_text(rep, k);
}

int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Scene-graph relation prediction with label-derived priors"};
  app.name("cbias");
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir, data_dir, run_dir, split = "test", report_path;
  bool force = false;
  std::size_t table_k = 100;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "key = value config file");
    sub->add_option("-s,--set", overrides, "override, e.g. --set sem.heads=2")->take_all();
    sub->add_option("--seed", seed, "random seed (same as --set seed=N)");
  };
  auto* gen = app.add_subcommand("generate", "write a synthetic dataset directory");
  common(gen);
  gen->add_option("-o,--out", out_dir, "dataset directory")->required();
  gen->add_flag("-f,--force", force, "overwrite an existing directory");

  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  common(tr);
  tr->add_option("-d,--data", data_dir, "dataset directory")->required();
  tr->add_option("-o,--out", out_dir, "run directory")->required();
  tr->add_flag("-f,--force", force, "overwrite an existing run directory");

  auto* ev = app.add_subcommand("eval", "score a split with a trained checkpoint");
  common(ev);
  ev->add_option("-d,--data", data_dir, "dataset directory")->required();
  ev->add_option("-r,--run", run_dir, "run directory written by train")->required();
  ev->add_option("--split", split, "train, val or test");
  ev->add_option("-o,--out", out_dir, "where to write the report (default: the run directory)");

  auto* ab = app.add_subcommand("ablate", "train and evaluate each variant in ablate.grid");
  common(ab);
  ab->add_option("-d,--data", data_dir, "dataset directory")->required();
  ab->add_option("--split", split, "evaluation split");
  ab->add_option("-o,--out", out_dir, "optional directory for the table and config snapshot");

  auto* rp = app.add_subcommand("report", "print a metrics report");
  rp->add_option("report", report_path, "report.json written by eval")->required();
  rp->add_option("-k", table_k, "K for the per-predicate table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();  // already narrowed to the selected subcommand
      return exit_code::ok;
    }
    err << "cbias: " << e.what() << "\n";
    return exit_code::config;
  }

  try {
    auto* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    if (command == "report") {
      report(report_path, table_k, out);
      return exit_code::ok;
    }
    RunConfig config;
    if (command == "eval") {
      // The training snapshot fixes the architecture and toggles.
      const auto snap = fs::path(run_dir) / files::snapshot("train");
      if (!fs::exists(snap)) throw DataError("missing file " + snap.string());
      config.merge_file(snap);
    }
    if (!config_path.empty()) config.merge_file(config_path);
    for (const auto& o : overrides) config.set(o);
    if (seed) config.set("seed", std::to_string(*seed));

    if (command == "generate") generate(config, out_dir, force, out);
    else if (command == "train") train(config, data_dir, out_dir, force, out);
    else if (command == "eval") evaluate(config, data_dir, run_dir, split, out_dir.empty() ? run_dir : out_dir, out);
    else if (command == "ablate") ablate(config, data_dir, split, out_dir, out);
    return exit_code::ok;
  } catch (const ConfigError& e) {
    err << "cbias: config error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const DataError& e) {
    err << "cbias: data error: " << e.what() << "\n";
    return exit_code::data;
  } catch (const corpus::ParseError& e) {
    err << "cbias: data error: " << e.what() << "\n";
    return exit_code::data;
  } catch (const pipeline::DivergenceError& e) {
    err << "cbias: diverged: " << e.what() << "\n";
    return exit_code::divergence;
  } catch (const std::exception& e) {
    err << "cbias: error: " << e.what() << "\n";
    return exit_code::failure;
  }
}

}  // namespace cbias::cli
