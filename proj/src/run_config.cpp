#include "cbias/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cbias::cli {
namespace {

enum class Kind { count, number, flag, list, grid };

struct KeySpec {
  const char* key;
  const char* value;
  Kind kind;
};

// Desk-scale defaults. Full-scale counterparts are listed in the README.
constexpr KeySpec kKeys[] = {
    {"seed", "0", Kind::count},
    {"data.objects", "20", Kind::count},
    {"data.predicates", "15", Kind::count},
    {"data.min_entities", "3", Kind::count},
    {"data.max_entities", "6", Kind::count},
    {"data.scenes", "500", Kind::count},
    {"data.zipf", "1.2", Kind::number},
    {"data.language_dominance", "0.9", Kind::number},
    {"data.noise_sigma", "0.5", Kind::number},
    {"data.relation_density", "0.3", Kind::number},
    {"data.affinity_sharpness", "1.5", Kind::number},
    {"data.category_skew", "0.5", Kind::number},
    {"data.node_dim", "64", Kind::count},
    {"data.patch", "4", Kind::count},
    {"data.zero_shot", "0", Kind::count},
    {"data.train_fraction", "0.7", Kind::number},
    {"data.val_fraction", "0.1", Kind::number},
    {"data.smoothing", "0.001", Kind::number},
    {"model.embed_dim", "16", Kind::count},
    {"eem.hidden", "64", Kind::count},
    {"eem.mlp_hidden", "256", Kind::count},
    {"lmm.channels", "8", Kind::count},
    {"lmm.pool_size", "4", Kind::count},
    {"lmm.share_embeddings", "true", Kind::flag},
    {"lmm.zero_init", "false", Kind::flag},
    {"sem.layers", "2", Kind::count},
    {"sem.heads", "4", Kind::count},
    {"sem.dim", "32", Kind::count},
    {"sem.ffn", "64", Kind::count},
    {"sem.out", "32", Kind::count},
    {"sem.attention_residual", "false", Kind::flag},
    {"baseline.hidden", "128", Kind::count},
    {"train.use_eem", "true", Kind::flag},
    {"train.use_lmm", "true", Kind::flag},
    {"train.use_sem", "true", Kind::flag},
    {"train.use_freq", "false", Kind::flag},
    {"train.lambda_est", "1.0", Kind::number},
    {"train.learning_rate", "0.05", Kind::number},
    {"train.epochs", "20", Kind::count},
    {"train.batch_size", "8", Kind::count},
    {"train.negative_ratio", "1", Kind::count},
    {"train.eem_stop_gradient", "false", Kind::flag},
    {"train.freeze_embeddings", "false", Kind::flag},
    {"train.eem_pretrain_epochs", "0", Kind::count},
    {"eval.ks", "1,5,10,20,50,100", Kind::list},
    {"ablate.grid", "baseline,eem,eem+lmm,eem+lmm+sem", Kind::grid},
};

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : kKeys)
    if (key == k.key) return &k;
  return nullptr;
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, sep)) parts.push_back(trim(part));
  return parts;
}

std::uint64_t parse_count(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty())
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

double parse_number(const std::string& key, const std::string& text) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty() || !std::isfinite(v))
    throw ConfigError(key + ": expected a finite number, got '" + text + "'");
  return v;
}

bool parse_flag(const std::string& key, const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& k : kKeys) values_[k.key] = k.value;
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  merge_text(buf.str(), path.string());
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::stringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      set(line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(std::string_view(assignment).substr(0, eq)),
      trim(std::string_view(assignment).substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  switch (spec->kind) {
    case Kind::count: parse_count(key, value); break;
    case Kind::number: parse_number(key, value); break;
    case Kind::flag: parse_flag(key, value); break;
    case Kind::list:
      for (const auto& part : split(value, ',')) parse_count(key, part);
      break;
    case Kind::grid:
      for (const auto& part : split(value, ',')) parse_variant(part, {});
      break;
  }
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::number(const std::string& key) const { return parse_number(key, get(key)); }

std::size_t RunConfig::count(const std::string& key) const {
  return static_cast<std::size_t>(parse_count(key, get(key)));
}

std::uint64_t RunConfig::seed() const { return parse_count("seed", get("seed")); }

bool RunConfig::flag(const std::string& key) const { return parse_flag(key, get(key)); }

std::vector<std::size_t> RunConfig::count_list(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& part : split(get(key), ','))
    out.push_back(static_cast<std::size_t>(parse_count(key, part)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string RunConfig::snapshot() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

corpus::GeneratorConfig RunConfig::generator() const {
  corpus::GeneratorConfig g;
  g.num_objects = count("data.objects");
  g.num_predicates = count("data.predicates");
  g.min_entities = count("data.min_entities");
  g.max_entities = count("data.max_entities");
  g.num_scenes = count("data.scenes");
  g.zipf_exponent = number("data.zipf");
  g.language_dominance = number("data.language_dominance");
  g.noise_sigma = number("data.noise_sigma");
  g.relation_density = number("data.relation_density");
  g.affinity_sharpness = number("data.affinity_sharpness");
  g.category_skew = number("data.category_skew");
  g.dims.node_dim = count("data.node_dim");
  g.dims.channels = count("lmm.channels");
  g.dims.patch = count("data.patch");
  g.zero_shot_count = count("data.zero_shot");
  g.seed = seed();
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return g;
}

pipeline::ModelSpec RunConfig::model(const corpus::Dataset& dataset) const {
  auto spec = pipeline::ModelSpec::for_dataset(dataset);
  if (count("lmm.channels") != dataset.dims.channels)
    throw ConfigError("lmm.channels = " + get("lmm.channels") + " but the dataset has " +
                      std::to_string(dataset.dims.channels) + " edge channels");
  spec.embed_dim = count("model.embed_dim");
  spec.eem_hidden = count("eem.hidden");
  spec.eem_mlp_hidden = count("eem.mlp_hidden");
  spec.lmm_pool = count("lmm.pool_size");
  spec.share_embeddings = flag("lmm.share_embeddings");
  spec.lmm_zero_init = flag("lmm.zero_init");
  spec.sem_layers = count("sem.layers");
  spec.sem_heads = count("sem.heads");
  spec.sem_dim = count("sem.dim");
  spec.sem_ffn = count("sem.ffn");
  spec.sem_out = count("sem.out");
  spec.sem_attention_residual = flag("sem.attention_residual");
  spec.classifier_hidden = count("baseline.hidden");
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return spec;
}

pipeline::PipelineConfig RunConfig::pipeline() const {
  pipeline::PipelineConfig c;
  c.use_eem = flag("train.use_eem");
  c.use_lmm = flag("train.use_lmm");
  c.use_sem = flag("train.use_sem");
  c.use_freq_baseline = flag("train.use_freq");
  c.lambda_est = number("train.lambda_est");
  c.learning_rate = number("train.learning_rate");
  c.epochs = count("train.epochs");
  c.batch_size = count("train.batch_size");
  c.seed = seed();
  c.negative_ratio = count("train.negative_ratio");
  c.eem_stop_gradient = flag("train.eem_stop_gradient");
  c.freeze_embeddings = flag("train.freeze_embeddings");
  c.eem_pretrain_epochs = count("train.eem_pretrain_epochs");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::vector<pipeline::PipelineConfig> RunConfig::ablation_grid() const {
  const auto base = pipeline();
  std::vector<pipeline::PipelineConfig> grid;
  for (const auto& label : split(get("ablate.grid"), ',')) grid.push_back(parse_variant(label, base));
  if (grid.empty()) throw ConfigError("ablate.grid is empty");
  return grid;
}

void RunConfig::validate() const {
  generator();
  pipeline();
  ks();
  ablation_grid();
  const double train = train_fraction(), val = val_fraction();
  if (!(train > 0.0) || !(val >= 0.0) || train + val >= 1.0)
    throw ConfigError("data.train_fraction and data.val_fraction must satisfy 0 < train, "
                      "0 <= val, train + val < 1");
  if (!(smoothing() > 0.0)) throw ConfigError("data.smoothing must be > 0");
  for (auto k : ks())
    if (k == 0) throw ConfigError("eval.ks entries must be >= 1");
}

pipeline::PipelineConfig parse_variant(const std::string& label,
                                       const pipeline::PipelineConfig& base) {
  auto c = base;
  c.use_eem = c.use_lmm = c.use_sem = c.use_freq_baseline = false;
  if (label.empty()) throw ConfigError("empty ablation variant");
  for (const auto& part : split(label, '+')) {
    if (part == "baseline") continue;
    if (part == "eem") c.use_eem = true;
    else if (part == "lmm") c.use_lmm = true;
    else if (part == "sem") c.use_sem = true;
    else if (part == "freq") c.use_freq_baseline = true;
    else throw ConfigError("unknown ablation component '" + part + "' in '" + label + "'");
  }
  if (c.use_eem && c.use_freq_baseline)
    throw ConfigError("ablation variant '" + label + "' combines eem and freq");
  if (!c.use_eem) c.eem_pretrain_epochs = 0;
  return c;
}

}  // namespace cbias::cli
