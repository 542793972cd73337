#include <fstream>
#include <sstream>

#include "cbias/codec.hpp"
#include "cbias/corpus.hpp"
#include "json.hpp"

namespace cbias::corpus {
namespace {

using Json = nlohmann::ordered_json;
constexpr const char* kSchemaName = "cbias.dataset";

Json header_json(const Dataset& ds) {
  Json h;
  h["schema"] = kSchemaName;
  h["version"] = kDatasetSchemaVersion;
  h["objects"] = ds.vocab.objects;
  h["predicates"] = ds.vocab.predicates;
  h["dims"] = {{"node_dim", ds.dims.node_dim},
               {"channels", ds.dims.channels},
               {"patch", ds.dims.patch}};
  h["scenes"] = ds.scenes.size();
  return h;
}

Json scene_json(const SceneSample& scene) {
  Json j;
  j["scene_id"] = scene.scene_id;
  Json entities = Json::array();
  for (const auto& e : scene.entities) {
    entities.push_back({{"category", e.category},
                        {"box", {e.box.x, e.box.y, e.box.w, e.box.h}},
                        {"feature", codec::encode_f64(e.feature)}});
  }
  j["entities"] = std::move(entities);
  Json edges = Json::array();
  for (const auto& [key, values] : scene.edge_features) {
    edges.push_back({{"subject", key.first},
                     {"object", key.second},
                     {"feature", codec::encode_f64(values)}});
  }
  j["edges"] = std::move(edges);
  Json triplets = Json::array();
  for (const auto& t : scene.triplets) triplets.push_back({t.subject, t.object, t.predicate});
  j["triplets"] = std::move(triplets);
  return j;
}

SceneSample scene_from_json(const Json& j) {
  SceneSample scene;
  scene.scene_id = j.at("scene_id").get<std::int64_t>();
  for (const auto& e : j.at("entities")) {
    Entity ent;
    ent.category = e.at("category").get<int>();
    const auto box = e.at("box").get<std::vector<double>>();
    if (box.size() != 4) throw std::invalid_argument("box must have 4 coordinates");
    ent.box = {box[0], box[1], box[2], box[3]};
    ent.feature = codec::decode_f64(e.at("feature").get<std::string>());
    scene.entities.push_back(std::move(ent));
  }
  for (const auto& e : j.at("edges")) {
    PairKey key{e.at("subject").get<int>(), e.at("object").get<int>()};
    if (!scene.edge_features.emplace(key, codec::decode_f64(e.at("feature").get<std::string>())).second)
      throw std::invalid_argument("duplicate edge feature");
  }
  for (const auto& t : j.at("triplets")) {
    const auto v = t.get<std::vector<int>>();
    if (v.size() != 3) throw std::invalid_argument("triplet must have 3 entries");
    scene.triplets.push_back({v[0], v[1], v[2]});
  }
  return scene;
}

}  // namespace

ParseError::ParseError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

std::string serialize_dataset(const Dataset& dataset) {
  std::string out = header_json(dataset).dump();
  out += '\n';
  for (const auto& scene : dataset.scenes) {
    out += scene_json(scene).dump();
    out += '\n';
  }
  return out;
}

Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  Dataset ds;
  std::size_t expected = 0;

  if (!std::getline(in, line)) throw ParseError(1, "missing dataset header");
  line_no = 1;
  try {
    const auto h = Json::parse(line);
    if (h.at("schema").get<std::string>() != kSchemaName)
      throw std::invalid_argument("not a dataset file");
    const int version = h.at("version").get<int>();
    if (version != kDatasetSchemaVersion)
      throw std::invalid_argument("schema version " + std::to_string(version) + ", expected " +
                                  std::to_string(kDatasetSchemaVersion));
    ds.vocab.objects = h.at("objects").get<std::vector<std::string>>();
    ds.vocab.predicates = h.at("predicates").get<std::vector<std::string>>();
    ds.vocab.validate();
    const auto& d = h.at("dims");
    ds.dims = {d.at("node_dim").get<std::size_t>(), d.at("channels").get<std::size_t>(),
               d.at("patch").get<std::size_t>()};
    expected = h.at("scenes").get<std::size_t>();
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(line_no, std::string("bad header: ") + e.what());
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto scene = scene_from_json(Json::parse(line));
      scene.validate(ds.vocab, ds.dims);
      ds.scenes.push_back(std::move(scene));
    } catch (const std::exception& e) {
      throw ParseError(line_no, e.what());
    }
  }
  if (ds.scenes.size() != expected) {
    throw ParseError(line_no + 1, "expected " + std::to_string(expected) + " scenes, found " +
                                      std::to_string(ds.scenes.size()) + " (truncated file?)");
  }
  if (!text.empty() && text.back() != '\n')
    throw ParseError(line_no, "missing final newline (truncated file?)");
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << serialize_dataset(dataset);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str());
}

std::uint64_t dataset_fingerprint(const Dataset& dataset) {
  return codec::fnv1a(serialize_dataset(dataset));
}

}  // namespace cbias::corpus
