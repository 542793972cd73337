#include "cbias/param_store.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cbias {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  auto leaf = Tensor::from(value.shape(), {value.data().begin(), value.data().end()}, true);
  return params_.emplace(name, std::move(leaf)).first->second;
}

bool ParamStore::contains(const std::string& name) const { return params_.count(name) > 0; }

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore copy;
  for (const auto& [name, t] : params_) copy.params_.emplace(name, t.clone());
  return copy;
}

std::string ParamStore::to_text() const {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [name, t] : params_) {
    nlohmann::ordered_json entry;
    entry["shape"] = t.shape();
    entry["values"] = std::vector<double>(t.data().begin(), t.data().end());
    doc[name] = std::move(entry);
  }
  return doc.dump(1) + "\n";
}

ParamStore ParamStore::from_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed checkpoint: ") + e.what());
  }
  if (!doc.is_object()) throw std::runtime_error("malformed checkpoint: not an object");
  ParamStore store;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    try {
      auto shape = it.value().at("shape").get<Shape>();
      auto values = it.value().at("values").get<std::vector<double>>();
      store.add(it.key(), Tensor::from(std::move(shape), std::move(values)));
    } catch (const std::exception& e) {
      throw std::runtime_error("malformed checkpoint entry '" + it.key() + "': " + e.what());
    }
  }
  return store;
}

void ParamStore::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_text();
}

ParamStore ParamStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

void ParamStore::assign_from(const ParamStore& other) {
  for (const auto& [name, src] : other.params_) {
    auto& dst = get(name);
    if (dst.shape() != src.shape()) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_string(dst.shape()) +
                       ", checkpoint has " + shape_string(src.shape()));
    }
    auto d = dst.mutable_data();
    std::copy(src.data().begin(), src.data().end(), d.begin());
  }
}

void sgd_step(ParamStore& params, double lr) {
  for (const auto& name : params.names()) {
    auto& t = params.get(name);
    auto v = t.mutable_data();
    auto g = t.mutable_grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    t.zero_grad();
  }
}

Tensor uniform_init(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values));
}

Tensor glorot_init(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_init({fan_in, fan_out}, bound, rng);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace cbias
