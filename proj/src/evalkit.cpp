#include "cbias/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cbias::evalkit {
namespace {

using Json = nlohmann::ordered_json;

std::vector<double> probabilities(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

void check_scores(const RelationScores& scores) {
  if (scores.num_predicates < 2 ||
      scores.logits.size() != scores.pairs.size() * scores.num_predicates)
    throw std::invalid_argument("relation scores have inconsistent shape");
  for (double v : scores.logits)
    if (!std::isfinite(v)) throw std::invalid_argument("relation scores must be finite");
}

std::map<std::int64_t, const RankedPrediction*> index_predictions(
    std::span<const RankedPrediction> predictions) {
  std::map<std::int64_t, const RankedPrediction*> by_id;
  for (const auto& p : predictions)
    if (!by_id.emplace(p.scene_id, &p).second)
      throw std::invalid_argument("duplicate prediction for scene " + std::to_string(p.scene_id));
  return by_id;
}

const RankedPrediction& find_prediction(
    const std::map<std::int64_t, const RankedPrediction*>& by_id, std::int64_t scene_id) {
  auto it = by_id.find(scene_id);
  if (it == by_id.end())
    throw std::invalid_argument("no prediction for scene " + std::to_string(scene_id));
  return *it->second;
}

std::set<corpus::Triplet> top_k(const RankedPrediction& pred, std::size_t k) {
  std::set<corpus::Triplet> out;
  const std::size_t n = std::min(k, pred.candidates.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = pred.candidates[i];
    out.insert({c.subject, c.object, c.predicate});
  }
  return out;
}

Json recall_json(const RecallResult& r) {
  Json j;
  j["mean"] = r.mean;
  j["predicates_counted"] = r.predicates_counted;
  j["hits"] = r.hits;
  j["totals"] = r.totals;
  return j;
}

RecallResult recall_from_json(const Json& j) {
  RecallResult r;
  r.mean = j.at("mean").get<double>();
  r.predicates_counted = j.at("predicates_counted").get<std::size_t>();
  r.hits = j.at("hits").get<std::vector<std::size_t>>();
  r.totals = j.at("totals").get<std::vector<std::size_t>>();
  return r;
}

}  // namespace

void sort_candidates(std::vector<Candidate>& candidates) {
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.subject != b.subject) return a.subject < b.subject;
    if (a.object != b.object) return a.object < b.object;
    return a.predicate < b.predicate;
  });
}

RankedPrediction rank_constrained(const RelationScores& scores) {
  check_scores(scores);
  RankedPrediction out;
  out.scene_id = scores.scene_id;
  for (std::size_t i = 0; i < scores.pairs.size(); ++i) {
    const auto p = probabilities(scores.row(i));
    int best = 1;
    for (std::size_t r = 2; r < p.size(); ++r)
      if (p[r] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(r);
    out.candidates.push_back(
        {scores.pairs[i].first, scores.pairs[i].second, best, p[static_cast<std::size_t>(best)]});
  }
  sort_candidates(out.candidates);
  return out;
}

RankedPrediction rank_unconstrained(const RelationScores& scores) {
  check_scores(scores);
  RankedPrediction out;
  out.scene_id = scores.scene_id;
  for (std::size_t i = 0; i < scores.pairs.size(); ++i) {
    const auto p = probabilities(scores.row(i));
    for (std::size_t r = 1; r < p.size(); ++r)
      out.candidates.push_back(
          {scores.pairs[i].first, scores.pairs[i].second, static_cast<int>(r), p[r]});
  }
  sort_candidates(out.candidates);
  return out;
}

std::optional<double> RecallResult::recall(int predicate) const {
  const auto p = static_cast<std::size_t>(predicate);
  if (p >= totals.size() || totals[p] == 0) return std::nullopt;
  return static_cast<double>(hits[p]) / static_cast<double>(totals[p]);
}

std::size_t RecallResult::total_hits() const {
  std::size_t n = 0;
  for (auto h : hits) n += h;
  return n;
}

RecallResult mean_recall_at_k(std::span<const RankedPrediction> predictions,
                              std::span<const corpus::SceneSample> ground_truth,
                              std::size_t num_predicates, std::size_t k) {
  if (k == 0) throw std::invalid_argument("K must be >= 1");
  const auto by_id = index_predictions(predictions);
  RecallResult r;
  r.hits.assign(num_predicates, 0);
  r.totals.assign(num_predicates, 0);
  for (const auto& scene : ground_truth) {
    const auto top = top_k(find_prediction(by_id, scene.scene_id), k);
    for (const auto& t : scene.triplets) {
      const auto p = static_cast<std::size_t>(t.predicate);
      if (p == 0 || p >= num_predicates)
        throw std::invalid_argument("ground-truth predicate out of range");
      ++r.totals[p];
      if (top.count(t)) ++r.hits[p];
    }
  }
  double acc = 0.0;
  for (std::size_t p = 1; p < num_predicates; ++p) {
    if (r.totals[p] == 0) continue;
    acc += static_cast<double>(r.hits[p]) / static_cast<double>(r.totals[p]);
    ++r.predicates_counted;
  }
  r.mean = r.predicates_counted ? acc / static_cast<double>(r.predicates_counted) : 0.0;
  return r;
}

ZeroShotResult zero_shot_recall(std::span<const RankedPrediction> predictions,
                                std::span<const corpus::SceneSample> ground_truth,
                                const std::set<corpus::TripletKey>& train_keys, std::size_t k) {
  if (k == 0) throw std::invalid_argument("K must be >= 1");
  const auto by_id = index_predictions(predictions);
  ZeroShotResult z;
  for (const auto& scene : ground_truth) {
    std::optional<std::set<corpus::Triplet>> top;
    for (const auto& t : scene.triplets) {
      const corpus::TripletKey key{scene.entities.at(t.subject).category,
                                   scene.entities.at(t.object).category, t.predicate};
      if (train_keys.count(key)) continue;
      if (!top) top = top_k(find_prediction(by_id, scene.scene_id), k);
      ++z.total;
      if (top->count(t)) ++z.hits;
    }
  }
  if (z.total) z.recall = static_cast<double>(z.hits) / static_cast<double>(z.total);
  return z;
}

const KMetrics& MetricsReport::at(std::size_t k) const {
  for (const auto& m : per_k)
    if (m.k == k) return m;
  throw std::out_of_range("report has no K=" + std::to_string(k));
}

MetricsReport report(std::span<const RelationScores> scores, const corpus::Dataset& dataset,
                     const std::set<corpus::TripletKey>& train_keys,
                     std::span<const std::size_t> ks) {
  if (dataset.scenes.empty()) throw std::invalid_argument("cannot report on an empty dataset");
  if (scores.size() != dataset.scenes.size())
    throw std::invalid_argument("scene id mismatch: " + std::to_string(scores.size()) +
                                " scored scenes for " + std::to_string(dataset.scenes.size()) +
                                " dataset scenes");
  std::set<std::int64_t> ids;
  for (const auto& s : dataset.scenes) ids.insert(s.scene_id);
  std::vector<RankedPrediction> constrained, unconstrained;
  for (const auto& s : scores) {
    if (!ids.count(s.scene_id))
      throw std::invalid_argument("scene id mismatch: scores for unknown scene " +
                                  std::to_string(s.scene_id));
    constrained.push_back(rank_constrained(s));
    unconstrained.push_back(rank_unconstrained(s));
  }
  MetricsReport rep;
  rep.predicate_names = dataset.vocab.predicates;
  rep.num_scenes = dataset.scenes.size();
  rep.num_gt = dataset.num_triplets();
  const std::size_t nr = dataset.vocab.num_predicates();
  for (auto k : ks) {
    KMetrics m;
    m.k = k;
    m.constrained = mean_recall_at_k(constrained, dataset.scenes, nr, k);
    m.unconstrained = mean_recall_at_k(unconstrained, dataset.scenes, nr, k);
    m.zero_shot = zero_shot_recall(constrained, dataset.scenes, train_keys, k);
    rep.num_zero_shot_gt = m.zero_shot.total;
    rep.per_k.push_back(std::move(m));
  }
  return rep;
}

std::string report_json(const MetricsReport& rep) {
  Json j;
  j["schema"] = "cbias.report";
  j["version"] = kReportSchemaVersion;
  j["predicates"] = rep.predicate_names;
  j["num_scenes"] = rep.num_scenes;
  j["num_gt"] = rep.num_gt;
  j["num_zero_shot_gt"] = rep.num_zero_shot_gt;
  Json metrics = Json::array();
  for (const auto& m : rep.per_k) {
    Json e;
    e["k"] = m.k;
    e["mR"] = m.constrained.mean;
    e["ng_mR"] = m.unconstrained.mean;
    e["zR"] = m.zero_shot.recall ? Json(*m.zero_shot.recall) : Json(nullptr);
    e["zR_hits"] = m.zero_shot.hits;
    e["zR_count"] = m.zero_shot.total;
    e["constrained"] = recall_json(m.constrained);
    e["unconstrained"] = recall_json(m.unconstrained);
    metrics.push_back(std::move(e));
  }
  j["metrics"] = std::move(metrics);
  // Per-predicate constrained recall at the largest K, for bar charts.
  if (!rep.per_k.empty()) {
    const auto& last = rep.per_k.back();
    Json chart = Json::array();
    for (std::size_t p = 1; p < rep.predicate_names.size(); ++p) {
      const auto r = last.constrained.recall(static_cast<int>(p));
      chart.push_back({{"predicate", rep.predicate_names[p]},
                       {"gt", last.constrained.totals[p]},
                       {"recall", r ? Json(*r) : Json(nullptr)}});
    }
    j["per_predicate_k"] = last.k;
    j["per_predicate"] = std::move(chart);
  }
  return j.dump(2) + "\n";
}

MetricsReport parse_report_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed report: ") + e.what());
  }
  try {
    if (j.at("schema").get<std::string>() != "cbias.report") throw std::runtime_error("not a report");
    if (j.at("version").get<int>() != kReportSchemaVersion)
      throw std::runtime_error("report schema version mismatch");
    MetricsReport rep;
    rep.predicate_names = j.at("predicates").get<std::vector<std::string>>();
    rep.num_scenes = j.at("num_scenes").get<std::size_t>();
    rep.num_gt = j.at("num_gt").get<std::size_t>();
    rep.num_zero_shot_gt = j.at("num_zero_shot_gt").get<std::size_t>();
    for (const auto& e : j.at("metrics")) {
      KMetrics m;
      m.k = e.at("k").get<std::size_t>();
      m.constrained = recall_from_json(e.at("constrained"));
      m.unconstrained = recall_from_json(e.at("unconstrained"));
      m.zero_shot.hits = e.at("zR_hits").get<std::size_t>();
      m.zero_shot.total = e.at("zR_count").get<std::size_t>();
      if (!e.at("zR").is_null()) m.zero_shot.recall = e.at("zR").get<double>();
      rep.per_k.push_back(std::move(m));
    }
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed report: ") + e.what());
  }
}

std::string report_text(const MetricsReport& rep, std::size_t table_k) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "scenes: " << rep.num_scenes << "  gt triplets: " << rep.num_gt
      << "  zero-shot gt: " << rep.num_zero_shot_gt << "\n\n";
  out << std::left << std::setw(8) << "K" << std::setw(10) << "mR" << std::setw(10) << "ng-mR"
      << "zR\n";
  for (const auto& m : rep.per_k) {
    out << std::setw(8) << m.k << std::setw(10) << 100.0 * m.constrained.mean << std::setw(10)
        << 100.0 * m.unconstrained.mean;
    if (m.zero_shot.recall)
      out << 100.0 * *m.zero_shot.recall;
    else
      out << "n/a";
    out << "\n";
  }
  const KMetrics* table = nullptr;
  for (const auto& m : rep.per_k)
    if (m.k == table_k) table = &m;
  if (!table && !rep.per_k.empty()) table = &rep.per_k.back();
  if (table) {
    out << "\nper-predicate recall@" << table->k << " (graph constrained)\n";
    for (std::size_t p = 1; p < rep.predicate_names.size(); ++p) {
      out << "  " << std::setw(20) << rep.predicate_names[p] << std::setw(8)
          << table->constrained.totals[p];
      const auto r = table->constrained.recall(static_cast<int>(p));
      if (r)
        out << 100.0 * *r;
      else
        out << "-";
      out << "\n";
    }
  }
  return out.str();
}

void save_predictions(std::span<const RankedPrediction> predictions,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  Json header{{"schema", "cbias.predictions"},
              {"version", kPredictionsSchemaVersion},
              {"scenes", predictions.size()}};
  out << header.dump() << '\n';
  for (const auto& p : predictions) {
    Json rec;
    rec["scene_id"] = p.scene_id;
    Json cands = Json::array();
    for (const auto& c : p.candidates) cands.push_back({c.subject, c.object, c.predicate, c.score});
    rec["candidates"] = std::move(cands);
    out << rec.dump() << '\n';
  }
}

std::vector<RankedPrediction> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw corpus::ParseError(1, "missing predictions header");
  std::size_t expected = 0;
  try {
    const auto h = Json::parse(line);
    if (h.at("schema").get<std::string>() != "cbias.predictions" ||
        h.at("version").get<int>() != kPredictionsSchemaVersion)
      throw std::runtime_error("unsupported predictions schema");
    expected = h.at("scenes").get<std::size_t>();
  } catch (const std::exception& e) {
    throw corpus::ParseError(1, e.what());
  }
  std::vector<RankedPrediction> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto rec = Json::parse(line);
      RankedPrediction p;
      p.scene_id = rec.at("scene_id").get<std::int64_t>();
      for (const auto& c : rec.at("candidates"))
        p.candidates.push_back({c.at(0).get<int>(), c.at(1).get<int>(), c.at(2).get<int>(),
                                c.at(3).get<double>()});
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw corpus::ParseError(line_no, e.what());
    }
  }
  if (out.size() != expected)
    throw corpus::ParseError(line_no, "expected " + std::to_string(expected) + " scenes, found " +
                                          std::to_string(out.size()));
  return out;
}

}  // namespace cbias::evalkit
