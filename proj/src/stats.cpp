#include <cmath>
#include <stdexcept>

#include "cbias/corpus.hpp"

namespace cbias::corpus {
namespace {

void check_alpha(double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("smoothing alpha must be > 0");
}

std::size_t category_index(int category, std::size_t num_objects) {
  if (category < 0 || static_cast<std::size_t>(category) >= num_objects)
    throw std::out_of_range("category " + std::to_string(category) + " out of range");
  return static_cast<std::size_t>(category);
}

// Per-role predicate counts from the raw triplet table; fills the totals.
std::pair<std::vector<double>, std::vector<double>> fold_counts(StatsTables& st) {
  const std::size_t no = st.num_objects, nr = st.num_predicates;
  std::vector<double> s_counts(no * nr, 0.0), o_counts(no * nr, 0.0);
  st.subject_totals.assign(no, 0.0);
  st.object_totals.assign(no, 0.0);
  st.triplet_total = 0.0;
  for (std::size_t s = 0; s < no; ++s)
    for (std::size_t o = 0; o < no; ++o)
      for (std::size_t r = 0; r < nr; ++r) {
        const double c = st.freq[(s * no + o) * nr + r];
        s_counts[s * nr + r] += c;
        o_counts[o * nr + r] += c;
        st.subject_totals[s] += c;
        st.object_totals[o] += c;
        st.triplet_total += c;
      }
  return {std::move(s_counts), std::move(o_counts)};
}

}  // namespace

std::span<const double> StatsTables::subject_row(int category) const {
  return {&s_marg[category_index(category, num_objects) * num_predicates], num_predicates};
}

std::span<const double> StatsTables::object_row(int category) const {
  return {&o_marg[category_index(category, num_objects) * num_predicates], num_predicates};
}

double StatsTables::count(int s, int o, int p) const {
  const auto si = category_index(s, num_objects), oi = category_index(o, num_objects);
  return freq.at((si * num_objects + oi) * num_predicates + static_cast<std::size_t>(p));
}

StatsTables compute_marginals(const Dataset& dataset, double alpha) {
  check_alpha(alpha);
  if (dataset.scenes.empty()) throw std::invalid_argument("cannot compute statistics of an empty dataset");
  StatsTables st;
  st.num_objects = dataset.vocab.num_objects();
  st.num_predicates = dataset.vocab.num_predicates();
  st.alpha = alpha;
  const std::size_t no = st.num_objects, nr = st.num_predicates;
  st.freq.assign(no * no * nr, 0.0);
  for (const auto& scene : dataset.scenes) {
    for (const auto& t : scene.triplets) {
      const auto s = static_cast<std::size_t>(scene.entities.at(t.subject).category);
      const auto o = static_cast<std::size_t>(scene.entities.at(t.object).category);
      st.freq.at((s * no + o) * nr + static_cast<std::size_t>(t.predicate)) += 1.0;
    }
  }

  const auto [s_counts, o_counts] = fold_counts(st);

  st.s_marg.resize(no * nr);
  st.o_marg.resize(no * nr);
  const double smooth = alpha * static_cast<double>(nr);
  for (std::size_t c = 0; c < no; ++c)
    for (std::size_t r = 0; r < nr; ++r) {
      st.s_marg[c * nr + r] = (s_counts[c * nr + r] + alpha) / (st.subject_totals[c] + smooth);
      st.o_marg[c * nr + r] = (o_counts[c * nr + r] + alpha) / (st.object_totals[c] + smooth);
    }
  return st;
}

std::vector<double> joint_target(int subject_category, int object_category,
                                 const StatsTables& stats) {
  auto s = stats.subject_row(subject_category);
  auto o = stats.object_row(object_category);
  std::vector<double> out(s.size());
  for (std::size_t r = 0; r < s.size(); ++r) out[r] = s[r] * o[r];
  return out;
}

ParamStore StatsTables::to_params() const {
  ParamStore p;
  p.add("stats.alpha", Tensor::scalar(alpha));
  p.add("stats.s_marg", Tensor::from({num_objects, num_predicates}, s_marg));
  p.add("stats.o_marg", Tensor::from({num_objects, num_predicates}, o_marg));
  p.add("stats.freq", Tensor::from({num_objects, num_objects, num_predicates}, freq));
  return p;
}

StatsTables StatsTables::from_params(const ParamStore& params) {
  const auto& freq = params.get("stats.freq");
  if (freq.rank() != 3 || freq.dim(0) != freq.dim(1))
    throw std::runtime_error("stats.freq must be N_o x N_o x N_r");
  // Rebuild every derived table from the raw counts, then check they agree
  // with the stored marginals.
  StatsTables st;
  st.num_objects = freq.dim(0);
  st.num_predicates = freq.dim(2);
  st.alpha = params.get("stats.alpha").item();
  check_alpha(st.alpha);
  st.freq.assign(freq.data().begin(), freq.data().end());
  const std::size_t no = st.num_objects, nr = st.num_predicates;
  const auto [s_counts, o_counts] = fold_counts(st);
  st.s_marg.assign(params.get("stats.s_marg").data().begin(), params.get("stats.s_marg").data().end());
  st.o_marg.assign(params.get("stats.o_marg").data().begin(), params.get("stats.o_marg").data().end());
  if (st.s_marg.size() != no * nr || st.o_marg.size() != no * nr)
    throw std::runtime_error("stats marginals have the wrong shape");
  const double smooth = st.alpha * static_cast<double>(nr);
  for (std::size_t c = 0; c < no; ++c)
    for (std::size_t r = 0; r < nr; ++r) {
      const double s_expect = (s_counts[c * nr + r] + st.alpha) / (st.subject_totals[c] + smooth);
      const double o_expect = (o_counts[c * nr + r] + st.alpha) / (st.object_totals[c] + smooth);
      if (std::abs(s_expect - st.s_marg[c * nr + r]) > 1e-12 ||
          std::abs(o_expect - st.o_marg[c * nr + r]) > 1e-12)
        throw std::runtime_error("stats marginals disagree with stored counts");
    }
  return st;
}

void StatsTables::save(const std::filesystem::path& path) const { to_params().save(path); }

StatsTables StatsTables::load(const std::filesystem::path& path) {
  return from_params(ParamStore::load(path));
}

FreqPrior::FreqPrior(const StatsTables& stats, double alpha)
    : num_objects_(stats.num_objects), num_predicates_(stats.num_predicates) {
  check_alpha(alpha);
  const std::size_t no = num_objects_, nr = num_predicates_;
  table_.resize(no * no * nr);
  for (std::size_t pair = 0; pair < no * no; ++pair) {
    double total = 0.0;
    for (std::size_t r = 0; r < nr; ++r) total += stats.freq[pair * nr + r];
    for (std::size_t r = 0; r < nr; ++r)
      table_[pair * nr + r] = (stats.freq[pair * nr + r] + alpha) / (total + alpha * nr);
  }
}

std::span<const double> FreqPrior::distribution(int subject_category, int object_category) const {
  const auto s = category_index(subject_category, num_objects_);
  const auto o = category_index(object_category, num_objects_);
  return {&table_[(s * num_objects_ + o) * num_predicates_], num_predicates_};
}

FreqPrior freq_table(const Dataset& dataset, double alpha) {
  return FreqPrior(compute_marginals(dataset, alpha), alpha);
}

}  // namespace cbias::corpus
