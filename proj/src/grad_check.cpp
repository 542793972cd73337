#include "cbias/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace cbias {

std::string GradCheckReport::summary() const {
  std::ostringstream out;
  out << (passed ? "ok" : "FAILED") << " max_rel_err=" << max_relative_error
      << " checked=" << entries_checked << " worst=(input " << worst_input << ", index "
      << worst_index << ", analytic " << worst_analytic << ", numeric " << worst_numeric
      << ")";
  return out.str();
}

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options) {
  for (auto& in : inputs) {
    if (!in.requires_grad()) throw std::invalid_argument("grad_check input lacks requires_grad");
    in.zero_grad();
  }
  {
    Tensor loss = f();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].mutable_data();
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (options.max_entries_per_input && idx.size() > options.max_entries_per_input) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.max_entries_per_input);
    }
    for (auto i : idx) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double plus = f().item();
      values[i] = saved - options.step;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      double err = std::abs(a - numeric) / denom;
      if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
      ++report.entries_checked;
      if (report.entries_checked == 1 || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_input = t;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_relative_error <= options.tolerance;
  for (auto& in : inputs) in.zero_grad();
  return report;
}

}  // namespace cbias
