#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace topiq {

double pearson_corr_or_nan(const std::vector<double>& a, const std::vector<double>& b) {
  size_t n = a.size();
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
  double num = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double da = a[i] - ma, db = b[i] - mb;
    num += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return std::nan("");
  return num / std::sqrt(va * vb);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t i, size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

EvalReport evaluate(const std::vector<double>& predictions,
                    const std::vector<double>& labels, bool binary) {
  if (predictions.size() != labels.size())
    throw UsageError("evaluate: predictions and labels differ in length");
  if (predictions.size() < 2) throw UsageError("evaluate: need at least 2 points");

  EvalReport r;
  size_t n = predictions.size();
  if (binary) {
    int64_t tp = 0, fp = 0, fn = 0, correct = 0;
    for (size_t i = 0; i < n; ++i) {
      bool p = predictions[i] >= 0.5;
      bool y = labels[i] >= 0.5;
      correct += p == y;
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp + fn);
    r.f1 = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
  }
  double p = pearson_corr_or_nan(predictions, labels);
  if (!std::isnan(p)) r.pearson = p;
  double s = pearson_corr_or_nan(average_ranks(predictions), average_ranks(labels));
  if (!std::isnan(s)) r.spearman = s;
  return r;
}

CodebookDiagnostics codebook_diagnostics(const std::vector<double>& usage) {
  double total = std::accumulate(usage.begin(), usage.end(), 0.0);
  if (!(total > 0.0)) throw UsageError("codebook_diagnostics: zero total usage");
  CodebookDiagnostics d;
  int used = 0;
  for (double u : usage) {
    if (u > 0.0) {
      ++used;
      double p = u / total;
      d.usage_entropy -= p * std::log(p);
    }
  }
  d.utilization = static_cast<double>(used) / static_cast<double>(usage.size());
  return d;
}

}  // namespace topiq
