#pragma once

#include <optional>
#include <vector>

#include "errors.hpp"

namespace topiq {

// Correlations are nullopt when either input has zero variance (undefined,
// deliberately not reported as 0).
struct EvalReport {
  double accuracy = 0.0;  // threshold 0.5
  double f1 = 0.0;        // positive-class F1
  std::optional<double> pearson;
  std::optional<double> spearman;
};

EvalReport evaluate(const std::vector<double>& predictions,
                    const std::vector<double>& labels, bool binary);

double pearson_corr_or_nan(const std::vector<double>& a, const std::vector<double>& b);
// average ranks; ties get the mean of their rank block
std::vector<double> average_ranks(const std::vector<double>& v);

struct CodebookDiagnostics {
  double utilization = 0.0;  // fraction of codes with usage > 0
  double usage_entropy = 0.0;  // nats
};

CodebookDiagnostics codebook_diagnostics(const std::vector<double>& usage);

}  // namespace topiq
