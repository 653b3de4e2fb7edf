#pragma once

#include <string>
#include <vector>

#include "scoregrade/evaluation.hpp"

namespace scoregrade::cli {

/// "40.3" for 0.40335.
std::string format_percent(double fraction);

/// One decimal, no scaling.
std::string format_plain(double value);

/// Text tables, one block per dataset, one row per report. Cells are
/// "mean(std)"; Acc in percent, MSE plain. The best mean of each column is
/// starred (largest Acc, smallest MSE).
std::string render_tables(const std::vector<EvalReport>& reports);

}  // namespace scoregrade::cli
