#include "scoregrade_cli/tables.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace scoregrade::cli {

namespace {

std::string fixed1(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

struct Row {
  std::string label;
  const DatasetSummary* summary;
};

}  // namespace

std::string format_percent(double fraction) { return fixed1(fraction * 100.0); }

std::string format_plain(double value) { return fixed1(value); }

std::string render_tables(const std::vector<EvalReport>& reports) {
  std::vector<std::string> order;
  for (const auto& r : reports) {
    for (const auto& d : r.datasets) {
      if (std::find(order.begin(), order.end(), d.dataset_id) == order.end()) order.push_back(d.dataset_id);
    }
  }

  std::ostringstream out;
  for (const auto& id : order) {
    std::vector<Row> rows;
    for (const auto& r : reports) {
      for (const auto& d : r.datasets) {
        if (d.dataset_id == id) rows.push_back({r.label.empty() ? "model" : r.label, &d});
      }
    }
    double best0 = -INFINITY, best1 = -INFINITY, best_mse = INFINITY;
    for (const auto& row : rows) {
      best0 = std::max(best0, row.summary->acc0.mean);
      best1 = std::max(best1, row.summary->acc1.mean);
      best_mse = std::min(best_mse, row.summary->mse.mean);
    }
    std::size_t label_w = 5;
    for (const auto& row : rows) label_w = std::max(label_w, row.label.size());

    auto cell = [](const FoldStat& s, bool percent, bool best) {
      std::string c = percent ? format_percent(s.mean) + "(" + format_percent(s.std) + ")"
                              : format_plain(s.mean) + "(" + format_plain(s.std) + ")";
      return best ? c + "*" : c;
    };
    auto pad = [](std::string s, std::size_t w) {
      s.resize(std::max(s.size(), w), ' ');
      return s;
    };
    out << id << '\n';
    out << pad("Model", label_w) << "  " << pad("Acc0 (%)", 13) << "  " << pad("Acc1 (%)", 13) << "  MSE\n";
    for (const auto& row : rows) {
      const auto& s = *row.summary;
      out << pad(row.label, label_w) << "  " << pad(cell(s.acc0, true, s.acc0.mean == best0), 13) << "  "
          << pad(cell(s.acc1, true, s.acc1.mean == best1), 13) << "  " << cell(s.mse, false, s.mse.mean == best_mse)
          << '\n';
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace scoregrade::cli
