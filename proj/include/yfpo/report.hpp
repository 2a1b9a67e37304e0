#pragma once

// Result tables (Avg / Best / deltas vs a baseline method, at 4-decimal
// precision with half-even rounding) and training-dynamics plots emitted as
// a single SVG plus one CSV per panel. Report generation is pure: the same
// run logs always produce byte-identical outputs, and the SVG is rendered
// from the re-parsed CSV data so the data files are authoritative.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "yfpo/train.hpp"

namespace yfpo {

// ---------------------------------------------------------------------------
// Rounding / formatting in 1e-4 units
// ---------------------------------------------------------------------------

/// Round to 4 decimals, ties to even (the default fp rounding mode), and
/// return the value in integer 1e-4 units so later deltas are exact.
inline long long round_half_even_e4(double x) {
  return static_cast<long long>(std::nearbyint(x * 1e4));
}

inline std::string format_e4(long long v_e4, bool force_sign = false) {
  const bool negative = v_e4 < 0;
  const long long a = negative ? -v_e4 : v_e4;
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s%lld.%04lld", negative ? "-" : (force_sign ? "+" : ""),
                a / 10000, a % 10000);
  return buf;
}

// ---------------------------------------------------------------------------
// Result table
// ---------------------------------------------------------------------------

struct RunSummary {
  std::string train_data;
  std::string method;  // baseline rows are matched on this label
  std::optional<double> lambda;
  std::array<double, 3> ckpt_acc{};
};

struct ResultRow {
  RunSummary run;
  long long avg_e4 = 0;   // mean of the three checkpoint accuracies, rounded
  long long best_e4 = 0;  // max of the three
  std::optional<long long> delta_avg_e4;   // vs the baseline row's avg
  std::optional<long long> delta_best_e4;  // vs the baseline row's best
  bool is_baseline = false;
};

/// Collapses one run log into a summary row; requires exactly three
/// checkpoint records.
inline RunSummary summarize_run(std::string train_data, std::string method,
                                std::optional<double> lambda, const RunLog& log) {
  if (log.checkpoints.size() != 3) {
    throw ReportError("run '" + train_data + "/" + method + "' has " +
                      std::to_string(log.checkpoints.size()) + " checkpoints, expected 3");
  }
  RunSummary s;
  s.train_data = std::move(train_data);
  s.method = std::move(method);
  s.lambda = lambda;
  for (std::size_t i = 0; i < 3; ++i) s.ckpt_acc[i] = log.checkpoints[i].eval_accuracy;
  return s;
}

/// Avg/Best/delta arithmetic. Every train_data group must contain a row whose
/// method equals `baseline_method`; deltas are taken against that row within
/// the group, on the rounded values, so they match hand arithmetic on the
/// printed cells. The baseline's own deltas are zero.
inline std::vector<ResultRow> build_result_table(const std::vector<RunSummary>& runs,
                                                 const std::string& baseline_method) {
  if (runs.empty()) throw ReportError("result table: no runs");
  std::vector<ResultRow> rows;
  rows.reserve(runs.size());
  for (const auto& run : runs) {
    ResultRow row;
    row.run = run;
    const double mean = (run.ckpt_acc[0] + run.ckpt_acc[1] + run.ckpt_acc[2]) / 3.0;
    const double best = std::max({run.ckpt_acc[0], run.ckpt_acc[1], run.ckpt_acc[2]});
    row.avg_e4 = round_half_even_e4(mean);
    row.best_e4 = round_half_even_e4(best);
    row.is_baseline = run.method == baseline_method;
    rows.push_back(row);
  }
  // Resolve deltas per train_data group.
  std::map<std::string, const ResultRow*> baselines;
  for (const auto& row : rows) {
    if (row.is_baseline && !baselines.count(row.run.train_data)) {
      baselines[row.run.train_data] = &row;
    }
  }
  for (auto& row : rows) {
    auto it = baselines.find(row.run.train_data);
    if (it == baselines.end()) {
      throw ReportError("result table: no '" + baseline_method + "' baseline for train data '" +
                        row.run.train_data + "'");
    }
    row.delta_avg_e4 = row.avg_e4 - it->second->avg_e4;
    row.delta_best_e4 = row.best_e4 - it->second->best_e4;
  }
  return rows;
}

inline std::string format_lambda(const std::optional<double>& lambda) {
  if (!lambda.has_value()) return "--";
  std::ostringstream os;
  os << *lambda;
  return os.str();
}

inline std::string format_result_table(const std::vector<ResultRow>& rows) {
  std::vector<std::array<std::string, 10>> cells;
  cells.push_back({"Train Data", "Method", "lambda", "Ckpt-1", "Ckpt-2", "Ckpt-3", "Avg.", "Best",
                   "dAvg.", "dBest"});
  for (const auto& row : rows) {
    cells.push_back({row.run.train_data, row.run.method, format_lambda(row.run.lambda),
                     format_e4(round_half_even_e4(row.run.ckpt_acc[0])),
                     format_e4(round_half_even_e4(row.run.ckpt_acc[1])),
                     format_e4(round_half_even_e4(row.run.ckpt_acc[2])),
                     format_e4(row.avg_e4), format_e4(row.best_e4),
                     row.is_baseline ? "--" : format_e4(*row.delta_avg_e4, true),
                     row.is_baseline ? "--" : format_e4(*row.delta_best_e4, true)});
  }
  std::array<std::size_t, 10> widths{};
  for (const auto& r : cells) {
    for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], r[c].size());
  }
  std::ostringstream os;
  for (const auto& r : cells) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      os << r[c] << std::string(widths[c] - r[c].size() + (c + 1 < r.size() ? 2 : 0), ' ');
    }
    os << "\n";
  }
  return os.str();
}

inline std::string result_table_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "train_data,method,lambda,ckpt1,ckpt2,ckpt3,avg,best,delta_avg,delta_best\n";
  for (const auto& row : rows) {
    os << row.run.train_data << "," << row.run.method << ","
       << (row.run.lambda.has_value() ? format_lambda(row.run.lambda) : "") << ","
       << format_e4(round_half_even_e4(row.run.ckpt_acc[0])) << ","
       << format_e4(round_half_even_e4(row.run.ckpt_acc[1])) << ","
       << format_e4(round_half_even_e4(row.run.ckpt_acc[2])) << "," << format_e4(row.avg_e4)
       << "," << format_e4(row.best_e4) << ","
       << (row.is_baseline ? "" : format_e4(*row.delta_avg_e4, true)) << ","
       << (row.is_baseline ? "" : format_e4(*row.delta_best_e4, true)) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Dynamics panels
// ---------------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

struct LabeledRunLog {
  std::string label;
  RunLog log;
};

namespace detail {

inline std::string format_g17(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// Three panels: the external preference margin per step, the logged neuron
/// margin per step (one series per run, keyed by label), and the
/// per-checkpoint accuracy summary.
inline std::vector<Panel> dynamics_panels(const std::vector<LabeledRunLog>& logs) {
  if (logs.empty()) throw ReportError("plot: no run logs");
  Panel delta_dpo{"DPO margin per step", "step", "delta_dpo", {}};
  Panel delta_neu{"Neuron margin per step", "step", "delta_neu", {}};
  Panel accuracy{"Checkpoint accuracy", "checkpoint", "accuracy", {}};
  for (const auto& [label, log] : logs) {
    Series sd{label, {}}, sn{label, {}}, sa{label, {}};
    for (const auto& step : log.steps) {
      sd.points.emplace_back(static_cast<double>(step.step), step.delta_dpo);
      sn.points.emplace_back(static_cast<double>(step.step), step.delta_neu);
    }
    for (std::size_t i = 0; i < log.checkpoints.size(); ++i) {
      sa.points.emplace_back(static_cast<double>(i + 1), log.checkpoints[i].eval_accuracy);
    }
    delta_dpo.series.push_back(std::move(sd));
    delta_neu.series.push_back(std::move(sn));
    accuracy.series.push_back(std::move(sa));
  }
  return {delta_dpo, delta_neu, accuracy};
}

/// CSV for one panel: x column plus one column per series; blank cells where
/// a series has no point at that x. Values are %.17g, so parsing the file
/// back reproduces the exact doubles.
inline std::string panel_csv(const Panel& panel) {
  std::vector<double> xs;
  for (const auto& s : panel.series) {
    for (const auto& [x, y] : s.points) xs.push_back(x);
  }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());

  std::ostringstream os;
  os << panel.x_label;
  for (const auto& s : panel.series) os << "," << s.label;
  os << "\n";
  for (double x : xs) {
    os << detail::format_g17(x);
    for (const auto& s : panel.series) {
      os << ",";
      for (const auto& [px, py] : s.points) {
        if (px == x) {
          os << detail::format_g17(py);
          break;
        }
      }
    }
    os << "\n";
  }
  return os.str();
}

inline Panel panel_from_csv(const std::string& csv, std::string title, std::string x_label,
                            std::string y_label) {
  Panel panel{std::move(title), std::move(x_label), std::move(y_label), {}};
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("panel csv: empty");
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2) throw FormatError("panel csv: no series columns");
  panel.series.resize(header.size() - 1);
  for (std::size_t i = 1; i < header.size(); ++i) panel.series[i - 1].label = header[i];
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    cells.resize(header.size());
    const double x = std::stod(cells[0]);
    for (std::size_t i = 1; i < header.size(); ++i) {
      if (!cells[i].empty()) panel.series[i - 1].points.emplace_back(x, std::stod(cells[i]));
    }
  }
  return panel;
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

namespace detail {

inline const char* series_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                  "#ff7f0e", "#9467bd", "#8c564b"};
  return palette[i % 6];
}

inline std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string format_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace detail

/// Side-by-side panels as a standalone SVG document.
inline std::string render_svg(const std::vector<Panel>& panels) {
  if (panels.empty()) throw ReportError("plot: no panels");
  const double panel_w = 380, panel_h = 300;
  const double ml = 58, mr = 16, mt = 34, mb = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
      << static_cast<int>(panel_w * panels.size()) << "\" height=\"" << static_cast<int>(panel_h)
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Panel& panel = panels[p];
    const double x0 = p * panel_w + ml, y0 = mt;
    const double w = panel_w - ml - mr, h = panel_h - mt - mb;
    double min_x = 0, max_x = 1, min_y = 0, max_y = 1;
    bool first = true;
    for (const auto& s : panel.series) {
      for (const auto& [x, y] : s.points) {
        if (first) {
          min_x = max_x = x;
          min_y = max_y = y;
          first = false;
        } else {
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
        }
      }
    }
    if (max_x == min_x) max_x = min_x + 1;
    if (max_y == min_y) max_y = min_y + 1;
    auto sx = [&](double x) { return x0 + (x - min_x) / (max_x - min_x) * w; };
    auto sy = [&](double y) { return y0 + h - (y - min_y) / (max_y - min_y) * h; };

    svg << "<text x=\"" << detail::format_coord(x0 + w / 2) << "\" y=\"18\" text-anchor=\"middle\""
        << " font-weight=\"bold\">" << panel.title << "</text>\n";
    // Axes.
    svg << "<line x1=\"" << detail::format_coord(x0) << "\" y1=\"" << detail::format_coord(y0)
        << "\" x2=\"" << detail::format_coord(x0) << "\" y2=\"" << detail::format_coord(y0 + h)
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << detail::format_coord(x0) << "\" y1=\"" << detail::format_coord(y0 + h)
        << "\" x2=\"" << detail::format_coord(x0 + w) << "\" y2=\""
        << detail::format_coord(y0 + h) << "\" stroke=\"black\"/>\n";
    // Min/max ticks on both axes.
    svg << "<text x=\"" << detail::format_coord(x0 - 4) << "\" y=\""
        << detail::format_coord(y0 + h) << "\" text-anchor=\"end\">" << detail::format_tick(min_y)
        << "</text>\n";
    svg << "<text x=\"" << detail::format_coord(x0 - 4) << "\" y=\""
        << detail::format_coord(y0 + 8) << "\" text-anchor=\"end\">" << detail::format_tick(max_y)
        << "</text>\n";
    svg << "<text x=\"" << detail::format_coord(x0) << "\" y=\""
        << detail::format_coord(y0 + h + 14) << "\" text-anchor=\"middle\">"
        << detail::format_tick(min_x) << "</text>\n";
    svg << "<text x=\"" << detail::format_coord(x0 + w) << "\" y=\""
        << detail::format_coord(y0 + h + 14) << "\" text-anchor=\"middle\">"
        << detail::format_tick(max_x) << "</text>\n";
    // Axis labels.
    svg << "<text x=\"" << detail::format_coord(x0 + w / 2) << "\" y=\""
        << detail::format_coord(y0 + h + 30) << "\" text-anchor=\"middle\">" << panel.x_label
        << "</text>\n";
    svg << "<text x=\"" << detail::format_coord(p * panel_w + 14) << "\" y=\""
        << detail::format_coord(y0 + h / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 "
        << detail::format_coord(p * panel_w + 14) << " " << detail::format_coord(y0 + h / 2)
        << ")\">" << panel.y_label << "</text>\n";

    for (std::size_t si = 0; si < panel.series.size(); ++si) {
      const Series& s = panel.series[si];
      if (s.points.empty()) continue;
      if (s.points.size() == 1) {
        svg << "<circle cx=\"" << detail::format_coord(sx(s.points[0].first)) << "\" cy=\""
            << detail::format_coord(sy(s.points[0].second)) << "\" r=\"3\" fill=\""
            << detail::series_color(si) << "\"/>\n";
      } else {
        svg << "<polyline fill=\"none\" stroke=\"" << detail::series_color(si)
            << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : s.points) {
          svg << detail::format_coord(sx(x)) << "," << detail::format_coord(sy(y)) << " ";
        }
        svg << "\"/>\n";
      }
      // Legend entry.
      const double lx = x0 + 6, ly = y0 + 12 * (si + 1);
      svg << "<rect x=\"" << detail::format_coord(lx) << "\" y=\"" << detail::format_coord(ly - 8)
          << "\" width=\"10\" height=\"3\" fill=\"" << detail::series_color(si) << "\"/>\n";
      svg << "<text x=\"" << detail::format_coord(lx + 14) << "\" y=\""
          << detail::format_coord(ly - 3) << "\">" << s.label << "</text>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

struct DynamicsOutputs {
  std::filesystem::path svg;
  std::vector<std::filesystem::path> csvs;
};

/// Writes one CSV per panel plus the combined SVG. The SVG is rendered from
/// the re-parsed CSV contents, so the emitted data files reproduce it
/// exactly.
inline DynamicsOutputs plot_dynamics(const std::vector<LabeledRunLog>& logs,
                                     const std::filesystem::path& out_dir) {
  const auto panels = dynamics_panels(logs);
  const std::array<std::string, 3> names = {"dynamics_delta_dpo", "dynamics_delta_neu",
                                            "dynamics_accuracy"};
  std::filesystem::create_directories(out_dir);
  DynamicsOutputs outputs;
  std::vector<Panel> reparsed;
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const std::string csv = panel_csv(panels[i]);
    const auto path = out_dir / (names[i] + ".csv");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw PersistenceError("cannot write " + path.string());
    out << csv;
    outputs.csvs.push_back(path);
    reparsed.push_back(
        panel_from_csv(csv, panels[i].title, panels[i].x_label, panels[i].y_label));
  }
  outputs.svg = out_dir / "dynamics.svg";
  std::ofstream out(outputs.svg, std::ios::trunc);
  if (!out) throw PersistenceError("cannot write " + outputs.svg.string());
  out << render_svg(reparsed);
  return outputs;
}

}  // namespace yfpo
