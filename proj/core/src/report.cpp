#include "tabprobe/report.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace tabprobe::report {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Minimal SVG line plots.
// ---------------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<double> x, y;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b"};

std::string svg_plot(const std::string& title, const std::string& x_label,
                     const std::string& y_label, const std::vector<Series>& series) {
  const double W = 640, H = 420, L = 64, R = 24, T = 40, B = 48;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const Series& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        first = false;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\""
      << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";
  // Axes.
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\""
      << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 5.0;
    const double fy = ymin + (ymax - ymin) * i / 5.0;
    out << "<text x=\"" << px(fx) << "\" y=\"" << H - B + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
        << format_double(std::round(fx * 100) / 100) << "</text>\n";
    out << "<text x=\"" << L - 8 << "\" y=\"" << py(fy) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
        << format_double(std::round(fy * 1000) / 1000) << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << py(fy) << "\" x2=\"" << W - R
        << "\" y2=\"" << py(fy) << "\" stroke=\"#dddddd\"/>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << x_label << "</text>\n";
  out << "<text x=\"16\" y=\"" << (T + H - B) / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
      << "transform=\"rotate(-90 16 " << (T + H - B) / 2 << ")\">" << y_label
      << "</text>\n";

  int ci = 0;
  double ly = T + 6;
  for (const Series& s : series) {
    const char* color = kPalette[ci % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      out << px(s.x[i]) << "," << py(s.y[i]) << " ";
    }
    out << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      out << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i])
          << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    out << "<text x=\"" << W - R - 6 << "\" y=\"" << ly
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
        << color << "\">" << s.label << "</text>\n";
    ly += 16;
    ++ci;
  }
  out << "</svg>\n";
  return out.str();
}

std::string csv_cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.get<std::string>();
}

}  // namespace

std::vector<std::filesystem::path> render(const std::filesystem::path& run_dir,
                                          const std::filesystem::path& out_dir,
                                          const RenderOptions& options) {
  const auto summary_path = run_dir / "summary.json";
  if (!std::filesystem::exists(summary_path)) {
    throw NotFoundError("summary.json not found in " + run_dir.string());
  }
  json summary;
  try {
    summary = json::parse(read_text_file(summary_path));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("unreadable summary.json: ") + e.what());
  }
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;

  const json& grid = summary.at("grid");
  const bool is_lens = summary.at("experiment").get<std::string>() == "logit_lens";

  // Targets in grid order of first appearance.
  std::vector<std::string> targets;
  for (const json& g : grid) {
    if (!g.contains("target")) continue;
    const std::string t = g.at("target").get<std::string>();
    if (std::find(targets.begin(), targets.end(), t) == targets.end()) {
      targets.push_back(t);
    }
  }

  const auto write_csv = [&](const std::filesystem::path& name, const std::string& text) {
    write_file_atomic(out_dir / name, text);
    written.push_back(out_dir / name);
  };

  if (!is_lens) {
    const auto rows_csv = [&](const std::string& target, bool by_depth) {
      int best_layer = -1;
      if (by_depth && summary.at("best").contains(target)) {
        best_layer = summary.at("best").at(target).at("layer").get<int>();
      }
      std::string csv = "layer,depth,seed,r2_test,mse_test\n";
      for (const json& g : grid) {
        if (g.value("status", "") != "ok") continue;
        if (g.value("target", "") != target) continue;
        const int layer = g.at("layer").get<int>();
        const int depth = g.at("depth").get<int>();
        if (by_depth) {
          if (layer != best_layer) continue;
        } else {
          if (depth != 0) continue;
        }
        csv += std::to_string(layer) + "," + std::to_string(depth) + "," +
               csv_cell(g.at("seed")) + "," + csv_cell(g.at("r2_test")) + "," +
               csv_cell(g.at("mse_test")) + "\n";
      }
      return csv;
    };

    if (!targets.empty()) {
      write_csv("by_layer.csv", rows_csv(targets.front(), false));
      write_csv("by_depth.csv", rows_csv(targets.front(), true));
      for (const std::string& t : targets) {
        write_csv("by_layer_" + t + ".csv", rows_csv(t, false));
        write_csv("by_depth_" + t + ".csv", rows_csv(t, true));
      }
    }
  } else {
    std::string csv = "layer,mse,r2,converged\n";
    for (const json& e : summary.at("curves").at("by_layer")) {
      csv += std::to_string(e.at("layer").get<int>()) + "," +
             csv_cell(e.at("mse_mean")) + "," + csv_cell(e.at("r2_mean")) + "," +
             csv_cell(e.at("converged")) + "\n";
    }
    write_csv("lens.csv", csv);
  }

  if (!options.plots) {
    std::cerr << "report: plot rendering disabled, CSV only\n";
    return written;
  }

  try {
    const json& by_layer = summary.at("curves").at("by_layer");
    std::map<std::string, Series> r2_series, mse_series;
    for (const json& e : by_layer) {
      const std::string t = e.at("target").get<std::string>();
      r2_series[t].label = t;
      r2_series[t].x.push_back(e.at("layer").get<double>());
      r2_series[t].y.push_back(e.value("r2_mean", 0.0));
      mse_series[t].label = t;
      mse_series[t].x.push_back(e.at("layer").get<double>());
      mse_series[t].y.push_back(e.value("mse_mean", 0.0));
    }
    std::vector<Series> r2v, msev;
    for (auto& [_, s] : r2_series) r2v.push_back(std::move(s));
    for (auto& [_, s] : mse_series) msev.push_back(std::move(s));
    if (!r2v.empty()) {
      if (is_lens) {
        write_file_atomic(out_dir / "lens.svg",
                          svg_plot("logit lens across layers", "layer",
                                   "decoded MSE", msev));
        written.push_back(out_dir / "lens.svg");
      } else {
        write_file_atomic(out_dir / "by_layer_r2.svg",
                          svg_plot("probe R^2 across layers", "layer", "test R^2", r2v));
        written.push_back(out_dir / "by_layer_r2.svg");
        write_file_atomic(out_dir / "by_layer_mse.svg",
                          svg_plot("probe MSE across layers", "layer", "test MSE", msev));
        written.push_back(out_dir / "by_layer_mse.svg");
      }
    }
    const json& by_depth = summary.at("curves").at("by_depth");
    std::map<std::string, Series> depth_series;
    for (const json& e : by_depth) {
      const std::string t = e.at("target").get<std::string>();
      depth_series[t].label = t;
      depth_series[t].x.push_back(e.at("depth").get<double>());
      depth_series[t].y.push_back(e.value("r2_mean", 0.0));
    }
    std::vector<Series> dv;
    for (auto& [_, s] : depth_series) dv.push_back(std::move(s));
    if (!dv.empty()) {
      write_file_atomic(
          out_dir / "by_depth_r2.svg",
          svg_plot("probe R^2 across probe depths", "hidden layers", "test R^2", dv));
      written.push_back(out_dir / "by_depth_r2.svg");
    }
  } catch (const std::exception& e) {
    std::cerr << "report: plot rendering failed (" << e.what() << "), CSV kept\n";
  }
  return written;
}

}  // namespace tabprobe::report
