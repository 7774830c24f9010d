#pragma once

// Text tables, CSV/JSON serialisation of results, and small SVG line plots.

#include <cnsg/engine.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace cnsg::report {

using nlohmann::json;

inline std::string fixed(double v, int digits = 1) {
  if (!std::isfinite(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// mean ± std in percentage points.
inline std::string pct(const engine::SeedStats& s) {
  if (s.count == 0) return "-";
  return fixed(100.0 * s.mean) + " ± " + fixed(100.0 * s.stddev);
}

class TextTable {
 public:
  explicit TextTable(std::vector<std::string> header) : header_(std::move(header)) {}
  void add(std::vector<std::string> row) {
    row.resize(header_.size());
    rows_.push_back(std::move(row));
  }
  std::string str() const {
    std::vector<size_t> w(header_.size(), 0);
    auto width = [](const std::string& s) {
      // count code points so "±" does not skew the layout
      return static_cast<size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
    };
    for (size_t i = 0; i < header_.size(); ++i) w[i] = width(header_[i]);
    for (const auto& r : rows_)
      for (size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], width(r[i]));
    std::ostringstream os;
    auto line = [&](const std::vector<std::string>& r) {
      for (size_t i = 0; i < r.size(); ++i) {
        if (i) os << "  ";
        const auto pad = w[i] - width(r[i]);
        if (i == 0)
          os << r[i] << std::string(pad, ' ');
        else
          os << std::string(pad, ' ') << r[i];
      }
      os << '\n';
    };
    line(header_);
    size_t total = 0;
    for (auto x : w) total += x;
    os << std::string(total + 2 * (w.size() - 1), '-') << '\n';
    for (const auto& r : rows_) line(r);
    return os.str();
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const engine::SeedStats& s) { return {{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}}; }

inline engine::SeedStats stats_from_json(const json& j) {
  return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("count").get<int64_t>()};
}

inline json to_json(const engine::CellResult& c) {
  json j{{"config_hash", c.config_hash}, {"seed", c.seed}, {"domains", c.domain_miou},
         {"average", c.average}, {"seconds", c.seconds}};
  if (c.error) j["error"] = *c.error;
  return j;
}

inline json to_json(const engine::MetricsReport& m) {
  json iou = json::array();
  for (size_t i = 0; i < m.iou.size(); ++i) iou.push_back(m.counted[i] ? json(m.iou[i]) : json(nullptr));
  return {{"miou", m.miou}, {"class_iou", iou}};
}

inline json to_json(const engine::EvaluationReport& r) {
  json d = json::object();
  for (const auto& x : r.domains) d[x.domain] = to_json(x.metrics);
  json out{{"domains", d}, {"average", r.average}, {"source_domain", r.source_domain}};
  if (r.unseen_average) out["unseen_average"] = *r.unseen_average;
  return out;
}

inline json to_json(const engine::AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json per = json::object();
    for (const auto& [d, s] : r.per_domain) per[d] = to_json(s);
    json cells = json::array();
    for (const auto& c : r.cells) cells.push_back(to_json(c));
    rows.push_back({{"variant", r.variant}, {"use_nsfr", r.use_nsfr}, {"use_nsca", r.use_nsca},
                    {"per_domain", per}, {"average", to_json(r.average)}, {"cells", cells}});
  }
  return {{"kind", "ablation"}, {"domains", t.domains}, {"base_config_hash", t.base_config_hash},
          {"margin", t.margin}, {"rows", rows}};
}

inline json to_json(const engine::SweepCurve& c) {
  json pts = json::array();
  for (const auto& p : c.points) {
    json cells = json::array();
    for (const auto& x : p.cells) cells.push_back(to_json(x));
    pts.push_back({{"alpha", p.alpha}, {"average", to_json(p.average)}, {"cells", cells}});
  }
  return {{"kind", "alpha_sweep"}, {"base_config_hash", c.base_config_hash}, {"points", pts}};
}

// ---------------------------------------------------------------------------
// Tables

inline std::string ablation_text(const json& t) {
  std::vector<std::string> header{"variant"};
  for (const auto& d : t.at("domains")) header.push_back(d.get<std::string>());
  header.push_back("avg");
  TextTable table(header);
  for (const auto& r : t.at("rows")) {
    std::vector<std::string> row{r.at("variant").get<std::string>()};
    for (const auto& d : t.at("domains")) row.push_back(pct(stats_from_json(r.at("per_domain").at(d.get<std::string>()))));
    row.push_back(pct(stats_from_json(r.at("average"))));
    table.add(row);
  }
  return table.str();
}

inline std::string sweep_text(const json& c) {
  TextTable table({"alpha", "avg mIoU"});
  for (const auto& p : c.at("points")) table.add({fixed(p.at("alpha").get<double>(), 2), pct(stats_from_json(p.at("average")))});
  return table.str();
}

inline std::string evaluation_text(const json& r) {
  TextTable table({"domain", "mIoU"});
  const auto source = r.value("source_domain", std::string{});
  for (const auto& [d, m] : r.at("domains").items())
    table.add({d == source ? d + " (source)" : d, fixed(100.0 * m.at("miou").get<double>())});
  table.add({"average", fixed(100.0 * r.at("average").get<double>())});
  if (r.contains("unseen_average")) table.add({"unseen average", fixed(100.0 * r.at("unseen_average").get<double>())});
  return table.str();
}

inline std::string ablation_csv(const json& t) {
  std::ostringstream os;
  os << "variant,use_nsfr,use_nsca,domain,mean,std,count\n";
  for (const auto& r : t.at("rows")) {
    auto emit = [&](const std::string& domain, const json& s) {
      os << r.at("variant").get<std::string>() << ',' << r.at("use_nsfr").get<bool>() << ','
         << r.at("use_nsca").get<bool>() << ',' << domain << ',' << s.at("mean").get<double>() << ','
         << s.at("std").get<double>() << ',' << s.at("count").get<int64_t>() << '\n';
    };
    for (const auto& d : t.at("domains")) emit(d.get<std::string>(), r.at("per_domain").at(d.get<std::string>()));
    emit("average", r.at("average"));
  }
  return os.str();
}

inline std::string sweep_csv(const json& c) {
  std::ostringstream os;
  os << "alpha,mean,std,count\n";
  for (const auto& p : c.at("points"))
    os << p.at("alpha").get<double>() << ',' << p.at("average").at("mean").get<double>() << ','
       << p.at("average").at("std").get<double>() << ',' << p.at("average").at("count").get<int64_t>() << '\n';
  return os.str();
}

inline std::string evaluation_csv(const json& r) {
  std::ostringstream os;
  os << "domain,miou\n";
  for (const auto& [d, m] : r.at("domains").items()) os << d << ',' << m.at("miou").get<double>() << '\n';
  os << "average," << r.at("average").get<double>() << '\n';
  if (r.contains("unseen_average")) os << "unseen_average," << r.at("unseen_average").get<double>() << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// SVG

struct Series {
  std::string name;
  std::vector<double> x, y;
  std::vector<double> err;  // optional half-width error bars
};

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string line_plot_svg(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                                 const std::string& ylabel) {
  const double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      const double e = i < s.err.size() ? s.err[i] : 0.0;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - e);
      y1 = std::max(y1, s.y[i] + e);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fixed(xv, 2)
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fixed(yv, 3)
       << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << py(yv) << "\" x2=\"" << W - R << "\" y2=\"" << py(yv)
       << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xml_escape(xlabel)
     << "</text>\n";
  os << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_escape(ylabel) << "</text>\n";

  for (size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* col = colours[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    os << "\"/>\n";
    if (s.x.size() <= 32)
      for (size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.y[i])) continue;
        os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
        if (i < s.err.size() && s.err[i] > 0)
          os << "<line x1=\"" << px(s.x[i]) << "\" y1=\"" << py(s.y[i] - s.err[i]) << "\" x2=\"" << px(s.x[i])
             << "\" y2=\"" << py(s.y[i] + s.err[i]) << "\" stroke=\"" << col << "\"/>\n";
      }
    os << "<text x=\"" << W - R - 150 << "\" y=\"" << T + 14 + 16 * k << "\" fill=\"" << col << "\">"
       << xml_escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string sweep_svg(const json& c) {
  Series s{"avg unseen mIoU", {}, {}, {}};
  for (const auto& p : c.at("points")) {
    s.x.push_back(p.at("alpha").get<double>());
    s.y.push_back(p.at("average").at("mean").get<double>());
    s.err.push_back(p.at("average").at("std").get<double>());
  }
  return line_plot_svg({s}, "mIoU vs non-salient ratio", "alpha", "mIoU");
}

/// Loss curves from NDJSON training-log records.
inline std::string loss_svg(const std::vector<json>& records) {
  std::vector<Series> s{{"L_s", {}, {}, {}}, {"L_cls", {}, {}, {}}, {"L_sca", {}, {}, {}}};
  for (const auto& r : records) {
    const double it = r.at("iter").get<double>();
    for (auto& x : s) {
      x.x.push_back(it);
      x.y.push_back(r.at(x.name).get<double>());
    }
  }
  return line_plot_svg(s, "training losses", "iteration", "loss");
}

}  // namespace cnsg::report
