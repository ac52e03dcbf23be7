#include "hgt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hgt/error.hpp"

namespace hgt {

namespace {

using nlohmann::json;

constexpr double kBandZ = 2.576;

std::vector<std::size_t> ranking(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

void require_lengths(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw ArgumentError(std::string(op) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

int column_of(const std::vector<std::string>& vocab, const std::string& name) {
  auto it = std::find(vocab.begin(), vocab.end(), name);
  return it == vocab.end() ? -1 : static_cast<int>(it - vocab.begin());
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_lengths(scores.size(), labels.size(), "average_precision");
  long hits = 0;
  double sum = 0.0;
  const auto order = ranking(scores);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

double accuracy_at_threshold(std::span<const double> probs, std::span<const std::uint8_t> labels, double threshold) {
  require_lengths(probs.size(), labels.size(), "accuracy_at_threshold");
  if (probs.empty()) return 0.0;
  long correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) correct += (probs[i] >= threshold) == (labels[i] != 0) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(probs.size());
}

std::optional<double> conditional_ap(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                     std::span<const std::uint8_t> mask) {
  require_lengths(scores.size(), labels.size(), "conditional_ap");
  require_lengths(scores.size(), mask.size(), "conditional_ap");
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (mask[i]) {
      s.push_back(scores[i]);
      l.push_back(labels[i]);
    }
  }
  return average_precision(s, l);
}

std::vector<std::uint8_t> absence_mask(const LabeledSequence& seq, int column) {
  std::vector<std::uint8_t> mask(seq.length(), 1);
  if (column < 0 || column >= seq.labels.cols()) throw ArgumentError("absence_mask: column out of range");
  for (int t = 0; t < seq.length(); ++t) {
    if (seq.labels(t, column)) {
      std::fill(mask.begin() + t, mask.end(), 0);
      break;
    }
  }
  return mask;
}

std::vector<PrPoint> precision_recall_curve(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_lengths(scores.size(), labels.size(), "precision_recall_curve");
  const long positives = std::count_if(labels.begin(), labels.end(), [](std::uint8_t v) { return v != 0; });
  std::vector<PrPoint> curve;
  if (positives == 0) return curve;
  long hits = 0;
  const auto order = ranking(scores);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    hits += labels[order[rank]] ? 1 : 0;
    curve.push_back({static_cast<double>(hits) / positives, static_cast<double>(hits) / static_cast<double>(rank + 1)});
  }
  return curve;
}

CorrelationReport label_correlation(std::span<const LabeledSequence> data, const std::string& edge_label,
                                    const std::vector<std::string>& node_labels) {
  CorrelationReport r;
  r.edge_label = edge_label;
  r.node_labels = node_labels;
  struct Counts {
    double n = 0, e = 0, v = 0, ev = 0;
  };
  std::vector<Counts> per_seq;
  Counts total;
  for (const auto& seq : data) {
    const int ce = column_of(seq.vocabulary, edge_label);
    if (ce < 0) throw DataError(seq.id + ": label '" + edge_label + "' not in vocabulary");
    std::vector<int> cv;
    for (const auto& name : node_labels) {
      const int c = column_of(seq.vocabulary, name);
      if (c < 0) throw DataError(seq.id + ": label '" + name + "' not in vocabulary");
      cv.push_back(c);
    }
    Counts k;
    for (int t = 0; t < seq.length(); ++t) {
      const bool e = seq.labels(t, ce) != 0;
      bool v = true;
      for (int c : cv) v = v && seq.labels(t, c) != 0;
      k.n += 1;
      k.e += e;
      k.v += v;
      k.ev += e && v;
    }
    per_seq.push_back(k);
    total.n += k.n;
    total.e += k.e;
    total.v += k.v;
    total.ev += k.ev;
  }
  auto statistic = [](const Counts& c) {
    if (c.n == 0) return 0.0;
    return c.ev / c.n - (c.e / c.n) * (c.v / c.n);
  };
  r.frames = static_cast<long>(total.n);
  if (total.n > 0) {
    r.p_e = total.e / total.n;
    r.p_v = total.v / total.n;
    r.p_ev = total.ev / total.n;
    if (total.v > 0) r.p_e_given_v = total.ev / total.v;
  }
  r.statistic = statistic(total);
  const std::size_t k = per_seq.size();
  if (k >= 2) {
    std::vector<double> leave_out(k);
    for (std::size_t i = 0; i < k; ++i) {
      const Counts c{total.n - per_seq[i].n, total.e - per_seq[i].e, total.v - per_seq[i].v,
                     total.ev - per_seq[i].ev};
      leave_out[i] = statistic(c);
    }
    const double mean = std::accumulate(leave_out.begin(), leave_out.end(), 0.0) / static_cast<double>(k);
    double ss = 0.0;
    for (double d : leave_out) ss += (d - mean) * (d - mean);
    r.band = kBandZ * std::sqrt(static_cast<double>(k - 1) / static_cast<double>(k) * ss);
  } else {
    r.band = std::numeric_limits<double>::infinity();
  }
  r.sign = r.statistic > r.band ? 1 : (r.statistic < -r.band ? -1 : 0);
  return r;
}

double mean_of(const std::map<std::string, double>& per_class) {
  if (per_class.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [_, v] : per_class) sum += v;
  return sum / static_cast<double>(per_class.size());
}

EvalReport make_report(int horizon, const std::vector<std::string>& labels, const Eigen::MatrixXd& scores,
                       const LabelMatrix& truth, const std::map<std::string, std::vector<std::uint8_t>>& conditions,
                       const std::vector<std::string>& conditional_labels) {
  if (scores.rows() != truth.rows() || scores.cols() != truth.cols() ||
      scores.cols() != static_cast<Eigen::Index>(labels.size())) {
    throw ArgumentError("make_report: scores, truth and labels disagree in shape");
  }
  EvalReport r;
  r.horizon = horizon;
  r.n_frames = static_cast<long>(scores.rows());
  r.labels = labels;
  std::vector<double> s(scores.rows());
  std::vector<std::uint8_t> y(scores.rows());
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      s[i] = scores(i, c);
      y[i] = truth(i, c);
    }
    const auto& name = labels[c];
    r.n_positives[name] = std::count(y.begin(), y.end(), std::uint8_t{1});
    r.accuracy[name] = accuracy_at_threshold(s, y);
    if (auto ap = average_precision(s, y)) {
      r.per_class_ap[name] = *ap;
    } else {
      r.excluded.push_back(name);
    }
    if (std::find(conditional_labels.begin(), conditional_labels.end(), name) != conditional_labels.end()) {
      for (const auto& [cond, mask] : conditions) {
        if (static_cast<Eigen::Index>(mask.size()) != scores.rows()) {
          throw ArgumentError("make_report: condition mask length differs from frame count");
        }
        r.conditional[name + "|" + cond] = conditional_ap(s, y, mask);
      }
    }
  }
  r.mean_ap = mean_of(r.per_class_ap);
  return r;
}

std::string report_to_json(const EvalReport& r) {
  json j;
  j["horizon"] = r.horizon;
  j["n_frames"] = r.n_frames;
  j["labels"] = r.labels;
  j["mean_ap"] = r.mean_ap;
  j["per_class_ap"] = r.per_class_ap;
  j["excluded"] = r.excluded;
  j["accuracy"] = r.accuracy;
  j["n_positives"] = r.n_positives;
  json cond = json::object();
  for (const auto& [k, v] : r.conditional) cond[k] = v ? json(*v) : json(nullptr);
  j["conditional"] = cond;
  return j.dump(2) + "\n";
}

EvalReport report_from_json(std::string_view text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.horizon = j.at("horizon").get<int>();
    r.n_frames = j.at("n_frames").get<long>();
    r.labels = j.at("labels").get<std::vector<std::string>>();
    r.mean_ap = j.at("mean_ap").get<double>();
    r.per_class_ap = j.at("per_class_ap").get<std::map<std::string, double>>();
    r.excluded = j.at("excluded").get<std::vector<std::string>>();
    r.accuracy = j.at("accuracy").get<std::map<std::string, double>>();
    r.n_positives = j.at("n_positives").get<std::map<std::string, long>>();
    for (const auto& [k, v] : j.at("conditional").items()) {
      r.conditional[k] = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("evaluation report: ") + e.what());
  }
  return r;
}

std::string report_table_csv(std::span<const EvalReport> reports) {
  std::ostringstream os;
  os << "horizon,label,ap,accuracy,n_positives,n_frames\n";
  for (const auto& r : reports) {
    for (const auto& name : r.labels) {
      auto it = r.per_class_ap.find(name);
      os << r.horizon << ',' << name << ',' << (it == r.per_class_ap.end() ? std::string() : fmt(it->second)) << ','
         << fmt(r.accuracy.at(name)) << ',' << r.n_positives.at(name) << ',' << r.n_frames << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// SVG charts

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Chart {
  double width = 640, height = 420, left = 60, right = 190, top = 40, bottom = 50;
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  std::ostringstream body;

  double px(double x) const { return left + (x - x_min) / (x_max - x_min) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y_min) / (y_max - y_min) * (height - top - bottom); }

  void axes(const std::string& title, const std::string& xlabel, const std::string& ylabel,
            const std::vector<double>& xticks, const std::vector<double>& yticks) {
    body << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
         << "</text>\n";
    body << "<line x1=\"" << px(x_min) << "\" y1=\"" << py(y_min) << "\" x2=\"" << px(x_max) << "\" y2=\"" << py(y_min)
         << "\" stroke=\"black\"/>\n";
    body << "<line x1=\"" << px(x_min) << "\" y1=\"" << py(y_min) << "\" x2=\"" << px(x_min) << "\" y2=\"" << py(y_max)
         << "\" stroke=\"black\"/>\n";
    for (double t : xticks) {
      body << "<text x=\"" << px(t) << "\" y=\"" << py(y_min) + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
           << t << "</text>\n";
    }
    for (double t : yticks) {
      body << "<line x1=\"" << px(x_min) << "\" y1=\"" << py(t) << "\" x2=\"" << px(x_max) << "\" y2=\"" << py(t)
           << "\" stroke=\"#dddddd\"/>\n";
      body << "<text x=\"" << px(x_min) - 6 << "\" y=\"" << py(t) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << t
           << "</text>\n";
    }
    body << "<text x=\"" << (px(x_min) + px(x_max)) / 2 << "\" y=\"" << height - 12
         << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xlabel) << "</text>\n";
    body << "<text x=\"16\" y=\"" << (py(y_min) + py(y_max)) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
         << "transform=\"rotate(-90 16 " << (py(y_min) + py(y_max)) / 2 << ")\">" << escape(ylabel) << "</text>\n";
  }

  void series(const std::vector<std::pair<double, double>>& pts, const std::string& name, int index, bool markers) {
    const char* color = kPalette[index % 10];
    body << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) body << px(x) << ',' << py(y) << ' ';
    body << "\"/>\n";
    if (markers) {
      for (const auto& [x, y] : pts) {
        body << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
      }
    }
    const double ly = top + 14 + 16 * index;
    body << "<line x1=\"" << width - right + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << width - right + 30 << "\" y2=\""
         << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    body << "<text x=\"" << width - right + 34 << "\" y=\"" << ly << "\" font-size=\"10\">" << escape(name)
         << "</text>\n";
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << body.str() << "</svg>\n";
  }
};

}  // namespace

void write_pr_curves_svg(const std::filesystem::path& path, const std::string& title,
                         const std::map<std::string, std::vector<PrPoint>>& curves) {
  Chart chart;
  chart.axes(title, "recall", "precision", {0, 0.25, 0.5, 0.75, 1}, {0, 0.25, 0.5, 0.75, 1});
  int i = 0;
  for (const auto& [name, curve] : curves) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : curve) pts.emplace_back(p.recall, p.precision);
    chart.series(pts, name, i++, false);
  }
  chart.save(path);
}

void write_ap_vs_horizon_svg(const std::filesystem::path& path, std::span<const EvalReport> reports) {
  Chart chart;
  int max_h = 1;
  for (const auto& r : reports) max_h = std::max(max_h, r.horizon);
  chart.x_max = max_h;
  std::vector<double> xticks;
  for (int h = 0; h <= max_h; ++h) xticks.push_back(h);
  chart.axes("AP vs prediction horizon", "horizon (s)", "AP", xticks, {0, 0.25, 0.5, 0.75, 1});
  std::vector<std::pair<double, double>> mean;
  for (const auto& r : reports) mean.emplace_back(r.horizon, r.mean_ap);
  chart.series(mean, "mean AP", 0, true);
  if (!reports.empty()) {
    int i = 1;
    for (const auto& name : reports.front().labels) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : reports) {
        auto it = r.per_class_ap.find(name);
        if (it != r.per_class_ap.end()) pts.emplace_back(r.horizon, it->second);
      }
      if (!pts.empty() && i < 10) chart.series(pts, name, i++, true);
    }
  }
  chart.save(path);
}

}  // namespace hgt
