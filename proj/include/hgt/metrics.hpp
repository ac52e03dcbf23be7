#pragma once

// Ranking and threshold metrics for multilabel frame predictions.
//
// Average precision is the mean of the precision values at the rank of each
// positive, with no interpolation. Scores are sorted in descending order and
// tied scores keep their input order. Frames are pooled per class.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hgt/data.hpp"

namespace hgt {

/// nullopt when there are no positives. Throws ArgumentError on length mismatch.
std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Fraction of entries where (prob >= threshold) equals the label.
double accuracy_at_threshold(std::span<const double> probs, std::span<const std::uint8_t> labels,
                             double threshold = 0.5);

/// Average precision over the entries with mask = 1; nullopt when the mask
/// selects no positive.
std::optional<double> conditional_ap(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                     std::span<const std::uint8_t> mask);

/// Frames strictly before the first frame with `column` = 1 (all frames when
/// it never fires).
std::vector<std::uint8_t> absence_mask(const LabeledSequence& seq, int column);

struct PrPoint {
  double recall;
  double precision;
};

/// Precision and recall after each ranked entry, in the same order AP uses.
std::vector<PrPoint> precision_recall_curve(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Empirical association between one edge label e and the conjunction v of
/// node labels, pooled over frames.
struct CorrelationReport {
  std::string edge_label;
  std::vector<std::string> node_labels;
  long frames = 0;
  double p_e = 0.0;
  double p_v = 0.0;
  double p_ev = 0.0;
  std::optional<double> p_e_given_v;  // undefined when P(v) = 0
  double statistic = 0.0;             // P(e,v) - P(e) P(v)
  double band = 0.0;                  // half-width of the 99% band around zero
  int sign = 0;                       // +1 / -1 outside the band, 0 inside
};

/// The band is 2.576 delete-one-sequence jackknife standard errors.
/// Throws DataError when a label is not in the sequences' vocabulary.
CorrelationReport label_correlation(std::span<const LabeledSequence> data, const std::string& edge_label,
                                    const std::vector<std::string>& node_labels);

/// Metrics of one prediction offset.
struct EvalReport {
  int horizon = 0;
  long n_frames = 0;
  std::vector<std::string> labels;
  std::map<std::string, double> per_class_ap;  // classes with at least one positive
  std::vector<std::string> excluded;           // classes without positives
  double mean_ap = 0.0;
  std::map<std::string, double> accuracy;
  std::map<std::string, long> n_positives;
  std::map<std::string, std::optional<double>> conditional;  // "label|condition"
};

/// scores and truth are frames x labels. `conditions` maps a condition name to
/// a frame mask; conditional AP is reported for `conditional_labels` under
/// each condition.
EvalReport make_report(int horizon, const std::vector<std::string>& labels, const Eigen::MatrixXd& scores,
                       const LabelMatrix& truth,
                       const std::map<std::string, std::vector<std::uint8_t>>& conditions = {},
                       const std::vector<std::string>& conditional_labels = {});

/// Mean over the per-class map.
double mean_of(const std::map<std::string, double>& per_class);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(std::string_view text);

/// One row per class per horizon: horizon,label,ap,accuracy,n_positives,n_frames.
std::string report_table_csv(std::span<const EvalReport> reports);

/// Static SVG charts.
void write_pr_curves_svg(const std::filesystem::path& path, const std::string& title,
                         const std::map<std::string, std::vector<PrPoint>>& curves);
void write_ap_vs_horizon_svg(const std::filesystem::path& path, std::span<const EvalReport> reports);

}  // namespace hgt
