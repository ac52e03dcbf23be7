#pragma once

// Held-out evaluation of a trained model next to two reference scorers:
//   marginal     every frame scored with the training prevalence of its label
//   persistence  the label at the anchor frame t, carried to t + offset
//
// Data passed in may carry more columns than the model's task (for example
// the full simulator vocabulary); it is projected onto the task here, after
// the CVS absence condition has been read from the unprojected columns.

#include <span>
#include <string>
#include <vector>

#include "hgt/data.hpp"
#include "hgt/inference.hpp"
#include "hgt/metrics.hpp"
#include "hgt/model.hpp"

namespace hgt {

inline constexpr const char* kNoCvsCondition = "no-CVS";

/// Positive frame rate per column.
std::vector<double> label_prevalence(std::span<const LabeledSequence> data);

WindowPredictions marginal_predictions(std::span<const double> prevalence, std::span<const LabeledSequence> data,
                                       std::vector<ClipIndex> clips, int horizon);
WindowPredictions persistence_predictions(std::span<const LabeledSequence> data, std::vector<ClipIndex> clips,
                                          int horizon);

struct EvaluationResult {
  std::vector<int> horizons;
  std::vector<EvalReport> model;
  std::vector<EvalReport> marginal;
  std::vector<EvalReport> persistence;
  WindowPredictions predictions;  // model scores at offsets 0..max(horizons)
};

/// Reports for the requested offsets. The no-CVS condition (frames before
/// the first CVS-achieved frame, read at the target frame) is attached when
/// the data has a CVS-achieved column; it applies to the edge-bound labels.
/// Throws DataError when no evaluation clip has a full window.
EvaluationResult evaluate_split(HgtModel<float>& model, std::span<const LabeledSequence> train_data,
                                std::span<const LabeledSequence> eval_data, int past_window,
                                const std::vector<int>& horizons, int stride = 1);

/// Reports of precomputed window predictions; `absence` holds one absence
/// mask per sequence (empty for no condition).
std::vector<EvalReport> window_reports(const WindowPredictions& pred, std::span<const LabeledSequence> data,
                                       const std::vector<int>& horizons,
                                       const std::vector<std::vector<std::uint8_t>>& absence,
                                       const std::vector<std::string>& conditional_labels);

}  // namespace hgt
