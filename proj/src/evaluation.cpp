#include "hgt/evaluation.hpp"

#include <algorithm>

namespace hgt {

namespace {

int column_index(const std::vector<std::string>& vocab, std::string_view name) {
  const auto it = std::find(vocab.begin(), vocab.end(), name);
  return it == vocab.end() ? -1 : static_cast<int>(it - vocab.begin());
}

WindowPredictions empty_like(std::span<const LabeledSequence> data, std::vector<ClipIndex> clips, int horizon) {
  WindowPredictions out;
  const Eigen::Index n = static_cast<Eigen::Index>(clips.size());
  const Eigen::Index cols = data[0].labels.cols();
  out.scores.assign(horizon + 1, Eigen::MatrixXd(n, cols));
  out.truth.assign(horizon + 1, LabelMatrix(n, cols));
  for (int f = 0; f <= horizon; ++f) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& c = clips[static_cast<std::size_t>(i)];
      out.truth[f].row(i) = data[c.sequence].labels.row(c.t + f);
    }
  }
  out.clips = std::move(clips);
  return out;
}

}  // namespace

std::vector<double> label_prevalence(std::span<const LabeledSequence> data) {
  if (data.empty()) throw DataError("prevalence of an empty dataset");
  const auto counts = label_frequency(data);
  long frames = 0;
  for (const auto& s : data) frames += s.length();
  std::vector<double> out;
  for (long c : counts) out.push_back(frames > 0 ? static_cast<double>(c) / static_cast<double>(frames) : 0.0);
  return out;
}

WindowPredictions marginal_predictions(std::span<const double> prevalence, std::span<const LabeledSequence> data,
                                       std::vector<ClipIndex> clips, int horizon) {
  auto out = empty_like(data, std::move(clips), horizon);
  if (static_cast<Eigen::Index>(prevalence.size()) != data[0].labels.cols()) {
    throw ShapeError("marginal baseline: prevalence length differs from the label count");
  }
  const Eigen::RowVectorXd row = Eigen::Map<const Eigen::RowVectorXd>(prevalence.data(),
                                                                      static_cast<Eigen::Index>(prevalence.size()));
  for (auto& s : out.scores) s.rowwise() = row;
  return out;
}

WindowPredictions persistence_predictions(std::span<const LabeledSequence> data, std::vector<ClipIndex> clips,
                                          int horizon) {
  auto out = empty_like(data, std::move(clips), horizon);
  for (auto& s : out.scores) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      const auto& c = out.clips[static_cast<std::size_t>(i)];
      s.row(i) = data[c.sequence].labels.row(c.t).cast<double>();
    }
  }
  return out;
}

std::vector<EvalReport> window_reports(const WindowPredictions& pred, std::span<const LabeledSequence> data,
                                       const std::vector<int>& horizons,
                                       const std::vector<std::vector<std::uint8_t>>& absence,
                                       const std::vector<std::string>& conditional_labels) {
  std::vector<EvalReport> out;
  for (int h : horizons) {
    if (h < 0 || h >= static_cast<int>(pred.scores.size())) {
      throw ArgumentError("evaluation horizon " + std::to_string(h) + " is outside the predicted range");
    }
    std::map<std::string, std::vector<std::uint8_t>> conditions;
    if (!absence.empty()) {
      std::vector<std::uint8_t> mask;
      mask.reserve(pred.clips.size());
      for (const auto& c : pred.clips) mask.push_back(absence[c.sequence][c.t + h]);
      conditions.emplace(kNoCvsCondition, std::move(mask));
    }
    out.push_back(make_report(h, data[0].vocabulary, pred.scores[h], pred.truth[h], conditions, conditional_labels));
  }
  return out;
}

EvaluationResult evaluate_split(HgtModel<float>& model, std::span<const LabeledSequence> train_data,
                                std::span<const LabeledSequence> eval_data, int past_window,
                                const std::vector<int>& horizons, int stride) {
  if (eval_data.empty()) throw DataError("evaluation set is empty");
  if (train_data.empty()) throw DataError("training set is empty");
  if (horizons.empty()) throw ArgumentError("no evaluation horizon requested");
  const int max_h = *std::max_element(horizons.begin(), horizons.end());
  if (*std::min_element(horizons.begin(), horizons.end()) < 0) throw ArgumentError("negative evaluation horizon");
  const Task task = model.schema().task;

  std::vector<std::vector<std::uint8_t>> absence;
  const int cvs = column_index(eval_data[0].vocabulary, "CVS-achieved");
  if (cvs >= 0) {
    for (const auto& s : eval_data) absence.push_back(absence_mask(s, cvs));
  }
  std::vector<LabeledSequence> train, eval;
  for (const auto& s : train_data) train.push_back(project_to_task(s, task));
  for (const auto& s : eval_data) eval.push_back(project_to_task(s, task));

  std::vector<std::string> conditional;
  if (!absence.empty()) {
    for (const auto& e : model.schema().edges) {
      if (e.label) conditional.push_back(eval[0].vocabulary[static_cast<std::size_t>(*e.label)]);
    }
  }

  auto clips = window_clips(eval, past_window, max_h, stride);
  if (clips.empty()) throw DataError("no evaluation clip has a full window");

  EvaluationResult r;
  r.horizons = horizons;
  r.predictions = predict_windows(model, eval, clips, past_window, max_h);
  r.model = window_reports(r.predictions, eval, horizons, absence, conditional);
  const auto prevalence = label_prevalence(train);
  r.marginal = window_reports(marginal_predictions(prevalence, eval, clips, max_h), eval, horizons, absence,
                              conditional);
  r.persistence = window_reports(persistence_predictions(eval, clips, max_h), eval, horizons, absence, conditional);
  return r;
}

}  // namespace hgt
