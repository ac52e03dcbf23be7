#pragma once

// Sliding-window batching over labeled sequences.
//
// A clip anchored at time t reads frames t-P .. t and is scored against the
// labels at t .. t+F; only anchors whose whole window lies inside the
// sequence are used.

#include <Eigen/Dense>

#include <algorithm>
#include <span>
#include <vector>

#include "hgt/data.hpp"
#include "hgt/model.hpp"

namespace hgt {

struct ClipIndex {
  int sequence = 0;
  int t = 0;
  std::vector<std::uint8_t> positives;  // label active anywhere in [t, t+F]
};

/// Every anchor with a full window, every `stride` seconds.
std::vector<ClipIndex> window_clips(std::span<const LabeledSequence> data, int past_window, int horizon,
                                    int stride = 1);

/// Frames of a batch of clips, one batch x dim matrix per window position.
template <typename Scalar>
std::vector<ad::Matrix<Scalar>> window_frames(std::span<const LabeledSequence> data, std::span<const ClipIndex> clips,
                                              int past_window) {
  const int dim = data[clips[0].sequence].feature_dim();
  std::vector<ad::Matrix<Scalar>> frames(past_window + 1, ad::Matrix<Scalar>(static_cast<Eigen::Index>(clips.size()), dim));
  for (std::size_t b = 0; b < clips.size(); ++b) {
    const auto& seq = data[clips[b].sequence];
    if (seq.feature_dim() != dim) throw ShapeError("sequences disagree in feature dimension");
    for (int k = 0; k <= past_window; ++k) {
      frames[k].row(static_cast<Eigen::Index>(b)) =
          seq.features[clips[b].t - past_window + k].vector.transpose().template cast<Scalar>();
    }
  }
  return frames;
}

/// Labels at t + offset for a batch of clips.
template <typename Scalar>
ad::Matrix<Scalar> window_truth(std::span<const LabeledSequence> data, std::span<const ClipIndex> clips, int offset) {
  const Eigen::Index cols = data[clips[0].sequence].labels.cols();
  ad::Matrix<Scalar> truth(static_cast<Eigen::Index>(clips.size()), cols);
  for (std::size_t b = 0; b < clips.size(); ++b) {
    truth.row(static_cast<Eigen::Index>(b)) =
        data[clips[b].sequence].labels.row(clips[b].t + offset).template cast<Scalar>();
  }
  return truth;
}

/// Per-offset scores and targets of a set of clips; row i belongs to clips[i].
struct WindowPredictions {
  std::vector<ClipIndex> clips;
  std::vector<Eigen::MatrixXd> scores;  // offset -> clips x labels
  std::vector<LabelMatrix> truth;       // offset -> clips x labels
};

/// Inference-mode scores of clips at offsets 0..horizon, in batches. Only
/// frames t-P .. t are read, so anchors near the end of a sequence are fine.
template <typename Scalar>
std::vector<Eigen::MatrixXd> predict_scores(HgtModel<Scalar>& model, std::span<const LabeledSequence> data,
                                            std::span<const ClipIndex> clips, int past_window, int horizon,
                                            int batch_size = 256) {
  const Eigen::Index n = static_cast<Eigen::Index>(clips.size());
  std::vector<Eigen::MatrixXd> scores(horizon + 1, Eigen::MatrixXd(n, model.topology().label_dim));
  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index count = std::min<Eigen::Index>(batch_size, n - start);
    const auto batch = clips.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(count));
    ForwardPass<Scalar> pass(model.params(), false, false);
    std::vector<ad::Var<Scalar>> frames;
    for (auto& m : window_frames<Scalar>(data, batch, past_window)) frames.push_back(pass.constant(std::move(m)));
    const auto result = forward(pass.ctx, model, std::span<const ad::Var<Scalar>>(frames), past_window, horizon);
    for (int f = 0; f <= horizon; ++f) {
      scores[f].middleRows(start, count) = result.probs[f].value().template cast<double>();
    }
  }
  return scores;
}

/// Scores plus the labels at t + offset; every clip needs t + horizon inside
/// its sequence.
template <typename Scalar>
WindowPredictions predict_windows(HgtModel<Scalar>& model, std::span<const LabeledSequence> data,
                                  std::vector<ClipIndex> clips, int past_window, int horizon, int batch_size = 256) {
  WindowPredictions out;
  out.scores = predict_scores(model, data, std::span<const ClipIndex>(clips), past_window, horizon, batch_size);
  const Eigen::Index n = static_cast<Eigen::Index>(clips.size());
  out.truth.assign(horizon + 1, LabelMatrix(n, model.topology().label_dim));
  for (int f = 0; f <= horizon; ++f) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& c = clips[static_cast<std::size_t>(i)];
      out.truth[f].row(i) = data[c.sequence].labels.row(c.t + f);
    }
  }
  out.clips = std::move(clips);
  return out;
}

}  // namespace hgt
