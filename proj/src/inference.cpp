#include "hgt/inference.hpp"

namespace hgt {

std::vector<ClipIndex> window_clips(std::span<const LabeledSequence> data, int past_window, int horizon, int stride) {
  if (past_window < 0 || horizon < 0) throw ArgumentError("window_clips: negative window or horizon");
  if (stride < 1) throw ArgumentError("window_clips: stride must be positive");
  std::vector<ClipIndex> out;
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& seq = data[s];
    const Eigen::Index cols = seq.labels.cols();
    for (int t = past_window; t + horizon < seq.length(); t += stride) {
      ClipIndex c{static_cast<int>(s), t, std::vector<std::uint8_t>(static_cast<std::size_t>(cols), 0)};
      for (int u = t; u <= t + horizon; ++u) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          if (seq.labels(u, j)) c.positives[static_cast<std::size_t>(j)] = 1;
        }
      }
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace hgt
