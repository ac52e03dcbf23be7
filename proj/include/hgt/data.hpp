#pragma once

// Labeled frame sequences, the normalized on-disk annotation layout, dataset
// adapters and the surgical-workflow simulator.
//
// Normalized dataset directory:
//   vocabulary.txt   one label name per line, in column order
//   <id>.ann         one row per frame: "time_index id id ...", the ids being
//                    the active label columns; time indices run 0, 1, 2, ...
//   <id>.feat        precomputed features, one row per frame (see backbone.hpp)

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hgt/backbone.hpp"
#include "hgt/schema.hpp"

namespace hgt {

using LabelMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LabeledSequence {
  std::string id;
  std::vector<FrameFeature> features;
  LabelMatrix labels;  // frames x vocabulary
  std::vector<std::string> vocabulary;

  int length() const { return static_cast<int>(labels.rows()); }
  int feature_dim() const { return features.empty() ? 0 : static_cast<int>(features[0].vector.size()); }
};

/// Throws DataError when a LabeledSequence invariant is broken.
void check_sequence(const LabeledSequence& seq);

struct LoadResult {
  std::vector<LabeledSequence> sequences;
  std::vector<std::string> warnings;
};

/// Reads a normalized dataset directory. When `expected_vocabulary` is given,
/// the directory's vocabulary.txt must match it (a missing file means the
/// expected one). Errors name the offending file and row.
LoadResult load_normalized(const std::filesystem::path& dir,
                           const std::optional<std::vector<std::string>>& expected_vocabulary = std::nullopt);

/// Writes sequences (which must share one vocabulary) in the normalized layout.
void save_normalized(const std::filesystem::path& dir, std::span<const LabeledSequence> sequences);

/// CholecT45-style annotations: label ids index the 131-column triplet
/// vocabulary, and an active triplet id also switches on its tool, verb and
/// target columns.
LoadResult load_triplet_annotations(const std::filesystem::path& dir);

/// Cholec80-CVS-style annotations over {two-structures, cystic-plate,
/// hepatocystic-triangle, CVS-achieved}. Frames where CVS-achieved is set
/// without all three criteria are reported as warnings and kept unchanged.
LoadResult load_cvs_annotations(const std::filesystem::path& dir);

/// Frames with CVS-achieved = 1 but some criterion = 0, per sequence.
std::vector<int> cvs_inconsistencies(const LabeledSequence& seq);

/// Positive count per label column over all frames.
std::vector<long> label_frequency(std::span<const LabeledSequence> sequences);

struct AlignResult {
  std::vector<LabeledSequence> sequences;
  long unmatched_frames = 0;
  std::vector<std::string> warnings;
};

/// Joins triplet and CVS sequences on sequence id and time index into the
/// clipping-with-prior vocabulary. Clipping columns come from the triplet
/// side and CVS columns from the CVS side; frames present on one side only
/// are dropped and counted. Features are taken from the triplet side.
AlignResult align_clipping(std::span<const LabeledSequence> triplet, std::span<const LabeledSequence> cvs);

/// Restricts a sequence to a task's label vocabulary by column name.
/// Throws DataError when a task label is missing.
LabeledSequence project_to_task(const LabeledSequence& seq, Task task);

/// Sequence-level split; deterministic given seed. Throws DataError for fewer
/// than 2 sequences and ConfigError for a fraction outside (0, 1).
std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> split(std::vector<LabeledSequence> data,
                                                                             double train_fraction,
                                                                             std::uint64_t seed);

/// Synthetic workflow: a phase machine plus three CVS criteria, each an
/// independent on/off process started from its stationary distribution;
/// CVS-achieved holds while all three are on.
/// Entering a gated (clipping) phase from a non-gated one is accepted with
/// probability p_obey when CVS is achieved and 1 - p_obey otherwise; a
/// rejected entry keeps the current phase.
struct SimPhase {
  std::string name;
  std::vector<double> transitions;  // next-phase probabilities, phase order
  std::vector<double> emissions;    // label activation probabilities, vocabulary order
  bool gated = false;
};

struct WorkflowSimConfig {
  std::vector<SimPhase> phases;
  std::vector<std::string> vocabulary;
  double criterion_on_rate = 0.05;
  double criterion_off_rate = 0.02;
  double p_obey = 0.9;
  double label_noise = 0.0;  // independent flip probability per label
  int feature_dim = 16;
  double feature_noise = 1.0;
  double criterion_feature_scale = 1.0;
  int sequence_length = 120;
  int num_sequences = 200;
  int burn_in = 0;  // unrecorded steps before the first frame
  int initial_phase = 0;
  std::uint64_t seed = 7;

  int num_phases() const { return static_cast<int>(phases.size()); }
  int phase_index(std::string_view name) const;
};

/// Default surgical workflow over the clipping-with-prior vocabulary.
WorkflowSimConfig default_sim_config();

/// Throws ConfigError for invalid transition rows or probabilities.
void check_sim_config(const WorkflowSimConfig& config);

std::string serialize_sim_config(const WorkflowSimConfig& config);
WorkflowSimConfig parse_sim_config(std::string_view text);
WorkflowSimConfig load_sim_config(const std::filesystem::path& path);

/// Hidden path of one simulated sequence.
struct SimTrace {
  std::vector<int> phase;
  std::vector<std::uint8_t> criteria;  // bit c set when criterion c is on
};

inline constexpr std::uint8_t kAllCriteria = 0b111;

std::vector<LabeledSequence> simulate(const WorkflowSimConfig& config, std::vector<SimTrace>* traces = nullptr);

}  // namespace hgt
