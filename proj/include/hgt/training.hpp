#pragma once

// Two-phase optimization: node pretraining with the edge side frozen, then
// joint training over every bound label. Each epoch draws a class-balanced
// resample of the training clips.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hgt/data.hpp"
#include "hgt/inference.hpp"
#include "hgt/model.hpp"
#include "hgt/model_config.hpp"
#include "hgt/schema.hpp"

namespace hgt {

/// What phase 1 holds fixed: every edge-side tensor, or the edge projector only.
enum class Phase1Freeze { edge_side, edge_projector };

std::string_view phase1_freeze_name(Phase1Freeze f);
Phase1Freeze parse_phase1_freeze(std::string_view name);

struct TrainConfig {
  Task task = Task::clipping_with_cvs_prior;
  int past_window = 4;
  int horizon = 4;
  int phase1_epochs = 2;
  int phase2_epochs = 10;
  double learning_rate = 1e-3;
  int batch_size = 32;
  double resample_target = 0.2;
  double resample_cap = 20.0;  // boosted weight limit, in multiples of the base weight
  std::uint64_t seed = 0;
  double focal_gamma = 0.0;
  int patience = 10;  // phase-2 epochs without a better validation mAP
  Phase1Freeze phase1_freeze = Phase1Freeze::edge_side;
  double grad_clip = 5.0;  // global norm; <= 0 disables
  double train_fraction = 0.8;
  int clip_stride = 1;       // anchor spacing of training clips
  int eval_stride = 1;       // anchor spacing of validation clips
  int clips_per_epoch = 0;   // 0 uses the whole resample
  ModelConfig model;
};

/// Throws ConfigError on out-of-range values.
void check_train_config(const TrainConfig& config);

/// JSON object; `model` is a nested object. Parsing starts from `base` and
/// overrides only the fields present, rejecting unknown ones.
std::string serialize_train_config(const TrainConfig& config);
TrainConfig parse_train_config(std::string_view text, const TrainConfig& base = {});
TrainConfig load_train_config(const std::filesystem::path& path, const TrainConfig& base = {});

std::string serialize_model_config(const ModelConfig& config);
ModelConfig parse_model_config(std::string_view text, const ModelConfig& base = {});

/// Mean clamped cross-entropy over every label column and offset.
/// truth[f] holds the targets of offset f. Throws ShapeError on mismatch.
double bce_loss(const PredictionBatch& pred, std::span<const LabelMatrix> truth);

/// Per-clip sampling probabilities behind resample_epoch. Clips positive for
/// a rare class (frequency below target) get min(target / n_c, cap / N); the
/// rest share the remaining mass. When the boosts need all of it, unboosted
/// clips keep base / cap and the boosts shrink toward the base weight 1 / N.
/// Every clip keeps a nonzero probability and no rare class falls below its
/// uniform share. Returns nullopt when no clip has a positive label.
std::optional<std::vector<double>> resample_weights(std::span<const ClipIndex> index, double target,
                                                    double cap = 20.0);

/// Draws index.size() clips with replacement. An all-negative index gives a
/// uniform draw and appends a warning.
std::vector<ClipIndex> resample_epoch(std::span<const ClipIndex> index, double target, std::uint64_t seed,
                                      double cap = 20.0, std::vector<std::string>* warnings = nullptr);

/// Mean cross-entropy of a batch of clips over offsets 0..horizon. Each
/// label column's terms are weighted by column_weight (1 x label_dim).
ad::Var<float> clip_batch_loss(Context<float>& ctx, const HgtModel<float>& model,
                               std::span<const LabeledSequence> data, std::span<const ClipIndex> batch,
                               int past_window, int horizon, const Eigen::RowVectorXf& column_weight,
                               double focal_gamma = 0.0);

/// Adaptive-moment optimizer state aligned with a parameter store.
/// Tensors frozen for part of the run keep their own update counts for the
/// bias correction.
struct AdamState {
  std::vector<long> count;
  std::vector<Eigen::MatrixXd> m;
  std::vector<Eigen::MatrixXd> v;
};

AdamState make_adam_state(const ParamStore<float>& params);

/// One adaptive-moment update (beta 0.9 / 0.999) of the tensors with
/// update[i] set, after rescaling their gradients to a global norm of at
/// most grad_clip (<= 0 disables). Returns the norm before clipping.
double adam_step(ParamStore<float>& params, AdamState& state, const std::vector<ad::Matrix<float>>& grads,
                 const std::vector<char>& update, double learning_rate, double grad_clip);

struct EpochRecord {
  int epoch = 0;
  int phase = 1;
  long step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_map = 0.0;
  double val_acc = 0.0;
};

std::string epoch_record_json(const EpochRecord& r);
EpochRecord parse_epoch_record(std::string_view line);

/// Reported after every optimizer step.
struct StepInfo {
  int epoch = 0;
  int phase = 1;
  long step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  double edge_projector_grad_norm = 0.0;
  std::span<const ClipIndex> batch;  // clips of the step; sequence indices refer to the training set
};

using StepObserver = std::function<void(const StepInfo&)>;

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::optional<std::filesystem::path> resume;
  StepObserver observer;
  long max_steps = 0;          // stop after this many optimizer steps in total; 0 = no limit
  int stop_after_epochs = 0;   // stop once this many epochs are complete; 0 = run the schedule
  std::ostream* progress = nullptr;
};

struct TrainResult {
  ParamStore<float> best_params;  // parameters of the best validation epoch
  ModelConfig model;              // with backbone_dim resolved
  std::vector<EpochRecord> log;   // records produced by this call
  int best_epoch = -1;
  double best_val_map = 0.0;
  long steps = 0;
  std::vector<std::string> warnings;
};

/// Validation loss, mean AP and accuracy of a model over clips.
struct Validation {
  double loss = 0.0;
  double mean_ap = 0.0;
  double accuracy = 0.0;
};

Validation validate(HgtModel<float>& model, std::span<const LabeledSequence> data,
                    std::span<const ClipIndex> clips, int past_window, int horizon);

/// With out_dir set, writes metrics.jsonl (appended), last.ckpt after every
/// epoch and best.ckpt at every validation improvement. Throws NumericError
/// naming the step when the loss or a gradient is not finite.
TrainResult train(const TrainConfig& config, std::span<const LabeledSequence> train_data,
                  std::span<const LabeledSequence> val_data, const GraphSchema& schema,
                  const TrainOptions& options = {});

}  // namespace hgt
