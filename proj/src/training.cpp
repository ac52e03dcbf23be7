#include "hgt/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hgt/checkpoint.hpp"
#include "hgt/metrics.hpp"

namespace hgt {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view phase1_freeze_name(Phase1Freeze f) {
  return f == Phase1Freeze::edge_side ? "edge_side" : "edge_projector";
}

Phase1Freeze parse_phase1_freeze(std::string_view name) {
  if (name == "edge_side") return Phase1Freeze::edge_side;
  if (name == "edge_projector") return Phase1Freeze::edge_projector;
  throw ConfigError("unknown phase1_freeze '" + std::string(name) + "' (expected edge_side or edge_projector)");
}

void check_train_config(const TrainConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (c.past_window < 0) fail("past_window must be >= 0");
  if (c.horizon < 0) fail("horizon must be >= 0");
  if (c.phase1_epochs < 0 || c.phase2_epochs < 0) fail("epoch counts must be >= 0");
  if (c.phase1_epochs + c.phase2_epochs == 0) fail("at least one epoch is required");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) fail("learning_rate must be positive");
  if (c.batch_size < 1) fail("batch_size must be positive");
  if (!(c.resample_target > 0.0 && c.resample_target < 1.0)) fail("resample_target must lie in (0, 1)");
  if (!(c.resample_cap >= 1.0)) fail("resample_cap must be >= 1");
  if (!(c.focal_gamma >= 0.0)) fail("focal_gamma must be >= 0");
  if (c.patience < 1) fail("patience must be positive");
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) fail("train_fraction must lie in (0, 1)");
  if (c.clip_stride < 1 || c.eval_stride < 1) fail("strides must be positive");
  if (c.clips_per_epoch < 0) fail("clips_per_epoch must be >= 0");
  // backbone_dim 0 means "take it from the data".
  ModelConfig m = c.model;
  if (m.backbone_dim == 0) m.backbone_dim = 1;
  check_model_config(m);
}

// ---------------------------------------------------------------------------
// Config text

namespace {

json model_json(const ModelConfig& m) {
  return {{"backbone_dim", m.backbone_dim},   {"hidden_dim", m.hidden_dim},
          {"encoder_hidden", m.encoder_hidden}, {"heads", m.heads},
          {"layers", m.layers},               {"ff_multiplier", m.ff_multiplier},
          {"dropout", m.dropout},             {"norm_momentum", m.norm_momentum},
          {"identity_scale", m.identity_scale}, {"norm_step_slots", m.norm_step_slots},
          {"variant", variant_name(m.variant)}};
}

template <typename T>
void read_field(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

ModelConfig model_from_json(const json& j, ModelConfig c) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  static const std::set<std::string> known = {"backbone_dim", "hidden_dim", "encoder_hidden", "heads",
                                              "layers",       "ff_multiplier", "dropout", "norm_momentum",
                                              "identity_scale", "norm_step_slots", "variant"};
  for (const auto& [key, _] : j.items()) {
    if (known.count(key) == 0) throw ConfigError("model config: unknown field '" + key + "'");
  }
  read_field(j, "backbone_dim", c.backbone_dim);
  read_field(j, "hidden_dim", c.hidden_dim);
  read_field(j, "encoder_hidden", c.encoder_hidden);
  read_field(j, "heads", c.heads);
  read_field(j, "layers", c.layers);
  read_field(j, "ff_multiplier", c.ff_multiplier);
  read_field(j, "dropout", c.dropout);
  read_field(j, "norm_momentum", c.norm_momentum);
  read_field(j, "identity_scale", c.identity_scale);
  read_field(j, "norm_step_slots", c.norm_step_slots);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  return c;
}

json parse_json(std::string_view text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + " is not valid JSON: " + e.what());
  }
}

}  // namespace

std::string serialize_model_config(const ModelConfig& config) { return model_json(config).dump(2) + "\n"; }

ModelConfig parse_model_config(std::string_view text, const ModelConfig& base) {
  const json j = parse_json(text, "model config");
  try {
    return model_from_json(j, base);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

std::string serialize_train_config(const TrainConfig& c) {
  json j = {{"task", task_name(c.task)},
            {"past_window", c.past_window},
            {"horizon", c.horizon},
            {"phase1_epochs", c.phase1_epochs},
            {"phase2_epochs", c.phase2_epochs},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"resample_target", c.resample_target},
            {"resample_cap", c.resample_cap},
            {"seed", c.seed},
            {"focal_gamma", c.focal_gamma},
            {"patience", c.patience},
            {"phase1_freeze", phase1_freeze_name(c.phase1_freeze)},
            {"grad_clip", c.grad_clip},
            {"train_fraction", c.train_fraction},
            {"clip_stride", c.clip_stride},
            {"eval_stride", c.eval_stride},
            {"clips_per_epoch", c.clips_per_epoch},
            {"model", model_json(c.model)}};
  return j.dump(2) + "\n";
}

TrainConfig parse_train_config(std::string_view text, const TrainConfig& base) {
  const json j = parse_json(text, "train config");
  if (!j.is_object()) throw ConfigError("train config must be an object");
  static const std::set<std::string> known = {
      "task",        "past_window",   "horizon",     "phase1_epochs", "phase2_epochs",   "learning_rate",
      "batch_size",  "resample_target", "resample_cap", "seed",        "focal_gamma",     "patience",
      "phase1_freeze", "grad_clip",   "train_fraction", "clip_stride", "eval_stride",     "clips_per_epoch",
      "model"};
  for (const auto& [key, _] : j.items()) {
    if (known.count(key) == 0) throw ConfigError("train config: unknown field '" + key + "'");
  }
  TrainConfig c = base;
  try {
    if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
    read_field(j, "past_window", c.past_window);
    read_field(j, "horizon", c.horizon);
    read_field(j, "phase1_epochs", c.phase1_epochs);
    read_field(j, "phase2_epochs", c.phase2_epochs);
    read_field(j, "learning_rate", c.learning_rate);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "resample_target", c.resample_target);
    read_field(j, "resample_cap", c.resample_cap);
    read_field(j, "seed", c.seed);
    read_field(j, "focal_gamma", c.focal_gamma);
    read_field(j, "patience", c.patience);
    if (j.contains("phase1_freeze")) c.phase1_freeze = parse_phase1_freeze(j.at("phase1_freeze").get<std::string>());
    read_field(j, "grad_clip", c.grad_clip);
    read_field(j, "train_fraction", c.train_fraction);
    read_field(j, "clip_stride", c.clip_stride);
    read_field(j, "eval_stride", c.eval_stride);
    read_field(j, "clips_per_epoch", c.clips_per_epoch);
    if (j.contains("model")) c.model = model_from_json(j.at("model"), c.model);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  check_train_config(c);
  return c;
}

TrainConfig load_train_config(const fs::path& path, const TrainConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read train config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), base);
}

// ---------------------------------------------------------------------------
// Loss and resampling

double bce_loss(const PredictionBatch& pred, std::span<const LabelMatrix> truth) {
  if (pred.probs.size() != truth.size()) throw ShapeError("bce_loss: offset count differs from targets");
  double total = 0.0;
  long count = 0;
  for (std::size_t f = 0; f < truth.size(); ++f) {
    const auto& p = pred.probs[f];
    const auto& y = truth[f];
    if (p.rows() != y.rows() || p.cols() != y.cols()) throw ShapeError("bce_loss: prediction and target shapes differ");
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.cols(); ++j) {
        if (y(i, j) > 1) throw ArgumentError("bce_loss: targets must be 0 or 1");
        total += ad::bce_term(p(i, j), y(i, j));
        ++count;
      }
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

std::optional<std::vector<double>> resample_weights(std::span<const ClipIndex> index, double target, double cap) {
  if (index.empty()) throw ArgumentError("resample: empty clip index");
  const std::size_t n = index.size();
  const std::size_t labels = index[0].positives.size();
  std::vector<long> positives(labels, 0);
  for (const auto& c : index) {
    if (c.positives.size() != labels) throw ShapeError("resample: clips disagree in label count");
    for (std::size_t j = 0; j < labels; ++j) positives[j] += c.positives[j] ? 1 : 0;
  }
  if (std::all_of(positives.begin(), positives.end(), [](long p) { return p == 0; })) return std::nullopt;

  const double base = 1.0 / static_cast<double>(n);
  std::vector<double> boost(labels, 0.0);
  for (std::size_t j = 0; j < labels; ++j) {
    const double freq = static_cast<double>(positives[j]) / static_cast<double>(n);
    if (positives[j] > 0 && freq < target) boost[j] = std::min(target / static_cast<double>(positives[j]), cap * base);
  }
  std::vector<double> w(n, 0.0);
  double boosted_mass = 0.0;
  std::size_t unboosted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < labels; ++j) {
      if (index[i].positives[j]) w[i] = std::max(w[i], boost[j]);
    }
    if (w[i] > 0.0) {
      boosted_mass += w[i];
    } else {
      ++unboosted;
    }
  }
  if (boosted_mass < 1.0 && unboosted > 0) {
    const double rest = (1.0 - boosted_mass) / static_cast<double>(unboosted);
    for (double& x : w) {
      if (x == 0.0) x = rest;
    }
  } else {
    // The boosts alone exhaust the mass. Unboosted clips keep base / cap and
    // boosted clips move the same fraction of the way from base to their boost.
    const double floor = base / cap;
    const double budget = 1.0 - static_cast<double>(unboosted) * floor;
    double excess = 0.0;
    for (double x : w) {
      if (x > 0.0) excess += x - base;
    }
    const std::size_t boosted = n - unboosted;
    const double lambda =
        excess > 0.0 ? std::min(1.0, (budget - static_cast<double>(boosted) * base) / excess) : 0.0;
    for (double& x : w) x = x > 0.0 ? base + lambda * (x - base) : floor;
  }
  return w;
}

std::vector<ClipIndex> resample_epoch(std::span<const ClipIndex> index, double target, std::uint64_t seed, double cap,
                                      std::vector<std::string>* warnings) {
  auto weights = resample_weights(index, target, cap);
  const std::size_t n = index.size();
  if (!weights) {
    if (warnings) warnings->push_back("resample: no clip has a positive label; drawing uniformly");
    weights = std::vector<double>(n, 1.0 / static_cast<double>(n));
  }
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) cdf[i] = acc += (*weights)[i];
  Rng rng(seed);
  std::vector<ClipIndex> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = rng.uniform() * acc;
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    out.push_back(index[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), n - 1)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Log records

std::string epoch_record_json(const EpochRecord& r) {
  json j = {{"epoch", r.epoch},         {"phase", r.phase},     {"step", r.step},
            {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"val_mAP", r.val_map},
            {"val_acc", r.val_acc}};
  return j.dump();
}

EpochRecord parse_epoch_record(std::string_view line) {
  try {
    const json j = json::parse(line);
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.phase = j.at("phase").get<int>();
    r.step = j.at("step").get<long>();
    r.train_loss = j.at("train_loss").get<double>();
    r.val_loss = j.at("val_loss").get<double>();
    r.val_map = j.at("val_mAP").get<double>();
    r.val_acc = j.at("val_acc").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed metrics record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Validation

Validation validate(HgtModel<float>& model, std::span<const LabeledSequence> data, std::span<const ClipIndex> clips,
                    int past_window, int horizon) {
  if (clips.empty()) throw DataError("validation: no clip with a full window");
  const auto pred = predict_windows(model, data, std::vector<ClipIndex>(clips.begin(), clips.end()), past_window,
                                    horizon);
  const auto& labels = data[0].vocabulary;
  Validation v;
  double total = 0.0;
  long count = 0;
  for (int f = 0; f <= horizon; ++f) {
    const auto& p = pred.scores[f];
    const auto& y = pred.truth[f];
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.cols(); ++j) total += ad::bce_term(p(i, j), y(i, j));
    }
    count += p.size();
    const EvalReport r = make_report(f, labels, p, y);
    v.mean_ap += r.mean_ap;
    double acc = 0.0;
    for (const auto& [_, a] : r.accuracy) acc += a;
    v.accuracy += r.accuracy.empty() ? 0.0 : acc / static_cast<double>(r.accuracy.size());
  }
  v.loss = total / static_cast<double>(count);
  v.mean_ap /= horizon + 1;
  v.accuracy /= horizon + 1;
  return v;
}

// ---------------------------------------------------------------------------
// Optimization pieces

ad::Var<float> clip_batch_loss(Context<float>& ctx, const HgtModel<float>& model,
                               std::span<const LabeledSequence> data, std::span<const ClipIndex> batch,
                               int past_window, int horizon, const Eigen::RowVectorXf& column_weight,
                               double focal_gamma) {
  if (batch.empty()) throw ArgumentError("clip_batch_loss: empty batch");
  if (column_weight.size() != model.topology().label_dim) throw ShapeError("clip_batch_loss: column weight size");
  std::vector<ad::Var<float>> frames;
  for (auto& m : window_frames<float>(data, batch, past_window)) frames.push_back(ctx.tape.constant(std::move(m)));
  auto fwd = forward(ctx, model, std::span<const ad::Var<float>>(frames), past_window, horizon);
  ad::Matrix<float> weight(static_cast<Eigen::Index>(batch.size()), column_weight.size());
  weight.rowwise() = column_weight;
  ad::Var<float> loss;
  for (int f = 0; f <= horizon; ++f) {
    auto term = ad::bce(fwd.probs[f], window_truth<float>(data, batch, f), weight, focal_gamma);
    loss = f == 0 ? term : ad::add(loss, term);
  }
  return ad::scale(loss, 1.0f / static_cast<float>(horizon + 1));
}

AdamState make_adam_state(const ParamStore<float>& params) {
  AdamState a;
  for (const auto& t : params) {
    a.count.push_back(0);
    a.m.push_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
    a.v.push_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
  }
  return a;
}

double adam_step(ParamStore<float>& params, AdamState& state, const std::vector<ad::Matrix<float>>& grads,
                 const std::vector<char>& update, double learning_rate, double grad_clip) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  double norm2 = 0.0;
  for (int i = 0; i < params.size(); ++i) {
    if (update[i]) norm2 += grads[i].cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(norm2);
  const double clip = grad_clip > 0.0 && norm > grad_clip ? grad_clip / norm : 1.0;
  for (int i = 0; i < params.size(); ++i) {
    if (!update[i]) continue;
    const Eigen::MatrixXd g = grads[i].cast<double>() * clip;
    const long n = ++state.count[i];
    state.m[i] = kBeta1 * state.m[i] + (1.0 - kBeta1) * g;
    state.v[i] = kBeta2 * state.v[i] + (1.0 - kBeta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(n));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(n));
    const Eigen::MatrixXd delta = (state.m[i] / c1).array() / ((state.v[i] / c2).array().sqrt() + kEps) * learning_rate;
    params[i].value -= delta.cast<float>();
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

bool is_edge_projector(const std::string& name) { return name.rfind("project.edge.", 0) == 0; }

bool frozen_in_phase1(const Tensor<float>& t, Phase1Freeze freeze) {
  return freeze == Phase1Freeze::edge_side ? t.side == Side::edge : is_edge_projector(t.name);
}

Checkpoint make_checkpoint(const HgtModel<float>& model, const TrainConfig& config, const ParamStore<float>& params) {
  Checkpoint c;
  c.schema = model.schema();
  c.model = model.config();
  TrainConfig resolved = config;
  resolved.model = model.config();
  c.train_config = serialize_train_config(resolved);
  c.params = params.cast<double>();
  return c;
}

void check_data(std::span<const LabeledSequence> data, const Topology& topo, const char* what) {
  if (data.empty()) throw DataError(std::string(what) + " set is empty");
  for (const auto& s : data) {
    check_sequence(s);
    if (s.labels.cols() != topo.label_dim) {
      throw DataError(std::string(what) + " sequence '" + s.id + "' has " + std::to_string(s.labels.cols()) +
                      " label columns; the schema binds " + std::to_string(topo.label_dim));
    }
  }
}

}  // namespace

TrainResult train(const TrainConfig& config, std::span<const LabeledSequence> train_data,
                  std::span<const LabeledSequence> val_data, const GraphSchema& schema, const TrainOptions& options) {
  check_train_config(config);
  const Topology topo = compile_topology(schema);
  check_data(train_data, topo, "training");
  check_data(val_data, topo, "validation");

  ModelConfig mc = config.model;
  const int dim = train_data[0].feature_dim();
  if (mc.backbone_dim == 0) mc.backbone_dim = dim;
  for (auto set : {train_data, val_data}) {
    for (const auto& s : set) {
      if (s.feature_dim() != mc.backbone_dim) {
        throw DataError("sequence '" + s.id + "' has feature dimension " + std::to_string(s.feature_dim()) +
                        ", expected " + std::to_string(mc.backbone_dim));
      }
    }
  }

  const int P = config.past_window;
  const int F = config.horizon;
  const auto train_clips = window_clips(train_data, P, F, config.clip_stride);
  const auto val_clips = window_clips(val_data, P, F, config.eval_stride);
  if (train_clips.empty()) throw DataError("no training clip has a full window");
  if (val_clips.empty()) throw DataError("no validation clip has a full window");

  TrainResult result;
  HgtModel<float> model(schema, mc, child_seed(config.seed, "model"));
  AdamState adam = make_adam_state(model.params());
  int start_epoch = 0;
  long step = 0;
  int epochs_since_best = 0;
  result.best_params = model.params();
  result.best_val_map = -std::numeric_limits<double>::infinity();

  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume, schema_hash(schema));
    if (ckpt.model.variant != mc.variant) throw ConfigError("resume: checkpoint variant differs from the config");
    model = HgtModel<float>(schema, ckpt.model, ckpt.params.cast<float>());
    mc = ckpt.model;
    if (ckpt.adam) adam = *ckpt.adam;
    start_epoch = ckpt.epoch;
    step = ckpt.step;
    epochs_since_best = ckpt.epochs_since_best;
    result.best_epoch = ckpt.best_epoch;
    result.best_val_map = ckpt.best_val_map;
    const fs::path best = options.resume->parent_path() / "best.ckpt";
    result.best_params = fs::exists(best) ? load_checkpoint(best, schema_hash(schema)).params.cast<float>()
                                          : model.params();
  }
  result.model = mc;

  // Node-bound columns; phase 1 gives every other column zero loss weight.
  const Eigen::RowVectorXf all_columns = Eigen::RowVectorXf::Ones(topo.label_dim);
  Eigen::RowVectorXf node_columns = Eigen::RowVectorXf::Zero(topo.label_dim);
  for (int v = 0; v < topo.num_nodes; ++v) {
    if (topo.node_label[v] >= 0) node_columns(topo.node_label[v]) = 1.0f;
  }

  const std::size_t per_epoch = config.clips_per_epoch > 0
                                    ? std::min<std::size_t>(config.clips_per_epoch, train_clips.size())
                                    : train_clips.size();
  const long steps_per_epoch = static_cast<long>((per_epoch + config.batch_size - 1) / config.batch_size);
  const int total_epochs = config.phase1_epochs + config.phase2_epochs;

  std::ofstream log;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    log.open(options.out_dir / "metrics.jsonl", std::ios::app);
    if (!log) throw DataError("cannot write " + (options.out_dir / "metrics.jsonl").string());
  }

  auto& params = model.params();
  const int edge_w = params.index("project.edge.weight");
  const int edge_b = params.index("project.edge.bias");

  // Under the edge_side freeze, phase 1 also keeps the edge-side running
  // statistics fixed: they are restored after every step.
  std::vector<std::pair<int, ad::Matrix<float>>> frozen_buffers;
  if (config.phase1_freeze == Phase1Freeze::edge_side) {
    for (int i = 0; i < params.size(); ++i) {
      if (!params[i].trainable && params[i].side == Side::edge) frozen_buffers.emplace_back(i, params[i].value);
    }
  }

  const int last_epoch = options.stop_after_epochs > 0 ? std::min(total_epochs, options.stop_after_epochs)
                                                       : total_epochs;
  for (int epoch = start_epoch; epoch < last_epoch; ++epoch) {
    if (options.max_steps > 0 && step >= options.max_steps) break;
    const int phase = epoch < config.phase1_epochs ? 1 : 2;
    const int phase_first = phase == 1 ? 0 : config.phase1_epochs;
    const int phase_epochs = phase == 1 ? config.phase1_epochs : config.phase2_epochs;
    if (phase == 2 && epoch == config.phase1_epochs) epochs_since_best = 0;

    const std::uint64_t epoch_seed = child_seed(config.seed, "epoch" + std::to_string(epoch));
    auto sample = resample_epoch(train_clips, config.resample_target, child_seed(epoch_seed, "resample"),
                                 config.resample_cap, epoch == start_epoch ? &result.warnings : nullptr);
    sample.resize(per_epoch);
    Rng dropout_rng(child_seed(epoch_seed, "dropout"));

    double loss_sum = 0.0;
    long loss_count = 0;
    for (long b = 0; b < steps_per_epoch; ++b) {
      if (options.max_steps > 0 && step >= options.max_steps) break;
      const std::size_t first = static_cast<std::size_t>(b) * config.batch_size;
      const std::size_t count = std::min<std::size_t>(config.batch_size, per_epoch - first);
      std::span<const ClipIndex> batch(sample.data() + first, count);

      ForwardPass<float> pass(params, true, true, mc.dropout, &dropout_rng, mc.norm_momentum);
      auto loss = clip_batch_loss(pass.ctx, model, train_data, batch, P, F,
                                  phase == 1 ? node_columns : all_columns, config.focal_gamma);
      const double loss_value = loss.value()(0, 0);
      ++step;
      const std::string where = " at step " + std::to_string(step) + " (epoch " + std::to_string(epoch + 1) +
                                ", phase " + std::to_string(phase) + ")";
      if (!std::isfinite(loss_value)) throw NumericError("non-finite training loss" + where);
      pass.tape.backward(loss);
      const auto grads = pass.binder.gradients();

      std::vector<char> update(params.size(), 0);
      for (int i = 0; i < params.size(); ++i) {
        const auto& t = params[i];
        if (!t.trainable) continue;
        if (!grads[i].allFinite()) throw NumericError("non-finite gradient for '" + t.name + "'" + where);
        update[i] = !(phase == 1 && frozen_in_phase1(t, config.phase1_freeze));
      }
      const double progress = static_cast<double>((epoch - phase_first) * steps_per_epoch + b) /
                              static_cast<double>(phase_epochs * steps_per_epoch);
      const double lr = config.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      adam_step(params, adam, grads, update, lr, config.grad_clip);
      if (phase == 1) {
        for (const auto& [i, value] : frozen_buffers) params[i].value = value;
      }

      if (options.observer) {
        StepInfo info;
        info.epoch = epoch + 1;
        info.phase = phase;
        info.step = step;
        info.loss = loss_value;
        info.learning_rate = lr;
        info.edge_projector_grad_norm =
            std::sqrt(grads[edge_w].cast<double>().squaredNorm() + grads[edge_b].cast<double>().squaredNorm());
        info.batch = batch;
        options.observer(info);
      }
      loss_sum += loss_value;
      ++loss_count;
    }

    const Validation v = validate(model, val_data, val_clips, P, F);
    EpochRecord rec{epoch + 1, phase, step, loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0,
                    v.loss, v.mean_ap, v.accuracy};
    result.log.push_back(rec);
    if (log) log << epoch_record_json(rec) << '\n' << std::flush;
    if (options.progress) {
      *options.progress << "epoch " << rec.epoch << " phase " << rec.phase << " step " << rec.step << " train_loss "
                        << rec.train_loss << " val_loss " << rec.val_loss << " val_mAP " << rec.val_map << " val_acc "
                        << rec.val_acc << '\n';
    }

    const bool improved = v.mean_ap > result.best_val_map;
    if (improved) {
      result.best_val_map = v.mean_ap;
      result.best_epoch = epoch + 1;
      result.best_params = params;
      epochs_since_best = 0;
    } else if (phase == 2) {
      ++epochs_since_best;
    }
    if (!options.out_dir.empty()) {
      Checkpoint last = make_checkpoint(model, config, params);
      last.phase = phase;
      last.step = step;
      last.epoch = epoch + 1;
      last.best_val_map = result.best_val_map;
      last.best_epoch = result.best_epoch;
      last.epochs_since_best = epochs_since_best;
      if (improved) {
        Checkpoint best = last;
        save_checkpoint(options.out_dir / "best.ckpt", best);
      }
      last.adam = adam;
      save_checkpoint(options.out_dir / "last.ckpt", last);
    }
    if (phase == 2 && epochs_since_best >= config.patience) break;
  }
  result.steps = step;
  return result;
}

}  // namespace hgt
