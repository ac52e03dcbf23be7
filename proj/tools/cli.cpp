#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "hgt/checkpoint.hpp"
#include "hgt/data.hpp"
#include "hgt/evaluation.hpp"
#include "hgt/metrics.hpp"
#include "hgt/schema.hpp"
#include "hgt/training.hpp"

namespace hgt::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

std::string read_text(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(std::string("cannot read ") + what + " " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("cannot write " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot write " + path.string() + ": " + ec.message());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

std::string absolute_string(const fs::path& p) {
  std::error_code ec;
  const auto abs = fs::absolute(p, ec);
  return (ec ? p : abs).lexically_normal().string();
}

// One manifest per run: what was asked, with which configuration, and what
// was written.
class Manifest {
 public:
  Manifest(std::string command, int argc, const char* const* argv) {
    doc_["manifest_version"] = 1;
    doc_["command"] = std::move(command);
    doc_["code_version"] = kVersion;
    json args = json::array();
    for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
    doc_["argv"] = args;
    doc_["started"] = utc_now();
  }

  json& operator[](const char* key) { return doc_[key]; }

  void write(const fs::path& dir, const std::string& status) {
    doc_["status"] = status;
    doc_["finished"] = utc_now();
    write_text(dir / "manifest.json", doc_.dump(2) + "\n");
  }

 private:
  json doc_;
};

// Writes the manifest on every exit path once the output directory exists.
template <typename Body>
void with_manifest(Manifest& manifest, const fs::path& dir, Body&& body) {
  try {
    body();
  } catch (const std::exception& e) {
    manifest["error"] = e.what();
    manifest.write(dir, "failed");
    throw;
  }
  manifest.write(dir, "ok");
}

std::vector<LabeledSequence> load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
  auto loaded = load_normalized(dir);
  if (loaded.sequences.empty()) throw DataError("dataset " + dir.string() + " holds no sequences");
  return std::move(loaded.sequences);
}

std::vector<LabeledSequence> project_all(std::span<const LabeledSequence> data, Task task) {
  std::vector<LabeledSequence> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(project_to_task(s, task));
  return out;
}

json ids_of(std::span<const LabeledSequence> data) {
  json out = json::array();
  for (const auto& s : data) out.push_back(s.id);
  return out;
}

// ---------------------------------------------------------------------------
// synthesize

struct SynthesizeArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void cmd_synthesize(const SynthesizeArgs& a, int argc, const char* const* argv, std::ostream& out) {
  auto sim = a.config.empty() ? default_sim_config() : load_sim_config(a.config);
  if (a.seed) sim.seed = *a.seed;
  check_sim_config(sim);
  const fs::path dir = a.out;
  make_dir(dir);

  Manifest manifest("synthesize", argc, argv);
  manifest["seed"] = sim.seed;
  manifest["config"] = json::parse(serialize_sim_config(sim));
  const GraphSchema prior = build_task_schema(Task::clipping_with_cvs_prior);
  manifest["schema_hash"] =
      sim.vocabulary == task_vocabulary(Task::clipping_with_cvs_prior) ? json(hash_hex(schema_hash(prior))) : json();
  with_manifest(manifest, dir, [&] {
    const auto data = simulate(sim);
    save_normalized(dir, data);
    json outputs = json::array({"vocabulary.txt"});
    for (const auto& s : data) {
      outputs.push_back(s.id + ".ann");
      outputs.push_back(s.id + ".feat");
    }
    manifest["outputs"] = outputs;
    out << "wrote " << data.size() << " sequences to " << dir.string() << "\n";
  });
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<std::string> variant;
  std::optional<int> horizon;
  std::optional<int> past_window;
  std::optional<int> phase1_epochs;
  std::optional<int> phase2_epochs;
  std::optional<double> learning_rate;
  std::optional<int> batch_size;
  std::optional<int> hidden;
  std::optional<int> clips_per_epoch;
  std::optional<std::string> phase1_freeze;
  int stop_after_epochs = 0;
  bool quiet = false;
};

// A train config file or the manifest of an earlier training run.
TrainConfig resolve_train_config(const TrainArgs& a, std::string& data_dir) {
  TrainConfig c;
  if (!a.config.empty()) {
    const std::string text = read_text(a.config, "train config");
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError("train config " + a.config + " is not valid JSON: " + e.what());
    }
    if (j.is_object() && j.contains("manifest_version")) {
      if (j.value("command", "") != "train" || !j.contains("train_config")) {
        throw ConfigError(a.config + " is not the manifest of a training run");
      }
      c = parse_train_config(j.at("train_config").dump());
      if (data_dir.empty() && j.contains("data")) data_dir = j.at("data").get<std::string>();
    } else {
      c = parse_train_config(text);
    }
  }
  if (a.seed) c.seed = *a.seed;
  if (a.task) c.task = parse_task(*a.task);
  if (a.variant) c.model.variant = parse_variant(*a.variant);
  if (a.horizon) c.horizon = *a.horizon;
  if (a.past_window) c.past_window = *a.past_window;
  if (a.phase1_epochs) c.phase1_epochs = *a.phase1_epochs;
  if (a.phase2_epochs) c.phase2_epochs = *a.phase2_epochs;
  if (a.learning_rate) c.learning_rate = *a.learning_rate;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.hidden) c.model.hidden_dim = *a.hidden;
  if (a.clips_per_epoch) c.clips_per_epoch = *a.clips_per_epoch;
  if (a.phase1_freeze) c.phase1_freeze = parse_phase1_freeze(*a.phase1_freeze);
  check_train_config(c);
  return c;
}

void cmd_train(const TrainArgs& a, int argc, const char* const* argv, std::ostream& out) {
  std::string data_dir = a.data;
  const TrainConfig config = resolve_train_config(a, data_dir);
  if (data_dir.empty()) throw ConfigError("train: --data is required");
  const fs::path dir = a.out;
  make_dir(dir);
  const GraphSchema schema = build_task_schema(config.task);

  Manifest manifest("train", argc, argv);
  manifest["seed"] = config.seed;
  manifest["train_config"] = json::parse(serialize_train_config(config));
  manifest["data"] = absolute_string(data_dir);
  manifest["schema_hash"] = hash_hex(schema_hash(schema));
  if (!a.resume.empty()) manifest["resume"] = absolute_string(a.resume);
  with_manifest(manifest, dir, [&] {
    auto [train_raw, val_raw] = split(load_dataset(data_dir), config.train_fraction, config.seed);
    manifest["split"] = {{"train", ids_of(train_raw)}, {"val", ids_of(val_raw)}};
    const auto train_data = project_all(train_raw, config.task);
    const auto val_data = project_all(val_raw, config.task);

    TrainOptions options;
    options.out_dir = dir;
    if (!a.resume.empty()) options.resume = fs::path(a.resume);
    options.stop_after_epochs = a.stop_after_epochs;
    if (!a.quiet) options.progress = &out;
    const auto result = train(config, train_data, val_data, schema, options);

    manifest["outputs"] = json::array({"metrics.jsonl", "last.ckpt", "best.ckpt"});
    manifest["best_epoch"] = result.best_epoch;
    manifest["best_val_mAP"] = result.best_val_map;
    manifest["steps"] = result.steps;
    if (!result.warnings.empty()) manifest["warnings"] = result.warnings;
    for (const auto& w : result.warnings) out << "warning: " << w << "\n";
    out << "best epoch " << result.best_epoch << " val_mAP " << result.best_val_map << "\n";
  });
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::vector<int> horizons;
  std::string split = "val";
  std::optional<std::string> task;
  std::optional<int> past_window;
  int stride = 1;
  bool plots = false;
};

Checkpoint load_for_task(const std::string& path, const std::optional<std::string>& task) {
  std::optional<std::uint64_t> expected;
  if (task) expected = schema_hash(build_task_schema(parse_task(*task)));
  Checkpoint ckpt = load_checkpoint(path, expected);
  const std::uint64_t canonical = schema_hash(build_task_schema(ckpt.schema.task));
  if (schema_hash(ckpt.schema) != canonical) {
    throw ConfigError("checkpoint " + path + " was trained on a schema (hash " + hash_hex(schema_hash(ckpt.schema)) +
                      ") that differs from the " + std::string(task_name(ckpt.schema.task)) + " schema (hash " +
                      hash_hex(canonical) + ")");
  }
  return ckpt;
}

std::optional<TrainConfig> stored_train_config(const Checkpoint& ckpt) {
  if (ckpt.train_config.empty()) return std::nullopt;
  return parse_train_config(ckpt.train_config);
}

json report_json(const EvalReport& r) { return json::parse(report_to_json(r)); }

void cmd_evaluate(const EvaluateArgs& a, int argc, const char* const* argv, std::ostream& out) {
  const Checkpoint ckpt = load_for_task(a.checkpoint, a.task);
  const auto trained = stored_train_config(ckpt);
  const int past_window = a.past_window ? *a.past_window : trained ? trained->past_window : 4;
  std::vector<int> horizons = a.horizons.empty() ? std::vector<int>{0, 4} : a.horizons;
  std::sort(horizons.begin(), horizons.end());
  horizons.erase(std::unique(horizons.begin(), horizons.end()), horizons.end());
  if (a.split != "val" && a.split != "all") throw ConfigError("evaluate: --split must be 'val' or 'all'");
  if (a.split == "val" && !trained) {
    throw ConfigError("checkpoint has no training configuration to rebuild the validation split; use --split all");
  }
  const fs::path dir = a.out;
  make_dir(dir);

  Manifest manifest("evaluate", argc, argv);
  manifest["checkpoint"] = absolute_string(a.checkpoint);
  manifest["data"] = absolute_string(a.data);
  manifest["seed"] = trained ? json(trained->seed) : json();
  manifest["schema_hash"] = hash_hex(schema_hash(ckpt.schema));
  manifest["config"] = {{"task", task_name(ckpt.schema.task)}, {"past_window", past_window},
                        {"horizons", horizons},                 {"split", a.split},
                        {"stride", a.stride},                   {"plots", a.plots}};
  with_manifest(manifest, dir, [&] {
    auto data = load_dataset(a.data);
    std::vector<LabeledSequence> reference, evaluated;
    if (a.split == "val") {
      std::tie(reference, evaluated) = split(std::move(data), trained->train_fraction, trained->seed);
    } else {
      reference = data;
      evaluated = std::move(data);
    }
    if (evaluated.empty()) throw DataError("evaluation set is empty");
    manifest["evaluated"] = ids_of(evaluated);

    auto model = model_from_checkpoint<float>(ckpt);
    const auto r = evaluate_split(model, reference, evaluated, past_window, horizons, a.stride);

    json outputs = json::array();
    for (const auto& rep : r.model) {
      const std::string name = "report_h" + std::to_string(rep.horizon) + ".json";
      write_text(dir / name, report_to_json(rep));
      outputs.push_back(name);
    }
    write_text(dir / "reports.csv", report_table_csv(r.model));
    outputs.push_back("reports.csv");
    json baselines = {{"marginal", json::array()}, {"persistence", json::array()}};
    for (std::size_t i = 0; i < horizons.size(); ++i) {
      baselines["marginal"].push_back(report_json(r.marginal[i]));
      baselines["persistence"].push_back(report_json(r.persistence[i]));
    }
    write_text(dir / "baselines.json", baselines.dump(2) + "\n");
    outputs.push_back("baselines.json");

    if (a.plots) {
      const auto& pred = r.predictions;
      const auto& labels = r.model[0].labels;
      for (const auto& rep : r.model) {
        std::map<std::string, std::vector<PrPoint>> curves;
        for (std::size_t j = 0; j < labels.size(); ++j) {
          if (rep.per_class_ap.count(labels[j]) == 0) continue;
          const Eigen::VectorXd s = pred.scores[rep.horizon].col(static_cast<Eigen::Index>(j));
          const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1> y = pred.truth[rep.horizon].col(static_cast<Eigen::Index>(j));
          curves[labels[j]] = precision_recall_curve(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())),
                                                     std::span<const std::uint8_t>(y.data(), static_cast<std::size_t>(y.size())));
        }
        const std::string name = "pr_h" + std::to_string(rep.horizon) + ".svg";
        write_pr_curves_svg(dir / name, "precision-recall, hp=" + std::to_string(rep.horizon) + " s", curves);
        outputs.push_back(name);
      }
      write_ap_vs_horizon_svg(dir / "ap_vs_horizon.svg", r.model);
      outputs.push_back("ap_vs_horizon.svg");
    }
    manifest["outputs"] = outputs;

    out << "horizon  model_mAP  marginal_mAP  persistence_mAP  frames\n";
    for (std::size_t i = 0; i < horizons.size(); ++i) {
      out << std::setw(7) << horizons[i] << "  " << std::fixed << std::setprecision(4) << std::setw(9)
          << r.model[i].mean_ap << "  " << std::setw(12) << r.marginal[i].mean_ap << "  " << std::setw(15)
          << r.persistence[i].mean_ap << "  " << r.model[i].n_frames << "\n";
      out.unsetf(std::ios::floatfield);
    }
  });
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string checkpoint;
  std::string features;
  std::string out;
  std::optional<int> past_window;
  std::optional<int> horizon;
};

void cmd_predict(const PredictArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_for_task(a.checkpoint, std::nullopt);
  const auto trained = stored_train_config(ckpt);
  const int P = a.past_window ? *a.past_window : trained ? trained->past_window : 4;
  const int F = a.horizon ? *a.horizon : trained ? trained->horizon : 4;
  if (P < 0 || F < 0) throw ConfigError("predict: past window and horizon must be non-negative");

  LabeledSequence seq;
  seq.id = fs::path(a.features).stem().string();
  seq.features = load_precomputed(a.features);
  seq.vocabulary = task_vocabulary(ckpt.schema.task);
  seq.labels = LabelMatrix::Zero(static_cast<Eigen::Index>(seq.features.size()),
                                 static_cast<Eigen::Index>(seq.vocabulary.size()));
  if (seq.feature_dim() != ckpt.model.backbone_dim) {
    throw ShapeError("feature dimension " + std::to_string(seq.feature_dim()) + " of " + a.features +
                     " differs from the checkpoint's backbone dimension " + std::to_string(ckpt.model.backbone_dim));
  }
  if (seq.length() < P + 1) {
    throw DataError(a.features + " has " + std::to_string(seq.length()) + " frames; a past window of " +
                    std::to_string(P) + " needs at least " + std::to_string(P + 1));
  }

  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::trunc);
    if (!file) throw DataError("cannot write " + a.out);
  }
  std::ostream& sink = a.out.empty() ? out : file;
  sink << "time_index,offset";
  for (const auto& name : seq.vocabulary) sink << "," << name;
  sink << "\n";

  auto model = model_from_checkpoint<float>(ckpt);
  const std::vector<LabeledSequence> data = {seq};
  constexpr int kChunk = 256;
  char buf[32];
  for (int first = P; first < seq.length(); first += kChunk) {
    std::vector<ClipIndex> clips;
    for (int t = first; t < std::min(seq.length(), first + kChunk); ++t) clips.push_back(ClipIndex{0, t, {}});
    const auto scores = predict_scores(model, data, std::span<const ClipIndex>(clips), P, F);
    for (std::size_t i = 0; i < clips.size(); ++i) {
      for (int f = 0; f <= F; ++f) {
        sink << seq.features[static_cast<std::size_t>(clips[i].t)].time_index << "," << f;
        for (Eigen::Index j = 0; j < scores[f].cols(); ++j) {
          std::snprintf(buf, sizeof buf, ",%.9g", scores[f](static_cast<Eigen::Index>(i), j));
          sink << buf;
        }
        sink << "\n";
      }
    }
    sink.flush();
  }
}

// ---------------------------------------------------------------------------
// validate-schema

struct ValidateArgs {
  std::string file;
  std::optional<std::string> task;
};

void cmd_validate_schema(const ValidateArgs& a, std::ostream& out) {
  if (a.file.empty() == !a.task) throw ConfigError("validate-schema: give either a schema file or --task");
  const GraphSchema schema = a.task ? build_task_schema(parse_task(*a.task)) : load_schema_file(a.file);
  const auto violations = validate_schema(schema);
  for (const auto& v : violations) out << v.element << ": " << v.rule << ": " << v.message << "\n";
  if (!violations.empty()) {
    throw ConfigError(std::to_string(violations.size()) + " schema violation(s)");
  }
  out << "ok: task " << task_name(schema.task) << ", " << schema.nodes.size() << " nodes, " << schema.edges.size()
      << " edges, " << schema.label_dim() << " labels, hash " << hash_hex(schema_hash(schema)) << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hypergraph transformer for surgical event detection and forecasting", "hgt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("hgt ") + kVersion);

  SynthesizeArgs syn;
  auto* s = app.add_subcommand("synthesize", "Write a simulated dataset in the normalized layout");
  s->add_option("--config", syn.config, "Simulator config (JSON); defaults to the built-in workflow");
  s->add_option("--seed", syn.seed, "Simulator seed, overrides the config");
  s->add_option("--out", syn.out, "Output dataset directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Two-phase training; writes checkpoints, metrics.jsonl and a manifest");
  t->add_option("--config", tr.config, "Train config (JSON) or the manifest of an earlier training run");
  t->add_option("--data", tr.data, "Normalized dataset directory");
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--resume", tr.resume, "Checkpoint to continue from (usually <run>/last.ckpt)");
  t->add_option("--seed", tr.seed, "Root seed");
  t->add_option("--task", tr.task, "triplet | cvs | clipping | clipping_with_cvs_prior");
  t->add_option("--variant", tr.variant, "transformer | recurrent_cell");
  t->add_option("--horizon", tr.horizon, "Prediction horizon F in frames");
  t->add_option("--past-window", tr.past_window, "Past window P in frames");
  t->add_option("--phase1-epochs", tr.phase1_epochs, "Node-pretraining epochs (0 skips phase 1)");
  t->add_option("--phase2-epochs", tr.phase2_epochs, "Joint-training epochs");
  t->add_option("--lr", tr.learning_rate, "Peak learning rate");
  t->add_option("--batch-size", tr.batch_size, "Clips per optimizer step");
  t->add_option("--hidden", tr.hidden, "Hidden width");
  t->add_option("--clips-per-epoch", tr.clips_per_epoch, "Resampled clips per epoch (0 = all)");
  t->add_option("--phase1-freeze", tr.phase1_freeze, "edge_side | edge_projector");
  t->add_option("--stop-after-epochs", tr.stop_after_epochs, "Stop once this many epochs are done (resume later)");
  t->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a checkpoint next to the marginal and persistence baselines");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Normalized dataset directory")->required();
  e->add_option("--out", ev.out, "Report directory")->required();
  e->add_option("--horizon", ev.horizons, "Offsets to report (repeatable; default 0 and 4)");
  e->add_option("--split", ev.split, "val: the training run's validation split; all: every sequence");
  e->add_option("--task", ev.task, "Expected task; refused when the checkpoint was trained for another");
  e->add_option("--past-window", ev.past_window, "Past window P (default: the training value)");
  e->add_option("--stride", ev.stride, "Anchor spacing in frames")->check(CLI::PositiveNumber);
  e->add_flag("--plots", ev.plots, "Also write PR-curve and AP-vs-horizon SVG charts");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Per-offset label probabilities for one feature file (CSV)");
  p->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  p->add_option("--features", pr.features, "Precomputed-feature file")->required();
  p->add_option("--out", pr.out, "Output CSV (default: standard output)");
  p->add_option("--past-window", pr.past_window, "Past window P (default: the training value)");
  p->add_option("--horizon", pr.horizon, "Horizon F (default: the training value)");

  ValidateArgs va;
  auto* v = app.add_subcommand("validate-schema", "Check a schema file against the schema invariants");
  v->add_option("file", va.file, "Schema file (JSON)");
  v->add_option("--task", va.task, "Validate the shipped schema of a task instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*s) cmd_synthesize(syn, argc, argv, out);
    if (*t) cmd_train(tr, argc, argv, out);
    if (*e) cmd_evaluate(ev, argc, argv, out);
    if (*p) cmd_predict(pr, out);
    if (*v) cmd_validate_schema(va, out);
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const ArgumentError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const FormatError& ex) {
    err << "format error: " << ex.what() << "\n";
    return kExitData;
  } catch (const ShapeError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const NumericError& ex) {
    err << "numeric error: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace hgt::cli
