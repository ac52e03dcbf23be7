#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "hgt/checkpoint.hpp"
#include "hgt/data.hpp"
#include "hgt/evaluation.hpp"
#include "hgt/metrics.hpp"

using namespace hgt;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run hgt_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "hgt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("hgt_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  out << text;
}

fs::path sim_config(const fs::path& dir, int sequences, int length) {
  const auto path = dir / "sim.json";
  write_file(path, "{\"num_sequences\": " + std::to_string(sequences) + ", \"sequence_length\": " +
                       std::to_string(length) + ", \"feature_dim\": 6, \"seed\": 4}\n");
  return path;
}

fs::path train_config(const fs::path& dir) {
  const auto path = dir / "train.json";
  write_file(path, R"({"task": "clipping_with_cvs_prior", "past_window": 2, "horizon": 2,
    "phase1_epochs": 1, "phase2_epochs": 2, "batch_size": 8, "learning_rate": 0.003,
    "clips_per_epoch": 24, "seed": 3,
    "model": {"hidden_dim": 8, "layers": 1, "dropout": 0.0}})");
  return path;
}

// Small dataset plus train config shared by the training-side cases.
struct Fixture {
  fs::path root, data, config;
};

Fixture fixture(const std::string& name) {
  Fixture f;
  f.root = scratch(name);
  f.data = f.root / "data";
  f.config = train_config(f.root);
  const auto r = hgt_cli({"synthesize", "--config", sim_config(f.root, 6, 24).string(), "--out", f.data.string()});
  REQUIRE(r.code == 0);
  return f;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

}  // namespace

TEST_CASE("synthesize writes one annotation and one feature file per sequence") {
  const auto root = scratch("synth");
  const auto cfg = sim_config(root, 10, 30);
  const auto a = root / "a", b = root / "b";
  REQUIRE(hgt_cli({"synthesize", "--config", cfg.string(), "--out", a.string()}).code == 0);
  REQUIRE(hgt_cli({"synthesize", "--config", cfg.string(), "--out", b.string()}).code == 0);

  int ann = 0, feat = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ann += entry.path().extension() == ".ann";
    feat += entry.path().extension() == ".feat";
  }
  CHECK(ann == 10);
  CHECK(feat == 10);
  REQUIRE(fs::exists(a / "manifest.json"));
  const auto manifest = json::parse(slurp(a / "manifest.json"));
  CHECK(manifest["command"] == "synthesize");
  CHECK(manifest["status"] == "ok");
  CHECK(manifest["seed"] == 4);
  CHECK(manifest["outputs"].size() == 21);

  for (const auto& entry : fs::directory_iterator(a)) {
    if (entry.path().filename() == "manifest.json") continue;
    CHECK_MESSAGE(slurp(entry.path()) == slurp(b / entry.path().filename()), entry.path().filename().string());
  }

  const auto loaded = load_normalized(a);
  REQUIRE(loaded.sequences.size() == 10);
  auto sc = default_sim_config();
  sc.num_sequences = 10;
  sc.sequence_length = 30;
  sc.feature_dim = 6;
  sc.seed = 4;
  const auto direct = simulate(sc);
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(loaded.sequences[i].id == direct[i].id);
    CHECK(loaded.sequences[i].labels == direct[i].labels);
    for (int t = 0; t < direct[i].length(); ++t) {
      CHECK(loaded.sequences[i].features[t].vector == direct[i].features[t].vector);
    }
  }

  SUBCASE("seed flag overrides the config") {
    const auto c = root / "c";
    REQUIRE(hgt_cli({"synthesize", "--config", cfg.string(), "--seed", "5", "--out", c.string()}).code == 0);
    CHECK(slurp(a / "sim-0000.ann") != slurp(c / "sim-0000.ann"));
  }
  SUBCASE("invalid simulator config") {
    write_file(root / "bad.json", R"({"p_obey": 1.5})");
    CHECK(hgt_cli({"synthesize", "--config", (root / "bad.json").string(), "--out", (root / "d").string()}).code ==
          cli::kExitConfig);
  }
}

TEST_CASE("validate-schema") {
  const auto root = scratch("schema");
  for (const char* task : {"triplet", "cvs", "clipping", "clipping_with_cvs_prior"}) {
    const auto r = hgt_cli({"validate-schema", "--task", task});
    CHECK(r.code == 0);
    CHECK(r.out.find("ok") == 0);
  }
  save_schema_file(build_task_schema(Task::clipping), root / "good.json");
  CHECK(hgt_cli({"validate-schema", (root / "good.json").string()}).code == 0);

  auto broken = build_task_schema(Task::clipping);
  broken.edges[0].nodes.push_back("no-such-node");
  save_schema_file(broken, root / "broken.json");
  const auto r = hgt_cli({"validate-schema", (root / "broken.json").string()});
  CHECK(r.code == cli::kExitConfig);
  CHECK(r.out.find("no-such-node") != std::string::npos);

  write_file(root / "garbage.json", "{ not json");
  CHECK(hgt_cli({"validate-schema", (root / "garbage.json").string()}).code == cli::kExitData);
  CHECK(hgt_cli({"validate-schema"}).code == cli::kExitConfig);
}

TEST_CASE("usage errors exit with the config code") {
  CHECK(hgt_cli({}).code == cli::kExitConfig);
  CHECK(hgt_cli({"frobnicate"}).code == cli::kExitConfig);
  CHECK(hgt_cli({"train", "--out", "/tmp/x", "--horizon", "four"}).code == cli::kExitConfig);
  CHECK(hgt_cli({"train", "--out", "/tmp/x", "--task", "dance"}).code == cli::kExitConfig);
  CHECK(hgt_cli({"--help"}).code == 0);
}

TEST_CASE("train writes a checkpoint, a metrics log and a manifest that re-runs it") {
  const auto f = fixture("train");
  const auto run = f.root / "run";
  const auto r = hgt_cli({"train", "--config", f.config.string(), "--data", f.data.string(), "--out", run.string(),
                          "--quiet"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  for (const char* name : {"best.ckpt", "last.ckpt", "metrics.jsonl", "manifest.json"}) {
    CHECK_MESSAGE(fs::exists(run / name), name);
  }
  const auto log = lines_of(slurp(run / "metrics.jsonl"));
  REQUIRE(log.size() == 3);
  long last_step = 0;
  for (const auto& line : log) {
    const auto rec = parse_epoch_record(line);
    CHECK(rec.step > last_step);
    last_step = rec.step;
  }

  const auto manifest = json::parse(slurp(run / "manifest.json"));
  CHECK(manifest["status"] == "ok");
  CHECK(manifest["seed"] == 3);
  CHECK(manifest["schema_hash"] == hash_hex(schema_hash(build_task_schema(Task::clipping_with_cvs_prior))));
  CHECK(manifest["split"]["train"].size() + manifest["split"]["val"].size() == 6);
  CHECK(manifest.contains("started"));
  CHECK(manifest.contains("finished"));
  CHECK(manifest.contains("code_version"));

  // Re-running from the manifest alone reproduces the log.
  const auto rerun = f.root / "rerun";
  REQUIRE(hgt_cli({"train", "--config", (run / "manifest.json").string(), "--out", rerun.string(), "--quiet"}).code == 0);
  CHECK(slurp(rerun / "metrics.jsonl") == slurp(run / "metrics.jsonl"));

  SUBCASE("flags override the config file") {
    const auto other = f.root / "other";
    REQUIRE(hgt_cli({"train", "--config", f.config.string(), "--data", f.data.string(), "--out", other.string(),
                     "--seed", "9", "--hidden", "6", "--quiet"})
                .code == 0);
    const auto m = json::parse(slurp(other / "manifest.json"));
    CHECK(m["train_config"]["seed"] == 9);
    CHECK(m["train_config"]["model"]["hidden_dim"] == 6);
    CHECK(m["train_config"]["horizon"] == 2);
  }
}

TEST_CASE("interrupted training resumes to the same log") {
  const auto f = fixture("resume");
  const auto full = f.root / "full", part = f.root / "part";
  const std::vector<std::string> base = {"train", "--config", f.config.string(), "--data", f.data.string(), "--quiet"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return hgt_cli(args);
  };
  REQUIRE(with({"--out", full.string()}).code == 0);
  REQUIRE(with({"--out", part.string(), "--stop-after-epochs", "2"}).code == 0);
  CHECK(lines_of(slurp(part / "metrics.jsonl")).size() == 2);
  REQUIRE(with({"--out", part.string(), "--resume", (part / "last.ckpt").string()}).code == 0);
  CHECK(slurp(part / "metrics.jsonl") == slurp(full / "metrics.jsonl"));
}

TEST_CASE("training variants and failures") {
  const auto f = fixture("variants");
  const std::vector<std::string> base = {"train", "--config", f.config.string(), "--data", f.data.string(), "--quiet"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return hgt_cli(args);
  };

  SUBCASE("single-phase ablation") {
    const auto dir = f.root / "single";
    REQUIRE(with({"--out", dir.string(), "--phase1-epochs", "0"}).code == 0);
    const auto log = lines_of(slurp(dir / "metrics.jsonl"));
    CHECK(log.size() == 2);
    for (const auto& line : log) CHECK(parse_epoch_record(line).phase == 2);
  }
  SUBCASE("recurrent cell") {
    const auto dir = f.root / "lstm";
    REQUIRE(with({"--out", dir.string(), "--variant", "recurrent_cell"}).code == 0);
    CHECK(load_checkpoint(dir / "best.ckpt").model.variant == Variant::recurrent_cell);
  }
  SUBCASE("divergence exits with the numeric code") {
    const auto dir = f.root / "diverge";
    const auto r = with({"--out", dir.string(), "--lr", "1e30"});
    CHECK(r.code == cli::kExitNumeric);
    CHECK(r.err.find("step") != std::string::npos);
    CHECK(json::parse(slurp(dir / "manifest.json"))["status"] == "failed");
  }
  SUBCASE("missing dataset exits with the data code") {
    CHECK(hgt_cli({"train", "--config", f.config.string(), "--data", (f.root / "nowhere").string(), "--out",
                   (f.root / "x").string()})
              .code == cli::kExitData);
  }
  SUBCASE("task the dataset cannot serve") {
    CHECK(with({"--out", (f.root / "y").string(), "--task", "triplet"}).code == cli::kExitData);
  }
}

TEST_CASE("evaluate and predict") {
  const auto f = fixture("eval");
  const auto run = f.root / "run";
  REQUIRE(hgt_cli({"train", "--config", f.config.string(), "--data", f.data.string(), "--out", run.string(), "--quiet"})
              .code == 0);
  const auto ckpt = run / "best.ckpt";
  const auto ev = f.root / "eval";
  const auto r = hgt_cli({"evaluate", "--checkpoint", ckpt.string(), "--data", f.data.string(), "--out", ev.string(),
                          "--plots"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  REQUIRE(fs::exists(ev / "report_h0.json"));
  REQUIRE(fs::exists(ev / "report_h4.json"));
  CHECK(fs::exists(ev / "pr_h4.svg"));
  CHECK(fs::exists(ev / "ap_vs_horizon.svg"));
  CHECK(json::parse(slurp(ev / "manifest.json"))["status"] == "ok");

  // mean_ap of each report equals the mean of the per-class rows of the table.
  std::map<int, std::pair<double, int>> sums;
  const auto table = lines_of(slurp(ev / "reports.csv"));
  const auto header = split_csv(table.at(0));
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto cells = split_csv(table[i]);
    const auto& ap = cells.at(col("ap"));
    if (ap.empty()) continue;
    auto& [sum, n] = sums[std::stoi(cells.at(col("horizon")))];
    sum += std::stod(ap);
    ++n;
  }
  for (int h : {0, 4}) {
    const auto rep = report_from_json(slurp(ev / ("report_h" + std::to_string(h) + ".json")));
    REQUIRE(sums[h].second > 0);
    CHECK(rep.mean_ap == doctest::Approx(sums[h].first / sums[h].second).epsilon(1e-6));
    CHECK(rep.mean_ap == doctest::Approx(mean_of(rep.per_class_ap)).epsilon(1e-12));
  }

  SUBCASE("explicit horizons") {
    const auto dir = f.root / "eval3";
    REQUIRE(hgt_cli({"evaluate", "--checkpoint", ckpt.string(), "--data", f.data.string(), "--out", dir.string(),
                     "--horizon", "1", "--horizon", "3"})
                .code == 0);
    CHECK(fs::exists(dir / "report_h1.json"));
    CHECK(fs::exists(dir / "report_h3.json"));
    CHECK_FALSE(fs::exists(dir / "report_h0.json"));
  }
  SUBCASE("checkpoint of another task is refused") {
    const auto bad = hgt_cli({"evaluate", "--checkpoint", ckpt.string(), "--data", f.data.string(), "--out",
                              (f.root / "e2").string(), "--task", "cvs"});
    CHECK(bad.code == cli::kExitConfig);
    CHECK(bad.err.find("schema") != std::string::npos);
  }
  SUBCASE("empty dataset") {
    fs::create_directories(f.root / "empty");
    CHECK(hgt_cli({"evaluate", "--checkpoint", ckpt.string(), "--data", (f.root / "empty").string(), "--out",
                   (f.root / "e3").string(), "--split", "all"})
              .code == cli::kExitData);
  }
  SUBCASE("damaged checkpoint") {
    write_file(f.root / "junk.ckpt", "HGTC but not really");
    CHECK(hgt_cli({"evaluate", "--checkpoint", (f.root / "junk.ckpt").string(), "--data", f.data.string(), "--out",
                   (f.root / "e4").string()})
              .code == cli::kExitData);
  }

  SUBCASE("predict matches the evaluation forward pass") {
    const auto loaded = load_normalized(f.data).sequences;
    const auto seq = project_to_task(loaded[0], Task::clipping_with_cvs_prior);
    const auto p = hgt_cli({"predict", "--checkpoint", ckpt.string(), "--features",
                            (f.data / (seq.id + ".feat")).string()});
    REQUIRE_MESSAGE(p.code == 0, p.err);
    const auto rows = lines_of(p.out);
    // P = F = 2 from the training config: anchors 2..23, three offsets each.
    REQUIRE(rows.size() == 1 + 22 * 3);

    const auto c = load_checkpoint(ckpt);
    auto model = model_from_checkpoint<float>(c);
    const std::vector<LabeledSequence> data = {seq};
    const auto clips = window_clips(data, 2, 2);
    const auto pred = predict_windows(model, data, clips, 2, 2);
    int matched = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto cells = split_csv(rows[i]);
      const int t = std::stoi(cells[0]), off = std::stoi(cells[1]);
      const auto it = std::find_if(clips.begin(), clips.end(), [&](const ClipIndex& k) { return k.t == t; });
      if (it == clips.end()) continue;
      const auto row = static_cast<Eigen::Index>(it - clips.begin());
      for (Eigen::Index j = 0; j < pred.scores[off].cols(); ++j) {
        CHECK(std::stod(cells[static_cast<std::size_t>(j) + 2]) == doctest::Approx(pred.scores[off](row, j)).epsilon(1e-7));
      }
      ++matched;
    }
    CHECK(matched == static_cast<int>(clips.size()) * 3);
  }

  SUBCASE("predict window arithmetic and input checks") {
    const auto loaded = load_normalized(f.data).sequences;
    std::vector<FrameFeature> frames(loaded[0].features.begin(), loaded[0].features.begin() + 3);
    save_precomputed(f.root / "short3.feat", frames);
    const auto p = hgt_cli({"predict", "--checkpoint", ckpt.string(), "--features", (f.root / "short3.feat").string()});
    REQUIRE(p.code == 0);
    CHECK(lines_of(p.out).size() == 1 + 3);

    frames.resize(2);
    save_precomputed(f.root / "short2.feat", frames);
    CHECK(hgt_cli({"predict", "--checkpoint", ckpt.string(), "--features", (f.root / "short2.feat").string()}).code ==
          cli::kExitData);

    std::vector<FrameFeature> wide(4, FrameFeature{Eigen::VectorXf::Zero(9), 0});
    for (int t = 0; t < 4; ++t) wide[t].time_index = t;
    save_precomputed(f.root / "wide.feat", wide);
    CHECK(hgt_cli({"predict", "--checkpoint", ckpt.string(), "--features", (f.root / "wide.feat").string()}).code ==
          cli::kExitData);

    const auto out = f.root / "pred.csv";
    REQUIRE(hgt_cli({"predict", "--checkpoint", ckpt.string(), "--features", (f.root / "short3.feat").string(),
                     "--horizon", "5", "--out", out.string()})
                .code == 0);
    CHECK(lines_of(slurp(out)).size() == 1 + 6);
  }
}
