#include "hgt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hgt/cholec_classes.hpp"
#include "hgt/error.hpp"
#include "hgt/random.hpp"

namespace hgt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kCvsAchieved = "CVS-achieved";
const std::vector<std::string> kCriteria = {"two-structures", "cystic-plate", "hepatocystic-triangle"};

std::vector<std::string> cvs_vocabulary() { return task_vocabulary(Task::cvs); }

int column_of(const std::vector<std::string>& vocab, std::string_view name) {
  auto it = std::find(vocab.begin(), vocab.end(), name);
  return it == vocab.end() ? -1 : static_cast<int>(it - vocab.begin());
}

std::vector<std::string> read_vocabulary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) vocab.push_back(line);
  }
  if (std::set<std::string>(vocab.begin(), vocab.end()).size() != vocab.size()) {
    throw DataError(path.string() + ": duplicate label names");
  }
  return vocab;
}

/// Adds implied columns for an active id.
using Expand = std::function<void(int id, std::uint8_t* row)>;

LabelMatrix read_annotation(const fs::path& path, int columns, const Expand& expand) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<std::vector<int>> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    int time_index = 0;
    try {
      std::size_t used = 0;
      time_index = std::stoi(token, &used);
      if (used != token.size()) throw std::invalid_argument(token);
    } catch (const std::exception&) {
      throw DataError(where + ": malformed time index '" + token + "'");
    }
    if (time_index != static_cast<int>(rows.size())) {
      throw DataError(where + ": expected time index " + std::to_string(rows.size()) + ", found " +
                      std::to_string(time_index));
    }
    std::vector<int> ids;
    while (fields >> token) {
      int id = -1;
      try {
        std::size_t used = 0;
        id = std::stoi(token, &used);
        if (used != token.size()) id = -1;
      } catch (const std::exception&) {
        id = -1;
      }
      if (id < 0 || id >= columns) throw DataError(where + ": unknown class id '" + token + "'");
      ids.push_back(id);
    }
    rows.push_back(std::move(ids));
  }
  LabelMatrix labels = LabelMatrix::Zero(static_cast<Eigen::Index>(rows.size()), columns);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::uint8_t* row = labels.row(static_cast<Eigen::Index>(r)).data();
    for (int id : rows[r]) {
      row[id] = 1;
      if (expand) expand(id, row);
    }
  }
  return labels;
}

LoadResult load_with(const fs::path& dir, const std::optional<std::vector<std::string>>& expected,
                     const Expand& expand) {
  LoadResult result;
  if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ann") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    result.warnings.push_back("no annotation files in " + dir.string());
    return result;
  }
  const fs::path vocab_path = dir / "vocabulary.txt";
  std::vector<std::string> vocab;
  if (fs::exists(vocab_path)) {
    vocab = read_vocabulary(vocab_path);
    if (expected && vocab != *expected) {
      throw DataError(vocab_path.string() + ": vocabulary does not match the adapter's label set");
    }
  } else if (expected) {
    vocab = *expected;
  } else {
    throw DataError(vocab_path.string() + " is missing");
  }
  for (const auto& file : files) {
    LabeledSequence seq;
    seq.id = file.stem().string();
    seq.vocabulary = vocab;
    seq.labels = read_annotation(file, static_cast<int>(vocab.size()), expand);
    fs::path feat = file;
    feat.replace_extension(".feat");
    if (!fs::exists(feat)) throw DataError(feat.string() + " is missing");
    try {
      seq.features = load_precomputed(feat);
    } catch (const FormatError& e) {
      throw DataError(e.what());
    }
    if (static_cast<int>(seq.features.size()) != seq.length()) {
      throw DataError(file.string() + ": " + std::to_string(seq.length()) + " annotated frames but " +
                      std::to_string(seq.features.size()) + " feature rows in " + feat.filename().string());
    }
    result.sequences.push_back(std::move(seq));
  }
  return result;
}

}  // namespace

void check_sequence(const LabeledSequence& seq) {
  if (static_cast<int>(seq.features.size()) != seq.length()) {
    throw DataError(seq.id + ": feature count differs from label rows");
  }
  if (seq.labels.cols() != static_cast<Eigen::Index>(seq.vocabulary.size())) {
    throw DataError(seq.id + ": label columns differ from vocabulary size");
  }
  if (std::set<std::string>(seq.vocabulary.begin(), seq.vocabulary.end()).size() != seq.vocabulary.size()) {
    throw DataError(seq.id + ": duplicate vocabulary names");
  }
  if ((seq.labels.array() > 1).any()) throw DataError(seq.id + ": labels must be 0 or 1");
  try {
    check_frames(seq.features);
  } catch (const FormatError& e) {
    throw DataError(seq.id + ": " + e.what());
  }
}

LoadResult load_normalized(const fs::path& dir, const std::optional<std::vector<std::string>>& expected_vocabulary) {
  return load_with(dir, expected_vocabulary, nullptr);
}

void save_normalized(const fs::path& dir, std::span<const LabeledSequence> sequences) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create " + dir.string());
  if (sequences.empty()) return;
  const auto& vocab = sequences[0].vocabulary;
  {
    std::ofstream out(dir / "vocabulary.txt", std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "vocabulary.txt").string());
    for (const auto& name : vocab) out << name << "\n";
  }
  for (const auto& seq : sequences) {
    check_sequence(seq);
    if (seq.vocabulary != vocab) throw DataError(seq.id + ": vocabulary differs from the rest of the dataset");
    std::ofstream out(dir / (seq.id + ".ann"), std::ios::trunc);
    if (!out) throw DataError("cannot write annotations for " + seq.id);
    for (int t = 0; t < seq.length(); ++t) {
      out << t;
      for (Eigen::Index c = 0; c < seq.labels.cols(); ++c) {
        if (seq.labels(t, c)) out << ' ' << c;
      }
      out << '\n';
    }
    std::vector<FrameFeature> frames = seq.features;
    for (int t = 0; t < static_cast<int>(frames.size()); ++t) frames[t].time_index = t;
    try {
      save_precomputed(dir / (seq.id + ".feat"), frames);
    } catch (const FormatError& e) {
      throw DataError(e.what());
    }
  }
}

LoadResult load_triplet_annotations(const fs::path& dir) {
  const auto& classes = cholec::triplet_classes();
  Expand expand = [&](int id, std::uint8_t* row) {
    if (id < cholec::kNumComponents) return;
    const auto& c = classes[id - cholec::kNumComponents];
    row[cholec::tool_column(c.tool)] = 1;
    row[cholec::verb_column(c.verb)] = 1;
    row[cholec::target_column(c.target)] = 1;
  };
  return load_with(dir, cholec::triplet_vocabulary(), expand);
}

std::vector<int> cvs_inconsistencies(const LabeledSequence& seq) {
  const int cvs = column_of(seq.vocabulary, kCvsAchieved);
  std::vector<int> crit;
  for (const auto& name : kCriteria) crit.push_back(column_of(seq.vocabulary, name));
  std::vector<int> frames;
  if (cvs < 0) return frames;
  for (int t = 0; t < seq.length(); ++t) {
    if (!seq.labels(t, cvs)) continue;
    for (int c : crit) {
      if (c >= 0 && !seq.labels(t, c)) {
        frames.push_back(t);
        break;
      }
    }
  }
  return frames;
}

LoadResult load_cvs_annotations(const fs::path& dir) {
  auto result = load_with(dir, cvs_vocabulary(), nullptr);
  for (const auto& seq : result.sequences) {
    const auto bad = cvs_inconsistencies(seq);
    if (!bad.empty()) {
      result.warnings.push_back(seq.id + ": " + std::to_string(bad.size()) +
                                " frames mark CVS-achieved without all three criteria (first at t=" +
                                std::to_string(bad.front()) + ")");
    }
  }
  return result;
}

std::vector<long> label_frequency(std::span<const LabeledSequence> sequences) {
  std::vector<long> counts;
  for (const auto& seq : sequences) {
    if (counts.empty()) counts.assign(seq.labels.cols(), 0);
    if (static_cast<Eigen::Index>(counts.size()) != seq.labels.cols()) {
      throw DataError(seq.id + ": label width differs from the rest of the dataset");
    }
    for (Eigen::Index c = 0; c < seq.labels.cols(); ++c) counts[c] += seq.labels.col(c).cast<long>().sum();
  }
  return counts;
}

AlignResult align_clipping(std::span<const LabeledSequence> triplet, std::span<const LabeledSequence> cvs) {
  AlignResult result;
  const auto vocab = task_vocabulary(Task::clipping_with_cvs_prior);
  std::map<std::string, const LabeledSequence*> by_id;
  for (const auto& s : cvs) by_id[s.id] = &s;
  std::set<std::string> used;
  for (const auto& t : triplet) {
    auto it = by_id.find(t.id);
    if (it == by_id.end()) {
      result.unmatched_frames += t.length();
      result.warnings.push_back(t.id + ": no CVS annotation, " + std::to_string(t.length()) + " frames dropped");
      continue;
    }
    const LabeledSequence& c = *it->second;
    used.insert(t.id);
    const int n = std::min(t.length(), c.length());
    const int extra = std::max(t.length(), c.length()) - n;
    if (extra > 0) {
      result.unmatched_frames += extra;
      result.warnings.push_back(t.id + ": " + std::to_string(extra) + " frames without a counterpart dropped");
    }
    LabeledSequence out;
    out.id = t.id;
    out.vocabulary = vocab;
    out.features.assign(t.features.begin(), t.features.begin() + std::min<int>(n, t.features.size()));
    out.labels = LabelMatrix::Zero(n, static_cast<Eigen::Index>(vocab.size()));
    for (std::size_t k = 0; k < vocab.size(); ++k) {
      const bool from_cvs = vocab[k] == kCvsAchieved || std::count(kCriteria.begin(), kCriteria.end(), vocab[k]) > 0;
      const LabeledSequence& src = from_cvs ? c : t;
      const int col = column_of(src.vocabulary, vocab[k]);
      if (col < 0) throw DataError(src.id + ": label '" + vocab[k] + "' missing for alignment");
      out.labels.col(static_cast<Eigen::Index>(k)) = src.labels.col(col).head(n);
    }
    result.sequences.push_back(std::move(out));
  }
  for (const auto& c : cvs) {
    if (used.count(c.id) == 0) {
      result.unmatched_frames += c.length();
      result.warnings.push_back(c.id + ": no triplet annotation, " + std::to_string(c.length()) + " frames dropped");
    }
  }
  return result;
}

LabeledSequence project_to_task(const LabeledSequence& seq, Task task) {
  const auto vocab = task_vocabulary(task);
  if (seq.vocabulary == vocab) return seq;
  LabeledSequence out;
  out.id = seq.id;
  out.features = seq.features;
  out.vocabulary = vocab;
  out.labels = LabelMatrix::Zero(seq.labels.rows(), static_cast<Eigen::Index>(vocab.size()));
  for (std::size_t k = 0; k < vocab.size(); ++k) {
    const int col = column_of(seq.vocabulary, vocab[k]);
    if (col < 0) {
      throw DataError(seq.id + ": label '" + vocab[k] + "' required by task " + std::string(task_name(task)) +
                      " is not annotated");
    }
    out.labels.col(static_cast<Eigen::Index>(k)) = seq.labels.col(col);
  }
  return out;
}

std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> split(std::vector<LabeledSequence> data,
                                                                             double train_fraction,
                                                                             std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  const int n = static_cast<int>(data.size());
  if (n < 2) throw DataError("splitting needs at least 2 sequences, got " + std::to_string(n));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(child_seed(seed, "split"));
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  const int n_train = std::clamp(static_cast<int>(std::lround(train_fraction * n)), 1, n - 1);
  std::vector<int> train_idx(order.begin(), order.begin() + n_train);
  std::vector<int> val_idx(order.begin() + n_train, order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::pair<std::vector<LabeledSequence>, std::vector<LabeledSequence>> out;
  for (int i : train_idx) out.first.push_back(std::move(data[i]));
  for (int i : val_idx) out.second.push_back(std::move(data[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Simulator

int WorkflowSimConfig::phase_index(std::string_view name) const {
  for (int i = 0; i < num_phases(); ++i) {
    if (phases[i].name == name) return i;
  }
  return -1;
}

WorkflowSimConfig default_sim_config() {
  WorkflowSimConfig c;
  c.vocabulary = task_vocabulary(Task::clipping_with_cvs_prior);
  const int l = static_cast<int>(c.vocabulary.size());
  auto col = [&](std::string_view name) { return column_of(c.vocabulary, name); };
  auto phase = [&](std::string name, std::vector<double> transitions, bool gated,
                   std::vector<std::pair<std::string_view, double>> emit) {
    SimPhase p{std::move(name), std::move(transitions), std::vector<double>(l, 0.0), gated};
    for (auto [label, prob] : emit) p.emissions[col(label)] = prob;
    c.phases.push_back(std::move(p));
  };
  const std::string duct = cholec::triplet_name(79), artery = cholec::triplet_name(78);
  //                     dissection prep  duct  artery idle
  phase("dissection", {0.90, 0.06, 0.00, 0.00, 0.04}, false, {{"cystic-duct", 0.3}, {"cystic-artery", 0.3}});
  phase("prep-clip", {0.05, 0.75, 0.10, 0.10, 0.00}, false, {{"clip-applier", 1.0}});
  phase("clip-duct", {0.05, 0.10, 0.80, 0.05, 0.00}, true,
        {{"clip-applier", 1.0}, {"clip", 1.0}, {"cystic-duct", 1.0}, {duct, 1.0}});
  phase("clip-artery", {0.10, 0.10, 0.00, 0.80, 0.00}, true,
        {{"clip-applier", 1.0}, {"clip", 1.0}, {"cystic-artery", 1.0}, {artery, 1.0}});
  phase("idle", {0.20, 0.00, 0.00, 0.00, 0.80}, false, {});
  return c;
}

void check_sim_config(const WorkflowSimConfig& c) {
  const int n = c.num_phases();
  if (n == 0) throw ConfigError("simulator needs at least one phase");
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  std::set<std::string> names;
  for (const auto& p : c.phases) {
    if (!names.insert(p.name).second) throw ConfigError("duplicate phase '" + p.name + "'");
    if (static_cast<int>(p.transitions.size()) != n) throw ConfigError("phase '" + p.name + "': transition row size");
    double sum = 0.0;
    for (double q : p.transitions) {
      if (!prob(q)) throw ConfigError("phase '" + p.name + "': transition probability outside [0, 1]");
      sum += q;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("phase '" + p.name + "': transition row sums to " + std::to_string(sum));
    if (p.emissions.size() != c.vocabulary.size()) throw ConfigError("phase '" + p.name + "': emission row size");
    for (double q : p.emissions) {
      if (!prob(q)) throw ConfigError("phase '" + p.name + "': emission probability outside [0, 1]");
    }
  }
  if (column_of(c.vocabulary, kCvsAchieved) < 0) throw ConfigError("simulator vocabulary lacks CVS-achieved");
  for (const auto& name : kCriteria) {
    if (column_of(c.vocabulary, name) < 0) throw ConfigError("simulator vocabulary lacks " + name);
  }
  for (double q : {c.criterion_on_rate, c.criterion_off_rate, c.p_obey, c.label_noise}) {
    if (!prob(q)) throw ConfigError("simulator rates must lie in [0, 1]");
  }
  if (c.feature_dim <= 0 || c.sequence_length <= 0 || c.num_sequences < 0 || c.burn_in < 0) {
    throw ConfigError("simulator sizes must be positive");
  }
  if (c.feature_noise < 0.0) throw ConfigError("feature noise must be non-negative");
  if (c.initial_phase < 0 || c.initial_phase >= n) throw ConfigError("initial phase out of range");
}

std::string serialize_sim_config(const WorkflowSimConfig& c) {
  json phases = json::array();
  for (const auto& p : c.phases) {
    json transitions = json::object(), emissions = json::object();
    for (int j = 0; j < c.num_phases(); ++j) {
      if (p.transitions[j] != 0.0) transitions[c.phases[j].name] = p.transitions[j];
    }
    for (std::size_t k = 0; k < c.vocabulary.size(); ++k) {
      if (p.emissions[k] != 0.0) emissions[c.vocabulary[k]] = p.emissions[k];
    }
    phases.push_back({{"name", p.name}, {"gated", p.gated}, {"transitions", transitions}, {"emissions", emissions}});
  }
  json j = {{"vocabulary", c.vocabulary},
            {"phases", phases},
            {"criterion_on_rate", c.criterion_on_rate},
            {"criterion_off_rate", c.criterion_off_rate},
            {"p_obey", c.p_obey},
            {"label_noise", c.label_noise},
            {"feature_dim", c.feature_dim},
            {"feature_noise", c.feature_noise},
            {"criterion_feature_scale", c.criterion_feature_scale},
            {"sequence_length", c.sequence_length},
            {"num_sequences", c.num_sequences},
            {"burn_in", c.burn_in},
            {"initial_phase", c.phases.empty() ? std::string() : c.phases[c.initial_phase].name},
            {"seed", c.seed}};
  return j.dump(2) + "\n";
}

WorkflowSimConfig parse_sim_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("simulator config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("simulator config must be an object");
  static const std::set<std::string> known = {
      "vocabulary",   "phases",          "criterion_on_rate", "criterion_off_rate", "p_obey",
      "label_noise",  "feature_dim",     "feature_noise",     "criterion_feature_scale",
      "sequence_length", "num_sequences", "burn_in",          "initial_phase",      "seed"};
  for (const auto& [key, _] : j.items()) {
    if (known.count(key) == 0) throw ConfigError("simulator config: unknown field '" + key + "'");
  }
  WorkflowSimConfig c = default_sim_config();
  try {
    if (j.contains("vocabulary")) c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    if (j.contains("phases")) {
      const auto& arr = j.at("phases");
      if (!arr.is_array()) throw ConfigError("simulator config: phases must be a list");
      c.phases.clear();
      for (const auto& p : arr) {
        for (const auto& [key, _] : p.items()) {
          if (key != "name" && key != "gated" && key != "transitions" && key != "emissions") {
            throw ConfigError("simulator phase: unknown field '" + key + "'");
          }
        }
        c.phases.push_back(SimPhase{p.at("name").get<std::string>(), {}, {}, p.value("gated", false)});
      }
      for (std::size_t i = 0; i < arr.size(); ++i) {
        auto& phase = c.phases[i];
        phase.transitions.assign(c.phases.size(), 0.0);
        phase.emissions.assign(c.vocabulary.size(), 0.0);
        const json transitions = arr[i].value("transitions", json::object());
        const json emissions = arr[i].value("emissions", json::object());
        for (const auto& [name, q] : transitions.items()) {
          const int k = c.phase_index(name);
          if (k < 0) throw ConfigError("phase '" + phase.name + "': transition to unknown phase '" + name + "'");
          phase.transitions[k] = q.get<double>();
        }
        for (const auto& [name, q] : emissions.items()) {
          const int k = column_of(c.vocabulary, name);
          if (k < 0) throw ConfigError("phase '" + phase.name + "': emission of unknown label '" + name + "'");
          phase.emissions[k] = q.get<double>();
        }
      }
    }
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    read("criterion_on_rate", c.criterion_on_rate);
    read("criterion_off_rate", c.criterion_off_rate);
    read("p_obey", c.p_obey);
    read("label_noise", c.label_noise);
    read("feature_dim", c.feature_dim);
    read("feature_noise", c.feature_noise);
    read("criterion_feature_scale", c.criterion_feature_scale);
    read("sequence_length", c.sequence_length);
    read("num_sequences", c.num_sequences);
    read("burn_in", c.burn_in);
    read("seed", c.seed);
    if (j.contains("initial_phase")) {
      const auto& v = j.at("initial_phase");
      c.initial_phase = v.is_string() ? c.phase_index(v.get<std::string>()) : v.get<int>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("simulator config: ") + e.what());
  }
  check_sim_config(c);
  return c;
}

WorkflowSimConfig load_sim_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read simulator config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sim_config(ss.str());
}

std::vector<LabeledSequence> simulate(const WorkflowSimConfig& c, std::vector<SimTrace>* traces) {
  check_sim_config(c);
  const int n_phases = c.num_phases();
  const int dim = c.feature_dim;
  const int n_labels = static_cast<int>(c.vocabulary.size());
  const int cvs_col = column_of(c.vocabulary, kCvsAchieved);
  std::vector<int> crit_col;
  for (const auto& name : kCriteria) crit_col.push_back(column_of(c.vocabulary, name));
  std::vector<bool> driven(n_labels, false);
  driven[cvs_col] = true;
  for (int k : crit_col) driven[k] = true;

  Rng proj_rng(child_seed(c.seed, "projection"));
  Eigen::MatrixXd phase_proj(dim, n_phases), crit_proj(dim, 3);
  for (Eigen::Index i = 0; i < phase_proj.size(); ++i) phase_proj.data()[i] = proj_rng.normal();
  for (Eigen::Index i = 0; i < crit_proj.size(); ++i) crit_proj.data()[i] = proj_rng.normal();

  auto step = [&](int& phase, std::uint8_t& crit, Rng& rng) {
    for (int b = 0; b < 3; ++b) {
      const bool on = crit & (1u << b);
      if (on ? rng.bernoulli(c.criterion_off_rate) : rng.bernoulli(c.criterion_on_rate)) crit ^= (1u << b);
    }
    const double u = rng.uniform();
    int next = n_phases - 1;
    double acc = 0.0;
    for (int j = 0; j < n_phases; ++j) {
      acc += c.phases[phase].transitions[j];
      if (u < acc) {
        next = j;
        break;
      }
    }
    const double r = rng.uniform();
    if (c.phases[next].gated && !c.phases[phase].gated) {
      const double accept = crit == kAllCriteria ? c.p_obey : 1.0 - c.p_obey;
      if (r >= accept) next = phase;
    }
    phase = next;
  };

  std::vector<LabeledSequence> out;
  if (traces) traces->clear();
  for (int s = 0; s < c.num_sequences; ++s) {
    Rng rng(child_seed(c.seed, static_cast<std::uint64_t>(s)));
    LabeledSequence seq;
    char id[32];
    std::snprintf(id, sizeof id, "sim-%04d", s);
    seq.id = id;
    seq.vocabulary = c.vocabulary;
    seq.labels = LabelMatrix::Zero(c.sequence_length, n_labels);
    SimTrace trace;
    int phase = c.initial_phase;
    // Criteria start in their stationary distribution, so time alone does not
    // correlate them with late phases.
    const double rate = c.criterion_on_rate + c.criterion_off_rate;
    const double p_on = rate > 0.0 ? c.criterion_on_rate / rate : 0.0;
    std::uint8_t crit = 0;
    for (int b = 0; b < 3; ++b) {
      if (rng.bernoulli(p_on)) crit |= (1u << b);
    }
    for (int b = 0; b < c.burn_in; ++b) step(phase, crit, rng);
    for (int t = 0; t < c.sequence_length; ++t) {
      if (t > 0) step(phase, crit, rng);
      trace.phase.push_back(phase);
      trace.criteria.push_back(crit);
      for (int k = 0; k < n_labels; ++k) {
        const double u = rng.uniform();
        if (!driven[k]) seq.labels(t, k) = u < c.phases[phase].emissions[k] ? 1 : 0;
      }
      for (int b = 0; b < 3; ++b) seq.labels(t, crit_col[b]) = (crit >> b) & 1u;
      seq.labels(t, cvs_col) = crit == kAllCriteria ? 1 : 0;
      if (c.label_noise > 0.0) {
        for (int k = 0; k < n_labels; ++k) {
          if (rng.bernoulli(c.label_noise)) seq.labels(t, k) ^= 1;
        }
      }
      Eigen::VectorXd x = phase_proj.col(phase);
      for (int b = 0; b < 3; ++b) {
        if ((crit >> b) & 1u) x += c.criterion_feature_scale * crit_proj.col(b);
      }
      for (int d = 0; d < dim; ++d) x(d) += c.feature_noise * rng.normal();
      seq.features.push_back(FrameFeature{x.cast<float>(), t});
    }
    out.push_back(std::move(seq));
    if (traces) traces->push_back(std::move(trace));
  }
  return out;
}

}  // namespace hgt
