#include "hgt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace hgt {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'H', 'G', 'T', 'C'};

void append(std::vector<double>& payload, const Eigen::MatrixXd& m) {
  // Row-major so the payload reads naturally as rows x cols.
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) payload.push_back(m(r, c));
  }
}

Eigen::MatrixXd extract(const std::vector<double>& payload, std::size_t offset, Eigen::Index rows, Eigen::Index cols,
                        const std::string& what) {
  if (rows < 0 || cols < 0 || offset + static_cast<std::size_t>(rows * cols) > payload.size()) {
    throw FormatError("checkpoint: tensor '" + what + "' lies outside the payload");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = payload[offset + static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

std::string_view side_name(Side s) {
  switch (s) {
    case Side::shared: return "shared";
    case Side::node: return "node";
    case Side::edge: return "edge";
  }
  return "shared";
}

Side parse_side(const std::string& s) {
  if (s == "shared") return Side::shared;
  if (s == "node") return Side::node;
  if (s == "edge") return Side::edge;
  throw FormatError("checkpoint: unknown tensor side '" + s + "'");
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::vector<double> payload;
  json tensors = json::array();
  for (const auto& t : ckpt.params) {
    tensors.push_back({{"name", t.name},
                       {"rows", t.value.rows()},
                       {"cols", t.value.cols()},
                       {"side", side_name(t.side)},
                       {"trainable", t.trainable},
                       {"offset", payload.size()}});
    append(payload, t.value);
  }
  json adam = nullptr;
  if (ckpt.adam) {
    const auto& a = *ckpt.adam;
    if (a.m.size() != static_cast<std::size_t>(ckpt.params.size()) || a.v.size() != a.m.size() ||
        a.count.size() != a.m.size()) {
      throw StateError("checkpoint: optimizer state does not match the parameters");
    }
    json moments = json::array();
    for (std::size_t i = 0; i < a.m.size(); ++i) {
      json entry = {{"count", a.count[i]}, {"m", payload.size()}};
      append(payload, a.m[i]);
      entry["v"] = payload.size();
      append(payload, a.v[i]);
      moments.push_back(entry);
    }
    adam = moments;
  }
  json header = {{"schema_hash", hash_hex(schema_hash(ckpt.schema))},
                 {"schema", json::parse(serialize_schema(ckpt.schema))},
                 {"variant", variant_name(ckpt.model.variant)},
                 {"model", json::parse(serialize_model_config(ckpt.model))},
                 {"train_config", ckpt.train_config.empty() ? json(nullptr) : json::parse(ckpt.train_config)},
                 {"phase", ckpt.phase},
                 {"step", ckpt.step},
                 {"epoch", ckpt.epoch},
                 {"best_val_map", ckpt.best_val_map},
                 {"best_epoch", ckpt.best_epoch},
                 {"epochs_since_best", ckpt.epochs_since_best},
                 {"tensors", tensors},
                 {"adam", adam},
                 {"payload_values", payload.size()}};
  const std::string text = header.dump();

  // Write to a sibling file first so a crash never leaves a torn checkpoint.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t length = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&length), sizeof length);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path, std::optional<std::uint64_t> expected_schema_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  if (length > (std::uint64_t{1} << 32)) throw FormatError(path.string() + ": implausible header length");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw FormatError(path.string() + ": truncated header");

  Checkpoint ckpt;
  try {
    const json h = json::parse(text);
    ckpt.schema = parse_schema(h.at("schema").dump());
    const std::string stored = h.at("schema_hash").get<std::string>();
    if (stored != hash_hex(schema_hash(ckpt.schema))) {
      throw FormatError(path.string() + ": stored schema does not match its hash");
    }
    if (expected_schema_hash && stored != hash_hex(*expected_schema_hash)) {
      throw ConfigError("checkpoint " + path.string() + " was trained on schema " + stored +
                        ", which does not match the requested schema " + hash_hex(*expected_schema_hash));
    }
    ckpt.model = parse_model_config(h.at("model").dump());
    if (!h.at("train_config").is_null()) ckpt.train_config = h.at("train_config").dump(2);
    ckpt.phase = h.at("phase").get<int>();
    ckpt.step = h.at("step").get<long>();
    ckpt.epoch = h.at("epoch").get<int>();
    ckpt.best_val_map = h.at("best_val_map").get<double>();
    ckpt.best_epoch = h.at("best_epoch").get<int>();
    ckpt.epochs_since_best = h.at("epochs_since_best").get<int>();

    const auto values = h.at("payload_values").get<std::size_t>();
    std::vector<double> payload(values);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(values * sizeof(double)));
    if (!in) throw FormatError(path.string() + ": truncated payload");
    in.peek();
    if (!in.eof()) throw FormatError(path.string() + ": trailing bytes after payload");

    for (const auto& t : h.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      ckpt.params.add(name,
                      extract(payload, t.at("offset").get<std::size_t>(), t.at("rows").get<Eigen::Index>(),
                              t.at("cols").get<Eigen::Index>(), name),
                      parse_side(t.at("side").get<std::string>()), t.at("trainable").get<bool>());
    }
    if (!h.at("adam").is_null()) {
      const auto& moments = h.at("adam");
      if (moments.size() != static_cast<std::size_t>(ckpt.params.size())) {
        throw FormatError(path.string() + ": optimizer state does not match the parameters");
      }
      AdamState a;
      for (std::size_t i = 0; i < moments.size(); ++i) {
        const auto& p = ckpt.params[static_cast<int>(i)];
        a.count.push_back(moments[i].at("count").get<long>());
        a.m.push_back(extract(payload, moments[i].at("m").get<std::size_t>(), p.value.rows(), p.value.cols(), p.name));
        a.v.push_back(extract(payload, moments[i].at("v").get<std::size_t>(), p.value.rows(), p.value.cols(), p.name));
      }
      ckpt.adam = std::move(a);
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint header: " + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const StateError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return ckpt;
}

}  // namespace hgt
