#include "hgt/backbone.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "hgt/error.hpp"

namespace hgt {

namespace {

constexpr std::array<char, 4> kMagic = {'H', 'G', 'T', 'F'};

static_assert(std::endian::native == std::endian::little, "feature files assume a little-endian host");

std::uint32_t read_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

void write_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

}  // namespace

std::vector<FrameFeature> load_precomputed(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open feature file " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(bytes.data(), kMagic.data(), 4) != 0) throw FormatError(path.string() + ": bad magic");
  const std::uint64_t n = read_u32(bytes.data() + 4);
  const std::uint64_t dim = read_u32(bytes.data() + 8);
  const std::uint64_t payload = bytes.size() - 12;
  if (payload != n * dim * 4) {
    throw FormatError(path.string() + ": payload has " + std::to_string(payload) + " bytes, header declares " +
                      std::to_string(n) + " x " + std::to_string(dim) + " floats");
  }
  if (n > 0 && dim == 0) throw FormatError(path.string() + ": zero feature dimension");
  std::vector<FrameFeature> frames(n);
  const char* p = bytes.data() + 12;
  for (std::uint64_t i = 0; i < n; ++i) {
    frames[i].vector.resize(static_cast<Eigen::Index>(dim));
    std::memcpy(frames[i].vector.data(), p, dim * 4);
    frames[i].time_index = static_cast<int>(i);
    p += dim * 4;
  }
  return frames;
}

void check_frames(std::span<const FrameFeature> frames) {
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].vector.size() != frames[0].vector.size()) {
      throw FormatError("frame " + std::to_string(i) + " has dimension " + std::to_string(frames[i].vector.size()) +
                        ", expected " + std::to_string(frames[0].vector.size()));
    }
    if (frames[i].time_index <= frames[i - 1].time_index) {
      throw FormatError("frame time indices are not strictly increasing at position " + std::to_string(i));
    }
  }
}

void save_precomputed(const std::filesystem::path& path, std::span<const FrameFeature> frames) {
  check_frames(frames);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write feature file " + path.string());
  out.write(kMagic.data(), 4);
  write_u32(out, static_cast<std::uint32_t>(frames.size()));
  write_u32(out, frames.empty() ? 0u : static_cast<std::uint32_t>(frames[0].vector.size()));
  for (const auto& f : frames) out.write(reinterpret_cast<const char*>(f.vector.data()), f.vector.size() * 4);
  if (!out) throw FormatError("failed writing " + path.string());
}

std::string_view variant_name(Variant v) {
  return v == Variant::transformer ? "transformer" : "recurrent_cell";
}

Variant parse_variant(std::string_view name) {
  if (name == "transformer") return Variant::transformer;
  if (name == "recurrent_cell" || name == "lstm") return Variant::recurrent_cell;
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

void check_model_config(const ModelConfig& c) {
  if (c.backbone_dim <= 0) throw ConfigError("backbone_dim must be positive");
  if (c.hidden_dim <= 0) throw ConfigError("hidden_dim must be positive");
  if (c.heads <= 0 || c.hidden_dim % c.heads != 0) throw ConfigError("hidden_dim must be divisible by heads");
  if (c.layers <= 0 || c.ff_multiplier <= 0) throw ConfigError("layers and ff_multiplier must be positive");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (c.norm_momentum <= 0.0 || c.norm_momentum > 1.0) throw ConfigError("norm_momentum must be in (0, 1]");
  if (c.norm_step_slots < 0) throw ConfigError("norm_step_slots must be >= 0");
}

}  // namespace hgt
