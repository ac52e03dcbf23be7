#pragma once

// Checkpoint container.
//
// Layout: "HGTC", u32 version, u64 header length, a JSON header, then the
// float64 little-endian payload. The header records the schema (and its
// hash), model and training configuration, training progress, and the
// payload offset of every tensor and optimizer moment.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "hgt/model.hpp"
#include "hgt/params.hpp"
#include "hgt/schema.hpp"
#include "hgt/training.hpp"

namespace hgt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  GraphSchema schema;
  ModelConfig model;
  std::string train_config;  // serialized TrainConfig; empty when unknown
  ParamStore<double> params;
  int phase = 0;
  long step = 0;
  int epoch = 0;  // completed epochs
  double best_val_map = 0.0;
  int best_epoch = -1;
  int epochs_since_best = 0;
  std::optional<AdamState> adam;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws FormatError for a damaged or foreign file, and ConfigError when
/// `expected_schema_hash` is given and differs from the stored one.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_schema_hash = std::nullopt);

template <typename Scalar>
HgtModel<Scalar> model_from_checkpoint(const Checkpoint& ckpt) {
  return HgtModel<Scalar>(ckpt.schema, ckpt.model, ckpt.params.template cast<Scalar>());
}

}  // namespace hgt
