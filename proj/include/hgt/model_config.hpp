#pragma once

#include <string_view>

namespace hgt {

/// Temporal predictor used for the decoding rollout.
enum class Variant { transformer, recurrent_cell };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

struct ModelConfig {
  int backbone_dim = 0;
  int hidden_dim = 128;
  int encoder_hidden = 0;  // 0 selects hidden_dim
  int heads = 2;
  int layers = 2;
  int ff_multiplier = 4;
  double dropout = 0.1;
  double norm_momentum = 0.1;
  double identity_scale = 0.5;  // stddev of the per-element identity embeddings
  int norm_step_slots = 4;      // decoding steps with their own normalization statistics
  Variant variant = Variant::transformer;

  int encoder_width() const { return encoder_hidden > 0 ? encoder_hidden : hidden_dim; }
};

/// Throws ConfigError when dimensions are inconsistent.
void check_model_config(const ModelConfig& config);

}  // namespace hgt
