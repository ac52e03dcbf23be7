#pragma once

// Hypergraph-transformer model.
//
// Per frame: element encoders, then one message-passing pass (edges from
// their incident nodes, then nodes from the mean of their incident edges).
// Past the current frame, each element's own embedding history is extended by
// a causal temporal predictor followed by another message-passing pass. A
// per-element affine readout with a logistic squashing gives one probability
// per bound label column.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hgt/autodiff.hpp"
#include "hgt/backbone.hpp"
#include "hgt/error.hpp"
#include "hgt/layers.hpp"
#include "hgt/model_config.hpp"
#include "hgt/params.hpp"
#include "hgt/schema.hpp"
#include "hgt/topology.hpp"

namespace hgt {

/// Element role; nodes and edges each own one temporal predictor.
enum class Role { node, edge };

inline std::string_view role_name(Role r) { return r == Role::node ? "node" : "edge"; }
inline Side role_side(Role r) { return r == Role::node ? Side::node : Side::edge; }

template <typename Scalar>
class HgtModel {
 public:
  HgtModel(GraphSchema schema, ModelConfig config, std::uint64_t seed)
      : schema_(std::move(schema)), config_(config), topo_(compile_topology(schema_)) {
    check_model_config(config_);
    Rng rng(seed);
    init_parameters(rng);
  }

  HgtModel(GraphSchema schema, ModelConfig config, ParamStore<Scalar> params)
      : schema_(std::move(schema)), config_(config), topo_(compile_topology(schema_)), params_(std::move(params)) {
    check_model_config(config_);
    HgtModel reference(schema_, config_, std::uint64_t{0});
    if (reference.params_.size() != params_.size()) throw FormatError("parameter set does not match the model layout");
    for (int i = 0; i < params_.size(); ++i) {
      const auto& want = reference.params_[i];
      const auto& have = params_[i];
      if (want.name != have.name || want.value.rows() != have.value.rows() || want.value.cols() != have.value.cols()) {
        throw FormatError("parameter '" + have.name + "' does not match the model layout");
      }
      params_[i].side = want.side;
      params_[i].trainable = want.trainable;
    }
  }

  const GraphSchema& schema() const { return schema_; }
  const ModelConfig& config() const { return config_; }
  const Topology& topology() const { return topo_; }
  ParamStore<Scalar>& params() { return params_; }
  const ParamStore<Scalar>& params() const { return params_; }

  template <typename Other>
  HgtModel<Other> cast() const {
    return HgtModel<Other>(schema_, config_, params_.template cast<Other>());
  }

  static std::string edge_update_prefix(int arity) { return "edge_update.a" + std::to_string(arity); }
  static std::string predictor_prefix(Role r) { return "predictor." + std::string(role_name(r)); }

 private:
  void init_parameters(Rng& rng) {
    const int h = config_.hidden_dim;
    add_element_encoder(params_, topo_, config_, rng);
    for (const auto& g : topo_.groups) {
      add_update_block(params_, edge_update_prefix(g.arity), (g.arity + 1) * h, h, Side::edge, rng,
                       config_.norm_step_slots);
    }
    add_update_block(params_, "node_update", 2 * h, h, Side::node, rng, config_.norm_step_slots);
    for (Role r : {Role::node, Role::edge}) {
      const std::string p = predictor_prefix(r);
      const Side side = role_side(r);
      if (config_.variant == Variant::transformer) {
        for (int l = 0; l < config_.layers; ++l) {
          const std::string lp = p + ".layer" + std::to_string(l);
          add_layer_norm(params_, lp + ".ln1", h, side);
          for (const char* m : {".q", ".k", ".v", ".o"}) add_linear(params_, lp + ".attn" + m, h, h, side, rng);
          add_layer_norm(params_, lp + ".ln2", h, side);
          add_mlp(params_, lp + ".ff", h, h * config_.ff_multiplier, h, side, rng);
        }
        add_layer_norm(params_, p + ".ln_out", h, side);
      } else {
        add_linear(params_, p + ".lstm.input", h, 4 * h, side, rng);
        params_.add(p + ".lstm.hidden.weight", glorot<Scalar>(h, 4 * h, rng), side);
        // Forget-gate bias starts at one.
        params_.value(p + ".lstm.input.bias").middleCols(h, h).setOnes();
      }
      add_linear(params_, p + ".out", h, h, side, rng);
    }
    params_.add("project.node.weight", glorot<Scalar>(topo_.num_nodes, h, rng), Side::node);
    params_.add("project.node.bias", ad::Matrix<Scalar>::Zero(1, topo_.num_nodes), Side::node);
    params_.add("project.edge.weight", glorot<Scalar>(topo_.num_edges, h, rng), Side::edge);
    params_.add("project.edge.bias", ad::Matrix<Scalar>::Zero(1, topo_.num_edges), Side::edge);
  }

  GraphSchema schema_;
  ModelConfig config_;
  Topology topo_;
  ParamStore<Scalar> params_;
};

/// Temporal predictor cache for one role: per-layer keys and values of every
/// processed position (transformer) or the running cell state (recurrent).
template <typename Scalar>
struct TemporalCache {
  int processed = 0;
  std::vector<std::vector<std::vector<ad::Var<Scalar>>>> keys;    // [layer][position][head]
  std::vector<std::vector<std::vector<ad::Var<Scalar>>>> values;  // [layer][position][head]
  ad::Var<Scalar> hidden;
  ad::Var<Scalar> cell;
  ad::Var<Scalar> last;  // final-layer stream at the newest processed position
};

/// Embedding trajectories of every element for one batch of sequences.
template <typename Scalar>
struct ElementState {
  Eigen::Index batch = 0;
  int clock = 0;   // time index of the newest history entry
  int decoded = 0;  // history entries produced by decoding steps
  std::vector<Embedding<Scalar>> history;
  TemporalCache<Scalar> node_cache;
  TemporalCache<Scalar> edge_cache;

  int steps() const { return static_cast<int>(history.size()); }
};

/// Edge update: each edge sees its incident node embeddings in incidence
/// order, concatenated with its own embedding.
template <typename Scalar>
ad::Var<Scalar> edge_update(Context<Scalar>& ctx, const HgtModel<Scalar>& model, const ad::Var<Scalar>& nodes,
                            const ad::Var<Scalar>& edges) {
  const auto& topo = model.topology();
  if (!nodes.valid()) throw StateError("edge_update: node embeddings are missing");
  const Eigen::Index batch = topo.num_nodes > 0 ? nodes.rows() / topo.num_nodes : 0;
  if (batch == 0 || nodes.rows() != batch * topo.num_nodes || edges.rows() != batch * topo.num_edges) {
    throw StateError("edge_update: embeddings do not match the schema layout");
  }
  std::vector<ad::Var<Scalar>> outputs;
  for (const auto& g : topo.groups) {
    const int count = static_cast<int>(g.edges.size());
    std::vector<ad::Var<Scalar>> parts;
    for (int slot = 0; slot < g.arity; ++slot) {
      std::vector<ad::BlockEntry> gather;
      for (int k = 0; k < count; ++k) gather.push_back({k, topo.edge_nodes[g.edges[k]][slot], 1.0});
      parts.push_back(ad::mix_blocks(nodes, batch, count, std::move(gather)));
    }
    std::vector<ad::BlockEntry> own;
    bool identity = count == topo.num_edges;
    for (int k = 0; k < count; ++k) {
      own.push_back({k, g.edges[k], 1.0});
      identity = identity && g.edges[k] == k;
    }
    parts.push_back(identity ? edges : ad::mix_blocks(edges, batch, count, own));
    auto updated = update_block(ctx, HgtModel<Scalar>::edge_update_prefix(g.arity),
                                ad::hcat(std::span<const ad::Var<Scalar>>(parts)));
    if (identity) {
      outputs.push_back(updated);
    } else {
      std::vector<ad::BlockEntry> scatter;
      for (int k = 0; k < count; ++k) scatter.push_back({g.edges[k], k, 1.0});
      outputs.push_back(ad::mix_blocks(updated, batch, topo.num_edges, std::move(scatter)));
    }
  }
  if (outputs.empty()) return edges;
  auto total = outputs[0];
  for (std::size_t i = 1; i < outputs.size(); ++i) total = ad::add(total, outputs[i]);
  return total;
}

/// Node update: each node sees the mean of its incident edge embeddings
/// (zero when it has none) concatenated with its own embedding.
template <typename Scalar>
ad::Var<Scalar> node_update(Context<Scalar>& ctx, const HgtModel<Scalar>& model, const ad::Var<Scalar>& nodes,
                            const ad::Var<Scalar>& edges) {
  const auto& topo = model.topology();
  if (!edges.valid()) throw StateError("node_update: edge embeddings are missing");
  const Eigen::Index batch = topo.num_nodes > 0 ? nodes.rows() / topo.num_nodes : 0;
  if (batch == 0 || nodes.rows() != batch * topo.num_nodes || edges.rows() != batch * topo.num_edges) {
    throw StateError("node_update: embeddings do not match the schema layout");
  }
  std::vector<ad::BlockEntry> mean;
  for (int v = 0; v < topo.num_nodes; ++v) {
    const auto& incident = topo.node_edges[v];
    for (int e : incident) mean.push_back({v, e, 1.0 / static_cast<double>(incident.size())});
  }
  ad::Var<Scalar> aggregate =
      topo.num_edges > 0 ? ad::mix_blocks(edges, batch, topo.num_nodes, std::move(mean))
                         : ctx.tape.constant(ad::Matrix<Scalar>::Zero(nodes.rows(), nodes.cols()));
  return update_block(ctx, "node_update", ad::hcat({aggregate, nodes}));
}

/// One message-passing pass: edges first, then nodes from the updated edges.
template <typename Scalar>
Embedding<Scalar> message_pass(Context<Scalar>& ctx, const HgtModel<Scalar>& model, const Embedding<Scalar>& in) {
  auto edges = edge_update(ctx, model, in.nodes, in.edges);
  auto nodes = node_update(ctx, model, in.nodes, edges);
  return {nodes, edges};
}

/// Sinusoidal position code of one step, 1 x dim.
template <typename Scalar>
ad::Matrix<Scalar> positional_encoding(int position, int dim) {
  ad::Matrix<Scalar> pe(1, dim);
  for (int i = 0; i < dim; ++i) {
    const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    const double angle = static_cast<double>(position) * rate;
    pe(0, i) = Scalar(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
  }
  return pe;
}

namespace detail {

template <typename Scalar>
ad::Var<Scalar> role_embedding(const Embedding<Scalar>& e, Role r) {
  return r == Role::node ? e.nodes : e.edges;
}

/// Feeds one more history position through the causal transformer.
template <typename Scalar>
void transformer_extend(Context<Scalar>& ctx, const HgtModel<Scalar>& model, Role role, TemporalCache<Scalar>& cache,
                        const ad::Var<Scalar>& input, int position) {
  const auto& cfg = model.config();
  const int h = cfg.hidden_dim;
  const int dh = h / cfg.heads;
  const Scalar inv_sqrt = Scalar(1.0 / std::sqrt(static_cast<double>(dh)));
  const std::string p = HgtModel<Scalar>::predictor_prefix(role);
  if (cache.keys.empty()) {
    cache.keys.resize(cfg.layers);
    cache.values.resize(cfg.layers);
  }
  auto x = ad::add_row(input, ctx.tape.constant(positional_encoding<Scalar>(position, h)));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = p + ".layer" + std::to_string(l);
    auto a = layer_norm(ctx, lp + ".ln1", x);
    auto q = linear(ctx, lp + ".attn.q", a);
    auto k = linear(ctx, lp + ".attn.k", a);
    auto v = linear(ctx, lp + ".attn.v", a);
    std::vector<ad::Var<Scalar>> k_heads, v_heads;
    for (int hd = 0; hd < cfg.heads; ++hd) {
      k_heads.push_back(ad::cols(k, hd * dh, dh));
      v_heads.push_back(ad::cols(v, hd * dh, dh));
    }
    cache.keys[l].push_back(std::move(k_heads));
    cache.values[l].push_back(std::move(v_heads));
    const auto& keys = cache.keys[l];
    const auto& values = cache.values[l];
    std::vector<ad::Var<Scalar>> head_out;
    for (int hd = 0; hd < cfg.heads; ++hd) {
      auto qh = ad::cols(q, hd * dh, dh);
      std::vector<ad::Var<Scalar>> scores;
      for (std::size_t j = 0; j < keys.size(); ++j) scores.push_back(ad::row_dot(qh, keys[j][hd]));
      auto weights = ad::softmax_rows(ad::scale(ad::hcat(std::span<const ad::Var<Scalar>>(scores)), inv_sqrt));
      ad::Var<Scalar> mixed;
      for (std::size_t j = 0; j < values.size(); ++j) {
        auto term = ad::mul_col(values[j][hd], ad::cols(weights, static_cast<Eigen::Index>(j), 1));
        mixed = mixed.valid() ? ad::add(mixed, term) : term;
      }
      head_out.push_back(mixed);
    }
    auto attn = linear(ctx, lp + ".attn.o", ad::hcat(std::span<const ad::Var<Scalar>>(head_out)));
    x = ad::add(x, maybe_dropout(ctx, attn));
    auto ff = mlp(ctx, lp + ".ff", layer_norm(ctx, lp + ".ln2", x));
    x = ad::add(x, maybe_dropout(ctx, ff));
  }
  cache.last = x;
}

/// Feeds one more history position through the recurrent cell.
template <typename Scalar>
void recurrent_extend(Context<Scalar>& ctx, const HgtModel<Scalar>& model, Role role, TemporalCache<Scalar>& cache,
                      const ad::Var<Scalar>& input) {
  const int h = model.config().hidden_dim;
  const std::string p = HgtModel<Scalar>::predictor_prefix(role);
  if (!cache.hidden.valid()) {
    cache.hidden = ctx.tape.constant(ad::Matrix<Scalar>::Zero(input.rows(), h));
    cache.cell = ctx.tape.constant(ad::Matrix<Scalar>::Zero(input.rows(), h));
  }
  auto gates = ad::add(linear(ctx, p + ".lstm.input", input),
                       ad::matmul(cache.hidden, ctx.params(p + ".lstm.hidden.weight")));
  auto in_gate = ad::sigmoid(ad::cols(gates, 0, h));
  auto forget_gate = ad::sigmoid(ad::cols(gates, h, h));
  auto candidate = ad::tanh(ad::cols(gates, 2 * h, h));
  auto out_gate = ad::sigmoid(ad::cols(gates, 3 * h, h));
  cache.cell = ad::add(ad::mul(forget_gate, cache.cell), ad::mul(in_gate, candidate));
  cache.hidden = ad::mul(out_gate, ad::tanh(cache.cell));
  cache.last = cache.hidden;
}

template <typename Scalar>
ad::Var<Scalar> predict_role(Context<Scalar>& ctx, const HgtModel<Scalar>& model, ElementState<Scalar>& state,
                             Role role) {
  auto& cache = role == Role::node ? state.node_cache : state.edge_cache;
  const std::string p = HgtModel<Scalar>::predictor_prefix(role);
  while (cache.processed < state.steps()) {
    const auto input = role_embedding(state.history[cache.processed], role);
    if (model.config().variant == Variant::transformer) {
      transformer_extend(ctx, model, role, cache, input, cache.processed);
    } else {
      recurrent_extend(ctx, model, role, cache, input);
    }
    ++cache.processed;
  }
  auto last = cache.last;
  if (model.config().variant == Variant::transformer) last = layer_norm(ctx, p + ".ln_out", last);
  return linear(ctx, p + ".out", last);
}

}  // namespace detail

/// Next-step embedding of every element from its own history (no
/// cross-element attention). Position k only attends to positions <= k.
template <typename Scalar>
Embedding<Scalar> predict_step(Context<Scalar>& ctx, const HgtModel<Scalar>& model, ElementState<Scalar>& state) {
  if (state.history.empty()) throw StateError("predict_step: empty history");
  return {detail::predict_role(ctx, model, state, Role::node), detail::predict_role(ctx, model, state, Role::edge)};
}

/// One decoding step: predict, message-pass, append. The message pass of
/// decoding step k uses normalization statistics slot k.
template <typename Scalar>
void advance(Context<Scalar>& ctx, const HgtModel<Scalar>& model, ElementState<Scalar>& state) {
  auto predicted = predict_step(ctx, model, state);
  const int saved = ctx.norm_slot;
  ctx.norm_slot = state.decoded + 1;
  state.history.push_back(message_pass(ctx, model, predicted));
  ctx.norm_slot = saved;
  ++state.clock;
  ++state.decoded;
}

/// Extends every element history by `steps` decoding steps.
template <typename Scalar>
ElementState<Scalar> rollout(Context<Scalar>& ctx, const HgtModel<Scalar>& model, ElementState<Scalar> state,
                             int steps) {
  if (steps < 0) throw ArgumentError("rollout: negative horizon");
  if (steps > 0 && state.history.empty()) throw StateError("rollout: nothing has been encoded");
  for (int f = 0; f < steps; ++f) advance(ctx, model, state);
  return state;
}

/// Encodes consecutive frames (each batch x backbone_dim), one message-passing
/// pass per frame. `first_time` is the time index of frames[0].
template <typename Scalar>
ElementState<Scalar> encode_window(Context<Scalar>& ctx, const HgtModel<Scalar>& model,
                                   std::span<const ad::Var<Scalar>> frames, int first_time = 0) {
  ElementState<Scalar> state;
  if (frames.empty()) return state;
  state.batch = frames[0].rows();
  for (const auto& frame : frames) {
    if (frame.rows() != state.batch) throw ShapeError("encode_window: batch size changes between frames");
    auto initial = encode_frame(ctx, model.topology(), model.config(), frame);
    state.history.push_back(message_pass(ctx, model, initial));
  }
  state.clock = first_time + static_cast<int>(frames.size()) - 1;
  return state;
}

/// Label probabilities (batch x label_dim) for one embedding.
template <typename Scalar>
ad::Var<Scalar> project(Context<Scalar>& ctx, const HgtModel<Scalar>& model, const Embedding<Scalar>& emb) {
  const auto& topo = model.topology();
  const Eigen::Index batch = topo.num_nodes > 0 ? emb.nodes.rows() / topo.num_nodes : 0;
  if (emb.nodes.cols() != model.config().hidden_dim || batch * topo.num_nodes != emb.nodes.rows()) {
    throw ShapeError("project: embedding does not match the model");
  }
  auto node_logits = ad::block_logits(emb.nodes, ctx.params("project.node.weight"), ctx.params("project.node.bias"), batch);
  auto edge_logits = ad::block_logits(emb.edges, ctx.params("project.edge.weight"), ctx.params("project.edge.bias"), batch);
  auto logits = ad::hcat({node_logits, edge_logits});
  std::vector<int> order(topo.label_dim, -1);
  for (int v = 0; v < topo.num_nodes; ++v) {
    if (topo.node_label[v] >= 0) order[topo.node_label[v]] = v;
  }
  for (int e = 0; e < topo.num_edges; ++e) {
    if (topo.edge_label[e] >= 0) order[topo.edge_label[e]] = topo.num_nodes + e;
  }
  return ad::sigmoid(ad::select_cols(logits, std::move(order)));
}

template <typename Scalar>
struct ForwardResult {
  ElementState<Scalar> state;
  std::vector<ad::Var<Scalar>> probs;  // offsets 0..horizon, each batch x label_dim
};

/// Encodes past_window + 1 frames, rolls out `horizon` steps and projects at
/// every offset. Offset 0 is detection from the encoded current frame.
template <typename Scalar>
ForwardResult<Scalar> forward(Context<Scalar>& ctx, const HgtModel<Scalar>& model,
                              std::span<const ad::Var<Scalar>> frames, int past_window, int horizon) {
  if (past_window < 0 || horizon < 0) throw ArgumentError("forward: negative window or horizon");
  if (static_cast<int>(frames.size()) != past_window + 1) {
    throw ArgumentError("forward: expected " + std::to_string(past_window + 1) + " frames, got " +
                        std::to_string(frames.size()));
  }
  ForwardResult<Scalar> out;
  out.state = encode_window(ctx, model, frames);
  out.probs.push_back(project(ctx, model, out.state.history.back()));
  for (int f = 1; f <= horizon; ++f) {
    advance(ctx, model, out.state);
    out.probs.push_back(project(ctx, model, out.state.history.back()));
  }
  return out;
}

/// Model outputs as plain values: probs[f] is batch x label_dim at offset f.
struct PredictionBatch {
  std::vector<Eigen::MatrixXd> probs;
  int horizon = 0;
};

template <typename Scalar>
PredictionBatch to_prediction_batch(const ForwardResult<Scalar>& result) {
  PredictionBatch batch;
  for (const auto& p : result.probs) batch.probs.push_back(p.value().template cast<double>());
  batch.horizon = static_cast<int>(result.probs.size()) - 1;
  return batch;
}

}  // namespace hgt
