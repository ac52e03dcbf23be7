#pragma once

// Frame features and the element-wise image encoders.
//
// Frames arrive either from a precomputed-feature file or from the workflow
// simulator; both are plain vectors on the 1 FPS grid. Two trainable maps, one
// for nodes and one for edges, turn a frame into the initial embedding of
// every schema element, and a learned identity row per element lets the
// shared maps specialize.

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hgt/layers.hpp"
#include "hgt/model_config.hpp"
#include "hgt/schema.hpp"
#include "hgt/topology.hpp"

namespace hgt {

struct FrameFeature {
  Eigen::VectorXf vector;
  int time_index = 0;
};

/// Reads a precomputed-feature file: little-endian {magic "HGTF", u32 n,
/// u32 dim} followed by n * dim float32 values, one row per frame.
/// Throws FormatError on truncation, trailing bytes or a bad header.
std::vector<FrameFeature> load_precomputed(const std::filesystem::path& path);

/// Frames must share one dimension and have strictly increasing time indices.
void save_precomputed(const std::filesystem::path& path, std::span<const FrameFeature> frames);

/// Checks the FrameFeature invariants; throws FormatError.
void check_frames(std::span<const FrameFeature> frames);

/// Per-element embeddings of one sample, keyed by schema id.
struct ElementEmbedding {
  std::map<std::string, Eigen::VectorXd> per_node;
  std::map<std::string, Eigen::VectorXd> per_edge;
};

/// Stacked embeddings of a batch: nodes is (num_nodes * batch) x hidden and
/// edges is (num_edges * batch) x hidden, element-major.
template <typename Scalar>
struct Embedding {
  ad::Var<Scalar> nodes;
  ad::Var<Scalar> edges;
};

template <typename Scalar>
void add_element_encoder(ParamStore<Scalar>& store, const Topology& topo, const ModelConfig& config, Rng& rng) {
  const int h = config.hidden_dim;
  add_mlp(store, "encoder.node", config.backbone_dim, config.encoder_width(), h, Side::node, rng);
  add_mlp(store, "encoder.edge", config.backbone_dim, config.encoder_width(), h, Side::edge, rng);
  store.add("identity.node", gaussian<Scalar>(topo.num_nodes, h, config.identity_scale, rng), Side::node);
  store.add("identity.edge", gaussian<Scalar>(topo.num_edges, h, config.identity_scale, rng), Side::edge);
}

namespace detail {

inline std::vector<ad::BlockEntry> tile_entries(int blocks) {
  std::vector<ad::BlockEntry> entries;
  for (int j = 0; j < blocks; ++j) entries.push_back({j, 0, 1.0});
  return entries;
}

}  // namespace detail

/// Initial element embeddings for a batch of frames (batch x backbone_dim).
template <typename Scalar>
Embedding<Scalar> encode_frame(Context<Scalar>& ctx, const Topology& topo, const ModelConfig& config,
                               const ad::Var<Scalar>& frames) {
  if (frames.cols() != config.backbone_dim) {
    throw ShapeError("encode_frame: feature dim " + std::to_string(frames.cols()) + " but backbone_dim is " +
                     std::to_string(config.backbone_dim));
  }
  const Eigen::Index batch = frames.rows();
  auto node_base = mlp(ctx, "encoder.node", frames);
  auto edge_base = mlp(ctx, "encoder.edge", frames);
  auto nodes = ad::mix_blocks(node_base, batch, topo.num_nodes, detail::tile_entries(topo.num_nodes));
  auto edges = ad::mix_blocks(edge_base, batch, topo.num_edges, detail::tile_entries(topo.num_edges));
  return {ad::add_block_rows(nodes, ctx.params("identity.node"), batch),
          ad::add_block_rows(edges, ctx.params("identity.edge"), batch)};
}

/// Row `sample` of a stacked embedding, keyed by element id.
template <typename Scalar>
ElementEmbedding to_element_embedding(const GraphSchema& schema, const Embedding<Scalar>& emb,
                                      Eigen::Index batch, Eigen::Index sample = 0) {
  ElementEmbedding out;
  for (std::size_t j = 0; j < schema.nodes.size(); ++j) {
    out.per_node[schema.nodes[j].id] =
        emb.nodes.value().row(static_cast<Eigen::Index>(j) * batch + sample).transpose().template cast<double>();
  }
  for (std::size_t j = 0; j < schema.edges.size(); ++j) {
    out.per_edge[schema.edges[j].id] =
        emb.edges.value().row(static_cast<Eigen::Index>(j) * batch + sample).transpose().template cast<double>();
  }
  return out;
}

}  // namespace hgt
