#pragma once

// Parameterized building blocks shared by the backbone maps, the message
// passing networks and the temporal predictors. Each block has an `add_*`
// function that registers its tensors under a name prefix, and a forward
// function that looks them up through a Binder.

#include <string>

#include "hgt/autodiff.hpp"
#include "hgt/params.hpp"
#include "hgt/random.hpp"

namespace hgt {

/// Per-forward evaluation context.
template <typename Scalar>
struct Context {
  ad::Tape<Scalar>& tape;
  Binder<Scalar>& params;
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  double norm_momentum = 0.1;
  int norm_slot = 0;  // running-statistics set used by batch normalization
};

/// Owns the tape and binder of one forward (and optional backward) pass.
template <typename Scalar>
struct ForwardPass {
  ad::Tape<Scalar> tape;
  Binder<Scalar> binder;
  Context<Scalar> ctx;

  ForwardPass(ParamStore<Scalar>& store, bool training, bool track_grads, double dropout = 0.0,
              Rng* rng = nullptr, double norm_momentum = 0.1)
      : binder(tape, store, track_grads), ctx{tape, binder, training, dropout, rng, norm_momentum} {}
  ForwardPass(const ForwardPass&) = delete;
  ForwardPass& operator=(const ForwardPass&) = delete;

  ad::Var<Scalar> constant(ad::Matrix<Scalar> value) { return tape.constant(std::move(value)); }
};

template <typename Scalar>
void add_linear(ParamStore<Scalar>& store, const std::string& prefix, Eigen::Index in, Eigen::Index out,
                Side side, Rng& rng) {
  store.add(prefix + ".weight", glorot<Scalar>(in, out, rng), side);
  store.add(prefix + ".bias", ad::Matrix<Scalar>::Zero(1, out), side);
}

template <typename Scalar>
ad::Var<Scalar> linear(Context<Scalar>& ctx, const std::string& prefix, const ad::Var<Scalar>& x) {
  return ad::add_row(ad::matmul(x, ctx.params(prefix + ".weight")), ctx.params(prefix + ".bias"));
}

/// Prefix of the running statistics of one slot; slot 0 is the plain prefix.
inline std::string norm_slot_prefix(const std::string& prefix, int slot) {
  return slot == 0 ? prefix : prefix + ".step" + std::to_string(slot);
}

/// Affine parameters plus 1 + step_slots sets of running statistics. A block
/// applied at several decoding steps normalizes inputs whose distribution
/// depends on the step, so each step keeps its own statistics.
template <typename Scalar>
void add_batch_norm(ParamStore<Scalar>& store, const std::string& prefix, Eigen::Index dim, Side side,
                    int step_slots = 0) {
  store.add(prefix + ".gamma", ad::Matrix<Scalar>::Ones(1, dim), side);
  store.add(prefix + ".beta", ad::Matrix<Scalar>::Zero(1, dim), side);
  for (int s = 0; s <= step_slots; ++s) {
    store.add(norm_slot_prefix(prefix, s) + ".running_mean", ad::Matrix<Scalar>::Zero(1, dim), side, false);
    store.add(norm_slot_prefix(prefix, s) + ".running_var", ad::Matrix<Scalar>::Ones(1, dim), side, false);
  }
}

/// Uses the context's statistics slot, or the highest one the layer has.
template <typename Scalar>
ad::Var<Scalar> batch_norm(Context<Scalar>& ctx, const std::string& prefix, const ad::Var<Scalar>& x) {
  int slot = ctx.norm_slot;
  while (slot > 0 && !ctx.params.store().contains(norm_slot_prefix(prefix, slot) + ".running_mean")) --slot;
  const std::string stats_prefix = norm_slot_prefix(prefix, slot);
  ad::NormStats<Scalar> stats{ctx.params.buffer(stats_prefix + ".running_mean"),
                              ctx.params.buffer(stats_prefix + ".running_var")};
  return ad::batch_norm(x, ctx.params(prefix + ".gamma"), ctx.params(prefix + ".beta"), stats,
                        ctx.training, Scalar(ctx.norm_momentum));
}

template <typename Scalar>
void add_layer_norm(ParamStore<Scalar>& store, const std::string& prefix, Eigen::Index dim, Side side) {
  store.add(prefix + ".gamma", ad::Matrix<Scalar>::Ones(1, dim), side);
  store.add(prefix + ".beta", ad::Matrix<Scalar>::Zero(1, dim), side);
}

template <typename Scalar>
ad::Var<Scalar> layer_norm(Context<Scalar>& ctx, const std::string& prefix, const ad::Var<Scalar>& x) {
  return ad::layer_norm(x, ctx.params(prefix + ".gamma"), ctx.params(prefix + ".beta"));
}

/// Two affine layers, each followed by batch normalization and a rectifier.
template <typename Scalar>
void add_update_block(ParamStore<Scalar>& store, const std::string& prefix, Eigen::Index in,
                      Eigen::Index width, Side side, Rng& rng, int step_slots = 0) {
  add_linear(store, prefix + ".l1", in, width, side, rng);
  add_batch_norm(store, prefix + ".bn1", width, side, step_slots);
  add_linear(store, prefix + ".l2", width, width, side, rng);
  add_batch_norm(store, prefix + ".bn2", width, side, step_slots);
}

template <typename Scalar>
ad::Var<Scalar> update_block(Context<Scalar>& ctx, const std::string& prefix, const ad::Var<Scalar>& x) {
  auto h = ad::relu(batch_norm(ctx, prefix + ".bn1", linear(ctx, prefix + ".l1", x)));
  return ad::relu(batch_norm(ctx, prefix + ".bn2", linear(ctx, prefix + ".l2", h)));
}

/// Affine, rectifier, affine.
template <typename Scalar>
void add_mlp(ParamStore<Scalar>& store, const std::string& prefix, Eigen::Index in, Eigen::Index hidden,
             Eigen::Index out, Side side, Rng& rng) {
  add_linear(store, prefix + ".l1", in, hidden, side, rng);
  add_linear(store, prefix + ".l2", hidden, out, side, rng);
}

template <typename Scalar>
ad::Var<Scalar> mlp(Context<Scalar>& ctx, const std::string& prefix, const ad::Var<Scalar>& x) {
  return linear(ctx, prefix + ".l2", ad::relu(linear(ctx, prefix + ".l1", x)));
}

template <typename Scalar>
ad::Var<Scalar> maybe_dropout(Context<Scalar>& ctx, const ad::Var<Scalar>& x) {
  if (!ctx.training || ctx.dropout <= 0.0 || ctx.rng == nullptr) return x;
  return ad::dropout(x, ctx.dropout, *ctx.rng);
}

}  // namespace hgt
