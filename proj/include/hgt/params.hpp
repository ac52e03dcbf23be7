#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hgt/autodiff.hpp"
#include "hgt/error.hpp"
#include "hgt/random.hpp"

namespace hgt {

/// Which half of the hypergraph a parameter serves. Edge-side parameters are
/// held fixed during node pretraining.
enum class Side { shared, node, edge };

template <typename Scalar>
struct Tensor {
  std::string name;
  ad::Matrix<Scalar> value;
  Side side = Side::shared;
  bool trainable = true;  // false for running statistics
};

/// Named, ordered parameter and buffer storage.
template <typename Scalar>
class ParamStore {
 public:
  int add(std::string name, ad::Matrix<Scalar> value, Side side, bool trainable = true) {
    if (index_.count(name) != 0) throw StateError("duplicate parameter name: " + name);
    const int id = static_cast<int>(tensors_.size());
    index_.emplace(name, id);
    tensors_.push_back(Tensor<Scalar>{std::move(name), std::move(value), side, trainable});
    return id;
  }

  int index(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw StateError("unknown parameter: " + std::string(name));
    return it->second;
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  Tensor<Scalar>& operator[](int i) { return tensors_[i]; }
  const Tensor<Scalar>& operator[](int i) const { return tensors_[i]; }
  ad::Matrix<Scalar>& value(std::string_view name) { return tensors_[index(name)].value; }
  const ad::Matrix<Scalar>& value(std::string_view name) const { return tensors_[index(name)].value; }

  int size() const { return static_cast<int>(tensors_.size()); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  /// Number of trainable scalars.
  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& t : tensors_) {
      if (t.trainable) n += t.value.size();
    }
    return n;
  }

  template <typename Other>
  ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& t : tensors_) out.add(t.name, t.value.template cast<Other>(), t.side, t.trainable);
    return out;
  }

 private:
  std::vector<Tensor<Scalar>> tensors_;
  std::map<std::string, int, std::less<>> index_;
};

/// Binds a parameter store to one tape: each trainable tensor becomes a leaf
/// on first use, and buffers are exposed for in-place statistic updates.
template <typename Scalar>
class Binder {
 public:
  Binder(ad::Tape<Scalar>& tape, ParamStore<Scalar>& store, bool track_grads = true)
      : tape_(tape), store_(store), track_grads_(track_grads), leaves_(store.size(), -1) {}

  ad::Tape<Scalar>& tape() { return tape_; }
  ParamStore<Scalar>& store() { return store_; }

  ad::Var<Scalar> operator()(int index) {
    if (leaves_[index] < 0) {
      const auto& t = store_[index];
      auto var = (track_grads_ && t.trainable) ? tape_.leaf(t.value) : tape_.constant(t.value);
      leaves_[index] = var.id();
    }
    return ad::Var<Scalar>(&tape_, leaves_[index]);
  }

  ad::Var<Scalar> operator()(std::string_view name) { return (*this)(store_.index(name)); }

  ad::Matrix<Scalar>* buffer(std::string_view name) { return &store_.value(name); }

  /// Gradients aligned with the store; zero for tensors that were not reached.
  std::vector<ad::Matrix<Scalar>> gradients() const {
    std::vector<ad::Matrix<Scalar>> out;
    out.reserve(store_.size());
    for (int i = 0; i < store_.size(); ++i) {
      const auto& v = store_[i].value;
      const ad::Matrix<Scalar>* g = leaves_[i] >= 0 ? tape_.grad(leaves_[i]) : nullptr;
      out.push_back(g ? *g : ad::Matrix<Scalar>::Zero(v.rows(), v.cols()));
    }
    return out;
  }

 private:
  ad::Tape<Scalar>& tape_;
  ParamStore<Scalar>& store_;
  bool track_grads_;
  std::vector<int> leaves_;
};

/// Glorot-uniform initialization for an in x out weight.
template <typename Scalar>
ad::Matrix<Scalar> glorot(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  ad::Matrix<Scalar> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(rng.uniform(-limit, limit));
  return w;
}

template <typename Scalar>
ad::Matrix<Scalar> gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  ad::Matrix<Scalar> w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(stddev * rng.normal());
  return w;
}

}  // namespace hgt
