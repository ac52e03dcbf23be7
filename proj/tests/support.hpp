#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hgt/autodiff.hpp"

namespace hgt::testing {

using Mat = ad::Matrix<double>;
using Loss = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// Relative error with an absolute floor so near-zero gradients do not blow up.
inline double relative_error(double a, double b, double floor = 1e-5) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel_error = 0.0;
  int entries = 0;
};

/// Compares tape gradients of `loss` at `inputs` with central differences.
inline GradCheck check_gradients(const Loss& loss, std::vector<Mat> inputs, double h = 1e-5) {
  auto evaluate = [&](const std::vector<Mat>& xs) {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> leaves;
    for (const auto& x : xs) leaves.push_back(tape.leaf(x));
    return loss(tape, leaves).value()(0, 0);
  };
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  tape.backward(loss(tape, leaves));
  GradCheck out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Mat* g = tape.grad(leaves[k].id());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k].data()[i];
      inputs[k].data()[i] = saved + h;
      const double up = evaluate(inputs);
      inputs[k].data()[i] = saved - h;
      const double down = evaluate(inputs);
      inputs[k].data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g ? g->data()[i] : 0.0;
      out.max_rel_error = std::max(out.max_rel_error, relative_error(analytic, numeric));
      ++out.entries;
    }
  }
  return out;
}

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Reduces any matrix to a scalar with fixed random weights so every entry
/// gets a distinct gradient.
inline ad::Var<double> probe(ad::Tape<double>& tape, const ad::Var<double>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = tape.constant(random_matrix(x.rows(), x.cols(), rng));
  auto left = tape.constant(Mat::Ones(1, x.rows()));
  auto right = tape.constant(Mat::Ones(x.cols(), 1));
  return ad::matmul(ad::matmul(left, ad::mul(x, w)), right);
}

}  // namespace hgt::testing
