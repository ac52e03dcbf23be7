#include <doctest.h>

#include "hgt/autodiff.hpp"
#include "support.hpp"

using namespace hgt;
using namespace hgt::testing;
using V = ad::Var<double>;

namespace {

constexpr double kTol = 1e-6;

double check_unary(const std::function<V(const V&)>& op, Mat x) {
  return check_gradients([&](ad::Tape<double>& t, const std::vector<V>& in) { return probe(t, op(in[0])); },
                         {std::move(x)})
      .max_rel_error;
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  CHECK(check_unary([](const V& a) { return ad::sigmoid(a); }, random_matrix(3, 4, rng)) < kTol);
  CHECK(check_unary([](const V& a) { return ad::tanh(a); }, random_matrix(3, 4, rng)) < kTol);
  CHECK(check_unary([](const V& a) { return ad::relu(a); }, random_matrix(3, 4, rng)) < kTol);
  CHECK(check_unary([](const V& a) { return ad::scale(a, 2.5); }, random_matrix(3, 4, rng)) < kTol);
  CHECK(check_unary([](const V& a) { return ad::softmax_rows(a); }, random_matrix(3, 4, rng)) < kTol);
  CHECK(check_unary([](const V& a) { return ad::cols(a, 1, 2); }, random_matrix(3, 4, rng)) < kTol);
  CHECK(check_unary([](const V& a) { return ad::select_cols(a, {3, 0, 3}); }, random_matrix(3, 4, rng)) < kTol);
}

TEST_CASE("binary ops match finite differences") {
  Rng rng(2);
  auto run = [&](const std::function<V(const V&, const V&)>& op, Mat a, Mat b) {
    return check_gradients([&](ad::Tape<double>& t, const std::vector<V>& in) { return probe(t, op(in[0], in[1])); },
                           {std::move(a), std::move(b)})
        .max_rel_error;
  };
  CHECK(run([](const V& a, const V& b) { return ad::matmul(a, b); }, random_matrix(3, 4, rng), random_matrix(4, 2, rng)) < kTol);
  CHECK(run([](const V& a, const V& b) { return ad::add(a, b); }, random_matrix(3, 4, rng), random_matrix(3, 4, rng)) < kTol);
  CHECK(run([](const V& a, const V& b) { return ad::sub(a, b); }, random_matrix(3, 4, rng), random_matrix(3, 4, rng)) < kTol);
  CHECK(run([](const V& a, const V& b) { return ad::mul(a, b); }, random_matrix(3, 4, rng), random_matrix(3, 4, rng)) < kTol);
  CHECK(run([](const V& a, const V& b) { return ad::add_row(a, b); }, random_matrix(3, 4, rng), random_matrix(1, 4, rng)) < kTol);
  CHECK(run([](const V& a, const V& b) { return ad::row_dot(a, b); }, random_matrix(3, 4, rng), random_matrix(3, 4, rng)) < kTol);
  CHECK(run([](const V& a, const V& b) { return ad::mul_col(a, b); }, random_matrix(3, 4, rng), random_matrix(3, 1, rng)) < kTol);
  CHECK(run([](const V& a, const V& b) { return ad::hcat({a, b, a}); }, random_matrix(3, 2, rng), random_matrix(3, 1, rng)) < kTol);
}

TEST_CASE("normalization layers match finite differences") {
  Rng rng(3);
  const double ln = check_gradients(
                        [](ad::Tape<double>& t, const std::vector<V>& in) {
                          return probe(t, ad::layer_norm(in[0], in[1], in[2]));
                        },
                        {random_matrix(4, 5, rng), random_matrix(1, 5, rng), random_matrix(1, 5, rng)})
                        .max_rel_error;
  CHECK(ln < kTol);
  for (bool training : {true, false}) {
    Mat mean = random_matrix(1, 5, rng);
    Mat var = Mat::Constant(1, 5, 0.7);
    const double bn = check_gradients(
                          [&](ad::Tape<double>& t, const std::vector<V>& in) {
                            Mat m = mean, v = var;  // keep the running estimates fixed across probes
                            return probe(t, ad::batch_norm(in[0], in[1], in[2], {&m, &v}, training));
                          },
                          {random_matrix(6, 5, rng), random_matrix(1, 5, rng), random_matrix(1, 5, rng)})
                          .max_rel_error;
    CHECK(bn < kTol);
  }
}

TEST_CASE("batch norm training updates running estimates") {
  ad::Tape<double> tape;
  Mat x(2, 1);
  x << 1.0, 3.0;
  Mat mean = Mat::Zero(1, 1), var = Mat::Ones(1, 1);
  ad::batch_norm(tape.constant(x), tape.constant(Mat::Ones(1, 1)), tape.constant(Mat::Zero(1, 1)), {&mean, &var}, true);
  CHECK(mean(0, 0) == doctest::Approx(0.2));
  // batch variance 1, unbiased 2
  CHECK(var(0, 0) == doctest::Approx(0.9 + 0.1 * 2.0));
}

TEST_CASE("block ops match finite differences") {
  Rng rng(4);
  const Eigen::Index b = 2;
  std::vector<ad::BlockEntry> entries{{0, 2, 0.5}, {0, 1, 1.0}, {1, 0, -2.0}, {2, 2, 1.0}};
  CHECK(check_unary([&](const V& a) { return ad::mix_blocks(a, b, 3, entries); }, random_matrix(6, 3, rng)) < kTol);
  const double add = check_gradients(
                         [&](ad::Tape<double>& t, const std::vector<V>& in) {
                           return probe(t, ad::add_block_rows(in[0], in[1], b));
                         },
                         {random_matrix(6, 3, rng), random_matrix(3, 3, rng)})
                         .max_rel_error;
  CHECK(add < kTol);
  const double logits = check_gradients(
                            [&](ad::Tape<double>& t, const std::vector<V>& in) {
                              return probe(t, ad::block_logits(in[0], in[1], in[2], b));
                            },
                            {random_matrix(6, 3, rng), random_matrix(3, 3, rng), random_matrix(1, 3, rng)})
                            .max_rel_error;
  CHECK(logits < kTol);
}

TEST_CASE("mix_blocks computes weighted block sums") {
  ad::Tape<double> tape;
  Mat x(4, 1);
  x << 1, 2, 3, 4;
  auto y = ad::mix_blocks(tape.constant(x), 2, 1, {{0, 0, 1.0}, {0, 1, 0.5}});
  CHECK(y.value()(0, 0) == 2.5);
  CHECK(y.value()(1, 0) == 4.0);
}

TEST_CASE("bce matches an elementwise reference") {
  Rng rng(5);
  Mat p(3, 4), y(3, 4);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    p.data()[i] = rng.uniform(0.05, 0.95);
    y.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  double expected = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    expected += y.data()[i] > 0.5 ? -std::log(p.data()[i]) : -std::log(1.0 - p.data()[i]);
  }
  expected /= 12.0;
  ad::Tape<double> tape;
  auto loss = ad::bce(tape.leaf(p), y, Mat::Ones(3, 4));
  CHECK(loss.value()(0, 0) == doctest::Approx(expected).epsilon(1e-12));

  const double err = check_gradients(
                         [&](ad::Tape<double>& t, const std::vector<V>& in) { return ad::bce(in[0], y, Mat::Ones(3, 4)); },
                         {p})
                         .max_rel_error;
  CHECK(err < kTol);
  const double focal = check_gradients(
                           [&](ad::Tape<double>& t, const std::vector<V>& in) {
                             return ad::bce(in[0], y, Mat::Ones(3, 4), 2.0);
                           },
                           {p})
                           .max_rel_error;
  CHECK(focal < kTol);
}

TEST_CASE("bce edge cases") {
  ad::Tape<double> tape;
  CHECK(ad::bce(tape.leaf(Mat::Constant(2, 2, 0.5)), Mat::Zero(2, 2), Mat::Ones(2, 2)).value()(0, 0) ==
        doctest::Approx(std::log(2.0)));
  Mat p(1, 2);
  p << ad::kProbEpsilon, 1.0 - ad::kProbEpsilon;
  Mat y(1, 2);
  y << 0.0, 1.0;
  CHECK(ad::bce(tape.leaf(p), y, Mat::Ones(1, 2)).value()(0, 0) == doctest::Approx(1e-7).epsilon(1e-3));
  Mat hard(1, 2);
  hard << 0.0, 1.0;
  CHECK(std::isfinite(ad::bce(tape.leaf(hard), Mat::Constant(1, 2, 1.0) - y, Mat::Ones(1, 2)).value()(0, 0)));
  CHECK_THROWS_AS(ad::bce(tape.leaf(p), Mat::Zero(2, 2), Mat::Ones(2, 2)), ShapeError);
}

TEST_CASE("zero-weight entries receive no gradient") {
  ad::Tape<double> tape;
  auto p = tape.leaf(Mat::Constant(2, 2, 0.3));
  Mat w = Mat::Ones(2, 2);
  w.col(1).setZero();
  tape.backward(ad::bce(p, Mat::Ones(2, 2), w));
  const Mat& g = *tape.grad(p.id());
  CHECK(g.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.col(0).cwiseAbs().minCoeff() > 0.0);
}

TEST_CASE("shape errors") {
  ad::Tape<double> tape;
  auto a = tape.leaf(Mat::Zero(2, 3));
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::add(a, tape.leaf(Mat::Zero(3, 2))), ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
}
