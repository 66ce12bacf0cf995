#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "usrf/error.hpp"
#include "usrf/ops.hpp"

using namespace usrf;

namespace {

// Reduce any tensor to a scalar with fixed random weights so every output
// entry contributes a distinct gradient.
Tensor weighted_sum(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix w = test::random_matrix(x.rows(), x.cols(), rng);
  return sum(mul(x, x.tape().constant(w)));
}

double check_unary(Index rows, Index cols, const std::function<Tensor(const Tensor&)>& op, std::uint64_t seed) {
  Rng rng(seed);
  ParameterStore none;
  const auto r = test::grad_check(none, {test::random_matrix(rows, cols, rng)},
                                  [&](Tape&, const std::vector<Tensor>& in) { return weighted_sum(op(in[0]), seed + 1); });
  return r.max_rel;
}

}  // namespace

TEST_CASE("matmul agrees with a triple loop") {
  Rng rng(1);
  const Matrix a = test::random_matrix(4, 5, rng), b = test::random_matrix(5, 3, rng);
  Tape tape;
  const Matrix got = matmul(tape.constant(a), tape.constant(b)).value();
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 3; ++j) {
      double s = 0.0;
      for (Index k = 0; k < 5; ++k) s += a(i, k) * b(k, j);
      CHECK(got(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
  CHECK_THROWS_AS(matmul(tape.constant(a), tape.constant(a)), DimensionError);
}

TEST_CASE("softmax examples") {
  Tape tape;
  Matrix x(1, 2);
  x << 0, 0;
  Matrix s = softmax(tape.constant(x), 1).value();
  CHECK(s(0, 0) == doctest::Approx(0.5));
  x << 1000, 0;
  s = softmax(tape.constant(x), 1).value();
  CHECK(s(0, 0) == doctest::Approx(1.0));
  CHECK(s(0, 1) >= 0.0);
  CHECK(std::isfinite(s(0, 1)));

  Rng rng(2);
  const Matrix r = test::random_matrix(3, 7, rng, 5.0);
  const Matrix rows = softmax(tape.constant(r), 1).value();
  const Matrix cols = softmax(tape.constant(r), 0).value();
  for (Index i = 0; i < 3; ++i) CHECK(rows.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
  for (Index j = 0; j < 7; ++j) CHECK(cols.col(j).sum() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("layer norm of [1,3] is [-1,1]") {
  Tape tape;
  Matrix x(1, 2);
  x << 1, 3;
  const Matrix y =
      layer_norm(tape.constant(x), tape.constant(Matrix::Ones(1, 2)), tape.constant(Matrix::Zero(1, 2))).value();
  CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y(0, 1) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("hadamard product example") {
  Tape tape;
  Matrix a(1, 2), b(1, 2);
  a << 1, 2;
  b << 3, 4;
  const Matrix c = mul(tape.constant(a), tape.constant(b)).value();
  CHECK(c(0, 0) == 3.0);
  CHECK(c(0, 1) == 8.0);
}

TEST_CASE("dropout") {
  Rng rng(4);
  Tape tape;
  const Tensor ones = tape.constant(Matrix::Ones(1, 10000));
  CHECK(dropout(ones, 0.0, true, rng).value() == Matrix::Ones(1, 10000));
  CHECK(dropout(ones, 0.5, false, rng).value() == Matrix::Ones(1, 10000));
  const Matrix d = dropout(ones, 0.1, true, rng).value();
  CHECK(std::abs(d.mean() - 1.0) < 0.02);
  for (Index i = 0; i < d.size(); ++i) CHECK((d(0, i) == 0.0 || std::abs(d(0, i) - 1.0 / 0.9) < 1e-15));
}

TEST_CASE("gelu and softplus values") {
  Tape tape;
  Matrix x(1, 3);
  x << -1.0, 0.0, 2.0;
  const Matrix g = gelu(tape.constant(x)).value();
  for (Index i = 0; i < 3; ++i)
    CHECK(g(0, i) == doctest::Approx(0.5 * x(0, i) * (1.0 + std::erf(x(0, i) / std::sqrt(2.0)))).epsilon(1e-15));
  Matrix big(1, 2);
  big << 800.0, -800.0;
  const Matrix sp = softplus(tape.constant(big)).value();
  CHECK(sp(0, 0) == doctest::Approx(800.0));
  CHECK(sp(0, 1) >= 0.0);
}

TEST_CASE("segment ops against loops") {
  Rng rng(5);
  const Matrix x = test::random_matrix(6, 3, rng);
  const auto seg = make_index_list({0, 2, 0, 1, 2, 2});
  Tape tape;
  const Matrix s = segment_sum(tape.constant(x), seg, 3).value();
  const Matrix m = segment_mean(tape.constant(x), seg, 3).value();
  const Matrix sm = segment_softmax(tape.constant(x), seg, 3).value();
  Matrix ref = Matrix::Zero(3, 3);
  std::vector<double> count(3, 0.0);
  for (Index i = 0; i < 6; ++i) {
    ref.row((*seg)[i]) += x.row(i);
    count[(*seg)[i]] += 1.0;
  }
  CHECK((s - ref).cwiseAbs().maxCoeff() < 1e-14);
  for (Index g = 0; g < 3; ++g) CHECK((m.row(g) - ref.row(g) / count[g]).cwiseAbs().maxCoeff() < 1e-14);
  for (Index c = 0; c < 3; ++c)
    for (Index g = 0; g < 3; ++g) {
      double z = 0.0;
      for (Index i = 0; i < 6; ++i)
        if ((*seg)[i] == g) z += std::exp(x(i, c));
      for (Index i = 0; i < 6; ++i)
        if ((*seg)[i] == g) CHECK(sm(i, c) == doctest::Approx(std::exp(x(i, c)) / z).epsilon(1e-13));
    }
}

TEST_CASE("block matmul and spatial gating against loops") {
  Rng rng(6);
  const Matrix a = test::random_matrix(6, 4, rng), b = test::random_matrix(6, 4, rng);
  Tape tape;
  const Matrix abt = block_matmul(tape.constant(a), tape.constant(b), 2, true).value();
  REQUIRE(abt.rows() == 6);
  REQUIRE(abt.cols() == 3);
  for (Index blk = 0; blk < 2; ++blk)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) {
        double s = 0.0;
        for (Index k = 0; k < 4; ++k) s += a(blk * 3 + i, k) * b(blk * 3 + j, k);
        CHECK(abt(blk * 3 + i, j) == doctest::Approx(s).epsilon(1e-13));
      }
  const Matrix w = test::random_matrix(3, 3, rng), bias = test::random_matrix(3, 1, rng);
  const Matrix gate = spatial_gating(tape.constant(w), tape.constant(bias), tape.constant(a)).value();
  for (Index blk = 0; blk < 2; ++blk)
    for (Index i = 0; i < 3; ++i)
      for (Index c = 0; c < 4; ++c) {
        double s = bias(i, 0);
        for (Index k = 0; k < 3; ++k) s += w(i, k) * a(blk * 3 + k, c);
        CHECK(gate(blk * 3 + i, c) == doctest::Approx(s).epsilon(1e-13));
      }
}

TEST_CASE("finite-difference checks of every differentiable op") {
  const double tol = 1e-7;
  std::uint64_t s = 100;
  CHECK(check_unary(3, 4, [](const Tensor& x) { return transpose(x); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return reshape(x, 2, 6); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return scale(x, -2.5); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return add_scalar(x, 1.5); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return gelu(x); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return sigmoid(x); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return tanh(x); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return softplus(x); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return mean(x); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return softmax(x, 0); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return softmax(x, 1); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return slice_cols(x, 1, 2); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return concat_cols({x, x}); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return concat_rows({x, scale(x, 2.0)}); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return mul(x, x); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return sub(x, scale(x, 0.3)); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return matmul(x, transpose(x)); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return mul(x, slice_cols(reshape(x, 1, 12), 5, 1)); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return add_rowvec(x, reshape(slice_cols(reshape(x, 1, 12), 0, 4), 1, 4)); },
                    ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return scale_rows(x, slice_cols(x, 2, 1)); }, ++s) < tol);
  CHECK(check_unary(3, 4, [](const Tensor& x) { return affine(x, transpose(x), slice_cols(reshape(x, 1, 12), 0, 3)); },
                    ++s) < tol);
  // relu away from its kink
  CHECK(check_unary(3, 4, [](const Tensor& x) { return relu(add_scalar(mul(x, x), 0.1)); }, ++s) < tol);
  CHECK(check_unary(3, 4,
                    [](const Tensor& x) {
                      Tape& t = x.tape();
                      return layer_norm(x, t.constant(Matrix::Constant(1, 4, 1.3)), t.constant(Matrix::Constant(1, 4, 0.2)));
                    },
                    ++s) < tol);
  CHECK(check_unary(3, 4,
                    [](const Tensor& x) {
                      return layer_norm(x, reshape(slice_cols(reshape(x, 1, 12), 0, 4), 1, 4),
                                        reshape(slice_cols(reshape(x, 1, 12), 4, 4), 1, 4));
                    },
                    ++s) < tol);

  const auto seg = make_index_list({1, 0, 1, 2, 2, 1});
  CHECK(check_unary(6, 3, [&](const Tensor& x) { return segment_sum(x, seg, 3); }, ++s) < tol);
  CHECK(check_unary(6, 3, [&](const Tensor& x) { return segment_mean(x, seg, 3); }, ++s) < tol);
  CHECK(check_unary(6, 3, [&](const Tensor& x) { return segment_softmax(x, seg, 3); }, ++s) < tol);
  const auto idx = make_index_list({2, 0, 2, 5, 1});
  CHECK(check_unary(6, 3, [&](const Tensor& x) { return gather_rows(x, idx); }, ++s) < tol);
  CHECK(check_unary(5, 3, [&](const Tensor& x) { return scatter_add_rows(x, idx, 7); }, ++s) < tol);

  CHECK(check_unary(6, 8, [](const Tensor& x) { return head_dot(slice_cols(x, 0, 4), slice_cols(x, 4, 4), 2); }, ++s) <
        tol);
  CHECK(check_unary(6, 6, [](const Tensor& x) { return head_scale(slice_cols(x, 0, 4), slice_cols(x, 4, 2), 2); }, ++s) <
        tol);
  CHECK(check_unary(6, 4, [](const Tensor& x) { return block_matmul(x, x, 2, true); }, ++s) < tol);
  CHECK(check_unary(6, 5, [](const Tensor& x) { return block_matmul(slice_cols(x, 0, 3), slice_cols(x, 3, 2), 2, false); },
                    ++s) < tol);
  CHECK(check_unary(6, 3,
                    [](const Tensor& x) {
                      const Tensor w = reshape(slice_cols(reshape(x, 1, 18), 0, 9), 3, 3);
                      const Tensor b = reshape(slice_cols(reshape(x, 1, 18), 9, 3), 3, 1);
                      return spatial_gating(w, b, x);
                    },
                    ++s) < tol);
}

TEST_CASE("dropout gradient follows its mask") {
  Rng rng(8);
  Tape tape;
  const Tensor x = tape.variable(Matrix::Ones(2, 50));
  const Tensor d = dropout(x, 0.3, true, rng);
  tape.backward(sum(d));
  CHECK((x.grad() - d.value()).cwiseAbs().maxCoeff() == 0.0);
}
