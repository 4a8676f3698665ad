#include <gtest/gtest.h>

#include <random>

#include "realtalk/autodiff.hpp"
#include "realtalk/training.hpp"

using namespace realtalk;
using ad::Matrix;
using ad::Var;

namespace {

Matrix<double> rand_mat(int r, int c, std::mt19937_64& rng) {
  return uniform<double>(r, c, -1.0, 1.0, rng);
}

// Checks one op by building a scalar loss sum(op(params) * weights).
void expect_op_grad(const std::function<Var<double>(ParameterStore<double>&)>& op, ParameterStore<double>& store,
                    double tol = 1e-6) {
  std::mt19937_64 rng(99);
  Var<double> probe = [&] {
    ad::NoGradGuard g;
    return op(store);
  }();
  auto weights = ad::constant<double>(rand_mat(static_cast<int>(probe.rows()), static_cast<int>(probe.cols()), rng));
  std::function<Var<double>()> loss = [&] { return ad::sum(ad::mul(op(store), weights)); };
  GradCheckOptions opt;
  opt.min_coordinates = 60;
  auto report = grad_check(store, loss, opt);
  EXPECT_GT(report.checked, 0u);
  EXPECT_LT(report.max_rel_error, tol) << report.worst_coordinate;
}

}  // namespace

TEST(Autodiff, ElementwiseAndMatmul) {
  std::mt19937_64 rng(1);
  ParameterStore<double> s;
  s.add("a", rand_mat(4, 3, rng));
  s.add("b", rand_mat(3, 5, rng));
  s.add("r", rand_mat(1, 5, rng));
  expect_op_grad(
      [](auto& st) {
        auto y = ad::matmul(st.get("a"), st.get("b"));
        y = ad::add_row(ad::mul_row(y, st.get("r")), st.get("r"));
        return ad::mul(ad::tanh(y), ad::sigmoid(y));
      },
      s);
}

TEST(Autodiff, Activations) {
  std::mt19937_64 rng(2);
  ParameterStore<double> s;
  s.add("x", rand_mat(5, 4, rng));
  expect_op_grad([](auto& st) { return ad::gelu(st.get("x")); }, s);
  expect_op_grad([](auto& st) { return ad::softplus(ad::scale(st.get("x"), 3.0)); }, s);
  expect_op_grad([](auto& st) { return ad::exp(st.get("x")); }, s);
  expect_op_grad([](auto& st) { return ad::log(ad::add_scalar(ad::square(st.get("x")), 1.0)); }, s);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(3);
  auto x = ad::constant<double>(rand_mat(6, 7, rng) * 5.0);
  auto y = ad::softmax_rows(x);
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(y.value().row(i).sum(), 1.0, 1e-12);
  ParameterStore<double> s;
  s.add("x", rand_mat(3, 4, rng));
  expect_op_grad([](auto& st) { return ad::softmax_rows(st.get("x")); }, s);
}

TEST(Autodiff, Norms) {
  std::mt19937_64 rng(4);
  ParameterStore<double> s;
  s.add("x", rand_mat(6, 5, rng));
  s.add("g", rand_mat(1, 5, rng));
  s.add("b", rand_mat(1, 5, rng));
  expect_op_grad([](auto& st) { return ad::layer_norm(st.get("x"), st.get("g"), st.get("b")); }, s);
  Matrix<double> rm = Matrix<double>::Zero(1, 5), rv = Matrix<double>::Ones(1, 5);
  expect_op_grad(
      [&](auto& st) { return ad::batch_norm(st.get("x"), st.get("g"), st.get("b"), rm, rv, ad::BatchNormMode::batch_frozen); }, s);
  expect_op_grad(
      [&](auto& st) { return ad::batch_norm(st.get("x"), st.get("g"), st.get("b"), rm, rv, ad::BatchNormMode::eval); }, s);
}

TEST(Autodiff, StructuralOps) {
  std::mt19937_64 rng(5);
  ParameterStore<double> s;
  s.add("x", rand_mat(4, 6, rng));
  s.add("t", rand_mat(3, 6, rng));
  s.add("c", rand_mat(4, 1, rng));
  expect_op_grad(
      [](auto& st) {
        auto x = st.get("x");
        auto parts = ad::concat_cols<double>({ad::slice_cols(x, 1, 3), x});
        auto rows = ad::concat_rows<double>({ad::slice_rows(parts, 0, 2), parts});
        return ad::reshape(rows, 9, 6);
      },
      s);
  expect_op_grad([](auto& st) { return ad::gather_rows(st.get("t"), {2, 0, 2, 1}); }, s);
  expect_op_grad([](auto& st) { return ad::mul_col(st.get("x"), st.get("c")); }, s);
  expect_op_grad([](auto& st) { return ad::matmul_nt(st.get("x"), st.get("t")); }, s);
  expect_op_grad([](auto& st) { return ad::sum_cols(ad::square(st.get("x"))); }, s);
  expect_op_grad([](auto& st) { return ad::repeat_row(ad::sum_rows(st.get("x")), 3); }, s);
}

TEST(Autodiff, Convolutions) {
  std::mt19937_64 rng(6);
  ParameterStore<double> s;
  s.add("x", rand_mat(7, 3, rng));
  s.add("img", rand_mat(25, 2, rng));
  expect_op_grad([](auto& st) { return ad::im2col_1d(st.get("x"), 3, 2); }, s);
  expect_op_grad([](auto& st) { return ad::im2col_2d(st.get("img"), 5, 5, 3, 2, 1); }, s);
}

TEST(Autodiff, Im2colSamePaddingLayout) {
  Matrix<double> x(4, 1);
  x << 1, 2, 3, 4;
  auto cols = ad::im2col_1d(ad::constant<double>(x), 3, 1).value();
  EXPECT_EQ(cols(0, 0), 0.0);
  EXPECT_EQ(cols(0, 1), 1.0);
  EXPECT_EQ(cols(0, 2), 2.0);
  EXPECT_EQ(cols(3, 2), 0.0);
}

TEST(Autodiff, LogAbsDet) {
  std::mt19937_64 rng(7);
  ParameterStore<double> s;
  Matrix<double> w = rand_mat(4, 4, rng) + 2.0 * Matrix<double>::Identity(4, 4);
  s.add("w", w);
  EXPECT_NEAR(ad::log_abs_det(s.get("w")).item(), std::log(std::abs(w.determinant())), 1e-12);
  std::function<Var<double>()> loss = [&] { return ad::log_abs_det(s.get("w")); };
  EXPECT_LT(grad_check(s, loss).max_rel_error, 1e-6);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  ParameterStore<double> s;
  auto p = s.add("p", Matrix<double>::Ones(2, 2));
  ad::NoGradGuard g;
  auto y = ad::sum(ad::square(p));
  EXPECT_FALSE(y.requires_grad());
}
