#include <catch2/catch_amalgamated.hpp>

#include "testutil.hpp"
#include "voxseg/gradcheck.hpp"
#include "voxseg/ops.hpp"

using namespace voxseg;

namespace {

constexpr double kTol = 1e-5;

// Scalar loss used by every check: dot the op output with fixed random
// weights, so all output elements influence the loss.
template <typename Forward>
double weighted_loss(const Forward& fwd, const Tensor<double>& w) {
  Tensor<double> out = fwd(nullptr);
  double s = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) s += out.data()[i] * w.data()[i];
  return s;
}

template <typename Forward>
void check_op(const char* name, const Forward& fwd, std::vector<Tensor<double>> checked,
              uint64_t seed) {
  for (auto& t : checked) t.zero_grad();
  Graph<double> g;
  Tensor<double> out = fwd(&g);
  auto r = testutil::rng(seed);
  Tensor<double> wts = testutil::random_tensor<double>(out.shape(), r);
  auto loss = sum_all(&g, mul(&g, out, wts));
  g.backward(loss);
  auto res = testutil::finite_difference_check(
      checked, [&] { return weighted_loss(fwd, wts); });
  INFO(name << ": " << res.where);
  CHECK(res.max_rel_err < kTol);
}

}  // namespace

TEST_CASE("conv3d gradients match finite differences") {
  auto r = testutil::rng(101);
  for (int k : {1, 3}) {
    auto x = testutil::random_tensor<double>({2, 2, 4, 4, 4}, r, true);
    auto w = testutil::random_tensor<double>({3, 2, k, k, k}, r, true);
    auto b = testutil::random_tensor<double>({3}, r, true);
    ConvParams<double> p{w, b};
    check_op(
        "conv3d", [&](Graph<double>* g) { return conv3d(g, x, p); }, {x, w, b}, 500 + k);
  }
}

TEST_CASE("batch norm train gradients match finite differences") {
  auto r = testutil::rng(103);
  auto x = testutil::random_tensor<double>({2, 2, 3, 3, 3}, r, true);
  BNParams<double> p;
  p.gamma = testutil::random_tensor<double>({2}, r, true, 0.5, 1.5);
  p.beta = testutil::random_tensor<double>({2}, r, true);
  p.running_mean = Tensor<double>::zeros({2});
  p.running_var = Tensor<double>::full({2}, 1.0);
  p.tracked = Tensor<double>::zeros({1});
  check_op(
      "batch_norm3d/train", [&](Graph<double>* g) { return batch_norm3d(g, x, p); },
      {x, p.gamma, p.beta}, 503);
}

TEST_CASE("batch norm eval gradients match finite differences") {
  auto r = testutil::rng(107);
  auto x = testutil::random_tensor<double>({2, 2, 3, 3, 3}, r, true);
  BNParams<double> p;
  p.gamma = testutil::random_tensor<double>({2}, r, true, 0.5, 1.5);
  p.beta = testutil::random_tensor<double>({2}, r, true);
  p.running_mean = testutil::random_tensor<double>({2}, r);
  p.running_var = testutil::random_tensor<double>({2}, r, false, 0.5, 2.0);
  p.tracked = Tensor<double>::full({1}, 1.0);
  p.mode = BNMode::Eval;
  check_op(
      "batch_norm3d/eval", [&](Graph<double>* g) { return batch_norm3d(g, x, p); },
      {x, p.gamma, p.beta}, 505);
}

TEST_CASE("prelu gradients match finite differences away from zero") {
  auto r = testutil::rng(109);
  // keep |x| > 0.05 so the finite-difference step stays on one side of the kink
  auto x = testutil::random_tensor<double>({2, 2, 3, 3, 3}, r, true);
  for (int64_t i = 0; i < x.numel(); ++i)
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] = x.data()[i] < 0 ? -0.1 : 0.1;
  PReLUParams<double> p{testutil::random_tensor<double>({2}, r, true, 0.1, 0.5)};
  check_op(
      "prelu", [&](Graph<double>* g) { return prelu(g, x, p); }, {x, p.slope}, 507);
}

TEST_CASE("prelu slope derivative at x=-1 is -1") {
  auto x = Tensor<double>::from_data({1, 1, 1, 1, 1}, {-1.0});
  PReLUParams<double> p{Tensor<double>::from_data({1}, {0.25}, true)};
  Graph<double> g;
  auto y = prelu(&g, x, p);
  auto loss = sum_all(&g, y);
  g.backward(loss);
  const double analytic = p.slope.grad_ref()[0];
  // central finite difference on the slope
  const double h = 1e-6;
  auto eval = [&](double a) {
    PReLUParams<double> q{Tensor<double>::from_data({1}, {a})};
    return prelu<double>(nullptr, x, q).data()[0];
  };
  const double fd = (eval(0.25 + h) - eval(0.25 - h)) / (2 * h);
  CHECK(analytic == Catch::Approx(-1.0).margin(1e-9));
  CHECK(std::abs(analytic - fd) < 1e-6);
}

TEST_CASE("trilinear upsample gradients match finite differences") {
  auto r = testutil::rng(113);
  auto x = testutil::random_tensor<double>({1, 2, 3, 3, 3}, r, true);
  check_op(
      "upsample_trilinear",
      [&](Graph<double>* g) { return upsample_trilinear(g, x, {5, 6, 7}); }, {x}, 509);
}

TEST_CASE("pointwise op gradients match finite differences") {
  auto r = testutil::rng(127);
  auto a = testutil::random_tensor<double>({1, 2, 2, 2, 2}, r, true);
  auto b = testutil::random_tensor<double>({1, 2, 2, 2, 2}, r, true);
  check_op(
      "add", [&](Graph<double>* g) { return add(g, a, b); }, {a, b}, 511);
  check_op(
      "mul", [&](Graph<double>* g) { return mul(g, a, b); }, {a, b}, 513);
  check_op(
      "scale", [&](Graph<double>* g) { return scale(g, a, -2.5); }, {a}, 515);
  check_op(
      "sigmoid", [&](Graph<double>* g) { return sigmoid(g, a); }, {a}, 517);
  check_op(
      "concat", [&](Graph<double>* g) { return concat_channels(g, {a, b}); }, {a, b}, 519);
  check_op(
      "slice_channels", [&](Graph<double>* g) { return slice_channels(g, a, 1, 2); }, {a}, 521);
}

TEST_CASE("expand_channels gradients match finite differences") {
  auto r = testutil::rng(131);
  auto a = testutil::random_tensor<double>({2, 1, 2, 2, 2}, r, true);
  check_op(
      "expand_channels", [&](Graph<double>* g) { return expand_channels(g, a, 3); }, {a}, 523);
}

TEST_CASE("max pool gradients match finite differences away from ties") {
  auto r = testutil::rng(137);
  auto x = testutil::random_tensor<double>({1, 2, 4, 4, 4}, r, true);
  // spread values so the argmax is stable under the FD step
  for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] += 0.001 * static_cast<double>(i % 97);
  check_op(
      "maxpool2", [&](Graph<double>* g) { return maxpool2(g, x); }, {x}, 525);
}

TEST_CASE("wbce gradients match finite differences") {
  auto r = testutil::rng(139);
  auto p = testutil::random_tensor<double>({1, 1, 3, 3, 3}, r, true, 0.1, 0.9);
  std::vector<double> gvals(27);
  std::bernoulli_distribution coin(0.4);
  for (auto& v : gvals) v = coin(r) ? 1.0 : 0.0;
  auto gt = Tensor<double>::from_data({1, 1, 3, 3, 3}, std::move(gvals));
  check_op(
      "wbce", [&](Graph<double>* g) { return wbce(g, p, gt, 2.5); }, {p}, 527);
}

TEST_CASE("gradient checker flags a deliberately corrupted backward pass") {
  auto r = testutil::rng(151);
  auto x = testutil::random_tensor<double>({1, 2, 3, 3, 3}, r, true);
  auto w = testutil::random_tensor<double>({2, 2, 3, 3, 3}, r, true);
  auto b = testutil::random_tensor<double>({2}, r, true);
  ConvParams<double> p{w, b};
  auto bad = gradcheck::detail::check(
      "conv3d", [&](Graph<double>* g) { return conv3d(g, x, p); }, {w, x, b}, 9, 1e-5,
      /*analytic_fault=*/0.5);
  CHECK_FALSE(bad.pass);
  CHECK(bad.op == "conv3d");
  auto good = gradcheck::detail::check(
      "conv3d", [&](Graph<double>* g) { return conv3d(g, x, p); }, {w, x, b}, 9, 1e-5);
  CHECK(good.pass);
}

TEST_CASE("composite conv-bn-prelu-upsample passes the gradient check") {
  auto r = testutil::rng(149);
  auto x = testutil::random_tensor<double>({1, 2, 3, 3, 3}, r, true);
  auto w = testutil::random_tensor<double>({2, 2, 3, 3, 3}, r, true);
  auto b = testutil::random_tensor<double>({2}, r, true);
  ConvParams<double> conv{w, b};
  BNParams<double> bn;
  bn.gamma = testutil::random_tensor<double>({2}, r, true, 0.5, 1.5);
  bn.beta = testutil::random_tensor<double>({2}, r, true);
  bn.running_mean = Tensor<double>::zeros({2});
  bn.running_var = Tensor<double>::full({2}, 1.0);
  bn.tracked = Tensor<double>::zeros({1});
  PReLUParams<double> act{testutil::random_tensor<double>({2}, r, true, 0.1, 0.5)};
  check_op(
      "composite",
      [&](Graph<double>* g) {
        auto y = conv3d(g, x, conv);
        y = batch_norm3d(g, y, bn);
        y = prelu(g, y, act);
        return upsample_trilinear(g, y, {6, 6, 6});
      },
      {x, w, b, bn.gamma, bn.beta, act.slope}, 529);
}
