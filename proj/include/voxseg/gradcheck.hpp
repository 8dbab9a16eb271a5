#ifndef VOXSEG_GRADCHECK_HPP
#define VOXSEG_GRADCHECK_HPP

#include <functional>
#include <random>
#include <string>

#include "voxseg/loss.hpp"
#include "voxseg/network.hpp"
#include "voxseg/ops.hpp"

namespace voxseg {

// Finite-difference verification of every differentiable operation, in
// 64-bit. Central differences, step 1e-4, relative error threshold 1e-5.
// The fault-injection knob perturbs one analytic gradient so tests can
// confirm the checker catches a broken backward pass.
namespace gradcheck {

struct OpReport {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

namespace detail {

inline std::mt19937_64 rng(uint64_t seed) { return std::mt19937_64(seed); }

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& r, bool requires_grad = false,
                                    double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (auto& x : v) x = dist(r);
  return Tensor<double>::from_data(std::move(shape), std::move(v), requires_grad);
}

inline double rel_err(double analytic, double fd) {
  const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-3});
  return std::abs(analytic - fd) / denom;
}

// Central-difference sweep over every element of every checked tensor,
// comparing against the already-populated analytic gradients.
template <typename Eval>
OpReport fd_sweep(const std::string& name, std::vector<Tensor<double>>& checked,
                  const Eval& eval, double tol, double step) {
  OpReport rep;
  rep.op = name;
  for (auto& tensor : checked) {
    const std::vector<double>& grad = tensor.grad_ref();
    for (int64_t i = 0; i < tensor.numel(); ++i) {
      const double orig = tensor.data()[i];
      tensor.data()[i] = orig + step;
      const double lp = eval();
      tensor.data()[i] = orig - step;
      const double lm = eval();
      tensor.data()[i] = orig;
      const double fd = (lp - lm) / (2 * step);
      const double an = grad.empty() ? 0.0 : grad[i];
      rep.max_rel_err = std::max(rep.max_rel_err, rel_err(an, fd));
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

// fwd(tape) builds the graph and returns the op output; the loss is the dot
// product with fixed random weights so every output element matters.
template <typename Forward>
OpReport check(const std::string& name, const Forward& fwd,
               std::vector<Tensor<double>> checked, uint64_t seed, double tol,
               double analytic_fault = 0.0) {
  for (auto& t : checked) t.zero_grad();
  Graph<double> g;
  Tensor<double> out = fwd(&g);
  auto r = rng(seed);
  Tensor<double> wts = random_tensor(out.shape(), r);
  auto loss = sum_all(&g, mul(&g, out, wts));
  g.backward(loss);
  if (analytic_fault != 0.0 && !checked.empty() && checked[0].has_grad())
    checked[0].grad()[0] += analytic_fault;

  auto eval = [&]() {
    Tensor<double> o = fwd(static_cast<Graph<double>*>(nullptr));
    double s = 0.0;
    for (int64_t i = 0; i < o.numel(); ++i) s += o.data()[i] * wts.data()[i];
    return s;
  };
  return fd_sweep(name, checked, eval, tol, 1e-4);
}

inline BNParams<double> fresh_bn(int64_t c, std::mt19937_64& r, BNMode mode) {
  BNParams<double> p;
  p.gamma = random_tensor({c}, r, true, 0.5, 1.5);
  p.beta = random_tensor({c}, r, true, -0.3, 0.3);
  p.running_mean = mode == BNMode::Eval ? random_tensor({c}, r) : Tensor<double>::zeros({c});
  p.running_var = mode == BNMode::Eval ? random_tensor({c}, r, false, 0.5, 2.0)
                                       : Tensor<double>::full({c}, 1.0);
  p.tracked = Tensor<double>::full({1}, mode == BNMode::Eval ? 1.0 : 0.0);
  p.mode = mode;
  return p;
}

}  // namespace detail

// Runs the full per-operation suite. `inject_fault` breaks the conv3d check
// on purpose (checker self-test).
inline std::vector<OpReport> run_all(double tol = 1e-5, bool inject_fault = false) {
  using detail::check;
  using detail::random_tensor;
  std::vector<OpReport> out;
  auto r = detail::rng(20240811);

  {
    auto x = random_tensor({2, 2, 4, 4, 4}, r, true);
    auto w = random_tensor({3, 2, 3, 3, 3}, r, true);
    auto b = random_tensor({3}, r, true);
    ConvParams<double> p{w, b};
    out.push_back(check(
        "conv3d", [&](Graph<double>* g) { return conv3d(g, x, p); }, {w, x, b}, 1, tol,
        inject_fault ? 0.5 : 0.0));
  }
  {
    auto x = random_tensor({2, 2, 3, 3, 3}, r, true);
    auto p = detail::fresh_bn(2, r, BNMode::Train);
    out.push_back(check(
        "batch_norm3d(train)", [&](Graph<double>* g) { return batch_norm3d(g, x, p); },
        {x, p.gamma, p.beta}, 2, tol));
  }
  {
    auto x = random_tensor({2, 2, 3, 3, 3}, r, true);
    auto p = detail::fresh_bn(2, r, BNMode::Eval);
    out.push_back(check(
        "batch_norm3d(eval)", [&](Graph<double>* g) { return batch_norm3d(g, x, p); },
        {x, p.gamma, p.beta}, 3, tol));
  }
  {
    auto x = random_tensor({2, 2, 3, 3, 3}, r, true);
    for (int64_t i = 0; i < x.numel(); ++i)
      if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.1;
    PReLUParams<double> p{random_tensor({2}, r, true, 0.1, 0.5)};
    out.push_back(check(
        "prelu", [&](Graph<double>* g) { return prelu(g, x, p); }, {x, p.slope}, 4, tol));
  }
  {
    auto x = random_tensor({1, 2, 3, 3, 3}, r, true);
    out.push_back(check(
        "trilinear_upsample",
        [&](Graph<double>* g) { return upsample_trilinear(g, x, {6, 5, 7}); }, {x}, 5, tol));
  }
  {
    auto a = random_tensor({1, 2, 2, 2, 2}, r, true);
    auto b = random_tensor({1, 2, 2, 2, 2}, r, true);
    out.push_back(check(
        "add", [&](Graph<double>* g) { return add(g, a, b); }, {a, b}, 6, tol));
    out.push_back(check(
        "mul", [&](Graph<double>* g) { return mul(g, a, b); }, {a, b}, 7, tol));
    out.push_back(check(
        "scale", [&](Graph<double>* g) { return scale(g, a, -1.7); }, {a}, 8, tol));
    out.push_back(check(
        "sigmoid", [&](Graph<double>* g) { return sigmoid(g, a); }, {a}, 9, tol));
    out.push_back(check(
        "concat_channels", [&](Graph<double>* g) { return concat_channels(g, {a, b}); }, {a, b},
        10, tol));
    out.push_back(check(
        "slice_channels", [&](Graph<double>* g) { return slice_channels(g, a, 0, 1); }, {a}, 11,
        tol));
  }
  {
    auto a = random_tensor({2, 1, 2, 2, 2}, r, true);
    out.push_back(check(
        "expand_channels", [&](Graph<double>* g) { return expand_channels(g, a, 3); }, {a}, 12,
        tol));
  }
  {
    auto x = random_tensor({1, 2, 4, 4, 4}, r, true);
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] += 0.001 * static_cast<double>(i % 89);
    out.push_back(check(
        "maxpool2", [&](Graph<double>* g) { return maxpool2(g, x); }, {x}, 13, tol));
  }
  {
    auto x = random_tensor({1, 2, 2, 2, 2}, r, true);
    out.push_back(check(
        "sum", [&](Graph<double>* g) { return sum_all(g, x); }, {x}, 14, tol));
  }
  {
    auto p = random_tensor({1, 1, 3, 3, 3}, r, true, 0.1, 0.9);
    std::bernoulli_distribution coin(0.4);
    std::vector<double> gv(27);
    for (auto& v : gv) v = coin(r) ? 1.0 : 0.0;
    auto gt = Tensor<double>::from_data({1, 1, 3, 3, 3}, std::move(gv));
    out.push_back(check(
        "wbce", [&](Graph<double>* g) { return wbce(g, p, gt, 2.0); }, {p}, 15, tol));
  }

  // composite blocks on a tiny model
  ModelConfig tiny;
  tiny.encoder_channels = {2, 4, 4};
  tiny.decoder_channels = {2, 4};
  tiny.stage_head_channels = 4;
  tiny.n_stages = 2;
  tiny.attention_kernel_sizes = {3, 5};
  tiny.attention_group_width = 2;

  {
    nn::ResidualBlock<double> blk;
    blk.conv1 = ConvParams<double>{random_tensor({3, 2, 3, 3, 3}, r, true, -0.3, 0.3), {}};
    blk.bn1 = detail::fresh_bn(3, r, BNMode::Train);
    blk.act1 = PReLUParams<double>{random_tensor({3}, r, true, 0.1, 0.4)};
    blk.conv2 = ConvParams<double>{random_tensor({3, 3, 3, 3, 3}, r, true, -0.3, 0.3), {}};
    blk.bn2 = detail::fresh_bn(3, r, BNMode::Train);
    blk.act2 = PReLUParams<double>{random_tensor({3}, r, true, 0.1, 0.4)};
    blk.has_proj = true;
    blk.proj = ConvParams<double>{random_tensor({3, 2, 1, 1, 1}, r, true, -0.3, 0.3), {}};
    blk.proj_bn = detail::fresh_bn(3, r, BNMode::Train);
    auto x = random_tensor({1, 2, 3, 3, 3}, r, true);
    std::vector<Tensor<double>> checked = {x,           blk.conv1.weight, blk.bn1.gamma,
                                           blk.bn1.beta, blk.act1.slope,   blk.conv2.weight,
                                           blk.proj.weight, blk.proj_bn.gamma};
    out.push_back(check(
        "residual_block", [&](Graph<double>* g) { return blk.forward(g, x); }, checked, 16,
        tol));
  }
  {
    Model<double> m(tiny, 103);
    auto f = random_tensor({1, 4, 4, 4, 4}, r, true);
    std::vector<Tensor<double>> checked = {f};
    for (auto& e : m.params().entries())
      if (e.learnable && e.path.rfind("attention.0.", 0) == 0) checked.push_back(e.tensor);
    out.push_back(check(
        "attention_module",
        [&](Graph<double>* g) { return m.attention_refine(g, 0, f).first; }, checked, 17, tol));
  }
  {
    auto f = random_tensor({1, 4, 3, 3, 3}, r, true);
    auto w = random_tensor({1, 4, 1, 1, 1}, r, true);
    auto b = random_tensor({1}, r, true);
    ConvParams<double> head{w, b};
    out.push_back(check(
        "supervision_head", [&](Graph<double>* g) { return sigmoid(g, conv3d(g, f, head)); },
        {f, w, b}, 18, tol));
  }
  {
    Model<double> m(tiny, 107);
    auto mr = detail::rng(555);
    // 8^3 keeps the deepest batch-norm away from the degenerate single-sample
    // case, and the jitter moves zero-initialized betas off the PReLU kink
    // (nondifferentiable points are excluded by contract).
    std::uniform_real_distribution<double> jitter(-0.05, 0.05);
    for (auto& e : m.params().entries())
      if (e.learnable)
        for (auto& v : e.tensor.values()) v += jitter(mr);
    auto x = random_tensor({1, 1, 8, 8, 8}, mr, true);
    std::bernoulli_distribution coin(0.4);
    std::vector<double> gv(512);
    for (auto& v : gv) v = coin(mr) ? 1.0 : 0.0;
    auto gt = Tensor<double>::from_data({1, 1, 8, 8, 8}, std::move(gv));
    TrainConfig tc;
    tc.backbone_stage_weights = {0.8, 0.7};
    tc.refine_stage_weights = {0.8, 0.7};
    std::vector<Tensor<double>> checked = {x};
    for (auto& e : m.params().entries())
      if (e.learnable) checked.push_back(e.tensor);
    // total_loss is already scalar: check it directly. The deep composite
    // carries far larger higher-order terms than any single op, so the
    // central-difference step shrinks to 1e-6 to keep truncation error below
    // the 1e-5 threshold.
    for (auto& t : checked) t.zero_grad();
    Graph<double> g;
    auto outs = m.forward(&g, x);
    auto tl = total_loss(&g, outs, gt, tc, SupervisionStrategy::BackbonePlusAttentiveFeature,
                         1.5);
    g.backward(tl.value);
    auto eval = [&]() {
      auto o = m.forward(static_cast<Graph<double>*>(nullptr), x);
      return total_loss(static_cast<Graph<double>*>(nullptr), o, gt, tc,
                        SupervisionStrategy::BackbonePlusAttentiveFeature, 1.5)
          .breakdown.total;
    };
    out.push_back(detail::fd_sweep("total_loss(model_forward)", checked, eval, tol, 1e-6));
  }
  return out;
}

}  // namespace gradcheck
}  // namespace voxseg

#endif  // VOXSEG_GRADCHECK_HPP
