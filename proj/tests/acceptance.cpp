// Acceptance suite: one pass/fail line per criterion. Run with no arguments
// for all criteria, or with a criterion number (1-9) for a single one.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <vector>

#include "voxseg/checkpoint.hpp"
#include "voxseg/gradcheck.hpp"
#include "voxseg/inference.hpp"
#include "voxseg/loss.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/nifti.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/stats.hpp"
#include "voxseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace voxseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

bool approx(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// --------------------------------------------------------------------------
// shared helpers
// --------------------------------------------------------------------------

ModelConfig desk_model() {
  ModelConfig c;
  c.channel_scale = 0.25;
  return c;
}

PhantomSpec small_phantom(uint64_t seed) {
  PhantomSpec spec;
  spec.dims = {64, 64, 64};
  spec.radius_mm = 16.0;
  spec.fold_amplitude_mm = 2.5;
  spec.thickness_mm = 2.4;
  spec.seed = seed;
  return spec;
}

PhantomSpec eval_phantom(uint64_t seed) {
  PhantomSpec spec;
  spec.dims = {96, 96, 96};
  spec.radius_mm = 24.0;
  spec.fold_amplitude_mm = 4.0;
  spec.thickness_mm = 2.4;
  spec.seed = seed;
  return spec;
}

TrainDataset phantom_dataset(int n, uint64_t seed0, const PhantomSpec& base) {
  TrainDataset data;
  for (int i = 0; i < n; ++i) {
    PhantomSpec spec = base;
    spec.seed = seed0 + static_cast<uint64_t>(i);
    auto [img, lbl] = gen_phantom(spec);
    data.push_back(make_train_case(img, lbl));
  }
  return data;
}

Volume<uint8_t> random_mask16(std::mt19937_64& r, double density) {
  auto m = Volume<uint8_t>::create({16, 16, 16}, {0.8, 0.8, 0.8});
  std::bernoulli_distribution coin(density);
  for (auto& v : m.data) v = coin(r) ? 1 : 0;
  return m;
}

std::vector<double> brute_directed(const SurfacePointSet& a, const SurfacePointSet& b) {
  std::vector<double> out;
  for (const auto& p : a.points_mm) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b.points_mm) {
      const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    out.push_back(best);
  }
  return out;
}

// --------------------------------------------------------------------------
// criteria
// --------------------------------------------------------------------------

Outcome criterion1_gradients() {
  auto reports = gradcheck::run_all(1e-5);
  Outcome o;
  o.pass = true;
  double worst = 0.0;
  std::string worst_op;
  for (const auto& r : reports) {
    if (!r.pass) {
      o.pass = false;
      o.detail += r.op + " rel_err " + std::to_string(r.max_rel_err) + "; ";
    }
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_op = r.op;
    }
  }
  if (o.pass)
    o.detail = std::to_string(reports.size()) + " ops checked, worst " + worst_op + " rel_err " +
               std::to_string(worst);
  return o;
}

Outcome criterion2_metric_oracles() {
  Outcome o;
  auto r = std::mt19937_64(811);
  int pairs = 0;
  double worst = 0.0;
  while (pairs < 50) {
    std::uniform_real_distribution<double> dens(0.05, 0.5);
    auto a = random_mask16(r, dens(r));
    auto b = random_mask16(r, dens(r));
    auto sa = extract_surface(a), sb = extract_surface(b);
    // dice against the brute-force count, always
    int64_t na = 0, nb = 0, inter = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
      na += a.data[i] != 0;
      nb += b.data[i] != 0;
      inter += a.data[i] && b.data[i];
    }
    const double dice_oracle =
        (na + nb) == 0 ? 1.0 : 2.0 * double(inter) / double(na + nb);
    if (dice(a, b) != dice_oracle) {
      o.detail = "dice mismatch on pair " + std::to_string(pairs);
      return o;
    }
    if (sa.empty() || sb.empty()) continue;
    ++pairs;
    auto dab = brute_directed(sa, sb), dba = brute_directed(sb, sa);
    const double hd_oracle =
        std::max(percentile_linear(dab, 95.0), percentile_linear(dba, 95.0));
    double ssum = 0;
    for (double d : dab) ssum += d;
    for (double d : dba) ssum += d;
    const double asd_oracle = ssum / double(dab.size() + dba.size());
    const double ehd = std::abs(*hd95(a, b) - hd_oracle);
    const double easd = std::abs(*asd(a, b) - asd_oracle);
    worst = std::max({worst, ehd, easd});
    if (ehd > 1e-6 || easd > 1e-6) {
      o.detail = "distance metric off oracle by " + std::to_string(std::max(ehd, easd));
      return o;
    }
  }

  // derived examples: hand arithmetic, outlier robustness, parallel plates
  {
    auto m1 = Volume<uint8_t>::create({8, 8, 8}, {0.8, 0.8, 0.8});
    auto m2 = m1;
    m1.at(1, 1, 1) = 1;
    m2.at(4, 1, 1) = 1;
    auto d = directed_distances(extract_surface(m1), extract_surface(m2));
    if (d.size() != 1 || !approx(d[0], 2.4, 1e-9)) {
      o.detail = "3-voxel/0.8mm distance example failed";
      return o;
    }
  }
  {
    std::vector<double> dist(99, 0.0);
    dist.push_back(10.0);
    if (percentile_linear(dist, 95.0) != 0.0) {
      o.detail = "95th percentile outlier robustness failed";
      return o;
    }
  }
  {
    auto a = Volume<uint8_t>::create({10, 10, 12}, {0.8, 0.8, 0.8});
    auto b = a;
    for (int64_t y = 0; y < 10; ++y)
      for (int64_t x = 0; x < 10; ++x) {
        a.at(x, y, 3) = 1;
        b.at(x, y, 8) = 1;
      }
    if (!approx(*hd95(a, b), 4.0, 1e-9) || !approx(*asd(a, b), 4.0, 1e-9)) {
      o.detail = "parallel plates example failed";
      return o;
    }
  }
  o.pass = true;
  o.detail = "50 mask pairs, worst oracle deviation " + std::to_string(worst) + " mm";
  return o;
}

Outcome criterion3_loss_schedule() {
  Outcome o;
  TrainConfig cfg;
  struct Case {
    int64_t iter;
    double lr;
  } cases[] = {{0, 1e-3},    {100, 1e-3},  {2999, 1e-3}, {3000, 1e-4},
               {4499, 1e-4}, {4500, 1e-5}, {5999, 1e-5}};
  for (const auto& c : cases)
    if (std::abs(lr_at(c.iter, cfg) - c.lr) > c.lr * 1e-12) {
      o.detail = "lr_at(" + std::to_string(c.iter) + ") != " + std::to_string(c.lr);
      return o;
    }

  // nine equal signals -> 6.2c
  auto g = Tensor<double>::from_data({1, 1, 1, 1, 2}, {1.0, 0.0});
  auto p = Tensor<double>::from_data({1, 1, 1, 1, 2}, {0.6, 0.3});
  ForwardOutputs<double> out;
  out.backbone_probs = {p, p, p, p};
  out.refine_probs = {p, p, p, p};
  out.final_prob = p;
  const double c = wbce_loss<double>(nullptr, p, g, 1.0).data()[0];
  auto tl = total_loss<double>(nullptr, out, g, cfg,
                               SupervisionStrategy::BackbonePlusAttentiveFeature, 1.0);
  if (std::abs(tl.breakdown.total - 6.2 * c) > 1e-12 * std::abs(6.2 * c)) {
    o.detail = "total != 6.2c (got " + std::to_string(tl.breakdown.total / c) + "c)";
    return o;
  }

  // wbce vs independent BCE oracle at alpha=1
  auto r = std::mt19937_64(37);
  std::uniform_real_distribution<double> up(0.01, 0.99);
  std::bernoulli_distribution coin(0.5);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> pv(125), gv(125);
    for (auto& v : pv) v = up(r);
    for (auto& v : gv) v = coin(r) ? 1.0 : 0.0;
    double oracle = 0.0;
    for (size_t i = 0; i < pv.size(); ++i) {
      const double pc = std::clamp(pv[i], 1e-7, 1.0 - 1e-7);
      oracle += gv[i] * std::log(pc) + (1.0 - gv[i]) * std::log(1.0 - pc);
    }
    oracle = -oracle / double(pv.size());
    const double ours =
        wbce_loss<double>(nullptr, Tensor<double>::from_data({1, 1, 5, 5, 5}, pv),
                          Tensor<double>::from_data({1, 1, 5, 5, 5}, gv), 1.0)
            .data()[0];
    worst = std::max(worst, std::abs(ours - oracle));
  }
  if (worst > 1e-7) {
    o.detail = "wbce vs BCE oracle deviation " + std::to_string(worst);
    return o;
  }
  o.pass = true;
  o.detail = "schedule exact, 6.2c exact, wbce-oracle deviation " + std::to_string(worst);
  return o;
}

Outcome criterion4_structure() {
  Outcome o;
  Model<float> full(ModelConfig{}, 31);
  ModelConfig off;
  off.attention_enabled = false;
  Model<float> dsrnet(off, 31);
  const double count = double(full.param_count());
  const double delta = double(full.param_count() - dsrnet.param_count());
  if (count < 0.85 * 2.75e6 || count > 1.15 * 2.75e6) {
    o.detail = "param count " + std::to_string(full.param_count()) + " outside 2.75M +/- 15%";
    return o;
  }
  if (delta < 0.85 * 7e4 || delta > 1.15 * 7e4) {
    o.detail = "attention delta " + std::to_string((int64_t)delta) + " outside 70k +/- 15%";
    return o;
  }
  if (delta != double(full.attention_param_count())) {
    o.detail = "delta is not exactly the attention block";
    return o;
  }
  Model<float> desk(desk_model(), 5);
  auto r = std::mt19937_64(12);
  std::vector<float> xv(32 * 32 * 32);
  std::uniform_real_distribution<float> ud(-1.f, 1.f);
  for (auto& v : xv) v = ud(r);
  auto x = Tensor<float>::from_data({1, 1, 32, 32, 32}, xv);
  auto outs = desk.forward(nullptr, x);
  if (outs.supervised_signal_count() != 9) {
    o.detail = "expected 9 supervised signals, got " +
               std::to_string(outs.supervised_signal_count());
    return o;
  }
  o.pass = true;
  o.detail = "params " + std::to_string(full.param_count()) + " (" +
             std::to_string(count / 2.75e6) + " of 2.75M), attention block " +
             std::to_string((int64_t)delta) + ", 9 signals";
  return o;
}

Outcome criterion5_overfit() {
  Outcome o;
  TrainDataset data = phantom_dataset(4, 1000, small_phantom(0));
  Model<float> model(desk_model(), 41);
  TrainConfig cfg;
  cfg.total_iters = 300;
  cfg.seed = 41;
  cfg.augment_flips = false;
  cfg.augment_rotations = false;
  cfg.checkpoint_every = 0;
  SamplerConfig sampler;
  sampler.sequential = true;  // the same fixed batch of 4 patches every step
  auto res = train_loop(model, data, cfg, sampler);
  if (!res.completed) {
    o.detail = "training halted: " + res.halt_reason;
    return o;
  }
  const double final_loss = res.trace.back().loss.total;
  o.pass = final_loss < 0.05;
  o.detail = "single-batch loss after 300 iterations: " + std::to_string(final_loss) +
             (o.pass ? " < 0.05" : " (need < 0.05)");
  return o;
}

Outcome criterion6_generalization() {
  Outcome o;
  const uint64_t seed = 2024;
  TrainDataset train = phantom_dataset(20, 100, eval_phantom(0));

  TrainConfig cfg;
  cfg.total_iters = 1500;
  cfg.seed = seed;
  cfg.checkpoint_every = 0;

  auto train_and_eval = [&](const ModelConfig& mc, const char* tag, double& mean_dice,
                            double& mean_asd) {
    Model<float> model(mc, seed);
    auto res = train_loop(model, train, cfg);
    check(res.completed, ErrorKind::Numeric,
          std::string(tag) + " training halted: " + res.halt_reason);
    std::vector<double> dices, asds;
    for (int i = 0; i < 5; ++i) {
      PhantomSpec spec = eval_phantom(0);
      spec.seed = 900 + static_cast<uint64_t>(i);
      auto [img, lbl] = gen_phantom(spec);
      auto inf = predict_volume(model, img, 64, 32, 0.5);
      dices.push_back(dice(inf.mask, lbl));
      auto a = asd(inf.mask, lbl);
      if (a) asds.push_back(*a);
    }
    double sd = 0, sa = 0;
    for (double d : dices) sd += d;
    for (double d : asds) sa += d;
    mean_dice = sd / dices.size();
    mean_asd = asds.empty() ? std::numeric_limits<double>::infinity() : sa / asds.size();
    std::printf("  [criterion 6] %s: mean dice %.4f, mean asd %.4f mm\n", tag, mean_dice,
                mean_asd);
    std::fflush(stdout);
  };

  double dice_attn = 0, asd_attn = 0, dice_dsrnet = 0, asd_dsrnet = 0;
  train_and_eval(desk_model(), "attention", dice_attn, asd_attn);
  ModelConfig dsr = desk_model();
  dsr.attention_enabled = false;
  train_and_eval(dsr, "dsrnet", dice_dsrnet, asd_dsrnet);

  const double spacing = 0.8;
  const bool dice_ok = dice_attn >= 0.80;
  const bool asd_ok = asd_attn <= 2.0 * spacing;
  const bool order_ok = dice_attn >= dice_dsrnet - 0.02;
  o.pass = dice_ok && asd_ok && order_ok;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "attention dice %.4f (need >= 0.80), asd %.4f mm (need <= %.2f), dsrnet dice "
                "%.4f (margin %.4f >= -0.02)",
                dice_attn, asd_attn, 2.0 * spacing, dice_dsrnet, dice_attn - dice_dsrnet);
  o.detail = buf;
  return o;
}

Outcome criterion7_gate_laws() {
  Outcome o;
  for (double c : {0.0, 0.5, 1.0}) {
    ModelConfig cfg = desk_model();
    cfg.attention_gate_override = c;
    cfg.attention_branch_bn_identity = true;
    Model<float> m(cfg, 3);
    auto r = std::mt19937_64(5);
    std::uniform_real_distribution<float> ud(-2.f, 2.f);
    std::vector<float> fv(4 * 16 * 16 * 16);
    for (auto& v : fv) v = ud(r);
    auto f = Tensor<float>::from_data({1, 4, 16, 16, 16}, fv);
    auto [refined, amap] = m.attention_refine(nullptr, 0, f);
    for (int64_t i = 0; i < f.numel(); ++i)
      if (refined.data()[i] != static_cast<float>(1.0 + c) * f.data()[i]) {
        o.detail = "F' != (1+c)F exactly at c=" + std::to_string(c);
        return o;
      }
  }
  // live gates strictly inside (0,1)
  Model<float> live(desk_model(), 7);
  auto r = std::mt19937_64(9);
  std::uniform_real_distribution<float> ud(-1.f, 1.f);
  std::vector<float> xv(32 * 32 * 32);
  for (auto& v : xv) v = ud(r);
  auto outs = live.forward(nullptr, Tensor<float>::from_data({1, 1, 32, 32, 32}, xv));
  for (const auto& a : outs.attention_maps)
    for (int64_t i = 0; i < a.numel(); ++i)
      if (!(a.data()[i] > 0.0f && a.data()[i] < 1.0f)) {
        o.detail = "gate value outside (0,1)";
        return o;
      }
  o.pass = true;
  o.detail = "(1+c)F exact for c in {0, 0.5, 1}; live gates strictly inside (0,1)";
  return o;
}

Outcome criterion8_reproducibility() {
  Outcome o;
  // identical (config, seed) -> bit-identical traces and masks
  TrainDataset data = phantom_dataset(2, 500, small_phantom(0));
  TrainConfig cfg;
  cfg.total_iters = 5;
  cfg.seed = 77;
  cfg.checkpoint_every = 0;
  ModelConfig mc = desk_model();

  std::vector<TraceRow> traces[2];
  Volume<uint8_t> masks[2];
  for (int run = 0; run < 2; ++run) {
    Model<float> m(mc, 77);
    auto res = train_loop(m, data, cfg);
    if (!res.completed) {
      o.detail = "training halted";
      return o;
    }
    traces[run] = res.trace;
    PhantomSpec spec = small_phantom(999);
    auto [img, lbl] = gen_phantom(spec);
    masks[run] = predict_volume(m, img, 64, 32, 0.5).mask;
  }
  for (size_t i = 0; i < traces[0].size(); ++i) {
    if (traces[0][i].loss.total != traces[1][i].loss.total ||
        traces[0][i].loss.final_loss != traces[1][i].loss.final_loss) {
      o.detail = "loss traces differ at iteration " + std::to_string(i);
      return o;
    }
  }
  if (masks[0].data != masks[1].data) {
    o.detail = "inference masks differ between identical runs";
    return o;
  }

  // NIfTI round trip bit-exact
  auto r = std::mt19937_64(13);
  auto vol = Volume<float>::create({9, 7, 5}, {0.8, 1.0, 1.2});
  std::uniform_real_distribution<float> ud(-100.f, 100.f);
  for (auto& v : vol.data) v = ud(r);
  const std::string tmp = (fs::temp_directory_path() / "voxseg_accept_rt.nii").string();
  write_volume(vol, tmp);
  auto rt = read_volume<float>(tmp);
  fs::remove(tmp);
  if (rt.dims != vol.dims) {
    o.detail = "NIfTI round trip changed dims";
    return o;
  }
  if (rt.spacing != vol.spacing) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "NIfTI round trip changed spacing: (%.17g,%.17g,%.17g) vs (%.17g,%.17g,%.17g)",
                  rt.spacing[0], rt.spacing[1], rt.spacing[2], vol.spacing[0], vol.spacing[1],
                  vol.spacing[2]);
    o.detail = buf;
    return o;
  }
  if (rt.affine != vol.affine) {
    o.detail = "NIfTI round trip changed the affine";
    return o;
  }
  if (std::memcmp(rt.data.data(), vol.data.data(), vol.data.size() * sizeof(float)) != 0) {
    o.detail = "NIfTI round trip changed the payload";
    return o;
  }

  // augmentation identities on 100 random patches
  std::bernoulli_distribution coin(0.3);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<float> patch(6 * 6 * 6);
    for (auto& v : patch) v = coin(r) ? ud(r) : 0.0f;
    const int axis = static_cast<int>(r() % 3);
    if (flip_axis(flip_axis(patch, 6, axis), 6, axis) != patch) {
      o.detail = "flip involution failed";
      return o;
    }
    if (rotate90(patch, 6, axis, 4) != patch) {
      o.detail = "four quarter-turns are not the identity";
      return o;
    }
  }
  o.pass = true;
  o.detail = "bit-identical traces and masks; NIfTI round trip exact; 100 augmentation identities";
  return o;
}

Outcome criterion9_supervision_ablation() {
  Outcome o;
  TrainDataset data = phantom_dataset(2, 700, small_phantom(0));
  TrainConfig cfg;
  cfg.total_iters = 25;
  cfg.batch_size = 2;
  cfg.seed = 55;
  cfg.checkpoint_every = 0;

  const SupervisionStrategy strategies[] = {
      SupervisionStrategy::OutputOnly, SupervisionStrategy::BackbonePlusOutput,
      SupervisionStrategy::BackbonePlusAttentionMap,
      SupervisionStrategy::BackbonePlusAttentiveFeature};
  for (auto strategy : strategies) {
    ModelConfig mc = desk_model();
    mc.supervision = strategy;
    Model<float> m(mc, 55);
    auto res = train_loop(m, data, cfg);
    if (!res.completed || static_cast<int64_t>(res.trace.size()) != cfg.total_iters) {
      o.detail = std::string("strategy ") + to_string(strategy) + " failed to train";
      return o;
    }
    // distinct per-signal loss columns: all nine signals logged, not all equal
    const auto& last = res.trace.back().loss;
    if (last.backbone.size() != 4 || last.refine.size() != 4) {
      o.detail = "per-signal columns missing";
      return o;
    }
    std::vector<double> signals = last.backbone;
    signals.insert(signals.end(), last.refine.begin(), last.refine.end());
    signals.push_back(last.final_loss);
    bool distinct = false;
    for (size_t i = 1; i < signals.size(); ++i) distinct = distinct || signals[i] != signals[0];
    if (!distinct) {
      o.detail = std::string("per-signal losses degenerate under ") + to_string(strategy);
      return o;
    }
    std::printf("  [criterion 9] %s: total %.4f final %.4f\n", to_string(strategy),
                last.total, last.final_loss);
    std::fflush(stdout);
  }
  o.pass = true;
  o.detail = "all four supervision strategies trained; nine distinct per-signal columns";
  return o;
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "gradient integrity (finite differences, 64-bit)", criterion1_gradients},
    {2, "metric oracle equivalence (dice/hd95/asd)", criterion2_metric_oracles},
    {3, "loss and schedule fidelity", criterion3_loss_schedule},
    {4, "structural reconciliation (parameter counts, 9 signals)", criterion4_structure},
    {5, "overfit smoke test (300 iterations, fixed batch)", criterion5_overfit},
    {6, "phantom generalization (20 train / 5 test, 1500 iterations)",
     criterion6_generalization},
    {7, "attention gate laws", criterion7_gate_laws},
    {8, "reproducibility and I/O", criterion8_reproducibility},
    {9, "supervision ablation harness", criterion9_supervision_ablation},
};

}  // namespace

int main(int argc, char** argv) {
  int which = 0;
  if (argc > 1) which = std::atoi(argv[1]);
  int failures = 0;
  for (const auto& c : kCriteria) {
    if (which != 0 && c.id != which) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("[%s] criterion %d: %s -- %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
