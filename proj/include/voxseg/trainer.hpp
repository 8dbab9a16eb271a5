#ifndef VOXSEG_TRAINER_HPP
#define VOXSEG_TRAINER_HPP

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>

#include "voxseg/augment.hpp"
#include "voxseg/loss.hpp"
#include "voxseg/network.hpp"
#include "voxseg/optim.hpp"
#include "voxseg/patches.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// One training case: z-scored image, binary label, and the foreground voxel
// index list for biased patch sampling.
struct TrainCase {
  Volume<float> image;
  Volume<uint8_t> label;
  std::vector<int64_t> fg_voxels;
};

using TrainDataset = std::vector<TrainCase>;

inline TrainCase make_train_case(const Volume<float>& raw_image, const Volume<uint8_t>& label) {
  check(raw_image.dims == label.dims, ErrorKind::Data,
        "train case: image and label dims differ");
  TrainCase c;
  c.image = normalize_intensity(raw_image);
  c.label = label;
  for (int64_t i = 0; i < label.numel(); ++i)
    if (label.data[static_cast<size_t>(i)]) c.fg_voxels.push_back(i);
  return c;
}

struct TraceRow {
  int64_t iter = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  bool completed = false;
  std::string halt_reason;
  int64_t iterations_run = 0;
};

struct SamplerConfig {
  // sequential: batch element b always reads case b mod n (fixed-batch
  // overfitting); otherwise cases and origins are drawn from the sampling
  // stream.
  bool sequential = false;
};

namespace detail {

inline std::array<int64_t, 3> clamp_origin(std::array<int64_t, 3> want,
                                           const std::array<int64_t, 3>& dims, int64_t patch) {
  for (int i = 0; i < 3; ++i)
    want[i] = std::min(std::max<int64_t>(want[i], 0), std::max<int64_t>(dims[i] - patch, 0));
  return want;
}

}  // namespace detail

// Fills one batch slot from a case: 50% of draws centered on a random
// foreground voxel, 50% uniform (configurable bias).
inline void sample_patch(const TrainCase& c, int64_t patch, double fg_bias,
                         std::mt19937_64& rng, float* img_dst, float* lbl_dst) {
  std::array<int64_t, 3> origin{0, 0, 0};
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (!c.fg_voxels.empty() && coin(rng) < fg_bias) {
    std::uniform_int_distribution<size_t> pick(0, c.fg_voxels.size() - 1);
    const int64_t idx = c.fg_voxels[pick(rng)];
    const int64_t x = idx % c.label.dims[0];
    const int64_t y = (idx / c.label.dims[0]) % c.label.dims[1];
    const int64_t z = idx / (c.label.dims[0] * c.label.dims[1]);
    origin = detail::clamp_origin({x - patch / 2, y - patch / 2, z - patch / 2}, c.label.dims,
                                  patch);
  } else {
    for (int i = 0; i < 3; ++i) {
      const int64_t hi = std::max<int64_t>(c.label.dims[i] - patch, 0);
      std::uniform_int_distribution<int64_t> pick(0, hi);
      origin[i] = pick(rng);
    }
  }
  copy_patch(c.image, origin, patch, img_dst);
  copy_patch(c.label, origin, patch, lbl_dst);
}

// End-to-end training: sample, augment, forward, deep-supervision loss,
// backward, Adam step on the schedule. Emits one trace row per iteration and
// invokes checkpoint_cb periodically and at completion; halts (keeping the
// last good checkpoint) if the loss goes non-finite.
inline TrainResult train_loop(
    Model<float>& model, const TrainDataset& data, const TrainConfig& cfg,
    const SamplerConfig& sampler = {},
    const std::function<void(int64_t, Model<float>&)>& checkpoint_cb = {}) {
  cfg.validate();
  check(!data.empty(), ErrorKind::Data, "train: dataset is empty");
  bool any_fg = false;
  for (const auto& c : data) any_fg = any_fg || !c.fg_voxels.empty();
  check(any_fg, ErrorKind::Data, "train: no case contains foreground voxels");

  model.set_mode(BNMode::Train);
  Adam<float> opt(model.params());
  const int64_t patch = cfg.patch_size;
  const int64_t bsz = cfg.batch_size;
  const int64_t pvox = patch * patch * patch;

  TrainResult result;
  result.trace.reserve(static_cast<size_t>(cfg.total_iters));

  for (int64_t iter = 0; iter < cfg.total_iters; ++iter) {
    auto x = Tensor<float>::zeros({bsz, 1, patch, patch, patch});
    auto gt = Tensor<float>::zeros({bsz, 1, patch, patch, patch});
    for (int64_t b = 0; b < bsz; ++b) {
      auto rng = make_rng(cfg.seed, RngStream::PatchSampling,
                          static_cast<uint64_t>(iter * bsz + b));
      size_t case_idx;
      if (sampler.sequential) {
        case_idx = static_cast<size_t>(b) % data.size();
      } else {
        std::uniform_int_distribution<size_t> pick(0, data.size() - 1);
        case_idx = pick(rng);
      }
      float* img = x.data() + b * pvox;
      float* lbl = gt.data() + b * pvox;
      sample_patch(data[case_idx], patch, cfg.foreground_bias, rng, img, lbl);
      if (cfg.augment_flips || cfg.augment_rotations) {
        auto arng = make_rng(cfg.seed, RngStream::Augmentation,
                             static_cast<uint64_t>(iter * bsz + b));
        const AugmentDraw draw =
            draw_augmentation(arng, cfg.augment_flips, cfg.augment_rotations);
        std::vector<float> ibuf(img, img + pvox), lbuf(lbl, lbl + pvox);
        ibuf = apply_augmentation(ibuf, patch, draw);
        lbuf = apply_augmentation(lbuf, patch, draw);
        std::copy(ibuf.begin(), ibuf.end(), img);
        std::copy(lbuf.begin(), lbuf.end(), lbl);
      }
    }

    const double alpha = alpha_for_batch(gt, cfg.alpha_min, cfg.alpha_max);
    const double lr = lr_at(iter, cfg);

    Graph<float> graph;
    auto outputs = model.forward(&graph, x);
    auto tl = total_loss(&graph, outputs, gt, cfg, model.arch().supervision, alpha);

    if (!std::isfinite(tl.breakdown.total)) {
      result.halt_reason = "non-finite loss at iteration " + std::to_string(iter);
      result.iterations_run = iter;
      return result;
    }

    model.params().zero_grads();
    graph.backward(tl.value);
    opt.step(lr, cfg.weight_decay);

    result.trace.push_back(TraceRow{iter, lr, tl.breakdown});
    if (checkpoint_cb && cfg.checkpoint_every > 0 &&
        ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.total_iters))
      checkpoint_cb(iter + 1, model);
  }
  result.completed = true;
  result.iterations_run = cfg.total_iters;
  return result;
}

// Append-only CSV: iter, lr, total, per-signal losses, alpha.
inline void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream f(path);
  check(f.good(), ErrorKind::Data, "trace: cannot write " + path);
  size_t n_stages = trace.empty() ? 4 : trace.front().loss.backbone.size();
  f << "iter,lr,total";
  for (size_t s = 0; s < n_stages; ++s) f << ",backbone" << s + 1;
  for (size_t s = 0; s < n_stages; ++s) f << ",refine" << s + 1;
  f << ",final,alpha\n";
  f << std::setprecision(10);
  for (const auto& row : trace) {
    f << row.iter << ',' << row.lr << ',' << row.loss.total;
    for (double v : row.loss.backbone) f << ',' << v;
    for (double v : row.loss.refine) f << ',' << v;
    f << ',' << row.loss.final_loss << ',' << row.loss.alpha << "\n";
  }
}

}  // namespace voxseg

#endif  // VOXSEG_TRAINER_HPP
