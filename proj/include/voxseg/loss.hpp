#ifndef VOXSEG_LOSS_HPP
#define VOXSEG_LOSS_HPP

#include "voxseg/network.hpp"
#include "voxseg/ops.hpp"
#include "voxseg/optim.hpp"

namespace voxseg {

template <typename T>
Tensor<T> wbce_loss(Graph<T>* g, const Tensor<T>& p, const Tensor<T>& target, double alpha) {
  return wbce(g, p, target, alpha);
}

// Per-mini-batch class weight: negative/positive voxel ratio, clamped.
// A batch without positives falls back to 1.
template <typename T>
double alpha_for_batch(const Tensor<T>& target, double clamp_min = 1.0,
                       double clamp_max = 100.0) {
  int64_t pos = 0;
  const T* gv = target.data();
  for (int64_t i = 0; i < target.numel(); ++i)
    if (gv[i] != T(0)) ++pos;
  if (pos == 0) return 1.0;
  const double ratio =
      static_cast<double>(target.numel() - pos) / static_cast<double>(pos);
  return std::min(std::max(ratio, clamp_min), clamp_max);
}

// One row of the loss trace: the total plus each supervised signal's own loss.
struct LossBreakdown {
  double total = 0.0;
  std::vector<double> backbone;   // per stage
  std::vector<double> refine;     // per stage (attention maps under SAM)
  double final_loss = 0.0;
  double alpha = 1.0;
};

// Weighted deep-supervision sum. Which j-signals enter depends on the
// strategy: refined-feature heads by default, gate maps under SAM. Signals a
// strategy excludes contribute zero terms but are still evaluated (off-tape)
// for the trace.
template <typename T>
struct TotalLoss {
  Tensor<T> value;
  LossBreakdown breakdown;
};

template <typename T>
TotalLoss<T> total_loss(Graph<T>* g, const ForwardOutputs<T>& outputs, const Tensor<T>& target,
                        const TrainConfig& cfg, SupervisionStrategy strategy, double alpha) {
  const size_t n_stages = outputs.backbone_probs.size();
  check(outputs.refine_probs.size() == n_stages, ErrorKind::Shape,
        "total_loss: backbone/refine stage counts differ");
  check(cfg.backbone_stage_weights.size() == n_stages, ErrorKind::Config,
        "total_loss: backbone weight list length " +
            std::to_string(cfg.backbone_stage_weights.size()) + " != n_stages " +
            std::to_string(n_stages));
  check(cfg.refine_stage_weights.size() == n_stages, ErrorKind::Config,
        "total_loss: refine weight list length " +
            std::to_string(cfg.refine_stage_weights.size()) + " != n_stages " +
            std::to_string(n_stages));

  const bool use_backbone = strategy != SupervisionStrategy::OutputOnly;
  const bool use_sam = strategy == SupervisionStrategy::BackbonePlusAttentionMap;
  const bool use_saf = strategy == SupervisionStrategy::BackbonePlusAttentiveFeature;

  TotalLoss<T> res;
  res.breakdown.alpha = alpha;
  Tensor<T> total;

  auto accumulate = [&](const Tensor<T>& signal, double weight, bool on_tape) -> double {
    Graph<T>* tape = on_tape ? g : nullptr;
    auto l = wbce(tape, signal, target, alpha);
    if (on_tape) {
      auto term = scale(tape, l, weight);
      total = total.defined() ? add(tape, total, term) : term;
    }
    return static_cast<double>(l.data()[0]);
  };

  res.breakdown.backbone.resize(n_stages, 0.0);
  res.breakdown.refine.resize(n_stages, 0.0);
  for (size_t s = 0; s < n_stages; ++s)
    res.breakdown.backbone[s] = accumulate(outputs.backbone_probs[s],
                                           cfg.backbone_stage_weights[s], use_backbone);
  for (size_t s = 0; s < n_stages; ++s) {
    if (use_sam && s < outputs.attention_maps.size()) {
      res.breakdown.refine[s] =
          accumulate(outputs.attention_maps[s], cfg.refine_stage_weights[s], true);
    } else {
      res.breakdown.refine[s] =
          accumulate(outputs.refine_probs[s], cfg.refine_stage_weights[s], use_saf);
    }
  }
  res.breakdown.final_loss = accumulate(outputs.final_prob, cfg.final_weight, true);
  res.value = total;
  res.breakdown.total = static_cast<double>(total.data()[0]);
  return res;
}

}  // namespace voxseg

#endif  // VOXSEG_LOSS_HPP
