#ifndef VOXSEG_OPTIM_HPP
#define VOXSEG_OPTIM_HPP

#include <cmath>
#include <vector>

#include "voxseg/params.hpp"

namespace voxseg {

struct TrainConfig {
  double lr0 = 1e-3;
  std::vector<int64_t> lr_drop_iters{3000, 4500};
  double lr_drop_factor = 0.1;
  int64_t total_iters = 6000;
  double weight_decay = 1e-4;
  int64_t batch_size = 4;
  int64_t patch_size = 64;
  std::vector<double> backbone_stage_weights{0.8, 0.7, 0.6, 0.5};
  std::vector<double> refine_stage_weights{0.8, 0.7, 0.6, 0.5};
  double final_weight = 1.0;
  double alpha_min = 1.0;
  double alpha_max = 100.0;
  bool augment_flips = true;
  bool augment_rotations = true;
  double foreground_bias = 0.5;  // fraction of patches centered on a foreground voxel
  uint64_t seed = 0;
  int64_t checkpoint_every = 1000;
  int64_t log_every = 1;

  void validate() const {
    check(lr0 > 0 && lr_drop_factor > 0, ErrorKind::Config, "train: learning rates must be positive");
    check(total_iters > 0, ErrorKind::Config, "train: total_iters must be positive");
    check(batch_size >= 1, ErrorKind::Config, "train: batch_size must be >= 1");
    check(final_weight > 0, ErrorKind::Config, "train: final weight must be positive");
    for (double w : backbone_stage_weights)
      check(w > 0, ErrorKind::Config, "train: stage weights must be positive");
    for (double w : refine_stage_weights)
      check(w > 0, ErrorKind::Config, "train: stage weights must be positive");
  }
};

// Piecewise-constant schedule: lr0 scaled by the drop factor once per passed
// drop iteration.
inline double lr_at(int64_t iter, const TrainConfig& cfg) {
  double lr = cfg.lr0;
  for (int64_t drop : cfg.lr_drop_iters)
    if (iter >= drop) lr *= cfg.lr_drop_factor;
  return lr;
}

// Classic Adam with bias correction; weight decay is coupled L2 added to the
// gradient before the moment updates.
template <typename T>
class Adam {
 public:
  explicit Adam(ParameterStore<T>& store, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : store_(&store), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& e : store.entries()) {
      if (!e.learnable) continue;
      m_.emplace_back(e.tensor.numel(), T(0));
      v_.emplace_back(e.tensor.numel(), T(0));
    }
  }

  int64_t step_count() const { return step_; }

  void step(double lr, double weight_decay) {
    // scan first so a non-finite gradient aborts before any mutation
    for (auto& e : store_->entries()) {
      if (!e.learnable) continue;
      if (!e.tensor.has_grad()) continue;
      for (T gv : e.tensor.grad_ref())
        check(std::isfinite(static_cast<double>(gv)), ErrorKind::Numeric,
              "adam: non-finite gradient in " + e.path);
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    size_t slot = 0;
    for (auto& e : store_->entries()) {
      if (!e.learnable) continue;
      std::vector<T>& m = m_[slot];
      std::vector<T>& v = v_[slot];
      ++slot;
      T* theta = e.tensor.data();
      const bool has_grad = e.tensor.has_grad();
      const T* grad = has_grad ? e.tensor.grad_ref().data() : nullptr;
      for (int64_t i = 0; i < e.tensor.numel(); ++i) {
        const double gv = (has_grad ? static_cast<double>(grad[i]) : 0.0) +
                          weight_decay * static_cast<double>(theta[i]);
        const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gv;
        const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gv * gv;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        theta[i] = static_cast<T>(static_cast<double>(theta[i]) -
                                  lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

 private:
  ParameterStore<T>* store_;
  double beta1_, beta2_, eps_;
  int64_t step_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace voxseg

#endif  // VOXSEG_OPTIM_HPP
