#ifndef VOXSEG_INFERENCE_HPP
#define VOXSEG_INFERENCE_HPP

#include <chrono>

#include "voxseg/network.hpp"
#include "voxseg/patches.hpp"

namespace voxseg {

struct InferenceResult {
  Volume<float> probability;
  Volume<uint8_t> mask;
  double seconds = 0.0;
};

// Sliding-window prediction: extract overlapping patches, run the model in
// eval mode on each, fuse by voxelwise mean, threshold.
inline InferenceResult predict_volume(Model<float>& model, const Volume<float>& image,
                                      int64_t patch_size = 64, int64_t stride = 32,
                                      double threshold = 0.5) {
  const auto t0 = std::chrono::steady_clock::now();
  model.set_mode(BNMode::Eval);
  auto [grid, patches] = extract_patches(image, patch_size, stride);
  std::vector<Tensor<float>> probs;
  probs.reserve(patches.size());
  for (const auto& p : patches) {
    auto out = model.forward(nullptr, p);
    probs.push_back(out.final_prob);
  }
  InferenceResult res;
  res.probability = fuse_predictions(grid, probs, image.dims, image.spacing);
  res.probability.affine = image.affine;
  res.mask = binarize(res.probability, threshold);
  res.mask.affine = image.affine;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace voxseg

#endif  // VOXSEG_INFERENCE_HPP
