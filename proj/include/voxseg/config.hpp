#ifndef VOXSEG_CONFIG_HPP
#define VOXSEG_CONFIG_HPP

#include <fstream>
#include <string>

#include <json.hpp>

#include "voxseg/network.hpp"
#include "voxseg/optim.hpp"
#include "voxseg/phantom.hpp"

namespace voxseg {

using json = nlohmann::json;

namespace cfgdetail {

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace cfgdetail

inline json to_json(const ModelConfig& c) {
  json j;
  j["encoder_channels"] = c.encoder_channels;
  j["decoder_channels"] = c.decoder_channels;
  j["stage_head_channels"] = c.stage_head_channels;
  j["n_stages"] = c.n_stages;
  j["attention_kernel_sizes"] = c.attention_kernel_sizes;
  j["attention_group_width"] = c.attention_group_width;
  j["attention_enabled"] = c.attention_enabled;
  j["attention_share_layers"] = c.attention_share_layers;
  j["supervision"] = to_string(c.supervision);
  j["channel_scale"] = c.channel_scale;
  j["merge_include_backbone"] = c.merge_include_backbone;
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  cfgdetail::get_if(j, "encoder_channels", c.encoder_channels);
  cfgdetail::get_if(j, "decoder_channels", c.decoder_channels);
  cfgdetail::get_if(j, "stage_head_channels", c.stage_head_channels);
  cfgdetail::get_if(j, "n_stages", c.n_stages);
  cfgdetail::get_if(j, "attention_kernel_sizes", c.attention_kernel_sizes);
  cfgdetail::get_if(j, "attention_group_width", c.attention_group_width);
  cfgdetail::get_if(j, "attention_enabled", c.attention_enabled);
  cfgdetail::get_if(j, "attention_share_layers", c.attention_share_layers);
  if (j.contains("supervision"))
    c.supervision = supervision_from_string(j.at("supervision").get<std::string>());
  cfgdetail::get_if(j, "channel_scale", c.channel_scale);
  cfgdetail::get_if(j, "merge_include_backbone", c.merge_include_backbone);
  return c;
}

inline json to_json(const TrainConfig& c) {
  json j;
  j["lr0"] = c.lr0;
  j["lr_drop_iters"] = c.lr_drop_iters;
  j["lr_drop_factor"] = c.lr_drop_factor;
  j["total_iters"] = c.total_iters;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["patch_size"] = c.patch_size;
  j["backbone_stage_weights"] = c.backbone_stage_weights;
  j["refine_stage_weights"] = c.refine_stage_weights;
  j["final_weight"] = c.final_weight;
  j["alpha_min"] = c.alpha_min;
  j["alpha_max"] = c.alpha_max;
  j["augment_flips"] = c.augment_flips;
  j["augment_rotations"] = c.augment_rotations;
  j["foreground_bias"] = c.foreground_bias;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  cfgdetail::get_if(j, "lr0", c.lr0);
  cfgdetail::get_if(j, "lr_drop_iters", c.lr_drop_iters);
  cfgdetail::get_if(j, "lr_drop_factor", c.lr_drop_factor);
  cfgdetail::get_if(j, "total_iters", c.total_iters);
  cfgdetail::get_if(j, "weight_decay", c.weight_decay);
  cfgdetail::get_if(j, "batch_size", c.batch_size);
  cfgdetail::get_if(j, "patch_size", c.patch_size);
  cfgdetail::get_if(j, "backbone_stage_weights", c.backbone_stage_weights);
  cfgdetail::get_if(j, "refine_stage_weights", c.refine_stage_weights);
  cfgdetail::get_if(j, "final_weight", c.final_weight);
  cfgdetail::get_if(j, "alpha_min", c.alpha_min);
  cfgdetail::get_if(j, "alpha_max", c.alpha_max);
  cfgdetail::get_if(j, "augment_flips", c.augment_flips);
  cfgdetail::get_if(j, "augment_rotations", c.augment_rotations);
  cfgdetail::get_if(j, "foreground_bias", c.foreground_bias);
  cfgdetail::get_if(j, "seed", c.seed);
  cfgdetail::get_if(j, "checkpoint_every", c.checkpoint_every);
  return c;
}

inline json to_json(const PhantomSpec& s) {
  json j;
  j["dims"] = s.dims;
  j["spacing"] = s.spacing;
  if (s.center_mm) j["center_mm"] = *s.center_mm;
  j["radius_mm"] = s.radius_mm;
  j["thickness_mm"] = s.thickness_mm;
  j["fold_amplitude_mm"] = s.fold_amplitude_mm;
  j["fold_frequency"] = s.fold_frequency;
  j["mean_inside"] = s.mean_inside;
  j["std_inside"] = s.std_inside;
  j["mean_shell"] = s.mean_shell;
  j["std_shell"] = s.std_shell;
  j["mean_outside"] = s.mean_outside;
  j["std_outside"] = s.std_outside;
  j["blur_sigma_mm"] = s.blur_sigma_mm;
  j["noise_std"] = s.noise_std;
  j["seed"] = s.seed;
  return j;
}

inline PhantomSpec phantom_spec_from_json(const json& j) {
  PhantomSpec s;
  cfgdetail::get_if(j, "dims", s.dims);
  cfgdetail::get_if(j, "spacing", s.spacing);
  if (j.contains("center_mm")) s.center_mm = j.at("center_mm").get<std::array<double, 3>>();
  cfgdetail::get_if(j, "radius_mm", s.radius_mm);
  cfgdetail::get_if(j, "thickness_mm", s.thickness_mm);
  cfgdetail::get_if(j, "fold_amplitude_mm", s.fold_amplitude_mm);
  cfgdetail::get_if(j, "fold_frequency", s.fold_frequency);
  cfgdetail::get_if(j, "mean_inside", s.mean_inside);
  cfgdetail::get_if(j, "std_inside", s.std_inside);
  cfgdetail::get_if(j, "mean_shell", s.mean_shell);
  cfgdetail::get_if(j, "std_shell", s.std_shell);
  cfgdetail::get_if(j, "mean_outside", s.mean_outside);
  cfgdetail::get_if(j, "std_outside", s.std_outside);
  cfgdetail::get_if(j, "blur_sigma_mm", s.blur_sigma_mm);
  cfgdetail::get_if(j, "noise_std", s.noise_std);
  cfgdetail::get_if(j, "seed", s.seed);
  return s;
}

// Dataset generation settings for the phantom command.
struct DataConfig {
  PhantomSpec phantom;
  int64_t n_train = 20;
  int64_t n_test = 5;
  // Inference-time patching
  int64_t patch_size = 64;
  int64_t stride = 32;
  double threshold = 0.5;
};

inline json to_json(const DataConfig& c) {
  json j;
  j["phantom"] = to_json(c.phantom);
  j["n_train"] = c.n_train;
  j["n_test"] = c.n_test;
  j["patch_size"] = c.patch_size;
  j["stride"] = c.stride;
  j["threshold"] = c.threshold;
  return j;
}

inline DataConfig data_config_from_json(const json& j) {
  DataConfig c;
  if (j.contains("phantom")) c.phantom = phantom_spec_from_json(j.at("phantom"));
  cfgdetail::get_if(j, "n_train", c.n_train);
  cfgdetail::get_if(j, "n_test", c.n_test);
  cfgdetail::get_if(j, "patch_size", c.patch_size);
  cfgdetail::get_if(j, "stride", c.stride);
  cfgdetail::get_if(j, "threshold", c.threshold);
  return c;
}

struct MetricsConfig {
  bool symmetric_asd = true;
  bool error_maps = false;
};

inline json to_json(const MetricsConfig& c) {
  json j;
  j["symmetric_asd"] = c.symmetric_asd;
  j["error_maps"] = c.error_maps;
  return j;
}

inline MetricsConfig metrics_config_from_json(const json& j) {
  MetricsConfig c;
  cfgdetail::get_if(j, "symmetric_asd", c.symmetric_asd);
  cfgdetail::get_if(j, "error_maps", c.error_maps);
  return c;
}

// Unified run configuration: model + train + data + metrics sections. Every
// command writes the resolved config next to its outputs.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  MetricsConfig metrics;
  uint64_t seed = 0;

  json to_json() const {
    json j;
    j["model"] = voxseg::to_json(model);
    j["train"] = voxseg::to_json(train);
    j["data"] = voxseg::to_json(data);
    j["metrics"] = voxseg::to_json(metrics);
    j["seed"] = seed;
    return j;
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
    if (j.contains("metrics")) c.metrics = metrics_config_from_json(j.at("metrics"));
    cfgdetail::get_if(j, "seed", c.seed);
    return c;
  }
};

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), ErrorKind::Config, "config: cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    fail(ErrorKind::Config, "config: " + path + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

inline void save_json(const json& j, const std::string& path) {
  std::ofstream f(path);
  check(f.good(), ErrorKind::Data, "cannot write " + path);
  f << j.dump(2) << "\n";
}

}  // namespace voxseg

#endif  // VOXSEG_CONFIG_HPP
