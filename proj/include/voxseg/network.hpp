#ifndef VOXSEG_NETWORK_HPP
#define VOXSEG_NETWORK_HPP

#include <cmath>
#include <cstring>
#include <optional>
#include <random>
#include <string>

#include "voxseg/ops.hpp"
#include "voxseg/params.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

// Which signals contribute to the training loss (ablation rows of the
// supervision study).
enum class SupervisionStrategy {
  OutputOnly,
  BackbonePlusOutput,
  BackbonePlusAttentionMap,   // SAM: supervise the gate maps
  BackbonePlusAttentiveFeature,  // SAF: supervise the refined-feature heads (full model)
};

inline const char* to_string(SupervisionStrategy s) {
  switch (s) {
    case SupervisionStrategy::OutputOnly: return "output-only";
    case SupervisionStrategy::BackbonePlusOutput: return "backbone+output";
    case SupervisionStrategy::BackbonePlusAttentionMap: return "sam";
    case SupervisionStrategy::BackbonePlusAttentiveFeature: return "saf";
  }
  return "?";
}

inline SupervisionStrategy supervision_from_string(const std::string& s) {
  if (s == "output-only") return SupervisionStrategy::OutputOnly;
  if (s == "backbone+output") return SupervisionStrategy::BackbonePlusOutput;
  if (s == "sam") return SupervisionStrategy::BackbonePlusAttentionMap;
  if (s == "saf") return SupervisionStrategy::BackbonePlusAttentiveFeature;
  fail(ErrorKind::Config, "unknown supervision strategy '" + s +
                              "' (expected output-only | backbone+output | sam | saf)");
}

struct ModelConfig {
  std::vector<int64_t> encoder_channels{16, 32, 64, 128, 128};
  // Per supervised stage, stage 1 (highest resolution) first.
  std::vector<int64_t> decoder_channels{16, 16, 32, 64};
  int64_t stage_head_channels = 16;
  int64_t n_stages = 4;
  std::vector<int64_t> attention_kernel_sizes{3, 5, 7, 9};
  int64_t attention_group_width = 4;
  bool attention_enabled = true;
  // The second group-conv layer reuses the first layer's weights ("a second,
  // identical group of convolutional blocks").
  bool attention_share_layers = true;
  SupervisionStrategy supervision = SupervisionStrategy::BackbonePlusAttentiveFeature;
  double channel_scale = 1.0;
  // Escape hatch: concatenate backbone stage features into the final merge in
  // addition to the refined features.
  bool merge_include_backbone = false;

  // Test hooks for the gate laws: force A == constant and make the two branch
  // BNs identity maps.
  std::optional<double> attention_gate_override;
  bool attention_branch_bn_identity = false;

  // Validates the stated invariants, applies channel_scale, and re-derives the
  // group width for the scaled head. The result has channel_scale == 1 and is
  // what the model is actually built from.
  ModelConfig resolve() const {
    validate();
    ModelConfig r = *this;
    auto sc = [&](int64_t c) {
      return std::max<int64_t>(1, static_cast<int64_t>(std::llround(c * channel_scale)));
    };
    if (channel_scale != 1.0) {
      for (auto& c : r.encoder_channels) c = sc(c);
      for (auto& c : r.decoder_channels) c = sc(c);
      r.stage_head_channels = sc(stage_head_channels);
      r.channel_scale = 1.0;
    }
    const int64_t nk = static_cast<int64_t>(r.attention_kernel_sizes.size());
    check(r.stage_head_channels % nk == 0, ErrorKind::Config,
          "model: stage_head_channels " + std::to_string(r.stage_head_channels) +
              " not divisible into " + std::to_string(nk) + " kernel groups");
    r.attention_group_width = r.stage_head_channels / nk;
    r.validate();
    return r;
  }

  void validate() const {
    check(!encoder_channels.empty(), ErrorKind::Config, "model: encoder_channels empty");
    check(n_stages >= 1 &&
              n_stages <= static_cast<int64_t>(encoder_channels.size()) - 1,
          ErrorKind::Config,
          "model: n_stages " + std::to_string(n_stages) + " must be in [1, " +
              std::to_string(encoder_channels.size() - 1) + "]");
    check(static_cast<int64_t>(decoder_channels.size()) == n_stages, ErrorKind::Config,
          "model: decoder_channels must list one width per stage");
    check(!attention_kernel_sizes.empty(), ErrorKind::Config,
          "model: attention_kernel_sizes must be nonempty");
    check(attention_group_width * static_cast<int64_t>(attention_kernel_sizes.size()) ==
              stage_head_channels,
          ErrorKind::Config,
          "model: attention_group_width * n_kernels != stage_head_channels (" +
              std::to_string(attention_group_width) + " * " +
              std::to_string(attention_kernel_sizes.size()) +
              " != " + std::to_string(stage_head_channels) + ")");
    for (int64_t k : attention_kernel_sizes)
      check(k % 2 == 1 && k >= 1 && k <= 9, ErrorKind::Config,
            "model: attention kernel " + std::to_string(k) + " must be odd and <= 9");
  }
};

template <typename T>
struct ForwardOutputs {
  Tensor<T> final_prob;
  std::vector<Tensor<T>> backbone_probs;
  std::vector<Tensor<T>> refine_probs;
  std::vector<Tensor<T>> attention_maps;  // empty when attention is disabled

  int64_t supervised_signal_count() const {
    return 1 + static_cast<int64_t>(backbone_probs.size()) +
           static_cast<int64_t>(refine_probs.size());
  }
};

namespace nn {

// Conv3-BN-PReLU-Conv3-BN-PReLU with a shortcut; a learned 1x1x1 projection
// aligns the shortcut when channel counts differ.
template <typename T>
struct ResidualBlock {
  ConvParams<T> conv1, conv2;
  BNParams<T> bn1, bn2;
  PReLUParams<T> act1, act2;
  bool has_proj = false;
  ConvParams<T> proj;
  BNParams<T> proj_bn;

  Tensor<T> forward(Graph<T>* g, const Tensor<T>& x) {
    auto b = prelu(g, batch_norm3d(g, conv3d(g, x, conv1), bn1), act1);
    b = prelu(g, batch_norm3d(g, conv3d(g, b, conv2), bn2), act2);
    auto s = has_proj ? batch_norm3d(g, conv3d(g, x, proj), proj_bn) : x;
    return add(g, s, b);
  }
};

template <typename T>
struct ConvBNPReLU {
  ConvParams<T> conv;
  BNParams<T> bn;
  PReLUParams<T> act;

  Tensor<T> forward(Graph<T>* g, const Tensor<T>& x) {
    return prelu(g, batch_norm3d(g, conv3d(g, x, conv), bn), act);
  }
};

// Mixed-kernel group convolution: the input channels are split into one group
// per kernel size; each group runs Conv-BN-PReLU with its own kernel and the
// outputs are concatenated back to the input width.
template <typename T>
struct GroupConvLayer {
  std::vector<ConvBNPReLU<T>> branches;
  int64_t group_width = 0;

  Tensor<T> forward(Graph<T>* g, const Tensor<T>& x) {
    std::vector<Tensor<T>> parts;
    parts.reserve(branches.size());
    for (size_t j = 0; j < branches.size(); ++j) {
      auto part = slice_channels(g, x, static_cast<int64_t>(j) * group_width,
                                 static_cast<int64_t>(j + 1) * group_width);
      parts.push_back(branches[j].forward(g, part));
    }
    return concat_channels(g, parts);
  }
};

// Stage-wise attention refinement: F' = A (x) F + F with A = sigmoid of the
// mixed-kernel tower, and BN on both branches before the addition.
template <typename T>
struct AttentionModule {
  GroupConvLayer<T> layer1;
  GroupConvLayer<T> layer2;  // unused when share_layers
  ConvParams<T> gate;
  BNParams<T> gated_bn, skip_bn;
  bool share_layers = true;
  std::optional<double> gate_override;
  bool branch_bn_identity = false;

  std::pair<Tensor<T>, Tensor<T>> forward(Graph<T>* g, const Tensor<T>& f) {
    Tensor<T> attn_map;
    if (gate_override.has_value()) {
      attn_map = Tensor<T>::full({f.dim(0), 1, f.dim(2), f.dim(3), f.dim(4)},
                                 static_cast<T>(*gate_override));
    } else {
      auto h = layer1.forward(g, f);
      h = (share_layers ? layer1 : layer2).forward(g, h);
      attn_map = sigmoid(g, conv3d(g, h, gate));
    }
    auto gated = mul(g, expand_channels(g, attn_map, f.dim(1)), f);
    if (!branch_bn_identity) {
      gated = batch_norm3d(g, gated, gated_bn);
      auto skip = batch_norm3d(g, f, skip_bn);
      return {add(g, gated, skip), attn_map};
    }
    return {add(g, gated, f), attn_map};
  }
};

}  // namespace nn

// The full architecture: residual encoder-decoder backbone, per-stage 1x1x1
// heads to a common width, stage-wise attention refinement, deep-supervision
// heads on both feature sets, and a final merge over the refined features.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, uint64_t seed)
      : base_config_(config), arch_(config.resolve()), seed_(seed) {
    build();
    init_params(seed);
  }

  const ModelConfig& config() const { return base_config_; }
  const ModelConfig& arch() const { return arch_; }
  uint64_t seed() const { return seed_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  int64_t param_count() const { return store_.param_count(); }
  int64_t attention_param_count() const { return store_.param_count_prefix("attention."); }

  void set_mode(BNMode mode) {
    for (BNParams<T>* p : bn_list_) p->mode = mode;
  }

  // Encoder-decoder pass producing one full-resolution feature map of
  // stage_head_channels per supervised stage, stage 1 (highest res) first.
  std::vector<Tensor<T>> backbone_forward(Graph<T>* g, const Tensor<T>& x) {
    check(x.defined() && x.ndim() == 5 && x.dim(1) == 1, ErrorKind::Shape,
          "model: input must be (N,1,D,H,W), got " +
              (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
    const int64_t levels = static_cast<int64_t>(arch_.encoder_channels.size());
    const int64_t div = int64_t(1) << (levels - 1);
    for (int a = 2; a <= 4; ++a)
      check(x.dim(a) % div == 0, ErrorKind::Shape,
            "model: spatial dim " + std::to_string(x.dim(a)) + " (axis " + std::to_string(a) +
                ") not divisible by " + std::to_string(div));

    const std::array<int64_t, 3> full_size = {x.dim(2), x.dim(3), x.dim(4)};
    const int64_t n_stages = arch_.n_stages;

    std::vector<Tensor<T>> enc_feats;
    Tensor<T> cur = x;
    for (int64_t i = 0; i < levels; ++i) {
      if (i > 0) cur = maxpool2(g, cur);
      cur = encoder_[i].forward(g, cur);
      enc_feats.push_back(cur);
    }

    std::vector<Tensor<T>> stage_feats(n_stages);
    Tensor<T> d = enc_feats.back();
    for (int64_t s = n_stages - 1; s >= 0; --s) {
      const Tensor<T>& skip = enc_feats[s];
      d = upsample_trilinear(g, d, {skip.dim(2), skip.dim(3), skip.dim(4)});
      d = decoder_[s].forward(g, concat_channels(g, {d, skip}));
      auto f = conv3d(g, d, stage_head_[s]);
      if (f.dim(2) != full_size[0] || f.dim(3) != full_size[1] || f.dim(4) != full_size[2])
        f = upsample_trilinear(g, f, full_size);
      stage_feats[s] = f;
    }
    return stage_feats;
  }

  // Attention refinement of one stage's feature map: returns (F', A).
  std::pair<Tensor<T>, Tensor<T>> attention_refine(Graph<T>* g, int64_t stage,
                                                   const Tensor<T>& f) {
    check(arch_.attention_enabled, ErrorKind::Config, "model: attention is disabled");
    return attention_.at(static_cast<size_t>(stage)).forward(g, f);
  }

  ForwardOutputs<T> forward(Graph<T>* g, const Tensor<T>& x) {
    std::vector<Tensor<T>> stage_feats = backbone_forward(g, x);
    const int64_t n_stages = arch_.n_stages;
    ForwardOutputs<T> out;
    out.backbone_probs.resize(n_stages);
    out.refine_probs.resize(n_stages);
    std::vector<Tensor<T>> refined(n_stages);
    for (int64_t s = 0; s < n_stages; ++s) {
      out.backbone_probs[s] = sigmoid(g, conv3d(g, stage_feats[s], backbone_sup_[s]));
      if (arch_.attention_enabled) {
        auto [r, a] = attention_[s].forward(g, stage_feats[s]);
        refined[s] = r;
        out.attention_maps.push_back(a);
      } else {
        refined[s] = stage_feats[s];
      }
      out.refine_probs[s] = sigmoid(g, conv3d(g, refined[s], refine_sup_[s]));
    }

    std::vector<Tensor<T>> merge_in = refined;
    if (arch_.merge_include_backbone)
      merge_in.insert(merge_in.end(), stage_feats.begin(), stage_feats.end());
    auto m = merge1_.forward(g, concat_channels(g, merge_in));
    m = merge2_.forward(g, m);
    out.final_prob = sigmoid(g, conv3d(g, m, merge_head_));
    return out;
  }

 private:
  Tensor<T>& add_param(const std::string& path, Shape shape, bool learnable = true) {
    return store_.add(path, Tensor<T>::zeros(std::move(shape)), learnable);
  }

  ConvParams<T> make_conv(const std::string& path, int64_t co, int64_t ci, int64_t k,
                          bool with_bias = true) {
    ConvParams<T> p;
    p.weight = add_param(path + ".weight", {co, ci, k, k, k});
    if (with_bias) p.bias = add_param(path + ".bias", {co});
    return p;
  }

  BNParams<T> make_bn(const std::string& path, int64_t c) {
    BNParams<T> p;
    p.gamma = add_param(path + ".gamma", {c});
    p.beta = add_param(path + ".beta", {c});
    p.running_mean = add_param(path + ".running_mean", {c}, false);
    p.running_var = add_param(path + ".running_var", {c}, false);
    p.tracked = add_param(path + ".tracked", {1}, false);
    return p;
  }

  PReLUParams<T> make_prelu(const std::string& path, int64_t c) {
    return PReLUParams<T>{add_param(path + ".slope", {c})};
  }

  nn::ResidualBlock<T> make_res_block(const std::string& path, int64_t ci, int64_t co) {
    nn::ResidualBlock<T> b;
    b.conv1 = make_conv(path + ".conv1", co, ci, 3, false);
    b.bn1 = make_bn(path + ".bn1", co);
    b.act1 = make_prelu(path + ".prelu1", co);
    b.conv2 = make_conv(path + ".conv2", co, co, 3, false);
    b.bn2 = make_bn(path + ".bn2", co);
    b.act2 = make_prelu(path + ".prelu2", co);
    if (ci != co) {
      b.has_proj = true;
      b.proj = make_conv(path + ".proj", co, ci, 1, false);
      b.proj_bn = make_bn(path + ".proj_bn", co);
    }
    return b;
  }

  nn::ConvBNPReLU<T> make_cbp(const std::string& path, int64_t ci, int64_t co, int64_t k) {
    nn::ConvBNPReLU<T> u;
    u.conv = make_conv(path + ".conv", co, ci, k, false);
    u.bn = make_bn(path + ".bn", co);
    u.act = make_prelu(path + ".prelu", co);
    return u;
  }

  nn::GroupConvLayer<T> make_group_layer(const std::string& path) {
    nn::GroupConvLayer<T> layer;
    layer.group_width = arch_.attention_group_width;
    for (size_t j = 0; j < arch_.attention_kernel_sizes.size(); ++j)
      layer.branches.push_back(make_cbp(path + ".branch" + std::to_string(j),
                                        arch_.attention_group_width,
                                        arch_.attention_group_width,
                                        arch_.attention_kernel_sizes[j]));
    return layer;
  }

  void build() {
    const auto& enc = arch_.encoder_channels;
    const auto& dec = arch_.decoder_channels;
    const int64_t head = arch_.stage_head_channels;
    const int64_t levels = static_cast<int64_t>(enc.size());

    for (int64_t i = 0; i < levels; ++i)
      encoder_.push_back(make_res_block("encoder." + std::to_string(i),
                                        i == 0 ? 1 : enc[i - 1], enc[i]));

    decoder_.resize(arch_.n_stages);
    for (int64_t s = arch_.n_stages - 1; s >= 0; --s) {
      const int64_t above = (s == arch_.n_stages - 1) ? enc[levels - 1] : dec[s + 1];
      decoder_[s] = make_res_block("decoder." + std::to_string(s), above + enc[s], dec[s]);
    }

    for (int64_t s = 0; s < arch_.n_stages; ++s) {
      const std::string si = std::to_string(s);
      stage_head_.push_back(make_conv("stage_head." + si, head, dec[s], 1));
      backbone_sup_.push_back(make_conv("backbone_sup." + si, 1, head, 1));
      refine_sup_.push_back(make_conv("refine_sup." + si, 1, head, 1));
      if (arch_.attention_enabled) {
        nn::AttentionModule<T> att;
        att.share_layers = arch_.attention_share_layers;
        att.gate_override = arch_.attention_gate_override;
        att.branch_bn_identity = arch_.attention_branch_bn_identity;
        att.layer1 = make_group_layer("attention." + si + ".layer1");
        if (!att.share_layers) att.layer2 = make_group_layer("attention." + si + ".layer2");
        att.gate = make_conv("attention." + si + ".gate", 1, head, 1);
        att.gated_bn = make_bn("attention." + si + ".gated_bn", head);
        att.skip_bn = make_bn("attention." + si + ".skip_bn", head);
        attention_.push_back(std::move(att));
      }
    }

    const int64_t merge_in =
        arch_.n_stages * head * (arch_.merge_include_backbone ? 2 : 1);
    merge1_ = make_cbp("merge.block1", merge_in, head, 3);
    merge2_ = make_cbp("merge.block2", head, head, 3);
    merge_head_ = make_conv("merge.head", 1, head, 1);

    collect_bn();
  }

  void collect_bn() {
    auto add_block = [&](nn::ResidualBlock<T>& b) {
      bn_list_.push_back(&b.bn1);
      bn_list_.push_back(&b.bn2);
      if (b.has_proj) bn_list_.push_back(&b.proj_bn);
    };
    for (auto& b : encoder_) add_block(b);
    for (auto& b : decoder_) add_block(b);
    for (auto& a : attention_) {
      for (auto& br : a.layer1.branches) bn_list_.push_back(&br.bn);
      for (auto& br : a.layer2.branches) bn_list_.push_back(&br.bn);
      bn_list_.push_back(&a.gated_bn);
      bn_list_.push_back(&a.skip_bn);
    }
    bn_list_.push_back(&merge1_.bn);
    bn_list_.push_back(&merge2_.bn);
  }

  void init_params(uint64_t seed) {
    auto rng = make_rng(seed, RngStream::ParamInit);
    std::normal_distribution<double> normal(0.0, 1.0);
    constexpr double kSlope = 0.25;
    for (auto& e : store_.entries()) {
      if (!e.learnable) {
        // identity running stats until the first train-mode pass
        if (e.path.size() >= 12 &&
            e.path.compare(e.path.size() - 12, 12, ".running_var") == 0)
          std::fill(e.tensor.values().begin(), e.tensor.values().end(), T(1));
        continue;
      }
      const std::string& p = e.path;
      auto ends_with = [&](const char* suffix) {
        const size_t len = std::strlen(suffix);
        return p.size() >= len && p.compare(p.size() - len, len, suffix) == 0;
      };
      if (ends_with(".weight") && e.tensor.ndim() == 5) {
        const int64_t fan_in = e.tensor.dim(1) * e.tensor.dim(2) * e.tensor.dim(3) *
                               e.tensor.dim(4);
        const double std_dev = std::sqrt(2.0 / ((1.0 + kSlope * kSlope) * fan_in));
        for (auto& v : e.tensor.values()) v = static_cast<T>(normal(rng) * std_dev);
      } else if (ends_with(".gamma")) {
        std::fill(e.tensor.values().begin(), e.tensor.values().end(), T(1));
      } else if (ends_with(".slope")) {
        std::fill(e.tensor.values().begin(), e.tensor.values().end(), static_cast<T>(kSlope));
      }
      // biases and betas stay zero
    }
  }

  ModelConfig base_config_;
  ModelConfig arch_;
  uint64_t seed_;
  ParameterStore<T> store_;
  std::vector<nn::ResidualBlock<T>> encoder_;
  std::vector<nn::ResidualBlock<T>> decoder_;
  std::vector<ConvParams<T>> stage_head_;
  std::vector<ConvParams<T>> backbone_sup_;
  std::vector<ConvParams<T>> refine_sup_;
  std::vector<nn::AttentionModule<T>> attention_;
  nn::ConvBNPReLU<T> merge1_, merge2_;
  ConvParams<T> merge_head_;
  std::vector<BNParams<T>*> bn_list_;
};

}  // namespace voxseg

#endif  // VOXSEG_NETWORK_HPP
