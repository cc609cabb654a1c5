#pragma once

// Model assembly: CSP-style backbone with four feature taps, the
// multi-scale detection head (whose Conv Set outputs also feed
// segmentation), the chained-residual-pooling segmentation decoder, and
// the PAF/heatmap pose head. Which heads exist follows spec.task_mask;
// the backbone is always complete and task-agnostic.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mdsp/netspec.hpp"
#include "mdsp/nn.hpp"
#include "mdsp/tensor.hpp"

namespace mdsp {

template <typename T>
struct FeaturePyramid {
  Tensor<T> c_early;  // stride 4
  Tensor<T> c3;       // stride 8
  Tensor<T> c4;       // stride 16
  Tensor<T> c5;       // stride 32
};

// Raw per-scale prediction tensors, coarse (stride 32) to fine (stride 8).
// Channel layout per anchor slot a: [obj, tx, ty, tw, th, class logits...].
template <typename T>
struct RawDetectOutput {
  std::array<Tensor<T>, 3> scales;
};

template <typename T>
struct PoseRawOutput {
  std::vector<Tensor<T>> pafs;  // one per PAF stage, each (batch, 2L, H/8, W/8)
  Tensor<T> heatmaps;           // (batch, K+1, H/8, W/8); last channel background
};

template <typename T>
struct NetworkOutput {
  FeaturePyramid<T> pyramid;
  std::array<Tensor<T>, 3> convset_taps;  // defined when detect or segment is built
  std::optional<RawDetectOutput<T>> detect;
  std::optional<Tensor<T>> seg_logits;  // (batch, num_seg_classes, H, W)
  std::optional<PoseRawOutput<T>> pose;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

// Split-transform-merge block: two 1x1 branches at half width, one of them
// through a residual pair, merged by concat and a 1x1 transition.
template <typename T>
struct CspBlock {
  ConvBnAct<T> split_a, split_b, res_a, res_b, merge;

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> a = split_a.forward(x, training);
    Tensor<T> b = split_b.forward(x, training);
    Tensor<T> r = res_a.forward(b, training);
    r = res_b.forward(r, training);
    b = add(b, r);
    return merge.forward(concat_channels<T>({a, b}), training);
  }
};

template <typename T>
CspBlock<T> make_csp(ParamStore<T>& store, const std::string& name, int c, ParamGroup g, Rng& rng) {
  const int h = std::max(1, c / 2);
  CspBlock<T> blk;
  blk.split_a = make_conv_bn(store, name + ".split_a", c, h, 1, 1, 0, g, rng);
  blk.split_b = make_conv_bn(store, name + ".split_b", c, h, 1, 1, 0, g, rng);
  blk.res_a = make_conv_bn(store, name + ".res_a", h, h, 1, 1, 0, g, rng);
  blk.res_b = make_conv_bn(store, name + ".res_b", h, h, 3, 1, 1, g, rng);
  blk.merge = make_conv_bn(store, name + ".merge", 2 * h, c, 1, 1, 0, g, rng);
  return blk;
}

template <typename T>
struct Backbone {
  ConvBnAct<T> stem;
  std::array<ConvBnAct<T>, 5> down;
  std::array<CspBlock<T>, 5> block;

  FeaturePyramid<T> forward(const Tensor<T>& image, bool training) {
    Tensor<T> x = stem.forward(image, training);
    FeaturePyramid<T> pyr;
    for (int s = 0; s < 5; ++s) {
      x = down[static_cast<size_t>(s)].forward(x, training);
      x = block[static_cast<size_t>(s)].forward(x, training);
      if (s == 1) pyr.c_early = x;
      if (s == 2) pyr.c3 = x;
      if (s == 3) pyr.c4 = x;
      if (s == 4) pyr.c5 = x;
    }
    return pyr;
  }
};

template <typename T>
Backbone<T> make_backbone(ParamStore<T>& store, const NetworkSpec& spec, Rng& rng) {
  Backbone<T> b;
  const ParamGroup g = ParamGroup::backbone;
  const std::array<int, 6> widths = {spec.ch(16), spec.ch(32), spec.ch(64),
                                     spec.ch(128), spec.ch(256), spec.ch(512)};
  b.stem = make_conv_bn(store, "backbone.stem", 3, widths[0], 3, 1, 1, g, rng);
  for (int s = 0; s < 5; ++s) {
    const std::string base = "backbone.stage" + std::to_string(s + 1);
    b.down[static_cast<size_t>(s)] = make_conv_bn(store, base + ".down", widths[static_cast<size_t>(s)],
                                                  widths[static_cast<size_t>(s) + 1], 3, 2, 1, g, rng);
    b.block[static_cast<size_t>(s)] =
        make_csp(store, base + ".csp", widths[static_cast<size_t>(s) + 1], g, rng);
  }
  return b;
}

// ---------------------------------------------------------------------------
// detection head
// ---------------------------------------------------------------------------

// Five conv layers: three 1x1 that step the depth down, two 3x3 that step
// it back up, each with batchnorm and ReLU. in -> out, 3x3 layers at 2*out.
template <typename T>
struct ConvSet {
  std::array<ConvBnAct<T>, 5> layers;

  Tensor<T> forward(Tensor<T> x, bool training) {
    for (auto& l : layers) x = l.forward(x, training);
    return x;
  }
};

template <typename T>
ConvSet<T> make_convset(ParamStore<T>& store, const std::string& name, int cin, int cout,
                        ParamGroup g, Rng& rng) {
  ConvSet<T> cs;
  const int mid = 2 * cout;
  cs.layers[0] = make_conv_bn(store, name + ".l0", cin, cout, 1, 1, 0, g, rng);
  cs.layers[1] = make_conv_bn(store, name + ".l1", cout, mid, 3, 1, 1, g, rng);
  cs.layers[2] = make_conv_bn(store, name + ".l2", mid, cout, 1, 1, 0, g, rng);
  cs.layers[3] = make_conv_bn(store, name + ".l3", cout, mid, 3, 1, 1, g, rng);
  cs.layers[4] = make_conv_bn(store, name + ".l4", mid, cout, 1, 1, 0, g, rng);
  return cs;
}

// Conv Sets and route convs (always built when detect or segment is on)
// plus the per-scale 1x1 prediction layers (only when detect is on).
template <typename T>
struct DetectHead {
  std::array<ConvSet<T>, 3> convsets;      // coarse to fine
  std::array<ConvBnAct<T>, 2> routes;      // pre-upsample 1x1 reductions
  std::array<Conv2dLayer<T>, 3> preds;     // raw logits, bias, no bn/act
  bool has_preds = false;

  // Returns the three Conv Set outputs (coarse to fine); fills `raw` with
  // prediction tensors when the prediction layers exist.
  std::array<Tensor<T>, 3> forward(const FeaturePyramid<T>& pyr, bool training,
                                   std::optional<RawDetectOutput<T>>& raw) {
    std::array<Tensor<T>, 3> taps;
    taps[0] = convsets[0].forward(pyr.c5, training);
    Tensor<T> r1 = upsample_nearest(routes[0].forward(taps[0], training), 2);
    taps[1] = convsets[1].forward(concat_channels<T>({r1, pyr.c4}), training);
    Tensor<T> r2 = upsample_nearest(routes[1].forward(taps[1], training), 2);
    taps[2] = convsets[2].forward(concat_channels<T>({r2, pyr.c3}), training);
    if (has_preds) {
      RawDetectOutput<T> out;
      for (int s = 0; s < 3; ++s) out.scales[static_cast<size_t>(s)] = preds[static_cast<size_t>(s)].forward(taps[static_cast<size_t>(s)]);
      raw = std::move(out);
    }
    return taps;
  }
};

// Conv Set output widths: half the backbone tap channels at each scale.
template <typename T>
DetectHead<T> make_detect_head(ParamStore<T>& store, const NetworkSpec& spec, bool with_preds,
                               Rng& rng_shared, Rng& rng_pred) {
  DetectHead<T> h;
  const int c3 = spec.ch(128), c4 = spec.ch(256), c5 = spec.ch(512);
  const int o1 = std::max(1, c5 / 2), o2 = std::max(1, c4 / 2), o3 = std::max(1, c3 / 2);
  const int r1 = std::max(1, o1 / 2), r2 = std::max(1, o2 / 2);
  const ParamGroup gs = ParamGroup::detect_shared;
  h.convsets[0] = make_convset(store, "detect.cs1", c5, o1, gs, rng_shared);
  h.routes[0] = make_conv_bn(store, "detect.route1", o1, r1, 1, 1, 0, gs, rng_shared);
  h.convsets[1] = make_convset(store, "detect.cs2", r1 + c4, o2, gs, rng_shared);
  h.routes[1] = make_conv_bn(store, "detect.route2", o2, r2, 1, 1, 0, gs, rng_shared);
  h.convsets[2] = make_convset(store, "detect.cs3", r2 + c3, o3, gs, rng_shared);
  if (with_preds) {
    const int depth = spec.det_depth();
    const std::array<int, 3> widths = {o1, o2, o3};
    for (int s = 0; s < 3; ++s) {
      h.preds[static_cast<size_t>(s)] =
          make_conv(store, "detect.pred" + std::to_string(s + 1), widths[static_cast<size_t>(s)], depth, 1,
                    1, 0, /*bias=*/true, ParamGroup::detect_pred, rng_pred);
    }
    h.has_preds = true;
  }
  return h;
}

// ---------------------------------------------------------------------------
// segmentation head
// ---------------------------------------------------------------------------

// Chained residual pooling: four {5x5 max-pool stride 1, 1x1 conv} pairs on
// a running pooled chain; output is the block input plus every conv output.
template <typename T>
struct CrpBlock {
  std::array<Conv2dLayer<T>, 4> convs;

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> out = x;
    Tensor<T> chain = x;
    for (const auto& c : convs) {
      chain = maxpool2d(chain, 5, 1, 2);
      out = add(out, c.forward(chain));
    }
    return out;
  }
};

// The chain convs start at zero so the block is an identity at first: the
// unnormalized sums would otherwise amplify activation variance ninefold
// per block and leave the decoder with unusably large logits.
template <typename T>
CrpBlock<T> make_crp(ParamStore<T>& store, const std::string& name, int c, ParamGroup g) {
  CrpBlock<T> blk;
  for (int i = 0; i < 4; ++i) {
    Conv2dLayer<T> l;
    l.stride = 1;
    l.pad = 0;
    l.w = store.add(name + ".c" + std::to_string(i) + ".w", Tensor<T>::zeros({c, c, 1, 1}), true, g);
    blk.convs[static_cast<size_t>(i)] = l;
  }
  return blk;
}

// Aligns both branches to the decoder width with 1x1 convs, upsamples the
// coarser branch by 2, sums, applies ReLU.
template <typename T>
struct FusionBlock {
  Conv2dLayer<T> conv_coarse, conv_fine;

  Tensor<T> forward(const Tensor<T>& coarse, const Tensor<T>& fine) const {
    Tensor<T> a = upsample_nearest(conv_coarse.forward(coarse), 2);
    Tensor<T> b = conv_fine.forward(fine);
    return relu(add(a, b));
  }
};

template <typename T>
FusionBlock<T> make_fusion(ParamStore<T>& store, const std::string& name, int c_coarse, int c_fine,
                           int cout, ParamGroup g, Rng& rng) {
  FusionBlock<T> f;
  f.conv_coarse = make_conv(store, name + ".coarse", c_coarse, cout, 1, 1, 0, false, g, rng);
  f.conv_fine = make_conv(store, name + ".fine", c_fine, cout, 1, 1, 0, false, g, rng);
  return f;
}

// Four stages walking stride 32 -> 4, then a 3x3 conv to class logits and a
// x4 upsample back to input resolution.
template <typename T>
struct SegHead {
  Conv2dLayer<T> entry;
  std::array<CrpBlock<T>, 4> crp;
  std::array<FusionBlock<T>, 3> fuse;
  Conv2dLayer<T> final_conv;

  Tensor<T> forward(const std::array<Tensor<T>, 3>& taps, const Tensor<T>& c_early) const {
    Tensor<T> x = crp[0].forward(entry.forward(taps[0]));
    x = crp[1].forward(fuse[0].forward(x, taps[1]));
    x = crp[2].forward(fuse[1].forward(x, taps[2]));
    x = crp[3].forward(fuse[2].forward(x, c_early));
    return upsample_nearest(final_conv.forward(x), 4);
  }
};

template <typename T>
SegHead<T> make_seg_head(ParamStore<T>& store, const NetworkSpec& spec, Rng& rng) {
  MDSP_CHECK(spec.num_seg_classes >= 2,
             "segmentation head: need at least two classes, got " << spec.num_seg_classes);
  SegHead<T> h;
  const ParamGroup g = ParamGroup::segment;
  const int d = spec.ch(256);
  const int t1 = std::max(1, spec.ch(512) / 2), t2 = std::max(1, spec.ch(256) / 2),
            t3 = std::max(1, spec.ch(128) / 2);
  h.entry = make_conv(store, "seg.entry", t1, d, 1, 1, 0, false, g, rng);
  h.crp[0] = make_crp(store, "seg.crp1", d, g);
  h.fuse[0] = make_fusion(store, "seg.fuse2", d, t2, d, g, rng);
  h.crp[1] = make_crp(store, "seg.crp2", d, g);
  h.fuse[1] = make_fusion(store, "seg.fuse3", d, t3, d, g, rng);
  h.crp[2] = make_crp(store, "seg.crp3", d, g);
  h.fuse[2] = make_fusion(store, "seg.fuse4", d, spec.ch(64), d, g, rng);
  h.crp[3] = make_crp(store, "seg.crp4", d, g);
  h.final_conv = make_conv(store, "seg.final", d, spec.num_seg_classes, 3, 1, 1, true, g, rng);
  return h;
}

// ---------------------------------------------------------------------------
// pose head
// ---------------------------------------------------------------------------

// One stage body: five blocks of three ELU 3x3 convs with concatenated
// outputs, then a 1x1 ELU squeeze and a linear 1x1 to the stage outputs.
template <typename T>
struct PoseStage {
  std::array<std::array<ConvAct<T>, 3>, 5> blocks;
  ConvAct<T> squeeze;
  Conv2dLayer<T> out;

  Tensor<T> forward(Tensor<T> x) const {
    for (const auto& blk : blocks) {
      Tensor<T> y1 = blk[0].forward(x);
      Tensor<T> y2 = blk[1].forward(y1);
      Tensor<T> y3 = blk[2].forward(y2);
      x = concat_channels<T>({y1, y2, y3});
    }
    return out.forward(squeeze.forward(x));
  }
};

template <typename T>
PoseStage<T> make_pose_stage(ParamStore<T>& store, const std::string& name, int cin, int width,
                             int cout, Rng& rng) {
  PoseStage<T> st;
  const ParamGroup g = ParamGroup::pose;
  int c = cin;
  for (int b = 0; b < 5; ++b) {
    const std::string bn = name + ".b" + std::to_string(b);
    st.blocks[static_cast<size_t>(b)][0] = make_conv_act(store, bn + ".c0", c, width, 3, 1, 1, g, rng);
    st.blocks[static_cast<size_t>(b)][1] = make_conv_act(store, bn + ".c1", width, width, 3, 1, 1, g, rng);
    st.blocks[static_cast<size_t>(b)][2] = make_conv_act(store, bn + ".c2", width, width, 3, 1, 1, g, rng);
    c = 3 * width;
  }
  st.squeeze = make_conv_act(store, name + ".squeeze", c, width, 1, 1, 0, g, rng);
  st.out = make_conv(store, name + ".out", width, cout, 1, 1, 0, true, g, rng);
  return st;
}

// CPM adapter (three ELU 3x3 convs) followed by three PAF stages and one
// heatmap stage; every stage after the first consumes the previous stage
// output concatenated with the CPM features.
template <typename T>
struct PoseHead {
  std::array<ConvAct<T>, 3> cpm;
  std::array<PoseStage<T>, 4> stages;  // 3 PAF + 1 heatmap

  PoseRawOutput<T> forward(const Tensor<T>& c3) const {
    Tensor<T> f = c3;
    for (const auto& l : cpm) f = l.forward(f);
    PoseRawOutput<T> out;
    Tensor<T> prev;
    for (int s = 0; s < 4; ++s) {
      Tensor<T> x = (s == 0) ? f : concat_channels<T>({prev, f});
      Tensor<T> y = stages[static_cast<size_t>(s)].forward(x);
      if (s < 3) {
        out.pafs.push_back(y);
        prev = y;
      } else {
        out.heatmaps = y;
      }
    }
    return out;
  }
};

template <typename T>
PoseHead<T> make_pose_head(ParamStore<T>& store, const NetworkSpec& spec, Rng& rng) {
  MDSP_CHECK(spec.num_keypoints >= 1, "pose head: need at least one keypoint");
  PoseHead<T> h;
  const ParamGroup g = ParamGroup::pose;
  const int p = spec.ch(128);
  const int s = spec.ch(64);
  const int paf_ch = 2 * spec.num_limbs();
  const int hm_ch = spec.num_keypoints + 1;
  h.cpm[0] = make_conv_act(store, "pose.cpm0", spec.ch(128), p, 3, 1, 1, g, rng);
  h.cpm[1] = make_conv_act(store, "pose.cpm1", p, p, 3, 1, 1, g, rng);
  h.cpm[2] = make_conv_act(store, "pose.cpm2", p, p, 3, 1, 1, g, rng);
  h.stages[0] = make_pose_stage(store, "pose.s1", p, s, paf_ch, rng);
  h.stages[1] = make_pose_stage(store, "pose.s2", paf_ch + p, s, paf_ch, rng);
  h.stages[2] = make_pose_stage(store, "pose.s3", paf_ch + p, s, paf_ch, rng);
  h.stages[3] = make_pose_stage(store, "pose.s4", paf_ch + p, s, hm_ch, rng);
  return h;
}

// ---------------------------------------------------------------------------
// full network
// ---------------------------------------------------------------------------

template <typename T>
class Network {
 public:
  Network(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    {
      Rng rng(derive_seed(seed, 1));
      backbone_ = make_backbone<T>(store_, spec_, rng);
    }
    if (spec_.task_mask.detect || spec_.task_mask.segment) {
      Rng rng_shared(derive_seed(seed, 2));
      Rng rng_pred(derive_seed(seed, 3));
      detect_ = make_detect_head<T>(store_, spec_, spec_.task_mask.detect, rng_shared, rng_pred);
    }
    if (spec_.task_mask.segment) {
      Rng rng(derive_seed(seed, 4));
      seg_ = make_seg_head<T>(store_, spec_, rng);
    }
    if (spec_.task_mask.pose) {
      Rng rng(derive_seed(seed, 5));
      pose_ = make_pose_head<T>(store_, spec_, rng);
    }
  }

  NetworkOutput<T> forward(const Tensor<T>& image, bool training) {
    MDSP_CHECK(image.ndim() == 4 && image.dim(1) == 3, "network: input must be batch x 3 x H x W, got "
                                                           << shape_str(image.shape()));
    MDSP_CHECK(image.dim(2) == spec_.input_size && image.dim(3) == spec_.input_size,
               "network: input " << shape_str(image.shape()) << " does not match configured size "
                                 << spec_.input_size);
    NetworkOutput<T> out;
    out.pyramid = backbone_.forward(image, training);
    if (detect_) {
      out.convset_taps = detect_->forward(out.pyramid, training, out.detect);
    }
    if (seg_) {
      out.seg_logits = seg_->forward(out.convset_taps, out.pyramid.c_early);
    }
    if (pose_) {
      out.pose = pose_->forward(out.pyramid.c3);
    }
    return out;
  }

  const NetworkSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  NetworkSpec spec_;
  ParamStore<T> store_;
  Backbone<T> backbone_;
  std::optional<DetectHead<T>> detect_;
  std::optional<SegHead<T>> seg_;
  std::optional<PoseHead<T>> pose_;
};

// Trainable parameter count for a spec/mask combination.
inline std::int64_t param_count(NetworkSpec spec, const TaskMask& mask) {
  spec.task_mask = mask;
  Network<float> net(spec, 0);
  return net.params().count_trainable();
}

}  // namespace mdsp
