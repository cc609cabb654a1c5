#pragma once

// Task losses and their composition: detection (BCE objectness + MSE box
// offsets + cross-entropy class, with tenfold no-object and box weights),
// segmentation (per-pixel cross entropy), pose (per-stage L2), combined by
// per-task weights from dynamic weight averaging.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "mdsp/netspec.hpp"
#include "mdsp/network.hpp"
#include "mdsp/tensor.hpp"

namespace mdsp {

// Detection targets for a batch, laid out to match the raw prediction
// tensors reshaped to (batch * anchors, 5 + C, N, N). States per cell:
// positive (obj = 1, box + class set), ignore (near-best anchors, excluded
// everywhere), no-object (everything else).
template <typename T>
struct DetectTargets {
  std::array<Tensor<T>, 3> obj;         // (B*A, 1, N, N), 1 at positives
  std::array<Tensor<T>, 3> pos_mask;    // same shape, 1 at positives
  std::array<Tensor<T>, 3> noobj_mask;  // 1 where the no-object term applies
  std::array<Tensor<T>, 3> box;         // (B*A, 4, N, N) target offsets
  std::array<Tensor<T>, 3> box_mask;    // 1 on the 4 offset channels of positives
  std::array<std::vector<int>, 3> cls;  // (B*A*N*N) labels, -1 off positives
};

// L_dct = 1*BCE(obj) + 10*BCE(noobj) + 10*MSE(box) + 1*CE(class), each term
// averaged over its participating cells jointly across the three scales.
template <typename T>
Tensor<T> detection_loss(const RawDetectOutput<T>& raw, const DetectTargets<T>& targets,
                         const NetworkSpec& spec) {
  const int A = NetworkSpec::anchors_per_scale;
  const int per_anchor = 5 + spec.num_det_classes;

  std::vector<Tensor<T>> terms;
  std::vector<T> weights;
  std::int64_t n_pos = 0, n_noobj = 0, n_box = 0, n_cls = 0;
  for (int s = 0; s < 3; ++s) {
    n_pos += mask_count(targets.pos_mask[static_cast<size_t>(s)]);
    n_noobj += mask_count(targets.noobj_mask[static_cast<size_t>(s)]);
    n_box += mask_count(targets.box_mask[static_cast<size_t>(s)]);
    n_cls += count_valid_labels(targets.cls[static_cast<size_t>(s)]);
  }

  for (int s = 0; s < 3; ++s) {
    const Tensor<T>& r = raw.scales[static_cast<size_t>(s)];
    const int B = r.dim(0), N = r.dim(2);
    MDSP_CHECK(r.dim(1) == A * per_anchor, "detection_loss: raw depth " << r.dim(1) << " != "
                                                                        << A * per_anchor);
    Tensor<T> g = reshape(r, {B * A, per_anchor, N, N});
    Tensor<T> obj_logits = slice_channels(g, 0, 1);
    Tensor<T> box_pred = slice_channels(g, 1, 5);
    Tensor<T> cls_logits = slice_channels(g, 5, per_anchor);

    const auto si = static_cast<size_t>(s);
    if (n_pos > 0) {
      terms.push_back(masked_bce_with_logits_sum(obj_logits, targets.obj[si], targets.pos_mask[si]));
      weights.push_back(T(1) / static_cast<T>(n_pos));
    }
    if (n_noobj > 0) {
      terms.push_back(masked_bce_with_logits_sum(obj_logits, targets.obj[si], targets.noobj_mask[si]));
      weights.push_back(T(10) / static_cast<T>(n_noobj));
    }
    if (n_box > 0) {
      terms.push_back(masked_mse_sum(box_pred, targets.box[si], targets.box_mask[si]));
      weights.push_back(T(10) / static_cast<T>(n_box));
    }
    if (n_cls > 0) {
      const std::int64_t cnt = count_valid_labels(targets.cls[si]);
      if (cnt > 0) {
        terms.push_back(softmax_cross_entropy_pixels(cls_logits, targets.cls[si]));
        weights.push_back(static_cast<T>(cnt) / static_cast<T>(n_cls));
      }
    }
  }
  if (terms.empty()) return mul_scalar(sum(raw.scales[0]), T(0));
  return weighted_sum(terms, weights);
}

// Mean per-pixel cross entropy; labels are row-major (batch, y, x).
template <typename T>
Tensor<T> segmentation_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy_pixels(logits, labels, -1);
}

// Sum of per-stage mean squared errors: each PAF stage against the PAF
// target, the heatmap stage against the heatmap target, unit weights.
template <typename T>
Tensor<T> pose_loss(const PoseRawOutput<T>& out, const Tensor<T>& paf_target,
                    const Tensor<T>& heatmap_target) {
  std::vector<Tensor<T>> terms;
  std::vector<T> weights;
  for (const auto& paf : out.pafs) {
    terms.push_back(mse_loss(paf, paf_target));
    weights.push_back(T(1));
  }
  terms.push_back(mse_loss(out.heatmaps, heatmap_target));
  weights.push_back(T(1));
  return weighted_sum(terms, weights);
}

// ---------------------------------------------------------------------------
// dynamic weight averaging
// ---------------------------------------------------------------------------

// lambda_k = K * softmax(r_k / T) over the K supplied ratios.
inline std::vector<double> dwa_lambda(const std::vector<double>& ratios, double temperature) {
  MDSP_CHECK(!ratios.empty(), "dwa_lambda: no ratios");
  MDSP_CHECK(temperature > 0, "dwa_lambda: temperature must be positive");
  const double K = static_cast<double>(ratios.size());
  double mx = ratios[0] / temperature;
  for (double r : ratios) mx = std::max(mx, r / temperature);
  std::vector<double> lam(ratios.size());
  double denom = 0;
  for (size_t i = 0; i < ratios.size(); ++i) {
    lam[i] = std::exp(ratios[i] / temperature - mx);
    denom += lam[i];
  }
  for (auto& l : lam) l = K * l / denom;
  return lam;
}

// Per-task loss history at epoch granularity. Weights are all 1 until two
// epochs of history exist; afterwards lambda_k = K * softmax(r_k / T) with
// r_k the ratio of the two most recent epoch losses.
struct DwaState {
  TaskMask mask;
  double temperature = 2.0;
  std::vector<std::array<double, 3>> epoch_losses;  // slots: detect, segment, pose

  explicit DwaState(TaskMask m, double temp = 2.0) : mask(m), temperature(temp) {
    MDSP_CHECK(mask.any(), "dwa: no active tasks");
  }

  void push_epoch(double l_dct, double l_seg, double l_pose) {
    epoch_losses.push_back({l_dct, l_seg, l_pose});
  }

  // Weights in task slots (detect, segment, pose); masked slots are 0.
  std::array<double, 3> weights() const {
    std::array<double, 3> lam = {0, 0, 0};
    const std::array<bool, 3> active = {mask.detect, mask.segment, mask.pose};
    if (epoch_losses.size() < 2) {
      for (size_t i = 0; i < 3; ++i)
        if (active[i]) lam[i] = 1.0;
      return lam;
    }
    const auto& prev1 = epoch_losses[epoch_losses.size() - 1];
    const auto& prev2 = epoch_losses[epoch_losses.size() - 2];
    std::vector<double> ratios;
    std::vector<size_t> slots;
    for (size_t i = 0; i < 3; ++i) {
      if (!active[i]) continue;
      double r = 1.0;
      if (prev2[i] > 0 && std::isfinite(prev1[i]) && std::isfinite(prev2[i])) r = prev1[i] / prev2[i];
      ratios.push_back(r);
      slots.push_back(i);
    }
    const auto l = dwa_lambda(ratios, temperature);
    for (size_t j = 0; j < slots.size(); ++j) lam[slots[j]] = l[j];
    return lam;
  }
};

// ---------------------------------------------------------------------------
// composition
// ---------------------------------------------------------------------------

template <typename T>
struct PartialLosses {
  std::optional<Tensor<T>> dct, seg, pose;
};

// Weighted sum over the active tasks. Masked tasks contribute nothing even
// if a partial value is present; an active task without one is an error.
template <typename T>
Tensor<T> total_loss(const PartialLosses<T>& p, const std::array<double, 3>& lambda,
                     const TaskMask& mask) {
  MDSP_CHECK(mask.any(), "total_loss: no active tasks");
  std::vector<Tensor<T>> terms;
  std::vector<T> weights;
  auto take = [&terms, &weights](const std::optional<Tensor<T>>& t, bool active, double lam,
                                 const char* name) {
    if (!active) return;
    MDSP_CHECK(t.has_value(), "total_loss: task '" << name << "' is active but has no partial loss");
    terms.push_back(*t);
    weights.push_back(static_cast<T>(lam));
  };
  take(p.dct, mask.detect, lambda[0], "detect");
  take(p.seg, mask.segment, lambda[1], "segment");
  take(p.pose, mask.pose, lambda[2], "pose");
  return weighted_sum(terms, weights);
}

}  // namespace mdsp
