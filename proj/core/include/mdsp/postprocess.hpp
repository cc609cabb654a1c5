#pragma once

// Decode algorithms turning raw network tensors into detections, label
// maps, and skeletons: box decoding, NMS, anchor clustering, peak finding,
// PAF scoring, and greedy skeleton assembly. Pure functions over inputs.

#include <cstdint>
#include <utility>
#include <vector>

#include "mdsp/geometry.hpp"
#include "mdsp/netspec.hpp"
#include "mdsp/network.hpp"
#include "mdsp/tensor.hpp"

namespace mdsp {

// YOLO-style decode of all three scales for one batch element:
// cx = (sigmoid(tx) + grid_x) * stride, w = anchor_w * exp(tw); score is
// sigmoid(objectness) times the best softmax class probability. Entries
// below conf_thresh are dropped.
std::vector<Detection> decode_boxes(const RawDetectOutput<float>& raw, const NetworkSpec& spec,
                                    float conf_thresh, int batch_index = 0);

// Greedy class-wise suppression: keep in descending score order (ties:
// lower class id, then earlier insertion), drop same-class boxes whose IoU
// with a kept box exceeds iou_thresh.
std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_thresh);

// k-means over (w, h) extents under the distance 1 - iou of co-centered
// boxes; seeded k-means++ init, per-cluster mean centroid update, run to
// the assignment fixpoint (at most 300 rounds). Result sorted by area.
std::vector<Anchor> kmeans_anchors(const std::vector<std::pair<float, float>>& boxes, int k,
                                   std::uint64_t seed);

// Per-pixel argmax over class channels, ties to the lower class index.
// Returns row-major H*W labels for one batch element.
std::vector<int> seg_decode(const Tensor<float>& logits, int batch_index = 0);

// Bilinear resize of the two trailing spatial dims (any leading dims).
Tensor<float> bilinear_resize(const Tensor<float>& x, int out_h, int out_w);

struct Peak {
  float x = 0, y = 0;
  float conf = 0;
};

// Local maxima of each channel of a (C, H, W) map: value >= thresh,
// strictly above the up/left neighbors and at least the down/right ones
// (so a plateau yields only its top-left point).
std::vector<std::vector<Peak>> find_peaks(const Tensor<float>& heatmap, float thresh);

struct PafScore {
  float mean = 0;        // average directed alignment along the segment
  float frac_above = 0;  // fraction of samples individually above a threshold
};

// Line integral of a 2-channel field along p1 -> p2: mean over n_samples
// evenly spaced points of dot(paf(point), unit(p2 - p1)), nearest-pixel
// lookup. Coincident endpoints score 0.
PafScore paf_score_detail(const Tensor<float>& paf, float x1, float y1, float x2, float y2,
                          int n_samples, float sample_thresh);
float paf_score(const Tensor<float>& paf, float x1, float y1, float x2, float y2, int n_samples);

struct AssemblyParams {
  int n_samples = 10;
  float min_score = 0.05f;     // required mean alignment per connection
  float sample_thresh = 0.05f; // per-sample alignment floor
  float min_frac = 0.4f;       // required fraction of samples above the floor
};

// Greedy limb matching and merging. candidates[k] are the peaks of
// keypoint channel k; pafs is the (2L, H, W) field at the same resolution
// as the candidate coordinates. Each candidate joins at most one skeleton.
std::vector<Skeleton> assemble_skeletons(const std::vector<std::vector<Peak>>& candidates,
                                         const Tensor<float>& pafs,
                                         const std::vector<std::pair<int, int>>& limbs,
                                         const AssemblyParams& params = {});

// Full pose decode for one batch element: upsample final-stage heatmaps
// and PAFs to input resolution, find peaks, refine them to sub-pixel
// positions on the stride-8 grid, and assemble skeletons.
std::vector<Skeleton> decode_skeletons(const PoseRawOutput<float>& pose, const NetworkSpec& spec,
                                       float peak_thresh, int batch_index = 0,
                                       const AssemblyParams& params = {});

}  // namespace mdsp
