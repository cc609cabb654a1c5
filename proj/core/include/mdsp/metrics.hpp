#pragma once

// Evaluation metrics: interpolated average precision for detection,
// intersection-over-union for segmentation, and object-keypoint-similarity
// based scores for pose.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdsp/geometry.hpp"
#include "mdsp/synthdata.hpp"

namespace mdsp {

struct DetectionEval {
  double map5095 = 0;  // mean AP over IoU 0.50 : 0.05 : 0.95
  double ap50 = 0;
  double ap75 = 0;
  std::vector<double> per_class_ap50;  // -1 for classes without ground truth
};

// 101-point interpolated AP, averaged over classes that have ground truth.
DetectionEval detection_metrics(const std::vector<std::vector<Detection>>& preds,
                                const std::vector<std::vector<GtBox>>& gts, int num_classes);

double average_precision_at_iou(const std::vector<std::vector<Detection>>& preds,
                                const std::vector<std::vector<GtBox>>& gts, int num_classes,
                                float iou_thresh, std::vector<double>* per_class = nullptr);

struct SegEval {
  double miou = 0;  // mean IoU over classes whose union is non-empty
  double pixel_acc = 0;
  std::vector<double> per_class_iou;  // -1 for classes never seen
};

SegEval seg_metrics(const std::vector<std::vector<int>>& preds,
                    const std::vector<std::vector<int>>& gts, int num_classes);

// Keypoint similarity between a predicted and a ground-truth skeleton:
// mean over ground-truth-present keypoints of exp(-d^2 / (2 (k*diag)^2))
// with k = 0.1 and diag the ground-truth box diagonal; an absent predicted
// keypoint contributes zero.
double object_keypoint_similarity(const Skeleton& pred, const PersonGT& gt);

struct PoseEval {
  double ap = 0;       // mean AP over OKS thresholds 0.50 : 0.05 : 0.95
  double ap50 = 0;
  double ap75 = 0;
  double pck = 0;      // fraction of GT keypoints within 0.1 * box diagonal
  double mean_oks = 0; // mean matched OKS per ground-truth person
  int gt_persons = 0;
};

PoseEval pose_metrics(const std::vector<std::vector<Skeleton>>& preds,
                      const std::vector<std::vector<PersonGT>>& gts);

struct MetricsReport {
  std::optional<DetectionEval> detection;
  std::optional<SegEval> segmentation;
  std::optional<PoseEval> pose;

  std::string table() const;
  nlohmann::json to_json() const;
};

}  // namespace mdsp
