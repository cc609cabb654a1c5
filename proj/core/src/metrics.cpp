#include "mdsp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace mdsp {
namespace {

// 101-point interpolation over the precision-recall curve of a ranked list.
double interpolated_ap(const std::vector<bool>& tp_ranked, int num_gt) {
  if (num_gt == 0) return -1;
  if (tp_ranked.empty()) return 0;
  std::vector<double> precision(tp_ranked.size()), recall(tp_ranked.size());
  int tp = 0;
  for (size_t i = 0; i < tp_ranked.size(); ++i) {
    if (tp_ranked[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  // Running max of precision from the right makes the curve monotone.
  for (size_t i = precision.size() - 1; i > 0; --i)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  size_t j = 0;
  for (int r = 0; r <= 100; ++r) {
    const double target = static_cast<double>(r) / 100.0;
    while (j < recall.size() && recall[j] < target) ++j;
    if (j < precision.size()) sum += precision[j];
  }
  return sum / 101.0;
}

struct RankedDet {
  float score;
  size_t image;
  size_t index;  // insertion order within the image, for a stable global rank
  Box box;
};

}  // namespace

double average_precision_at_iou(const std::vector<std::vector<Detection>>& preds,
                                const std::vector<std::vector<GtBox>>& gts, int num_classes,
                                float iou_thresh, std::vector<double>* per_class) {
  MDSP_CHECK(preds.size() == gts.size(), "average_precision: " << preds.size()
                                                               << " prediction lists vs "
                                                               << gts.size() << " truth lists");
  MDSP_CHECK(num_classes > 0, "average_precision: num_classes must be positive");
  if (per_class) per_class->assign(static_cast<size_t>(num_classes), -1.0);

  double sum = 0;
  int classes_with_gt = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<RankedDet> ranked;
    int num_gt = 0;
    for (size_t img = 0; img < preds.size(); ++img) {
      for (size_t i = 0; i < preds[img].size(); ++i)
        if (preds[img][i].class_id == c)
          ranked.push_back(RankedDet{preds[img][i].score, img, i, preds[img][i].box});
      for (const GtBox& g : gts[img])
        if (g.class_id == c) ++num_gt;
    }
    if (num_gt == 0) continue;
    ++classes_with_gt;

    std::sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.index < b.index;
    });

    std::vector<std::vector<bool>> used(gts.size());
    for (size_t img = 0; img < gts.size(); ++img) used[img].assign(gts[img].size(), false);

    std::vector<bool> tp(ranked.size(), false);
    for (size_t r = 0; r < ranked.size(); ++r) {
      const auto& d = ranked[r];
      float best_iou = 0;
      int best_gt = -1;
      const auto& gt_list = gts[d.image];
      for (size_t g = 0; g < gt_list.size(); ++g) {
        if (gt_list[g].class_id != c || used[d.image][g]) continue;
        const float v = iou(d.box, gt_list[g].box);
        if (v > best_iou) {
          best_iou = v;
          best_gt = static_cast<int>(g);
        }
      }
      if (best_gt >= 0 && best_iou >= iou_thresh) {
        tp[r] = true;
        used[d.image][static_cast<size_t>(best_gt)] = true;
      }
    }

    const double ap = interpolated_ap(tp, num_gt);
    if (per_class) (*per_class)[static_cast<size_t>(c)] = ap;
    sum += ap;
  }
  return classes_with_gt > 0 ? sum / classes_with_gt : 0.0;
}

DetectionEval detection_metrics(const std::vector<std::vector<Detection>>& preds,
                                const std::vector<std::vector<GtBox>>& gts, int num_classes) {
  DetectionEval e;
  e.ap50 = average_precision_at_iou(preds, gts, num_classes, 0.5f, &e.per_class_ap50);
  e.ap75 = average_precision_at_iou(preds, gts, num_classes, 0.75f);
  double sum = 0;
  for (int i = 0; i < 10; ++i)
    sum += average_precision_at_iou(preds, gts, num_classes, 0.5f + 0.05f * static_cast<float>(i));
  e.map5095 = sum / 10.0;
  return e;
}

SegEval seg_metrics(const std::vector<std::vector<int>>& preds,
                    const std::vector<std::vector<int>>& gts, int num_classes) {
  MDSP_CHECK(preds.size() == gts.size(),
             "seg_metrics: " << preds.size() << " prediction maps vs " << gts.size() << " truths");
  MDSP_CHECK(num_classes > 0, "seg_metrics: num_classes must be positive");
  std::vector<long long> inter(static_cast<size_t>(num_classes), 0);
  std::vector<long long> uni(static_cast<size_t>(num_classes), 0);
  long long correct = 0, total = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    MDSP_CHECK(preds[i].size() == gts[i].size(), "seg_metrics: map " << i << " size mismatch: "
                                                                     << preds[i].size() << " vs "
                                                                     << gts[i].size());
    for (size_t p = 0; p < preds[i].size(); ++p) {
      const int pv = preds[i][p], gv = gts[i][p];
      MDSP_CHECK(pv >= 0 && pv < num_classes && gv >= 0 && gv < num_classes,
                 "seg_metrics: label out of range (pred " << pv << ", gt " << gv << ")");
      if (pv == gv) {
        ++inter[static_cast<size_t>(pv)];
        ++uni[static_cast<size_t>(pv)];
        ++correct;
      } else {
        ++uni[static_cast<size_t>(pv)];
        ++uni[static_cast<size_t>(gv)];
      }
      ++total;
    }
  }
  SegEval e;
  e.per_class_iou.assign(static_cast<size_t>(num_classes), -1.0);
  double sum = 0;
  int seen = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (uni[static_cast<size_t>(c)] == 0) continue;
    const double v = static_cast<double>(inter[static_cast<size_t>(c)]) /
                     static_cast<double>(uni[static_cast<size_t>(c)]);
    e.per_class_iou[static_cast<size_t>(c)] = v;
    sum += v;
    ++seen;
  }
  e.miou = seen > 0 ? sum / seen : 0.0;
  e.pixel_acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return e;
}

double object_keypoint_similarity(const Skeleton& pred, const PersonGT& gt) {
  const float diag = gt.box.diagonal();
  MDSP_CHECK(diag > 0, "object_keypoint_similarity: degenerate ground-truth box");
  const float s = 0.1f * diag;
  double sum = 0;
  int count = 0;
  for (size_t k = 0; k < gt.keypoints.size(); ++k) {
    const Keypoint& g = gt.keypoints[k];
    if (!g.present) continue;
    ++count;
    if (k >= pred.keypoints.size() || !pred.keypoints[k].present) continue;
    const float dx = pred.keypoints[k].x - g.x;
    const float dy = pred.keypoints[k].y - g.y;
    sum += std::exp(-static_cast<double>(dx * dx + dy * dy) / (2.0 * s * s));
  }
  return count > 0 ? sum / count : 0.0;
}

namespace {

struct RankedSkel {
  float score;
  size_t image;
  size_t index;
};

// AP with OKS >= thresh as the true-positive criterion, over skeletons
// ranked by their assembly score.
double oks_ap_at(const std::vector<std::vector<Skeleton>>& preds,
                 const std::vector<std::vector<PersonGT>>& gts, double thresh, int num_gt) {
  std::vector<RankedSkel> ranked;
  std::vector<std::vector<bool>> used(gts.size());
  for (size_t img = 0; img < gts.size(); ++img) {
    used[img].assign(gts[img].size(), false);
    for (size_t i = 0; i < preds[img].size(); ++i)
      ranked.push_back(RankedSkel{preds[img][i].score, img, i});
  }
  std::sort(ranked.begin(), ranked.end(), [](const RankedSkel& a, const RankedSkel& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });
  std::vector<bool> tp(ranked.size(), false);
  for (size_t r = 0; r < ranked.size(); ++r) {
    const auto& d = ranked[r];
    const auto& gt_list = gts[d.image];
    double best = 0;
    int best_gt = -1;
    for (size_t g = 0; g < gt_list.size(); ++g) {
      if (used[d.image][g]) continue;
      bool any_present = false;
      for (const Keypoint& k : gt_list[g].keypoints) any_present |= k.present;
      if (!any_present) continue;
      const double v = object_keypoint_similarity(preds[d.image][d.index], gt_list[g]);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best >= thresh) {
      tp[r] = true;
      used[d.image][static_cast<size_t>(best_gt)] = true;
    }
  }
  const double ap = interpolated_ap(tp, num_gt);
  return ap < 0 ? 0.0 : ap;
}

}  // namespace

PoseEval pose_metrics(const std::vector<std::vector<Skeleton>>& preds,
                      const std::vector<std::vector<PersonGT>>& gts) {
  MDSP_CHECK(preds.size() == gts.size(), "pose_metrics: " << preds.size() << " prediction lists vs "
                                                          << gts.size() << " truth lists");
  PoseEval e;
  long long kp_total = 0, kp_correct = 0;
  double oks_sum = 0;
  int num_gt = 0;

  for (size_t img = 0; img < gts.size(); ++img) {
    const auto& gt_list = gts[img];
    const auto& pred_list = preds[img];

    // Greedy best-similarity matching for PCK and mean OKS.
    std::vector<bool> gt_taken(gt_list.size(), false);
    std::vector<bool> pred_taken(pred_list.size(), false);
    for (size_t g = 0; g < gt_list.size(); ++g) {
      int present = 0;
      for (const Keypoint& k : gt_list[g].keypoints)
        if (k.present) ++present;
      if (present == 0) {
        gt_taken[g] = true;  // nothing to score against
        continue;
      }
      ++num_gt;
      kp_total += present;
    }
    while (true) {
      double best = -1;
      size_t bg = 0, bp = 0;
      for (size_t g = 0; g < gt_list.size(); ++g) {
        if (gt_taken[g]) continue;
        for (size_t p = 0; p < pred_list.size(); ++p) {
          if (pred_taken[p]) continue;
          const double v = object_keypoint_similarity(pred_list[p], gt_list[g]);
          if (v > best) {
            best = v;
            bg = g;
            bp = p;
          }
        }
      }
      if (best < 0) break;
      gt_taken[bg] = true;
      pred_taken[bp] = true;
      oks_sum += best;
      const PersonGT& gt = gt_list[bg];
      const Skeleton& pr = pred_list[bp];
      const float tol = 0.1f * gt.box.diagonal();
      for (size_t k = 0; k < gt.keypoints.size(); ++k) {
        if (!gt.keypoints[k].present) continue;
        if (k >= pr.keypoints.size() || !pr.keypoints[k].present) continue;
        const float dx = pr.keypoints[k].x - gt.keypoints[k].x;
        const float dy = pr.keypoints[k].y - gt.keypoints[k].y;
        if (std::sqrt(dx * dx + dy * dy) <= tol) ++kp_correct;
      }
    }
  }

  e.gt_persons = num_gt;
  e.pck = kp_total > 0 ? static_cast<double>(kp_correct) / static_cast<double>(kp_total) : 0.0;
  e.mean_oks = num_gt > 0 ? oks_sum / num_gt : 0.0;

  e.ap50 = oks_ap_at(preds, gts, 0.5, num_gt);
  e.ap75 = oks_ap_at(preds, gts, 0.75, num_gt);
  double sum = 0;
  for (int i = 0; i < 10; ++i) sum += oks_ap_at(preds, gts, 0.5 + 0.05 * i, num_gt);
  e.ap = sum / 10.0;
  return e;
}

std::string MetricsReport::table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  const auto row = [&os](const std::string& name, double v) {
    os << "  " << std::left << std::setw(22) << name << std::right << std::setw(8) << v << "\n";
  };
  if (detection) {
    os << "detection\n";
    row("AP@0.50", detection->ap50);
    row("AP@0.75", detection->ap75);
    row("AP@0.50:0.95", detection->map5095);
    for (size_t c = 0; c < detection->per_class_ap50.size(); ++c) {
      if (detection->per_class_ap50[c] < 0) continue;
      const auto& names = det_class_names();
      const std::string label =
          c < names.size() ? names[c] : "class " + std::to_string(c);
      row("  AP@0.50 " + label, detection->per_class_ap50[c]);
    }
  }
  if (segmentation) {
    os << "segmentation\n";
    row("mIoU", segmentation->miou);
    row("pixel accuracy", segmentation->pixel_acc);
    for (size_t c = 0; c < segmentation->per_class_iou.size(); ++c) {
      if (segmentation->per_class_iou[c] < 0) continue;
      const auto& names = seg_class_names();
      const std::string label =
          c < names.size() ? names[c] : "class " + std::to_string(c);
      row("  IoU " + label, segmentation->per_class_iou[c]);
    }
  }
  if (pose) {
    os << "pose\n";
    row("AP (OKS 0.50:0.95)", pose->ap);
    row("AP@OKS0.50", pose->ap50);
    row("AP@OKS0.75", pose->ap75);
    row("PCK@0.1", pose->pck);
    row("mean OKS", pose->mean_oks);
    row("GT persons", static_cast<double>(pose->gt_persons));
  }
  return os.str();
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  if (detection) {
    j["detection"] = {{"ap50", detection->ap50},
                      {"ap75", detection->ap75},
                      {"map5095", detection->map5095},
                      {"per_class_ap50", detection->per_class_ap50}};
  }
  if (segmentation) {
    j["segmentation"] = {{"miou", segmentation->miou},
                         {"pixel_acc", segmentation->pixel_acc},
                         {"per_class_iou", segmentation->per_class_iou}};
  }
  if (pose) {
    j["pose"] = {{"ap", pose->ap},
                 {"ap50", pose->ap50},
                 {"ap75", pose->ap75},
                 {"pck", pose->pck},
                 {"mean_oks", pose->mean_oks},
                 {"gt_persons", pose->gt_persons}};
  }
  return j;
}

}  // namespace mdsp
