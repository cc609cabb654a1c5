#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mdsp/check.hpp"

namespace mdsp {

// Axis-aligned box, center-size parameterization, pixel units.
struct Box {
  float cx = 0, cy = 0, w = 0, h = 0;

  float x1() const { return cx - w / 2; }
  float y1() const { return cy - h / 2; }
  float x2() const { return cx + w / 2; }
  float y2() const { return cy + h / 2; }
  float area() const { return w * h; }
  float diagonal() const { return std::sqrt(w * w + h * h); }

  static Box from_corners(float x1, float y1, float x2, float y2) {
    return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }
};

inline float iou(const Box& a, const Box& b) {
  const float ix1 = std::max(a.x1(), b.x1());
  const float iy1 = std::max(a.y1(), b.y1());
  const float ix2 = std::min(a.x2(), b.x2());
  const float iy2 = std::min(a.y2(), b.y2());
  const float iw = std::max(0.0f, ix2 - ix1);
  const float ih = std::max(0.0f, iy2 - iy1);
  const float inter = iw * ih;
  const float uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

// IoU of two (w, h) extents placed at a common center; the anchor
// clustering distance is 1 minus this.
inline float iou_wh(float w1, float h1, float w2, float h2) {
  const float inter = std::min(w1, w2) * std::min(h1, h2);
  const float uni = w1 * h1 + w2 * h2 - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

struct Detection {
  Box box;
  int class_id = 0;
  float score = 0;
};

struct Keypoint {
  float x = 0, y = 0;
  float conf = 0;
  bool present = false;
};

struct Skeleton {
  std::vector<Keypoint> keypoints;  // indexed by keypoint id; absent entries have present=false
  float score = 0;

  int present_count() const {
    int n = 0;
    for (const auto& k : keypoints)
      if (k.present) ++n;
    return n;
  }
};

}  // namespace mdsp
