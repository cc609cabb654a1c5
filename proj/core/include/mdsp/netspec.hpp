#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mdsp/check.hpp"

namespace mdsp {

// Which heads are built and trained. Masked tasks get no layers beyond the
// shared ones, no loss, and no parameter updates.
struct TaskMask {
  bool detect = true;
  bool segment = true;
  bool pose = true;

  int count() const { return int(detect) + int(segment) + int(pose); }
  bool any() const { return detect || segment || pose; }
  bool operator==(const TaskMask&) const = default;

  static TaskMask none() { return {false, false, false}; }
  static TaskMask all() { return {true, true, true}; }

  std::string str() const {
    std::string s;
    auto app = [&s](const char* n) {
      if (!s.empty()) s += ",";
      s += n;
    };
    if (detect) app("detect");
    if (segment) app("segment");
    if (pose) app("pose");
    return s.empty() ? "none" : s;
  }

  // Parses a comma-separated subset of detect,segment,pose.
  static TaskMask parse(const std::string& s) {
    TaskMask m = none();
    size_t pos = 0;
    while (pos < s.size()) {
      size_t end = s.find(',', pos);
      if (end == std::string::npos) end = s.size();
      std::string tok = s.substr(pos, end - pos);
      if (tok == "detect") {
        m.detect = true;
      } else if (tok == "segment") {
        m.segment = true;
      } else if (tok == "pose") {
        m.pose = true;
      } else if (!tok.empty()) {
        MDSP_CHECK(false, "task mask: unknown task '" << tok << "' (expected detect, segment, pose)");
      }
      pos = end + 1;
    }
    return m;
  }
};

struct Anchor {
  float w = 0, h = 0;
  float area() const { return w * h; }
  bool operator==(const Anchor&) const = default;
};

// Detection classes (label map class = detection class + 1; 0 is Empty).
inline const std::array<std::string, 5>& seg_class_names() {
  static const std::array<std::string, 5> names = {"Empty", "Person", "Child seat", "Infant seat",
                                                   "Everyday objects"};
  return names;
}

inline const std::array<std::string, 4>& det_class_names() {
  static const std::array<std::string, 4> names = {"Person", "Child seat", "Infant seat",
                                                   "Everyday objects"};
  return names;
}

// Keypoint convention: 0 head, 1 left shoulder, 2 right shoulder,
// 3 left hip, 4 right hip, 5 left knee, 6 right knee.
inline std::vector<std::pair<int, int>> default_limbs() {
  return {{0, 1}, {0, 2}, {1, 3}, {2, 4}, {3, 5}, {4, 6}};
}

inline const std::array<std::string, 7>& keypoint_names() {
  static const std::array<std::string, 7> names = {"head",  "l_shoulder", "r_shoulder", "l_hip",
                                                   "r_hip", "l_knee",     "r_knee"};
  return names;
}

// Index swap applied when an image is mirrored horizontally.
inline std::vector<int> mirror_keypoint_map(int num_keypoints) {
  std::vector<int> m(static_cast<size_t>(num_keypoints));
  for (int i = 0; i < num_keypoints; ++i) m[static_cast<size_t>(i)] = i;
  auto swap_pair = [&m, num_keypoints](int a, int b) {
    if (a < num_keypoints && b < num_keypoints) std::swap(m[static_cast<size_t>(a)], m[static_cast<size_t>(b)]);
  };
  swap_pair(1, 2);
  swap_pair(3, 4);
  swap_pair(5, 6);
  return m;
}

// Structural hyperparameters of the whole model. Anchors are in input
// pixels, sorted ascending by area; the first triple serves the stride-8
// scale, the middle the stride-16 scale, and the largest the stride-32
// scale.
struct NetworkSpec {
  float width_mult = 1.0f;
  int input_size = 416;
  int num_det_classes = 4;
  int num_seg_classes = 5;
  int num_keypoints = 7;
  std::vector<std::pair<int, int>> limbs = default_limbs();
  std::vector<Anchor> anchors;  // 9, ascending area
  TaskMask task_mask = TaskMask::all();

  static constexpr int anchors_per_scale = 3;
  static constexpr int num_scales = 3;
  static constexpr std::array<int, 3> scale_strides = {32, 16, 8};  // coarse to fine

  int num_limbs() const { return static_cast<int>(limbs.size()); }
  int det_depth() const { return anchors_per_scale * (5 + num_det_classes); }
  int grid_size(int scale_idx) const { return input_size / scale_strides[static_cast<size_t>(scale_idx)]; }

  // Channel count after applying the width multiplier to a base count.
  int ch(int base) const {
    return std::max(1, static_cast<int>(std::lround(static_cast<double>(base) * width_mult)));
  }

  // Anchors serving one scale, coarse (stride 32) to fine (stride 8).
  std::array<Anchor, 3> scale_anchors(int scale_idx) const {
    const int off = (num_scales - 1 - scale_idx) * anchors_per_scale;
    return {anchors[static_cast<size_t>(off)], anchors[static_cast<size_t>(off  + 1)],
            anchors[static_cast<size_t>(off + 2)]};
  }

  void validate() const {
    MDSP_CHECK(width_mult > 0.0f && width_mult <= 1.0f,
               "spec: width_mult must be in (0, 1], got " << width_mult);
    MDSP_CHECK(input_size >= 32 && input_size % 32 == 0,
               "spec: input_size must be a positive multiple of 32, got " << input_size);
    MDSP_CHECK(num_det_classes >= 1, "spec: need at least one detection class");
    MDSP_CHECK(num_seg_classes >= 2, "spec: need at least two segmentation classes, got "
                                         << num_seg_classes);
    MDSP_CHECK(num_keypoints >= 1, "spec: need at least one keypoint");
    for (auto [a, b] : limbs) {
      MDSP_CHECK(a >= 0 && a < num_keypoints && b >= 0 && b < num_keypoints && a != b,
                 "spec: limb (" << a << ", " << b << ") out of range for " << num_keypoints
                                << " keypoints");
    }
    MDSP_CHECK(static_cast<int>(anchors.size()) == anchors_per_scale * num_scales,
               "spec: expected " << anchors_per_scale * num_scales << " anchors, got "
                                 << anchors.size());
    for (size_t i = 0; i < anchors.size(); ++i) {
      MDSP_CHECK(anchors[i].w > 0 && anchors[i].h > 0,
                 "spec: anchor " << i << " has non-positive extent");
      if (i > 0) {
        MDSP_CHECK(anchors[i - 1].area() <= anchors[i].area(),
                   "spec: anchors must be sorted ascending by area (anchor " << i << " breaks order)");
      }
    }
  }
};

// Default anchors as fractions of the input size, covering the synthetic
// object range from small everyday objects to full-slot persons.
inline std::vector<Anchor> default_anchors(int input_size) {
  const float s = static_cast<float>(input_size);
  const std::array<std::pair<float, float>, 9> frac = {{{0.06f, 0.08f},
                                                        {0.10f, 0.10f},
                                                        {0.10f, 0.16f},
                                                        {0.16f, 0.16f},
                                                        {0.16f, 0.26f},
                                                        {0.22f, 0.22f},
                                                        {0.26f, 0.36f},
                                                        {0.34f, 0.30f},
                                                        {0.42f, 0.48f}}};
  std::vector<Anchor> a;
  a.reserve(frac.size());
  for (auto [w, h] : frac) a.push_back({w * s, h * s});
  return a;
}

inline NetworkSpec default_spec() {
  NetworkSpec s;
  s.anchors = default_anchors(s.input_size);
  return s;
}

inline void to_json(nlohmann::json& j, const TaskMask& m) {
  j = nlohmann::json{{"detect", m.detect}, {"segment", m.segment}, {"pose", m.pose}};
}
inline void from_json(const nlohmann::json& j, TaskMask& m) {
  j.at("detect").get_to(m.detect);
  j.at("segment").get_to(m.segment);
  j.at("pose").get_to(m.pose);
}

inline void to_json(nlohmann::json& j, const Anchor& a) { j = nlohmann::json{a.w, a.h}; }
inline void from_json(const nlohmann::json& j, Anchor& a) {
  a.w = j.at(0).get<float>();
  a.h = j.at(1).get<float>();
}

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = nlohmann::json{{"width_mult", s.width_mult},
                     {"input_size", s.input_size},
                     {"num_det_classes", s.num_det_classes},
                     {"num_seg_classes", s.num_seg_classes},
                     {"num_keypoints", s.num_keypoints},
                     {"limbs", s.limbs},
                     {"anchors", s.anchors},
                     {"task_mask", s.task_mask}};
}
inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  j.at("width_mult").get_to(s.width_mult);
  j.at("input_size").get_to(s.input_size);
  j.at("num_det_classes").get_to(s.num_det_classes);
  j.at("num_seg_classes").get_to(s.num_seg_classes);
  j.at("num_keypoints").get_to(s.num_keypoints);
  j.at("limbs").get_to(s.limbs);
  j.at("anchors").get_to(s.anchors);
  j.at("task_mask").get_to(s.task_mask);
}

}  // namespace mdsp
