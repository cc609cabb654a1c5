#pragma once

// Procedural scene generator with exact ground truth: seat-slot layouts
// populated with persons (articulated blobs carrying a 7-keypoint
// skeleton), child seats, infant carriers, and small objects, plus the
// target encoders and the augmentation pipeline. Label map classes:
// 0 Empty, 1 Person, 2 Child seat, 3 Infant seat, 4 Everyday objects.
// Detection class ids are the label map classes minus one.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mdsp/geometry.hpp"
#include "mdsp/netspec.hpp"
#include "mdsp/rng.hpp"
#include "mdsp/tensor.hpp"

namespace mdsp {

struct PersonGT {
  std::vector<Keypoint> keypoints;
  Box box;
};

struct GtBox {
  Box box;
  int class_id = 0;  // detection ids: 0 Person, 1 Child seat, 2 Infant seat, 3 Everyday objects
};

struct SceneAnnotation {
  int width = 0, height = 0;
  std::vector<GtBox> boxes;
  std::vector<int> label_map;  // row-major height x width, segmentation classes
  std::vector<PersonGT> persons;
};

struct GenSpec {
  int image_size = 256;
  int min_slots = 2, max_slots = 3;
  // Relative draw weights per slot content:
  // empty, person, child seat, infant seat, everyday object.
  std::array<float, 5> slot_weights = {0.20f, 0.35f, 0.15f, 0.15f, 0.15f};
  // Scene-wide instance caps per segmentation class (Empty slot unlimited).
  std::array<int, 5> max_count = {99, 3, 2, 2, 3};
  float noise = 0.015f;  // background/sensor noise amplitude

  void validate() const {
    MDSP_CHECK(image_size >= 32 && image_size % 32 == 0,
               "gen: image_size must be a positive multiple of 32, got " << image_size);
    MDSP_CHECK(min_slots >= 1 && min_slots <= max_slots && max_slots <= 4,
               "gen: bad slot range [" << min_slots << ", " << max_slots << "]");
    float s = 0;
    for (float w : slot_weights) {
      MDSP_CHECK(w >= 0, "gen: negative slot weight");
      s += w;
    }
    MDSP_CHECK(s > 0, "gen: slot weights sum to zero");
    MDSP_CHECK(noise >= 0 && noise <= 0.1f, "gen: noise must be in [0, 0.1], got " << noise);
  }
};

struct Sample {
  Tensor<float> image;  // (3, H, W) in [0, 1]
  SceneAnnotation ann;
};

Sample generate_scene(const GenSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// target encoding
// ---------------------------------------------------------------------------

// Per-image detection targets, scale-major layout matching the raw head
// output reshaped to (anchors, 5+C, N, N). States: obj 1 marks the single
// best (scale, cell, anchor) of each box; ignore 1 marks non-best anchors
// with co-centered IoU above 0.5.
struct DetectTargetsImage {
  std::array<std::vector<float>, 3> obj;     // (A, 1, N, N) flattened
  std::array<std::vector<float>, 3> ignore;  // same layout
  std::array<std::vector<float>, 3> box;     // (A, 4, N, N): tx, ty, tw, th
  std::array<std::vector<int>, 3> cls;       // (A * N * N), -1 off positives
};

DetectTargetsImage encode_detect_targets(const SceneAnnotation& ann, const NetworkSpec& spec);

// Stride-8 pose targets. Heatmap channel k holds the max over persons of a
// Gaussian (sigma = 2 cells) anchored at the center of the cell containing
// keypoint k, so that cell reads exactly 1; the extra last channel is
// 1 minus the maximum over keypoint channels. PAF channels hold the limb
// unit direction inside a corridor of half-width 1 cell, averaged where
// persons overlap.
struct PoseTargetsImage {
  int h8 = 0, w8 = 0;
  std::vector<float> paf;      // (2L, h8, w8)
  std::vector<float> heatmap;  // (K+1, h8, w8)
};

PoseTargetsImage encode_pose_targets(const SceneAnnotation& ann, const NetworkSpec& spec);

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

struct AugmentParams {
  float angle_deg = 0;    // rotation about the image center
  bool mirror = false;    // horizontal flip (swaps left/right keypoints)
  bool vflip = false;     // vertical flip
  float scale = 1.0f;     // zoom about the center, cropped/padded back
  float noise_sigma = 0;  // additive Gaussian noise after the transform

  bool is_identity() const {
    return angle_deg == 0 && !mirror && !vflip && scale == 1.0f && noise_sigma == 0;
  }
};

// Rotation +-15 degrees, mirror p = 0.5, vertical flip p = 0.1,
// scale 0.8 - 1.2, noise sigma in [0, 0.02].
AugmentParams sample_augment_params(Rng& rng);

// Applies the transform to image and annotation consistently. Instances
// whose transformed box leaves the image are dropped; keypoints landing
// outside are marked absent. noise_rng drives the additive noise only.
Sample apply_augment(const Sample& in, const AugmentParams& params, Rng& noise_rng);

inline Sample augment(const Sample& in, Rng& rng) {
  const AugmentParams p = sample_augment_params(rng);
  return apply_augment(in, p, rng);
}

// ---------------------------------------------------------------------------
// dataset on disk
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::string& path);

// Row-major run-length encoding of a label map: list of [class, run] pairs.
std::vector<std::pair<int, int>> rle_encode(const std::vector<int>& labels);
std::vector<int> rle_decode(const std::vector<std::pair<int, int>>& runs, std::size_t expected);

nlohmann::json annotation_to_json(const SceneAnnotation& ann, const std::string& image_rel_path);
SceneAnnotation annotation_from_json(const nlohmann::json& j, std::string* image_rel_path = nullptr);

// Writes images/NNNN.ppm plus annotations.jsonl under dir; returns instance
// counts per segmentation class (index 0 counts scenes with no instances).
std::array<int, 5> write_dataset(const std::string& dir, const GenSpec& spec, int count,
                                 std::uint64_t seed);

std::vector<Sample> load_dataset(const std::string& dir);

// All (w, h) box extents of a dataset, for anchor clustering.
std::vector<std::pair<float, float>> collect_box_sizes(const std::vector<Sample>& data);

// ---------------------------------------------------------------------------
// overlays (infer command)
// ---------------------------------------------------------------------------

void draw_box_overlay(Tensor<float>& image, const Box& box, const std::array<float, 3>& color);
void draw_seg_overlay(Tensor<float>& image, const std::vector<int>& labels, float alpha = 0.35f);
void draw_skeleton_overlay(Tensor<float>& image, const Skeleton& skel,
                           const std::vector<std::pair<int, int>>& limbs,
                           const std::array<float, 3>& color);

}  // namespace mdsp
