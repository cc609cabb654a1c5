#include "mdsp/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "mdsp/geometry.hpp"

namespace mdsp {
namespace {

using Color = std::array<float, 3>;
using ColorFn = std::function<Color(int, int)>;

constexpr float kFillGray = 0.12f;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Pixel centers sit at integer coordinates; pixel (x, y) covers
// [x - 0.5, x + 0.5] x [y - 0.5, y + 0.5].
struct Canvas {
  int size = 0;
  std::vector<float> rgb;     // (3, S, S)
  std::vector<int> labels;    // (S, S)
  std::vector<int> instance;  // (S, S), -1 where none

  explicit Canvas(int s)
      : size(s),
        rgb(static_cast<size_t>(3 * s * s), 0.0f),
        labels(static_cast<size_t>(s * s), 0),
        instance(static_cast<size_t>(s * s), -1) {}

  void put(int x, int y, const Color& c, int cls, int inst) {
    if (x < 0 || y < 0 || x >= size || y >= size) return;
    const size_t p = static_cast<size_t>(y * size + x);
    const size_t plane = static_cast<size_t>(size * size);
    rgb[p] = c[0];
    rgb[plane + p] = c[1];
    rgb[2 * plane + p] = c[2];
    if (cls >= 0) labels[p] = cls;
    if (inst >= 0) instance[p] = inst;
  }
};

void fill_ellipse(Canvas& c, float cx, float cy, float rx, float ry, const ColorFn& col, int cls,
                  int inst) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
  const int x1 = std::min(c.size - 1, static_cast<int>(std::ceil(cx + rx)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
  const int y1 = std::min(c.size - 1, static_cast<int>(std::ceil(cy + ry)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const float dx = (static_cast<float>(x) - cx) / rx;
      const float dy = (static_cast<float>(y) - cy) / ry;
      if (dx * dx + dy * dy <= 1.0f) c.put(x, y, col(x, y), cls, inst);
    }
}

// Thick segment with round caps.
void fill_capsule(Canvas& c, float ax, float ay, float bx, float by, float r, const ColorFn& col,
                  int cls, int inst) {
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - r)));
  const int x1 = std::min(c.size - 1, static_cast<int>(std::ceil(std::max(ax, bx) + r)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - r)));
  const int y1 = std::min(c.size - 1, static_cast<int>(std::ceil(std::max(ay, by) + r)));
  const float ux = bx - ax, uy = by - ay;
  const float len2 = ux * ux + uy * uy;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const float px = static_cast<float>(x) - ax, py = static_cast<float>(y) - ay;
      float t = len2 > 0 ? (px * ux + py * uy) / len2 : 0.0f;
      t = std::clamp(t, 0.0f, 1.0f);
      const float dx = px - t * ux, dy = py - t * uy;
      if (dx * dx + dy * dy <= r * r) c.put(x, y, col(x, y), cls, inst);
    }
}

void fill_rect(Canvas& c, float x0f, float y0f, float x1f, float y1f, const ColorFn& col, int cls,
               int inst) {
  const int x0 = std::max(0, static_cast<int>(std::lround(x0f)));
  const int x1 = std::min(c.size - 1, static_cast<int>(std::lround(x1f)));
  const int y0 = std::max(0, static_cast<int>(std::lround(y0f)));
  const int y1 = std::min(c.size - 1, static_cast<int>(std::lround(y1f)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) c.put(x, y, col(x, y), cls, inst);
}

ColorFn flat(const Color& c) {
  return [c](int, int) { return c; };
}

Color jitter_color(Rng& rng, const Color& base, float amount) {
  Color out;
  for (int i = 0; i < 3; ++i)
    out[static_cast<size_t>(i)] = std::clamp(
        base[static_cast<size_t>(i)] + static_cast<float>(rng.uniform(-amount, amount)), 0.02f,
        0.98f);
  return out;
}

void draw_background(Canvas& c, Rng& rng) {
  const float top = static_cast<float>(rng.uniform(0.25, 0.4));
  const float bot = static_cast<float>(rng.uniform(0.1, 0.2));
  const float tint_r = static_cast<float>(rng.uniform(0.9, 1.1));
  const float tint_b = static_cast<float>(rng.uniform(0.9, 1.1));
  for (int y = 0; y < c.size; ++y) {
    const float v = top + (bot - top) * static_cast<float>(y) / static_cast<float>(c.size - 1);
    for (int x = 0; x < c.size; ++x) {
      const float ripple =
          0.015f * std::sin(static_cast<float>(x) * 0.21f + static_cast<float>(y) * 0.07f);
      const float g = v + ripple;
      c.put(x, y, {std::clamp(g * tint_r, 0.0f, 1.0f), g, std::clamp(g * tint_b, 0.0f, 1.0f)}, 0,
            -1);
    }
  }
}

// Muted bench silhouette behind each slot so empty slots still look like
// seating. Color only; keeps segmentation class 0.
void draw_seat_silhouette(Canvas& c, Rng& rng, float sx0, float sx1) {
  const float S = static_cast<float>(c.size);
  const Color col = jitter_color(rng, {0.22f, 0.2f, 0.24f}, 0.04f);
  const float back_top = S * static_cast<float>(rng.uniform(0.18, 0.24));
  const float pan_y = S * 0.66f;
  fill_rect(c, sx0 + (sx1 - sx0) * 0.08f, back_top, sx1 - (sx1 - sx0) * 0.08f, pan_y, flat(col), 0,
            -1);
  fill_rect(c, sx0 + (sx1 - sx0) * 0.02f, pan_y, sx1 - (sx1 - sx0) * 0.02f, pan_y + S * 0.08f,
            flat(jitter_color(rng, col, 0.03f)), 0, -1);
}

PersonGT draw_person(Canvas& c, Rng& rng, float sx0, float sx1, int inst) {
  const float S = static_cast<float>(c.size);
  const float sw = sx1 - sx0;
  const float cx = 0.5f * (sx0 + sx1) + sw * static_cast<float>(rng.uniform(-0.06, 0.06));
  const float pw = sw * static_cast<float>(rng.uniform(0.5, 0.7));
  const float th = S * static_cast<float>(rng.uniform(0.28, 0.38));
  const float ty = S * static_cast<float>(rng.uniform(0.42, 0.55));
  const float hr = std::max(2.5f, pw * static_cast<float>(rng.uniform(0.22, 0.3)));
  const float hy = ty - 0.5f * th - 0.6f * hr;

  const Color shirt = jitter_color(rng, {0.35f, 0.45f, 0.7f}, 0.2f);
  const Color skin = jitter_color(rng, {0.85f, 0.68f, 0.55f}, 0.08f);
  const Color pants = jitter_color(rng, {0.3f, 0.3f, 0.35f}, 0.1f);

  const float shoulder_y = ty - 0.32f * th;
  const float hip_y = ty + 0.30f * th;
  const float shoulder_dx = 0.30f * pw;
  const float hip_dx = 0.26f * pw;
  const float limb_r = std::max(3.0f, 0.12f * pw);

  std::array<float, 2> knee_y{}, knee_x{};
  for (int side = 0; side < 2; ++side) {
    const float sgn = side == 0 ? -1.0f : 1.0f;
    knee_x[static_cast<size_t>(side)] =
        cx + sgn * (hip_dx + pw * static_cast<float>(rng.uniform(0.05, 0.15)));
    knee_y[static_cast<size_t>(side)] = std::min(
        S - 4.0f, hip_y + S * static_cast<float>(rng.uniform(0.10, 0.16)));
  }

  // Legs first so the torso overlaps their upper ends.
  for (int side = 0; side < 2; ++side) {
    const float sgn = side == 0 ? -1.0f : 1.0f;
    const float hx = cx + sgn * hip_dx;
    const float kx = knee_x[static_cast<size_t>(side)], ky = knee_y[static_cast<size_t>(side)];
    fill_capsule(c, hx, hip_y, kx, ky, limb_r, flat(pants), 1, inst);
    const float shin_y = std::min(S - 3.0f, ky + S * static_cast<float>(rng.uniform(0.06, 0.1)));
    fill_capsule(c, kx, ky, kx + sgn * 0.03f * pw, shin_y, limb_r * 0.85f, flat(pants), 1, inst);
  }
  fill_ellipse(c, cx, ty, 0.5f * pw, 0.5f * th, flat(shirt), 1, inst);
  for (int side = 0; side < 2; ++side) {
    const float sgn = side == 0 ? -1.0f : 1.0f;
    const float sx = cx + sgn * shoulder_dx;
    const float ex = sx + sgn * 0.2f * pw;
    const float ey = shoulder_y + 0.35f * th;
    fill_capsule(c, sx, shoulder_y, ex, ey, std::max(2.0f, 0.09f * pw), flat(shirt), 1, inst);
  }
  fill_capsule(c, cx, hy + hr * 0.5f, cx, ty - 0.4f * th, std::max(2.0f, 0.3f * hr), flat(skin), 1,
               inst);
  fill_ellipse(c, cx, hy, hr, hr * 1.1f, flat(skin), 1, inst);

  PersonGT gt;
  gt.keypoints.resize(7);
  auto set_kp = [&gt](int idx, float x, float y) {
    gt.keypoints[static_cast<size_t>(idx)] = Keypoint{x, y, 1.0f, true};
  };
  set_kp(0, cx, hy);
  set_kp(1, cx - shoulder_dx, shoulder_y);
  set_kp(2, cx + shoulder_dx, shoulder_y);
  set_kp(3, cx - hip_dx, hip_y);
  set_kp(4, cx + hip_dx, hip_y);
  set_kp(5, knee_x[0], knee_y[0]);
  set_kp(6, knee_x[1], knee_y[1]);
  return gt;
}

void draw_child_seat(Canvas& c, Rng& rng, float sx0, float sx1, int inst) {
  const float S = static_cast<float>(c.size);
  const float sw = sx1 - sx0;
  const float cx = 0.5f * (sx0 + sx1) + sw * static_cast<float>(rng.uniform(-0.05, 0.05));
  const float w = sw * static_cast<float>(rng.uniform(0.55, 0.75));
  const float top = S * static_cast<float>(rng.uniform(0.3, 0.4));
  const float bottom = S * static_cast<float>(rng.uniform(0.68, 0.76));
  const Color base = jitter_color(rng, {0.2f, 0.55f, 0.35f}, 0.15f);
  const Color stripe = jitter_color(rng, base, 0.18f);
  const int band = std::max(2, c.size / 32);
  ColorFn striped = [base, stripe, band](int, int y) {
    return (y / band) % 2 == 0 ? base : stripe;
  };
  fill_rect(c, cx - 0.5f * w, top, cx + 0.5f * w, bottom, striped, 2, inst);
  fill_ellipse(c, cx, top, 0.5f * w, 0.1f * (bottom - top), striped, 2, inst);
  // Seat pan sticking out forward.
  fill_rect(c, cx - 0.62f * w, bottom - 0.12f * (bottom - top), cx + 0.62f * w, bottom, striped, 2,
            inst);
}

void draw_infant_seat(Canvas& c, Rng& rng, float sx0, float sx1, int inst) {
  const float S = static_cast<float>(c.size);
  const float sw = sx1 - sx0;
  const float cx = 0.5f * (sx0 + sx1) + sw * static_cast<float>(rng.uniform(-0.05, 0.05));
  const float rx = sw * static_cast<float>(rng.uniform(0.3, 0.4));
  const float ry = S * static_cast<float>(rng.uniform(0.16, 0.22));
  const float cy = S * static_cast<float>(rng.uniform(0.5, 0.6));
  const Color base = jitter_color(rng, {0.55f, 0.3f, 0.6f}, 0.15f);
  const Color stripe = jitter_color(rng, base, 0.18f);
  const int band = std::max(2, c.size / 32);
  ColorFn diagonal = [base, stripe, band](int x, int y) {
    return ((x + y) / band) % 2 == 0 ? base : stripe;
  };
  fill_ellipse(c, cx, cy, rx, ry, diagonal, 3, inst);
  // Carry handle arc approximated by a capsule across the top.
  fill_capsule(c, cx - 0.7f * rx, cy - 0.9f * ry, cx + 0.7f * rx, cy - 0.9f * ry,
               std::max(2.0f, 0.08f * S * 0.2f), diagonal, 3, inst);
}

void draw_object(Canvas& c, Rng& rng, float sx0, float sx1, int inst) {
  const float S = static_cast<float>(c.size);
  const float sw = sx1 - sx0;
  const float cx = 0.5f * (sx0 + sx1) + sw * static_cast<float>(rng.uniform(-0.15, 0.15));
  const float cy = S * static_cast<float>(rng.uniform(0.55, 0.75));
  const float rx = sw * static_cast<float>(rng.uniform(0.12, 0.22));
  const float ry = S * static_cast<float>(rng.uniform(0.04, 0.09));
  const Color base = jitter_color(rng, {0.8f, 0.7f, 0.25f}, 0.25f);
  fill_ellipse(c, cx, cy, rx, ry, flat(base), 4, inst);
  const int lobes = rng.uniform_int(1, 2);
  for (int i = 0; i < lobes; ++i) {
    const float ox = cx + rx * static_cast<float>(rng.uniform(-0.6, 0.6));
    const float oy = cy + ry * static_cast<float>(rng.uniform(-0.8, 0.2));
    fill_ellipse(c, ox, oy, rx * static_cast<float>(rng.uniform(0.4, 0.7)),
                 ry * static_cast<float>(rng.uniform(0.5, 1.0)), flat(jitter_color(rng, base, 0.1f)),
                 4, inst);
  }
}

struct InstanceInfo {
  int seg_class = 0;
  int person_index = -1;  // into the persons vector when seg_class == 1
};

}  // namespace

Sample generate_scene(const GenSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(mix_seed(seed, 0));
  const int S = spec.image_size;
  Canvas canvas(S);
  draw_background(canvas, rng);

  const int n_slots = rng.uniform_int(spec.min_slots, spec.max_slots);
  const float margin = static_cast<float>(S) / 16.0f;
  const float gap = static_cast<float>(S) / 32.0f;
  const float usable = static_cast<float>(S) - 2 * margin - gap * static_cast<float>(n_slots - 1);
  const float sw = usable / static_cast<float>(n_slots);

  SceneAnnotation ann;
  ann.width = S;
  ann.height = S;
  std::vector<InstanceInfo> infos;
  std::array<int, 5> counts{};

  for (int s = 0; s < n_slots; ++s) {
    const float sx0 = margin + static_cast<float>(s) * (sw + gap);
    const float sx1 = sx0 + sw;
    draw_seat_silhouette(canvas, rng, sx0, sx1);

    std::array<float, 5> w = spec.slot_weights;
    for (int cls = 0; cls < 5; ++cls)
      if (counts[static_cast<size_t>(cls)] >= spec.max_count[static_cast<size_t>(cls)])
        w[static_cast<size_t>(cls)] = 0;
    float total = 0;
    for (float v : w) total += v;
    int pick = 0;
    if (total > 0) {
      const float r = static_cast<float>(rng.uniform()) * total;
      float acc = 0;
      for (int cls = 0; cls < 5; ++cls) {
        acc += w[static_cast<size_t>(cls)];
        if (r < acc) {
          pick = cls;
          break;
        }
      }
    }
    counts[static_cast<size_t>(pick)]++;
    if (pick == 0) continue;

    const int inst = static_cast<int>(infos.size());
    InstanceInfo info;
    info.seg_class = pick;
    if (pick == 1) {
      info.person_index = static_cast<int>(ann.persons.size());
      ann.persons.push_back(draw_person(canvas, rng, sx0, sx1, inst));
    } else if (pick == 2) {
      draw_child_seat(canvas, rng, sx0, sx1, inst);
    } else if (pick == 3) {
      draw_infant_seat(canvas, rng, sx0, sx1, inst);
    } else {
      draw_object(canvas, rng, sx0, sx1, inst);
    }
    infos.push_back(info);
  }

  // Boxes from the pixels each instance actually owns in the final maps.
  std::vector<std::array<int, 4>> extents(infos.size(), {S, S, -1, -1});
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int inst = canvas.instance[static_cast<size_t>(y * S + x)];
      if (inst < 0) continue;
      auto& e = extents[static_cast<size_t>(inst)];
      e[0] = std::min(e[0], x);
      e[1] = std::min(e[1], y);
      e[2] = std::max(e[2], x);
      e[3] = std::max(e[3], y);
    }
  for (size_t i = 0; i < infos.size(); ++i) {
    const auto& e = extents[i];
    MDSP_CHECK(e[2] >= 0, "generate_scene: instance " << i << " has no pixels");
    Box b;
    b.w = static_cast<float>(e[2] - e[0] + 1);
    b.h = static_cast<float>(e[3] - e[1] + 1);
    b.cx = 0.5f * static_cast<float>(e[0] + e[2]);
    b.cy = 0.5f * static_cast<float>(e[1] + e[3]);
    ann.boxes.push_back(GtBox{b, infos[i].seg_class - 1});
    if (infos[i].person_index >= 0)
      ann.persons[static_cast<size_t>(infos[i].person_index)].box = b;
  }

  Sample out;
  out.ann = std::move(ann);
  out.ann.label_map = std::move(canvas.labels);
  out.image = Tensor<float>::zeros({3, S, S});
  Rng noise_rng(mix_seed(seed, 1));
  for (size_t i = 0; i < canvas.rgb.size(); ++i) {
    float v = canvas.rgb[i];
    if (spec.noise > 0) v += static_cast<float>(noise_rng.normal(0.0, spec.noise));
    out.image.values()[i] = std::clamp(v, 0.0f, 1.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// target encoding
// ---------------------------------------------------------------------------

DetectTargetsImage encode_detect_targets(const SceneAnnotation& ann, const NetworkSpec& spec) {
  MDSP_CHECK(ann.width == spec.input_size && ann.height == spec.input_size,
             "encode_detect_targets: annotation is " << ann.width << "x" << ann.height
                                                     << " but the network expects "
                                                     << spec.input_size);
  const int A = NetworkSpec::anchors_per_scale;
  DetectTargetsImage t;
  for (int s = 0; s < NetworkSpec::num_scales; ++s) {
    const int N = spec.grid_size(s);
    t.obj[static_cast<size_t>(s)].assign(static_cast<size_t>(A * N * N), 0.0f);
    t.ignore[static_cast<size_t>(s)].assign(static_cast<size_t>(A * N * N), 0.0f);
    t.box[static_cast<size_t>(s)].assign(static_cast<size_t>(A * 4 * N * N), 0.0f);
    t.cls[static_cast<size_t>(s)].assign(static_cast<size_t>(A * N * N), -1);
  }

  const auto cell_of = [&spec](float coord, int scale) {
    const int N = spec.grid_size(scale);
    const float stride = static_cast<float>(NetworkSpec::scale_strides[static_cast<size_t>(scale)]);
    return std::clamp(static_cast<int>(std::floor(coord / stride)), 0, N - 1);
  };

  for (const GtBox& gb : ann.boxes) {
    const Box& b = gb.box;
    MDSP_CHECK(b.w > 0 && b.h > 0, "encode_detect_targets: degenerate box " << b.w << "x" << b.h);
    MDSP_CHECK(b.cx >= 0 && b.cx < static_cast<float>(ann.width) && b.cy >= 0 &&
                   b.cy < static_cast<float>(ann.height),
               "encode_detect_targets: box center (" << b.cx << ", " << b.cy
                                                     << ") falls outside the image");
    MDSP_CHECK(gb.class_id >= 0 && gb.class_id < spec.num_det_classes,
               "encode_detect_targets: class id " << gb.class_id << " out of range");

    int best = 0;
    float best_iou = -1;
    for (int g = 0; g < static_cast<int>(spec.anchors.size()); ++g) {
      const float v = iou_wh(b.w, b.h, spec.anchors[static_cast<size_t>(g)].w,
                             spec.anchors[static_cast<size_t>(g)].h);
      if (v > best_iou) {
        best_iou = v;
        best = g;
      }
    }

    for (int g = 0; g < static_cast<int>(spec.anchors.size()); ++g) {
      if (g == best) continue;
      const float v = iou_wh(b.w, b.h, spec.anchors[static_cast<size_t>(g)].w,
                             spec.anchors[static_cast<size_t>(g)].h);
      if (v <= 0.5f) continue;
      const int scale = NetworkSpec::num_scales - 1 - g / A;
      const int slot = g % A;
      const int N = spec.grid_size(scale);
      const int gx = cell_of(b.cx, scale), gy = cell_of(b.cy, scale);
      t.ignore[static_cast<size_t>(scale)][static_cast<size_t>((slot * N + gy) * N + gx)] = 1.0f;
    }

    const int scale = NetworkSpec::num_scales - 1 - best / A;
    const int slot = best % A;
    const int N = spec.grid_size(scale);
    const float stride = static_cast<float>(NetworkSpec::scale_strides[static_cast<size_t>(scale)]);
    const int gx = cell_of(b.cx, scale), gy = cell_of(b.cy, scale);
    const Anchor& a = spec.anchors[static_cast<size_t>(best)];

    const float fx = std::clamp(b.cx / stride - static_cast<float>(gx), 1e-6f, 1.0f - 1e-6f);
    const float fy = std::clamp(b.cy / stride - static_cast<float>(gy), 1e-6f, 1.0f - 1e-6f);
    const std::array<float, 4> offs = {std::log(fx / (1.0f - fx)), std::log(fy / (1.0f - fy)),
                                       std::log(b.w / a.w), std::log(b.h / a.h)};

    auto& obj = t.obj[static_cast<size_t>(scale)];
    auto& box = t.box[static_cast<size_t>(scale)];
    auto& cls = t.cls[static_cast<size_t>(scale)];
    obj[static_cast<size_t>((slot * N + gy) * N + gx)] = 1.0f;
    for (int ch = 0; ch < 4; ++ch)
      box[static_cast<size_t>(((slot * 4 + ch) * N + gy) * N + gx)] = offs[static_cast<size_t>(ch)];
    cls[static_cast<size_t>((slot * N + gy) * N + gx)] = gb.class_id;
  }
  return t;
}

PoseTargetsImage encode_pose_targets(const SceneAnnotation& ann, const NetworkSpec& spec) {
  MDSP_CHECK(ann.width == spec.input_size && ann.height == spec.input_size,
             "encode_pose_targets: annotation is " << ann.width << "x" << ann.height
                                                   << " but the network expects "
                                                   << spec.input_size);
  const int stride = NetworkSpec::scale_strides[2];
  const int K = spec.num_keypoints;
  const int L = spec.num_limbs();
  PoseTargetsImage t;
  t.h8 = ann.height / stride;
  t.w8 = ann.width / stride;
  const int H = t.h8, W = t.w8;
  t.heatmap.assign(static_cast<size_t>((K + 1) * H * W), 0.0f);
  t.paf.assign(static_cast<size_t>(2 * L * H * W), 0.0f);
  std::vector<int> paf_hits(static_cast<size_t>(L * H * W), 0);

  const float sigma = 2.0f * static_cast<float>(stride);
  const float half_width = static_cast<float>(stride);
  const auto cell_center = [stride](int j) {
    return (static_cast<float>(j) + 0.5f) * static_cast<float>(stride) - 0.5f;
  };

  for (const PersonGT& p : ann.persons) {
    MDSP_CHECK(static_cast<int>(p.keypoints.size()) == K,
               "encode_pose_targets: person has " << p.keypoints.size() << " keypoints, expected "
                                                  << K);
    for (int k = 0; k < K; ++k) {
      const Keypoint& kp = p.keypoints[static_cast<size_t>(k)];
      if (!kp.present) continue;
      // The Gaussian is anchored at the containing cell's center, so that
      // cell reads exactly 1 and the decoder's parabola refinement lands
      // back on it.
      const int kx = std::clamp(
          static_cast<int>(std::floor((kp.x + 0.5f) / static_cast<float>(stride))), 0, W - 1);
      const int ky = std::clamp(
          static_cast<int>(std::floor((kp.y + 0.5f) / static_cast<float>(stride))), 0, H - 1);
      const float ax = cell_center(kx), ay = cell_center(ky);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const float dx = cell_center(x) - ax;
          const float dy = cell_center(y) - ay;
          const float v = std::exp(-(dx * dx + dy * dy) / (2.0f * sigma * sigma));
          float& cell = t.heatmap[static_cast<size_t>((k * H + y) * W + x)];
          cell = std::max(cell, v);
        }
    }
    for (int l = 0; l < L; ++l) {
      const auto [ka, kb] = spec.limbs[static_cast<size_t>(l)];
      const Keypoint& a = p.keypoints[static_cast<size_t>(ka)];
      const Keypoint& b = p.keypoints[static_cast<size_t>(kb)];
      if (!a.present || !b.present) continue;
      const float lx = b.x - a.x, ly = b.y - a.y;
      const float len = std::sqrt(lx * lx + ly * ly);
      if (len < 1e-6f) continue;
      const float vx = lx / len, vy = ly / len;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const float px = cell_center(x) - a.x, py = cell_center(y) - a.y;
          const float proj = px * vx + py * vy;
          const float cross = std::abs(px * vy - py * vx);
          if (proj < 0 || proj > len || cross > half_width) continue;
          t.paf[static_cast<size_t>(((2 * l) * H + y) * W + x)] += vx;
          t.paf[static_cast<size_t>(((2 * l + 1) * H + y) * W + x)] += vy;
          paf_hits[static_cast<size_t>((l * H + y) * W + x)]++;
        }
    }
  }

  for (int l = 0; l < L; ++l)
    for (int i = 0; i < H * W; ++i) {
      const int n = paf_hits[static_cast<size_t>(l * H * W + i)];
      if (n > 1) {
        t.paf[static_cast<size_t>((2 * l) * H * W + i)] /= static_cast<float>(n);
        t.paf[static_cast<size_t>((2 * l + 1) * H * W + i)] /= static_cast<float>(n);
      }
    }

  for (int i = 0; i < H * W; ++i) {
    float peak = 0;
    for (int k = 0; k < K; ++k)
      peak = std::max(peak, t.heatmap[static_cast<size_t>(k * H * W + i)]);
    t.heatmap[static_cast<size_t>(K * H * W + i)] = 1.0f - peak;
  }
  return t;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

AugmentParams sample_augment_params(Rng& rng) {
  AugmentParams p;
  p.angle_deg = static_cast<float>(rng.uniform(-15.0, 15.0));
  p.mirror = rng.bernoulli(0.5);
  p.vflip = rng.bernoulli(0.1);
  p.scale = static_cast<float>(rng.uniform(0.8, 1.2));
  p.noise_sigma = static_cast<float>(rng.uniform(0.0, 0.02));
  return p;
}

namespace {

struct Affine {
  // p' = flips(R(s * (p - c))) + c
  float cx = 0, cy = 0, scale = 1, cos_t = 1, sin_t = 0;
  bool mirror = false, vflip = false;

  std::pair<float, float> forward(float x, float y) const {
    float tx = (x - cx) * scale, ty = (y - cy) * scale;
    const float rx = cos_t * tx - sin_t * ty;
    const float ry = sin_t * tx + cos_t * ty;
    tx = mirror ? -rx : rx;
    ty = vflip ? -ry : ry;
    return {tx + cx, ty + cy};
  }

  std::pair<float, float> inverse(float x, float y) const {
    float tx = x - cx, ty = y - cy;
    if (mirror) tx = -tx;
    if (vflip) ty = -ty;
    const float rx = cos_t * tx + sin_t * ty;
    const float ry = -sin_t * tx + cos_t * ty;
    return {rx / scale + cx, ry / scale + cy};
  }
};

}  // namespace

Sample apply_augment(const Sample& in, const AugmentParams& params, Rng& noise_rng) {
  const int S = in.ann.width;
  MDSP_CHECK(in.ann.height == S, "apply_augment: expected a square image");
  MDSP_CHECK(in.image.ndim() == 3 && in.image.dim(0) == 3 && in.image.dim(1) == S &&
                 in.image.dim(2) == S,
             "apply_augment: image shape " << shape_str(in.image.shape()) << " does not match the "
                                           << "annotation size " << S);
  MDSP_CHECK(params.scale > 0, "apply_augment: scale must be positive");

  Sample out;
  if (params.is_identity()) {
    out.image = in.image.clone_detached();
    out.ann = in.ann;
    return out;
  }

  Affine tf;
  tf.cx = tf.cy = 0.5f * static_cast<float>(S - 1);
  tf.scale = params.scale;
  const float rad = params.angle_deg * 3.14159265358979323846f / 180.0f;
  tf.cos_t = std::cos(rad);
  tf.sin_t = std::sin(rad);
  tf.mirror = params.mirror;
  tf.vflip = params.vflip;

  out.image = Tensor<float>::zeros({3, S, S});
  out.ann.width = S;
  out.ann.height = S;
  out.ann.label_map.assign(static_cast<size_t>(S * S), 0);
  const size_t plane = static_cast<size_t>(S * S);
  const float* src = in.image.values().data();
  float* dst = out.image.values().data();
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const auto [px, py] = tf.inverse(static_cast<float>(x), static_cast<float>(y));
      const int sx = static_cast<int>(std::lround(px));
      const int sy = static_cast<int>(std::lround(py));
      const size_t d = static_cast<size_t>(y * S + x);
      if (sx < 0 || sy < 0 || sx >= S || sy >= S) {
        dst[d] = dst[plane + d] = dst[2 * plane + d] = kFillGray;
        continue;
      }
      const size_t s = static_cast<size_t>(sy * S + sx);
      dst[d] = src[s];
      dst[plane + d] = src[plane + s];
      dst[2 * plane + d] = src[2 * plane + s];
      out.ann.label_map[d] = in.ann.label_map[s];
    }

  const auto map_box = [&tf, S](const Box& b, Box* result) {
    const std::array<std::pair<float, float>, 4> corners = {
        tf.forward(b.x1(), b.y1()), tf.forward(b.x2(), b.y1()), tf.forward(b.x1(), b.y2()),
        tf.forward(b.x2(), b.y2())};
    float x1 = corners[0].first, x2 = x1, y1 = corners[0].second, y2 = y1;
    for (const auto& [px, py] : corners) {
      x1 = std::min(x1, px);
      x2 = std::max(x2, px);
      y1 = std::min(y1, py);
      y2 = std::max(y2, py);
    }
    const float lim = static_cast<float>(S) - 0.5f;
    x1 = std::clamp(x1, -0.5f, lim);
    x2 = std::clamp(x2, -0.5f, lim);
    y1 = std::clamp(y1, -0.5f, lim);
    y2 = std::clamp(y2, -0.5f, lim);
    if (x2 - x1 <= 2.0f || y2 - y1 <= 2.0f) return false;
    *result = Box::from_corners(x1, y1, x2, y2);
    return true;
  };

  for (const GtBox& gb : in.ann.boxes) {
    Box mapped;
    if (map_box(gb.box, &mapped)) out.ann.boxes.push_back(GtBox{mapped, gb.class_id});
  }

  const auto mirror_map = mirror_keypoint_map(7);
  for (const PersonGT& p : in.ann.persons) {
    Box mapped;
    if (!map_box(p.box, &mapped)) continue;
    PersonGT q;
    q.box = mapped;
    q.keypoints.assign(p.keypoints.size(), Keypoint{});
    for (size_t k = 0; k < p.keypoints.size(); ++k) {
      const Keypoint& kp = p.keypoints[k];
      if (!kp.present) continue;
      const auto [px, py] = tf.forward(kp.x, kp.y);
      size_t slot = k;
      if (params.mirror && k < mirror_map.size()) slot = static_cast<size_t>(mirror_map[k]);
      if (px < 0 || py < 0 || px > static_cast<float>(S - 1) || py > static_cast<float>(S - 1))
        continue;
      q.keypoints[slot] = Keypoint{px, py, 1.0f, true};
    }
    out.ann.persons.push_back(std::move(q));
  }

  if (params.noise_sigma > 0) {
    for (float& v : out.image.values())
      v = std::clamp(v + static_cast<float>(noise_rng.normal(0.0, params.noise_sigma)), 0.0f, 1.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset on disk
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor<float>& image) {
  MDSP_CHECK(image.ndim() == 3 && image.dim(0) == 3,
             "write_ppm: expected a (3, H, W) image, got " << shape_str(image.shape()));
  const int H = image.dim(1), W = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  MDSP_CHECK(f.good(), "write_ppm: cannot open '" << path << "' for writing");
  f << "P6\n" << W << " " << H << "\n255\n";
  const size_t plane = static_cast<size_t>(H * W);
  const float* v = image.values().data();
  std::vector<unsigned char> row(static_cast<size_t>(3 * W));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const size_t p = static_cast<size_t>(y * W + x);
      for (int c = 0; c < 3; ++c) {
        const float val = std::clamp(v[static_cast<size_t>(c) * plane + p], 0.0f, 1.0f);
        row[static_cast<size_t>(3 * x + c)] =
            static_cast<unsigned char>(std::lround(val * 255.0f));
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  MDSP_CHECK(f.good(), "write_ppm: write to '" << path << "' failed");
}

namespace {

int ppm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one unsigned integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  MDSP_CHECK(c != EOF && std::isdigit(c), "read_ppm: malformed header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  MDSP_CHECK(f.good(), "read_ppm: cannot open '" << path << "'");
  char magic[2] = {0, 0};
  f.read(magic, 2);
  MDSP_CHECK(f.good() && magic[0] == 'P' && magic[1] == '6',
             "read_ppm: '" << path << "' is not a binary PPM file");
  const int W = ppm_token(f);
  const int H = ppm_token(f);
  const int maxval = ppm_token(f);
  MDSP_CHECK(W > 0 && H > 0, "read_ppm: bad dimensions " << W << "x" << H);
  MDSP_CHECK(maxval == 255, "read_ppm: only maxval 255 is supported, got " << maxval);
  std::vector<unsigned char> raw(static_cast<size_t>(3 * W * H));
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  MDSP_CHECK(f.gcount() == static_cast<std::streamsize>(raw.size()),
             "read_ppm: '" << path << "' is truncated");
  Tensor<float> img = Tensor<float>::zeros({3, H, W});
  const size_t plane = static_cast<size_t>(H * W);
  float* v = img.values().data();
  for (size_t p = 0; p < plane; ++p)
    for (size_t c = 0; c < 3; ++c)
      v[c * plane + p] = static_cast<float>(raw[3 * p + c]) / 255.0f;
  return img;
}

std::vector<std::pair<int, int>> rle_encode(const std::vector<int>& labels) {
  std::vector<std::pair<int, int>> runs;
  for (int v : labels) {
    if (!runs.empty() && runs.back().first == v) {
      runs.back().second++;
    } else {
      runs.emplace_back(v, 1);
    }
  }
  return runs;
}

std::vector<int> rle_decode(const std::vector<std::pair<int, int>>& runs, std::size_t expected) {
  std::vector<int> out;
  out.reserve(expected);
  for (const auto& [v, n] : runs) {
    MDSP_CHECK(n > 0, "rle_decode: non-positive run length " << n);
    out.insert(out.end(), static_cast<size_t>(n), v);
  }
  MDSP_CHECK(out.size() == expected,
             "rle_decode: decoded " << out.size() << " labels, expected " << expected);
  return out;
}

nlohmann::json annotation_to_json(const SceneAnnotation& ann, const std::string& image_rel_path) {
  nlohmann::json j;
  j["image"] = image_rel_path;
  j["width"] = ann.width;
  j["height"] = ann.height;
  nlohmann::json boxes = nlohmann::json::array();
  for (const GtBox& b : ann.boxes)
    boxes.push_back({{"cx", b.box.cx},
                     {"cy", b.box.cy},
                     {"w", b.box.w},
                     {"h", b.box.h},
                     {"class", b.class_id}});
  j["boxes"] = std::move(boxes);
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& [v, n] : rle_encode(ann.label_map)) runs.push_back({v, n});
  j["segmentation_rle"] = std::move(runs);
  nlohmann::json persons = nlohmann::json::array();
  for (const PersonGT& p : ann.persons) {
    nlohmann::json kps = nlohmann::json::array();
    for (const Keypoint& k : p.keypoints) {
      if (k.present) {
        kps.push_back({{"x", k.x}, {"y", k.y}});
      } else {
        kps.push_back(nullptr);
      }
    }
    persons.push_back({{"box",
                        {{"cx", p.box.cx}, {"cy", p.box.cy}, {"w", p.box.w}, {"h", p.box.h}}},
                       {"keypoints", std::move(kps)}});
  }
  j["persons"] = std::move(persons);
  return j;
}

SceneAnnotation annotation_from_json(const nlohmann::json& j, std::string* image_rel_path) {
  SceneAnnotation ann;
  if (image_rel_path) *image_rel_path = j.at("image").get<std::string>();
  ann.width = j.at("width").get<int>();
  ann.height = j.at("height").get<int>();
  MDSP_CHECK(ann.width > 0 && ann.height > 0, "annotation: bad size " << ann.width << "x"
                                                                      << ann.height);
  for (const auto& b : j.at("boxes")) {
    GtBox gb;
    gb.box = Box{b.at("cx").get<float>(), b.at("cy").get<float>(), b.at("w").get<float>(),
                 b.at("h").get<float>()};
    gb.class_id = b.at("class").get<int>();
    ann.boxes.push_back(gb);
  }
  std::vector<std::pair<int, int>> runs;
  for (const auto& r : j.at("segmentation_rle")) {
    MDSP_CHECK(r.is_array() && r.size() == 2, "annotation: malformed RLE entry");
    runs.emplace_back(r[0].get<int>(), r[1].get<int>());
  }
  ann.label_map = rle_decode(runs, static_cast<size_t>(ann.width) * static_cast<size_t>(ann.height));
  for (const auto& p : j.at("persons")) {
    PersonGT gt;
    const auto& b = p.at("box");
    gt.box = Box{b.at("cx").get<float>(), b.at("cy").get<float>(), b.at("w").get<float>(),
                 b.at("h").get<float>()};
    for (const auto& k : p.at("keypoints")) {
      if (k.is_null()) {
        gt.keypoints.push_back(Keypoint{});
      } else {
        gt.keypoints.push_back(Keypoint{k.at("x").get<float>(), k.at("y").get<float>(), 1.0f, true});
      }
    }
    ann.persons.push_back(std::move(gt));
  }
  return ann;
}

std::array<int, 5> write_dataset(const std::string& dir, const GenSpec& spec, int count,
                                 std::uint64_t seed) {
  spec.validate();
  MDSP_CHECK(count >= 0 && count <= 9999,
             "write_dataset: count must be in [0, 9999], got " << count);
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream manifest(fs::path(dir) / "annotations.jsonl");
  MDSP_CHECK(manifest.good(), "write_dataset: cannot write manifest under '" << dir << "'");

  std::array<int, 5> counts{};
  for (int i = 0; i < count; ++i) {
    const Sample s = generate_scene(spec, mix_seed(seed, 100 + static_cast<std::uint64_t>(i)));
    char name[32];
    std::snprintf(name, sizeof(name), "images/%04d.ppm", i);
    write_ppm((fs::path(dir) / name).string(), s.image);
    manifest << annotation_to_json(s.ann, name).dump() << "\n";
    for (const GtBox& b : s.ann.boxes) counts[static_cast<size_t>(b.class_id + 1)]++;
    if (s.ann.boxes.empty()) counts[0]++;
  }
  MDSP_CHECK(manifest.good(), "write_dataset: manifest write failed");
  return counts;
}

std::vector<Sample> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(dir) / "annotations.jsonl";
  std::ifstream manifest(manifest_path);
  MDSP_CHECK(manifest.good(), "load_dataset: cannot open '" << manifest_path.string() << "'");
  std::vector<Sample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      MDSP_CHECK(false, "load_dataset: bad JSON on line " << line_no << ": " << e.what());
    }
    Sample s;
    std::string rel;
    s.ann = annotation_from_json(j, &rel);
    s.image = read_ppm((fs::path(dir) / rel).string());
    MDSP_CHECK(s.image.dim(1) == s.ann.height && s.image.dim(2) == s.ann.width,
               "load_dataset: line " << line_no << ": image is " << s.image.dim(2) << "x"
                                     << s.image.dim(1) << " but the annotation says " << s.ann.width
                                     << "x" << s.ann.height);
    out.push_back(std::move(s));
  }
  MDSP_CHECK(!out.empty(), "load_dataset: '" << manifest_path.string() << "' holds no samples");
  return out;
}

std::vector<std::pair<float, float>> collect_box_sizes(const std::vector<Sample>& data) {
  std::vector<std::pair<float, float>> sizes;
  for (const Sample& s : data)
    for (const GtBox& b : s.ann.boxes) sizes.emplace_back(b.box.w, b.box.h);
  return sizes;
}

// ---------------------------------------------------------------------------
// overlays
// ---------------------------------------------------------------------------

namespace {

void set_px(Tensor<float>& image, int x, int y, const Color& c) {
  const int H = image.dim(1), W = image.dim(2);
  if (x < 0 || y < 0 || x >= W || y >= H) return;
  const size_t plane = static_cast<size_t>(H * W);
  const size_t p = static_cast<size_t>(y * W + x);
  float* v = image.values().data();
  v[p] = c[0];
  v[plane + p] = c[1];
  v[2 * plane + p] = c[2];
}

const std::array<Color, 5>& class_palette() {
  static const std::array<Color, 5> pal = {Color{0, 0, 0}, Color{0.9f, 0.2f, 0.2f},
                                           Color{0.2f, 0.8f, 0.3f}, Color{0.25f, 0.45f, 0.95f},
                                           Color{0.95f, 0.85f, 0.2f}};
  return pal;
}

}  // namespace

void draw_box_overlay(Tensor<float>& image, const Box& box, const Color& color) {
  const int x1 = static_cast<int>(std::lround(box.x1()));
  const int x2 = static_cast<int>(std::lround(box.x2()));
  const int y1 = static_cast<int>(std::lround(box.y1()));
  const int y2 = static_cast<int>(std::lround(box.y2()));
  for (int x = x1; x <= x2; ++x) {
    set_px(image, x, y1, color);
    set_px(image, x, y2, color);
  }
  for (int y = y1; y <= y2; ++y) {
    set_px(image, x1, y, color);
    set_px(image, x2, y, color);
  }
}

void draw_seg_overlay(Tensor<float>& image, const std::vector<int>& labels, float alpha) {
  const int H = image.dim(1), W = image.dim(2);
  MDSP_CHECK(labels.size() == static_cast<size_t>(H * W),
             "draw_seg_overlay: label map size " << labels.size() << " does not match " << W << "x"
                                                 << H);
  const auto& pal = class_palette();
  const size_t plane = static_cast<size_t>(H * W);
  float* v = image.values().data();
  for (size_t p = 0; p < plane; ++p) {
    const int cls = labels[p];
    if (cls <= 0) continue;
    MDSP_CHECK(cls < static_cast<int>(pal.size()), "draw_seg_overlay: label " << cls
                                                                              << " out of range");
    for (size_t c = 0; c < 3; ++c)
      v[c * plane + p] =
          (1 - alpha) * v[c * plane + p] + alpha * pal[static_cast<size_t>(cls)][c];
  }
}

void draw_skeleton_overlay(Tensor<float>& image, const Skeleton& skel,
                           const std::vector<std::pair<int, int>>& limbs, const Color& color) {
  const auto dot = [&image, &color](float x, float y) {
    const int cx = static_cast<int>(std::lround(x));
    const int cy = static_cast<int>(std::lround(y));
    for (int oy = -1; oy <= 1; ++oy)
      for (int ox = -1; ox <= 1; ++ox) set_px(image, cx + ox, cy + oy, color);
  };
  for (const auto& [a, b] : limbs) {
    if (a < 0 || b < 0 || a >= static_cast<int>(skel.keypoints.size()) ||
        b >= static_cast<int>(skel.keypoints.size()))
      continue;
    const Keypoint& ka = skel.keypoints[static_cast<size_t>(a)];
    const Keypoint& kb = skel.keypoints[static_cast<size_t>(b)];
    if (!ka.present || !kb.present) continue;
    const float steps = std::max(std::abs(kb.x - ka.x), std::abs(kb.y - ka.y));
    const int n = std::max(1, static_cast<int>(std::ceil(steps)));
    for (int i = 0; i <= n; ++i) {
      const float t = static_cast<float>(i) / static_cast<float>(n);
      set_px(image, static_cast<int>(std::lround(ka.x + t * (kb.x - ka.x))),
             static_cast<int>(std::lround(ka.y + t * (kb.y - ka.y))), color);
    }
  }
  for (const Keypoint& k : skel.keypoints)
    if (k.present) dot(k.x, k.y);
}

}  // namespace mdsp
