#include "mdsp/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdsp/rng.hpp"

namespace mdsp {

namespace {

inline float sigmoidf(float z) {
  if (z >= 0) return 1.0f / (1.0f + std::exp(-z));
  const float e = std::exp(z);
  return e / (1.0f + e);
}

}  // namespace

std::vector<Detection> decode_boxes(const RawDetectOutput<float>& raw, const NetworkSpec& spec,
                                    float conf_thresh, int batch_index) {
  MDSP_CHECK(conf_thresh >= 0.0f && conf_thresh <= 1.0f,
             "decode_boxes: conf_thresh must be in [0, 1], got " << conf_thresh);
  const int C = spec.num_det_classes;
  const int per_anchor = 5 + C;
  std::vector<Detection> out;
  std::vector<float> probs(static_cast<size_t>(C));
  for (int s = 0; s < NetworkSpec::num_scales; ++s) {
    const Tensor<float>& t = raw.scales[static_cast<size_t>(s)];
    MDSP_CHECK(t.ndim() == 4 && t.dim(1) == spec.det_depth(),
               "decode_boxes: scale " << s << " has shape " << shape_str(t.shape()) << ", expected depth "
                                      << spec.det_depth());
    MDSP_CHECK(batch_index >= 0 && batch_index < t.dim(0),
               "decode_boxes: batch index " << batch_index << " out of range");
    const int n = t.dim(2);
    const float stride = static_cast<float>(spec.scale_strides[static_cast<size_t>(s)]);
    const auto anchors = spec.scale_anchors(s);
    const std::int64_t plane = static_cast<std::int64_t>(n) * n;
    const float* base = t.data() + static_cast<std::int64_t>(batch_index) * spec.det_depth() * plane;
    for (int a = 0; a < NetworkSpec::anchors_per_scale; ++a) {
      const float* ap = base + static_cast<std::int64_t>(a) * per_anchor * plane;
      for (int gy = 0; gy < n; ++gy) {
        for (int gx = 0; gx < n; ++gx) {
          const std::int64_t off = static_cast<std::int64_t>(gy) * n + gx;
          const float obj = sigmoidf(ap[off]);
          // softmax over class logits
          float mx = ap[5 * plane + off];
          for (int c = 1; c < C; ++c) mx = std::max(mx, ap[(5 + c) * plane + off]);
          float denom = 0;
          for (int c = 0; c < C; ++c) {
            probs[static_cast<size_t>(c)] = std::exp(ap[(5 + c) * plane + off] - mx);
            denom += probs[static_cast<size_t>(c)];
          }
          int best = 0;
          for (int c = 1; c < C; ++c)
            if (probs[static_cast<size_t>(c)] > probs[static_cast<size_t>(best)]) best = c;
          const float score = obj * probs[static_cast<size_t>(best)] / denom;
          if (score < conf_thresh) continue;
          Detection d;
          d.box.cx = (sigmoidf(ap[1 * plane + off]) + static_cast<float>(gx)) * stride;
          d.box.cy = (sigmoidf(ap[2 * plane + off]) + static_cast<float>(gy)) * stride;
          d.box.w = anchors[static_cast<size_t>(a)].w * std::exp(ap[3 * plane + off]);
          d.box.h = anchors[static_cast<size_t>(a)].h * std::exp(ap[4 * plane + off]);
          d.class_id = best;
          d.score = score;
          out.push_back(d);
        }
      }
    }
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_thresh) {
  MDSP_CHECK(iou_thresh > 0.0f && iou_thresh < 1.0f,
             "nms: iou_thresh must be in (0, 1), got " << iou_thresh);
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&dets](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].class_id != dets[b].class_id) return dets[a].class_id < dets[b].class_id;
    return a < b;
  });
  std::vector<Detection> kept;
  std::vector<bool> removed(dets.size(), false);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const size_t i = order[oi];
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const size_t j = order[oj];
      if (removed[j] || dets[j].class_id != dets[i].class_id) continue;
      if (iou(dets[j].box, dets[i].box) > iou_thresh) removed[j] = true;
    }
  }
  return kept;
}

std::vector<Anchor> kmeans_anchors(const std::vector<std::pair<float, float>>& boxes, int k,
                                   std::uint64_t seed) {
  MDSP_CHECK(k >= 1, "kmeans_anchors: k must be positive, got " << k);
  std::vector<std::pair<float, float>> distinct = boxes;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  MDSP_CHECK(static_cast<int>(distinct.size()) >= k,
             "kmeans_anchors: k = " << k << " exceeds " << distinct.size() << " distinct boxes");
  for (const auto& [w, h] : boxes)
    MDSP_CHECK(w > 0 && h > 0, "kmeans_anchors: non-positive box extent (" << w << ", " << h << ")");

  const size_t n = boxes.size();
  auto dist = [&boxes](size_t i, const Anchor& c) {
    return 1.0f - iou_wh(boxes[i].first, boxes[i].second, c.w, c.h);
  };

  // k-means++ seeding
  Rng rng(seed);
  std::vector<Anchor> centroids;
  {
    const size_t first = static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
    centroids.push_back({boxes[first].first, boxes[first].second});
  }
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0;
    for (size_t i = 0; i < n; ++i) {
      float best = dist(i, centroids[0]);
      for (size_t c = 1; c < centroids.size(); ++c) best = std::min(best, dist(i, centroids[c]));
      d2[i] = static_cast<double>(best) * best;
      total += d2[i];
    }
    size_t pick = 0;
    if (total > 0) {
      const double r = rng.uniform() * total;
      double acc = 0;
      for (size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
        pick = i;
      }
    }
    centroids.push_back({boxes[pick].first, boxes[pick].second});
  }

  // Lloyd iterations to the assignment fixpoint
  std::vector<int> assign(n, -1);
  for (int round = 0; round < 300; ++round) {
    bool changed = false;
    for (size_t i = 0; i < n; ++i) {
      int best = 0;
      float bd = dist(i, centroids[0]);
      for (int c = 1; c < k; ++c) {
        const float d = dist(i, centroids[static_cast<size_t>(c)]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    for (int c = 0; c < k; ++c) {
      double sw = 0, sh = 0;
      std::int64_t cnt = 0;
      for (size_t i = 0; i < n; ++i) {
        if (assign[i] == c) {
          sw += boxes[i].first;
          sh += boxes[i].second;
          ++cnt;
        }
      }
      if (cnt > 0) {
        centroids[static_cast<size_t>(c)] = {static_cast<float>(sw / static_cast<double>(cnt)),
                                             static_cast<float>(sh / static_cast<double>(cnt))};
      }
    }
  }

  std::sort(centroids.begin(), centroids.end(),
            [](const Anchor& a, const Anchor& b) { return a.area() < b.area(); });
  return centroids;
}

std::vector<int> seg_decode(const Tensor<float>& logits, int batch_index) {
  MDSP_CHECK(logits.ndim() == 4, "seg_decode: expected NCHW logits, got " << shape_str(logits.shape()));
  const int C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  MDSP_CHECK(batch_index >= 0 && batch_index < logits.dim(0),
             "seg_decode: batch index " << batch_index << " out of range");
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const float* base = logits.data() + static_cast<std::int64_t>(batch_index) * C * plane;
  std::vector<int> labels(static_cast<size_t>(plane));
  for (std::int64_t i = 0; i < plane; ++i) {
    int best = 0;
    float bv = base[i];
    for (int c = 1; c < C; ++c) {
      const float v = base[static_cast<std::int64_t>(c) * plane + i];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    labels[static_cast<size_t>(i)] = best;
  }
  return labels;
}

Tensor<float> bilinear_resize(const Tensor<float>& x, int out_h, int out_w) {
  MDSP_CHECK(x.ndim() >= 2, "bilinear_resize: need at least 2 dims, got " << shape_str(x.shape()));
  MDSP_CHECK(out_h >= 1 && out_w >= 1, "bilinear_resize: bad output size " << out_h << "x" << out_w);
  const int H = x.dim(x.ndim() - 2), W = x.dim(x.ndim() - 1);
  std::int64_t planes = 1;
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(x.ndim() - 2)] = out_h;
  out_shape[static_cast<size_t>(x.ndim() - 1)] = out_w;
  for (int i = 0; i < x.ndim() - 2; ++i) planes *= x.dim(i);

  Tensor<float> out = Tensor<float>::zeros(out_shape);
  const float sy = static_cast<float>(H) / static_cast<float>(out_h);
  const float sx = static_cast<float>(W) / static_cast<float>(out_w);
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* src = x.data() + p * H * W;
    float* dst = out.data() + p * static_cast<std::int64_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      float fy = (static_cast<float>(oy) + 0.5f) * sy - 0.5f;
      fy = std::clamp(fy, 0.0f, static_cast<float>(H - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, H - 1);
      const float wy = fy - static_cast<float>(y0);
      for (int ox = 0; ox < out_w; ++ox) {
        float fx = (static_cast<float>(ox) + 0.5f) * sx - 0.5f;
        fx = std::clamp(fx, 0.0f, static_cast<float>(W - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, W - 1);
        const float wx = fx - static_cast<float>(x0);
        const float v00 = src[static_cast<std::int64_t>(y0) * W + x0];
        const float v01 = src[static_cast<std::int64_t>(y0) * W + x1];
        const float v10 = src[static_cast<std::int64_t>(y1) * W + x0];
        const float v11 = src[static_cast<std::int64_t>(y1) * W + x1];
        dst[static_cast<std::int64_t>(oy) * out_w + ox] =
            v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx + v10 * wy * (1 - wx) + v11 * wy * wx;
      }
    }
  }
  return out;
}

std::vector<std::vector<Peak>> find_peaks(const Tensor<float>& heatmap, float thresh) {
  MDSP_CHECK(heatmap.ndim() == 3, "find_peaks: expected (channels, H, W), got " << shape_str(heatmap.shape()));
  const int C = heatmap.dim(0), H = heatmap.dim(1), W = heatmap.dim(2);
  std::vector<std::vector<Peak>> out(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    const float* m = heatmap.data() + static_cast<std::int64_t>(c) * H * W;
    auto at = [m, H, W](int y, int x) {
      if (y < 0 || y >= H || x < 0 || x >= W) return -std::numeric_limits<float>::infinity();
      return m[static_cast<std::int64_t>(y) * W + x];
    };
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const float v = at(y, x);
        if (v < thresh) continue;
        if (v > at(y, x - 1) && v > at(y - 1, x) && v >= at(y, x + 1) && v >= at(y + 1, x)) {
          out[static_cast<size_t>(c)].push_back(
              {static_cast<float>(x), static_cast<float>(y), v});
        }
      }
    }
  }
  return out;
}

PafScore paf_score_detail(const Tensor<float>& paf, float x1, float y1, float x2, float y2,
                          int n_samples, float sample_thresh) {
  MDSP_CHECK(paf.ndim() == 3 && paf.dim(0) == 2,
             "paf_score: expected a (2, H, W) field, got " << shape_str(paf.shape()));
  MDSP_CHECK(n_samples >= 2, "paf_score: need at least 2 samples, got " << n_samples);
  const int H = paf.dim(1), W = paf.dim(2);
  const float dx = x2 - x1, dy = y2 - y1;
  const float len = std::sqrt(dx * dx + dy * dy);
  if (len == 0) return {0.0f, 0.0f};
  const float ux = dx / len, uy = dy / len;
  const float* px = paf.data();
  const float* py = paf.data() + static_cast<std::int64_t>(H) * W;
  float sum = 0;
  int above = 0;
  for (int i = 0; i < n_samples; ++i) {
    const float t = static_cast<float>(i) / static_cast<float>(n_samples - 1);
    int sxp = static_cast<int>(std::lround(x1 + t * dx));
    int syp = static_cast<int>(std::lround(y1 + t * dy));
    sxp = std::clamp(sxp, 0, W - 1);
    syp = std::clamp(syp, 0, H - 1);
    const std::int64_t off = static_cast<std::int64_t>(syp) * W + sxp;
    const float d = px[off] * ux + py[off] * uy;
    sum += d;
    if (d >= sample_thresh) ++above;
  }
  return {sum / static_cast<float>(n_samples), static_cast<float>(above) / static_cast<float>(n_samples)};
}

float paf_score(const Tensor<float>& paf, float x1, float y1, float x2, float y2, int n_samples) {
  return paf_score_detail(paf, x1, y1, x2, y2, n_samples, 0.0f).mean;
}

namespace {

Tensor<float> limb_field(const Tensor<float>& pafs, int limb) {
  const int H = pafs.dim(1), W = pafs.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor<float> f = Tensor<float>::zeros({2, H, W});
  std::copy(pafs.data() + (2 * limb) * plane, pafs.data() + (2 * limb + 2) * plane, f.data());
  return f;
}

}  // namespace

std::vector<Skeleton> assemble_skeletons(const std::vector<std::vector<Peak>>& candidates,
                                         const Tensor<float>& pafs,
                                         const std::vector<std::pair<int, int>>& limbs,
                                         const AssemblyParams& params) {
  MDSP_CHECK(pafs.ndim() == 3 && pafs.dim(0) == 2 * static_cast<int>(limbs.size()),
             "assemble_skeletons: paf tensor " << shape_str(pafs.shape()) << " does not match "
                                               << limbs.size() << " limbs");
  const int K = static_cast<int>(candidates.size());

  struct Connection {
    int limb, ia, ib;
    float score;
  };
  std::vector<Connection> connections;

  for (size_t l = 0; l < limbs.size(); ++l) {
    const auto [ka, kb] = limbs[l];
    MDSP_CHECK(ka >= 0 && ka < K && kb >= 0 && kb < K,
               "assemble_skeletons: limb (" << ka << ", " << kb << ") out of range for " << K
                                            << " keypoint channels");
    const Tensor<float> field = limb_field(pafs, static_cast<int>(l));
    struct Pair {
      float score;
      int ia, ib;
    };
    std::vector<Pair> pairs;
    const auto& ca = candidates[static_cast<size_t>(ka)];
    const auto& cb = candidates[static_cast<size_t>(kb)];
    for (size_t i = 0; i < ca.size(); ++i) {
      for (size_t j = 0; j < cb.size(); ++j) {
        const PafScore s = paf_score_detail(field, ca[i].x, ca[i].y, cb[j].x, cb[j].y,
                                            params.n_samples, params.sample_thresh);
        if (s.mean >= params.min_score && s.frac_above >= params.min_frac) {
          pairs.push_back({s.mean, static_cast<int>(i), static_cast<int>(j)});
        }
      }
    }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.ia != b.ia) return a.ia < b.ia;
      return a.ib < b.ib;
    });
    std::vector<bool> used_a(ca.size(), false), used_b(cb.size(), false);
    for (const auto& p : pairs) {
      if (used_a[static_cast<size_t>(p.ia)] || used_b[static_cast<size_t>(p.ib)]) continue;
      used_a[static_cast<size_t>(p.ia)] = true;
      used_b[static_cast<size_t>(p.ib)] = true;
      connections.push_back({static_cast<int>(l), p.ia, p.ib, p.score});
    }
  }

  struct Proto {
    std::vector<int> cand;  // candidate index per keypoint channel, -1 if empty
    float limb_score_sum = 0;
    int limb_count = 0;
  };
  std::vector<Proto> protos;

  auto find_with = [&protos](int k, int cand_idx) -> int {
    for (size_t s = 0; s < protos.size(); ++s)
      if (protos[s].cand[static_cast<size_t>(k)] == cand_idx) return static_cast<int>(s);
    return -1;
  };

  for (const auto& con : connections) {
    const auto [ka, kb] = limbs[static_cast<size_t>(con.limb)];
    const int sa = find_with(ka, con.ia);
    const int sb = find_with(kb, con.ib);
    if (sa < 0 && sb < 0) {
      Proto p;
      p.cand.assign(static_cast<size_t>(K), -1);
      p.cand[static_cast<size_t>(ka)] = con.ia;
      p.cand[static_cast<size_t>(kb)] = con.ib;
      p.limb_score_sum = con.score;
      p.limb_count = 1;
      protos.push_back(std::move(p));
    } else if (sa >= 0 && sb < 0) {
      Proto& p = protos[static_cast<size_t>(sa)];
      if (p.cand[static_cast<size_t>(kb)] >= 0) continue;  // slot already taken by another candidate
      p.cand[static_cast<size_t>(kb)] = con.ib;
      p.limb_score_sum += con.score;
      p.limb_count += 1;
    } else if (sa < 0 && sb >= 0) {
      Proto& p = protos[static_cast<size_t>(sb)];
      if (p.cand[static_cast<size_t>(ka)] >= 0) continue;
      p.cand[static_cast<size_t>(ka)] = con.ia;
      p.limb_score_sum += con.score;
      p.limb_count += 1;
    } else if (sa == sb) {
      Proto& p = protos[static_cast<size_t>(sa)];
      p.limb_score_sum += con.score;
      p.limb_count += 1;
    } else {
      Proto& a = protos[static_cast<size_t>(sa)];
      Proto& b = protos[static_cast<size_t>(sb)];
      bool disjoint = true;
      for (int k = 0; k < K; ++k)
        if (a.cand[static_cast<size_t>(k)] >= 0 && b.cand[static_cast<size_t>(k)] >= 0) disjoint = false;
      if (!disjoint) continue;
      for (int k = 0; k < K; ++k)
        if (b.cand[static_cast<size_t>(k)] >= 0) a.cand[static_cast<size_t>(k)] = b.cand[static_cast<size_t>(k)];
      a.limb_score_sum += b.limb_score_sum + con.score;
      a.limb_count += b.limb_count + 1;
      protos.erase(protos.begin() + sb);
    }
  }

  std::vector<Skeleton> out;
  for (const auto& p : protos) {
    Skeleton s;
    s.keypoints.assign(static_cast<size_t>(K), Keypoint{});
    float conf_sum = 0;
    int present = 0;
    for (int k = 0; k < K; ++k) {
      const int ci = p.cand[static_cast<size_t>(k)];
      if (ci < 0) continue;
      const Peak& pk = candidates[static_cast<size_t>(k)][static_cast<size_t>(ci)];
      s.keypoints[static_cast<size_t>(k)] = {pk.x, pk.y, pk.conf, true};
      conf_sum += pk.conf;
      ++present;
    }
    s.score = (p.limb_score_sum + conf_sum) / static_cast<float>(p.limb_count + present);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Skeleton> decode_skeletons(const PoseRawOutput<float>& pose, const NetworkSpec& spec,
                                       float peak_thresh, int batch_index,
                                       const AssemblyParams& params) {
  MDSP_CHECK(!pose.pafs.empty() && pose.heatmaps.defined(), "decode_skeletons: incomplete pose output");
  const Tensor<float>& hm = pose.heatmaps;
  const Tensor<float>& paf = pose.pafs.back();
  const int B = hm.dim(0);
  MDSP_CHECK(batch_index >= 0 && batch_index < B, "decode_skeletons: batch index out of range");
  const int K = spec.num_keypoints;
  const int h8 = hm.dim(2), w8 = hm.dim(3);
  const int S = spec.input_size;
  const float stride = static_cast<float>(S) / static_cast<float>(w8);

  // one batch element, keypoint channels only (background dropped)
  Tensor<float> hm_k = Tensor<float>::zeros({K, h8, w8});
  const std::int64_t plane = static_cast<std::int64_t>(h8) * w8;
  std::copy(hm.data() + static_cast<std::int64_t>(batch_index) * hm.dim(1) * plane,
            hm.data() + static_cast<std::int64_t>(batch_index) * hm.dim(1) * plane + K * plane,
            hm_k.data());
  Tensor<float> paf_b = Tensor<float>::zeros({paf.dim(1), h8, w8});
  std::copy(paf.data() + static_cast<std::int64_t>(batch_index) * paf.dim(1) * plane,
            paf.data() + static_cast<std::int64_t>(batch_index + 1) * paf.dim(1) * plane,
            paf_b.data());

  Tensor<float> hm_full = bilinear_resize(hm_k, S, S);
  Tensor<float> paf_full = bilinear_resize(paf_b, S, S);

  auto candidates = find_peaks(hm_full, peak_thresh);

  // Quadratic sub-pixel refinement on the stride-8 grid: fit a parabola
  // through the three cells around the peak in each axis.
  for (auto& chan_peaks : candidates) {
    const int c = static_cast<int>(&chan_peaks - candidates.data());
    const float* m = hm_k.data() + static_cast<std::int64_t>(c) * plane;
    auto cell_at = [m, h8, w8](int y, int x) {
      y = std::clamp(y, 0, h8 - 1);
      x = std::clamp(x, 0, w8 - 1);
      return m[static_cast<std::int64_t>(y) * w8 + x];
    };
    for (auto& pk : chan_peaks) {
      const float gx = (pk.x + 0.5f) / stride - 0.5f;
      const float gy = (pk.y + 0.5f) / stride - 0.5f;
      const int cx = std::clamp(static_cast<int>(std::lround(gx)), 0, w8 - 1);
      const int cy = std::clamp(static_cast<int>(std::lround(gy)), 0, h8 - 1);
      auto refine = [](float vm, float v0, float vp) {
        const float denom = vm - 2 * v0 + vp;
        if (denom >= 0) return 0.0f;  // not a concave fit
        return std::clamp(0.5f * (vm - vp) / denom, -0.5f, 0.5f);
      };
      const float ox = refine(cell_at(cy, cx - 1), cell_at(cy, cx), cell_at(cy, cx + 1));
      const float oy = refine(cell_at(cy - 1, cx), cell_at(cy, cx), cell_at(cy + 1, cx));
      pk.x = (static_cast<float>(cx) + ox + 0.5f) * stride - 0.5f;
      pk.y = (static_cast<float>(cy) + oy + 0.5f) * stride - 0.5f;
      pk.x = std::clamp(pk.x, 0.0f, static_cast<float>(S - 1));
      pk.y = std::clamp(pk.y, 0.0f, static_cast<float>(S - 1));
    }
  }

  return assemble_skeletons(candidates, paf_full, spec.limbs, params);
}

}  // namespace mdsp
