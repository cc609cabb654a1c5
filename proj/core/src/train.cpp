#include "mdsp/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "mdsp/postprocess.hpp"
#include "mdsp/serialize.hpp"

namespace mdsp {
namespace {

double scalar_value(const Tensor<float>& t) {
  MDSP_CHECK(t.numel() == 1, "expected a scalar loss, got " << shape_str(t.shape()));
  return static_cast<double>(t.values()[0]);
}

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
}

}  // namespace

EncodedBatch encode_batch(const std::vector<Sample>& samples, const NetworkSpec& spec) {
  MDSP_CHECK(!samples.empty(), "encode_batch: empty batch");
  const int B = static_cast<int>(samples.size());
  const int S = spec.input_size;
  const TaskMask& mask = spec.task_mask;

  EncodedBatch batch;
  batch.images = Tensor<float>::zeros({B, 3, S, S});
  const size_t img_elems = static_cast<size_t>(3 * S * S);
  for (int b = 0; b < B; ++b) {
    const Sample& s = samples[static_cast<size_t>(b)];
    MDSP_CHECK(s.ann.width == S && s.ann.height == S,
               "encode_batch: sample is " << s.ann.width << "x" << s.ann.height
                                          << " but the network expects " << S);
    MDSP_CHECK(s.image.numel() == static_cast<std::int64_t>(img_elems),
               "encode_batch: image tensor does not match the annotation size");
    std::copy(s.image.values().begin(), s.image.values().end(),
              batch.images.values().begin() + static_cast<std::ptrdiff_t>(b) *
                                                  static_cast<std::ptrdiff_t>(img_elems));
  }

  if (mask.detect) {
    const int A = NetworkSpec::anchors_per_scale;
    std::vector<DetectTargetsImage> per_image;
    per_image.reserve(samples.size());
    for (const Sample& s : samples) per_image.push_back(encode_detect_targets(s.ann, spec));
    for (int sc = 0; sc < NetworkSpec::num_scales; ++sc) {
      const int N = spec.grid_size(sc);
      const size_t plane = static_cast<size_t>(A * N * N);
      std::vector<float> obj(static_cast<size_t>(B) * plane);
      std::vector<float> noobj(static_cast<size_t>(B) * plane);
      std::vector<float> box(static_cast<size_t>(B) * plane * 4);
      std::vector<float> box_mask(static_cast<size_t>(B) * plane * 4);
      std::vector<int> cls(static_cast<size_t>(B) * plane);
      for (int b = 0; b < B; ++b) {
        const auto& t = per_image[static_cast<size_t>(b)];
        const auto& o = t.obj[static_cast<size_t>(sc)];
        const auto& ig = t.ignore[static_cast<size_t>(sc)];
        const auto& bx = t.box[static_cast<size_t>(sc)];
        const auto& cl = t.cls[static_cast<size_t>(sc)];
        std::copy(o.begin(), o.end(), obj.begin() + static_cast<std::ptrdiff_t>(b) *
                                                        static_cast<std::ptrdiff_t>(plane));
        std::copy(bx.begin(), bx.end(), box.begin() + static_cast<std::ptrdiff_t>(b) *
                                                          static_cast<std::ptrdiff_t>(plane * 4));
        std::copy(cl.begin(), cl.end(), cls.begin() + static_cast<std::ptrdiff_t>(b) *
                                                          static_cast<std::ptrdiff_t>(plane));
        for (size_t i = 0; i < plane; ++i) {
          const size_t d = static_cast<size_t>(b) * plane + i;
          noobj[d] = (1.0f - o[i]) * (1.0f - ig[i]);
        }
        // Positive flags replicated across the four offset channels.
        for (int a = 0; a < A; ++a)
          for (int p = 0; p < N * N; ++p) {
            const float on = o[static_cast<size_t>(a * N * N + p)];
            if (on == 0) continue;
            for (int ch = 0; ch < 4; ++ch)
              box_mask[static_cast<size_t>(b) * plane * 4 +
                       static_cast<size_t>(((a * 4 + ch) * N * N) + p)] = on;
          }
      }
      const Shape s1 = {B * A, 1, N, N};
      const Shape s4 = {B * A, 4, N, N};
      auto& d = batch.detect;
      d.obj[static_cast<size_t>(sc)] = Tensor<float>::from_vector(s1, obj);
      d.pos_mask[static_cast<size_t>(sc)] = d.obj[static_cast<size_t>(sc)].clone_detached();
      d.noobj_mask[static_cast<size_t>(sc)] = Tensor<float>::from_vector(s1, std::move(noobj));
      d.box[static_cast<size_t>(sc)] = Tensor<float>::from_vector(s4, std::move(box));
      d.box_mask[static_cast<size_t>(sc)] = Tensor<float>::from_vector(s4, std::move(box_mask));
      d.cls[static_cast<size_t>(sc)] = std::move(cls);
    }
  }

  if (mask.segment) {
    batch.seg_labels.reserve(static_cast<size_t>(B * S * S));
    for (const Sample& s : samples) {
      for (int v : s.ann.label_map) {
        MDSP_CHECK(v >= 0 && v < spec.num_seg_classes,
                   "encode_batch: segmentation label " << v << " out of range");
        batch.seg_labels.push_back(v);
      }
    }
  }

  if (mask.pose) {
    const int H8 = S / NetworkSpec::scale_strides[2];
    const int L = spec.num_limbs(), K = spec.num_keypoints;
    std::vector<float> paf(static_cast<size_t>(B * 2 * L * H8 * H8));
    std::vector<float> heat(static_cast<size_t>(B * (K + 1) * H8 * H8));
    for (int b = 0; b < B; ++b) {
      const PoseTargetsImage t = encode_pose_targets(samples[static_cast<size_t>(b)].ann, spec);
      std::copy(t.paf.begin(), t.paf.end(),
                paf.begin() + static_cast<std::ptrdiff_t>(b) *
                                  static_cast<std::ptrdiff_t>(t.paf.size()));
      std::copy(t.heatmap.begin(), t.heatmap.end(),
                heat.begin() + static_cast<std::ptrdiff_t>(b) *
                                   static_cast<std::ptrdiff_t>(t.heatmap.size()));
    }
    batch.paf_targets = Tensor<float>::from_vector({B, 2 * L, H8, H8}, std::move(paf));
    batch.heatmap_targets = Tensor<float>::from_vector({B, K + 1, H8, H8}, std::move(heat));
  }
  return batch;
}

TrainResult train(Network<float>& net, const std::vector<Sample>& data, const TrainConfig& cfg,
                  std::ostream* csv_log) {
  cfg.validate();
  MDSP_CHECK(!data.empty(), "train: empty dataset");
  const NetworkSpec& spec = net.spec();
  const TaskMask mask = spec.task_mask;
  MDSP_CHECK(mask.any(), "train: no active tasks");

  DwaState dwa(mask, cfg.dwa_temperature);
  auto& entries = net.params().entries();
  std::vector<std::vector<float>> velocity(entries.size());
  for (size_t i = 0; i < entries.size(); ++i)
    if (entries[i].trainable)
      velocity[i].assign(static_cast<size_t>(entries[i].tensor.numel()), 0.0f);

  if (csv_log) *csv_log << kTrainLogHeader << "\n";

  TrainResult result;
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::array<double, 3> lambda = dwa.weights();
    const double lr =
        epoch >= cfg.epochs / 2 ? cfg.lr_drop_to : cfg.lr_head;  // step at half training

    Rng shuffle_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    shuffle_indices(order, shuffle_rng);
    Rng aug_rng(derive_seed(cfg.seed, 2000 + static_cast<std::uint64_t>(epoch)));

    double sum_dct = 0, sum_seg = 0, sum_pose = 0, sum_total = 0;
    int batches = 0;

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<Sample> batch_samples;
      batch_samples.reserve(stop - start);
      for (size_t i = start; i < stop; ++i) {
        const Sample& s = data[order[i]];
        if (cfg.augment) {
          batch_samples.push_back(augment(s, aug_rng));
        } else {
          batch_samples.push_back(s);
        }
      }

      const EncodedBatch enc = encode_batch(batch_samples, spec);
      NetworkOutput<float> out = net.forward(enc.images, true);

      PartialLosses<float> partial;
      if (mask.detect) {
        MDSP_CHECK(out.detect.has_value(), "train: network produced no detection output");
        partial.dct = detection_loss(*out.detect, enc.detect, spec);
        sum_dct += scalar_value(*partial.dct);
      }
      if (mask.segment) {
        MDSP_CHECK(out.seg_logits.has_value(), "train: network produced no segmentation output");
        partial.seg = segmentation_loss(*out.seg_logits, enc.seg_labels);
        sum_seg += scalar_value(*partial.seg);
      }
      if (mask.pose) {
        MDSP_CHECK(out.pose.has_value(), "train: network produced no pose output");
        partial.pose = pose_loss(*out.pose, enc.paf_targets, enc.heatmap_targets);
        sum_pose += scalar_value(*partial.pose);
      }

      Tensor<float> loss = total_loss(partial, lambda, mask);
      const double loss_value = scalar_value(loss);
      MDSP_CHECK(std::isfinite(loss_value),
                 "train: diverged at epoch " << epoch + 1 << " (total loss " << loss_value << ")");
      sum_total += loss_value;
      ++batches;

      backward(loss);
      for (size_t i = 0; i < entries.size(); ++i) {
        auto& e = entries[i];
        if (!e.trainable) continue;
        const float lr_i = static_cast<float>(
            e.group == ParamGroup::backbone ? lr * cfg.backbone_lr_ratio : lr);
        sgd_momentum_step(e.tensor, velocity[i], lr_i, static_cast<float>(cfg.momentum),
                          static_cast<float>(cfg.weight_decay));
      }
      net.params().zero_grads();
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.l_dct = mask.detect ? sum_dct / batches : 0.0;
    stats.l_seg = mask.segment ? sum_seg / batches : 0.0;
    stats.l_pose = mask.pose ? sum_pose / batches : 0.0;
    stats.lambda = lambda;
    stats.total = sum_total / batches;
    dwa.push_epoch(stats.l_dct, stats.l_seg, stats.l_pose);
    result.history.push_back(stats);
    if (csv_log) {
      *csv_log << stats.epoch << "," << stats.l_dct << "," << stats.l_seg << "," << stats.l_pose
               << "," << stats.lambda[0] << "," << stats.lambda[1] << "," << stats.lambda[2] << ","
               << stats.total << "\n";
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Network<float>& net) {
  nlohmann::json meta;
  meta["spec"] = net.spec();
  NamedTensors tensors;
  for (const auto& e : net.params().entries()) tensors.emplace_back(e.name, e.tensor);
  save_tensors(path, meta.dump(), tensors);
}

Network<float> load_checkpoint(const std::string& path) {
  LoadedTensors loaded = load_tensors(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(loaded.meta_json);
  } catch (const nlohmann::json::exception& e) {
    MDSP_CHECK(false, "checkpoint '" << path << "': bad metadata: " << e.what());
  }
  MDSP_CHECK(meta.contains("spec"), "checkpoint '" << path << "': metadata has no spec");
  const NetworkSpec spec = meta.at("spec").get<NetworkSpec>();

  Network<float> net(spec, 0);
  auto& entries = net.params().entries();
  MDSP_CHECK(entries.size() == loaded.tensors.size(),
             "checkpoint '" << path << "': holds " << loaded.tensors.size()
                            << " tensors but the spec builds " << entries.size());
  for (auto& e : entries) {
    const auto it =
        std::find_if(loaded.tensors.begin(), loaded.tensors.end(),
                     [&e](const auto& nt) { return nt.first == e.name; });
    MDSP_CHECK(it != loaded.tensors.end(), "checkpoint '" << path << "': missing tensor '"
                                                          << e.name << "'");
    MDSP_CHECK(it->second.shape() == e.tensor.shape(),
               "checkpoint '" << path << "': tensor '" << e.name << "' has shape "
                              << shape_str(it->second.shape()) << " but the spec builds "
                              << shape_str(e.tensor.shape()));
    std::copy(it->second.values().begin(), it->second.values().end(), e.tensor.values().begin());
  }
  return net;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

MetricsReport evaluate(Network<float>& net, const std::vector<Sample>& data,
                       const EvalThresholds& th) {
  MDSP_CHECK(!data.empty(), "evaluate: empty dataset");
  const NetworkSpec& spec = net.spec();
  const TaskMask mask = spec.task_mask;

  std::vector<std::vector<Detection>> det_preds;
  std::vector<std::vector<GtBox>> det_gts;
  std::vector<std::vector<int>> seg_preds, seg_gts;
  std::vector<std::vector<Skeleton>> pose_preds;
  std::vector<std::vector<PersonGT>> pose_gts;

  NoGradGuard guard;
  for (const Sample& s : data) {
    MDSP_CHECK(s.ann.width == spec.input_size && s.ann.height == spec.input_size,
               "evaluate: sample is " << s.ann.width << "x" << s.ann.height
                                      << " but the network expects " << spec.input_size);
    Tensor<float> input = Tensor<float>::zeros({1, 3, spec.input_size, spec.input_size});
    std::copy(s.image.values().begin(), s.image.values().end(), input.values().begin());

    NetworkOutput<float> out = net.forward(input, false);
    if (mask.detect) {
      det_preds.push_back(nms(decode_boxes(*out.detect, spec, th.conf_thresh), th.nms_thresh));
      det_gts.push_back(s.ann.boxes);
    }
    if (mask.segment) {
      seg_preds.push_back(seg_decode(*out.seg_logits));
      seg_gts.push_back(s.ann.label_map);
    }
    if (mask.pose) {
      pose_preds.push_back(decode_skeletons(*out.pose, spec, th.peak_thresh));
      pose_gts.push_back(s.ann.persons);
    }
  }

  MetricsReport report;
  if (mask.detect) report.detection = detection_metrics(det_preds, det_gts, spec.num_det_classes);
  if (mask.segment) report.segmentation = seg_metrics(seg_preds, seg_gts, spec.num_seg_classes);
  if (mask.pose) report.pose = pose_metrics(pose_preds, pose_gts);
  return report;
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

std::vector<BenchMeasurement> benchmark_inference(Network<float>& net,
                                                  const std::vector<Tensor<float>>& images,
                                                  int repeats, const EvalThresholds& th,
                                                  int warmup) {
  MDSP_CHECK(!images.empty(), "benchmark: no images");
  MDSP_CHECK(repeats >= 5, "benchmark: need at least 5 repeats, got " << repeats);
  MDSP_CHECK(warmup >= 0, "benchmark: negative warmup");
  const NetworkSpec& spec = net.spec();
  const TaskMask mask = spec.task_mask;
  using Clock = std::chrono::steady_clock;

  NoGradGuard guard;
  std::vector<BenchMeasurement> measurements;
  measurements.reserve(static_cast<size_t>(repeats) * images.size());
  for (int r = 0; r < warmup + repeats; ++r) {
    for (const Tensor<float>& img : images) {
      const auto t0 = Clock::now();
      NetworkOutput<float> out = net.forward(img, false);
      const auto t1 = Clock::now();
      std::size_t sink = 0;
      if (mask.detect) sink += nms(decode_boxes(*out.detect, spec, th.conf_thresh), th.nms_thresh).size();
      if (mask.segment) sink += seg_decode(*out.seg_logits).size();
      if (mask.pose) sink += decode_skeletons(*out.pose, spec, th.peak_thresh).size();
      const auto t2 = Clock::now();
      if (r < warmup) continue;
      BenchMeasurement m;
      m.cnn_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      m.post_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
      measurements.push_back(m);
      (void)sink;
    }
  }
  return measurements;
}

BenchStats bench_stats(std::vector<double> values_ms) {
  MDSP_CHECK(!values_ms.empty(), "bench_stats: no measurements");
  std::sort(values_ms.begin(), values_ms.end());
  BenchStats s;
  const size_t n = values_ms.size();
  s.median_ms = n % 2 == 1 ? values_ms[n / 2] : 0.5 * (values_ms[n / 2 - 1] + values_ms[n / 2]);
  const size_t p95_idx = std::min(n - 1, static_cast<size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1);
  s.p95_ms = values_ms[p95_idx];
  return s;
}

}  // namespace mdsp
