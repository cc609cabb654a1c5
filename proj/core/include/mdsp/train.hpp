#pragma once

// Training loop (SGD with momentum, per-epoch loss weighting, task
// masking), checkpoint IO, dataset evaluation, and the inference
// benchmark that separates network time from post-processing time.

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mdsp/config.hpp"
#include "mdsp/loss.hpp"
#include "mdsp/metrics.hpp"
#include "mdsp/network.hpp"
#include "mdsp/synthdata.hpp"

namespace mdsp {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 4;
  double lr_head = 1e-4;
  double lr_drop_to = 1e-5;  // step change at epoch = epochs / 2
  double backbone_lr_ratio = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  double dwa_temperature = 2.0;
  std::uint64_t seed = 7;
  bool augment = true;

  void validate() const {
    MDSP_CHECK(epochs >= 0, "train: epochs must be non-negative");
    MDSP_CHECK(batch_size > 0, "train: batch_size must be positive");
    MDSP_CHECK(lr_head > lr_drop_to && lr_drop_to > 0,
               "train: need lr_head > lr_drop_to > 0, got " << lr_head << " and " << lr_drop_to);
    MDSP_CHECK(backbone_lr_ratio > 0, "train: backbone_lr_ratio must be positive");
    MDSP_CHECK(momentum >= 0 && momentum < 1, "train: momentum must be in [0, 1)");
    MDSP_CHECK(weight_decay >= 0, "train: weight_decay must be non-negative");
    MDSP_CHECK(dwa_temperature > 0, "train: dwa_temperature must be positive");
  }

  static TrainConfig from_run_config(const RunConfig& rc) {
    TrainConfig c;
    c.epochs = rc.epochs;
    c.batch_size = rc.batch_size;
    c.lr_head = rc.learning_rate;
    c.lr_drop_to = rc.lr_drop_to;
    c.backbone_lr_ratio = rc.backbone_lr_scale;
    c.momentum = rc.momentum;
    c.weight_decay = rc.weight_decay;
    c.dwa_temperature = rc.dwa_temperature;
    c.seed = rc.seed;
    c.augment = rc.augment;
    return c;
  }
};

struct EpochStats {
  int epoch = 0;  // 1-based, matching the log
  double l_dct = 0, l_seg = 0, l_pose = 0;
  std::array<double, 3> lambda = {1.0, 1.0, 1.0};
  double total = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
};

// Everything one optimization step consumes, already batched. Only the
// sections for tasks enabled in the spec are populated.
struct EncodedBatch {
  Tensor<float> images;  // (B, 3, S, S)
  DetectTargets<float> detect;
  std::vector<int> seg_labels;             // (B * S * S) row-major
  Tensor<float> paf_targets;               // (B, 2L, S/8, S/8)
  Tensor<float> heatmap_targets;           // (B, K+1, S/8, S/8)
};

EncodedBatch encode_batch(const std::vector<Sample>& samples, const NetworkSpec& spec);

constexpr const char* kTrainLogHeader = "epoch,l_dct,l_seg,l_pose,lam_dct,lam_seg,lam_pose,total";

// Shuffled minibatch SGD over the dataset. Loss weights follow the
// two-epoch ratio schedule; the backbone trains at lr * backbone_lr_ratio.
// Aborts with an error if the total loss stops being finite. csv_log, when
// given, receives the header plus one row per epoch.
TrainResult train(Network<float>& net, const std::vector<Sample>& data, const TrainConfig& cfg,
                  std::ostream* csv_log = nullptr);

// Checkpoints carry the network description plus every tensor (weights and
// batchnorm running statistics).
void save_checkpoint(const std::string& path, const Network<float>& net);
Network<float> load_checkpoint(const std::string& path);

struct EvalThresholds {
  float conf_thresh = 0.25f;
  float nms_thresh = 0.45f;
  float peak_thresh = 0.1f;
};

// Runs the network over the dataset (eval mode, no gradients) and scores
// each enabled task against the annotations.
MetricsReport evaluate(Network<float>& net, const std::vector<Sample>& data,
                       const EvalThresholds& th = {});

struct BenchMeasurement {
  double cnn_ms = 0;   // forward pass
  double post_ms = 0;  // decode + suppression + argmax + grouping
  double total_ms() const { return cnn_ms + post_ms; }
};

struct BenchStats {
  double median_ms = 0;
  double p95_ms = 0;
};

// One measurement per (repeat, image) pair after `warmup` untimed rounds.
// The post-processing time of a measurement belongs to the same forward
// pass, so total is the network time plus the decoding work it fed.
std::vector<BenchMeasurement> benchmark_inference(Network<float>& net,
                                                  const std::vector<Tensor<float>>& images,
                                                  int repeats, const EvalThresholds& th = {},
                                                  int warmup = 2);

BenchStats bench_stats(std::vector<double> values_ms);

}  // namespace mdsp
