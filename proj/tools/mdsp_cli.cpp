// Command line front end: dataset synthesis, anchor clustering, training,
// evaluation, inference with overlays, and the inference benchmark.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdsp/config.hpp"
#include "mdsp/metrics.hpp"
#include "mdsp/network.hpp"
#include "mdsp/postprocess.hpp"
#include "mdsp/synthdata.hpp"
#include "mdsp/train.hpp"

namespace fs = std::filesystem;
using namespace mdsp;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string tasks;
  double width_mult = -1;
  int input_size = -1;
  double conf = -1, nms_t = -1, peak = -1;
};

// Flags win over the config file, which wins over defaults.
RunConfig resolve_config(const CommonOpts& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) cfg = RunConfig::from_ini_file(o.config_path);
  if (!o.tasks.empty()) cfg.tasks = TaskMask::parse(o.tasks);
  if (o.width_mult > 0) cfg.width_mult = static_cast<float>(o.width_mult);
  if (o.input_size > 0) cfg.input_size = o.input_size;
  if (o.conf >= 0) cfg.conf_thresh = static_cast<float>(o.conf);
  if (o.nms_t >= 0) cfg.nms_thresh = static_cast<float>(o.nms_t);
  if (o.peak >= 0) cfg.peak_thresh = static_cast<float>(o.peak);
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool with_decode) {
  cmd->add_option("--config", o.config_path, "INI config file");
  cmd->add_option("--tasks", o.tasks, "comma list of detect,segment,pose");
  cmd->add_option("--width-mult", o.width_mult, "channel width multiplier");
  cmd->add_option("--input-size", o.input_size, "square input resolution");
  if (with_decode) {
    cmd->add_option("--conf", o.conf, "detection confidence threshold");
    cmd->add_option("--nms", o.nms_t, "NMS IoU threshold");
    cmd->add_option("--peak", o.peak, "heatmap peak threshold");
  }
}

void write_resolved_config(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream f(dir / "resolved.ini");
  MDSP_CHECK(f.good(), "cannot write resolved config under '" << dir.string() << "'");
  f << cfg.resolved_ini();
}

EvalThresholds thresholds_of(const RunConfig& cfg) {
  EvalThresholds th;
  th.conf_thresh = cfg.conf_thresh;
  th.nms_thresh = cfg.nms_thresh;
  th.peak_thresh = cfg.peak_thresh;
  return th;
}

std::string checkpoint_task_note(const NetworkSpec& spec) {
  return "tasks " + spec.task_mask.str() + ", width " + std::to_string(spec.width_mult) +
         ", input " + std::to_string(spec.input_size);
}

int cmd_synth(const CommonOpts& common, const std::string& out_dir, int count,
              std::uint64_t seed, int size, const std::string& slots, double noise,
              const std::vector<double>& weights) {
  RunConfig cfg = resolve_config(common);
  GenSpec gen;
  gen.image_size = size > 0 ? size : cfg.input_size;
  if (!slots.empty()) {
    const size_t colon = slots.find(':');
    MDSP_CHECK(colon != std::string::npos, "--slots expects MIN:MAX, got '" << slots << "'");
    gen.min_slots = std::stoi(slots.substr(0, colon));
    gen.max_slots = std::stoi(slots.substr(colon + 1));
  }
  if (noise >= 0) gen.noise = static_cast<float>(noise);
  if (!weights.empty()) {
    MDSP_CHECK(weights.size() == 5, "--weights expects 5 values, got " << weights.size());
    for (size_t i = 0; i < 5; ++i) gen.slot_weights[i] = static_cast<float>(weights[i]);
  }

  const auto counts = write_dataset(out_dir, gen, count, seed);
  write_resolved_config(cfg, out_dir);
  std::cout << "wrote " << count << " scenes to " << out_dir << "\n";
  const auto& names = seg_class_names();
  std::cout << "  scenes without instances: " << counts[0] << "\n";
  for (size_t c = 1; c < names.size(); ++c)
    std::cout << "  " << names[c] << ": " << counts[c] << " instances\n";
  return 0;
}

int cmd_anchors(const std::string& data_dir, int k, std::uint64_t seed) {
  const auto data = load_dataset(data_dir);
  const auto sizes = collect_box_sizes(data);
  MDSP_CHECK(static_cast<int>(sizes.size()) >= k,
             "anchors: dataset has " << sizes.size() << " boxes, need at least " << k);
  const auto anchors = kmeans_anchors(sizes, k, seed);

  double iou_sum = 0;
  for (const auto& [w, h] : sizes) {
    float best = 0;
    for (const Anchor& a : anchors) best = std::max(best, iou_wh(w, h, a.w, a.h));
    iou_sum += best;
  }
  std::cout << "anchors (" << sizes.size() << " boxes, k = " << k << "):\n";
  for (const Anchor& a : anchors) std::cout << "  " << a.w << ":" << a.h << "\n";
  std::cout << "mean best IoU: " << iou_sum / static_cast<double>(sizes.size()) << "\n";
  std::cout << "config line: anchors = " << format_anchors(anchors) << "\n";
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data_override,
              const std::string& out_dir, int epochs_override, int batch_override,
              double lr_override, std::int64_t seed_override, std::optional<bool> augment_override) {
  RunConfig cfg = resolve_config(common);
  if (!data_override.empty()) cfg.train_dir = data_override;
  if (epochs_override >= 0) cfg.epochs = epochs_override;
  if (batch_override > 0) cfg.batch_size = batch_override;
  if (lr_override > 0) cfg.learning_rate = lr_override;
  if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
  if (augment_override) cfg.augment = *augment_override;
  MDSP_CHECK(!cfg.train_dir.empty(), "train: no dataset (set [data] train_dir or pass --data)");

  const auto data = load_dataset(cfg.train_dir);
  const NetworkSpec spec = cfg.to_network_spec();
  Network<float> net(spec, cfg.seed);
  std::cout << "training " << spec.task_mask.str() << " (" << net.params().count_trainable()
            << " trainable parameters, " << data.size() << " samples)\n";

  fs::create_directories(out_dir);
  write_resolved_config(cfg, out_dir);
  std::ofstream log(fs::path(out_dir) / "train_log.csv");
  MDSP_CHECK(log.good(), "train: cannot write log under '" << out_dir << "'");

  const TrainConfig tc = TrainConfig::from_run_config(cfg);
  const TrainResult result = train(net, data, tc, &log);
  const std::string ckpt = (fs::path(out_dir) / "checkpoint.mdsp").string();
  save_checkpoint(ckpt, net);
  if (!result.history.empty()) {
    const auto& last = result.history.back();
    std::cout << "epoch " << last.epoch << ": total " << last.total << " (detect " << last.l_dct
              << ", segment " << last.l_seg << ", pose " << last.l_pose << ")\n";
  }
  std::cout << "checkpoint: " << ckpt << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_dir) {
  RunConfig cfg = resolve_config(common);
  Network<float> net = load_checkpoint(checkpoint);
  std::cout << "checkpoint: " << checkpoint_task_note(net.spec()) << "\n";
  const auto data = load_dataset(data_dir.empty() ? cfg.val_dir.empty() ? cfg.train_dir : cfg.val_dir
                                                  : data_dir);
  const MetricsReport report = evaluate(net, data, thresholds_of(cfg));
  std::cout << report.table();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_resolved_config(cfg, out_dir);
    std::ofstream j(fs::path(out_dir) / "metrics.json");
    j << report.to_json().dump(2) << "\n";
    std::ofstream t(fs::path(out_dir) / "metrics.txt");
    t << report.table();
  }
  return 0;
}

nlohmann::json detections_json(const std::vector<Detection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Detection& d : dets) {
    const auto& names = det_class_names();
    arr.push_back({{"cx", d.box.cx},
                   {"cy", d.box.cy},
                   {"w", d.box.w},
                   {"h", d.box.h},
                   {"class", d.class_id},
                   {"class_name", d.class_id < static_cast<int>(names.size())
                                      ? names[static_cast<size_t>(d.class_id)]
                                      : "?"},
                   {"score", d.score}});
  }
  return arr;
}

nlohmann::json skeletons_json(const std::vector<Skeleton>& skels) {
  nlohmann::json arr = nlohmann::json::array();
  for (const Skeleton& s : skels) {
    nlohmann::json kps = nlohmann::json::array();
    for (const Keypoint& k : s.keypoints) {
      if (k.present) {
        kps.push_back({{"x", k.x}, {"y", k.y}, {"conf", k.conf}});
      } else {
        kps.push_back(nullptr);
      }
    }
    arr.push_back({{"score", s.score}, {"keypoints", std::move(kps)}});
  }
  return arr;
}

int cmd_infer(const CommonOpts& common, const std::string& checkpoint,
              const std::vector<std::string>& images, const std::string& out_dir) {
  RunConfig cfg = resolve_config(common);
  Network<float> net = load_checkpoint(checkpoint);
  const NetworkSpec& spec = net.spec();
  std::cout << "checkpoint: " << checkpoint_task_note(spec) << "\n";
  const EvalThresholds th = thresholds_of(cfg);

  fs::create_directories(out_dir);
  write_resolved_config(cfg, out_dir);
  std::ofstream preds_file(fs::path(out_dir) / "predictions.jsonl");
  MDSP_CHECK(preds_file.good(), "infer: cannot write under '" << out_dir << "'");

  NoGradGuard guard;
  for (const std::string& path : images) {
    Tensor<float> img = read_ppm(path);
    MDSP_CHECK(img.dim(1) == spec.input_size && img.dim(2) == spec.input_size,
               "infer: '" << path << "' is " << img.dim(2) << "x" << img.dim(1)
                          << " but the checkpoint expects " << spec.input_size << "x"
                          << spec.input_size);
    Tensor<float> input = Tensor<float>::zeros({1, 3, spec.input_size, spec.input_size});
    std::copy(img.values().begin(), img.values().end(), input.values().begin());
    NetworkOutput<float> out = net.forward(input, false);

    nlohmann::json record;
    record["image"] = path;
    Tensor<float> overlay = img.clone_detached();
    if (spec.task_mask.segment) {
      const std::vector<int> labels = seg_decode(*out.seg_logits);
      draw_seg_overlay(overlay, labels);
      nlohmann::json runs = nlohmann::json::array();
      for (const auto& [v, n] : rle_encode(labels)) runs.push_back({v, n});
      record["segmentation_rle"] = std::move(runs);
    }
    if (spec.task_mask.detect) {
      const auto dets = nms(decode_boxes(*out.detect, spec, th.conf_thresh), th.nms_thresh);
      const std::array<std::array<float, 3>, 4> colors = {
          {{0.9f, 0.15f, 0.15f}, {0.15f, 0.85f, 0.3f}, {0.2f, 0.4f, 0.95f}, {0.95f, 0.85f, 0.1f}}};
      for (const Detection& d : dets)
        draw_box_overlay(overlay, d.box,
                         colors[static_cast<size_t>(d.class_id) % colors.size()]);
      record["detections"] = detections_json(dets);
    }
    if (spec.task_mask.pose) {
      const auto skels = decode_skeletons(*out.pose, spec, th.peak_thresh);
      for (const Skeleton& s : skels)
        draw_skeleton_overlay(overlay, s, spec.limbs, {1.0f, 1.0f, 1.0f});
      record["persons"] = skeletons_json(skels);
    }

    const std::string stem = fs::path(path).stem().string();
    const std::string out_path = (fs::path(out_dir) / (stem + "_overlay.ppm")).string();
    write_ppm(out_path, overlay);
    preds_file << record.dump() << "\n";
    std::cout << path << " -> " << out_path << "\n";
  }
  return 0;
}

int cmd_bench(const CommonOpts& common, const std::string& checkpoint, const std::string& data_dir,
              int repeats, int warmup, int n_images) {
  RunConfig cfg = resolve_config(common);
  Network<float> net = load_checkpoint(checkpoint);
  const NetworkSpec& spec = net.spec();
  std::cout << "checkpoint: " << checkpoint_task_note(spec) << "\n";

  std::vector<Tensor<float>> images;
  if (!data_dir.empty()) {
    const auto data = load_dataset(data_dir);
    for (const Sample& s : data) {
      MDSP_CHECK(s.ann.width == spec.input_size && s.ann.height == spec.input_size,
                 "bench: dataset images are " << s.ann.width << "x" << s.ann.height
                                              << " but the checkpoint expects " << spec.input_size);
      Tensor<float> input = Tensor<float>::zeros({1, 3, spec.input_size, spec.input_size});
      std::copy(s.image.values().begin(), s.image.values().end(), input.values().begin());
      images.push_back(std::move(input));
      if (static_cast<int>(images.size()) >= n_images) break;
    }
  } else {
    GenSpec gen;
    gen.image_size = spec.input_size;
    for (int i = 0; i < n_images; ++i) {
      const Sample s = generate_scene(gen, 900 + static_cast<std::uint64_t>(i));
      Tensor<float> input = Tensor<float>::zeros({1, 3, spec.input_size, spec.input_size});
      std::copy(s.image.values().begin(), s.image.values().end(), input.values().begin());
      images.push_back(std::move(input));
    }
  }

  const auto measurements = benchmark_inference(net, images, repeats, thresholds_of(cfg), warmup);
  std::vector<double> cnn, total;
  bool ordered = true;
  for (const auto& m : measurements) {
    cnn.push_back(m.cnn_ms);
    total.push_back(m.total_ms());
    ordered = ordered && m.total_ms() >= m.cnn_ms;
  }
  const BenchStats sc = bench_stats(cnn), st = bench_stats(total);
  std::cout << "mode    median_ms    p95_ms   (" << measurements.size() << " measurements, "
            << warmup << " warmup rounds)\n";
  std::cout << "cnn     " << sc.median_ms << "  " << sc.p95_ms << "\n";
  std::cout << "total   " << st.median_ms << "  " << st.p95_ms << "\n";
  std::cout << "total >= cnn for every measurement: " << (ordered ? "yes" : "NO") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multitask detection / segmentation / pose toolkit"};
  app.require_subcommand(1);

  CommonOpts synth_common, train_common, eval_common, infer_common, bench_common;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out = "dataset";
  int synth_count = 16;
  std::uint64_t synth_seed = 1;
  int synth_size = -1;
  std::string synth_slots;
  double synth_noise = -1;
  std::vector<double> synth_weights;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of scenes")->required();
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--size", synth_size, "image size (default: config input_size)");
  synth->add_option("--slots", synth_slots, "seat slot range MIN:MAX");
  synth->add_option("--noise", synth_noise, "sensor noise sigma");
  synth->add_option("--weights", synth_weights,
                    "5 slot weights: empty,person,child seat,infant seat,objects")
      ->delimiter(',');
  add_common(synth, synth_common, false);

  auto* anchors = app.add_subcommand("anchors", "cluster dataset boxes into anchors");
  std::string anchors_data;
  int anchors_k = 9;
  std::uint64_t anchors_seed = 1;
  anchors->add_option("--data", anchors_data, "dataset directory")->required();
  anchors->add_option("--k", anchors_k, "number of anchors");
  anchors->add_option("--seed", anchors_seed, "clustering seed");

  auto* train_cmd = app.add_subcommand("train", "train a network");
  std::string train_data, train_out = "run";
  int train_epochs = -1, train_batch = -1;
  double train_lr = -1;
  std::int64_t train_seed = -1;
  bool train_no_augment = false, train_augment = false;
  train_cmd->add_option("--data", train_data, "dataset directory (overrides config)");
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--epochs", train_epochs, "epoch count override");
  train_cmd->add_option("--batch-size", train_batch, "batch size override");
  train_cmd->add_option("--lr", train_lr, "head learning rate override");
  train_cmd->add_option("--seed", train_seed, "training seed override");
  train_cmd->add_flag("--augment", train_augment, "force augmentation on");
  train_cmd->add_flag("--no-augment", train_no_augment, "disable augmentation");
  add_common(train_cmd, train_common, true);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_out;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory");
  eval_cmd->add_option("--out", eval_out, "directory for metrics files");
  add_common(eval_cmd, eval_common, true);

  auto* infer = app.add_subcommand("infer", "run inference and write overlays");
  std::string infer_ckpt, infer_out = "inferred";
  std::vector<std::string> infer_images;
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--out", infer_out, "output directory");
  infer->add_option("images", infer_images, "input PPM images")->required();
  add_common(infer, infer_common, true);

  auto* bench = app.add_subcommand("bench", "time forward pass vs full pipeline");
  std::string bench_ckpt, bench_data;
  int bench_repeats = 10, bench_warmup = 2, bench_images = 4;
  bench->add_option("--checkpoint", bench_ckpt, "checkpoint file")->required();
  bench->add_option("--data", bench_data, "dataset directory for inputs");
  bench->add_option("--repeats", bench_repeats, "timed rounds (>= 5)");
  bench->add_option("--warmup", bench_warmup, "untimed rounds");
  bench->add_option("--images", bench_images, "number of benchmark images");
  add_common(bench, bench_common, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synth(synth_common, synth_out, synth_count, synth_seed, synth_size, synth_slots,
                       synth_noise, synth_weights);
    if (anchors->parsed()) return cmd_anchors(anchors_data, anchors_k, anchors_seed);
    if (train_cmd->parsed()) {
      MDSP_CHECK(!(train_augment && train_no_augment),
                 "train: --augment and --no-augment conflict");
      std::optional<bool> aug;
      if (train_augment) aug = true;
      if (train_no_augment) aug = false;
      return cmd_train(train_common, train_data, train_out, train_epochs, train_batch, train_lr,
                       train_seed, aug);
    }
    if (eval_cmd->parsed()) return cmd_eval(eval_common, eval_ckpt, eval_data, eval_out);
    if (infer->parsed()) return cmd_infer(infer_common, infer_ckpt, infer_images, infer_out);
    if (bench->parsed())
      return cmd_bench(bench_common, bench_ckpt, bench_data, bench_repeats, bench_warmup,
                       bench_images);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
