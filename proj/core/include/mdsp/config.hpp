#pragma once

// INI run configuration shared by the command line tools. Four sections:
// [model], [train], [data], [decode]. Unknown sections or keys are errors,
// full-line comments start with '#' or ';'.

#include <string>
#include <vector>

#include "mdsp/netspec.hpp"

namespace mdsp {

struct RunConfig {
  // [model]
  float width_mult = 1.0f;
  int input_size = 416;
  TaskMask tasks = TaskMask::all();
  std::vector<Anchor> anchors;  // empty means defaults scaled to input_size

  // [train]
  int epochs = 60;
  int batch_size = 4;
  double learning_rate = 1e-4;      // head learning rate; dropped at half training
  double lr_drop_to = 1e-5;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  double backbone_lr_scale = 0.1;
  double dwa_temperature = 2.0;
  std::uint64_t seed = 7;
  bool augment = true;

  // [data]
  std::string train_dir;
  std::string val_dir;  // empty means evaluate on train_dir

  // [decode]
  float conf_thresh = 0.25f;
  float nms_thresh = 0.45f;
  float peak_thresh = 0.1f;

  NetworkSpec to_network_spec() const;

  // Every key written out explicitly with its effective value.
  std::string resolved_ini() const;

  static RunConfig from_ini_text(const std::string& text);
  static RunConfig from_ini_file(const std::string& path);
};

std::string format_anchors(const std::vector<Anchor>& anchors);
std::vector<Anchor> parse_anchors(const std::string& text);

}  // namespace mdsp
