#include "mdsp/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mdsp/check.hpp"

namespace mdsp {
namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

double parse_number(const std::string& v, int line) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    MDSP_CHECK(false, "config line " << line << ": '" << v << "' is not a number");
  }
  MDSP_CHECK(pos == v.size(), "config line " << line << ": trailing characters in number '" << v
                                             << "'");
  return out;
}

int parse_int(const std::string& v, int line) {
  const double d = parse_number(v, line);
  MDSP_CHECK(d == std::floor(d), "config line " << line << ": expected an integer, got '" << v
                                                << "'");
  return static_cast<int>(d);
}

bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  MDSP_CHECK(false, "config line " << line << ": expected a boolean, got '" << v << "'");
  return false;
}

}  // namespace

std::string format_anchors(const std::vector<Anchor>& anchors) {
  std::ostringstream os;
  for (size_t i = 0; i < anchors.size(); ++i) {
    if (i) os << ",";
    os << anchors[i].w << ":" << anchors[i].h;
  }
  return os.str();
}

std::vector<Anchor> parse_anchors(const std::string& text) {
  std::vector<Anchor> anchors;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const std::string tok = trim(text.substr(pos, end - pos));
    MDSP_CHECK(!tok.empty(), "anchors: empty entry in '" << text << "'");
    const size_t colon = tok.find(':');
    MDSP_CHECK(colon != std::string::npos, "anchors: entry '" << tok << "' is not w:h");
    Anchor a;
    try {
      a.w = std::stof(tok.substr(0, colon));
      a.h = std::stof(tok.substr(colon + 1));
    } catch (const std::exception&) {
      MDSP_CHECK(false, "anchors: entry '" << tok << "' is not numeric");
    }
    MDSP_CHECK(a.w > 0 && a.h > 0, "anchors: entry '" << tok << "' must be positive");
    anchors.push_back(a);
    pos = end + 1;
    if (end == text.size()) break;
  }
  return anchors;
}

NetworkSpec RunConfig::to_network_spec() const {
  NetworkSpec spec = default_spec();
  spec.width_mult = width_mult;
  spec.input_size = input_size;
  spec.task_mask = tasks;
  spec.anchors = anchors.empty() ? default_anchors(input_size) : anchors;
  spec.validate();
  return spec;
}

std::string RunConfig::resolved_ini() const {
  std::ostringstream os;
  os << "[model]\n";
  os << "width_mult = " << width_mult << "\n";
  os << "input_size = " << input_size << "\n";
  os << "tasks = " << tasks.str() << "\n";
  os << "anchors = " << format_anchors(anchors.empty() ? default_anchors(input_size) : anchors)
     << "\n";
  os << "\n[train]\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "learning_rate = " << learning_rate << "\n";
  os << "lr_drop_to = " << lr_drop_to << "\n";
  os << "momentum = " << momentum << "\n";
  os << "weight_decay = " << weight_decay << "\n";
  os << "backbone_lr_scale = " << backbone_lr_scale << "\n";
  os << "dwa_temperature = " << dwa_temperature << "\n";
  os << "seed = " << seed << "\n";
  os << "augment = " << (augment ? "true" : "false") << "\n";
  os << "\n[data]\n";
  os << "train_dir = " << train_dir << "\n";
  os << "val_dir = " << val_dir << "\n";
  os << "\n[decode]\n";
  os << "conf_thresh = " << conf_thresh << "\n";
  os << "nms_thresh = " << nms_thresh << "\n";
  os << "peak_thresh = " << peak_thresh << "\n";
  return os.str();
}

RunConfig RunConfig::from_ini_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      MDSP_CHECK(line.back() == ']', "config line " << line_no << ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      MDSP_CHECK(section == "model" || section == "train" || section == "data" ||
                     section == "decode",
                 "config line " << line_no << ": unknown section [" << section << "]");
      continue;
    }
    const size_t eq = line.find('=');
    MDSP_CHECK(eq != std::string::npos, "config line " << line_no << ": expected key = value");
    MDSP_CHECK(!section.empty(), "config line " << line_no << ": key outside any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    MDSP_CHECK(!key.empty(), "config line " << line_no << ": empty key");

    bool known = true;
    if (section == "model") {
      if (key == "width_mult") {
        cfg.width_mult = static_cast<float>(parse_number(value, line_no));
      } else if (key == "input_size") {
        cfg.input_size = parse_int(value, line_no);
      } else if (key == "tasks") {
        cfg.tasks = TaskMask::parse(value);
      } else if (key == "anchors") {
        cfg.anchors = parse_anchors(value);
      } else {
        known = false;
      }
    } else if (section == "train") {
      if (key == "epochs") {
        cfg.epochs = parse_int(value, line_no);
      } else if (key == "batch_size") {
        cfg.batch_size = parse_int(value, line_no);
      } else if (key == "learning_rate") {
        cfg.learning_rate = parse_number(value, line_no);
      } else if (key == "lr_drop_to") {
        cfg.lr_drop_to = parse_number(value, line_no);
      } else if (key == "momentum") {
        cfg.momentum = parse_number(value, line_no);
      } else if (key == "weight_decay") {
        cfg.weight_decay = parse_number(value, line_no);
      } else if (key == "backbone_lr_scale") {
        cfg.backbone_lr_scale = parse_number(value, line_no);
      } else if (key == "dwa_temperature") {
        cfg.dwa_temperature = parse_number(value, line_no);
      } else if (key == "seed") {
        const double d = parse_number(value, line_no);
        MDSP_CHECK(d >= 0 && d == std::floor(d), "config line " << line_no << ": bad seed");
        cfg.seed = static_cast<std::uint64_t>(d);
      } else if (key == "augment") {
        cfg.augment = parse_bool(value, line_no);
      } else {
        known = false;
      }
    } else if (section == "data") {
      if (key == "train_dir") {
        cfg.train_dir = value;
      } else if (key == "val_dir") {
        cfg.val_dir = value;
      } else {
        known = false;
      }
    } else {
      if (key == "conf_thresh") {
        cfg.conf_thresh = static_cast<float>(parse_number(value, line_no));
      } else if (key == "nms_thresh") {
        cfg.nms_thresh = static_cast<float>(parse_number(value, line_no));
      } else if (key == "peak_thresh") {
        cfg.peak_thresh = static_cast<float>(parse_number(value, line_no));
      } else {
        known = false;
      }
    }
    MDSP_CHECK(known, "config line " << line_no << ": unknown key '" << key << "' in section ["
                                     << section << "]");
  }

  MDSP_CHECK(cfg.epochs >= 0, "config: epochs must be non-negative");
  MDSP_CHECK(cfg.batch_size > 0, "config: batch_size must be positive");
  MDSP_CHECK(cfg.learning_rate > cfg.lr_drop_to && cfg.lr_drop_to > 0,
             "config: need learning_rate > lr_drop_to > 0, got " << cfg.learning_rate << " and "
                                                                 << cfg.lr_drop_to);
  MDSP_CHECK(cfg.momentum >= 0 && cfg.momentum < 1, "config: momentum must be in [0, 1)");
  MDSP_CHECK(cfg.weight_decay >= 0, "config: weight_decay must be non-negative");
  MDSP_CHECK(cfg.backbone_lr_scale > 0, "config: backbone_lr_scale must be positive");
  MDSP_CHECK(cfg.dwa_temperature > 0, "config: dwa_temperature must be positive");
  MDSP_CHECK(cfg.conf_thresh >= 0 && cfg.conf_thresh <= 1, "config: conf_thresh out of range");
  MDSP_CHECK(cfg.nms_thresh >= 0 && cfg.nms_thresh <= 1, "config: nms_thresh out of range");
  MDSP_CHECK(cfg.peak_thresh >= 0 && cfg.peak_thresh <= 1, "config: peak_thresh out of range");
  return cfg;
}

RunConfig RunConfig::from_ini_file(const std::string& path) {
  std::ifstream f(path);
  MDSP_CHECK(f.good(), "config: cannot open '" << path << "'");
  std::ostringstream buf;
  buf << f.rdbuf();
  return from_ini_text(buf.str());
}

}  // namespace mdsp
