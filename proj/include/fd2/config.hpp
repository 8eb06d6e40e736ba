#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fd2/cal.hpp"
#include "fd2/constraints.hpp"
#include "fd2/core.hpp"
#include "fd2/data.hpp"
#include "fd2/distill.hpp"
#include "fd2/pretrain.hpp"
#include "fd2/softlabel.hpp"

namespace fd2::config {

// Whole-pipeline configuration; parsed from / emitted to line-oriented
// `key = value` text. Unknown keys are rejected by name.
struct PipelineConfig {
  std::string dataset_kind = "toy";  // toy | folder
  std::string dataset_path = "";
  int image_size = 64;
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string out_dir = "out";

  int toy_classes = 10;
  int toy_train_per_class = 200;
  int toy_val_per_class = 40;
  int toy_test_per_class = 50;
  int toy_base_patterns = 4;
  int toy_mark_size = 7;
  int toy_mark_jitter = 2;
  double toy_noise = 0.05;
  bool toy_marks_enabled = true;

  constraints::LossWeights<double> weights;

  int model_maps = 8;
  std::vector<int> model_channels = {32, 64, 128, 128};

  int pretrain_epochs = 30;
  int pretrain_batch = 64;
  double pretrain_lr = 0.05;
  double pretrain_momentum = 0.9;
  std::string pretrain_counterfactual = "random";

  int distill_ipc = 3;
  int distill_group_size = 4;
  int distill_steps = 500;
  double distill_lr = 0.1;
  double distill_r_bn = 0.01;
  std::string distill_grid = "2x2";
  bool distill_enable_lf = true;
  bool distill_enable_ls = true;

  std::string softlabel_mode = "online";
  std::string softlabel_aug = "crop_flip";

  int student_epochs = 100;
  int student_batch = 32;
  double student_lr = 0.02;
  double student_momentum = 0.9;

  void validate() const {
    if (dataset_kind != "toy" && dataset_kind != "folder")
      throw ConfigError("dataset.kind must be toy or folder");
    if (image_size < 8) throw ConfigError("image.size must be >= 8");
    weights.validate();
    if (model_maps < 1) throw ConfigError("model.maps must be >= 1");
    if (model_channels.empty())
      throw ConfigError("model.channels must be non-empty");
    for (int c : model_channels)
      if (c < 1) throw ConfigError("model.channels entries must be >= 1");
    if (pretrain_epochs < 1 || pretrain_batch < 1)
      throw ConfigError("pretrain.epochs and pretrain.batch must be >= 1");
    cal::parse_counterfactual_mode(pretrain_counterfactual);
    if (distill_ipc < 1) throw ConfigError("distill.ipc must be >= 1");
    if (distill_group_size < 1)
      throw ConfigError("distill.group_size must be >= 1");
    if (distill_steps < 0) throw ConfigError("distill.steps must be >= 0");
    if (distill_r_bn < 0) throw ConfigError("distill.r_bn must be >= 0");
    distill::parse_grid_mode(distill_grid);
    softlabel::parse_softlabel_mode(softlabel_mode);
    if (softlabel_aug != "none" && softlabel_aug != "flip" &&
        softlabel_aug != "crop_flip")
      throw ConfigError("softlabel.aug must be none, flip or crop_flip");
    if (student_epochs < 0 || student_batch < 1)
      throw ConfigError("student.epochs must be >= 0, student.batch >= 1");
    if (dataset_kind == "toy") to_toy_spec().validate();
  }

  data::ToySpec to_toy_spec() const {
    data::ToySpec spec;
    spec.num_classes = toy_classes;
    spec.train_per_class = toy_train_per_class;
    spec.val_per_class = toy_val_per_class;
    spec.test_per_class = toy_test_per_class;
    spec.image_size = image_size;
    spec.base_patterns = toy_base_patterns;
    spec.mark_size = toy_mark_size;
    spec.mark_jitter = toy_mark_jitter;
    spec.noise_level = toy_noise;
    spec.marks_enabled = toy_marks_enabled;
    spec.seed = seed;
    return spec;
  }

  constraints::LossWeights<float> weights_f() const {
    constraints::LossWeights<float> w;
    w.alpha = static_cast<float>(weights.alpha);
    w.beta = static_cast<float>(weights.beta);
    w.lambda_fs = static_cast<float>(weights.lambda_fs);
    w.eta = static_cast<float>(weights.eta);
    w.mu = static_cast<float>(weights.mu);
    w.eps = static_cast<float>(weights.eps);
    w.tau = static_cast<float>(weights.tau);
    return w;
  }

  pretrain::PretrainConfig pretrain_config() const {
    pretrain::PretrainConfig cfg;
    cfg.epochs = pretrain_epochs;
    cfg.batch_size = pretrain_batch;
    cfg.lr = pretrain_lr;
    cfg.sgd_momentum = pretrain_momentum;
    cfg.num_maps = model_maps;
    cfg.channels = model_channels;
    cfg.cf_mode = cal::parse_counterfactual_mode(pretrain_counterfactual);
    cfg.seed = seed;
    cfg.config_fingerprint = fingerprint();
    return cfg;
  }

  distill::DistillConfig distill_config(
      const std::string& teacher_fingerprint) const {
    distill::DistillConfig cfg;
    cfg.ipc = distill_ipc;
    cfg.group_size = distill_group_size;
    cfg.grid_mode = distill::parse_grid_mode(distill_grid);
    cfg.synth.steps = distill_steps;
    cfg.synth.lr = distill_lr;
    cfg.synth.r_bn = distill_r_bn;
    cfg.synth.enable_lf = distill_enable_lf;
    cfg.synth.enable_ls = distill_enable_ls;
    cfg.weights = weights_f();
    cfg.seed = seed;
    cfg.teacher_fingerprint = teacher_fingerprint;
    cfg.image_size = image_size;
    return cfg;
  }

  softlabel::StudentConfig student_config() const {
    softlabel::StudentConfig cfg;
    cfg.epochs = student_epochs;
    cfg.batch_size = student_batch;
    cfg.lr = student_lr;
    cfg.sgd_momentum = student_momentum;
    cfg.channels = model_channels;
    cfg.seed = seed;
    return cfg;
  }

  std::string emit() const;
  std::string fingerprint() const { return to_hex(fnv1a64(emit())); }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError("key '" + key + "' has trailing garbage: '" + v + "'");
  return out;
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  std::int64_t out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
  }
  if (pos != v.size())
    throw ConfigError("key '" + key + "' has trailing garbage: '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<int> parse_int_list(const std::string& key,
                                       const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(static_cast<int>(parse_int(key, trim(item))));
  if (out.empty()) throw ConfigError("key '" + key + "' expects a list");
  return out;
}

}  // namespace detail

inline std::string PipelineConfig::emit() const {
  std::ostringstream o;
  o << "dataset.kind = " << dataset_kind << "\n";
  o << "dataset.path = " << dataset_path << "\n";
  o << "image.size = " << image_size << "\n";
  o << "seed = " << seed << "\n";
  o << "deterministic = " << (deterministic ? "true" : "false") << "\n";
  o << "out.dir = " << out_dir << "\n";
  o << "toy.classes = " << toy_classes << "\n";
  o << "toy.train_per_class = " << toy_train_per_class << "\n";
  o << "toy.val_per_class = " << toy_val_per_class << "\n";
  o << "toy.test_per_class = " << toy_test_per_class << "\n";
  o << "toy.base_patterns = " << toy_base_patterns << "\n";
  o << "toy.mark_size = " << toy_mark_size << "\n";
  o << "toy.mark_jitter = " << toy_mark_jitter << "\n";
  o << "toy.noise = " << detail::fmt_double(toy_noise) << "\n";
  o << "toy.marks_enabled = " << (toy_marks_enabled ? "true" : "false") << "\n";
  o << "weights.alpha = " << detail::fmt_double(weights.alpha) << "\n";
  o << "weights.beta = " << detail::fmt_double(weights.beta) << "\n";
  o << "weights.lambda = " << detail::fmt_double(weights.lambda_fs) << "\n";
  o << "weights.eta = " << detail::fmt_double(weights.eta) << "\n";
  o << "weights.mu = " << detail::fmt_double(weights.mu) << "\n";
  o << "weights.eps = " << detail::fmt_double(weights.eps) << "\n";
  o << "weights.tau = " << detail::fmt_double(weights.tau) << "\n";
  o << "model.maps = " << model_maps << "\n";
  o << "model.channels = ";
  for (std::size_t i = 0; i < model_channels.size(); ++i)
    o << (i ? "," : "") << model_channels[i];
  o << "\n";
  o << "pretrain.epochs = " << pretrain_epochs << "\n";
  o << "pretrain.batch = " << pretrain_batch << "\n";
  o << "pretrain.lr = " << detail::fmt_double(pretrain_lr) << "\n";
  o << "pretrain.momentum = " << detail::fmt_double(pretrain_momentum) << "\n";
  o << "pretrain.counterfactual = " << pretrain_counterfactual << "\n";
  o << "distill.ipc = " << distill_ipc << "\n";
  o << "distill.group_size = " << distill_group_size << "\n";
  o << "distill.steps = " << distill_steps << "\n";
  o << "distill.lr = " << detail::fmt_double(distill_lr) << "\n";
  o << "distill.r_bn = " << detail::fmt_double(distill_r_bn) << "\n";
  o << "distill.grid = " << distill_grid << "\n";
  o << "distill.enable_lf = " << (distill_enable_lf ? "true" : "false") << "\n";
  o << "distill.enable_ls = " << (distill_enable_ls ? "true" : "false") << "\n";
  o << "softlabel.mode = " << softlabel_mode << "\n";
  o << "softlabel.aug = " << softlabel_aug << "\n";
  o << "student.epochs = " << student_epochs << "\n";
  o << "student.batch = " << student_batch << "\n";
  o << "student.lr = " << detail::fmt_double(student_lr) << "\n";
  o << "student.momentum = " << detail::fmt_double(student_momentum) << "\n";
  return o.str();
}

inline PipelineConfig parse(const std::string& text) {
  PipelineConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        " is not 'key = value': " + stripped);
    const std::string key = detail::trim(stripped.substr(0, eq));
    const std::string val = detail::trim(stripped.substr(eq + 1));

    if (key == "dataset.kind") c.dataset_kind = val;
    else if (key == "dataset.path") c.dataset_path = val;
    else if (key == "image.size") c.image_size = int(detail::parse_int(key, val));
    else if (key == "seed") c.seed = std::uint64_t(detail::parse_int(key, val));
    else if (key == "deterministic") c.deterministic = detail::parse_bool(key, val);
    else if (key == "out.dir") c.out_dir = val;
    else if (key == "toy.classes") c.toy_classes = int(detail::parse_int(key, val));
    else if (key == "toy.train_per_class")
      c.toy_train_per_class = int(detail::parse_int(key, val));
    else if (key == "toy.val_per_class")
      c.toy_val_per_class = int(detail::parse_int(key, val));
    else if (key == "toy.test_per_class")
      c.toy_test_per_class = int(detail::parse_int(key, val));
    else if (key == "toy.base_patterns")
      c.toy_base_patterns = int(detail::parse_int(key, val));
    else if (key == "toy.mark_size")
      c.toy_mark_size = int(detail::parse_int(key, val));
    else if (key == "toy.mark_jitter")
      c.toy_mark_jitter = int(detail::parse_int(key, val));
    else if (key == "toy.noise") c.toy_noise = detail::parse_double(key, val);
    else if (key == "toy.marks_enabled")
      c.toy_marks_enabled = detail::parse_bool(key, val);
    else if (key == "weights.alpha") c.weights.alpha = detail::parse_double(key, val);
    else if (key == "weights.beta") c.weights.beta = detail::parse_double(key, val);
    else if (key == "weights.lambda")
      c.weights.lambda_fs = detail::parse_double(key, val);
    else if (key == "weights.eta") c.weights.eta = detail::parse_double(key, val);
    else if (key == "weights.mu") c.weights.mu = detail::parse_double(key, val);
    else if (key == "weights.eps") c.weights.eps = detail::parse_double(key, val);
    else if (key == "weights.tau") c.weights.tau = detail::parse_double(key, val);
    else if (key == "model.maps") c.model_maps = int(detail::parse_int(key, val));
    else if (key == "model.channels")
      c.model_channels = detail::parse_int_list(key, val);
    else if (key == "pretrain.epochs")
      c.pretrain_epochs = int(detail::parse_int(key, val));
    else if (key == "pretrain.batch")
      c.pretrain_batch = int(detail::parse_int(key, val));
    else if (key == "pretrain.lr") c.pretrain_lr = detail::parse_double(key, val);
    else if (key == "pretrain.momentum")
      c.pretrain_momentum = detail::parse_double(key, val);
    else if (key == "pretrain.counterfactual") c.pretrain_counterfactual = val;
    else if (key == "distill.ipc") c.distill_ipc = int(detail::parse_int(key, val));
    else if (key == "distill.group_size")
      c.distill_group_size = int(detail::parse_int(key, val));
    else if (key == "distill.steps")
      c.distill_steps = int(detail::parse_int(key, val));
    else if (key == "distill.lr") c.distill_lr = detail::parse_double(key, val);
    else if (key == "distill.r_bn") c.distill_r_bn = detail::parse_double(key, val);
    else if (key == "distill.grid") c.distill_grid = val;
    else if (key == "distill.enable_lf")
      c.distill_enable_lf = detail::parse_bool(key, val);
    else if (key == "distill.enable_ls")
      c.distill_enable_ls = detail::parse_bool(key, val);
    else if (key == "softlabel.mode") c.softlabel_mode = val;
    else if (key == "softlabel.aug") c.softlabel_aug = val;
    else if (key == "student.epochs")
      c.student_epochs = int(detail::parse_int(key, val));
    else if (key == "student.batch")
      c.student_batch = int(detail::parse_int(key, val));
    else if (key == "student.lr") c.student_lr = detail::parse_double(key, val);
    else if (key == "student.momentum")
      c.student_momentum = detail::parse_double(key, val);
    else
      throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

inline PipelineConfig parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace fd2::config
