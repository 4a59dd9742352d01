// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillseg/core/error.hpp"

namespace distillseg {

using json = nlohmann::json;

struct LossWeights {
  double lambda1 = 0.2;  // logits
  double lambda2 = 0.9;  // kernel
  double lambda3 = 0.9;  // affinity
};

struct ModuleFlags {
  bool use_aam = true;
  bool use_kmm = true;
  bool use_lm = true;

  bool any() const { return use_aam || use_kmm || use_lm; }
  bool operator==(const ModuleFlags&) const = default;
};

enum class SegLossKind { dice, focal, dice_focal };

struct OptimizerConfig {
  double learning_rate = 0.01;
  double min_learning_rate = 1e-6;
  /// Half-cycle length of the triangular schedule, in epochs' worth of batches.
  double step_size_epochs = 2.0;
};

struct DataConfig {
  int samples_per_site = 100;
  int image_size = 64;
  /// Root holding one dataset directory per site; empty means generate synthetically.
  std::string data_dir;
};

struct AblationConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<std::string> targets{"S3", "S4", "S5"};
  std::string grid = "components";
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::vector<std::string> sites{"S1", "S2", "S3", "S4", "S5", "S6"};
  std::string target_site = "S3";
  std::string teacher_name = "toy_teacher_large";
  std::string student_name = "toy_student_s";
  std::string teacher_checkpoint;
  int num_classes = 2;
  ModuleFlags module_flags;
  LossWeights loss_weights;
  OptimizerConfig optimizer;
  int epochs = 30;
  int batch_size = 16;
  double teacher_fraction = 0.6;

  // affinity
  double margin = 3.0;
  int neighborhood_radius = 1;
  bool per_class_kl = false;
  double epsilon = 1e-8;

  // kernel
  int common_dim = 32;
  bool raw_gram = false;
  std::vector<std::string> tap_layers{"enc_last"};

  // logits
  bool kl_reverse = false;
  double temperature = 1.0;

  // segmentation
  SegLossKind seg_loss = SegLossKind::dice_focal;
  double gamma = 2.0;
  double smooth = 1.0;

  DataConfig data;
  AblationConfig ablation;
};

inline std::string to_string(SegLossKind kind) {
  switch (kind) {
    case SegLossKind::dice: return "dice";
    case SegLossKind::focal: return "focal";
    case SegLossKind::dice_focal: return "dice_focal";
  }
  return "dice_focal";
}

inline SegLossKind seg_loss_from_string(const std::string& name, const std::string& path) {
  if (name == "dice") return SegLossKind::dice;
  if (name == "focal") return SegLossKind::focal;
  if (name == "dice_focal" || name == "dice+focal") return SegLossKind::dice_focal;
  throw ValidationError(path + ": expected one of dice, focal, dice_focal; got \"" + name + "\"");
}

/// Field-by-field description used by --help and the README.
inline const std::vector<std::pair<std::string, std::string>>& config_field_docs() {
  static const std::vector<std::pair<std::string, std::string>> docs = {
      {"seed", "base RNG seed (default 1)"},
      {"sites", "site identifiers taking part (default S1..S6)"},
      {"target_site", "held-out site, never seen in training (default S3)"},
      {"teacher_name", "teacher registry key (default toy_teacher_large)"},
      {"student_name", "student registry key (default toy_student_s)"},
      {"teacher_checkpoint", "pretrained teacher archive; empty trains one (default \"\")"},
      {"num_classes", "segmentation classes including background (default 2)"},
      {"module_flags.use_aam", "enable the pixel-affinity loss (default true)"},
      {"module_flags.use_kmm", "enable the gram-matrix kernel loss (default true)"},
      {"module_flags.use_lm", "enable the logits KL loss (default true)"},
      {"loss_weights.lambda1", "logits loss weight (default 0.2)"},
      {"loss_weights.lambda2", "kernel loss weight (default 0.9)"},
      {"loss_weights.lambda3", "affinity loss weight (default 0.9)"},
      {"optimizer.learning_rate", "Adam peak learning rate (default 0.01)"},
      {"optimizer.min_learning_rate", "cyclic schedule floor (default 1e-6)"},
      {"optimizer.step_size_epochs", "schedule half-cycle in epochs (default 2)"},
      {"epochs", "training epochs (default 30)"},
      {"batch_size", "mini-batch size (default 16)"},
      {"teacher_fraction", "share of non-target sites given to the teacher (default 0.6)"},
      {"margin", "affinity hinge margin m (default 3.0)"},
      {"neighborhood_radius", "Chebyshev radius of affinity neighbours (default 1)"},
      {"per_class_kl", "affinity KL as mean of one-vs-rest class KLs (default false)"},
      {"epsilon", "probability clamp inside KL, in (0, 1e-3] (default 1e-8)"},
      {"common_dim", "channel count after 1x1 alignment (default 32)"},
      {"raw_gram", "unscaled inner products in the gram matrix (default false)"},
      {"tap_layers", "feature taps for the kernel loss (default [enc_last])"},
      {"kl_reverse", "logits loss as KL(teacher||student) (default false)"},
      {"temperature", "softmax temperature of the logits loss (default 1.0)"},
      {"seg_loss", "dice | focal | dice_focal (default dice_focal)"},
      {"gamma", "focal loss exponent (default 2.0)"},
      {"smooth", "dice smoothing constant (default 1.0)"},
      {"data.samples_per_site", "synthetic samples per site (default 100)"},
      {"data.image_size", "synthetic image side length (default 64)"},
      {"data.data_dir", "root of per-site dataset dirs; empty generates data (default \"\")"},
      {"ablation.seeds", "seeds of the ablation grid (default [1,2,3])"},
      {"ablation.targets", "held-out sites of the ablation grid (default [S3,S4,S5])"},
      {"ablation.grid", "components (8 combos) | singles (baseline, singles, full) (default components)"},
  };
  return docs;
}

inline json to_json(const ExperimentConfig& c) {
  return json{
      {"version", "v1"},
      {"seed", c.seed},
      {"sites", c.sites},
      {"target_site", c.target_site},
      {"teacher_name", c.teacher_name},
      {"student_name", c.student_name},
      {"teacher_checkpoint", c.teacher_checkpoint},
      {"num_classes", c.num_classes},
      {"module_flags",
       {{"use_aam", c.module_flags.use_aam},
        {"use_kmm", c.module_flags.use_kmm},
        {"use_lm", c.module_flags.use_lm}}},
      {"loss_weights",
       {{"lambda1", c.loss_weights.lambda1},
        {"lambda2", c.loss_weights.lambda2},
        {"lambda3", c.loss_weights.lambda3}}},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"min_learning_rate", c.optimizer.min_learning_rate},
        {"step_size_epochs", c.optimizer.step_size_epochs}}},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"teacher_fraction", c.teacher_fraction},
      {"margin", c.margin},
      {"neighborhood_radius", c.neighborhood_radius},
      {"per_class_kl", c.per_class_kl},
      {"epsilon", c.epsilon},
      {"common_dim", c.common_dim},
      {"raw_gram", c.raw_gram},
      {"tap_layers", c.tap_layers},
      {"kl_reverse", c.kl_reverse},
      {"temperature", c.temperature},
      {"seg_loss", to_string(c.seg_loss)},
      {"gamma", c.gamma},
      {"smooth", c.smooth},
      {"data",
       {{"samples_per_site", c.data.samples_per_site},
        {"image_size", c.data.image_size},
        {"data_dir", c.data.data_dir}}},
      {"ablation",
       {{"seeds", c.ablation.seeds}, {"targets", c.ablation.targets}, {"grid", c.ablation.grid}}},
  };
}

namespace detail {

class FieldReader {
 public:
  FieldReader(const json& node, std::string prefix) : node_(node), prefix_(std::move(prefix)) {
    if (!node_.is_object()) throw ValidationError(where("") + ": expected an object");
  }

  template <typename V>
  void read(const char* key, V& out) {
    seen_.push_back(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception&) {
      throw ValidationError(where(key) + ": wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  const json* child(const char* key) {
    seen_.push_back(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const {
    if (prefix_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? prefix_ : prefix_ + "." + key;
  }

  void reject_unknown() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (it.key() == "version" && prefix_.empty()) continue;
      bool known = false;
      for (const auto& k : seen_) known = known || (k == it.key());
      if (!known) throw ValidationError(where(it.key()) + ": unknown field");
    }
  }

 private:
  const json& node_;
  std::string prefix_;
  std::vector<std::string> seen_;
};

}  // namespace detail

/// Checks every field constraint; the message names the offending field path.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& path, const std::string& why) {
    throw ValidationError(path + ": " + why);
  };
  if (c.sites.empty()) fail("sites", "must list at least one site");
  bool target_known = false;
  for (const auto& s : c.sites) target_known = target_known || (s == c.target_site);
  if (!target_known) fail("target_site", "\"" + c.target_site + "\" is not in sites");
  if (c.num_classes < 2) fail("num_classes", "must be >= 2");
  if (!(c.loss_weights.lambda1 >= 0.0)) fail("loss_weights.lambda1", "must be >= 0");
  if (!(c.loss_weights.lambda2 >= 0.0)) fail("loss_weights.lambda2", "must be >= 0");
  if (!(c.loss_weights.lambda3 >= 0.0)) fail("loss_weights.lambda3", "must be >= 0");
  if (!(c.optimizer.learning_rate > 0.0)) fail("optimizer.learning_rate", "must be > 0");
  if (!(c.optimizer.min_learning_rate > 0.0) ||
      c.optimizer.min_learning_rate > c.optimizer.learning_rate) {
    fail("optimizer.min_learning_rate", "must be in (0, learning_rate]");
  }
  if (!(c.optimizer.step_size_epochs > 0.0)) fail("optimizer.step_size_epochs", "must be > 0");
  if (c.epochs < 1) fail("epochs", "must be >= 1");
  if (c.batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(c.teacher_fraction > 0.0 && c.teacher_fraction < 1.0)) {
    fail("teacher_fraction", "must be in (0, 1)");
  }
  if (!(c.margin > 0.0)) fail("margin", "must be > 0");
  if (c.neighborhood_radius < 1) fail("neighborhood_radius", "must be >= 1");
  if (!(c.epsilon > 0.0 && c.epsilon <= 1e-3)) fail("epsilon", "must be in (0, 1e-3]");
  if (c.common_dim < 1) fail("common_dim", "must be >= 1");
  if (c.tap_layers.empty()) fail("tap_layers", "must name at least one tap");
  if (!(c.temperature > 0.0)) fail("temperature", "must be > 0");
  if (!(c.gamma >= 0.0)) fail("gamma", "must be >= 0");
  if (!(c.smooth > 0.0)) fail("smooth", "must be > 0");
  if (c.data.samples_per_site < 1) fail("data.samples_per_site", "must be >= 1");
  if (c.data.image_size < 32) fail("data.image_size", "must be >= 32");
  if (c.ablation.seeds.empty()) fail("ablation.seeds", "must list at least one seed");
  if (c.ablation.targets.empty()) fail("ablation.targets", "must list at least one site");
  if (c.ablation.grid != "components" && c.ablation.grid != "singles") {
    fail("ablation.grid", "expected components or singles");
  }
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::FieldReader top(j, "");
  if (auto it = j.find("version"); it != j.end() && *it != "v1") {
    throw ValidationError("version: unsupported config version " + it->dump());
  }
  top.read("seed", c.seed);
  top.read("sites", c.sites);
  top.read("target_site", c.target_site);
  top.read("teacher_name", c.teacher_name);
  top.read("student_name", c.student_name);
  top.read("teacher_checkpoint", c.teacher_checkpoint);
  top.read("num_classes", c.num_classes);
  if (const json* node = top.child("module_flags")) {
    detail::FieldReader r(*node, "module_flags");
    r.read("use_aam", c.module_flags.use_aam);
    r.read("use_kmm", c.module_flags.use_kmm);
    r.read("use_lm", c.module_flags.use_lm);
    r.reject_unknown();
  }
  if (const json* node = top.child("loss_weights")) {
    detail::FieldReader r(*node, "loss_weights");
    r.read("lambda1", c.loss_weights.lambda1);
    r.read("lambda2", c.loss_weights.lambda2);
    r.read("lambda3", c.loss_weights.lambda3);
    r.reject_unknown();
  }
  if (const json* node = top.child("optimizer")) {
    detail::FieldReader r(*node, "optimizer");
    r.read("learning_rate", c.optimizer.learning_rate);
    r.read("min_learning_rate", c.optimizer.min_learning_rate);
    r.read("step_size_epochs", c.optimizer.step_size_epochs);
    r.reject_unknown();
  }
  top.read("epochs", c.epochs);
  top.read("batch_size", c.batch_size);
  top.read("teacher_fraction", c.teacher_fraction);
  top.read("margin", c.margin);
  top.read("neighborhood_radius", c.neighborhood_radius);
  top.read("per_class_kl", c.per_class_kl);
  top.read("epsilon", c.epsilon);
  top.read("common_dim", c.common_dim);
  top.read("raw_gram", c.raw_gram);
  top.read("tap_layers", c.tap_layers);
  top.read("kl_reverse", c.kl_reverse);
  top.read("temperature", c.temperature);
  std::string seg = to_string(c.seg_loss);
  top.read("seg_loss", seg);
  c.seg_loss = seg_loss_from_string(seg, "seg_loss");
  top.read("gamma", c.gamma);
  top.read("smooth", c.smooth);
  if (const json* node = top.child("data")) {
    detail::FieldReader r(*node, "data");
    r.read("samples_per_site", c.data.samples_per_site);
    r.read("image_size", c.data.image_size);
    r.read("data_dir", c.data.data_dir);
    r.reject_unknown();
  }
  if (const json* node = top.child("ablation")) {
    detail::FieldReader r(*node, "ablation");
    r.read("seeds", c.ablation.seeds);
    r.read("targets", c.ablation.targets);
    r.read("grid", c.ablation.grid);
    r.reject_unknown();
  }
  top.reject_unknown();
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file " + path);
  out << to_json(c).dump(2) << "\n";
}

/// Applies a `dotted.key=value` override. The value is parsed as JSON when possible and
/// taken as a plain string otherwise.
inline ExperimentConfig apply_override(const ExperimentConfig& base, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override \"" + assignment + "\" is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json doc = to_json(base);
  std::string pointer;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) pointer += "/" + part;
  try {
    const json::json_pointer ptr(pointer);
    if (!doc.contains(ptr)) throw ValidationError(key + ": unknown field");
    doc[ptr] = value;
  } catch (const json::exception&) {
    throw ValidationError(key + ": invalid field path");
  }
  return config_from_json(doc);
}

}  // namespace distillseg
