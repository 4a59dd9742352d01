// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillseg/affinity.hpp"
#include "distillseg/composer.hpp"
#include "distillseg/core/config.hpp"
#include "distillseg/core/error.hpp"
#include "distillseg/core/numeric.hpp"
#include "distillseg/core/rng.hpp"
#include "distillseg/data.hpp"
#include "distillseg/kernel.hpp"
#include "distillseg/logitskd.hpp"
#include "distillseg/models.hpp"

namespace distillseg::train {

using composer::LossBreakdown;
using models::SegNet;
using nn::Tensor;

struct StepRecord {
  long step = 0;
  int epoch = 0;
  int batch = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown mean;
  double lr = 0.0;
  /// Mean per-sample dice of the training-mode predictions seen during the epoch.
  double train_dice = 0.0;
  /// Dice on the evaluation set after the epoch; NaN when there is none.
  double eval_dice = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
  std::string role;
  std::string model;
  std::vector<EpochRecord> history;
  std::vector<StepRecord> steps;
  std::map<std::string, std::vector<double>> site_dice;
  std::string best_checkpoint;
  int best_epoch = 0;
  double best_dice = 0.0;
  double wall_seconds = 0.0;
  json config;
};

struct RunResult {
  std::unique_ptr<SegNet> model;  // best-epoch weights
  TrainReport report;
};

struct SiteDice {
  std::string site_id;
  double dice = 0.0;
  std::size_t samples = 0;
};

namespace detail {

inline constexpr std::size_t kEvalBatch = 16;

inline Tensor gather_images(const Tensor4<float>& images, const std::vector<std::size_t>& idx) {
  const Shape4& s = images.shape();
  Tensor out(Shape4{idx.size(), s.c, s.h, s.w});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = images.sample(idx[i]);
    std::copy(src.begin(), src.end(), out.sample(i).begin());
  }
  return out;
}

inline LabelMap gather_labels(const LabelMap& labels, const std::vector<std::size_t>& idx) {
  LabelMap out(idx.size(), labels.height(), labels.width(), labels.num_classes());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = labels.sample(idx[i]);
    std::copy(src.begin(), src.end(), out.sample(i).begin());
  }
  return out;
}

inline std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

inline double mean_sample_dice(const LabelMap& pred, const LabelMap& gt) {
  double total = 0.0;
  for (std::size_t i = 0; i < pred.batch(); ++i) total += composer::dice_score_sample(pred, gt, i);
  return total / static_cast<double>(pred.batch());
}

inline long step_size_iterations(const ExperimentConfig& cfg, std::size_t samples) {
  const double batches = std::ceil(static_cast<double>(samples) / cfg.batch_size);
  return std::max(1L, std::lround(cfg.optimizer.step_size_epochs * batches));
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

// Teacher outputs on the student's training set. The teacher is frozen and deterministic, so
// one pass serves every epoch.
struct TeacherCache {
  Tensor4<float> logits;
  LabelMap labels;
  std::map<std::string, Tensor4<float>> features;
};

inline TeacherCache run_teacher(SegNet& teacher, const data::SiteDataset& ds,
                                const std::vector<std::string>& taps) {
  TeacherCache cache;
  const std::size_t n = ds.size();
  const Shape4& s = ds.images.shape();
  cache.labels = LabelMap(n, s.h, s.w, teacher.spec().num_classes);
  for (std::size_t start = 0; start < n; start += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + kEvalBatch); ++i) idx.push_back(i);
    auto out = teacher.forward(gather_images(ds.images, idx), {false, false}, taps);
    if (start == 0) {
      const Shape4& ls = out.logits.shape();
      cache.logits = Tensor4<float>(Shape4{n, ls.c, ls.h, ls.w});
      for (const auto& [name, f] : out.features) {
        const Shape4& fs = f.shape();
        cache.features.emplace(name, Tensor4<float>(Shape4{n, fs.c, fs.h, fs.w}));
      }
    }
    const LabelMap labels = argmax_labels(out.logits);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto src = out.logits.sample(i);
      std::copy(src.begin(), src.end(), cache.logits.sample(idx[i]).begin());
      const auto lab = labels.sample(i);
      std::copy(lab.begin(), lab.end(), cache.labels.sample(idx[i]).begin());
      for (auto& [name, f] : out.features) {
        const auto fsrc = f.sample(i);
        std::copy(fsrc.begin(), fsrc.end(), cache.features.at(name).sample(idx[i]).begin());
      }
    }
  }
  return cache;
}

template <typename T>
Tensor4<T> gather_cast(const Tensor4<float>& src, const std::vector<std::size_t>& idx) {
  const Shape4& s = src.shape();
  Tensor4<T> out(Shape4{idx.size(), s.c, s.h, s.w});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto from = src.sample(idx[i]);
    auto to = out.sample(i);
    for (std::size_t k = 0; k < from.size(); ++k) to[k] = static_cast<T>(from[k]);
  }
  return out;
}

struct KernelBranch {
  std::string tap;
  kernel::AlignmentProjector<double> student_proj;
  kernel::AlignmentProjector<double> teacher_proj;
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

/// Per-site mean of per-sample hard dice; eval-mode forward, no augmentation.
inline std::vector<SiteDice> evaluate(SegNet& model, const std::vector<data::SiteDataset>& sets) {
  std::vector<SiteDice> out;
  for (const auto& ds : sets) {
    if (ds.size() == 0) throw ValidationError("evaluate: empty dataset for site " + ds.site_id);
    double total = 0.0;
    for (std::size_t start = 0; start < ds.size(); start += detail::kEvalBatch) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(ds.size(), start + detail::kEvalBatch); ++i) {
        idx.push_back(i);
      }
      auto result = model.forward(detail::gather_images(ds.images, idx), {false, false});
      const LabelMap pred = argmax_labels(result.logits);
      const LabelMap gt = detail::gather_labels(ds.masks, idx);
      for (std::size_t i = 0; i < idx.size(); ++i) total += composer::dice_score_sample(pred, gt, i);
    }
    out.push_back({ds.site_id, total / static_cast<double>(ds.size()), ds.size()});
  }
  return out;
}

inline json to_json(const LossBreakdown& b) {
  return {{"seg", b.seg}, {"logits", b.logits}, {"kernel", b.kernel},
          {"affinity", b.affinity}, {"total", b.total}};
}

inline json to_json(const TrainReport& r) {
  json j;
  j["role"] = r.role;
  j["model"] = r.model;
  j["best_checkpoint"] = r.best_checkpoint;
  j["best_epoch"] = r.best_epoch;
  j["best_dice"] = r.best_dice;
  j["wall_seconds"] = r.wall_seconds;
  j["config"] = r.config;
  j["history"] = json::array();
  for (const auto& e : r.history) {
    json row{{"epoch", e.epoch}, {"loss", to_json(e.mean)}, {"lr", e.lr},
             {"train_dice", e.train_dice}};
    row["eval_dice"] = std::isnan(e.eval_dice) ? json(nullptr) : json(e.eval_dice);
    j["history"].push_back(row);
  }
  j["site_dice"] = r.site_dice;
  return j;
}

/// One row per optimisation step; eval_dice is filled on the last step of each epoch.
inline std::string metrics_csv(const TrainReport& r) {
  std::string out = "step,epoch,batch,seg,logits,kernel,affinity,total,lr,train_dice,eval_dice\n";
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    const bool epoch_end = i + 1 == r.steps.size() || r.steps[i + 1].epoch != s.epoch;
    const EpochRecord* e = epoch_end ? &r.history.at(static_cast<std::size_t>(s.epoch)) : nullptr;
    out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + std::to_string(s.batch) +
           "," + detail::format_double(s.loss.seg) + "," + detail::format_double(s.loss.logits) +
           "," + detail::format_double(s.loss.kernel) + "," +
           detail::format_double(s.loss.affinity) + "," + detail::format_double(s.loss.total) +
           "," + detail::format_double(s.lr) + "," +
           (e != nullptr ? detail::format_double(e->train_dice) : "") + "," +
           (e != nullptr ? detail::format_double(e->eval_dice) : "") + "\n";
  }
  return out;
}

struct FitOptions {
  std::string role = "student";
  std::string model_name;
  std::string seed_tag = "student";
  /// Null for plain supervised training.
  SegNet* teacher = nullptr;
  std::optional<data::SiteDataset> eval_set;
  std::string out_dir;
};

/// Shared optimisation loop: Loss_Seg on ground truth plus, when a teacher is given, the
/// enabled distillation terms, all weighted into one total.
inline RunResult fit(const ExperimentConfig& cfg, const data::SiteDataset& train_set,
                     const FitOptions& opt) {
  validate(cfg);
  if (train_set.size() == 0) throw ValidationError("training set is empty");
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(cfg.seed);
  auto model = models::build_model(opt.model_name, cfg.num_classes,
                                   root.child(opt.seed_tag + "-init").seed());
  auto best = models::build_model(opt.model_name, cfg.num_classes, 0);

  const bool distill = opt.teacher != nullptr && cfg.module_flags.any();
  const ModuleFlags flags = distill ? cfg.module_flags : ModuleFlags{false, false, false};
  const std::vector<std::string> taps = flags.use_kmm ? cfg.tap_layers : std::vector<std::string>{};

  detail::TeacherCache cache;
  std::vector<detail::KernelBranch> branches;
  if (distill) {
    cache = detail::run_teacher(*opt.teacher, train_set, taps);
    if (flags.use_kmm) {
      // Probe the student's tap shapes once to size the projectors.
      auto probe = model->forward(detail::gather_images(train_set.images, {0}), {false, false}, taps);
      Rng proj_rng = root.child("projectors");
      for (const auto& tap : taps) {
        const Shape4 fs = probe.features.at(tap).shape();
        const Shape4 ft = cache.features.at(tap).shape();
        detail::KernelBranch branch;
        branch.tap = tap;
        branch.student_proj = kernel::AlignmentProjector<double>::random(
            fs.c, static_cast<std::size_t>(cfg.common_dim), proj_rng);
        branch.teacher_proj = kernel::AlignmentProjector<double>::random(
            ft.c, static_cast<std::size_t>(cfg.common_dim), proj_rng);
        branches.push_back(std::move(branch));
      }
    }
  }

  const affinity::AffinityOptions aff_opt{cfg.margin, cfg.epsilon, cfg.per_class_kl};
  const logitskd::LogitsOptions lm_opt{cfg.epsilon, cfg.temperature, cfg.kl_reverse};
  nn::Adam adam;
  const nn::CyclicLR schedule(cfg.optimizer.learning_rate, cfg.optimizer.min_learning_rate,
                              static_cast<double>(detail::step_size_iterations(cfg, train_set.size())));

  TrainReport report;
  report.role = opt.role;
  report.model = opt.model_name;
  report.config = to_json(cfg);
  double best_score = -1.0;
  long step = 0;
  const std::size_t batch_size = static_cast<std::size_t>(cfg.batch_size);
  auto params = model->parameters();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::shuffled(train_set.size(),
                                        root.child(opt.seed_tag + "-shuffle").child(epoch));
    LossBreakdown sum;
    double dice_sum = 0.0;
    int batches = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size, ++batches, ++step) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + batch_size)));
      const Tensor images = detail::gather_images(train_set.images, idx);
      const LabelMap gt = detail::gather_labels(train_set.masks, idx);

      model->zero_grad();
      auto fwd = model->forward(images, {true, true}, taps);
      const Tensor4<double> logits = fwd.logits.cast<double>();
      const Tensor4<double> probs = softmax_channels(logits);
      const auto prob_map = ProbMap<double>::unchecked(probs);
      dice_sum += detail::mean_sample_dice(argmax_labels(probs), gt) * static_cast<double>(idx.size());

      auto seg = composer::segmentation_loss(prob_map, gt, cfg.seg_loss, cfg.gamma, cfg.smooth);
      Tensor4<double> grad_probs = std::move(seg.grad);
      double aff_value = 0.0;
      double lm_value = 0.0;
      double kernel_value = 0.0;
      models::FeatureTaps tap_grads;

      if (flags.use_aam) {
        const LabelMap teacher_labels = detail::gather_labels(cache.labels, idx);
        const auto pairs = affinity::build_pixel_pairs(teacher_labels, cfg.neighborhood_radius);
        auto aff = affinity::affinity_loss(prob_map, pairs, aff_opt);
        aff_value = aff.loss_total;
        aff.grad *= cfg.loss_weights.lambda3;
        grad_probs += aff.grad;
      }
      Tensor4<double> grad_logits = softmax_channels_backward(probs, grad_probs);
      if (flags.use_lm) {
        const auto teacher_logits = detail::gather_cast<double>(cache.logits, idx);
        auto lm = logitskd::logits_loss(logits, teacher_logits, lm_opt);
        lm_value = lm.value;
        lm.grad_student *= cfg.loss_weights.lambda1;
        grad_logits += lm.grad_student;
      }
      if (flags.use_kmm) {
        for (auto& branch : branches) {
          const Tensor4<double> fs = fwd.features.at(branch.tap).cast<double>();
          const auto ft = detail::gather_cast<double>(cache.features.at(branch.tap), idx);
          const kernel::HW common{std::min(fs.shape().h, ft.shape().h),
                                  std::min(fs.shape().w, ft.shape().w)};
          const auto as = kernel::align_features(fs, branch.student_proj, common);
          const auto at = kernel::align_features(ft, branch.teacher_proj, common);
          if (as.shape() != at.shape()) {
            throw ValidationError("tap " + branch.tap + ": aligned shapes differ " +
                                  as.shape().str() + " vs " + at.shape().str());
          }
          const auto ks = kernel::gram_matrix(as, cfg.raw_gram);
          const auto kt = kernel::gram_matrix(at, cfg.raw_gram);
          auto kl = kernel::kernel_loss(ks, kt);
          kernel_value += kl.value;
          for (auto& v : kl.grad_student.data) v *= cfg.loss_weights.lambda2;
          for (auto& v : kl.grad_teacher.data) v *= cfg.loss_weights.lambda2;
          branch.student_proj.zero_grad();
          branch.teacher_proj.zero_grad();
          const auto g_fs = kernel::align_features_backward(
              fs, branch.student_proj, kernel::gram_matrix_backward(as, kl.grad_student, cfg.raw_gram));
          kernel::align_features_backward(
              ft, branch.teacher_proj, kernel::gram_matrix_backward(at, kl.grad_teacher, cfg.raw_gram));
          tap_grads.emplace(branch.tap, g_fs.cast<float>());
        }
      }

      LossBreakdown loss;
      try {
        loss = composer::total_loss(seg.value, lm_value, kernel_value, aff_value, cfg.loss_weights,
                                    flags);
      } catch (const NumericError& e) {
        throw NumericError(opt.role + " training diverged at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batches) + ": " + e.what());
      }

      model->backward(grad_logits.cast<float>(), tap_grads);
      lr = schedule.at(step);
      adam.begin_step();
      std::size_t slot = 0;
      for (auto* p : params) {
        adam.update<float>(slot++, p->value, p->grad, lr);
      }
      for (auto& branch : branches) {
        adam.update<double>(slot++, branch.student_proj.weights(), branch.student_proj.grad(), lr);
        adam.update<double>(slot++, branch.teacher_proj.weights(), branch.teacher_proj.grad(), lr);
      }

      report.steps.push_back({step, epoch, batches, loss, lr});
      sum.seg += loss.seg;
      sum.logits += loss.logits;
      sum.kernel += loss.kernel;
      sum.affinity += loss.affinity;
      sum.total += loss.total;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const double nb = static_cast<double>(batches);
    rec.mean = {sum.seg / nb, sum.logits / nb, sum.kernel / nb, sum.affinity / nb, sum.total / nb};
    rec.train_dice = dice_sum / static_cast<double>(train_set.size());
    double score = rec.train_dice;
    if (opt.eval_set) {
      rec.eval_dice = evaluate(*model, {*opt.eval_set}).front().dice;
      report.site_dice[opt.eval_set->site_id].push_back(rec.eval_dice);
      score = rec.eval_dice;
    }
    report.history.push_back(rec);
    if (score > best_score) {
      best_score = score;
      report.best_epoch = epoch;
      models::copy_state(*model, *best);
    }
  }
  report.best_dice = best_score;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!opt.out_dir.empty()) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(opt.out_dir, ec);
    if (ec) throw IoError("cannot create run directory " + opt.out_dir + ": " + ec.message());
    const fs::path ckpt = fs::path(opt.out_dir) / "checkpoint.dsk";
    models::save_checkpoint(*best, ckpt.string(),
                            {{"role", opt.role}, {"best_epoch", report.best_epoch},
                             {"best_dice", report.best_dice}});
    report.best_checkpoint = ckpt.string();
    detail::write_text(fs::path(opt.out_dir) / "metrics.csv", metrics_csv(report));
    detail::write_text(fs::path(opt.out_dir) / "report.json", to_json(report).dump(2) + "\n");
    save_config(cfg, (fs::path(opt.out_dir) / "config.json").string());
  }
  return {std::move(best), std::move(report)};
}

/// Supervised teacher training on Loss_Seg; keeps the epoch with the best training dice.
inline RunResult train_teacher(const ExperimentConfig& cfg, const data::SiteDataset& teacher_train,
                               const std::string& out_dir = "") {
  FitOptions opt;
  opt.role = "teacher";
  opt.model_name = cfg.teacher_name;
  opt.seed_tag = "teacher";
  opt.out_dir = out_dir;
  return fit(cfg, teacher_train, opt);
}

/// Student training with the frozen teacher; keeps the epoch with the best eval dice.
/// With every module flag off this is plain supervised training of the student.
inline RunResult distill_student(const ExperimentConfig& cfg, SegNet& teacher,
                                 const data::SiteDataset& student_train,
                                 const std::optional<data::SiteDataset>& eval_set,
                                 const std::string& out_dir = "") {
  FitOptions opt;
  opt.role = "student";
  opt.model_name = cfg.student_name;
  opt.seed_tag = "student";
  opt.teacher = &teacher;
  opt.eval_set = eval_set;
  opt.out_dir = out_dir;
  return fit(cfg, student_train, opt);
}

/// Student trained on Loss_Seg alone, without any teacher.
inline RunResult train_student_supervised(const ExperimentConfig& cfg,
                                          const data::SiteDataset& student_train,
                                          const std::optional<data::SiteDataset>& eval_set,
                                          const std::string& out_dir = "") {
  FitOptions opt;
  opt.role = "student";
  opt.model_name = cfg.student_name;
  opt.seed_tag = "student";
  opt.eval_set = eval_set;
  opt.out_dir = out_dir;
  return fit(cfg, student_train, opt);
}

// ---------------------------------------------------------------------------------------------
// Site data and the ablation grid.

/// Loads `<data_dir>/<site>` for every configured site, or generates them synthetically.
inline std::vector<data::SiteDataset> prepare_sites(const ExperimentConfig& cfg) {
  std::vector<data::SiteDataset> sites;
  if (!cfg.data.data_dir.empty()) {
    for (const auto& id : cfg.sites) {
      auto ds = data::load_dataset((std::filesystem::path(cfg.data.data_dir) / id).string());
      ds.site_id = id;
      sites.push_back(std::move(ds));
    }
    return sites;
  }
  const auto size = static_cast<std::size_t>(cfg.data.image_size);
  const std::uint64_t data_seed = Rng(cfg.seed).child("data").seed();
  for (const auto& id : cfg.sites) {
    sites.push_back(data::generate_site(data::default_site(id), static_cast<std::size_t>(cfg.data.samples_per_site),
                                        size, size, data_seed));
  }
  return sites;
}

struct Combo {
  std::string name;
  ModuleFlags flags;
};

/// Rows of the component ablation, in table order.
inline std::vector<Combo> component_grid() {
  return {{"baseline", {false, false, false}},  {"+LM", {false, false, true}},
          {"+AAM", {true, false, false}},       {"+KMM", {false, true, false}},
          {"+KMM+LM", {false, true, true}},     {"+AAM+LM", {true, false, true}},
          {"+AAM+KMM", {true, true, false}},    {"+AAM+KMM+LM", {true, true, true}}};
}

inline std::vector<Combo> singles_grid() {
  return {{"baseline", {false, false, false}}, {"+LM", {false, false, true}},
          {"+AAM", {true, false, false}},      {"+KMM", {false, true, false}},
          {"+AAM+KMM+LM", {true, true, true}}};
}

inline std::vector<Combo> grid_by_name(const std::string& name) {
  if (name == "components") return component_grid();
  if (name == "singles") return singles_grid();
  throw ValidationError("unknown ablation grid \"" + name + "\" (expected components or singles)");
}

struct AblationCell {
  std::string combo;
  std::string target;
  std::uint64_t seed = 0;
  double dice = 0.0;
};

struct AblationTable {
  std::vector<std::string> combos;
  std::vector<std::string> targets;
  std::vector<AblationCell> runs;

  /// Mean over seeds for one (combo, target).
  double cell(const std::string& combo, const std::string& target) const {
    double total = 0.0;
    int count = 0;
    for (const auto& r : runs) {
      if (r.combo == combo && r.target == target) {
        total += r.dice;
        ++count;
      }
    }
    return count == 0 ? std::numeric_limits<double>::quiet_NaN() : total / count;
  }

  /// Mean over every seed and target.
  double row_mean(const std::string& combo) const {
    double total = 0.0;
    int count = 0;
    for (const auto& r : runs) {
      if (r.combo == combo) {
        total += r.dice;
        ++count;
      }
    }
    return count == 0 ? std::numeric_limits<double>::quiet_NaN() : total / count;
  }

  std::string csv() const {
    std::string out = "combo";
    for (const auto& t : targets) out += "," + t;
    out += ",mean\n";
    for (const auto& c : combos) {
      out += c;
      for (const auto& t : targets) out += "," + detail::format_double(cell(c, t));
      out += "," + detail::format_double(row_mean(c)) + "\n";
    }
    return out;
  }

  std::string text() const {
    std::string out;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-14s", "Method");
    out += buf;
    for (const auto& t : targets) {
      std::snprintf(buf, sizeof buf, "%8s", t.c_str());
      out += buf;
    }
    out += "    Mean\n";
    for (const auto& c : combos) {
      std::snprintf(buf, sizeof buf, "%-14s", c.c_str());
      out += buf;
      for (const auto& t : targets) {
        std::snprintf(buf, sizeof buf, "%8.3f", cell(c, t));
        out += buf;
      }
      std::snprintf(buf, sizeof buf, "%8.3f\n", row_mean(c));
      out += buf;
    }
    return out;
  }
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> targets;
  std::vector<Combo> grid;
  std::string out_dir;
  /// Optional externally trained teacher; otherwise one is trained per (seed, target).
  SegNet* teacher = nullptr;
  std::function<void(const std::string&)> log;
};

/// One student run per combo per seed per target. Teachers are trained once per
/// (seed, target) on that target's teacher sites and shared across combos.
inline AblationTable run_ablation(const ExperimentConfig& base, const AblationOptions& opt) {
  require(!opt.grid.empty(), "run_ablation: grid is empty");
  require(!opt.seeds.empty() && !opt.targets.empty(), "run_ablation: need seeds and targets");
  namespace fs = std::filesystem;
  AblationTable table;
  for (const auto& c : opt.grid) table.combos.push_back(c.name);
  table.targets = opt.targets;
  for (std::uint64_t seed : opt.seeds) {
    ExperimentConfig cfg = base;
    cfg.seed = seed;
    const auto sites = prepare_sites(cfg);
    for (const auto& target : opt.targets) {
      cfg.target_site = target;
      const auto split = data::leave_one_site_out(sites, target, cfg.teacher_fraction);
      const auto student_train = data::concat(split.student_train);
      const std::string cell_dir =
          opt.out_dir.empty() ? "" : (fs::path(opt.out_dir) / ("seed" + std::to_string(seed)) / target).string();
      std::unique_ptr<SegNet> own_teacher;
      SegNet* teacher = opt.teacher;
      if (teacher == nullptr) {
        if (opt.log) opt.log("seed " + std::to_string(seed) + " target " + target + ": teacher");
        auto t = train_teacher(cfg, data::concat(split.teacher_train),
                               cell_dir.empty() ? "" : (fs::path(cell_dir) / "teacher").string());
        own_teacher = std::move(t.model);
        teacher = own_teacher.get();
      }
      for (const auto& combo : opt.grid) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.module_flags = combo.flags;
        const std::string run_dir =
            cell_dir.empty() ? "" : (fs::path(cell_dir) / combo.name).string();
        auto run = distill_student(run_cfg, *teacher, student_train, split.eval_set, run_dir);
        const double dice = evaluate(*run.model, {split.eval_set}).front().dice;
        table.runs.push_back({combo.name, target, seed, dice});
        if (opt.log) {
          char buf[128];
          std::snprintf(buf, sizeof buf, "seed %llu target %s %-12s dice %.4f (%.1fs)",
                        static_cast<unsigned long long>(seed), target.c_str(), combo.name.c_str(),
                        dice, run.report.wall_seconds);
          opt.log(buf);
        }
      }
    }
  }
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    detail::write_text(fs::path(opt.out_dir) / "ablation.csv", table.csv());
    detail::write_text(fs::path(opt.out_dir) / "ablation.txt", table.text());
  }
  return table;
}

}  // namespace distillseg::train
