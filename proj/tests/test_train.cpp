// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace distillseg;
using namespace distillseg::train;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seed = 3;
  c.epochs = 1;
  c.batch_size = 4;
  c.data.samples_per_site = 8;
  c.data.image_size = 32;
  c.student_name = "toy_student_xs";
  return c;
}

struct Fixture {
  ExperimentConfig cfg = tiny_config();
  std::vector<data::SiteDataset> sites = prepare_sites(cfg);
  data::SiteSplit split = data::leave_one_site_out(sites, cfg.target_site, cfg.teacher_fraction);
  data::SiteDataset student_train = data::concat(split.student_train);
  std::unique_ptr<SegNet> teacher = models::build_model(cfg.teacher_name, cfg.num_classes, 17);
};

std::vector<std::vector<float>> snapshot(SegNet& net) {
  std::vector<std::vector<float>> out;
  for (auto* p : net.state()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST(Train, OneEpochHistoryIsFinite) {
  Fixture f;
  const auto run = distill_student(f.cfg, *f.teacher, f.student_train, f.split.eval_set);
  ASSERT_EQ(run.report.history.size(), 1u);
  EXPECT_EQ(run.report.steps.size(), (f.student_train.size() + 3) / 4);
  for (const auto& s : run.report.steps) {
    EXPECT_TRUE(std::isfinite(s.loss.total));
    EXPECT_GT(s.lr, 0.0);
  }
  EXPECT_TRUE(std::isfinite(run.report.history[0].eval_dice));
}

TEST(Train, Deterministic) {
  Fixture f;
  const auto a = distill_student(f.cfg, *f.teacher, f.student_train, f.split.eval_set);
  const auto b = distill_student(f.cfg, *f.teacher, f.student_train, f.split.eval_set);
  EXPECT_EQ(metrics_csv(a.report), metrics_csv(b.report));
}

TEST(Train, FlagsOffEqualsSupervised) {
  Fixture f;
  f.cfg.module_flags = {false, false, false};
  const auto kd = distill_student(f.cfg, *f.teacher, f.student_train, f.split.eval_set);
  const auto sup = train_student_supervised(f.cfg, f.student_train, f.split.eval_set);
  EXPECT_EQ(metrics_csv(kd.report), metrics_csv(sup.report));
  for (const auto& s : kd.report.steps) {
    EXPECT_EQ(s.loss.logits, 0.0);
    EXPECT_EQ(s.loss.kernel, 0.0);
    EXPECT_EQ(s.loss.affinity, 0.0);
    EXPECT_EQ(s.loss.total, s.loss.seg);
  }
}

TEST(Train, DisabledModuleContributesZero) {
  Fixture f;
  f.cfg.module_flags = {true, false, true};
  const auto run = distill_student(f.cfg, *f.teacher, f.student_train, std::nullopt);
  for (const auto& s : run.report.steps) {
    EXPECT_EQ(s.loss.kernel, 0.0);
    EXPECT_GT(s.loss.affinity, 0.0);
  }
}

TEST(Train, TotalRecomposesFromComponents) {
  Fixture f;
  f.cfg.epochs = 2;
  const auto run = distill_student(f.cfg, *f.teacher, f.student_train, std::nullopt);
  const auto& w = f.cfg.loss_weights;
  for (const auto& s : run.report.steps) {
    const double expect = s.loss.seg + w.lambda1 * s.loss.logits + w.lambda2 * s.loss.kernel +
                          w.lambda3 * s.loss.affinity;
    EXPECT_NEAR(s.loss.total, expect, 1e-6) << "step " << s.step;
  }
}

TEST(Train, TeacherStaysFrozen) {
  Fixture f;
  const auto before = snapshot(*f.teacher);
  distill_student(f.cfg, *f.teacher, f.student_train, std::nullopt);
  EXPECT_EQ(snapshot(*f.teacher), before);
}

TEST(Train, EvaluateIsPureAndBounded) {
  Fixture f;
  auto net = models::build_model("toy_student_xs", 2, 1);
  const auto a = evaluate(*net, f.sites);
  const auto b = evaluate(*net, f.sites);
  ASSERT_EQ(a.size(), f.sites.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].dice, b[i].dice);
    EXPECT_GE(a[i].dice, 0.0);
    EXPECT_LE(a[i].dice, 1.0);
    EXPECT_EQ(a[i].site_id, f.sites[i].site_id);
  }
  data::SiteDataset empty;
  empty.site_id = "E";
  EXPECT_THROW(evaluate(*net, {empty}), ValidationError);
}

TEST(Train, WritesRunArtifacts) {
  Fixture f;
  const auto dir = std::filesystem::temp_directory_path() / "distillseg_train_out";
  std::filesystem::remove_all(dir);
  distill_student(f.cfg, *f.teacher, f.student_train, f.split.eval_set, dir.string());
  for (const char* name : {"checkpoint.dsk", "metrics.csv", "report.json", "config.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / name)) << name;
  }
  EXPECT_NO_THROW(models::load_checkpoint((dir / "checkpoint.dsk").string()));
  std::filesystem::remove_all(dir);
}

TEST(Ablation, BaselineRowMatchesSupervisedRun) {
  Fixture f;
  AblationOptions opt;
  opt.seeds = {f.cfg.seed};
  opt.targets = {f.cfg.target_site};
  opt.grid = {{"baseline", {false, false, false}}};
  opt.teacher = f.teacher.get();
  const auto table = run_ablation(f.cfg, opt);
  auto sup = train_student_supervised(f.cfg, f.student_train, f.split.eval_set);
  EXPECT_EQ(table.cell("baseline", f.cfg.target_site), evaluate(*sup.model, {f.split.eval_set}).front().dice);
}

TEST(Ablation, ComponentGridFillsEveryCell) {
  Fixture f;
  AblationOptions opt;
  opt.seeds = {f.cfg.seed};
  opt.targets = {"S3", "S4"};
  opt.grid = component_grid();
  opt.teacher = f.teacher.get();
  const auto table = run_ablation(f.cfg, opt);
  EXPECT_EQ(table.runs.size(), 16u);
  for (const auto& r : table.runs) {
    EXPECT_GE(r.dice, 0.0);
    EXPECT_LE(r.dice, 1.0);
  }
  EXPECT_EQ(table.combos.size(), 8u);
}

TEST(Ablation, UnknownGridRejected) {
  EXPECT_THROW(grid_by_name("everything"), ValidationError);
  EXPECT_EQ(grid_by_name("components").size(), 8u);
}
