// SPDX-License-Identifier: Apache-2.0
#include <filesystem>

#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace distillseg;
using namespace distillseg::models;

namespace {

nn::Tensor random_batch(std::uint64_t seed, std::size_t n, std::size_t size) {
  Rng rng(seed);
  nn::Tensor t(Shape4{n, 1, size, size});
  for (auto& v : t.storage()) v = static_cast<float>(rng.uniform());
  return t;
}

}  // namespace

TEST(Models, SameSeedSameWeights) {
  auto a = build_model("toy_student_s", 2, 5);
  auto b = build_model("toy_student_s", 2, 5);
  auto c = build_model("toy_student_s", 2, 6);
  const auto pa = a->state();
  const auto pb = b->state();
  const auto pc = c->state();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    any_diff = any_diff || pa[i]->value != pc[i]->value;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Models, TeacherStudentCapacityGap) {
  for (const auto& t : registry_names()) {
    if (lookup_spec(t).role != Role::teacher) continue;
    for (const auto& s : registry_names()) {
      if (lookup_spec(s).role != Role::student) continue;
      EXPECT_GE(registry_param_count(t), 10 * registry_param_count(s)) << t << " vs " << s;
    }
  }
  EXPECT_GE(registry_param_count("toy_teacher_large"), 10 * registry_param_count("toy_student_xs"));
}

TEST(Models, ParamCountMatchesParameters) {
  for (const auto& name : registry_names()) {
    auto net = build_model(name, 2, 1);
    std::size_t total = 0;
    for (auto* p : net->parameters()) total += p->value.size();
    EXPECT_EQ(total, net->param_count()) << name;
    EXPECT_EQ(total, registry_param_count(name)) << name;
  }
}

TEST(Models, ForwardShape) {
  auto net = build_model("toy_student_s", 2, 1);
  const auto out = net->forward(random_batch(1, 2, 64), {});
  EXPECT_EQ(out.logits.shape(), (Shape4{2, 2, 64, 64}));
}

TEST(Models, EncoderTapShape) {
  auto net = build_model("toy_student_s", 2, 1);
  const auto out = net->forward(random_batch(2, 2, 64), {}, {"enc_last"});
  ASSERT_EQ(out.features.count("enc_last"), 1u);
  EXPECT_EQ(out.features.at("enc_last").shape(), (Shape4{2, 32, 8, 8}));
}

TEST(Models, UnknownNamesListKeys) {
  try {
    build_model("toy_student_xxl", 2, 1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("toy_student_s"), std::string::npos);
  }
  auto net = build_model("toy_student_s", 2, 1);
  try {
    net->forward(random_batch(3, 1, 32), {}, {"bottleneck"});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("enc_last"), std::string::npos);
  }
}

TEST(Models, ShapeContractAcrossSizes) {
  for (const auto& name : registry_names()) {
    auto net = build_model(name, 2, 1);
    for (std::size_t size : {32u, 64u, 128u}) {
      const auto out = net->forward(random_batch(4, 1, size), {});
      EXPECT_EQ(out.logits.shape(), (Shape4{1, 2, size, size})) << name << " @" << size;
    }
  }
}

TEST(Models, TapsDoNotChangeLogits) {
  auto net = build_model("toy_student_m", 2, 3);
  const auto batch = random_batch(5, 2, 32);
  const auto plain = net->forward(batch, {});
  const auto tapped = net->forward(batch, {}, {"enc_last", "dec0"});
  EXPECT_EQ(plain.logits.storage(), tapped.logits.storage());
  EXPECT_TRUE(net->forward(batch, {}, {}).features.empty());
}

TEST(Models, CheckpointRoundTripBitExact) {
  const auto path = (std::filesystem::temp_directory_path() / "distillseg_ckpt_test.dsk").string();
  auto net = build_model("toy_student_xs", 2, 9);
  // Move batch-norm statistics away from their initial values.
  net->forward(random_batch(6, 4, 32), {true, true});
  save_checkpoint(*net, path, {{"note", "unit"}});
  auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.extra.at("note"), "unit");
  const auto a = net->state();
  const auto b = loaded.net->state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  const auto batch = random_batch(7, 2, 32);
  EXPECT_EQ(net->forward(batch, {}).logits.storage(), loaded.net->forward(batch, {}).logits.storage());
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Models, BackwardReachesEveryParameter) {
  auto net = build_model("toy_student_s", 2, 11);
  net->zero_grad();
  const auto out = net->forward(random_batch(8, 2, 32), {true, true}, {"enc_last"});
  nn::Tensor g(out.logits.shape());
  Rng rng(12);
  for (auto& v : g.storage()) v = static_cast<float>(rng.normal());
  FeatureTaps tg;
  tg.emplace("enc_last", nn::Tensor(out.features.at("enc_last").shape(), 0.1f));
  net->backward(g, tg);
  for (auto* p : net->parameters()) {
    bool nonzero = false;
    for (float v : p->grad) nonzero = nonzero || v != 0.0f;
    EXPECT_TRUE(nonzero) << p->name;
  }
}
