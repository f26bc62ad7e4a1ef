#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "tpskg/checkpoint.hpp"
#include "tpskg/train.hpp"

using namespace tpskg;

namespace {

ModelConfig micro_model() {
  ModelConfig cfg;
  cfg.image_h = 16;
  cfg.image_w = 16;
  cfg.channels = 1;
  cfg.patch = 8;  // N = 4
  cfg.embed_dim = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 3;
  cfg.seed = 44;
  return cfg;
}

SyntheticDatasetSpec micro_data() {
  SyntheticDatasetSpec spec;
  spec.classes = 3;
  spec.train_per_class = 8;
  spec.test_per_class = 4;
  spec.canvas = 16;
  spec.glyph = 4;
  spec.jitter = 1;
  spec.noise_std = 0.02;
  spec.seed = 9;
  return spec;
}

TrainConfig micro_train(TrainMode mode) {
  TrainConfig t;
  t.lr0 = 3e-3;
  t.momentum = 0.9;
  t.batch = 8;
  t.epochs = 2;
  t.mu = 2.0;
  t.seed = 42;
  t.mode = mode;
  t.precision = 32;
  return t;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 0.03) == doctest::Approx(0.03).epsilon(1e-12));
  CHECK(cosine_lr(100, 100, 0.03) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 0.03) == doctest::Approx(0.015).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(101, 100, 0.03), ContractError);
  CHECK_THROWS_AS(cosine_lr(-1, 100, 0.03), ContractError);
}

TEST_CASE("sgd step: plain gradient descent at zero momentum") {
  auto p = Tensor<double>::from({3}, {1, 2, 3}).set_requires_grad(true);
  p.mutable_grad().assign(3, 1.0);
  NamedParams<double> params{{"p", p}};
  auto st = SgdState<double>::init(params);
  sgd_step(params, st, 1.0, 0.0);
  CHECK(p.data() == std::vector<double>{0, 1, 2});
}

TEST_CASE("sgd step: momentum doubles up on a repeated gradient") {
  auto p = Tensor<double>::from({1}, {10.0}).set_requires_grad(true);
  NamedParams<double> params{{"p", p}};
  auto st = SgdState<double>::init(params);
  p.mutable_grad().assign(1, 1.0);
  sgd_step(params, st, 0.1, 0.9);
  double first_disp = 10.0 - p.data()[0];
  p.mutable_grad().assign(1, 1.0);
  sgd_step(params, st, 0.1, 0.9);
  double second_disp = (10.0 - first_disp) - p.data()[0];
  CHECK(first_disp == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(second_disp == doctest::Approx(0.19).epsilon(1e-12));
}

TEST_CASE("sgd matches the scalar recurrence oracle on a random sequence") {
  Rng rng(55);
  auto p = Tensor<double>::from({1}, {0.5}).set_requires_grad(true);
  NamedParams<double> params{{"p", p}};
  auto st = SgdState<double>::init(params);
  double ref_p = 0.5, ref_v = 0.0;
  for (int step = 0; step < 50; ++step) {
    double g = rng.normal(0.0, 1.0);
    double lr = 0.01 + 0.001 * step;
    p.mutable_grad().assign(1, g);
    sgd_step(params, st, lr, 0.9);
    ref_v = 0.9 * ref_v + g;
    ref_p -= lr * ref_v;
    REQUIRE(std::fabs(p.data()[0] - ref_p) < 1e-12);
  }
}

TEST_CASE("sgd refuses a parameter without a gradient") {
  auto p = Tensor<double>::from({1}, {1.0}).set_requires_grad(true);
  NamedParams<double> params{{"p", p}};
  auto st = SgdState<double>::init(params);
  CHECK_THROWS_AS(sgd_step(params, st, 0.1, 0.9), ContractError);
}

TEST_CASE("zero learning rate leaves parameters bit-unchanged over an epoch") {
  auto data = generate_dataset(micro_data());
  auto tcfg = micro_train(TrainMode::full);
  tcfg.lr0 = 1e-30;  // exactly-zero lr is rejected; the cosine schedule ends at 0 anyway
  auto st = TrainState<float>::init(micro_model(), tcfg, data);
  // snapshot, run one epoch with lr forced to zero via momentum-free zero-step
  // (cosine_lr(0,...)=lr0>0, so instead verify the optimizer honors lr=0 directly)
  auto before = st.model.enc.patch_proj.data();
  GradientTape<float> tape;
  {
    TapeScope<float> scope(tape);
    for (auto& [n, p] : st.params) p.clear_grad();
    auto img = image_tensor<float>(data.train.images[0], st.model.cfg);
    auto losses = image_loss(st.model, st.tcfg, img, data.train.labels[0]);
    tape.backward(losses.total);
  }
  for (auto& [n, p] : st.params)
    if (!p.has_grad()) p.mutable_grad().assign(static_cast<size_t>(p.size()), 0.0f);
  sgd_step(st.params, st.opt, 0.0f, 0.9f);
  CHECK(tpskg_test::bitwise_equal_f(st.model.enc.patch_proj.data(), before));
}

TEST_CASE("training loss decreases over a short full-mode run") {
  auto data = generate_dataset(micro_data());
  auto tcfg = micro_train(TrainMode::full);
  tcfg.epochs = 6;
  auto st = TrainState<float>::init(micro_model(), tcfg, data);
  EpochMetrics first = train_epoch(st);
  EpochMetrics last{};
  for (int e = 1; e < tcfg.epochs; ++e) last = train_epoch(st);
  CHECK(last.loss_total < first.loss_total);
  CHECK(std::isfinite(last.loss_total));
}

TEST_CASE("baseline mode is the suppression-free auxiliary-head path") {
  auto data = generate_dataset(micro_data());
  auto cfg = micro_model();
  auto tcfg = micro_train(TrainMode::baseline);
  auto st = TrainState<float>::init(cfg, tcfg, data);
  auto img = image_tensor<float>(data.train.images[3], cfg);
  int label = data.train.labels[3];

  auto losses = image_loss(st.model, st.tcfg, img, label);
  // manual: unsuppressed encode, auxiliary linear head, cross entropy
  auto y = encode(img, st.model.enc, cfg).y;
  auto want = cross_entropy(st.model.aux_logits(y), label);
  CHECK(std::bit_cast<uint32_t>(losses.total.item()) == std::bit_cast<uint32_t>(want.item()));
  CHECK(losses.kl.item() == 0.0f);
  CHECK(losses.rep.item() == 0.0f);
}

TEST_CASE("mode wiring: suppression and knowledge toggles") {
  CHECK(uses_suppression(TrainMode::full));
  CHECK(uses_suppression(TrainMode::no_kg));
  CHECK_FALSE(uses_suppression(TrainMode::no_ps));
  CHECK_FALSE(uses_suppression(TrainMode::baseline));
  CHECK(uses_knowledge(TrainMode::full));
  CHECK(uses_knowledge(TrainMode::no_ps));
  CHECK_FALSE(uses_knowledge(TrainMode::no_kg));
  CHECK_FALSE(uses_knowledge(TrainMode::baseline));
  CHECK(to_string(train_mode_from_string("no_ps")) == "no_ps");
  CHECK_THROWS_AS(train_mode_from_string("bogus"), ConfigError);
}

TEST_CASE("fixed-seed double run gives bit-identical loss sequences") {
  auto data = generate_dataset(micro_data());
  auto run = [&](std::vector<double>* losses) {
    auto st = TrainState<float>::init(micro_model(), micro_train(TrainMode::full), data);
    for (int e = 0; e < 2; ++e) losses->push_back(train_epoch(st).loss_total);
    return st.model.enc.patch_proj.data();
  };
  std::vector<double> l1, l2;
  auto p1 = run(&l1);
  auto p2 = run(&l2);
  CHECK(tpskg_test::bitwise_equal(l1, l2));
  CHECK(tpskg_test::bitwise_equal_f(p1, p2));
}

TEST_CASE("non-finite loss aborts with the offending op named") {
  auto data = generate_dataset(micro_data());
  auto st = TrainState<float>::init(micro_model(), micro_train(TrainMode::baseline), data);
  // poison one weight
  st.model.enc.patch_proj.mutable_data()[0] = std::numeric_limits<float>::infinity();
  try {
    train_epoch(st);
    FAIL("expected TrainAbort");
  } catch (const TrainAbort& e) {
    std::string msg = e.what();
    CHECK(msg.find("non-finite") != std::string::npos);
    CHECK(msg.find("matmul") != std::string::npos);
  }
}

TEST_CASE("checkpoint resume reproduces the uninterrupted run bit for bit") {
  auto data = generate_dataset(micro_data());
  auto cfg = micro_model();
  auto tcfg = micro_train(TrainMode::full);
  tcfg.epochs = 4;

  // uninterrupted: 4 epochs
  auto full = TrainState<float>::init(cfg, tcfg, data);
  std::vector<double> full_losses;
  for (int e = 0; e < 4; ++e) full_losses.push_back(train_epoch(full).loss_total);

  // interrupted: 2 epochs, checkpoint, restore into a fresh state, 2 more
  auto part = TrainState<float>::init(cfg, tcfg, data);
  std::vector<double> part_losses;
  for (int e = 0; e < 2; ++e) part_losses.push_back(train_epoch(part).loss_total);
  std::string path = "ckpt_roundtrip_test.bin";
  write_checkpoint(path, part, "config-text\n", 123u);

  auto resumed = TrainState<float>::init(cfg, tcfg, data);
  CheckpointFile ck = read_checkpoint(path);
  CHECK(ck.config_text == "config-text\n");
  CHECK(ck.config_hash == 123u);
  CHECK(ck.precision == 32);
  apply_checkpoint(ck, resumed);
  CHECK(resumed.epoch == 2);
  for (int e = 0; e < 2; ++e) part_losses.push_back(train_epoch(resumed).loss_total);

  CHECK(tpskg_test::bitwise_equal(full_losses, part_losses));
  CHECK(tpskg_test::bitwise_equal_f(full.model.enc.patch_proj.data(),
                                    resumed.model.enc.patch_proj.data()));
  CHECK(tpskg_test::bitwise_equal_f(full.opt.velocity[0], resumed.opt.velocity[0]));
  std::remove(path.c_str());
}

TEST_CASE("untrained model sits near chance accuracy on a balanced split") {
  SyntheticDatasetSpec spec = micro_data();
  spec.classes = 8;
  spec.test_per_class = 32;
  spec.canvas = 32;
  spec.glyph = 8;
  ModelConfig cfg = micro_model();
  cfg.image_h = cfg.image_w = 32;
  cfg.patch = 8;
  cfg.classes = 8;
  auto data = generate_dataset(spec);
  auto model = Model<float>::init(cfg);
  double acc = evaluate_accuracy(model, data.test, TrainMode::baseline);
  CHECK(acc >= 0.0);
  CHECK(acc <= 0.45);  // chance is 1/8; an untrained head must not be systematically right
}

TEST_CASE("64-bit training path runs and stays finite") {
  auto data = generate_dataset(micro_data());
  auto tcfg = micro_train(TrainMode::no_ps);
  tcfg.precision = 64;
  auto st = TrainState<double>::init(micro_model(), tcfg, data);
  auto m = train_epoch(st);
  CHECK(std::isfinite(m.loss_total));
  CHECK(m.loss_kl > 0.0);
}
