#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "tpskg/suppression.hpp"

using namespace tpskg;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.image_h = 16;
  cfg.image_w = 16;
  cfg.channels = 1;
  cfg.patch = 4;  // N = 16
  cfg.embed_dim = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.classes = 4;
  cfg.seed = 6;
  return cfg;
}

Tensor<double> random_image(const ModelConfig& cfg, Rng& rng) {
  auto img = Tensor<double>::zeros({cfg.image_h, cfg.image_w, cfg.channels});
  for (double& v : img.mutable_data()) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("build_mask zeroes exactly the argmax position") {
  PatchAttentionMap map{{0.1, 0.9, 0.2}};
  auto mask = build_mask(map);
  CHECK(mask.bits == std::vector<uint8_t>{1, 1, 0, 1});
  CHECK(mask.zero_count() == 1);
}

TEST_CASE("build_mask breaks ties at the lowest index") {
  PatchAttentionMap map{{0.25, 0.25, 0.25, 0.25}};
  auto mask = build_mask(map);
  CHECK(mask.bits[0] == 1);
  CHECK(mask.bits[1] == 0);
  CHECK(mask.zero_count() == 1);
}

TEST_CASE("build_mask agrees with a linear-scan argmax oracle") {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 2 + static_cast<int>(rng.bounded(15));
    PatchAttentionMap map;
    map.values.resize(static_cast<size_t>(n));
    for (double& v : map.values) v = rng.uniform();
    auto mask = build_mask(map);
    int best = 0;
    for (int i = 1; i < n; ++i)
      if (map.values[static_cast<size_t>(i)] > map.values[static_cast<size_t>(best)]) best = i;
    REQUIRE(mask.bits[static_cast<size_t>(best) + 1] == 0);
    REQUIRE(mask.bits[0] == 1);
    REQUIRE(mask.zero_count() == 1);
  }
}

TEST_CASE("build_mask top_k extension") {
  PatchAttentionMap map{{0.5, 0.1, 0.9, 0.3}};
  auto mask = build_mask(map, 2);
  CHECK(mask.zero_count() == 2);
  CHECK(mask.bits[3] == 0);  // 0.9
  CHECK(mask.bits[1] == 0);  // 0.5
  CHECK_THROWS_AS(build_mask(map, 0), ContractError);
  CHECK_THROWS_AS(build_mask(map, 4), ContractError);
}

TEST_CASE("suppressed_step: exactly one suppressed token, never the class token") {
  ModelConfig cfg = small_config();
  Rng rng(17);
  auto params = EncoderParams<double>::init(cfg, rng);
  Rng irng(18);
  for (int trial = 0; trial < 5; ++trial) {
    auto img = random_image(cfg, irng);
    auto res = suppressed_step(img, params, cfg);
    CHECK(res.mask.bits.size() == static_cast<size_t>(cfg.tokens()));
    CHECK(res.mask.bits[0] == 1);
    CHECK(res.mask.zero_count() == 1);
    CHECK(res.map.values.size() == static_cast<size_t>(cfg.patches()));
  }
}

TEST_CASE("suppressed_step: pass-2 y ignores the suppressed patch's content") {
  ModelConfig cfg = small_config();
  Rng rng(19);
  auto params = EncoderParams<double>::init(cfg, rng);
  Rng irng(20);
  auto img = random_image(cfg, irng);
  auto res = suppressed_step(img, params, cfg);

  int zero_pos = 0;
  for (size_t i = 1; i < res.mask.bits.size(); ++i)
    if (!res.mask.bits[i]) zero_pos = static_cast<int>(i);
  int patch = zero_pos - 1;
  int pr = patch / cfg.grid_w(), pc = patch % cfg.grid_w();

  auto img2 = img.detached();
  Rng prng(21);
  for (int py = 0; py < cfg.patch; ++py)
    for (int px = 0; px < cfg.patch; ++px)
      img2.mutable_data()[static_cast<size_t>((pr * cfg.patch + py) * cfg.image_w + pc * cfg.patch + px)] =
          prng.normal(0.0, 1e4);

  // rerun pass 2 with the same mask on the perturbed image
  auto y2 = encode(img2, params, cfg, res.mask.to_key_mask()).y;
  for (int j = 0; j < cfg.embed_dim; ++j)
    REQUIRE(std::fabs(res.y.data()[static_cast<size_t>(j)] - y2.data()[static_cast<size_t>(j)]) < 1e-6);
}

TEST_CASE("suppressed_step runs exactly two encoder passes") {
  ModelConfig cfg = small_config();
  Rng rng(23);
  auto params = EncoderParams<double>::init(cfg, rng);
  Rng irng(24);
  auto img = random_image(cfg, irng);

  macs::reset();
  auto probe = encode(img, params, cfg);
  uint64_t one_pass = macs::encoder_total;
  CHECK(one_pass > 0);

  macs::reset();
  auto res = suppressed_step(img, params, cfg);
  CHECK(macs::encoder_total == 2 * one_pass);
  (void)probe;
  (void)res;
}

TEST_CASE("pass 1 contributes no gradients") {
  ModelConfig cfg = small_config();
  Rng rng(29);
  auto params = EncoderParams<double>::init(cfg, rng);
  Rng irng(30);
  auto img = random_image(cfg, irng);
  auto head = tpskg_test::random_tensor({cfg.embed_dim}, rng, 0.5, false);

  auto loss_of = [&](const Tensor<double>& y) {
    return cross_entropy(reshape(mul(reshape(y, {1, cfg.embed_dim}), reshape(head, {1, cfg.embed_dim})),
                                 {cfg.embed_dim}),
                         2);
  };

  // full suppressed step on tape
  SuppressionMask mask;
  std::vector<double> grads_a;
  {
    for (auto v : {&params.patch_proj, &params.pos_embed}) v->clear_grad();
    GradientTape<double> tape;
    TapeScope<double> scope(tape);
    auto res = suppressed_step(img, params, cfg);
    mask = res.mask;
    tape.backward(loss_of(res.y));
    grads_a = params.patch_proj.grad();
  }
  // manual pass-2-only run with the same mask
  std::vector<double> grads_b;
  {
    for (auto v : {&params.patch_proj, &params.pos_embed}) v->clear_grad();
    GradientTape<double> tape;
    TapeScope<double> scope(tape);
    auto y = encode(img, params, cfg, mask.to_key_mask()).y;
    tape.backward(loss_of(y));
    grads_b = params.patch_proj.grad();
  }
  CHECK(tpskg_test::bitwise_equal(grads_a, grads_b));
}

TEST_CASE("inference path never suppresses and equals the plain forward") {
  ModelConfig cfg = small_config();
  Rng rng(31);
  auto params = EncoderParams<double>::init(cfg, rng);
  Rng irng(32);
  auto img = random_image(cfg, irng);
  auto inference = encode(img, params, cfg);
  auto all_true = encode(img, params, cfg, KeyMask::all_true(cfg.tokens()));
  CHECK(tpskg_test::bitwise_equal(inference.y.data(), all_true.y.data()));
}
