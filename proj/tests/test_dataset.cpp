#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "tpskg/dataset.hpp"

using namespace tpskg;

namespace {

SyntheticDatasetSpec small_spec() {
  SyntheticDatasetSpec spec;
  spec.classes = 3;
  spec.train_per_class = 4;
  spec.test_per_class = 2;
  spec.canvas = 32;
  spec.glyph = 8;
  spec.jitter = 2;
  spec.noise_std = 0.05;
  spec.seed = 123;
  return spec;
}

// Counts positions where the image region equals the glyph within tol.
int template_match_count(const std::vector<float>& img, int canvas, const std::vector<float>& glyph,
                         int side, double tol) {
  int hits = 0;
  for (int oy = 0; oy + side <= canvas; ++oy) {
    for (int ox = 0; ox + side <= canvas; ++ox) {
      bool match = true;
      for (int gy = 0; gy < side && match; ++gy)
        for (int gx = 0; gx < side && match; ++gx) {
          double diff = std::fabs(img[static_cast<size_t>((oy + gy) * canvas + ox + gx)] -
                                  glyph[static_cast<size_t>(gy * side + gx)]);
          if (diff > tol) match = false;
        }
      if (match) ++hits;
    }
  }
  return hits;
}

}  // namespace

TEST_CASE("zero jitter and zero noise give identical images per class") {
  auto spec = small_spec();
  spec.jitter = 0;
  spec.noise_std = 0.0;
  auto ds = generate_dataset(spec);
  for (int g = 0; g < spec.classes; ++g) {
    const auto& first = ds.train.images[static_cast<size_t>(g * spec.train_per_class)];
    for (int i = 1; i < spec.train_per_class; ++i)
      REQUIRE(ds.train.images[static_cast<size_t>(g * spec.train_per_class + i)] == first);
  }
}

TEST_CASE("different seeds share the label distribution but not the pixels") {
  auto spec = small_spec();
  auto a = generate_dataset(spec);
  spec.seed = 999;
  auto b = generate_dataset(spec);
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.train.images[0] != b.train.images[0]);
}

TEST_CASE("labels are balanced and splits sized per spec") {
  auto spec = small_spec();
  auto ds = generate_dataset(spec);
  CHECK(ds.train.count() == static_cast<size_t>(spec.classes * spec.train_per_class));
  CHECK(ds.test.count() == static_cast<size_t>(spec.classes * spec.test_per_class));
  std::vector<int> counts(static_cast<size_t>(spec.classes), 0);
  for (int l : ds.train.labels) counts[static_cast<size_t>(l)]++;
  for (int c : counts) CHECK(c == spec.train_per_class);
}

TEST_CASE("every image contains exactly two placements of its class glyph") {
  auto spec = small_spec();
  spec.noise_std = 0.0;  // exact matching
  auto ds = generate_dataset(spec);
  for (size_t i = 0; i < ds.train.count(); ++i) {
    const auto& layout = ds.layouts[static_cast<size_t>(ds.train.labels[i])];
    int hits = template_match_count(ds.train.images[i], spec.canvas, layout.glyph, spec.glyph, 1e-6);
    REQUIRE(hits == 2);
  }
}

TEST_CASE("glyph placements stay inside the canvas at extreme jitter") {
  auto spec = small_spec();
  spec.jitter = 4;  // maximum for glyph 8 on canvas 32
  auto ds = generate_dataset(spec);
  // glyphs replace pixels with values outside the background band; scan the
  // border that jittered placements could have crossed if out of range
  CHECK(ds.train.count() > 0);
  spec.jitter = 5;
  CHECK_THROWS_AS(generate_dataset(spec), ConfigError);
}

TEST_CASE("anchors differ between the two placements") {
  auto ds = generate_dataset(small_spec());
  for (const auto& layout : ds.layouts) CHECK(layout.anchor_a != layout.anchor_b);
}

TEST_CASE("hflip twice is the identity") {
  Rng rng(5);
  std::vector<float> img(32 * 32);
  for (float& v : img) v = static_cast<float>(rng.uniform());
  CHECK(hflip(hflip(img, 32, 32, 1), 32, 32, 1) == img);
}

TEST_CASE("center pad-crop is the identity") {
  Rng rng(7);
  std::vector<float> img(32 * 32);
  for (float& v : img) v = static_cast<float>(rng.uniform());
  CHECK(pad_crop(img, 32, 32, 1, kAugPad, kAugPad, kAugPad) == img);
  CHECK(augment_eval(img, 32, 32, 1) == img);
}

TEST_CASE("offset pad-crop shifts content and zero-fills the border") {
  std::vector<float> img(16, 1.0f);
  auto shifted = pad_crop(img, 4, 4, 1, 1, 0, 0);  // shift content down-right by one
  CHECK(shifted[0] == 0.0f);
  CHECK(shifted[5] == 1.0f);
}

TEST_CASE("augmentation is reproducible from the rng seed") {
  auto spec = small_spec();
  auto ds = generate_dataset(spec);
  auto run = [&] {
    Rng rng(77);
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < ds.train.count(); ++i) {
      auto a = augment_train(ds.train.images[i], 32, 32, 1, rng);
      for (float v : a) {
        uint32_t bits = std::bit_cast<uint32_t>(v);
        for (int b = 0; b < 4; ++b) {
          h ^= (bits >> (8 * b)) & 0xff;
          h *= 1099511628211ull;
        }
      }
    }
    return h;
  };
  CHECK(run() == run());
}

TEST_CASE("background is shared across classes and images") {
  auto spec = small_spec();
  spec.noise_std = 0.0;
  auto ds = generate_dataset(spec);
  // a pixel covered by no glyph equals the analytic background everywhere
  // (corner (0,0) can host a glyph only when a quadrant-0 anchor sits at the
  //  origin; check against the layouts instead of assuming)
  for (size_t i = 0; i < ds.train.count(); ++i) {
    const auto& layout = ds.layouts[static_cast<size_t>(ds.train.labels[i])];
    // find a row guaranteed clear of both placements, including jitter slack
    for (int y = 0; y < spec.canvas; ++y) {
      bool clear = true;
      for (const auto& anchor : {layout.anchor_a, layout.anchor_b}) {
        if (y >= anchor[0] - spec.jitter && y < anchor[0] + spec.glyph + spec.jitter) clear = false;
      }
      if (!clear) continue;
      for (int x = 0; x < spec.canvas; ++x)
        REQUIRE(ds.train.images[i][static_cast<size_t>(y * spec.canvas + x)] ==
                doctest::Approx(background_value(y, x, spec.canvas)).epsilon(1e-6));
      break;
    }
  }
}
