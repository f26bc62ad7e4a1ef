#pragma once

// Synthetic fine-grained dataset: a shared smooth background plus two copies
// of a class-specific glyph at class-anchored, per-image-jittered positions,
// under pixel noise. Two placements keep class evidence recoverable when one
// peak is suppressed. Also hosts the train/eval augmentation paths.

#include <array>
#include <cstdint>
#include <vector>

#include "tpskg/common.hpp"

namespace tpskg {

struct SyntheticDatasetSpec {
  int classes = 8;
  int train_per_class = 64;
  int test_per_class = 32;
  int canvas = 32;   // square canvas, single channel
  int glyph = 8;     // glyph side length, equals the model patch size
  int jitter = 2;    // max per-axis glyph displacement in pixels
  double noise_std = 0.05;
  uint64_t seed = 7;

  void validate() const {
    if (classes < 2) throw ConfigError("classes must be at least 2");
    if (train_per_class < 1 || test_per_class < 1)
      throw ConfigError("train_per_class/test_per_class must be positive");
    if (canvas < 2 || canvas % 2 != 0) throw ConfigError("canvas must be a positive even pixel count");
    if (glyph < 1 || glyph > canvas / 2) throw ConfigError("glyph must fit inside a canvas quadrant");
    if (jitter < 0) throw ConfigError("jitter must be nonnegative");
    // Anchors live inside a quadrant with a jitter-wide margin, so every
    // jittered placement stays inside the canvas.
    if (canvas / 2 - glyph - 2 * jitter < 0) throw ConfigError("jitter too large for glyph and canvas");
    if (noise_std < 0.0) throw ConfigError("noise_std must be nonnegative");
  }
};

struct ImageSet {
  int height = 0, width = 0, channels = 1;
  std::vector<std::vector<float>> images;
  std::vector<int> labels;

  size_t count() const { return images.size(); }
};

/// Per-class generation layout, exposed so tests can template-match.
struct ClassLayout {
  std::vector<float> glyph;       // glyph-side^2 pixels
  std::array<int, 2> anchor_a{};  // (y, x) of the primary placement
  std::array<int, 2> anchor_b{};  // (y, x) of the redundant placement
};

struct SyntheticDataset {
  SyntheticDatasetSpec spec;
  std::vector<ClassLayout> layouts;
  ImageSet train, test;
};

/// Shared background value at (y, x); identical for every image of every
/// class.
float background_value(int y, int x, int canvas);

SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec);

// ---------------------------------------------------------------------------
// Augmentation. Training: zero-pad by kAugPad, crop back at a random offset,
// then horizontal flip with probability 1/2. Inference: center crop of the
// same padding, which is the identity.
// ---------------------------------------------------------------------------

constexpr int kAugPad = 1;

std::vector<float> pad_crop(const std::vector<float>& img, int h, int w, int c, int pad, int off_y,
                            int off_x);
std::vector<float> hflip(const std::vector<float>& img, int h, int w, int c);

std::vector<float> augment_train(const std::vector<float>& img, int h, int w, int c, Rng& rng);
std::vector<float> augment_eval(const std::vector<float>& img, int h, int w, int c);

}  // namespace tpskg
