#include "tpskg/dataset.hpp"

#include <cmath>

namespace tpskg {

float background_value(int y, int x, int canvas) {
  // Symmetric in x about the canvas center, so horizontal flips map the
  // background onto itself.
  double fy = 2.0 * 3.14159265358979323846 * y / canvas;
  double fx = 2.0 * 3.14159265358979323846 * (x - 0.5 * (canvas - 1)) / canvas;
  return static_cast<float>(0.15 * std::cos(fx) * std::sin(fy));
}

namespace {

// Glyph pixels are high-contrast binary values, far from the [0.35, 0.65]
// background band, so template matching is unambiguous at zero noise.
constexpr float kGlyphLow = -0.45f;
constexpr float kGlyphHigh = 0.45f;

// Primary anchor in the left half; the redundant copy sits at its horizontal
// mirror. Combined with palindromic glyph rows and the x-symmetric
// background, a horizontal flip maps every clean image onto its own class
// layout, so the flip augmentation never destroys class evidence.
std::array<int, 2> sample_left_anchor(const SyntheticDatasetSpec& spec, Rng& rng) {
  int xspan = spec.canvas / 2 - spec.glyph - 2 * spec.jitter + 1;
  int yspan = spec.canvas - spec.glyph - 2 * spec.jitter + 1;
  int ay = spec.jitter + static_cast<int>(rng.bounded(yspan));
  int ax = spec.jitter + static_cast<int>(rng.bounded(xspan));
  return {ay, ax};
}

std::array<int, 2> mirror_anchor(const SyntheticDatasetSpec& spec, const std::array<int, 2>& a) {
  return {a[0], spec.canvas - spec.glyph - a[1]};
}

std::vector<float> render_image(const SyntheticDatasetSpec& spec, const ClassLayout& layout, Rng& rng) {
  int n = spec.canvas;
  std::vector<float> img(static_cast<size_t>(n) * n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) img[static_cast<size_t>(y) * n + x] = background_value(y, x, n);

  auto stamp = [&](const std::array<int, 2>& anchor, int dy, int dx) {
    int oy = anchor[0] + dy, ox = anchor[1] + dx;
    for (int gy = 0; gy < spec.glyph; ++gy)
      for (int gx = 0; gx < spec.glyph; ++gx)
        img[static_cast<size_t>(oy + gy) * n + (ox + gx)] =
            layout.glyph[static_cast<size_t>(gy) * spec.glyph + gx];
  };
  int j = spec.jitter;
  int dy1 = j ? static_cast<int>(rng.bounded(2 * j + 1)) - j : 0;
  int dx1 = j ? static_cast<int>(rng.bounded(2 * j + 1)) - j : 0;
  int dy2 = j ? static_cast<int>(rng.bounded(2 * j + 1)) - j : 0;
  int dx2 = j ? static_cast<int>(rng.bounded(2 * j + 1)) - j : 0;
  stamp(layout.anchor_a, dy1, dx1);
  stamp(layout.anchor_b, dy2, dx2);

  if (spec.noise_std > 0.0) {
    for (float& v : img) v += static_cast<float>(rng.normal(0.0, spec.noise_std));
  }
  return img;
}

ImageSet render_split(const SyntheticDatasetSpec& spec, const std::vector<ClassLayout>& layouts,
                      int per_class, Rng& rng) {
  ImageSet set;
  set.height = spec.canvas;
  set.width = spec.canvas;
  set.channels = 1;
  set.images.reserve(static_cast<size_t>(spec.classes) * per_class);
  set.labels.reserve(static_cast<size_t>(spec.classes) * per_class);
  for (int g = 0; g < spec.classes; ++g) {
    for (int i = 0; i < per_class; ++i) {
      set.images.push_back(render_image(spec, layouts[static_cast<size_t>(g)], rng));
      set.labels.push_back(g);
    }
  }
  return set;
}

}  // namespace

SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  SyntheticDataset ds;
  ds.spec = spec;
  ds.layouts.reserve(static_cast<size_t>(spec.classes));
  for (int g = 0; g < spec.classes; ++g) {
    ClassLayout layout;
    layout.glyph.resize(static_cast<size_t>(spec.glyph) * spec.glyph);
    // Palindromic rows: the pattern is invariant under horizontal flips.
    for (int gy = 0; gy < spec.glyph; ++gy) {
      for (int gx = 0; gx <= (spec.glyph - 1) / 2; ++gx) {
        float v = rng.bounded(2) ? kGlyphHigh : kGlyphLow;
        layout.glyph[static_cast<size_t>(gy) * spec.glyph + gx] = v;
        layout.glyph[static_cast<size_t>(gy) * spec.glyph + (spec.glyph - 1 - gx)] = v;
      }
    }
    layout.anchor_a = sample_left_anchor(spec, rng);
    layout.anchor_b = mirror_anchor(spec, layout.anchor_a);
    ds.layouts.push_back(std::move(layout));
  }
  ds.train = render_split(spec, ds.layouts, spec.train_per_class, rng);
  ds.test = render_split(spec, ds.layouts, spec.test_per_class, rng);
  return ds;
}

std::vector<float> pad_crop(const std::vector<float>& img, int h, int w, int c, int pad, int off_y,
                            int off_x) {
  if (off_y < 0 || off_y > 2 * pad || off_x < 0 || off_x > 2 * pad)
    throw ContractError("pad_crop: offset out of the padded range");
  std::vector<float> out(static_cast<size_t>(h) * w * c, 0.0f);
  for (int y = 0; y < h; ++y) {
    int sy = y + off_y - pad;
    if (sy < 0 || sy >= h) continue;
    for (int x = 0; x < w; ++x) {
      int sx = x + off_x - pad;
      if (sx < 0 || sx >= w) continue;
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<size_t>(y) * w + x) * c + ch] = img[(static_cast<size_t>(sy) * w + sx) * c + ch];
    }
  }
  return out;
}

std::vector<float> hflip(const std::vector<float>& img, int h, int w, int c) {
  std::vector<float> out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<size_t>(y) * w + x) * c + ch] =
            img[(static_cast<size_t>(y) * w + (w - 1 - x)) * c + ch];
  return out;
}

std::vector<float> augment_train(const std::vector<float>& img, int h, int w, int c, Rng& rng) {
  int off_y = static_cast<int>(rng.bounded(2 * kAugPad + 1));
  int off_x = static_cast<int>(rng.bounded(2 * kAugPad + 1));
  std::vector<float> out = pad_crop(img, h, w, c, kAugPad, off_y, off_x);
  if (rng.bounded(2)) out = hflip(out, h, w, c);
  return out;
}

std::vector<float> augment_eval(const std::vector<float>& img, int h, int w, int c) {
  return pad_crop(img, h, w, c, kAugPad, kAugPad, kAugPad);
}

}  // namespace tpskg
