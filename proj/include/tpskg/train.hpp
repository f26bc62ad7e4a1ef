#pragma once

// Optimizer, schedule, model bundle, and the joint two-pass training loop.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tpskg/dataset.hpp"
#include "tpskg/knowledge.hpp"
#include "tpskg/suppression.hpp"
#include "tpskg/tensor.hpp"
#include "tpskg/vit.hpp"

namespace tpskg {

enum class TrainMode { full, no_ps, no_kg, baseline };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::full: return "full";
    case TrainMode::no_ps: return "no_ps";
    case TrainMode::no_kg: return "no_kg";
    case TrainMode::baseline: return "baseline";
  }
  return "full";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "full") return TrainMode::full;
  if (s == "no_ps") return TrainMode::no_ps;
  if (s == "no_kg") return TrainMode::no_kg;
  if (s == "baseline") return TrainMode::baseline;
  throw ConfigError("mode must be one of full/no_ps/no_kg/baseline, got '" + s + "'");
}

inline bool uses_suppression(TrainMode m) { return m == TrainMode::full || m == TrainMode::no_kg; }
inline bool uses_knowledge(TrainMode m) { return m == TrainMode::full || m == TrainMode::no_ps; }

struct TrainConfig {
  double lr0 = 3e-3;
  double momentum = 0.9;
  int batch = 8;
  int epochs = 30;
  double mu = 2.0;
  uint64_t seed = 42;
  TrainMode mode = TrainMode::full;
  int precision = 32;  // 32 or 64
  int top_k = 1;

  void validate() const {
    if (lr0 <= 0.0) throw ConfigError("lr0 must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (mu < 0.0) throw ConfigError("mu must be nonnegative");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    if (top_k < 1) throw ConfigError("top_k must be at least 1");
  }
};

constexpr double kGradClipNorm = 1.0;

/// lr0 * (1 + cos(pi * step / total_steps)) / 2.
inline double cosine_lr(int64_t step, int64_t total_steps, double lr0) {
  if (total_steps <= 0 || step < 0 || step > total_steps)
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + "]");
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                                     static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------
// SGD with classic momentum: v <- momentum * v + g; p <- p - lr * v.
// Parameters are visited in their registration order.
// ---------------------------------------------------------------------------

template <typename S>
using NamedParams = std::vector<std::pair<std::string, Tensor<S>>>;

template <typename S>
struct SgdState {
  std::vector<std::vector<S>> velocity;

  static SgdState init(const NamedParams<S>& params) {
    SgdState st;
    st.velocity.reserve(params.size());
    for (const auto& [name, p] : params)
      st.velocity.emplace_back(static_cast<size_t>(p.size()), S(0));
    return st;
  }
};

/// Global gradient norm across every parameter, for norm clipping.
template <typename S>
double global_grad_norm(const NamedParams<S>& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (S g : p.node()->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

/// Scales every gradient by max_norm / ||g|| when the global norm exceeds
/// max_norm.
template <typename S>
void clip_grad_norm(NamedParams<S>& params, double max_norm) {
  double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  S factor = static_cast<S>(max_norm / norm);
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (S& g : p.mutable_grad()) g *= factor;
  }
}

template <typename S>
void sgd_step(NamedParams<S>& params, SgdState<S>& state, S lr, S momentum) {
  if (state.velocity.size() != params.size())
    throw ContractError("sgd_step: optimizer state does not match parameter list");
  for (size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    if (!p.has_grad()) throw ContractError("sgd_step: parameter '" + name + "' has no gradient");
    const auto& g = p.grad();
    auto& v = state.velocity[i];
    auto& data = p.mutable_data();
    for (size_t j = 0; j < data.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      data[j] -= lr * v[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Model bundle: encoder, knowledge embeddings, fusion head, and the auxiliary
// linear head the knowledge-free modes classify with. All four modes share
// the same parameter set; a mode only decides which path runs.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> image_tensor(const std::vector<float>& pixels, const ModelConfig& cfg) {
  std::vector<S> buf(pixels.size());
  for (size_t i = 0; i < pixels.size(); ++i) buf[i] = static_cast<S>(pixels[i]);
  return Tensor<S>::from({cfg.image_h, cfg.image_w, cfg.channels}, std::move(buf));
}

template <typename S>
struct Model {
  ModelConfig cfg;
  EncoderParams<S> enc;
  KnowledgeEmbeddings<S> knowledge;
  FusionHead<S> fusion;
  Tensor<S> aux_w, aux_b;  // (D, G), (G)

  static Model init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Model m;
    m.cfg = cfg;
    m.enc = EncoderParams<S>::init(cfg, rng);
    m.knowledge = KnowledgeEmbeddings<S>::init(cfg.classes, cfg.embed_dim, rng);
    m.fusion = FusionHead<S>::init(cfg.embed_dim, cfg.classes, rng);
    // Zero-initialized like the fusion classifier, and for the same reason.
    m.aux_w = Tensor<S>::zeros({cfg.embed_dim, cfg.classes}).set_requires_grad(true);
    m.aux_b = Tensor<S>::zeros({cfg.classes}).set_requires_grad(true);
    return m;
  }

  NamedParams<S> named_params() {
    NamedParams<S> out;
    enc.append_named("enc.", out);
    out.emplace_back("knowledge.embeddings", knowledge.weights);
    fusion.append_named("fusion.", out);
    out.emplace_back("aux.classifier_w", aux_w);
    out.emplace_back("aux.classifier_b", aux_b);
    return out;
  }

  Tensor<S> aux_logits(const Tensor<S>& y) {
    return reshape(add(matmul(reshape(y, {1, cfg.embed_dim}), aux_w), aux_b), {cfg.classes});
  }

  /// Inference-path class prediction for a raw image, honoring the mode's
  /// classification head. Never suppresses.
  int predict_mode(const std::vector<float>& pixels, TrainMode mode) {
    NoGradScope<S> no_grad;
    Tensor<S> img = image_tensor<S>(pixels, cfg);
    if (uses_knowledge(mode)) return predict(img, enc, cfg, knowledge, fusion);
    EncoderOutput<S> out = encode(img, enc, cfg);
    return static_cast<int>(argmax(aux_logits(out.y)));
  }
};

// ---------------------------------------------------------------------------
// Training state and the epoch loop.
// ---------------------------------------------------------------------------

template <typename S>
struct TrainState {
  Model<S> model;
  TrainConfig tcfg;
  const SyntheticDataset* data = nullptr;
  NamedParams<S> params;
  SgdState<S> opt;
  Rng sampler_rng{0};
  Rng augment_rng{0};
  int64_t epoch = 0;        // completed epochs
  int64_t global_step = 0;  // completed optimizer steps
  int64_t total_steps = 0;

  static TrainState init(const ModelConfig& mcfg, const TrainConfig& tcfg, const SyntheticDataset& data) {
    tcfg.validate();
    TrainState st;
    st.model = Model<S>::init(mcfg);
    st.tcfg = tcfg;
    st.data = &data;
    st.params = st.model.named_params();
    st.opt = SgdState<S>::init(st.params);
    st.sampler_rng = Rng(tcfg.seed);
    st.augment_rng = Rng(tcfg.seed ^ 0x9e3779b97f4a7c15ull);
    int64_t count = static_cast<int64_t>(data.train.count());
    int64_t batches = (count + tcfg.batch - 1) / tcfg.batch;
    st.total_steps = batches * tcfg.epochs;
    return st;
  }
};

struct EpochMetrics {
  int64_t epoch = 0;
  int64_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_kl = 0.0;
  double loss_rep = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
};

/// Top-1 accuracy of the mode's inference path over a split; optionally
/// fills a classes x classes confusion matrix (rows = ground truth).
template <typename S>
double evaluate_accuracy(Model<S>& model, const ImageSet& set, TrainMode mode,
                         std::vector<int64_t>* confusion = nullptr) {
  int64_t n = static_cast<int64_t>(set.count());
  std::vector<int> preds(static_cast<size_t>(n), -1);
  parallel_for(n, [&](int64_t i) {
    std::vector<float> img =
        augment_eval(set.images[static_cast<size_t>(i)], set.height, set.width, set.channels);
    preds[static_cast<size_t>(i)] = model.predict_mode(img, mode);
  });
  int64_t correct = 0;
  if (confusion != nullptr) confusion->assign(static_cast<size_t>(model.cfg.classes) * model.cfg.classes, 0);
  for (int64_t i = 0; i < n; ++i) {
    int truth = set.labels[static_cast<size_t>(i)];
    int pred = preds[static_cast<size_t>(i)];
    if (truth == pred) ++correct;
    if (confusion != nullptr) (*confusion)[static_cast<size_t>(truth) * model.cfg.classes + pred] += 1;
  }
  return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

/// Loss graph for one training image under the given mode. The returned
/// tensors are (total, kl, rep); kl and rep are zero scalars for the
/// knowledge-free modes.
template <typename S>
struct ImageLosses {
  Tensor<S> total, kl, rep;
};

template <typename S>
ImageLosses<S> image_loss(Model<S>& model, const TrainConfig& tcfg, const Tensor<S>& img, int label) {
  TrainMode mode = tcfg.mode;
  Tensor<S> y;
  if (uses_suppression(mode)) {
    y = suppressed_step(img, model.enc, model.cfg, tcfg.top_k).y;
  } else {
    y = encode(img, model.enc, model.cfg).y;
  }
  if (uses_knowledge(mode)) {
    ForwardArtifacts<S> art =
        knowledge_forward(y, model.knowledge, model.fusion, label, static_cast<S>(tcfg.mu));
    return ImageLosses<S>{art.loss_total, art.loss_kl, art.loss_rep};
  }
  Tensor<S> ce = cross_entropy(model.aux_logits(y), label);
  return ImageLosses<S>{ce, Tensor<S>::scalar(S(0)), Tensor<S>::scalar(S(0))};
}

/// One pass over the training split: per-batch tape, gradient accumulation in
/// ascending item order, cosine-scheduled SGD step, then a train/test
/// accuracy sweep. Throws TrainAbort naming the first non-finite tensor if
/// the loss stops being finite.
template <typename S>
EpochMetrics train_epoch(TrainState<S>& st) {
  const ImageSet& train = st.data->train;
  int64_t count = static_cast<int64_t>(train.count());
  if (count == 0) throw ContractError("train_epoch: empty training set");
  int batch = st.tcfg.batch;

  std::vector<int64_t> order(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
  for (int64_t i = count - 1; i > 0; --i) {
    int64_t j = st.sampler_rng.bounded(i + 1);
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }

  double sum_total = 0.0, sum_kl = 0.0, sum_rep = 0.0, last_lr = 0.0;
  for (int64_t start = 0; start < count; start += batch) {
    int64_t stop = std::min(count, start + batch);
    double lr = cosine_lr(st.global_step, st.total_steps, st.tcfg.lr0);
    last_lr = lr;

    GradientTape<S> tape;
    TapeScope<S> scope(tape);
    for (auto& [name, p] : st.params) p.clear_grad();

    Tensor<S> batch_sum = Tensor<S>::scalar(S(0));
    for (int64_t i = start; i < stop; ++i) {
      int64_t idx = order[static_cast<size_t>(i)];
      std::vector<float> pixels = augment_train(train.images[static_cast<size_t>(idx)], train.height,
                                                train.width, train.channels, st.augment_rng);
      Tensor<S> img = image_tensor<S>(pixels, st.model.cfg);
      ImageLosses<S> losses = image_loss(st.model, st.tcfg, img, train.labels[static_cast<size_t>(idx)]);
      batch_sum = add(batch_sum, losses.total);
      sum_total += static_cast<double>(losses.total.item());
      sum_kl += static_cast<double>(losses.kl.item());
      sum_rep += static_cast<double>(losses.rep.item());
    }
    Tensor<S> loss = scale(batch_sum, S(1) / static_cast<S>(stop - start));
    if (!all_finite(loss)) {
      std::string culprit = tape.first_non_finite();
      throw TrainAbort("non-finite loss at step " + std::to_string(st.global_step) +
                       "; first non-finite tensor: " + (culprit.empty() ? "loss" : culprit));
    }
    tape.backward(loss);
    // Parameters outside the mode's graph (e.g. the auxiliary head in
    // knowledge modes) see a zero gradient.
    for (auto& [name, p] : st.params)
      if (!p.has_grad()) p.mutable_grad().assign(static_cast<size_t>(p.size()), S(0));
    clip_grad_norm(st.params, kGradClipNorm);
    sgd_step(st.params, st.opt, static_cast<S>(lr), static_cast<S>(st.tcfg.momentum));
    ++st.global_step;
  }
  ++st.epoch;

  EpochMetrics m;
  m.epoch = st.epoch;
  m.step = st.global_step;
  m.lr = last_lr;
  m.loss_total = sum_total / static_cast<double>(count);
  m.loss_kl = sum_kl / static_cast<double>(count);
  m.loss_rep = sum_rep / static_cast<double>(count);
  m.train_acc = evaluate_accuracy(st.model, st.data->train, st.tcfg.mode);
  m.test_acc = evaluate_accuracy(st.model, st.data->test, st.tcfg.mode);
  return m;
}

}  // namespace tpskg
