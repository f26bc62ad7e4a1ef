#pragma once

// Knowledge guidance: learnable per-class embeddings scored against image
// representations, the knowledge-learning loss, the knowledge-based
// representation, the fusion head, and the joint loss.

#include <string>
#include <utility>
#include <vector>

#include "tpskg/suppression.hpp"
#include "tpskg/tensor.hpp"
#include "tpskg/vit.hpp"

namespace tpskg {

template <typename S>
struct KnowledgeEmbeddings {
  Tensor<S> weights;  // (G, D)

  static KnowledgeEmbeddings init(int classes, int dim, Rng& rng) {
    KnowledgeEmbeddings k;
    k.weights = Tensor<S>::zeros({classes, dim});
    for (S& v : k.weights.mutable_data()) v = static_cast<S>(rng.normal(0.0, kInitStd));
    k.weights.set_requires_grad(true);
    return k;
  }

  int classes() const { return static_cast<int>(weights.dim(0)); }
  int dim() const { return static_cast<int>(weights.dim(1)); }
};

/// Layernorm + linear classifier applied to the fused representation.
template <typename S>
struct FusionHead {
  Tensor<S> norm_gain, norm_bias;    // (D)
  Tensor<S> classifier_w;            // (D, G)
  Tensor<S> classifier_b;            // (G)

  // The classifier starts at zero: predictions begin uniform and the encoder
  // only receives gradients through directions the head has already found
  // useful. A randomly-initialized head feeds destructive gradients into the
  // trunk early on and collapses the representation under plain SGD.
  static FusionHead init(int dim, int classes, Rng&) {
    FusionHead h;
    h.norm_gain = Tensor<S>::full({dim}, S(1)).set_requires_grad(true);
    h.norm_bias = Tensor<S>::zeros({dim}).set_requires_grad(true);
    h.classifier_w = Tensor<S>::zeros({dim, classes}).set_requires_grad(true);
    h.classifier_b = Tensor<S>::zeros({classes}).set_requires_grad(true);
    return h;
  }

  void append_named(const std::string& prefix, std::vector<std::pair<std::string, Tensor<S>>>& out) {
    out.emplace_back(prefix + "norm_gain", norm_gain);
    out.emplace_back(prefix + "norm_bias", norm_bias);
    out.emplace_back(prefix + "classifier_w", classifier_w);
    out.emplace_back(prefix + "classifier_b", classifier_b);
  }
};

/// Per-class similarity scores S(y, k^g): elementwise product of y with each
/// embedding row, reduced by summation. These are the pre-softmax logits both
/// the response coefficients and the knowledge loss consume.
template <typename S>
Tensor<S> class_similarities(const Tensor<S>& y, const KnowledgeEmbeddings<S>& k) {
  if (y.rank() != 1 || y.dim(0) != k.dim())
    throw ShapeError("class_similarities: representation " + shape_str(y.shape()) +
                     " does not match embeddings " + shape_str(k.weights.shape()));
  return reshape(matmul(k.weights, reshape(y, {y.dim(0), 1})), {k.classes()});
}

/// Response coefficients r = softmax of the similarities.
template <typename S>
Tensor<S> respond(const Tensor<S>& y, const KnowledgeEmbeddings<S>& k) {
  return softmax(class_similarities(y, k), 0);
}

/// Knowledge-learning loss: cross-entropy of the similarity logits against
/// the ground-truth class.
template <typename S>
Tensor<S> knowledge_loss(const Tensor<S>& similarity_logits, int64_t label) {
  return cross_entropy(similarity_logits, label);
}

/// Knowledge-based representation: convex combination of embedding rows with
/// the response coefficients as weights.
template <typename S>
Tensor<S> knowledge_representation(const Tensor<S>& r, const KnowledgeEmbeddings<S>& k) {
  if (r.rank() != 1 || r.dim(0) != k.classes())
    throw ShapeError("knowledge_representation: coefficients " + shape_str(r.shape()) +
                     " do not match embeddings " + shape_str(k.weights.shape()));
  return reshape(matmul(reshape(r, {1, k.classes()}), k.weights), {k.dim()});
}

/// Fusion logits u = classifier(layernorm(y + delta)).
template <typename S>
Tensor<S> fuse(const Tensor<S>& y, const Tensor<S>& delta, FusionHead<S>& head) {
  Tensor<S> fused = layernorm(add(y, delta), head.norm_gain, head.norm_bias, S(kLayerNormEps));
  int64_t d = head.classifier_w.dim(0), g = head.classifier_w.dim(1);
  Tensor<S> logits = add(matmul(reshape(fused, {1, d}), head.classifier_w), head.classifier_b);
  return reshape(logits, {g});
}

template <typename S>
Tensor<S> total_loss(const Tensor<S>& loss_kl, const Tensor<S>& loss_rep, S mu) {
  if (mu < S(0)) throw ContractError("total_loss: mu must be nonnegative");
  return add(loss_kl, scale(loss_rep, mu));
}

/// Everything the knowledge head produces for one image.
template <typename S>
struct ForwardArtifacts {
  Tensor<S> y;
  Tensor<S> similarity;  // pre-softmax logits of Eq. r = softmax(S(y, K))
  Tensor<S> r;
  Tensor<S> delta;
  Tensor<S> u_logits;
  Tensor<S> loss_kl;
  Tensor<S> loss_rep;
  Tensor<S> loss_total;
};

/// Runs the knowledge head on a representation. The similarity logits are
/// computed once and shared between the response softmax and the knowledge
/// loss.
template <typename S>
ForwardArtifacts<S> knowledge_forward(const Tensor<S>& y, const KnowledgeEmbeddings<S>& k,
                                      FusionHead<S>& head, int64_t label, S mu) {
  ForwardArtifacts<S> a;
  a.y = y;
  a.similarity = class_similarities(y, k);
  a.r = softmax(a.similarity, 0);
  a.delta = knowledge_representation(a.r, k);
  a.u_logits = fuse(y, a.delta, head);
  a.loss_kl = knowledge_loss(a.similarity, label);
  a.loss_rep = cross_entropy(a.u_logits, label);
  a.loss_total = total_loss(a.loss_kl, a.loss_rep, mu);
  return a;
}

/// Inference-path prediction: unsuppressed encode, knowledge head, argmax of
/// the fusion logits.
template <typename S>
int predict(const Tensor<S>& image, EncoderParams<S>& params, const ModelConfig& cfg,
            const KnowledgeEmbeddings<S>& k, FusionHead<S>& head) {
  NoGradScope<S> no_grad;
  EncoderOutput<S> out = encode(image, params, cfg);
  Tensor<S> r = respond(out.y, k);
  Tensor<S> delta = knowledge_representation(r, k);
  Tensor<S> u = fuse(out.y, delta, head);
  return static_cast<int>(argmax(u));
}

}  // namespace tpskg
