#pragma once

// Shared test machinery: random tensors and the central-finite-difference
// gradient oracle. The oracle stays independent of the backward rules it
// checks; it only re-evaluates the forward graph at perturbed inputs.

#include <algorithm>
#include <cmath>
#include <vector>

#include "tpskg/tensor.hpp"

namespace tpskg_test {

inline tpskg::Tensor<double> random_tensor(tpskg::Shape shape, tpskg::Rng& rng, double scale = 1.0,
                                           bool requires_grad = true) {
  tpskg::Tensor<double> t = tpskg::Tensor<double>::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal(0.0, scale);
  t.set_requires_grad(requires_grad);
  return t;
}

inline tpskg::Tensor<float> random_tensor_f(tpskg::Shape shape, tpskg::Rng& rng, double scale = 1.0,
                                            bool requires_grad = true) {
  tpskg::Tensor<float> t = tpskg::Tensor<float>::zeros(std::move(shape));
  for (float& v : t.mutable_data()) v = static_cast<float>(rng.normal(0.0, scale));
  t.set_requires_grad(requires_grad);
  return t;
}

/// Max relative error between analytic gradients and central finite
/// differences (64-bit, step h) over every element of every listed parameter.
/// make_loss must rebuild the scalar loss from the parameters' current data.
template <typename MakeLoss>
double max_grad_rel_err(std::vector<tpskg::Tensor<double>> params, MakeLoss&& make_loss,
                        double h = 1e-5) {
  using namespace tpskg;
  for (auto& p : params) p.clear_grad();
  GradientTape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> loss = make_loss();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(static_cast<size_t>(p.size()), 0.0));

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      double orig = data[i];
      data[i] = orig + h;
      double lp = make_loss().item();
      data[i] = orig - h;
      double lm = make_loss().item();
      data[i] = orig;
      double numeric = (lp - lm) / (2.0 * h);
      double a = analytic[pi][i];
      double err = std::fabs(a - numeric) / std::max({1e-6, std::fabs(a), std::fabs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<uint64_t>(a[i]) != std::bit_cast<uint64_t>(b[i])) return false;
  }
  return true;
}

inline bool bitwise_equal_f(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<uint32_t>(a[i]) != std::bit_cast<uint32_t>(b[i])) return false;
  }
  return true;
}

}  // namespace tpskg_test
