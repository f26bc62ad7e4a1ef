#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tpskg/rollout.hpp"

using namespace tpskg;

namespace {

// Row-stochastic random stack: softmax rows of random logits per layer/head.
AttentionStack random_stack(int layers, int heads, int tokens, Rng& rng) {
  AttentionStack s;
  s.layers = layers;
  s.heads = heads;
  s.tokens = tokens;
  s.weights.resize(static_cast<size_t>(layers) * heads * tokens * tokens);
  size_t idx = 0;
  for (int l = 0; l < layers; ++l)
    for (int h = 0; h < heads; ++h)
      for (int q = 0; q < tokens; ++q) {
        std::vector<double> logits(static_cast<size_t>(tokens));
        double mx = -1e300;
        for (double& v : logits) {
          v = rng.normal(0.0, 2.0);
          mx = std::max(mx, v);
        }
        double sum = 0;
        for (double& v : logits) {
          v = std::exp(v - mx);
          sum += v;
        }
        for (double v : logits) s.weights[idx++] = v / sum;
      }
  return s;
}

AttentionStack identity_stack(int layers, int tokens) {
  AttentionStack s;
  s.layers = layers;
  s.heads = 1;
  s.tokens = tokens;
  s.weights.assign(static_cast<size_t>(layers) * tokens * tokens, 0.0);
  for (int l = 0; l < layers; ++l)
    for (int i = 0; i < tokens; ++i)
      s.weights[(static_cast<size_t>(l) * tokens + i) * tokens + i] = 1.0;
  return s;
}

// Independent oracle: rownorm(M_l + I) per layer, then an explicit
// left-to-right chain product with naive triple loops.
std::vector<double> chain_oracle(const AttentionStack& s) {
  int t = s.tokens;
  std::vector<std::vector<double>> layers;
  for (int l = 0; l < s.layers; ++l) {
    std::vector<double> m(static_cast<size_t>(t) * t, 0.0);
    for (int h = 0; h < s.heads; ++h)
      for (int i = 0; i < t * t; ++i)
        m[static_cast<size_t>(i)] += s.weights[(static_cast<size_t>(l) * s.heads + h) * t * t + i];
    for (double& v : m) v *= 1.0 / s.heads;
    for (int i = 0; i < t; ++i) m[static_cast<size_t>(i) * t + i] += 1.0;
    for (int i = 0; i < t; ++i) {
      double sum = 0;
      for (int j = 0; j < t; ++j) sum += m[static_cast<size_t>(i) * t + j];
      double inv = 1.0 / sum;
      for (int j = 0; j < t; ++j) m[static_cast<size_t>(i) * t + j] *= inv;
    }
    layers.push_back(std::move(m));
  }
  std::vector<double> acc = layers[0];
  for (size_t l = 1; l < layers.size(); ++l) {
    std::vector<double> next(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < t; ++j)
        for (int k = 0; k < t; ++k)
          next[static_cast<size_t>(i) * t + j] +=
              layers[l][static_cast<size_t>(i) * t + k] * acc[static_cast<size_t>(k) * t + j];
    acc = std::move(next);
  }
  return acc;
}

}  // namespace

TEST_CASE("average_heads: single head returns the input") {
  Rng rng(2);
  auto s = random_stack(2, 1, 5, rng);
  auto avg = average_heads(s, 1);
  for (int i = 0; i < 25; ++i)
    CHECK(avg[static_cast<size_t>(i)] == s.weights[static_cast<size_t>(25 + i)]);
}

TEST_CASE("average_heads: uniform and identity heads average per entry") {
  int t = 4;
  AttentionStack s;
  s.layers = 1;
  s.heads = 2;
  s.tokens = t;
  s.weights.assign(static_cast<size_t>(2) * t * t, 0.0);
  for (int i = 0; i < t * t; ++i) s.weights[static_cast<size_t>(i)] = 1.0 / t;  // head 0 uniform
  for (int i = 0; i < t; ++i) s.weights[static_cast<size_t>(t * t + i * t + i)] = 1.0;  // head 1 identity
  auto avg = average_heads(s, 0);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j) {
      double want = (1.0 / t + (i == j ? 1.0 : 0.0)) / 2.0;
      CHECK(avg[static_cast<size_t>(i * t + j)] == doctest::Approx(want).epsilon(1e-12));
    }
  // rows still sum to one
  for (int i = 0; i < t; ++i) {
    double sum = 0;
    for (int j = 0; j < t; ++j) sum += avg[static_cast<size_t>(i * t + j)];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("average_heads matches direct mean oracle") {
  Rng rng(3);
  auto s = random_stack(3, 4, 6, rng);
  for (int l = 0; l < 3; ++l) {
    auto avg = average_heads(s, l);
    for (int i = 0; i < 36; ++i) {
      double want = 0;
      for (int h = 0; h < 4; ++h) want += s.at(l, h, i / 6, i % 6);
      want /= 4;
      REQUIRE(std::fabs(avg[static_cast<size_t>(i)] - want) < 1e-12);
    }
  }
  CHECK_THROWS_AS(average_heads(s, 3), IndexError);
}

TEST_CASE("rollout: identity stack is a fixed point") {
  auto s = identity_stack(3, 5);
  auto r = rollout(s);
  CHECK(r.layer_index == 3);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) CHECK(r.at(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
}

TEST_CASE("rollout: single uniform layer equals rownorm(uniform + I)") {
  int t = 5;
  AttentionStack s;
  s.layers = 1;
  s.heads = 1;
  s.tokens = t;
  s.weights.assign(static_cast<size_t>(t) * t, 1.0 / t);
  auto r = rollout(s);
  // each row: diagonal (1/t + 1)/2, off-diagonal (1/t)/2
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j) {
      double want = (1.0 / t + (i == j ? 1.0 : 0.0)) / 2.0;
      CHECK(r.at(i, j) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("rollout single layer equals rownorm(M1 + I) exactly") {
  Rng rng(5);
  auto s = random_stack(1, 2, 6, rng);
  auto r = rollout(s);
  auto want = chain_oracle(s);
  for (size_t i = 0; i < want.size(); ++i) CHECK(r.matrix[i] == want[i]);
}

TEST_CASE("rollout matches naive chain oracle on random 3-layer stacks") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_stack(3, 2, 5, rng);
    auto r = rollout(s);
    auto want = chain_oracle(s);
    for (size_t i = 0; i < want.size(); ++i) REQUIRE(std::fabs(r.matrix[i] - want[i]) < 1e-9);
  }
}

TEST_CASE("rollout preserves row-stochasticity") {
  Rng rng(9);
  auto s = random_stack(4, 3, 8, rng);
  auto r = rollout(s);
  for (int i = 0; i < 8; ++i) {
    double sum = 0;
    for (int j = 0; j < 8; ++j) {
      REQUIRE(r.at(i, j) >= 0.0);
      sum += r.at(i, j);
    }
    REQUIRE(std::fabs(sum - 1.0) < 1e-5);
  }
}

TEST_CASE("rollout of an empty stack is a contract error") {
  AttentionStack s;
  s.layers = 0;
  s.heads = 1;
  s.tokens = 4;
  CHECK_THROWS_AS(rollout(s), ContractError);
}

TEST_CASE("class_token_map drops the class-token column") {
  auto eye = rollout(identity_stack(1, 4));
  auto self_map = class_token_map(eye);
  REQUIRE(self_map.values.size() == 3);
  for (double v : self_map.values) CHECK(v == 0.0);  // class token attends only itself

  int t = 4;
  AttentionStack s;
  s.layers = 1;
  s.heads = 1;
  s.tokens = t;
  s.weights.assign(static_cast<size_t>(t) * t, 1.0 / t);
  RolloutMap uniform{t, 1, std::vector<double>(static_cast<size_t>(t) * t, 1.0 / t)};
  auto m = class_token_map(uniform);
  for (double v : m.values) CHECK(v == doctest::Approx(1.0 / t).epsilon(1e-12));

  Rng rng(11);
  auto rnd = rollout(random_stack(2, 2, 5, rng));
  auto slice = class_token_map(rnd);
  for (int j = 1; j < 5; ++j) REQUIRE(slice.values[static_cast<size_t>(j - 1)] == rnd.at(0, j));
}
