#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedsplit/adam.hpp"
#include "fedsplit/tensor.hpp"
#include "test_util.hpp"

using namespace fedsplit;
using testutil::finite_difference;
using testutil::probe;
using testutil::random_tensor;

TEST_CASE("matmul forward matches a hand-computed 2x2 example") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.data() == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("batched matmul handles independent slices") {
  Tensor a = Tensor::from_data({2, 1, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2, 1}, {1, 1, 2, 2});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<int>{2, 1, 1});
  CHECK(c.data() == std::vector<float>{3, 14});
}

TEST_CASE("softmax rows sum to one and match a known example") {
  Tensor x = Tensor::from_data({1, 3}, {1, 2, 3});
  Tensor y = softmax(x, 1);
  double s = 0;
  for (float v : y.data()) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y.data()[2] == doctest::Approx(0.66524096).epsilon(1e-5));
}

TEST_CASE("gelu matches the exact-erf definition at reference points") {
  Tensor x = Tensor::from_data({3}, {0.0f, 1.0f, -1.0f});
  Tensor y = gelu(x);
  CHECK(y.data()[0] == doctest::Approx(0.0));
  CHECK(y.data()[1] == doctest::Approx(0.8413447461).epsilon(1e-6));
  CHECK(y.data()[2] == doctest::Approx(-0.1586552539).epsilon(1e-6));
}

TEST_CASE("layer_norm produces zero-mean unit-variance rows") {
  Rng rng(7);
  Tensor x = random_tensor({4, 8}, rng, false, 3.0);
  Tensor g = Tensor::full({8}, 1.0f);
  Tensor b = Tensor::zeros({8});
  Tensor y = layer_norm(x, g, b);
  for (int r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < 8; ++c) mean += y.data()[r * 8 + c];
    mean /= 8;
    for (int c = 0; c < 8; ++c) {
      const double d = y.data()[r * 8 + c] - mean;
      var += d * d;
    }
    var /= 8;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-4));
    CHECK(std::fabs(var - 1.0) < 1e-2);  // eps in the denominator shifts it slightly
  }
}

TEST_CASE("cross_entropy matches a hand-computed example and honors ignore labels") {
  Tensor logits = Tensor::from_data({2, 2}, {0, 0, 0, 0});
  Tensor loss = cross_entropy(logits, {0, 1});
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Tensor loss2 = cross_entropy(logits, {0, kIgnoreLabel});
  CHECK(loss2.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  Tensor loss3 = cross_entropy(logits, {kIgnoreLabel, kIgnoreLabel});
  CHECK(loss3.item() == doctest::Approx(0.0));
  loss3.backward();  // all-ignored must not blow up
}

TEST_CASE("embedding gathers rows and scatter-adds gradients") {
  Tensor table = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor out = embedding(table, {2, 0, 2});
  CHECK(out.data() == std::vector<float>{5, 6, 1, 2, 5, 6});
  sum(out).backward();
  CHECK(table.grad() == std::vector<float>{1, 1, 0, 0, 2, 2});
}

TEST_CASE("dropout is identity in eval mode and rescales in train mode") {
  Rng rng(3);
  Tensor x = Tensor::full({1000}, 1.0f);
  Tensor eval_out = dropout(x, 0.5f, rng, false);
  CHECK(eval_out.data() == x.data());

  Rng rng2(3);
  Tensor train_out = dropout(x, 0.5f, rng2, true);
  int kept = 0;
  for (float v : train_out.data()) {
    CHECK((v == 0.0f || v == 2.0f));
    kept += v != 0.0f;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
}

TEST_CASE("finite differences validate every op over many seeds") {
  int seeds_run = 0;
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    Rng rng(seed);
    ++seeds_run;

    {
      Tensor a = random_tensor({3, 4}, rng);
      Tensor b = random_tensor({4, 2}, rng);
      Tensor w = random_tensor({3, 2}, rng, false);
      auto check = finite_difference([&] { return probe(matmul(a, b), w); }, {a, b});
      CAPTURE(check.detail);
      CHECK(check.ok);
    }
    {
      Tensor a = random_tensor({2, 3, 2}, rng);
      Tensor b = random_tensor({2, 2, 3}, rng);
      Tensor w = random_tensor({2, 3, 3}, rng, false);
      auto check = finite_difference([&] { return probe(matmul(a, b), w); }, {a, b});
      CHECK(check.ok);
    }
    {
      Tensor a = random_tensor({3, 3}, rng);
      Tensor b = random_tensor({3, 3}, rng);
      Tensor w = random_tensor({3, 3}, rng, false);
      auto check = finite_difference(
          [&] { return probe(add(mul(a, b), sub(scale(a, 0.7f), b)), w); }, {a, b});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({4, 3}, rng);
      Tensor bias = random_tensor({3}, rng);
      Tensor w = random_tensor({4, 3}, rng, false);
      auto check = finite_difference([&] { return probe(add_bias(x, bias), w); }, {x, bias});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({2, 5}, rng);
      Tensor w = random_tensor({2, 5}, rng, false);
      auto check = finite_difference([&] { return probe(softmax(x, 1), w); }, {x});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({3, 6}, rng, true, 2.0);
      Tensor g = random_tensor({6}, rng);
      Tensor b = random_tensor({6}, rng);
      Tensor w = random_tensor({3, 6}, rng, false);
      auto check = finite_difference([&] { return probe(layer_norm(x, g, b), w); }, {x, g, b});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({4, 4}, rng, true, 2.0);
      Tensor w = random_tensor({4, 4}, rng, false);
      auto check = finite_difference([&] { return probe(gelu(x), w); }, {x});
      CHECK(check.ok);
    }
    {
      Tensor logits = random_tensor({4, 3}, rng, true, 2.0);
      std::vector<int> targets = {0, 2, kIgnoreLabel, 1};
      auto check = finite_difference([&] { return cross_entropy(logits, targets); }, {logits});
      CHECK(check.ok);
    }
    {
      Tensor table = random_tensor({5, 3}, rng);
      std::vector<int> ids = {1, 4, 1};
      Tensor w = random_tensor({3, 3}, rng, false);
      auto check = finite_difference([&] { return probe(embedding(table, ids), w); }, {table});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({2, 3, 4}, rng);
      Tensor w = random_tensor({2, 4, 3}, rng, false);
      auto check = finite_difference([&] { return probe(transpose_last2(x), w); }, {x});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({2, 4, 4}, rng);
      Tensor w = random_tensor({4, 4, 2}, rng, false);
      auto check = finite_difference(
          [&] { return probe(merge_heads(split_heads(reshape(x, {2, 4, 4}), 2), 2), w); }, {x});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({3, 2, 4}, rng);
      Tensor w = random_tensor({3, 4}, rng, false);
      auto check = finite_difference([&] { return probe(take_position0(x), w); }, {x});
      CHECK(check.ok);
    }
    {
      Tensor x = random_tensor({4, 4}, rng);
      Tensor w = random_tensor({4, 4}, rng, false);
      const uint64_t drop_seed = seed * 31 + 1;
      auto check = finite_difference(
          [&] {
            Rng drop_rng(drop_seed);  // reseeded so FD probes see the same mask
            return probe(dropout(x, 0.3f, drop_rng, true), w);
          },
          {x});
      CHECK(check.ok);
    }
  }
  CHECK(seeds_run == 12);
}

TEST_CASE("Adam matches an independent double-precision reference over 5 steps") {
  // Reference implementation in double precision, written separately from
  // the production optimizer.
  const float lr = 0.01f, b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  std::vector<double> w = {0.5, -0.3, 1.2};
  std::vector<double> m(3, 0.0), v(3, 0.0);

  NamedTensors params;
  params["w"] = Tensor::from_data({3}, {0.5f, -0.3f, 1.2f}, true);
  Adam adam({lr, b1, b2, eps});

  for (int step = 1; step <= 5; ++step) {
    // Gradient of 0.5*||w||^2 is w itself.
    std::vector<float> grad(3);
    for (int i = 0; i < 3; ++i) grad[i] = params["w"].data()[i];
    params["w"].mutable_grad() = grad;
    adam.step(params);

    for (int i = 0; i < 3; ++i) {
      const double g = w[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mh = m[i] / (1.0 - std::pow(b1, step));
      const double vh = v[i] / (1.0 - std::pow(b2, step));
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  for (int i = 0; i < 3; ++i) {
    CHECK(params["w"].data()[i] == doctest::Approx(w[i]).epsilon(1e-5));
  }
}

TEST_CASE("Adam skips frozen parameters and consumes gradients") {
  NamedTensors params;
  params["a"] = Tensor::from_data({1}, {1.0f}, true);
  params["b"] = Tensor::from_data({1}, {1.0f}, true);
  params["a"].mutable_grad() = {1.0f};
  params["b"].mutable_grad() = {1.0f};
  Adam adam({0.1f, 0.9f, 0.999f, 1e-8f});
  adam.step(params, {"b"});
  CHECK(params["a"].data()[0] != 1.0f);
  CHECK(params["b"].data()[0] == 1.0f);
  CHECK_FALSE(params["a"].has_grad());
  CHECK_FALSE(params["b"].has_grad());
}

TEST_CASE("gradients accumulate across reuse of the same tensor") {
  Tensor x = Tensor::from_data({2}, {3.0f, 4.0f}, true);
  Tensor y = add(x, x);
  sum(y).backward();
  CHECK(x.grad() == std::vector<float>{2.0f, 2.0f});
}

TEST_CASE("backward rejects non-scalar roots without an explicit seed") {
  Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  CHECK_THROWS_AS(add(x, x).backward(), DimensionError);
  add(x, x).backward({1.0f, 1.0f});
  CHECK(x.grad() == std::vector<float>{2.0f, 2.0f});
}

TEST_CASE("shape errors raise DimensionError") {
  Tensor a = Tensor::from_data({2, 3}, std::vector<float>(6, 1.0f));
  Tensor b = Tensor::from_data({2, 3}, std::vector<float>(6, 1.0f));
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
  CHECK_THROWS_AS(split_heads(Tensor::from_data({1, 2, 3}, std::vector<float>(6, 0.0f)), 2),
                  DimensionError);
}

TEST_CASE("NoGradGuard suppresses graph recording") {
  Tensor x = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  NoGradGuard guard;
  Tensor y = mul(x, x);
  CHECK(y.node()->parents.empty());
  CHECK(y.node()->backprop == nullptr);
}
