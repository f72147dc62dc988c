#include <doctest.h>

#include <cmath>

#include "otfuse/linalg.hpp"
#include "otfuse/rng.hpp"

using namespace otfuse;

TEST_CASE("tensor rejects data that does not fill its shape") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), Error);
  Tensor t({2, 3});
  CHECK(t.size() == shape_numel(t.shape()));
}

TEST_CASE("matmul hand cases") {
  auto a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  auto b = Tensor::matrix(2, 2, {5, 6, 7, 8});
  CHECK(matmul(a, b) == Tensor::matrix(2, 2, {19, 22, 43, 50}));

  Rng rng(4);
  auto x = rand_normal(rng, {3, 5});
  CHECK(matmul(Tensor::identity(3), x) == x);
  auto z = matmul(Tensor({4, 3}), x);
  for (float v : z.data())
    CHECK(v == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a({2, 3}), b({2, 3});
  try {
    matmul(a, b);
    FAIL("expected an error");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Shape);
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul_tn equals explicit transpose") {
  Rng rng(5);
  auto a = rand_normal(rng, {4, 3}), b = rand_normal(rng, {4, 2});
  CHECK(max_abs_diff(matmul_tn(a, b), matmul(transpose(a), b)) < 1e-6);
}

TEST_CASE("matmul is associative on random 4x4 triples") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = rand_normal(rng, {4, 4}), b = rand_normal(rng, {4, 4}),
         c = rand_normal(rng, {4, 4});
    auto l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    double scale = 0.0;
    for (float v : l.data())
      scale = std::max(scale, static_cast<double>(std::abs(v)));
    CHECK(max_abs_diff(l, r) <= 1e-4 * std::max(scale, 1.0));
  }
}

TEST_CASE("softmax examples") {
  auto eq = softmax_rows(Tensor::matrix(1, 4, {3, 3, 3, 3}));
  for (float v : eq.data())
    CHECK(v == doctest::Approx(0.25).epsilon(1e-7));

  auto s = softmax_rows(Tensor::matrix(1, 2, {0.0f, std::log(2.0f)}));
  CHECK(s[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  CHECK(s[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));

  auto x = Tensor::matrix(1, 3, {0.5f, -1.0f, 2.0f});
  auto shifted = Tensor::matrix(1, 3, {10.5f, 9.0f, 12.0f});
  CHECK(max_abs_diff(softmax_rows(x), softmax_rows(shifted)) < 1e-6);
}

TEST_CASE("softmax rows sum to one on wide-range inputs") {
  Rng rng(7);
  Tensor x({64, 17});
  for (auto &v : x.data())
    v = static_cast<float>(-50.0 + 100.0 * rng.uniform());
  auto s = softmax_rows(x);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double sum = 0.0;
    for (float v : s.row(r))
      sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("layer norm examples") {
  auto c = Tensor::matrix(1, 4, {2, 2, 2, 2});
  auto ones = Tensor::vector({1, 1, 1, 1}), zeros = Tensor::vector({0, 0, 0, 0});
  auto flat = layer_norm(c, ones, zeros, 1e-5f);
  for (float v : flat.data())
    CHECK(v == 0.0f);
  auto alpha = Tensor::vector({3, -1, 2, 5}), beta = Tensor::vector({0.5, 1, -2, 0});
  CHECK(max_abs_diff(layer_norm(c, alpha, beta, 1e-5f), beta.reshaped({1, 4})) < 1e-7);

  auto x = Tensor::matrix(1, 2, {1, 3});
  auto y = layer_norm(x, Tensor::vector({1, 1}), Tensor::vector({0, 0}), 0.0f);
  CHECK(y[0] == doctest::Approx(-1.0));
  CHECK(y[1] == doctest::Approx(1.0));
}

TEST_CASE("layer norm standardizes non-constant rows") {
  Rng rng(8);
  auto x = rand_normal(rng, {20, 16});
  for (auto &v : x.data())
    v = 3.0f * v + 7.0f;
  Tensor alpha({16}, 1.0f), beta({16}, 0.0f);
  auto y = layer_norm(x, alpha, beta, 1e-12f);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (float v : y.row(r))
      mean += v;
    mean /= 16.0;
    for (float v : y.row(r))
      var += (v - mean) * (v - mean);
    var /= 16.0;
    CHECK(std::abs(mean) <= 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("gelu values") {
  CHECK(gelu_scalar(0.0) == 0.0);
  CHECK(std::abs(gelu_scalar(10.0) - 10.0) < 1e-6);
  // x * Phi(x) at 1 with Phi(1) = 0.8413447460685429.
  CHECK(gelu_scalar(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  auto t = gelu(Tensor::vector({1.0f}));
  CHECK(t[0] == doctest::Approx(0.841345).epsilon(1e-6));
}

TEST_CASE("gelu derivative matches central differences") {
  for (double x : {-3.0, -1.0, -0.2, 0.0, 0.7, 2.5}) {
    const double h = 1e-5;
    const double fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2 * h);
    CHECK(gelu_grad_scalar(x) == doctest::Approx(fd).epsilon(1e-8));
  }
}

TEST_CASE("pairwise squared distances") {
  auto e1 = Matrix::matrix(1, 2, {1, 0}), e2 = Matrix::matrix(1, 2, {0, 1});
  CHECK(pairwise_sq_dist(e1, e2)(0, 0) == 2.0);
  auto o = Matrix::matrix(1, 2, {0, 0}), p = Matrix::matrix(1, 2, {3, 4});
  CHECK(pairwise_sq_dist(o, p)(0, 0) == 25.0);

  Rng rng(9);
  auto x = rand_normal(rng, {6, 5}).cast<double>();
  auto d = pairwise_sq_dist(x, x);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(d(i, i) == 0.0);
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(d(i, j) >= 0.0);
      CHECK(d(i, j) == d(j, i));
    }
  }
  CHECK_THROWS_AS(pairwise_sq_dist(Matrix({2, 3}), Matrix({2, 4})), Error);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(11), b(11), c(12);
  auto ta = rand_normal(a, {4, 4}), tb = rand_normal(b, {4, 4}),
       tc = rand_normal(c, {4, 4});
  CHECK(ta == tb);
  CHECK_FALSE(ta == tc);

  Rng fresh(1), fresh2(2);
  CHECK_FALSE(rand_normal(fresh, {8}) == rand_normal(fresh2, {8}));
}

TEST_CASE("rng draw k is splitmix of seed plus (k+1) golden increments") {
  Rng r(42);
  for (std::uint64_t k = 0; k < 5; ++k)
    CHECK(r.next_u64() == splitmix64_mix(42 + (k + 1) * 0x9E3779B97F4A7C15ull));
}

TEST_CASE("rng normal moments") {
  Rng rng(13);
  auto x = rand_normal(rng, {100000});
  double mean = 0.0, sq = 0.0;
  for (float v : x.data()) {
    mean += v;
    sq += static_cast<double>(v) * v;
  }
  mean /= 1e5;
  const double sd = std::sqrt(sq / 1e5 - mean * mean);
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(sd - 1.0) < 0.02);
}

TEST_CASE("truncated normal stays within two std") {
  Rng rng(14);
  auto x = rand_trunc_normal(rng, {10000}, 0.02f);
  for (float v : x.data())
    CHECK(std::abs(v) <= 0.04f);
}

TEST_CASE("below is uniform and in range") {
  Rng rng(15);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    auto v = rng.below(7);
    REQUIRE(v < 7);
    ++counts[v];
  }
  for (int c : counts)
    CHECK(std::abs(c - 10000) < 400);
}
