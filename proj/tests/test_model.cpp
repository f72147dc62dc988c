#include <doctest.h>

#include <cmath>
#include <numeric>

#include "otfuse/encoder_core.hpp"
#include "otfuse/model.hpp"

using namespace otfuse;
using namespace otfuse::model;

namespace {

ArchConfig small_arch() {
  ArchConfig a;
  a.hidden_dim = 16;
  a.intermediate_dim = 24;
  a.num_layers = 2;
  a.num_heads = 4;
  a.grid_side = 2;
  a.patch_dim = 6;
  a.num_classes = 3;
  return a;
}

// Init with a larger scale than training init so every path carries signal.
TransformerParams generic_params(const ArchConfig &arch, std::uint64_t seed) {
  Rng rng(seed);
  auto p = init_params(arch, rng);
  p.visit([&](const std::string &, Tensor &t) {
    for (auto &v : t.data())
      v += static_cast<float>(0.3 * rng.normal());
  });
  return p;
}

Tensor random_batch(const ArchConfig &arch, std::size_t b, std::uint64_t seed) {
  Rng rng(seed);
  return rand_normal(rng, {b, arch.num_patches(), arch.patch_dim});
}

SitePermutations inverse(const SitePermutations &p) {
  SitePermutations inv;
  inv.stream = invert_permutation(p.stream);
  for (const auto &L : p.layers)
    inv.layers.push_back({invert_permutation(L.qk), invert_permutation(L.v),
                          invert_permutation(L.fc1)});
  return inv;
}

} // namespace

TEST_CASE("arch validation") {
  ArchConfig a = small_arch();
  CHECK_NOTHROW(a.validate());
  CHECK(a.seq_len() == 5);
  a.num_heads = 5;
  CHECK_THROWS_AS(a.validate(), Error);
  a = small_arch();
  a.num_layers = 0;
  CHECK_THROWS_AS(a.validate(), Error);
}

TEST_CASE("init params is deterministic and shape-correct") {
  ArchConfig a; // d=32, h=4, L=2
  Rng r1(5), r2(5);
  auto p1 = init_params(a, r1), p2 = init_params(a, r2);
  CHECK(p1 == p2);
  CHECK_NOTHROW(check_params(p1, a));
  CHECK(p1.layers[0].ln1_alpha == Tensor({32}, 1.0f));
  CHECK(p1.layers[0].bq == Tensor({32}, 0.0f));

  const auto &w = p1.layers[0].wq;
  double mean = 0.0, sq = 0.0;
  for (float v : w.data())
    mean += v;
  mean /= static_cast<double>(w.size());
  for (float v : w.data())
    sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(w.size()));
  CHECK(sd >= 0.015);
  CHECK(sd <= 0.025);
}

TEST_CASE("check_params reports shape mismatches") {
  ArchConfig a = small_arch();
  auto p = zeros_like(a);
  p.layers[1].w1 = Tensor({16, 23});
  try {
    check_params(p, a);
    FAIL("expected an error");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Shape);
    CHECK(std::string(e.what()).find("layers.1.fc1.w") != std::string::npos);
  }
}

TEST_CASE("flatten and unflatten are inverse") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 3);
  auto flat = flatten(p);
  std::size_t total = 0;
  for (auto &[name, shape] : param_shapes(a))
    total += shape_numel(shape);
  CHECK(flat.size() == total);
  CHECK(unflatten(a, flat) == p);
}

TEST_CASE("zero weights give the head bias as logits") {
  ArchConfig a = small_arch();
  auto p = zeros_like(a);
  p.head_b = Tensor::vector({0.5f, -1.0f, 2.0f});
  auto logits = forward(p, a, random_batch(a, 4, 1)).logits;
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      CHECK(logits(b, c) == p.head_b[c]);
}

TEST_CASE("forward rejects a mismatched batch") {
  ArchConfig a = small_arch();
  auto p = zeros_like(a);
  CHECK_THROWS_AS(forward(p, a, Tensor({2, 4, 5})), Error);
  CHECK_THROWS_AS(forward(p, a, Tensor({2, 3, 6})), Error);
}

TEST_CASE("forward is deterministic and trace shapes follow the layout") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 4);
  auto x = random_batch(a, 3, 2);
  auto r1 = forward(p, a, x, true), r2 = forward(p, a, x, true);
  CHECK(r1.logits == r2.logits);
  REQUIRE(r1.trace);
  const auto &t = *r1.trace;
  const std::size_t cols = 3 * a.seq_len();
  CHECK(t.batch == 3);
  CHECK(t.seq == a.seq_len());
  CHECK(t.embeddings_out.shape() == Shape{16, cols});
  CHECK(t.layers[1].q_out.shape() == Shape{16, cols});
  CHECK(t.layers[1].fc1_out.shape() == Shape{24, cols});
  CHECK(t.layers[1].fc2_out.shape() == Shape{16, cols});
  CHECK_FALSE(forward(p, a, x, false).trace.has_value());
}

TEST_CASE("trace columns match the per-example computation") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 5);
  auto x = random_batch(a, 2, 3);
  auto t = *forward(p, a, x, true).trace;
  // Embedding of patch 1 of example 1 recomputed by hand.
  const std::size_t b = 1, tok = 2;
  for (std::size_t i = 0; i < a.hidden_dim; ++i) {
    double v = p.patch_b[i] + p.pos_emb(tok, i);
    for (std::size_t k = 0; k < a.patch_dim; ++k)
      v += static_cast<double>(x[(b * a.num_patches() + tok - 1) * a.patch_dim + k]) *
           p.patch_w(k, i);
    CHECK(t.embeddings_out(i, b * a.seq_len() + tok) ==
          doctest::Approx(v).epsilon(1e-5));
  }
  // cls column carries cls + pos[0].
  for (std::size_t i = 0; i < a.hidden_dim; ++i)
    CHECK(t.embeddings_out(i, 0) ==
          doctest::Approx(p.cls_token[i] + p.pos_emb(0, i)).epsilon(1e-6));
}

TEST_CASE("flat-buffer encoder agrees with forward") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 6);
  auto x = random_batch(a, 3, 4);
  auto ref = forward(p, a, x).logits;
  auto flat = flatten(p);
  EncoderCore<float> core(a);
  ExampleCache<float> cache;
  for (std::size_t b = 0; b < 3; ++b) {
    core.forward(flat.data(), x.data().data() + b * a.num_patches() * a.patch_dim,
                 cache);
    for (std::size_t c = 0; c < a.num_classes; ++c)
      CHECK(cache.logits[c] == doctest::Approx(ref(b, c)).epsilon(1e-4));
  }
}

TEST_CASE("attention rows sum to one at every head") {
  ArchConfig a = small_arch();
  auto probs = attention_probs(generic_params(a, 7), a, random_batch(a, 3, 5));
  REQUIRE(probs.size() == a.num_layers);
  for (const auto &layer : probs) {
    REQUIRE(layer.size() == 3 * a.num_heads);
    for (const auto &m : layer)
      for (std::size_t r = 0; r < m.rows(); ++r) {
        double s = 0.0;
        for (float v : m.row(r))
          s += v;
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("identity permutations leave parameters bit-equal") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 8);
  CHECK(permute_model(p, a, SitePermutations::identity(a)) == p);
}

TEST_CASE("permutation equivalence on 20 random seeds") {
  ArchConfig a = small_arch();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = generic_params(a, 100 + seed);
    Rng rng(seed);
    auto q = permute_model(p, a, random_site_permutations(a, rng));
    CHECK_FALSE(q == p);
    auto x = random_batch(a, 8, 200 + seed);
    CHECK(max_abs_diff(forward(p, a, x).logits, forward(q, a, x).logits) < 1e-4);
  }
}

TEST_CASE("composing a permutation with its inverse restores the model") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 9);
  Rng rng(10);
  auto perms = random_site_permutations(a, rng);
  auto back = permute_model(permute_model(p, a, perms), a, inverse(perms));
  auto fa = flatten(p), fb = flatten(back);
  for (std::size_t i = 0; i < fa.size(); ++i)
    CHECK(std::abs(fa[i] - fb[i]) <= 1e-6);
}

TEST_CASE("permute_model rejects wrong lengths") {
  ArchConfig a = small_arch();
  auto perms = SitePermutations::identity(a);
  perms.layers[0].fc1.pop_back();
  CHECK_THROWS_AS(permute_model(zeros_like(a), a, perms), Error);
  CHECK_THROWS_AS(invert_permutation(std::vector<std::size_t>{0, 0, 1}), Error);
}

TEST_CASE("tied Q/K permutation within heads leaves attention logits unchanged") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 11);
  auto x = random_batch(a, 2, 6);
  Rng rng(12);
  auto perms = SitePermutations::identity(a);
  const std::size_t dh = a.head_dim();
  for (auto &L : perms.layers)
    for (std::size_t h = 0; h < a.num_heads; ++h) {
      std::vector<std::size_t> within(dh);
      std::iota(within.begin(), within.end(), h * dh);
      shuffle(rng, within);
      std::copy(within.begin(), within.end(), L.qk.begin() + h * dh);
    }
  auto q = permute_model(p, a, perms);
  CHECK_FALSE(q.layers[0].wq == p.layers[0].wq);
  auto la = attention_logits(p, a, x), lb = attention_logits(q, a, x);
  for (std::size_t l = 0; l < a.num_layers; ++l)
    for (std::size_t k = 0; k < la[l].size(); ++k)
      CHECK(max_abs_diff(la[l][k], lb[l][k]) < 1e-5);
}

TEST_CASE("untied Q/K permutation changes attention logits") {
  ArchConfig a = small_arch();
  auto p = generic_params(a, 13);
  auto q = p;
  // Swap two Q columns only.
  for (std::size_t r = 0; r < a.hidden_dim; ++r)
    std::swap(q.layers[0].wq(r, 0), q.layers[0].wq(r, 1));
  std::swap(q.layers[0].bq[0], q.layers[0].bq[1]);
  auto x = random_batch(a, 2, 7);
  auto la = attention_logits(p, a, x), lb = attention_logits(q, a, x);
  CHECK(max_abs_diff(la[0][0], lb[0][0]) > 1e-3);
}
