#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "otfuse/fusion.hpp"
#include "otfuse/linalg.hpp"

using namespace otfuse;
using namespace otfuse::fusion;

namespace {

ArchConfig arch_of(std::size_t d, std::size_t layers = 2) {
  ArchConfig a;
  a.hidden_dim = d;
  a.intermediate_dim = 2 * d;
  a.num_layers = layers;
  a.num_heads = 4;
  a.grid_side = 3;
  a.patch_dim = 6;
  a.num_classes = 4;
  return a;
}

TransformerParams generic_params(const ArchConfig &arch, std::uint64_t seed) {
  Rng rng(seed);
  auto p = model::init_params(arch, rng);
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

double max_param_diff(const TransformerParams &a, const TransformerParams &b) {
  auto fa = model::flatten(a), fb = model::flatten(b);
  REQUIRE(fa.size() == fb.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(fa[i]) - fb[i]));
  return worst;
}

FusionConfig emd_weights() {
  auto c = FusionConfig::defaults(AlignMode::Weights);
  c.solver = SolverKind::Emd;
  return c;
}

// Matrix for "other neuron i sits at anchor position perm[i]".
AlignmentMap perm_map(const std::vector<std::size_t> &perm) {
  AlignmentMap m{Matrix({perm.size(), perm.size()})};
  for (std::size_t i = 0; i < perm.size(); ++i)
    m.m(i, perm[i]) = 1.0;
  return m;
}

// Each hidden neuron split into two copies. Input rows carrying a duplicated
// axis are halved so sums are unchanged, and Q/K pick up 2^-1/4 each to undo
// the doubled head width in the attention scale.
Tensor widen(const Tensor &w, bool rows, bool cols, float scale = 1.f) {
  const std::size_t R = rows ? 2 * w.rows() : w.rows();
  const std::size_t C = cols ? 2 * w.cols() : w.cols();
  Tensor o({R, C});
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j)
      o(i, j) = w(rows ? i / 2 : i, cols ? j / 2 : j) * (rows ? 0.5f : 1.f) * scale;
  return o;
}

Tensor widen_vec(const Tensor &v, float scale = 1.f) {
  Tensor o({2 * v.size()});
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = v[i / 2] * scale;
  return o;
}

TransformerParams duplicate_widen(const TransformerParams &s) {
  TransformerParams b = s;
  const float qs = std::pow(2.f, -0.25f);
  b.patch_w = widen(s.patch_w, false, true);
  b.patch_b = widen_vec(s.patch_b);
  b.cls_token = widen_vec(s.cls_token);
  b.pos_emb = widen(s.pos_emb, false, true);
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const auto &L = s.layers[l];
    auto &B = b.layers[l];
    B.ln1_alpha = widen_vec(L.ln1_alpha);
    B.ln1_beta = widen_vec(L.ln1_beta);
    B.wq = widen(L.wq, true, true, qs);
    B.bq = widen_vec(L.bq, qs);
    B.wk = widen(L.wk, true, true, qs);
    B.bk = widen_vec(L.bk, qs);
    B.wv = widen(L.wv, true, true);
    B.bv = widen_vec(L.bv);
    B.wo = widen(L.wo, true, true);
    B.bo = widen_vec(L.bo);
    B.ln2_alpha = widen_vec(L.ln2_alpha);
    B.ln2_beta = widen_vec(L.ln2_beta);
    B.w1 = widen(L.w1, true, true);
    B.b1 = widen_vec(L.b1);
    B.w2 = widen(L.w2, true, true);
    B.b2 = widen_vec(L.b2);
  }
  b.final_alpha = widen_vec(s.final_alpha);
  b.final_beta = widen_vec(s.final_beta);
  b.head_w = widen(s.head_w, true, false);
  return b;
}

} // namespace

TEST_CASE("sequence filter tokens") {
  ArchConfig a = arch_of(8);
  a.grid_side = 4;
  CHECK(kept_tokens(SequenceFilter::window(2), a) ==
        std::vector<std::size_t>{6, 7, 10, 11});
  CHECK(kept_tokens(SequenceFilter::only_cls(), a) == std::vector<std::size_t>{0});
  CHECK(kept_tokens(SequenceFilter::all(), a).size() == 17);
  CHECK_THROWS_AS(kept_tokens(SequenceFilter::window(5), a), Error);

  Rng rng(3);
  Tensor site = rand_normal(rng, {3, 2 * a.seq_len()});
  CHECK(filter_tokens(site, SequenceFilter::all(), a) == site);
  auto cls = filter_tokens(site, SequenceFilter::only_cls(), a);
  REQUIRE(cls.shape() == Shape{3, 2});
  CHECK(cls(1, 1) == site(1, a.seq_len()));
  auto win = filter_tokens(site, SequenceFilter::window(2), a);
  REQUIRE(win.shape() == Shape{3, 8});
  CHECK(win(2, 5) == site(2, a.seq_len() + 7));
}

TEST_CASE("filter text roundtrip") {
  for (auto f : {SequenceFilter::all(), SequenceFilter::only_cls(),
                 SequenceFilter::window(3)})
    CHECK(SequenceFilter::parse(f.str()) == f);
  CHECK_THROWS_AS(SequenceFilter::parse("window:0"), Error);
  CHECK_THROWS_AS(SequenceFilter::parse("window:x"), Error);
  CHECK_THROWS_AS(SequenceFilter::parse("middle"), Error);
}

TEST_CASE("weights features under identity and permuted incoming maps") {
  auto arch = arch_of(8);
  auto anchor = generic_params(arch, 1);
  auto ident = neuron_features(anchor, anchor, {SiteKind::Fc1, 0},
                               AlignMode::Weights, AlignmentMap::identity(8),
                               nullptr, nullptr, SequenceFilter::all(), arch);
  REQUIRE(ident.x.shape() == Shape{16, 8});
  for (std::size_t j = 0; j < 16; ++j)
    for (std::size_t i = 0; i < 8; ++i)
      CHECK(ident.x(j, i) == static_cast<double>(anchor.layers[0].w1(i, j)));
  CHECK(ident.x == ident.y);

  Rng rng(9);
  auto perms = model::random_site_permutations(arch, rng);
  auto other = model::permute_model(anchor, arch, perms);
  auto f = neuron_features(other, anchor, {SiteKind::Fc1, 0}, AlignMode::Weights,
                           perm_map(perms.stream), nullptr, nullptr,
                           SequenceFilter::all(), arch);
  const auto &fc1 = perms.layers[0].fc1;
  for (std::size_t j = 0; j < 16; ++j)
    for (std::size_t i = 0; i < 8; ++i)
      CHECK(f.x(j, i) == f.y(fc1[j], i));
}

TEST_CASE("activation features keep filtered columns") {
  auto arch = arch_of(8);
  auto p = generic_params(arch, 2);
  auto batch = random_batch(arch, 5, 4);
  auto trace = *model::forward(p, arch, batch, true).trace;
  auto f = neuron_features(p, p, {SiteKind::Value, 1}, AlignMode::Activations,
                           AlignmentMap::identity(8), &trace, &trace,
                           SequenceFilter::only_cls(), arch);
  CHECK(f.x.shape() == Shape{8, 5});
  CHECK_THROWS_AS(neuron_features(p, p, {SiteKind::Value, 1},
                                  AlignMode::Activations,
                                  AlignmentMap::identity(8), nullptr, nullptr,
                                  SequenceFilter::all(), arch),
                  Error);
}

TEST_CASE("site maps from features") {
  Rng rng(5);
  Matrix y = rand_normal(rng, {6, 4}).cast<double>();
  auto cfg = emd_weights();
  CHECK(compute_site_map(y, y, cfg).m == Matrix::identity(6));

  std::vector<std::size_t> p{3, 0, 5, 1, 4, 2};
  Matrix x({6, 4});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      x(i, k) = y(p[i], k);
  // x row i is anchor row p[i], so the map sends i to p[i].
  CHECK(compute_site_map(x, y, cfg).m == perm_map(p).m);

  auto soft = FusionConfig::defaults(AlignMode::Weights);
  soft.lambda = 1e6;
  auto u = compute_site_map(x, y, soft);
  for (std::size_t i = 0; i < u.m.size(); ++i)
    CHECK(u.m[i] == doctest::Approx(1.0 / 6.0).epsilon(1e-6));
}

TEST_CASE("self alignment and self fusion") {
  auto arch = arch_of(8);
  auto p = generic_params(arch, 11);
  auto res = align_model(p, arch, p, arch, emd_weights());
  CHECK(max_param_diff(res.aligned, p) <= 1e-6);
  CHECK(res.maps.patch.m == Matrix::identity(8));
  auto fused = fuse_models({{p, arch}, {p, arch}}, emd_weights());
  CHECK(max_param_diff(fused, p) <= 1e-6);
}

TEST_CASE("permuted copies are recovered") {
  auto arch = arch_of(16);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto anchor = generic_params(arch, seed);
    Rng rng(100 + seed);
    auto other = model::permute_model(anchor, arch,
                                      model::random_site_permutations(arch, rng));
    REQUIRE(max_param_diff(other, anchor) > 0.1);
    auto res = align_model(anchor, arch, other, arch, emd_weights());
    CHECK(max_param_diff(res.aligned, anchor) <= 1e-5);
    for (const auto &m : res.edge_maps)
      CHECK(m.is_permutation());

    auto fused = fuse_models({{anchor, arch}, {other, arch}}, emd_weights());
    CHECK(max_param_diff(fused, anchor) <= 1e-5);
    auto batch = random_batch(arch, 8, seed);
    auto la = model::forward(anchor, arch, batch).logits;
    auto lf = model::forward(fused, arch, batch).logits;
    auto lo = model::forward(other, arch, batch).logits;
    CHECK(max_abs_diff(la, lf) <= 1e-4);
    // The other model's own predictions survive alignment.
    auto la2 = model::forward(res.aligned, arch, batch).logits;
    for (std::size_t b = 0; b < 8; ++b) {
      auto row_o = lo.row(b), row_a = la2.row(b);
      CHECK(std::max_element(row_o.begin(), row_o.end()) - row_o.begin() ==
            std::max_element(row_a.begin(), row_a.end()) - row_a.begin());
    }
  }
}

namespace {

// Full-width q·kᵀ over all heads for rows of z.
Matrix qk_logits(const Matrix &z, const model::LayerParams &L) {
  auto proj = [&](const Tensor &w, const Tensor &b) {
    Matrix out = matmul(z, w.cast<double>());
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j)
        out(i, j) += b[j];
    return out;
  };
  return matmul(proj(L.wq, L.bq), transpose(proj(L.wk, L.bk)));
}

} // namespace

TEST_CASE("tied hard maps cancel in the attention logits") {
  auto arch = arch_of(16);
  auto anchor = generic_params(arch, 21);
  auto other = generic_params(arch, 22);
  auto res = align_model(anchor, arch, other, arch, emd_weights());
  for (std::size_t l = 0; l < arch.num_layers; ++l) {
    const auto &lm = res.maps.layers[l];
    REQUIRE(lm.q.is_permutation());
    CHECK(lm.q.m == lm.k.m);
    const AlignmentMap &in =
        l == 0 ? res.maps.embeddings : res.maps.layers[l - 1].stream_after_ffn;
    // Aligned logits at z equal the other model's logits at z·Mᵀ.
    Rng rng(l + 1);
    Matrix z = rand_normal(rng, {5, 16}).cast<double>();
    auto aligned = qk_logits(z, res.aligned.layers[l]);
    auto reference = qk_logits(matmul(z, transpose(in.m)), other.layers[l]);
    CHECK(max_abs_diff(aligned, reference) <= 1e-4);
  }
}

TEST_CASE("untied soft maps are allowed, hard untied is rejected") {
  auto arch = arch_of(8);
  auto a = generic_params(arch, 1), b = generic_params(arch, 2);
  auto cfg = emd_weights();
  cfg.tie_qk = false;
  CHECK_THROWS_AS(align_model(a, arch, b, arch, cfg), Error);
  auto soft = FusionConfig::defaults(AlignMode::Weights);
  soft.tie_qk = false;
  auto res = align_model(a, arch, b, arch, soft);
  CHECK_NOTHROW(model::check_params(res.aligned, arch));
}

TEST_CASE("identity maps reduce to vanilla fusion") {
  auto arch = arch_of(8);
  std::vector<Model> models{{generic_params(arch, 1), arch},
                            {generic_params(arch, 2), arch},
                            {generic_params(arch, 3), arch}};
  auto vf = vanilla_fuse(models);
  for (auto mode : {AlignMode::Weights, AlignMode::Activations}) {
    auto cfg = FusionConfig::defaults(mode);
    cfg.force_identity_maps = true;
    cfg.sample_batch = random_batch(arch, 4, 1);
    CHECK(max_param_diff(fuse_models(models, cfg), vf) <= 1e-6);
  }
}

TEST_CASE("vanilla fusion") {
  auto arch = arch_of(8);
  auto p = generic_params(arch, 4);
  CHECK(max_param_diff(vanilla_fuse({{p, arch}, {p, arch}}), p) == 0.0);
  auto half = vanilla_fuse({{p, arch}, {model::zeros_like(arch), arch}});
  auto fp = model::flatten(p), fh = model::flatten(half);
  for (std::size_t i = 0; i < fp.size(); ++i)
    CHECK(fh[i] == doctest::Approx(fp[i] / 2));
  auto wide = arch_of(16);
  try {
    vanilla_fuse({{p, arch}, {generic_params(wide, 1), wide}});
    FAIL("expected an error");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Heterogeneous);
  }
  CHECK_THROWS_AS(vanilla_fuse({{p, arch}}), Error);
}

TEST_CASE("heterogeneous fusion keeps anchor shapes") {
  for (auto [da, db] : {std::pair<std::size_t, std::size_t>{16, 32}, {32, 48}}) {
    auto aa = arch_of(da), ab = arch_of(db);
    auto pa = generic_params(aa, da), pb = generic_params(ab, db);
    for (auto mode : {AlignMode::Weights, AlignMode::Activations}) {
      auto cfg = FusionConfig::defaults(mode);
      cfg.sample_batch = random_batch(aa, 6, 2);
      auto res = align_model(pa, aa, pb, ab, cfg);
      CHECK_NOTHROW(model::check_params(res.aligned, aa));
      CHECK(res.maps.patch.m.shape() == Shape{db, da});
      CHECK(res.maps.layers[0].fc1.m.shape() == Shape{2 * db, 2 * da});
      auto fused = fuse_models({{pa, aa}, {pb, ab}}, cfg);
      CHECK_NOTHROW(model::check_params(fused, aa));
      // The anchor may sit second; the result still takes its shape.
      cfg.anchor_index = 1;
      auto flipped = fuse_models({{pa, aa}, {pb, ab}}, cfg);
      CHECK_NOTHROW(model::check_params(flipped, ab));
    }
    try {
      align_model(pa, aa, pb, ab, emd_weights());
      FAIL("expected an error");
    } catch (const Error &e) {
      CHECK(e.kind() == ErrorKind::Heterogeneous);
    }
  }
}

TEST_CASE("compressing a duplicated model recovers it") {
  auto arch = arch_of(16);
  auto wide_arch = arch_of(32);
  auto small = generic_params(arch, 31);
  auto wide = duplicate_widen(small);
  model::check_params(wide, wide_arch);
  auto batch = random_batch(arch, 16, 5);
  auto ls = model::forward(small, arch, batch).logits;
  REQUIRE(max_abs_diff(ls, model::forward(wide, wide_arch, batch).logits) <= 1e-4);

  auto cfg = FusionConfig::defaults(AlignMode::Weights);
  cfg.lambda = 1e-3;
  auto res = align_model(small, arch, wide, wide_arch, cfg);
  CHECK(max_abs_diff(ls, model::forward(res.aligned, arch, batch).logits) <= 1e-3);
}

TEST_CASE("config json roundtrip and validation") {
  auto c = FusionConfig::defaults(AlignMode::Activations);
  CHECK(c.lambda == 0.08);
  CHECK(FusionConfig::defaults(AlignMode::Weights).lambda == 0.06);
  c.filter = SequenceFilter::window(2);
  c.residual_policy = ResidualPolicy::WeightedMatrix;
  c.anchor_index = 2;
  c.tie_qk = false;
  auto j = config_to_json(c);
  auto back = config_from_json(j);
  CHECK(config_to_json(back) == j);
  CHECK(back.filter == c.filter);
  CHECK(back.residual_policy == ResidualPolicy::WeightedMatrix);

  auto partial = config_from_json(nlohmann::json{{"lambda", 0.2}}, c);
  CHECK(partial.lambda == 0.2);
  CHECK(partial.filter == c.filter);

  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"solver", "simplex"}}), Error);
  auto bad = emd_weights();
  bad.tie_qk = false;
  CHECK_THROWS_AS(bad.validate(), Error);
  auto neg = FusionConfig::defaults(AlignMode::Weights);
  neg.lambda = 0.0;
  CHECK_THROWS_AS(neg.validate(), Error);
}

TEST_CASE("fusion is deterministic") {
  auto arch = arch_of(16);
  std::vector<Model> models{{generic_params(arch, 7), arch},
                            {generic_params(arch, 8), arch}};
  for (auto mode : {AlignMode::Weights, AlignMode::Activations}) {
    auto cfg = FusionConfig::defaults(mode);
    cfg.residual_policy = ResidualPolicy::WeightedScalar;
    cfg.sample_batch = random_batch(arch, 6, 9);
    CHECK(fuse_models(models, cfg) == fuse_models(models, cfg));
  }
}

TEST_CASE("every residual policy yields stochastic stream maps") {
  auto arch = arch_of(8);
  auto a = generic_params(arch, 41), b = generic_params(arch, 42);
  for (auto policy : {ResidualPolicy::Averaging, ResidualPolicy::WeightedScalar,
                      ResidualPolicy::WeightedMatrix, ResidualPolicy::Identity,
                      ResidualPolicy::ResidualOnly}) {
    auto cfg = FusionConfig::defaults(AlignMode::Weights);
    cfg.residual_policy = policy;
    cfg.sample_batch = random_batch(arch, 4, 2);
    auto res = align_model(a, arch, b, arch, cfg);
    for (const auto &L : res.maps.layers) {
      for (std::size_t j = 0; j < 8; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < 8; ++i)
          s += L.stream_after_attn.m(i, j);
        CHECK(s == doctest::Approx(1.0));
      }
      if (policy == ResidualPolicy::Identity)
        CHECK(L.stream_after_ffn.m == Matrix::identity(8));
    }
  }
}
