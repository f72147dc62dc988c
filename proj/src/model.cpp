#include "otfuse/model.hpp"

#include <cmath>
#include <numeric>

#include "otfuse/encoder_core.hpp"

namespace otfuse::model {

void ArchConfig::validate() const {
  auto need = [](bool ok, const std::string &what) {
    if (!ok)
      throw Error(ErrorKind::InvalidArg, "invalid architecture: " + what);
  };
  need(hidden_dim >= 1, "hidden_dim must be >= 1");
  need(intermediate_dim >= 1, "intermediate_dim must be >= 1");
  need(num_layers >= 1, "num_layers must be >= 1");
  need(num_heads >= 1, "num_heads must be >= 1");
  need(hidden_dim % num_heads == 0, "hidden_dim must be divisible by num_heads");
  need(grid_side >= 1, "grid_side must be >= 1");
  need(patch_dim >= 1, "patch_dim must be >= 1");
  need(num_classes >= 1, "num_classes must be >= 1");
  need(eps_ln > 0.0f && std::isfinite(eps_ln), "eps_ln must be positive");
}

std::vector<std::pair<std::string, Shape>>
param_shapes(const ArchConfig &arch) {
  const std::size_t d = arch.hidden_dim, I = arch.intermediate_dim;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("patch_proj.w", Shape{arch.patch_dim, d});
  out.emplace_back("patch_proj.b", Shape{d});
  out.emplace_back("cls_token", Shape{d});
  out.emplace_back("pos_emb", Shape{arch.seq_len(), d});
  for (std::size_t l = 0; l < arch.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.alpha", Shape{d});
    out.emplace_back(p + "ln1.beta", Shape{d});
    for (const char *site : {"q", "k", "v", "o"}) {
      out.emplace_back(p + "attn." + site + ".w", Shape{d, d});
      out.emplace_back(p + "attn." + site + ".b", Shape{d});
    }
    out.emplace_back(p + "ln2.alpha", Shape{d});
    out.emplace_back(p + "ln2.beta", Shape{d});
    out.emplace_back(p + "fc1.w", Shape{d, I});
    out.emplace_back(p + "fc1.b", Shape{I});
    out.emplace_back(p + "fc2.w", Shape{I, d});
    out.emplace_back(p + "fc2.b", Shape{d});
  }
  out.emplace_back("final_ln.alpha", Shape{d});
  out.emplace_back("final_ln.beta", Shape{d});
  out.emplace_back("head.w", Shape{d, arch.num_classes});
  out.emplace_back("head.b", Shape{arch.num_classes});
  return out;
}

ParamOffsets::ParamOffsets(const ArchConfig &arch) {
  auto shapes = param_shapes(arch);
  std::vector<std::size_t> starts;
  std::size_t at = 0;
  for (auto &[name, shape] : shapes) {
    starts.push_back(at);
    at += shape_numel(shape);
  }
  total = at;
  std::size_t i = 0;
  patch_w = starts[i++];
  patch_b = starts[i++];
  cls = starts[i++];
  pos = starts[i++];
  layers.resize(arch.num_layers);
  for (auto &L : layers) {
    L.ln1_a = starts[i++];
    L.ln1_b = starts[i++];
    L.wq = starts[i++];
    L.bq = starts[i++];
    L.wk = starts[i++];
    L.bk = starts[i++];
    L.wv = starts[i++];
    L.bv = starts[i++];
    L.wo = starts[i++];
    L.bo = starts[i++];
    L.ln2_a = starts[i++];
    L.ln2_b = starts[i++];
    L.w1 = starts[i++];
    L.b1 = starts[i++];
    L.w2 = starts[i++];
    L.b2 = starts[i++];
  }
  fin_a = starts[i++];
  fin_b = starts[i++];
  head_w = starts[i++];
  head_b = starts[i++];
}

void check_params(const TransformerParams &params, const ArchConfig &arch) {
  if (params.layers.size() != arch.num_layers)
    throw Error(ErrorKind::Shape,
                "model has " + std::to_string(params.layers.size()) +
                    " layers, architecture expects " +
                    std::to_string(arch.num_layers));
  auto shapes = param_shapes(arch);
  std::size_t i = 0;
  params.visit([&](const std::string &name, const Tensor &t) {
    const auto &[want_name, want_shape] = shapes[i++];
    if (name != want_name || t.shape() != want_shape)
      throw Error(ErrorKind::Shape, "tensor " + name + " has shape " +
                                        shape_str(t.shape()) + ", expected " +
                                        shape_str(want_shape));
  });
}

TransformerParams zeros_like(const ArchConfig &arch) {
  TransformerParams p;
  p.layers.resize(arch.num_layers);
  auto shapes = param_shapes(arch);
  std::size_t i = 0;
  p.visit([&](const std::string &, Tensor &t) { t = Tensor(shapes[i++].second); });
  return p;
}

TransformerParams init_params(const ArchConfig &arch, Rng &rng) {
  arch.validate();
  TransformerParams p = zeros_like(arch);
  p.visit([&](const std::string &name, Tensor &t) {
    auto ends_with = [&](const char *suffix) {
      std::string s(suffix);
      return name.size() >= s.size() &&
             name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".alpha")) {
      std::fill(t.data().begin(), t.data().end(), 1.0f);
    } else if (ends_with(".beta") || ends_with(".b")) {
      // zero
    } else {
      t = rand_trunc_normal(rng, t.shape(), 0.02f);
    }
  });
  return p;
}

std::vector<float> flatten(const TransformerParams &params) {
  std::vector<float> flat;
  params.visit([&](const std::string &, const Tensor &t) {
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  });
  return flat;
}

TransformerParams unflatten(const ArchConfig &arch,
                            std::span<const float> flat) {
  TransformerParams p = zeros_like(arch);
  std::size_t at = 0;
  std::size_t total = 0;
  p.visit([&](const std::string &, const Tensor &t) { total += t.size(); });
  if (flat.size() != total)
    throw Error(ErrorKind::Shape, "flat parameter length " +
                                      std::to_string(flat.size()) +
                                      " does not match architecture (" +
                                      std::to_string(total) + ")");
  p.visit([&](const std::string &, Tensor &t) {
    std::copy(flat.begin() + at, flat.begin() + at + t.size(), t.data().begin());
    at += t.size();
  });
  return p;
}

namespace {

void check_batch(const Tensor &batch, const ArchConfig &arch) {
  if (batch.rank() != 3 || batch.dim(1) != arch.num_patches() ||
      batch.dim(2) != arch.patch_dim)
    throw Error(ErrorKind::Shape,
                "batch shape " + shape_str(batch.shape()) + " does not match [Bx" +
                    std::to_string(arch.num_patches()) + "x" +
                    std::to_string(arch.patch_dim) + "]");
}

std::vector<double> to_double(const TransformerParams &params) {
  std::vector<double> flat;
  params.visit([&](const std::string &, const Tensor &t) {
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  });
  return flat;
}

// Writes a seq x width row-major block into columns [b*seq, (b+1)*seq).
void scatter_site(Tensor &site, const std::vector<double> &block,
                  std::size_t b, std::size_t seq, std::size_t width) {
  const std::size_t cols = site.cols();
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t i = 0; i < width; ++i)
      site[i * cols + b * seq + t] = static_cast<float>(block[t * width + i]);
}

template <typename Fn>
void run_examples(const TransformerParams &params, const ArchConfig &arch,
                  const Tensor &batch, bool keep_scores, Fn &&on_example) {
  arch.validate();
  check_params(params, arch);
  check_batch(batch, arch);
  const auto P = to_double(params);
  EncoderCore<double> core(arch);
  const std::size_t B = batch.dim(0);
  const std::size_t in = arch.num_patches() * arch.patch_dim;
  std::vector<double> patches(in);
  ExampleCache<double> cache;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < in; ++i)
      patches[i] = batch[b * in + i];
    core.forward(P.data(), patches.data(), cache, keep_scores);
    on_example(b, cache);
  }
}

} // namespace

ForwardResult forward(const TransformerParams &params, const ArchConfig &arch,
                      const Tensor &batch, bool capture) {
  const std::size_t B = batch.rank() == 3 ? batch.dim(0) : 0;
  const std::size_t d = arch.hidden_dim, I = arch.intermediate_dim,
                    S = arch.seq_len(), C = arch.num_classes;
  ForwardResult result;
  result.logits = Tensor({B, C});
  if (capture) {
    ActivationTrace tr;
    tr.batch = B;
    tr.seq = S;
    tr.embed_concat = Tensor({d, B * S});
    tr.embeddings_out = Tensor({d, B * S});
    tr.layers.resize(arch.num_layers);
    for (auto &L : tr.layers) {
      for (Tensor *t : {&L.stream_in, &L.q_out, &L.k_out, &L.v_out,
                        &L.attn_proj_out, &L.stream_mid, &L.fc2_out})
        *t = Tensor({d, B * S});
      L.fc1_out = Tensor({I, B * S});
    }
    result.trace = std::move(tr);
  }
  run_examples(params, arch, batch, false,
               [&](std::size_t b, const ExampleCache<double> &cache) {
                 for (std::size_t c = 0; c < C; ++c)
                   result.logits(b, c) = static_cast<float>(cache.logits[c]);
                 if (!capture)
                   return;
                 auto &tr = *result.trace;
                 scatter_site(tr.embed_concat, cache.concat, b, S, d);
                 scatter_site(tr.embeddings_out, cache.x0, b, S, d);
                 for (std::size_t l = 0; l < arch.num_layers; ++l) {
                   const auto &lc = cache.layers[l];
                   auto &L = tr.layers[l];
                   scatter_site(L.stream_in, lc.x_in, b, S, d);
                   scatter_site(L.q_out, lc.q, b, S, d);
                   scatter_site(L.k_out, lc.k, b, S, d);
                   scatter_site(L.v_out, lc.v, b, S, d);
                   scatter_site(L.attn_proj_out, lc.z, b, S, d);
                   scatter_site(L.stream_mid, lc.x_mid, b, S, d);
                   scatter_site(L.fc1_out, lc.u, b, S, I);
                   scatter_site(L.fc2_out, lc.f, b, S, d);
                 }
               });
  return result;
}

namespace {

std::vector<std::vector<Tensor>>
collect_attention(const TransformerParams &params, const ArchConfig &arch,
                  const Tensor &batch, bool logits) {
  const std::size_t H = arch.num_heads, S = arch.seq_len();
  std::vector<std::vector<Tensor>> out(arch.num_layers);
  run_examples(params, arch, batch, logits,
               [&](std::size_t, const ExampleCache<double> &cache) {
                 for (std::size_t l = 0; l < arch.num_layers; ++l)
                   for (std::size_t h = 0; h < H; ++h) {
                     Tensor m({S, S});
                     const double *src =
                         logits ? cache.scores.data() + (l * H + h) * S * S
                                : cache.layers[l].probs.data() + h * S * S;
                     for (std::size_t i = 0; i < S * S; ++i)
                       m[i] = static_cast<float>(src[i]);
                     out[l].push_back(std::move(m));
                   }
               });
  return out;
}

} // namespace

std::vector<std::vector<Tensor>>
attention_probs(const TransformerParams &params, const ArchConfig &arch,
                const Tensor &batch) {
  return collect_attention(params, arch, batch, false);
}

std::vector<std::vector<Tensor>>
attention_logits(const TransformerParams &params, const ArchConfig &arch,
                 const Tensor &batch) {
  return collect_attention(params, arch, batch, true);
}

SitePermutations SitePermutations::identity(const ArchConfig &arch) {
  auto iota = [](std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  };
  SitePermutations p;
  p.stream = iota(arch.hidden_dim);
  p.layers.resize(arch.num_layers);
  for (auto &L : p.layers) {
    L.qk = iota(arch.hidden_dim);
    L.v = iota(arch.hidden_dim);
    L.fc1 = iota(arch.intermediate_dim);
  }
  return p;
}

SitePermutations random_site_permutations(const ArchConfig &arch, Rng &rng) {
  SitePermutations p = SitePermutations::identity(arch);
  shuffle(rng, p.stream);
  const std::size_t H = arch.num_heads, dh = arch.head_dim();
  auto head_structured = [&](const std::vector<std::size_t> &heads) {
    std::vector<std::size_t> perm(arch.hidden_dim);
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<std::size_t> within(dh);
      std::iota(within.begin(), within.end(), std::size_t{0});
      shuffle(rng, within);
      for (std::size_t c = 0; c < dh; ++c)
        perm[h * dh + c] = heads[h] * dh + within[c];
    }
    return perm;
  };
  for (auto &L : p.layers) {
    std::vector<std::size_t> heads(H);
    std::iota(heads.begin(), heads.end(), std::size_t{0});
    shuffle(rng, heads);
    L.qk = head_structured(heads);
    L.v = head_structured(heads);
    shuffle(rng, L.fc1);
  }
  return p;
}

std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size(), perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || inv[perm[i]] != perm.size())
      throw Error(ErrorKind::InvalidArg, "not a permutation");
    inv[perm[i]] = i;
  }
  return inv;
}

namespace {

using Perm = std::vector<std::size_t>;

Tensor permute_rows(const Tensor &w, const Perm &perm) {
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      out(i, j) = w(perm[i], j);
  return out;
}

Tensor permute_cols(const Tensor &w, const Perm &perm) {
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      out(i, j) = w(i, perm[j]);
  return out;
}

Tensor permute_vec(const Tensor &v, const Perm &perm) {
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = v[perm[i]];
  return out;
}

void check_perm(const Perm &perm, std::size_t n, const std::string &site) {
  if (perm.size() != n)
    throw Error(ErrorKind::Shape, "permutation for " + site + " has length " +
                                      std::to_string(perm.size()) +
                                      ", expected " + std::to_string(n));
  invert_permutation(perm);
}

} // namespace

TransformerParams permute_model(const TransformerParams &params,
                                const ArchConfig &arch,
                                const SitePermutations &perms) {
  check_params(params, arch);
  const std::size_t d = arch.hidden_dim, I = arch.intermediate_dim;
  check_perm(perms.stream, d, "stream");
  if (perms.layers.size() != arch.num_layers)
    throw Error(ErrorKind::Shape, "permutation layer count mismatch");
  for (std::size_t l = 0; l < arch.num_layers; ++l) {
    check_perm(perms.layers[l].qk, d, "layer qk");
    check_perm(perms.layers[l].v, d, "layer v");
    check_perm(perms.layers[l].fc1, I, "layer fc1");
  }

  const Perm &s = perms.stream;
  TransformerParams out = params;
  out.patch_w = permute_cols(params.patch_w, s);
  out.patch_b = permute_vec(params.patch_b, s);
  out.cls_token = permute_vec(params.cls_token, s);
  out.pos_emb = permute_cols(params.pos_emb, s);
  for (std::size_t l = 0; l < arch.num_layers; ++l) {
    const auto &in = params.layers[l];
    auto &L = out.layers[l];
    const auto &lp = perms.layers[l];
    L.ln1_alpha = permute_vec(in.ln1_alpha, s);
    L.ln1_beta = permute_vec(in.ln1_beta, s);
    L.wq = permute_cols(permute_rows(in.wq, s), lp.qk);
    L.bq = permute_vec(in.bq, lp.qk);
    L.wk = permute_cols(permute_rows(in.wk, s), lp.qk);
    L.bk = permute_vec(in.bk, lp.qk);
    L.wv = permute_cols(permute_rows(in.wv, s), lp.v);
    L.bv = permute_vec(in.bv, lp.v);
    L.wo = permute_cols(permute_rows(in.wo, lp.v), s);
    L.bo = permute_vec(in.bo, s);
    L.ln2_alpha = permute_vec(in.ln2_alpha, s);
    L.ln2_beta = permute_vec(in.ln2_beta, s);
    L.w1 = permute_cols(permute_rows(in.w1, s), lp.fc1);
    L.b1 = permute_vec(in.b1, lp.fc1);
    L.w2 = permute_cols(permute_rows(in.w2, lp.fc1), s);
    L.b2 = permute_vec(in.b2, s);
  }
  out.final_alpha = permute_vec(params.final_alpha, s);
  out.final_beta = permute_vec(params.final_beta, s);
  out.head_w = permute_rows(params.head_w, s);
  return out;
}

} // namespace otfuse::model
