#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "otfuse/rng.hpp"
#include "otfuse/tensor.hpp"

namespace otfuse::model {

struct ArchConfig {
  std::size_t hidden_dim = 32;
  std::size_t intermediate_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t grid_side = 3;
  std::size_t patch_dim = 16;
  std::size_t num_classes = 5;
  float eps_ln = 1e-5f;

  std::size_t seq_len() const { return grid_side * grid_side + 1; }
  std::size_t num_patches() const { return grid_side * grid_side; }
  std::size_t head_dim() const { return hidden_dim / num_heads; }
  void validate() const;
  bool operator==(const ArchConfig &) const = default;
};

struct LayerParams {
  Tensor ln1_alpha, ln1_beta;
  // Cross-head concatenation: column block h*head_dim.. belongs to head h.
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor ln2_alpha, ln2_beta;
  Tensor w1, b1, w2, b2;

  bool operator==(const LayerParams &) const = default;
};

// Weight matrices are stored input-axis x output-axis: y = x·W + b.
struct TransformerParams {
  Tensor patch_w, patch_b;
  Tensor cls_token;
  Tensor pos_emb;
  std::vector<LayerParams> layers;
  Tensor final_alpha, final_beta;
  Tensor head_w, head_b;

  bool operator==(const TransformerParams &) const = default;

  // Calls fn(name, tensor) for every tensor in a fixed canonical order.
  template <typename Fn> void visit(Fn &&fn) { visit_impl(*this, fn); }
  template <typename Fn> void visit(Fn &&fn) const { visit_impl(*this, fn); }

private:
  template <typename Self, typename Fn> static void visit_impl(Self &s, Fn &fn) {
    fn(std::string("patch_proj.w"), s.patch_w);
    fn(std::string("patch_proj.b"), s.patch_b);
    fn(std::string("cls_token"), s.cls_token);
    fn(std::string("pos_emb"), s.pos_emb);
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
      auto &L = s.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "ln1.alpha", L.ln1_alpha);
      fn(p + "ln1.beta", L.ln1_beta);
      fn(p + "attn.q.w", L.wq);
      fn(p + "attn.q.b", L.bq);
      fn(p + "attn.k.w", L.wk);
      fn(p + "attn.k.b", L.bk);
      fn(p + "attn.v.w", L.wv);
      fn(p + "attn.v.b", L.bv);
      fn(p + "attn.o.w", L.wo);
      fn(p + "attn.o.b", L.bo);
      fn(p + "ln2.alpha", L.ln2_alpha);
      fn(p + "ln2.beta", L.ln2_beta);
      fn(p + "fc1.w", L.w1);
      fn(p + "fc1.b", L.b1);
      fn(p + "fc2.w", L.w2);
      fn(p + "fc2.b", L.b2);
    }
    fn(std::string("final_ln.alpha"), s.final_alpha);
    fn(std::string("final_ln.beta"), s.final_beta);
    fn(std::string("head.w"), s.head_w);
    fn(std::string("head.b"), s.head_b);
  }
};

// (name, shape) of every tensor, in visit order.
std::vector<std::pair<std::string, Shape>> param_shapes(const ArchConfig &arch);

// Throws Shape if any tensor disagrees with the architecture.
void check_params(const TransformerParams &params, const ArchConfig &arch);

TransformerParams zeros_like(const ArchConfig &arch);
TransformerParams init_params(const ArchConfig &arch, Rng &rng);

std::vector<float> flatten(const TransformerParams &params);
TransformerParams unflatten(const ArchConfig &arch, std::span<const float> flat);

struct LayerTrace {
  Tensor stream_in; // residual stream entering the block
  Tensor q_out, k_out, v_out;
  Tensor attn_proj_out;
  Tensor stream_mid; // stream after the attention residual add
  Tensor fc1_out;    // pre-activation
  Tensor fc2_out;
};

// Site activations laid out neurons x (batch * seq), column b*seq + t.
struct ActivationTrace {
  std::size_t batch = 0;
  std::size_t seq = 0;
  Tensor embed_concat;   // patch embeddings with cls prepended, before pos
  Tensor embeddings_out; // after positional add
  std::vector<LayerTrace> layers;
};

struct ForwardResult {
  Tensor logits; // B x C
  std::optional<ActivationTrace> trace;
};

// batch is B x num_patches x patch_dim.
ForwardResult forward(const TransformerParams &params, const ArchConfig &arch,
                      const Tensor &batch, bool capture = false);

// probs[layer][b * heads + h] is a seq x seq row-stochastic matrix.
std::vector<std::vector<Tensor>>
attention_probs(const TransformerParams &params, const ArchConfig &arch,
                const Tensor &batch);

// Pre-softmax logits QKᵀ/sqrt(d_head), same layout as attention_probs.
std::vector<std::vector<Tensor>>
attention_logits(const TransformerParams &params, const ArchConfig &arch,
                 const Tensor &batch);

// One permutation per site. perm[new_index] = old_index.
struct SitePermutations {
  std::vector<std::size_t> stream; // shared by the whole residual stream
  struct Layer {
    std::vector<std::size_t> qk; // tied Q/K output columns
    std::vector<std::size_t> v;
    std::vector<std::size_t> fc1;
  };
  std::vector<Layer> layers;

  static SitePermutations identity(const ArchConfig &arch);
};

// Structured permutations that preserve function: head blocks are shuffled
// together for Q, K and V, and neurons are shuffled within each head
// (independently for QK and V).
SitePermutations random_site_permutations(const ArchConfig &arch, Rng &rng);

std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm);

// Relabels neurons; the result is functionally equivalent when the
// permutations are head-structured.
TransformerParams permute_model(const TransformerParams &params,
                                const ArchConfig &arch,
                                const SitePermutations &perms);

} // namespace otfuse::model
