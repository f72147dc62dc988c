#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "otfuse/flowgraph.hpp"
#include "otfuse/model.hpp"
#include "otfuse/ot.hpp"

namespace otfuse::fusion {

using flow::ResidualPolicy;
using model::ArchConfig;
using model::TransformerParams;
using ot::AlignmentMap;

enum class AlignMode { Weights, Activations };
enum class SolverKind { Emd, Sinkhorn };
// Where the positional-embedding branch of the embedding Add gets its map.
enum class PosEmbMap { FlowThrough, Computed };

struct SequenceFilter {
  enum class Kind { All, WindowN, OnlyCls };
  Kind kind = Kind::All;
  std::size_t n = 0;

  static SequenceFilter all() { return {}; }
  static SequenceFilter only_cls() { return {Kind::OnlyCls, 0}; }
  static SequenceFilter window(std::size_t n) { return {Kind::WindowN, n}; }
  std::string str() const;
  static SequenceFilter parse(const std::string &text);
  bool operator==(const SequenceFilter &) const = default;
};

struct FusionConfig {
  AlignMode mode = AlignMode::Weights;
  SolverKind solver = SolverKind::Sinkhorn;
  double lambda = 0.06;
  ResidualPolicy residual_policy = ResidualPolicy::Averaging;
  SequenceFilter filter = SequenceFilter::all();
  bool tie_qk = true;
  bool normalize_features = true;
  bool normalize_cost = true;
  std::size_t anchor_index = 0;
  PosEmbMap pos_emb_map = PosEmbMap::FlowThrough;
  // Replaces every computed site map by the identity (reduces to VF).
  bool force_identity_maps = false;
  ot::SinkhornOptions sinkhorn;
  // Inputs for activation capture and residual weighting; B x patches x dim.
  Tensor sample_batch;

  // Sinkhorn with lambda 0.06 (weights) or 0.08 (activations), averaging
  // residuals, all tokens.
  static FusionConfig defaults(AlignMode mode);
  void validate() const;
};

nlohmann::json config_to_json(const FusionConfig &config);
// Missing keys keep the values already in `base`.
FusionConfig config_from_json(const nlohmann::json &j,
                              FusionConfig base = FusionConfig{});

const char *mode_name(AlignMode mode);
AlignMode parse_mode(const std::string &name);
const char *solver_name(SolverKind solver);
SolverKind parse_solver(const std::string &name);

// Sequence positions kept by the filter (cls is position 0).
std::vector<std::size_t> kept_tokens(const SequenceFilter &filter,
                                     const ArchConfig &arch);

// site: neurons x (batch * seq) -> neurons x (batch * kept).
Tensor filter_tokens(const Tensor &site, const SequenceFilter &filter,
                     const ArchConfig &arch);

// Alignment sites with their own transport map.
enum class SiteKind { PatchProj, Query, Key, Value, AttnOut, Fc1, Fc2 };

struct SiteId {
  SiteKind kind;
  std::size_t layer = 0;
};

// Neuron feature rows: x for the model being aligned, y for the anchor.
struct NeuronFeatures {
  Matrix x;
  Matrix y;
};

// Weights mode: rows are output columns of the site's weight matrix, the
// other model's first input-aligned by `incoming` (Mᵀ_in·W). Activations
// mode: filtered site activations of each model.
NeuronFeatures neuron_features(const TransformerParams &other,
                               const TransformerParams &anchor, SiteId site,
                               AlignMode mode, const AlignmentMap &incoming,
                               const model::ActivationTrace *other_trace,
                               const model::ActivationTrace *anchor_trace,
                               const SequenceFilter &filter,
                               const ArchConfig &anchor_arch);

// Concatenates each neuron's feature rows (for tied Q/K).
NeuronFeatures concat_features(const NeuronFeatures &a, const NeuronFeatures &b);

// Counts a Sinkhorn solve that hit max_iter in *unconverged when given.
AlignmentMap compute_site_map(const Matrix &x, const Matrix &y,
                              const FusionConfig &config,
                              std::size_t *unconverged = nullptr);

struct LayerMaps {
  AlignmentMap q, k, v, attn_out, stream_after_attn, fc1, fc2,
      stream_after_ffn;
};

struct SiteMaps {
  AlignmentMap patch;
  AlignmentMap pos_emb;
  AlignmentMap embeddings; // stream map leaving the positional add
  std::vector<LayerMaps> layers;
};

struct AlignResult {
  TransformerParams aligned; // anchor-shaped
  SiteMaps maps;
  std::vector<AlignmentMap> edge_maps; // per flow-graph edge
  std::size_t unconverged_sites = 0;   // Sinkhorn solves that hit max_iter
};

AlignResult align_model(const TransformerParams &anchor,
                        const ArchConfig &anchor_arch,
                        const TransformerParams &other,
                        const ArchConfig &other_arch,
                        const FusionConfig &config);

struct Model {
  TransformerParams params;
  ArchConfig arch;
};

// Aligns every non-anchor model to the anchor and averages uniformly.
TransformerParams fuse_models(const std::vector<Model> &models,
                              const FusionConfig &config,
                              std::size_t *unconverged_sites = nullptr);

TransformerParams vanilla_fuse(const std::vector<Model> &models);

// Uniform elementwise mean; all parameter sets must share shapes.
TransformerParams average_params(const std::vector<const TransformerParams *> &sets);

} // namespace otfuse::fusion
