#include "otfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "otfuse/linalg.hpp"

namespace otfuse::fusion {

using flow::FlowNode;
using flow::Role;
using nlohmann::json;

std::string SequenceFilter::str() const {
  switch (kind) {
  case Kind::All: return "all";
  case Kind::OnlyCls: return "cls";
  case Kind::WindowN: return "window:" + std::to_string(n);
  }
  return "?";
}

SequenceFilter SequenceFilter::parse(const std::string &text) {
  if (text == "all")
    return all();
  if (text == "cls")
    return only_cls();
  const std::string prefix = "window:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string num = text.substr(prefix.size());
    if (!num.empty() && std::all_of(num.begin(), num.end(), ::isdigit)) {
      const auto n = std::stoul(num);
      if (n >= 1)
        return window(n);
    }
  }
  throw Error(ErrorKind::Config, "unknown sequence filter '" + text +
                                     "' (expected all, cls or window:<n>)");
}

const char *mode_name(AlignMode mode) {
  return mode == AlignMode::Weights ? "weights" : "acts";
}

AlignMode parse_mode(const std::string &name) {
  if (name == "weights")
    return AlignMode::Weights;
  if (name == "acts" || name == "activations")
    return AlignMode::Activations;
  throw Error(ErrorKind::Config, "unknown alignment mode '" + name + "'");
}

const char *solver_name(SolverKind solver) {
  return solver == SolverKind::Emd ? "emd" : "sinkhorn";
}

SolverKind parse_solver(const std::string &name) {
  if (name == "emd")
    return SolverKind::Emd;
  if (name == "sinkhorn")
    return SolverKind::Sinkhorn;
  throw Error(ErrorKind::Config, "unknown solver '" + name + "'");
}

FusionConfig FusionConfig::defaults(AlignMode mode) {
  FusionConfig c;
  c.mode = mode;
  c.solver = SolverKind::Sinkhorn;
  c.residual_policy = ResidualPolicy::Averaging;
  c.filter = SequenceFilter::all();
  c.lambda = mode == AlignMode::Weights ? 0.06 : 0.08;
  return c;
}

void FusionConfig::validate() const {
  if (solver == SolverKind::Emd && !tie_qk)
    throw Error(ErrorKind::Config,
                "hard alignment (emd) requires tied Q/K maps");
  if (solver == SolverKind::Sinkhorn && !(lambda > 0.0 && std::isfinite(lambda)))
    throw Error(ErrorKind::Config, "Sinkhorn lambda must be positive");
  if (filter.kind == SequenceFilter::Kind::WindowN && filter.n < 1)
    throw Error(ErrorKind::Config, "window filter needs n >= 1");
}

json config_to_json(const FusionConfig &c) {
  return json{{"mode", mode_name(c.mode)},
              {"solver", solver_name(c.solver)},
              {"lambda", c.lambda},
              {"residual", flow::policy_name(c.residual_policy)},
              {"filter", c.filter.str()},
              {"tie_qk", c.tie_qk},
              {"normalize_features", c.normalize_features},
              {"normalize_cost", c.normalize_cost},
              {"anchor", c.anchor_index},
              {"pos_emb_map",
               c.pos_emb_map == PosEmbMap::FlowThrough ? "flow" : "computed"},
              {"sinkhorn_tol", c.sinkhorn.tol},
              {"sinkhorn_max_iter", c.sinkhorn.max_iter}};
}

FusionConfig config_from_json(const json &j, FusionConfig c) {
  try {
    if (j.contains("mode"))
      c.mode = parse_mode(j["mode"].get<std::string>());
    if (j.contains("solver"))
      c.solver = parse_solver(j["solver"].get<std::string>());
    if (j.contains("lambda"))
      c.lambda = j["lambda"].get<double>();
    if (j.contains("residual"))
      c.residual_policy = flow::parse_policy(j["residual"].get<std::string>());
    if (j.contains("filter"))
      c.filter = SequenceFilter::parse(j["filter"].get<std::string>());
    if (j.contains("tie_qk"))
      c.tie_qk = j["tie_qk"].get<bool>();
    if (j.contains("normalize_features"))
      c.normalize_features = j["normalize_features"].get<bool>();
    if (j.contains("normalize_cost"))
      c.normalize_cost = j["normalize_cost"].get<bool>();
    if (j.contains("anchor"))
      c.anchor_index = j["anchor"].get<std::size_t>();
    if (j.contains("pos_emb_map")) {
      const auto v = j["pos_emb_map"].get<std::string>();
      if (v == "flow")
        c.pos_emb_map = PosEmbMap::FlowThrough;
      else if (v == "computed")
        c.pos_emb_map = PosEmbMap::Computed;
      else
        throw Error(ErrorKind::Config, "unknown pos_emb_map '" + v + "'");
    }
    if (j.contains("sinkhorn_tol"))
      c.sinkhorn.tol = j["sinkhorn_tol"].get<double>();
    if (j.contains("sinkhorn_max_iter"))
      c.sinkhorn.max_iter = j["sinkhorn_max_iter"].get<std::size_t>();
  } catch (const json::exception &e) {
    throw Error(ErrorKind::Config, std::string("fusion config: ") + e.what());
  }
  return c;
}

std::vector<std::size_t> kept_tokens(const SequenceFilter &filter,
                                     const ArchConfig &arch) {
  const std::size_t g = arch.grid_side;
  std::vector<std::size_t> keep;
  switch (filter.kind) {
  case SequenceFilter::Kind::All:
    for (std::size_t t = 0; t < arch.seq_len(); ++t)
      keep.push_back(t);
    break;
  case SequenceFilter::Kind::OnlyCls:
    keep.push_back(0);
    break;
  case SequenceFilter::Kind::WindowN: {
    const std::size_t n = filter.n;
    if (n < 1 || n > g)
      throw Error(ErrorKind::InvalidArg,
                  "window " + std::to_string(n) + " exceeds grid side " +
                      std::to_string(g));
    const std::size_t start = (g - n) / 2;
    for (std::size_t r = start; r < start + n; ++r)
      for (std::size_t c = start; c < start + n; ++c)
        keep.push_back(1 + r * g + c);
    break;
  }
  }
  return keep;
}

Tensor filter_tokens(const Tensor &site, const SequenceFilter &filter,
                     const ArchConfig &arch) {
  const std::size_t seq = arch.seq_len();
  if (site.rank() != 2 || site.cols() % seq != 0)
    throw Error(ErrorKind::Shape, "trace " + shape_str(site.shape()) +
                                      " is not a multiple of sequence length " +
                                      std::to_string(seq));
  const auto keep = kept_tokens(filter, arch);
  const std::size_t B = site.cols() / seq;
  Tensor out({site.rows(), B * keep.size()});
  for (std::size_t i = 0; i < site.rows(); ++i)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < keep.size(); ++k)
        out(i, b * keep.size() + k) = site(i, b * seq + keep[k]);
  return out;
}

namespace {

Matrix to_matrix(const Tensor &t) { return t.cast<double>(); }

// Mᵀ·W : aligns the input (row) axis of W.
Matrix align_in(const AlignmentMap &m, const Matrix &w) {
  return matmul_tn(m.m, w);
}

// W·M : aligns the output (column) axis of W.
Matrix align_out(const Matrix &w, const AlignmentMap &m) {
  return matmul(w, m.m);
}

Tensor align_vec(const AlignmentMap &m, const Tensor &v) {
  Matrix col = to_matrix(v).reshaped({v.size(), 1});
  Matrix out = matmul_tn(m.m, col);
  return out.cast<float>().reshaped({m.target_size()});
}

// Mᵀ·W rescaled by source/target width, so a neuron merged from k source
// neurons receives their summed contribution rather than the mean. The
// factor is 1 for square maps.
Matrix transfer_in(const AlignmentMap &m, const Matrix &w) {
  Matrix r = align_in(m, w);
  const double scale = static_cast<double>(m.source_size()) /
                       static_cast<double>(m.target_size());
  if (scale != 1.0)
    for (auto &v : r.data())
      v *= scale;
  return r;
}

Tensor align_weight(const AlignmentMap &in, const Tensor &w,
                    const AlignmentMap &out) {
  return align_out(transfer_in(in, to_matrix(w)), out).cast<float>();
}

const Tensor &site_weight(const TransformerParams &p, SiteId site) {
  switch (site.kind) {
  case SiteKind::PatchProj: return p.patch_w;
  case SiteKind::Query: return p.layers.at(site.layer).wq;
  case SiteKind::Key: return p.layers.at(site.layer).wk;
  case SiteKind::Value: return p.layers.at(site.layer).wv;
  case SiteKind::AttnOut: return p.layers.at(site.layer).wo;
  case SiteKind::Fc1: return p.layers.at(site.layer).w1;
  case SiteKind::Fc2: return p.layers.at(site.layer).w2;
  }
  throw Error(ErrorKind::InvalidArg, "unknown site");
}

const Tensor &site_trace(const model::ActivationTrace &t, SiteId site) {
  switch (site.kind) {
  case SiteKind::PatchProj: return t.embeddings_out;
  case SiteKind::Query: return t.layers.at(site.layer).q_out;
  case SiteKind::Key: return t.layers.at(site.layer).k_out;
  case SiteKind::Value: return t.layers.at(site.layer).v_out;
  case SiteKind::AttnOut: return t.layers.at(site.layer).attn_proj_out;
  case SiteKind::Fc1: return t.layers.at(site.layer).fc1_out;
  case SiteKind::Fc2: return t.layers.at(site.layer).fc2_out;
  }
  throw Error(ErrorKind::InvalidArg, "unknown site");
}

} // namespace

NeuronFeatures neuron_features(const TransformerParams &other,
                               const TransformerParams &anchor, SiteId site,
                               AlignMode mode, const AlignmentMap &incoming,
                               const model::ActivationTrace *other_trace,
                               const model::ActivationTrace *anchor_trace,
                               const SequenceFilter &filter,
                               const ArchConfig &anchor_arch) {
  if (mode == AlignMode::Weights) {
    const Tensor &wo = site_weight(other, site);
    const Tensor &wa = site_weight(anchor, site);
    if (incoming.source_size() != wo.rows() ||
        incoming.target_size() != wa.rows())
      throw Error(ErrorKind::Shape,
                  "incoming map " + shape_str(incoming.m.shape()) +
                      " does not fit weights " + shape_str(wo.shape()) +
                      " -> " + shape_str(wa.shape()));
    return NeuronFeatures{transpose(align_in(incoming, to_matrix(wo))),
                          transpose(to_matrix(wa))};
  }
  if (!other_trace || !anchor_trace)
    throw Error(ErrorKind::InvalidArg,
                "activation alignment needs traces of both models");
  return NeuronFeatures{
      to_matrix(filter_tokens(site_trace(*other_trace, site), filter, anchor_arch)),
      to_matrix(filter_tokens(site_trace(*anchor_trace, site), filter, anchor_arch))};
}

NeuronFeatures concat_features(const NeuronFeatures &a, const NeuronFeatures &b) {
  auto hcat = [](const Matrix &l, const Matrix &r) {
    if (l.rows() != r.rows())
      throw Error(ErrorKind::Shape, "cannot concatenate features of " +
                                        shape_str(l.shape()) + " and " +
                                        shape_str(r.shape()));
    Matrix out({l.rows(), l.cols() + r.cols()});
    for (std::size_t i = 0; i < l.rows(); ++i) {
      std::copy(l.row(i).begin(), l.row(i).end(), out.row(i).begin());
      std::copy(r.row(i).begin(), r.row(i).end(),
                out.row(i).begin() + static_cast<std::ptrdiff_t>(l.cols()));
    }
    return out;
  };
  return NeuronFeatures{hcat(a.x, b.x), hcat(a.y, b.y)};
}

AlignmentMap compute_site_map(const Matrix &x, const Matrix &y,
                              const FusionConfig &config,
                              std::size_t *unconverged) {
  if (config.force_identity_maps) {
    if (x.rows() != y.rows())
      throw Error(ErrorKind::Heterogeneous,
                  "identity maps need equal widths (heterogeneous models)");
    return AlignmentMap::identity(x.rows());
  }
  auto cost = ot::build_cost_matrix(x, y, config.normalize_features,
                                    config.normalize_cost);
  if (config.solver == SolverKind::Emd) {
    if (x.rows() != y.rows())
      throw Error(ErrorKind::Heterogeneous,
                  "hard alignment needs equal widths; use Sinkhorn for "
                  "heterogeneous models");
    return ot::to_alignment_map(ot::solve_emd(cost));
  }
  auto plan = ot::solve_sinkhorn(cost, config.lambda, config.sinkhorn);
  if (!plan.converged && unconverged)
    ++*unconverged;
  return ot::to_alignment_map(plan);
}

namespace {

// Positional embedding broadcast over the batch, laid out like a trace.
Tensor broadcast_pos(const Tensor &pos, std::size_t batch) {
  const std::size_t seq = pos.rows(), d = pos.cols();
  Tensor out({d, batch * seq});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < seq; ++t)
        out(i, b * seq + t) = pos(t, i);
  return out;
}

class Aligner {
public:
  Aligner(const TransformerParams &anchor, const ArchConfig &anchor_arch,
          const TransformerParams &other, const ArchConfig &other_arch,
          const FusionConfig &config)
      : anchor_(anchor), aarch_(anchor_arch), other_(other),
        oarch_(other_arch), cfg_(config) {
    out_ = anchor; // shapes; every tensor is overwritten
    maps_.layers.resize(aarch_.num_layers);
    const bool acts = cfg_.mode == AlignMode::Activations;
    const bool weighted = cfg_.residual_policy == ResidualPolicy::WeightedScalar ||
                          cfg_.residual_policy == ResidualPolicy::WeightedMatrix;
    if (acts || weighted) {
      if (cfg_.sample_batch.empty())
        throw Error(ErrorKind::Config,
                    "this configuration needs a sample batch for activations");
      anchor_trace_ =
          model::forward(anchor_, aarch_, cfg_.sample_batch, true).trace;
    }
    if (acts)
      other_trace_ = model::forward(other_, oarch_, cfg_.sample_batch, true).trace;
  }

  std::optional<AlignmentMap> visit(const FlowNode &node,
                                    std::span<const AlignmentMap> in) {
    const std::size_t l = node.layer < 0 ? 0 : static_cast<std::size_t>(node.layer);
    switch (node.role) {
    case Role::Input:
      return AlignmentMap::identity(aarch_.patch_dim);
    case Role::PatchProj: {
      auto m = site_map({SiteKind::PatchProj, 0}, in[0]);
      out_.patch_w = align_weight(in[0], other_.patch_w, m);
      out_.patch_b = align_vec(m, other_.patch_b);
      maps_.patch = m;
      return m;
    }
    case Role::ClsToken:
      return maps_.patch;
    case Role::ClsConcat:
      out_.cls_token = align_vec(in[0], other_.cls_token);
      return in[0];
    case Role::PosEmb: {
      AlignmentMap m = maps_.patch;
      if (cfg_.pos_emb_map == PosEmbMap::Computed)
        m = compute_site_map(transpose(to_matrix(other_.pos_emb)),
                             transpose(to_matrix(anchor_.pos_emb)), cfg_,
                             &unconverged_);
      out_.pos_emb = align_out(to_matrix(other_.pos_emb), m).cast<float>();
      maps_.pos_emb = m;
      return m;
    }
    case Role::PosAdd: {
      auto m = combine(in[0], in[1], [&] {
        return std::pair{anchor_trace_->embed_concat,
                         broadcast_pos(anchor_.pos_emb, anchor_trace_->batch)};
      });
      maps_.embeddings = m;
      return m;
    }
    case Role::Ln1:
      out_.layers[l].ln1_alpha = align_vec(in[0], other_.layers[l].ln1_alpha);
      out_.layers[l].ln1_beta = align_vec(in[0], other_.layers[l].ln1_beta);
      return in[0];
    case Role::Query:
    case Role::Key:
      return query_key(node.role, l, in[0]);
    case Role::Value: {
      auto m = site_map({SiteKind::Value, l}, in[0]);
      out_.layers[l].wv = align_weight(in[0], other_.layers[l].wv, m);
      out_.layers[l].bv = align_vec(m, other_.layers[l].bv);
      maps_.layers[l].v = m;
      return m;
    }
    case Role::AttnOut: {
      auto m = site_map({SiteKind::AttnOut, l}, in[0]);
      out_.layers[l].wo = align_weight(in[0], other_.layers[l].wo, m);
      out_.layers[l].bo = align_vec(m, other_.layers[l].bo);
      maps_.layers[l].attn_out = m;
      return m;
    }
    case Role::AttnAdd: {
      auto m = combine(in[0], in[1], [&] {
        const auto &t = anchor_trace_->layers[l];
        return std::pair{t.attn_proj_out, t.stream_in};
      });
      maps_.layers[l].stream_after_attn = m;
      return m;
    }
    case Role::Ln2:
      out_.layers[l].ln2_alpha = align_vec(in[0], other_.layers[l].ln2_alpha);
      out_.layers[l].ln2_beta = align_vec(in[0], other_.layers[l].ln2_beta);
      return in[0];
    case Role::Fc1: {
      auto m = site_map({SiteKind::Fc1, l}, in[0]);
      out_.layers[l].w1 = align_weight(in[0], other_.layers[l].w1, m);
      out_.layers[l].b1 = align_vec(m, other_.layers[l].b1);
      maps_.layers[l].fc1 = m;
      return m;
    }
    case Role::Fc2: {
      auto m = site_map({SiteKind::Fc2, l}, in[0]);
      out_.layers[l].w2 = align_weight(in[0], other_.layers[l].w2, m);
      out_.layers[l].b2 = align_vec(m, other_.layers[l].b2);
      maps_.layers[l].fc2 = m;
      return m;
    }
    case Role::FfnAdd: {
      auto m = combine(in[0], in[1], [&] {
        const auto &t = anchor_trace_->layers[l];
        return std::pair{t.fc2_out, t.stream_mid};
      });
      maps_.layers[l].stream_after_ffn = m;
      return m;
    }
    case Role::FinalLn:
      out_.final_alpha = align_vec(in[0], other_.final_alpha);
      out_.final_beta = align_vec(in[0], other_.final_beta);
      return in[0];
    case Role::Head:
      // Class axis is shared by construction; only the input is aligned.
      out_.head_w = transfer_in(in[0], to_matrix(other_.head_w)).cast<float>();
      out_.head_b = other_.head_b;
      return AlignmentMap::identity(aarch_.num_classes);
    case Role::Output:
      return std::nullopt;
    }
    return std::nullopt;
  }

  AlignResult finish(std::vector<AlignmentMap> edge_maps) {
    return AlignResult{std::move(out_), std::move(maps_), std::move(edge_maps),
                       unconverged_};
  }

private:
  AlignmentMap site_map(SiteId site, const AlignmentMap &incoming) {
    auto f = features(site, incoming);
    return compute_site_map(f.x, f.y, cfg_, &unconverged_);
  }

  NeuronFeatures features(SiteId site, const AlignmentMap &incoming) {
    return neuron_features(other_, anchor_, site, cfg_.mode, incoming,
                           other_trace_ ? &*other_trace_ : nullptr,
                           anchor_trace_ ? &*anchor_trace_ : nullptr,
                           cfg_.filter, aarch_);
  }

  AlignmentMap query_key(Role role, std::size_t l, const AlignmentMap &in) {
    auto &lm = maps_.layers[l];
    auto &dst = out_.layers[l];
    const auto &src = other_.layers[l];
    if (role == Role::Query) {
      if (cfg_.tie_qk) {
        auto f = concat_features(features({SiteKind::Query, l}, in),
                                 features({SiteKind::Key, l}, in));
        lm.q = compute_site_map(f.x, f.y, cfg_, &unconverged_);
        lm.k = lm.q;
      } else {
        lm.q = site_map({SiteKind::Query, l}, in);
      }
      dst.wq = align_weight(in, src.wq, lm.q);
      dst.bq = align_vec(lm.q, src.bq);
      scale_logit_side(dst.wq, dst.bq, lm.q);
      return lm.q;
    }
    if (!cfg_.tie_qk)
      lm.k = site_map({SiteKind::Key, l}, in);
    dst.wk = align_weight(in, src.wk, lm.k);
    dst.bk = align_vec(lm.k, src.bk);
    scale_logit_side(dst.wk, dst.bk, lm.k);
    return lm.k;
  }

  // Merging k query/key neurons into one shrinks q·k by k while 1/sqrt(d_h)
  // only grows by sqrt(k); each side takes the fourth root of the rest.
  static void scale_logit_side(Tensor &w, Tensor &b, const AlignmentMap &m) {
    const double ratio = static_cast<double>(m.source_size()) /
                         static_cast<double>(m.target_size());
    if (ratio == 1.0)
      return;
    const float s = static_cast<float>(std::pow(ratio, 0.25));
    for (auto &v : w.data())
      v *= s;
    for (auto &v : b.data())
      v *= s;
  }

  template <typename ActFn>
  AlignmentMap combine(const AlignmentMap &current, const AlignmentMap &residual,
                       ActFn &&activations) {
    const std::size_t width = current.target_size();
    switch (cfg_.residual_policy) {
    case ResidualPolicy::Identity:
      if (current.source_size() != width)
        throw Error(ErrorKind::Heterogeneous,
                    "identity residual policy needs equal widths");
      return AlignmentMap::identity(width);
    case ResidualPolicy::Averaging:
      return flow::combine_residual_maps(current, residual,
                                         flow::gamma_constant(width, 0.5));
    case ResidualPolicy::ResidualOnly:
      return flow::combine_residual_maps(current, residual,
                                         flow::gamma_constant(width, 1.0));
    case ResidualPolicy::WeightedScalar: {
      auto [cur, res] = activations();
      return flow::combine_residual_maps(current, residual,
                                         flow::gamma_scalar(cur, res));
    }
    case ResidualPolicy::WeightedMatrix: {
      auto [cur, res] = activations();
      return flow::combine_residual_maps(current, residual,
                                         flow::gamma_matrix(cur, res));
    }
    }
    throw Error(ErrorKind::Config, "unknown residual policy");
  }

  const TransformerParams &anchor_;
  const ArchConfig &aarch_;
  const TransformerParams &other_;
  const ArchConfig &oarch_;
  const FusionConfig &cfg_;
  TransformerParams out_;
  SiteMaps maps_;
  std::optional<model::ActivationTrace> anchor_trace_, other_trace_;
  std::size_t unconverged_ = 0;
};

} // namespace

AlignResult align_model(const TransformerParams &anchor,
                        const ArchConfig &anchor_arch,
                        const TransformerParams &other,
                        const ArchConfig &other_arch,
                        const FusionConfig &config) {
  config.validate();
  anchor_arch.validate();
  other_arch.validate();
  model::check_params(anchor, anchor_arch);
  model::check_params(other, other_arch);
  if (anchor_arch.num_layers != other_arch.num_layers)
    throw Error(ErrorKind::Shape, "cannot fuse models of different depth (" +
                                      std::to_string(anchor_arch.num_layers) +
                                      " vs " +
                                      std::to_string(other_arch.num_layers) +
                                      " layers)");
  if (anchor_arch.grid_side != other_arch.grid_side ||
      anchor_arch.patch_dim != other_arch.patch_dim ||
      anchor_arch.num_classes != other_arch.num_classes)
    throw Error(ErrorKind::Shape,
                "models disagree on input layout or class count");
  const bool same_width = anchor_arch.hidden_dim == other_arch.hidden_dim &&
                          anchor_arch.intermediate_dim == other_arch.intermediate_dim;
  if (config.solver == SolverKind::Emd && !same_width)
    throw Error(ErrorKind::Heterogeneous,
                "hard alignment needs equal widths; use Sinkhorn for "
                "heterogeneous models");

  Aligner aligner(anchor, anchor_arch, other, other_arch, config);
  const auto graph = flow::build_encoder_flow_graph(anchor_arch);
  auto edge_maps = flow::propagate(
      graph, [&](const FlowNode &node, std::span<const AlignmentMap> in) {
        return aligner.visit(node, in);
      });
  auto result = aligner.finish(std::move(edge_maps));
  model::check_params(result.aligned, anchor_arch);
  return result;
}

TransformerParams average_params(const std::vector<const TransformerParams *> &sets) {
  if (sets.empty())
    throw Error(ErrorKind::InvalidArg, "nothing to average");
  std::vector<std::vector<float>> flats;
  for (auto *p : sets)
    flats.push_back(model::flatten(*p));
  std::vector<float> mean(flats[0].size());
  const double inv = 1.0 / static_cast<double>(sets.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    double s = 0.0;
    for (auto &f : flats)
      s += f[i];
    mean[i] = static_cast<float>(s * inv);
  }
  TransformerParams out = *sets[0];
  std::size_t at = 0;
  out.visit([&](const std::string &, Tensor &t) {
    std::copy(mean.begin() + static_cast<std::ptrdiff_t>(at),
              mean.begin() + static_cast<std::ptrdiff_t>(at + t.size()),
              t.data().begin());
    at += t.size();
  });
  return out;
}

TransformerParams vanilla_fuse(const std::vector<Model> &models) {
  if (models.size() < 2)
    throw Error(ErrorKind::InvalidArg, "fusion needs at least two models");
  for (const auto &m : models) {
    model::check_params(m.params, m.arch);
    if (!(m.arch == models[0].arch))
      throw Error(ErrorKind::Heterogeneous,
                  "vanilla fusion cannot be applied to heterogeneous models "
                  "(architectures differ)");
  }
  std::vector<const TransformerParams *> sets;
  for (const auto &m : models)
    sets.push_back(&m.params);
  return average_params(sets);
}

TransformerParams fuse_models(const std::vector<Model> &models,
                              const FusionConfig &config,
                              std::size_t *unconverged_sites) {
  if (models.size() < 2)
    throw Error(ErrorKind::InvalidArg, "fusion needs at least two models");
  if (config.anchor_index >= models.size())
    throw Error(ErrorKind::InvalidArg, "anchor index " +
                                           std::to_string(config.anchor_index) +
                                           " out of range");
  const Model &anchor = models[config.anchor_index];
  std::vector<TransformerParams> aligned;
  aligned.reserve(models.size() - 1);
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (i == config.anchor_index)
      continue;
    auto res = align_model(anchor.params, anchor.arch, models[i].params,
                           models[i].arch, config);
    if (unconverged_sites)
      *unconverged_sites += res.unconverged_sites;
    aligned.push_back(std::move(res.aligned));
  }
  // Mean is taken in input order, anchor in its own slot.
  std::vector<const TransformerParams *> sets;
  std::size_t next = 0;
  for (std::size_t i = 0; i < models.size(); ++i)
    sets.push_back(i == config.anchor_index ? &anchor.params : &aligned[next++]);
  return average_params(sets);
}

} // namespace otfuse::fusion
