#include "otfuse/flowgraph.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>
#include <iomanip>
#include <sstream>

namespace otfuse::flow {

const char *role_name(Role role) {
  switch (role) {
  case Role::Input: return "input";
  case Role::PatchProj: return "patch_proj";
  case Role::ClsToken: return "cls_token";
  case Role::PosEmb: return "pos_emb";
  case Role::ClsConcat: return "concat_cls";
  case Role::PosAdd: return "add_pos";
  case Role::Ln1: return "ln1";
  case Role::Query: return "q";
  case Role::Key: return "k";
  case Role::Value: return "v";
  case Role::AttnOut: return "attn_out";
  case Role::AttnAdd: return "add_attn";
  case Role::Ln2: return "ln2";
  case Role::Fc1: return "fc1";
  case Role::Fc2: return "fc2";
  case Role::FfnAdd: return "add_ffn";
  case Role::FinalLn: return "final_ln";
  case Role::Head: return "head";
  case Role::Output: return "output";
  }
  return "?";
}

std::string FlowNode::label() const {
  std::string s = role_name(role);
  if (layer >= 0)
    s = "L" + std::to_string(layer) + "." + s;
  return s;
}

std::size_t FlowGraph::add_node(NodeKind kind, Role role, int layer,
                                std::vector<std::size_t> inputs,
                                bool passthrough) {
  const std::size_t id = nodes_.size();
  for (auto e : inputs)
    edges_.at(e).to.push_back(id);
  FlowNode node{kind, role, layer, passthrough, std::move(inputs), std::nullopt};
  if (kind != NodeKind::Sink) {
    node.output = edges_.size();
    edges_.push_back(FlowEdge{id, {}});
  }
  nodes_.push_back(std::move(node));
  return id;
}

std::vector<std::size_t> FlowGraph::topological_order() const {
  std::vector<std::size_t> pending(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    pending[i] = nodes_[i].inputs.size();
  // Lowest ready id first, so construction order is kept where possible.
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>>
      ready;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (pending[i] == 0)
      ready.push(i);
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const std::size_t n = ready.top();
    ready.pop();
    order.push_back(n);
    if (!nodes_[n].output)
      continue;
    for (auto consumer : edges_[*nodes_[n].output].to) {
      // A node may consume the same edge twice; count each occurrence.
      if (--pending[consumer] == 0)
        ready.push(consumer);
    }
  }
  if (order.size() != nodes_.size())
    throw Error(ErrorKind::InvalidArg, "flow graph contains a cycle");
  return order;
}

void FlowGraph::check_degrees() const {
  for (const auto &n : nodes_) {
    const std::size_t in = n.inputs.size();
    const bool has_out = n.output.has_value();
    bool ok = true;
    switch (n.kind) {
    case NodeKind::Layer:
      ok = in == 1 && has_out;
      break;
    case NodeKind::Add:
    case NodeKind::Concat:
      ok = in >= 2 && has_out;
      break;
    case NodeKind::Source:
      ok = in == 0 && has_out;
      break;
    case NodeKind::Sink:
      ok = in == 1 && !has_out;
      break;
    }
    if (!ok)
      throw Error(ErrorKind::InvalidArg,
                  "flow node " + n.label() + " violates its degree rule");
  }
}

FlowGraph build_encoder_flow_graph(const model::ArchConfig &arch) {
  FlowGraph g;
  auto out = [&](std::size_t node) { return *g.nodes()[node].output; };

  const auto input = g.add_node(NodeKind::Source, Role::Input, -1, {});
  const auto patch = g.add_node(NodeKind::Layer, Role::PatchProj, -1, {out(input)});
  const auto cls = g.add_node(NodeKind::Source, Role::ClsToken, -1, {});
  const auto concat =
      g.add_node(NodeKind::Concat, Role::ClsConcat, -1, {out(patch), out(cls)});
  const auto pos = g.add_node(NodeKind::Source, Role::PosEmb, -1, {});
  std::size_t stream =
      g.add_node(NodeKind::Add, Role::PosAdd, -1, {out(concat), out(pos)});

  for (std::size_t l = 0; l < arch.num_layers; ++l) {
    const int li = static_cast<int>(l);
    const auto ln1 = g.add_node(NodeKind::Layer, Role::Ln1, li, {out(stream)}, true);
    g.add_node(NodeKind::Layer, Role::Query, li, {out(ln1)});
    g.add_node(NodeKind::Layer, Role::Key, li, {out(ln1)});
    const auto v = g.add_node(NodeKind::Layer, Role::Value, li, {out(ln1)});
    const auto o = g.add_node(NodeKind::Layer, Role::AttnOut, li, {out(v)});
    const auto add1 =
        g.add_node(NodeKind::Add, Role::AttnAdd, li, {out(o), out(stream)});
    const auto ln2 = g.add_node(NodeKind::Layer, Role::Ln2, li, {out(add1)}, true);
    const auto fc1 = g.add_node(NodeKind::Layer, Role::Fc1, li, {out(ln2)});
    const auto fc2 = g.add_node(NodeKind::Layer, Role::Fc2, li, {out(fc1)});
    stream = g.add_node(NodeKind::Add, Role::FfnAdd, li, {out(fc2), out(add1)});
  }
  const auto fin =
      g.add_node(NodeKind::Layer, Role::FinalLn, -1, {out(stream)}, true);
  const auto head = g.add_node(NodeKind::Layer, Role::Head, -1, {out(fin)});
  g.add_node(NodeKind::Sink, Role::Output, -1, {out(head)});
  return g;
}

const char *policy_name(ResidualPolicy policy) {
  switch (policy) {
  case ResidualPolicy::Averaging: return "avg";
  case ResidualPolicy::WeightedScalar: return "scalar";
  case ResidualPolicy::WeightedMatrix: return "matrix";
  case ResidualPolicy::Identity: return "identity";
  case ResidualPolicy::ResidualOnly: return "residual";
  }
  return "?";
}

ResidualPolicy parse_policy(const std::string &name) {
  for (auto p : {ResidualPolicy::Averaging, ResidualPolicy::WeightedScalar,
                 ResidualPolicy::WeightedMatrix, ResidualPolicy::Identity,
                 ResidualPolicy::ResidualOnly})
    if (name == policy_name(p))
      return p;
  throw Error(ErrorKind::Config, "unknown residual policy '" + name + "'");
}

namespace {

void check_activation_pair(const Tensor &a, const Tensor &b) {
  if (a.rank() != 2 || a.shape() != b.shape())
    throw Error(ErrorKind::Shape, "residual activations differ: " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
}

double ratio_or_half(double res, double cur) {
  const double denom = cur + res;
  return denom > 0.0 ? res / denom : 0.5;
}

} // namespace

GammaVector gamma_scalar(const Tensor &f_current, const Tensor &f_residual) {
  check_activation_pair(f_current, f_residual);
  double cur = 0.0, res = 0.0;
  for (std::size_t i = 0; i < f_current.size(); ++i) {
    cur += std::abs(static_cast<double>(f_current[i]));
    res += std::abs(static_cast<double>(f_residual[i]));
  }
  return gamma_constant(f_current.rows(), ratio_or_half(res, cur));
}

GammaVector gamma_matrix(const Tensor &f_current, const Tensor &f_residual) {
  check_activation_pair(f_current, f_residual);
  GammaVector g;
  g.gamma.resize(f_current.rows());
  for (std::size_t i = 0; i < f_current.rows(); ++i) {
    double cur = 0.0, res = 0.0;
    for (std::size_t s = 0; s < f_current.cols(); ++s) {
      cur += std::abs(static_cast<double>(f_current(i, s)));
      res += std::abs(static_cast<double>(f_residual(i, s)));
    }
    g.gamma[i] = ratio_or_half(res, cur);
  }
  return g;
}

GammaVector gamma_constant(std::size_t n, double value) {
  if (!(value >= 0.0 && value <= 1.0))
    throw Error(ErrorKind::InvalidArg, "gamma must lie in [0, 1]");
  return GammaVector{std::vector<double>(n, value)};
}

AlignmentMap combine_residual_maps(const AlignmentMap &t_current,
                                   const AlignmentMap &t_residual,
                                   const GammaVector &gamma) {
  if (t_current.m.shape() != t_residual.m.shape())
    throw Error(ErrorKind::Shape, "residual maps differ: " +
                                      shape_str(t_current.m.shape()) + " vs " +
                                      shape_str(t_residual.m.shape()));
  const std::size_t n = t_current.m.rows(), m = t_current.m.cols();
  if (gamma.gamma.size() != m)
    throw Error(ErrorKind::Shape, "gamma length " +
                                      std::to_string(gamma.gamma.size()) +
                                      " does not match map width " +
                                      std::to_string(m));
  AlignmentMap out{Matrix({n, m})};
  for (std::size_t j = 0; j < m; ++j) {
    const double g = gamma.gamma[j];
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = t_current.m(i, j) * (1.0 - g) + t_residual.m(i, j) * g;
      out.m(i, j) = v;
      sum += v;
    }
    if (!(sum > 0.0))
      throw Error(ErrorKind::Numeric, "combined map column has no mass");
    if (sum != 1.0)
      for (std::size_t i = 0; i < n; ++i)
        out.m(i, j) /= sum;
  }
  return out;
}

std::vector<AlignmentMap> propagate(const FlowGraph &graph,
                                    const NodeHandler &handler) {
  std::vector<std::optional<AlignmentMap>> maps(graph.edges().size());
  std::vector<AlignmentMap> incoming;
  for (auto id : graph.topological_order()) {
    const FlowNode &node = graph.nodes()[id];
    incoming.clear();
    for (auto e : node.inputs)
      incoming.push_back(*maps[e]);
    auto result = handler(node, incoming);
    if (node.output) {
      if (!result)
        throw Error(ErrorKind::InvalidArg,
                    "handler produced no map for " + node.label());
      maps[*node.output] = std::move(*result);
    }
  }
  std::vector<AlignmentMap> out;
  out.reserve(maps.size());
  for (auto &m : maps)
    out.push_back(std::move(*m));
  return out;
}

std::string to_dot(const FlowGraph &graph,
                   const std::vector<AlignmentMap> *edge_maps) {
  std::ostringstream os;
  os << "digraph flow {\n  rankdir=TB;\n";
  for (std::size_t i = 0; i < graph.nodes().size(); ++i) {
    const auto &n = graph.nodes()[i];
    const char *shape = "box";
    switch (n.kind) {
    case NodeKind::Add: shape = "circle"; break;
    case NodeKind::Concat: shape = "diamond"; break;
    case NodeKind::Source: shape = "ellipse"; break;
    case NodeKind::Sink: shape = "doublecircle"; break;
    case NodeKind::Layer: shape = n.passthrough ? "box,style=dashed" : "box"; break;
    }
    os << "  n" << i << " [label=\"" << n.label() << "\", shape=" << shape
       << "];\n";
  }
  for (std::size_t e = 0; e < graph.edges().size(); ++e) {
    const auto &edge = graph.edges()[e];
    for (auto to : edge.to) {
      os << "  n" << edge.from << " -> n" << to;
      if (edge_maps) {
        const auto &m = (*edge_maps)[e];
        os << " [label=\"e" << e << " " << m.m.rows() << "x" << m.m.cols()
           << (m.is_permutation() ? " perm" : " soft") << "\"]";
      }
      os << ";\n";
    }
  }
  if (edge_maps) {
    os << std::setprecision(6);
    for (std::size_t e = 0; e < edge_maps->size(); ++e) {
      const auto &m = (*edge_maps)[e].m;
      os << "  // e" << e << " " << m.rows() << "x" << m.cols() << "\n";
      for (std::size_t i = 0; i < m.rows(); ++i) {
        os << "  //";
        for (std::size_t j = 0; j < m.cols(); ++j)
          os << ' ' << m(i, j);
        os << "\n";
      }
    }
  }
  os << "}\n";
  return os.str();
}

} // namespace otfuse::flow
