#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "otfuse/model.hpp"
#include "otfuse/ot.hpp"

namespace otfuse::flow {

using ot::AlignmentMap;

enum class NodeKind { Layer, Add, Concat, Source, Sink };

// What a node stands for in the encoder template.
enum class Role {
  Input,
  PatchProj,
  ClsToken,
  PosEmb,
  ClsConcat,
  PosAdd,
  Ln1,
  Query,
  Key,
  Value,
  AttnOut,
  AttnAdd,
  Ln2,
  Fc1,
  Fc2,
  FfnAdd,
  FinalLn,
  Head,
  Output,
};

const char *role_name(Role role);

struct FlowNode {
  NodeKind kind;
  Role role;
  int layer = -1; // encoder block index, -1 outside the blocks
  // Layer nodes without a transport map of their own (layer norms).
  bool passthrough = false;
  std::vector<std::size_t> inputs;   // edge ids; Add: {current, residual}
  std::optional<std::size_t> output; // edge id; empty for Sink
  std::string label() const;
};

struct FlowEdge {
  std::size_t from;
  std::vector<std::size_t> to;
};

class FlowGraph {
public:
  const std::vector<FlowNode> &nodes() const { return nodes_; }
  const std::vector<FlowEdge> &edges() const { return edges_; }

  // Kahn order; throws if the graph has a cycle.
  std::vector<std::size_t> topological_order() const;
  // Throws if any node violates its degree rule.
  void check_degrees() const;

  std::size_t add_node(NodeKind kind, Role role, int layer,
                       std::vector<std::size_t> inputs, bool passthrough = false);

private:
  std::vector<FlowNode> nodes_;
  std::vector<FlowEdge> edges_;
};

FlowGraph build_encoder_flow_graph(const model::ArchConfig &arch);

enum class ResidualPolicy { Averaging, WeightedScalar, WeightedMatrix, Identity, ResidualOnly };

const char *policy_name(ResidualPolicy policy);
ResidualPolicy parse_policy(const std::string &name);

// Per-anchor-neuron weight of the residual branch, each in [0, 1].
struct GammaVector {
  std::vector<double> gamma;
};

// Activations are neurons x samples. Both zero => 0.5.
GammaVector gamma_scalar(const Tensor &f_current, const Tensor &f_residual);
GammaVector gamma_matrix(const Tensor &f_current, const Tensor &f_residual);
GammaVector gamma_constant(std::size_t n, double value);

// T_cur·diag(1-γ) + T_res·diag(γ), columns renormalized to sum 1. γ is
// indexed by anchor neurons, i.e. the map's columns.
AlignmentMap combine_residual_maps(const AlignmentMap &t_current,
                                   const AlignmentMap &t_residual,
                                   const GammaVector &gamma);

// Handler receives a node and the maps on its incoming edges (in input
// order) and returns the map for its outgoing edge; Sink handlers return
// nullopt.
using NodeHandler = std::function<std::optional<AlignmentMap>(
    const FlowNode &, std::span<const AlignmentMap>)>;

// Visits nodes in topological order; returns one map per edge.
std::vector<AlignmentMap> propagate(const FlowGraph &graph,
                                    const NodeHandler &handler);

// Graphviz rendering. When maps are given, each edge is labelled with its
// map's shape and kind, and the map entries are appended as comments.
std::string to_dot(const FlowGraph &graph,
                   const std::vector<AlignmentMap> *edge_maps = nullptr);

} // namespace otfuse::flow
