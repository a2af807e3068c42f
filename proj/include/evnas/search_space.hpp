#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evnas/matrix.hpp"
#include "evnas/rng.hpp"

namespace evnas {

// ---------------------------------------------------------------------------
// Operation space
// ---------------------------------------------------------------------------

enum class OpKind : std::uint8_t {
  sep_conv_3x3,
  sep_conv_5x5,
  dil_conv_3x3,
  dil_conv_5x5,
  max_pool_3x3,
  avg_pool_3x3,
  skip_connect,
  zero,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::sep_conv_3x3: return "sep_conv_3x3";
    case OpKind::sep_conv_5x5: return "sep_conv_5x5";
    case OpKind::dil_conv_3x3: return "dil_conv_3x3";
    case OpKind::dil_conv_5x5: return "dil_conv_5x5";
    case OpKind::max_pool_3x3: return "max_pool_3x3";
    case OpKind::avg_pool_3x3: return "avg_pool_3x3";
    case OpKind::skip_connect: return "skip_connect";
    case OpKind::zero: return "zero";
  }
  throw std::invalid_argument("op_name: unknown OpKind");
}

inline OpKind op_from_name(const std::string& name) {
  static constexpr OpKind all[] = {OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3,
                                   OpKind::dil_conv_5x5, OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
                                   OpKind::skip_connect, OpKind::zero};
  for (OpKind k : all)
    if (name == op_name(k)) return k;
  throw std::invalid_argument("unknown operation name: '" + name + "'");
}

/// Ordered operation list defining the columns of every parameter matrix.
/// Column order is canonical and fixed for the lifetime of a search.
struct OperationSpace {
  std::vector<OpKind> ops;

  static OperationSpace canonical() {
    return OperationSpace{{OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3, OpKind::dil_conv_5x5,
                           OpKind::max_pool_3x3, OpKind::avg_pool_3x3, OpKind::skip_connect, OpKind::zero}};
  }

  int size() const { return static_cast<int>(ops.size()); }

  int index_of(OpKind k) const {
    for (int i = 0; i < size(); ++i)
      if (ops[i] == k) return i;
    return -1;
  }

  int zero_index() const { return index_of(OpKind::zero); }

  void validate() const {
    if (size() < 2) throw std::invalid_argument("OperationSpace: need at least 2 operations");
    int zeros = 0;
    for (OpKind k : ops) zeros += (k == OpKind::zero);
    if (zeros != 1) throw std::invalid_argument("OperationSpace: exactly one 'zero' operation required");
    for (int i = 0; i < size(); ++i)
      for (int j = i + 1; j < size(); ++j)
        if (ops[i] == ops[j]) throw std::invalid_argument("OperationSpace: duplicate operation");
  }

  friend bool operator==(const OperationSpace&, const OperationSpace&) = default;
};

// ---------------------------------------------------------------------------
// Cell topology
// ---------------------------------------------------------------------------

/// Directed edge from a cell node to an intermediate node. Node indexing:
/// input nodes are 0..num_input_nodes-1, intermediate node t is
/// num_input_nodes + t.
struct Edge {
  int src;     // source node index
  int target;  // intermediate node index (0-based among intermediates)

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Fixed two-input DARTS-style cell wiring. Edge order is canonical: sorted
/// by target node, then source node; all matrices index rows by this order.
struct CellTopology {
  int num_input_nodes = 2;
  int num_intermediate_nodes = 4;
  std::vector<Edge> edges;

  static CellTopology make(int inputs = 2, int intermediates = 4) {
    if (inputs < 1 || intermediates < 1) throw std::invalid_argument("CellTopology: sizes must be positive");
    CellTopology t;
    t.num_input_nodes = inputs;
    t.num_intermediate_nodes = intermediates;
    for (int node = 0; node < intermediates; ++node)
      for (int src = 0; src < inputs + node; ++src) t.edges.push_back({src, node});
    return t;
  }

  int num_edges() const { return static_cast<int>(edges.size()); }
  int num_nodes() const { return num_input_nodes + num_intermediate_nodes; }

  /// Candidate incoming edges of intermediate node t occupy the contiguous
  /// index range [first, first + count).
  std::pair<int, int> candidate_range(int node) const {
    int first = 0;
    for (int t = 0; t < node; ++t) first += num_input_nodes + t;
    return {first, num_input_nodes + node};
  }

  int edge_index(int src, int target) const {
    auto [first, count] = candidate_range(target);
    if (src < 0 || src >= count) throw std::out_of_range("edge_index: no such edge");
    return first + src;
  }

  friend bool operator==(const CellTopology&, const CellTopology&) = default;
};

// ---------------------------------------------------------------------------
// Parameter and genotype types
// ---------------------------------------------------------------------------

/// One individual's genotype: real-valued edge x operation weight matrices
/// for the normal and reduction cells.
struct ArchParam {
  Matrix normal;
  Matrix reduce;

  friend bool operator==(const ArchParam&, const ArchParam&) = default;
};

/// Discrete phenotype: per intermediate node, exactly two
/// (predecessor, operation) choices, stored sorted by predecessor.
struct Genotype {
  struct Choice {
    int pred = 0;
    OpKind op = OpKind::zero;
    friend bool operator==(const Choice&, const Choice&) = default;
  };
  using NodeChoices = std::array<Choice, 2>;

  std::vector<NodeChoices> normal;
  std::vector<NodeChoices> reduce;

  friend bool operator==(const Genotype&, const Genotype&) = default;
};

/// Binary-structured parameter: constant k on the genotype's selected
/// (edge, op) cells and 0 elsewhere.
struct DecodedParam {
  Matrix normal;
  Matrix reduce;
  float k = 1.0f;

  friend bool operator==(const DecodedParam&, const DecodedParam&) = default;
};

/// Read-only view of the two per-cell matrices; the supernet forward pass
/// accepts either raw or decoded parameters through this.
struct CellParams {
  const Matrix* normal = nullptr;
  const Matrix* reduce = nullptr;
};

inline CellParams view(const ArchParam& a) { return {&a.normal, &a.reduce}; }
inline CellParams view(const DecodedParam& d) { return {&d.normal, &d.reduce}; }

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Fresh architecture parameter with every entry drawn uniform on [0, 1).
/// Sampling order is row-major, normal matrix first.
inline ArchParam init_arch_param(const CellTopology& topo, const OperationSpace& ops, Rng& rng) {
  ArchParam a;
  a.normal = Matrix(topo.num_edges(), ops.size());
  a.reduce = Matrix(topo.num_edges(), ops.size());
  for (float& v : a.normal.data) v = static_cast<float>(rng.uniform());
  for (float& v : a.reduce.data) v = static_cast<float>(rng.uniform());
  return a;
}

/// Numerically stable softmax of one edge row, computed in double.
inline std::vector<double> softmax_row(std::span<const float> row) {
  std::vector<double> w(row.size());
  double m = -std::numeric_limits<double>::infinity();
  for (float v : row) m = std::max(m, static_cast<double>(v));
  double sum = 0.0;
  for (size_t i = 0; i < row.size(); ++i) {
    w[i] = std::exp(static_cast<double>(row[i]) - m);
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

namespace detail {

/// Per-cell discretization: rank each candidate edge by its best non-zero
/// softmax weight, keep the top two per intermediate node. Ties resolve to
/// the lower canonical edge index, then the lower operation column.
inline std::vector<Genotype::NodeChoices> discretize_cell(const Matrix& alpha, const CellTopology& topo,
                                                          const OperationSpace& ops) {
  if (alpha.rows != topo.num_edges() || alpha.cols != ops.size())
    throw std::invalid_argument("discretize_cell: matrix shape does not match topology/operation space");
  const int zero_col = ops.zero_index();
  std::vector<Genotype::NodeChoices> cell;
  for (int node = 0; node < topo.num_intermediate_nodes; ++node) {
    auto [first, count] = topo.candidate_range(node);
    if (count < 2) throw std::invalid_argument("discretize_cell: intermediate node has fewer than 2 candidate edges");

    struct Scored {
      double weight;
      int edge;
      int op_col;
    };
    std::vector<Scored> scored;
    scored.reserve(count);
    for (int e = first; e < first + count; ++e) {
      const auto w = softmax_row(alpha.row(e));
      int best_col = -1;
      double best_w = -1.0;
      for (int c = 0; c < ops.size(); ++c) {
        if (c == zero_col) continue;
        if (w[c] > best_w) {  // strict: ties keep the lower column
          best_w = w[c];
          best_col = c;
        }
      }
      scored.push_back({best_w, e, best_col});
    }
    std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      return a.edge < b.edge;
    });

    std::array<const Scored*, 2> top = {&scored[0], &scored[1]};
    if (top[0]->edge > top[1]->edge) std::swap(top[0], top[1]);  // store sorted by predecessor
    Genotype::NodeChoices choices;
    for (int i = 0; i < 2; ++i)
      choices[i] = {topo.edges[top[i]->edge].src, ops.ops[top[i]->op_col]};
    cell.push_back(choices);
  }
  return cell;
}

}  // namespace detail

/// Derive the discrete architecture described by alpha.
inline Genotype derive_genotype(const ArchParam& alpha, const CellTopology& topo, const OperationSpace& ops) {
  if (!alpha.normal.all_finite() || !alpha.reduce.all_finite())
    throw std::invalid_argument("derive_genotype: non-finite architecture parameter");
  Genotype g;
  g.normal = detail::discretize_cell(alpha.normal, topo, ops);
  g.reduce = detail::discretize_cell(alpha.reduce, topo, ops);
  return g;
}

/// Place constant k on a genotype's selected (edge, op) cells, 0 elsewhere.
inline DecodedParam genotype_to_decoded(const Genotype& g, float k, const CellTopology& topo,
                                        const OperationSpace& ops) {
  if (!(k > 0.0f)) throw std::invalid_argument("decode: k must be positive");
  DecodedParam d;
  d.k = k;
  d.normal = Matrix(topo.num_edges(), ops.size());
  d.reduce = Matrix(topo.num_edges(), ops.size());
  auto fill = [&](const std::vector<Genotype::NodeChoices>& cell, Matrix& m) {
    if (static_cast<int>(cell.size()) != topo.num_intermediate_nodes)
      throw std::invalid_argument("decode: genotype does not match topology");
    for (int node = 0; node < topo.num_intermediate_nodes; ++node)
      for (const auto& choice : cell[node]) {
        const int col = ops.index_of(choice.op);
        if (col < 0) throw std::invalid_argument("decode: genotype operation not in operation space");
        m.at(topo.edge_index(choice.pred, node), col) = k;
      }
  };
  fill(g.normal, d.normal);
  fill(g.reduce, d.reduce);
  return d;
}

/// Eq-style decode: discretize alpha, then rewrite as a k/0 matrix pair.
inline DecodedParam decode(const ArchParam& alpha, float k, const CellTopology& topo, const OperationSpace& ops) {
  return genotype_to_decoded(derive_genotype(alpha, topo, ops), k, topo, ops);
}

/// Structural validation used by parsers and the eval tool.
inline void validate_genotype(const Genotype& g, const CellTopology& topo, const OperationSpace& ops) {
  auto check_cell = [&](const std::vector<Genotype::NodeChoices>& cell, const char* which) {
    const std::string where = std::string("genotype ") + which + " cell: ";
    if (static_cast<int>(cell.size()) != topo.num_intermediate_nodes)
      throw std::invalid_argument(where + "expected " + std::to_string(topo.num_intermediate_nodes) +
                                  " intermediate nodes, got " + std::to_string(cell.size()));
    for (int node = 0; node < topo.num_intermediate_nodes; ++node) {
      const auto& c = cell[node];
      if (c[0].pred == c[1].pred)
        throw std::invalid_argument(where + "node " + std::to_string(node) + " has duplicate predecessors");
      for (const auto& choice : c) {
        if (choice.pred < 0 || choice.pred >= topo.num_input_nodes + node)
          throw std::invalid_argument(where + "node " + std::to_string(node) + " has out-of-range predecessor " +
                                      std::to_string(choice.pred));
        if (choice.op == OpKind::zero)
          throw std::invalid_argument(where + "node " + std::to_string(node) + " selects the zero operation");
        if (ops.index_of(choice.op) < 0)
          throw std::invalid_argument(where + "operation not in operation space");
      }
    }
  };
  check_cell(g.normal, "normal");
  check_cell(g.reduce, "reduce");
}

}  // namespace evnas
