#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "evnas/genotype_io.hpp"
#include "evnas/search_space.hpp"

using namespace evnas;

namespace {

// Independent discretization oracle: enumerates every (edge, op) pair per
// node, normalizes exponentials directly, and ranks without reusing any of
// the library's softmax/selection code.
Genotype oracle_genotype(const ArchParam& alpha, const CellTopology& topo, const OperationSpace& ops) {
  auto discretize = [&](const Matrix& m) {
    std::vector<Genotype::NodeChoices> out;
    for (int node = 0; node < topo.num_intermediate_nodes; ++node) {
      struct Cand {
        double weight;
        int edge;
        int col;
      };
      std::vector<Cand> cands;
      for (int e = 0; e < topo.num_edges(); ++e) {
        if (topo.edges[e].target != node) continue;
        double denom = 0.0;
        for (int c = 0; c < ops.size(); ++c) denom += std::exp(static_cast<double>(m.at(e, c)));
        double best_w = -1.0;
        int best_c = -1;
        for (int c = 0; c < ops.size(); ++c) {
          if (ops.ops[static_cast<size_t>(c)] == OpKind::zero) continue;
          const double w = std::exp(static_cast<double>(m.at(e, c))) / denom;
          if (w > best_w) {
            best_w = w;
            best_c = c;
          }
        }
        cands.push_back({best_w, e, best_c});
      }
      std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.weight != b.weight) return a.weight > b.weight;
        return a.edge < b.edge;
      });
      Genotype::NodeChoices chosen;
      const Cand* first = &cands[0];
      const Cand* second = &cands[1];
      if (first->edge > second->edge) std::swap(first, second);
      chosen[0] = {topo.edges[first->edge].src, ops.ops[static_cast<size_t>(first->col)]};
      chosen[1] = {topo.edges[second->edge].src, ops.ops[static_cast<size_t>(second->col)]};
      out.push_back(chosen);
    }
    return out;
  };
  Genotype g;
  g.normal = discretize(alpha.normal);
  g.reduce = discretize(alpha.reduce);
  return g;
}

int count_entries_equal(const Matrix& m, float v) {
  int n = 0;
  for (float x : m.data) n += (x == v);
  return n;
}

}  // namespace

TEST_CASE("canonical topology has 14 edges ordered by (target, source)") {
  const auto topo = CellTopology::make();
  CHECK(topo.num_edges() == 14);
  for (int node = 0; node < 4; ++node) {
    const auto [first, count] = topo.candidate_range(node);
    CHECK(count == 2 + node);
    for (int e = first; e < first + count; ++e) {
      CHECK(topo.edges[e].target == node);
      CHECK(topo.edges[e].src == e - first);
    }
  }
  CHECK(topo.edge_index(1, 2) == topo.candidate_range(2).first + 1);
}

TEST_CASE("operation space validation") {
  auto ops = OperationSpace::canonical();
  CHECK(ops.size() == 8);
  CHECK_NOTHROW(ops.validate());
  CHECK(ops.zero_index() == 7);

  OperationSpace no_zero{{OpKind::sep_conv_3x3, OpKind::max_pool_3x3}};
  CHECK_THROWS_AS(no_zero.validate(), std::invalid_argument);
  OperationSpace tiny{{OpKind::zero}};
  CHECK_THROWS_AS(tiny.validate(), std::invalid_argument);
  OperationSpace dup{{OpKind::zero, OpKind::skip_connect, OpKind::skip_connect}};
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
}

TEST_CASE("init_arch_param: shape, range, determinism") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(7);
  const ArchParam a = init_arch_param(topo, ops, rng);
  CHECK(a.normal.rows == 14);
  CHECK(a.normal.cols == 8);
  CHECK(a.reduce.rows == 14);
  for (const Matrix* m : {&a.normal, &a.reduce})
    for (float v : m->data) {
      CHECK(v >= 0.0f);
      CHECK(v < 1.0f);
    }

  Rng rng2(7);
  const ArchParam b = init_arch_param(topo, ops, rng2);
  CHECK(a == b);
}

TEST_CASE("init_arch_param: sample mean approaches 1/2") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(123);
  double sum = 0.0;
  long count = 0;
  while (count < 100000) {
    const ArchParam a = init_arch_param(topo, ops, rng);
    for (const Matrix* m : {&a.normal, &a.reduce})
      for (float v : m->data) {
        sum += v;
        ++count;
      }
  }
  CHECK(std::abs(sum / count - 0.5) < 0.01);
}

TEST_CASE("softmax rows are normalized and strictly positive") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> row(8);
    for (float& v : row) v = static_cast<float>(rng.uniform(-5.0, 5.0));
    const auto w = softmax_row(row);
    double sum = 0.0;
    for (double x : w) {
      CHECK(x > 0.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("derive_genotype picks dominant ops on the highest-scoring edges") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  ArchParam a{Matrix(14, 8), Matrix(14, 8)};

  // Per node, mark two designated edges with a strongly dominant op (10) and
  // give the remaining edges a weaker dominant op (5). Designated edges are
  // chosen away from the tie-break default to prove score-based ranking.
  std::vector<std::pair<int, int>> designated;  // (edge, op col)
  for (int node = 0; node < 4; ++node) {
    const auto [first, count] = topo.candidate_range(node);
    const int e1 = first + count - 1, e2 = first + count - 2;
    for (int e = first; e < first + count; ++e) {
      const bool strong = (e == e1 || e == e2);
      const int col = (e * 3) % 7;  // any non-zero column
      a.normal.at(e, col) = strong ? 10.0f : 5.0f;
      a.reduce.at(e, col) = strong ? 10.0f : 5.0f;
      if (strong) designated.push_back({e, col});
    }
  }
  const Genotype g = derive_genotype(a, topo, ops);
  for (int node = 0; node < 4; ++node) {
    const auto [first, count] = topo.candidate_range(node);
    for (const auto* cell : {&g.normal, &g.reduce}) {
      const auto& choices = (*cell)[node];
      CHECK(choices[0].pred == topo.edges[first + count - 2].src);
      CHECK(choices[1].pred == topo.edges[first + count - 1].src);
      CHECK(choices[0].op == ops.ops[((first + count - 2) * 3) % 7]);
      CHECK(choices[1].op == ops.ops[((first + count - 1) * 3) % 7]);
    }
  }
}

TEST_CASE("derive_genotype tie-break: lowest edge index, lowest op column") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  ArchParam a{Matrix(14, 8, 0.7f), Matrix(14, 8, 0.7f)};
  const Genotype g = derive_genotype(a, topo, ops);
  for (const auto* cell : {&g.normal, &g.reduce})
    for (int node = 0; node < 4; ++node) {
      CHECK((*cell)[node][0].pred == 0);
      CHECK((*cell)[node][1].pred == 1);
      CHECK((*cell)[node][0].op == ops.ops[0]);
      CHECK((*cell)[node][1].op == ops.ops[0]);
    }
}

TEST_CASE("derive_genotype matches the brute-force oracle on random inputs") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    const ArchParam a = init_arch_param(topo, ops, rng);
    CHECK(derive_genotype(a, topo, ops) == oracle_genotype(a, topo, ops));
  }
}

TEST_CASE("derive_genotype error paths") {
  const auto ops = OperationSpace::canonical();
  const auto topo1 = CellTopology::make(1, 2);  // node 0 has a single candidate edge
  ArchParam a{Matrix(topo1.num_edges(), 8, 0.5f), Matrix(topo1.num_edges(), 8, 0.5f)};
  CHECK_THROWS_AS(derive_genotype(a, topo1, ops), std::invalid_argument);

  const auto topo = CellTopology::make();
  ArchParam bad{Matrix(14, 8), Matrix(14, 8)};
  bad.normal.at(3, 3) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(derive_genotype(bad, topo, ops), std::invalid_argument);
}

TEST_CASE("derive_genotype is invariant under per-row constant shifts") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const ArchParam a = init_arch_param(topo, ops, rng);
    ArchParam shifted = a;
    const int row = static_cast<int>(rng.uniform_below(14));
    const float c = static_cast<float>(rng.uniform(-3.0, 3.0));
    for (float& v : shifted.normal.row(row)) v += c;
    CHECK(derive_genotype(a, topo, ops) == derive_genotype(shifted, topo, ops));
  }
}

TEST_CASE("derive_genotype never selects the zero operation") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    ArchParam a = init_arch_param(topo, ops, rng);
    // Bias the zero column heavily; it must still never be selected.
    for (Matrix* m : {&a.normal, &a.reduce})
      for (int r = 0; r < m->rows; ++r) m->at(r, ops.zero_index()) = 20.0f;
    const Genotype g = derive_genotype(a, topo, ops);
    for (const auto* cell : {&g.normal, &g.reduce})
      for (const auto& node : *cell)
        for (const auto& choice : node) CHECK(choice.op != OpKind::zero);
  }
}

TEST_CASE("decode: support structure and k invariance") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(31337);
  for (int trial = 0; trial < 100; ++trial) {
    const ArchParam a = init_arch_param(topo, ops, rng);
    const DecodedParam d1 = decode(a, 1.0f, topo, ops);
    for (const Matrix* m : {&d1.normal, &d1.reduce}) {
      CHECK(count_entries_equal(*m, 1.0f) == 8);
      CHECK(count_entries_equal(*m, 0.0f) == 104);
    }
    // Per intermediate node, exactly two supported incoming edges.
    for (const Matrix* m : {&d1.normal, &d1.reduce})
      for (int node = 0; node < 4; ++node) {
        const auto [first, count] = topo.candidate_range(node);
        int supported_edges = 0;
        for (int e = first; e < first + count; ++e) {
          int nonzero = 0;
          for (float v : m->row(e)) nonzero += (v != 0.0f);
          CHECK(nonzero <= 1);
          supported_edges += (nonzero == 1);
        }
        CHECK(supported_edges == 2);
      }

    const DecodedParam d2 = decode(a, 2.0f, topo, ops);
    for (int m = 0; m < 2; ++m) {
      const Matrix& m1 = m == 0 ? d1.normal : d1.reduce;
      const Matrix& m2 = m == 0 ? d2.normal : d2.reduce;
      for (size_t i = 0; i < m1.data.size(); ++i) CHECK((m1.data[i] != 0.0f) == (m2.data[i] != 0.0f));
    }
  }
  CHECK_THROWS_AS(decode(init_arch_param(topo, ops, rng), 0.0f, topo, ops), std::invalid_argument);
}

TEST_CASE("decoding a decoded parameter reproduces the same genotype") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(4242);
  for (int trial = 0; trial < 1000; ++trial) {
    const ArchParam a = init_arch_param(topo, ops, rng);
    const Genotype g = derive_genotype(a, topo, ops);
    const DecodedParam d = decode(a, 1.0f, topo, ops);
    const ArchParam as_alpha{d.normal, d.reduce};
    CHECK(derive_genotype(as_alpha, topo, ops) == g);
  }
}

TEST_CASE("genotype JSON round-trips") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Genotype g = derive_genotype(init_arch_param(topo, ops, rng), topo, ops);
    const ParsedGenotype back = genotype_from_json(genotype_to_json(g, topo));
    CHECK(back.genotype == g);
    CHECK(back.topology == topo);
  }
}

TEST_CASE("genotype JSON error reporting") {
  CHECK_THROWS_WITH_AS(genotype_from_json(R"({"reduce": [], "topology": {}})"), doctest::Contains("missing field 'normal'"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(genotype_from_json(R"({"normal": [], "reduce": []})"),
                       doctest::Contains("missing field 'topology'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(genotype_from_json(R"({"normal": [], "reduce": [], "topology": {"inputs": 2}})"),
                       doctest::Contains("missing field 'topology.intermediates'"), std::invalid_argument);
  // Malformed JSON reports a parse position.
  CHECK_THROWS_WITH_AS(genotype_from_json("{\"normal\": [["), doctest::Contains("parse error"), std::invalid_argument);

  // Unknown op name and structural violations.
  const auto topo = CellTopology::make(2, 1);
  Genotype g;
  g.normal = {{Genotype::Choice{0, OpKind::sep_conv_3x3}, Genotype::Choice{1, OpKind::max_pool_3x3}}};
  g.reduce = g.normal;
  std::string text = genotype_to_json(g, topo);
  const auto pos = text.find("sep_conv_3x3");
  std::string bad = text;
  bad.replace(pos, 12, "sep_conv_9x9");
  CHECK_THROWS_WITH_AS(genotype_from_json(bad), doctest::Contains("unknown operation"), std::invalid_argument);
  std::string zero = text;
  zero.replace(pos, 12, "zero");
  CHECK_THROWS_WITH_AS(genotype_from_json(zero), doctest::Contains("zero"), std::invalid_argument);
}

TEST_CASE("hand-written genotype JSON with conv edges parses to four intermediate nodes") {
  const std::string text = R"({
    "normal": [[0, "sep_conv_3x3"], [1, "sep_conv_3x3"],
               [0, "sep_conv_3x3"], [1, "dil_conv_5x5"],
               [1, "sep_conv_5x5"], [2, "dil_conv_3x3"],
               [0, "sep_conv_3x3"], [4, "dil_conv_3x3"]],
    "reduce": [[0, "max_pool_3x3"], [1, "sep_conv_5x5"],
               [1, "max_pool_3x3"], [2, "skip_connect"],
               [1, "dil_conv_5x5"], [3, "skip_connect"],
               [1, "max_pool_3x3"], [2, "avg_pool_3x3"]],
    "topology": {"inputs": 2, "intermediates": 4}
  })";
  const ParsedGenotype parsed = genotype_from_json(text);
  CHECK(parsed.topology.num_intermediate_nodes == 4);
  CHECK(parsed.genotype.normal.size() == 4);
  CHECK(parsed.genotype.normal[0][0].op == OpKind::sep_conv_3x3);
  CHECK(parsed.genotype.reduce[1][1].op == OpKind::skip_connect);
}

TEST_CASE("duplicate predecessors are rejected") {
  const std::string text = R"({
    "normal": [[0, "sep_conv_3x3"], [0, "sep_conv_5x5"],
               [0, "sep_conv_3x3"], [1, "dil_conv_5x5"],
               [1, "sep_conv_5x5"], [2, "dil_conv_3x3"],
               [0, "sep_conv_3x3"], [4, "dil_conv_3x3"]],
    "reduce": [[0, "max_pool_3x3"], [1, "sep_conv_5x5"],
               [1, "max_pool_3x3"], [2, "skip_connect"],
               [1, "dil_conv_5x5"], [3, "skip_connect"],
               [1, "max_pool_3x3"], [2, "avg_pool_3x3"]],
    "topology": {"inputs": 2, "intermediates": 4}
  })";
  CHECK_THROWS_WITH_AS(genotype_from_json(text), doctest::Contains("duplicate predecessors"), std::invalid_argument);
}

TEST_CASE("DOT export names both cells and labels edges with operations") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(5);
  const Genotype g = derive_genotype(init_arch_param(topo, ops, rng), topo, ops);
  const std::string dot = genotype_to_dot(g, topo);
  CHECK(dot.find("subgraph cluster_normal") != std::string::npos);
  CHECK(dot.find("subgraph cluster_reduce") != std::string::npos);
  CHECK(dot.find("label=\"" + std::string(op_name(g.normal[0][0].op)) + "\"") != std::string::npos);
  CHECK(dot.find("digraph") == 0);
}

TEST_CASE("genotype hash is stable and discriminates") {
  const auto topo = CellTopology::make();
  const auto ops = OperationSpace::canonical();
  Rng rng(9);
  const Genotype a = derive_genotype(init_arch_param(topo, ops, rng), topo, ops);
  const Genotype b = derive_genotype(init_arch_param(topo, ops, rng), topo, ops);
  CHECK(genotype_hash(a, topo) == genotype_hash(a, topo));
  CHECK(genotype_hash(a, topo).size() == 16);
  if (!(a == b)) CHECK(genotype_hash(a, topo) != genotype_hash(b, topo));
}
