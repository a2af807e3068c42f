#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "evnas/rng.hpp"
#include "evnas/search_space.hpp"

namespace evnas {

// Genotype JSON schema:
//   {"normal": [[pred:int, op:string], ...], "reduce": [...],
//    "topology": {"inputs": 2, "intermediates": 4}}
// Entries are flattened per cell: node t owns entries 2t and 2t+1.

inline nlohmann::json genotype_to_json_value(const Genotype& g, const CellTopology& topo) {
  auto cell_to_json = [](const std::vector<Genotype::NodeChoices>& cell) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& node : cell)
      for (const auto& choice : node) arr.push_back({choice.pred, op_name(choice.op)});
    return arr;
  };
  nlohmann::json j;
  j["normal"] = cell_to_json(g.normal);
  j["reduce"] = cell_to_json(g.reduce);
  j["topology"] = {{"inputs", topo.num_input_nodes}, {"intermediates", topo.num_intermediate_nodes}};
  return j;
}

inline std::string genotype_to_json(const Genotype& g, const CellTopology& topo) {
  return genotype_to_json_value(g, topo).dump(2) + "\n";
}

struct ParsedGenotype {
  Genotype genotype;
  CellTopology topology;
};

inline ParsedGenotype genotype_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("genotype JSON parse error: ") + e.what());
  }
  for (const char* field : {"normal", "reduce", "topology"})
    if (!j.contains(field)) throw std::invalid_argument(std::string("genotype JSON: missing field '") + field + "'");
  const auto& topo_j = j["topology"];
  for (const char* field : {"inputs", "intermediates"})
    if (!topo_j.contains(field))
      throw std::invalid_argument(std::string("genotype JSON: missing field 'topology.") + field + "'");

  ParsedGenotype out;
  out.topology = CellTopology::make(topo_j["inputs"].get<int>(), topo_j["intermediates"].get<int>());

  auto cell_from_json = [&](const nlohmann::json& arr, const char* which) {
    if (!arr.is_array()) throw std::invalid_argument(std::string("genotype JSON: '") + which + "' must be an array");
    const size_t expected = static_cast<size_t>(out.topology.num_intermediate_nodes) * 2;
    if (arr.size() != expected)
      throw std::invalid_argument(std::string("genotype JSON: '") + which + "' has " + std::to_string(arr.size()) +
                                  " entries, expected " + std::to_string(expected));
    std::vector<Genotype::NodeChoices> cell(out.topology.num_intermediate_nodes);
    for (size_t i = 0; i < arr.size(); ++i) {
      const auto& entry = arr[i];
      if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number_integer() || !entry[1].is_string())
        throw std::invalid_argument(std::string("genotype JSON: '") + which + "' entry " + std::to_string(i) +
                                    " must be [pred:int, op:string]");
      cell[i / 2][i % 2] = {entry[0].get<int>(), op_from_name(entry[1].get<std::string>())};
    }
    return cell;
  };
  out.genotype.normal = cell_from_json(j["normal"], "normal");
  out.genotype.reduce = cell_from_json(j["reduce"], "reduce");
  validate_genotype(out.genotype, out.topology, OperationSpace::canonical());
  return out;
}

/// DOT export for visual inspection; one subgraph per cell.
inline std::string genotype_to_dot(const Genotype& g, const CellTopology& topo) {
  std::ostringstream os;
  os << "digraph genotype {\n  rankdir=LR;\n  node [shape=box, style=rounded];\n";
  auto emit_cell = [&](const std::vector<Genotype::NodeChoices>& cell, const std::string& name) {
    os << "  subgraph cluster_" << name << " {\n    label=\"" << name << " cell\";\n";
    for (int i = 0; i < topo.num_input_nodes; ++i)
      os << "    " << name << "_in" << i << " [label=\"c_{k-" << (topo.num_input_nodes - i) << "}\"];\n";
    for (int t = 0; t < topo.num_intermediate_nodes; ++t)
      os << "    " << name << "_n" << t << " [label=\"" << t << "\"];\n";
    os << "    " << name << "_out [label=\"out\", shape=ellipse];\n";
    auto node_id = [&](int node) {
      if (node < topo.num_input_nodes) return name + "_in" + std::to_string(node);
      return name + "_n" + std::to_string(node - topo.num_input_nodes);
    };
    for (int t = 0; t < topo.num_intermediate_nodes; ++t)
      for (const auto& choice : cell[t])
        os << "    " << node_id(choice.pred) << " -> " << name << "_n" << t << " [label=\"" << op_name(choice.op)
           << "\"];\n";
    for (int t = 0; t < topo.num_intermediate_nodes; ++t) os << "    " << name << "_n" << t << " -> " << name << "_out;\n";
    os << "  }\n";
  };
  emit_cell(g.normal, "normal");
  emit_cell(g.reduce, "reduce");
  os << "}\n";
  return os.str();
}

/// Stable 64-bit hash of the canonical JSON encoding, as 16 hex digits.
inline std::string genotype_hash(const Genotype& g, const CellTopology& topo) {
  return to_hex16(fnv1a64(genotype_to_json(g, topo)));
}

}  // namespace evnas
