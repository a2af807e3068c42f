#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "evnas/dataset.hpp"
#include "evnas/evolution.hpp"
#include "evnas/genotype_io.hpp"
#include "evnas/supernet.hpp"

namespace evnas {

struct FitnessReport {
  double fitness = 0.0;
  long correct = 0;
  long total = 0;
  int eval_batches = 0;
};

/// Top-1 accuracy of a fixed parameter assignment over the validation set,
/// traversed in index order (deterministic). max_batches of 0 means the full
/// split. Weights are read-only.
inline FitnessReport evaluate_params(Supernet& net, const CellParams& params, const Dataset& val, int batch_size,
                                     int max_batches = 0) {
  if (val.size() == 0) throw std::invalid_argument("evaluate: empty validation stream");
  if (batch_size < 1) throw std::invalid_argument("evaluate: batch size must be >= 1");
  FitnessReport report;
  size_t pos = 0;
  while (pos < val.size()) {
    if (max_batches > 0 && report.eval_batches >= max_batches) break;
    const size_t count = std::min(static_cast<size_t>(batch_size), val.size() - pos);
    std::vector<int> idx(count);
    for (size_t i = 0; i < count; ++i) idx[i] = static_cast<int>(pos + i);
    const Batch batch = make_batch(val, idx);
    const Tensor logits = net.forward(batch.images, params);
    const int k = logits.dim(1);
    for (size_t i = 0; i < count; ++i) {
      const float* row = logits.data.data() + i * k;
      int arg = 0;
      for (int j = 1; j < k; ++j)
        if (row[j] > row[arg]) arg = j;  // ties keep the lower class index
      report.correct += (arg == batch.labels[i]);
    }
    report.total += static_cast<long>(count);
    ++report.eval_batches;
    pos += count;
  }
  report.fitness = static_cast<double>(report.correct) / report.total;
  return report;
}

/// Validation-accuracy fitness of one individual through the shared supernet,
/// decoded unless the config says otherwise. Stores fitness on the individual.
inline FitnessReport evaluate_fitness(Supernet& net, Individual& ind, const Dataset& val, const EvolutionConfig& cfg,
                                      int batch_size = 32, int max_batches = 0) {
  FitnessReport report;
  if (cfg.use_decode_in_fitness) {
    const DecodedParam decoded = decode(ind.alpha, cfg.decode_k, net.config().topology, net.config().ops);
    report = evaluate_params(net, view(decoded), val, batch_size, max_batches);
  } else {
    report = evaluate_params(net, view(ind.alpha), val, batch_size, max_batches);
  }
  ind.fitness = report.fitness;
  return report;
}

// ---------------------------------------------------------------------------
// Surrogate landscape
// ---------------------------------------------------------------------------

/// Deterministic genotype-distance fitness used to exercise search dynamics
/// without any training. Fitness is the fraction of (node, predecessor, op)
/// selections shared with a hidden target, plus optional frozen Gaussian
/// noise keyed by (seed, genotype).
struct SurrogateLandscape {
  Genotype hidden_target;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

inline SurrogateLandscape make_surrogate(std::uint64_t target_seed, double noise_std, const CellTopology& topo,
                                         const OperationSpace& ops) {
  Rng rng(hash_combine(target_seed, 0x5a17));
  SurrogateLandscape land;
  land.hidden_target = derive_genotype(init_arch_param(topo, ops, rng), topo, ops);
  land.noise_std = noise_std;
  land.seed = target_seed;
  return land;
}

/// Matching (predecessor, op) selections between two genotypes, counted
/// jointly per slot (set intersection per intermediate node, both cells).
inline int genotype_match_count(const Genotype& a, const Genotype& b) {
  int matches = 0;
  auto count_cell = [&](const std::vector<Genotype::NodeChoices>& ca, const std::vector<Genotype::NodeChoices>& cb) {
    if (ca.size() != cb.size()) throw std::invalid_argument("genotype_match_count: topology mismatch");
    for (size_t node = 0; node < ca.size(); ++node)
      for (const auto& choice : ca[node])
        matches += (choice == cb[node][0] || choice == cb[node][1]);
  };
  count_cell(a.normal, b.normal);
  count_cell(a.reduce, b.reduce);
  return matches;
}

inline double surrogate_fitness(const SurrogateLandscape& land, const ArchParam& alpha, const CellTopology& topo,
                                const OperationSpace& ops) {
  const Genotype g = derive_genotype(alpha, topo, ops);
  const int total_slots = 2 * topo.num_intermediate_nodes * 2;
  double fitness = static_cast<double>(genotype_match_count(g, land.hidden_target)) / total_slots;
  if (land.noise_std > 0.0) {
    // Frozen noise: a pure function of (seed, genotype), so re-evaluation is
    // deterministic.
    std::uint64_t h = land.seed;
    for (const auto* cell : {&g.normal, &g.reduce})
      for (const auto& node : *cell)
        for (const auto& choice : node)
          h = hash_combine(h, hash_combine(static_cast<std::uint64_t>(choice.pred),
                                           static_cast<std::uint64_t>(choice.op)));
    Rng noise_rng(h);
    fitness += land.noise_std * noise_rng.gaussian();
  }
  return std::clamp(fitness, 0.0, 1.0);
}

}  // namespace evnas
