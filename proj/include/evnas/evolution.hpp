#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "evnas/genotype_io.hpp"
#include "evnas/rng.hpp"
#include "evnas/search_space.hpp"

namespace evnas {

struct Individual {
  ArchParam alpha;
  std::optional<double> fitness;
  int id = 0;
};

struct Population {
  std::vector<Individual> individuals;
  int generation = 0;
  std::optional<Individual> elite;  // best of the current generation's evaluation

  int size() const { return static_cast<int>(individuals.size()); }
};

enum class MutationGranularity { row, scalar };

struct EvolutionConfig {
  int population_size = 50;
  int generations = 50;
  int tournament_size = 10;
  double mutation_rate = 0.1;
  int batches_per_generation = 100;  // default 2N
  float decode_k = 1.0f;

  bool use_decode_in_training = true;
  bool use_decode_in_fitness = true;
  bool enable_crossover = true;
  bool enable_mutation = true;
  bool random_mode = false;

  MutationGranularity mutation_granularity = MutationGranularity::row;

  /// Throws on hard violations, returns human-readable warnings otherwise.
  std::vector<std::string> validate() const {
    if (population_size < 2) throw std::invalid_argument("EvolutionConfig: population_size must be >= 2");
    if (generations < 1) throw std::invalid_argument("EvolutionConfig: generations must be >= 1");
    if (tournament_size < 2 || tournament_size > population_size)
      throw std::invalid_argument("EvolutionConfig: tournament_size must be in [2, population_size]");
    if (mutation_rate < 0.0 || mutation_rate > 1.0)
      throw std::invalid_argument("EvolutionConfig: mutation_rate must be in [0, 1]");
    if (!(decode_k > 0.0f)) throw std::invalid_argument("EvolutionConfig: decode_k must be positive");
    std::vector<std::string> warnings;
    if (batches_per_generation < population_size)
      warnings.push_back("batches_per_generation (" + std::to_string(batches_per_generation) +
                         ") is below population_size (" + std::to_string(population_size) +
                         "); some individuals will not train each generation");
    return warnings;
  }
};

// ---------------------------------------------------------------------------
// Genetic operators
// ---------------------------------------------------------------------------

/// Row-wise resampling: with probability r, replace an edge row with fresh
/// uniform-[0,1) samples. Scalar granularity resamples single entries instead.
inline ArchParam mutate(const ArchParam& alpha, double rate, Rng& rng,
                        MutationGranularity granularity = MutationGranularity::row) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("mutate: rate must be in [0, 1]");
  ArchParam out = alpha;
  for (Matrix* m : {&out.normal, &out.reduce}) {
    if (granularity == MutationGranularity::row) {
      for (int r = 0; r < m->rows; ++r)
        if (rng.uniform() < rate)
          for (float& v : m->row(r)) v = static_cast<float>(rng.uniform());
    } else {
      for (float& v : m->data)
        if (rng.uniform() < rate) v = static_cast<float>(rng.uniform());
    }
  }
  return out;
}

/// Uniform row-wise crossover: each edge row comes from parent1 with
/// probability 0.5, else parent2.
inline ArchParam crossover(const ArchParam& p1, const ArchParam& p2, Rng& rng) {
  if (!p1.normal.same_shape(p2.normal) || !p1.reduce.same_shape(p2.reduce))
    throw std::invalid_argument("crossover: parent shape mismatch");
  ArchParam child = p1;
  const Matrix* sources[2][2] = {{&p1.normal, &p2.normal}, {&p1.reduce, &p2.reduce}};
  Matrix* targets[2] = {&child.normal, &child.reduce};
  for (int m = 0; m < 2; ++m)
    for (int r = 0; r < targets[m]->rows; ++r) {
      const Matrix* pick = sources[m][rng.uniform() < 0.5 ? 0 : 1];
      auto src = pick->row(r);
      std::copy(src.begin(), src.end(), targets[m]->row(r).begin());
    }
  return child;
}

/// Sample tournament_size individuals without replacement; return the two
/// fittest (ties to the lower id), ordered parent1 >= parent2.
inline std::pair<const Individual*, const Individual*> tournament_select(const Population& pop, int tournament_size,
                                                                         Rng& rng) {
  const int n = pop.size();
  if (tournament_size < 2 || tournament_size > n)
    throw std::invalid_argument("tournament_select: tournament size must be in [2, population size]");
  for (const Individual& ind : pop.individuals)
    if (!ind.fitness) throw std::invalid_argument("tournament_select: individual " + std::to_string(ind.id) +
                                                  " has no fitness value");

  // Partial Fisher-Yates over a scratch index list.
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = 0; i < tournament_size; ++i)
    std::swap(idx[i], idx[i + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(n - i)))]);

  auto fitter = [&](int a, int b) {
    const Individual& ia = pop.individuals[a];
    const Individual& ib = pop.individuals[b];
    if (*ia.fitness != *ib.fitness) return *ia.fitness > *ib.fitness;
    return ia.id < ib.id;
  };
  int best = idx[0], second = idx[1];
  if (fitter(second, best)) std::swap(best, second);
  for (int i = 2; i < tournament_size; ++i) {
    if (fitter(idx[i], best)) {
      second = best;
      best = idx[i];
    } else if (fitter(idx[i], second)) {
      second = idx[i];
    }
  }
  return {&pop.individuals[best], &pop.individuals[second]};
}

/// Best individual of a freshly evaluated population (ties to the lower id).
inline const Individual& best_individual(const Population& pop) {
  const Individual* best = nullptr;
  for (const Individual& ind : pop.individuals) {
    if (!ind.fitness) throw std::invalid_argument("best_individual: missing fitness");
    if (!best || *ind.fitness > *best->fitness) best = &ind;
  }
  return *best;
}

/// Produce the next generation: slot 0 carries the elite unchanged, the rest
/// come from tournament selection -> crossover -> mutation (per config), or
/// fresh uniform samples in random mode. Fitness values are cleared.
inline Population next_generation(const Population& pop, const EvolutionConfig& cfg, const CellTopology& topo,
                                  const OperationSpace& ops, Rng& rng) {
  if (!pop.elite) throw std::invalid_argument("next_generation: population has no elite set");
  Population next;
  next.generation = pop.generation + 1;
  next.individuals.reserve(pop.individuals.size());
  next.individuals.push_back({pop.elite->alpha, std::nullopt, 0});
  for (int slot = 1; slot < pop.size(); ++slot) {
    ArchParam alpha;
    if (cfg.random_mode) {
      alpha = init_arch_param(topo, ops, rng);
    } else {
      const auto [p1, p2] = tournament_select(pop, cfg.tournament_size, rng);
      alpha = cfg.enable_crossover ? crossover(p1->alpha, p2->alpha, rng) : p1->alpha;
      if (cfg.enable_mutation) alpha = mutate(alpha, cfg.mutation_rate, rng, cfg.mutation_granularity);
    }
    next.individuals.push_back({std::move(alpha), std::nullopt, slot});
  }
  return next;
}

// ---------------------------------------------------------------------------
// Generation loop
// ---------------------------------------------------------------------------

struct GenerationLog {
  int generation = 0;
  double best_fitness = 0.0;
  double mean_fitness = 0.0;
  double min_fitness = 0.0;
  std::string elite_genotype_hash;
  double wall_seconds = 0.0;
};

struct SearchHooks {
  /// Training phase; omitted for surrogate searches.
  std::function<void(int generation, Population&)> train;
  /// Fitness of one individual given its (decoded or raw) cell parameters.
  std::function<double(const Individual&, const CellParams&)> evaluate;
  /// Called after each generation has been evaluated and logged.
  std::function<void(const GenerationLog&, const Population&)> on_generation;
};

struct SearchResult {
  Individual best;
  std::vector<GenerationLog> history;
  std::size_t unique_genotypes = 0;
  std::size_t total_evaluations = 0;
};

inline SearchResult run_search(const EvolutionConfig& cfg, const CellTopology& topo, const OperationSpace& ops,
                               const SearchHooks& hooks, Rng& rng) {
  cfg.validate();
  if (!hooks.evaluate) throw std::invalid_argument("run_search: an evaluator is required");

  Population pop;
  pop.generation = 1;
  pop.individuals.reserve(cfg.population_size);
  for (int i = 0; i < cfg.population_size; ++i) pop.individuals.push_back({init_arch_param(topo, ops, rng), {}, i});

  SearchResult result;
  std::unordered_set<std::string> seen_genotypes;

  for (int g = 1; g <= cfg.generations; ++g) {
    const auto t0 = std::chrono::steady_clock::now();
    if (hooks.train) hooks.train(g, pop);

    for (Individual& ind : pop.individuals) {
      try {
        if (cfg.use_decode_in_fitness) {
          const DecodedParam decoded = decode(ind.alpha, cfg.decode_k, topo, ops);
          ind.fitness = hooks.evaluate(ind, view(decoded));
        } else {
          ind.fitness = hooks.evaluate(ind, view(ind.alpha));
        }
      } catch (const std::exception& e) {
        throw std::runtime_error("fitness evaluation failed at generation " + std::to_string(g) + ", individual " +
                                 std::to_string(ind.id) + ": " + e.what());
      }
      seen_genotypes.insert(genotype_hash(derive_genotype(ind.alpha, topo, ops), topo));
      ++result.total_evaluations;
    }

    pop.elite = best_individual(pop);

    GenerationLog log;
    log.generation = g;
    log.best_fitness = *pop.elite->fitness;
    double sum = 0.0, mn = *pop.individuals[0].fitness;
    for (const Individual& ind : pop.individuals) {
      sum += *ind.fitness;
      mn = std::min(mn, *ind.fitness);
    }
    log.mean_fitness = sum / pop.size();
    log.min_fitness = mn;
    log.elite_genotype_hash = genotype_hash(derive_genotype(pop.elite->alpha, topo, ops), topo);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(log);
    if (hooks.on_generation) hooks.on_generation(log, pop);

    result.best = *pop.elite;
    pop = next_generation(pop, cfg, topo, ops, rng);
  }

  result.unique_genotypes = seen_genotypes.size();
  return result;
}

}  // namespace evnas
