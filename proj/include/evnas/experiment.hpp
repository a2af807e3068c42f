#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "evnas/config.hpp"
#include "evnas/dataset.hpp"
#include "evnas/evaluation.hpp"
#include "evnas/evolution.hpp"
#include "evnas/genotype_io.hpp"
#include "evnas/stats.hpp"
#include "evnas/supernet.hpp"
#include "evnas/trainer.hpp"

namespace evnas {

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open output file " + path.string());
  return os;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto os = open_out(path);
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline void ensure_out_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  // Probe writability so failures surface before a long run.
  const auto probe = dir / ".write_probe";
  {
    std::ofstream os(probe);
    if (!os) throw std::runtime_error("output directory is not writable: " + dir.string());
  }
  std::filesystem::remove(probe, ec);
}

}  // namespace detail

inline constexpr const char* kGenerationsCsvHeader =
    "generation,best_fitness,mean_fitness,min_fitness,elite_genotype_hash,wall_seconds";
inline constexpr const char* kTrainingCsvHeader = "step,generation,individual_index,loss,lr";

/// Streams GenerationLog rows to generations.csv. With deterministic timing
/// the wall_seconds column is written as 0 so identical runs produce
/// byte-identical files; real timings then live in the manifest.
class GenerationCsvWriter {
 public:
  GenerationCsvWriter(const std::filesystem::path& path, bool deterministic_timing)
      : os_(detail::open_out(path)), deterministic_(deterministic_timing) {
    os_ << kGenerationsCsvHeader << "\n";
  }

  void write(const GenerationLog& log) {
    os_ << log.generation << ',' << detail::fmt_double(log.best_fitness) << ','
        << detail::fmt_double(log.mean_fitness) << ',' << detail::fmt_double(log.min_fitness) << ','
        << log.elite_genotype_hash << ',';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", deterministic_ ? 0.0 : log.wall_seconds);
    os_ << buf << "\n";
    os_.flush();
  }

 private:
  std::ofstream os_;
  bool deterministic_;
};

struct DatasetPair {
  Dataset train;
  Dataset val;
};

inline DatasetPair build_datasets(const ExperimentConfig& cfg) {
  DatasetPair pair;
  if (cfg.dataset_kind == DatasetKind::synthetic) {
    auto [train, val] = generate_synthetic_dataset(cfg.synthetic);
    pair.train = std::move(train);
    pair.val = std::move(val);
  } else {
    pair.train = load_idx_dataset(cfg.idx.train_images, cfg.idx.train_labels, cfg.supernet.input_hw);
    pair.val = load_idx_dataset(cfg.idx.val_images, cfg.idx.val_labels, cfg.supernet.input_hw);
  }
  for (const Dataset* d : {&pair.train, &pair.val}) {
    if (d->channels != cfg.supernet.input_channels || d->hw != cfg.supernet.input_hw)
      throw std::runtime_error("dataset shape (" + std::to_string(d->channels) + "," + std::to_string(d->hw) +
                               ") does not match supernet input (" + std::to_string(cfg.supernet.input_channels) +
                               "," + std::to_string(cfg.supernet.input_hw) + ")");
    for (int label : d->labels)
      if (label < 0 || label >= cfg.supernet.num_classes)
        throw std::runtime_error("dataset label " + std::to_string(label) + " out of range for " +
                                 std::to_string(cfg.supernet.num_classes) + " classes");
  }
  return pair;
}

struct RunSummary {
  std::filesystem::path out_dir;
  double final_best_fitness = 0.0;
  double first_generation_best = 0.0;
  Genotype best_genotype;
  std::string best_genotype_hash;
  std::size_t unique_genotypes = 0;
  std::size_t total_evaluations = 0;
  double total_wall_seconds = 0.0;
};

namespace detail {

inline void write_manifest(const std::filesystem::path& out_dir, const ExperimentConfig& cfg,
                           const std::string& command, const RunSummary& summary,
                           const std::vector<std::string>& artifacts, const nlohmann::json& extra = {}) {
  nlohmann::json m;
  m["command"] = command;
  m["seed"] = cfg.seed;
  m["mode"] = cfg.mode;
  m["config_hash"] = to_hex16(fnv1a64(cfg.raw_config_text));
  m["config_text"] = cfg.raw_config_text;
  m["versions"] = {{"checkpoint_format", kCheckpointVersion}, {"genotype_schema", 1}};
  m["artifacts"] = artifacts;
  m["final_best_fitness"] = summary.final_best_fitness;
  m["unique_genotypes"] = summary.unique_genotypes;
  m["total_evaluations"] = summary.total_evaluations;
  m["total_wall_seconds"] = summary.total_wall_seconds;
  if (!extra.is_null()) m["extra"] = extra;
  detail::write_text_file(out_dir / "manifest.json", m.dump(2) + "\n");
}

}  // namespace detail

/// Full search pipeline: supernet training + validation fitness, all
/// artifacts written into out_dir.
inline RunSummary run_search_experiment(const ExperimentConfig& cfg, std::ostream* progress = &std::cerr) {
  const auto t_start = std::chrono::steady_clock::now();
  detail::ensure_out_dir(cfg.out_dir);
  for (const std::string& w : cfg.evolution.validate())
    if (progress) *progress << "warning: " << w << "\n";

  const DatasetPair data = build_datasets(cfg);
  Rng weight_rng(hash_combine(cfg.seed, 0x5eed0001ULL));
  Rng search_rng(hash_combine(cfg.seed, 0x5eed0002ULL));
  Rng batch_rng(hash_combine(cfg.seed, 0x5eed0003ULL));

  Supernet net(cfg.supernet, weight_rng);
  OptimizerState opt;
  opt.schedule = {cfg.lr_max, cfg.lr_min,
                  static_cast<long>(cfg.evolution.generations) * cfg.evolution.batches_per_generation};
  opt.momentum = cfg.momentum;
  opt.weight_decay = cfg.weight_decay;
  opt.attach(net.parameters());

  BatchStream train_stream(data.train, cfg.train_plan.batch_size, batch_rng);

  GenerationCsvWriter gen_csv(cfg.out_dir / "generations.csv", cfg.deterministic_timing);
  auto train_csv = detail::open_out(cfg.out_dir / "training.csv");
  train_csv << kTrainingCsvHeader << "\n";

  // Decoded fitness is a function of the genotype alone on frozen weights,
  // so duplicate genotypes within one generation share a single evaluation.
  // The cache resets whenever training moves the weights.
  std::map<std::string, double> fitness_cache;
  SearchHooks hooks;
  hooks.train = [&](int generation, Population& pop) {
    (void)generation;
    fitness_cache.clear();
    train_generation(net, pop, cfg.train_plan, opt, train_stream, cfg.evolution, [&](const TrainStepLog& log) {
      train_csv << log.step << ',' << log.generation << ',' << log.individual_index << ','
                << detail::fmt_double(log.loss) << ',' << detail::fmt_double(log.lr) << "\n";
    });
  };
  hooks.evaluate = [&](const Individual& ind, const CellParams& params) {
    if (!cfg.evolution.use_decode_in_fitness)
      return evaluate_params(net, params, data.val, cfg.eval_batch_size, cfg.eval_batches).fitness;
    const std::string key = genotype_hash(derive_genotype(ind.alpha, cfg.supernet.topology, cfg.supernet.ops),
                                          cfg.supernet.topology);
    if (const auto it = fitness_cache.find(key); it != fitness_cache.end()) return it->second;
    const double fitness = evaluate_params(net, params, data.val, cfg.eval_batch_size, cfg.eval_batches).fitness;
    fitness_cache.emplace(key, fitness);
    return fitness;
  };
  RunSummary summary;
  hooks.on_generation = [&](const GenerationLog& log, const Population&) {
    gen_csv.write(log);
    if (log.generation == 1) summary.first_generation_best = log.best_fitness;
    if (progress)
      *progress << "[gen " << log.generation << "/" << cfg.evolution.generations << "] best "
                << detail::fmt_double(log.best_fitness) << "  mean " << detail::fmt_double(log.mean_fitness) << "\n";
  };

  const SearchResult result = run_search(cfg.evolution, cfg.supernet.topology, cfg.supernet.ops, hooks, search_rng);

  summary.out_dir = cfg.out_dir;
  summary.final_best_fitness = *result.best.fitness;
  summary.best_genotype = derive_genotype(result.best.alpha, cfg.supernet.topology, cfg.supernet.ops);
  summary.best_genotype_hash = genotype_hash(summary.best_genotype, cfg.supernet.topology);
  summary.unique_genotypes = result.unique_genotypes;
  summary.total_evaluations = result.total_evaluations;

  detail::write_text_file(cfg.out_dir / "best.genotype.json",
                          genotype_to_json(summary.best_genotype, cfg.supernet.topology));
  detail::write_text_file(cfg.out_dir / "best.dot", genotype_to_dot(summary.best_genotype, cfg.supernet.topology));
  net.save(cfg.out_dir / "supernet.evns");

  summary.total_wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  detail::write_manifest(cfg.out_dir, cfg, "search", summary,
                         {"generations.csv", "training.csv", "best.genotype.json", "best.dot", "supernet.evns"});
  return summary;
}

/// Search against the deterministic surrogate landscape; no supernet, same
/// artifact layout plus the hidden target genotype.
inline RunSummary run_surrogate_search_experiment(const ExperimentConfig& cfg, std::ostream* progress = &std::cerr) {
  const auto t_start = std::chrono::steady_clock::now();
  detail::ensure_out_dir(cfg.out_dir);

  const auto& topo = cfg.supernet.topology;
  const auto& ops = cfg.supernet.ops;
  const SurrogateLandscape land = make_surrogate(cfg.surrogate_target_seed, cfg.surrogate_noise_std, topo, ops);
  Rng search_rng(hash_combine(cfg.seed, 0x5eed0002ULL));

  GenerationCsvWriter gen_csv(cfg.out_dir / "generations.csv", cfg.deterministic_timing);
  SearchHooks hooks;
  hooks.evaluate = [&](const Individual&, const CellParams& params) {
    const ArchParam alpha{*params.normal, *params.reduce};
    return surrogate_fitness(land, alpha, topo, ops);
  };
  RunSummary summary;
  hooks.on_generation = [&](const GenerationLog& log, const Population&) {
    gen_csv.write(log);
    if (log.generation == 1) summary.first_generation_best = log.best_fitness;
  };

  const SearchResult result = run_search(cfg.evolution, topo, ops, hooks, search_rng);

  summary.out_dir = cfg.out_dir;
  summary.final_best_fitness = *result.best.fitness;
  summary.best_genotype = derive_genotype(result.best.alpha, topo, ops);
  summary.best_genotype_hash = genotype_hash(summary.best_genotype, topo);
  summary.unique_genotypes = result.unique_genotypes;
  summary.total_evaluations = result.total_evaluations;

  detail::write_text_file(cfg.out_dir / "best.genotype.json", genotype_to_json(summary.best_genotype, topo));
  detail::write_text_file(cfg.out_dir / "best.dot", genotype_to_dot(summary.best_genotype, topo));
  detail::write_text_file(cfg.out_dir / "hidden_target.genotype.json", genotype_to_json(land.hidden_target, topo));

  summary.total_wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  detail::write_manifest(cfg.out_dir, cfg, "surrogate-search", summary,
                         {"generations.csv", "best.genotype.json", "best.dot", "hidden_target.genotype.json"});
  if (progress)
    *progress << "surrogate search: best " << detail::fmt_double(summary.final_best_fitness) << " after "
              << cfg.evolution.generations << " generations\n";
  return summary;
}

/// Final best fitness of one surrogate search under a mode preset; used by
/// the comparison study. The landscape is shared per repetition so presets
/// are paired.
inline double surrogate_preset_final_best(const ExperimentConfig& base, const std::string& preset,
                                          std::uint64_t search_seed, std::uint64_t target_seed) {
  EvolutionConfig evo = base.evolution;
  apply_mode(evo, preset);
  const auto& topo = base.supernet.topology;
  const auto& ops = base.supernet.ops;
  const SurrogateLandscape land = make_surrogate(target_seed, base.surrogate_noise_std, topo, ops);
  Rng rng(hash_combine(search_seed, 0x5eed0002ULL));
  SearchHooks hooks;
  hooks.evaluate = [&](const Individual&, const CellParams& params) {
    const ArchParam alpha{*params.normal, *params.reduce};
    return surrogate_fitness(land, alpha, topo, ops);
  };
  return *run_search(evo, topo, ops, hooks, rng).best.fitness;
}

struct SurrogateStudy {
  std::map<std::string, std::vector<double>> finals;  // preset -> final best per repetition
  std::map<std::string, double> means;
  std::map<std::string, double> p_values;  // "a_vs_b" -> one-sided p for a > b
};

/// Repeated paired surrogate searches across mode presets, with rank-sum
/// comparisons between every preset pair.
inline SurrogateStudy run_surrogate_study(const ExperimentConfig& cfg, const std::vector<std::string>& presets,
                                          int repeats, std::ostream* progress = &std::cerr) {
  if (presets.size() < 2) throw std::invalid_argument("surrogate study: need at least two presets to compare");
  if (repeats < 2) throw std::invalid_argument("surrogate study: need at least two repetitions");
  SurrogateStudy study;
  for (int rep = 0; rep < repeats; ++rep) {
    const std::uint64_t search_seed = hash_combine(cfg.seed, static_cast<std::uint64_t>(rep));
    const std::uint64_t target_seed = hash_combine(cfg.surrogate_target_seed, static_cast<std::uint64_t>(rep) + 1000);
    for (const std::string& preset : presets)
      study.finals[preset].push_back(surrogate_preset_final_best(cfg, preset, search_seed, target_seed));
    if (progress) *progress << "study repetition " << (rep + 1) << "/" << repeats << " done\n";
  }
  for (const auto& [preset, finals] : study.finals) study.means[preset] = mean(finals);
  for (const auto& [a, fa] : study.finals)
    for (const auto& [b, fb] : study.finals)
      if (a != b) study.p_values[a + "_vs_" + b] = rank_sum_p_value(fa, fb);
  return study;
}

inline nlohmann::json surrogate_study_to_json(const SurrogateStudy& study) {
  nlohmann::json j;
  for (const auto& [preset, finals] : study.finals) {
    j["finals"][preset] = finals;
    j["means"][preset] = study.means.at(preset);
  }
  for (const auto& [name, p] : study.p_values) j["rank_sum_p"][name] = p;
  return j;
}

/// Load a checkpoint, decode a genotype JSON onto it, report validation
/// accuracy.
inline FitnessReport run_eval(const std::filesystem::path& checkpoint_path,
                              const std::filesystem::path& genotype_path, const ExperimentConfig& cfg) {
  Supernet net = Supernet::load(checkpoint_path);
  std::ifstream gf(genotype_path);
  if (!gf) throw std::runtime_error("cannot open genotype file " + genotype_path.string());
  std::ostringstream buf;
  buf << gf.rdbuf();
  const ParsedGenotype parsed = genotype_from_json(buf.str());
  if (parsed.topology != net.config().topology)
    throw std::runtime_error(
        "genotype topology (" + std::to_string(parsed.topology.num_input_nodes) + " inputs, " +
        std::to_string(parsed.topology.num_intermediate_nodes) + " intermediates) does not match checkpoint (" +
        std::to_string(net.config().topology.num_input_nodes) + " inputs, " +
        std::to_string(net.config().topology.num_intermediate_nodes) + " intermediates)");
  validate_genotype(parsed.genotype, net.config().topology, net.config().ops);
  const DecodedParam decoded =
      genotype_to_decoded(parsed.genotype, cfg.evolution.decode_k, net.config().topology, net.config().ops);

  ExperimentConfig data_cfg = cfg;
  data_cfg.supernet = net.config();  // the checkpoint defines the input contract
  const DatasetPair data = build_datasets(data_cfg);
  return evaluate_params(net, view(decoded), data.val, cfg.eval_batch_size, cfg.eval_batches);
}

/// Convenience wrapper: one search per seed, each in its own subdirectory,
/// with a cross-seed summary.
inline nlohmann::json run_multi_seed(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                     std::ostream* progress = &std::cerr) {
  if (seeds.empty()) throw std::invalid_argument("multi-seed: need at least one seed");
  detail::ensure_out_dir(base.out_dir);
  nlohmann::json runs = nlohmann::json::array();
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cfg = base;
    cfg.seed = seed;
    cfg.out_dir = base.out_dir / ("seed_" + std::to_string(seed));
    if (progress) *progress << "=== seed " << seed << " ===\n";
    const RunSummary summary = run_search_experiment(cfg, progress);
    runs.push_back({{"seed", seed},
                    {"out_dir", cfg.out_dir.string()},
                    {"final_best_fitness", summary.final_best_fitness},
                    {"best_genotype_hash", summary.best_genotype_hash}});
  }
  nlohmann::json j;
  j["runs"] = runs;
  double best = -1.0;
  std::uint64_t best_seed = seeds[0];
  for (const auto& r : runs)
    if (r["final_best_fitness"].get<double>() > best) {
      best = r["final_best_fitness"].get<double>();
      best_seed = r["seed"].get<std::uint64_t>();
    }
  j["best_seed"] = best_seed;
  j["best_fitness"] = best;
  detail::write_text_file(base.out_dir / "multi_seed_summary.json", j.dump(2) + "\n");
  return j;
}

}  // namespace evnas
