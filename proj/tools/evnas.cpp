// Command-line front end for the evolutionary architecture search library:
// runs searches (supernet or surrogate), evaluates exported genotypes against
// checkpoints, converts genotypes to DOT, and drives multi-seed studies.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evnas/evnas.hpp"

namespace {

evnas::ExperimentConfig load_config(const std::string& path, const std::string& out_dir) {
  evnas::ExperimentConfig cfg = evnas::ExperimentConfig::from_file(path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  return cfg;
}

void print_report(const evnas::FitnessReport& report) {
  std::cout << "fitness " << report.fitness << " (" << report.correct << "/" << report.total << " over "
            << report.eval_batches << " batches)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolutionary neural architecture search over a one-shot weight-sharing supernet"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::string checkpoint_path, genotype_path, dot_path;
  std::vector<std::uint64_t> seeds;

  auto* search = app.add_subcommand("search", "Run the full search (supernet training + validation fitness)");
  search->add_option("config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  search->add_option("--out", out_dir, "output directory (overrides output.dir)");

  auto* surrogate = app.add_subcommand("surrogate-search", "Run the search against the surrogate landscape");
  surrogate->add_option("config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  surrogate->add_option("--out", out_dir, "output directory (overrides output.dir)");

  auto* eval = app.add_subcommand("eval", "Evaluate a genotype JSON against a supernet checkpoint");
  eval->add_option("checkpoint", checkpoint_path, "supernet checkpoint (.evns)")->required()->check(CLI::ExistingFile);
  eval->add_option("genotype", genotype_path, "genotype JSON file")->required()->check(CLI::ExistingFile);
  eval->add_option("config", config_path, "experiment config file (dataset + eval settings)")
      ->required()
      ->check(CLI::ExistingFile);

  auto* export_cmd = app.add_subcommand("export", "Convert a genotype JSON to Graphviz DOT");
  export_cmd->add_option("genotype", genotype_path, "genotype JSON file")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("dot", dot_path, "output DOT path (default: stdout)");

  auto* multi = app.add_subcommand("multi-seed", "Run the search once per seed and summarize");
  multi->add_option("config", config_path, "experiment config file")->required()->check(CLI::ExistingFile);
  multi->add_option("--seeds", seeds, "seed list")->required()->expected(1, -1);
  multi->add_option("--out", out_dir, "output directory (overrides output.dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (search->parsed()) {
      const evnas::RunSummary summary = evnas::run_search_experiment(load_config(config_path, out_dir));
      std::cout << "best fitness " << summary.final_best_fitness << "\nartifacts in " << summary.out_dir.string()
                << "\n";
    } else if (surrogate->parsed()) {
      evnas::ExperimentConfig cfg = load_config(config_path, out_dir);
      if (cfg.surrogate_repeats > 0) {
        std::vector<std::string> presets = cfg.surrogate_compare;
        if (presets.empty()) presets = {"full", "rand"};
        evnas::detail::ensure_out_dir(cfg.out_dir);
        const evnas::SurrogateStudy study = evnas::run_surrogate_study(cfg, presets, cfg.surrogate_repeats);
        const nlohmann::json j = evnas::surrogate_study_to_json(study);
        evnas::detail::write_text_file(cfg.out_dir / "summary.json", j.dump(2) + "\n");
        std::cout << j.dump(2) << "\n";
      } else {
        const evnas::RunSummary summary = evnas::run_surrogate_search_experiment(cfg);
        std::cout << "best fitness " << summary.final_best_fitness << "\nartifacts in " << summary.out_dir.string()
                  << "\n";
      }
    } else if (eval->parsed()) {
      const evnas::ExperimentConfig cfg = evnas::ExperimentConfig::from_file(config_path);
      print_report(evnas::run_eval(checkpoint_path, genotype_path, cfg));
    } else if (export_cmd->parsed()) {
      std::ifstream is(genotype_path);
      std::ostringstream buf;
      buf << is.rdbuf();
      const evnas::ParsedGenotype parsed = evnas::genotype_from_json(buf.str());
      const std::string dot = evnas::genotype_to_dot(parsed.genotype, parsed.topology);
      if (dot_path.empty())
        std::cout << dot;
      else
        evnas::detail::write_text_file(dot_path, dot);
    } else if (multi->parsed()) {
      const nlohmann::json j = evnas::run_multi_seed(load_config(config_path, out_dir), seeds);
      std::cout << j.dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
