#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evnas/dataset.hpp"
#include "evnas/evolution.hpp"
#include "evnas/supernet.hpp"
#include "evnas/trainer.hpp"

namespace evnas {

/// Flat key = value configuration with dotted section keys. '#' starts a
/// comment; keys are consumed on read so unknown keys can be rejected.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_string(const std::string& text) {
    KeyValueConfig cfg;
    cfg.raw_text_ = text;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                                    trimmed + "'");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
      if (cfg.values_.count(key))
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_string(buf.str());
  }

  const std::string& raw_text() const { return raw_text_; }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    consumed_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) {
    consumed_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("config: missing required key '" + key + "'");
    return it->second;
  }

  long get_int(const std::string& key, long fallback) {
    const std::string s = get_string(key, "");
    return s.empty() ? fallback : to_int(key, s);
  }

  std::uint64_t require_u64(const std::string& key) {
    const std::string s = require_string(key);
    try {
      return std::stoull(s);
    } catch (...) {
      throw std::invalid_argument("config: key '" + key + "' is not an unsigned integer: '" + s + "'");
    }
  }

  double get_double(const std::string& key, double fallback) {
    const std::string s = get_string(key, "");
    if (s.empty()) return fallback;
    try {
      return std::stod(s);
    } catch (...) {
      throw std::invalid_argument("config: key '" + key + "' is not a number: '" + s + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) {
    const std::string s = get_string(key, "");
    if (s.empty()) return fallback;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw std::invalid_argument("config: key '" + key + "' is not a boolean: '" + s + "'");
  }

  /// Error out on keys that were never consumed (typo protection).
  void reject_unknown_keys() const {
    std::vector<std::string> unknown;
    for (const auto& [key, _] : values_)
      if (!consumed_.count(key)) unknown.push_back(key);
    if (!unknown.empty()) {
      std::string msg = "config: unknown key(s):";
      for (const auto& k : unknown) msg += " '" + k + "'";
      throw std::invalid_argument(msg);
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
  }

  static long to_int(const std::string& key, const std::string& s) {
    try {
      size_t used = 0;
      const long v = std::stol(s, &used);
      if (used != s.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw std::invalid_argument("config: key '" + key + "' is not an integer: '" + s + "'");
    }
  }

  std::string raw_text_;
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class DatasetKind { synthetic, idx };

struct IdxPaths {
  std::filesystem::path train_images, train_labels, val_images, val_labels;
};

/// Mode presets wiring the ablation flag combinations.
inline void apply_mode(EvolutionConfig& cfg, const std::string& mode) {
  cfg.use_decode_in_training = true;
  cfg.use_decode_in_fitness = true;
  cfg.enable_crossover = true;
  cfg.enable_mutation = true;
  cfg.random_mode = false;
  if (mode == "full") return;
  if (mode == "rand") {
    cfg.random_mode = true;
    cfg.enable_crossover = false;
    cfg.enable_mutation = false;
  } else if (mode == "nd") {
    cfg.use_decode_in_training = false;
    cfg.use_decode_in_fitness = false;
  } else if (mode == "ndf") {
    cfg.use_decode_in_fitness = false;
  } else if (mode == "ndt") {
    cfg.use_decode_in_training = false;
  } else if (mode == "mut") {
    cfg.enable_crossover = false;
  } else if (mode == "cross") {
    cfg.enable_mutation = false;
  } else {
    throw std::invalid_argument("unknown mode preset '" + mode + "' (expected full|rand|nd|ndf|ndt|mut|cross)");
  }
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string mode = "full";
  std::filesystem::path out_dir = "runs/latest";

  SupernetConfig supernet;
  EvolutionConfig evolution;
  TrainPlan train_plan;
  double lr_max = 0.025;
  double lr_min = 0.001;
  double momentum = 0.9;
  double weight_decay = 3e-4;

  DatasetKind dataset_kind = DatasetKind::synthetic;
  SyntheticDatasetSpec synthetic;
  IdxPaths idx;

  int eval_batch_size = 32;
  int eval_batches = 0;  // 0 = full validation split

  double surrogate_noise_std = 0.05;
  std::uint64_t surrogate_target_seed = 0;
  int surrogate_repeats = 0;  // > 0 switches surrogate-search to study mode
  std::vector<std::string> surrogate_compare;

  bool deterministic_timing = true;

  std::string raw_config_text;

  static ExperimentConfig from_file(const std::filesystem::path& path) {
    KeyValueConfig kv = KeyValueConfig::parse_file(path);
    return from_key_values(kv);
  }

  static ExperimentConfig from_string(const std::string& text) {
    KeyValueConfig kv = KeyValueConfig::parse_string(text);
    return from_key_values(kv);
  }

  static ExperimentConfig from_key_values(KeyValueConfig& kv) {
    ExperimentConfig cfg;
    cfg.raw_config_text = kv.raw_text();
    cfg.seed = kv.require_u64("seed");
    cfg.mode = kv.get_string("mode", "full");
    cfg.out_dir = kv.get_string("output.dir", "runs/latest");

    const int inputs = static_cast<int>(kv.get_int("search_space.input_nodes", 2));
    const int intermediates = static_cast<int>(kv.get_int("search_space.intermediate_nodes", 4));
    cfg.supernet.topology = CellTopology::make(inputs, intermediates);
    cfg.supernet.ops = OperationSpace::canonical();
    cfg.supernet.cells = static_cast<int>(kv.get_int("supernet.cells", 4));
    cfg.supernet.init_channels = static_cast<int>(kv.get_int("supernet.init_channels", 8));
    cfg.supernet.input_hw = static_cast<int>(kv.get_int("supernet.input_hw", 16));
    cfg.supernet.input_channels = static_cast<int>(kv.get_int("supernet.input_channels", 1));

    cfg.evolution.population_size = static_cast<int>(kv.get_int("evolution.population_size", 50));
    cfg.evolution.generations = static_cast<int>(kv.get_int("evolution.generations", 50));
    cfg.evolution.tournament_size = static_cast<int>(kv.get_int("evolution.tournament_size", 10));
    cfg.evolution.mutation_rate = kv.get_double("evolution.mutation_rate", 0.1);
    cfg.evolution.batches_per_generation =
        static_cast<int>(kv.get_int("evolution.batches_per_generation", 2L * cfg.evolution.population_size));
    cfg.evolution.decode_k = static_cast<float>(kv.get_double("evolution.decode_k", 1.0));
    const std::string granularity = kv.get_string("evolution.mutation_granularity", "row");
    if (granularity == "row")
      cfg.evolution.mutation_granularity = MutationGranularity::row;
    else if (granularity == "scalar")
      cfg.evolution.mutation_granularity = MutationGranularity::scalar;
    else
      throw std::invalid_argument("config: evolution.mutation_granularity must be 'row' or 'scalar'");
    apply_mode(cfg.evolution, cfg.mode);

    cfg.train_plan.batches_per_generation = cfg.evolution.batches_per_generation;
    cfg.train_plan.batch_size = static_cast<int>(kv.get_int("trainer.batch_size", 8));
    const double clip = kv.get_double("trainer.grad_clip", 0.0);
    cfg.train_plan.grad_clip = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
    cfg.lr_max = kv.get_double("trainer.lr_max", 0.025);
    cfg.lr_min = kv.get_double("trainer.lr_min", 0.001);
    cfg.momentum = kv.get_double("trainer.momentum", 0.9);
    cfg.weight_decay = kv.get_double("trainer.weight_decay", 3e-4);

    const std::string kind = kv.get_string("dataset.kind", "synthetic");
    if (kind == "synthetic")
      cfg.dataset_kind = DatasetKind::synthetic;
    else if (kind == "idx")
      cfg.dataset_kind = DatasetKind::idx;
    else
      throw std::invalid_argument("config: dataset.kind must be 'synthetic' or 'idx'");
    cfg.synthetic.num_classes = static_cast<int>(kv.get_int("dataset.classes", 4));
    cfg.synthetic.train_per_class = static_cast<int>(kv.get_int("dataset.train_per_class", 64));
    cfg.synthetic.val_per_class = static_cast<int>(kv.get_int("dataset.val_per_class", 16));
    cfg.synthetic.image_hw = static_cast<int>(kv.get_int("dataset.image_hw", cfg.supernet.input_hw));
    cfg.synthetic.freq_scale = kv.get_double("dataset.freq_scale", 1.0);
    cfg.synthetic.noise = kv.get_double("dataset.noise", 0.25);
    cfg.synthetic.seed = kv.has("dataset.seed") ? kv.require_u64("dataset.seed") : cfg.seed;
    cfg.supernet.num_classes = cfg.synthetic.num_classes;
    if (cfg.dataset_kind == DatasetKind::idx) {
      cfg.idx.train_images = kv.require_string("dataset.idx_train_images");
      cfg.idx.train_labels = kv.require_string("dataset.idx_train_labels");
      cfg.idx.val_images = kv.require_string("dataset.idx_val_images");
      cfg.idx.val_labels = kv.require_string("dataset.idx_val_labels");
    } else {
      kv.get_string("dataset.idx_train_images", "");
      kv.get_string("dataset.idx_train_labels", "");
      kv.get_string("dataset.idx_val_images", "");
      kv.get_string("dataset.idx_val_labels", "");
    }
    if (cfg.dataset_kind == DatasetKind::synthetic && cfg.synthetic.image_hw != cfg.supernet.input_hw)
      throw std::invalid_argument("config: dataset.image_hw must match supernet.input_hw");

    cfg.eval_batch_size = static_cast<int>(kv.get_int("eval.batch_size", 32));
    cfg.eval_batches = static_cast<int>(kv.get_int("eval.batches", 0));

    cfg.surrogate_noise_std = kv.get_double("surrogate.noise_std", 0.05);
    cfg.surrogate_target_seed = kv.has("surrogate.target_seed") ? kv.require_u64("surrogate.target_seed") : cfg.seed;
    cfg.surrogate_repeats = static_cast<int>(kv.get_int("surrogate.repeats", 0));
    const std::string compare = kv.get_string("surrogate.compare", "");
    if (!compare.empty()) {
      std::istringstream cs(compare);
      std::string item;
      while (std::getline(cs, item, ',')) {
        if (!item.empty()) cfg.surrogate_compare.push_back(item);
      }
    }

    cfg.deterministic_timing = kv.get_bool("log.deterministic_timing", true);

    kv.reject_unknown_keys();
    cfg.evolution.validate();
    cfg.train_plan.validate();
    return cfg;
  }
};

}  // namespace evnas
