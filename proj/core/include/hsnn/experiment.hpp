#pragma once

// Run configuration, the gen-data -> train -> index -> evaluate pipeline and
// the ablation grid.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hsnn/datagen.hpp"
#include "hsnn/eval.hpp"
#include "hsnn/features.hpp"
#include "hsnn/hsnn.hpp"
#include "hsnn/serving.hpp"

namespace hsnn {

struct EvalConfig {
  std::size_t calibration_examples = 2000;
  std::size_t eval_examples = 4000;
  EvalFeatures features = EvalFeatures::representative;
  std::vector<std::size_t> recall_k{10, 50, 100};
  std::size_t relevant_count = 50;  // ground-truth items per user
  std::size_t eval_users = 100;
  // Nodes kept per index layer at serving; empty keeps a quarter (rounded up).
  std::vector<std::size_t> beam;
};

struct RunConfig {
  SyntheticWorldConfig world;
  StreamConfig stream;
  std::size_t category_modulus = 64;
  std::size_t embed_dim = 4;
  HsnnConfig model;
  HsnnTrainConfig train;
  EvalConfig eval;
  std::uint64_t index_version = 1;

  RunConfig();
  FeatureSchema schema() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  std::uint64_t hash() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

// Independent stream for each consumer of a run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag);

struct Dataset {
  World initial;  // catalog when the stream starts
  World world;    // after the stream's churn events
  ImpressionStream stream;
  std::vector<Example> calibration;
  std::vector<Example> evaluation;

  std::uint64_t hash() const;
};

Dataset generate_dataset(const RunConfig& config, std::uint64_t seed);
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

struct TrainedRun {
  HsnnModel model;
  HsnnTrace trace;
  HierarchicalIndex index;  // published on the final catalog, used for calibration
};

// Trains, publishes the index and calibrates on the calibration slice.
TrainedRun train_run(const RunConfig& config, std::uint64_t seed, const Dataset& data);

// Per-batch loss terms as CSV.
std::string trace_csv(const HsnnTrace& trace);

MetricsReport evaluate_run(const RunConfig& config, std::uint64_t seed, const Dataset& data,
                           const ServingSnapshot& snapshot, const HierarchicalIndex& index,
                           const std::string& toggles = "baseline");

MetricsReport run_experiment(const RunConfig& config, std::uint64_t seed,
                             const std::string& toggles = "baseline");

// Beam widths for `index` under `config` (explicit or a quarter of each level).
RetrievalBudget serving_budget(const EvalConfig& config, const InvertedIndex& index);

inline constexpr const char* kToggleNames[] = {"scheduler", "warmup", "balance"};

// Copy of `base` with the named components disabled.
RunConfig apply_toggles(const RunConfig& base, const std::vector<std::string>& off);

struct AblationSpec {
  std::vector<TrainMode> modes;       // empty: the base config's mode
  std::vector<std::string> toggles;   // each row switches a subset off
  std::vector<std::uint64_t> seeds;   // empty: {1}
};

// Rows: seed x mode x 2^|toggles| on/off combinations, the all-on row first.
std::vector<MetricsReport> run_ablation_grid(const RunConfig& base, const AblationSpec& spec);

// Deltas are against the first row with the same seed.
std::string ablation_csv(const std::vector<MetricsReport>& rows, const RunConfig& base);

}  // namespace hsnn
