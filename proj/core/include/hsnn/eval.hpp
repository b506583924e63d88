#pragma once

// Offline metrics: normalized entropy, recall, clustering agreement and the
// per-run metrics report.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hsnn/numerics.hpp"

namespace hsnn {

// Mean log loss of `probs` divided by that of the empirical base rate
// (natural log; probabilities clamped like the training loss). Throws
// NumericError when the labels are all equal.
double normalized_entropy(std::span<const double> probs, std::span<const std::uint8_t> labels);

// |retrieved ∩ relevant| / |relevant|; 0 for an empty relevant set.
double recall_at_k(std::span<const std::uint64_t> retrieved,
                   std::span<const std::uint64_t> relevant);

double adjusted_rand_index(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

struct MetricsReport {
  std::string run_id;
  std::string mode;
  std::string toggles;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t dataset_hash = 0;
  Vec ne;                             // ensemble, per task
  std::vector<Vec> layer_ne;          // per layer (coarse first), per task
  std::map<std::size_t, double> recall;  // K -> mean recall@K
  std::vector<std::vector<std::size_t>> occupancy;  // per level, items per code
  double occupancy_ratio = 0.0;       // first level
  std::uint64_t macs_total = 0;
  std::uint64_t brute_force_macs = 0;
  std::uint64_t items_scored = 0;
  std::size_t train_steps = 0;

  // Mean NE over tasks, the single-number summary used for comparisons.
  double mean_ne() const;
  std::string to_json() const;
  std::uint64_t hash() const;
};

std::string csv_header(const std::vector<std::size_t>& ks, std::size_t tasks);
// Deltas are against `baseline` (same columns).
std::string csv_row(const MetricsReport& r, const MetricsReport& baseline);

}  // namespace hsnn
