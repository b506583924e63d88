#pragma once

// Split-model serving: snapshot parts, the inverted index over per-level
// node ids, layer-wise beam retrieval, budgeted cluster-queue serving and
// MAC accounting.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "hsnn/datagen.hpp"
#include "hsnn/features.hpp"
#include "hsnn/hsnn.hpp"
#include "hsnn/index.hpp"

namespace hsnn {

// A trained HSNN frozen for serving, tagged with the index it was
// published against.
struct ServingSnapshot {
  HsnnModel model;
  std::uint64_t index_version = 0;
  std::size_t step = 0;
};

ServingSnapshot split_model(const HsnnModel& model, std::uint64_t index_version, std::size_t step);

// Stored parts: user_tower, item_tower, interaction, cluster_model, over_arch.
inline constexpr const char* kSnapshotParts[] = {"user_tower", "item_tower", "interaction",
                                                 "cluster_model", "over_arch"};

// Part name holding a parameter of hsnn_params().
std::string snapshot_part_of(const std::string& param_name);

void save_snapshot(const std::filesystem::path& dir, const ServingSnapshot& snapshot,
                   const FeatureSchema& schema);
// Rejects unknown formats, schema mismatches and parts from different steps
// or index versions.
ServingSnapshot load_snapshot(const std::filesystem::path& dir, const FeatureSchema& schema);

// Hard path of an item under the snapshot's codebooks.
std::vector<std::uint32_t> assign_item(const ServingSnapshot& snapshot, const FeatureSchema& schema,
                                       const Item& item);

// Posting lists per level plus the per-item state the final layer needs.
class InvertedIndex {
 public:
  struct Entry {
    Item item;
    TowerInput input;
    Vec embedding;  // item-tower output
  };

  InvertedIndex() = default;
  static InvertedIndex build(const ServingSnapshot& snapshot, const HierarchicalIndex& index,
                             const std::vector<Item>& catalog, const FeatureSchema& schema);

  std::uint64_t version() const noexcept { return tree_.version(); }
  std::size_t levels() const noexcept { return tree_.levels(); }
  const IndexTree& tree() const noexcept { return tree_; }
  const std::vector<IndexNode>& level(std::size_t n) const { return tree_.level(n); }
  std::size_t size() const noexcept { return entries_.size(); }
  bool contains(std::uint64_t id) const { return entries_.count(id) != 0; }
  const Entry& entry(std::uint64_t id) const;
  const std::map<std::uint64_t, Entry>& entries() const noexcept { return entries_; }
  // Every level's posting lists partition the live items.
  bool is_partition() const;

 private:
  IndexTree tree_;
  std::map<std::uint64_t, Entry> entries_;
};

// Republishes the index after churn: removed items leave, added items are
// assigned by the snapshot's item tower. The pair is published together:
// `snapshot` is the input retagged with the new version.
struct RefreshedIndex {
  ServingSnapshot snapshot;
  HierarchicalIndex index;
  InvertedIndex inverted;
};
RefreshedIndex refresh_index(const ServingSnapshot& snapshot, const std::vector<Item>& catalog,
                             const FeatureSchema& schema, std::uint64_t version);

struct RetrievalBudget {
  std::vector<std::size_t> beam;  // nodes kept per index layer
  std::size_t top_k = 100;
  std::size_t max_items = std::numeric_limits<std::size_t>::max();

  void validate(std::size_t index_layers) const;
};

// Beams that keep every node.
RetrievalBudget exhaustive_budget(const InvertedIndex& index, std::size_t top_k);

struct CostCounter {
  std::uint64_t macs = 0;  // measured by the instrumented forwards
  std::uint64_t user_macs = 0;
  std::vector<std::uint64_t> node_evals;  // I_n per index layer
  std::uint64_t items_scored = 0;
};

struct ScoredItem {
  std::uint64_t id = 0;
  double score = 0.0;
  friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

struct RetrievalResult {
  std::vector<ScoredItem> items;
  CostCounter cost;
};

// User, item and interaction inputs as serving assembles them (interaction
// features from the I2IF index only).
AssembledInputs serving_inputs(const FeatureSchema& schema, const User& user,
                               const InvertedIndex::Entry& item, const I2ifIndex& i2if);

// Node-first traversal: score each candidate node with its representative
// item, rank by the partial ensemble, keep the beam, expand; the item layer
// scores the surviving postings. Scores are task-0 ensemble logits; ties
// go to the lower id.
RetrievalResult retrieve_layerwise(const ServingSnapshot& snapshot, const InvertedIndex& index,
                                   const FeatureSchema& schema, const User& user,
                                   const I2ifIndex& i2if, const RetrievalBudget& budget);

// Full-ensemble score of every live item, each computed from scratch.
RetrievalResult retrieve_brute_force(const ServingSnapshot& snapshot, const InvertedIndex& index,
                                     const FeatureSchema& schema, const User& user,
                                     const I2ifIndex& i2if, std::size_t top_k);

struct QueueResult {
  std::vector<std::uint64_t> items;  // emission order
  std::vector<std::size_t> clusters;  // finest-level node ids in score order
  CostCounter cost;
};

// Scores every finest-level node, sorts descending and emits postings
// cluster by cluster until max_items.
QueueResult retrieve_budgeted_queue(const ServingSnapshot& snapshot, const InvertedIndex& index,
                                    const FeatureSchema& schema, const User& user,
                                    std::size_t max_items);

struct CostReport {
  std::uint64_t measured = 0;  // trace MACs less the user tower
  // sum_n M_n * I_n + m * items_scored; the one-off user tower is left out
  std::uint64_t formula = 0;
  std::vector<std::uint64_t> node_macs;  // M_n per index layer
  std::uint64_t item_macs = 0;            // m
  std::uint64_t user_macs = 0;
  double relative_error = 0.0;
};

// Per-evaluation MACs of index layer n: interaction tower, over-arch and the
// partial ensemble through layer n.
std::uint64_t node_eval_macs(const HsnnModel& model, std::size_t n);
std::uint64_t item_eval_macs(const HsnnModel& model);
// Per-item MACs of a MoNN scoring one candidate (interaction tower + over-arch).
std::uint64_t monn_item_macs(const MonnModel& model);

CostReport account_cost(const ServingSnapshot& snapshot, const CostCounter& trace);

// One line per item: user_id rank item_id score.
std::string format_results(std::uint64_t user_id, const std::vector<ScoredItem>& items);

}  // namespace hsnn
