#pragma once

// Learned hierarchical item index: soft L2 assignment (LTI), residual
// codebooks, the temperature schedule, the pooled FLOPs balance penalty,
// k-means baselines and the on-disk index artifact.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "hsnn/numerics.hpp"

namespace hsnn {

// d_k = ||v - c_k||^2 for every row c_k of `nodes`.
Vec lti_distance(std::span<const double> v, const Matrix& nodes);
// softmax(-alpha * d) with max-subtraction.
Vec lti_soft_assign(std::span<const double> d, double alpha);
// argmin_k d_k, lowest k on ties.
std::size_t lti_hard_assign(std::span<const double> d);
// sum_k a_k c_k
Vec lti_index_embedding(std::span<const double> a, const Matrix& nodes);

// One layer's forward state for a single input vector.
struct LtiForward {
  Vec distances;
  Vec affinities;
  Vec embedding;  // c-bar
  std::size_t hard = 0;
  bool one_hot = false;  // forward ran in hard mode
};

// hard = true replaces the affinities with a one-hot at the argmin.
LtiForward lti_forward(std::span<const double> v, const Matrix& nodes, double alpha,
                       bool hard = false);

// Backward through c-bar = sum a_k c_k, a = softmax(-alpha d), d = ||v - c_k||^2.
// `grad_affinity` is an extra direct dL/da (may be empty). Accumulates dL/dc
// into `grad_nodes` and returns dL/dv. Hard forwards pass gradient to the
// chosen node only and nothing to v.
Vec lti_backward(std::span<const double> v, const Matrix& nodes, double alpha,
                 const LtiForward& fwd, std::span<const double> grad_embedding,
                 std::span<const double> grad_affinity, Matrix& grad_nodes);

struct IndexLoss {
  double loss = 0.0;
  Vec grad_user;
  Vec grad_embedding;
};

// Binary cross-entropy of sigmoid(<u, c-bar>) against y, clamped like the
// supervised loss.
IndexLoss lti_index_loss(std::span<const double> user, std::span<const double> embedding,
                         double label);

struct SchedulerConfig {
  bool enabled = true;
  double max_alpha = 50.0;
  double exponent = 2.0;
  std::size_t max_iters = 1000;
};

// max_alpha * (iter / max_iters)^exp, held at max_alpha past max_iters.
// A disabled scheduler returns max_alpha throughout.
double scheduler_alpha(const SchedulerConfig& config, std::size_t iter);

// Linear ramp 0 -> target over warmup_steps, then constant.
double warmup_weight(std::size_t step, std::size_t warmup_steps, double target);

// Sum over nodes of the squared mean assignment of `pooled` (rows x K).
double flops_regularizer(const Matrix& pooled);

// Ring buffer of the last `window` batches' soft assignments.
class BalanceRegState {
 public:
  BalanceRegState() = default;
  BalanceRegState(std::size_t nodes, std::size_t window);

  std::size_t nodes() const noexcept { return nodes_; }
  std::size_t window() const noexcept { return window_; }
  std::size_t buffered() const noexcept { return past_.size(); }

  struct Penalty {
    double value = 0.0;
    // dPenalty / d a_{j,k} for any current row j.
    Vec grad_row;
  };

  // Penalty over the buffer plus `current`; gradient flows only into the
  // current rows.
  Penalty evaluate(const Matrix& current) const;
  // Appends `current`, evicting the oldest batch beyond the window.
  void push(Matrix current);
  Matrix pooled(const Matrix& current) const;

 private:
  std::size_t nodes_ = 0;
  std::size_t window_ = 8;
  std::deque<Matrix> past_;
};

// Forward state of the residual chain r_1 = v, r_{n+1} = r_n - c-bar_n,
// q_n = c-bar_1 + ... + c-bar_n.
struct ResidualChain {
  std::vector<Vec> residuals;  // r_1 .. r_{N+1}
  std::vector<LtiForward> levels;
  std::vector<Vec> quantized;  // q_1 .. q_N
  double reconstruction = 0.0;  // ||q_N - v||^2

  std::vector<std::uint32_t> path() const;
};

ResidualChain residual_chain(std::span<const double> v, const std::vector<Matrix>& codebooks,
                             double alpha, bool hard = false);

// Gradients into the chain: dL/dq_n per level, optional dL/da_n per level and
// dL/dr_{N+1}. Each may be empty. Accumulates into `grad_codebooks`; returns dL/dv.
Vec residual_chain_backward(std::span<const double> v, const std::vector<Matrix>& codebooks,
                            double alpha, const ResidualChain& chain,
                            const std::vector<Vec>& grad_quantized,
                            const std::vector<Vec>& grad_affinity,
                            std::span<const double> grad_final_residual,
                            std::vector<Matrix>& grad_codebooks);

// Hard residual path of v through the codebooks.
std::vector<std::uint32_t> residual_assign(std::span<const double> v,
                                           const std::vector<Matrix>& codebooks);

// For every node row k: the row j of `points` minimising ||points_j - nodes_k||^2
// over all points, lowest j on ties.
std::vector<std::size_t> select_representatives(const Matrix& nodes, const Matrix& points);

struct KMeansResult {
  Matrix centroids;
  std::vector<std::uint32_t> assignment;
  std::vector<double> objective;  // after each Lloyd iteration
};

// k-means++ seeds: k rows of `points` drawn by squared-distance sampling.
Matrix kmeans_plus_plus(const Matrix& points, std::size_t k, Rng& rng);

// Lloyd's algorithm with k-means++ seeding. Empty clusters keep their centroid.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::size_t iters, Rng& rng);

// Level n clusters the residuals left by levels 1..n-1.
std::vector<Matrix> residual_kmeans(const Matrix& points, const std::vector<std::size_t>& ks,
                                    std::size_t iters, Rng& rng);

// One frozen layer: node embeddings, item mapping, representatives.
struct IndexLayer {
  Matrix nodes;
  std::vector<std::uint32_t> mapping;
  std::vector<std::size_t> representatives;
  double alpha = 0.0;
};

IndexLayer kmeans_sil(const Matrix& item_embeddings, std::size_t k, std::size_t iters, Rng& rng);

// Alternates train(round) and recluster(round) for `rounds` rounds.
void em_joint(std::size_t rounds, const std::function<void(std::size_t)>& train,
              const std::function<void(std::size_t)>& recluster);

// Sum of ||q_N - v||^2 over rows under hard assignment.
double quantization_error(const Matrix& points, const std::vector<Matrix>& codebooks);

// Published index: residual codebooks, hard path and literal per-layer
// representatives for every live item.
class HierarchicalIndex {
 public:
  HierarchicalIndex() = default;

  // Paths and representatives computed from `embeddings` (one row per id).
  static HierarchicalIndex build(std::vector<Matrix> codebooks, std::vector<std::uint64_t> item_ids,
                                 const Matrix& embeddings, std::uint64_t version);

  std::size_t levels() const noexcept { return codebooks_.size(); }
  std::size_t dim() const { return codebooks_.empty() ? 0 : codebooks_[0].cols(); }
  std::uint64_t version() const noexcept { return version_; }
  const std::vector<Matrix>& codebooks() const noexcept { return codebooks_; }
  const std::vector<std::uint64_t>& item_ids() const noexcept { return item_ids_; }
  const std::vector<std::vector<std::uint32_t>>& paths() const noexcept { return paths_; }
  // Index-space embedding per item, rows aligned with item_ids().
  const Matrix& embeddings() const noexcept { return embeddings_; }
  // representatives()[n][k]: item id closest to code k of level n among all
  // items, measured on level-n residuals.
  const std::vector<std::vector<std::uint64_t>>& representatives() const noexcept {
    return representatives_;
  }

  bool contains(std::uint64_t id) const;
  // Throws StaleError for unknown ids.
  const std::vector<std::uint32_t>& path_of(std::uint64_t id) const;
  // Per level, items per code.
  std::vector<std::vector<std::size_t>> occupancy() const;

  friend bool operator==(const HierarchicalIndex&, const HierarchicalIndex&) = default;
  friend HierarchicalIndex load_index(const std::filesystem::path& dir);

 private:
  std::vector<Matrix> codebooks_;
  std::vector<std::uint64_t> item_ids_;  // ascending
  std::vector<std::vector<std::uint32_t>> paths_;
  Matrix embeddings_;
  std::vector<std::vector<std::uint64_t>> representatives_;
  std::uint64_t version_ = 0;
};

// A node of the published hierarchy: the items sharing a code prefix.
struct IndexNode {
  std::vector<std::uint32_t> prefix;
  Vec embedding;  // sum of the prefix's codewords
  std::vector<std::uint64_t> items;  // ascending
  std::uint64_t representative = 0;
  std::vector<std::size_t> children;  // node ids one level down
};

// Nonempty prefix nodes per level, ordered by prefix. Level-1
// representatives are the index's literal ones (closest item overall);
// deeper nodes take the closest item in their own posting list.
class IndexTree {
 public:
  IndexTree() = default;
  static IndexTree build(const HierarchicalIndex& index);

  std::size_t levels() const noexcept { return levels_.size(); }
  const std::vector<IndexNode>& level(std::size_t n) const { return levels_.at(n); }
  std::uint64_t version() const noexcept { return version_; }
  // Node ids of `item` at every level; throws StaleError for unknown items.
  const std::vector<std::size_t>& nodes_of(std::uint64_t item) const;

 private:
  std::vector<std::vector<IndexNode>> levels_;
  std::map<std::uint64_t, std::vector<std::size_t>> item_nodes_;
  std::uint64_t version_ = 0;
};

// max / mean of the item count per node, empty nodes included in the mean;
// 0 when there are no items.
double occupancy_ratio(std::span<const std::size_t> counts);

// Directory: manifest.json, level<n>.bin codebooks and embeddings.bin.
void save_index(const std::filesystem::path& dir, const HierarchicalIndex& index);
HierarchicalIndex load_index(const std::filesystem::path& dir);

}  // namespace hsnn
