#pragma once

// Hierarchical stack of MoNNs: one per index layer (scoring prefix nodes)
// plus the item-granularity MoNN, combined by a linear ensemble. Trained
// jointly with the index (JOIM), on a frozen k-means index (SIL) or by
// alternating the two (EM).

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hsnn/datagen.hpp"
#include "hsnn/features.hpp"
#include "hsnn/index.hpp"
#include "hsnn/monn.hpp"
#include "hsnn/numerics.hpp"

namespace hsnn {

enum class TrainMode { joim, sil, em };

TrainMode parse_train_mode(const std::string& name);
std::string train_mode_name(TrainMode m);

struct HsnnConfig {
  // Item layer; its user and item towers are shared with the index layers.
  MonnConfig item{{2, 8, {32}}, {1, 8, {32}}, Preset::XS, {1.0, 1.0}};
  // Index layers, coarse first: node count and MoNN preset per layer.
  std::vector<std::size_t> nodes{20};
  std::vector<Preset> presets{Preset::M};
  bool share_user_tower = true;

  std::size_t index_layers() const noexcept { return nodes.size(); }
  std::size_t layers() const noexcept { return nodes.size() + 1; }
  std::size_t tasks() const noexcept { return item.tasks(); }
  void validate() const;
};

// One index-granularity MoNN. Its item-side input is the node embedding;
// its interaction tower reads user and item features.
struct CoarseLayer {
  Preset preset = Preset::M;
  Tower user_tower;  // enabled only when user towers are not shared
  Tower interaction_tower;
  OverArch over_arch;
  Vec calibration;
};

// z_t = bias_t + sum_j weight(t, j) * l_j + calibration_t over the layer
// logits l laid out layer by layer (coarse first, item layer last).
struct Ensemble {
  Matrix weight;
  Vec bias;
  Vec calibration;

  static Ensemble averaging(std::size_t layers, std::size_t tasks);
  std::size_t tasks() const noexcept { return bias.size(); }
  // z_t from the first `count` entries of `layer_logits`.
  double logit(std::size_t task, std::span<const double> layer_logits, std::size_t count) const;
  Vec forward(std::span<const double> layer_logits, MacCounter* counter = nullptr) const;
  std::uint64_t macs(std::size_t count) const { return count; }
};

class HsnnModel {
 public:
  HsnnModel() = default;
  // The item layer is built first from `rng`, so a single-layer model draws
  // exactly the parameters MonnModel::make would.
  static HsnnModel make(const FeatureSchema& schema, const HsnnConfig& config, Rng& rng);

  const HsnnConfig& config() const noexcept { return config_; }
  std::size_t layers() const noexcept { return config_.layers(); }
  std::size_t index_layers() const noexcept { return config_.index_layers(); }
  std::size_t tasks() const noexcept { return config_.tasks(); }
  std::size_t index_dim() const noexcept { return item_model.item_tower.output_dim(); }

  // Frozen-index modes assign items with a separate encoder.
  bool index_frozen() const noexcept { return index_encoder.enabled(); }
  Vec index_embedding(const TowerInput& item, MacCounter* counter = nullptr) const;

  // Layer-n logits (including its calibration) for a node with embedding
  // `node` whose interaction input is `user_in` joined with `item_in`.
  Vec coarse_logits(std::size_t n, std::span<const double> user_embedding,
                    const TowerInput& user_in, std::span<const double> node,
                    const TowerInput& item_in, MacCounter* counter = nullptr) const;

  HsnnModel zeros_like() const;
  void zero();
  // Optimizer order: item layer, index layers, codebooks (unless frozen), ensemble.
  void collect(NamedParams& out, bool include_codebooks);

  MonnModel item_model;
  std::vector<CoarseLayer> coarse;
  std::vector<Matrix> codebooks;
  Ensemble ensemble;
  Tower index_encoder;

 private:
  HsnnConfig config_;
};

struct HsnnOutput {
  std::vector<Vec> layer_logits;  // one Vec of T per layer
  Vec ensemble_logits;
  Prediction final;
};

// Node assignment used by a forward pass.
struct Assignment {
  enum class Kind { soft, hard, given } kind = Kind::hard;
  double alpha = 0.0;
  // kind == given: node embedding and item-side input per index layer.
  std::vector<Vec> nodes;
  std::vector<TowerInput> items;
};

HsnnOutput hsnn_forward(const HsnnModel& model, const AssembledInputs& in, const Assignment& a,
                        MacCounter* counter = nullptr);

// -(1/S) sum_i sum_layers sum_t w_t CE(y, layer prediction).
double hsnn_loss(std::span<const HsnnOutput> outputs,
                 std::span<const std::vector<std::uint8_t>> labels,
                 std::span<const double> task_weights);

struct DistillGrad {
  double loss = 0.0;
  Vec grad_index;  // gradient wrt the index-level embedding
  Vec grad_item;   // always zero: the item-level embedding is a fixed target
};

// Mean squared difference between the index-level and item-level
// interaction embeddings.
DistillGrad interaction_tower_distill(std::span<const double> item_level,
                                      std::span<const double> index_level);

struct LossWeights {
  double index = 1.0;
  double flops = 100.0;
  double reconstruction = 0.1;
  double interaction_mse = 1.0;
};

struct BatchLoss {
  double supervised = 0.0;    // every layer, item layer first
  double distillation = 0.0;  // item layer only
  double index = 0.0;
  double flops = 0.0;
  double reconstruction = 0.0;
  double interaction_mse = 0.0;
  double ensemble = 0.0;  // trains the ensemble only

  double model_total() const {
    return supervised + distillation + index + flops + reconstruction + interaction_mse;
  }
};

struct StepOptions {
  double alpha = 0.0;
  LossWeights weights;
  const MonnModel* teacher = nullptr;
  // Pooled assignment history per index layer; null disables the penalty.
  const std::vector<BalanceRegState>* balance = nullptr;
  // Per example, the item-side input of every index layer; empty rows (or
  // an empty span) fall back to the example's own item features.
  std::span<const std::vector<TowerInput>> coarse_items;
};

struct StepResult {
  BatchLoss loss;
  std::vector<Matrix> affinities;  // per index layer, batch rows x K
};

// Loss of one batch and, when `grads` is set, its gradient. With a frozen
// index the coarse layers see hard node embeddings and the LTI terms are off.
StepResult hsnn_batch(const HsnnModel& model, std::span<const AssembledInputs> inputs,
                      std::span<const std::vector<std::uint8_t>> labels, const StepOptions& opt,
                      HsnnModel* grads);

// k-means++ style seeding of every level from item embeddings and residuals.
void init_codebooks(HsnnModel& model, const Matrix& item_embeddings, Rng& rng);

struct HsnnTrainConfig {
  TrainMode mode = TrainMode::joim;
  OptimizerConfig optimizer;
  SchedulerConfig scheduler{true, 50.0, 2.0, 0};  // max_iters 0: one schedule over the stream
  LossWeights weights;
  bool warmup = true;
  double warmup_fraction = 0.25;
  bool balance = true;
  std::size_t balance_window = 8;
  std::size_t kmeans_iters = 25;
  std::size_t em_rounds = 2;
  // Feed index layers the representative items of a periodically
  // republished index, as serving does.
  bool representative_inputs = true;
  std::size_t representative_refresh = 50;
  const MonnModel* teacher = nullptr;
  std::size_t snapshot_interval = 0;
  std::function<void(std::size_t step, const HsnnModel&)> on_snapshot;
};

struct HsnnTrace {
  std::vector<BatchLoss> loss;
  std::vector<double> alpha;
  std::size_t steps = 0;
  std::size_t reclusters = 0;
  std::size_t snapshots = 0;
};

// One pass over `stream` (EM splits it into em_rounds + 1 segments). `catalog`
// is the live item set at the start; churn events in the stream update it.
HsnnTrace train_hsnn(HsnnModel& model, const ImpressionStream& stream,
                     const std::vector<Item>& catalog, const FeatureSchema& schema,
                     const I2ifIndex& i2if, const HsnnTrainConfig& config, Rng& rng);

// Index-space embeddings of `catalog`, one row per item.
Matrix catalog_embeddings(const HsnnModel& model, const std::vector<Item>& catalog,
                          const FeatureSchema& schema);

HierarchicalIndex publish_index(const HsnnModel& model, const std::vector<Item>& catalog,
                                const FeatureSchema& schema, std::uint64_t version);

// Catalog, index tree and schema needed to assemble serving-style inputs.
class ServingContext {
 public:
  ServingContext(const FeatureSchema& schema, const std::vector<Item>& catalog,
                 const HierarchicalIndex& index);

  const FeatureSchema& schema() const noexcept { return *schema_; }
  const IndexTree& tree() const noexcept { return tree_; }
  const Item& item(std::uint64_t id) const;
  const TowerInput& item_input(std::uint64_t id) const;
  // Node embeddings and representative-item inputs along an item's path.
  Assignment assignment(std::uint64_t item) const;

 private:
  const FeatureSchema* schema_;
  IndexTree tree_;
  std::map<std::uint64_t, Item> items_;
  std::map<std::uint64_t, TowerInput> inputs_;
};

enum class EvalFeatures { representative, own };

EvalFeatures parse_eval_features(const std::string& name);

// Hard-assignment predictions. `representative` feeds index layers the
// representative item of the example's node; `own` feeds the example's item
// with its hard node embedding.
std::vector<HsnnOutput> predict_hsnn(const HsnnModel& model, const std::vector<Example>& examples,
                                     const ServingContext& ctx, const I2ifIndex& i2if,
                                     EvalFeatures features);

// Per-layer and ensemble biases so each matches the slice's mean label.
void calibrate_hsnn(HsnnModel& model, const std::vector<Example>& slice,
                    const ServingContext& ctx, const I2ifIndex& i2if, EvalFeatures features);

// Every stored tensor: trainable parameters, calibration biases and, for a
// frozen index, the encoder.
NamedParams hsnn_params(HsnnModel& model);

// Snapshot directory: manifest.json + one tensor per parameter.
void save_hsnn(const std::filesystem::path& dir, HsnnModel& model, const FeatureSchema& schema,
               std::size_t step);
// `step`, when given, receives the training step stored with the snapshot.
HsnnModel load_hsnn(const std::filesystem::path& dir, const FeatureSchema& schema,
                    std::size_t* step = nullptr);

}  // namespace hsnn
