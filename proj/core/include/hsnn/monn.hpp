#pragma once

// Modular neural network: user, item and interaction towers feeding an
// over-arch that emits one logit per task.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hsnn/datagen.hpp"
#include "hsnn/features.hpp"
#include "hsnn/numerics.hpp"

namespace hsnn {

struct TowerConfig {
  std::size_t num_embed = 1;
  std::size_t dim = 8;
  std::vector<std::size_t> hidden;

  std::size_t width() const noexcept { return num_embed * dim; }
  friend bool operator==(const TowerConfig&, const TowerConfig&) = default;
};

// Sum-pooled embeddings per sparse slot, concatenated after the dense
// block, then a relu MLP with a linear output of num_embed * dim.
class Tower {
 public:
  struct Tape {
    Vec pooled;
    Mlp::Tape mlp;
  };

  Tower() = default;
  static Tower make(const TowerLayout& layout, const TowerConfig& config, Rng& rng);

  bool enabled() const noexcept { return mlp_.depth() > 0; }
  std::size_t output_dim() const noexcept { return enabled() ? config_.width() : 0; }
  const TowerConfig& config() const noexcept { return config_; }
  const TowerLayout& layout() const noexcept { return layout_; }
  std::uint64_t macs() const { return mlp_.macs(); }

  Vec pool(const TowerInput& in) const;
  Vec forward(const TowerInput& in, MacCounter* counter = nullptr) const;
  Vec forward(const TowerInput& in, Tape& tape) const;
  void backward(const TowerInput& in, const Tape& tape, std::span<const double> grad_out,
                Tower& grads) const;

  Tower zeros_like() const;
  void zero();
  void collect(NamedParams& out, const std::string& prefix);

 private:
  TowerLayout layout_;
  TowerConfig config_;
  std::vector<EmbeddingTable> tables_;
  Mlp mlp_;
};

enum class OverArchKind { mlp, dot };

struct OverArchConfig {
  OverArchKind kind = OverArchKind::mlp;
  std::vector<std::size_t> hidden;
  friend bool operator==(const OverArchConfig&, const OverArchConfig&) = default;
};

// mlp: logits = MLP(concat(user, item, interaction)).
// dot: logit_t = <user block (t mod blocks), item> + bias_t, the two-tower
//      score; requires the user width to be a multiple of the item width
//      and no interaction input.
class OverArch {
 public:
  struct Tape {
    Vec input;
    Mlp::Tape mlp;
  };
  struct InputGrads {
    Vec user;
    Vec item;
    Vec interaction;
  };

  OverArch() = default;
  static OverArch make(const OverArchConfig& config, std::size_t user_dim, std::size_t item_dim,
                       std::size_t interaction_dim, std::size_t tasks, Rng& rng);

  OverArchKind kind() const noexcept { return config_.kind; }
  const OverArchConfig& config() const noexcept { return config_; }
  std::size_t tasks() const noexcept { return tasks_; }
  std::uint64_t macs() const;

  Vec forward(std::span<const double> user, std::span<const double> item,
              std::span<const double> interaction, MacCounter* counter = nullptr) const;
  Vec forward(std::span<const double> user, std::span<const double> item,
              std::span<const double> interaction, Tape& tape) const;
  InputGrads backward(std::span<const double> user, std::span<const double> item,
                      std::span<const double> interaction, const Tape& tape,
                      std::span<const double> grad_logits, OverArch& grads) const;

  Mlp& mlp() noexcept { return mlp_; }
  Vec& dot_bias() noexcept { return bias_; }

  OverArch zeros_like() const;
  void zero();
  void collect(NamedParams& out, const std::string& prefix);

 private:
  void check(std::size_t u, std::size_t i, std::size_t x) const;

  OverArchConfig config_;
  std::size_t user_dim_ = 0;
  std::size_t item_dim_ = 0;
  std::size_t interaction_dim_ = 0;
  std::size_t tasks_ = 0;
  Mlp mlp_;
  Vec bias_;
};

// Desk-scale size ladder. XS is the two-tower model.
enum class Preset { XS, S, M, L };

struct PresetSpec {
  TowerConfig interaction;  // num_embed == 0 disables the tower
  OverArchConfig over_arch;
};

PresetSpec preset_spec(Preset p);
Preset parse_preset(const std::string& name);
std::string preset_name(Preset p);

struct MonnConfig {
  TowerConfig user{2, 8, {32}};
  TowerConfig item{1, 8, {32}};
  Preset preset = Preset::S;
  Vec task_weights{1.0, 1.0};

  std::size_t tasks() const noexcept { return task_weights.size(); }
};

struct Prediction {
  Vec logits;
  Vec probs;
};

Prediction make_prediction(Vec logits);

// Binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7].
double clamped_bce(double prob, double target);
// d clamped_bce(sigmoid(logit), target) / d logit; zero where the clamp binds.
double clamped_bce_logit_grad(double logit, double target);

inline constexpr double kProbClamp = 1e-7;

// One example's share of the batch loss and its gradient wrt the logits,
// both already divided by the batch size.
struct ExampleLoss {
  double supervised = 0.0;
  double distillation = 0.0;
  Vec grad_logits;
};

ExampleLoss example_loss(const Prediction& pred, std::span<const std::uint8_t> labels,
                         std::span<const double> task_weights, std::size_t batch_size,
                         const Vec* teacher_probs = nullptr);

double supervised_loss(std::span<const Prediction> preds,
                       std::span<const std::vector<std::uint8_t>> labels,
                       std::span<const double> task_weights);
double distillation_loss(std::span<const Prediction> student, std::span<const Vec> teacher_probs);
double total_loss(std::span<const Prediction> preds,
                  std::span<const std::vector<std::uint8_t>> labels,
                  std::span<const double> task_weights,
                  const std::vector<Vec>* teacher_probs);

class MonnModel {
 public:
  struct Tape {
    Tower::Tape user, item, interaction;
    OverArch::Tape over_arch;
    Vec user_embedding, item_embedding, interaction_embedding;
  };

  MonnModel() = default;
  static MonnModel make(const FeatureSchema& schema, const MonnConfig& config, Rng& rng);

  const MonnConfig& config() const noexcept { return config_; }
  std::size_t tasks() const noexcept { return config_.tasks(); }

  Prediction forward(const AssembledInputs& in, MacCounter* counter = nullptr) const;
  Prediction forward(const AssembledInputs& in, Tape& tape) const;
  // Accumulates parameter gradients given dLoss/dlogits.
  void backward(const AssembledInputs& in, const Tape& tape, std::span<const double> grad_logits,
                MonnModel& grads) const;

  MonnModel zeros_like() const;
  void zero();
  // Trainable parameters only; calibration biases are fitted, not learned.
  void collect(NamedParams& out);

  Tower user_tower;
  Tower item_tower;
  Tower interaction_tower;
  OverArch over_arch;
  Vec calibration;  // per-task logit shift

 private:
  MonnConfig config_;
};

Prediction monn_forward(const MonnModel& model, const AssembledInputs& in);

// Per-task bias b with mean sigmoid(logit + b) == mean label (bisection).
double fit_calibration_bias(std::span<const double> logits, std::span<const std::uint8_t> labels);

struct MonnTrainConfig {
  OptimizerConfig optimizer;
  // Calls on_snapshot every `snapshot_interval` batches (0 disables).
  std::size_t snapshot_interval = 0;
  std::function<void(std::size_t step, const MonnModel&)> on_snapshot;
  // Soft-label teacher for the distillation term; absent disables it.
  const MonnModel* teacher = nullptr;
};

struct TrainTrace {
  std::vector<double> loss;  // per batch, before the step
  std::size_t steps = 0;
  std::size_t snapshots = 0;
};

// Single pass over `stream` in the given order. Throws if timestamps
// decrease. Churn events update a private copy of the I2IF index.
TrainTrace train_monn(MonnModel& model, const ImpressionStream& stream, const FeatureSchema& schema,
                      const I2ifIndex& i2if, const MonnTrainConfig& config);

void calibrate_monn(MonnModel& model, const std::vector<Example>& slice,
                    const FeatureSchema& schema, const I2ifIndex& i2if);

// Snapshot directory: manifest.json + one tensor file per parameter.
void save_monn(const std::filesystem::path& dir, MonnModel& model, const FeatureSchema& schema,
               std::size_t step);
MonnModel load_monn(const std::filesystem::path& dir, const FeatureSchema& schema);

std::vector<std::uint8_t> labels_of(const Example& e);

}  // namespace hsnn
