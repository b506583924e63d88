#pragma once

// Dense numeric substrate: vectors, matrices, MLPs with explicit backward,
// hashed embedding tables, optimizers and a finite-difference checker.
// Everything is 64-bit float and single-threaded.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hsnn/error.hpp"

namespace hsnn {

using Vec = std::vector<double>;
using Rng = std::mt19937_64;

// Parameters (or their gradients) flattened into an ordered list of views.
// A model and a gradient object of the same shape produce lists that line
// up element for element.
using ParamSet = std::vector<std::span<double>>;

// A parameter view with a stable name and logical shape, used for
// snapshots. Collection order is the optimizer's view order.
struct NamedParam {
  std::string name;
  std::span<double> values;
  std::vector<std::size_t> shape;
};
using NamedParams = std::vector<NamedParam>;

ParamSet views(const NamedParams& named);

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);
// y += s * x
void axpy(double s, std::span<const double> x, std::span<double> y);
void add_into(std::span<const double> x, std::span<double> y);
Vec concat(std::initializer_list<std::span<const double>> parts);
double sigmoid(double x);
bool all_finite(std::span<const double> x);

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  void fill(double v);
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Multiply-accumulate tally; instrumented forwards add to it.
struct MacCounter {
  std::uint64_t macs = 0;
};

enum class Activation { relu, identity };

struct DenseLayer {
  Matrix weight;  // out x in
  Vec bias;
  Activation activation = Activation::identity;

  std::size_t input_dim() const noexcept { return weight.cols(); }
  std::size_t output_dim() const noexcept { return weight.rows(); }
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

class Mlp {
 public:
  // Per-layer inputs and pre-activations recorded by a forward pass.
  struct Tape {
    std::vector<Vec> inputs;
    std::vector<Vec> preactivations;
  };

  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers);

  // Hidden layers use relu; the final layer uses `output_activation`.
  static Mlp make(std::size_t input_dim, std::span<const std::size_t> widths,
                  Activation output_activation, Rng& rng);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t depth() const noexcept { return layers_.size(); }
  std::size_t param_count() const;
  // MACs for one evaluation: sum of in*out over layers.
  std::uint64_t macs() const;

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  Vec forward(std::span<const double> x, MacCounter* counter = nullptr) const;
  Vec forward(std::span<const double> x, Tape& tape) const;

  // Accumulates parameter gradients into `grads` (same shape) and returns
  // dLoss/dx.
  Vec backward(const Tape& tape, std::span<const double> grad_out, Mlp& grads) const;

  Mlp zeros_like() const;
  void zero();
  void collect(NamedParams& out, const std::string& prefix);

  friend bool operator==(const Mlp&, const Mlp&) = default;

 private:
  std::vector<DenseLayer> layers_;
};

struct MlpBackward {
  Mlp param_grads;
  Vec grad_in;
};

Vec mlp_forward(const Mlp& mlp, std::span<const double> x);
MlpBackward mlp_backward(const Mlp& mlp, std::span<const double> x,
                         std::span<const double> grad_out);

using SparseIds = std::vector<std::uint64_t>;

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t rows, std::size_t dim) : table_(rows, dim) {}
  static EmbeddingTable make(std::size_t rows, std::size_t dim, double stddev, Rng& rng);

  std::size_t rows() const noexcept { return table_.rows(); }
  std::size_t dim() const noexcept { return table_.cols(); }

  // Multiply-shift hash of the raw id, reduced modulo the row count.
  std::size_t slot(std::uint64_t id) const;

  Vec lookup_sum(std::span<const std::uint64_t> ids) const;
  void backward_sum(std::span<const std::uint64_t> ids, std::span<const double> grad,
                    EmbeddingTable& grads) const;

  Matrix& matrix() noexcept { return table_; }
  const Matrix& matrix() const noexcept { return table_; }

  EmbeddingTable zeros_like() const { return EmbeddingTable(rows(), dim()); }
  void zero() { table_.fill(0.0); }
  void collect(NamedParams& out, const std::string& prefix) {
    out.push_back({prefix, table_.values(), {table_.rows(), table_.cols()}});
  }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;

 private:
  Matrix table_;
};

Vec embedding_lookup_sum(const EmbeddingTable& table, std::span<const std::uint64_t> ids);

enum class OptimizerKind { sgd, adagrad };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adagrad;
  double learning_rate = 0.05;
  double epsilon = 1e-10;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  const OptimizerConfig& config() const noexcept { return config_; }
  // Adagrad squared-gradient sums, one buffer per parameter view.
  const std::vector<Vec>& accumulators() const noexcept { return accum_; }

  // sgd:     p -= lr * g
  // adagrad: acc += g^2; p -= lr * g / sqrt(acc + eps)
  void step(const ParamSet& params, const ParamSet& grads);

 private:
  OptimizerConfig config_;
  std::vector<Vec> accum_;
};

OptimizerKind parse_optimizer_kind(const std::string& name);

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor: rel = |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double max_relative_error = 0.0;
  std::size_t worst_view = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed() const noexcept { return failures == 0; }
};

// Central-difference check of `analytic` against `loss` evaluated while
// nudging each entry of `params`. Params are restored afterwards.
GradCheckReport finite_diff_check(const std::function<double()>& loss, const ParamSet& params,
                                  const ParamSet& analytic, const GradCheckOptions& options = {});

double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);
double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);
std::size_t uniform_index(Rng& rng, std::size_t n);

}  // namespace hsnn
