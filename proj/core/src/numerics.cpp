#include "hsnn/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace hsnn {

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: sizes " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("squared_distance: sizes " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double squared_norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

void axpy(double s, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

void add_into(std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw DimensionError("add_into: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += x[i];
}

Vec concat(std::initializer_list<std::span<const double>> parts) {
  std::size_t n = 0;
  for (auto p : parts) n += p.size();
  Vec out;
  out.reserve(n);
  for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Matrix: storage " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.bias.size() != l.output_dim()) {
      throw DimensionError("layer " + std::to_string(i) + ": bias size " +
                           std::to_string(l.bias.size()) + " != output dim " +
                           std::to_string(l.output_dim()));
    }
    if (i > 0 && layers_[i - 1].output_dim() != l.input_dim()) {
      throw DimensionError("layer " + std::to_string(i) + ": input dim " +
                           std::to_string(l.input_dim()) + " does not chain with previous output " +
                           std::to_string(layers_[i - 1].output_dim()));
    }
  }
}

Mlp Mlp::make(std::size_t input_dim, std::span<const std::size_t> widths,
              Activation output_activation, Rng& rng) {
  std::vector<DenseLayer> layers;
  std::size_t in = input_dim;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::size_t out = widths[i];
    DenseLayer l;
    l.weight = Matrix(out, in);
    l.bias.assign(out, 0.0);
    l.activation = (i + 1 == widths.size()) ? output_activation : Activation::relu;
    const double scale = std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(in, 1)));
    for (double& w : l.weight.values()) w = normal(rng, 0.0, scale);
    for (double& b : l.bias) b = normal(rng, 0.0, 0.01);
    layers.push_back(std::move(l));
    in = out;
  }
  return Mlp(std::move(layers));
}

std::size_t Mlp::input_dim() const { return layers_.empty() ? 0 : layers_.front().input_dim(); }
std::size_t Mlp::output_dim() const { return layers_.empty() ? 0 : layers_.back().output_dim(); }

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

std::uint64_t Mlp::macs() const {
  std::uint64_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::uint64_t>(l.weight.size());
  return n;
}

namespace {

void affine(const DenseLayer& l, std::span<const double> x, Vec& out) {
  const std::size_t rows = l.output_dim();
  const std::size_t cols = l.input_dim();
  out.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* w = l.weight.values().data() + r * cols;
    double s = l.bias[r];
    for (std::size_t c = 0; c < cols; ++c) s += w[c] * x[c];
    out[r] = s;
  }
}

void activate(Activation a, Vec& v) {
  if (a == Activation::relu) {
    for (double& x : v) x = x > 0.0 ? x : 0.0;
  }
}

void check_input(const Mlp& mlp, std::size_t n) {
  if (mlp.depth() == 0) throw DimensionError("mlp has no layers");
  if (n != mlp.input_dim()) {
    throw DimensionError("layer 0: expected input dim " + std::to_string(mlp.input_dim()) +
                         ", got " + std::to_string(n));
  }
}

}  // namespace

Vec Mlp::forward(std::span<const double> x, MacCounter* counter) const {
  check_input(*this, x.size());
  Vec cur(x.begin(), x.end());
  Vec next;
  for (const auto& l : layers_) {
    affine(l, cur, next);
    activate(l.activation, next);
    cur.swap(next);
    if (counter) counter->macs += l.weight.size();
  }
  return cur;
}

Vec Mlp::forward(std::span<const double> x, Tape& tape) const {
  check_input(*this, x.size());
  tape.inputs.resize(layers_.size());
  tape.preactivations.resize(layers_.size());
  Vec cur(x.begin(), x.end());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    tape.inputs[i] = cur;
    affine(layers_[i], cur, tape.preactivations[i]);
    cur = tape.preactivations[i];
    activate(layers_[i].activation, cur);
  }
  return cur;
}

Vec Mlp::backward(const Tape& tape, std::span<const double> grad_out, Mlp& grads) const {
  if (grad_out.size() != output_dim()) {
    throw DimensionError("layer " + std::to_string(layers_.size() - 1) +
                         ": grad_out dim " + std::to_string(grad_out.size()) +
                         " != output dim " + std::to_string(output_dim()));
  }
  if (tape.inputs.size() != layers_.size() || grads.layers_.size() != layers_.size()) {
    throw DimensionError("mlp backward: tape or gradient shape does not match the network");
  }
  Vec g(grad_out.begin(), grad_out.end());
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const DenseLayer& l = layers_[i];
    DenseLayer& gl = grads.layers_[i];
    const Vec& pre = tape.preactivations[i];
    if (l.activation == Activation::relu) {
      for (std::size_t r = 0; r < g.size(); ++r) {
        if (!(pre[r] > 0.0)) g[r] = 0.0;
      }
    }
    const Vec& in = tape.inputs[i];
    const std::size_t rows = l.output_dim();
    const std::size_t cols = l.input_dim();
    Vec gin(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double gr = g[r];
      if (gr == 0.0) continue;
      gl.bias[r] += gr;
      double* gw = gl.weight.values().data() + r * cols;
      const double* w = l.weight.values().data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        gw[c] += gr * in[c];
        gin[c] += gr * w[c];
      }
    }
    g.swap(gin);
  }
  return g;
}

Mlp Mlp::zeros_like() const {
  Mlp out = *this;
  out.zero();
  return out;
}

void Mlp::zero() {
  for (auto& l : layers_) {
    l.weight.fill(0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
}

void Mlp::collect(NamedParams& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const std::string base = prefix + ".l" + std::to_string(i);
    out.push_back({base + ".w", l.weight.values(), {l.weight.rows(), l.weight.cols()}});
    out.push_back({base + ".b", l.bias, {l.bias.size()}});
  }
}

ParamSet views(const NamedParams& named) {
  ParamSet out;
  out.reserve(named.size());
  for (const auto& p : named) out.push_back(p.values);
  return out;
}

Vec mlp_forward(const Mlp& mlp, std::span<const double> x) { return mlp.forward(x); }

MlpBackward mlp_backward(const Mlp& mlp, std::span<const double> x,
                         std::span<const double> grad_out) {
  Mlp::Tape tape;
  mlp.forward(x, tape);
  MlpBackward out{mlp.zeros_like(), {}};
  out.grad_in = mlp.backward(tape, grad_out, out.param_grads);
  return out;
}

// ---------------------------------------------------------------------------
// EmbeddingTable

EmbeddingTable EmbeddingTable::make(std::size_t rows, std::size_t dim, double stddev, Rng& rng) {
  EmbeddingTable t(rows, dim);
  for (double& v : t.table_.values()) v = normal(rng, 0.0, stddev);
  return t;
}

std::size_t EmbeddingTable::slot(std::uint64_t id) const {
  if (rows() == 0) throw DimensionError("embedding table has no rows");
  const std::uint64_t h = (id * 0x9E3779B97F4A7C15ULL) >> 29;
  return static_cast<std::size_t>(h % rows());
}

Vec EmbeddingTable::lookup_sum(std::span<const std::uint64_t> ids) const {
  Vec out(dim(), 0.0);
  for (auto id : ids) add_into(table_.row(slot(id)), out);
  return out;
}

void EmbeddingTable::backward_sum(std::span<const std::uint64_t> ids, std::span<const double> grad,
                                  EmbeddingTable& grads) const {
  if (grad.size() != dim()) throw DimensionError("embedding backward: grad dim mismatch");
  for (auto id : ids) add_into(grad, grads.table_.row(slot(id)));
}

Vec embedding_lookup_sum(const EmbeddingTable& table, std::span<const std::uint64_t> ids) {
  return table.lookup_sum(ids);
}

// ---------------------------------------------------------------------------
// Optimizer

void Optimizer::step(const ParamSet& params, const ParamSet& grads) {
  if (params.size() != grads.size()) {
    throw DimensionError("optimizer: " + std::to_string(params.size()) + " parameter views vs " +
                         std::to_string(grads.size()) + " gradient views");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) {
      throw DimensionError("optimizer: view " + std::to_string(i) + " size mismatch");
    }
  }
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i];
      auto g = grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    return;
  }
  if (accum_.empty()) {
    accum_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) accum_[i].assign(params[i].size(), 0.0);
  } else if (accum_.size() != params.size()) {
    throw DimensionError("optimizer: parameter layout changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto g = grads[i];
    Vec& acc = accum_[i];
    if (acc.size() != p.size()) throw DimensionError("optimizer: accumulator size mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      acc[j] += g[j] * g[j];
      p[j] -= lr * g[j] / std::sqrt(acc[j] + config_.epsilon);
    }
  }
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adagrad") return OptimizerKind::adagrad;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adagrad)");
}

// ---------------------------------------------------------------------------
// Finite differences

GradCheckReport finite_diff_check(const std::function<double()>& loss, const ParamSet& params,
                                  const ParamSet& analytic, const GradCheckOptions& options) {
  if (params.size() != analytic.size()) {
    throw DimensionError("finite_diff_check: parameter/gradient view count mismatch");
  }
  const double base = loss();
  if (!std::isfinite(base)) throw NumericError("finite_diff_check: loss is not finite");

  GradCheckReport report;
  const double h = options.step;
  for (std::size_t v = 0; v < params.size(); ++v) {
    auto p = params[v];
    auto a = analytic[v];
    if (p.size() != a.size()) throw DimensionError("finite_diff_check: view size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + h;
      const double up = loss();
      p[i] = saved - h;
      const double down = loss();
      p[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_check: loss became non-finite at view " +
                           std::to_string(v) + " index " + std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a[i] - numeric) / denom;
      ++report.checked;
      if (rel > options.tolerance) ++report.failures;
      if (rel > report.max_relative_error || report.checked == 1) {
        report.max_relative_error = rel;
        report.worst_view = v;
        report.worst_index = i;
        report.worst_analytic = a[i];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double normal(Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(rng);
}

double uniform(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(rng);
}

std::size_t uniform_index(Rng& rng, std::size_t n) {
  if (n == 0) throw DimensionError("uniform_index: empty range");
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  return d(rng);
}

}  // namespace hsnn
