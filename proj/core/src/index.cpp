#include "hsnn/index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hsnn/monn.hpp"
#include "hsnn/tensor_io.hpp"
#include "json_detail.hpp"

namespace hsnn {

Vec lti_distance(std::span<const double> v, const Matrix& nodes) {
  if (v.size() != nodes.cols()) {
    throw DimensionError("lti_distance: vector dim " + std::to_string(v.size()) +
                         " != node dim " + std::to_string(nodes.cols()));
  }
  Vec d(nodes.rows());
  for (std::size_t k = 0; k < nodes.rows(); ++k) d[k] = squared_distance(v, nodes.row(k));
  return d;
}

Vec lti_soft_assign(std::span<const double> d, double alpha) {
  if (d.empty()) throw DimensionError("lti_soft_assign: no nodes");
  if (!(alpha >= 0.0)) throw ConfigError("lti_soft_assign: alpha must be >= 0");
  double best = d[0];
  for (double x : d) best = std::min(best, x);
  Vec a(d.size());
  double z = 0.0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    a[k] = std::exp(-alpha * (d[k] - best));
    z += a[k];
  }
  for (double& x : a) x /= z;
  return a;
}

std::size_t lti_hard_assign(std::span<const double> d) {
  if (d.empty()) throw DimensionError("lti_hard_assign: no nodes");
  std::size_t best = 0;
  for (std::size_t k = 1; k < d.size(); ++k) {
    if (d[k] < d[best]) best = k;
  }
  return best;
}

Vec lti_index_embedding(std::span<const double> a, const Matrix& nodes) {
  if (a.size() != nodes.rows()) throw DimensionError("lti_index_embedding: affinity size");
  Vec c(nodes.cols(), 0.0);
  for (std::size_t k = 0; k < nodes.rows(); ++k) axpy(a[k], nodes.row(k), c);
  return c;
}

LtiForward lti_forward(std::span<const double> v, const Matrix& nodes, double alpha, bool hard) {
  LtiForward f;
  f.distances = lti_distance(v, nodes);
  f.hard = lti_hard_assign(f.distances);
  if (hard) {
    f.one_hot = true;
    f.affinities.assign(nodes.rows(), 0.0);
    f.affinities[f.hard] = 1.0;
    const auto row = nodes.row(f.hard);
    f.embedding.assign(row.begin(), row.end());
  } else {
    f.affinities = lti_soft_assign(f.distances, alpha);
    f.embedding = lti_index_embedding(f.affinities, nodes);
  }
  return f;
}

Vec lti_backward(std::span<const double> v, const Matrix& nodes, double alpha,
                 const LtiForward& fwd, std::span<const double> grad_embedding,
                 std::span<const double> grad_affinity, Matrix& grad_nodes) {
  const std::size_t K = nodes.rows();
  const std::size_t D = nodes.cols();
  if (grad_embedding.size() != D || grad_nodes.rows() != K || grad_nodes.cols() != D) {
    throw DimensionError("lti_backward: shape mismatch");
  }
  if (!grad_affinity.empty() && grad_affinity.size() != K) {
    throw DimensionError("lti_backward: affinity gradient size");
  }
  Vec grad_v(D, 0.0);
  if (fwd.one_hot) {
    add_into(grad_embedding, grad_nodes.row(fwd.hard));
    return grad_v;
  }
  const Vec& a = fwd.affinities;
  Vec ga(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    ga[k] = dot(grad_embedding, nodes.row(k)) + (grad_affinity.empty() ? 0.0 : grad_affinity[k]);
    axpy(a[k], grad_embedding, grad_nodes.row(k));
  }
  double mean = 0.0;
  for (std::size_t k = 0; k < K; ++k) mean += a[k] * ga[k];
  for (std::size_t k = 0; k < K; ++k) {
    const double gs = a[k] * (ga[k] - mean);
    const double gd = -alpha * gs;
    if (gd == 0.0) continue;
    const auto c = nodes.row(k);
    auto gc = grad_nodes.row(k);
    for (std::size_t i = 0; i < D; ++i) {
      const double diff = v[i] - c[i];
      grad_v[i] += 2.0 * gd * diff;
      gc[i] -= 2.0 * gd * diff;
    }
  }
  return grad_v;
}

IndexLoss lti_index_loss(std::span<const double> user, std::span<const double> embedding,
                         double label) {
  const double z = dot(user, embedding);
  IndexLoss out;
  out.loss = clamped_bce(sigmoid(z), label);
  const double g = clamped_bce_logit_grad(z, label);
  out.grad_user.assign(embedding.begin(), embedding.end());
  out.grad_embedding.assign(user.begin(), user.end());
  for (double& x : out.grad_user) x *= g;
  for (double& x : out.grad_embedding) x *= g;
  return out;
}

double scheduler_alpha(const SchedulerConfig& config, std::size_t iter) {
  if (!config.enabled || config.max_iters == 0) return config.max_alpha;
  const double t = static_cast<double>(std::min(iter, config.max_iters)) /
                   static_cast<double>(config.max_iters);
  return config.max_alpha * std::pow(t, config.exponent);
}

double warmup_weight(std::size_t step, std::size_t warmup_steps, double target) {
  if (warmup_steps == 0 || step >= warmup_steps) return target;
  return target * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

double flops_regularizer(const Matrix& pooled) {
  if (pooled.rows() == 0) throw DimensionError("flops_regularizer: empty pooled matrix");
  double penalty = 0.0;
  for (std::size_t k = 0; k < pooled.cols(); ++k) {
    double m = 0.0;
    for (std::size_t r = 0; r < pooled.rows(); ++r) m += pooled(r, k);
    m /= static_cast<double>(pooled.rows());
    penalty += m * m;
  }
  return penalty;
}

BalanceRegState::BalanceRegState(std::size_t nodes, std::size_t window)
    : nodes_(nodes), window_(window) {
  if (window == 0) throw ConfigError("balance regularizer: window must be >= 1");
}

BalanceRegState::Penalty BalanceRegState::evaluate(const Matrix& current) const {
  if (current.cols() != nodes_) throw DimensionError("balance regularizer: node count mismatch");
  Vec sum(nodes_, 0.0);
  std::size_t rows = current.rows();
  for (std::size_t r = 0; r < current.rows(); ++r) add_into(current.row(r), sum);
  for (const Matrix& m : past_) {
    rows += m.rows();
    for (std::size_t r = 0; r < m.rows(); ++r) add_into(m.row(r), sum);
  }
  if (rows == 0) throw DimensionError("balance regularizer: empty pooled matrix");
  Penalty p;
  p.grad_row.resize(nodes_);
  const double R = static_cast<double>(rows);
  for (std::size_t k = 0; k < nodes_; ++k) {
    const double mean = sum[k] / R;
    p.value += mean * mean;
    p.grad_row[k] = 2.0 * mean / R;
  }
  return p;
}

void BalanceRegState::push(Matrix current) {
  if (current.cols() != nodes_) throw DimensionError("balance regularizer: node count mismatch");
  past_.push_back(std::move(current));
  while (past_.size() > window_ - 1) past_.pop_front();
}

Matrix BalanceRegState::pooled(const Matrix& current) const {
  std::size_t rows = current.rows();
  for (const Matrix& m : past_) rows += m.rows();
  Matrix out(rows, nodes_);
  std::size_t r = 0;
  for (const Matrix& m : past_) {
    for (std::size_t i = 0; i < m.rows(); ++i, ++r) std::copy_n(m.row(i).begin(), nodes_, out.row(r).begin());
  }
  for (std::size_t i = 0; i < current.rows(); ++i, ++r) {
    std::copy_n(current.row(i).begin(), nodes_, out.row(r).begin());
  }
  return out;
}

std::vector<std::uint32_t> ResidualChain::path() const {
  std::vector<std::uint32_t> p;
  for (const auto& l : levels) p.push_back(static_cast<std::uint32_t>(l.hard));
  return p;
}

ResidualChain residual_chain(std::span<const double> v, const std::vector<Matrix>& codebooks,
                             double alpha, bool hard) {
  ResidualChain c;
  c.residuals.emplace_back(v.begin(), v.end());
  Vec q(v.size(), 0.0);
  for (const Matrix& book : codebooks) {
    LtiForward f = lti_forward(c.residuals.back(), book, alpha, hard);
    add_into(f.embedding, q);
    Vec next = c.residuals.back();
    axpy(-1.0, f.embedding, next);
    c.residuals.push_back(std::move(next));
    c.quantized.push_back(q);
    c.levels.push_back(std::move(f));
  }
  c.reconstruction = squared_distance(q, v);
  return c;
}

Vec residual_chain_backward(std::span<const double> v, const std::vector<Matrix>& codebooks,
                            double alpha, const ResidualChain& chain,
                            const std::vector<Vec>& grad_quantized,
                            const std::vector<Vec>& grad_affinity,
                            std::span<const double> grad_final_residual,
                            std::vector<Matrix>& grad_codebooks) {
  const std::size_t N = codebooks.size();
  const std::size_t D = v.size();
  if (chain.levels.size() != N || grad_codebooks.size() != N) {
    throw DimensionError("residual_chain_backward: level count mismatch");
  }
  Vec g_r = grad_final_residual.empty() ? Vec(D, 0.0)
                                        : Vec(grad_final_residual.begin(), grad_final_residual.end());
  Vec g_q(D, 0.0);
  for (std::size_t n = N; n-- > 0;) {
    if (n < grad_quantized.size() && !grad_quantized[n].empty()) add_into(grad_quantized[n], g_q);
    Vec g_cbar = g_q;
    axpy(-1.0, g_r, g_cbar);
    const std::span<const double> ga =
        n < grad_affinity.size() ? std::span<const double>(grad_affinity[n]) : std::span<const double>();
    const Vec g_from_d = lti_backward(chain.residuals[n], codebooks[n], alpha, chain.levels[n],
                                      g_cbar, ga, grad_codebooks[n]);
    add_into(g_from_d, g_r);
  }
  return g_r;
}

std::vector<std::uint32_t> residual_assign(std::span<const double> v,
                                           const std::vector<Matrix>& codebooks) {
  std::vector<std::uint32_t> path;
  Vec r(v.begin(), v.end());
  for (const Matrix& book : codebooks) {
    const std::size_t k = lti_hard_assign(lti_distance(r, book));
    path.push_back(static_cast<std::uint32_t>(k));
    axpy(-1.0, book.row(k), r);
  }
  return path;
}

std::vector<std::size_t> select_representatives(const Matrix& nodes, const Matrix& points) {
  if (points.rows() == 0) throw ConfigError("select_representatives: empty catalog");
  if (points.cols() != nodes.cols()) throw DimensionError("select_representatives: dim mismatch");
  std::vector<std::size_t> rep(nodes.rows(), 0);
  Vec best(nodes.rows(), std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < points.rows(); ++j) {
    for (std::size_t k = 0; k < nodes.rows(); ++k) {
      const double d = squared_distance(points.row(j), nodes.row(k));
      if (d < best[k]) {
        best[k] = d;
        rep[k] = j;
      }
    }
  }
  return rep;
}

namespace {

std::uint32_t nearest(std::span<const double> p, const Matrix& centroids, double* dist) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.rows(); ++k) {
    const double d = squared_distance(p, centroids.row(k));
    if (d < bd) {
      bd = d;
      best = k;
    }
  }
  if (dist) *dist = bd;
  return static_cast<std::uint32_t>(best);
}

double assign_all(const Matrix& points, const Matrix& centroids,
                  std::vector<std::uint32_t>& assignment) {
  double obj = 0.0;
  assignment.resize(points.rows());
  for (std::size_t j = 0; j < points.rows(); ++j) {
    double d = 0.0;
    assignment[j] = nearest(points.row(j), centroids, &d);
    obj += d;
  }
  return obj;
}

}  // namespace

Matrix kmeans_plus_plus(const Matrix& points, std::size_t k, Rng& rng) {
  if (k == 0 || k > points.rows()) {
    throw ConfigError("kmeans++: cannot draw " + std::to_string(k) + " seeds from " +
                      std::to_string(points.rows()) + " points");
  }
  const std::size_t V = points.rows();
  Matrix c(k, points.cols());
  std::size_t first = uniform_index(rng, V);
  std::copy_n(points.row(first).begin(), points.cols(), c.row(0).begin());
  Vec dmin(V);
  for (std::size_t j = 0; j < V; ++j) dmin[j] = squared_distance(points.row(j), c.row(0));
  for (std::size_t i = 1; i < k; ++i) {
    const double total = std::accumulate(dmin.begin(), dmin.end(), 0.0);
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = uniform_index(rng, V);
    } else {
      const double r = uniform(rng, 0.0, total);
      double acc = 0.0;
      pick = V - 1;
      for (std::size_t j = 0; j < V; ++j) {
        acc += dmin[j];
        if (acc > r && dmin[j] > 0.0) {
          pick = j;
          break;
        }
      }
      while (dmin[pick] <= 0.0 && pick > 0) --pick;
    }
    std::copy_n(points.row(pick).begin(), points.cols(), c.row(i).begin());
    for (std::size_t j = 0; j < V; ++j) {
      dmin[j] = std::min(dmin[j], squared_distance(points.row(j), c.row(i)));
    }
  }
  return c;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::size_t iters, Rng& rng) {
  if (k == 0) throw ConfigError("kmeans: k must be >= 1");
  if (k > points.rows()) {
    throw ConfigError("kmeans: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(points.rows()) + " points");
  }
  KMeansResult res;
  res.centroids = kmeans_plus_plus(points, k, rng);
  std::vector<std::uint32_t> prev;
  for (std::size_t it = 0; it < iters; ++it) {
    res.objective.push_back(assign_all(points, res.centroids, res.assignment));
    if (res.assignment == prev) break;
    prev = res.assignment;
    Matrix sum(k, points.cols());
    std::vector<std::size_t> count(k, 0);
    for (std::size_t j = 0; j < points.rows(); ++j) {
      add_into(points.row(j), sum.row(res.assignment[j]));
      ++count[res.assignment[j]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      auto row = res.centroids.row(c);
      const auto s = sum.row(c);
      for (std::size_t i = 0; i < row.size(); ++i) row[i] = s[i] / static_cast<double>(count[c]);
    }
  }
  res.objective.push_back(assign_all(points, res.centroids, res.assignment));
  return res;
}

std::vector<Matrix> residual_kmeans(const Matrix& points, const std::vector<std::size_t>& ks,
                                    std::size_t iters, Rng& rng) {
  std::vector<Matrix> books;
  Matrix resid = points;
  for (std::size_t k : ks) {
    KMeansResult km = kmeans(resid, k, iters, rng);
    for (std::size_t j = 0; j < resid.rows(); ++j) {
      axpy(-1.0, km.centroids.row(km.assignment[j]), resid.row(j));
    }
    books.push_back(std::move(km.centroids));
  }
  return books;
}

IndexLayer kmeans_sil(const Matrix& item_embeddings, std::size_t k, std::size_t iters, Rng& rng) {
  KMeansResult km = kmeans(item_embeddings, k, iters, rng);
  IndexLayer layer;
  layer.representatives = select_representatives(km.centroids, item_embeddings);
  layer.nodes = std::move(km.centroids);
  layer.mapping = std::move(km.assignment);
  return layer;
}

void em_joint(std::size_t rounds, const std::function<void(std::size_t)>& train,
              const std::function<void(std::size_t)>& recluster) {
  for (std::size_t r = 0; r < rounds; ++r) {
    train(r);
    recluster(r);
  }
}

double quantization_error(const Matrix& points, const std::vector<Matrix>& codebooks) {
  double total = 0.0;
  for (std::size_t j = 0; j < points.rows(); ++j) {
    total += residual_chain(points.row(j), codebooks, 0.0, true).reconstruction;
  }
  return total;
}

HierarchicalIndex HierarchicalIndex::build(std::vector<Matrix> codebooks,
                                           std::vector<std::uint64_t> item_ids,
                                           const Matrix& embeddings, std::uint64_t version) {
  if (item_ids.empty()) throw ConfigError("index: empty catalog");
  if (embeddings.rows() != item_ids.size()) {
    throw DimensionError("index: " + std::to_string(embeddings.rows()) + " embeddings for " +
                         std::to_string(item_ids.size()) + " items");
  }
  for (const Matrix& b : codebooks) {
    if (b.cols() != embeddings.cols() || b.rows() == 0) {
      throw DimensionError("index: codebook shape does not match the embeddings");
    }
  }
  std::vector<std::size_t> order(item_ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return item_ids[a] < item_ids[b];
  });
  HierarchicalIndex idx;
  idx.version_ = version;
  const std::size_t N = codebooks.size();
  idx.representatives_.resize(N);
  std::vector<Vec> best(N);
  for (std::size_t n = 0; n < N; ++n) {
    idx.representatives_[n].assign(codebooks[n].rows(), 0);
    best[n].assign(codebooks[n].rows(), std::numeric_limits<double>::infinity());
  }
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t j = order[pos];
    if (pos > 0 && item_ids[j] == idx.item_ids_.back()) {
      throw ConfigError("index: duplicate item id " + std::to_string(item_ids[j]));
    }
    idx.item_ids_.push_back(item_ids[j]);
    Vec r(embeddings.row(j).begin(), embeddings.row(j).end());
    std::vector<std::uint32_t> path;
    for (std::size_t n = 0; n < N; ++n) {
      const Vec d = lti_distance(r, codebooks[n]);
      for (std::size_t k = 0; k < d.size(); ++k) {
        if (d[k] < best[n][k]) {
          best[n][k] = d[k];
          idx.representatives_[n][k] = item_ids[j];
        }
      }
      const std::size_t k = lti_hard_assign(d);
      path.push_back(static_cast<std::uint32_t>(k));
      axpy(-1.0, codebooks[n].row(k), r);
    }
    idx.paths_.push_back(std::move(path));
  }
  idx.embeddings_ = Matrix(order.size(), embeddings.cols());
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    std::copy_n(embeddings.row(order[pos]).begin(), embeddings.cols(),
                idx.embeddings_.row(pos).begin());
  }
  idx.codebooks_ = std::move(codebooks);
  return idx;
}

bool HierarchicalIndex::contains(std::uint64_t id) const {
  return std::binary_search(item_ids_.begin(), item_ids_.end(), id);
}

const std::vector<std::uint32_t>& HierarchicalIndex::path_of(std::uint64_t id) const {
  auto it = std::lower_bound(item_ids_.begin(), item_ids_.end(), id);
  if (it == item_ids_.end() || *it != id) {
    throw StaleError("index v" + std::to_string(version_) + ": item " + std::to_string(id) +
                     " has no assignment");
  }
  return paths_[static_cast<std::size_t>(it - item_ids_.begin())];
}

std::vector<std::vector<std::size_t>> HierarchicalIndex::occupancy() const {
  std::vector<std::vector<std::size_t>> occ(levels());
  for (std::size_t n = 0; n < levels(); ++n) occ[n].assign(codebooks_[n].rows(), 0);
  for (const auto& p : paths_) {
    for (std::size_t n = 0; n < p.size(); ++n) ++occ[n][p[n]];
  }
  return occ;
}

IndexTree IndexTree::build(const HierarchicalIndex& index) {
  IndexTree tree;
  tree.version_ = index.version();
  const std::size_t N = index.levels();
  tree.levels_.resize(N);
  std::vector<std::map<std::vector<std::uint32_t>, std::size_t>> lookup(N);
  // Prefixes in lexicographic order give deterministic node ids.
  for (std::size_t n = 0; n < N; ++n) {
    for (const auto& p : index.paths()) {
      lookup[n].emplace(std::vector<std::uint32_t>(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n + 1)), 0);
    }
    std::size_t id = 0;
    for (auto& [prefix, node] : lookup[n]) {
      node = id++;
      IndexNode in;
      in.prefix = prefix;
      in.embedding.assign(index.dim(), 0.0);
      for (std::size_t t = 0; t <= n; ++t) add_into(index.codebooks()[t].row(prefix[t]), in.embedding);
      tree.levels_[n].push_back(std::move(in));
    }
  }
  for (std::size_t i = 0; i < index.item_ids().size(); ++i) {
    const auto& p = index.paths()[i];
    std::vector<std::size_t> ids(N);
    for (std::size_t n = 0; n < N; ++n) {
      ids[n] = lookup[n].at(std::vector<std::uint32_t>(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(n + 1)));
      tree.levels_[n][ids[n]].items.push_back(index.item_ids()[i]);
    }
    tree.item_nodes_.emplace(index.item_ids()[i], std::move(ids));
  }
  for (std::size_t n = 0; n + 1 < N; ++n) {
    for (std::size_t c = 0; c < tree.levels_[n + 1].size(); ++c) {
      const auto& prefix = tree.levels_[n + 1][c].prefix;
      const std::size_t parent =
          lookup[n].at(std::vector<std::uint32_t>(prefix.begin(), prefix.end() - 1));
      tree.levels_[n][parent].children.push_back(c);
    }
  }
  std::map<std::uint64_t, std::size_t> row_of;
  for (std::size_t i = 0; i < index.item_ids().size(); ++i) row_of.emplace(index.item_ids()[i], i);
  for (std::size_t n = 0; n < N; ++n) {
    for (IndexNode& node : tree.levels_[n]) {
      if (n == 0) {
        node.representative = index.representatives()[0][node.prefix[0]];
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      for (auto id : node.items) {
        const double d = squared_distance(index.embeddings().row(row_of.at(id)), node.embedding);
        if (d < best) {
          best = d;
          node.representative = id;
        }
      }
    }
  }
  return tree;
}

const std::vector<std::size_t>& IndexTree::nodes_of(std::uint64_t item) const {
  auto it = item_nodes_.find(item);
  if (it == item_nodes_.end()) {
    throw StaleError("index v" + std::to_string(version_) + ": item " + std::to_string(item) +
                     " is not in the tree");
  }
  return it->second;
}

double occupancy_ratio(std::span<const std::size_t> counts) {
  if (counts.empty()) return 0.0;
  std::size_t total = 0, mx = 0;
  for (auto c : counts) {
    total += c;
    mx = std::max(mx, c);
  }
  if (total == 0) return 0.0;
  return static_cast<double>(mx) * static_cast<double>(counts.size()) / static_cast<double>(total);
}

namespace {

constexpr const char* kIndexFormat = "hsnn.index.v1";

}  // namespace

void save_index(const std::filesystem::path& dir, const HierarchicalIndex& index) {
  std::filesystem::create_directories(dir);
  detail::Json m;
  m["format"] = kIndexFormat;
  m["version"] = index.version();
  detail::Json levels = detail::Json::array();
  for (std::size_t n = 0; n < index.levels(); ++n) {
    const Matrix& b = index.codebooks()[n];
    const std::string file = "level" + std::to_string(n) + ".bin";
    const std::size_t shape[2] = {b.rows(), b.cols()};
    write_tensor(dir / file, shape, b.values());
    levels.push_back({{"k", b.rows()}, {"dim", b.cols()}, {"file", file},
                      {"representatives", index.representatives()[n]}});
  }
  m["levels"] = levels;
  detail::Json items = detail::Json::array();
  for (std::size_t i = 0; i < index.item_ids().size(); ++i) {
    items.push_back({index.item_ids()[i], index.paths()[i]});
  }
  m["items"] = items;
  const std::size_t eshape[2] = {index.embeddings().rows(), index.embeddings().cols()};
  write_tensor(dir / "embeddings.bin", eshape, index.embeddings().values());
  write_text_file(dir / "manifest.json", m.dump() + "\n");
}

HierarchicalIndex load_index(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  detail::Json m;
  try {
    m = detail::Json::parse(read_text_file(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  if (m.value("format", "") != kIndexFormat) {
    throw FormatError(mpath.string() + ": expected format " + kIndexFormat);
  }
  try {
    std::vector<Matrix> books;
    std::vector<std::vector<std::uint64_t>> reps;
    for (const auto& l : m.at("levels")) {
      const Tensor t = read_tensor(dir / l.at("file").get<std::string>());
      const std::size_t k = l.at("k").get<std::size_t>();
      const std::size_t d = l.at("dim").get<std::size_t>();
      if (t.shape != std::vector<std::size_t>{k, d}) {
        throw FormatError(mpath.string() + ": codebook shape mismatch");
      }
      books.emplace_back(k, d, t.values);
      reps.push_back(l.at("representatives").get<std::vector<std::uint64_t>>());
      if (reps.back().size() != k) throw FormatError(mpath.string() + ": representative count");
    }
    HierarchicalIndex idx;
    idx.codebooks_ = std::move(books);
    idx.representatives_ = std::move(reps);
    idx.version_ = m.at("version").get<std::uint64_t>();
    for (const auto& it : m.at("items")) {
      const auto id = it.at(0).get<std::uint64_t>();
      auto path = it.at(1).get<std::vector<std::uint32_t>>();
      if (path.size() != idx.codebooks_.size()) {
        throw FormatError(mpath.string() + ": item " + std::to_string(id) + " path length");
      }
      for (std::size_t n = 0; n < path.size(); ++n) {
        if (path[n] >= idx.codebooks_[n].rows()) {
          throw FormatError(mpath.string() + ": item " + std::to_string(id) + " code out of range");
        }
      }
      if (!idx.item_ids_.empty() && id <= idx.item_ids_.back()) {
        throw FormatError(mpath.string() + ": item ids must be strictly ascending");
      }
      idx.item_ids_.push_back(id);
      idx.paths_.push_back(std::move(path));
    }
    const Tensor e = read_tensor(dir / "embeddings.bin");
    if (e.shape.size() != 2 || e.shape[0] != idx.item_ids_.size()) {
      throw FormatError(mpath.string() + ": embeddings do not match the item list");
    }
    idx.embeddings_ = Matrix(e.shape[0], e.shape[1], e.values);
    return idx;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
}

}  // namespace hsnn
