#include "hsnn/hsnn.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "hsnn/tensor_io.hpp"
#include "json_detail.hpp"

namespace hsnn {

TrainMode parse_train_mode(const std::string& name) {
  if (name == "joim") return TrainMode::joim;
  if (name == "sil") return TrainMode::sil;
  if (name == "em") return TrainMode::em;
  throw ConfigError("unknown training mode '" + name + "' (expected joim, sil or em)");
}

std::string train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::joim: return "joim";
    case TrainMode::sil: return "sil";
    case TrainMode::em: return "em";
  }
  return "joim";
}

void HsnnConfig::validate() const {
  if (presets.size() != nodes.size()) {
    throw ConfigError("hsnn: " + std::to_string(nodes.size()) + " index layers but " +
                      std::to_string(presets.size()) + " presets");
  }
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    if (nodes[n] == 0) throw ConfigError("hsnn: index layer " + std::to_string(n) + " has no nodes");
  }
  if (item.tasks() == 0) throw ConfigError("hsnn: at least one task is required");
  if (item.item.width() == 0 || item.user.width() == 0) {
    throw ConfigError("hsnn: user and item towers must be enabled");
  }
  if (!nodes.empty() && item.user.width() % item.item.width() != 0) {
    throw ConfigError("hsnn: user width " + std::to_string(item.user.width()) +
                      " must be a multiple of the item width " +
                      std::to_string(item.item.width()));
  }
}

Ensemble Ensemble::averaging(std::size_t layers, std::size_t tasks) {
  Ensemble e;
  e.weight = Matrix(tasks, layers * tasks);
  for (std::size_t t = 0; t < tasks; ++t) {
    for (std::size_t l = 0; l < layers; ++l) e.weight(t, l * tasks + t) = 1.0 / double(layers);
  }
  e.bias.assign(tasks, 0.0);
  e.calibration.assign(tasks, 0.0);
  return e;
}

double Ensemble::logit(std::size_t task, std::span<const double> layer_logits,
                       std::size_t count) const {
  if (count > layer_logits.size() || count > weight.cols()) {
    throw DimensionError("ensemble: " + std::to_string(count) + " inputs requested, " +
                         std::to_string(layer_logits.size()) + " given");
  }
  double s = bias[task];
  for (std::size_t j = 0; j < count; ++j) s += weight(task, j) * layer_logits[j];
  return s + calibration[task];
}

Vec Ensemble::forward(std::span<const double> layer_logits, MacCounter* counter) const {
  if (layer_logits.size() != weight.cols()) {
    throw DimensionError("ensemble: expected " + std::to_string(weight.cols()) +
                         " layer logits, got " + std::to_string(layer_logits.size()));
  }
  Vec z(tasks());
  for (std::size_t t = 0; t < tasks(); ++t) z[t] = logit(t, layer_logits, layer_logits.size());
  if (counter) counter->macs += tasks() * macs(layer_logits.size());
  return z;
}

HsnnModel HsnnModel::make(const FeatureSchema& schema, const HsnnConfig& config, Rng& rng) {
  config.validate();
  HsnnModel m;
  m.config_ = config;
  m.item_model = MonnModel::make(schema, config.item, rng);
  const std::size_t T = config.tasks();
  const std::size_t d = config.item.item.width();
  const std::size_t uw = config.item.user.width();
  const TowerLayout user_layout = schema.layout(FeatureOwner::user);
  const TowerLayout joint = join_layouts(user_layout, schema.layout(FeatureOwner::item));
  for (std::size_t n = 0; n < config.index_layers(); ++n) {
    CoarseLayer c;
    c.preset = config.presets[n];
    const PresetSpec spec = preset_spec(c.preset);
    if (!config.share_user_tower) c.user_tower = Tower::make(user_layout, config.item.user, rng);
    c.interaction_tower = Tower::make(joint, spec.interaction, rng);
    c.over_arch = OverArch::make(spec.over_arch, uw, d, c.interaction_tower.output_dim(), T, rng);
    c.calibration.assign(T, 0.0);
    m.coarse.push_back(std::move(c));
  }
  for (std::size_t n = 0; n < config.index_layers(); ++n) {
    Matrix book(config.nodes[n], d);
    for (double& x : book.values()) x = normal(rng, 0.0, 0.1);
    m.codebooks.push_back(std::move(book));
  }
  m.ensemble = Ensemble::averaging(config.layers(), T);
  return m;
}

Vec HsnnModel::index_embedding(const TowerInput& item, MacCounter* counter) const {
  return index_frozen() ? index_encoder.forward(item, counter)
                        : item_model.item_tower.forward(item, counter);
}

Vec HsnnModel::coarse_logits(std::size_t n, std::span<const double> user_embedding,
                             const TowerInput& user_in, std::span<const double> node,
                             const TowerInput& item_in, MacCounter* counter) const {
  const CoarseLayer& c = coarse.at(n);
  Vec own_user;
  if (c.user_tower.enabled()) {
    own_user = c.user_tower.forward(user_in, counter);
    user_embedding = own_user;
  }
  const Vec x = c.interaction_tower.forward(join_inputs(user_in, item_in), counter);
  Vec logits = c.over_arch.forward(user_embedding, node, x, counter);
  for (std::size_t t = 0; t < logits.size(); ++t) logits[t] += c.calibration[t];
  return logits;
}

HsnnModel HsnnModel::zeros_like() const {
  HsnnModel g;
  g.config_ = config_;
  g.item_model = item_model.zeros_like();
  for (const CoarseLayer& c : coarse) {
    CoarseLayer z;
    z.preset = c.preset;
    z.user_tower = c.user_tower.zeros_like();
    z.interaction_tower = c.interaction_tower.zeros_like();
    z.over_arch = c.over_arch.zeros_like();
    z.calibration.assign(c.calibration.size(), 0.0);
    g.coarse.push_back(std::move(z));
  }
  for (const Matrix& b : codebooks) g.codebooks.emplace_back(b.rows(), b.cols());
  g.ensemble.weight = Matrix(ensemble.weight.rows(), ensemble.weight.cols());
  g.ensemble.bias.assign(ensemble.bias.size(), 0.0);
  g.ensemble.calibration.assign(ensemble.calibration.size(), 0.0);
  g.index_encoder = index_encoder.zeros_like();
  return g;
}

void HsnnModel::zero() {
  item_model.zero();
  for (CoarseLayer& c : coarse) {
    c.user_tower.zero();
    c.interaction_tower.zero();
    c.over_arch.zero();
  }
  for (Matrix& b : codebooks) b.fill(0.0);
  ensemble.weight.fill(0.0);
  std::fill(ensemble.bias.begin(), ensemble.bias.end(), 0.0);
}

void HsnnModel::collect(NamedParams& out, bool include_codebooks) {
  item_model.collect(out);
  for (std::size_t n = 0; n < coarse.size(); ++n) {
    const std::string p = "L" + std::to_string(n);
    if (coarse[n].user_tower.enabled()) coarse[n].user_tower.collect(out, p + ".user");
    if (coarse[n].interaction_tower.enabled()) {
      coarse[n].interaction_tower.collect(out, p + ".interaction");
    }
    coarse[n].over_arch.collect(out, p + ".over");
  }
  if (include_codebooks) {
    for (std::size_t n = 0; n < codebooks.size(); ++n) {
      out.push_back({"codebook" + std::to_string(n), codebooks[n].values(),
                     {codebooks[n].rows(), codebooks[n].cols()}});
    }
  }
  out.push_back({"ensemble.w", ensemble.weight.values(),
                 {ensemble.weight.rows(), ensemble.weight.cols()}});
  out.push_back({"ensemble.b", ensemble.bias, {ensemble.bias.size()}});
}

HsnnOutput hsnn_forward(const HsnnModel& model, const AssembledInputs& in, const Assignment& a,
                        MacCounter* counter) {
  const MonnModel& im = model.item_model;
  const std::size_t N = model.index_layers();
  const Vec u = im.user_tower.forward(in.user, counter);
  const Vec v = im.item_tower.forward(in.item, counter);
  const Vec x = im.interaction_tower.forward(in.interaction, counter);
  Vec item_logits = im.over_arch.forward(u, v, x, counter);
  for (std::size_t t = 0; t < item_logits.size(); ++t) item_logits[t] += im.calibration[t];

  HsnnOutput out;
  std::vector<Vec> nodes;
  if (a.kind == Assignment::Kind::given) {
    if (a.nodes.size() != N || a.items.size() != N) {
      throw DimensionError("hsnn_forward: assignment covers " + std::to_string(a.nodes.size()) +
                           " of " + std::to_string(N) + " index layers");
    }
    nodes = a.nodes;
  } else if (N > 0) {
    const Vec iv = model.index_frozen() ? model.index_embedding(in.item) : v;
    ResidualChain chain =
        residual_chain(iv, model.codebooks, a.alpha, a.kind == Assignment::Kind::hard);
    nodes = std::move(chain.quantized);
  }
  for (std::size_t n = 0; n < N; ++n) {
    const TowerInput& item_in = a.kind == Assignment::Kind::given ? a.items[n] : in.item;
    out.layer_logits.push_back(model.coarse_logits(n, u, in.user, nodes[n], item_in, counter));
  }
  out.layer_logits.push_back(std::move(item_logits));
  Vec flat;
  for (const Vec& l : out.layer_logits) flat.insert(flat.end(), l.begin(), l.end());
  out.ensemble_logits = model.ensemble.forward(flat, counter);
  out.final = make_prediction(out.ensemble_logits);
  return out;
}

double hsnn_loss(std::span<const HsnnOutput> outputs,
                 std::span<const std::vector<std::uint8_t>> labels,
                 std::span<const double> task_weights) {
  if (outputs.size() != labels.size()) {
    throw DimensionError("hsnn_loss: " + std::to_string(outputs.size()) + " outputs, " +
                         std::to_string(labels.size()) + " label rows");
  }
  if (outputs.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    for (const Vec& l : outputs[i].layer_logits) {
      for (std::size_t t = 0; t < task_weights.size(); ++t) {
        s += task_weights[t] * clamped_bce(sigmoid(l.at(t)), labels[i].at(t));
      }
    }
  }
  return s / double(outputs.size());
}

DistillGrad interaction_tower_distill(std::span<const double> item_level,
                                      std::span<const double> index_level) {
  if (item_level.size() != index_level.size() || item_level.empty()) {
    throw DimensionError("interaction distill: widths " + std::to_string(item_level.size()) +
                         " and " + std::to_string(index_level.size()));
  }
  const double D = double(item_level.size());
  DistillGrad g;
  g.grad_index.resize(item_level.size());
  g.grad_item.assign(item_level.size(), 0.0);
  for (std::size_t k = 0; k < item_level.size(); ++k) {
    const double diff = index_level[k] - item_level[k];
    g.loss += diff * diff / D;
    g.grad_index[k] = 2.0 * diff / D;
  }
  return g;
}

namespace {

struct ExampleTape {
  MonnModel::Tape item;
  Prediction item_pred;
  Vec index_v;
  ResidualChain chain;
  std::vector<TowerInput> joined;
  std::vector<Tower::Tape> user, interaction;
  std::vector<OverArch::Tape> over;
  std::vector<Vec> user_emb, x, logits;
  Vec flat;
  Vec z;
};

}  // namespace

StepResult hsnn_batch(const HsnnModel& model, std::span<const AssembledInputs> inputs,
                      std::span<const std::vector<std::uint8_t>> labels, const StepOptions& opt,
                      HsnnModel* grads) {
  if (inputs.size() != labels.size()) {
    throw DimensionError("hsnn_batch: " + std::to_string(inputs.size()) + " inputs, " +
                         std::to_string(labels.size()) + " label rows");
  }
  StepResult res;
  const std::size_t S = inputs.size();
  if (S == 0) return res;
  const MonnModel& im = model.item_model;
  const std::size_t N = model.index_layers();
  const std::size_t T = model.tasks();
  const Vec& w = im.config().task_weights;
  const bool joint = !model.index_frozen() && N > 0;
  const std::size_t d = model.index_dim();
  const std::size_t uw = im.user_tower.output_dim();
  const std::size_t blocks = d > 0 ? uw / d : 0;
  const LossWeights& lw = opt.weights;
  const double invS = 1.0 / double(S);

  if (joint) {
    for (std::size_t n = 0; n < N; ++n) res.affinities.emplace_back(S, model.codebooks[n].rows());
  }
  std::vector<ExampleTape> f(S);
  for (std::size_t i = 0; i < S; ++i) {
    const AssembledInputs& in = inputs[i];
    ExampleTape& F = f[i];
    F.item_pred = im.forward(in, F.item);
    if (N == 0) {
      F.flat = F.item_pred.logits;
      F.z = model.ensemble.forward(F.flat);
      continue;
    }
    F.index_v = model.index_frozen() ? model.index_encoder.forward(in.item) : F.item.item_embedding;
    F.chain = residual_chain(F.index_v, model.codebooks, opt.alpha, !joint);
    const bool given = i < opt.coarse_items.size() && !opt.coarse_items[i].empty();
    if (given && opt.coarse_items[i].size() != N) {
      throw DimensionError("hsnn_batch: example " + std::to_string(i) + " has " +
                           std::to_string(opt.coarse_items[i].size()) + " coarse inputs for " +
                           std::to_string(N) + " index layers");
    }
    F.joined.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
      F.joined[n] = join_inputs(in.user, given ? opt.coarse_items[i][n] : in.item);
    }
    F.user.resize(N);
    F.interaction.resize(N);
    F.over.resize(N);
    F.user_emb.resize(N);
    F.x.resize(N);
    F.logits.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
      const CoarseLayer& c = model.coarse[n];
      F.user_emb[n] = c.user_tower.enabled() ? c.user_tower.forward(in.user, F.user[n])
                                             : F.item.user_embedding;
      F.x[n] = c.interaction_tower.forward(F.joined[n], F.interaction[n]);
      F.logits[n] = c.over_arch.forward(F.user_emb[n], F.chain.quantized[n], F.x[n], F.over[n]);
      for (std::size_t t = 0; t < T; ++t) F.logits[n][t] += c.calibration[t];
      F.flat.insert(F.flat.end(), F.logits[n].begin(), F.logits[n].end());
      if (joint) {
        const Vec& a = F.chain.levels[n].affinities;
        std::copy(a.begin(), a.end(), res.affinities[n].row(i).begin());
      }
    }
    F.flat.insert(F.flat.end(), F.item_pred.logits.begin(), F.item_pred.logits.end());
    F.z = model.ensemble.forward(F.flat);
  }

  BatchLoss& loss = res.loss;
  std::vector<Vec> grad_affinity;
  if (joint && opt.balance && lw.flops > 0.0) {
    if (opt.balance->size() != N) {
      throw DimensionError("hsnn_batch: balance state covers " +
                           std::to_string(opt.balance->size()) + " of " + std::to_string(N) +
                           " index layers");
    }
    for (std::size_t n = 0; n < N; ++n) {
      const BalanceRegState::Penalty p = (*opt.balance)[n].evaluate(res.affinities[n]);
      loss.flops += lw.flops * p.value;
      Vec g = p.grad_row;
      for (double& x : g) x *= lw.flops;
      grad_affinity.push_back(std::move(g));
    }
  }

  for (std::size_t i = 0; i < S; ++i) {
    const AssembledInputs& in = inputs[i];
    ExampleTape& F = f[i];
    const std::vector<std::uint8_t>& y = labels[i];
    Vec teacher_probs;
    if (opt.teacher) teacher_probs = opt.teacher->forward(in).probs;
    const ExampleLoss el =
        example_loss(F.item_pred, y, w, S, opt.teacher ? &teacher_probs : nullptr);
    loss.supervised += el.supervised;
    loss.distillation += el.distillation;

    std::vector<Vec> g_logits(N, Vec(T, 0.0));
    std::vector<Vec> g_q(N, Vec(d, 0.0));
    std::vector<Vec> g_x(N);
    Vec g_user_extra(uw, 0.0);
    Vec g_final;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t t = 0; t < T; ++t) {
        const double l = F.logits[n][t];
        loss.supervised += w[t] * clamped_bce(sigmoid(l), y.at(t)) * invS;
        g_logits[n][t] = w[t] * clamped_bce_logit_grad(l, y.at(t)) * invS;
      }
      if (joint && lw.index > 0.0) {
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t off = (t % blocks) * d;
          const std::span<const double> ub(F.item.user_embedding.data() + off, d);
          const IndexLoss il = lti_index_loss(ub, F.chain.quantized[n], y.at(t));
          const double s = lw.index * w[t] * invS;
          loss.index += s * il.loss;
          axpy(s, il.grad_user, std::span<double>(g_user_extra.data() + off, d));
          axpy(s, il.grad_embedding, g_q[n]);
        }
      }
      g_x[n].assign(F.x[n].size(), 0.0);
      const Vec& x_item = F.item.interaction_embedding;
      if (lw.interaction_mse > 0.0 && !x_item.empty() && x_item.size() == F.x[n].size()) {
        const DistillGrad dg = interaction_tower_distill(x_item, F.x[n]);
        loss.interaction_mse += lw.interaction_mse * dg.loss * invS;
        axpy(lw.interaction_mse * invS, dg.grad_index, g_x[n]);
      }
    }
    if (joint && lw.reconstruction > 0.0) {
      loss.reconstruction += lw.reconstruction * F.chain.reconstruction * invS;
      // ||q_N - v||^2 = ||r_{N+1}||^2
      g_final = F.chain.residuals.back();
      for (double& g : g_final) g *= 2.0 * lw.reconstruction * invS;
    }
    Vec g_z(T);
    for (std::size_t t = 0; t < T; ++t) {
      loss.ensemble += w[t] * clamped_bce(sigmoid(F.z[t]), y.at(t)) * invS;
      g_z[t] = w[t] * clamped_bce_logit_grad(F.z[t], y.at(t)) * invS;
    }
    if (!grads) continue;

    for (std::size_t n = 0; n < N; ++n) {
      const CoarseLayer& c = model.coarse[n];
      CoarseLayer& gc = grads->coarse[n];
      const OverArch::InputGrads ig = c.over_arch.backward(
          F.user_emb[n], F.chain.quantized[n], F.x[n], F.over[n], g_logits[n], gc.over_arch);
      if (c.user_tower.enabled()) {
        c.user_tower.backward(in.user, F.user[n], ig.user, gc.user_tower);
      } else {
        add_into(ig.user, g_user_extra);
      }
      add_into(ig.item, g_q[n]);
      if (c.interaction_tower.enabled()) {
        Vec gx = ig.interaction;
        add_into(g_x[n], gx);
        c.interaction_tower.backward(F.joined[n], F.interaction[n], gx, gc.interaction_tower);
      }
    }
    const OverArch::InputGrads ig =
        im.over_arch.backward(F.item.user_embedding, F.item.item_embedding,
                              F.item.interaction_embedding, F.item.over_arch, el.grad_logits,
                              grads->item_model.over_arch);
    Vec g_u = ig.user;
    if (N > 0) add_into(g_user_extra, g_u);
    Vec g_v = ig.item;
    if (joint) {
      const Vec gv = residual_chain_backward(F.index_v, model.codebooks, opt.alpha, F.chain, g_q,
                                             grad_affinity, g_final, grads->codebooks);
      add_into(gv, g_v);
    }
    im.user_tower.backward(in.user, F.item.user, g_u, grads->item_model.user_tower);
    im.item_tower.backward(in.item, F.item.item, g_v, grads->item_model.item_tower);
    if (im.interaction_tower.enabled()) {
      im.interaction_tower.backward(in.interaction, F.item.interaction, ig.interaction,
                                    grads->item_model.interaction_tower);
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < F.flat.size(); ++j) {
        grads->ensemble.weight(t, j) += g_z[t] * F.flat[j];
      }
      grads->ensemble.bias[t] += g_z[t];
    }
  }
  return res;
}

void init_codebooks(HsnnModel& model, const Matrix& item_embeddings, Rng& rng) {
  if (model.index_layers() == 0) return;
  if (item_embeddings.cols() != model.index_dim()) {
    throw DimensionError("init_codebooks: embeddings have width " +
                         std::to_string(item_embeddings.cols()) + ", index width is " +
                         std::to_string(model.index_dim()));
  }
  Matrix resid = item_embeddings;
  for (std::size_t n = 0; n < model.index_layers(); ++n) {
    const Matrix seeds = kmeans_plus_plus(resid, model.codebooks[n].rows(), rng);
    std::copy(seeds.values().begin(), seeds.values().end(), model.codebooks[n].values().begin());
    for (std::size_t r = 0; r < resid.rows(); ++r) {
      const std::size_t k = lti_hard_assign(lti_distance(resid.row(r), seeds));
      axpy(-1.0, seeds.row(k), resid.row(r));
    }
  }
}

Matrix catalog_embeddings(const HsnnModel& model, const std::vector<Item>& catalog,
                          const FeatureSchema& schema) {
  Matrix m(catalog.size(), model.index_dim());
  for (std::size_t r = 0; r < catalog.size(); ++r) {
    const Vec v = model.index_embedding(
        assemble_tower(schema, FeatureOwner::item, item_features(catalog[r])));
    std::copy(v.begin(), v.end(), m.row(r).begin());
  }
  return m;
}

HierarchicalIndex publish_index(const HsnnModel& model, const std::vector<Item>& catalog,
                                const FeatureSchema& schema, std::uint64_t version) {
  std::vector<std::uint64_t> ids;
  ids.reserve(catalog.size());
  for (const Item& it : catalog) ids.push_back(it.id);
  return HierarchicalIndex::build(model.codebooks, std::move(ids),
                                  catalog_embeddings(model, catalog, schema), version);
}

namespace {

void set_codebooks(HsnnModel& model, const std::vector<Matrix>& books) {
  for (std::size_t n = 0; n < books.size(); ++n) {
    std::copy(books[n].values().begin(), books[n].values().end(),
              model.codebooks[n].values().begin());
  }
}

std::vector<Item> live_items(const std::map<std::uint64_t, Item>& live) {
  std::vector<Item> out;
  out.reserve(live.size());
  for (const auto& [id, it] : live) out.push_back(it);
  return out;
}

}  // namespace

HsnnTrace train_hsnn(HsnnModel& model, const ImpressionStream& stream,
                     const std::vector<Item>& catalog, const FeatureSchema& schema,
                     const I2ifIndex& i2if, const HsnnTrainConfig& config, Rng& rng) {
  HsnnTrace trace;
  const std::size_t N = model.index_layers();
  const std::size_t B = stream.batches.size();
  std::map<std::uint64_t, Item> live;
  for (const Item& it : catalog) live.emplace(it.id, it);
  if (N > 0 && live.empty()) throw ConfigError("train_hsnn: empty catalog");

  // Index initialisation per mode.
  if (config.mode == TrainMode::joim) {
    model.index_encoder = Tower();
    init_codebooks(model, catalog_embeddings(model, catalog, schema), rng);
  } else if (N > 0) {
    if (config.mode == TrainMode::sil) {
      MonnModel pre = model.item_model;
      MonnTrainConfig pc;
      pc.optimizer = config.optimizer;
      train_monn(pre, stream, schema, i2if, pc);
      model.index_encoder = pre.item_tower;
    } else {
      model.index_encoder = model.item_model.item_tower;
    }
    set_codebooks(model, residual_kmeans(catalog_embeddings(model, catalog, schema),
                                         model.config().nodes, config.kmeans_iters, rng));
  }

  const bool joint = config.mode == TrainMode::joim && N > 0;
  SchedulerConfig sched = config.scheduler;
  if (sched.max_iters == 0) sched.max_iters = std::max<std::size_t>(B, 1);
  const std::size_t warmup_steps =
      config.warmup ? std::size_t(std::llround(config.warmup_fraction * double(B))) : 0;
  std::vector<BalanceRegState> balance;
  for (std::size_t n = 0; n < N; ++n) {
    balance.emplace_back(model.codebooks[n].rows(), config.balance_window);
  }

  Optimizer opt(config.optimizer);
  HsnnModel grads = model.zeros_like();
  NamedParams named, named_grads;
  model.collect(named, joint);
  grads.collect(named_grads, joint);
  const ParamSet params = views(named);
  const ParamSet gparams = views(named_grads);

  I2ifIndex current = i2if;
  std::size_t next_event = 0;
  std::uint64_t last_ts = 0;
  bool first = true;
  std::size_t step = 0;

  std::optional<ServingContext> reps;
  std::size_t reps_step = 0;
  const auto refresh = [&] {
    const std::vector<Item> items = live_items(live);
    reps.emplace(schema, items, publish_index(model, items, schema, step));
    reps_step = step;
  };
  const bool use_reps = config.representative_inputs && N > 0;

  const auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t b = begin; b < end; ++b) {
      const std::size_t before = next_event;
      while (next_event < stream.events.size() && stream.events[next_event].before_batch <= b) {
        const auto& ev = stream.events[next_event].churn;
        current = rebuild_i2if_index(current, ev.removed, ev.added);
        for (std::uint64_t id : ev.removed) live.erase(id);
        for (const Item& it : ev.added) live[it.id] = it;
        ++next_event;
      }
      const MiniBatch& batch = stream.batches[b];
      if (batch.empty()) continue;
      if (use_reps && (!reps || next_event != before ||
                       (joint && step - reps_step >= std::max<std::size_t>(
                                                        config.representative_refresh, 1)))) {
        refresh();
      }
      std::vector<std::vector<TowerInput>> coarse_items;
      std::vector<AssembledInputs> inputs;
      std::vector<std::vector<std::uint8_t>> labels;
      inputs.reserve(batch.size());
      for (const Example& e : batch) {
        if (!first && e.timestamp < last_ts) {
          throw ConfigError("train_hsnn: timestamp " + std::to_string(e.timestamp) + " after " +
                            std::to_string(last_ts) + " (stream must be in timestamp order)");
        }
        first = false;
        last_ts = e.timestamp;
        inputs.push_back(assemble_inputs(schema, e, current));
        labels.push_back(e.labels);
        if (use_reps) coarse_items.push_back(reps->assignment(e.item_id).items);
      }
      StepOptions so;
      so.alpha = joint ? scheduler_alpha(sched, step + 1) : 0.0;
      so.weights = config.weights;
      if (joint) {
        so.weights.index = warmup_weight(step, warmup_steps, config.weights.index);
      } else {
        so.weights.index = 0.0;
        so.weights.flops = 0.0;
        so.weights.reconstruction = 0.0;
      }
      so.teacher = config.teacher;
      so.balance = joint && config.balance ? &balance : nullptr;
      so.coarse_items = coarse_items;
      grads.zero();
      StepResult r = hsnn_batch(model, inputs, labels, so, &grads);
      const BatchLoss& l = r.loss;
      const std::pair<const char*, double> terms[] = {
          {"supervised", l.supervised}, {"distillation", l.distillation}, {"index", l.index},
          {"flops", l.flops}, {"reconstruction", l.reconstruction},
          {"interaction_mse", l.interaction_mse}, {"ensemble", l.ensemble}};
      for (const auto& [name, value] : terms) {
        if (!std::isfinite(value)) {
          throw NumericError("train_hsnn: non-finite " + std::string(name) + " loss at batch " +
                             std::to_string(b) + " (" + std::to_string(value) + ")");
        }
      }
      opt.step(params, gparams);
      if (so.balance) {
        for (std::size_t n = 0; n < N; ++n) balance[n].push(std::move(r.affinities[n]));
      }
      trace.loss.push_back(l);
      trace.alpha.push_back(so.alpha);
      ++step;
      ++trace.steps;
      if (config.snapshot_interval > 0 && trace.steps % config.snapshot_interval == 0 &&
          config.on_snapshot) {
        config.on_snapshot(trace.steps, model);
        ++trace.snapshots;
      }
    }
  };

  if (config.mode == TrainMode::em && N > 0) {
    const std::size_t segments = config.em_rounds + 1;
    const auto bound = [&](std::size_t s) { return B * s / segments; };
    em_joint(
        config.em_rounds, [&](std::size_t r) { run(bound(r), bound(r + 1)); },
        [&](std::size_t) {
          model.index_encoder = model.item_model.item_tower;
          set_codebooks(model, residual_kmeans(catalog_embeddings(model, live_items(live), schema),
                                               model.config().nodes, config.kmeans_iters, rng));
          ++trace.reclusters;
          if (use_reps) refresh();
        });
    run(bound(config.em_rounds), B);
  } else {
    run(0, B);
  }
  return trace;
}

ServingContext::ServingContext(const FeatureSchema& schema, const std::vector<Item>& catalog,
                               const HierarchicalIndex& index)
    : schema_(&schema), tree_(IndexTree::build(index)) {
  for (const Item& it : catalog) {
    items_[it.id] = it;
    inputs_[it.id] = assemble_tower(schema, FeatureOwner::item, item_features(it));
  }
}

const Item& ServingContext::item(std::uint64_t id) const {
  auto it = items_.find(id);
  if (it == items_.end()) throw StaleError("item " + std::to_string(id) + " is not in the catalog");
  return it->second;
}

const TowerInput& ServingContext::item_input(std::uint64_t id) const {
  auto it = inputs_.find(id);
  if (it == inputs_.end()) throw StaleError("item " + std::to_string(id) + " is not in the catalog");
  return it->second;
}

Assignment ServingContext::assignment(std::uint64_t item) const {
  Assignment a;
  a.kind = Assignment::Kind::given;
  const std::vector<std::size_t>& ids = tree_.nodes_of(item);
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const IndexNode& node = tree_.level(n)[ids[n]];
    a.nodes.push_back(node.embedding);
    a.items.push_back(item_input(node.representative));
  }
  return a;
}

EvalFeatures parse_eval_features(const std::string& name) {
  if (name == "representative") return EvalFeatures::representative;
  if (name == "own") return EvalFeatures::own;
  throw ConfigError("unknown eval features '" + name + "' (expected representative or own)");
}

std::vector<HsnnOutput> predict_hsnn(const HsnnModel& model, const std::vector<Example>& examples,
                                     const ServingContext& ctx, const I2ifIndex& i2if,
                                     EvalFeatures features) {
  std::vector<HsnnOutput> out;
  out.reserve(examples.size());
  Assignment hard;
  for (const Example& e : examples) {
    const AssembledInputs in = assemble_inputs(ctx.schema(), e, i2if);
    if (features == EvalFeatures::representative && model.index_layers() > 0) {
      out.push_back(hsnn_forward(model, in, ctx.assignment(e.item_id)));
    } else {
      out.push_back(hsnn_forward(model, in, hard));
    }
  }
  return out;
}

void calibrate_hsnn(HsnnModel& model, const std::vector<Example>& slice,
                    const ServingContext& ctx, const I2ifIndex& i2if, EvalFeatures features) {
  const std::size_t T = model.tasks();
  const std::size_t N = model.index_layers();
  std::fill(model.item_model.calibration.begin(), model.item_model.calibration.end(), 0.0);
  for (CoarseLayer& c : model.coarse) std::fill(c.calibration.begin(), c.calibration.end(), 0.0);
  std::fill(model.ensemble.calibration.begin(), model.ensemble.calibration.end(), 0.0);
  if (slice.empty()) return;

  std::vector<std::vector<std::uint8_t>> labels(T);
  for (const Example& e : slice) {
    for (std::size_t t = 0; t < T; ++t) labels[t].push_back(e.labels.at(t));
  }
  const auto column = [&](const std::vector<HsnnOutput>& outs, std::size_t layer, std::size_t t) {
    Vec c;
    c.reserve(outs.size());
    for (const HsnnOutput& o : outs) {
      c.push_back(layer == N + 1 ? o.ensemble_logits[t] : o.layer_logits[layer][t]);
    }
    return c;
  };
  std::vector<HsnnOutput> outs = predict_hsnn(model, slice, ctx, i2if, features);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      model.coarse[n].calibration[t] = fit_calibration_bias(column(outs, n, t), labels[t]);
    }
    model.item_model.calibration[t] = fit_calibration_bias(column(outs, N, t), labels[t]);
  }
  outs = predict_hsnn(model, slice, ctx, i2if, features);
  for (std::size_t t = 0; t < T; ++t) {
    model.ensemble.calibration[t] = fit_calibration_bias(column(outs, N + 1, t), labels[t]);
  }
}

namespace detail {

Json hsnn_config_to_json(const HsnnConfig& c) {
  Json j;
  j["user_tower"] = tower_config_to_json(c.item.user);
  j["item_tower"] = tower_config_to_json(c.item.item);
  j["item_preset"] = preset_name(c.item.preset);
  j["task_weights"] = c.item.task_weights;
  j["nodes"] = c.nodes;
  std::vector<std::string> presets;
  for (Preset p : c.presets) presets.push_back(preset_name(p));
  j["presets"] = presets;
  j["share_user_tower"] = c.share_user_tower;
  return j;
}

HsnnConfig hsnn_config_from_json(const Json& j) {
  check_keys(j, "model", {"user_tower", "item_tower", "item_preset", "task_weights", "nodes",
                          "presets", "share_user_tower"});
  HsnnConfig c;
  if (j.contains("user_tower")) c.item.user = tower_config_from_json(j.at("user_tower"));
  if (j.contains("item_tower")) c.item.item = tower_config_from_json(j.at("item_tower"));
  if (j.contains("item_preset")) c.item.preset = parse_preset(j.at("item_preset").get<std::string>());
  read_opt(j, "task_weights", c.item.task_weights);
  read_opt(j, "nodes", c.nodes);
  if (j.contains("presets")) {
    c.presets.clear();
    for (const auto& p : j.at("presets")) c.presets.push_back(parse_preset(p.get<std::string>()));
  } else {
    c.presets.assign(c.nodes.size(), Preset::M);
  }
  read_opt(j, "share_user_tower", c.share_user_tower);
  c.validate();
  return c;
}

}  // namespace detail

namespace {

constexpr const char* kHsnnFormat = "hsnn.hsnn.v1";

}  // namespace

NamedParams hsnn_params(HsnnModel& model) {
  NamedParams named;
  model.collect(named, true);
  named.push_back({"calibration.item", model.item_model.calibration,
                   {model.item_model.calibration.size()}});
  for (std::size_t n = 0; n < model.coarse.size(); ++n) {
    named.push_back({"calibration.L" + std::to_string(n), model.coarse[n].calibration,
                     {model.coarse[n].calibration.size()}});
  }
  named.push_back({"calibration.ensemble", model.ensemble.calibration,
                   {model.ensemble.calibration.size()}});
  if (model.index_frozen()) model.index_encoder.collect(named, "encoder");
  return named;
}

void save_hsnn(const std::filesystem::path& dir, HsnnModel& model, const FeatureSchema& schema,
               std::size_t step) {
  std::filesystem::create_directories(dir);
  const auto files = write_params(dir, hsnn_params(model));
  detail::Json m;
  m["format"] = kHsnnFormat;
  m["model"] = detail::hsnn_config_to_json(model.config());
  m["frozen_index"] = model.index_frozen();
  m["schema_hash"] = schema.hash();
  m["step"] = step;
  m["params"] = files;
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

HsnnModel load_hsnn(const std::filesystem::path& dir, const FeatureSchema& schema,
                    std::size_t* step) {
  detail::Json m;
  try {
    m = detail::Json::parse(read_text_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (m.value("format", "") != kHsnnFormat) {
    throw FormatError((dir / "manifest.json").string() + ": expected format " + kHsnnFormat);
  }
  if (m.at("schema_hash").get<std::uint64_t>() != schema.hash()) {
    throw StaleError(dir.string() + ": snapshot was trained with a different feature schema");
  }
  const HsnnConfig c = detail::hsnn_config_from_json(m.at("model"));
  Rng rng(0);
  HsnnModel model = HsnnModel::make(schema, c, rng);
  if (m.at("frozen_index").get<bool>()) {
    model.index_encoder = Tower::make(schema.layout(FeatureOwner::item), c.item.item, rng);
  }
  read_params(dir, hsnn_params(model));
  if (step) *step = m.at("step").get<std::size_t>();
  return model;
}

}  // namespace hsnn
