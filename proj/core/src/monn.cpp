#include "hsnn/monn.hpp"

#include <algorithm>
#include <cmath>

#include "hsnn/tensor_io.hpp"
#include "json_detail.hpp"

namespace hsnn {

namespace detail {

Json tower_config_to_json(const TowerConfig& c) {
  return Json{{"num_embed", c.num_embed}, {"dim", c.dim}, {"hidden", c.hidden}};
}

TowerConfig tower_config_from_json(const Json& j) {
  check_keys(j, "tower", {"num_embed", "dim", "hidden"});
  TowerConfig c;
  read_opt(j, "num_embed", c.num_embed);
  read_opt(j, "dim", c.dim);
  read_opt(j, "hidden", c.hidden);
  return c;
}

}  // namespace detail

namespace {

constexpr double kEmbeddingInitStd = 0.1;

std::vector<std::size_t> widths_with(const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> w = hidden;
  w.push_back(out);
  return w;
}

}  // namespace

Tower Tower::make(const TowerLayout& layout, const TowerConfig& config, Rng& rng) {
  Tower t;
  t.layout_ = layout;
  t.config_ = config;
  if (config.num_embed == 0) return t;
  if (config.dim == 0) throw ConfigError("tower: dim must be positive");
  if (layout.input_width() == 0) throw ConfigError("tower: no input features");
  for (const auto& slot : layout.sparse) {
    t.tables_.push_back(EmbeddingTable::make(slot.modulus, slot.dim, kEmbeddingInitStd, rng));
  }
  t.mlp_ = Mlp::make(layout.input_width(), widths_with(config.hidden, config.width()),
                     Activation::identity, rng);
  return t;
}

Vec Tower::pool(const TowerInput& in) const {
  if (in.dense.size() != layout_.dense_dim) {
    throw DimensionError("tower: dense input " + std::to_string(in.dense.size()) +
                         " != layout " + std::to_string(layout_.dense_dim));
  }
  if (in.sparse.size() != tables_.size()) {
    throw DimensionError("tower: " + std::to_string(in.sparse.size()) + " sparse slots, expected " +
                         std::to_string(tables_.size()));
  }
  Vec pooled = in.dense;
  for (std::size_t i = 0; i < tables_.size(); ++i) {
    const Vec e = tables_[i].lookup_sum(in.sparse[i]);
    pooled.insert(pooled.end(), e.begin(), e.end());
  }
  return pooled;
}

Vec Tower::forward(const TowerInput& in, MacCounter* counter) const {
  if (!enabled()) return {};
  return mlp_.forward(pool(in), counter);
}

Vec Tower::forward(const TowerInput& in, Tape& tape) const {
  if (!enabled()) return {};
  tape.pooled = pool(in);
  return mlp_.forward(tape.pooled, tape.mlp);
}

void Tower::backward(const TowerInput& in, const Tape& tape, std::span<const double> grad_out,
                     Tower& grads) const {
  if (!enabled()) return;
  const Vec g = mlp_.backward(tape.mlp, grad_out, grads.mlp_);
  std::size_t offset = layout_.dense_dim;
  for (std::size_t i = 0; i < tables_.size(); ++i) {
    const std::size_t d = tables_[i].dim();
    tables_[i].backward_sum(in.sparse[i], std::span<const double>(g).subspan(offset, d),
                            grads.tables_[i]);
    offset += d;
  }
}

Tower Tower::zeros_like() const {
  Tower t = *this;
  t.zero();
  return t;
}

void Tower::zero() {
  for (auto& tb : tables_) tb.zero();
  mlp_.zero();
}

void Tower::collect(NamedParams& out, const std::string& prefix) {
  for (std::size_t i = 0; i < tables_.size(); ++i) {
    tables_[i].collect(out, prefix + ".emb" + std::to_string(i));
  }
  mlp_.collect(out, prefix + ".mlp");
}

OverArch OverArch::make(const OverArchConfig& config, std::size_t user_dim, std::size_t item_dim,
                        std::size_t interaction_dim, std::size_t tasks, Rng& rng) {
  if (tasks == 0) throw ConfigError("over-arch: need at least one task");
  OverArch o;
  o.config_ = config;
  o.user_dim_ = user_dim;
  o.item_dim_ = item_dim;
  o.interaction_dim_ = interaction_dim;
  o.tasks_ = tasks;
  if (config.kind == OverArchKind::dot) {
    if (interaction_dim != 0) throw ConfigError("dot over-arch takes no interaction input");
    if (item_dim == 0 || user_dim % item_dim != 0) {
      throw ConfigError("dot over-arch: user width " + std::to_string(user_dim) +
                        " is not a multiple of item width " + std::to_string(item_dim));
    }
    o.bias_.assign(tasks, 0.0);
  } else {
    o.mlp_ = Mlp::make(user_dim + item_dim + interaction_dim, widths_with(config.hidden, tasks),
                       Activation::identity, rng);
  }
  return o;
}

std::uint64_t OverArch::macs() const {
  if (config_.kind == OverArchKind::dot) return tasks_ * item_dim_;
  return mlp_.macs();
}

void OverArch::check(std::size_t u, std::size_t i, std::size_t x) const {
  if (u != user_dim_ || i != item_dim_ || x != interaction_dim_) {
    throw DimensionError("over-arch: inputs (" + std::to_string(u) + ", " + std::to_string(i) +
                         ", " + std::to_string(x) + ") != (" + std::to_string(user_dim_) + ", " +
                         std::to_string(item_dim_) + ", " + std::to_string(interaction_dim_) +
                         ")");
  }
}

Vec OverArch::forward(std::span<const double> user, std::span<const double> item,
                      std::span<const double> interaction, MacCounter* counter) const {
  check(user.size(), item.size(), interaction.size());
  if (config_.kind == OverArchKind::dot) {
    const std::size_t blocks = user_dim_ / item_dim_;
    Vec logits(tasks_);
    for (std::size_t t = 0; t < tasks_; ++t) {
      logits[t] = dot(user.subspan((t % blocks) * item_dim_, item_dim_), item) + bias_[t];
    }
    if (counter) counter->macs += macs();
    return logits;
  }
  return mlp_.forward(concat({user, item, interaction}), counter);
}

Vec OverArch::forward(std::span<const double> user, std::span<const double> item,
                      std::span<const double> interaction, Tape& tape) const {
  if (config_.kind == OverArchKind::dot) return forward(user, item, interaction);
  check(user.size(), item.size(), interaction.size());
  tape.input = concat({user, item, interaction});
  return mlp_.forward(tape.input, tape.mlp);
}

OverArch::InputGrads OverArch::backward(std::span<const double> user, std::span<const double> item,
                                        std::span<const double> interaction, const Tape& tape,
                                        std::span<const double> grad_logits,
                                        OverArch& grads) const {
  check(user.size(), item.size(), interaction.size());
  if (grad_logits.size() != tasks_) throw DimensionError("over-arch: grad_logits size");
  InputGrads g;
  if (config_.kind == OverArchKind::dot) {
    const std::size_t blocks = user_dim_ / item_dim_;
    g.user.assign(user_dim_, 0.0);
    g.item.assign(item_dim_, 0.0);
    for (std::size_t t = 0; t < tasks_; ++t) {
      const std::size_t off = (t % blocks) * item_dim_;
      axpy(grad_logits[t], item, std::span<double>(g.user).subspan(off, item_dim_));
      axpy(grad_logits[t], user.subspan(off, item_dim_), g.item);
      grads.bias_[t] += grad_logits[t];
    }
    return g;
  }
  const Vec gin = mlp_.backward(tape.mlp, grad_logits, grads.mlp_);
  g.user.assign(gin.begin(), gin.begin() + static_cast<std::ptrdiff_t>(user_dim_));
  g.item.assign(gin.begin() + static_cast<std::ptrdiff_t>(user_dim_),
                gin.begin() + static_cast<std::ptrdiff_t>(user_dim_ + item_dim_));
  g.interaction.assign(gin.begin() + static_cast<std::ptrdiff_t>(user_dim_ + item_dim_), gin.end());
  return g;
}

OverArch OverArch::zeros_like() const {
  OverArch o = *this;
  o.zero();
  return o;
}

void OverArch::zero() {
  mlp_.zero();
  std::fill(bias_.begin(), bias_.end(), 0.0);
}

void OverArch::collect(NamedParams& out, const std::string& prefix) {
  if (config_.kind == OverArchKind::dot) {
    out.push_back({prefix + ".bias", bias_, {bias_.size()}});
  } else {
    mlp_.collect(out, prefix + ".mlp");
  }
}

PresetSpec preset_spec(Preset p) {
  switch (p) {
    case Preset::XS:
      return {{0, 0, {}}, {OverArchKind::dot, {}}};
    case Preset::S:
      return {{1, 8, {16}}, {OverArchKind::mlp, {16}}};
    case Preset::M:
      return {{1, 8, {32, 16}}, {OverArchKind::mlp, {64, 32}}};
    case Preset::L:
      return {{1, 8, {64, 32}}, {OverArchKind::mlp, {128, 64}}};
  }
  throw ConfigError("unknown preset");
}

Preset parse_preset(const std::string& name) {
  if (name == "XS") return Preset::XS;
  if (name == "S") return Preset::S;
  if (name == "M") return Preset::M;
  if (name == "L") return Preset::L;
  throw ConfigError("unknown preset '" + name + "' (expected XS, S, M or L)");
}

std::string preset_name(Preset p) {
  switch (p) {
    case Preset::XS: return "XS";
    case Preset::S: return "S";
    case Preset::M: return "M";
    case Preset::L: return "L";
  }
  return "?";
}

Prediction make_prediction(Vec logits) {
  Prediction p;
  p.probs.resize(logits.size());
  for (std::size_t t = 0; t < logits.size(); ++t) p.probs[t] = sigmoid(logits[t]);
  p.logits = std::move(logits);
  return p;
}

double clamped_bce(double prob, double target) {
  const double p = std::clamp(prob, kProbClamp, 1.0 - kProbClamp);
  return -(target * std::log(p) + (1.0 - target) * std::log(1.0 - p));
}

double clamped_bce_logit_grad(double logit, double target) {
  const double p = sigmoid(logit);
  if (p < kProbClamp || p > 1.0 - kProbClamp) return 0.0;
  return p - target;
}

ExampleLoss example_loss(const Prediction& pred, std::span<const std::uint8_t> labels,
                         std::span<const double> task_weights, std::size_t batch_size,
                         const Vec* teacher_probs) {
  const std::size_t T = pred.logits.size();
  if (labels.size() != T || task_weights.size() != T) {
    throw DimensionError("example_loss: " + std::to_string(T) + " logits, " +
                         std::to_string(labels.size()) + " labels, " +
                         std::to_string(task_weights.size()) + " task weights");
  }
  if (teacher_probs && teacher_probs->size() != T) {
    throw DimensionError("example_loss: teacher width");
  }
  const double inv = 1.0 / static_cast<double>(batch_size);
  ExampleLoss out;
  out.grad_logits.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double y = labels[t];
    out.supervised += task_weights[t] * clamped_bce(pred.probs[t], y) * inv;
    out.grad_logits[t] = task_weights[t] * clamped_bce_logit_grad(pred.logits[t], y) * inv;
    if (teacher_probs) {
      const double q = (*teacher_probs)[t];
      out.distillation += clamped_bce(pred.probs[t], q) * inv;
      out.grad_logits[t] += clamped_bce_logit_grad(pred.logits[t], q) * inv;
    }
  }
  return out;
}

double supervised_loss(std::span<const Prediction> preds,
                       std::span<const std::vector<std::uint8_t>> labels,
                       std::span<const double> task_weights) {
  if (preds.size() != labels.size()) throw DimensionError("supervised_loss: batch size mismatch");
  if (preds.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].probs.size() != task_weights.size() || labels[i].size() != task_weights.size()) {
      throw DimensionError("supervised_loss: example " + std::to_string(i) + " task count");
    }
    for (std::size_t t = 0; t < task_weights.size(); ++t) {
      sum += task_weights[t] * clamped_bce(preds[i].probs[t], labels[i][t]);
    }
  }
  return sum / static_cast<double>(preds.size());
}

double distillation_loss(std::span<const Prediction> student, std::span<const Vec> teacher_probs) {
  if (student.size() != teacher_probs.size()) {
    throw DimensionError("distillation_loss: batch size mismatch");
  }
  if (student.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (student[i].probs.size() != teacher_probs[i].size()) {
      throw DimensionError("distillation_loss: example " + std::to_string(i) + " task count");
    }
    for (std::size_t t = 0; t < teacher_probs[i].size(); ++t) {
      sum += clamped_bce(student[i].probs[t], teacher_probs[i][t]);
    }
  }
  return sum / static_cast<double>(student.size());
}

double total_loss(std::span<const Prediction> preds,
                  std::span<const std::vector<std::uint8_t>> labels,
                  std::span<const double> task_weights, const std::vector<Vec>* teacher_probs) {
  const double sup = supervised_loss(preds, labels, task_weights);
  if (!teacher_probs) return sup;
  return sup + distillation_loss(preds, *teacher_probs);
}

MonnModel MonnModel::make(const FeatureSchema& schema, const MonnConfig& config, Rng& rng) {
  if (config.task_weights.empty()) throw ConfigError("monn: task_weights is empty");
  if (config.user.num_embed == 0 || config.item.num_embed == 0) {
    throw ConfigError("monn: user and item towers need num_embed >= 1");
  }
  const PresetSpec spec = preset_spec(config.preset);
  MonnModel m;
  m.config_ = config;
  m.user_tower = Tower::make(schema.layout(FeatureOwner::user), config.user, rng);
  m.item_tower = Tower::make(schema.layout(FeatureOwner::item), config.item, rng);
  const TowerLayout inter = schema.layout(FeatureOwner::interaction);
  if (spec.interaction.num_embed > 0 && inter.empty()) {
    throw ConfigError("monn: preset " + preset_name(config.preset) +
                      " needs interaction features in the schema");
  }
  m.interaction_tower = Tower::make(inter, spec.interaction, rng);
  m.over_arch = OverArch::make(spec.over_arch, m.user_tower.output_dim(),
                               m.item_tower.output_dim(), m.interaction_tower.output_dim(),
                               config.tasks(), rng);
  m.calibration.assign(config.tasks(), 0.0);
  return m;
}

Prediction MonnModel::forward(const AssembledInputs& in, MacCounter* counter) const {
  const Vec u = user_tower.forward(in.user, counter);
  const Vec v = item_tower.forward(in.item, counter);
  const Vec x = interaction_tower.forward(in.interaction, counter);
  Vec logits = over_arch.forward(u, v, x, counter);
  for (std::size_t t = 0; t < logits.size(); ++t) logits[t] += calibration[t];
  return make_prediction(std::move(logits));
}

Prediction MonnModel::forward(const AssembledInputs& in, Tape& tape) const {
  tape.user_embedding = user_tower.forward(in.user, tape.user);
  tape.item_embedding = item_tower.forward(in.item, tape.item);
  tape.interaction_embedding = interaction_tower.forward(in.interaction, tape.interaction);
  Vec logits = over_arch.forward(tape.user_embedding, tape.item_embedding,
                                 tape.interaction_embedding, tape.over_arch);
  for (std::size_t t = 0; t < logits.size(); ++t) logits[t] += calibration[t];
  return make_prediction(std::move(logits));
}

void MonnModel::backward(const AssembledInputs& in, const Tape& tape,
                         std::span<const double> grad_logits, MonnModel& grads) const {
  const OverArch::InputGrads g =
      over_arch.backward(tape.user_embedding, tape.item_embedding, tape.interaction_embedding,
                         tape.over_arch, grad_logits, grads.over_arch);
  user_tower.backward(in.user, tape.user, g.user, grads.user_tower);
  item_tower.backward(in.item, tape.item, g.item, grads.item_tower);
  interaction_tower.backward(in.interaction, tape.interaction, g.interaction,
                             grads.interaction_tower);
}

MonnModel MonnModel::zeros_like() const {
  MonnModel m = *this;
  m.zero();
  return m;
}

void MonnModel::zero() {
  user_tower.zero();
  item_tower.zero();
  interaction_tower.zero();
  over_arch.zero();
  std::fill(calibration.begin(), calibration.end(), 0.0);
}

void MonnModel::collect(NamedParams& out) {
  user_tower.collect(out, "user");
  item_tower.collect(out, "item");
  if (interaction_tower.enabled()) interaction_tower.collect(out, "interaction");
  over_arch.collect(out, "over");
}

Prediction monn_forward(const MonnModel& model, const AssembledInputs& in) {
  return model.forward(in);
}

double fit_calibration_bias(std::span<const double> logits, std::span<const std::uint8_t> labels) {
  if (logits.size() != labels.size()) throw DimensionError("calibration: size mismatch");
  if (logits.empty()) throw ConfigError("calibration: empty slice");
  double target = 0.0;
  for (auto y : labels) target += y;
  target /= static_cast<double>(labels.size());
  auto mean_prob = [&](double b) {
    double s = 0.0;
    for (double l : logits) s += sigmoid(l + b);
    return s / static_cast<double>(logits.size());
  };
  double lo = -30.0, hi = 30.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mean_prob(mid) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

TrainTrace train_monn(MonnModel& model, const ImpressionStream& stream, const FeatureSchema& schema,
                      const I2ifIndex& i2if, const MonnTrainConfig& config) {
  TrainTrace trace;
  I2ifIndex current = i2if;
  Optimizer opt(config.optimizer);
  MonnModel grads = model.zeros_like();
  NamedParams named, named_grads;
  model.collect(named);
  grads.collect(named_grads);
  const ParamSet params = views(named);
  const ParamSet gparams = views(named_grads);
  const Vec& w = model.config().task_weights;
  std::size_t next_event = 0;
  std::uint64_t last_ts = 0;
  bool first = true;
  for (std::size_t b = 0; b < stream.batches.size(); ++b) {
    while (next_event < stream.events.size() && stream.events[next_event].before_batch <= b) {
      const auto& ev = stream.events[next_event].churn;
      current = rebuild_i2if_index(current, ev.removed, ev.added);
      ++next_event;
    }
    const MiniBatch& batch = stream.batches[b];
    if (batch.empty()) continue;
    grads.zero();
    double sup = 0.0, distill = 0.0;
    for (const Example& e : batch) {
      if (!first && e.timestamp < last_ts) {
        throw ConfigError("train_monn: timestamp " + std::to_string(e.timestamp) +
                          " after " + std::to_string(last_ts) +
                          " (stream must be in timestamp order)");
      }
      first = false;
      last_ts = e.timestamp;
      const AssembledInputs in = assemble_inputs(schema, e, current);
      MonnModel::Tape tape;
      const Prediction p = model.forward(in, tape);
      Vec teacher_probs;
      if (config.teacher) teacher_probs = config.teacher->forward(in).probs;
      const ExampleLoss el = example_loss(p, e.labels, w, batch.size(),
                                          config.teacher ? &teacher_probs : nullptr);
      sup += el.supervised;
      distill += el.distillation;
      model.backward(in, tape, el.grad_logits, grads);
    }
    if (!std::isfinite(sup) || !std::isfinite(distill)) {
      throw NumericError("train_monn: non-finite loss at batch " + std::to_string(b) +
                         " (supervised=" + std::to_string(sup) +
                         ", distillation=" + std::to_string(distill) + ")");
    }
    opt.step(params, gparams);
    trace.loss.push_back(sup + distill);
    ++trace.steps;
    if (config.snapshot_interval > 0 && trace.steps % config.snapshot_interval == 0 &&
        config.on_snapshot) {
      config.on_snapshot(trace.steps, model);
      ++trace.snapshots;
    }
  }
  return trace;
}

void calibrate_monn(MonnModel& model, const std::vector<Example>& slice,
                    const FeatureSchema& schema, const I2ifIndex& i2if) {
  const std::size_t T = model.tasks();
  std::fill(model.calibration.begin(), model.calibration.end(), 0.0);
  std::vector<Vec> logits(T);
  std::vector<std::vector<std::uint8_t>> labels(T);
  for (const Example& e : slice) {
    const Prediction p = model.forward(assemble_inputs(schema, e, i2if));
    for (std::size_t t = 0; t < T; ++t) {
      logits[t].push_back(p.logits[t]);
      labels[t].push_back(e.labels.at(t));
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    model.calibration[t] = fit_calibration_bias(logits[t], labels[t]);
  }
}

namespace {

constexpr const char* kMonnFormat = "hsnn.monn.v1";

}  // namespace

void save_monn(const std::filesystem::path& dir, MonnModel& model, const FeatureSchema& schema,
               std::size_t step) {
  NamedParams named;
  model.collect(named);
  named.push_back({"calibration", model.calibration, {model.calibration.size()}});
  std::filesystem::create_directories(dir);
  const auto files = write_params(dir, named);
  detail::Json m;
  m["format"] = kMonnFormat;
  m["preset"] = preset_name(model.config().preset);
  m["user"] = detail::tower_config_to_json(model.config().user);
  m["item"] = detail::tower_config_to_json(model.config().item);
  m["task_weights"] = model.config().task_weights;
  m["schema_hash"] = schema.hash();
  m["step"] = step;
  m["params"] = files;
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

MonnModel load_monn(const std::filesystem::path& dir, const FeatureSchema& schema) {
  detail::Json m;
  try {
    m = detail::Json::parse(read_text_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (m.value("format", "") != kMonnFormat) {
    throw FormatError((dir / "manifest.json").string() + ": expected format " + kMonnFormat);
  }
  if (m.at("schema_hash").get<std::uint64_t>() != schema.hash()) {
    throw StaleError(dir.string() + ": snapshot was trained with a different feature schema");
  }
  MonnConfig c;
  c.preset = parse_preset(m.at("preset").get<std::string>());
  c.user = detail::tower_config_from_json(m.at("user"));
  c.item = detail::tower_config_from_json(m.at("item"));
  c.task_weights = m.at("task_weights").get<Vec>();
  Rng rng(0);
  MonnModel model = MonnModel::make(schema, c, rng);
  NamedParams named;
  model.collect(named);
  named.push_back({"calibration", model.calibration, {model.calibration.size()}});
  read_params(dir, named);
  return model;
}

std::vector<std::uint8_t> labels_of(const Example& e) { return e.labels; }

}  // namespace hsnn
