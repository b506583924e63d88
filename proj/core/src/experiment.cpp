#include "hsnn/experiment.hpp"

#include <algorithm>
#include <fstream>

#include "hsnn/tensor_io.hpp"
#include "json_detail.hpp"

namespace hsnn {

using detail::Json;
using detail::read_opt;

namespace {

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adagrad"; }

std::string features_name(EvalFeatures f) {
  return f == EvalFeatures::own ? "own" : "representative";
}

Json train_to_json(const HsnnTrainConfig& c) {
  Json j;
  j["mode"] = train_mode_name(c.mode);
  j["optimizer"] = Json{{"kind", optimizer_name(c.optimizer.kind)},
                        {"learning_rate", c.optimizer.learning_rate},
                        {"epsilon", c.optimizer.epsilon}};
  j["scheduler"] = Json{{"enabled", c.scheduler.enabled},
                        {"max_alpha", c.scheduler.max_alpha},
                        {"exponent", c.scheduler.exponent},
                        {"max_iters", c.scheduler.max_iters}};
  j["weights"] = Json{{"index", c.weights.index},
                      {"flops", c.weights.flops},
                      {"reconstruction", c.weights.reconstruction},
                      {"interaction_mse", c.weights.interaction_mse}};
  j["warmup"] = c.warmup;
  j["warmup_fraction"] = c.warmup_fraction;
  j["balance"] = c.balance;
  j["balance_window"] = c.balance_window;
  j["kmeans_iters"] = c.kmeans_iters;
  j["em_rounds"] = c.em_rounds;
  j["representative_inputs"] = c.representative_inputs;
  j["representative_refresh"] = c.representative_refresh;
  return j;
}

HsnnTrainConfig train_from_json(const Json& j) {
  detail::check_keys(j, "train",
                     {"mode", "optimizer", "scheduler", "weights", "warmup", "warmup_fraction",
                      "balance", "balance_window", "kmeans_iters", "em_rounds",
                      "representative_inputs", "representative_refresh"});
  HsnnTrainConfig c;
  if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
  if (j.contains("optimizer")) {
    const Json& o = j.at("optimizer");
    detail::check_keys(o, "train.optimizer", {"kind", "learning_rate", "epsilon"});
    if (o.contains("kind")) c.optimizer.kind = parse_optimizer_kind(o.at("kind").get<std::string>());
    read_opt(o, "learning_rate", c.optimizer.learning_rate);
    read_opt(o, "epsilon", c.optimizer.epsilon);
  }
  if (j.contains("scheduler")) {
    const Json& s = j.at("scheduler");
    detail::check_keys(s, "train.scheduler", {"enabled", "max_alpha", "exponent", "max_iters"});
    read_opt(s, "enabled", c.scheduler.enabled);
    read_opt(s, "max_alpha", c.scheduler.max_alpha);
    read_opt(s, "exponent", c.scheduler.exponent);
    read_opt(s, "max_iters", c.scheduler.max_iters);
  }
  if (j.contains("weights")) {
    const Json& w = j.at("weights");
    detail::check_keys(w, "train.weights", {"index", "flops", "reconstruction", "interaction_mse"});
    read_opt(w, "index", c.weights.index);
    read_opt(w, "flops", c.weights.flops);
    read_opt(w, "reconstruction", c.weights.reconstruction);
    read_opt(w, "interaction_mse", c.weights.interaction_mse);
  }
  read_opt(j, "warmup", c.warmup);
  read_opt(j, "warmup_fraction", c.warmup_fraction);
  read_opt(j, "balance", c.balance);
  read_opt(j, "balance_window", c.balance_window);
  read_opt(j, "kmeans_iters", c.kmeans_iters);
  read_opt(j, "em_rounds", c.em_rounds);
  read_opt(j, "representative_inputs", c.representative_inputs);
  read_opt(j, "representative_refresh", c.representative_refresh);
  if (c.balance_window == 0) throw ConfigError("train.balance_window must be at least 1");
  if (c.warmup_fraction < 0.0 || c.warmup_fraction > 1.0) {
    throw ConfigError("train.warmup_fraction must lie in [0, 1]");
  }
  if (c.scheduler.max_alpha <= 0.0) throw ConfigError("train.scheduler.max_alpha must be positive");
  if (c.optimizer.learning_rate <= 0.0) {
    throw ConfigError("train.optimizer.learning_rate must be positive");
  }
  return c;
}

Json eval_to_json(const EvalConfig& c) {
  Json j;
  j["calibration_examples"] = c.calibration_examples;
  j["eval_examples"] = c.eval_examples;
  j["features"] = features_name(c.features);
  j["recall_k"] = c.recall_k;
  j["relevant_count"] = c.relevant_count;
  j["eval_users"] = c.eval_users;
  j["beam"] = c.beam;
  return j;
}

EvalConfig eval_from_json(const Json& j) {
  detail::check_keys(j, "eval", {"calibration_examples", "eval_examples", "features", "recall_k",
                                 "relevant_count", "eval_users", "beam"});
  EvalConfig c;
  read_opt(j, "calibration_examples", c.calibration_examples);
  read_opt(j, "eval_examples", c.eval_examples);
  if (j.contains("features")) c.features = parse_eval_features(j.at("features").get<std::string>());
  read_opt(j, "recall_k", c.recall_k);
  read_opt(j, "relevant_count", c.relevant_count);
  read_opt(j, "eval_users", c.eval_users);
  read_opt(j, "beam", c.beam);
  if (c.eval_examples == 0) throw ConfigError("eval.eval_examples must be at least 1");
  if (c.recall_k.empty()) throw ConfigError("eval.recall_k must list at least one K");
  std::sort(c.recall_k.begin(), c.recall_k.end());
  return c;
}

std::vector<Example> flatten(const ImpressionStream& s) {
  std::vector<Example> out;
  for (const auto& b : s.batches) out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace

RunConfig::RunConfig() {
  world.num_items = 10000;
  stream.examples_per_epoch = 60000;
}

FeatureSchema RunConfig::schema() const {
  return FeatureSchema::standard(world.latent_dim, category_modulus, embed_dim);
}

std::string RunConfig::to_json() const {
  Json j;
  j["world"] = detail::world_config_to_json(world);
  j["stream"] = Json{{"epochs", stream.epochs},
                     {"examples_per_epoch", stream.examples_per_epoch},
                     {"batch_size", stream.batch_size},
                     {"churn_between_epochs", stream.churn_between_epochs}};
  j["schema"] = Json{{"category_modulus", category_modulus}, {"embed_dim", embed_dim}};
  j["model"] = detail::hsnn_config_to_json(model);
  j["train"] = train_to_json(train);
  j["eval"] = eval_to_json(eval);
  j["index_version"] = index_version;
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  detail::check_keys(j, "config",
                     {"world", "stream", "schema", "model", "train", "eval", "index_version"});
  RunConfig c;
  try {
    if (j.contains("world")) {
      Json w = detail::world_config_to_json(c.world);
      w.update(j.at("world"));
      c.world = detail::world_config_from_json(w);
    }
    if (j.contains("stream")) {
      const Json& s = j.at("stream");
      detail::check_keys(s, "stream",
                         {"epochs", "examples_per_epoch", "batch_size", "churn_between_epochs"});
      read_opt(s, "epochs", c.stream.epochs);
      read_opt(s, "examples_per_epoch", c.stream.examples_per_epoch);
      read_opt(s, "batch_size", c.stream.batch_size);
      read_opt(s, "churn_between_epochs", c.stream.churn_between_epochs);
      if (c.stream.batch_size == 0) throw ConfigError("stream.batch_size must be at least 1");
    }
    if (j.contains("schema")) {
      const Json& s = j.at("schema");
      detail::check_keys(s, "schema", {"category_modulus", "embed_dim"});
      read_opt(s, "category_modulus", c.category_modulus);
      read_opt(s, "embed_dim", c.embed_dim);
    }
    if (j.contains("model")) c.model = detail::hsnn_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_from_json(j.at("train"));
    if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
    read_opt(j, "index_version", c.index_version);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.world.validate();
  c.model.validate();
  if (c.model.tasks() != c.world.num_tasks()) {
    throw ConfigError("run config: model has " + std::to_string(c.model.tasks()) +
                      " task weights, world has " + std::to_string(c.world.num_tasks()) + " tasks");
  }
  return c;
}

std::uint64_t RunConfig::hash() const { return fnv1a(to_json()); }

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " not found");
  return RunConfig::from_json(read_text_file(path));
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  return fnv1a(tag, 0xcbf29ce484222325ULL ^ (seed * 0x9e3779b97f4a7c15ULL));
}

std::uint64_t Dataset::hash() const {
  std::vector<Example> all = flatten(stream);
  all.insert(all.end(), calibration.begin(), calibration.end());
  all.insert(all.end(), evaluation.begin(), evaluation.end());
  return dataset_hash(all);
}

Dataset generate_dataset(const RunConfig& config, std::uint64_t seed) {
  SyntheticWorldConfig wc = config.world;
  wc.seed = seed;
  Dataset d;
  World w = generate_world(wc);
  d.initial = w;
  Rng rng(derive_seed(seed, "stream"));
  d.stream = make_stream(w, config.stream, rng);
  const std::uint64_t ts = d.stream.num_examples();
  std::vector<Example> held = sample_impressions(
      w, config.eval.calibration_examples + config.eval.eval_examples, rng, ts);
  const auto mid = held.begin() + static_cast<std::ptrdiff_t>(config.eval.calibration_examples);
  d.calibration.assign(held.begin(), mid);
  d.evaluation.assign(mid, held.end());
  d.world = std::move(w);
  return d;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  write_world(dir / "world_initial.json", data.initial);
  write_world(dir / "world.json", data.world);
  write_dataset(dir / "train.jsonl", flatten(data.stream));
  write_dataset(dir / "calibration.jsonl", data.calibration);
  write_dataset(dir / "eval.jsonl", data.evaluation);
  Json s;
  std::vector<std::size_t> sizes;
  for (const auto& b : data.stream.batches) sizes.push_back(b.size());
  s["batch_sizes"] = sizes;
  Json events = Json::array();
  for (const auto& ev : data.stream.events) {
    Json added = Json::array();
    for (const Item& it : ev.churn.added) added.push_back(detail::item_to_json(it));
    events.push_back(Json{{"before_batch", ev.before_batch},
                          {"removed", ev.churn.removed},
                          {"added", added}});
  }
  s["events"] = events;
  write_text_file(dir / "stream.json", s.dump() + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  for (const char* f : {"world_initial.json", "world.json", "train.jsonl", "calibration.jsonl",
                        "eval.jsonl", "stream.json"}) {
    if (!std::filesystem::exists(dir / f)) {
      throw FormatError("dataset " + dir.string() + " is missing " + f);
    }
  }
  Dataset d;
  d.initial = read_world(dir / "world_initial.json");
  d.world = read_world(dir / "world.json");
  d.calibration = read_dataset(dir / "calibration.jsonl");
  d.evaluation = read_dataset(dir / "eval.jsonl");
  const std::vector<Example> train = read_dataset(dir / "train.jsonl");
  Json s;
  try {
    s = Json::parse(read_text_file(dir / "stream.json"));
    std::size_t pos = 0;
    for (std::size_t n : s.at("batch_sizes").get<std::vector<std::size_t>>()) {
      if (pos + n > train.size()) throw FormatError("stream.json: batch sizes exceed train.jsonl");
      d.stream.batches.emplace_back(train.begin() + static_cast<std::ptrdiff_t>(pos),
                                    train.begin() + static_cast<std::ptrdiff_t>(pos + n));
      pos += n;
    }
    if (pos != train.size()) throw FormatError("stream.json: batch sizes do not cover train.jsonl");
    for (const auto& ev : s.at("events")) {
      StreamEvent e;
      e.before_batch = ev.at("before_batch").get<std::size_t>();
      e.churn.removed = ev.at("removed").get<std::vector<std::uint64_t>>();
      for (const auto& it : ev.at("added")) e.churn.added.push_back(detail::item_from_json(it));
      d.stream.events.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "stream.json").string() + ": " + e.what());
  }
  return d;
}

TrainedRun train_run(const RunConfig& config, std::uint64_t seed, const Dataset& data) {
  const FeatureSchema schema = config.schema();
  TrainedRun r;
  Rng model_rng(derive_seed(seed, "model"));
  r.model = HsnnModel::make(schema, config.model, model_rng);
  Rng train_rng(derive_seed(seed, "train"));
  r.trace = train_hsnn(r.model, data.stream, data.initial.items(), schema,
                       build_i2if_index(data.initial.items()), config.train, train_rng);
  r.index = publish_index(r.model, data.world.items(), schema, config.index_version);
  const ServingContext ctx(schema, data.world.items(), r.index);
  calibrate_hsnn(r.model, data.calibration, ctx, build_i2if_index(data.world.items()),
                 config.eval.features);
  return r;
}

std::string trace_csv(const HsnnTrace& trace) {
  std::string out =
      "step,alpha,supervised,distillation,index,flops,reconstruction,interaction_mse,ensemble\n";
  char buf[256];
  for (std::size_t i = 0; i < trace.loss.size(); ++i) {
    const BatchLoss& l = trace.loss[i];
    std::snprintf(buf, sizeof buf, "%zu,%.6g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", i + 1,
                  trace.alpha[i], l.supervised, l.distillation, l.index, l.flops,
                  l.reconstruction, l.interaction_mse, l.ensemble);
    out += buf;
  }
  return out;
}

RetrievalBudget serving_budget(const EvalConfig& config, const InvertedIndex& index) {
  RetrievalBudget b;
  b.top_k = config.recall_k.empty() ? 100 : config.recall_k.back();
  if (!config.beam.empty()) {
    b.beam = config.beam;
  } else {
    for (std::size_t n = 0; n < index.levels(); ++n) {
      b.beam.push_back(std::max<std::size_t>(1, (index.level(n).size() + 3) / 4));
    }
  }
  b.validate(index.levels());
  return b;
}

MetricsReport evaluate_run(const RunConfig& config, std::uint64_t seed, const Dataset& data,
                           const ServingSnapshot& snapshot, const HierarchicalIndex& index,
                           const std::string& toggles) {
  const FeatureSchema schema = config.schema();
  const HsnnModel& model = snapshot.model;
  const std::size_t T = model.tasks();
  MetricsReport r;
  r.mode = train_mode_name(config.train.mode);
  r.toggles = toggles;
  r.seed = seed;
  r.run_id = r.mode + "/" + toggles + "/seed" + std::to_string(seed);
  r.config_hash = config.hash();
  r.dataset_hash = data.hash();
  r.train_steps = snapshot.step;

  const I2ifIndex i2if = build_i2if_index(data.world.items());
  const ServingContext ctx(schema, data.world.items(), index);
  const std::vector<HsnnOutput> outs =
      predict_hsnn(model, data.evaluation, ctx, i2if, config.eval.features);
  for (std::size_t t = 0; t < T; ++t) {
    Vec probs;
    std::vector<std::uint8_t> labels;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      probs.push_back(outs[i].final.probs[t]);
      labels.push_back(data.evaluation[i].labels.at(t));
    }
    r.ne.push_back(normalized_entropy(probs, labels));
  }
  for (std::size_t l = 0; l < model.layers(); ++l) {
    Vec per_task;
    for (std::size_t t = 0; t < T; ++t) {
      Vec probs;
      std::vector<std::uint8_t> labels;
      for (std::size_t i = 0; i < outs.size(); ++i) {
        probs.push_back(sigmoid(outs[i].layer_logits[l][t]));
        labels.push_back(data.evaluation[i].labels.at(t));
      }
      per_task.push_back(normalized_entropy(probs, labels));
    }
    r.layer_ne.push_back(std::move(per_task));
  }

  const InvertedIndex inv = InvertedIndex::build(snapshot, index, data.world.items(), schema);
  const RetrievalBudget budget = serving_budget(config.eval, inv);
  Rng unused(0);
  MonnConfig small = config.model.item;
  small.preset = Preset::S;
  const std::uint64_t monn_s = monn_item_macs(MonnModel::make(schema, small, unused));
  const std::size_t users = std::min(config.eval.eval_users, data.world.users().size());
  for (std::size_t k : config.eval.recall_k) r.recall[k] = 0.0;
  for (std::size_t i = 0; i < users; ++i) {
    const User& u = data.world.users()[i];
    const RetrievalResult res = retrieve_layerwise(snapshot, inv, schema, u, i2if, budget);
    std::vector<std::uint64_t> ids;
    for (const ScoredItem& s : res.items) ids.push_back(s.id);
    const std::vector<std::uint64_t> relevant = data.world.relevant_items(u, config.eval.relevant_count);
    for (std::size_t k : config.eval.recall_k) {
      const std::size_t n = std::min(k, ids.size());
      r.recall[k] += recall_at_k(std::span(ids.data(), n), relevant);
    }
    r.macs_total += res.cost.macs;
    r.items_scored += res.cost.items_scored;
    r.brute_force_macs += monn_s * inv.size();
  }
  if (users > 0) {
    for (auto& [k, v] : r.recall) v /= double(users);
  }
  r.occupancy = index.occupancy();
  r.occupancy_ratio = r.occupancy.empty() ? 1.0 : occupancy_ratio(r.occupancy[0]);
  return r;
}

MetricsReport run_experiment(const RunConfig& config, std::uint64_t seed,
                             const std::string& toggles) {
  const Dataset data = generate_dataset(config, seed);
  TrainedRun run = train_run(config, seed, data);
  const ServingSnapshot snap = split_model(run.model, run.index.version(), run.trace.steps);
  return evaluate_run(config, seed, data, snap, run.index, toggles);
}

RunConfig apply_toggles(const RunConfig& base, const std::vector<std::string>& off) {
  RunConfig c = base;
  for (const std::string& t : off) {
    if (t == "scheduler") {
      c.train.scheduler.enabled = false;
    } else if (t == "warmup") {
      c.train.warmup = false;
    } else if (t == "balance") {
      c.train.balance = false;
    } else {
      throw ConfigError("unknown ablation toggle '" + t + "' (expected scheduler, warmup or balance)");
    }
  }
  return c;
}

std::vector<MetricsReport> run_ablation_grid(const RunConfig& base, const AblationSpec& spec) {
  for (const std::string& t : spec.toggles) apply_toggles(base, {t});
  const std::vector<TrainMode> modes =
      spec.modes.empty() ? std::vector<TrainMode>{base.train.mode} : spec.modes;
  const std::vector<std::uint64_t> seeds =
      spec.seeds.empty() ? std::vector<std::uint64_t>{1} : spec.seeds;
  std::vector<MetricsReport> rows;
  for (std::uint64_t seed : seeds) {
    const Dataset data = generate_dataset(base, seed);
    for (TrainMode mode : modes) {
      for (std::size_t mask = 0; mask < (std::size_t{1} << spec.toggles.size()); ++mask) {
        std::vector<std::string> off;
        std::string label;
        for (std::size_t i = 0; i < spec.toggles.size(); ++i) {
          const bool disabled = (mask >> i) & 1;
          if (disabled) off.push_back(spec.toggles[i]);
          if (!label.empty()) label += ";";
          label += spec.toggles[i] + (disabled ? "=off" : "=on");
        }
        if (label.empty()) label = "baseline";
        RunConfig c = apply_toggles(base, off);
        c.train.mode = mode;
        TrainedRun run = train_run(c, seed, data);
        const ServingSnapshot snap = split_model(run.model, run.index.version(), run.trace.steps);
        rows.push_back(evaluate_run(c, seed, data, snap, run.index, label));
      }
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<MetricsReport>& rows, const RunConfig& base) {
  std::string out = csv_header(base.eval.recall_k, base.model.tasks());
  for (const MetricsReport& r : rows) {
    const MetricsReport* baseline = &r;
    for (const MetricsReport& b : rows) {
      if (b.seed == r.seed) {
        baseline = &b;
        break;
      }
    }
    out += csv_row(r, *baseline);
  }
  return out;
}

}  // namespace hsnn
