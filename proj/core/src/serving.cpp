#include "hsnn/serving.hpp"

#include <algorithm>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdio>

#include "hsnn/tensor_io.hpp"
#include "json_detail.hpp"

namespace hsnn {

namespace {

constexpr const char* kSnapshotFormat = "hsnn.serving.v1";

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

// "L3.user.mlp" -> "user.mlp"
std::string strip_layer(const std::string& name) {
  if (name.size() > 1 && name[0] == 'L' && std::isdigit(static_cast<unsigned char>(name[1]))) {
    const auto dot = name.find('.');
    if (dot != std::string::npos) return name.substr(dot + 1);
  }
  return name;
}

bool better(const ScoredItem& a, const ScoredItem& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

}  // namespace

ServingSnapshot split_model(const HsnnModel& model, std::uint64_t index_version, std::size_t step) {
  return ServingSnapshot{model, index_version, step};
}

std::string snapshot_part_of(const std::string& param_name) {
  const std::string n = strip_layer(param_name);
  if (starts_with(n, "user.")) return "user_tower";
  if (starts_with(n, "item.") || starts_with(n, "encoder.")) return "item_tower";
  if (starts_with(n, "interaction.")) return "interaction";
  if (starts_with(n, "codebook")) return "cluster_model";
  if (starts_with(n, "over.") || starts_with(n, "ensemble.") || starts_with(n, "calibration.")) {
    return "over_arch";
  }
  throw FormatError("parameter '" + param_name + "' belongs to no snapshot part");
}

namespace {

std::map<std::string, NamedParams> partition_params(HsnnModel& model) {
  std::map<std::string, NamedParams> parts;
  for (const char* p : kSnapshotParts) parts[p];
  for (NamedParam& p : hsnn_params(model)) parts[snapshot_part_of(p.name)].push_back(p);
  return parts;
}

detail::Json read_manifest(const std::filesystem::path& path) {
  try {
    return detail::Json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

void save_snapshot(const std::filesystem::path& dir, const ServingSnapshot& snapshot,
                   const FeatureSchema& schema) {
  HsnnModel model = snapshot.model;
  std::filesystem::create_directories(dir);
  detail::Json m;
  m["format"] = kSnapshotFormat;
  m["model"] = detail::hsnn_config_to_json(model.config());
  m["frozen_index"] = model.index_frozen();
  m["schema_hash"] = schema.hash();
  m["index_version"] = snapshot.index_version;
  m["step"] = snapshot.step;
  detail::Json parts = detail::Json::array();
  for (auto& [name, params] : partition_params(model)) {
    const std::filesystem::path pd = dir / name;
    std::filesystem::create_directories(pd);
    detail::Json pm;
    pm["part"] = name;
    pm["step"] = snapshot.step;
    pm["index_version"] = snapshot.index_version;
    pm["params"] = write_params(pd, params);
    write_text_file(pd / "part.json", pm.dump(2) + "\n");
    parts.push_back(name);
  }
  m["parts"] = parts;
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

ServingSnapshot load_snapshot(const std::filesystem::path& dir, const FeatureSchema& schema) {
  const detail::Json m = read_manifest(dir / "manifest.json");
  if (m.value("format", "") != kSnapshotFormat) {
    throw FormatError((dir / "manifest.json").string() + ": expected format " + kSnapshotFormat);
  }
  if (m.at("schema_hash").get<std::uint64_t>() != schema.hash()) {
    throw StaleError(dir.string() + ": snapshot was trained with a different feature schema");
  }
  ServingSnapshot snap;
  snap.step = m.at("step").get<std::size_t>();
  snap.index_version = m.at("index_version").get<std::uint64_t>();
  const HsnnConfig c = detail::hsnn_config_from_json(m.at("model"));
  Rng rng(0);
  snap.model = HsnnModel::make(schema, c, rng);
  if (m.at("frozen_index").get<bool>()) {
    snap.model.index_encoder = Tower::make(schema.layout(FeatureOwner::item), c.item.item, rng);
  }
  for (auto& [name, params] : partition_params(snap.model)) {
    const std::filesystem::path pd = dir / name;
    const detail::Json pm = read_manifest(pd / "part.json");
    if (pm.at("step").get<std::size_t>() != snap.step ||
        pm.at("index_version").get<std::uint64_t>() != snap.index_version) {
      throw StaleError(pd.string() + ": part is from step " + pm.at("step").dump() +
                       " / index version " + pm.at("index_version").dump() + ", manifest has " +
                       std::to_string(snap.step) + " / " + std::to_string(snap.index_version));
    }
    read_params(pd, params);
  }
  return snap;
}

std::vector<std::uint32_t> assign_item(const ServingSnapshot& snapshot, const FeatureSchema& schema,
                                       const Item& item) {
  const Vec v =
      snapshot.model.index_embedding(assemble_tower(schema, FeatureOwner::item, item_features(item)));
  return residual_assign(v, snapshot.model.codebooks);
}

InvertedIndex InvertedIndex::build(const ServingSnapshot& snapshot, const HierarchicalIndex& index,
                                   const std::vector<Item>& catalog, const FeatureSchema& schema) {
  if (index.levels() != snapshot.model.index_layers()) {
    throw DimensionError("inverted index: index has " + std::to_string(index.levels()) +
                         " levels, model has " + std::to_string(snapshot.model.index_layers()) +
                         " index layers");
  }
  InvertedIndex inv;
  inv.tree_ = IndexTree::build(index);
  for (const Item& it : catalog) {
    if (!index.contains(it.id)) {
      throw StaleError("inverted index: item " + std::to_string(it.id) +
                       " is missing from index version " + std::to_string(index.version()));
    }
    Entry e;
    e.item = it;
    e.input = assemble_tower(schema, FeatureOwner::item, item_features(it));
    e.embedding = snapshot.model.item_model.item_tower.forward(e.input);
    inv.entries_.emplace(it.id, std::move(e));
  }
  if (inv.entries_.size() != index.item_ids().size()) {
    throw StaleError("inverted index: catalog has " + std::to_string(inv.entries_.size()) +
                     " items, index version " + std::to_string(index.version()) + " has " +
                     std::to_string(index.item_ids().size()));
  }
  return inv;
}

const InvertedIndex::Entry& InvertedIndex::entry(std::uint64_t id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw StaleError("item " + std::to_string(id) + " is not indexed");
  return it->second;
}

bool InvertedIndex::is_partition() const {
  for (std::size_t n = 0; n < levels(); ++n) {
    std::vector<std::uint64_t> all;
    for (const IndexNode& node : level(n)) all.insert(all.end(), node.items.begin(), node.items.end());
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end()) return false;
    if (all.size() != entries_.size()) return false;
    for (std::uint64_t id : all) {
      if (!contains(id)) return false;
    }
  }
  return true;
}

RefreshedIndex refresh_index(const ServingSnapshot& snapshot, const std::vector<Item>& catalog,
                             const FeatureSchema& schema, std::uint64_t version) {
  RefreshedIndex r;
  r.index = publish_index(snapshot.model, catalog, schema, version);
  r.snapshot = snapshot;
  r.snapshot.index_version = version;
  r.inverted = InvertedIndex::build(r.snapshot, r.index, catalog, schema);
  return r;
}

void RetrievalBudget::validate(std::size_t index_layers) const {
  if (beam.size() != index_layers) {
    throw ConfigError("retrieval budget: " + std::to_string(beam.size()) + " beam widths for " +
                      std::to_string(index_layers) + " index layers");
  }
  for (std::size_t k : beam) {
    if (k == 0) throw ConfigError("retrieval budget: beam widths must be at least 1");
  }
}

RetrievalBudget exhaustive_budget(const InvertedIndex& index, std::size_t top_k) {
  RetrievalBudget b;
  for (std::size_t n = 0; n < index.levels(); ++n) b.beam.push_back(std::max<std::size_t>(index.level(n).size(), 1));
  b.top_k = top_k;
  return b;
}

AssembledInputs serving_inputs(const FeatureSchema& schema, const User& user,
                               const InvertedIndex::Entry& item, const I2ifIndex& i2if) {
  AssembledInputs in;
  const EntityFeatures uf = user_features(user);
  in.user = assemble_tower(schema, FeatureOwner::user, uf);
  in.item = item.input;
  in.interaction = assemble_interaction(schema, uf, item.item.id, i2if, {});
  return in;
}

namespace {

void check_versions(const ServingSnapshot& snapshot, const InvertedIndex& index) {
  if (snapshot.index_version != index.version()) {
    throw StaleError("version skew: snapshot expects index version " +
                     std::to_string(snapshot.index_version) + ", index is version " +
                     std::to_string(index.version()));
  }
  if (snapshot.model.index_layers() != index.levels()) {
    throw DimensionError("snapshot has " + std::to_string(snapshot.model.index_layers()) +
                         " index layers, index has " + std::to_string(index.levels()));
  }
}

Vec item_layer_logits(const HsnnModel& model, std::span<const double> user_emb,
                      const AssembledInputs& in, std::span<const double> item_emb,
                      MacCounter* counter) {
  const MonnModel& im = model.item_model;
  const Vec x = im.interaction_tower.forward(in.interaction, counter);
  Vec logits = im.over_arch.forward(user_emb, item_emb, x, counter);
  for (std::size_t t = 0; t < logits.size(); ++t) logits[t] += im.calibration[t];
  return logits;
}

void sort_and_truncate(std::vector<ScoredItem>& items, std::size_t top_k) {
  std::sort(items.begin(), items.end(), better);
  if (items.size() > top_k) items.resize(top_k);
}

struct Candidate {
  std::size_t node = 0;
  Vec flat;  // layer logits through this level
  double score = 0.0;
};

std::vector<Candidate> score_nodes(const HsnnModel& model, const InvertedIndex& index,
                                   std::size_t n, const std::vector<std::size_t>& nodes,
                                   const std::vector<const Vec*>& parent_flat,
                                   std::span<const double> user_emb, const TowerInput& user_in,
                                   MacCounter& counter, CostCounter& cost) {
  const std::size_t T = model.tasks();
  std::vector<Candidate> out;
  out.reserve(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const IndexNode& node = index.level(n)[nodes[i]];
    const Vec l = model.coarse_logits(n, user_emb, user_in, node.embedding,
                                      index.entry(node.representative).input, &counter);
    Candidate c;
    c.node = nodes[i];
    if (parent_flat[i]) c.flat = *parent_flat[i];
    c.flat.insert(c.flat.end(), l.begin(), l.end());
    c.score = model.ensemble.logit(0, c.flat, (n + 1) * T);
    counter.macs += model.ensemble.macs((n + 1) * T);
    out.push_back(std::move(c));
  }
  cost.node_evals[n] += nodes.size();
  return out;
}

void rank_nodes(std::vector<Candidate>& c) {
  std::sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.node < b.node;
  });
}

}  // namespace

RetrievalResult retrieve_layerwise(const ServingSnapshot& snapshot, const InvertedIndex& index,
                                   const FeatureSchema& schema, const User& user,
                                   const I2ifIndex& i2if, const RetrievalBudget& budget) {
  check_versions(snapshot, index);
  const HsnnModel& model = snapshot.model;
  const std::size_t N = model.index_layers();
  budget.validate(N);
  RetrievalResult res;
  res.cost.node_evals.assign(N, 0);
  MacCounter counter;
  const TowerInput user_in = assemble_tower(schema, FeatureOwner::user, user_features(user));
  const Vec u = model.item_model.user_tower.forward(user_in, &counter);
  res.cost.user_macs = counter.macs;

  std::vector<Candidate> beam;
  if (N > 0) {
    std::vector<std::size_t> nodes(index.level(0).size());
    for (std::size_t k = 0; k < nodes.size(); ++k) nodes[k] = k;
    std::vector<const Vec*> flats(nodes.size(), nullptr);
    beam = score_nodes(model, index, 0, nodes, flats, u, user_in, counter, res.cost);
    rank_nodes(beam);
    if (beam.size() > budget.beam[0]) beam.resize(budget.beam[0]);
    for (std::size_t n = 1; n < N; ++n) {
      std::vector<std::size_t> next;
      std::vector<const Vec*> flats;
      for (const Candidate& c : beam) {
        for (std::size_t child : index.level(n - 1)[c.node].children) {
          next.push_back(child);
          flats.push_back(&c.flat);
        }
      }
      std::vector<Candidate> scored =
          score_nodes(model, index, n, next, flats, u, user_in, counter, res.cost);
      rank_nodes(scored);
      if (scored.size() > budget.beam[n]) scored.resize(budget.beam[n]);
      beam = std::move(scored);
    }
  }

  const auto score_item = [&](const InvertedIndex::Entry& e, const Vec* prefix) {
    AssembledInputs in;
    in.interaction = assemble_interaction(schema, user_features(user), e.item.id, i2if, {});
    Vec flat = prefix ? *prefix : Vec{};
    const Vec l = item_layer_logits(model, u, in, e.embedding, &counter);
    flat.insert(flat.end(), l.begin(), l.end());
    const double s = model.ensemble.logit(0, flat, flat.size());
    counter.macs += model.ensemble.macs(flat.size());
    ++res.cost.items_scored;
    res.items.push_back({e.item.id, s});
  };
  if (N == 0) {
    for (const auto& [id, e] : index.entries()) {
      if (res.cost.items_scored >= budget.max_items) break;
      score_item(e, nullptr);
    }
  } else {
    for (const Candidate& c : beam) {
      for (std::uint64_t id : index.level(N - 1)[c.node].items) {
        if (res.cost.items_scored >= budget.max_items) break;
        score_item(index.entry(id), &c.flat);
      }
    }
  }
  res.cost.macs = counter.macs;
  sort_and_truncate(res.items, budget.top_k);
  return res;
}

RetrievalResult retrieve_brute_force(const ServingSnapshot& snapshot, const InvertedIndex& index,
                                     const FeatureSchema& schema, const User& user,
                                     const I2ifIndex& i2if, std::size_t top_k) {
  check_versions(snapshot, index);
  const HsnnModel& model = snapshot.model;
  RetrievalResult res;
  res.cost.node_evals.assign(model.index_layers(), 0);
  MacCounter counter;
  for (const auto& [id, e] : index.entries()) {
    Assignment a;
    a.kind = Assignment::Kind::given;
    const std::vector<std::size_t>& nodes = index.tree().nodes_of(id);
    for (std::size_t n = 0; n < nodes.size(); ++n) {
      const IndexNode& node = index.level(n)[nodes[n]];
      a.nodes.push_back(node.embedding);
      a.items.push_back(index.entry(node.representative).input);
      ++res.cost.node_evals[n];
    }
    const HsnnOutput out = hsnn_forward(model, serving_inputs(schema, user, e, i2if), a, &counter);
    ++res.cost.items_scored;
    res.items.push_back({id, out.ensemble_logits[0]});
  }
  res.cost.macs = counter.macs;
  sort_and_truncate(res.items, top_k);
  return res;
}

QueueResult retrieve_budgeted_queue(const ServingSnapshot& snapshot, const InvertedIndex& index,
                                    const FeatureSchema& schema, const User& user,
                                    std::size_t max_items) {
  const HsnnModel& model = snapshot.model;
  const std::size_t N = model.index_layers();
  if (N == 0) throw ConfigError("budgeted queue serving needs at least one index layer");
  check_versions(snapshot, index);
  QueueResult res;
  res.cost.node_evals.assign(N, 0);
  MacCounter counter;
  const TowerInput user_in = assemble_tower(schema, FeatureOwner::user, user_features(user));
  const Vec u = model.item_model.user_tower.forward(user_in, &counter);
  res.cost.user_macs = counter.macs;

  std::vector<std::size_t> nodes(index.level(0).size());
  for (std::size_t k = 0; k < nodes.size(); ++k) nodes[k] = k;
  std::vector<const Vec*> flats(nodes.size(), nullptr);
  std::vector<Candidate> level = score_nodes(model, index, 0, nodes, flats, u, user_in,
                                             counter, res.cost);
  for (std::size_t n = 1; n < N; ++n) {
    std::vector<std::size_t> next;
    std::vector<const Vec*> pf;
    for (const Candidate& c : level) {
      for (std::size_t child : index.level(n - 1)[c.node].children) {
        next.push_back(child);
        pf.push_back(&c.flat);
      }
    }
    level = score_nodes(model, index, n, next, pf, u, user_in, counter, res.cost);
  }
  rank_nodes(level);
  for (const Candidate& c : level) {
    res.clusters.push_back(c.node);
    for (std::uint64_t id : index.level(N - 1)[c.node].items) {
      if (res.items.size() >= max_items) break;
      res.items.push_back(id);
    }
    if (res.items.size() >= max_items) break;
  }
  res.cost.macs = counter.macs;
  return res;
}

std::uint64_t node_eval_macs(const HsnnModel& model, std::size_t n) {
  const CoarseLayer& c = model.coarse.at(n);
  return c.user_tower.macs() + c.interaction_tower.macs() + c.over_arch.macs() +
         model.ensemble.macs((n + 1) * model.tasks());
}

std::uint64_t item_eval_macs(const HsnnModel& model) {
  return monn_item_macs(model.item_model) + model.ensemble.macs(model.layers() * model.tasks());
}

std::uint64_t monn_item_macs(const MonnModel& model) {
  return model.interaction_tower.macs() + model.over_arch.macs();
}

CostReport account_cost(const ServingSnapshot& snapshot, const CostCounter& trace) {
  const HsnnModel& model = snapshot.model;
  if (trace.node_evals.size() != model.index_layers()) {
    throw DimensionError("account_cost: trace covers " + std::to_string(trace.node_evals.size()) +
                         " of " + std::to_string(model.index_layers()) + " index layers");
  }
  CostReport r;
  r.measured = trace.macs - trace.user_macs;
  r.user_macs = model.item_model.user_tower.macs();
  r.item_macs = item_eval_macs(model);
  r.formula = r.item_macs * trace.items_scored;
  for (std::size_t n = 0; n < model.index_layers(); ++n) {
    r.node_macs.push_back(node_eval_macs(model, n));
    r.formula += r.node_macs[n] * trace.node_evals[n];
  }
  const double denom = std::max<double>(double(r.formula), 1.0);
  r.relative_error = std::abs(double(r.measured) - double(r.formula)) / denom;
  return r;
}

std::string format_results(std::uint64_t user_id, const std::vector<ScoredItem>& items) {
  std::string out;
  char buf[96];
  for (std::size_t r = 0; r < items.size(); ++r) {
    std::snprintf(buf, sizeof buf, "%" PRIu64 "\t%zu\t%" PRIu64 "\t%.9g\n", user_id, r + 1,
                  items[r].id, items[r].score);
    out += buf;
  }
  return out;
}

}  // namespace hsnn
