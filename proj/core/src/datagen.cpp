#include "hsnn/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json_detail.hpp"

namespace hsnn {

using detail::Json;

void SyntheticWorldConfig::validate() const {
  if (num_users == 0) throw ConfigError("world.num_users must be positive");
  if (num_items == 0) throw ConfigError("world.num_items must be positive");
  if (coarse_clusters == 0 || fine_per_coarse == 0) {
    throw ConfigError("world.coarse_clusters and world.fine_per_coarse must be positive");
  }
  if (planted_clusters() > num_items) {
    throw ConfigError("world: coarse_clusters * fine_per_coarse exceeds num_items");
  }
  if (latent_dim == 0) throw ConfigError("world.latent_dim must be positive");
  if (base_rates.empty()) throw ConfigError("world.base_rates must name at least one task");
  for (double r : base_rates) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("world.base_rates must lie in [0, 1]");
  }
  if (noise_scale < 0.0 || user_noise < 0.0 || coarse_scale < 0.0 || fine_scale < 0.0) {
    throw ConfigError("world: scales must be nonnegative");
  }
  if (!(affinity_sampling >= 0.0 && affinity_sampling <= 1.0)) {
    throw ConfigError("world.affinity_sampling must lie in [0, 1]");
  }
  if (!(churn_rate >= 0.0 && churn_rate <= 1.0)) {
    throw ConfigError("world.churn_rate must lie in [0, 1]");
  }
  if (user_categories == 0 || user_categories > fine_per_coarse + 1) {
    throw ConfigError("world.user_categories must be in [1, fine_per_coarse + 1]");
  }
}

std::uint64_t coarse_category(std::uint32_t coarse) { return coarse; }

std::uint64_t fine_category(const SyntheticWorldConfig& config, std::uint32_t fine) {
  return config.coarse_clusters + fine;
}

World::World(SyntheticWorldConfig config, std::vector<Vec> coarse, std::vector<Vec> fine,
             std::vector<Item> items, std::vector<User> users, std::uint64_t next_item_id)
    : config_(std::move(config)),
      coarse_(std::move(coarse)),
      fine_(std::move(fine)),
      items_(std::move(items)),
      users_(std::move(users)),
      next_item_id_(next_item_id) {
  reindex();
}

void World::reindex() {
  std::sort(items_.begin(), items_.end(), [](const Item& a, const Item& b) { return a.id < b.id; });
  item_pos_.clear();
  for (std::size_t i = 0; i < items_.size(); ++i) item_pos_[items_[i].id] = i;
}

const Item& World::item(std::uint64_t id) const {
  auto it = item_pos_.find(id);
  if (it == item_pos_.end()) throw StaleError("item " + std::to_string(id) + " is not live");
  return items_[it->second];
}

const User& World::user(std::uint64_t id) const {
  if (id >= users_.size()) throw ConfigError("unknown user " + std::to_string(id));
  return users_[id];
}

namespace {

std::size_t overlap(const SparseIds& a, const SparseIds& b) {
  std::size_t n = 0;
  for (auto x : a) n += std::count(b.begin(), b.end(), x) > 0 ? 1 : 0;
  return n;
}

double logit_of(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

double World::true_logit(const User& u, const Item& it, std::size_t task) const {
  const double rate = config_.base_rates.at(task);
  if (rate <= 0.0) return -std::numeric_limits<double>::infinity();
  if (rate >= 1.0) return std::numeric_limits<double>::infinity();
  const double scale = config_.affinity_scale / std::sqrt(static_cast<double>(config_.latent_dim));
  return scale * dot(u.latent, it.latent) + logit_of(rate) +
         config_.interaction_weight * static_cast<double>(overlap(u.engaged, it.categories));
}

double World::true_probability(const User& u, const Item& it, std::size_t task) const {
  const double rate = config_.base_rates.at(task);
  if (rate <= 0.0) return 0.0;
  if (rate >= 1.0) return 1.0;
  return sigmoid(true_logit(u, it, task));
}

std::vector<std::uint64_t> World::relevant_items(const User& u, std::size_t k) const {
  std::vector<std::pair<double, std::uint64_t>> scored;
  scored.reserve(items_.size());
  for (const auto& it : items_) scored.emplace_back(true_logit(u, it, 0), it.id);
  k = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    [](const auto& a, const auto& b) {
                      return a.first != b.first ? a.first > b.first : a.second < b.second;
                    });
  std::vector<std::uint64_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(scored[i].second);
  return out;
}

Item World::make_item(std::uint64_t id, Rng& rng) const {
  Item it;
  it.id = id;
  it.fine = static_cast<std::uint32_t>(id % config_.planted_clusters());
  it.coarse = static_cast<std::uint32_t>(it.fine / config_.fine_per_coarse);
  it.latent = fine_[it.fine];
  if (config_.noise_scale > 0.0) {
    for (double& x : it.latent) x += normal(rng, 0.0, config_.noise_scale);
  }
  it.categories = {coarse_category(it.coarse), fine_category(config_, it.fine)};
  return it;
}

World::ChurnEvent World::churn(double rate, Rng& rng) {
  ChurnEvent ev;
  const auto n = static_cast<std::size_t>(std::llround(rate * static_cast<double>(items_.size())));
  std::vector<std::size_t> pos(items_.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  std::shuffle(pos.begin(), pos.end(), rng);
  pos.resize(std::min(n, pos.size()));
  std::sort(pos.begin(), pos.end());
  std::set<std::size_t> drop(pos.begin(), pos.end());
  std::vector<Item> kept;
  kept.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (drop.count(i)) {
      ev.removed.push_back(items_[i].id);
    } else {
      kept.push_back(std::move(items_[i]));
    }
  }
  for (std::size_t i = 0; i < pos.size(); ++i) {
    Item it = make_item(next_item_id_++, rng);
    ev.added.push_back(it);
    kept.push_back(std::move(it));
  }
  items_ = std::move(kept);
  reindex();
  return ev;
}

World generate_world(const SyntheticWorldConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.latent_dim;
  std::vector<Vec> coarse(config.coarse_clusters, Vec(d));
  for (auto& c : coarse) {
    for (double& x : c) x = normal(rng, 0.0, config.coarse_scale);
  }
  std::vector<Vec> fine(config.planted_clusters(), Vec(d));
  for (std::size_t f = 0; f < fine.size(); ++f) {
    const auto& parent = coarse[f / config.fine_per_coarse];
    for (std::size_t i = 0; i < d; ++i) fine[f][i] = parent[i] + normal(rng, 0.0, config.fine_scale);
  }

  World proto(config, coarse, fine, {}, {}, 0);
  std::vector<Item> items;
  items.reserve(config.num_items);
  for (std::size_t j = 0; j < config.num_items; ++j) items.push_back(proto.make_item(j, rng));

  std::vector<User> users(config.num_users);
  for (std::size_t i = 0; i < config.num_users; ++i) {
    User& u = users[i];
    u.id = i;
    u.favorite_coarse = static_cast<std::uint32_t>(uniform_index(rng, config.coarse_clusters));
    u.latent = coarse[u.favorite_coarse];
    for (double& x : u.latent) x += normal(rng, 0.0, config.user_noise);
    u.engaged.push_back(coarse_category(u.favorite_coarse));
    std::vector<std::uint32_t> fines(config.fine_per_coarse);
    for (std::size_t k = 0; k < fines.size(); ++k) {
      fines[k] = static_cast<std::uint32_t>(u.favorite_coarse * config.fine_per_coarse + k);
    }
    std::shuffle(fines.begin(), fines.end(), rng);
    for (std::size_t k = 0; k + 1 < config.user_categories; ++k) {
      u.engaged.push_back(fine_category(config, fines[k]));
    }
    std::sort(u.engaged.begin(), u.engaged.end());
  }
  return World(config, std::move(coarse), std::move(fine), std::move(items), std::move(users),
               config.num_items);
}

Example make_example(const World& world, const User& u, const Item& it, std::uint64_t ts,
                     Rng& rng) {
  Example e;
  e.user_id = u.id;
  e.item_id = it.id;
  e.user_dense = u.latent;
  e.user_sparse[kUserCategories] = u.engaged;
  e.item_dense = it.latent;
  e.item_sparse[kItemCategories] = it.categories;
  SparseIds shared;
  for (auto c : u.engaged) {
    if (std::find(it.categories.begin(), it.categories.end(), c) != it.categories.end()) {
      shared.push_back(c);
    }
  }
  e.interaction_sparse[kLoggedSharedCategories] = shared;
  e.labels.resize(world.config().num_tasks());
  for (std::size_t t = 0; t < e.labels.size(); ++t) {
    const double p = world.true_probability(u, it, t);
    e.labels[t] = uniform(rng) < p ? 1 : 0;
  }
  e.timestamp = ts;
  return e;
}

std::vector<Example> sample_impressions(const World& world, std::size_t n, Rng& rng,
                                        std::uint64_t first_ts) {
  const auto& cfg = world.config();
  std::vector<std::vector<std::size_t>> by_coarse(cfg.coarse_clusters);
  for (std::size_t i = 0; i < world.items().size(); ++i) {
    by_coarse[world.items()[i].coarse].push_back(i);
  }
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const User& u = world.users()[uniform_index(rng, world.users().size())];
    const auto& pool = by_coarse[u.favorite_coarse];
    std::size_t pos;
    if (!pool.empty() && uniform(rng) < cfg.affinity_sampling) {
      pos = pool[uniform_index(rng, pool.size())];
    } else {
      pos = uniform_index(rng, world.items().size());
    }
    out.push_back(make_example(world, u, world.items()[pos], first_ts + s, rng));
  }
  return out;
}

std::size_t ImpressionStream::num_examples() const {
  std::size_t n = 0;
  for (const auto& b : batches) n += b.size();
  return n;
}

ImpressionStream batch_examples(const std::vector<Example>& examples, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  ImpressionStream s;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    const std::size_t end = std::min(examples.size(), i + batch_size);
    s.batches.emplace_back(examples.begin() + static_cast<std::ptrdiff_t>(i),
                           examples.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return s;
}

ImpressionStream make_stream(World& world, const StreamConfig& config, Rng& rng) {
  ImpressionStream s;
  std::uint64_t ts = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (epoch > 0 && config.churn_between_epochs) {
      s.events.push_back({s.batches.size(), world.churn(world.config().churn_rate, rng)});
    }
    auto examples = sample_impressions(world, config.examples_per_epoch, rng, ts);
    ts += examples.size();
    auto part = batch_examples(examples, config.batch_size);
    for (auto& b : part.batches) s.batches.push_back(std::move(b));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

Json sparse_to_json(const std::map<std::string, SparseIds>& m) {
  Json j = Json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::map<std::string, SparseIds> sparse_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("sparse feature block must be an object");
  std::map<std::string, SparseIds> m;
  for (auto it = j.begin(); it != j.end(); ++it) m[it.key()] = it.value().get<SparseIds>();
  return m;
}

}  // namespace

std::string example_to_line(const Example& e) {
  Json j;
  j["user_id"] = e.user_id;
  j["item_id"] = e.item_id;
  j["ud"] = e.user_dense;
  j["us"] = sparse_to_json(e.user_sparse);
  j["id_"] = e.item_dense;
  j["is"] = sparse_to_json(e.item_sparse);
  j["xs"] = sparse_to_json(e.interaction_sparse);
  std::vector<int> y(e.labels.begin(), e.labels.end());
  j["y"] = y;
  j["ts"] = e.timestamp;
  return j.dump();
}

Example example_from_line(const std::string& line) {
  const Json j = Json::parse(line);
  if (!j.is_object()) throw FormatError("record is not an object");
  for (const char* key : {"user_id", "item_id", "ud", "us", "id_", "is", "xs", "y", "ts"}) {
    if (!j.contains(key)) throw FormatError(std::string("missing field '") + key + "'");
  }
  Example e;
  e.user_id = j.at("user_id").get<std::uint64_t>();
  e.item_id = j.at("item_id").get<std::uint64_t>();
  e.user_dense = j.at("ud").get<Vec>();
  e.user_sparse = sparse_from_json(j.at("us"));
  e.item_dense = j.at("id_").get<Vec>();
  e.item_sparse = sparse_from_json(j.at("is"));
  e.interaction_sparse = sparse_from_json(j.at("xs"));
  for (int y : j.at("y").get<std::vector<int>>()) {
    if (y != 0 && y != 1) throw FormatError("labels must be 0 or 1");
    e.labels.push_back(static_cast<std::uint8_t>(y));
  }
  e.timestamp = j.at("ts").get<std::uint64_t>();
  return e;
}

void write_dataset(const std::filesystem::path& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& e : examples) out << example_to_line(e) << '\n';
  if (!out) throw FormatError("write failed for " + path.string());
}

std::vector<Example> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  std::size_t tasks = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_line(line));
    } catch (const std::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    if (out.size() == 1) tasks = out.back().labels.size();
    if (out.back().labels.size() != tasks) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": task count differs from first record");
    }
  }
  return out;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t dataset_hash(const std::vector<Example>& examples) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : examples) {
    h = fnv1a(example_to_line(e), h);
    h = fnv1a("\n", h);
  }
  return h;
}

namespace detail {

Json world_config_to_json(const SyntheticWorldConfig& c) {
  Json j;
  j["num_users"] = c.num_users;
  j["num_items"] = c.num_items;
  j["coarse_clusters"] = c.coarse_clusters;
  j["fine_per_coarse"] = c.fine_per_coarse;
  j["latent_dim"] = c.latent_dim;
  j["base_rates"] = c.base_rates;
  j["coarse_scale"] = c.coarse_scale;
  j["fine_scale"] = c.fine_scale;
  j["noise_scale"] = c.noise_scale;
  j["user_noise"] = c.user_noise;
  j["affinity_scale"] = c.affinity_scale;
  j["interaction_weight"] = c.interaction_weight;
  j["affinity_sampling"] = c.affinity_sampling;
  j["user_categories"] = c.user_categories;
  j["churn_rate"] = c.churn_rate;
  j["seed"] = c.seed;
  return j;
}

SyntheticWorldConfig world_config_from_json(const Json& j) {
  check_keys(j, "world",
             {"num_users", "num_items", "coarse_clusters", "fine_per_coarse", "latent_dim",
              "base_rates", "coarse_scale", "fine_scale", "noise_scale", "user_noise",
              "affinity_scale", "interaction_weight", "affinity_sampling", "user_categories",
              "churn_rate", "seed"});
  SyntheticWorldConfig c;
  read_opt(j, "num_users", c.num_users);
  read_opt(j, "num_items", c.num_items);
  read_opt(j, "coarse_clusters", c.coarse_clusters);
  read_opt(j, "fine_per_coarse", c.fine_per_coarse);
  read_opt(j, "latent_dim", c.latent_dim);
  read_opt(j, "base_rates", c.base_rates);
  read_opt(j, "coarse_scale", c.coarse_scale);
  read_opt(j, "fine_scale", c.fine_scale);
  read_opt(j, "noise_scale", c.noise_scale);
  read_opt(j, "user_noise", c.user_noise);
  read_opt(j, "affinity_scale", c.affinity_scale);
  read_opt(j, "interaction_weight", c.interaction_weight);
  read_opt(j, "affinity_sampling", c.affinity_sampling);
  read_opt(j, "user_categories", c.user_categories);
  read_opt(j, "churn_rate", c.churn_rate);
  read_opt(j, "seed", c.seed);
  return c;
}

void check_keys(const Json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(section) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(std::string("unknown key '") + it.key() + "' in " + section);
  }
}

Json item_to_json(const Item& it) {
  return Json{{"id", it.id}, {"coarse", it.coarse}, {"fine", it.fine},
              {"latent", it.latent}, {"categories", it.categories}};
}

Item item_from_json(const Json& j) {
  Item it;
  it.id = j.at("id").get<std::uint64_t>();
  it.coarse = j.at("coarse").get<std::uint32_t>();
  it.fine = j.at("fine").get<std::uint32_t>();
  it.latent = j.at("latent").get<Vec>();
  it.categories = j.at("categories").get<SparseIds>();
  return it;
}

}  // namespace detail

void write_world(const std::filesystem::path& path, const World& world) {
  Json j;
  j["format"] = "hsnn.world.v1";
  j["config"] = detail::world_config_to_json(world.config());
  j["coarse_centroids"] = world.coarse_centroids();
  j["fine_centroids"] = world.fine_centroids();
  j["next_item_id"] = world.next_item_id();
  Json items = Json::array();
  for (const auto& it : world.items()) items.push_back(detail::item_to_json(it));
  j["items"] = std::move(items);
  Json users = Json::array();
  for (const auto& u : world.users()) {
    users.push_back(Json{{"id", u.id}, {"favorite_coarse", u.favorite_coarse},
                         {"latent", u.latent}, {"engaged", u.engaged}});
  }
  j["users"] = std::move(users);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
}

World read_world(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const std::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  if (j.value("format", "") != "hsnn.world.v1") {
    throw FormatError(path.string() + ": unsupported world format");
  }
  std::vector<Item> items;
  for (const auto& it : j.at("items")) items.push_back(detail::item_from_json(it));
  std::vector<User> users;
  for (const auto& u : j.at("users")) {
    User x;
    x.id = u.at("id").get<std::uint64_t>();
    x.favorite_coarse = u.at("favorite_coarse").get<std::uint32_t>();
    x.latent = u.at("latent").get<Vec>();
    x.engaged = u.at("engaged").get<SparseIds>();
    users.push_back(std::move(x));
  }
  return World(detail::world_config_from_json(j.at("config")),
               j.at("coarse_centroids").get<std::vector<Vec>>(),
               j.at("fine_centroids").get<std::vector<Vec>>(), std::move(items), std::move(users),
               j.at("next_item_id").get<std::uint64_t>());
}

}  // namespace hsnn
