#pragma once

// Synthetic users, items and logged impressions with a planted two-level
// cluster structure, plus the newline-delimited dataset format.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hsnn/numerics.hpp"

namespace hsnn {

struct SyntheticWorldConfig {
  std::size_t num_users = 500;
  std::size_t num_items = 2000;
  std::size_t coarse_clusters = 4;     // G1
  std::size_t fine_per_coarse = 5;     // G2
  std::size_t latent_dim = 8;
  // One entry per task; 0 and 1 force constant labels.
  std::vector<double> base_rates = {0.1, 0.03};
  double coarse_scale = 1.0;
  double fine_scale = 0.5;
  double noise_scale = 0.1;
  double user_noise = 0.5;
  // Logit = affinity_scale / sqrt(latent_dim) * <u, v> + logit(base_rate)
  //         + interaction_weight * overlap.
  double affinity_scale = 1.0;
  double interaction_weight = 0.5;
  // Fraction of impressions drawn from the user's favourite coarse cluster.
  double affinity_sampling = 0.5;
  std::size_t user_categories = 3;
  double churn_rate = 0.1;
  std::uint64_t seed = 1;

  std::size_t num_tasks() const noexcept { return base_rates.size(); }
  std::size_t planted_clusters() const noexcept { return coarse_clusters * fine_per_coarse; }
  void validate() const;
};

struct Item {
  std::uint64_t id = 0;
  std::uint32_t coarse = 0;
  std::uint32_t fine = 0;  // global fine-cluster id in [0, G1*G2)
  Vec latent;
  SparseIds categories;

  friend bool operator==(const Item&, const Item&) = default;
};

struct User {
  std::uint64_t id = 0;
  std::uint32_t favorite_coarse = 0;
  Vec latent;
  SparseIds engaged;

  friend bool operator==(const User&, const User&) = default;
};

class World {
 public:
  World() = default;
  World(SyntheticWorldConfig config, std::vector<Vec> coarse, std::vector<Vec> fine,
        std::vector<Item> items, std::vector<User> users, std::uint64_t next_item_id);

  const SyntheticWorldConfig& config() const noexcept { return config_; }
  const std::vector<Item>& items() const noexcept { return items_; }
  const std::vector<User>& users() const noexcept { return users_; }
  const std::vector<Vec>& coarse_centroids() const noexcept { return coarse_; }
  const std::vector<Vec>& fine_centroids() const noexcept { return fine_; }
  std::uint64_t next_item_id() const noexcept { return next_item_id_; }

  const Item& item(std::uint64_t id) const;
  const User& user(std::uint64_t id) const;
  bool has_item(std::uint64_t id) const { return item_pos_.count(id) != 0; }

  // Generator ground truth: logit of task `task` for (user, item).
  double true_logit(const User& u, const Item& it, std::size_t task) const;
  double true_probability(const User& u, const Item& it, std::size_t task) const;

  // Top-k live item ids by the click-task true logit, ties by id.
  std::vector<std::uint64_t> relevant_items(const User& u, std::size_t k) const;

  struct ChurnEvent {
    std::vector<std::uint64_t> removed;
    std::vector<Item> added;
  };
  // Replaces round(rate * V) live items with fresh ones drawn from the same
  // planted clusters. New ids are never reused.
  ChurnEvent churn(double rate, Rng& rng);

  Item make_item(std::uint64_t id, Rng& rng) const;

 private:
  void reindex();

  SyntheticWorldConfig config_;
  std::vector<Vec> coarse_;
  std::vector<Vec> fine_;
  std::vector<Item> items_;
  std::vector<User> users_;
  std::uint64_t next_item_id_ = 0;
  std::map<std::uint64_t, std::size_t> item_pos_;
};

World generate_world(const SyntheticWorldConfig& config);

// Category ids: coarse cluster g -> g; fine cluster f -> G1 + f.
std::uint64_t coarse_category(std::uint32_t coarse);
std::uint64_t fine_category(const SyntheticWorldConfig& config, std::uint32_t fine);

struct Example {
  std::uint64_t user_id = 0;
  std::uint64_t item_id = 0;
  Vec user_dense;                              // ud
  std::map<std::string, SparseIds> user_sparse;  // us
  Vec item_dense;                              // id_
  std::map<std::string, SparseIds> item_sparse;  // is
  std::map<std::string, SparseIds> interaction_sparse;  // xs
  std::vector<std::uint8_t> labels;            // y
  std::uint64_t timestamp = 0;                 // ts

  friend bool operator==(const Example&, const Example&) = default;
};

// Feature names the generator writes.
inline constexpr const char* kUserCategories = "u_cats";
inline constexpr const char* kItemCategories = "i_cats";
inline constexpr const char* kLoggedSharedCategories = "x_shared";

Example make_example(const World& world, const User& u, const Item& it, std::uint64_t ts, Rng& rng);

// Labels are Bernoulli(true_probability). Timestamps start at `first_ts`.
std::vector<Example> sample_impressions(const World& world, std::size_t n, Rng& rng,
                                        std::uint64_t first_ts = 0);

using MiniBatch = std::vector<Example>;

struct StreamEvent {
  std::size_t before_batch = 0;
  World::ChurnEvent churn;
};

struct ImpressionStream {
  std::vector<MiniBatch> batches;
  std::vector<StreamEvent> events;

  std::size_t num_examples() const;
};

struct StreamConfig {
  std::size_t epochs = 1;
  std::size_t examples_per_epoch = 10000;
  std::size_t batch_size = 32;
  bool churn_between_epochs = false;
};

// Samples epochs of impressions against `world`, applying churn between
// epochs if requested (mutates `world`).
ImpressionStream make_stream(World& world, const StreamConfig& config, Rng& rng);
ImpressionStream batch_examples(const std::vector<Example>& examples, std::size_t batch_size);

// Newline-delimited JSON, one object per example.
std::string example_to_line(const Example& e);
Example example_from_line(const std::string& line);
void write_dataset(const std::filesystem::path& path, const std::vector<Example>& examples);
std::vector<Example> read_dataset(const std::filesystem::path& path);

// FNV-1a over the serialized lines.
std::uint64_t dataset_hash(const std::vector<Example>& examples);
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

void write_world(const std::filesystem::path& path, const World& world);
World read_world(const std::filesystem::path& path);

}  // namespace hsnn
