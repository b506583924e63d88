#pragma once

// Tower input assembly and inverted-index based interaction features (I2IF).

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hsnn/datagen.hpp"
#include "hsnn/numerics.hpp"

namespace hsnn {

enum class FeatureOwner { user, item, interaction };
enum class FeatureKind { dense, sparse };
// Interaction features are either read from the logged record or computed
// by querying the I2IF index.
enum class FeatureSource { logged, i2if };

struct FeatureSpec {
  std::string name;
  FeatureOwner owner = FeatureOwner::user;
  FeatureKind kind = FeatureKind::dense;
  std::size_t dim = 1;      // dense width, or embedding width for sparse
  std::size_t modulus = 0;  // embedding rows (sparse only)
  FeatureSource source = FeatureSource::logged;

  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

// Layout a tower sees: dense prefix and one pooled embedding per sparse slot.
struct TowerLayout {
  struct SparseSlot {
    std::size_t modulus = 0;
    std::size_t dim = 0;
    friend bool operator==(const SparseSlot&, const SparseSlot&) = default;
  };
  std::size_t dense_dim = 0;
  std::vector<SparseSlot> sparse;

  std::size_t input_width() const;
  bool empty() const { return dense_dim == 0 && sparse.empty(); }
  friend bool operator==(const TowerLayout&, const TowerLayout&) = default;
};

TowerLayout join_layouts(const TowerLayout& a, const TowerLayout& b);

class FeatureSchema {
 public:
  FeatureSchema() = default;
  FeatureSchema(std::vector<FeatureSpec> features, std::string i2if_query);

  // Default desk-scale schema for a generator with `latent_dim` latents.
  static FeatureSchema standard(std::size_t latent_dim, std::size_t category_modulus = 64,
                                std::size_t embed_dim = 4);

  const std::vector<FeatureSpec>& features() const noexcept { return features_; }
  // User sparse feature whose ids query the I2IF index.
  const std::string& i2if_query() const noexcept { return i2if_query_; }

  TowerLayout layout(FeatureOwner owner) const;
  std::size_t dense_width(FeatureOwner owner) const;
  std::uint64_t hash() const;

  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;

 private:
  void validate() const;

  std::vector<FeatureSpec> features_;
  std::string i2if_query_;
};

// Dense values plus sorted sparse id lists, one per sparse slot.
struct TowerInput {
  Vec dense;
  std::vector<SparseIds> sparse;

  friend bool operator==(const TowerInput&, const TowerInput&) = default;
};

TowerInput join_inputs(const TowerInput& a, const TowerInput& b);

struct EntityFeatures {
  Vec dense;
  std::map<std::string, SparseIds> sparse;
};

EntityFeatures user_features(const Example& e);
EntityFeatures item_features(const Example& e);
EntityFeatures user_features(const User& u);
EntityFeatures item_features(const Item& it);

// Item id -> sorted category ids. Immutable once built.
class I2ifIndex {
 public:
  I2ifIndex() = default;

  std::size_t size() const noexcept { return categories_.size(); }
  bool contains(std::uint64_t item_id) const { return categories_.count(item_id) != 0; }
  const SparseIds& categories(std::uint64_t item_id) const;

  // [overlap, jaccard] of the user's engaged ids against the item's
  // categories; jaccard is 0 when the union is empty.
  Vec lookup(std::span<const std::uint64_t> user_ids, std::uint64_t item_id) const;
  // Shared ids, sorted.
  SparseIds lookup_sparse(std::span<const std::uint64_t> user_ids, std::uint64_t item_id) const;

  friend I2ifIndex build_i2if_index(const std::vector<Item>& catalog);
  friend I2ifIndex rebuild_i2if_index(const I2ifIndex& base, std::span<const std::uint64_t> removed,
                                      const std::vector<Item>& added);

 private:
  std::map<std::uint64_t, SparseIds> categories_;
};

I2ifIndex build_i2if_index(const std::vector<Item>& catalog);
// New index with `removed` dropped and `added` inserted; `base` is untouched.
I2ifIndex rebuild_i2if_index(const I2ifIndex& base, std::span<const std::uint64_t> removed,
                             const std::vector<Item>& added);

// Set statistics behind I2IF, exposed for reuse.
Vec i2if_statistics(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b);

TowerInput assemble_tower(const FeatureSchema& schema, FeatureOwner owner,
                          const EntityFeatures& features);
TowerInput assemble_interaction(const FeatureSchema& schema, const EntityFeatures& user,
                                std::uint64_t item_id, const I2ifIndex& i2if,
                                const std::map<std::string, SparseIds>& logged);

struct AssembledInputs {
  TowerInput user;
  TowerInput item;
  TowerInput interaction;
};

AssembledInputs assemble_inputs(const FeatureSchema& schema, const Example& example,
                                const I2ifIndex& i2if);

}  // namespace hsnn
