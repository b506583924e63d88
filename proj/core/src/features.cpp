#include "hsnn/features.hpp"

#include <algorithm>
#include <set>


namespace hsnn {

std::size_t TowerLayout::input_width() const {
  std::size_t w = dense_dim;
  for (const auto& s : sparse) w += s.dim;
  return w;
}

TowerLayout join_layouts(const TowerLayout& a, const TowerLayout& b) {
  TowerLayout out;
  out.dense_dim = a.dense_dim + b.dense_dim;
  out.sparse = a.sparse;
  out.sparse.insert(out.sparse.end(), b.sparse.begin(), b.sparse.end());
  return out;
}

TowerInput join_inputs(const TowerInput& a, const TowerInput& b) {
  TowerInput out;
  out.dense = a.dense;
  out.dense.insert(out.dense.end(), b.dense.begin(), b.dense.end());
  out.sparse = a.sparse;
  out.sparse.insert(out.sparse.end(), b.sparse.begin(), b.sparse.end());
  return out;
}

FeatureSchema::FeatureSchema(std::vector<FeatureSpec> features, std::string i2if_query)
    : features_(std::move(features)), i2if_query_(std::move(i2if_query)) {
  validate();
}

void FeatureSchema::validate() const {
  std::set<std::string> names;
  bool uses_i2if = false;
  for (const auto& f : features_) {
    if (f.name.empty()) throw ConfigError("schema: feature with empty name");
    if (!names.insert(f.name).second) throw ConfigError("schema: duplicate feature '" + f.name + "'");
    if (f.dim == 0) throw ConfigError("schema: feature '" + f.name + "' has zero dim");
    if (f.kind == FeatureKind::sparse && f.modulus == 0) {
      throw ConfigError("schema: sparse feature '" + f.name + "' needs a positive modulus");
    }
    if (f.owner == FeatureOwner::interaction) {
      if (f.kind == FeatureKind::dense && f.source != FeatureSource::i2if) {
        throw ConfigError("schema: dense interaction feature '" + f.name +
                          "' must come from i2if (records carry no dense interaction block)");
      }
      if (f.kind == FeatureKind::dense && f.dim != 2) {
        throw ConfigError("schema: i2if dense feature '" + f.name + "' must have dim 2");
      }
      uses_i2if = uses_i2if || f.source == FeatureSource::i2if;
    } else if (f.source == FeatureSource::i2if) {
      throw ConfigError("schema: only interaction features may use source i2if");
    }
  }
  if (uses_i2if) {
    auto it = std::find_if(features_.begin(), features_.end(), [&](const FeatureSpec& f) {
      return f.name == i2if_query_ && f.owner == FeatureOwner::user && f.kind == FeatureKind::sparse;
    });
    if (it == features_.end()) {
      throw ConfigError("schema: i2if query '" + i2if_query_ + "' is not a user sparse feature");
    }
  }
}

FeatureSchema FeatureSchema::standard(std::size_t latent_dim, std::size_t category_modulus,
                                      std::size_t embed_dim) {
  std::vector<FeatureSpec> f;
  f.push_back({"u_profile", FeatureOwner::user, FeatureKind::dense, latent_dim, 0,
               FeatureSource::logged});
  f.push_back({kUserCategories, FeatureOwner::user, FeatureKind::sparse, embed_dim,
               category_modulus, FeatureSource::logged});
  f.push_back({"i_profile", FeatureOwner::item, FeatureKind::dense, latent_dim, 0,
               FeatureSource::logged});
  f.push_back({kItemCategories, FeatureOwner::item, FeatureKind::sparse, embed_dim,
               category_modulus, FeatureSource::logged});
  f.push_back({"x_i2if", FeatureOwner::interaction, FeatureKind::dense, 2, 0, FeatureSource::i2if});
  f.push_back({"x_shared_cats", FeatureOwner::interaction, FeatureKind::sparse, embed_dim,
               category_modulus, FeatureSource::i2if});
  return FeatureSchema(std::move(f), kUserCategories);
}

TowerLayout FeatureSchema::layout(FeatureOwner owner) const {
  TowerLayout l;
  for (const auto& f : features_) {
    if (f.owner != owner) continue;
    if (f.kind == FeatureKind::dense) {
      l.dense_dim += f.dim;
    } else {
      l.sparse.push_back({f.modulus, f.dim});
    }
  }
  return l;
}

std::size_t FeatureSchema::dense_width(FeatureOwner owner) const { return layout(owner).dense_dim; }

std::uint64_t FeatureSchema::hash() const {
  std::string s = i2if_query_;
  for (const auto& f : features_) {
    s += "|" + f.name + ":" + std::to_string(static_cast<int>(f.owner)) + ":" +
         std::to_string(static_cast<int>(f.kind)) + ":" + std::to_string(f.dim) + ":" +
         std::to_string(f.modulus) + ":" + std::to_string(static_cast<int>(f.source));
  }
  return fnv1a(s);
}

EntityFeatures user_features(const Example& e) { return {e.user_dense, e.user_sparse}; }
EntityFeatures item_features(const Example& e) { return {e.item_dense, e.item_sparse}; }
EntityFeatures user_features(const User& u) { return {u.latent, {{kUserCategories, u.engaged}}}; }
EntityFeatures item_features(const Item& it) {
  return {it.latent, {{kItemCategories, it.categories}}};
}

const SparseIds& I2ifIndex::categories(std::uint64_t item_id) const {
  auto it = categories_.find(item_id);
  if (it == categories_.end()) {
    throw StaleError("i2if: item " + std::to_string(item_id) + " is not indexed");
  }
  return it->second;
}

Vec i2if_statistics(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  std::set<std::uint64_t> sa(a.begin(), a.end());
  std::set<std::uint64_t> sb(b.begin(), b.end());
  std::size_t inter = 0;
  for (auto x : sa) inter += sb.count(x);
  const std::size_t uni = sa.size() + sb.size() - inter;
  const double overlap = static_cast<double>(inter);
  const double jaccard = uni == 0 ? 0.0 : overlap / static_cast<double>(uni);
  return {overlap, jaccard};
}

Vec I2ifIndex::lookup(std::span<const std::uint64_t> user_ids, std::uint64_t item_id) const {
  return i2if_statistics(user_ids, categories(item_id));
}

SparseIds I2ifIndex::lookup_sparse(std::span<const std::uint64_t> user_ids,
                                   std::uint64_t item_id) const {
  const SparseIds& cats = categories(item_id);
  std::set<std::uint64_t> su(user_ids.begin(), user_ids.end());
  SparseIds out;
  for (auto c : cats) {
    if (su.count(c)) out.push_back(c);
  }
  return out;
}

I2ifIndex build_i2if_index(const std::vector<Item>& catalog) {
  I2ifIndex idx;
  for (const auto& it : catalog) {
    SparseIds cats = it.categories;
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
    idx.categories_[it.id] = std::move(cats);
  }
  return idx;
}

I2ifIndex rebuild_i2if_index(const I2ifIndex& base, std::span<const std::uint64_t> removed,
                             const std::vector<Item>& added) {
  I2ifIndex idx = base;
  for (auto id : removed) idx.categories_.erase(id);
  const I2ifIndex fresh = build_i2if_index(added);
  for (const auto& [id, cats] : fresh.categories_) idx.categories_[id] = cats;
  return idx;
}

namespace {

SparseIds sorted_ids(const SparseIds& ids) {
  SparseIds s = ids;
  std::sort(s.begin(), s.end());
  return s;
}

const SparseIds& find_sparse(const std::map<std::string, SparseIds>& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw ConfigError("missing sparse feature '" + name + "'");
  return it->second;
}

}  // namespace

TowerInput assemble_tower(const FeatureSchema& schema, FeatureOwner owner,
                          const EntityFeatures& features) {
  if (owner == FeatureOwner::interaction) {
    throw ConfigError("assemble_tower: interaction inputs need assemble_interaction");
  }
  TowerInput in;
  std::size_t offset = 0;
  for (const auto& f : schema.features()) {
    if (f.owner != owner) continue;
    if (f.kind == FeatureKind::dense) {
      if (offset + f.dim > features.dense.size()) {
        throw ConfigError("missing dense feature '" + f.name + "' (record has " +
                          std::to_string(features.dense.size()) + " dense values)");
      }
      in.dense.insert(in.dense.end(), features.dense.begin() + static_cast<std::ptrdiff_t>(offset),
                      features.dense.begin() + static_cast<std::ptrdiff_t>(offset + f.dim));
      offset += f.dim;
    } else {
      in.sparse.push_back(sorted_ids(find_sparse(features.sparse, f.name)));
    }
  }
  if (offset != features.dense.size()) {
    throw ConfigError("dense block has " + std::to_string(features.dense.size()) +
                      " values but schema declares " + std::to_string(offset));
  }
  return in;
}

TowerInput assemble_interaction(const FeatureSchema& schema, const EntityFeatures& user,
                                std::uint64_t item_id, const I2ifIndex& i2if,
                                const std::map<std::string, SparseIds>& logged) {
  TowerInput in;
  const SparseIds* query = nullptr;
  for (const auto& f : schema.features()) {
    if (f.owner != FeatureOwner::interaction) continue;
    if (f.source == FeatureSource::i2if && query == nullptr) {
      query = &find_sparse(user.sparse, schema.i2if_query());
    }
    if (f.kind == FeatureKind::dense) {
      Vec s = i2if.lookup(*query, item_id);
      in.dense.insert(in.dense.end(), s.begin(), s.end());
    } else if (f.source == FeatureSource::i2if) {
      in.sparse.push_back(i2if.lookup_sparse(*query, item_id));
    } else {
      in.sparse.push_back(sorted_ids(find_sparse(logged, f.name)));
    }
  }
  return in;
}

AssembledInputs assemble_inputs(const FeatureSchema& schema, const Example& example,
                                const I2ifIndex& i2if) {
  AssembledInputs out;
  const EntityFeatures u = user_features(example);
  out.user = assemble_tower(schema, FeatureOwner::user, u);
  out.item = assemble_tower(schema, FeatureOwner::item, item_features(example));
  out.interaction =
      assemble_interaction(schema, u, example.item_id, i2if, example.interaction_sparse);
  return out;
}

}  // namespace hsnn
