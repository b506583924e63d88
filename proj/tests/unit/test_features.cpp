#include <gtest/gtest.h>

#include <set>

#include "hsnn/features.hpp"
#include "test_util.hpp"

using namespace hsnn;

namespace {

Item item_with(std::uint64_t id, SparseIds cats) {
  Item it;
  it.id = id;
  it.latent = {0.0};
  it.categories = std::move(cats);
  return it;
}

}  // namespace

TEST(I2if, SingleItemIndexed) {
  const I2ifIndex idx = build_i2if_index({item_with(1, {3})});
  EXPECT_EQ(idx.categories(1), (SparseIds{3}));
  EXPECT_EQ(idx.size(), 1u);
}

TEST(I2if, ItemWithoutCategories) {
  const I2ifIndex idx = build_i2if_index({item_with(4, {})});
  ASSERT_TRUE(idx.contains(4));
  EXPECT_TRUE(idx.categories(4).empty());
  EXPECT_EQ(idx.lookup(SparseIds{1, 2}, 4), (Vec{0.0, 0.0}));
}

TEST(I2if, RebuildAfterChurn) {
  const I2ifIndex base = build_i2if_index({item_with(1, {1}), item_with(2, {2}), item_with(3, {3})});
  const std::vector<std::uint64_t> removed{2};
  const I2ifIndex next = rebuild_i2if_index(base, removed, {item_with(9, {5, 4})});
  EXPECT_FALSE(next.contains(2));
  EXPECT_TRUE(next.contains(9));
  EXPECT_EQ(next.categories(9), (SparseIds{4, 5}));
  EXPECT_TRUE(base.contains(2));
  EXPECT_FALSE(base.contains(9));
  // Set difference oracle: next = base - removed + added.
  std::set<std::uint64_t> want{1, 3, 9};
  std::set<std::uint64_t> got;
  for (std::uint64_t id = 0; id < 10; ++id) {
    if (next.contains(id)) got.insert(id);
  }
  EXPECT_EQ(got, want);
  EXPECT_THROW(next.categories(2), StaleError);
}

TEST(I2if, LookupExamples) {
  const I2ifIndex idx = build_i2if_index({item_with(1, {10}), item_with(2, {7, 8, 9})});
  EXPECT_EQ(idx.lookup(SparseIds{10, 11}, 1), (Vec{1.0, 0.5}));
  EXPECT_EQ(idx.lookup(SparseIds{1, 2}, 1), (Vec{0.0, 0.0}));
  EXPECT_EQ(idx.lookup(SparseIds{9, 8, 7}, 2), (Vec{3.0, 1.0}));
  EXPECT_EQ(idx.lookup_sparse(SparseIds{9, 1, 7}, 2), (SparseIds{7, 9}));
}

TEST(I2if, JaccardSymmetricProperty) {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    SparseIds a(uniform_index(rng, 6)), b(uniform_index(rng, 6));
    for (auto& x : a) x = uniform_index(rng, 8);
    for (auto& x : b) x = uniform_index(rng, 8);
    const Vec ab = i2if_statistics(a, b);
    const Vec ba = i2if_statistics(b, a);
    EXPECT_EQ(ab, ba);
    // Brute-force set oracle.
    std::set<std::uint64_t> sa(a.begin(), a.end()), sb(b.begin(), b.end()), uni = sa;
    uni.insert(sb.begin(), sb.end());
    double inter = 0;
    for (auto x : sa) inter += sb.count(x);
    EXPECT_EQ(ab[0], inter);
    EXPECT_DOUBLE_EQ(ab[1], uni.empty() ? 0.0 : inter / double(uni.size()));
  }
}

TEST(Assemble, SingleDenseUserFeature) {
  const FeatureSchema schema({{"u", FeatureOwner::user, FeatureKind::dense, 1, 0,
                               FeatureSource::logged}},
                             "");
  EntityFeatures f;
  f.dense = {0.25};
  const TowerInput in = assemble_tower(schema, FeatureOwner::user, f);
  EXPECT_EQ(in.dense, (Vec{0.25}));
  EXPECT_TRUE(in.sparse.empty());
}

TEST(Assemble, SparseOrderDoesNotMatter) {
  const FeatureSchema schema = FeatureSchema::standard(2);
  const I2ifIndex idx = build_i2if_index({item_with(5, {1, 2})});
  Example e;
  e.item_id = 5;
  e.user_dense = {1.0, 2.0};
  e.item_dense = {3.0, 4.0};
  e.user_sparse[kUserCategories] = {9, 2, 1};
  e.item_sparse[kItemCategories] = {2, 1};
  Example p = e;
  p.user_sparse[kUserCategories] = {1, 9, 2};
  p.item_sparse[kItemCategories] = {1, 2};
  const AssembledInputs a = assemble_inputs(schema, e, idx);
  const AssembledInputs b = assemble_inputs(schema, p, idx);
  EXPECT_EQ(a.user, b.user);
  EXPECT_EQ(a.item, b.item);
  EXPECT_EQ(a.interaction, b.interaction);
}

TEST(Assemble, DefaultSchemaMatchesHandAssembly) {
  const FeatureSchema schema = FeatureSchema::standard(2);
  const I2ifIndex idx = build_i2if_index({item_with(5, {1, 6})});
  Example e;
  e.item_id = 5;
  e.user_dense = {0.5, -0.5};
  e.item_dense = {1.5, 2.5};
  e.user_sparse[kUserCategories] = {6, 3, 1};
  e.item_sparse[kItemCategories] = {6, 1};
  const AssembledInputs in = assemble_inputs(schema, e, idx);
  EXPECT_EQ(in.user.dense, (Vec{0.5, -0.5}));
  EXPECT_EQ(in.user.sparse, (std::vector<SparseIds>{{1, 3, 6}}));
  EXPECT_EQ(in.item.dense, (Vec{1.5, 2.5}));
  EXPECT_EQ(in.item.sparse, (std::vector<SparseIds>{{1, 6}}));
  // overlap 2 of union {1,3,6}
  EXPECT_EQ(in.interaction.dense, (Vec{2.0, 2.0 / 3.0}));
  EXPECT_EQ(in.interaction.sparse, (std::vector<SparseIds>{{1, 6}}));
}

TEST(Assemble, EveryDeclaredFeatureAppears) {
  const FeatureSchema schema = FeatureSchema::standard(3, 32, 5);
  for (FeatureOwner o : {FeatureOwner::user, FeatureOwner::item, FeatureOwner::interaction}) {
    std::size_t dense = 0, sparse = 0;
    for (const auto& f : schema.features()) {
      if (f.owner != o) continue;
      (f.kind == FeatureKind::dense ? dense : sparse) += f.kind == FeatureKind::dense ? f.dim : 1;
    }
    const TowerLayout l = schema.layout(o);
    EXPECT_EQ(l.dense_dim, dense);
    EXPECT_EQ(l.sparse.size(), sparse);
  }
}

TEST(Assemble, MissingFeaturesAreErrors) {
  const FeatureSchema schema = FeatureSchema::standard(2);
  EntityFeatures f;
  f.dense = {1.0};
  f.sparse[kUserCategories] = {};
  EXPECT_THROW(assemble_tower(schema, FeatureOwner::user, f), ConfigError);
  f.dense = {1.0, 2.0};
  f.sparse.clear();
  EXPECT_THROW(assemble_tower(schema, FeatureOwner::user, f), ConfigError);
  f.dense = {1.0, 2.0, 3.0};
  f.sparse[kUserCategories] = {};
  EXPECT_THROW(assemble_tower(schema, FeatureOwner::user, f), ConfigError);
}

TEST(Schema, ValidationAndHash) {
  EXPECT_THROW(FeatureSchema({{"a", FeatureOwner::user, FeatureKind::dense, 1, 0,
                               FeatureSource::logged},
                              {"a", FeatureOwner::item, FeatureKind::dense, 1, 0,
                               FeatureSource::logged}},
                             ""),
               ConfigError);
  EXPECT_THROW(FeatureSchema({{"s", FeatureOwner::user, FeatureKind::sparse, 4, 0,
                               FeatureSource::logged}},
                             ""),
               ConfigError);
  EXPECT_THROW(FeatureSchema({{"x", FeatureOwner::interaction, FeatureKind::dense, 2, 0,
                               FeatureSource::i2if}},
                             "nope"),
               ConfigError);
  EXPECT_EQ(FeatureSchema::standard(4).hash(), FeatureSchema::standard(4).hash());
  EXPECT_NE(FeatureSchema::standard(4).hash(), FeatureSchema::standard(5).hash());
}

TEST(Assemble, JoinConcatenates) {
  TowerInput a{{1.0}, {{1}}};
  TowerInput b{{2.0, 3.0}, {{2}, {3}}};
  const TowerInput j = join_inputs(a, b);
  EXPECT_EQ(j.dense, (Vec{1.0, 2.0, 3.0}));
  EXPECT_EQ(j.sparse.size(), 3u);
  TowerLayout la{1, {{8, 2}}}, lb{2, {{8, 2}, {4, 1}}};
  EXPECT_EQ(join_layouts(la, lb).input_width(), 3u + 2u + 2u + 1u);
}
