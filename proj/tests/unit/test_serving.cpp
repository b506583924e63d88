#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "hsnn/serving.hpp"
#include "test_util.hpp"

using namespace hsnn;
using hsnn::test::tiny_setup;

namespace {

MonnConfig tiny_item(Preset p) {
  MonnConfig c;
  c.user = {2, 3, {4}};
  c.item = {1, 3, {4}};
  c.preset = p;
  c.task_weights = {1.0, 0.5};
  return c;
}

struct Served {
  hsnn::test::TinySetup s;
  ServingSnapshot snap;
  HierarchicalIndex index;
  InvertedIndex inv;
};

Served serve(std::vector<std::size_t> nodes, std::vector<Preset> presets, std::size_t items = 40,
             std::uint64_t seed = 1) {
  Served r{tiny_setup(0, seed, items), {}, {}, {}};
  HsnnConfig c;
  c.item = tiny_item(Preset::S);
  c.nodes = std::move(nodes);
  c.presets = std::move(presets);
  Rng rng(seed + 7);
  HsnnModel m = HsnnModel::make(r.s.schema, c, rng);
  if (m.index_layers() > 0) {
    init_codebooks(m, catalog_embeddings(m, r.s.world.items(), r.s.schema), rng);
  }
  r.snap = split_model(m, 3, 10);
  r.index = publish_index(m, r.s.world.items(), r.s.schema, 3);
  r.inv = InvertedIndex::build(r.snap, r.index, r.s.world.items(), r.s.schema);
  return r;
}

}  // namespace

TEST(Serving, ExhaustiveLayerwiseEqualsBruteForce) {
  const Served sv = serve({5, 3}, {Preset::M, Preset::S});
  for (const User& u : sv.s.world.users()) {
    const RetrievalResult lw = retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if,
                                                  exhaustive_budget(sv.inv, 40));
    const RetrievalResult bf = retrieve_brute_force(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if, 40);
    ASSERT_EQ(lw.items.size(), 40u);
    ASSERT_EQ(bf.items.size(), 40u);
    for (std::size_t i = 0; i < 40; ++i) {
      EXPECT_EQ(lw.items[i].id, bf.items[i].id);
      EXPECT_NEAR(lw.items[i].score, bf.items[i].score, 1e-12);
    }
    EXPECT_EQ(lw.cost.items_scored, 40u);
  }
}

TEST(Serving, BruteForceMatchesForwardOracle) {
  const Served sv = serve({4}, {Preset::S});
  const User& u = sv.s.world.users()[0];
  const RetrievalResult bf = retrieve_brute_force(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if, 100);
  // Independent oracle: a fresh ServingContext and hsnn_forward per item.
  const ServingContext ctx(sv.s.schema, sv.s.world.items(), sv.index);
  std::vector<ScoredItem> want;
  for (const Item& it : sv.s.world.items()) {
    const AssembledInputs in = serving_inputs(sv.s.schema, u, sv.inv.entry(it.id), sv.s.i2if);
    want.push_back({it.id, hsnn_forward(sv.snap.model, in, ctx.assignment(it.id)).ensemble_logits[0]});
  }
  std::sort(want.begin(), want.end(), [](const ScoredItem& a, const ScoredItem& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  EXPECT_EQ(bf.items, want);
}

TEST(Serving, OneNodePerItem) {
  const Served sv = serve({12}, {Preset::S}, 12);
  ASSERT_EQ(sv.inv.level(0).size(), std::set<std::vector<std::uint32_t>>(
                                        sv.index.paths().begin(), sv.index.paths().end())
                                        .size());
  const User& u = sv.s.world.users()[1];
  const RetrievalResult lw = retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if,
                                                exhaustive_budget(sv.inv, 12));
  const RetrievalResult bf = retrieve_brute_force(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if, 12);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(lw.items[i].id, bf.items[i].id);
}

TEST(Serving, SingleNodeScoresEveryItem) {
  const Served sv = serve({1}, {Preset::S});
  ASSERT_EQ(sv.inv.level(0).size(), 1u);
  RetrievalBudget b{{1}, 5};
  const RetrievalResult lw =
      retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, sv.s.world.users()[2], sv.s.i2if, b);
  EXPECT_EQ(lw.cost.items_scored, 40u);
  EXPECT_EQ(lw.cost.node_evals, (std::vector<std::uint64_t>{1}));
  EXPECT_EQ(lw.items.size(), 5u);
}

TEST(Serving, NoIndexLayersScoreCatalog) {
  const Served sv = serve({}, {});
  RetrievalBudget b{{}, 7};
  const RetrievalResult lw =
      retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, sv.s.world.users()[0], sv.s.i2if, b);
  EXPECT_EQ(lw.cost.items_scored, 40u);
  EXPECT_EQ(lw.items.size(), 7u);
}

TEST(Serving, BeamNarrowsCandidates) {
  const Served sv = serve({5, 3}, {Preset::M, Preset::S});
  RetrievalBudget b{{1, 1}, 100};
  const RetrievalResult lw =
      retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, sv.s.world.users()[0], sv.s.i2if, b);
  EXPECT_EQ(lw.cost.node_evals[0], sv.inv.level(0).size());
  EXPECT_LE(lw.cost.node_evals[1], 3u);
  EXPECT_LT(lw.cost.items_scored, 40u);
  // Everything returned lies in a single finest node.
  std::set<std::size_t> leaves;
  for (const ScoredItem& it : lw.items) leaves.insert(sv.inv.tree().nodes_of(it.id)[1]);
  EXPECT_EQ(leaves.size(), 1u);
  RetrievalBudget capped{{5, 15}, 100, 6};
  EXPECT_EQ(retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, sv.s.world.users()[0], sv.s.i2if,
                               capped)
                .cost.items_scored,
            6u);
}

TEST(Serving, BudgetValidation) {
  const Served sv = serve({5, 3}, {Preset::M, Preset::S});
  const User& u = sv.s.world.users()[0];
  EXPECT_THROW(retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if, {{5}, 10}), ConfigError);
  EXPECT_THROW(retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if, {{0, 3}, 10}),
               ConfigError);
}

TEST(Serving, CostFormulaMatchesMeasuredMacs) {
  for (auto [nodes, presets] :
       std::vector<std::pair<std::vector<std::size_t>, std::vector<Preset>>>{
           {{5, 3}, {Preset::M, Preset::S}}, {{4}, {Preset::L}}, {{6, 2}, {Preset::XS, Preset::XS}}}) {
    const Served sv = serve(nodes, presets);
    for (RetrievalBudget b : {exhaustive_budget(sv.inv, 10), RetrievalBudget{std::vector<std::size_t>(nodes.size(), 2), 10}}) {
      const RetrievalResult r =
          retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, sv.s.world.users()[3], sv.s.i2if, b);
      const CostReport c = account_cost(sv.snap, r.cost);
      EXPECT_EQ(c.measured, c.formula);
      EXPECT_EQ(c.relative_error, 0.0);
      EXPECT_EQ(c.user_macs, r.cost.user_macs);
      std::uint64_t f = c.item_macs * r.cost.items_scored;
      for (std::size_t n = 0; n < nodes.size(); ++n) f += c.node_macs[n] * r.cost.node_evals[n];
      EXPECT_EQ(f, c.formula);
    }
  }
}

TEST(Serving, CostFormulaWithSingleNodesAtEveryLevel) {
  const Served sv = serve({1, 1}, {Preset::S, Preset::S});
  const RetrievalResult r = retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, sv.s.world.users()[0],
                                               sv.s.i2if, {{1, 1}, 40});
  const CostReport c = account_cost(sv.snap, r.cost);
  EXPECT_EQ(c.formula, c.node_macs[0] + c.node_macs[1] + 40 * c.item_macs);
  EXPECT_THROW(account_cost(sv.snap, CostCounter{}), DimensionError);
}

TEST(BudgetedQueue, Budgets) {
  const Served sv = serve({4, 3}, {Preset::S, Preset::S});
  const User& u = sv.s.world.users()[4];
  EXPECT_TRUE(retrieve_budgeted_queue(sv.snap, sv.inv, sv.s.schema, u, 0).items.empty());
  const QueueResult all = retrieve_budgeted_queue(sv.snap, sv.inv, sv.s.schema, u, 1000);
  EXPECT_EQ(all.items.size(), 40u);
  EXPECT_EQ(std::set<std::uint64_t>(all.items.begin(), all.items.end()).size(), 40u);
  EXPECT_EQ(all.clusters.size(), sv.inv.level(1).size());
  const auto& best = sv.inv.level(1)[all.clusters[0]].items;
  const QueueResult one = retrieve_budgeted_queue(sv.snap, sv.inv, sv.s.schema, u, best.size());
  EXPECT_EQ(one.items, best);
  EXPECT_EQ(one.clusters.size(), 1u);
}

TEST(Churn, RefreshKeepsPartitionAndRejectsSkew) {
  Served sv = serve({5, 3}, {Preset::M, Preset::S});
  World world = sv.s.world;
  Rng rng(5);
  ServingSnapshot snap = sv.snap;
  InvertedIndex inv = sv.inv;
  I2ifIndex i2if = sv.s.i2if;
  for (std::uint64_t cycle = 0; cycle < 5; ++cycle) {
    const World::ChurnEvent ev = world.churn(0.2, rng);
    i2if = rebuild_i2if_index(i2if, ev.removed, ev.added);
    // The old pair still serves the old catalog; the new catalog needs a refresh.
    EXPECT_THROW(InvertedIndex::build(snap, publish_index(snap.model, sv.s.world.items(), sv.s.schema, 0),
                                      world.items(), sv.s.schema),
                 StaleError);
    const RefreshedIndex r = refresh_index(snap, world.items(), sv.s.schema, 4 + cycle);
    EXPECT_TRUE(r.inverted.is_partition());
    for (std::uint64_t id : ev.removed) EXPECT_FALSE(r.inverted.contains(id));
    for (const Item& it : ev.added) {
      EXPECT_EQ(r.index.path_of(it.id), assign_item(r.snapshot, sv.s.schema, it));
    }
    EXPECT_THROW(retrieve_layerwise(snap, r.inverted, sv.s.schema, world.users()[0], i2if,
                                    exhaustive_budget(r.inverted, 5)),
                 StaleError);
    const RetrievalResult ok = retrieve_layerwise(r.snapshot, r.inverted, sv.s.schema,
                                                  world.users()[0], i2if, exhaustive_budget(r.inverted, 5));
    for (const ScoredItem& it : ok.items) EXPECT_TRUE(world.has_item(it.id));
    snap = r.snapshot;
    inv = r.inverted;
  }
}

TEST(Snapshot, PartsRoundTripAndMismatches) {
  const Served sv = serve({5, 3}, {Preset::M, Preset::S});
  const auto dir = hsnn::test::temp_dir("snap");
  save_snapshot(dir, sv.snap, sv.s.schema);
  for (const char* part : kSnapshotParts) EXPECT_TRUE(std::filesystem::exists(dir / part / "part.json"));
  const ServingSnapshot back = load_snapshot(dir, sv.s.schema);
  EXPECT_EQ(back.step, 10u);
  EXPECT_EQ(back.index_version, 3u);
  const User& u = sv.s.world.users()[0];
  EXPECT_EQ(retrieve_layerwise(back, sv.inv, sv.s.schema, u, sv.s.i2if, exhaustive_budget(sv.inv, 40)).items,
            retrieve_layerwise(sv.snap, sv.inv, sv.s.schema, u, sv.s.i2if, exhaustive_budget(sv.inv, 40)).items);
  EXPECT_THROW(load_snapshot(dir, FeatureSchema::standard(5)), StaleError);

  // A part written at another step is rejected.
  ServingSnapshot later = sv.snap;
  later.step = 11;
  const auto other = hsnn::test::temp_dir("other");
  save_snapshot(other, later, sv.s.schema);
  std::filesystem::remove_all(dir / "over_arch");
  std::filesystem::copy(other / "over_arch", dir / "over_arch", std::filesystem::copy_options::recursive);
  EXPECT_THROW(load_snapshot(dir, sv.s.schema), StaleError);

  std::ofstream(other / "manifest.json") << "{\"format\": \"nope\"}";
  EXPECT_THROW(load_snapshot(other, sv.s.schema), FormatError);
}

TEST(Snapshot, PartNames) {
  EXPECT_EQ(snapshot_part_of("L0.user.mlp.w0"), "user_tower");
  EXPECT_EQ(snapshot_part_of("L1.interaction.mlp.w0"), "interaction");
  EXPECT_EQ(snapshot_part_of("codebook1"), "cluster_model");
  EXPECT_EQ(snapshot_part_of("ensemble.w"), "over_arch");
  EXPECT_THROW(snapshot_part_of("mystery"), FormatError);
}

TEST(FormatResults, Lines) {
  EXPECT_EQ(format_results(7, {{3, 1.5}, {9, -0.25}}), "7\t1\t3\t1.5\n7\t2\t9\t-0.25\n");
  EXPECT_EQ(format_results(1, {}), "");
}
