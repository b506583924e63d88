#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "hsnn/eval.hpp"
#include "hsnn/experiment.hpp"
#include "test_util.hpp"

using namespace hsnn;

namespace {

// Pair-counting ARI over all i < j.
double ari_by_pairs(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  double both = 0, only_a = 0, only_b = 0, pairs = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      only_a += sa && !sb;
      only_b += !sa && sb;
      pairs += 1;
    }
  }
  const double pa = both + only_a, pb = both + only_b;
  const double expected = pa * pb / pairs;
  return (both - expected) / (0.5 * (pa + pb) - expected);
}

}  // namespace

TEST(NormalizedEntropy, HandCase) {
  const std::vector<std::uint8_t> y{1, 0, 0, 0};
  const Vec p{0.8, 0.1, 0.2, 0.3};
  const double ll = -(std::log(0.8) + std::log(0.9) + std::log(0.8) + std::log(0.7)) / 4.0;
  const double base = -(0.25 * std::log(0.25) + 0.75 * std::log(0.75));
  EXPECT_NEAR(normalized_entropy(p, y), ll / base, 1e-12);
}

TEST(NormalizedEntropy, BaseRatePredictorScoresOne) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::uint8_t> y(50 + trial);
    y[0] = 1;
    y[1] = 0;
    for (std::size_t i = 2; i < y.size(); ++i) y[i] = uniform(rng) < 0.3;
    double pos = 0;
    for (auto v : y) pos += v;
    const Vec p(y.size(), pos / double(y.size()));
    EXPECT_NEAR(normalized_entropy(p, y), 1.0, 1e-12);
  }
}

TEST(NormalizedEntropy, DegenerateLabelsThrow) {
  EXPECT_THROW(normalized_entropy(Vec{0.5, 0.5}, std::vector<std::uint8_t>{1, 1}), NumericError);
  EXPECT_THROW(normalized_entropy(Vec{0.5, 0.5}, std::vector<std::uint8_t>{0, 0}), NumericError);
  EXPECT_THROW(normalized_entropy(Vec{0.5}, std::vector<std::uint8_t>{0, 1}), DimensionError);
}

TEST(Recall, Examples) {
  const std::vector<std::uint64_t> rel{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(recall_at_k(std::vector<std::uint64_t>{1, 9, 3}, rel), 0.5);
  EXPECT_DOUBLE_EQ(recall_at_k(std::vector<std::uint64_t>{}, rel), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_k(std::vector<std::uint64_t>{4, 3, 2, 1, 0}, rel), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_k(std::vector<std::uint64_t>{1, 1, 1}, rel), 0.25);
  EXPECT_EQ(recall_at_k(std::vector<std::uint64_t>{1}, std::vector<std::uint64_t>{}), 0.0);
}

TEST(Recall, MonotoneInPrefixLength) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint64_t> ranked(40), rel(10);
    for (auto& x : ranked) x = uniform_index(rng, 60);
    for (auto& x : rel) x = uniform_index(rng, 60);
    double last = 0.0;
    for (std::size_t k = 0; k <= ranked.size(); ++k) {
      const double r = recall_at_k(std::span(ranked).first(k), rel);
      EXPECT_GE(r, last);
      last = r;
    }
  }
}

TEST(Ari, MatchesPairCountingOracle) {
  Rng rng(3);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 30);
    std::vector<std::uint32_t> a(n), b(n);
    const std::size_t ka = 1 + uniform_index(rng, 5), kb = 1 + uniform_index(rng, 5);
    for (auto& x : a) x = std::uint32_t(uniform_index(rng, ka));
    for (auto& x : b) x = std::uint32_t(uniform_index(rng, kb));
    const double oracle = ari_by_pairs(a, b);
    if (!std::isfinite(oracle)) continue;
    EXPECT_NEAR(adjusted_rand_index(a, b), oracle, 1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 150);
}

TEST(Ari, PermutationInvariantAndIdentity) {
  const std::vector<std::uint32_t> a{0, 0, 1, 1, 2, 2, 2};
  const std::vector<std::uint32_t> relabelled{5, 5, 3, 3, 9, 9, 9};
  EXPECT_DOUBLE_EQ(adjusted_rand_index(a, a), 1.0);
  EXPECT_DOUBLE_EQ(adjusted_rand_index(a, relabelled), 1.0);
  EXPECT_LT(adjusted_rand_index(a, std::vector<std::uint32_t>{0, 1, 2, 0, 1, 2, 0}), 0.5);
  EXPECT_THROW(adjusted_rand_index(a, std::vector<std::uint32_t>{0}), DimensionError);
}

TEST(Csv, HeaderColumns) {
  EXPECT_EQ(csv_header({10, 50}, 2),
            "run_id,mode,toggles,seed,ne_task_0,ne_task_1,recall_at_10,recall_at_50,"
            "occupancy_ratio,macs_total,config_hash,delta_ne_task_0,delta_ne_task_1,"
            "delta_occupancy_ratio\n");
  MetricsReport r;
  r.run_id = "joim/baseline/seed1";
  r.mode = "joim";
  r.toggles = "baseline";
  r.seed = 1;
  r.ne = {0.9, 0.8};
  r.recall = {{10, 0.5}, {50, 0.75}};
  r.occupancy_ratio = 2.0;
  r.macs_total = 123;
  r.config_hash = 0xabc;
  MetricsReport base = r;
  base.ne = {1.0, 0.7};
  base.occupancy_ratio = 1.5;
  EXPECT_EQ(csv_row(r, base),
            "joim/baseline/seed1,joim,baseline,1,0.900000,0.800000,0.500000,0.750000,2.000000,123,"
            "0000000000000abc,-0.100000,0.100000,0.500000\n");
}

TEST(RunConfigJson, RoundTripAndValidation) {
  RunConfig c = hsnn::test::tiny_run_config();
  c.train.mode = TrainMode::em;
  c.eval.beam = {2};
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_NE(RunConfig().hash(), c.hash());
  EXPECT_THROW(RunConfig::from_json("{\"bogus\": 1}"), ConfigError);
  EXPECT_THROW(RunConfig::from_json("not json"), Error);
  EXPECT_THROW(load_run_config("/nonexistent/run.json"), ConfigError);
}

TEST(DeriveSeed, DistinctStreams) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 20; ++s) {
    for (const char* tag : {"stream", "model", "train"}) EXPECT_TRUE(seen.insert(derive_seed(s, tag)).second);
  }
  EXPECT_EQ(derive_seed(3, "model"), derive_seed(3, "model"));
}

TEST(Toggles, ApplyAndReject) {
  const RunConfig base = hsnn::test::tiny_run_config();
  const RunConfig off = apply_toggles(base, {"scheduler", "balance"});
  EXPECT_FALSE(off.train.scheduler.enabled);
  EXPECT_FALSE(off.train.balance);
  EXPECT_TRUE(off.train.warmup);
  EXPECT_FALSE(apply_toggles(base, {"warmup"}).train.warmup);
  EXPECT_THROW(apply_toggles(base, {"dropout"}), ConfigError);
}

TEST(Pipeline, DeterministicPerSeed) {
  const RunConfig c = hsnn::test::tiny_run_config();
  const MetricsReport a = run_experiment(c, 5);
  const MetricsReport b = run_experiment(c, 5);
  EXPECT_EQ(a.to_json(), b.to_json());
  ASSERT_EQ(a.ne.size(), 2u);
  for (double x : a.ne) EXPECT_TRUE(std::isfinite(x));
  EXPECT_EQ(a.layer_ne.size(), 2u);
  EXPECT_EQ(a.recall.size(), 2u);
  EXPECT_LE(a.recall.at(5), 1.0);
  EXPECT_EQ(a.run_id, "joim/baseline/seed5");
  EXPECT_NE(run_experiment(c, 6).dataset_hash, a.dataset_hash);
}

TEST(Pipeline, DatasetFilesRoundTrip) {
  const RunConfig c = hsnn::test::tiny_run_config();
  const Dataset d = generate_dataset(c, 2);
  const auto dir = hsnn::test::temp_dir("data");
  save_dataset(dir, d);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.hash(), d.hash());
  EXPECT_EQ(back.evaluation, d.evaluation);
  EXPECT_EQ(back.stream.num_examples(), d.stream.num_examples());
  EXPECT_EQ(back.world.items(), d.world.items());
  EXPECT_THROW(load_dataset(dir / "missing"), FormatError);
}

TEST(AblationGrid, RowsPerToggleSubset) {
  RunConfig c = hsnn::test::tiny_run_config();
  AblationSpec spec;
  spec.toggles = {"warmup", "balance"};
  const auto rows = run_ablation_grid(c, spec);
  ASSERT_EQ(rows.size(), 4u);
  std::set<std::uint64_t> hashes;
  std::set<std::string> labels;
  for (const auto& r : rows) {
    hashes.insert(r.config_hash);
    labels.insert(r.toggles);
  }
  EXPECT_EQ(hashes.size(), 4u);
  EXPECT_EQ(labels.size(), 4u);
  EXPECT_EQ(rows[0].toggles, "warmup=on;balance=on");
  const std::string csv = ablation_csv(rows, c);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  // The all-on row has zero deltas against itself.
  std::istringstream in(csv);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_NE(first.find(",0.000000,0.000000,0.000000"), std::string::npos) << first;

  AblationSpec none;
  const auto single = run_ablation_grid(c, none);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single[0].toggles, "baseline");

  AblationSpec bad;
  bad.toggles = {"nope"};
  EXPECT_THROW(run_ablation_grid(c, bad), ConfigError);
}
