#include <gtest/gtest.h>

#include <cmath>

#include "hsnn/hsnn.hpp"
#include "test_util.hpp"

using namespace hsnn;
using hsnn::test::numeric_grad;
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

HsnnConfig tiny_hsnn() {
  HsnnConfig c;
  c.item = tiny_item(Preset::S);
  c.nodes = {4, 2};
  c.presets = {Preset::S, Preset::XS};
  return c;
}

HsnnModel make_seeded(const hsnn::test::TinySetup& s, const HsnnConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  HsnnModel m = HsnnModel::make(s.schema, c, rng);
  init_codebooks(m, catalog_embeddings(m, s.world.items(), s.schema), rng);
  return m;
}

}  // namespace

TEST(HsnnConfig, Validation) {
  HsnnConfig c = tiny_hsnn();
  EXPECT_NO_THROW(c.validate());
  c.presets.pop_back();
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_hsnn();
  c.nodes[1] = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_hsnn();
  c.item.user = {1, 2, {}};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_train_mode("sil"), TrainMode::sil);
  EXPECT_EQ(train_mode_name(TrainMode::em), "em");
  EXPECT_THROW(parse_train_mode("xx"), ConfigError);
}

TEST(Hsnn, NoIndexLayersReducesToMonnBitwise) {
  const auto s = tiny_setup(30);
  HsnnConfig c = tiny_hsnn();
  c.nodes.clear();
  c.presets.clear();
  Rng a(77), b(77);
  const HsnnModel h = HsnnModel::make(s.schema, c, a);
  const MonnModel m = MonnModel::make(s.schema, c.item, b);
  for (const auto& in : s.inputs) {
    const HsnnOutput o = hsnn_forward(h, in, Assignment{});
    const Prediction p = m.forward(in);
    ASSERT_EQ(o.layer_logits.size(), 1u);
    EXPECT_EQ(o.ensemble_logits, p.logits);
    EXPECT_EQ(o.final.probs, p.probs);
  }
}

TEST(Ensemble, AveragingAndOneHotWeights) {
  const auto s = tiny_setup(10);
  HsnnModel m = make_seeded(s, tiny_hsnn(), 3);
  const std::size_t L = m.layers(), T = m.tasks();
  for (const auto& in : s.inputs) {
    const HsnnOutput o = hsnn_forward(m, in, Assignment{});
    for (std::size_t t = 0; t < T; ++t) {
      double mean = 0.0;
      for (std::size_t l = 0; l < L; ++l) mean += o.layer_logits[l][t];
      EXPECT_NEAR(o.ensemble_logits[t], mean / double(L), 1e-12);
    }
  }
  for (std::size_t pick = 0; pick < L; ++pick) {
    m.ensemble.weight.fill(0.0);
    for (std::size_t t = 0; t < T; ++t) m.ensemble.weight(t, pick * T + t) = 1.0;
    for (const auto& in : s.inputs) {
      const HsnnOutput o = hsnn_forward(m, in, Assignment{});
      EXPECT_EQ(o.ensemble_logits, o.layer_logits[pick]);
    }
  }
  EXPECT_THROW(m.ensemble.forward(Vec(L * T + 1)), DimensionError);
}

TEST(HsnnLoss, ZeroLogitsGiveLayersTimesTasksLn2) {
  for (std::size_t L : {1u, 2u, 4u}) {
    std::vector<HsnnOutput> outs(5);
    std::vector<std::vector<std::uint8_t>> labels;
    for (std::size_t i = 0; i < 5; ++i) {
      outs[i].layer_logits.assign(L, Vec{0.0, 0.0, 0.0});
      labels.push_back({std::uint8_t(i % 2), 1, 0});
    }
    EXPECT_NEAR(hsnn_loss(outs, labels, Vec{1.0, 1.0, 1.0}), double(L) * 3.0 * std::log(2.0),
                1e-12);
  }
  EXPECT_EQ(hsnn_loss({}, {}, Vec{1.0}), 0.0);
}

TEST(InteractionDistill, Examples) {
  const DistillGrad g = interaction_tower_distill(Vec{1.0, 0.0}, Vec{0.0, 1.0});
  EXPECT_DOUBLE_EQ(g.loss, 1.0);
  EXPECT_EQ(g.grad_item, (Vec{0.0, 0.0}));
  EXPECT_EQ(g.grad_index, (Vec{-1.0, 1.0}));
  EXPECT_EQ(interaction_tower_distill(Vec{2.0, 3.0}, Vec{2.0, 3.0}).loss, 0.0);
  EXPECT_THROW(interaction_tower_distill(Vec{1.0}, Vec{1.0, 2.0}), DimensionError);
  Rng rng(5);
  Vec a = hsnn::test::random_vec(rng, 6), b = hsnn::test::random_vec(rng, 6);
  const auto loss = [&] { return interaction_tower_distill(a, b).loss; };
  hsnn::test::expect_grad_close(interaction_tower_distill(a, b).grad_index, numeric_grad(loss, b),
                                1e-7, "index");
}

TEST(HsnnBatch, JointGradientMatchesCentralDifferences) {
  const auto s = tiny_setup(12, 2, 16);
  HsnnModel m = make_seeded(s, tiny_hsnn(), 4);
  Rng trng(8);
  const MonnModel teacher = MonnModel::make(s.schema, tiny_item(Preset::S), trng);

  Rng rng(9);
  std::vector<BalanceRegState> balance;
  for (std::size_t n = 0; n < m.index_layers(); ++n) {
    const std::size_t K = m.codebooks[n].rows();
    balance.emplace_back(K, 3);
    Matrix past(5, K);
    for (std::size_t r = 0; r < 5; ++r) {
      const Vec a = lti_soft_assign(hsnn::test::random_vec(rng, K), 1.0);
      std::copy(a.begin(), a.end(), past.row(r).begin());
    }
    balance.back().push(past);
  }
  std::vector<std::vector<TowerInput>> coarse(s.inputs.size());
  for (std::size_t i = 0; i < coarse.size(); i += 2) {
    coarse[i] = {s.inputs[(i + 1) % coarse.size()].item, s.inputs[(i + 3) % coarse.size()].item};
  }

  StepOptions opt;
  opt.alpha = 2.0;
  opt.weights = {0.7, 3.0, 0.2, 0.9};
  opt.teacher = &teacher;
  opt.balance = &balance;
  opt.coarse_items = coarse;

  {
    NamedParams jp;
    m.collect(jp, true);
    hsnn::test::jitter(jp, rng);
  }
  HsnnModel g = m.zeros_like();
  const StepResult r = hsnn_batch(m, s.inputs, s.labels, opt, &g);
  EXPECT_GT(r.loss.index, 0.0);
  EXPECT_GT(r.loss.flops, 0.0);
  EXPECT_GT(r.loss.reconstruction, 0.0);
  EXPECT_GT(r.loss.interaction_mse, 0.0);
  EXPECT_GT(r.loss.distillation, 0.0);

  NamedParams p, gp;
  m.collect(p, true);
  g.collect(gp, true);
  ASSERT_EQ(p.size(), gp.size());
  const auto model_loss = [&] { return hsnn_batch(m, s.inputs, s.labels, opt, nullptr).loss.model_total(); };
  const auto ensemble_loss = [&] { return hsnn_batch(m, s.inputs, s.labels, opt, nullptr).loss.ensemble; };
  // The item-level interaction embedding is a fixed target of the MSE term.
  const auto item_interaction_loss = [&] {
    const BatchLoss l = hsnn_batch(m, s.inputs, s.labels, opt, nullptr).loss;
    return l.model_total() - l.interaction_mse;
  };
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::function<double()> loss = model_loss;
    if (p[i].name.rfind("ensemble.", 0) == 0) loss = ensemble_loss;
    if (p[i].name.rfind("interaction.", 0) == 0) loss = item_interaction_loss;
    const Vec num = numeric_grad(loss, p[i].values);
    hsnn::test::expect_grad_close(gp[i].values, num, 1e-4, p[i].name);
  }
}

TEST(HsnnBatch, FrozenIndexGivesNoCodebookGradient) {
  const auto s = tiny_setup(12, 3, 16);
  HsnnModel joim = make_seeded(s, tiny_hsnn(), 5);
  StepOptions opt;
  opt.alpha = 1.0;
  HsnnModel g = joim.zeros_like();
  const StepResult jr = hsnn_batch(joim, s.inputs, s.labels, opt, &g);
  double norm = 0.0;
  for (const Matrix& b : g.codebooks) norm += dot(b.values(), b.values());
  EXPECT_GT(norm, 0.0);
  EXPECT_EQ(jr.affinities.size(), 2u);

  HsnnModel sil = joim;
  sil.index_encoder = sil.item_model.item_tower;
  ASSERT_TRUE(sil.index_frozen());
  HsnnModel gs = sil.zeros_like();
  const StepResult sr = hsnn_batch(sil, s.inputs, s.labels, opt, &gs);
  for (const Matrix& b : gs.codebooks) {
    for (double x : b.values()) EXPECT_EQ(x, 0.0);
  }
  EXPECT_EQ(sr.loss.index, 0.0);
  EXPECT_EQ(sr.loss.reconstruction, 0.0);
  EXPECT_TRUE(sr.affinities.empty());
}

TEST(TrainHsnn, SilNeverMovesCodebooks) {
  auto s = tiny_setup(600, 4, 16);
  HsnnModel m = make_seeded(s, tiny_hsnn(), 6);
  const ImpressionStream stream = batch_examples(s.examples, 20);
  HsnnTrainConfig tc;
  tc.mode = TrainMode::sil;
  tc.snapshot_interval = 1;
  std::vector<Matrix> first;
  tc.on_snapshot = [&](std::size_t step, const HsnnModel& model) {
    if (step == 1) first = model.codebooks;
    EXPECT_EQ(model.codebooks, first);
  };
  Rng rng(1);
  const HsnnTrace tr = train_hsnn(m, stream, s.world.items(), s.schema, s.i2if, tc, rng);
  EXPECT_EQ(tr.steps, 30u);
  EXPECT_EQ(m.codebooks, first);
  for (double a : tr.alpha) EXPECT_EQ(a, 0.0);
}

TEST(TrainHsnn, JoimMovesCodebooksAndFollowsSchedule) {
  auto s = tiny_setup(600, 5, 16);
  HsnnModel m = make_seeded(s, tiny_hsnn(), 7);
  const ImpressionStream stream = batch_examples(s.examples, 20);
  HsnnTrainConfig tc;
  std::vector<Matrix> first;
  tc.snapshot_interval = 1;
  tc.on_snapshot = [&](std::size_t step, const HsnnModel& model) {
    if (step == 1) first = model.codebooks;
  };
  Rng rng(1);
  const HsnnTrace tr = train_hsnn(m, stream, s.world.items(), s.schema, s.i2if, tc, rng);
  EXPECT_NE(m.codebooks, first);
  ASSERT_EQ(tr.alpha.size(), 30u);
  SchedulerConfig sc = tc.scheduler;
  sc.max_iters = 30;
  for (std::size_t i = 0; i < 30; ++i) EXPECT_DOUBLE_EQ(tr.alpha[i], scheduler_alpha(sc, i + 1));
  for (const BatchLoss& l : tr.loss) EXPECT_TRUE(std::isfinite(l.model_total()));
}

TEST(TrainHsnn, EmReclustersEachRound) {
  auto s = tiny_setup(600, 6, 16);
  HsnnModel m = make_seeded(s, tiny_hsnn(), 8);
  HsnnTrainConfig tc;
  tc.mode = TrainMode::em;
  tc.em_rounds = 2;
  Rng rng(1);
  const HsnnTrace tr = train_hsnn(m, batch_examples(s.examples, 20),
                                  s.world.items(), s.schema, s.i2if, tc, rng);
  EXPECT_EQ(tr.reclusters, 2u);
  EXPECT_EQ(tr.steps, 30u);
  EXPECT_TRUE(m.index_frozen());
}

TEST(CalibrateHsnn, MeanPredictionMatchesMeanLabel) {
  auto s = tiny_setup(400, 7, 16);
  HsnnModel m = make_seeded(s, tiny_hsnn(), 9);
  const HierarchicalIndex idx = publish_index(m, s.world.items(), s.schema, 1);
  const ServingContext ctx(s.schema, s.world.items(), idx);
  for (EvalFeatures f : {EvalFeatures::representative, EvalFeatures::own}) {
    calibrate_hsnn(m, s.examples, ctx, s.i2if, f);
    const auto outs = predict_hsnn(m, s.examples, ctx, s.i2if, f);
    for (std::size_t t = 0; t < m.tasks(); ++t) {
      double label = 0.0, ens = 0.0;
      std::vector<double> layer(m.layers(), 0.0);
      for (std::size_t i = 0; i < outs.size(); ++i) {
        label += s.examples[i].labels[t];
        ens += outs[i].final.probs[t];
        for (std::size_t l = 0; l < m.layers(); ++l) layer[l] += sigmoid(outs[i].layer_logits[l][t]);
      }
      EXPECT_NEAR(ens, label, 1e-6 * outs.size());
      for (double x : layer) EXPECT_NEAR(x, label, 1e-6 * outs.size());
    }
  }
}

TEST(ServingContextAssignment, FollowsItemPath) {
  auto s = tiny_setup(10, 8, 16);
  const HsnnModel m = make_seeded(s, tiny_hsnn(), 10);
  const HierarchicalIndex idx = publish_index(m, s.world.items(), s.schema, 1);
  const ServingContext ctx(s.schema, s.world.items(), idx);
  for (const Item& it : s.world.items()) {
    const Assignment a = ctx.assignment(it.id);
    ASSERT_EQ(a.nodes.size(), 2u);
    const auto& path = idx.path_of(it.id);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(a.nodes[0][i], m.codebooks[0](path[0], i), 1e-15);
      EXPECT_NEAR(a.nodes[1][i], m.codebooks[0](path[0], i) + m.codebooks[1](path[1], i), 1e-15);
    }
    const IndexNode& top = ctx.tree().level(0)[ctx.tree().nodes_of(it.id)[0]];
    EXPECT_EQ(top.representative, idx.representatives()[0][path[0]]);
    EXPECT_EQ(a.items[0].dense, ctx.item_input(top.representative).dense);
  }
  EXPECT_THROW(ctx.assignment(123456), StaleError);
}

TEST(HsnnSnapshot, RoundTrip) {
  auto s = tiny_setup(20, 9, 16);
  HsnnModel m = make_seeded(s, tiny_hsnn(), 11);
  m.coarse[0].calibration = {0.25, -0.5};
  m.ensemble.calibration = {0.1, 0.2};
  const auto dir = hsnn::test::temp_dir("hsnn");
  save_hsnn(dir, m, s.schema, 42);
  std::size_t step = 0;
  HsnnModel back = load_hsnn(dir, s.schema, &step);
  EXPECT_EQ(step, 42u);
  for (const auto& in : s.inputs) {
    EXPECT_EQ(hsnn_forward(m, in, Assignment{}).ensemble_logits,
              hsnn_forward(back, in, Assignment{}).ensemble_logits);
  }
  EXPECT_THROW(load_hsnn(dir, FeatureSchema::standard(5)), Error);

  HsnnModel frozen = m;
  frozen.index_encoder = frozen.item_model.item_tower;
  save_hsnn(dir, frozen, s.schema, 1);
  EXPECT_TRUE(load_hsnn(dir, s.schema).index_frozen());
}
