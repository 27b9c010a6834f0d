#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lomt/train.hpp"

using namespace lomt;

namespace {

SceneConfig tiny_scene() {
  SceneConfig c;
  c.image_size = 12;
  return c;
}

BackboneSpec tiny_backbone() { return BackboneSpec::standard(2, 4); }

TrainConfig phase1_config(double lambda, int epochs = 3) {
  TrainConfig c;
  c.phase = 1;
  c.optimizer.lambda = lambda;
  c.optimizer.alpha = 0.05;
  c.optimizer.batch_size = 8;
  c.epochs = epochs;
  c.eval_every = 2;
  return c;
}

bool records_equal(const EpochRecord& a, const EpochRecord& b) {
  return a.epoch == b.epoch && a.train_loss == b.train_loss &&
         a.task_losses == b.task_losses && a.penalty == b.penalty &&
         a.percent_sparsity == b.percent_sparsity && a.sigma_sq == b.sigma_sq &&
         a.val_metrics == b.val_metrics;
}

UncertaintyWeights make_weights(std::vector<Parameter>& storage) {
  UncertaintyWeights w;
  for (auto& p : storage) {
    w.tasks.push_back(p.id.substr(std::string("loss_weight.").size()));
    w.etas.push_back(&p);
  }
  return w;
}

}  // namespace

TEST_CASE("combined_loss closed-form values") {
  std::vector<Parameter> etas;
  etas.push_back(make_parameter("loss_weight.a", ParamRole::loss_weight, -1, false,
                                Tensor::scalar(0.0)));
  etas.push_back(make_parameter("loss_weight.b", ParamRole::loss_weight, -1, false,
                                Tensor::scalar(0.0)));
  UncertaintyWeights w = make_weights(etas);

  std::map<std::string, NodePtr> losses;
  losses["a"] = make_const(Tensor::scalar(2.0));
  losses["b"] = make_const(Tensor::scalar(8.0));

  // sigma = 1: exactly sum L_t / 2
  CHECK(combined_loss(losses, w)->value.item() == (2.0 / 2 + 8.0 / 2));

  // sigma = (1, 2): 2/2 + log 1 + 8/8 + log 2
  etas[1].values()[0] = std::log(4.0);
  CHECK(combined_loss(losses, w)->value.item() ==
        doctest::Approx(2.0 + std::log(2.0)).epsilon(1e-12));

  losses["b"] = make_const(Tensor::scalar(1.0 / 0.0 == 1.0 ? 1.0 : 1.0));  // finite
  losses.erase("b");
  CHECK_THROWS(combined_loss(losses, w));  // missing task loss
}

TEST_CASE("optimizing eta alone reaches sigma^2 = L") {
  auto optimize_eta = [](double l1, double l2) {
    std::vector<Parameter> etas;
    etas.push_back(make_parameter("loss_weight.a", ParamRole::loss_weight, -1, false,
                                  Tensor::scalar(0.0)));
    etas.push_back(make_parameter("loss_weight.b", ParamRole::loss_weight, -1, false,
                                  Tensor::scalar(0.0)));
    UncertaintyWeights w = make_weights(etas);
    std::map<std::string, NodePtr> losses;
    for (int it = 0; it < 400; ++it) {
      losses["a"] = make_const(Tensor::scalar(l1));
      losses["b"] = make_const(Tensor::scalar(l2));
      NodePtr loss = combined_loss(losses, w);
      NodeGrads grads = backprop(loss);
      for (Parameter* p : w.etas) {
        auto it2 = grads.find(p->node.get());
        REQUIRE(it2 != grads.end());
        p->values()[0] -= 0.5 * it2->second[0];
      }
    }
    return std::pair<double, double>{w.sigma_sq(0), w.sigma_sq(1)};
  };

  auto [s1, s2] = optimize_eta(2.0, 8.0);
  CHECK(s1 == doctest::Approx(2.0).epsilon(0.01));
  CHECK(s2 == doctest::Approx(8.0).epsilon(0.01));

  // scaling: sigma^2*(c L) = c sigma^2*(L) within 1%
  auto [t1, t2] = optimize_eta(3.0 * 2.0, 3.0 * 8.0);
  CHECK(t1 / s1 == doctest::Approx(3.0).epsilon(0.01));
  CHECK(t2 / s2 == doctest::Approx(3.0).epsilon(0.01));
}

TEST_CASE("combined_loss gradient matches finite differences") {
  std::vector<Parameter> etas;
  etas.push_back(make_parameter("loss_weight.a", ParamRole::loss_weight, -1, false,
                                Tensor::scalar(0.4)));
  etas.push_back(make_parameter("loss_weight.b", ParamRole::loss_weight, -1, false,
                                Tensor::scalar(-0.7)));
  UncertaintyWeights w = make_weights(etas);
  Parameter theta = make_parameter("theta", ParamRole::head, -1, false,
                                   Tensor::from({3}, {0.8, 1.3, 0.4}));
  Tensor tgt = Tensor::from({3}, {0.2, 0.9, 0.5});
  auto rebuild = [&]() {
    std::map<std::string, NodePtr> losses;
    losses["a"] = mse_loss(theta.node, tgt);
    losses["b"] = scale(sum(mul(theta.node, theta.node)), 0.5);
    return combined_loss(losses, w);
  };
  std::vector<Parameter*> params{&theta, &etas[0], &etas[1]};
  CHECK(finite_diff_check(rebuild, params, 1e-6) < 1e-6);
}

TEST_CASE("aggregate_runs mean and unbiased std") {
  auto report = [](double v) {
    MetricReport r;
    r.values["t"] = {MetricKind::mae, v};
    return r;
  };
  RunAggregate agg = aggregate_runs({report(0.4), report(0.5), report(0.6)});
  CHECK(agg.per_task.at("t").mean == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(agg.per_task.at("t").stddev == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(agg.per_task.at("t").runs == 3);

  RunAggregate same = aggregate_runs({report(0.3), report(0.3)});
  CHECK(same.per_task.at("t").stddev == 0.0);

  CHECK_THROWS(aggregate_runs({report(0.4)}));  // single report

  MetricReport other;
  other.values["different"] = {MetricKind::mae, 0.1};
  CHECK_THROWS(aggregate_runs({report(0.4), other}));
}

TEST_CASE("metric definitions") {
  // IoU: identical masks -> 1
  Tensor pred({1, 2, 2, 2});
  pred[0] = pred[1] = pred[2] = pred[3] = 1.0;  // class-0 logits
  Tensor gt = Tensor::zeros({1, 2, 2});
  CHECK(single_metric(MetricKind::iou, pred, gt) == 1.0);

  // pred {A,B} vs gt {B,C} on a 2x2 grid -> 1/3 for both classes
  // pixels: A=(0,0) B=(0,1) C=(1,0) D=(1,1); class 1 = "marked"
  Tensor logits = Tensor::zeros({1, 2, 2, 2});
  auto mark = [&](int y, int x, double v) { logits[(size_t)(1 * 4 + y * 2 + x)] = v; };
  mark(0, 0, 1.0);   // A predicted class 1
  mark(0, 1, 1.0);   // B predicted class 1
  mark(1, 0, -1.0);  // C predicted class 0
  mark(1, 1, -1.0);  // D predicted class 0
  Tensor seg = Tensor::zeros({1, 2, 2});
  seg[1] = 1.0;  // B
  seg[2] = 1.0;  // C
  CHECK(single_metric(MetricKind::iou, logits, seg) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // disjoint equal-size masks -> IoU 0 for the marked class
  Tensor logits2 = Tensor::zeros({1, 2, 2, 2});
  logits2[(size_t)(1 * 4 + 0)] = 1.0;  // A predicted class 1
  logits2[(size_t)(1 * 4 + 1)] = -1.0;
  logits2[(size_t)(1 * 4 + 2)] = -1.0;
  logits2[(size_t)(1 * 4 + 3)] = -1.0;
  Tensor seg2 = Tensor::zeros({1, 2, 2});
  seg2[3] = 1.0;  // D only
  // class 1: pred {A}, gt {D}: 0/2; class 0: {B,C,D} vs {A,B,C}: 2/4
  CHECK(single_metric(MetricKind::iou, logits2, seg2) == doctest::Approx(0.25).epsilon(1e-12));

  // MAE
  CHECK(single_metric(MetricKind::mae, Tensor::from({2}, {0.5, 1.0}),
                      Tensor::from({2}, {0.0, 0.0})) == doctest::Approx(0.75));

  // accuracy thresholds the logit at 0 (probability 0.5)
  CHECK(single_metric(MetricKind::accuracy, Tensor::from({4}, {2.0, -1.0, 0.5, -0.5}),
                      Tensor::from({4}, {1, 0, 0, 1})) == doctest::Approx(0.5));

  // cosine similarity of identical vectors
  Tensor dir = Tensor::from({1, 2, 1, 1}, {0.6, 0.8});
  CHECK(single_metric(MetricKind::cosine_similarity, dir, dir) == doctest::Approx(1.0));
}

TEST_CASE("phase 1 with lambda = 0 stays fully dense") {
  Dataset ds = generate_dataset(tiny_scene(), 5, 60);
  Phase1Result r = train_phase1(standard_task("edge"), ds, tiny_backbone(),
                                phase1_config(0.0), 1);
  CHECK(r.history.back().percent_sparsity == 0.0);
  for (const auto& lp : r.pattern.layers)
    for (uint8_t f : lp.zero_channels) CHECK(f == 0);
  CHECK(last_active_layer(r.pattern) == tiny_backbone().conv_layers() - 1);
  CHECK(r.history.size() == 4);  // epoch 0 + 3 epochs
  CHECK(!r.history[0].train_loss.has_value());
  CHECK(r.history[0].val_metrics.has_value());
}

TEST_CASE("absurdly large lambda zeroes everything but training completes") {
  Dataset ds = generate_dataset(tiny_scene(), 5, 60);
  Phase1Result r = train_phase1(standard_task("edge"), ds, tiny_backbone(),
                                phase1_config(10.0), 1);
  CHECK(r.history.back().percent_sparsity == 100.0);
  // all groups died within the first epochs, not at an error
  CHECK(r.history[1].percent_sparsity == 100.0);
  // the all-zero error fires only when tap planning is requested
  std::map<std::string, SparsityPattern> pats{{"edge", r.pattern}};
  CHECK_THROWS(plan_lomt(pats));
}

TEST_CASE("identical seed and config reproduce the history exactly") {
  Dataset ds = generate_dataset(tiny_scene(), 7, 60);
  Phase1Result a = train_phase1(standard_task("edge"), ds, tiny_backbone(),
                                phase1_config(0.001), 3);
  Phase1Result b = train_phase1(standard_task("edge"), ds, tiny_backbone(),
                                phase1_config(0.001), 3);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) CHECK(records_equal(a.history[i], b.history[i]));

  Phase1Result c = train_phase1(standard_task("edge"), ds, tiny_backbone(),
                                phase1_config(0.001), 4);
  CHECK(a.history.back().train_loss != c.history.back().train_loss);
}

TEST_CASE("phase 2 smoke: both validation metrics improve over epoch 0") {
  SceneConfig scene;
  scene.image_size = 12;
  Dataset ds = generate_dataset(scene, 21, 300);
  std::vector<TaskSpec> tasks{standard_task("edge"), standard_task("distance")};

  BackboneSpec bb = BackboneSpec::standard(2, 6);
  const int final_layer = bb.conv_layers() - 1;
  ModelGraph model = assemble_model(
      build_backbone(bb, 3),
      {{tasks[0].head_spec(), final_layer}, {tasks[1].head_spec(), final_layer}});

  TrainConfig cfg;
  cfg.phase = 2;
  cfg.optimizer.lambda = 0.0;
  cfg.optimizer.alpha = 0.05;
  cfg.optimizer.batch_size = 8;
  cfg.epochs = 10;
  cfg.eval_every = 5;
  Phase2Result r = train_phase2(model.clone(), tasks, ds, cfg, 3);

  const auto& first = *r.history.front().val_metrics;
  const auto& last = *r.history.back().val_metrics;
  for (const TaskSpec& t : tasks) {
    CHECK(metric_score(t.metric, last.at(t.name)) > metric_score(t.metric, first.at(t.name)));
  }
  // sigma trajectories recorded every epoch
  for (const auto& rec : r.history) {
    CHECK(rec.sigma_sq.size() == 2);
  }
}

TEST_CASE("dense MTL and all-final LOMT have identical trajectories") {
  SceneConfig scene;
  scene.image_size = 12;
  Dataset ds = generate_dataset(scene, 31, 120);
  std::vector<TaskSpec> tasks{standard_task("edge"), standard_task("classification")};
  BackboneSpec bb = BackboneSpec::standard(2, 4);
  const int fl = bb.conv_layers() - 1;

  TrainConfig cfg;
  cfg.phase = 2;
  cfg.optimizer.alpha = 0.05;
  cfg.optimizer.batch_size = 8;
  cfg.epochs = 3;
  cfg.eval_every = 1;

  ModelGraph dense = assemble_model(
      build_backbone(bb, 5), {{tasks[0].head_spec(), fl}, {tasks[1].head_spec(), fl}});
  // LOMT built from dense patterns: taps land on the final layer
  GroupIndex idx = build_channel_groups(dense, 0.1);
  std::map<std::string, SparsityPattern> pats;
  pats["edge"] = extract_pattern(dense, idx);
  pats["classification"] = extract_pattern(dense, idx);
  TapSelection sel = plan_lomt(pats);
  ModelGraph lomt = assemble_model(build_backbone(bb, 5),
                                   {{tasks[0].head_spec(), sel.taps.at("edge")},
                                    {tasks[1].head_spec(), sel.taps.at("classification")}});

  Phase2Result ra = train_phase2(std::move(dense), tasks, ds, cfg, 9);
  Phase2Result rb = train_phase2(std::move(lomt), tasks, ds, cfg, 9);
  REQUIRE(ra.history.size() == rb.history.size());
  for (size_t i = 0; i < ra.history.size(); ++i)
    CHECK(records_equal(ra.history[i], rb.history[i]));
}

TEST_CASE("single-task phase 2 reduces to weighted single-task training") {
  // with N = 1 the combined loss is L/(2 sigma^2) + log sigma; at the start
  // (sigma = 1) it is exactly L/2
  SceneConfig scene;
  scene.image_size = 12;
  Dataset ds = generate_dataset(scene, 41, 100);
  std::vector<TaskSpec> tasks{standard_task("edge")};
  BackboneSpec bb = BackboneSpec::standard(2, 4);
  ModelGraph model =
      assemble_model(build_backbone(bb, 2), {{tasks[0].head_spec(), bb.conv_layers() - 1}});
  TrainConfig cfg;
  cfg.phase = 2;
  cfg.optimizer.alpha = 0.05;
  cfg.optimizer.batch_size = 8;
  cfg.epochs = 4;
  cfg.eval_every = 2;
  Phase2Result r = train_phase2(std::move(model), tasks, ds, cfg, 1);
  CHECK(r.history.back().task_losses.count("edge") == 1);
  const auto& first = *r.history.front().val_metrics;
  const auto& last = *r.history.back().val_metrics;
  CHECK(metric_score(tasks[0].metric, last.at("edge")) >
        metric_score(tasks[0].metric, first.at("edge")));
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.phase = 1;
  CHECK_THROWS(cfg.validate(2));  // phase 1 needs exactly one task
  cfg.phase = 2;
  cfg.optimizer.lambda = 0.1;
  CHECK_THROWS(cfg.validate(2));  // phase 2 forbids the penalty
  cfg.phase = 3;
  cfg.optimizer.lambda = 0.0;
  CHECK_THROWS(cfg.validate(1));

  TaskSpec bad = standard_task("edge");
  bad.metric = MetricKind::accuracy;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(standard_task("unknown"));
}
