#include "lomt/train.hpp"

#include <algorithm>
#include <cmath>

namespace lomt {

// ------------------------------------------------------------------- tasks

HeadSpec TaskSpec::head_spec() const {
  HeadSpec h;
  h.kind = head;
  h.task_name = name;
  h.out_channels = out_channels;
  h.loss = loss;
  h.metric = metric;
  return h;
}

void TaskSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("task: empty name");
  if (target_key.empty()) throw std::invalid_argument("task " + name + ": no target key");
  const bool classifier = head == HeadKind::classifier;
  if (classifier && metric != MetricKind::accuracy)
    throw std::invalid_argument("task " + name + ": classifier heads report accuracy");
  if (!classifier && metric == MetricKind::accuracy)
    throw std::invalid_argument("task " + name + ": accuracy needs a classifier head");
  if (metric == MetricKind::iou && loss != LossKind::softmax_ce)
    throw std::invalid_argument("task " + name + ": IoU needs softmax_ce training");
  if (out_channels < 1) throw std::invalid_argument("task " + name + ": bad channel count");
}

TaskSpec standard_task(const std::string& name) {
  TaskSpec t;
  t.name = name;
  if (name == "edge") {
    t.head = HeadKind::dense_decoder;
    t.loss = LossKind::mse;
    t.metric = MetricKind::mae;
    t.target_key = "edge";
    t.out_channels = 1;
  } else if (name == "segmentation") {
    t.head = HeadKind::dense_decoder;
    t.loss = LossKind::softmax_ce;
    t.metric = MetricKind::iou;
    t.target_key = "segmentation";
    t.out_channels = kSegClasses;
  } else if (name == "distance") {
    t.head = HeadKind::dense_decoder;
    t.loss = LossKind::mse;
    t.metric = MetricKind::mae;
    t.target_key = "distance";
    t.out_channels = 1;
  } else if (name == "classification") {
    t.head = HeadKind::classifier;
    t.loss = LossKind::sigmoid_bce;
    t.metric = MetricKind::accuracy;
    t.target_key = "label";
    t.out_channels = 1;
  } else {
    throw std::invalid_argument("unknown task: " + name);
  }
  return t;
}

void TrainConfig::validate(size_t task_count) const {
  optimizer.validate();
  if (epochs < 0 || eval_every < 1) throw std::invalid_argument("train: bad epochs/eval cadence");
  if (phase == 1) {
    if (task_count != 1) throw std::invalid_argument("phase 1 trains exactly one task");
  } else if (phase == 2) {
    if (optimizer.lambda != 0.0)
      throw std::invalid_argument("phase 2 applies no sparsity penalty (lambda must be 0)");
    if (task_count < 1) throw std::invalid_argument("phase 2 needs at least one task");
  } else {
    throw std::invalid_argument("phase must be 1 or 2");
  }
}

// ----------------------------------------------------------------- batches

Tensor batch_images(const Dataset& dataset, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const Tensor& first = dataset.samples[(size_t)indices[0]].image;
  const int C = first.dim(0), H = first.dim(1), W = first.dim(2);
  Tensor batch({(int)indices.size(), C, H, W});
  const int stride = C * H * W;
  for (size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = dataset.samples[(size_t)indices[i]].image;
    std::copy(img.v.begin(), img.v.end(), batch.v.begin() + (long)i * stride);
  }
  return batch;
}

Tensor batch_targets(const Dataset& dataset, const std::vector<int>& indices,
                     const TaskSpec& task) {
  const int B = (int)indices.size();
  if (task.target_key == "label") {
    Tensor t({B, 1});
    for (int i = 0; i < B; ++i)
      t[(size_t)i] = (double)dataset.samples[(size_t)indices[(size_t)i]].label;
    return t;
  }
  Tensor first = target_tensor(dataset.samples[(size_t)indices[0]], task.target_key);
  std::vector<int> shape;
  shape.push_back(B);
  for (int d : first.shape) shape.push_back(d);
  Tensor batch(shape);
  const int stride = first.numel();
  for (int i = 0; i < B; ++i) {
    Tensor t = target_tensor(dataset.samples[(size_t)indices[(size_t)i]], task.target_key);
    std::copy(t.v.begin(), t.v.end(), batch.v.begin() + (long)i * stride);
  }
  return batch;
}

// ----------------------------------------------------------- combined loss

NodePtr combined_loss(const std::map<std::string, NodePtr>& task_losses,
                      const UncertaintyWeights& weights) {
  if (task_losses.size() != weights.tasks.size())
    throw std::invalid_argument("combined_loss: task/weight count mismatch");
  std::vector<NodePtr> losses, etas;
  for (size_t i = 0; i < weights.tasks.size(); ++i) {
    auto it = task_losses.find(weights.tasks[i]);
    if (it == task_losses.end())
      throw std::invalid_argument("combined_loss: missing loss for task " + weights.tasks[i]);
    if (!it->second->value.all_finite())
      throw std::invalid_argument("combined_loss: non-finite loss for task " + weights.tasks[i]);
    losses.push_back(it->second);
    etas.push_back(weights.etas[i]->node);
  }
  return uncertainty_combine(losses, etas);
}

// -------------------------------------------------------------- evaluation

namespace {

struct MetricAccum {
  // mae / cosine
  double sum = 0.0;
  long long count = 0;
  // iou
  std::vector<long long> inter, uni;
  // accuracy
  long long correct = 0, total = 0;
};

void accumulate_metric(MetricAccum& acc, const TaskSpec& task, const Tensor& pred,
                       const Tensor& target) {
  switch (task.metric) {
    case MetricKind::mae: {
      for (int i = 0; i < pred.numel(); ++i) acc.sum += std::abs(pred[(size_t)i] - target[(size_t)i]);
      acc.count += pred.numel();
      break;
    }
    case MetricKind::iou: {
      const int B = pred.dim(0), K = pred.dim(1), S = pred.numel() / (B * K);
      if ((int)acc.inter.size() < K) {
        acc.inter.resize((size_t)K, 0);
        acc.uni.resize((size_t)K, 0);
      }
      for (int n = 0; n < B; ++n)
        for (int s = 0; s < S; ++s) {
          int best = 0;
          double bv = pred[((size_t)n * K) * S + s];
          for (int k = 1; k < K; ++k) {
            const double v = pred[((size_t)n * K + k) * S + s];
            if (v > bv) {
              bv = v;
              best = k;
            }
          }
          const int gt = (int)std::llround(target[(size_t)n * S + s]);
          for (int k = 0; k < K; ++k) {
            const bool inp = best == k, ing = gt == k;
            if (inp && ing) ++acc.inter[(size_t)k];
            if (inp || ing) ++acc.uni[(size_t)k];
          }
        }
      break;
    }
    case MetricKind::cosine_similarity: {
      const int B = pred.dim(0), K = pred.dim(1), S = pred.numel() / (B * K);
      for (int n = 0; n < B; ++n)
        for (int s = 0; s < S; ++s) {
          double pp = 0, tt = 0, pt = 0;
          for (int k = 0; k < K; ++k) {
            const double p = pred[((size_t)n * K + k) * S + s];
            const double t = target[((size_t)n * K + k) * S + s];
            pp += p * p;
            tt += t * t;
            pt += p * t;
          }
          acc.sum += pt / (std::max(std::sqrt(pp), 1e-12) * std::max(std::sqrt(tt), 1e-12));
          ++acc.count;
        }
      break;
    }
    case MetricKind::accuracy: {
      for (int i = 0; i < pred.numel(); ++i) {
        const int hat = pred[(size_t)i] >= 0.0 ? 1 : 0;  // logit threshold = prob 0.5
        if (hat == (int)std::llround(target[(size_t)i])) ++acc.correct;
        ++acc.total;
      }
      break;
    }
  }
}

double finish_metric(const MetricAccum& acc, MetricKind kind) {
  switch (kind) {
    case MetricKind::mae:
    case MetricKind::cosine_similarity:
      return acc.count == 0 ? 0.0 : acc.sum / (double)acc.count;
    case MetricKind::iou: {
      double total = 0.0;
      int classes = 0;
      for (size_t k = 0; k < acc.uni.size(); ++k) {
        if (acc.uni[k] == 0) continue;  // empty-union classes excluded
        total += (double)acc.inter[k] / (double)acc.uni[k];
        ++classes;
      }
      return classes == 0 ? 0.0 : total / classes;
    }
    case MetricKind::accuracy:
      return acc.total == 0 ? 0.0 : (double)acc.correct / (double)acc.total;
  }
  throw std::logic_error("bad metric");
}

}  // namespace

double single_metric(MetricKind kind, const Tensor& pred, const Tensor& target) {
  MetricAccum acc;
  TaskSpec probe;
  probe.metric = kind;
  accumulate_metric(acc, probe, pred, target);
  return finish_metric(acc, kind);
}

MetricReport evaluate(const ModelGraph& model, const Dataset& dataset,
                      const std::vector<int>& indices, const std::vector<TaskSpec>& tasks) {
  for (const TaskSpec& t : tasks)
    if (model.taps.find(t.name) == model.taps.end())
      throw std::invalid_argument("evaluate: model has no head for task " + t.name);
  std::map<std::string, MetricAccum> accums;
  const int kEvalBatch = 32;
  for (size_t start = 0; start < indices.size(); start += kEvalBatch) {
    std::vector<int> chunk(indices.begin() + (long)start,
                           indices.begin() +
                               (long)std::min(indices.size(), start + kEvalBatch));
    ForwardPass fp = model.forward(batch_images(dataset, chunk));
    for (const TaskSpec& task : tasks) {
      const Tensor& pred = fp.outputs.at(task.name)->value;
      Tensor target = batch_targets(dataset, chunk, task);
      accumulate_metric(accums[task.name], task, pred, target);
    }
  }
  MetricReport report;
  for (const TaskSpec& task : tasks)
    report.values[task.name] = {task.metric, finish_metric(accums[task.name], task.metric)};
  return report;
}

RunAggregate aggregate_runs(const std::vector<MetricReport>& reports) {
  if (reports.size() < 2)
    throw std::invalid_argument("aggregate_runs: need >= 2 reports, got " +
                                std::to_string(reports.size()));
  for (const auto& r : reports) {
    if (r.values.size() != reports[0].values.size())
      throw std::invalid_argument("aggregate_runs: heterogeneous task sets");
    for (const auto& [task, v] : reports[0].values)
      if (r.values.find(task) == r.values.end())
        throw std::invalid_argument("aggregate_runs: heterogeneous task sets (missing " + task +
                                    ")");
  }
  RunAggregate agg;
  for (const auto& [task, first] : reports[0].values) {
    RunAggregate::Entry e;
    e.metric = first.first;
    e.runs = (int)reports.size();
    double sum = 0.0;
    for (const auto& r : reports) sum += r.values.at(task).second;
    e.mean = sum / (double)reports.size();
    double ss = 0.0;
    for (const auto& r : reports) {
      const double d = r.values.at(task).second - e.mean;
      ss += d * d;
    }
    e.stddev = std::sqrt(ss / (double)(reports.size() - 1));
    agg.per_task[task] = e;
  }
  return agg;
}

double metric_score(MetricKind kind, double value) {
  return kind == MetricKind::mae ? -value : value;  // lower MAE is better
}

// ---------------------------------------------------------------- training

namespace {

constexpr uint64_t kShuffleStream = 0x73687566;
// global-l2 gradient clip; tames the occasional huge early-training step and
// the growth of task gradients as sigma_t^2 adapts toward small losses
constexpr double kGradClipNorm = 5.0;

void clip_gradients(std::map<std::string, Tensor>& grads) {
  double sq = 0.0;
  for (const auto& [id, g] : grads)
    for (double v : g.v) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= kGradClipNorm) return;
  const double s = kGradClipNorm / norm;
  for (auto& [id, g] : grads)
    for (double& v : g.v) v *= s;
}

std::vector<int> shuffled_indices(const std::vector<int>& indices, uint64_t seed, int epoch) {
  std::vector<int> order = indices;
  Rng rng(mix_seed(mix_seed(seed, kShuffleStream), (uint64_t)epoch));
  for (int i = (int)order.size() - 1; i > 0; --i) {
    const int j = rng.below(i + 1);
    std::swap(order[(size_t)i], order[(size_t)j]);
  }
  return order;
}

std::map<std::string, double> val_metrics_map(const ModelGraph& model, const Dataset& dataset,
                                              const std::vector<TaskSpec>& tasks) {
  MetricReport r = evaluate(model, dataset, dataset.val_idx, tasks);
  std::map<std::string, double> out;
  for (const auto& [task, v] : r.values) out[task] = v.second;
  return out;
}

}  // namespace

Phase1Result train_phase1(const TaskSpec& task, const Dataset& dataset,
                          const BackboneSpec& backbone, const TrainConfig& config,
                          uint64_t seed) {
  task.validate();
  config.validate(1);
  if (config.phase != 1) throw std::invalid_argument("train_phase1: config.phase must be 1");
  if (dataset.train_idx.empty()) throw std::invalid_argument("train_phase1: empty train split");

  const int final_layer = backbone.conv_layers() - 1;
  ModelGraph model =
      assemble_model(build_backbone(backbone, seed), {{task.head_spec(), final_layer}});
  GroupIndex index = build_channel_groups(model, config.optimizer.lambda);
  ProxOptimizer optimizer(config.optimizer);
  const std::vector<TaskSpec> tasks{task};

  History history;
  {
    EpochRecord rec;
    rec.epoch = 0;
    rec.penalty = penalty(model, index);
    rec.percent_sparsity = sparsity_stats(model, index).percent_zero_parameters;
    rec.val_metrics = val_metrics_map(model, dataset, tasks);
    history.push_back(rec);
  }

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::vector<int> order = shuffled_indices(dataset.train_idx, seed, epoch);
    double loss_sum = 0.0;
    long long seen = 0;
    for (size_t start = 0; start < order.size(); start += (size_t)config.optimizer.batch_size) {
      std::vector<int> chunk(
          order.begin() + (long)start,
          order.begin() + (long)std::min(order.size(), start + (size_t)config.optimizer.batch_size));
      ForwardPass fp = model.forward(batch_images(dataset, chunk));
      NodePtr loss = compute_loss(task.loss, fp.outputs.at(task.name),
                                  batch_targets(dataset, chunk, task));
      const double lv = loss->value.item();
      if (!std::isfinite(lv))
        throw TrainingDivergence("phase 1 diverged: non-finite loss at epoch " +
                                 std::to_string(epoch) + " (task " + task.name + ")");
      loss_sum += lv * (double)chunk.size();
      seen += (long long)chunk.size();
      auto grads = param_gradients(loss, model.params);
      clip_gradients(grads);
      optimizer.step(model, grads, index);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / (double)seen;
    rec.task_losses[task.name] = *rec.train_loss;
    rec.penalty = penalty(model, index);
    rec.percent_sparsity = sparsity_stats(model, index).percent_zero_parameters;
    if (epoch % config.eval_every == 0 || epoch == config.epochs)
      rec.val_metrics = val_metrics_map(model, dataset, tasks);
    history.push_back(rec);
  }

  SparsityPattern pattern = extract_pattern(model, index);
  pattern.task_name = task.name;
  Phase1Result result{std::move(model), std::move(pattern), std::move(history),
                      std::move(index)};
  return result;
}

Phase2Result train_phase2(ModelGraph model, const std::vector<TaskSpec>& tasks,
                          const Dataset& dataset, const TrainConfig& config, uint64_t seed) {
  config.validate(tasks.size());
  if (config.phase != 2) throw std::invalid_argument("train_phase2: config.phase must be 2");
  if (dataset.train_idx.empty()) throw std::invalid_argument("train_phase2: empty train split");
  for (const TaskSpec& t : tasks) {
    t.validate();
    if (model.taps.find(t.name) == model.taps.end())
      throw std::invalid_argument("train_phase2: model has no head for task " + t.name);
  }

  // learnable log-variances, one per task, neutral start (sigma = 1)
  UncertaintyWeights weights;
  for (const TaskSpec& t : tasks) {
    model.params.push_back(make_parameter("loss_weight." + t.name, ParamRole::loss_weight, -1,
                                          false, Tensor::scalar(0.0)));
    weights.tasks.push_back(t.name);
  }
  for (const TaskSpec& t : tasks)
    for (auto& p : model.params)
      if (p.id == "loss_weight." + t.name) weights.etas.push_back(&p);

  GroupIndex index = build_channel_groups(model, 0.0);
  ProxOptimizer optimizer(config.optimizer);

  History history;
  {
    EpochRecord rec;
    rec.epoch = 0;
    for (size_t i = 0; i < tasks.size(); ++i) rec.sigma_sq[tasks[i].name] = weights.sigma_sq(i);
    rec.val_metrics = val_metrics_map(model, dataset, tasks);
    history.push_back(rec);
  }

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::vector<int> order = shuffled_indices(dataset.train_idx, seed, epoch);
    double loss_sum = 0.0;
    long long seen = 0;
    std::map<std::string, double> task_loss_sum;
    for (size_t start = 0; start < order.size(); start += (size_t)config.optimizer.batch_size) {
      std::vector<int> chunk(
          order.begin() + (long)start,
          order.begin() + (long)std::min(order.size(), start + (size_t)config.optimizer.batch_size));
      ForwardPass fp = model.forward(batch_images(dataset, chunk));
      std::map<std::string, NodePtr> task_losses;
      for (const TaskSpec& t : tasks)
        task_losses[t.name] =
            compute_loss(t.loss, fp.outputs.at(t.name), batch_targets(dataset, chunk, t));
      NodePtr loss = combined_loss(task_losses, weights);
      const double lv = loss->value.item();
      if (!std::isfinite(lv))
        throw TrainingDivergence("phase 2 diverged: non-finite combined loss at epoch " +
                                 std::to_string(epoch));
      loss_sum += lv * (double)chunk.size();
      seen += (long long)chunk.size();
      for (const TaskSpec& t : tasks)
        task_loss_sum[t.name] += task_losses.at(t.name)->value.item() * (double)chunk.size();
      auto grads = param_gradients(loss, model.params);
      clip_gradients(grads);
      optimizer.step(model, grads, index);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / (double)seen;
    for (const auto& [name, sum] : task_loss_sum) rec.task_losses[name] = sum / (double)seen;
    for (size_t i = 0; i < tasks.size(); ++i) rec.sigma_sq[tasks[i].name] = weights.sigma_sq(i);
    if (epoch % config.eval_every == 0 || epoch == config.epochs)
      rec.val_metrics = val_metrics_map(model, dataset, tasks);
    history.push_back(rec);
  }

  MetricReport report = evaluate(model, dataset, dataset.val_idx, tasks);
  Phase2Result result{std::move(model), std::move(report), std::move(history)};
  return result;
}

}  // namespace lomt
