#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lomt/data.hpp"
#include "lomt/model.hpp"
#include "lomt/prox.hpp"
#include "lomt/sparsity.hpp"

namespace lomt {

// ------------------------------------------------------------------- types

struct TaskSpec {
  std::string name;
  HeadKind head = HeadKind::dense_decoder;
  LossKind loss = LossKind::mse;
  MetricKind metric = MetricKind::mae;
  std::string target_key;  // edge | segmentation | distance | label
  int out_channels = 1;

  HeadSpec head_spec() const;
  void validate() const;
};

/// Built-in task definitions for the synthetic suite.
TaskSpec standard_task(const std::string& name);

/// Learnable log-variances; sigma_t^2 = exp(eta_t) stays positive with eta
/// unconstrained.
struct UncertaintyWeights {
  std::vector<std::string> tasks;
  std::vector<Parameter*> etas;  // loss-weight parameters inside the model

  double sigma_sq(size_t i) const { return std::exp(etas[i]->values()[0]); }
};

struct TrainConfig {
  OptimizerConfig optimizer;
  int epochs = 30;
  int eval_every = 5;
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
  int phase = 1;

  void validate(size_t task_count) const;
};

struct EpochRecord {
  int epoch = 0;
  std::optional<double> train_loss;  // absent for the pre-training record
  std::map<std::string, double> task_losses;
  double penalty = 0.0;
  double percent_sparsity = 0.0;
  std::map<std::string, double> sigma_sq;
  std::optional<std::map<std::string, double>> val_metrics;
};

using History = std::vector<EpochRecord>;

struct MetricReport {
  // task -> (metric kind, value)
  std::map<std::string, std::pair<MetricKind, double>> values;
};

struct RunAggregate {
  struct Entry {
    MetricKind metric;
    double mean = 0.0;
    double stddev = 0.0;
    int runs = 0;
  };
  std::map<std::string, Entry> per_task;
};

struct TrainingDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// -------------------------------------------------------------- operations

/// sum_t ( L_t / (2 sigma_t^2) + log sigma_t ).
NodePtr combined_loss(const std::map<std::string, NodePtr>& task_losses,
                      const UncertaintyWeights& weights);

struct Phase1Result {
  ModelGraph model;
  SparsityPattern pattern;
  History history;
  GroupIndex index;
};

/// Sparse single-task training: prox steps over seed-shuffled minibatches.
Phase1Result train_phase1(const TaskSpec& task, const Dataset& dataset,
                          const BackboneSpec& backbone, const TrainConfig& config,
                          uint64_t seed);

struct Phase2Result {
  ModelGraph model;
  MetricReport report;
  History history;
};

/// Multi-task training of an assembled model under the uncertainty-weighted
/// combined loss. No sparsity penalty (lambda must be 0).
Phase2Result train_phase2(ModelGraph model, const std::vector<TaskSpec>& tasks,
                          const Dataset& dataset, const TrainConfig& config,
                          uint64_t seed);

/// Validation metrics over a sample index set. IoU accumulates per-class
/// intersection/union over the whole split; classes with an empty union are
/// excluded from the mean.
MetricReport evaluate(const ModelGraph& model, const Dataset& dataset,
                      const std::vector<int>& indices, const std::vector<TaskSpec>& tasks);

/// Per-task mean and unbiased standard deviation over >= 2 runs with
/// identical task sets.
RunAggregate aggregate_runs(const std::vector<MetricReport>& reports);

/// Metric over one prediction/target batch (same definitions evaluate uses).
double single_metric(MetricKind kind, const Tensor& pred, const Tensor& target);

/// Higher-is-better orientation for comparing models on a metric.
double metric_score(MetricKind kind, double value);

// ----------------------------------------------------------------- helpers

Tensor batch_images(const Dataset& dataset, const std::vector<int>& indices);
Tensor batch_targets(const Dataset& dataset, const std::vector<int>& indices,
                     const TaskSpec& task);

}  // namespace lomt
