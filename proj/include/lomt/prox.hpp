#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lomt/model.hpp"

namespace lomt {

// --------------------------------------------------------- channel groups

/// One channel-wise group: a conv layer's output channel c owns that
/// channel's kernel weights plus its bias entry.
struct ParameterGroup {
  int layer_id = 0;
  int channel = 0;
  int weight_param = 0;  // index into ModelGraph::params
  int bias_param = 0;
  int n_g = 0;
  double lambda_g = 0.0;
};

struct GroupIndex {
  double lambda = 0.0;
  std::vector<ParameterGroup> groups;
  std::set<int> covered_layers;
  bool empty_warning = false;

  int G() const { return (int)groups.size(); }

  /// Throws if the model's penalizable parameters no longer match the
  /// snapshot this index was built from.
  void check_fresh(const ModelGraph& model) const;

  std::vector<std::pair<std::string, int>> fingerprint;  // (param id, numel)
};

/// One group per (penalizable conv layer, output channel); lambda_g =
/// lambda * sqrt(N_g). Empty model yields G = 0 with the warning flag set.
GroupIndex build_channel_groups(const ModelGraph& model, double lambda);

/// R = sum_g lambda_g * ||theta_g||_2.
double penalty(const ModelGraph& model, const GroupIndex& index);

/// Block soft-thresholding: argmin_x 1/2 ||x - v||^2 + t ||x||_2.
/// Returns (1 - t/||v||) v when ||v|| > t, the exact zero vector otherwise.
std::vector<double> prox_group(const std::vector<double>& values, double threshold);

// ---------------------------------------------------------------- optimizer

struct OptimizerConfig {
  double lambda = 0.0;    // sparsity strength, >= 0
  double alpha = 0.05;    // step size, > 0
  int epochs = 30;
  int batch_size = 8;
  uint64_t seed = 0;
  double momentum = 0.0;  // applied to non-penalized parameters only

  void validate() const;
};

struct SparsityStats {
  double percent_zero_parameters = 0.0;
  std::map<int, int> zero_channels_per_layer;
  std::vector<uint8_t> per_group_zero_flags;  // group order
};

/// Proximal SGD. Penalizable groups take theta <- prox(theta - alpha*grad,
/// alpha*lambda_g); everything else takes a plain (optionally momentum) step.
class ProxOptimizer {
 public:
  explicit ProxOptimizer(OptimizerConfig cfg);

  void step(ModelGraph& model, const std::map<std::string, Tensor>& grads,
            const GroupIndex& index);

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor> velocity_;
};

/// Single momentum-free step (the Eq.-2 update).
void prox_step(ModelGraph& model, const std::map<std::string, Tensor>& grads,
               const GroupIndex& index, const OptimizerConfig& config);

SparsityStats sparsity_stats(const ModelGraph& model, const GroupIndex& index);

}  // namespace lomt
