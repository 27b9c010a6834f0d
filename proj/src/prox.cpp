#include "lomt/prox.hpp"

#include <cmath>
#include <stdexcept>

namespace lomt {

namespace {

struct GroupSpan {
  double* weights;  // contiguous channel slice
  int count;
  double* bias;  // single entry
};

struct ConstGroupSpan {
  const double* weights;
  int count;
  const double* bias;
};

GroupSpan group_span(ModelGraph& model, const ParameterGroup& g) {
  Tensor& w = model.params[(size_t)g.weight_param].values();
  Tensor& b = model.params[(size_t)g.bias_param].values();
  const int per_channel = w.numel() / w.dim(0);
  return {w.v.data() + (size_t)g.channel * per_channel, per_channel,
          b.v.data() + (size_t)g.channel};
}

ConstGroupSpan group_span(const ModelGraph& model, const ParameterGroup& g) {
  const Tensor& w = model.params[(size_t)g.weight_param].values();
  const Tensor& b = model.params[(size_t)g.bias_param].values();
  const int per_channel = w.numel() / w.dim(0);
  return {w.v.data() + (size_t)g.channel * per_channel, per_channel,
          b.v.data() + (size_t)g.channel};
}

double group_norm(const ModelGraph& model, const ParameterGroup& g) {
  ConstGroupSpan s = group_span(model, g);
  double acc = 0.0;
  for (int i = 0; i < s.count; ++i) acc += s.weights[i] * s.weights[i];
  acc += (*s.bias) * (*s.bias);
  return std::sqrt(acc);
}

}  // namespace

void GroupIndex::check_fresh(const ModelGraph& model) const {
  size_t k = 0;
  for (const auto& p : model.params) {
    if (!(p.role == ParamRole::backbone && p.penalizable)) continue;
    if (k >= fingerprint.size() || fingerprint[k].first != p.id ||
        fingerprint[k].second != p.values().numel())
      throw std::runtime_error("group index is stale: parameter " + p.id +
                               " no longer matches the indexed model");
    ++k;
  }
  if (k != fingerprint.size())
    throw std::runtime_error("group index is stale: penalizable parameter set changed");
}

GroupIndex build_channel_groups(const ModelGraph& model, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
  GroupIndex index;
  index.lambda = lambda;
  for (size_t pi = 0; pi < model.params.size(); ++pi) {
    const Parameter& p = model.params[pi];
    if (!(p.role == ParamRole::backbone && p.penalizable)) continue;
    index.fingerprint.emplace_back(p.id, p.values().numel());
    if (p.values().rank() != 4) continue;  // bias handled with its weight
    const Tensor& w = p.values();
    const int C = w.dim(0);
    const int per_channel = w.numel() / C;
    for (int c = 0; c < C; ++c) {
      ParameterGroup g;
      g.layer_id = p.layer_id;
      g.channel = c;
      g.weight_param = (int)pi;
      g.bias_param = (int)pi + 1;  // bias follows its weight in the registry
      g.n_g = per_channel + 1;
      g.lambda_g = lambda * std::sqrt((double)g.n_g);
      index.groups.push_back(g);
      index.covered_layers.insert(p.layer_id);
    }
  }
  index.empty_warning = index.groups.empty();
  return index;
}

double penalty(const ModelGraph& model, const GroupIndex& index) {
  index.check_fresh(model);
  double r = 0.0;
  for (const auto& g : index.groups) r += g.lambda_g * group_norm(model, g);
  return r;
}

std::vector<double> prox_group(const std::vector<double>& values, double threshold) {
  if (threshold < 0.0) throw std::invalid_argument("prox_group: threshold must be >= 0");
  double acc = 0.0;
  for (double v : values) acc += v * v;
  const double norm = std::sqrt(acc);
  if (norm > threshold) {
    const double s = 1.0 - threshold / norm;
    std::vector<double> out(values);
    for (double& v : out) v *= s;
    return out;
  }
  return std::vector<double>(values.size(), 0.0);
}

void OptimizerConfig::validate() const {
  if (lambda < 0.0) throw std::invalid_argument("optimizer: lambda must be >= 0");
  if (alpha <= 0.0) throw std::invalid_argument("optimizer: alpha must be > 0");
  if (epochs < 0 || batch_size < 1) throw std::invalid_argument("optimizer: bad epochs/batch_size");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("optimizer: bad momentum");
}

ProxOptimizer::ProxOptimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void ProxOptimizer::step(ModelGraph& model, const std::map<std::string, Tensor>& grads,
                         const GroupIndex& index) {
  index.check_fresh(model);
  const double alpha = cfg_.alpha;

  for (auto& p : model.params) {
    auto it = grads.find(p.id);
    if (it == grads.end())
      throw std::runtime_error("prox_step: missing gradient for parameter " + p.id);
    const Tensor& g = it->second;
    if (!g.same_shape(p.values()))
      throw std::runtime_error("prox_step: gradient shape mismatch for " + p.id);
    if (!g.all_finite())
      throw std::runtime_error("prox_step: non-finite gradient for " + p.id);

    Tensor& theta = p.values();
    const bool penalized = p.role == ParamRole::backbone && p.penalizable;
    if (!penalized && cfg_.momentum > 0.0) {
      auto [vit, fresh] = velocity_.try_emplace(p.id, Tensor::zeros(theta.shape));
      Tensor& vel = vit->second;
      for (int i = 0; i < theta.numel(); ++i) {
        vel[(size_t)i] = cfg_.momentum * vel[(size_t)i] + g[(size_t)i];
        theta[(size_t)i] -= alpha * vel[(size_t)i];
      }
    } else {
      for (int i = 0; i < theta.numel(); ++i) theta[(size_t)i] -= alpha * g[(size_t)i];
    }
  }

  for (const auto& g : index.groups) {
    GroupSpan s = group_span(model, g);
    double acc = 0.0;
    for (int i = 0; i < s.count; ++i) acc += s.weights[i] * s.weights[i];
    acc += (*s.bias) * (*s.bias);
    const double norm = std::sqrt(acc);
    const double t = alpha * g.lambda_g;
    if (norm > t) {
      const double sc = 1.0 - t / norm;
      for (int i = 0; i < s.count; ++i) s.weights[i] *= sc;
      *s.bias *= sc;
    } else {
      for (int i = 0; i < s.count; ++i) s.weights[i] = 0.0;
      *s.bias = 0.0;
    }
  }
}

void prox_step(ModelGraph& model, const std::map<std::string, Tensor>& grads,
               const GroupIndex& index, const OptimizerConfig& config) {
  OptimizerConfig cfg = config;
  cfg.momentum = 0.0;
  ProxOptimizer(cfg).step(model, grads, index);
}

SparsityStats sparsity_stats(const ModelGraph& model, const GroupIndex& index) {
  index.check_fresh(model);
  SparsityStats stats;
  long long total = 0, zero = 0;
  for (int layer : index.covered_layers) stats.zero_channels_per_layer[layer] = 0;
  for (const auto& g : index.groups) {
    ConstGroupSpan s = group_span(model, g);
    bool all_zero = *s.bias == 0.0;
    for (int i = 0; i < s.count; ++i) {
      ++total;
      if (s.weights[i] == 0.0)
        ++zero;
      else
        all_zero = false;
    }
    ++total;
    if (*s.bias == 0.0) ++zero;
    stats.per_group_zero_flags.push_back(all_zero ? 1 : 0);
    if (all_zero) ++stats.zero_channels_per_layer[g.layer_id];
  }
  stats.percent_zero_parameters = total == 0 ? 0.0 : 100.0 * (double)zero / (double)total;
  return stats;
}

}  // namespace lomt
