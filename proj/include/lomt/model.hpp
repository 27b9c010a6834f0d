#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lomt/autodiff.hpp"

namespace lomt {

// ----------------------------------------------------------------- specs

struct BlockSpec {
  int width = 16;
  int kernel = 3;
  int dilation = 1;
  bool penalizable = true;
};

/// Constant-width residual backbone. Each block holds two convs; each conv is
/// its own residual summand (h <- h + conv(relu(h))), so zeroing a conv's
/// weights and bias leaves the stream untouched and a fully zeroed block is
/// the identity map.
struct BackboneSpec {
  int input_channels = 1;
  std::vector<BlockSpec> blocks;

  /// blocks of equal width, kernel 3, dilations 1,1,2,2,4,4,...
  static BackboneSpec standard(int block_count, int width, int input_channels = 1);

  int conv_layers() const { return 2 * (int)blocks.size(); }
  void validate() const;
};

enum class HeadKind { dense_decoder, classifier };
enum class MetricKind { iou, mae, cosine_similarity, accuracy };

HeadKind head_kind_from(const std::string& name);
std::string head_kind_name(HeadKind kind);
MetricKind metric_kind_from(const std::string& name);
std::string metric_kind_name(MetricKind kind);

struct HeadSpec {
  HeadKind kind = HeadKind::dense_decoder;
  std::string task_name;
  int out_channels = 1;  // decoder channels / classifier logits
  LossKind loss = LossKind::mse;
  MetricKind metric = MetricKind::mae;
};

// ------------------------------------------------------------ model graph

struct ConvUnit {
  int layer_id = 0;  // 0-based position among backbone conv layers
  int width = 16;
  int kernel = 3;
  int dilation = 1;
  bool penalizable = true;
};

struct ForwardPass {
  NodePtr input;
  std::vector<NodePtr> stream;              // stream[i] = residual stream after unit i
  std::map<std::string, NodePtr> outputs;   // task -> prediction
};

struct ModelGraph {
  int input_channels = 1;
  int width = 16;
  uint64_t init_seed = 0;
  std::vector<ConvUnit> units;
  std::vector<HeadSpec> heads;
  std::map<std::string, int> taps;  // task -> layer_id
  std::vector<Parameter> params;    // backbone unit pairs first, then head params

  /// Weight/bias parameter of backbone conv unit i.
  Parameter& unit_weight(int i) { return params[(size_t)(2 * i)]; }
  Parameter& unit_bias(int i) { return params[(size_t)(2 * i + 1)]; }
  const Parameter& unit_weight(int i) const { return params[(size_t)(2 * i)]; }
  const Parameter& unit_bias(int i) const { return params[(size_t)(2 * i + 1)]; }

  /// Runs the backbone and every head on a [N,Cin,H,W] batch.
  ForwardPass forward(const Tensor& batch) const;

  std::vector<const Parameter*> backbone_params() const;
  std::vector<const Parameter*> head_params(const std::string& task) const;
  long long backbone_param_count() const;
  long long total_param_count() const;

  /// Deep copy with fresh leaves (same values).
  ModelGraph clone() const;
};

// ------------------------------------------------------------- operations

/// Backbone-only graph with deterministic seed-derived initialization.
ModelGraph build_backbone(const BackboneSpec& spec, uint64_t seed);

/// Wires heads at tap layers and drops backbone conv units deeper than the
/// deepest tap. Head parameters are initialized from the backbone's seed and
/// the task name, so identical specs and seed give identical models no matter
/// the attachment order.
ModelGraph assemble_model(const ModelGraph& backbone,
                          const std::vector<std::pair<HeadSpec, int>>& attachments);

}  // namespace lomt
