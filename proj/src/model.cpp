#include "lomt/model.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "lomt/rng.hpp"

namespace lomt {

namespace {

constexpr uint64_t kBackboneStream = 0x62616b62;  // distinct rng streams
constexpr uint64_t kHeadStream = 0x68656164;

uint64_t fnv64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.v) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace

BackboneSpec BackboneSpec::standard(int block_count, int width, int input_channels) {
  BackboneSpec spec;
  spec.input_channels = input_channels;
  int dilation = 1;
  for (int b = 0; b < block_count; ++b) {
    if (b > 0 && b % 2 == 0) dilation = std::min(dilation * 2, 4);
    spec.blocks.push_back({width, 3, dilation, true});
  }
  return spec;
}

void BackboneSpec::validate() const {
  if (blocks.empty()) throw std::invalid_argument("backbone spec: no blocks");
  if (input_channels < 1) throw std::invalid_argument("backbone spec: bad input channels");
  const int w = blocks.front().width;
  for (const auto& b : blocks) {
    if (b.width != w)
      throw std::invalid_argument("backbone spec: width mismatch across an identity skip (" +
                                  std::to_string(b.width) + " vs " + std::to_string(w) + ")");
    if (b.kernel < 1 || b.kernel % 2 == 0)
      throw std::invalid_argument("backbone spec: kernel must be odd");
    if (b.dilation < 1) throw std::invalid_argument("backbone spec: dilation must be >= 1");
  }
}

HeadKind head_kind_from(const std::string& name) {
  if (name == "dense-decoder") return HeadKind::dense_decoder;
  if (name == "classifier") return HeadKind::classifier;
  throw std::invalid_argument("unknown head kind: " + name);
}

std::string head_kind_name(HeadKind kind) {
  return kind == HeadKind::dense_decoder ? "dense-decoder" : "classifier";
}

MetricKind metric_kind_from(const std::string& name) {
  if (name == "iou") return MetricKind::iou;
  if (name == "mae") return MetricKind::mae;
  if (name == "cosine-similarity") return MetricKind::cosine_similarity;
  if (name == "accuracy") return MetricKind::accuracy;
  throw std::invalid_argument("unknown metric kind: " + name);
}

std::string metric_kind_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::iou: return "iou";
    case MetricKind::mae: return "mae";
    case MetricKind::cosine_similarity: return "cosine-similarity";
    case MetricKind::accuracy: return "accuracy";
  }
  throw std::logic_error("bad metric kind");
}

// ------------------------------------------------------------ construction

ModelGraph build_backbone(const BackboneSpec& spec, uint64_t seed) {
  spec.validate();
  ModelGraph m;
  m.input_channels = spec.input_channels;
  m.width = spec.blocks.front().width;
  m.init_seed = seed;
  int layer = 0;
  for (const auto& block : spec.blocks) {
    for (int j = 0; j < 2; ++j) {
      ConvUnit u;
      u.layer_id = layer;
      u.width = block.width;
      u.kernel = block.kernel;
      u.dilation = block.dilation;
      u.penalizable = block.penalizable;
      m.units.push_back(u);

      Rng rng(mix_seed(mix_seed(seed, kBackboneStream), (uint64_t)layer));
      const int fan_in = u.width * u.kernel * u.kernel;
      // He scaled down by sqrt(2 * depth): without normalization layers the
      // residual stream's variance would otherwise double per unit
      const double stddev =
          std::sqrt(2.0 / fan_in) / std::sqrt(2.0 * (double)spec.conv_layers());
      const std::string base = "backbone.conv" + std::to_string(layer);
      m.params.push_back(make_parameter(
          base + ".weight", ParamRole::backbone, layer, u.penalizable,
          normal_init({u.width, u.width, u.kernel, u.kernel}, stddev, rng)));
      // biases join their channel's group, so they start nonzero like the
      // weights; a fresh model then reports exactly 0% parameter sparsity
      Tensor bias({u.width});
      for (double& v : bias.v) v = rng.uniform(0.005, 0.02) * (rng.below(2) ? 1.0 : -1.0);
      m.params.push_back(
          make_parameter(base + ".bias", ParamRole::backbone, layer, u.penalizable, bias));
      ++layer;
    }
  }
  return m;
}

namespace {

void append_head_params(ModelGraph& m, const HeadSpec& head) {
  Rng rng(mix_seed(mix_seed(m.init_seed, kHeadStream), fnv64(head.task_name)));
  const int C = m.width;
  const std::string base = "head." + head.task_name;
  if (head.kind == HeadKind::dense_decoder) {
    m.params.push_back(make_parameter(base + ".conv1.weight", ParamRole::head, -1, false,
                                      normal_init({C, C, 3, 3}, std::sqrt(2.0 / (C * 9)), rng)));
    m.params.push_back(
        make_parameter(base + ".conv1.bias", ParamRole::head, -1, false, Tensor::zeros({C})));
    m.params.push_back(make_parameter(
        base + ".conv2.weight", ParamRole::head, -1, false,
        normal_init({head.out_channels, C, 3, 3}, std::sqrt(2.0 / (C * 9)), rng)));
    m.params.push_back(make_parameter(base + ".conv2.bias", ParamRole::head, -1, false,
                                      Tensor::zeros({head.out_channels})));
  } else {
    m.params.push_back(make_parameter(base + ".fc1.weight", ParamRole::head, -1, false,
                                      normal_init({C, C}, std::sqrt(2.0 / C), rng)));
    m.params.push_back(
        make_parameter(base + ".fc1.bias", ParamRole::head, -1, false, Tensor::zeros({C})));
    m.params.push_back(make_parameter(base + ".fc2.weight", ParamRole::head, -1, false,
                                      normal_init({head.out_channels, C}, std::sqrt(2.0 / C), rng)));
    m.params.push_back(make_parameter(base + ".fc2.bias", ParamRole::head, -1, false,
                                      Tensor::zeros({head.out_channels})));
  }
}

}  // namespace

ModelGraph assemble_model(const ModelGraph& backbone,
                          const std::vector<std::pair<HeadSpec, int>>& attachments) {
  if (attachments.empty()) throw std::invalid_argument("assemble_model: need >= 1 attachment");
  const int L = (int)backbone.units.size();
  std::set<std::string> names;
  int max_tap = 0;
  for (const auto& [head, tap] : attachments) {
    if (tap < 0 || tap >= L)
      throw std::invalid_argument("assemble_model: unknown tap layer " + std::to_string(tap) +
                                  " for task " + head.task_name);
    if (!names.insert(head.task_name).second)
      throw std::invalid_argument("assemble_model: duplicate task name " + head.task_name);
    max_tap = std::max(max_tap, tap);
  }

  ModelGraph m;
  m.input_channels = backbone.input_channels;
  m.width = backbone.width;
  m.init_seed = backbone.init_seed;
  m.units.assign(backbone.units.begin(), backbone.units.begin() + max_tap + 1);
  for (int i = 0; i <= max_tap; ++i) {
    Parameter w = backbone.unit_weight(i);
    Parameter b = backbone.unit_bias(i);
    w.node = make_leaf(w.values(), true);  // fresh leaves, same values
    b.node = make_leaf(b.values(), true);
    m.params.push_back(std::move(w));
    m.params.push_back(std::move(b));
  }
  for (const auto& [head, tap] : attachments) {
    m.heads.push_back(head);
    m.taps[head.task_name] = tap;
    append_head_params(m, head);
  }
  return m;
}

// ----------------------------------------------------------------- forward

ForwardPass ModelGraph::forward(const Tensor& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != input_channels)
    throw std::invalid_argument("forward: expected [N," + std::to_string(input_channels) +
                                ",H,W] input, got " + batch.shape_str());
  ForwardPass fp;
  fp.input = make_const(batch);
  NodePtr h = channel_tile(fp.input, width);
  for (size_t i = 0; i < units.size(); ++i) {
    const ConvUnit& u = units[i];
    const int pad = u.dilation * (u.kernel - 1) / 2;
    NodePtr body = conv2d(relu(h), unit_weight((int)i).node, unit_bias((int)i).node, 1, pad,
                          u.dilation);
    h = residual_add(h, body);
    fp.stream.push_back(h);
  }

  size_t pi = 2 * units.size();
  for (const auto& head : heads) {
    const NodePtr& src = fp.stream[(size_t)taps.at(head.task_name)];
    NodePtr out;
    if (head.kind == HeadKind::dense_decoder) {
      const Parameter& w1 = params[pi], &b1 = params[pi + 1];
      const Parameter& w2 = params[pi + 2], &b2 = params[pi + 3];
      NodePtr hh = relu(conv2d(src, w1.node, b1.node, 1, 1, 1));
      out = conv2d(hh, w2.node, b2.node, 1, 1, 1);
      // stream resolution equals input resolution, so the upsample to input
      // size is a factor-1 no-op and is elided
    } else {
      const Parameter& w1 = params[pi], &b1 = params[pi + 1];
      const Parameter& w2 = params[pi + 2], &b2 = params[pi + 3];
      NodePtr hh = relu(affine(global_avg_pool(src), w1.node, b1.node));
      out = affine(hh, w2.node, b2.node);
    }
    fp.outputs[head.task_name] = out;
    pi += 4;
  }
  return fp;
}

// ----------------------------------------------------------------- helpers

std::vector<const Parameter*> ModelGraph::backbone_params() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params)
    if (p.role == ParamRole::backbone) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ModelGraph::head_params(const std::string& task) const {
  std::vector<const Parameter*> out;
  const std::string prefix = "head." + task + ".";
  for (const auto& p : params)
    if (p.role == ParamRole::head && p.id.rfind(prefix, 0) == 0) out.push_back(&p);
  return out;
}

long long ModelGraph::backbone_param_count() const {
  long long n = 0;
  for (const auto& p : params)
    if (p.role == ParamRole::backbone) n += p.values().numel();
  return n;
}

long long ModelGraph::total_param_count() const {
  long long n = 0;
  for (const auto& p : params) n += p.values().numel();
  return n;
}

ModelGraph ModelGraph::clone() const {
  ModelGraph m = *this;
  for (auto& p : m.params) p.node = make_leaf(p.values(), true);
  return m;
}

}  // namespace lomt
