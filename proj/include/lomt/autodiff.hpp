#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "lomt/tensor.hpp"

namespace lomt {

class Node;
using NodePtr = std::shared_ptr<Node>;

/// Accumulates d(loss)/d(input_i) into grad_in[i]. A null slot means that
/// input does not require gradients and must be skipped.
using BackwardFn = std::function<void(const Node& self, const Tensor& grad_out,
                                      const std::vector<Tensor*>& grad_in)>;

/// One tape node. Values are immutable after construction; parameter leaves
/// are mutated only through the optimizer's explicit update step.
class Node {
 public:
  Tensor value;
  std::vector<NodePtr> inputs;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

NodePtr make_leaf(Tensor value, bool requires_grad);
NodePtr make_const(Tensor value);

// ---------------------------------------------------------------- layer ops

/// Cross-correlation with bias. Output H' = floor((H + 2p - d(kH-1) - 1)/s) + 1.
NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride,
               int padding, int dilation);
NodePtr relu(const NodePtr& x);
NodePtr residual_add(const NodePtr& a, const NodePtr& b);
NodePtr avg_pool(const NodePtr& x, int kernel, int stride);
/// [N,C,H,W] -> [N,C]
NodePtr global_avg_pool(const NodePtr& x);
NodePtr nearest_upsample(const NodePtr& x, int factor);
/// x: [N,F], w: [O,F], b: [O] -> [N,O]
NodePtr affine(const NodePtr& x, const NodePtr& w, const NodePtr& b);
/// Parameter-free lift: [N,Cin,H,W] -> [N,C,H,W], channel c copies input
/// channel c % Cin.
NodePtr channel_tile(const NodePtr& x, int channels);

// ------------------------------------------------------ elementwise & misc

NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& x, double c);
NodePtr sum(const NodePtr& x);

// ------------------------------------------------------------------ losses

enum class LossKind { mse, softmax_ce, sigmoid_bce, cosine };

LossKind loss_kind_from(const std::string& name);
std::string loss_kind_name(LossKind kind);

NodePtr mse_loss(const NodePtr& pred, const Tensor& target);
/// pred [N,K,...], target [N,...] holding class indices.
NodePtr softmax_ce_loss(const NodePtr& pred, const Tensor& target);
NodePtr sigmoid_bce_loss(const NodePtr& pred, const Tensor& target);
/// 1 - mean cosine similarity along channel axis 1. Zero-norm target vectors
/// are an error; prediction norms are clamped at 1e-12.
NodePtr cosine_loss(const NodePtr& pred, const Tensor& target);

NodePtr compute_loss(LossKind kind, const NodePtr& pred, const Tensor& target);

/// sum_t ( L_t * exp(-eta_t) / 2 + eta_t / 2 ) with sigma_t^2 = exp(eta_t).
NodePtr uncertainty_combine(const std::vector<NodePtr>& task_losses,
                            const std::vector<NodePtr>& etas);

// -------------------------------------------------------------- parameters

enum class ParamRole { backbone, head, loss_weight };

ParamRole param_role_from(const std::string& name);
std::string param_role_name(ParamRole role);

struct Parameter {
  std::string id;
  ParamRole role = ParamRole::head;
  int layer_id = -1;  // backbone only
  bool penalizable = false;
  NodePtr node;

  Tensor& values() { return node->value; }
  const Tensor& values() const { return node->value; }
};

/// Validates the role/layer_id/penalizable invariants and rejects non-finite
/// initial values.
Parameter make_parameter(std::string id, ParamRole role, int layer_id,
                         bool penalizable, Tensor init);

// ------------------------------------------------------------ reverse mode

using NodeGrads = std::unordered_map<const Node*, Tensor>;

/// Reverse-mode gradients of a scalar loss for every reachable node that
/// requires gradients.
NodeGrads backprop(const NodePtr& loss);

/// Gradient per parameter id; parameters unreachable from the loss get a
/// zero tensor of matching shape.
std::map<std::string, Tensor> param_gradients(const NodePtr& loss,
                                              const std::vector<Parameter>& params);

/// Max over all parameter entries of |analytic - central difference| /
/// max(1e-12, |central difference|). rebuild_loss must rebuild the forward
/// tape from the parameters' current values.
double finite_diff_check(const std::function<NodePtr()>& rebuild_loss,
                         const std::vector<Parameter*>& params, double eps);

}  // namespace lomt
