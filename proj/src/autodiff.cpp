#include "lomt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace lomt {

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> inputs, BackwardFn backward,
                  const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  n->op = op;
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward = std::move(backward);
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

void check_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " +
                                std::to_string(rank) + ", got " + t.shape_str());
}

int out_extent(int in, int pad, int dilation, int k, int stride) {
  return (in + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
}

}  // namespace

NodePtr make_leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  if (!value.all_finite()) throw std::invalid_argument("leaf tensor has non-finite values");
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->op = "leaf";
  return n;
}

NodePtr make_const(Tensor value) { return make_leaf(std::move(value), false); }

// ---------------------------------------------------------------- conv2d

NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride,
               int padding, int dilation) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  const Tensor& bv = b->value;
  check_rank(xv, 4, "conv2d input");
  check_rank(wv, 4, "conv2d weight");
  if (stride < 1 || padding < 0 || dilation < 1)
    throw std::invalid_argument("conv2d: bad stride/padding/dilation");
  const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  if (wv.dim(1) != Ci)
    throw std::invalid_argument("conv2d: weight expects " + std::to_string(wv.dim(1)) +
                                " input channels, input has " + std::to_string(Ci));
  if (bv.numel() != Co) throw std::invalid_argument("conv2d: bias size mismatch");
  const int Ho = out_extent(H, padding, dilation, KH, stride);
  const int Wo = out_extent(W, padding, dilation, KW, stride);
  if (Ho < 1 || Wo < 1)
    throw std::invalid_argument("conv2d: non-positive output extent for input " +
                                xv.shape_str());

  Tensor out({N, Co, Ho, Wo});
  const double* X = xv.v.data();
  const double* Wt = wv.v.data();
  double* O = out.v.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int co = 0; co < Co; ++co) {
      double* o = O + ((size_t)(n * Co + co)) * Ho * Wo;
      const double bias = bv.v[(size_t)co];
      for (int i = 0; i < Ho * Wo; ++i) o[i] = bias;
      for (int ci = 0; ci < Ci; ++ci) {
        const double* xc = X + ((size_t)(n * Ci + ci)) * H * W;
        const double* wc = Wt + ((size_t)(co * Ci + ci)) * KH * KW;
        for (int kh = 0; kh < KH; ++kh) {
          for (int kw = 0; kw < KW; ++kw) {
            const double wvv = wc[kh * KW + kw];
            if (wvv == 0.0) continue;
            const int ih0 = kh * dilation - padding;
            const int iw0 = kw * dilation - padding;
            // valid ow range: 0 <= ow*stride + iw0 < W
            int ow_lo = iw0 < 0 ? (-iw0 + stride - 1) / stride : 0;
            int ow_hi = (W - 1 - iw0) / stride;
            if (ow_hi > Wo - 1) ow_hi = Wo - 1;
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * stride + ih0;
              if (ih < 0 || ih >= H) continue;
              const double* xr = xc + (size_t)ih * W + iw0;
              double* orow = o + (size_t)oh * Wo;
              if (stride == 1) {
                for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wvv * xr[ow];
              } else {
                for (int ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wvv * xr[ow * stride];
              }
            }
          }
        }
      }
    }
  }

  BackwardFn back = [stride, padding, dilation](const Node& self, const Tensor& g,
                                                const std::vector<Tensor*>& gin) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
    const int Ho = g.dim(2), Wo = g.dim(3);
    const double* G = g.v.data();
    const double* X = xv.v.data();
    const double* Wt = wv.v.data();

    if (gin[0]) {
      double* DX = gin[0]->v.data();
#pragma omp parallel for collapse(2) schedule(static)
      for (int n = 0; n < N; ++n) {
        for (int ci = 0; ci < Ci; ++ci) {
          double* dxc = DX + ((size_t)(n * Ci + ci)) * H * W;
          for (int co = 0; co < Co; ++co) {
            const double* gc = G + ((size_t)(n * Co + co)) * Ho * Wo;
            const double* wc = Wt + ((size_t)(co * Ci + ci)) * KH * KW;
            for (int kh = 0; kh < KH; ++kh) {
              for (int kw = 0; kw < KW; ++kw) {
                const double wvv = wc[kh * KW + kw];
                if (wvv == 0.0) continue;
                const int ih0 = kh * dilation - padding;
                const int iw0 = kw * dilation - padding;
                int ow_lo = iw0 < 0 ? (-iw0 + stride - 1) / stride : 0;
                int ow_hi = (W - 1 - iw0) / stride;
                if (ow_hi > Wo - 1) ow_hi = Wo - 1;
                for (int oh = 0; oh < Ho; ++oh) {
                  const int ih = oh * stride + ih0;
                  if (ih < 0 || ih >= H) continue;
                  double* dxr = dxc + (size_t)ih * W + iw0;
                  const double* grow = gc + (size_t)oh * Wo;
                  if (stride == 1) {
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) dxr[ow] += wvv * grow[ow];
                  } else {
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) dxr[ow * stride] += wvv * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
    }

    if (gin[1]) {
      double* DW = gin[1]->v.data();
#pragma omp parallel for collapse(2) schedule(static)
      for (int co = 0; co < Co; ++co) {
        for (int ci = 0; ci < Ci; ++ci) {
          double* dwc = DW + ((size_t)(co * Ci + ci)) * KH * KW;
          for (int kh = 0; kh < KH; ++kh) {
            for (int kw = 0; kw < KW; ++kw) {
              const int ih0 = kh * dilation - padding;
              const int iw0 = kw * dilation - padding;
              int ow_lo = iw0 < 0 ? (-iw0 + stride - 1) / stride : 0;
              int ow_hi = (W - 1 - iw0) / stride;
              if (ow_hi > Wo - 1) ow_hi = Wo - 1;
              double acc = 0.0;
              for (int n = 0; n < N; ++n) {
                const double* gc = G + ((size_t)(n * Co + co)) * Ho * Wo;
                const double* xc = X + ((size_t)(n * Ci + ci)) * H * W;
                for (int oh = 0; oh < Ho; ++oh) {
                  const int ih = oh * stride + ih0;
                  if (ih < 0 || ih >= H) continue;
                  const double* xr = xc + (size_t)ih * W + iw0;
                  const double* grow = gc + (size_t)oh * Wo;
                  if (stride == 1) {
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += grow[ow] * xr[ow];
                  } else {
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) acc += grow[ow] * xr[ow * stride];
                  }
                }
              }
              dwc[kh * KW + kw] += acc;
            }
          }
        }
      }
    }

    if (gin[2]) {
      double* DB = gin[2]->v.data();
      for (int co = 0; co < Co; ++co) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
          const double* gc = G + ((size_t)(n * Co + co)) * Ho * Wo;
          for (int i = 0; i < Ho * Wo; ++i) acc += gc[i];
        }
        DB[co] += acc;
      }
    }
  };

  return make_node(std::move(out), {x, w, b}, std::move(back), "conv2d");
}

// ------------------------------------------------------------- simple ops

NodePtr relu(const NodePtr& x) {
  Tensor out = x->value;
  for (double& v : out.v) v = v > 0.0 ? v : 0.0;
  BackwardFn back = [](const Node& self, const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& xv = self.inputs[0]->value;
    for (int i = 0; i < g.numel(); ++i)
      if (xv[(size_t)i] > 0.0) gin[0]->v[(size_t)i] += g[(size_t)i];
  };
  return make_node(std::move(out), {x}, std::move(back), "relu");
}

NodePtr residual_add(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "residual_add");
  Tensor out = a->value;
  for (int i = 0; i < out.numel(); ++i) out[(size_t)i] += b->value[(size_t)i];
  BackwardFn back = [](const Node&, const Tensor& g, const std::vector<Tensor*>& gin) {
    for (int k = 0; k < 2; ++k) {
      if (!gin[(size_t)k]) continue;
      for (int i = 0; i < g.numel(); ++i) gin[(size_t)k]->v[(size_t)i] += g[(size_t)i];
    }
  };
  return make_node(std::move(out), {a, b}, std::move(back), "residual_add");
}

NodePtr avg_pool(const NodePtr& x, int kernel, int stride) {
  const Tensor& xv = x->value;
  check_rank(xv, 4, "avg_pool");
  if (kernel < 1 || stride < 1) throw std::invalid_argument("avg_pool: bad kernel/stride");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Ho = (H - kernel) / stride + 1;
  const int Wo = (W - kernel) / stride + 1;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("avg_pool: window larger than input");
  Tensor out({N, C, Ho, Wo});
  const double inv = 1.0 / (kernel * kernel);
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xc = xv.v.data() + (size_t)nc * H * W;
    double* oc = out.v.data() + (size_t)nc * Ho * Wo;
    for (int oh = 0; oh < Ho; ++oh)
      for (int ow = 0; ow < Wo; ++ow) {
        double acc = 0.0;
        for (int kh = 0; kh < kernel; ++kh)
          for (int kw = 0; kw < kernel; ++kw)
            acc += xc[(size_t)(oh * stride + kh) * W + ow * stride + kw];
        oc[(size_t)oh * Wo + ow] = acc * inv;
      }
  }
  BackwardFn back = [kernel, stride, inv](const Node& self, const Tensor& g,
                                          const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& xv = self.inputs[0]->value;
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Ho = g.dim(2), Wo = g.dim(3);
    for (int nc = 0; nc < N * C; ++nc) {
      double* dxc = gin[0]->v.data() + (size_t)nc * H * W;
      const double* gc = g.v.data() + (size_t)nc * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          const double gv = gc[(size_t)oh * Wo + ow] * inv;
          for (int kh = 0; kh < kernel; ++kh)
            for (int kw = 0; kw < kernel; ++kw)
              dxc[(size_t)(oh * stride + kh) * W + ow * stride + kw] += gv;
        }
    }
  };
  return make_node(std::move(out), {x}, std::move(back), "avg_pool");
}

NodePtr global_avg_pool(const NodePtr& x) {
  const Tensor& xv = x->value;
  check_rank(xv, 4, "global_avg_pool");
  const int N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor out({N, C});
  const double inv = 1.0 / HW;
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xc = xv.v.data() + (size_t)nc * HW;
    double acc = 0.0;
    for (int i = 0; i < HW; ++i) acc += xc[i];
    out[(size_t)nc] = acc * inv;
  }
  BackwardFn back = [HW, inv](const Node& self, const Tensor& g,
                              const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const int NC = g.numel();
    for (int nc = 0; nc < NC; ++nc) {
      const double gv = g[(size_t)nc] * inv;
      double* dxc = gin[0]->v.data() + (size_t)nc * HW;
      for (int i = 0; i < HW; ++i) dxc[i] += gv;
    }
  };
  return make_node(std::move(out), {x}, std::move(back), "global_avg_pool");
}

NodePtr nearest_upsample(const NodePtr& x, int factor) {
  const Tensor& xv = x->value;
  check_rank(xv, 4, "nearest_upsample");
  if (factor < 1) throw std::invalid_argument("nearest_upsample: factor must be >= 1");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  Tensor out({N, C, Ho, Wo});
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xc = xv.v.data() + (size_t)nc * H * W;
    double* oc = out.v.data() + (size_t)nc * Ho * Wo;
    for (int oh = 0; oh < Ho; ++oh)
      for (int ow = 0; ow < Wo; ++ow)
        oc[(size_t)oh * Wo + ow] = xc[(size_t)(oh / factor) * W + ow / factor];
  }
  BackwardFn back = [factor](const Node& self, const Tensor& g,
                             const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& xv = self.inputs[0]->value;
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Ho = g.dim(2), Wo = g.dim(3);
    for (int nc = 0; nc < N * C; ++nc) {
      double* dxc = gin[0]->v.data() + (size_t)nc * H * W;
      const double* gc = g.v.data() + (size_t)nc * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow)
          dxc[(size_t)(oh / factor) * W + ow / factor] += gc[(size_t)oh * Wo + ow];
    }
  };
  return make_node(std::move(out), {x}, std::move(back), "nearest_upsample");
}

NodePtr affine(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  const Tensor& bv = b->value;
  check_rank(xv, 2, "affine input");
  check_rank(wv, 2, "affine weight");
  const int N = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
  if (wv.dim(1) != F || bv.numel() != O)
    throw std::invalid_argument("affine: shape mismatch " + xv.shape_str() + " vs " +
                                wv.shape_str());
  Tensor out({N, O});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      const double* xr = xv.v.data() + (size_t)n * F;
      const double* wr = wv.v.data() + (size_t)o * F;
      double acc = bv[(size_t)o];
      for (int f = 0; f < F; ++f) acc += xr[f] * wr[f];
      out[(size_t)n * O + o] = acc;
    }
  BackwardFn back = [](const Node& self, const Tensor& g, const std::vector<Tensor*>& gin) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    const int N = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
    if (gin[0]) {
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
          const double gv = g[(size_t)n * O + o];
          const double* wr = wv.v.data() + (size_t)o * F;
          double* dxr = gin[0]->v.data() + (size_t)n * F;
          for (int f = 0; f < F; ++f) dxr[f] += gv * wr[f];
        }
    }
    if (gin[1]) {
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
          const double gv = g[(size_t)n * O + o];
          const double* xr = xv.v.data() + (size_t)n * F;
          double* dwr = gin[1]->v.data() + (size_t)o * F;
          for (int f = 0; f < F; ++f) dwr[f] += gv * xr[f];
        }
    }
    if (gin[2]) {
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) gin[2]->v[(size_t)o] += g[(size_t)n * O + o];
    }
  };
  return make_node(std::move(out), {x, w, b}, std::move(back), "affine");
}

NodePtr channel_tile(const NodePtr& x, int channels) {
  const Tensor& xv = x->value;
  check_rank(xv, 4, "channel_tile");
  if (channels < 1) throw std::invalid_argument("channel_tile: bad channel count");
  const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out({N, channels, H, W});
  const int HW = H * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < channels; ++c) {
      const double* src = xv.v.data() + ((size_t)(n * Ci + c % Ci)) * HW;
      double* dst = out.v.data() + ((size_t)(n * channels + c)) * HW;
      std::copy(src, src + HW, dst);
    }
  BackwardFn back = [channels](const Node& self, const Tensor& g,
                               const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& xv = self.inputs[0]->value;
    const int N = xv.dim(0), Ci = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < channels; ++c) {
        const double* gc = g.v.data() + ((size_t)(n * channels + c)) * HW;
        double* dxc = gin[0]->v.data() + ((size_t)(n * Ci + c % Ci)) * HW;
        for (int i = 0; i < HW; ++i) dxc[i] += gc[i];
      }
  };
  return make_node(std::move(out), {x}, std::move(back), "channel_tile");
}

// ----------------------------------------------------- elementwise & misc

NodePtr add(const NodePtr& a, const NodePtr& b) { return residual_add(a, b); }

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor out = a->value;
  for (int i = 0; i < out.numel(); ++i) out[(size_t)i] -= b->value[(size_t)i];
  BackwardFn back = [](const Node&, const Tensor& g, const std::vector<Tensor*>& gin) {
    if (gin[0])
      for (int i = 0; i < g.numel(); ++i) gin[0]->v[(size_t)i] += g[(size_t)i];
    if (gin[1])
      for (int i = 0; i < g.numel(); ++i) gin[1]->v[(size_t)i] -= g[(size_t)i];
  };
  return make_node(std::move(out), {a, b}, std::move(back), "sub");
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (int i = 0; i < out.numel(); ++i) out[(size_t)i] *= b->value[(size_t)i];
  BackwardFn back = [](const Node& self, const Tensor& g, const std::vector<Tensor*>& gin) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (gin[0])
      for (int i = 0; i < g.numel(); ++i) gin[0]->v[(size_t)i] += g[(size_t)i] * bv[(size_t)i];
    if (gin[1])
      for (int i = 0; i < g.numel(); ++i) gin[1]->v[(size_t)i] += g[(size_t)i] * av[(size_t)i];
  };
  return make_node(std::move(out), {a, b}, std::move(back), "mul");
}

NodePtr scale(const NodePtr& x, double c) {
  Tensor out = x->value;
  for (double& v : out.v) v *= c;
  BackwardFn back = [c](const Node&, const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    for (int i = 0; i < g.numel(); ++i) gin[0]->v[(size_t)i] += c * g[(size_t)i];
  };
  return make_node(std::move(out), {x}, std::move(back), "scale");
}

NodePtr sum(const NodePtr& x) {
  double acc = 0.0;
  for (double v : x->value.v) acc += v;
  BackwardFn back = [](const Node&, const Tensor& g, const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const double gv = g[0];
    for (double& d : gin[0]->v) d += gv;
  };
  return make_node(Tensor::scalar(acc), {x}, std::move(back), "sum");
}

// ------------------------------------------------------------------ losses

LossKind loss_kind_from(const std::string& name) {
  if (name == "mse") return LossKind::mse;
  if (name == "softmax_ce") return LossKind::softmax_ce;
  if (name == "sigmoid_bce") return LossKind::sigmoid_bce;
  if (name == "cosine") return LossKind::cosine;
  throw std::invalid_argument("unknown loss kind: " + name);
}

std::string loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::mse: return "mse";
    case LossKind::softmax_ce: return "softmax_ce";
    case LossKind::sigmoid_bce: return "sigmoid_bce";
    case LossKind::cosine: return "cosine";
  }
  throw std::logic_error("bad loss kind");
}

NodePtr mse_loss(const NodePtr& pred, const Tensor& target) {
  check_same_shape(pred->value, target, "mse_loss");
  const int M = target.numel();
  double acc = 0.0;
  for (int i = 0; i < M; ++i) {
    const double d = pred->value[(size_t)i] - target[(size_t)i];
    acc += d * d;
  }
  Tensor tgt = target;
  BackwardFn back = [tgt, M](const Node& self, const Tensor& g,
                             const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const double gv = 2.0 * g[0] / M;
    const Tensor& pv = self.inputs[0]->value;
    for (int i = 0; i < M; ++i)
      gin[0]->v[(size_t)i] += gv * (pv[(size_t)i] - tgt[(size_t)i]);
  };
  return make_node(Tensor::scalar(acc / M), {pred}, std::move(back), "mse_loss");
}

namespace {

// pred [N,K,...]; positions = everything except axis 1
struct CEDims {
  int N, K, S;  // S = product of trailing spatial dims (1 if none)
};

CEDims ce_dims(const Tensor& pred, const Tensor& target) {
  if (pred.rank() < 2) throw std::invalid_argument("softmax_ce: pred must have a class axis");
  CEDims d;
  d.N = pred.dim(0);
  d.K = pred.dim(1);
  d.S = 1;
  for (int i = 2; i < pred.rank(); ++i) d.S *= pred.dim(i);
  int tn = target.numel();
  if (tn != d.N * d.S)
    throw std::invalid_argument("softmax_ce: target shape mismatch (" + target.shape_str() +
                                " for pred " + pred.shape_str() + ")");
  return d;
}

}  // namespace

NodePtr softmax_ce_loss(const NodePtr& pred, const Tensor& target) {
  const Tensor& pv = pred->value;
  const CEDims d = ce_dims(pv, target);
  const int M = d.N * d.S;
  double acc = 0.0;
  for (int n = 0; n < d.N; ++n)
    for (int s = 0; s < d.S; ++s) {
      const int cls = (int)std::llround(target[(size_t)n * d.S + s]);
      if (cls < 0 || cls >= d.K)
        throw std::invalid_argument("softmax_ce: class index " + std::to_string(cls) +
                                    " out of range for K=" + std::to_string(d.K));
      double m = -1e300;
      for (int k = 0; k < d.K; ++k)
        m = std::max(m, pv[((size_t)n * d.K + k) * d.S + s]);
      double lse = 0.0;
      for (int k = 0; k < d.K; ++k)
        lse += std::exp(pv[((size_t)n * d.K + k) * d.S + s] - m);
      lse = m + std::log(lse);
      acc += lse - pv[((size_t)n * d.K + cls) * d.S + s];
    }
  Tensor tgt = target;
  BackwardFn back = [tgt, d, M](const Node& self, const Tensor& g,
                                const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& pv = self.inputs[0]->value;
    const double gv = g[0] / M;
    for (int n = 0; n < d.N; ++n)
      for (int s = 0; s < d.S; ++s) {
        const int cls = (int)std::llround(tgt[(size_t)n * d.S + s]);
        double m = -1e300;
        for (int k = 0; k < d.K; ++k)
          m = std::max(m, pv[((size_t)n * d.K + k) * d.S + s]);
        double z = 0.0;
        for (int k = 0; k < d.K; ++k)
          z += std::exp(pv[((size_t)n * d.K + k) * d.S + s] - m);
        for (int k = 0; k < d.K; ++k) {
          const double p = std::exp(pv[((size_t)n * d.K + k) * d.S + s] - m) / z;
          gin[0]->v[((size_t)n * d.K + k) * d.S + s] += gv * (p - (k == cls ? 1.0 : 0.0));
        }
      }
  };
  return make_node(Tensor::scalar(acc / M), {pred}, std::move(back), "softmax_ce_loss");
}

NodePtr sigmoid_bce_loss(const NodePtr& pred, const Tensor& target) {
  check_same_shape(pred->value, target, "sigmoid_bce_loss");
  const int M = target.numel();
  double acc = 0.0;
  for (int i = 0; i < M; ++i) {
    const double x = pred->value[(size_t)i];
    const double y = target[(size_t)i];
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor tgt = target;
  BackwardFn back = [tgt, M](const Node& self, const Tensor& g,
                             const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const double gv = g[0] / M;
    const Tensor& pv = self.inputs[0]->value;
    for (int i = 0; i < M; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-pv[(size_t)i]));
      gin[0]->v[(size_t)i] += gv * (s - tgt[(size_t)i]);
    }
  };
  return make_node(Tensor::scalar(acc / M), {pred}, std::move(back), "sigmoid_bce_loss");
}

NodePtr cosine_loss(const NodePtr& pred, const Tensor& target) {
  const Tensor& pv = pred->value;
  check_same_shape(pv, target, "cosine_loss");
  if (pv.rank() < 2) throw std::invalid_argument("cosine_loss: pred must have a vector axis");
  CEDims d;
  d.N = pv.dim(0);
  d.K = pv.dim(1);
  d.S = 1;
  for (int i = 2; i < pv.rank(); ++i) d.S *= pv.dim(i);
  const int M = d.N * d.S;
  double acc = 0.0;
  for (int n = 0; n < d.N; ++n)
    for (int s = 0; s < d.S; ++s) {
      double pp = 0.0, tt = 0.0, pt = 0.0;
      for (int k = 0; k < d.K; ++k) {
        const double p = pv[((size_t)n * d.K + k) * d.S + s];
        const double t = target[((size_t)n * d.K + k) * d.S + s];
        pp += p * p;
        tt += t * t;
        pt += p * t;
      }
      if (tt == 0.0) throw std::invalid_argument("cosine_loss: zero-norm target vector");
      acc += pt / (std::max(std::sqrt(pp), 1e-12) * std::sqrt(tt));
    }
  Tensor tgt = target;
  BackwardFn back = [tgt, d, M](const Node& self, const Tensor& g,
                                const std::vector<Tensor*>& gin) {
    if (!gin[0]) return;
    const Tensor& pv = self.inputs[0]->value;
    const double gv = -g[0] / M;  // loss = 1 - mean(cs)
    for (int n = 0; n < d.N; ++n)
      for (int s = 0; s < d.S; ++s) {
        double pp = 0.0, tt = 0.0, pt = 0.0;
        for (int k = 0; k < d.K; ++k) {
          const double p = pv[((size_t)n * d.K + k) * d.S + s];
          const double t = tgt[((size_t)n * d.K + k) * d.S + s];
          pp += p * p;
          tt += t * t;
          pt += p * t;
        }
        const double np = std::max(std::sqrt(pp), 1e-12);
        const double nt = std::sqrt(tt);
        for (int k = 0; k < d.K; ++k) {
          const double p = pv[((size_t)n * d.K + k) * d.S + s];
          const double t = tgt[((size_t)n * d.K + k) * d.S + s];
          gin[0]->v[((size_t)n * d.K + k) * d.S + s] +=
              gv * (t / (np * nt) - p * pt / (np * np * np * nt));
        }
      }
  };
  const double loss = 1.0 - acc / M;
  return make_node(Tensor::scalar(loss), {pred}, std::move(back), "cosine_loss");
}

NodePtr compute_loss(LossKind kind, const NodePtr& pred, const Tensor& target) {
  switch (kind) {
    case LossKind::mse: return mse_loss(pred, target);
    case LossKind::softmax_ce: return softmax_ce_loss(pred, target);
    case LossKind::sigmoid_bce: return sigmoid_bce_loss(pred, target);
    case LossKind::cosine: return cosine_loss(pred, target);
  }
  throw std::logic_error("bad loss kind");
}

NodePtr uncertainty_combine(const std::vector<NodePtr>& task_losses,
                            const std::vector<NodePtr>& etas) {
  if (task_losses.size() != etas.size() || task_losses.empty())
    throw std::invalid_argument("uncertainty_combine: need one eta per task loss");
  double acc = 0.0;
  std::vector<NodePtr> inputs;
  for (size_t t = 0; t < task_losses.size(); ++t) {
    const double L = task_losses[t]->value.item();
    const double eta = etas[t]->value.item();
    if (!std::isfinite(L)) throw std::invalid_argument("uncertainty_combine: non-finite task loss");
    acc += 0.5 * L * std::exp(-eta) + 0.5 * eta;
    inputs.push_back(task_losses[t]);
  }
  for (const auto& e : etas) inputs.push_back(e);
  const size_t T = task_losses.size();
  BackwardFn back = [T](const Node& self, const Tensor& g, const std::vector<Tensor*>& gin) {
    const double gv = g[0];
    for (size_t t = 0; t < T; ++t) {
      const double L = self.inputs[t]->value.item();
      const double eta = self.inputs[T + t]->value.item();
      const double inv_var = std::exp(-eta);
      if (gin[t]) gin[t]->v[0] += gv * 0.5 * inv_var;
      if (gin[T + t]) gin[T + t]->v[0] += gv * (0.5 - 0.5 * L * inv_var);
    }
  };
  return make_node(Tensor::scalar(acc), std::move(inputs), std::move(back),
                   "uncertainty_combine");
}

// -------------------------------------------------------------- parameters

ParamRole param_role_from(const std::string& name) {
  if (name == "backbone") return ParamRole::backbone;
  if (name == "head") return ParamRole::head;
  if (name == "loss-weight") return ParamRole::loss_weight;
  throw std::invalid_argument("unknown parameter role: " + name);
}

std::string param_role_name(ParamRole role) {
  switch (role) {
    case ParamRole::backbone: return "backbone";
    case ParamRole::head: return "head";
    case ParamRole::loss_weight: return "loss-weight";
  }
  throw std::logic_error("bad role");
}

Parameter make_parameter(std::string id, ParamRole role, int layer_id,
                         bool penalizable, Tensor init) {
  if ((role == ParamRole::backbone) != (layer_id >= 0))
    throw std::invalid_argument("parameter " + id + ": layer_id present iff role=backbone");
  if (penalizable && role != ParamRole::backbone)
    throw std::invalid_argument("parameter " + id + ": only backbone parameters may be penalizable");
  Parameter p;
  p.id = std::move(id);
  p.role = role;
  p.layer_id = layer_id;
  p.penalizable = penalizable;
  p.node = make_leaf(std::move(init), true);
  return p;
}

// ------------------------------------------------------------ reverse mode

namespace {

std::vector<const Node*> topo_order(const NodePtr& loss) {
  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  // iterative post-order DFS; child visit order = input order
  std::vector<std::pair<const Node*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Node* child = node->inputs[next].get();
      ++next;
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // topological: inputs before consumers
}

}  // namespace

NodeGrads backprop(const NodePtr& loss) {
  if (loss->value.numel() != 1)
    throw std::invalid_argument("backprop: loss must be scalar, got " +
                                loss->value.shape_str());
  if (!std::isfinite(loss->value[0]))
    throw std::invalid_argument("backprop: loss is non-finite");
  NodeGrads grads;
  if (!loss->requires_grad) return grads;
  std::vector<const Node*> order = topo_order(loss);
  grads[loss.get()] = Tensor::scalar(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    if (!node->backward) continue;
    auto git = grads.find(node);
    if (git == grads.end()) continue;
    std::vector<Tensor*> slots(node->inputs.size(), nullptr);
    for (size_t i = 0; i < node->inputs.size(); ++i) {
      const Node* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto [sit, inserted] = grads.try_emplace(in, Tensor::zeros(in->value.shape));
      slots[i] = &sit->second;
    }
    node->backward(*node, git->second, slots);
  }
  return grads;
}

std::map<std::string, Tensor> param_gradients(const NodePtr& loss,
                                              const std::vector<Parameter>& params) {
  NodeGrads grads = backprop(loss);
  std::map<std::string, Tensor> out;
  for (const auto& p : params) {
    auto it = grads.find(p.node.get());
    if (it != grads.end())
      out[p.id] = it->second;
    else
      out[p.id] = Tensor::zeros(p.values().shape);
  }
  return out;
}

double finite_diff_check(const std::function<NodePtr()>& rebuild_loss,
                         const std::vector<Parameter*>& params, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be positive");
  NodePtr loss = rebuild_loss();
  NodeGrads grads = backprop(loss);
  double max_rel = 0.0;
  for (Parameter* p : params) {
    const Tensor* analytic = nullptr;
    auto it = grads.find(p->node.get());
    if (it != grads.end()) analytic = &it->second;
    Tensor& theta = p->values();
    for (int i = 0; i < theta.numel(); ++i) {
      const double orig = theta[(size_t)i];
      theta[(size_t)i] = orig + eps;
      const double fp = rebuild_loss()->value.item();
      theta[(size_t)i] = orig - eps;
      const double fm = rebuild_loss()->value.item();
      theta[(size_t)i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("finite_diff_check: non-finite intermediate value");
      const double cd = (fp - fm) / (2.0 * eps);
      const double an = analytic ? (*analytic)[(size_t)i] : 0.0;
      const double rel = std::abs(an - cd) / std::max(1e-12, std::abs(cd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace lomt
