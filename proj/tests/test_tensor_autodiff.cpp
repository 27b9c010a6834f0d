#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "lomt/autodiff.hpp"
#include "lomt/rng.hpp"
#include "lomt/tensor.hpp"

using namespace lomt;

namespace {

// Independent conv oracle: materializes the im2col patch matrix and takes
// explicit dot products. Different code path from the library kernel.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                   int padding, int dilation) {
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int Ho = (H + 2 * padding - dilation * (KH - 1) - 1) / stride + 1;
  const int Wo = (W + 2 * padding - dilation * (KW - 1) - 1) / stride + 1;
  const int patch = Ci * KH * KW;
  Tensor out({N, Co, Ho, Wo});
  std::vector<double> row((size_t)patch);
  for (int n = 0; n < N; ++n)
    for (int oh = 0; oh < Ho; ++oh)
      for (int ow = 0; ow < Wo; ++ow) {
        size_t r = 0;
        for (int ci = 0; ci < Ci; ++ci)
          for (int kh = 0; kh < KH; ++kh)
            for (int kw = 0; kw < KW; ++kw) {
              const int ih = oh * stride - padding + kh * dilation;
              const int iw = ow * stride - padding + kw * dilation;
              row[r++] = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                             ? x[(((size_t)n * Ci + ci) * H + ih) * W + iw]
                             : 0.0;
            }
        for (int co = 0; co < Co; ++co) {
          double acc = b[(size_t)co];
          for (int i = 0; i < patch; ++i) acc += row[(size_t)i] * w[(size_t)co * patch + i];
          out[(((size_t)n * Co + co) * Ho + oh) * Wo + ow] = acc;
        }
      }
  return out;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.v) v = rng.uniform(lo, hi);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (int i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[(size_t)i] - b[(size_t)i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d matches frozen direct-summation values") {
  // 1x1x2x2 ones * 2x2 ones kernel -> 4
  auto x = make_const(Tensor::full({1, 1, 2, 2}, 1.0));
  auto w = make_const(Tensor::full({1, 1, 2, 2}, 1.0));
  auto b = make_const(Tensor::zeros({1}));
  auto y = conv2d(x, w, b, 1, 0, 1);
  CHECK(y->value.shape == std::vector<int>{1, 1, 1, 1});
  CHECK(y->value[0] == doctest::Approx(4.0).epsilon(1e-15));

  // zero kernel, zero bias -> all-zero output
  Rng rng(1);
  auto xz = make_const(random_tensor({2, 3, 5, 5}, rng));
  auto wz = make_const(Tensor::zeros({4, 3, 3, 3}));
  auto bz = make_const(Tensor::zeros({4}));
  auto yz = conv2d(xz, wz, bz, 1, 1, 1);
  for (double v : yz->value.v) CHECK(v == 0.0);

  // dilation example: 3x3 input 1..9, 2x2 ones kernel, dilation 2 -> 1+3+7+9 = 20
  auto xd = make_const(Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  auto wd = make_const(Tensor::full({1, 1, 2, 2}, 1.0));
  auto yd = conv2d(xd, wd, b, 1, 0, 2);
  CHECK(yd->value.shape == std::vector<int>{1, 1, 1, 1});
  CHECK(yd->value[0] == doctest::Approx(20.0).epsilon(1e-15));
}

TEST_CASE("conv2d agrees with the im2col oracle over random configs") {
  Rng rng(42);
  struct Cfg {
    int N, Ci, H, W, Co, K, stride, pad, dil;
  };
  const Cfg cfgs[] = {
      {1, 1, 4, 4, 1, 3, 1, 1, 1}, {2, 3, 6, 5, 4, 3, 1, 1, 1},
      {1, 2, 7, 7, 3, 3, 2, 1, 1}, {2, 2, 9, 9, 2, 3, 1, 2, 2},
      {1, 4, 8, 8, 4, 1, 1, 0, 1}, {1, 2, 11, 9, 3, 3, 2, 3, 3},
  };
  for (const auto& c : cfgs) {
    Tensor xt = random_tensor({c.N, c.Ci, c.H, c.W}, rng);
    Tensor wt = random_tensor({c.Co, c.Ci, c.K, c.K}, rng);
    Tensor bt = random_tensor({c.Co}, rng);
    auto y = conv2d(make_const(xt), make_const(wt), make_const(bt), c.stride, c.pad, c.dil);
    Tensor expect = conv_oracle(xt, wt, bt, c.stride, c.pad, c.dil);
    CHECK(max_abs_diff(y->value, expect) < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad shapes") {
  auto x = make_const(Tensor::zeros({1, 2, 4, 4}));
  auto w = make_const(Tensor::zeros({1, 3, 3, 3}));
  auto b = make_const(Tensor::zeros({1}));
  CHECK_THROWS(conv2d(x, w, b, 1, 1, 1));  // channel mismatch
  auto w2 = make_const(Tensor::zeros({1, 2, 3, 3}));
  CHECK_THROWS(conv2d(x, w2, b, 1, 0, 4));  // non-positive output extent
}

TEST_CASE("conv2d is linear in the weight") {
  Rng rng(7);
  Tensor xt = random_tensor({1, 2, 5, 5}, rng);
  Tensor w1 = random_tensor({3, 2, 3, 3}, rng);
  Tensor w2 = random_tensor({3, 2, 3, 3}, rng);
  Tensor b0 = Tensor::zeros({3});
  const double a = 0.37, c = -1.21;
  Tensor wmix({3, 2, 3, 3});
  for (int i = 0; i < wmix.numel(); ++i) wmix[(size_t)i] = a * w1[(size_t)i] + c * w2[(size_t)i];
  auto x = make_const(xt);
  auto yb = conv2d(x, make_const(wmix), make_const(b0), 1, 1, 1);
  auto y1 = conv2d(x, make_const(w1), make_const(b0), 1, 1, 1);
  auto y2 = conv2d(x, make_const(w2), make_const(b0), 1, 1, 1);
  for (int i = 0; i < yb->value.numel(); ++i)
    CHECK(std::abs(yb->value[(size_t)i] - (a * y1->value[(size_t)i] + c * y2->value[(size_t)i])) <
          1e-10);
}

TEST_CASE("dilated conv equals conv with explicitly materialized kernel") {
  Rng rng(11);
  Tensor xt = random_tensor({1, 2, 9, 9}, rng);
  Tensor wt = random_tensor({2, 2, 3, 3}, rng);
  Tensor bt = random_tensor({2}, rng);
  const int d = 2;
  // materialize: 3x3 kernel with dilation 2 == 5x5 kernel with zero-interleaved taps
  const int km = 2 * d + 1;
  Tensor wm({2, 2, km, km});
  for (int co = 0; co < 2; ++co)
    for (int ci = 0; ci < 2; ++ci)
      for (int kh = 0; kh < 3; ++kh)
        for (int kw = 0; kw < 3; ++kw)
          wm[(((size_t)co * 2 + ci) * km + kh * d) * km + kw * d] =
              wt[(((size_t)co * 2 + ci) * 3 + kh) * 3 + kw];
  auto y1 = conv2d(make_const(xt), make_const(wt), make_const(bt), 1, 2, d);
  auto y2 = conv2d(make_const(xt), make_const(wm), make_const(bt), 1, 2, 1);
  CHECK(max_abs_diff(y1->value, y2->value) < 1e-12);
}

TEST_CASE("layer op values") {
  // relu sign cases
  auto r = relu(make_const(Tensor::from({3}, {-1.0, 0.0, 2.0})));
  CHECK(r->value.v == std::vector<double>{0.0, 0.0, 2.0});

  // residual_add with zero second operand is bit-identical
  Rng rng(3);
  Tensor xt = random_tensor({2, 2, 3, 3}, rng);
  auto s = residual_add(make_const(xt), make_const(Tensor::zeros({2, 2, 3, 3})));
  CHECK(std::memcmp(s->value.v.data(), xt.v.data(), sizeof(double) * xt.numel()) == 0);

  // avg_pool 2x2 stride 2 on [[1,2],[3,4]] -> 2.5
  auto p = avg_pool(make_const(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2);
  CHECK(p->value.numel() == 1);
  CHECK(p->value[0] == doctest::Approx(2.5).epsilon(1e-15));

  // global_avg_pool
  auto g = global_avg_pool(make_const(Tensor::from({1, 2, 1, 2}, {1, 3, 10, 20})));
  CHECK(g->value.shape == std::vector<int>{1, 2});
  CHECK(g->value[0] == doctest::Approx(2.0));
  CHECK(g->value[1] == doctest::Approx(15.0));

  // nearest_upsample by 2
  auto u = nearest_upsample(make_const(Tensor::from({1, 1, 1, 2}, {1, 2})), 2);
  CHECK(u->value.shape == std::vector<int>{1, 1, 2, 4});
  CHECK(u->value.v == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2});

  // affine
  auto a = affine(make_const(Tensor::from({1, 2}, {1, 2})),
                  make_const(Tensor::from({2, 2}, {1, 0, 0, 1})),
                  make_const(Tensor::from({2}, {10, 20})));
  CHECK(a->value.v == std::vector<double>{11, 22});

  // channel_tile copies channel 0
  auto t = channel_tile(make_const(Tensor::from({1, 1, 1, 2}, {5, 6})), 3);
  CHECK(t->value.shape == std::vector<int>{1, 3, 1, 2});
  CHECK(t->value.v == std::vector<double>{5, 6, 5, 6, 5, 6});

  CHECK_THROWS(residual_add(make_const(Tensor::zeros({2})), make_const(Tensor::zeros({3}))));
}

TEST_CASE("loss values match closed forms") {
  Rng rng(5);
  Tensor t = random_tensor({2, 3}, rng);
  CHECK(mse_loss(make_const(t), t)->value.item() == 0.0);

  // uniform logits over K=4 classes -> ln 4 per element
  Tensor logits = Tensor::zeros({2, 4, 2, 2});
  Tensor cls = Tensor::zeros({2, 2, 2});
  cls[0] = 1;
  cls[3] = 3;
  auto ce = softmax_ce_loss(make_const(logits), cls);
  CHECK(ce->value.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // cosine loss of pred == target (nonzero) is 0
  Tensor dir = random_tensor({2, 3, 2, 2}, rng, 0.2, 1.0);
  CHECK(cosine_loss(make_const(dir), dir)->value.item() == doctest::Approx(0.0).epsilon(1e-12));
  Tensor zt = Tensor::zeros({1, 2});
  CHECK_THROWS(cosine_loss(make_const(Tensor::full({1, 2}, 1.0)), zt));

  // bce at logit 0 is ln 2
  auto bce = sigmoid_bce_loss(make_const(Tensor::zeros({4})), Tensor::zeros({4}));
  CHECK(bce->value.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS(mse_loss(make_const(Tensor::zeros({2})), Tensor::zeros({3})));
}

TEST_CASE("backprop closed-form gradients") {
  Rng rng(17);
  Parameter theta = make_parameter("theta", ParamRole::head, -1, false,
                                   random_tensor({5}, rng));

  // linear: loss = sum(theta) -> gradient all ones
  auto loss1 = sum(theta.node);
  auto g1 = param_gradients(loss1, {theta});
  for (double v : g1.at("theta").v) CHECK(v == 1.0);

  // quadratic: loss = 0.5 * sum(theta^2) -> gradient = theta
  auto loss2 = scale(sum(mul(theta.node, theta.node)), 0.5);
  auto g2 = param_gradients(loss2, {theta});
  CHECK(max_abs_diff(g2.at("theta"), theta.values()) < 1e-14);

  // unreachable parameter gets a zero gradient
  Parameter other = make_parameter("other", ParamRole::head, -1, false,
                                   random_tensor({3}, rng));
  auto g3 = param_gradients(loss1, {theta, other});
  for (double v : g3.at("other").v) CHECK(v == 0.0);

  // non-scalar loss rejected
  CHECK_THROWS(backprop(mul(theta.node, theta.node)));
}

TEST_CASE("finite_diff_check on the full op set") {
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    Rng rng(seed);
    Parameter w1 = make_parameter("w1", ParamRole::backbone, 0, true,
                                  random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5));
    Parameter b1 = make_parameter("b1", ParamRole::backbone, 0, true,
                                  random_tensor({2}, rng, -0.2, 0.2));
    Parameter w2 = make_parameter("w2", ParamRole::backbone, 1, true,
                                  random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5));
    Parameter b2 = make_parameter("b2", ParamRole::backbone, 1, true,
                                  random_tensor({2}, rng, -0.2, 0.2));
    Parameter wa = make_parameter("wa", ParamRole::head, -1, false,
                                  random_tensor({3, 2}, rng, -0.5, 0.5));
    Parameter ba = make_parameter("ba", ParamRole::head, -1, false,
                                  random_tensor({3}, rng, -0.2, 0.2));
    Tensor x = random_tensor({2, 1, 6, 6}, rng, 0.05, 1.0);
    Tensor tgt_dense = random_tensor({2, 2, 6, 6}, rng, 0.1, 0.9);
    Tensor tgt_vec = random_tensor({2, 2, 3, 3}, rng, 0.2, 1.0);
    Tensor tgt_cls = Tensor::zeros({2});
    tgt_cls[1] = 2;
    Tensor tgt_bin = Tensor::zeros({2, 3});
    tgt_bin[1] = 1;
    tgt_bin[4] = 1;

    // exercise conv (stride/dilation), relu, residual, pools, upsample,
    // affine, tile, and all four losses in one graph
    auto rebuild = [&]() {
      auto h0 = channel_tile(make_const(x), 2);
      auto u1 = residual_add(h0, conv2d(relu(h0), w1.node, b1.node, 1, 2, 2));
      auto u2 = residual_add(u1, conv2d(relu(u1), w2.node, b2.node, 1, 1, 1));
      auto dense = mse_loss(u2, tgt_dense);
      auto pooled = avg_pool(u2, 2, 2);
      auto cosine = cosine_loss(pooled, tgt_vec);
      auto up = nearest_upsample(pooled, 2);
      auto dense2 = mse_loss(up, tgt_dense);
      auto gap = global_avg_pool(u2);
      auto logits = affine(gap, wa.node, ba.node);
      auto ce = softmax_ce_loss(logits, tgt_cls);
      auto bce = sigmoid_bce_loss(logits, tgt_bin);
      auto l = residual_add(residual_add(dense, cosine), residual_add(dense2, residual_add(ce, bce)));
      return l;
    };
    std::vector<Parameter*> params{&w1, &b1, &w2, &b2, &wa, &ba};
    const double err = finite_diff_check(rebuild, params, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("finite_diff_check closed-form cases") {
  Rng rng(23);
  Parameter theta = make_parameter("theta", ParamRole::head, -1, false,
                                   random_tensor({4}, rng, 0.5, 1.5));
  // linear: exact for central differences
  auto lin = [&]() { return sum(theta.node); };
  CHECK(finite_diff_check(lin, {&theta}, 1e-5) <= 1e-8);
  // quadratic
  auto quad = [&]() { return scale(sum(mul(theta.node, theta.node)), 0.5); };
  CHECK(finite_diff_check(quad, {&theta}, 1e-5) < 1e-7);
  CHECK_THROWS(finite_diff_check(lin, {&theta}, 0.0));
}

TEST_CASE("uncertainty_combine value and gradients") {
  Parameter eta1 = make_parameter("eta1", ParamRole::loss_weight, -1, false, Tensor::scalar(0.0));
  Parameter eta2 = make_parameter("eta2", ParamRole::loss_weight, -1, false, Tensor::scalar(0.0));

  // sigma = 1: combined equals sum L_t / 2 exactly
  auto l1 = make_const(Tensor::scalar(2.0));
  auto l2 = make_const(Tensor::scalar(8.0));
  auto comb = uncertainty_combine({l1, l2}, {eta1.node, eta2.node});
  CHECK(comb->value.item() == (2.0 / 2 + 8.0 / 2));

  // sigma = (1, 2): 2/2 + log 1 + 8/8 + log 2
  eta2.values()[0] = std::log(4.0);  // sigma^2 = 4
  auto comb2 = uncertainty_combine({l1, l2}, {eta1.node, eta2.node});
  CHECK(comb2->value.item() == doctest::Approx(2.0 + std::log(2.0)).epsilon(1e-12));

  // gradient vs finite differences, including through a task-loss node
  Rng rng(9);
  Parameter p = make_parameter("p", ParamRole::head, -1, false, random_tensor({3}, rng, 0.5, 1.5));
  eta1.values()[0] = 0.3;
  eta2.values()[0] = -0.4;
  Tensor tgt = random_tensor({3}, rng);
  auto rebuild = [&]() {
    auto task1 = mse_loss(p.node, tgt);
    auto task2 = scale(sum(mul(p.node, p.node)), 0.5);
    return uncertainty_combine({task1, task2}, {eta1.node, eta2.node});
  };
  std::vector<Parameter*> params{&p, &eta1, &eta2};
  CHECK(finite_diff_check(rebuild, params, 1e-6) < 1e-6);
}

TEST_CASE("forward evaluation is deterministic across runs") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({1, 1, 8, 8}, rng);
    Tensor w = random_tensor({3, 1, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    auto y = relu(conv2d(make_const(x), make_const(w), make_const(b), 1, 1, 1));
    return global_avg_pool(y)->value;
  };
  Tensor a = run(99), b = run(99);
  CHECK(std::memcmp(a.v.data(), b.v.data(), sizeof(double) * a.numel()) == 0);
}

TEST_CASE("non-finite values are rejected at graph entry") {
  Tensor bad = Tensor::zeros({2});
  bad[0] = std::nan("");
  CHECK_THROWS(make_const(bad));
  CHECK_THROWS(make_parameter("p", ParamRole::head, -1, false, bad));
}

TEST_CASE("parameter invariants") {
  CHECK_THROWS(make_parameter("p", ParamRole::head, 3, false, Tensor::zeros({2})));
  CHECK_THROWS(make_parameter("p", ParamRole::backbone, -1, false, Tensor::zeros({2})));
  CHECK_THROWS(make_parameter("p", ParamRole::head, -1, true, Tensor::zeros({2})));
  auto p = make_parameter("p", ParamRole::backbone, 0, true, Tensor::zeros({2}));
  CHECK(p.node->requires_grad);
}
