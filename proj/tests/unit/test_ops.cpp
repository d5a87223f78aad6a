#include <doctest.h>
#include <algorithm>
#include <random>

#include <cmath>
#include <functional>
#include <vector>

#include "ddi/nn.hpp"
#include "ddi/ops.hpp"
#include "ddi/parallel.hpp"
#include "ddi/rng.hpp"
#include "ddi/tensor.hpp"

using namespace ddi;

namespace {

// Reference convolution: the most literal six-loop form, no reuse tricks.
// Everything fancier in the engine must agree with this.
std::vector<float> conv_oracle(const std::vector<float>& x, int n, int ci, int h,
                               int w, const std::vector<float>& wgt, int co, int kh,
                               int kw, const std::vector<float>* bias, int stride,
                               int pad, int& ho, int& wo) {
  ho = (h + 2 * pad - kh) / stride + 1;
  wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<float> out(static_cast<size_t>(n) * co * ho * wo, 0.f);
  for (int ni = 0; ni < n; ++ni)
    for (int o = 0; o < co; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int iy = oy * stride + ky - pad;
                int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += static_cast<double>(
                           x[((static_cast<size_t>(ni) * ci + c) * h + iy) * w + ix]) *
                       wgt[((static_cast<size_t>(o) * ci + c) * kh + ky) * kw + kx];
              }
          out[((static_cast<size_t>(ni) * co + o) * ho + oy) * wo + ox] =
              static_cast<float>(acc);
        }
  return out;
}

// Central-difference gradient of `f` with respect to `p`, one element at a time.
std::vector<float> fd_grad(Tensor& p, const std::function<float()>& f,
                           float eps = 1e-2f) {
  std::vector<float> g(p.numel());
  for (int64_t i = 0; i < p.numel(); ++i) {
    float keep = p.data()[i];
    p.data()[i] = keep + eps;
    float fp = f();
    p.data()[i] = keep - eps;
    float fm = f();
    p.data()[i] = keep;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

void check_close(const std::vector<float>& a, const std::vector<float>& b,
                 float tol) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    float denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-2f});
    CHECK(std::abs(a[i] - b[i]) / denom < tol);
  }
}

// Runs loss_fn under a fresh tape, backprops, and compares every listed
// tensor's tape gradient against central differences.
void grad_check(std::vector<Tensor*> params, const std::function<Tensor()>& loss_fn,
                float tol = 5e-2f) {
  for (auto* p : params) p->set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = loss_fn();
    tape.backward(loss);
  }
  auto value_only = [&]() -> float {
    NoGradGuard ng;
    return loss_fn().item();
  };
  for (auto* p : params) {
    std::vector<float> analytic(p->impl()->grad.begin(), p->impl()->grad.end());
    REQUIRE(analytic.size() == static_cast<size_t>(p->numel()));
    std::vector<float> fd = fd_grad(*p, value_only);
    check_close(analytic, fd, tol);
    p->zero_grad();
    p->set_requires_grad(false);
  }
}

Tensor random_tensor(Shape s, Rng& rng, float scale = 1.f) {
  Tensor t(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.f, scale);
  return t;
}

}  // namespace

TEST_CASE("conv2d matches frozen ramp example") {
  // 1x1x4x4 ramp input 0..15, single 2x2 averaging-style kernel of 0.25 each,
  // stride 2: outputs are window means = {2.5,4.5,10.5,12.5} scaled by 4*0.25.
  Tensor x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x.data()[i] = static_cast<float>(i);
  Tensor w({1, 1, 2, 2}, std::vector<float>{1.f, 1.f, 1.f, 1.f});
  Tensor y = conv2d(x, w, 2, 0);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.data()[0] == doctest::Approx(0 + 1 + 4 + 5));
  CHECK(y.data()[1] == doctest::Approx(2 + 3 + 6 + 7));
  CHECK(y.data()[2] == doctest::Approx(8 + 9 + 12 + 13));
  CHECK(y.data()[3] == doctest::Approx(10 + 11 + 14 + 15));
}

TEST_CASE("conv2d agrees with naive oracle across configs") {
  Rng rng(123);
  struct Cfg {
    int n, ci, h, w, co, k, stride, pad;
  };
  for (Cfg c : {Cfg{2, 3, 7, 7, 4, 3, 1, 1}, Cfg{1, 2, 8, 8, 3, 3, 2, 1},
                Cfg{2, 4, 5, 6, 2, 1, 1, 0}, Cfg{1, 1, 9, 9, 2, 3, 2, 0},
                Cfg{1, 3, 6, 6, 5, 5, 1, 2}}) {
    Tensor x = random_tensor({c.n, c.ci, c.h, c.w}, rng);
    Tensor w = random_tensor({c.co, c.ci, c.k, c.k}, rng);
    Tensor b = random_tensor({c.co}, rng);
    Tensor y = conv2d(x, w, b, c.stride, c.pad);
    int ho, wo;
    auto ref = conv_oracle(x.vec(), c.n, c.ci, c.h, c.w, w.vec(), c.co, c.k, c.k,
                           &b.vec(), c.stride, c.pad, ho, wo);
    REQUIRE(y.shape() == Shape{c.n, c.co, ho, wo});
    // f32 summation-order slack: the oracle accumulates in a different order
    // than the tiled kernel, so allow a few hundred ULP of drift.
    check_close(y.vec(), ref, 3e-4f);
  }
}

TEST_CASE("conv2d masked zeroes exactly the closed output channels") {
  Rng rng(7);
  Tensor x = random_tensor({1, 3, 6, 6}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor full = conv2d(x, w, b, 1, 1);
  std::vector<uint8_t> open{1, 0, 1, 0};
  Tensor masked = conv2d_masked(x, w, b, 1, 1, open);
  int64_t plane = 6 * 6;
  for (int co = 0; co < 4; ++co)
    for (int64_t i = 0; i < plane; ++i) {
      float expect = open[co] ? full.data()[co * plane + i] : 0.f;
      CHECK(masked.data()[co * plane + i] == doctest::Approx(expect));
    }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(99);
  Tensor x = random_tensor({2, 2, 5, 5}, rng, 0.5f);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5f);
  Tensor b = random_tensor({3}, rng, 0.5f);
  grad_check({&x, &w, &b}, [&] { return mean_all(conv2d(x, w, b, 2, 1)); });
  // Also through relu to exercise a composite path.
  grad_check({&x, &w}, [&] { return mean_all(relu(conv2d(x, w, b, 1, 1))); });
}

TEST_CASE("linear matches frozen example and finite differences") {
  // y = w x + b with w = [[2]], b = [3], x = [5] -> 13.
  Tensor x({1, 1}, std::vector<float>{5.f});
  Tensor w({1, 1}, std::vector<float>{2.f});
  Tensor b({1}, std::vector<float>{3.f});
  CHECK(linear(x, w, b).item() == doctest::Approx(13.f));

  Rng rng(5);
  Tensor x2 = random_tensor({3, 4}, rng);
  Tensor w2 = random_tensor({2, 4}, rng);
  Tensor b2 = random_tensor({2}, rng);
  grad_check({&x2, &w2, &b2}, [&] { return mean_all(linear(x2, w2, b2)); });
}

TEST_CASE("elementwise ops and their gradients") {
  Rng rng(11);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2, 3}, rng);
  grad_check({&a, &b}, [&] { return mean_all(mul(add(a, b), sub(a, b))); });
  grad_check({&a}, [&] { return mean_all(sigmoid(a)); });
  grad_check({&a}, [&] { return mean_all(tanh_act(a)); });
  grad_check({&a}, [&] { return mean_all(one_minus(scale(a, 2.5f))); });

  Tensor z({1, 3}, std::vector<float>{-1.f, 0.f, 2.f});
  Tensor r = relu(z);
  CHECK(r.data()[0] == 0.f);
  CHECK(r.data()[1] == 0.f);
  CHECK(r.data()[2] == 2.f);
}

TEST_CASE("pooling ops against hand-computed values and gradients") {
  Tensor x({1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) x.data()[i] = static_cast<float>(i);
  Tensor mp = max_pool2d(x, 2, 2);
  CHECK(mp.vec() == std::vector<float>{5, 7, 13, 15});
  Tensor ap = avg_pool2d(x, 2, 2);
  CHECK(ap.vec() == std::vector<float>{2.5f, 4.5f, 10.5f, 12.5f});
  Tensor gp = global_avg_pool(x);
  CHECK(gp.item() == doctest::Approx(7.5f));

  // Max pooling is flat away from argmax crossings; keep values well separated
  // so central differences never straddle a crossing.
  Rng rng(21);
  Tensor y({2, 3, 6, 6});
  {
    std::vector<int> order(y.numel());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = 0.1f * order[i];
  }
  grad_check({&y}, [&] { return mean_all(max_pool2d(y, 2, 2)); });
  for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = rng.normal(0.f, 1.f);
  grad_check({&y}, [&] { return mean_all(avg_pool2d(y, 3, 1)); });
  grad_check({&y}, [&] { return mean_all(global_avg_pool(y)); });
}

TEST_CASE("max_pool ties route gradient to first element in row-major order") {
  Tensor x({1, 1, 2, 2}, std::vector<float>{3.f, 3.f, 3.f, 3.f});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = sum_all(max_pool2d(x, 2, 2));
    tape.backward(y);
  }
  CHECK(x.impl()->grad[0] == 1.f);
  CHECK(x.impl()->grad[1] == 0.f);
  CHECK(x.impl()->grad[2] == 0.f);
  CHECK(x.impl()->grad[3] == 0.f);
}

TEST_CASE("batch norm normalizes batch statistics in train mode") {
  Rng rng(31);
  Tensor x = random_tensor({4, 3, 5, 5}, rng, 2.f);
  ParamList params;
  BatchNorm2d bn(params, "bn", 3);
  Tensor y = bn.forward(x, true);
  int64_t hw = 25, m = 4 * hw;
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (int n = 0; n < 4; ++n)
      for (int64_t i = 0; i < hw; ++i) mean += y.data()[(n * 3 + c) * hw + i];
    mean /= m;
    for (int n = 0; n < 4; ++n)
      for (int64_t i = 0; i < hw; ++i) {
        double d = y.data()[(n * 3 + c) * hw + i] - mean;
        var += d * d;
      }
    var /= m;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-2));
  }
  // Running stats moved toward batch stats.
  CHECK(bn.running_mean().data()[0] != 0.f);
  CHECK(bn.running_var().data()[0] != 1.f);
}

TEST_CASE("batch norm eval mode uses running statistics and is per-sample") {
  Rng rng(32);
  ParamList params;
  BatchNorm2d bn(params, "bn", 2);
  Tensor warm = random_tensor({8, 2, 4, 4}, rng, 1.5f);
  bn.forward(warm, true);

  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  Tensor both = bn.forward(x, false);
  // Evaluating one sample alone must give identical values: no batch coupling.
  Tensor first = slice_channels(Tensor({1, 2, 4, 4}, std::vector<float>(
                                                         x.vec().begin(),
                                                         x.vec().begin() + 32)),
                                0, 2);
  Tensor out1 = bn.forward(first, false);
  for (int64_t i = 0; i < out1.numel(); ++i)
    CHECK(out1.data()[i] == doctest::Approx(both.data()[i]));
}

TEST_CASE("batch norm gradients match finite differences") {
  Rng rng(33);
  Tensor x = random_tensor({3, 2, 4, 4}, rng);
  ParamList params;
  BatchNorm2d bn(params, "bn", 2);
  // Perturb gamma/beta away from the identity so gradients are informative.
  for (auto& p : params)
    for (int64_t i = 0; i < p->value.numel(); ++i)
      p->value.data()[i] += rng.normal(0.f, 0.2f);

  // Train mode: running stats mutate per call, so snapshot and restore around
  // each finite-difference evaluation to keep f deterministic.
  auto rm = bn.running_mean().vec();
  auto rv = bn.running_var().vec();
  auto reset = [&] {
    bn.running_mean().vec() = rm;
    bn.running_var().vec() = rv;
  };
  Tensor& gamma = params[0]->value;
  Tensor& beta = params[1]->value;
  auto loss_fn = [&] {
    reset();
    Tensor sq = mul(bn.forward(x, true), bn.forward(x, true));
    return mean_all(sq);
  };
  grad_check({&x, &gamma, &beta}, loss_fn);

  reset();
  grad_check({&x, &gamma, &beta}, [&] { return mean_all(bn.forward(x, false)); });
}

TEST_CASE("scale_channels broadcasts and differentiates") {
  Rng rng(41);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor g = random_tensor({2, 3}, rng);
  Tensor y = scale_channels(x, g);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      CHECK(y.data()[(n * 3 + c) * 16] ==
            doctest::Approx(x.data()[(n * 3 + c) * 16] * g.data()[n * 3 + c]));
  grad_check({&x, &g}, [&] { return mean_all(scale_channels(x, g)); });

  Tensor g1 = random_tensor({2, 1}, rng);
  Tensor y1 = scale_channels(x, g1);
  CHECK(y1.data()[16] == doctest::Approx(x.data()[16] * g1.data()[0]));
  grad_check({&x, &g1}, [&] { return mean_all(scale_channels(x, g1)); });
}

TEST_CASE("concat and slice round-trip with gradient routing") {
  Rng rng(51);
  Tensor a = random_tensor({2, 2, 3, 3}, rng);
  Tensor b = random_tensor({2, 3, 3, 3}, rng);
  Tensor cat = concat_channels({a, b});
  REQUIRE(cat.shape() == Shape{2, 5, 3, 3});
  Tensor back_a = slice_channels(cat, 0, 2);
  Tensor back_b = slice_channels(cat, 2, 3);
  check_close(back_a.vec(), a.vec(), 1e-6f);
  check_close(back_b.vec(), b.vec(), 1e-6f);
  grad_check({&a, &b}, [&] {
    Tensor c = concat_channels({a, b});
    return mean_all(mul(c, c));
  });
}

TEST_CASE("softmax cross entropy: uniform logits give ln K") {
  Tensor logits({2, 10}, 0.f);
  Tensor loss = softmax_cross_entropy(logits, {3, 7});
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-5));

  Rng rng(61);
  Tensor l2 = random_tensor({4, 5}, rng);
  grad_check({&l2}, [&] { return softmax_cross_entropy(l2, {0, 2, 4, 1}); });
}

TEST_CASE("lstm cell agrees with scalar oracle") {
  Rng rng(71);
  ParamList params;
  LSTMCell cell(params, "lstm", 3, 2, 0.5f, rng);
  Tensor x = random_tensor({1, 3}, rng);
  auto st = cell.initial_state(1);
  auto s1 = cell.step(x, st);
  auto s2 = cell.step(x, s1);

  // Scalar replay: pre = w_ih x + b + w_hh h, gates [i,f,g,o].
  const auto& wih = params[0]->value.vec();
  const auto& whh = params[1]->value.vec();
  const auto& bias = params[2]->value.vec();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> h(2, 0.0), c(2, 0.0);
  for (int step = 0; step < 2; ++step) {
    std::vector<double> pre(8, 0.0);
    for (int r = 0; r < 8; ++r) {
      double acc = bias[r];
      for (int k = 0; k < 3; ++k) acc += wih[r * 3 + k] * x.data()[k];
      for (int k = 0; k < 2; ++k) acc += whh[r * 2 + k] * h[k];
      pre[r] = acc;
    }
    std::vector<double> hn(2), cn(2);
    for (int j = 0; j < 2; ++j) {
      double i = sig(pre[j]), f = sig(pre[2 + j]), g = std::tanh(pre[4 + j]),
             o = sig(pre[6 + j]);
      cn[j] = f * c[j] + i * g;
      hn[j] = o * std::tanh(cn[j]);
    }
    h = hn;
    c = cn;
  }
  CHECK(s2.h.data()[0] == doctest::Approx(h[0]).epsilon(1e-4));
  CHECK(s2.h.data()[1] == doctest::Approx(h[1]).epsilon(1e-4));
  CHECK(s2.c.data()[0] == doctest::Approx(c[0]).epsilon(1e-4));
  CHECK(s2.c.data()[1] == doctest::Approx(c[1]).epsilon(1e-4));
}

TEST_CASE("lstm cell gradients flow through two steps") {
  Rng rng(72);
  ParamList params;
  LSTMCell cell(params, "lstm", 2, 2, 0.5f, rng);
  Tensor x1 = random_tensor({2, 2}, rng);
  Tensor x2 = random_tensor({2, 2}, rng);
  std::vector<Tensor*> ps{&x1, &x2};
  for (auto& p : params) ps.push_back(&p->value);
  grad_check(ps, [&] {
    auto s = cell.step(x1, cell.initial_state(2));
    auto s2 = cell.step(x2, s);
    return mean_all(s2.h);
  });
}

TEST_CASE("dot_const and reductions") {
  Tensor x({3}, std::vector<float>{1.f, 2.f, 3.f});
  CHECK(sum_all(x).item() == doctest::Approx(6.f));
  CHECK(mean_all(x).item() == doctest::Approx(2.f));
  CHECK(dot_const(x, {0.5f, 0.5f, 1.f}).item() == doctest::Approx(4.5f));
  Rng rng(81);
  Tensor y = random_tensor({4}, rng);
  grad_check({&y}, [&] { return dot_const(y, {1.f, -2.f, 0.5f, 3.f}); });
}

TEST_CASE("tape skips branches whose output gradient is never touched") {
  Tensor a({1}, std::vector<float>{2.f});
  a.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor used = scale(a, 3.f);
    Tensor unused = scale(a, 100.f);  // never feeds the loss
    (void)unused;
    tape.backward(sum_all(used));
  }
  CHECK(a.impl()->grad[0] == doctest::Approx(3.f));
}

TEST_CASE("no-grad guard suppresses recording") {
  Tensor a({1}, std::vector<float>{2.f});
  a.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    NoGradGuard ng;
    Tensor y = scale(a, 3.f);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("shape mismatches raise descriptive errors") {
  Tensor a({2, 3});
  Tensor b({3, 2});
  CHECK_THROWS_AS(add(a, b), ShapeError);
  Tensor x({1, 2, 4, 4});
  Tensor w({1, 3, 3, 3});  // channel mismatch
  CHECK_THROWS_AS(conv2d(x, w, 1, 1), ShapeError);
  CHECK_THROWS_AS(slice_channels(x, 1, 5), ShapeError);
}

TEST_CASE("results are bitwise identical across thread counts") {
  Rng rng(91);
  Tensor x = random_tensor({2, 8, 12, 12}, rng);
  Tensor w = random_tensor({16, 8, 3, 3}, rng);
  set_num_threads(1);
  Tensor y1 = conv2d(x, w, 1, 1);
  set_num_threads(4);
  Tensor y4 = conv2d(x, w, 1, 1);
  set_num_threads(3);
  Tensor y3 = conv2d(x, w, 1, 1);
  set_num_threads(1);
  for (int64_t i = 0; i < y1.numel(); ++i) {
    CHECK(y1.data()[i] == y4.data()[i]);
    CHECK(y1.data()[i] == y3.data()[i]);
  }
}

TEST_CASE("substreams with different names decorrelate, same name reproduces") {
  Rng a = Rng::substream(42, "weights");
  Rng a2 = Rng::substream(42, "weights");
  Rng b = Rng::substream(42, "shuffle");
  bool all_same_ab = true;
  for (int i = 0; i < 16; ++i) {
    float va = a.normal(0.f, 1.f), va2 = a2.normal(0.f, 1.f),
          vb = b.normal(0.f, 1.f);
    CHECK(va == va2);
    all_same_ab = all_same_ab && (va == vb);
  }
  CHECK_FALSE(all_same_ab);
}
