#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtvision/errors.hpp"
#include "mtvision/losses.hpp"
#include "mtvision/rng.hpp"
#include "mtvision/tensor.hpp"
#include "testutil.hpp"

using namespace mtv;
using testutil::grad_check;

namespace {

Tensor randn(const Shape& s, Rng& rng, double scale = 1.0, double shift = 0.0) {
  long n = 1;
  for (int d : s) n *= d;
  std::vector<Real> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal() * scale + shift;
  return Tensor::from_vector(s, std::move(v), true);
}

// Fixed-weight scalarizer so non-scalar outputs get nontrivial gradients.
Tensor wsum(const Tensor& t, std::uint64_t seed = 5) {
  Rng rng(seed);
  std::vector<Real> w(static_cast<std::size_t>(t.numel()));
  for (auto& x : w) x = 0.25 + rng.uniform();
  Shape s;
  for (int i = 0; i < t.ndim(); ++i) s.push_back(t.dim(i));
  return sum(mul(t, Tensor::from_vector(s, std::move(w))));
}

constexpr double kTol = 2e-4;

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("construction and scalar access") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.numel() == 6);
    CHECK(z.ndim() == 2);
    CHECK(z.dim(1) == 3);
    CHECK(Tensor::full({2}, 7.0).data()[1] == 7.0);
    CHECK(Tensor::scalar(3.5).item() == 3.5);
    CHECK_THROWS_AS(Tensor::from_vector({3}, {1.0, 2.0}), ShapeError);
  }

  TEST_CASE("elementwise forward values") {
    Tensor a = Tensor::from_vector({4}, {1, 2, 3, 4});
    Tensor b = Tensor::from_vector({4}, {4, 3, 2, 1});
    CHECK(add(a, b).data()[0] == 5.0);
    CHECK(sub(a, b).data()[3] == 3.0);
    CHECK(mul(a, b).data()[1] == 6.0);
    CHECK(div(a, b).data()[2] == 1.5);
    CHECK(minimum(a, b).data()[0] == 1.0);
    CHECK(maximum(a, b).data()[0] == 4.0);
    CHECK(add_scalar(a, 0.5).data()[0] == 1.5);
    CHECK(mul_scalar(a, -2.0).data()[1] == -4.0);
    CHECK(neg(a).data()[2] == -3.0);
    CHECK(square(a).data()[3] == 16.0);

    Tensor x = Tensor::from_vector({3}, {0.0, 1.0, -1.0});
    CHECK(exp(x).data()[1] == doctest::Approx(std::exp(1.0)));
    CHECK(sigmoid(x).data()[0] == doctest::Approx(0.5));
    CHECK(silu(x).data()[0] == 0.0);
    CHECK(gelu(x).data()[0] == 0.0);
    CHECK(softplus(x).data()[0] == doctest::Approx(std::log(2.0)));
    CHECK(atan(Tensor::scalar(1.0)).item() == doctest::Approx(std::atan(1.0)));
    CHECK(log(Tensor::scalar(std::exp(2.0))).item() == doctest::Approx(2.0));
    CHECK(sqrt(Tensor::scalar(9.0)).item() == doctest::Approx(3.0));
    CHECK(clamp_min(x, 0.25).data()[0] == 0.25);
    CHECK(clamp_max(x, 0.25).data()[1] == 0.25);
  }

  TEST_CASE("elementwise gradients match finite differences") {
    Rng rng(101);
    // Positive leaf keeps log/sqrt in-domain and away from clamp kinks.
    Tensor x = randn({2, 5}, rng, 0.3, 2.0);
    Tensor c = randn({2, 5}, rng, 0.3, 4.0).detach();

    const std::vector<std::pair<std::string, std::function<Tensor()>>> cases = {
        {"add", [&] { return wsum(add(x, c)); }},
        {"sub", [&] { return wsum(sub(c, x)); }},
        {"mul", [&] { return wsum(mul(x, c)); }},
        {"div_num", [&] { return wsum(div(x, c)); }},
        {"div_den", [&] { return wsum(div(c, x)); }},
        {"minimum", [&] { return wsum(minimum(x, c)); }},
        {"maximum", [&] { return wsum(maximum(x, c)); }},
        {"neg", [&] { return wsum(neg(x)); }},
        {"exp", [&] { return wsum(exp(mul_scalar(x, 0.5))); }},
        {"log", [&] { return wsum(log(x)); }},
        {"sqrt", [&] { return wsum(sqrt(x)); }},
        {"atan", [&] { return wsum(atan(x)); }},
        {"square", [&] { return wsum(square(x)); }},
        {"sigmoid", [&] { return wsum(sigmoid(x)); }},
        {"silu", [&] { return wsum(silu(x)); }},
        {"gelu", [&] { return wsum(gelu(x)); }},
        {"softplus", [&] { return wsum(softplus(x)); }},
        {"clamp_min", [&] { return wsum(clamp_min(x, 0.5)); }},
        {"clamp_max", [&] { return wsum(clamp_max(x, 10.0)); }},
        {"scalar_ops", [&] { return wsum(add_scalar(mul_scalar(x, 1.5), -0.25)); }},
        {"mean", [&] { return mean(square(x)); }},
    };
    for (const auto& [name, fn] : cases) {
      INFO("op: " << name);
      auto stats = grad_check(x, fn, 6, 1e-5, rng);
      CHECK(stats.max_rel < kTol);
    }
  }

  TEST_CASE("shape ops roundtrip and carry gradients") {
    Rng rng(102);
    Tensor x = randn({2, 3, 4}, rng);

    Tensor r = reshape(x, {4, 6});
    CHECK(r.dim(0) == 4);
    CHECK(r.data()[5] == x.data()[5]);

    Tensor p = permute(x, {2, 0, 1});
    CHECK(p.dim(0) == 4);
    CHECK(p.dim(2) == 3);
    // (n0,n1,n2) -> axis order (2,0,1): p[k][i][j] == x[i][j][k]
    CHECK(p.data()[(1 * 2 + 0) * 3 + 2] == x.data()[(0 * 3 + 2) * 4 + 1]);

    Tensor s0 = slice(x, 1, 0, 2);
    Tensor s1 = slice(x, 1, 2, 1);
    Tensor back = concat({s0, s1}, 1);
    REQUIRE(back.numel() == x.numel());
    for (long i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);

    auto through = [&](auto f) { return grad_check(x, f, 6, 1e-5, rng).max_rel; };
    CHECK(through([&] { return wsum(reshape(x, {6, 4})); }) < kTol);
    CHECK(through([&] { return wsum(permute(x, {1, 2, 0})); }) < kTol);
    CHECK(through([&] { return wsum(concat({slice(x, 2, 1, 3), slice(x, 2, 0, 1)}, 2)); }) < kTol);

    CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
    CHECK_THROWS_AS(slice(x, 1, 2, 5), ShapeError);
  }

  TEST_CASE("matmul matches the hand-computed product") {
    Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_vector({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.data()[0] == 19.0);
    CHECK(c.data()[1] == 22.0);
    CHECK(c.data()[2] == 43.0);
    CHECK(c.data()[3] == 50.0);
    CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
  }

  TEST_CASE("matmul and linear gradients") {
    Rng rng(103);
    Tensor a = randn({3, 4}, rng);
    Tensor b = randn({4, 2}, rng);
    Tensor bias = randn({2}, rng);
    CHECK(grad_check(a, [&] { return wsum(matmul(a, b)); }, 6, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(b, [&] { return wsum(matmul(a, b)); }, 6, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(a, [&] { return wsum(linear(a, b, bias)); }, 6, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(b, [&] { return wsum(linear(a, b, bias)); }, 6, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(bias, [&] { return wsum(linear(a, b, bias)); }, 4, 1e-5, rng).max_rel < kTol);
  }

  TEST_CASE("bmm handles both transpose flags") {
    Rng rng(104);
    Tensor a = randn({2, 3, 4}, rng);
    Tensor b = randn({2, 4, 5}, rng);
    Tensor plain = bmm(a, b);
    REQUIRE(plain.ndim() == 3);
    CHECK(plain.dim(1) == 3);
    CHECK(plain.dim(2) == 5);

    // Per-batch agreement with matmul.
    for (int n = 0; n < 2; ++n) {
      Tensor ma = slice(a, 0, n, 1), mb = slice(b, 0, n, 1);
      Tensor ref = matmul(reshape(ma, {3, 4}), reshape(mb, {4, 5}));
      for (long i = 0; i < 15; ++i)
        CHECK(plain.data()[n * 15 + i] == doctest::Approx(ref.data()[i]));
    }

    Tensor at = permute(a, {0, 2, 1}).detach();  // (2,4,3)
    Tensor bt = permute(b, {0, 2, 1}).detach();  // (2,5,4)
    Tensor via_ta = bmm(at, b, true, false);
    Tensor via_tb = bmm(a, bt, false, true);
    for (long i = 0; i < plain.numel(); ++i) {
      CHECK(via_ta.data()[i] == doctest::Approx(plain.data()[i]));
      CHECK(via_tb.data()[i] == doctest::Approx(plain.data()[i]));
    }

    CHECK(grad_check(a, [&] { return wsum(bmm(a, b)); }, 6, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(b, [&] { return wsum(bmm(a, b)); }, 6, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(b, [&] { return wsum(bmm(at, b, true, false)); }, 6, 1e-5, rng).max_rel <
          kTol);
    CHECK(grad_check(a, [&] { return wsum(bmm(a, bt, false, true)); }, 6, 1e-5, rng).max_rel <
          kTol);
  }

  TEST_CASE("conv2d matches a direct convolution oracle") {
    Rng rng(105);
    Tensor x = randn({2, 3, 5, 6}, rng);
    Tensor w = randn({4, 3, 3, 3}, rng);
    Tensor b = randn({4}, rng);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
      Tensor y = conv2d(x, w, b, stride, pad);
      const int oh = (5 + 2 * pad - 3) / stride + 1;
      const int ow = (6 + 2 * pad - 3) / stride + 1;
      REQUIRE(y.dim(2) == oh);
      REQUIRE(y.dim(3) == ow);
      for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 4; ++o)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              double acc = b.data()[o];
              for (int c = 0; c < 3; ++c)
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    const int iy = oy * stride + ky - pad;
                    const int ix = ox * stride + kx - pad;
                    if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                    acc += x.data()[((n * 3 + c) * 5 + iy) * 6 + ix] *
                           w.data()[((o * 3 + c) * 3 + ky) * 3 + kx];
                  }
              CHECK(y.data()[((n * 4 + o) * oh + oy) * ow + ox] == doctest::Approx(acc));
            }
    }
  }

  TEST_CASE("conv2d gradients") {
    Rng rng(106);
    Tensor x = randn({1, 2, 4, 4}, rng);
    Tensor w = randn({3, 2, 3, 3}, rng);
    Tensor b = randn({3}, rng);
    auto loss = [&] { return wsum(conv2d(x, w, b, 2, 1)); };
    CHECK(grad_check(x, loss, 8, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(w, loss, 8, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(b, loss, 3, 1e-5, rng).max_rel < kTol);
  }

  TEST_CASE("upsample_nearest2x duplicates pixels") {
    Rng rng(107);
    Tensor x = randn({1, 2, 2, 3}, rng);
    Tensor y = upsample_nearest2x(x);
    REQUIRE(y.dim(2) == 4);
    REQUIRE(y.dim(3) == 6);
    for (int c = 0; c < 2; ++c)
      for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 6; ++ox)
          CHECK(y.data()[(c * 4 + oy) * 6 + ox] ==
                x.data()[(c * 2 + oy / 2) * 3 + ox / 2]);
    CHECK(grad_check(x, [&] { return wsum(upsample_nearest2x(x)); }, 6, 1e-5, rng).max_rel < kTol);
  }

  TEST_CASE("group_norm normalizes each group") {
    Rng rng(108);
    Tensor x = randn({2, 4, 3, 3}, rng, 2.0, 1.0);
    Tensor gamma = Tensor::full({4}, 1.0, true);
    Tensor beta = Tensor::zeros({4}, true);
    Tensor y = group_norm(x, gamma, beta, 2);
    for (int n = 0; n < 2; ++n)
      for (int g = 0; g < 2; ++g) {
        double s = 0, s2 = 0;
        const long cnt = 2 * 9;
        for (int c = g * 2; c < g * 2 + 2; ++c)
          for (int i = 0; i < 9; ++i) {
            double v = y.data()[(n * 4 + c) * 9 + i];
            s += v;
            s2 += v * v;
          }
        CHECK(s / cnt == doctest::Approx(0.0).epsilon(1e-6));
        CHECK(s2 / cnt == doctest::Approx(1.0).epsilon(1e-3));
      }
    auto loss = [&] { return wsum(group_norm(x, gamma, beta, 2)); };
    CHECK(grad_check(x, loss, 8, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(gamma, loss, 4, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(beta, loss, 4, 1e-5, rng).max_rel < kTol);
  }

  TEST_CASE("layer_norm normalizes the last dimension") {
    Rng rng(109);
    Tensor x = randn({3, 5}, rng, 3.0, -1.0);
    Tensor gamma = Tensor::full({5}, 1.0, true);
    Tensor beta = Tensor::zeros({5}, true);
    Tensor y = layer_norm(x, gamma, beta);
    for (int r = 0; r < 3; ++r) {
      double s = 0, s2 = 0;
      for (int cidx = 0; cidx < 5; ++cidx) {
        double v = y.data()[r * 5 + cidx];
        s += v;
        s2 += v * v;
      }
      CHECK(s / 5 == doctest::Approx(0.0).epsilon(1e-6));
      CHECK(s2 / 5 == doctest::Approx(1.0).epsilon(1e-2));
    }
    auto loss = [&] { return wsum(layer_norm(x, gamma, beta)); };
    CHECK(grad_check(x, loss, 8, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(gamma, loss, 4, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(beta, loss, 4, 1e-5, rng).max_rel < kTol);
  }

  TEST_CASE("channel broadcast ops") {
    Rng rng(110);
    Tensor x = randn({2, 3, 2, 2}, rng);
    Tensor v = randn({3}, rng);
    Tensor ym = mul_channel(x, v);
    Tensor ya = add_channel(x, v);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i) {
          CHECK(ym.data()[(n * 3 + c) * 4 + i] ==
                doctest::Approx(x.data()[(n * 3 + c) * 4 + i] * v.data()[c]));
          CHECK(ya.data()[(n * 3 + c) * 4 + i] ==
                doctest::Approx(x.data()[(n * 3 + c) * 4 + i] + v.data()[c]));
        }
    CHECK(grad_check(x, [&] { return wsum(mul_channel(x, v)); }, 6, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(v, [&] { return wsum(mul_channel(x, v)); }, 3, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(v, [&] { return wsum(add_channel(x, v)); }, 3, 1e-5, rng).max_rel < kTol);
  }

  TEST_CASE("gather_locations picks the addressed cells") {
    Rng rng(111);
    Tensor x = randn({2, 3, 4, 5}, rng);
    std::vector<GridLoc> locs = {{0, 1, 2}, {1, 3, 4}, {0, 0, 0}};
    Tensor g = gather_locations(x, locs);
    REQUIRE(g.dim(0) == 3);
    REQUIRE(g.dim(1) == 3);
    for (std::size_t m = 0; m < locs.size(); ++m)
      for (int c = 0; c < 3; ++c)
        CHECK(g.data()[m * 3 + c] ==
              x.data()[((locs[m].n * 3 + c) * 4 + locs[m].y) * 5 + locs[m].x]);
    CHECK(grad_check(x, [&] { return wsum(gather_locations(x, locs)); }, 8, 1e-5, rng).max_rel <
          kTol);
  }

  TEST_CASE("crop_hw extracts the window") {
    Rng rng(112);
    Tensor x = randn({2, 2, 5, 6}, rng);
    Tensor c = crop_hw(x, 1, 1, 4, 2, 5);
    REQUIRE(c.ndim() == 3);
    REQUIRE(c.dim(1) == 3);
    REQUIRE(c.dim(2) == 3);
    for (int ch = 0; ch < 2; ++ch)
      for (int y = 0; y < 3; ++y)
        for (int xx = 0; xx < 3; ++xx)
          CHECK(c.data()[(ch * 3 + y) * 3 + xx] ==
                x.data()[((1 * 2 + ch) * 5 + (y + 1)) * 6 + (xx + 2)]);
    CHECK(grad_check(x, [&] { return wsum(crop_hw(x, 0, 0, 2, 1, 3)); }, 6, 1e-5, rng).max_rel <
          kTol);
  }

  TEST_CASE("embedding gathers rows and accumulates repeated-id grads") {
    Rng rng(113);
    Tensor table = randn({6, 4}, rng);
    std::vector<int> ids = {2, 5, 2, 0};
    Tensor e = embedding(table, ids, {2, 2});
    REQUIRE(e.ndim() == 3);
    CHECK(e.dim(2) == 4);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int d = 0; d < 4; ++d)
        CHECK(e.data()[i * 4 + d] == table.data()[ids[i] * 4 + d]);
    CHECK(grad_check(table, [&] { return wsum(embedding(table, ids, {4})); }, 8, 1e-5, rng)
              .max_rel < kTol);
    CHECK_THROWS_AS(embedding(table, {6}, {1}), RangeError);
  }

  TEST_CASE("softmax_lastdim rows sum to one and respect the mask") {
    Rng rng(114);
    Tensor x = randn({3, 4}, rng, 2.0);
    Tensor p = softmax_lastdim(x);
    for (int r = 0; r < 3; ++r) {
      double s = 0;
      for (int c = 0; c < 4; ++c) s += p.data()[r * 4 + c];
      CHECK(s == doctest::Approx(1.0));
    }
    // Manual check on row 0.
    double denom = 0;
    for (int c = 0; c < 4; ++c) denom += std::exp(x.data()[c]);
    CHECK(p.data()[1] == doctest::Approx(std::exp(x.data()[1]) / denom));

    Tensor m = Tensor::from_vector({4}, {0.0, -1e9, 0.0, -1e9});
    Tensor pm = softmax_lastdim(x, &m);
    for (int r = 0; r < 3; ++r) {
      CHECK(pm.data()[r * 4 + 1] == doctest::Approx(0.0));
      CHECK(pm.data()[r * 4 + 3] == doctest::Approx(0.0));
      CHECK(pm.data()[r * 4 + 0] + pm.data()[r * 4 + 2] == doctest::Approx(1.0));
    }
    CHECK(grad_check(x, [&] { return wsum(softmax_lastdim(x)); }, 8, 1e-5, rng).max_rel < kTol);
    CHECK(grad_check(x, [&] { return wsum(softmax_lastdim(x, &m)); }, 8, 1e-5, rng).max_rel <
          kTol);
  }

  TEST_CASE("bce_with_logits_mean values and gradient") {
    Tensor z = Tensor::zeros({3}, false);
    Tensor t = Tensor::from_vector({3}, {0.0, 1.0, 0.5});
    CHECK(bce_with_logits_mean(z, t).item() == doctest::Approx(std::log(2.0)));
    CHECK(bce_with_logits_mean(Tensor::scalar(1.0), Tensor::from_vector({1}, {1.0})).item() ==
          doctest::Approx(std::log(1.0 + std::exp(-1.0))));
    // Stability at extreme logits.
    CHECK(std::isfinite(
        bce_with_logits_mean(Tensor::from_vector({2}, {50.0, -50.0}),
                             Tensor::from_vector({2}, {0.0, 1.0}))
            .item()));

    Rng rng(115);
    Tensor x = randn({2, 6}, rng, 2.0);
    Tensor targets = Tensor::from_vector({2, 6}, {1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 0});
    CHECK(grad_check(x, [&] { return bce_with_logits_mean(x, targets); }, 8, 1e-5, rng).max_rel <
          kTol);
  }

  TEST_CASE("softmax_xent_mean values, row masking, and gradient") {
    Tensor uniform = Tensor::zeros({2, 7});
    CHECK(softmax_xent_mean(uniform, {3, 0}).item() == doctest::Approx(std::log(7.0)));

    Rng rng(116);
    Tensor x = randn({3, 4}, rng, 2.0);
    std::vector<int> targets = {1, 3, 0};
    std::vector<std::uint8_t> valid = {1, 0, 1};
    // Manual masked mean over rows 0 and 2.
    double expect = 0;
    for (int r : {0, 2}) {
      double denom = 0;
      for (int c = 0; c < 4; ++c) denom += std::exp(x.data()[r * 4 + c]);
      expect += -std::log(std::exp(x.data()[r * 4 + targets[r]]) / denom);
    }
    expect /= 2.0;
    CHECK(softmax_xent_mean(x, targets, &valid).item() == doctest::Approx(expect));

    std::vector<std::uint8_t> none = {0, 0, 0};
    CHECK(softmax_xent_mean(x, targets, &none).item() == 0.0);

    CHECK(grad_check(x, [&] { return softmax_xent_mean(x, targets, &valid); }, 8, 1e-5, rng)
              .max_rel < kTol);
  }

  TEST_CASE("ciou_scalar on same-aspect boxes reduces to iou minus center term") {
    // 2x2 boxes offset by (1,1): IoU 1/7, rho^2 = 2, c^2 = 18, v = 0.
    CHECK(losses::ciou_scalar({0, 0, 2, 2}, {1, 1, 3, 3}) ==
          doctest::Approx(1.0 / 7.0 - 2.0 / 18.0));
    CHECK(losses::ciou_scalar({0, 0, 2, 2}, {0, 0, 2, 2}) == doctest::Approx(1.0));
    CHECK(losses::ciou_scalar({0, 0, 1, 1}, {8, 8, 9, 9}) < 0.0);
    CHECK(losses::ciou_scalar({0, 0, 4, 2}, {0, 0, 4, 2}) == doctest::Approx(1.0));
  }

  TEST_CASE("gradient bookkeeping") {
    Tensor x = Tensor::from_vector({2}, {1.0, 2.0}, true);
    Tensor loss = sum(square(x));
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    // Gradients accumulate until zero_grad.
    sum(square(x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    x.zero_grad();
    CHECK(!x.has_grad());
    // detach blocks the flow.
    sum(square(x.detach())).backward();
    CHECK(!x.has_grad());
  }

  TEST_CASE("all_finite flags infinities and nans") {
    Tensor x = Tensor::from_vector({3}, {1.0, 2.0, 3.0});
    CHECK(all_finite(x));
    x.data()[1] = std::numeric_limits<double>::infinity();
    CHECK(!all_finite(x));
    x.data()[1] = std::nan("");
    CHECK(!all_finite(x));
  }
}
