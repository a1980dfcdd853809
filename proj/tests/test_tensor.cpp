#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "nlxct/gradcheck.hpp"
#include "nlxct/ops.hpp"
#include "nlxct/rng.hpp"

using namespace nlxct;
using Catch::Approx;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool grad = false) {
  Tensor t(std::move(shape), 0.0, grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Independent reference implementations.
std::vector<double> triple_loop_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

std::vector<double> direct_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3), og = O / groups;
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(B * O * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          const std::size_t g = o / og;
          for (std::size_t c = 0; c < cg; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = long(oy * stride + ky) - long(pad), ix = long(ox * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                acc += x[((b * C + g * cg + c) * H + iy) * W + ix] * w[((o * cg + c) * kh + ky) * kw + kx];
              }
          out[((b * O + o) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("value and gradient storage is 64-byte aligned", "[tensor][determinism]") {
  // Vectorized reductions sum in an order that depends on buffer alignment.
  auto aligned = [](const double* p) { return reinterpret_cast<std::uintptr_t>(p) % 64 == 0; };
  for (std::size_t n : {1, 3, 17, 1000, 100003}) {
    Tape tape;
    Tensor x({n}, 1.0, true);
    Tensor y = mul(tape, x, x);
    tape.backward(sum(tape, y));
    CHECK(aligned(x.data().data()));
    CHECK(aligned(y.data().data()));
    CHECK(aligned(x.grad().data()));
    CHECK(aligned(Tensor({n}, std::vector<double>(n, 2.0)).data().data()));
  }
}

TEST_CASE("matmul identity, zero and triple-loop oracle", "[tensor][matmul]") {
  Tape tape;
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  Tensor c = matmul(tape, eye, b);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{3, 4, 5, 6});

  Tensor z = matmul(tape, Tensor({1, 2}, {0, 0}), Tensor({2, 1}, {1, 1}));
  CHECK(z.shape() == Shape{1, 1});
  CHECK(z[0] == 0.0);

  Rng rng(11);
  Tensor a = random_tensor(rng, {3, 4});
  Tensor bb = random_tensor(rng, {4, 2});
  Tensor got = matmul(tape, a, bb);
  const auto want = triple_loop_matmul(a, bb);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);

  CHECK_THROWS_AS(matmul(tape, a, a), DimensionError);
}

TEST_CASE("matmul output shapes follow m x n", "[tensor][matmul][property]") {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    Tape tape;
    Tensor c = matmul(tape, random_tensor(rng, {m, k}), random_tensor(rng, {k, n}));
    CHECK(c.shape() == Shape{m, n});
  }
}

TEST_CASE("conv2d matches the nested-loop oracle", "[tensor][conv]") {
  Tape tape;
  SECTION("identity 1x1 kernel") {
    Rng rng(1);
    Tensor x = random_tensor(rng, {2, 3, 5, 4});
    Tensor w({3, 3, 1, 1}, 0.0);
    for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
    Tensor y = conv2d(tape, x, w);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SECTION("zero input") {
    Rng rng(2);
    Tensor y = conv2d(tape, Tensor({1, 2, 6, 6}), random_tensor(rng, {4, 2, 3, 3}), {1, 1, 1});
    for (double v : y.data()) CHECK(v == 0.0);
  }
  SECTION("3x3 ones kernel sums windows") {
    Tensor x({1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = double(i + 1);
    Tensor w({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(tape, x, w);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    const auto want = direct_conv(x, w, 1, 0, 1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == Approx(want[i]).margin(1e-12));
    CHECK(y[0] == Approx(1 + 2 + 3 + 5 + 6 + 7 + 9 + 10 + 11));
  }
  SECTION("random geometries, grouped, strided, padded") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t groups = 1 + rng.below(2);
      const std::size_t C = groups * (1 + rng.below(3)), O = groups * (1 + rng.below(3));
      const std::size_t k = 1 + rng.below(3), s = 1 + rng.below(2), p = rng.below(2);
      const std::size_t H = k + rng.below(6), W = k + rng.below(6);
      Tensor x = random_tensor(rng, {2, C, H, W});
      Tensor w = random_tensor(rng, {O, C / groups, k, k});
      Tensor y = conv2d(tape, x, w, {s, p, groups});
      REQUIRE(y.shape() == Shape{2, O, (H + 2 * p - k) / s + 1, (W + 2 * p - k) / s + 1});
      const auto want = direct_conv(x, w, s, p, groups);
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(y[i] - want[i]) < 1e-12);
    }
  }
  SECTION("kernel larger than padded input") {
    CHECK_THROWS_AS(conv2d(tape, Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3})), DimensionError);
  }
}

TEST_CASE("elementwise definitions", "[tensor][elementwise]") {
  Tape tape;
  Rng rng(9);
  Tensor x = random_tensor(rng, {3, 4});
  Tensor y = add(tape, x, Tensor::scalar(0.0));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  CHECK(gelu(tape, Tensor({1}, {0.0}))[0] == 0.0);
  Tensor r = relu(tape, Tensor({2}, {-2.5, 2.5}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.5);
  CHECK_THROWS_AS(add(tape, x, Tensor({4, 3})), DimensionError);
  CHECK(mul(tape, x, x).shape() == x.shape());
  CHECK(gelu(tape, x).shape() == x.shape());
}

TEST_CASE("softmax cross-entropy", "[tensor][loss]") {
  Tape tape;
  const int label0[] = {0};
  Tensor confident({1, 3}, {60.0, 0.0, 0.0});
  CHECK(softmax_cross_entropy(tape, confident, label0).item() < 1e-20);

  Tensor uniform({2, 7}, 0.5);
  const int labels7[] = {3, 6};
  CHECK(softmax_cross_entropy(tape, uniform, labels7).item() == Approx(std::log(7.0)).epsilon(1e-14));
  CHECK(std::log(7.0) == Approx(1.9459).margin(1e-4));

  Rng rng(4);
  Tensor logits = random_tensor(rng, {4, 3}, -2, 2);
  const int labels[] = {0, 2, 1, 2};
  double oracle = 0.0;
  for (int b = 0; b < 4; ++b) {
    std::vector<double> p(3);
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += p[c] = std::exp(logits[b * 3 + c]);
    oracle += -std::log(p[labels[b]] / s);
  }
  oracle /= 4.0;
  CHECK(std::abs(softmax_cross_entropy(tape, logits, labels).item() - oracle) < 1e-10);

  const int bad[] = {0, 3, 1, 2};
  CHECK_THROWS_AS(softmax_cross_entropy(tape, logits, bad), IndexError);

  const double w[] = {1.0, 2.0, 4.0};
  double num = 0.0, den = 0.0;
  for (int b = 0; b < 4; ++b) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += std::exp(logits[b * 3 + c]);
    num += w[labels[b]] * -std::log(std::exp(logits[b * 3 + labels[b]]) / s);
    den += w[labels[b]];
  }
  CHECK(softmax_cross_entropy(tape, logits, labels, std::span<const double>(w)).item() == Approx(num / den).epsilon(1e-12));
}

TEST_CASE("softmax stays finite for large logits", "[tensor][loss][property]") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = random_tensor(rng, {3, 5}, -1e3, 1e3, true);
    const int labels[] = {0, 4, 2};
    Tape tape;
    Tensor loss = softmax_cross_entropy(tape, logits, labels);
    CHECK(std::isfinite(loss.item()));
    tape.backward(loss);
    CHECK(all_finite(logits.grad()));
  }
}

TEST_CASE("backward basics", "[tensor][backward]") {
  Rng rng(2);
  Tensor x = random_tensor(rng, {3, 2}, -1, 1, true);
  {
    Tape tape;
    tape.backward(sum(tape, x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  x.zero_grad();
  {
    Tape tape;
    tape.backward(sum(tape, mul(tape, x, x)));
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == Approx(2.0 * x[i]));
  }
  SECTION("non-scalar loss is a contract error") {
    Tape tape;
    Tensor y = mul(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  SECTION("second backward on the same tape is rejected") {
    Tape tape;
    Tensor loss = sum(tape, x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
  }
  SECTION("loss from another tape is rejected") {
    Tape a, b;
    Tensor loss = sum(a, x);
    CHECK_THROWS_AS(b.backward(loss), ContractError);
  }
}

TEST_CASE("finite_diff_check examples", "[tensor][gradcheck]") {
  Tensor w({2}, {1.0, 2.0});
  auto quad = finite_diff_check([&](Tape& t) { return sum(t, mul(t, w, w)); }, {{"w", w}});
  CHECK(quad.max_rel_error() < 1e-8);

  Rng rng(8);
  Tensor x = random_tensor(rng, {4, 5}, -3, 3);
  auto g = finite_diff_check([&](Tape& t) { return gelu(t, x); }, {{"x", x}});
  CHECK(g.max_rel_error() < 1e-6);
}

TEST_CASE("every op passes finite differences on random shapes", "[tensor][gradcheck][property]") {
  Rng rng(1234);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    Tensor a = random_tensor(rng, {m, k});
    Tensor b = random_tensor(rng, {k, n});
    Tensor c = random_tensor(rng, {m, k});
    Tensor bias = random_tensor(rng, {n});
    Tensor wl = random_tensor(rng, {n, k});
    std::vector<std::pair<std::string, GradCheckReport>> reports;
    reports.emplace_back("matmul", finite_diff_check([&](Tape& t) { return matmul(t, a, b); }, {{"a", a}, {"b", b}}));
    reports.emplace_back("linear", finite_diff_check([&](Tape& t) { return linear(t, a, wl, bias); },
                                                     {{"x", a}, {"w", wl}, {"b", bias}}));
    reports.emplace_back("add", finite_diff_check([&](Tape& t) { return add(t, a, c); }, {{"a", a}, {"c", c}}));
    reports.emplace_back("sub", finite_diff_check([&](Tape& t) { return sub(t, a, c); }, {{"a", a}, {"c", c}}));
    reports.emplace_back("mul", finite_diff_check([&](Tape& t) { return mul(t, a, c); }, {{"a", a}, {"c", c}}));
    Tensor s = Tensor::scalar(0.7);
    reports.emplace_back("mul-scalar", finite_diff_check([&](Tape& t) { return mul(t, a, s); }, {{"a", a}, {"s", s}}));
    reports.emplace_back("sigmoid", finite_diff_check([&](Tape& t) { return sigmoid(t, a); }, {{"a", a}}));
    reports.emplace_back("gelu", finite_diff_check([&](Tape& t) { return gelu(t, a); }, {{"a", a}}));
    reports.emplace_back("relu", finite_diff_check([&](Tape& t) { return relu(t, a); }, {{"a", a}}));
    reports.emplace_back("reshape", finite_diff_check([&](Tape& t) { return reshape(t, a, {m * k}); }, {{"a", a}}));

    const std::size_t B = 1 + rng.below(2), C = 2 + rng.below(3), H = 2 + rng.below(4), W = 2 + rng.below(4);
    Tensor x4 = random_tensor(rng, {B, C, H, W});
    Tensor wc = random_tensor(rng, {3, C, 2, 2});
    reports.emplace_back("conv2d", finite_diff_check([&](Tape& t) { return conv2d(t, x4, wc, {1, 1, 1}); },
                                                     {{"x", x4}, {"w", wc}}));
    Tensor wg = random_tensor(rng, {2, 1, 1, 1});
    Tensor x2 = random_tensor(rng, {B, 2, H, W});
    reports.emplace_back("conv2d-grouped", finite_diff_check([&](Tape& t) { return conv2d(t, x2, wg, {1, 0, 2}); },
                                                             {{"x", x2}, {"w", wg}}));
    Tensor gamma = random_tensor(rng, {C}, 0.5, 1.5), beta = random_tensor(rng, {C});
    reports.emplace_back("layer_norm", finite_diff_check([&](Tape& t) { return layer_norm(t, x4, gamma, beta, 1); },
                                                         {{"x", x4}, {"gamma", gamma}, {"beta", beta}}));
    reports.emplace_back("patchify", finite_diff_check([&](Tape& t) { return patchify(t, x4); }, {{"x", x4}}));
    Tensor tok = random_tensor(rng, {B, H * W, C});
    reports.emplace_back("unpatchify", finite_diff_check([&](Tape& t) { return unpatchify(t, tok, H, W); }, {{"t", tok}}));
    reports.emplace_back("mean_tokens", finite_diff_check([&](Tape& t) { return mean_tokens(t, tok); }, {{"t", tok}}));
    Tensor gate = random_tensor(rng, {B, C});
    reports.emplace_back("scale_tokens", finite_diff_check([&](Tape& t) { return scale_tokens(t, tok, gate); },
                                                           {{"t", tok}, {"g", gate}}));
    Tensor pix = random_tensor(rng, {B, 4, 4});
    reports.emplace_back("tokens_to_image",
                         finite_diff_check([&](Tape& t) { return tokens_to_image(t, pix, 2, 2, 2); }, {{"p", pix}}));
    Tensor logits = random_tensor(rng, {3, 4}, -2, 2);
    const int labels[] = {1, 0, 3};
    const double cw[] = {0.5, 1.0, 1.5, 2.0};
    reports.emplace_back("cross_entropy", finite_diff_check(
                                              [&](Tape& t) {
                                                return softmax_cross_entropy(t, logits, labels, std::span<const double>(cw));
                                              },
                                              {{"logits", logits}}));
    for (const auto& [name, report] : reports) {
      INFO(name << " max rel error " << report.max_rel_error());
      CHECK(report.passed());
    }
  }
}
