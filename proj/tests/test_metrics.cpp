#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "nlxct/metrics.hpp"
#include "nlxct/rng.hpp"

using namespace nlxct;
using Catch::Approx;

namespace {

// Batch-wise macro F1 (percent) of the reference continual run; entries
// above the diagonal are pre-adaptation evaluations.
PerfMatrix reference_matrix() {
  return PerfMatrix{{96.90, 97.23, 97.54, 96.63},
                    {97.46, 98.09, 97.55, 97.10},
                    {97.12, 98.09, 98.44, 96.95},
                    {97.43, 98.09, 98.23, 97.81}};
}

double round_to(double v, int decimals) {
  const double s = std::pow(10.0, decimals);
  return std::round(v * s) / s;
}

PerfMatrix random_matrix(Rng& rng, std::size_t n) {
  PerfMatrix F(n);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t b = 0; b < n; ++b) F.set(t, b, rng.uniform(50, 100));
  return F;
}

}  // namespace

TEST_CASE("continual metrics reproduce the reference table", "[metrics][continual]") {
  const PerfMatrix F = reference_matrix();
  const Forgetting fg = forgetting(F);
  REQUIRE(fg.per_batch.size() == 3);
  CHECK(round_to(fg.per_batch[0], 2) == 0.03);
  CHECK(round_to(fg.per_batch[1], 2) == 0.00);
  CHECK(round_to(fg.per_batch[2], 2) == 0.21);
  CHECK(round_to(fg.mean, 2) == 0.08);
  CHECK(round_to(fg.max, 2) == 0.21);
  CHECK(round_to(backward_transfer(F), 2) == 0.11);
  CHECK(round_to(adaptation_gain(F), 2) == 0.87);
  CHECK(round_to(average_final(F), 2) == 97.89);
}

TEST_CASE("continual metric degenerate and error cases", "[metrics][continual]") {
  PerfMatrix constant(4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t b = 0; b < 4; ++b) constant.set(t, b, 90.0);
  const auto fg = forgetting(constant);
  for (double v : fg.per_batch) CHECK(v == 0.0);
  CHECK(backward_transfer(constant) == 0.0);
  CHECK(adaptation_gain(constant) == 0.0);
  CHECK(average_final(constant) == 90.0);

  CHECK_THROWS_AS(forgetting(PerfMatrix{{90.0}}), ContractError);
  CHECK_THROWS_AS(backward_transfer(PerfMatrix{{90.0}}), ContractError);

  PerfMatrix no_pre(3);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t b = 0; b <= t; ++b) no_pre.set(t, b, 80.0);
  CHECK_NOTHROW(forgetting(no_pre));
  CHECK_THROWS_AS(adaptation_gain(no_pre), ContractError);
  CHECK_THROWS_AS(no_pre.set(0, 0, 101.0), ContractError);
}

TEST_CASE("naive baseline summary values", "[metrics][continual]") {
  // Matrix consistent with the naive baseline's published final row
  // {97.41, 97.05, 98.10, 96.76} and per-batch forgetting {0.05, 1.52, 0.23},
  // with each batch peaking right after it is learned.
  PerfMatrix F{{97.46, 96.20, 96.00, 95.10},
               {97.30, 98.57, 96.40, 95.60},
               {97.20, 97.90, 98.33, 95.90},
               {97.41, 97.05, 98.10, 96.76}};
  const auto r = continual_report(F);
  CHECK(round_to(r.forgetting.per_batch[0], 2) == 0.05);
  CHECK(round_to(r.forgetting.per_batch[1], 2) == 1.52);
  CHECK(round_to(r.forgetting.per_batch[2], 2) == 0.23);
  CHECK(round_to(r.forgetting.mean, 2) == 0.60);
  CHECK(round_to(r.forgetting.max, 2) == 1.52);
  CHECK(round_to(r.bwt, 2) == -0.60);
  CHECK(round_to(r.avg_final, 2) == 97.33);
}

TEST_CASE("continual metrics against direct hand sums", "[metrics][continual][property]") {
  Rng rng(1);
  // Monotone-improving matrix: every column rises down the rows, so BWT > 0.
  PerfMatrix up(4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t b = 0; b < 4; ++b) up.set(t, b, 80.0 + 2.0 * double(t) + double(b));
  CHECK(backward_transfer(up) == Approx(((6.0 - 0.0) + (6.0 - 2.0) + (6.0 - 4.0)) / 3.0));
  CHECK(backward_transfer(up) > 0.0);

  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(5);
    const PerfMatrix F = random_matrix(rng, n);
    double bwt = 0.0, iag = 0.0, avg = 0.0, mf = 0.0, maxf = 0.0;
    for (std::size_t b = 0; b + 1 < n; ++b) {
      bwt += F.at(n - 1, b) - F.at(b, b);
      double best = -1.0;
      for (std::size_t t = b; t < n; ++t) best = std::max(best, F.at(t, b));
      const double f = best - F.at(n - 1, b);
      CHECK(f >= 0.0);
      mf += f;
      maxf = std::max(maxf, f);
    }
    for (std::size_t t = 1; t < n; ++t) iag += F.at(t, t) - F.at(t - 1, t);
    for (std::size_t b = 0; b < n; ++b) avg += F.at(n - 1, b);
    const auto r = continual_report(F);
    CHECK(r.bwt == Approx(bwt / double(n - 1)).margin(1e-12));
    CHECK(r.iag == Approx(iag / double(n - 1)).margin(1e-12));
    CHECK(r.avg_final == Approx(avg / double(n)).margin(1e-12));
    CHECK(r.forgetting.mean == Approx(mf / double(n - 1)).margin(1e-12));
    CHECK(r.forgetting.max == Approx(maxf).margin(1e-12));
  }
}

TEST_CASE("macro F1 aggregation of the reference per-class scores", "[metrics][f1]") {
  const std::vector<double> per_class{0.971, 0.970, 0.971, 0.956, 0.971, 0.957, 0.970};
  CHECK(round_to(macro_average(per_class), 3) == 0.967);
}

TEST_CASE("macro F1 from confusion matrices", "[metrics][f1]") {
  SECTION("perfect diagonal") {
    ConfusionMatrix cm(7);
    for (int c = 0; c < 7; ++c)
      for (int k = 0; k <= c; ++k) cm.add(c, c);
    const auto s = class_scores(cm);
    for (double f : s.f1) CHECK(f == 1.0);
    CHECK(s.macro_f1 == 1.0);
    CHECK(cm.accuracy() == 1.0);
  }
  SECTION("two-class hand computation") {
    ConfusionMatrix cm(2);
    cm.at(0, 0) = 3, cm.at(0, 1) = 1, cm.at(1, 0) = 2, cm.at(1, 1) = 4;
    const auto s = class_scores(cm);
    // Class 0: P = 3/5, R = 3/4; class 1: P = 4/5, R = 4/6.
    const double f0 = 2 * 0.6 * 0.75 / (0.6 + 0.75), f1 = 2 * 0.8 * (4.0 / 6.0) / (0.8 + 4.0 / 6.0);
    CHECK(s.precision[0] == Approx(0.6));
    CHECK(s.recall[1] == Approx(4.0 / 6.0));
    CHECK(s.f1[0] == Approx(f0).margin(1e-15));
    CHECK(s.f1[1] == Approx(f1).margin(1e-15));
    CHECK(s.macro_f1 == Approx((f0 + f1) / 2).margin(1e-15));
    CHECK(s.macro_f1 == Approx(0.696969696969697).margin(1e-12));
  }
  SECTION("single-class predictions use the zero convention") {
    ConfusionMatrix cm(3);
    for (int t : {0, 1, 2, 2}) cm.add(t, 2);
    const auto s = class_scores(cm);
    CHECK(s.f1[0] == 0.0);
    CHECK(s.f1[1] == 0.0);
    CHECK(s.precision[2] == 0.5);
    CHECK(s.f1[2] == Approx(2 * 0.5 * 1.0 / 1.5));
    CHECK(class_scores(cm).macro_f1 == s.macro_f1);
  }
  SECTION("errors") {
    ConfusionMatrix cm(3);
    CHECK_THROWS_AS(macro_f1(cm), ContractError);
    CHECK_THROWS_AS(cm.add(3, 0), IndexError);
    CHECK_THROWS_AS(cm.add(0, -1), IndexError);
  }
}

TEST_CASE("confusion matrix invariants", "[metrics][property]") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 2 + rng.below(6), n = 1 + rng.below(200);
    std::vector<int> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) truth[i] = int(rng.below(C)), pred[i] = int(rng.below(C));
    ConfusionMatrix cm(C);
    cm.add(truth, pred);
    CHECK(cm.total() == static_cast<long long>(n));
    for (std::size_t c = 0; c < C; ++c) CHECK(cm.row_sum(c) == std::count(truth.begin(), truth.end(), int(c)));
    const auto norm = cm.row_normalized();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (double v : norm[c]) s += v;
      if (cm.row_sum(c) > 0) CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    // Permuting sample order changes nothing.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    ConfusionMatrix shuffled(C);
    for (std::size_t i : order) shuffled.add(truth[i], pred[i]);
    CHECK(macro_f1(shuffled) == macro_f1(cm));
    CHECK(shuffled.accuracy() == cm.accuracy());
  }
}

TEST_CASE("CSV formats", "[metrics][csv]") {
  const auto report = continual_report(reference_matrix());
  const std::string csv = metrics_csv(continual_rows(report));
  CHECK(csv.starts_with("name,value\n"));
  CHECK(csv.find("mean_forgetting,0.0800\n") != std::string::npos);
  CHECK(csv.find("bwt,0.1067\n") != std::string::npos);
  CHECK(csv.find("avg_batch_macro_f1,97.8900\n") != std::string::npos);
  CHECK(format_fixed(-0.00001, 4) == "0.0000");

  PerfMatrix partial(2);
  partial.set(0, 0, 90.0);
  partial.set(1, 0, 91.5);
  partial.set(1, 1, 92.25);
  CHECK(perf_matrix_csv(partial) == "step,batch1,batch2\n1,90.0000,\n2,91.5000,92.2500\n");
}
