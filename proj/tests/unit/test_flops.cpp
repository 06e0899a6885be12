// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "a3kv/error.hpp"
#include "a3kv/flops.hpp"
#include "a3kv/fusion.hpp"
#include "test_support.hpp"

using namespace a3kv;

TEST_CASE("closed form pieces") {
  const ModelConfig c = test::bench_model();
  CHECK(row_flops(c) == 8.0 * 64 * 64 + 6.0 * 64 * 256);
  CHECK(attention_flops(c, 0) == 4.0 * 64);
  CHECK(attention_flops(c, 9) == 40.0 * 64);
  double layer = 0;
  for (int p = 0; p < 100; ++p) layer += row_flops(c) + attention_flops(c, p);
  CHECK(vanilla_flops(100, c) == doctest::Approx(8 * layer + 2.0 * 64 * 258));
}

TEST_CASE("r = 1 equals vanilla") {
  for (int layers : {2, 4, 8}) {
    const ModelConfig c = test::bench_model(7, layers);
    CHECK(fused_flops(1000, 40, 960, c) == doctest::Approx(vanilla_flops(1000, c)));
    CHECK(flops_estimate(FusionPlan{Strategy::kAttentionAware, 1.0, 0}, 1000, 40, c) ==
          doctest::Approx(vanilla_flops(1000, c)));
  }
}

TEST_CASE("r = 0 ratio is 2/L plus the question rows") {
  for (int layers : {4, 8, 16}) {
    const ModelConfig c = test::bench_model(7, layers);
    const int n = 4096, q = 32, m = n - q;
    const double full = n * row_flops(c) + 2.0 * 64 * n * (n + 1.0);
    double qrows = 0;
    for (int p = m; p < n; ++p) qrows += row_flops(c) + attention_flops(c, p);
    const double expect = 2.0 / layers + (layers - 2.0) / layers * qrows / full;
    const double got = fused_flops(n, q, 0, c) / vanilla_flops(n, c);
    CHECK(std::fabs(got - expect) / expect < 0.01);
  }
}

TEST_CASE("desk speedup at r = 0.15") {
  const ModelConfig c = test::bench_model();
  const double ratio = flops_estimate(FusionPlan{Strategy::kAttentionAware, 0.15, 0}, 4096, 64, c) /
                       vanilla_flops(4096, c);
  CHECK(ratio < 0.75);
}

TEST_CASE("strategy ordering and input checks") {
  const ModelConfig c = test::bench_model();
  const double full = flops_estimate(FusionPlan{Strategy::kFullReuse}, 2000, 32, c);
  const double pie = flops_estimate(FusionPlan{Strategy::kNone}, 2000, 32, c);
  const double aa = flops_estimate(FusionPlan{Strategy::kAttentionAware, 0.15, 0}, 2000, 32, c);
  const double van = flops_estimate(FusionPlan{Strategy::kVanilla}, 2000, 32, c);
  CHECK(full < pie);
  CHECK(pie < aa);
  CHECK(aa < van);
  CHECK_THROWS_AS((void)fused_flops(10, 11, 0, c), Error);
}
