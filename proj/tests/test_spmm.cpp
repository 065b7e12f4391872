#include <doctest.h>

#include "lynx/nm_format.hpp"
#include "lynx/rng.hpp"
#include "lynx/sparsify.hpp"
#include "lynx/spmm.hpp"
#include "lynx/tensor.hpp"

using namespace lynx;

TEST_SUITE_BEGIN("spmm");

TEST_CASE("spmm on a worked example") {
  const auto p = pack(DenseMatrix::from_rows({{1, 0, 0, 2}}), {2, 4});
  const auto w = DenseMatrix::from_rows({{1, 1, 1, 1}, {0, 1, 0, 1}});
  const auto y = spmm(p, w);
  CHECK(y(0, 0) == doctest::Approx(3.0f));
  CHECK(y(0, 1) == doctest::Approx(2.0f));
}

TEST_CASE("spmm of a zero matrix is zero") {
  const auto p = pack(DenseMatrix(3, 8), {2, 4});
  const auto w = sample(RandomSpec::gaussian(0, 1, 1), 5, 8);
  CHECK(frobenius_norm(spmm(p, w)) == 0.0);
}

TEST_CASE("spmm matches the dense oracle on random shapes") {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const index_t m = 1 + static_cast<index_t>(rng.next_u64() % 64);
    const index_t n = 1 + static_cast<index_t>(rng.next_u64() % 64);
    const index_t k = 4 * (1 + static_cast<index_t>(rng.next_u64() % 32));
    const auto x = sample(RandomSpec::gaussian(0, 1, trial), m, k);
    const auto w = sample(RandomSpec::gaussian(0, 1, trial + 70), n, k);
    const auto masked = sparsify_activation(x, {2, 4}, Granularity::none).sx;
    CHECK(relative_frobenius(gemm(masked, w), spmm(pack(masked, {2, 4}), w)) <=
          1e-5);
  }
}

TEST_CASE("spmm is linear in the weight operand") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 8), 12, 32);
  const auto masked = sparsify_activation(x, {2, 4}, Granularity::none).sx;
  const auto p = pack(masked, {2, 4});
  const auto w1 = sample(RandomSpec::gaussian(0, 1, 9), 10, 32);
  const auto w2 = sample(RandomSpec::gaussian(0, 1, 10), 10, 32);
  const auto lhs = spmm(p, add(w1, w2));
  const auto rhs = add(spmm(p, w1), spmm(p, w2));
  CHECK(relative_frobenius(lhs, rhs) <= 1e-5);
}

TEST_CASE("spmm results do not depend on tiling or threads") {
  for (const NMPattern pattern : {NMPattern{2, 4}, {1, 2}, {3, 5}, {4, 8}}) {
    const index_t k = pattern.m * 12;
    const auto x = sample(RandomSpec::gaussian(0, 1, 21 + pattern.m), 33, k);
    const auto masked = sparsify_activation(x, pattern, Granularity::none).sx;
    const auto p = pack(masked, pattern);
    const auto w = sample(RandomSpec::gaussian(0, 1, 22), 29, k);

    const KernelConfig base{32, 32, static_cast<index_t>(pattern.m * 8), false,
                            nullptr};
    const auto reference = spmm(p, w, base);
    for (const KernelConfig cfg :
         {KernelConfig{8, 16, static_cast<index_t>(pattern.m), false, nullptr},
          KernelConfig{64, 64, static_cast<index_t>(pattern.m * 64), false,
                       nullptr},
          KernelConfig{1, 1, static_cast<index_t>(pattern.m * 3), true,
                       nullptr}}) {
      set_thread_count(cfg.parallel_rows ? 3 : 1);
      CHECK(bit_equal(reference, spmm(p, w, cfg)));
      set_thread_count(1);
    }
  }
}

TEST_CASE("spmm validates shapes and configuration") {
  const auto p = pack(DenseMatrix(2, 8), {2, 4});
  CHECK_THROWS_AS((void)spmm(p, DenseMatrix(3, 12)), dimension_error);
  KernelConfig bad;
  bad.tile_k = 6;  // not divisible by m=4
  CHECK_THROWS_AS((void)spmm(p, DenseMatrix(3, 8), bad), config_error);
}

TEST_CASE("spmm rejects corrupted metadata") {
  auto p = pack(DenseMatrix::from_rows({{0, 5, 0, -7}}), {2, 4});
  p.meta[0] = static_cast<std::uint8_t>(3 | (1 << 2));  // descending
  CHECK_THROWS_AS((void)spmm(p, DenseMatrix(3, 4)), format_error);
}

TEST_CASE("multiply-add counter is exactly half of dense at 2:4") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 31), 24, 48);
  const auto masked = sparsify_activation(x, {2, 4}, Granularity::none).sx;
  const auto w = sample(RandomSpec::gaussian(0, 1, 32), 17, 48);
  MaddCounter counter;
  KernelConfig cfg;
  cfg.counter = &counter;
  (void)spmm(pack(masked, {2, 4}), w, cfg);
  CHECK(counter.count() * 2 == gemm_madd_count(24, 17, 48));
}

TEST_CASE("fused path equals the staged pipeline bit for bit") {
  for (auto g : {Granularity::none, Granularity::per_tensor,
                 Granularity::per_row, Granularity::per_group}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto x = sample(RandomSpec::spike_slab(0.15f, 0.01f, 1, seed), 13,
                            40);
      const auto w = sample(RandomSpec::gaussian(0, 1, seed + 11), 9, 40);
      const KernelConfig cfg;
      const auto staged =
          spmm(pack(sparsify_activation(x, {2, 4}, g).sx, {2, 4}), w, cfg);
      const auto fused = fused_sparse_linear(x, w, {2, 4}, g, kDefaultEps, cfg);
      CHECK(bit_equal(staged, fused.y));
    }
  }
}

TEST_CASE("fused path on an already sparse input is plain gemm") {
  const auto x0 = sample(RandomSpec::gaussian(0, 1, 41), 8, 32);
  const auto x = sparsify_activation(x0, {2, 4}, Granularity::none).sx;
  const auto w = sample(RandomSpec::gaussian(0, 1, 42), 12, 32);
  const auto fused = fused_sparse_linear(x, w, {2, 4}, Granularity::none);
  CHECK(relative_frobenius(gemm(x, w), fused.y) <= 1e-6);
}

TEST_CASE("fused per-group compensation against identity weights") {
  const auto x = DenseMatrix::from_rows({{4, 3, 2, 1}});
  const auto fused = fused_sparse_linear(x, DenseMatrix::identity(4), {2, 4},
                                         Granularity::per_group);
  const double s = std::sqrt(30.0 / (25.0 + 1e-8));
  CHECK(fused.y(0, 0) == doctest::Approx(4.0 * s).epsilon(1e-5));
  CHECK(fused.y(0, 1) == doctest::Approx(3.0 * s).epsilon(1e-5));
  CHECK(fused.y(0, 2) == 0.0f);
  CHECK(fused.y(0, 3) == 0.0f);
}

TEST_CASE("fused timing phases are coherent") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 51), 64, 128);
  const auto w = sample(RandomSpec::gaussian(0, 1, 52), 48, 128);
  const auto fused =
      fused_sparse_linear(x, w, {2, 4}, Granularity::per_tensor);
  CHECK(fused.timing.sparsify_ns >= 0);
  CHECK(fused.timing.pack_ns >= 0);
  CHECK(fused.timing.multiply_ns >= 0);
  CHECK(fused.timing.total_ns >= fused.timing.sparsify_ns);
  CHECK(fused.timing.total_ns >= fused.timing.pack_ns);
  CHECK(fused.timing.total_ns >= fused.timing.multiply_ns);
  CHECK(fused.timing.sparsify_ns + fused.timing.pack_ns +
            fused.timing.multiply_ns <=
        fused.timing.total_ns + 1'000'000);
}

TEST_CASE("zero lora leaves the fused output unchanged") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 61), 10, 24);
  const auto w = sample(RandomSpec::gaussian(0, 1, 62), 7, 24);
  const auto base =
      fused_sparse_linear(x, w, {2, 4}, Granularity::per_tensor);
  const auto with_zero = fused_sparse_lora_linear(
      x, w, DenseMatrix(7, 4), DenseMatrix(4, 24), {2, 4},
      Granularity::per_tensor);
  CHECK(bit_equal(base.y, with_zero));
}

TEST_CASE("residual branch can carry the whole map when weights vanish") {
  // zero backbone + lora holding the weights reproduces the dense map
  const auto x = sample(RandomSpec::gaussian(0, 1, 71), 10, 16);
  const auto target = sample(RandomSpec::gaussian(0, 1, 72), 16, 16);
  const auto y = fused_sparse_lora_linear(
      x, DenseMatrix(16, 16), target, DenseMatrix::identity(16), {2, 4},
      Granularity::none);
  CHECK(relative_frobenius(gemm(x, target), y) <= 1e-5);
}

TEST_CASE("fused lora output matches the two-pass oracle") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto x = sample(RandomSpec::spike_slab(0.1f, 0.01f, 1, seed), 20, 48);
    const auto w = sample(RandomSpec::gaussian(0, 1, seed + 5), 14, 48);
    const auto la = sample(RandomSpec::gaussian(0, 0.1f, seed + 6), 14, 8);
    const auto lb = sample(RandomSpec::gaussian(0, 0.1f, seed + 7), 8, 48);
    const auto got = fused_sparse_lora_linear(x, w, la, lb, {2, 4},
                                              Granularity::per_tensor);
    const auto sx = sparsify_activation(x, {2, 4}, Granularity::per_tensor).sx;
    const auto want = add(gemm(sx, w), gemm(gemm(x, lb), la));
    CHECK(relative_frobenius(want, got) <= 1e-5);
  }
}

TEST_CASE("fused lora validates the shape chain") {
  const auto x = DenseMatrix(4, 16);
  const auto w = DenseMatrix(8, 16);
  CHECK_THROWS_AS(
      (void)fused_sparse_lora_linear(x, w, DenseMatrix(8, 4), DenseMatrix(3, 16),
                                     {2, 4}, Granularity::none),
      dimension_error);
  CHECK_THROWS_AS(
      (void)fused_sparse_lora_linear(x, w, DenseMatrix(7, 4), DenseMatrix(4, 16),
                                     {2, 4}, Granularity::none),
      dimension_error);
}

TEST_SUITE_END();
