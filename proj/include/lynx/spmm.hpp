#pragma once

#include <atomic>
#include <cstdint>

#include "lynx/nm_format.hpp"
#include "lynx/sparsify.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

// Thread-safe multiply-add counter attached to kernel runs through
// KernelConfig. Counts are exact, not sampled.
class MaddCounter {
 public:
  void add(std::uint64_t n) { value_.fetch_add(n, std::memory_order_relaxed); }
  void reset() { value_.store(0, std::memory_order_relaxed); }
  std::uint64_t count() const { return value_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> value_{0};
};

// Blocked-kernel configuration. Accumulation order is fixed (ascending
// k within a row) regardless of tile sizes, so results do not depend on
// the tiling; tiles only steer cache behavior.
struct KernelConfig {
  index_t tile_m = 64;
  index_t tile_n = 64;
  index_t tile_k = 256;
  bool parallel_rows = false;
  MaddCounter* counter = nullptr;

  void validate(const NMPattern& pattern) const {
    if (tile_m < 1 || tile_n < 1 || tile_k < 1) {
      throw config_error("KernelConfig: tile sizes must be >= 1");
    }
    if (tile_k % pattern.m != 0) {
      throw config_error("KernelConfig: tile_k=" + std::to_string(tile_k) +
                         " must be divisible by pattern m=" +
                         std::to_string(pattern.m));
    }
  }
};

// Per-phase durations of the fused path.
struct FusedTiming {
  std::int64_t sparsify_ns = 0;
  std::int64_t pack_ns = 0;
  std::int64_t multiply_ns = 0;
  std::int64_t total_ns = 0;
};

struct FusedResult {
  DenseMatrix y;
  FusedTiming timing;
};

// Packed sparse x dense multiply: numerically equivalent to
// gemm(unpack(p), w) but skips the pruned positions via metadata-driven
// gathers. Deterministic for any tile configuration and thread count.
DenseMatrix spmm(const PackedNM& p, const DenseMatrix& w,
                 const KernelConfig& cfg = {});

// Single-pass sparsify -> pack -> multiply. Selection and packing are
// performed tile-locally without materializing a dense masked matrix;
// the output is bit-identical to the staged pipeline
// sparsify_activation -> pack -> spmm under the same config.
FusedResult fused_sparse_linear(const DenseMatrix& x, const DenseMatrix& w,
                                const NMPattern& pattern, Granularity g,
                                float eps = kDefaultEps,
                                const KernelConfig& cfg = {});

// Sparse path plus dense low-rank residual:
//   Y = S(X) * W^T + X * (lA * lB)^T
// The residual consumes the dense X and is evaluated right-to-left as
// (X * lB^T) * lA^T; lA * lB is never materialized.
DenseMatrix fused_sparse_lora_linear(const DenseMatrix& x,
                                     const DenseMatrix& w,
                                     const DenseMatrix& lora_a,
                                     const DenseMatrix& lora_b,
                                     const NMPattern& pattern, Granularity g,
                                     float eps = kDefaultEps,
                                     const KernelConfig& cfg = {});

// Exact multiply-add count of a dense gemm with these operand shapes.
std::uint64_t gemm_madd_count(index_t rows, index_t d_out, index_t d_in);

}  // namespace lynx
