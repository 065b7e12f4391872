#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lynx/sparsify.hpp"
#include "lynx/spmm.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

struct BenchCase {
  index_t m = 1024;  // activation rows
  index_t n = 1024;  // output features
  index_t k = 3072;  // contraction dim
  int repeats = 5;
  int warmup = 2;
  NMPattern pattern{2, 4};
  Granularity granularity = Granularity::per_tensor;
  std::uint64_t seed = 42;
  index_t lora_rank = 64;
  // Benchmarks run single-threaded by default for stability; the
  // row-parallel mode is labeled in the report.
  bool parallel_rows = false;

  void validate() const {
    if (m < 1 || n < 1 || k < 1) {
      throw config_error("BenchCase: dims must be >= 1");
    }
    if (k % pattern.m != 0) {
      throw config_error("BenchCase: k=" + std::to_string(k) +
                         " must be divisible by pattern m=" +
                         std::to_string(pattern.m));
    }
    if (repeats < 3) throw config_error("BenchCase: repeats must be >= 3");
    if (warmup < 0) throw config_error("BenchCase: warmup must be >= 0");
  }
};

struct BenchRow {
  BenchCase spec;

  // Medians over repeats, nanoseconds.
  double dense_ns = 0.0;
  double staged_sparse_ns = 0.0;
  double fused_sparse_ns = 0.0;
  double fused_lora_ns = 0.0;

  // Median fused phase breakdown.
  double fused_sparsify_ns = 0.0;
  double fused_pack_ns = 0.0;
  double fused_multiply_ns = 0.0;

  // Staged phase breakdown (sparsify / pack / multiply medians).
  double staged_sparsify_ns = 0.0;
  double staged_pack_ns = 0.0;
  double staged_multiply_ns = 0.0;

  double sparse_cost_pct = 0.0;  // fused (sparsify + pack) / total, percent
  double staged_cost_pct = 0.0;  // staged analog
  double speedup = 0.0;          // dense_ns / fused_sparse_ns
  double madd_ratio = 0.0;       // measured sparse madds / dense madds

  // Raw samples so every derived number can be recomputed from the
  // report.
  std::vector<double> dense_samples, staged_samples, fused_samples,
      fused_lora_samples;

  double output_checksum = 0.0;  // Frobenius norm of the fused output
  bool resolution_warning = false;
};

std::vector<BenchRow> run_bench(const std::vector<BenchCase>& cases);

// The reference shape grid (M=N in {2048, 4096, 8192} x K in
// {3072, 12288}) divided by `scale`.
std::vector<BenchCase> qwen_shape_cases(int scale, int repeats = 5,
                                        int warmup = 2,
                                        const NMPattern& pattern = {2, 4},
                                        Granularity g = Granularity::per_tensor,
                                        std::uint64_t seed = 42);

nlohmann::json bench_report_json(const std::vector<BenchRow>& rows);
std::string bench_report_csv(const std::vector<BenchRow>& rows);

}  // namespace lynx
