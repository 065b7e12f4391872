#include "lynx/spmm.hpp"

#include <chrono>
#include <cmath>

#include "lynx/parallel.hpp"

namespace lynx {

namespace {

using Clock = std::chrono::steady_clock;

std::int64_t ns_since(Clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() -
                                                              start)
      .count();
}

}  // namespace

std::uint64_t gemm_madd_count(index_t rows, index_t d_out, index_t d_in) {
  return static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(d_out) *
         static_cast<std::uint64_t>(d_in);
}

DenseMatrix spmm(const PackedNM& p, const DenseMatrix& w,
                 const KernelConfig& cfg) {
  cfg.validate(p.pattern);
  if (p.cols != w.cols()) {
    throw dimension_error("spmm: packed operand is " + std::to_string(p.rows) +
                          "x" + std::to_string(p.cols) + ", w is " +
                          w.shape_string() + "; contraction dims differ (" +
                          std::to_string(p.cols) + " vs " +
                          std::to_string(w.cols()) + ")");
  }

  const int n = p.pattern.n, m = p.pattern.m;
  const index_t groups = p.groups_per_row();
  const index_t out_n = w.rows();
  const index_t groups_per_tile = std::max<index_t>(1, cfg.tile_k / m);
  const auto wt = detail::transpose_padded(w);  // d_in rows of d_out
  DenseMatrix y(p.rows, out_n);

  const int workers = cfg.parallel_rows ? thread_count() : 1;
  const int bits = p.pattern.index_bits();
  const index_t meta_stride = p.meta_row_stride();
  const bool nibble_meta = bits == 2 && n == 2;  // the 2:4 layout
  detail::for_row_blocks(p.rows, workers, [&](index_t r0, index_t r1) {
    std::vector<index_t> cols_buf(static_cast<size_t>(groups_per_tile * n));
    std::uint64_t local_madds = 0;
    for (index_t g0 = 0; g0 < groups; g0 += groups_per_tile) {
      const index_t g1 = std::min(groups, g0 + groups_per_tile);
      for (index_t i = r0; i < r1; ++i) {
        const float* vals = p.values.data() + (i * groups + g0) * n;
        const std::uint8_t* meta_row = p.meta.data() + i * meta_stride;
        // Decode this row's tile metadata once, validating as we go.
        index_t t = 0;
        for (index_t g = g0; g < g1; ++g) {
          if (nibble_meta) {
            const int nib = (meta_row[g >> 1] >> ((g & 1) * 4)) & 0xF;
            const int idx0 = nib & 3;
            const int idx1 = nib >> 2;
            if (idx1 <= idx0) {
              throw format_error("spmm: corrupted metadata at row " +
                                 std::to_string(i) + " group " +
                                 std::to_string(g));
            }
            cols_buf[t++] = g * 4 + idx0;
            cols_buf[t++] = g * 4 + idx1;
            continue;
          }
          int prev = -1;
          for (int s = 0; s < n; ++s) {
            index_t bit_pos = (g * n + s) * bits;
            int idx = 0;
            for (int b = 0; b < bits; ++b, ++bit_pos) {
              idx |= ((meta_row[bit_pos >> 3] >> (bit_pos & 7)) & 1) << b;
            }
            if (idx >= m || idx <= prev) {
              throw format_error("spmm: corrupted metadata at row " +
                                 std::to_string(i) + " group " +
                                 std::to_string(g));
            }
            prev = idx;
            cols_buf[t++] = g * m + idx;
          }
        }
        // Gathered streaming update: y[i] accumulates one contiguous
        // wt row per kept slot, slots of a group paired. Pairing is
        // group-local, so results are invariant to the tiling.
        float* yi = y.row_ptr(i);
        for (index_t g = g0; g < g1; ++g) {
          const index_t base = (g - g0) * n;
          int s = 0;
          for (; s + 1 < n; s += 2) {
            const float v0 = vals[base + s];
            const float v1 = vals[base + s + 1];
            const float* row0 = wt.row(cols_buf[base + s]);
            const float* row1 = wt.row(cols_buf[base + s + 1]);
            for (index_t j = 0; j < out_n; ++j) {
              yi[j] += v0 * row0[j] + v1 * row1[j];
            }
          }
          for (; s < n; ++s) {
            const float v = vals[base + s];
            const float* wrow = wt.row(cols_buf[base + s]);
            for (index_t j = 0; j < out_n; ++j) yi[j] += v * wrow[j];
          }
        }
        local_madds += static_cast<std::uint64_t>(t) *
                       static_cast<std::uint64_t>(out_n);
      }
    }
    if (cfg.counter) cfg.counter->add(local_madds);
  });
  return y;
}

FusedResult fused_sparse_linear(const DenseMatrix& x, const DenseMatrix& w,
                                const NMPattern& pattern, Granularity g,
                                float eps, const KernelConfig& cfg) {
  cfg.validate(pattern);
  pattern.validate();
  if (x.cols() % pattern.m != 0) {
    throw dimension_error("fused_sparse_linear: width of " + x.shape_string() +
                          " is not divisible by group size m=" +
                          std::to_string(pattern.m));
  }
  if (x.cols() != w.cols()) {
    throw dimension_error("fused_sparse_linear: x is " + x.shape_string() +
                          ", w is " + w.shape_string() +
                          "; contraction dims differ");
  }
  if (!(eps > 0.0f)) {
    throw config_error("fused_sparse_linear: eps must be > 0");
  }

  const auto t_start = Clock::now();
  const int n = pattern.n, m = pattern.m;
  const index_t groups = x.cols() / m;
  const index_t groups_per_tile = std::max<index_t>(1, cfg.tile_k / m);

  PackedNM p;
  p.rows = x.rows();
  p.cols = x.cols();
  p.pattern = pattern;
  p.values.resize(static_cast<size_t>(p.rows * p.values_per_row()));
  p.meta.assign(static_cast<size_t>(p.rows * p.meta_row_stride()), 0);

  detail::NormAccumulator acc(g, eps, x.rows(), groups);
  const int bits = pattern.index_bits();

  // Phase 1: tile-local Top-K selection straight into the packed
  // layout, accumulating group norms on the side. No dense masked
  // matrix is ever materialized.
  const auto t_sparsify = Clock::now();
  {
    const bool nibble_meta = bits == 2 && n == 2;  // the 2:4 layout
    int kept[8];
    for (index_t i = 0; i < x.rows(); ++i) {
      const float* row = x.row_ptr(i);
      float* out = p.values.data() + i * p.values_per_row();
      std::uint8_t* meta_row = p.meta.data() + i * p.meta_row_stride();
      const index_t row_bit_base = i * p.meta_row_stride() * 8;
      for (index_t g0 = 0; g0 < groups; g0 += groups_per_tile) {
        const index_t g1 = std::min(groups, g0 + groups_per_tile);
        for (index_t grp = g0; grp < g1; ++grp) {
          const float* gptr = row + grp * m;
          double dense_sq = 0.0, kept_sq = 0.0;
          if (!detail::analyze_group(gptr, m, n, kept, &dense_sq, &kept_sq)) {
            throw numeric_error(
                "fused_sparse_linear: input contains non-finite values");
          }
          if (nibble_meta) {
            out[grp * n] = gptr[kept[0]];
            out[grp * n + 1] = gptr[kept[1]];
            const auto nibble =
                static_cast<std::uint8_t>(kept[0] | (kept[1] << 2));
            meta_row[grp >> 1] |=
                static_cast<std::uint8_t>(nibble << ((grp & 1) * 4));
          } else {
            index_t bit_pos = row_bit_base + grp * n * bits;
            for (int s = 0; s < n; ++s) {
              out[grp * n + s] = gptr[kept[s]];
              for (int b = 0; b < bits; ++b) {
                if ((kept[s] >> b) & 1) {
                  p.meta[(bit_pos + b) >> 3] |=
                      static_cast<std::uint8_t>(1u << ((bit_pos + b) & 7));
                }
              }
              bit_pos += bits;
            }
          }
          acc.add_group(i, grp, dense_sq, kept_sq);
        }
      }
    }
    for (index_t i = 0; i < x.rows(); ++i) acc.finish_row(i);
  }
  const std::int64_t sparsify_ns = ns_since(t_sparsify);

  // Phase 2: resolve compensation scales and apply them to the packed
  // values. Level none leaves the values untouched.
  const auto t_pack = Clock::now();
  ScaleRecord scales = acc.finalize();
  if (g != Granularity::none) {
    for (index_t i = 0; i < p.rows; ++i) {
      float* vals = p.values.data() + i * p.values_per_row();
      for (index_t grp = 0; grp < groups; ++grp) {
        const float s = scales.at(i, grp);
        for (int slot = 0; slot < n; ++slot) vals[grp * n + slot] *= s;
      }
    }
  }
  const std::int64_t pack_ns = ns_since(t_pack);

  const auto t_multiply = Clock::now();
  FusedResult result;
  result.y = spmm(p, w, cfg);
  result.timing.multiply_ns = ns_since(t_multiply);
  result.timing.sparsify_ns = sparsify_ns;
  result.timing.pack_ns = pack_ns;
  result.timing.total_ns = ns_since(t_start);
  return result;
}

DenseMatrix fused_sparse_lora_linear(const DenseMatrix& x,
                                     const DenseMatrix& w,
                                     const DenseMatrix& lora_a,
                                     const DenseMatrix& lora_b,
                                     const NMPattern& pattern, Granularity g,
                                     float eps, const KernelConfig& cfg) {
  if (lora_a.rows() != w.rows() || lora_b.cols() != x.cols() ||
      lora_a.cols() != lora_b.rows()) {
    throw dimension_error(
        "fused_sparse_lora_linear: inconsistent shapes, x " + x.shape_string() +
        ", w " + w.shape_string() + ", lA " + lora_a.shape_string() + ", lB " +
        lora_b.shape_string());
  }
  FusedResult base = fused_sparse_linear(x, w, pattern, g, eps, cfg);
  // Skinny-first evaluation: (x * lB^T) * lA^T.
  const DenseMatrix projected = gemm(x, lora_b);
  const DenseMatrix residual = gemm(projected, lora_a);
  return add(base.y, residual);
}

}  // namespace lynx
