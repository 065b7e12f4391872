#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lynx/nm_format.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

// Where the norm-compensation scale is computed: one scalar for the
// whole matrix (the pipeline default), one per row, or one per group.
// `none` disables compensation (s == 1).
enum class Granularity { none, per_tensor, per_row, per_group };

Granularity parse_granularity(const std::string& text);
std::string to_string(Granularity g);

inline constexpr float kDefaultEps = 1e-8f;

// Boolean keep-mask with the same shape as the matrix it was built from.
struct BoolMask {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<std::uint8_t> data;

  bool at(index_t r, index_t c) const { return data[r * cols + c] != 0; }
};

// Compensation scales at the requested granularity. `values` holds one
// entry for per_tensor, `rows` entries for per_row and rows*groups for
// per_group; it is empty for level none (s == 1 everywhere).
struct ScaleRecord {
  Granularity level = Granularity::none;
  index_t rows = 0;
  index_t groups_per_row = 0;
  std::vector<float> values;

  float at(index_t row, index_t group) const {
    switch (level) {
      case Granularity::none: return 1.0f;
      case Granularity::per_tensor: return values[0];
      case Granularity::per_row: return values[row];
      case Granularity::per_group: return values[row * groups_per_row + group];
    }
    return 1.0f;
  }
};

struct SparsifyResult {
  ScaleRecord scales;
  DenseMatrix sx;
};

// Weight-pruning criterion. Defaults follow the reference settings:
// RIA exponent a = 0.5, BaWA (theta1, theta2, theta3) = (0.5, 0.5, 1).
struct ScoreSpec {
  enum class Method { magnitude, wanda, ria, bawa };

  Method method = Method::magnitude;
  float ria_a = 0.5f;
  float bawa_theta1 = 0.5f;
  float bawa_theta2 = 0.5f;
  float bawa_theta3 = 1.0f;

  bool needs_activation_norms() const { return method != Method::magnitude; }
  void validate() const;
  std::string name() const;
};

ScoreSpec::Method parse_score_method(const std::string& text);

// Guard added inside RIA/BaWA channel-norm denominators so empty
// channels do not produce NaN scores. Recorded in analysis reports.
inline constexpr double kScoreDenomEps = 1e-12;

// Keep-mask selecting, per length-m group of each row, the n entries of
// largest magnitude. Ties go to the lowest index.
BoolMask topk_mask(const DenseMatrix& x, const NMPattern& pattern);

// Norm-compensated activation sparsification:
//   x~ = topk_mask(x) .* x,  s = sqrt(|x|^2 / (|x~|^2 + eps)),  sx = s * x~
// with s computed at the requested granularity.
SparsifyResult sparsify_activation(const DenseMatrix& x,
                                   const NMPattern& pattern, Granularity g,
                                   float eps = kDefaultEps);

// Importance scores for weight pruning. Activation-aware methods need
// the input-channel activation norms (length w.cols); magnitude does
// not. Scores are always nonnegative.
DenseMatrix score_weights(const DenseMatrix& w,
                          const std::optional<std::vector<float>>& x_norms,
                          const ScoreSpec& spec);

// Keeps, per group along the input dimension, the n highest-scoring
// entries (ties to the lowest index) and zeroes the rest. The result
// always satisfies the N:M pattern.
DenseMatrix prune_weights(const DenseMatrix& w, const DenseMatrix& scores,
                          const NMPattern& pattern);

namespace detail {

// Group-level primitives shared between the staged path above and the
// fused kernels in spmm.cpp. They live in one translation unit so both
// paths run the same machine code and agree bit-for-bit.
void topk_group(const float* group, int m, int n, int* kept_ascending);
double group_sumsq(const float* group, int m);
double kept_sumsq(const float* group, const int* kept, int n);
float compensation_scale(double dense_sumsq, double kept_sumsq, float eps);

// One-pass selection + norm accumulation (hot path of both the staged
// and the fused sparsifier). Equivalent to topk_group + group_sumsq +
// kept_sumsq; returns false when the group holds non-finite values.
bool analyze_group(const float* group, int m, int n, int* kept_ascending,
                   double* dense_sumsq, double* kept_sumsq);

// Builds a ScaleRecord from hierarchically accumulated sums (groups in
// ascending order within a row, rows ascending).
struct NormAccumulator {
  Granularity level;
  float eps;
  index_t rows = 0;
  index_t groups_per_row = 0;
  double tensor_dense = 0.0, tensor_kept = 0.0;
  std::vector<double> row_dense, row_kept;      // per_row / per_tensor staging
  std::vector<double> group_dense, group_kept;  // per_group only

  NormAccumulator(Granularity level, float eps, index_t rows,
                  index_t groups_per_row);
  void add_group(index_t row, index_t group, double dense_sq, double kept_sq);
  void finish_row(index_t row);
  ScaleRecord finalize() const;
};

}  // namespace detail

}  // namespace lynx
