#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "lynx/errors.hpp"

namespace lynx {

using index_t = std::int64_t;

// Row-major dense matrix of 32-bit floats. Values are treated as
// immutable once a matrix has been handed to library operations; all
// operations return fresh matrices and are safe to call concurrently
// on shared inputs.
class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(index_t rows, index_t cols)
      : rows_(rows), cols_(cols), data_(check_shape(rows, cols), 0.0f) {}

  DenseMatrix(index_t rows, index_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (static_cast<index_t>(data_.size()) != check_shape(rows, cols)) {
      throw dimension_error("DenseMatrix: data length " +
                            std::to_string(data_.size()) +
                            " does not match shape " + shape_string());
    }
  }

  static DenseMatrix from_rows(
      std::initializer_list<std::initializer_list<float>> rows);
  static DenseMatrix identity(index_t n);

  index_t rows() const { return rows_; }
  index_t cols() const { return cols_; }
  index_t size() const { return rows_ * cols_; }

  float operator()(index_t r, index_t c) const { return data_[r * cols_ + c]; }
  float& operator()(index_t r, index_t c) { return data_[r * cols_ + c]; }

  const float* row_ptr(index_t r) const { return data_.data() + r * cols_; }
  float* row_ptr(index_t r) { return data_.data() + r * cols_; }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool same_shape(const DenseMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

 private:
  static index_t check_shape(index_t rows, index_t cols) {
    if (rows < 1 || cols < 1) {
      throw dimension_error("DenseMatrix: shape must be at least 1x1, got " +
                            std::to_string(rows) + "x" + std::to_string(cols));
    }
    return rows * cols;
  }

  index_t rows_ = 0;
  index_t cols_ = 0;
  std::vector<float> data_;
};

// Distribution used to synthesize weight-like (gaussian) and
// activation-like (spike-slab) matrices. The spike-slab mixture draws
// each entry from the wide slab with probability `active_fraction` and
// from the narrow spike otherwise.
struct RandomSpec {
  enum class Kind { gaussian, spike_slab };

  Kind kind = Kind::gaussian;
  std::uint64_t seed = 0;

  // gaussian
  float mean = 0.0f;
  float stddev = 1.0f;

  // spike-slab
  float active_fraction = 0.1f;
  float spike_stddev = 0.01f;
  float slab_stddev = 1.0f;

  static RandomSpec gaussian(float mean, float stddev, std::uint64_t seed);
  static RandomSpec spike_slab(float active_fraction, float spike_stddev,
                               float slab_stddev, std::uint64_t seed);

  void validate() const;
};

// Global worker-thread count for kernels that opt into row parallelism.
void set_thread_count(int threads);
int thread_count();

// Y = X * W^T with W stored as (d_out x d_in); contracts over d_in.
DenseMatrix gemm(const DenseMatrix& x, const DenseMatrix& w);

// sqrt(sum of squares) over all entries; accumulated in double.
double frobenius_norm(const DenseMatrix& m);

// Per-column l2 norms, length m.cols().
std::vector<float> column_l2_norms(const DenseMatrix& m);

// Deterministic sampling: identical (spec, rows, cols) always yields a
// bit-identical matrix.
DenseMatrix sample(const RandomSpec& spec, index_t rows, index_t cols);

// Plumbing shared across modules.
DenseMatrix transpose(const DenseMatrix& m);
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);
bool bit_equal(const DenseMatrix& a, const DenseMatrix& b);

namespace detail {

// Transposed kernel operand with rows padded off 4 KiB multiples so
// the streamed rows never set-alias the output row.
struct TransposedOperand {
  std::vector<float> data;
  index_t rows = 0;
  index_t cols = 0;
  index_t stride = 0;

  const float* row(index_t r) const { return data.data() + r * stride; }
};

TransposedOperand transpose_padded(const DenseMatrix& m);

}  // namespace detail

// ||a - b||_F / ||a||_F without the zero-reference guard of
// analysis::rfe; used internally by tests and kernels.
double relative_frobenius(const DenseMatrix& reference,
                          const DenseMatrix& candidate);

}  // namespace lynx
