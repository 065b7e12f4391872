#include "lynx/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>

#include "lynx/parallel.hpp"
#include "lynx/rng.hpp"

namespace lynx {

namespace {

std::atomic<int> g_threads{1};

}  // namespace

void set_thread_count(int threads) {
  g_threads.store(threads < 1 ? 1 : threads, std::memory_order_relaxed);
}

int thread_count() { return g_threads.load(std::memory_order_relaxed); }

DenseMatrix DenseMatrix::from_rows(
    std::initializer_list<std::initializer_list<float>> rows) {
  const index_t r = static_cast<index_t>(rows.size());
  if (r == 0) throw dimension_error("from_rows: no rows given");
  const index_t c = static_cast<index_t>(rows.begin()->size());
  DenseMatrix m(r, c);
  index_t i = 0;
  for (const auto& row : rows) {
    if (static_cast<index_t>(row.size()) != c) {
      throw dimension_error("from_rows: ragged rows (" + std::to_string(c) +
                            " vs " + std::to_string(row.size()) + ")");
    }
    index_t j = 0;
    for (float v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

DenseMatrix DenseMatrix::identity(index_t n) {
  DenseMatrix m(n, n);
  for (index_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

RandomSpec RandomSpec::gaussian(float mean, float stddev, std::uint64_t seed) {
  RandomSpec s;
  s.kind = Kind::gaussian;
  s.mean = mean;
  s.stddev = stddev;
  s.seed = seed;
  s.validate();
  return s;
}

RandomSpec RandomSpec::spike_slab(float active_fraction, float spike_stddev,
                                  float slab_stddev, std::uint64_t seed) {
  RandomSpec s;
  s.kind = Kind::spike_slab;
  s.active_fraction = active_fraction;
  s.spike_stddev = spike_stddev;
  s.slab_stddev = slab_stddev;
  s.seed = seed;
  s.validate();
  return s;
}

void RandomSpec::validate() const {
  if (kind == Kind::gaussian) {
    if (!(stddev > 0.0f) || !std::isfinite(stddev) || !std::isfinite(mean)) {
      throw config_error("RandomSpec: gaussian requires finite mean and stddev > 0");
    }
    return;
  }
  if (!(active_fraction > 0.0f) || !(active_fraction <= 1.0f)) {
    throw config_error("RandomSpec: active_fraction must lie in (0, 1]");
  }
  if (!(spike_stddev > 0.0f) || !(slab_stddev > 0.0f)) {
    throw config_error("RandomSpec: spike/slab stddevs must be > 0");
  }
}

DenseMatrix sample(const RandomSpec& spec, index_t rows, index_t cols) {
  spec.validate();
  DenseMatrix m(rows, cols);
  SplitMix64 rng(spec.seed);
  float* out = m.row_ptr(0);
  const index_t total = rows * cols;
  if (spec.kind == RandomSpec::Kind::gaussian) {
    for (index_t i = 0; i < total; ++i) {
      out[i] = static_cast<float>(spec.mean + spec.stddev * rng.next_gaussian());
    }
  } else {
    for (index_t i = 0; i < total; ++i) {
      const bool active = rng.next_uniform() < spec.active_fraction;
      const double sd = active ? spec.slab_stddev : spec.spike_stddev;
      out[i] = static_cast<float>(sd * rng.next_gaussian());
    }
  }
  return m;
}

DenseMatrix gemm(const DenseMatrix& x, const DenseMatrix& w) {
  if (x.cols() != w.cols()) {
    throw dimension_error("gemm: x is " + x.shape_string() + ", w is " +
                          w.shape_string() + "; contraction dims differ (" +
                          std::to_string(x.cols()) + " vs " +
                          std::to_string(w.cols()) + ")");
  }
  const index_t m = x.rows(), n = w.rows(), k = x.cols();
  const auto wt = detail::transpose_padded(w);  // k rows of n, padded
  DenseMatrix y(m, n);

  constexpr index_t kTileK = 256;
  detail::for_row_blocks(m, thread_count(), [&](index_t r0, index_t r1) {
    for (index_t k0 = 0; k0 < k; k0 += kTileK) {
      const index_t k1 = std::min(k, k0 + kTileK);
      for (index_t i = r0; i < r1; ++i) {
        const float* xi = x.row_ptr(i);
        float* yi = y.row_ptr(i);
        for (index_t kk = k0; kk < k1; ++kk) {
          const float a = xi[kk];
          const float* wrow = wt.row(kk);
          for (index_t j = 0; j < n; ++j) yi[j] += a * wrow[j];
        }
      }
    }
  });
  return y;
}

double frobenius_norm(const DenseMatrix& m) {
  double acc = 0.0;
  for (float v : m.data()) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

std::vector<float> column_l2_norms(const DenseMatrix& m) {
  std::vector<double> acc(m.cols(), 0.0);
  for (index_t i = 0; i < m.rows(); ++i) {
    const float* row = m.row_ptr(i);
    for (index_t j = 0; j < m.cols(); ++j) {
      acc[j] += static_cast<double>(row[j]) * row[j];
    }
  }
  std::vector<float> out(m.cols());
  for (index_t j = 0; j < m.cols(); ++j) {
    out[j] = static_cast<float>(std::sqrt(acc[j]));
  }
  return out;
}

DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix t(m.cols(), m.rows());
  for (index_t i = 0; i < m.rows(); ++i) {
    const float* row = m.row_ptr(i);
    for (index_t j = 0; j < m.cols(); ++j) t(j, i) = row[j];
  }
  return t;
}

namespace detail {

TransposedOperand transpose_padded(const DenseMatrix& m) {
  TransposedOperand t;
  t.rows = m.cols();
  t.cols = m.rows();
  t.stride = t.cols;
  if ((t.stride * static_cast<index_t>(sizeof(float))) % 4096 == 0) {
    t.stride += 16;
  }
  t.data.assign(static_cast<size_t>(t.rows * t.stride), 0.0f);
  for (index_t i = 0; i < m.rows(); ++i) {
    const float* row = m.row_ptr(i);
    for (index_t j = 0; j < m.cols(); ++j) {
      t.data[j * t.stride + i] = row[j];
    }
  }
  return t;
}

}  // namespace detail

namespace {

DenseMatrix elementwise(const DenseMatrix& a, const DenseMatrix& b, bool plus) {
  if (!a.same_shape(b)) {
    throw dimension_error("elementwise op: shapes differ (" + a.shape_string() +
                          " vs " + b.shape_string() + ")");
  }
  DenseMatrix out(a.rows(), a.cols());
  const auto av = a.data();
  const auto bv = b.data();
  auto ov = out.data();
  for (index_t i = 0; i < a.size(); ++i) {
    ov[i] = plus ? av[i] + bv[i] : av[i] - bv[i];
  }
  return out;
}

}  // namespace

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  return elementwise(a, b, true);
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
  return elementwise(a, b, false);
}

bool bit_equal(const DenseMatrix& a, const DenseMatrix& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data().data(), b.data().data(),
                     sizeof(float) * static_cast<size_t>(a.size())) == 0;
}

double relative_frobenius(const DenseMatrix& reference,
                          const DenseMatrix& candidate) {
  const double ref = frobenius_norm(reference);
  const double diff = frobenius_norm(sub(reference, candidate));
  if (ref == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / ref;
}

}  // namespace lynx
