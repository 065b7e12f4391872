#include "lynx/sparsify.hpp"

#include <cmath>

namespace lynx {

Granularity parse_granularity(const std::string& text) {
  if (text == "none") return Granularity::none;
  if (text == "per-tensor") return Granularity::per_tensor;
  if (text == "per-row") return Granularity::per_row;
  if (text == "per-group") return Granularity::per_group;
  throw config_error("unknown granularity '" + text +
                     "' (expected none|per-tensor|per-row|per-group)");
}

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::none: return "none";
    case Granularity::per_tensor: return "per-tensor";
    case Granularity::per_row: return "per-row";
    case Granularity::per_group: return "per-group";
  }
  return "?";
}

void ScoreSpec::validate() const {
  if (!std::isfinite(ria_a) || !std::isfinite(bawa_theta1) ||
      !std::isfinite(bawa_theta2) || !std::isfinite(bawa_theta3)) {
    throw config_error("ScoreSpec: exponents must be finite");
  }
}

std::string ScoreSpec::name() const {
  switch (method) {
    case Method::magnitude: return "magnitude";
    case Method::wanda: return "wanda";
    case Method::ria: return "ria";
    case Method::bawa: return "bawa";
  }
  return "?";
}

ScoreSpec::Method parse_score_method(const std::string& text) {
  if (text == "magnitude") return ScoreSpec::Method::magnitude;
  if (text == "wanda") return ScoreSpec::Method::wanda;
  if (text == "ria") return ScoreSpec::Method::ria;
  if (text == "bawa") return ScoreSpec::Method::bawa;
  throw config_error("unknown score method '" + text +
                     "' (expected magnitude|wanda|ria|bawa)");
}

namespace detail {

void topk_group(const float* group, int m, int n, int* kept_ascending) {
  bool chosen[8] = {};
  for (int pick = 0; pick < n; ++pick) {
    int best = -1;
    float best_mag = -1.0f;
    for (int j = 0; j < m; ++j) {
      if (chosen[j]) continue;
      const float mag = std::fabs(group[j]);
      // Strict > keeps the lowest index on ties.
      if (best < 0 || mag > best_mag) {
        best = j;
        best_mag = mag;
      }
    }
    chosen[best] = true;
  }
  int out = 0;
  for (int j = 0; j < m; ++j) {
    if (chosen[j]) kept_ascending[out++] = j;
  }
}

double group_sumsq(const float* group, int m) {
  double acc = 0.0;
  for (int j = 0; j < m; ++j) {
    acc += static_cast<double>(group[j]) * group[j];
  }
  return acc;
}

double kept_sumsq(const float* group, const int* kept, int n) {
  double acc = 0.0;
  for (int s = 0; s < n; ++s) {
    acc += static_cast<double>(group[kept[s]]) * group[kept[s]];
  }
  return acc;
}

float compensation_scale(double dense_sumsq, double kept_sumsq, float eps) {
  return static_cast<float>(
      std::sqrt(dense_sumsq / (kept_sumsq + static_cast<double>(eps))));
}

bool analyze_group(const float* group, int m, int n, int* kept_ascending,
                   double* dense_out, double* kept_out) {
  if (m == 4 && n == 2) {
    // 2:4 fast path. Ties resolve to the lowest index, matching
    // topk_group: strict > comparisons walking j upward.
    const float a0 = std::fabs(group[0]), a1 = std::fabs(group[1]);
    const float a2 = std::fabs(group[2]), a3 = std::fabs(group[3]);
    int first = 0;
    float best = a0;
    if (a1 > best) { first = 1; best = a1; }
    if (a2 > best) { first = 2; best = a2; }
    if (a3 > best) { first = 3; best = a3; }
    int second = first == 0 ? 1 : 0;
    float next = first == 0 ? a1 : a0;
    for (int j = second + 1; j < 4; ++j) {
      if (j == first) continue;
      const float aj = j == 1 ? a1 : (j == 2 ? a2 : a3);
      if (aj > next) { second = j; next = aj; }
    }
    const int lo = first < second ? first : second;
    const int hi = first < second ? second : first;
    kept_ascending[0] = lo;
    kept_ascending[1] = hi;
    // Accumulation order matches group_sumsq / kept_sumsq exactly.
    const double d0 = static_cast<double>(group[0]) * group[0];
    const double d1 = static_cast<double>(group[1]) * group[1];
    const double d2 = static_cast<double>(group[2]) * group[2];
    const double d3 = static_cast<double>(group[3]) * group[3];
    const double dense = ((d0 + d1) + d2) + d3;
    *dense_out = dense;
    *kept_out = (static_cast<double>(group[lo]) * group[lo]) +
                static_cast<double>(group[hi]) * group[hi];
    return std::isfinite(dense);
  }
  topk_group(group, m, n, kept_ascending);
  const double dense = group_sumsq(group, m);
  *dense_out = dense;
  *kept_out = kept_sumsq(group, kept_ascending, n);
  return std::isfinite(dense);
}

NormAccumulator::NormAccumulator(Granularity level, float eps, index_t rows,
                                 index_t groups_per_row)
    : level(level), eps(eps), rows(rows), groups_per_row(groups_per_row) {
  if (level == Granularity::per_row || level == Granularity::per_tensor) {
    row_dense.assign(rows, 0.0);
    row_kept.assign(rows, 0.0);
  }
  if (level == Granularity::per_group) {
    group_dense.assign(rows * groups_per_row, 0.0);
    group_kept.assign(rows * groups_per_row, 0.0);
  }
}

void NormAccumulator::add_group(index_t row, index_t group, double dense_sq,
                                double kept_sq) {
  switch (level) {
    case Granularity::none:
      break;
    case Granularity::per_group:
      group_dense[row * groups_per_row + group] = dense_sq;
      group_kept[row * groups_per_row + group] = kept_sq;
      break;
    case Granularity::per_row:
    case Granularity::per_tensor:
      row_dense[row] += dense_sq;
      row_kept[row] += kept_sq;
      break;
  }
}

void NormAccumulator::finish_row(index_t row) {
  if (level == Granularity::per_tensor) {
    tensor_dense += row_dense[row];
    tensor_kept += row_kept[row];
  }
}

ScaleRecord NormAccumulator::finalize() const {
  ScaleRecord rec;
  rec.level = level;
  rec.rows = rows;
  rec.groups_per_row = groups_per_row;
  switch (level) {
    case Granularity::none:
      break;
    case Granularity::per_tensor:
      rec.values.push_back(compensation_scale(tensor_dense, tensor_kept, eps));
      break;
    case Granularity::per_row:
      rec.values.resize(rows);
      for (index_t i = 0; i < rows; ++i) {
        rec.values[i] = compensation_scale(row_dense[i], row_kept[i], eps);
      }
      break;
    case Granularity::per_group: {
      rec.values.resize(rows * groups_per_row);
      for (index_t i = 0; i < rows * groups_per_row; ++i) {
        rec.values[i] = compensation_scale(group_dense[i], group_kept[i], eps);
      }
      break;
    }
  }
  return rec;
}

}  // namespace detail

namespace {

void check_group_width(const DenseMatrix& x, const NMPattern& pattern,
                       const char* op) {
  pattern.validate();
  if (x.cols() % pattern.m != 0) {
    throw dimension_error(std::string(op) + ": width of " + x.shape_string() +
                          " is not divisible by group size m=" +
                          std::to_string(pattern.m));
  }
}

}  // namespace

BoolMask topk_mask(const DenseMatrix& x, const NMPattern& pattern) {
  check_group_width(x, pattern, "topk_mask");
  BoolMask mask{x.rows(), x.cols(),
                std::vector<std::uint8_t>(static_cast<size_t>(x.size()), 0)};
  const int m = pattern.m, n = pattern.n;
  const index_t groups = x.cols() / m;
  int kept[8];
  for (index_t i = 0; i < x.rows(); ++i) {
    const float* row = x.row_ptr(i);
    std::uint8_t* mrow = mask.data.data() + i * x.cols();
    for (index_t g = 0; g < groups; ++g) {
      detail::topk_group(row + g * m, m, n, kept);
      for (int s = 0; s < n; ++s) mrow[g * m + kept[s]] = 1;
    }
  }
  return mask;
}

SparsifyResult sparsify_activation(const DenseMatrix& x,
                                   const NMPattern& pattern, Granularity g,
                                   float eps) {
  check_group_width(x, pattern, "sparsify_activation");
  if (!(eps > 0.0f)) {
    throw config_error("sparsify_activation: eps must be > 0");
  }

  const int m = pattern.m, n = pattern.n;
  const index_t groups = x.cols() / m;
  DenseMatrix masked(x.rows(), x.cols());
  detail::NormAccumulator acc(g, eps, x.rows(), groups);

  std::vector<int> kept_all(static_cast<size_t>(x.rows() * groups * n));
  int kept[8];
  for (index_t i = 0; i < x.rows(); ++i) {
    const float* row = x.row_ptr(i);
    float* out = masked.row_ptr(i);
    for (index_t grp = 0; grp < groups; ++grp) {
      const float* gptr = row + grp * m;
      double dense_sq = 0.0, kept_sq = 0.0;
      if (!detail::analyze_group(gptr, m, n, kept, &dense_sq, &kept_sq)) {
        throw numeric_error(
            "sparsify_activation: input contains non-finite values");
      }
      for (int s = 0; s < n; ++s) out[grp * m + kept[s]] = gptr[kept[s]];
      acc.add_group(i, grp, dense_sq, kept_sq);
      for (int s = 0; s < n; ++s) kept_all[(i * groups + grp) * n + s] = kept[s];
    }
    acc.finish_row(i);
  }

  SparsifyResult result;
  result.scales = acc.finalize();
  if (g == Granularity::none) {
    result.sx = std::move(masked);
    return result;
  }
  result.sx = DenseMatrix(x.rows(), x.cols());
  for (index_t i = 0; i < x.rows(); ++i) {
    const float* src = masked.row_ptr(i);
    float* dst = result.sx.row_ptr(i);
    for (index_t grp = 0; grp < groups; ++grp) {
      const float s = result.scales.at(i, grp);
      for (int slot = 0; slot < n; ++slot) {
        const index_t c = grp * m + kept_all[(i * groups + grp) * n + slot];
        dst[c] = s * src[c];
      }
    }
  }
  return result;
}

DenseMatrix score_weights(const DenseMatrix& w,
                          const std::optional<std::vector<float>>& x_norms,
                          const ScoreSpec& spec) {
  spec.validate();
  if (spec.needs_activation_norms()) {
    if (!x_norms) {
      throw config_error("score_weights: method '" + spec.name() +
                         "' needs input-channel activation norms");
    }
    if (static_cast<index_t>(x_norms->size()) != w.cols()) {
      throw dimension_error("score_weights: norm vector length " +
                            std::to_string(x_norms->size()) +
                            " does not match w.cols of " + w.shape_string());
    }
  }

  const index_t rows = w.rows(), cols = w.cols();
  DenseMatrix scores(rows, cols);

  switch (spec.method) {
    case ScoreSpec::Method::magnitude: {
      for (index_t i = 0; i < rows; ++i) {
        for (index_t j = 0; j < cols; ++j) {
          scores(i, j) = std::fabs(w(i, j));
        }
      }
      break;
    }
    case ScoreSpec::Method::wanda: {
      const auto& norms = *x_norms;
      for (index_t i = 0; i < rows; ++i) {
        for (index_t j = 0; j < cols; ++j) {
          scores(i, j) = std::fabs(w(i, j)) * norms[j];
        }
      }
      break;
    }
    case ScoreSpec::Method::ria: {
      const auto& norms = *x_norms;
      std::vector<double> col_abs(cols, 0.0), row_abs(rows, 0.0);
      for (index_t i = 0; i < rows; ++i) {
        for (index_t j = 0; j < cols; ++j) {
          const double a = std::fabs(static_cast<double>(w(i, j)));
          col_abs[j] += a;
          row_abs[i] += a;
        }
      }
      for (index_t i = 0; i < rows; ++i) {
        for (index_t j = 0; j < cols; ++j) {
          const double a = std::fabs(static_cast<double>(w(i, j)));
          const double ri = a / (col_abs[j] + kScoreDenomEps) +
                            a / (row_abs[i] + kScoreDenomEps);
          scores(i, j) = static_cast<float>(
              ri * std::pow(static_cast<double>(norms[j]),
                            static_cast<double>(spec.ria_a)));
        }
      }
      break;
    }
    case ScoreSpec::Method::bawa: {
      const auto& norms = *x_norms;
      std::vector<double> col_sq(cols, 0.0), row_sq(rows, 0.0);
      for (index_t i = 0; i < rows; ++i) {
        for (index_t j = 0; j < cols; ++j) {
          const double v = static_cast<double>(w(i, j));
          col_sq[j] += v * v;
          row_sq[i] += v * v;
        }
      }
      for (index_t i = 0; i < rows; ++i) {
        const double row_norm = std::sqrt(row_sq[i]);
        for (index_t j = 0; j < cols; ++j) {
          const double a = std::fabs(static_cast<double>(w(i, j)));
          const double col_norm = std::sqrt(col_sq[j]);
          const double score =
              (a / (std::pow(col_norm, static_cast<double>(spec.bawa_theta1)) +
                    kScoreDenomEps) +
               a / (std::pow(row_norm, static_cast<double>(spec.bawa_theta2)) +
                    kScoreDenomEps)) *
              std::pow(static_cast<double>(norms[j]),
                       static_cast<double>(spec.bawa_theta3));
          scores(i, j) = static_cast<float>(score);
        }
      }
      break;
    }
  }
  return scores;
}

DenseMatrix prune_weights(const DenseMatrix& w, const DenseMatrix& scores,
                          const NMPattern& pattern) {
  if (!w.same_shape(scores)) {
    throw dimension_error("prune_weights: w is " + w.shape_string() +
                          " but scores is " + scores.shape_string());
  }
  check_group_width(w, pattern, "prune_weights");

  const int m = pattern.m, n = pattern.n;
  const index_t groups = w.cols() / m;
  DenseMatrix out(w.rows(), w.cols());
  int kept[8];
  for (index_t i = 0; i < w.rows(); ++i) {
    const float* wrow = w.row_ptr(i);
    const float* srow = scores.row_ptr(i);
    float* orow = out.row_ptr(i);
    for (index_t g = 0; g < groups; ++g) {
      // Scores are nonnegative, so magnitude selection picks the
      // largest scores with the same tie rule.
      detail::topk_group(srow + g * m, m, n, kept);
      for (int s = 0; s < n; ++s) {
        orow[g * m + kept[s]] = wrow[g * m + kept[s]];
      }
    }
  }
  return out;
}

}  // namespace lynx
