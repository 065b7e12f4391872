#include "lynx/lowrank.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lynx/rng.hpp"
#include "lynx/tensor_io.hpp"

namespace lynx {

namespace {

using EMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<const EMatrix>;

EMap map_of(const DenseMatrix& m) {
  return EMap(m.data().data(), m.rows(), m.cols());
}

constexpr double kSingularValueCutoff = 1e-10;

void check_lora_shapes(const DenseMatrix& x, const DenseMatrix& w,
                       const LoraPair& lora, const char* op) {
  if (x.cols() != w.cols() || lora.a.rows() != w.rows() ||
      lora.b.cols() != x.cols() || lora.a.cols() != lora.b.rows()) {
    throw dimension_error(std::string(op) + ": inconsistent shapes, x " +
                          x.shape_string() + ", w " + w.shape_string() +
                          ", lA " + lora.a.shape_string() + ", lB " +
                          lora.b.shape_string());
  }
}

// Residual target of the compensation problem on this batch:
// E = X*W^T - S(X)*W^T, cached by every solver.
DenseMatrix sparsification_residual(const DenseMatrix& x, const DenseMatrix& w,
                                    const NMPattern& pattern, Granularity g,
                                    float eps) {
  const DenseMatrix teacher = gemm(x, w);
  const DenseMatrix sparse = gemm(sparsify_activation(x, pattern, g, eps).sx, w);
  return sub(teacher, sparse);
}

DenseMatrix lora_residual_branch(const DenseMatrix& x, const LoraPair& lora) {
  return gemm(gemm(x, lora.b), lora.a);
}

double sumsq_diff(const DenseMatrix& a, const DenseMatrix& b) {
  double acc = 0.0;
  const auto av = a.data();
  const auto bv = b.data();
  for (index_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(av[i] - bv[i]);
    acc += d * d;
  }
  return acc;
}

}  // namespace

double compensation_loss(const DenseMatrix& x, const DenseMatrix& w,
                         const LoraPair& lora, const NMPattern& pattern,
                         Granularity g, float eps) {
  check_lora_shapes(x, w, lora, "compensation_loss");
  const DenseMatrix target = sparsification_residual(x, w, pattern, g, eps);
  const DenseMatrix residual = lora_residual_branch(x, lora);
  return sumsq_diff(target, residual);
}

LossGradients loss_gradients(const DenseMatrix& x, const DenseMatrix& w,
                             const LoraPair& lora, const NMPattern& pattern,
                             Granularity g, float eps) {
  check_lora_shapes(x, w, lora, "loss_gradients");
  const DenseMatrix target = sparsification_residual(x, w, pattern, g, eps);

  // Forward: P = X*lB^T, Yr = P*lA^T, D = Yr - E.
  const DenseMatrix projected = gemm(x, lora.b);
  const DenseMatrix residual = gemm(projected, lora.a);
  const DenseMatrix diff = sub(residual, target);

  LossGradients out;
  out.loss = 0.0;
  for (float v : diff.data()) out.loss += static_cast<double>(v) * v;

  // dL/dlA = 2 * D^T * P, dL/dlB = 2 * (D*lA)^T * X.
  DenseMatrix grad_a = gemm(transpose(diff), transpose(projected));
  DenseMatrix grad_b =
      gemm(transpose(gemm(diff, transpose(lora.a))), transpose(x));
  for (float& v : grad_a.data()) v *= 2.0f;
  for (float& v : grad_b.data()) v *= 2.0f;
  out.grad_a = std::move(grad_a);
  out.grad_b = std::move(grad_b);
  return out;
}

LoraPair rrr_fit(const DenseMatrix& x_batch, const DenseMatrix& w,
                 const NMPattern& pattern, Granularity g, float eps,
                 index_t rank) {
  if (x_batch.cols() != w.cols()) {
    throw dimension_error("rrr_fit: x is " + x_batch.shape_string() + ", w is " +
                          w.shape_string() + "; contraction dims differ");
  }
  const index_t d_in = x_batch.cols();
  const index_t d_out = w.rows();
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw dimension_error("rrr_fit: rank " + std::to_string(rank) +
                          " out of range for layer " + w.shape_string());
  }

  const DenseMatrix target = sparsification_residual(x_batch, w, pattern, g, eps);

  // Thin SVD of X gives both the orthogonal factor Q = U_r and the
  // pseudo-inverse of the triangular part in one pass.
  Eigen::BDCSVD<EMatrix> x_svd(map_of(x_batch),
                               Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = x_svd.singularValues();
  const double cutoff = kSingularValueCutoff * static_cast<double>(sv(0));
  index_t r = 0;
  while (r < sv.size() && static_cast<double>(sv(r)) > cutoff) ++r;

  LoraPair lora = LoraPair::zero(d_out, d_in, rank);
  lora.rank_deficient_fit = r < d_in;  // the fitted map is a projection
  if (r == 0) return lora;             // zero batch: zero compensation

  const EMatrix q = x_svd.matrixU().leftCols(r);          // N x r
  const EMatrix rotated = q.transpose() * map_of(target);  // r x d_out

  Eigen::BDCSVD<EMatrix> g_svd(rotated,
                               Eigen::ComputeThinU | Eigen::ComputeThinV);
  index_t r_eff = std::min(rank, static_cast<index_t>(
                                     g_svd.singularValues().size()));
  // Directions with zero singular value carry nothing; keep the pair's
  // factors zero there instead of storing arbitrary basis vectors.
  while (r_eff > 0 && !(g_svd.singularValues()(r_eff - 1) > 0.0f)) --r_eff;
  if (r_eff == 0) return lora;

  // lA = V_g * Sigma_g, lB = (T^+ * U_g)^T with T^+ = V_x * diag(1/s).
  const EMatrix lora_a_part =
      g_svd.matrixV().leftCols(r_eff) *
      g_svd.singularValues().head(r_eff).asDiagonal();
  const EMatrix t_pinv_u =
      x_svd.matrixV().leftCols(r) *
      (sv.head(r).cwiseInverse().asDiagonal() *
       g_svd.matrixU().leftCols(r_eff));

  Eigen::Map<EMatrix> a_map(lora.a.data().data(), d_out, rank);
  Eigen::Map<EMatrix> b_map(lora.b.data().data(), rank, d_in);
  a_map.leftCols(r_eff) = lora_a_part;
  b_map.topRows(r_eff) = t_pinv_u.transpose();
  return lora;
}

GdFitResult gd_fit(std::span<const DenseMatrix> x_batches, const DenseMatrix& w,
                   const NMPattern& pattern, Granularity g, float eps,
                   index_t rank, const TrainConfig& cfg) {
  cfg.validate();
  if (x_batches.empty()) {
    throw config_error("gd_fit: at least one activation batch is required");
  }
  const index_t d_in = x_batches[0].cols();
  const index_t d_out = w.rows();
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw dimension_error("gd_fit: rank " + std::to_string(rank) +
                          " out of range for layer " + w.shape_string());
  }
  for (const auto& b : x_batches) {
    if (b.cols() != d_in) {
      throw dimension_error("gd_fit: batch width " + b.shape_string() +
                            " does not match d_in " + std::to_string(d_in));
    }
  }

  GdFitResult result;
  result.lora = LoraPair::zero(d_out, d_in, rank);
  SplitMix64 rng(derive_seed(cfg.seed, 0x10ad));
  if (cfg.init_scale > 0.0f) {
    for (float& v : result.lora.a.data()) {
      v = static_cast<float>((2.0 * rng.next_uniform() - 1.0) * cfg.init_scale);
    }
    for (float& v : result.lora.b.data()) {
      v = static_cast<float>((2.0 * rng.next_uniform() - 1.0) * cfg.init_scale);
    }
  }

  // The sparsification residual is a constant per batch; cache it.
  std::vector<DenseMatrix> targets(x_batches.size());
  std::vector<bool> have_target(x_batches.size(), false);

  result.loss_trace.reserve(static_cast<size_t>(cfg.steps));
  const float lr = cfg.learning_rate;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const size_t bi = static_cast<size_t>(step) % x_batches.size();
    const DenseMatrix& x = x_batches[bi];
    if (!have_target[bi]) {
      targets[bi] = sparsification_residual(x, w, pattern, g, eps);
      have_target[bi] = true;
    }
    const DenseMatrix& target = targets[bi];

    const DenseMatrix projected = gemm(x, result.lora.b);
    const DenseMatrix residual = gemm(projected, result.lora.a);
    const DenseMatrix diff = sub(residual, target);
    double loss = 0.0;
    for (float v : diff.data()) loss += static_cast<double>(v) * v;
    result.loss_trace.push_back(loss);
    if (!std::isfinite(loss)) {
      throw training_error("gd_fit: loss diverged at step " +
                               std::to_string(step),
                           step);
    }

    const DenseMatrix grad_a = gemm(transpose(diff), transpose(projected));
    const DenseMatrix grad_b =
        gemm(transpose(gemm(diff, transpose(result.lora.a))), transpose(x));
    auto a_data = result.lora.a.data();
    auto ga = grad_a.data();
    for (index_t i = 0; i < result.lora.a.size(); ++i) {
      a_data[i] -= lr * 2.0f * ga[i];
    }
    auto b_data = result.lora.b.data();
    auto gb = grad_b.data();
    for (index_t i = 0; i < result.lora.b.size(); ++i) {
      b_data[i] -= lr * 2.0f * gb[i];
    }
  }
  return result;
}

LoraPair slim_init(const DenseMatrix& w, const DenseMatrix& w_pruned,
                   index_t rank) {
  if (!w.same_shape(w_pruned)) {
    throw dimension_error("slim_init: w is " + w.shape_string() +
                          " but w_pruned is " + w_pruned.shape_string());
  }
  if (rank < 1 || rank > std::min(w.rows(), w.cols())) {
    throw dimension_error("slim_init: rank " + std::to_string(rank) +
                          " out of range for " + w.shape_string());
  }
  const DenseMatrix delta = sub(w, w_pruned);
  Eigen::BDCSVD<EMatrix> svd(map_of(delta),
                             Eigen::ComputeThinU | Eigen::ComputeThinV);
  index_t r_eff =
      std::min(rank, static_cast<index_t>(svd.singularValues().size()));
  while (r_eff > 0 && !(svd.singularValues()(r_eff - 1) > 0.0f)) --r_eff;

  LoraPair lora = LoraPair::zero(w.rows(), w.cols(), rank);
  if (r_eff == 0) return lora;
  Eigen::Map<EMatrix> a_map(lora.a.data().data(), w.rows(), rank);
  Eigen::Map<EMatrix> b_map(lora.b.data().data(), rank, w.cols());
  a_map.leftCols(r_eff) = svd.matrixU().leftCols(r_eff) *
                          svd.singularValues().head(r_eff).asDiagonal();
  b_map.topRows(r_eff) = svd.matrixV().leftCols(r_eff).transpose();
  return lora;
}

void save_lora(const std::string& dir, const LoraPair& lora,
               const std::vector<std::pair<std::string, std::string>>& extra) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory: " + dir);

  write_dense(dir + "/lora_a.lynx", lora.a);
  write_dense(dir + "/lora_b.lynx", lora.b);

  nlohmann::json j;
  j["schema_version"] = 1;
  j["rank"] = lora.rank();
  j["d_out"] = lora.d_out();
  j["d_in"] = lora.d_in();
  j["rank_deficient_fit"] = lora.rank_deficient_fit;
  for (const auto& [k, v] : extra) j[k] = v;

  std::ofstream out(dir + "/lora.json");
  if (!out) throw io_error("cannot open for writing: " + dir + "/lora.json");
  out << j.dump(2) << "\n";
}

LoraPair load_lora(const std::string& dir) {
  std::ifstream in(dir + "/lora.json");
  if (!in) throw io_error("cannot open for reading: " + dir + "/lora.json");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw format_error("lora.json: " + std::string(e.what()));
  }

  LoraPair lora;
  lora.a = read_dense(dir + "/lora_a.lynx");
  lora.b = read_dense(dir + "/lora_b.lynx");
  lora.rank_deficient_fit = j.value("rank_deficient_fit", false);
  if (lora.a.cols() != lora.b.rows() ||
      j.value("rank", lora.rank()) != lora.rank()) {
    throw format_error("lora directory " + dir +
                       ": factor shapes disagree with sidecar");
  }
  return lora;
}

}  // namespace lynx
