#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lynx/sparsify.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

inline constexpr index_t kDefaultLoraRank = 64;

// Low-rank compensation branch: a (d_out x R) and b (R x d_in). The
// residual applied at inference is X * (a * b)^T on the dense input.
struct LoraPair {
  DenseMatrix a;
  DenseMatrix b;
  // Set when the closed-form solver had to fall back to pseudo-inverse
  // semantics because the activation batch was rank deficient.
  bool rank_deficient_fit = false;

  index_t rank() const { return a.cols(); }
  index_t d_out() const { return a.rows(); }
  index_t d_in() const { return b.cols(); }

  static LoraPair zero(index_t d_out, index_t d_in, index_t rank) {
    return {DenseMatrix(d_out, rank), DenseMatrix(rank, d_in), false};
  }
};

// Gradient-descent settings. init_scale is the half-width of the
// uniform initialization interval.
struct TrainConfig {
  std::int64_t steps = 2000;
  float learning_rate = 1e-3f;
  index_t batch = 0;  // informational; batches are passed in explicitly
  std::uint64_t seed = 0;
  float init_scale = 1e-5f;

  void validate() const {
    if (steps < 1) throw config_error("TrainConfig: steps must be >= 1");
    if (!(learning_rate > 0.0f)) {
      throw config_error("TrainConfig: learning_rate must be > 0");
    }
    if (init_scale < 0.0f) {
      throw config_error("TrainConfig: init_scale must be >= 0");
    }
  }
};

// Squared-Frobenius output discrepancy of the compensated sparse path:
//   || X*W^T - (S(X)*W^T + X*(a*b)^T) ||^2
// Zero iff the compensation is exact.
double compensation_loss(const DenseMatrix& x, const DenseMatrix& w,
                         const LoraPair& lora, const NMPattern& pattern,
                         Granularity g, float eps = kDefaultEps);

struct LossGradients {
  double loss = 0.0;
  DenseMatrix grad_a;
  DenseMatrix grad_b;
};

// Analytic gradient of compensation_loss with respect to the LoRA
// factors. W is frozen and the sparsification operator is treated as a
// constant map of X.
LossGradients loss_gradients(const DenseMatrix& x, const DenseMatrix& w,
                             const LoraPair& lora, const NMPattern& pattern,
                             Granularity g, float eps = kDefaultEps);

// Closed-form rank-R minimizer of the compensation loss over a * b
// (reduced-rank regression: orthogonal factorization of X, then a
// truncated SVD of the rotated least-squares fit). Rank-deficient
// batches fall back to pseudo-inverse semantics with a relative
// singular-value cutoff of 1e-10 and set rank_deficient_fit.
LoraPair rrr_fit(const DenseMatrix& x_batch, const DenseMatrix& w,
                 const NMPattern& pattern, Granularity g, float eps,
                 index_t rank);

struct GdFitResult {
  LoraPair lora;
  std::vector<double> loss_trace;  // loss before each update, per step
};

// Plain gradient descent on the compensation loss, cycling through the
// given batches. Only the LoRA factors are updated; throws
// training_error (with the step index) if the loss turns non-finite.
GdFitResult gd_fit(std::span<const DenseMatrix> x_batches, const DenseMatrix& w,
                   const NMPattern& pattern, Granularity g, float eps,
                   index_t rank, const TrainConfig& cfg);

// Weight-side compensation used by the SLiM baseline: the rank-R
// truncated SVD of (w - w_pruned), split as a = U_R * Sigma_R,
// b = V_R^T.
LoraPair slim_init(const DenseMatrix& w, const DenseMatrix& w_pruned,
                   index_t rank);

// LoraPair directory serialization: lora_a.lynx + lora_b.lynx plus a
// JSON sidecar (rank, flags, and caller-provided metadata strings).
void save_lora(const std::string& dir, const LoraPair& lora,
               const std::vector<std::pair<std::string, std::string>>& extra = {});
LoraPair load_lora(const std::string& dir);

}  // namespace lynx
