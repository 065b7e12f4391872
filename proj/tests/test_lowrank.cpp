#include <doctest.h>

#include <cmath>

#include "lynx/lowrank.hpp"
#include "lynx/rng.hpp"
#include "lynx/sparsify.hpp"
#include "lynx/tensor.hpp"
#include "oracles.hpp"

#include <filesystem>

using namespace lynx;

namespace {

const NMPattern kPat{2, 4};
constexpr Granularity kGran = Granularity::per_tensor;

// Central finite differences of the double-precision reference loss.
void fd_gradients(const DenseMatrix& x, const DenseMatrix& w, LoraPair lora,
                  DenseMatrix& grad_a, DenseMatrix& grad_b, float step) {
  const auto sx = sparsify_activation(x, kPat, kGran).sx;
  grad_a = DenseMatrix(lora.a.rows(), lora.a.cols());
  grad_b = DenseMatrix(lora.b.rows(), lora.b.cols());
  for (index_t i = 0; i < lora.a.size(); ++i) {
    const float orig = lora.a.data()[i];
    lora.a.data()[i] = orig + step;
    const double up = oracle::loss_ref(x, w, lora.a, lora.b, sx);
    lora.a.data()[i] = orig - step;
    const double down = oracle::loss_ref(x, w, lora.a, lora.b, sx);
    lora.a.data()[i] = orig;
    grad_a.data()[i] = static_cast<float>((up - down) / (2.0 * step));
  }
  for (index_t i = 0; i < lora.b.size(); ++i) {
    const float orig = lora.b.data()[i];
    lora.b.data()[i] = orig + step;
    const double up = oracle::loss_ref(x, w, lora.a, lora.b, sx);
    lora.b.data()[i] = orig - step;
    const double down = oracle::loss_ref(x, w, lora.a, lora.b, sx);
    lora.b.data()[i] = orig;
    grad_b.data()[i] = static_cast<float>((up - down) / (2.0 * step));
  }
}

double rel_norm_diff(const DenseMatrix& a, const DenseMatrix& b) {
  return frobenius_norm(sub(a, b)) / frobenius_norm(a);
}

LoraPair random_lora(index_t d_out, index_t d_in, index_t rank,
                     std::uint64_t seed) {
  LoraPair lora;
  lora.a = sample(RandomSpec::gaussian(0, 0.2f, seed), d_out, rank);
  lora.b = sample(RandomSpec::gaussian(0, 0.2f, seed + 1), rank, d_in);
  return lora;
}

}  // namespace

TEST_SUITE_BEGIN("lowrank");

TEST_CASE("loss vanishes when sparsification changes nothing") {
  // an already 2:4 input with level none passes through untouched
  const auto x0 = sample(RandomSpec::gaussian(0, 1, 1), 8, 16);
  const auto x = sparsify_activation(x0, kPat, Granularity::none).sx;
  const auto w = sample(RandomSpec::gaussian(0, 1, 2), 6, 16);
  const auto zero = LoraPair::zero(6, 16, 4);
  CHECK(compensation_loss(x, w, zero, kPat, Granularity::none) == 0.0);
}

TEST_CASE("zero-lora loss equals the pruned-residual energy") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 3), 12, 24);
  const auto w = sample(RandomSpec::gaussian(0, 1, 4), 9, 24);
  const auto zero = LoraPair::zero(9, 24, 4);
  const double loss = compensation_loss(x, w, zero, kPat, kGran);
  const auto sx = sparsify_activation(x, kPat, kGran).sx;
  const double direct = std::pow(frobenius_norm(sub(gemm(x, w), gemm(sx, w))), 2);
  CHECK(loss == doctest::Approx(direct).epsilon(1e-6));
}

TEST_CASE("loss agrees with the scalar reference") {
  const auto x = sample(RandomSpec::spike_slab(0.2f, 0.01f, 1, 5), 10, 20);
  const auto w = sample(RandomSpec::gaussian(0, 1, 6), 7, 20);
  const auto lora = random_lora(7, 20, 3, 7);
  const auto sx = sparsify_activation(x, kPat, kGran).sx;
  const double want = oracle::loss_ref(x, w, lora.a, lora.b, sx);
  const double got = compensation_loss(x, w, lora, kPat, kGran);
  CHECK(got == doctest::Approx(want).epsilon(1e-4));
}

TEST_CASE("analytic gradients match central finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto x = sample(RandomSpec::gaussian(0, 1, seed * 13 + 1), 8, 12);
    const auto w = sample(RandomSpec::gaussian(0, 1, seed * 13 + 2), 6, 12);
    const auto lora = random_lora(6, 12, 3, seed * 13 + 3);
    const auto analytic = loss_gradients(x, w, lora, kPat, kGran);
    DenseMatrix fd_a, fd_b;
    fd_gradients(x, w, lora, fd_a, fd_b, 1e-3f);
    CHECK(rel_norm_diff(fd_a, analytic.grad_a) <= 1e-4);
    CHECK(rel_norm_diff(fd_b, analytic.grad_b) <= 1e-4);
  }
}

TEST_CASE("rrr with no pruning returns a zero pair") {
  const auto x0 = sample(RandomSpec::gaussian(0, 1, 8), 20, 16);
  const auto x = sparsify_activation(x0, kPat, Granularity::none).sx;
  const auto w = sample(RandomSpec::gaussian(0, 1, 9), 10, 16);
  const auto lora = rrr_fit(x, w, kPat, Granularity::none, kDefaultEps, 4);
  CHECK(frobenius_norm(lora.a) * frobenius_norm(lora.b) <=
        1e-4 * frobenius_norm(w));
}

TEST_CASE("full-rank rrr on a square batch is exact") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 10), 16, 16);
  const auto w = sample(RandomSpec::gaussian(0, 1, 11), 16, 16);
  const auto zero = LoraPair::zero(16, 16, 16);
  const double base = compensation_loss(x, w, zero, kPat, kGran);
  const auto lora = rrr_fit(x, w, kPat, kGran, kDefaultEps, 16);
  const double fitted = compensation_loss(x, w, lora, kPat, kGran);
  CHECK(fitted <= 1e-8 * base);
}

TEST_CASE("rrr loss is monotone non-increasing in rank") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto x = sample(RandomSpec::gaussian(0, 1, seed + 20), 32, 16);
    const auto w = sample(RandomSpec::gaussian(0, 1, seed + 40), 16, 16);
    double prev = compensation_loss(x, w, LoraPair::zero(16, 16, 1), kPat,
                                    kGran);
    for (index_t rank : {1, 2, 3, 4, 6, 8}) {
      const auto lora = rrr_fit(x, w, kPat, kGran, kDefaultEps, rank);
      const double loss = compensation_loss(x, w, lora, kPat, kGran);
      CHECK(loss <= prev * (1.0 + 1e-6));
      prev = loss;
    }
  }
}

TEST_CASE("rank-deficient batches are flagged and still reduce the loss") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 30), 8, 24);  // 8 < 24
  const auto w = sample(RandomSpec::gaussian(0, 1, 31), 12, 24);
  const auto lora = rrr_fit(x, w, kPat, kGran, kDefaultEps, 4);
  CHECK(lora.rank_deficient_fit);
  const double base =
      compensation_loss(x, w, LoraPair::zero(12, 24, 4), kPat, kGran);
  CHECK(compensation_loss(x, w, lora, kPat, kGran) <= base);
}

TEST_CASE("gd starting from zero reports the zero-lora loss first") {
  const auto x = sample(RandomSpec::spike_slab(0.2f, 0.01f, 1, 32), 16, 16);
  const auto w = sample(RandomSpec::gaussian(0, 1, 33), 8, 16);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.learning_rate = 1e-3f;
  cfg.init_scale = 0.0f;
  const DenseMatrix batches[1] = {x};
  const auto result = gd_fit(batches, w, kPat, kGran, kDefaultEps, 4, cfg);
  REQUIRE(result.loss_trace.size() == 5);
  const double zero_loss =
      compensation_loss(x, w, LoraPair::zero(8, 16, 4), kPat, kGran);
  CHECK(result.loss_trace[0] == doctest::Approx(zero_loss).epsilon(1e-9));
}

TEST_CASE("gd training converges toward the closed-form bound") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 34), 24, 16);
  const auto w = sample(RandomSpec::gaussian(0, 1, 35), 8, 16);
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.learning_rate = 2e-4f;
  cfg.seed = 7;
  const DenseMatrix batches[1] = {x};
  const auto result = gd_fit(batches, w, kPat, kGran, kDefaultEps, 4, cfg);
  const auto reference = rrr_fit(x, w, kPat, kGran, kDefaultEps, 4);

  const double gd_loss = compensation_loss(x, w, result.lora, kPat, kGran);
  const double rrr_loss = compensation_loss(x, w, reference, kPat, kGran);
  const double zero_loss =
      compensation_loss(x, w, LoraPair::zero(8, 16, 4), kPat, kGran);

  CHECK(gd_loss >= rrr_loss - 1e-6);
  CHECK(gd_loss < zero_loss);       // training made progress
  CHECK(result.loss_trace.front() > result.loss_trace.back());
}

TEST_CASE("gd reports divergence with the failing step") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 36), 16, 16);
  const auto w = sample(RandomSpec::gaussian(0, 5, 37), 8, 16);
  TrainConfig cfg;
  cfg.steps = 5000;
  cfg.learning_rate = 10.0f;  // guaranteed blowup
  cfg.init_scale = 1e-2f;
  cfg.seed = 1;
  const DenseMatrix batches[1] = {x};
  try {
    (void)gd_fit(batches, w, kPat, kGran, kDefaultEps, 4, cfg);
    FAIL("expected training_error");
  } catch (const training_error& e) {
    CHECK(e.step > 0);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("backbone weights are untouched by fitting") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 38), 16, 16);
  const auto w = sample(RandomSpec::gaussian(0, 1, 39), 8, 16);
  const DenseMatrix w_copy = w;
  (void)rrr_fit(x, w, kPat, kGran, kDefaultEps, 4);
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.seed = 2;
  const DenseMatrix batches[1] = {x};
  (void)gd_fit(batches, w, kPat, kGran, kDefaultEps, 4, cfg);
  CHECK(bit_equal(w, w_copy));
}

TEST_CASE("fitted compensation beats zero compensation on spike-slab data") {
  const auto x = sample(RandomSpec::spike_slab(0.1f, 0.01f, 1, 40), 64, 32);
  const auto w = sample(RandomSpec::gaussian(0, 0.2f, 41), 24, 32);
  const auto lora = rrr_fit(x, w, kPat, kGran, kDefaultEps, 8);
  const double fitted = compensation_loss(x, w, lora, kPat, kGran);
  const double zero =
      compensation_loss(x, w, LoraPair::zero(24, 32, 8), kPat, kGran);
  CHECK(fitted < zero);
}

TEST_CASE("slim of an unpruned weight is the zero pair") {
  const auto w = sample(RandomSpec::gaussian(0, 1, 50), 12, 16);
  const auto lora = slim_init(w, w, 4);
  CHECK(frobenius_norm(lora.a) == 0.0);
  CHECK(frobenius_norm(lora.b) == 0.0);
}

TEST_CASE("slim reconstructs a rank-1 delta exactly") {
  const auto u = sample(RandomSpec::gaussian(0, 1, 51), 12, 1);
  const auto v = sample(RandomSpec::gaussian(0, 1, 52), 16, 1);
  DenseMatrix w_pruned = sample(RandomSpec::gaussian(0, 1, 53), 12, 16);
  DenseMatrix w(12, 16);
  for (index_t i = 0; i < 12; ++i) {
    for (index_t j = 0; j < 16; ++j) {
      w(i, j) = w_pruned(i, j) + u(i, 0) * v(j, 0);
    }
  }
  const auto lora = slim_init(w, w_pruned, 1);
  const auto delta = gemm(lora.a, transpose(lora.b));  // lA * lB
  CHECK(relative_frobenius(sub(w, w_pruned), delta) <= 1e-6);
}

TEST_CASE("slim residual is monotone non-increasing in rank") {
  const auto w = sample(RandomSpec::gaussian(0, 1, 54), 20, 24);
  const auto scores = score_weights(w, std::nullopt, ScoreSpec{});
  const auto pruned = prune_weights(w, scores, kPat);
  double prev = std::numeric_limits<double>::infinity();
  for (index_t rank : {1, 2, 4, 8, 16, 20}) {
    const auto lora = slim_init(w, pruned, rank);
    const double residual =
        frobenius_norm(sub(sub(w, pruned), gemm(lora.a, transpose(lora.b))));
    CHECK(residual <= prev * (1.0 + 1e-6) + 1e-12);
    prev = residual;
  }
}

TEST_CASE("lora directory round-trip") {
  namespace fs = std::filesystem;
  const auto dir = (fs::temp_directory_path() / "lynx_lora_test").string();
  const auto lora = random_lora(8, 16, 4, 60);
  save_lora(dir, lora, {{"solver", "rrr"}});
  const auto loaded = load_lora(dir);
  CHECK(bit_equal(lora.a, loaded.a));
  CHECK(bit_equal(lora.b, loaded.b));
  fs::remove_all(dir);
}

TEST_CASE("rank bounds are enforced") {
  const auto x = sample(RandomSpec::gaussian(0, 1, 70), 16, 16);
  const auto w = sample(RandomSpec::gaussian(0, 1, 71), 8, 16);
  CHECK_THROWS_AS((void)rrr_fit(x, w, kPat, kGran, kDefaultEps, 9),
                  dimension_error);
  CHECK_THROWS_AS((void)slim_init(w, w, 100), dimension_error);
}

TEST_SUITE_END();
