#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lynx/model.hpp"
#include "lynx/sparsify.hpp"
#include "lynx/spmm.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

// Normalized-value histogram: entries divided by max |value|, then
// binned into 50 uniform bins over [-1, 1].
struct Histogram {
  std::array<float, 51> bin_edges{};
  std::array<std::int64_t, 50> counts{};
  float normalization = 0.0f;  // the max-abs divisor

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
};

// Fraction of normalized entries with |v| above this threshold counts
// as "active" in reports (spike-slab(0.1) inputs report around 10%).
inline constexpr float kActiveThreshold = 0.1f;

// ||y_full - y_sparse||_F / ||y_full||_F.
double rfe(const DenseMatrix& y_full, const DenseMatrix& y_sparse);

Histogram histogram(const DenseMatrix& m);

struct LayerReport {
  std::string name;
  std::string kind;
  int depth = 0;
  index_t d_in = 0;
  index_t d_out = 0;
  double rfe_weight = 0.0;      // pruned weights vs dense, same input
  double rfe_activation = 0.0;  // sparsified activations vs dense, same input
  Histogram activation_histogram;
  Histogram weight_histogram;
  double active_fraction = 0.0;  // of the input activation
  std::string output_digest;     // digest of the dense reference output
  std::optional<FusedTiming> timings;
};

struct SweepOptions {
  NMPattern pattern{2, 4};
  Granularity activation_granularity = Granularity::none;
  ScoreSpec weight_score{};
  float eps = kDefaultEps;
  bool measure_timings = true;
};

// Layer-local error sweep: every layer sees the dense pass's input, and
// the weight-sparse / activation-sparse variants are compared against
// the dense output of that same input (instantaneous error, not
// propagated).
std::vector<LayerReport> layer_sweep(const Stack& stack, const DenseMatrix& x0,
                                     const SweepOptions& opts = {});

struct MethodResult {
  std::string name;
  double rfe_end_to_end = 0.0;
  // Propagated per-layer error: this method's layer output vs the dense
  // pass's, in stack order.
  std::vector<std::pair<std::string, double>> per_layer;
};

struct NamedPolicy {
  std::string name;
  ExecPolicy policy;
};

struct ComparisonReport {
  std::vector<MethodResult> methods;
};

// End-to-end comparison of execution policies against the dense
// reference on the same input.
ComparisonReport compare_methods(const Stack& stack, const DenseMatrix& x0,
                                 const std::vector<NamedPolicy>& methods);

// Fits one closed-form LoRA per layer on the dense pass's activations.
// The rank is clamped to each layer's min dimension.
std::map<std::string, LoraPair> fit_stack_loras(
    const Stack& stack, const DenseMatrix& x0, index_t rank,
    const NMPattern& pattern = {2, 4},
    Granularity g = Granularity::per_tensor, float eps = kDefaultEps);

// Builds the standard method ladder by name: dense, sa-native, sa-nc,
// sa-nc-lora, sa-nc-lora-sl, sw-magnitude, sw-wanda, sw-ria, sw-bawa.
// The lora variants fit rank-R compensation on x0's dense activations;
// the -sl variant additionally applies the preset skip list.
ExecPolicy build_method_policy(const std::string& name, const Stack& stack,
                               const DenseMatrix& x0,
                               index_t rank = kDefaultLoraRank,
                               const NMPattern& pattern = {2, 4},
                               float eps = kDefaultEps);

// Versioned report emission (schema documented in the README).
nlohmann::json sweep_report_json(const Stack& stack,
                                 const std::vector<LayerReport>& reports,
                                 const SweepOptions& opts);
std::string sweep_report_csv(const std::vector<LayerReport>& reports);

nlohmann::json comparison_report_json(const Stack& stack,
                                      const ComparisonReport& report);
std::string comparison_report_csv(const ComparisonReport& report);

// FNV-1a digest of a matrix's bytes, base64-encoded; embedded in
// reports so outputs can be compared across runs without shipping
// tensors.
std::string tensor_digest(const DenseMatrix& m);

}  // namespace lynx
