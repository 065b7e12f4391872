#include "lynx/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lynx/rng.hpp"

namespace lynx {

double rfe(const DenseMatrix& y_full, const DenseMatrix& y_sparse) {
  if (!y_full.same_shape(y_sparse)) {
    throw dimension_error("rfe: shapes differ (" + y_full.shape_string() +
                          " vs " + y_sparse.shape_string() + ")");
  }
  const double ref = frobenius_norm(y_full);
  if (ref == 0.0) {
    throw numeric_error("rfe: reference output is identically zero");
  }
  return frobenius_norm(sub(y_full, y_sparse)) / ref;
}

Histogram histogram(const DenseMatrix& m) {
  float max_abs = 0.0f;
  for (float v : m.data()) max_abs = std::max(max_abs, std::fabs(v));
  if (max_abs == 0.0f) {
    throw numeric_error("histogram: all-zero matrix has no normalization");
  }

  Histogram h;
  h.normalization = max_abs;
  for (int i = 0; i <= 50; ++i) {
    h.bin_edges[i] = -1.0f + static_cast<float>(i) * (2.0f / 50.0f);
  }
  for (float v : m.data()) {
    const float norm = v / max_abs;  // in [-1, 1] by construction
    int bin = static_cast<int>((static_cast<double>(norm) + 1.0) * 25.0);
    bin = std::clamp(bin, 0, 49);
    ++h.counts[bin];
  }
  return h;
}

namespace {

double active_fraction_of(const DenseMatrix& m) {
  float max_abs = 0.0f;
  for (float v : m.data()) max_abs = std::max(max_abs, std::fabs(v));
  if (max_abs == 0.0f) return 0.0;
  std::int64_t active = 0;
  for (float v : m.data()) {
    if (std::fabs(v) / max_abs > kActiveThreshold) ++active;
  }
  return static_cast<double>(active) / static_cast<double>(m.size());
}

}  // namespace

std::vector<LayerReport> layer_sweep(const Stack& stack, const DenseMatrix& x0,
                                     const SweepOptions& opts) {
  const ForwardResult dense = forward(stack, x0, ExecPolicy{});

  std::vector<LayerReport> reports;
  reports.reserve(stack.layers.size());
  for (size_t i = 0; i < stack.layers.size(); ++i) {
    const Layer& layer = stack.layers[i];
    const DenseMatrix& input = dense.layer_inputs[i];
    const DenseMatrix& reference = dense.layer_outputs[i];

    LayerReport rep;
    rep.name = layer.spec.name;
    rep.kind = to_string(layer.spec.kind);
    rep.depth = layer.spec.depth;
    rep.d_in = layer.spec.d_in;
    rep.d_out = layer.spec.d_out;

    // Weight variant: prune W, same input.
    const DenseMatrix w_out = run_layer(
        layer, input, LayerMode::weight_sparse(opts.weight_score, opts.pattern));
    rep.rfe_weight = rfe(reference, w_out);

    // Activation variant: sparsify the input, dense W. The fused kernel
    // supplies per-phase timings for free.
    if (opts.measure_timings) {
      FusedResult fused =
          fused_sparse_linear(input, layer.weight, opts.pattern,
                              opts.activation_granularity, opts.eps);
      rep.rfe_activation = rfe(reference, fused.y);
      rep.timings = fused.timing;
    } else {
      const DenseMatrix a_out = run_layer(
          layer, input,
          LayerMode::activation_sparse(opts.activation_granularity,
                                       opts.pattern, opts.eps));
      rep.rfe_activation = rfe(reference, a_out);
    }

    rep.activation_histogram = histogram(input);
    rep.weight_histogram = histogram(layer.weight);
    rep.active_fraction = active_fraction_of(input);
    rep.output_digest = tensor_digest(reference);
    reports.push_back(std::move(rep));
  }
  return reports;
}

ComparisonReport compare_methods(const Stack& stack, const DenseMatrix& x0,
                                 const std::vector<NamedPolicy>& methods) {
  const ForwardResult dense = forward(stack, x0, ExecPolicy{});

  ComparisonReport report;
  for (const auto& method : methods) {
    const ForwardResult run = forward(stack, x0, method.policy);
    MethodResult res;
    res.name = method.name;
    res.rfe_end_to_end = run.output.same_shape(dense.output) &&
                                 bit_equal(run.output, dense.output)
                             ? 0.0
                             : rfe(dense.output, run.output);
    for (size_t i = 0; i < stack.layers.size(); ++i) {
      const DenseMatrix& ref = dense.layer_outputs[i];
      const DenseMatrix& got = run.layer_outputs[i];
      const double e = bit_equal(ref, got) ? 0.0 : rfe(ref, got);
      res.per_layer.emplace_back(stack.layers[i].spec.name, e);
    }
    report.methods.push_back(std::move(res));
  }
  return report;
}

std::map<std::string, LoraPair> fit_stack_loras(const Stack& stack,
                                                const DenseMatrix& x0,
                                                index_t rank,
                                                const NMPattern& pattern,
                                                Granularity g, float eps) {
  const ForwardResult dense = forward(stack, x0, ExecPolicy{});
  std::map<std::string, LoraPair> loras;
  for (size_t i = 0; i < stack.layers.size(); ++i) {
    const Layer& layer = stack.layers[i];
    const index_t r =
        std::min(rank, std::min(layer.spec.d_in, layer.spec.d_out));
    loras.emplace(layer.spec.name,
                  rrr_fit(dense.layer_inputs[i], layer.weight, pattern, g, eps,
                          r));
  }
  return loras;
}

ExecPolicy build_method_policy(const std::string& name, const Stack& stack,
                               const DenseMatrix& x0, index_t rank,
                               const NMPattern& pattern, float eps) {
  auto activation_all = [&](Granularity g) {
    return ExecPolicy::all(LayerMode::activation_sparse(g, pattern, eps));
  };
  auto weight_all = [&](ScoreSpec::Method m) {
    ScoreSpec spec;
    spec.method = m;
    return ExecPolicy::all(LayerMode::weight_sparse(spec, pattern));
  };
  auto with_loras = [&](bool apply_skips) {
    ExecPolicy policy = activation_all(Granularity::per_tensor);
    if (apply_skips) apply_preset_skips(policy, stack);
    auto loras = fit_stack_loras(stack, x0, rank, pattern,
                                 Granularity::per_tensor, eps);
    for (const auto& layer : stack.layers) {
      const std::string& lname = layer.spec.name;
      if (policy.mode_for(lname).kind == LayerMode::Kind::skip) continue;
      LayerMode mode =
          LayerMode::activation_sparse(Granularity::per_tensor, pattern, eps);
      mode.lora = loras.at(lname);
      policy.overrides[lname] = std::move(mode);
    }
    return policy;
  };

  if (name == "dense") return ExecPolicy{};
  if (name == "sa-native") return activation_all(Granularity::none);
  if (name == "sa-nc") return activation_all(Granularity::per_tensor);
  if (name == "sa-nc-lora") return with_loras(false);
  if (name == "sa-nc-lora-sl") return with_loras(true);
  if (name == "sw-magnitude") return weight_all(ScoreSpec::Method::magnitude);
  if (name == "sw-wanda") return weight_all(ScoreSpec::Method::wanda);
  if (name == "sw-ria") return weight_all(ScoreSpec::Method::ria);
  if (name == "sw-bawa") return weight_all(ScoreSpec::Method::bawa);
  throw config_error("unknown method '" + name + "'");
}

namespace {

std::string base64_encode(const std::uint8_t* bytes, size_t len) {
  static const char table[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  for (size_t i = 0; i < len; i += 3) {
    std::uint32_t chunk = static_cast<std::uint32_t>(bytes[i]) << 16;
    if (i + 1 < len) chunk |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
    if (i + 2 < len) chunk |= bytes[i + 2];
    out.push_back(table[(chunk >> 18) & 63]);
    out.push_back(table[(chunk >> 12) & 63]);
    out.push_back(i + 1 < len ? table[(chunk >> 6) & 63] : '=');
    out.push_back(i + 2 < len ? table[chunk & 63] : '=');
  }
  return out;
}

nlohmann::json histogram_json(const Histogram& h) {
  nlohmann::json j;
  j["normalization"] = h.normalization;
  j["bin_edges"] = h.bin_edges;
  j["counts"] = h.counts;
  return j;
}

nlohmann::json timing_json(const FusedTiming& t) {
  return {{"sparsify_ns", t.sparsify_ns},
          {"pack_ns", t.pack_ns},
          {"multiply_ns", t.multiply_ns},
          {"total_ns", t.total_ns}};
}

nlohmann::json report_settings(const SweepOptions& opts) {
  return {{"pattern", opts.pattern.str()},
          {"activation_granularity", to_string(opts.activation_granularity)},
          {"weight_score", opts.weight_score.name()},
          {"eps", opts.eps},
          {"active_threshold", kActiveThreshold},
          {"score_denominator_eps", kScoreDenomEps},
          {"rng", kRngAlgorithm}};
}

}  // namespace

std::string tensor_digest(const DenseMatrix& m) {
  // FNV-1a over the raw bytes.
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(m.data().data());
  const size_t len = static_cast<size_t>(m.size()) * sizeof(float);
  for (size_t i = 0; i < len; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  std::uint8_t digest[8];
  for (int i = 0; i < 8; ++i) {
    digest[i] = static_cast<std::uint8_t>(hash >> (8 * i));
  }
  return base64_encode(digest, 8);
}

nlohmann::json sweep_report_json(const Stack& stack,
                                 const std::vector<LayerReport>& reports,
                                 const SweepOptions& opts) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["kind"] = "layer_sweep";
  j["stack"] = {{"preset", to_string(stack.config.preset)},
                {"depth", stack.config.depth},
                {"scale", stack.config.scale},
                {"seed", stack.config.seed}};
  j["settings"] = report_settings(opts);
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& rep : reports) {
    nlohmann::json entry = {{"name", rep.name},
                            {"kind", rep.kind},
                            {"depth", rep.depth},
                            {"d_in", rep.d_in},
                            {"d_out", rep.d_out},
                            {"rfe_weight", rep.rfe_weight},
                            {"rfe_activation", rep.rfe_activation},
                            {"active_fraction", rep.active_fraction},
                            {"output_digest", rep.output_digest},
                            {"activation_histogram",
                             histogram_json(rep.activation_histogram)},
                            {"weight_histogram",
                             histogram_json(rep.weight_histogram)}};
    if (rep.timings) entry["timings"] = timing_json(*rep.timings);
    layers.push_back(std::move(entry));
  }
  return j;
}

std::string sweep_report_csv(const std::vector<LayerReport>& reports) {
  std::ostringstream out;
  out << "layer,kind,depth,method,rfe\n";
  for (const auto& rep : reports) {
    out << rep.name << ',' << rep.kind << ',' << rep.depth
        << ",weight-sparse," << rep.rfe_weight << '\n';
    out << rep.name << ',' << rep.kind << ',' << rep.depth
        << ",activation-sparse," << rep.rfe_activation << '\n';
  }
  return out.str();
}

nlohmann::json comparison_report_json(const Stack& stack,
                                      const ComparisonReport& report) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["kind"] = "compare_methods";
  j["stack"] = {{"preset", to_string(stack.config.preset)},
                {"depth", stack.config.depth},
                {"scale", stack.config.scale},
                {"seed", stack.config.seed}};
  auto& methods = j["methods"] = nlohmann::json::array();
  for (const auto& m : report.methods) {
    nlohmann::json entry = {{"name", m.name},
                            {"rfe_end_to_end", m.rfe_end_to_end}};
    auto& per_layer = entry["per_layer"] = nlohmann::json::array();
    for (const auto& [layer, value] : m.per_layer) {
      per_layer.push_back({{"layer", layer}, {"rfe", value}});
    }
    methods.push_back(std::move(entry));
  }
  return j;
}

std::string comparison_report_csv(const ComparisonReport& report) {
  std::ostringstream out;
  out << "layer,method,rfe\n";
  for (const auto& m : report.methods) {
    for (const auto& [layer, value] : m.per_layer) {
      out << layer << ',' << m.name << ',' << value << '\n';
    }
    out << "__end_to_end__," << m.name << ',' << m.rfe_end_to_end << '\n';
  }
  return out.str();
}

}  // namespace lynx
