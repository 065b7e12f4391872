#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lynx/lowrank.hpp"
#include "lynx/sparsify.hpp"
#include "lynx/spmm.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

enum class LayerKind { Q, K, V, Out, QKV, Up, Gate, Down, QKVUp, OutDown };
enum class Stream { image, text, mixed };

std::string to_string(LayerKind k);
std::string to_string(Stream s);
LayerKind parse_layer_kind(const std::string& text);
Stream parse_stream(const std::string& text);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Out;
  index_t d_in = 0;
  index_t d_out = 0;
  Stream stream = Stream::image;
  int depth = 0;  // block index within the stack
};

struct Layer {
  LayerSpec spec;
  DenseMatrix weight;  // d_out x d_in
};

enum class Preset { qwen_like, flux_like, zimage_like };

std::string to_string(Preset p);
Preset parse_preset(const std::string& text);

// Scaled-down stack description. `scale` divides every reference
// dimension; the result must stay a multiple of 4 so all layers remain
// sparsifiable.
struct StackConfig {
  Preset preset = Preset::qwen_like;
  int depth = 6;  // number of transformer blocks
  int scale = 16;
  std::uint64_t seed = 0;
};

struct Stack {
  StackConfig config;
  std::vector<Layer> layers;

  index_t model_dim() const { return layers.front().spec.d_in; }
  const Layer* find(const std::string& name) const;
  // Exact match first, then unique suffix match; throws config_error
  // listing candidates when the suffix is ambiguous.
  index_t resolve(const std::string& name_or_suffix) const;
};

// Per-layer execution mode.
struct LayerMode {
  enum class Kind { dense, weight_sparse, activation_sparse, skip };

  Kind kind = Kind::dense;
  NMPattern pattern{2, 4};
  Granularity granularity = Granularity::per_tensor;
  float eps = kDefaultEps;
  ScoreSpec score{};                  // weight_sparse
  std::optional<LoraPair> lora;       // activation_sparse

  static LayerMode dense() { return {}; }
  static LayerMode skip() {
    LayerMode m;
    m.kind = Kind::skip;
    return m;
  }
  static LayerMode weight_sparse(const ScoreSpec& score,
                                 const NMPattern& pattern = {2, 4});
  static LayerMode activation_sparse(Granularity g,
                                     const NMPattern& pattern = {2, 4},
                                     float eps = kDefaultEps);
};

// Default mode plus optional per-layer overrides keyed by layer name.
struct ExecPolicy {
  LayerMode default_mode;
  std::map<std::string, LayerMode> overrides;

  static ExecPolicy all(const LayerMode& mode) {
    ExecPolicy p;
    p.default_mode = mode;
    return p;
  }
  const LayerMode& mode_for(const std::string& name) const {
    auto it = overrides.find(name);
    return it == overrides.end() ? default_mode : it->second;
  }
};

// Marks the preset's skip list on the policy: flux-like skips the
// fused Out-Down single-stream layers, zimage-like skips Out and Up.
void apply_preset_skips(ExecPolicy& policy, const Stack& stack);

// True when layers of this kind are on the preset's skip list.
bool on_default_skip_list(Preset preset, LayerKind kind);

Stack build_stack(const StackConfig& cfg);

struct ForwardResult {
  DenseMatrix output;
  std::vector<DenseMatrix> layer_inputs;   // per layer, stack order
  std::vector<DenseMatrix> layer_outputs;  // raw linear outputs
};

// Sequential execution of the stack. Attention is not simulated: the
// Q/K/V projections are averaged as a stand-in before the Out layer,
// a smooth gate follows Up (with an elementwise gate multiply for
// Up/Gate pairs), and skip-mode layers run the dense path bit-exactly.
ForwardResult forward(const Stack& stack, const DenseMatrix& x,
                      const ExecPolicy& policy);

// Runs a single layer under the given mode (the same routine forward
// uses); exposed for layer-local analysis.
DenseMatrix run_layer(const Layer& layer, const DenseMatrix& x,
                      const LayerMode& mode);

// Stack directory serialization: manifest.json + one tensor per layer.
void save_stack(const std::string& dir, const Stack& stack);
Stack load_stack(const std::string& dir);

}  // namespace lynx
