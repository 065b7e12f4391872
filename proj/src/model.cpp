#include "lynx/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lynx/rng.hpp"
#include "lynx/tensor_io.hpp"

namespace lynx {

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Q: return "Q";
    case LayerKind::K: return "K";
    case LayerKind::V: return "V";
    case LayerKind::Out: return "Out";
    case LayerKind::QKV: return "QKV";
    case LayerKind::Up: return "Up";
    case LayerKind::Gate: return "Gate";
    case LayerKind::Down: return "Down";
    case LayerKind::QKVUp: return "QKV-Up";
    case LayerKind::OutDown: return "Out-Down";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& text) {
  static const std::map<std::string, LayerKind> table = {
      {"Q", LayerKind::Q},         {"K", LayerKind::K},
      {"V", LayerKind::V},         {"Out", LayerKind::Out},
      {"QKV", LayerKind::QKV},     {"Up", LayerKind::Up},
      {"Gate", LayerKind::Gate},   {"Down", LayerKind::Down},
      {"QKV-Up", LayerKind::QKVUp}, {"Out-Down", LayerKind::OutDown}};
  auto it = table.find(text);
  if (it == table.end()) throw config_error("unknown layer kind '" + text + "'");
  return it->second;
}

std::string to_string(Stream s) {
  switch (s) {
    case Stream::image: return "image";
    case Stream::text: return "text";
    case Stream::mixed: return "mixed";
  }
  return "?";
}

Stream parse_stream(const std::string& text) {
  if (text == "image") return Stream::image;
  if (text == "text") return Stream::text;
  if (text == "mixed") return Stream::mixed;
  throw config_error("unknown stream '" + text + "'");
}

std::string to_string(Preset p) {
  switch (p) {
    case Preset::qwen_like: return "qwen-like";
    case Preset::flux_like: return "flux-like";
    case Preset::zimage_like: return "zimage-like";
  }
  return "?";
}

Preset parse_preset(const std::string& text) {
  if (text == "qwen-like") return Preset::qwen_like;
  if (text == "flux-like") return Preset::flux_like;
  if (text == "zimage-like") return Preset::zimage_like;
  throw config_error("unknown preset '" + text +
                     "' (expected qwen-like|flux-like|zimage-like)");
}

LayerMode LayerMode::weight_sparse(const ScoreSpec& score,
                                   const NMPattern& pattern) {
  LayerMode m;
  m.kind = Kind::weight_sparse;
  m.score = score;
  m.pattern = pattern;
  return m;
}

LayerMode LayerMode::activation_sparse(Granularity g, const NMPattern& pattern,
                                       float eps) {
  LayerMode m;
  m.kind = Kind::activation_sparse;
  m.granularity = g;
  m.pattern = pattern;
  m.eps = eps;
  return m;
}

const Layer* Stack::find(const std::string& name) const {
  for (const auto& layer : layers) {
    if (layer.spec.name == name) return &layer;
  }
  return nullptr;
}

index_t Stack::resolve(const std::string& name_or_suffix) const {
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].spec.name == name_or_suffix) return static_cast<index_t>(i);
  }
  std::vector<index_t> matches;
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& name = layers[i].spec.name;
    if (name.size() > name_or_suffix.size() &&
        name.compare(name.size() - name_or_suffix.size(),
                     name_or_suffix.size(), name_or_suffix) == 0) {
      matches.push_back(static_cast<index_t>(i));
    }
  }
  if (matches.size() == 1) return matches[0];
  if (matches.empty()) {
    throw config_error("no layer named '" + name_or_suffix + "' in stack");
  }
  std::string msg = "layer suffix '" + name_or_suffix + "' is ambiguous:";
  for (index_t i : matches) msg += " " + layers[i].spec.name;
  throw config_error(msg);
}

bool on_default_skip_list(Preset preset, LayerKind kind) {
  switch (preset) {
    case Preset::qwen_like:
      return false;
    case Preset::flux_like:
      return kind == LayerKind::OutDown;
    case Preset::zimage_like:
      return kind == LayerKind::Out || kind == LayerKind::Up;
  }
  return false;
}

void apply_preset_skips(ExecPolicy& policy, const Stack& stack) {
  for (const auto& layer : stack.layers) {
    if (on_default_skip_list(stack.config.preset, layer.spec.kind)) {
      policy.overrides[layer.spec.name] = LayerMode::skip();
    }
  }
}

namespace {

// Reference dimensions before scaling (image-stream shapes; text
// branches are not modeled).
struct Dims {
  index_t model, attn_qkv, mlp_hidden;
};

index_t scaled(index_t dim, int scale) { return dim / scale; }

void check_scaled(index_t dim, int scale, const char* what) {
  if (dim % scale != 0 || (dim / scale) % 4 != 0) {
    throw config_error(std::string("build_stack: ") + what + " dimension " +
                       std::to_string(dim) + " / scale " +
                       std::to_string(scale) +
                       " is not a positive multiple of 4");
  }
}

}  // namespace

Stack build_stack(const StackConfig& cfg) {
  if (cfg.depth < 1) throw config_error("build_stack: depth must be >= 1");
  if (cfg.scale < 1) throw config_error("build_stack: scale must be >= 1");

  Stack stack;
  stack.config = cfg;

  auto push = [&](const std::string& name, LayerKind kind, index_t d_in,
                  index_t d_out, Stream stream, int depth) {
    LayerSpec spec{name, kind, d_in, d_out, stream, depth};
    stack.layers.push_back({spec, DenseMatrix(1, 1)});
  };

  const int s = cfg.scale;
  switch (cfg.preset) {
    case Preset::qwen_like: {
      for (index_t d : {3072, 9216, 12288}) check_scaled(d, s, "qwen-like");
      const index_t dm = scaled(3072, s), dq = scaled(9216, s),
                    dh = scaled(12288, s);
      for (int b = 0; b < cfg.depth; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        push(p + "attn.to_qkv", LayerKind::QKV, dm, dq, Stream::image, b);
        push(p + "attn.to_out.0", LayerKind::Out, dm, dm, Stream::image, b);
        push(p + "img_mlp.net.0.proj", LayerKind::Up, dm, dh, Stream::image, b);
        push(p + "img_mlp.net.2", LayerKind::Down, dh, dm, Stream::image, b);
      }
      break;
    }
    case Preset::flux_like: {
      for (index_t d : {3072, 9216, 12288, 21504, 15360}) {
        check_scaled(d, s, "flux-like");
      }
      const index_t dm = scaled(3072, s), dq = scaled(9216, s),
                    dh = scaled(12288, s), dqm = scaled(21504, s),
                    dod = scaled(15360, s);
      const int n_double = std::max(1, (cfg.depth + 2) / 3);
      const int n_single = cfg.depth - n_double;
      for (int b = 0; b < n_double; ++b) {
        const std::string p = "double_blocks." + std::to_string(b) + ".";
        push(p + "attn.a_to_qkv", LayerKind::QKV, dm, dq, Stream::image, b);
        push(p + "attn.a_to_out", LayerKind::Out, dm, dm, Stream::image, b);
        push(p + "ff_a.0", LayerKind::Up, dm, dh, Stream::image, b);
        push(p + "ff_a.2", LayerKind::Down, dh, dm, Stream::image, b);
      }
      for (int b = 0; b < n_single; ++b) {
        const std::string p = "single_blocks." + std::to_string(b) + ".";
        const int depth = n_double + b;
        push(p + "to_qkv_mlp", LayerKind::QKVUp, dm, dqm, Stream::mixed, depth);
        push(p + "proj_out", LayerKind::OutDown, dod, dm, Stream::mixed, depth);
      }
      break;
    }
    case Preset::zimage_like: {
      for (index_t d : {3840, 10240}) check_scaled(d, s, "zimage-like");
      const index_t dm = scaled(3840, s), dh = scaled(10240, s);
      for (int b = 0; b < cfg.depth; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        push(p + "attention.to_q", LayerKind::Q, dm, dm, Stream::mixed, b);
        push(p + "attention.to_k", LayerKind::K, dm, dm, Stream::mixed, b);
        push(p + "attention.to_v", LayerKind::V, dm, dm, Stream::mixed, b);
        push(p + "attention.to_out.0", LayerKind::Out, dm, dm, Stream::mixed, b);
        push(p + "feed_forward.w1", LayerKind::Up, dm, dh, Stream::mixed, b);
        push(p + "feed_forward.w3", LayerKind::Gate, dm, dh, Stream::mixed, b);
        push(p + "feed_forward.w2", LayerKind::Down, dh, dm, Stream::mixed, b);
      }
      break;
    }
  }

  // Deterministic per-layer weights, variance scaled so activations
  // keep a stable magnitude through depth.
  for (size_t i = 0; i < stack.layers.size(); ++i) {
    auto& layer = stack.layers[i];
    const float stddev =
        1.0f / std::sqrt(static_cast<float>(layer.spec.d_in));
    layer.weight = sample(
        RandomSpec::gaussian(0.0f, stddev, derive_seed(cfg.seed, i)),
        layer.spec.d_out, layer.spec.d_in);
  }
  return stack;
}

namespace {

// Gate on each sub-block contribution before it joins the residual
// stream (the toy analog of DiT's modulation gates). Keeps the stream
// dominated by its token content so intermediate activations stay
// heavy-tailed through depth.
constexpr float kContributionScale = 0.25f;

DenseMatrix scale_by(const DenseMatrix& m, float factor) {
  DenseMatrix out(m.rows(), m.cols());
  auto src = m.data();
  auto dst = out.data();
  for (index_t i = 0; i < m.size(); ++i) dst[i] = src[i] * factor;
  return out;
}

float gelu(float v) {
  // tanh approximation; any fixed smooth gate works here.
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * v * (1.0f + std::tanh(c * (v + 0.044715f * v * v * v)));
}

DenseMatrix apply_gelu(const DenseMatrix& m) {
  DenseMatrix out(m.rows(), m.cols());
  auto src = m.data();
  auto dst = out.data();
  for (index_t i = 0; i < m.size(); ++i) dst[i] = gelu(src[i]);
  return out;
}

// Stand-in for attention: the mean of the Q/K/V projections. Keeps
// every projection contributing to downstream layers while preserving
// shape.
DenseMatrix mean3_chunks(const DenseMatrix& qkv) {
  const index_t d = qkv.cols() / 3;
  DenseMatrix out(qkv.rows(), d);
  constexpr float third = 1.0f / 3.0f;
  for (index_t i = 0; i < qkv.rows(); ++i) {
    const float* row = qkv.row_ptr(i);
    float* dst = out.row_ptr(i);
    for (index_t j = 0; j < d; ++j) {
      dst[j] = (row[j] + row[d + j] + row[2 * d + j]) * third;
    }
  }
  return out;
}

DenseMatrix mean3(const DenseMatrix& a, const DenseMatrix& b,
                  const DenseMatrix& c) {
  DenseMatrix out(a.rows(), a.cols());
  constexpr float third = 1.0f / 3.0f;
  auto av = a.data(), bv = b.data(), cv = c.data();
  auto ov = out.data();
  for (index_t i = 0; i < a.size(); ++i) ov[i] = (av[i] + bv[i] + cv[i]) * third;
  return out;
}

DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows(), a.cols());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (index_t i = 0; i < a.size(); ++i) ov[i] = av[i] * bv[i];
  return out;
}

DenseMatrix slice_cols(const DenseMatrix& m, index_t begin, index_t width) {
  DenseMatrix out(m.rows(), width);
  for (index_t i = 0; i < m.rows(); ++i) {
    const float* src = m.row_ptr(i) + begin;
    float* dst = out.row_ptr(i);
    for (index_t j = 0; j < width; ++j) dst[j] = src[j];
  }
  return out;
}

DenseMatrix concat_cols(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows(), a.cols() + b.cols());
  for (index_t i = 0; i < a.rows(); ++i) {
    float* dst = out.row_ptr(i);
    const float* pa = a.row_ptr(i);
    for (index_t j = 0; j < a.cols(); ++j) dst[j] = pa[j];
    const float* pb = b.row_ptr(i);
    for (index_t j = 0; j < b.cols(); ++j) dst[a.cols() + j] = pb[j];
  }
  return out;
}

}  // namespace

DenseMatrix run_layer(const Layer& layer, const DenseMatrix& x,
                      const LayerMode& mode) {
  switch (mode.kind) {
    case LayerMode::Kind::dense:
    case LayerMode::Kind::skip:
      return gemm(x, layer.weight);
    case LayerMode::Kind::weight_sparse: {
      std::optional<std::vector<float>> norms;
      if (mode.score.needs_activation_norms()) norms = column_l2_norms(x);
      const DenseMatrix scores = score_weights(layer.weight, norms, mode.score);
      return gemm(x, prune_weights(layer.weight, scores, mode.pattern));
    }
    case LayerMode::Kind::activation_sparse: {
      if (mode.lora) {
        return fused_sparse_lora_linear(x, layer.weight, mode.lora->a,
                                        mode.lora->b, mode.pattern,
                                        mode.granularity, mode.eps);
      }
      return fused_sparse_linear(x, layer.weight, mode.pattern,
                                 mode.granularity, mode.eps)
          .y;
    }
  }
  throw config_error("run_layer: unknown mode");
}

ForwardResult forward(const Stack& stack, const DenseMatrix& x,
                      const ExecPolicy& policy) {
  for (const auto& [name, mode] : policy.overrides) {
    if (!stack.find(name)) {
      throw config_error("forward: policy references unknown layer '" + name +
                         "'");
    }
  }
  if (x.cols() != stack.model_dim()) {
    throw dimension_error("forward: input is " + x.shape_string() +
                          " but the stack expects width " +
                          std::to_string(stack.model_dim()));
  }

  ForwardResult result;
  result.layer_inputs.reserve(stack.layers.size());
  result.layer_outputs.reserve(stack.layers.size());

  auto run = [&](size_t idx, const DenseMatrix& input) {
    const Layer& layer = stack.layers[idx];
    DenseMatrix out = run_layer(layer, input, policy.mode_for(layer.spec.name));
    result.layer_inputs.push_back(input);
    result.layer_outputs.push_back(out);
    return out;
  };

  // Residual-stream wiring: each attention / MLP sub-block adds its
  // contribution onto the stream, as DiT blocks do.
  DenseMatrix h = x;
  size_t i = 0;
  while (i < stack.layers.size()) {
    const LayerKind kind = stack.layers[i].spec.kind;
    if (kind == LayerKind::QKV) {
      // QKV -> Out, then Up -> Down, each with a residual add.
      const DenseMatrix qkv = run(i, h);
      const DenseMatrix a =
          add(h, scale_by(run(i + 1, mean3_chunks(qkv)), kContributionScale));
      const DenseMatrix up = run(i + 2, a);
      h = add(a, scale_by(run(i + 3, apply_gelu(up)), kContributionScale));
      i += 4;
    } else if (kind == LayerKind::QKVUp) {
      // Fused single-stream block: parallel attention + MLP halves,
      // one residual around the combined projection.
      const DenseMatrix fused = run(i, h);
      const index_t dm = stack.layers[i].spec.d_in;
      const DenseMatrix attn = mean3_chunks(slice_cols(fused, 0, 3 * dm));
      const DenseMatrix mlp = apply_gelu(
          slice_cols(fused, 3 * dm, fused.cols() - 3 * dm));
      h = add(h, scale_by(run(i + 1, concat_cols(attn, mlp)),
                          kContributionScale));
      i += 2;
    } else if (kind == LayerKind::Q) {
      // Q/K/V -> Out, then gated Up/Gate -> Down, with residual adds.
      const DenseMatrix q = run(i, h);
      const DenseMatrix k = run(i + 1, h);
      const DenseMatrix v = run(i + 2, h);
      const DenseMatrix a =
          add(h, scale_by(run(i + 3, mean3(q, k, v)), kContributionScale));
      const DenseMatrix up = run(i + 4, a);
      const DenseMatrix gate = run(i + 5, a);
      h = add(a, scale_by(run(i + 6, hadamard(apply_gelu(up), gate)),
                          kContributionScale));
      i += 7;
    } else {
      throw config_error("forward: unexpected layer order at '" +
                         stack.layers[i].spec.name + "'");
    }
  }
  result.output = std::move(h);
  return result;
}

void save_stack(const std::string& dir, const Stack& stack) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory: " + dir);

  nlohmann::json manifest;
  manifest["schema_version"] = 1;
  manifest["preset"] = to_string(stack.config.preset);
  manifest["depth"] = stack.config.depth;
  manifest["scale"] = stack.config.scale;
  manifest["seed"] = stack.config.seed;
  manifest["rng"] = kRngAlgorithm;
  auto& layers = manifest["layers"] = nlohmann::json::array();
  for (size_t i = 0; i < stack.layers.size(); ++i) {
    const auto& spec = stack.layers[i].spec;
    char file[32];
    std::snprintf(file, sizeof(file), "layer_%03zu.lynx", i);
    layers.push_back({{"name", spec.name},
                      {"kind", to_string(spec.kind)},
                      {"stream", to_string(spec.stream)},
                      {"d_in", spec.d_in},
                      {"d_out", spec.d_out},
                      {"depth", spec.depth},
                      {"file", file}});
    write_dense(dir + "/" + file, stack.layers[i].weight);
  }
  std::ofstream out(dir + "/manifest.json");
  if (!out) throw io_error("cannot open for writing: " + dir + "/manifest.json");
  out << manifest.dump(2) << "\n";
}

Stack load_stack(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw io_error("cannot open for reading: " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw format_error("manifest.json: " + std::string(e.what()));
  }

  Stack stack;
  try {
    stack.config.preset = parse_preset(manifest.at("preset"));
    stack.config.depth = manifest.at("depth");
    stack.config.scale = manifest.at("scale");
    stack.config.seed = manifest.at("seed");
    for (const auto& entry : manifest.at("layers")) {
      Layer layer;
      layer.spec.name = entry.at("name");
      layer.spec.kind = parse_layer_kind(entry.at("kind"));
      layer.spec.stream = parse_stream(entry.at("stream"));
      layer.spec.d_in = entry.at("d_in");
      layer.spec.d_out = entry.at("d_out");
      layer.spec.depth = entry.at("depth");
      layer.weight = read_dense(dir + "/" + entry.at("file").get<std::string>());
      if (layer.weight.rows() != layer.spec.d_out ||
          layer.weight.cols() != layer.spec.d_in) {
        throw format_error("stack " + dir + ": weight shape of '" +
                           layer.spec.name + "' disagrees with manifest");
      }
      stack.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw format_error("manifest.json: " + std::string(e.what()));
  }
  if (stack.layers.empty()) {
    throw format_error("stack " + dir + ": no layers in manifest");
  }
  return stack;
}

}  // namespace lynx
