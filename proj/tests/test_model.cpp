#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "lynx/model.hpp"
#include "lynx/tensor.hpp"

using namespace lynx;

namespace {

StackConfig small_config(Preset preset, int depth = 2, std::uint64_t seed = 5) {
  StackConfig cfg;
  cfg.preset = preset;
  cfg.depth = depth;
  cfg.scale = 32;
  cfg.seed = seed;
  return cfg;
}

DenseMatrix stack_input(const Stack& stack, std::uint64_t seed = 77,
                        index_t rows = 24) {
  return sample(RandomSpec::spike_slab(0.1f, 0.01f, 1.0f, seed), rows,
                stack.model_dim());
}

std::multiset<std::string> kinds_of(const Stack& stack, int depth) {
  std::multiset<std::string> kinds;
  for (const auto& layer : stack.layers) {
    if (layer.spec.depth == depth) kinds.insert(to_string(layer.spec.kind));
  }
  return kinds;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("qwen-like shapes follow the scaled reference table") {
  StackConfig cfg;
  cfg.preset = Preset::qwen_like;
  cfg.depth = 1;
  cfg.scale = 16;
  cfg.seed = 1;
  const auto stack = build_stack(cfg);
  REQUIRE(stack.layers.size() == 4);

  const auto& up = stack.layers[2];
  CHECK(up.spec.kind == LayerKind::Up);
  CHECK(up.spec.d_in == 192);
  CHECK(up.spec.d_out == 768);

  const auto& qkv = stack.layers[0];
  CHECK(qkv.spec.d_in == 192);
  CHECK(qkv.spec.d_out == 576);

  const auto& down = stack.layers[3];
  CHECK(down.spec.d_in == 768);
  CHECK(down.spec.d_out == 192);
}

TEST_CASE("preset block structure carries the expected layer kinds") {
  const auto qwen = build_stack(small_config(Preset::qwen_like));
  CHECK(kinds_of(qwen, 0) ==
        std::multiset<std::string>{"QKV", "Out", "Up", "Down"});

  const auto zimage = build_stack(small_config(Preset::zimage_like));
  CHECK(kinds_of(zimage, 0) == std::multiset<std::string>{
                                   "Q", "K", "V", "Out", "Up", "Gate", "Down"});

  // gate layers exist only in the zimage-like preset
  for (const auto& layer : qwen.layers) {
    CHECK(layer.spec.kind != LayerKind::Gate);
  }

  const auto flux = build_stack(small_config(Preset::flux_like, 3));
  CHECK(kinds_of(flux, 0) ==
        std::multiset<std::string>{"QKV", "Out", "Up", "Down"});
  CHECK(kinds_of(flux, 2) == std::multiset<std::string>{"QKV-Up", "Out-Down"});
}

TEST_CASE("flux-like fused layers have the combined widths") {
  const auto flux = build_stack(small_config(Preset::flux_like, 3));
  const Layer* qkv_up = nullptr;
  const Layer* out_down = nullptr;
  for (const auto& layer : flux.layers) {
    if (layer.spec.kind == LayerKind::QKVUp) qkv_up = &layer;
    if (layer.spec.kind == LayerKind::OutDown) out_down = &layer;
  }
  REQUIRE(qkv_up);
  REQUIRE(out_down);
  // 21504/32 and 15360/32
  CHECK(qkv_up->spec.d_in == 96);
  CHECK(qkv_up->spec.d_out == 672);
  CHECK(out_down->spec.d_in == 480);
  CHECK(out_down->spec.d_out == 96);
}

TEST_CASE("identical seeds build identical stacks") {
  const auto a = build_stack(small_config(Preset::qwen_like, 2, 9));
  const auto b = build_stack(small_config(Preset::qwen_like, 2, 9));
  REQUIRE(a.layers.size() == b.layers.size());
  for (size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(bit_equal(a.layers[i].weight, b.layers[i].weight));
  }
  const auto c = build_stack(small_config(Preset::qwen_like, 2, 10));
  CHECK(!bit_equal(a.layers[0].weight, c.layers[0].weight));
}

TEST_CASE("scales that break divisibility are rejected") {
  StackConfig cfg;
  cfg.preset = Preset::qwen_like;
  cfg.depth = 1;
  cfg.scale = 7;  // does not divide 3072
  CHECK_THROWS_AS((void)build_stack(cfg), config_error);

  cfg.scale = 768;  // 3072/768 = 4, but 9216/768 = 12 -> qkv ok; down 12288/768=16 ok; all multiples of 4 -> passes
  CHECK_NOTHROW((void)build_stack(cfg));
}

TEST_CASE("forward runs every preset and keeps per-layer records") {
  for (auto preset :
       {Preset::qwen_like, Preset::flux_like, Preset::zimage_like}) {
    const auto stack = build_stack(small_config(preset, 3));
    const auto x = stack_input(stack);
    const auto result = forward(stack, x, ExecPolicy{});
    CHECK(result.layer_inputs.size() == stack.layers.size());
    CHECK(result.layer_outputs.size() == stack.layers.size());
    CHECK(result.output.rows() == x.rows());
    CHECK(result.output.cols() == stack.model_dim());
    for (size_t i = 0; i < stack.layers.size(); ++i) {
      CHECK(result.layer_inputs[i].cols() == stack.layers[i].spec.d_in);
      CHECK(result.layer_outputs[i].cols() == stack.layers[i].spec.d_out);
    }
  }
}

TEST_CASE("an all-skip policy reproduces the dense pass bit for bit") {
  const auto stack = build_stack(small_config(Preset::qwen_like));
  const auto x = stack_input(stack);
  const auto dense = forward(stack, x, ExecPolicy{});
  const auto skipped = forward(stack, x, ExecPolicy::all(LayerMode::skip()));
  CHECK(bit_equal(dense.output, skipped.output));
}

TEST_CASE("skip-listed layers run the dense path on their actual inputs") {
  for (auto preset : {Preset::flux_like, Preset::zimage_like}) {
    const auto stack = build_stack(small_config(preset, 3));
    const auto x = stack_input(stack);
    ExecPolicy policy =
        ExecPolicy::all(LayerMode::activation_sparse(Granularity::per_tensor));
    apply_preset_skips(policy, stack);

    const auto run = forward(stack, x, policy);
    int skipped = 0;
    for (size_t i = 0; i < stack.layers.size(); ++i) {
      const auto& layer = stack.layers[i];
      if (policy.mode_for(layer.spec.name).kind != LayerMode::Kind::skip) {
        continue;
      }
      ++skipped;
      CHECK(on_default_skip_list(preset, layer.spec.kind));
      CHECK(bit_equal(run.layer_outputs[i],
                      gemm(run.layer_inputs[i], layer.weight)));
    }
    CHECK(skipped > 0);
  }
}

TEST_CASE("qwen-like preset has no default skips") {
  const auto stack = build_stack(small_config(Preset::qwen_like));
  ExecPolicy policy;
  apply_preset_skips(policy, stack);
  CHECK(policy.overrides.empty());
}

TEST_CASE("policy locality: a change touches only that layer and downstream") {
  const auto stack = build_stack(small_config(Preset::qwen_like, 2));
  const auto x = stack_input(stack);
  const auto dense = forward(stack, x, ExecPolicy{});

  // sparsify only the Up layer of the second block (index 6)
  ExecPolicy policy;
  policy.overrides[stack.layers[6].spec.name] =
      LayerMode::activation_sparse(Granularity::per_tensor);
  const auto modified = forward(stack, x, policy);

  for (size_t i = 0; i < 6; ++i) {
    CHECK(bit_equal(dense.layer_outputs[i], modified.layer_outputs[i]));
  }
  CHECK(!bit_equal(dense.layer_outputs[6], modified.layer_outputs[6]));
}

TEST_CASE("unknown layer names in policies are rejected") {
  const auto stack = build_stack(small_config(Preset::qwen_like));
  const auto x = stack_input(stack);
  ExecPolicy policy;
  policy.overrides["blocks.9.no_such_layer"] = LayerMode::skip();
  CHECK_THROWS_AS((void)forward(stack, x, policy), config_error);
}

TEST_CASE("input width must match the stack") {
  const auto stack = build_stack(small_config(Preset::qwen_like));
  CHECK_THROWS_AS(
      (void)forward(stack, DenseMatrix(4, stack.model_dim() + 4), ExecPolicy{}),
      dimension_error);
}

TEST_CASE("layer resolution accepts unique suffixes") {
  const auto stack = build_stack(small_config(Preset::qwen_like, 2));
  CHECK(stack.resolve("blocks.1.img_mlp.net.2") == 7);
  CHECK(stack.resolve("1.img_mlp.net.2") == 7);
  CHECK_THROWS_AS((void)stack.resolve("img_mlp.net.2"), config_error);
  CHECK_THROWS_AS((void)stack.resolve("definitely.missing"), config_error);
}

TEST_CASE("stack serialization round-trips") {
  namespace fs = std::filesystem;
  const auto dir = (fs::temp_directory_path() / "lynx_stack_test").string();
  const auto stack = build_stack(small_config(Preset::zimage_like, 2, 31));
  save_stack(dir, stack);
  const auto loaded = load_stack(dir);
  CHECK(loaded.config.preset == stack.config.preset);
  CHECK(loaded.config.seed == stack.config.seed);
  REQUIRE(loaded.layers.size() == stack.layers.size());
  for (size_t i = 0; i < stack.layers.size(); ++i) {
    CHECK(loaded.layers[i].spec.name == stack.layers[i].spec.name);
    CHECK(loaded.layers[i].spec.kind == stack.layers[i].spec.kind);
    CHECK(bit_equal(loaded.layers[i].weight, stack.layers[i].weight));
  }
  // the rebuilt stack behaves identically
  const auto x = stack_input(stack);
  CHECK(bit_equal(forward(stack, x, ExecPolicy{}).output,
                  forward(loaded, x, ExecPolicy{}).output));
  fs::remove_all(dir);
}

TEST_SUITE_END();
