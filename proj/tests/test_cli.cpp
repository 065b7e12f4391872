#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "lynx/analysis.hpp"
#include "lynx/lowrank.hpp"
#include "lynx/model.hpp"
#include "lynx/nm_format.hpp"
#include "lynx/sparsify.hpp"
#include "lynx/tensor_io.hpp"

using namespace lynx;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* path = std::getenv("LYNX_CLI");
  REQUIRE_MESSAGE(path != nullptr,
                  "LYNX_CLI must point at the built lynx binary");
  return path;
}

struct Workdir {
  fs::path dir;
  Workdir() {
    dir = fs::temp_directory_path() / "lynx_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workdir() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const {
    return (dir / name).string();
  }
};

int run_cli(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

int run_cli_capture(const std::string& args, const std::string& stdout_file) {
  const std::string cmd =
      cli_path() + " " + args + " > " + stdout_file + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("sample then sparsify matches the direct library path byte for byte") {
  Workdir wd;
  const auto x_path = wd / "x.lynx";
  const auto sx_path = wd / "sx.lynx";
  const auto scale_path = wd / "s.json";

  CHECK(run_cli("sample --kind spike-slab --rows 24 --cols 32 --seed 9 --out " +
                x_path) == 0);
  CHECK(run_cli("sparsify --in " + x_path +
                " --pattern 2:4 --granularity per-tensor --eps 1e-8 --out " +
                sx_path + " --scale-out " + scale_path) == 0);

  const auto direct =
      sparsify_activation(sample(RandomSpec::spike_slab(0.1f, 0.01f, 1, 9), 24,
                                 32),
                          {2, 4}, Granularity::per_tensor, 1e-8f);
  CHECK(bit_equal(read_dense(sx_path), direct.sx));

  std::ifstream scale_in(scale_path);
  nlohmann::json scale_json;
  scale_in >> scale_json;
  CHECK(scale_json.at("level") == "per-tensor");
  CHECK(scale_json.at("values")[0].get<float>() ==
        doctest::Approx(direct.scales.values[0]));
}

TEST_CASE("pack, validate and spmm complete the file pipeline") {
  Workdir wd;
  const auto x_path = wd / "x.lynx";
  const auto sx_path = wd / "sx.lynx";
  const auto p_path = wd / "p.lynx";
  const auto w_path = wd / "w.lynx";
  const auto y_path = wd / "y.lynx";

  REQUIRE(run_cli("sample --kind spike-slab --rows 16 --cols 32 --seed 3 --out " +
                  x_path) == 0);
  REQUIRE(run_cli("sparsify --in " + x_path + " --out " + sx_path) == 0);
  REQUIRE(run_cli("pack --in " + sx_path + " --out " + p_path) == 0);
  CHECK(run_cli("validate --in " + p_path) == 0);
  REQUIRE(run_cli("sample --kind gaussian --rows 8 --cols 32 --seed 4 --out " +
                  w_path) == 0);
  REQUIRE(run_cli("spmm --x " + p_path + " --w " + w_path + " --out " +
                  y_path) == 0);
  CHECK(run_cli("validate --in " + y_path) == 0);

  const auto y = read_dense(y_path);
  const auto direct = spmm(read_packed(p_path), read_dense(w_path));
  CHECK(bit_equal(y, direct));
}

TEST_CASE("exit codes follow the usage/data/numeric contract") {
  Workdir wd;
  // usage errors
  CHECK(run_cli("definitely-not-a-command") == 1);
  CHECK(run_cli("sample --rows 4 --cols 4 --out " + (wd / "x.lynx")) ==
        1);  // missing required --seed
  CHECK(run_cli("sample --kind gaussian --rows 4 --cols 4 --seed 1 --stddev 0 "
                "--out " +
                (wd / "x.lynx")) == 1);  // library config error

  // data errors
  CHECK(run_cli("validate --in " + (wd / "missing.lynx")) == 2);
  const auto junk = wd / "junk.lynx";
  std::ofstream(junk) << "this is not a tensor";
  CHECK(run_cli("validate --in " + junk) == 2);

  // corrupted packed metadata is a data error
  auto packed = pack(DenseMatrix::from_rows({{0, 5, 0, -7}}), {2, 4});
  packed.meta[0] = static_cast<std::uint8_t>(3 | (1 << 2));
  const auto bad = wd / "bad.lynx";
  write_packed(bad, packed);
  CHECK(run_cli("validate --in " + bad) == 2);

  // numeric/training errors
  REQUIRE(run_cli("stack-build --preset qwen-like --depth 1 --scale 64 "
                  "--seed 5 --out " +
                  (wd / "stack")) == 0);
  REQUIRE(run_cli("sample --kind spike-slab --rows 16 --cols 48 --seed 6 "
                  "--out " +
                  (wd / "batch.lynx")) == 0);
  CHECK(run_cli("fit --stack " + (wd / "stack") +
                " --layer attn.to_out.0 --rank 4 --solver gd --steps 4000 "
                "--lr 50 --init-scale 0.01 --seed 1 --batch " +
                (wd / "batch.lynx") + " --out " + (wd / "lora")) == 3);
}

TEST_CASE("stack-build, fit, sweep and compare produce coherent artifacts") {
  Workdir wd;
  const auto stack_dir = wd / "stack";
  REQUIRE(run_cli("stack-build --preset qwen-like --depth 2 --scale 64 "
                  "--seed 11 --out " +
                  stack_dir) == 0);

  // the CLI-built stack equals the library-built stack
  StackConfig cfg;
  cfg.preset = Preset::qwen_like;
  cfg.depth = 2;
  cfg.scale = 64;
  cfg.seed = 11;
  const auto direct = build_stack(cfg);
  const auto loaded = load_stack(stack_dir);
  REQUIRE(loaded.layers.size() == direct.layers.size());
  for (size_t i = 0; i < direct.layers.size(); ++i) {
    CHECK(bit_equal(loaded.layers[i].weight, direct.layers[i].weight));
  }

  // rrr fit on the down projection of block 1 (48-wide input batch)
  REQUIRE(run_cli("sample --kind spike-slab --rows 64 --cols 192 --seed 12 "
                  "--out " +
                  (wd / "hidden.lynx")) == 0);
  REQUIRE(run_cli("fit --stack " + stack_dir +
                  " --layer blocks.1.img_mlp.net.2 --rank 8 --solver rrr "
                  "--batch " +
                  (wd / "hidden.lynx") + " --out " + (wd / "lora")) == 0);
  const auto lora = load_lora(wd / "lora");
  CHECK(lora.rank() == 8);
  CHECK(lora.d_in() == 192);
  CHECK(lora.d_out() == 48);

  // slim fit does not need a batch for magnitude scoring
  REQUIRE(run_cli("fit --stack " + stack_dir +
                  " --layer blocks.0.attn.to_qkv --rank 4 --solver slim "
                  "--score magnitude --out " +
                  (wd / "slim_lora")) == 0);

  // sweep and compare emit parseable reports
  REQUIRE(run_cli("sweep --stack " + stack_dir +
                  " --rows 24 --seed 13 --out " + (wd / "sweep.json") +
                  " --csv " + (wd / "sweep.csv")) == 0);
  std::ifstream sweep_in(wd / "sweep.json");
  nlohmann::json sweep_json;
  sweep_in >> sweep_json;
  CHECK(sweep_json.at("kind") == "layer_sweep");
  CHECK(sweep_json.at("layers").size() == 8);

  REQUIRE(run_cli("compare --stack " + stack_dir +
                  " --rows 24 --seed 13 --methods dense,sa-native,sa-nc "
                  "--out " +
                  (wd / "cmp.json")) == 0);
  std::ifstream cmp_in(wd / "cmp.json");
  nlohmann::json cmp_json;
  cmp_in >> cmp_json;
  CHECK(cmp_json.at("methods").size() == 3);
  CHECK(cmp_json.at("methods")[0].at("rfe_end_to_end").get<double>() == 0.0);
}

TEST_CASE("bench emits a csv table on stdout") {
  Workdir wd;
  const auto out = wd / "bench.csv";
  REQUIRE(run_cli_capture(
              "bench --case 16x16x32 --repeats 3 --warmup 0 --seed 2 --json " +
                  (wd / "bench.json"),
              out) == 0);
  std::ifstream csv(out);
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("m,n,k,pattern") == 0);
  std::string row;
  CHECK(std::getline(csv, row).good());

  std::ifstream json_in(wd / "bench.json");
  nlohmann::json j;
  json_in >> j;
  CHECK(j.at("rows").size() == 1);
  CHECK(j.at("rows")[0].at("madd_ratio").get<double>() ==
        doctest::Approx(0.5));
}

TEST_SUITE_END();
