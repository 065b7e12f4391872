// lynx: N:M activation sparsification toolkit.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error,
// 3 numeric/training error. Diagnostics go to stderr; results go to
// files or stdout as flagged.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "lynx/analysis.hpp"
#include "lynx/bench.hpp"
#include "lynx/lowrank.hpp"
#include "lynx/model.hpp"
#include "lynx/nm_format.hpp"
#include "lynx/sparsify.hpp"
#include "lynx/spmm.hpp"
#include "lynx/tensor.hpp"
#include "lynx/tensor_io.hpp"

namespace {

using namespace lynx;

nlohmann::json scale_record_json(const ScaleRecord& rec) {
  return {{"level", to_string(rec.level)},
          {"rows", rec.rows},
          {"groups_per_row", rec.groups_per_row},
          {"values", rec.values}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open for writing: " + path);
  out << text;
}

void emit_json(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_text(path, j.dump(2) + "\n");
  }
}

struct InputSource {
  std::string file;
  index_t rows = 0;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--input", file, "activation tensor (.lynx)");
    auto* rows_opt =
        cmd->add_option("--rows", rows,
                        "sample a spike-slab activation batch with this many "
                        "rows instead of reading --input");
    seed_opt = cmd->add_option("--seed", seed, "sampling seed");
    seed_opt->needs(rows_opt);
  }

  DenseMatrix load(const Stack& stack) const {
    if (!file.empty()) return read_dense(file);
    if (rows < 1) {
      throw config_error("either --input or --rows/--seed is required");
    }
    if (!seed_opt || seed_opt->count() == 0) {
      throw config_error("--seed is required when sampling with --rows");
    }
    return sample(RandomSpec::spike_slab(0.1f, 0.01f, 1.0f, seed), rows,
                  stack.model_dim());
  }
};

int run(int argc, char** argv) {
  CLI::App app{"lynx: N:M activation sparsification toolkit"};
  app.require_subcommand(1);

  int threads = 1;
  app.add_option("--threads", threads, "worker threads for row-parallel kernels")
      ->envname("LYNX_THREADS")
      ->check(CLI::PositiveNumber);
  // Option values are bound before any subcommand callback fires.
  app.parse_complete_callback([&] { set_thread_count(threads); });

  // ---- sample ------------------------------------------------------
  auto* cmd_sample = app.add_subcommand("sample", "generate a random tensor");
  struct {
    std::string kind = "gaussian";
    index_t rows = 0, cols = 0;
    std::uint64_t seed = 0;
    float mean = 0.0f, stddev = 1.0f;
    float active_fraction = 0.1f, spike_stddev = 0.01f, slab_stddev = 1.0f;
    std::string out;
  } sample_opts;
  cmd_sample->add_option("--kind", sample_opts.kind, "gaussian | spike-slab")
      ->check(CLI::IsMember({"gaussian", "spike-slab"}));
  cmd_sample->add_option("--rows", sample_opts.rows)->required();
  cmd_sample->add_option("--cols", sample_opts.cols)->required();
  cmd_sample->add_option("--seed", sample_opts.seed)->required();
  cmd_sample->add_option("--mean", sample_opts.mean, "gaussian mean");
  cmd_sample->add_option("--stddev", sample_opts.stddev, "gaussian stddev");
  cmd_sample->add_option("--active-fraction", sample_opts.active_fraction);
  cmd_sample->add_option("--spike-stddev", sample_opts.spike_stddev);
  cmd_sample->add_option("--slab-stddev", sample_opts.slab_stddev);
  cmd_sample->add_option("--out", sample_opts.out)->required();
  cmd_sample->callback([&] {
    const RandomSpec spec =
        sample_opts.kind == "gaussian"
            ? RandomSpec::gaussian(sample_opts.mean, sample_opts.stddev,
                                   sample_opts.seed)
            : RandomSpec::spike_slab(sample_opts.active_fraction,
                                     sample_opts.spike_stddev,
                                     sample_opts.slab_stddev, sample_opts.seed);
    write_dense(sample_opts.out, sample(spec, sample_opts.rows,
                                        sample_opts.cols));
  });

  // ---- sparsify ----------------------------------------------------
  auto* cmd_sparsify =
      app.add_subcommand("sparsify", "norm-compensated N:M sparsification");
  struct {
    std::string in, out, scale_out;
    std::string pattern = "2:4", granularity = "per-tensor";
    float eps = kDefaultEps;
  } sp_opts;
  cmd_sparsify->add_option("--in", sp_opts.in)->required();
  cmd_sparsify->add_option("--pattern", sp_opts.pattern, "N:M (default 2:4)");
  cmd_sparsify->add_option("--granularity", sp_opts.granularity,
                           "none|per-tensor|per-row|per-group");
  cmd_sparsify->add_option("--eps", sp_opts.eps,
                           "stability epsilon (default 1e-8)");
  cmd_sparsify->add_option("--out", sp_opts.out)->required();
  cmd_sparsify->add_option("--scale-out", sp_opts.scale_out,
                           "write the scale record as JSON");
  cmd_sparsify->callback([&] {
    const DenseMatrix x = read_dense(sp_opts.in);
    const SparsifyResult result =
        sparsify_activation(x, parse_pattern(sp_opts.pattern),
                            parse_granularity(sp_opts.granularity), sp_opts.eps);
    write_dense(sp_opts.out, result.sx);
    if (!sp_opts.scale_out.empty()) {
      emit_json(scale_record_json(result.scales), sp_opts.scale_out);
    }
  });

  // ---- pack --------------------------------------------------------
  auto* cmd_pack = app.add_subcommand("pack", "compress an N:M-masked tensor");
  struct {
    std::string in, out, pattern = "2:4";
  } pack_opts;
  cmd_pack->add_option("--in", pack_opts.in)->required();
  cmd_pack->add_option("--pattern", pack_opts.pattern);
  cmd_pack->add_option("--out", pack_opts.out)->required();
  cmd_pack->callback([&] {
    write_packed(pack_opts.out,
                 pack(read_dense(pack_opts.in), parse_pattern(pack_opts.pattern)));
  });

  // ---- spmm --------------------------------------------------------
  auto* cmd_spmm = app.add_subcommand("spmm", "packed sparse x dense multiply");
  struct {
    std::string x, w, out;
    KernelConfig cfg;
  } spmm_opts;
  cmd_spmm->add_option("--x", spmm_opts.x, "packed operand (.lynx)")->required();
  cmd_spmm->add_option("--w", spmm_opts.w, "dense weights (.lynx)")->required();
  cmd_spmm->add_option("--out", spmm_opts.out)->required();
  cmd_spmm->add_option("--tile-m", spmm_opts.cfg.tile_m);
  cmd_spmm->add_option("--tile-n", spmm_opts.cfg.tile_n);
  cmd_spmm->add_option("--tile-k", spmm_opts.cfg.tile_k);
  cmd_spmm->add_flag("--parallel-rows", spmm_opts.cfg.parallel_rows);
  cmd_spmm->callback([&] {
    write_dense(spmm_opts.out, spmm(read_packed(spmm_opts.x),
                                    read_dense(spmm_opts.w), spmm_opts.cfg));
  });

  // ---- stack-build -------------------------------------------------
  auto* cmd_stack = app.add_subcommand("stack-build", "build a scaled layer stack");
  struct {
    std::string preset = "qwen-like", out;
    int depth = 6, scale = 16;
    std::uint64_t seed = 0;
  } stack_opts;
  cmd_stack->add_option("--preset", stack_opts.preset,
                        "qwen-like | flux-like | zimage-like");
  cmd_stack->add_option("--depth", stack_opts.depth, "transformer blocks");
  cmd_stack->add_option("--scale", stack_opts.scale, "dimension divisor");
  cmd_stack->add_option("--seed", stack_opts.seed)->required();
  cmd_stack->add_option("--out", stack_opts.out)->required();
  cmd_stack->callback([&] {
    StackConfig cfg;
    cfg.preset = parse_preset(stack_opts.preset);
    cfg.depth = stack_opts.depth;
    cfg.scale = stack_opts.scale;
    cfg.seed = stack_opts.seed;
    save_stack(stack_opts.out, build_stack(cfg));
  });

  // ---- fit ---------------------------------------------------------
  auto* cmd_fit = app.add_subcommand("fit", "fit low-rank compensation");
  struct {
    std::string stack, layer, solver = "rrr", batch, out, score = "magnitude";
    std::string pattern = "2:4", granularity = "per-tensor";
    index_t rank = kDefaultLoraRank;
    float eps = kDefaultEps;
    TrainConfig train;
  } fit_opts;
  cmd_fit->add_option("--stack", fit_opts.stack)->required();
  cmd_fit->add_option("--layer", fit_opts.layer, "layer name or unique suffix")
      ->required();
  cmd_fit->add_option("--rank", fit_opts.rank, "LoRA rank (default 64)");
  cmd_fit->add_option("--solver", fit_opts.solver, "rrr | gd | slim")
      ->check(CLI::IsMember({"rrr", "gd", "slim"}));
  cmd_fit->add_option("--batch", fit_opts.batch, "activation batch (.lynx)");
  cmd_fit->add_option("--out", fit_opts.out)->required();
  cmd_fit->add_option("--pattern", fit_opts.pattern);
  cmd_fit->add_option("--granularity", fit_opts.granularity);
  cmd_fit->add_option("--eps", fit_opts.eps);
  cmd_fit->add_option("--steps", fit_opts.train.steps, "gd steps");
  cmd_fit->add_option("--lr", fit_opts.train.learning_rate, "gd learning rate");
  cmd_fit->add_option("--init-scale", fit_opts.train.init_scale);
  auto* fit_seed = cmd_fit->add_option("--seed", fit_opts.train.seed, "gd seed");
  cmd_fit->add_option("--score", fit_opts.score,
                      "pruning criterion for the slim solver");
  cmd_fit->callback([&] {
    const Stack stack = load_stack(fit_opts.stack);
    const Layer& layer = stack.layers[stack.resolve(fit_opts.layer)];
    const NMPattern pattern = parse_pattern(fit_opts.pattern);
    const Granularity g = parse_granularity(fit_opts.granularity);

    LoraPair lora;
    std::vector<std::pair<std::string, std::string>> meta = {
        {"solver", fit_opts.solver}, {"layer", layer.spec.name}};
    if (fit_opts.solver == "slim") {
      ScoreSpec score;
      score.method = parse_score_method(fit_opts.score);
      std::optional<std::vector<float>> norms;
      if (score.needs_activation_norms()) {
        if (fit_opts.batch.empty()) {
          throw config_error("fit: --batch is required for score '" +
                             fit_opts.score + "'");
        }
        norms = column_l2_norms(read_dense(fit_opts.batch));
      }
      const DenseMatrix pruned = prune_weights(
          layer.weight, score_weights(layer.weight, norms, score), pattern);
      lora = slim_init(layer.weight, pruned, fit_opts.rank);
      meta.emplace_back("score", fit_opts.score);
    } else {
      if (fit_opts.batch.empty()) {
        throw config_error("fit: --batch is required for solver '" +
                           fit_opts.solver + "'");
      }
      const DenseMatrix batch = read_dense(fit_opts.batch);
      if (fit_opts.solver == "rrr") {
        lora = rrr_fit(batch, layer.weight, pattern, g, fit_opts.eps,
                       fit_opts.rank);
      } else {
        if (fit_seed->count() == 0) {
          throw config_error("fit: --seed is required for the gd solver");
        }
        const DenseMatrix batches[1] = {batch};
        GdFitResult gd = gd_fit(batches, layer.weight, pattern, g,
                                fit_opts.eps, fit_opts.rank, fit_opts.train);
        lora = std::move(gd.lora);
        meta.emplace_back("final_loss", std::to_string(gd.loss_trace.back()));
        meta.emplace_back("seed", std::to_string(fit_opts.train.seed));
        meta.emplace_back("steps", std::to_string(fit_opts.train.steps));
        meta.emplace_back("learning_rate",
                          std::to_string(fit_opts.train.learning_rate));
      }
      meta.emplace_back("granularity", fit_opts.granularity);
      meta.emplace_back("pattern", fit_opts.pattern);
    }
    save_lora(fit_opts.out, lora, meta);
  });

  // ---- sweep -------------------------------------------------------
  auto* cmd_sweep = app.add_subcommand("sweep", "layer-local error sweep");
  struct {
    std::string stack, out, csv;
    std::string pattern = "2:4", granularity = "none", score = "magnitude";
    float eps = kDefaultEps;
  } sweep_opts;
  InputSource sweep_input;
  cmd_sweep->add_option("--stack", sweep_opts.stack)->required();
  sweep_input.add_flags(cmd_sweep);
  cmd_sweep->add_option("--pattern", sweep_opts.pattern);
  cmd_sweep->add_option("--granularity", sweep_opts.granularity,
                        "activation-variant granularity");
  cmd_sweep->add_option("--score", sweep_opts.score, "weight-variant criterion");
  cmd_sweep->add_option("--eps", sweep_opts.eps);
  cmd_sweep->add_option("--out", sweep_opts.out, "JSON path (default stdout)");
  cmd_sweep->add_option("--csv", sweep_opts.csv, "also write CSV here");
  cmd_sweep->callback([&] {
    const Stack stack = load_stack(sweep_opts.stack);
    const DenseMatrix x0 = sweep_input.load(stack);
    SweepOptions opts;
    opts.pattern = parse_pattern(sweep_opts.pattern);
    opts.activation_granularity = parse_granularity(sweep_opts.granularity);
    opts.weight_score.method = parse_score_method(sweep_opts.score);
    opts.eps = sweep_opts.eps;
    const auto reports = layer_sweep(stack, x0, opts);
    emit_json(sweep_report_json(stack, reports, opts), sweep_opts.out);
    if (!sweep_opts.csv.empty()) {
      write_text(sweep_opts.csv, sweep_report_csv(reports));
    }
  });

  // ---- compare -----------------------------------------------------
  auto* cmd_compare =
      app.add_subcommand("compare", "end-to-end method comparison");
  struct {
    std::string stack, out, csv;
    std::string methods = "dense,sa-native,sa-nc,sa-nc-lora";
    std::string pattern = "2:4";
    index_t rank = kDefaultLoraRank;
    float eps = kDefaultEps;
  } cmp_opts;
  InputSource cmp_input;
  cmd_compare->add_option("--stack", cmp_opts.stack)->required();
  cmp_input.add_flags(cmd_compare);
  cmd_compare->add_option("--methods", cmp_opts.methods,
                          "comma list: dense,sa-native,sa-nc,sa-nc-lora,"
                          "sa-nc-lora-sl,sw-magnitude,sw-wanda,sw-ria,sw-bawa");
  cmd_compare->add_option("--rank", cmp_opts.rank);
  cmd_compare->add_option("--pattern", cmp_opts.pattern);
  cmd_compare->add_option("--eps", cmp_opts.eps);
  cmd_compare->add_option("--out", cmp_opts.out, "JSON path (default stdout)");
  cmd_compare->add_option("--csv", cmp_opts.csv);
  cmd_compare->callback([&] {
    const Stack stack = load_stack(cmp_opts.stack);
    const DenseMatrix x0 = cmp_input.load(stack);
    std::vector<NamedPolicy> methods;
    std::stringstream names(cmp_opts.methods);
    std::string name;
    while (std::getline(names, name, ',')) {
      if (name.empty()) continue;
      methods.push_back({name, build_method_policy(
                                   name, stack, x0, cmp_opts.rank,
                                   parse_pattern(cmp_opts.pattern),
                                   cmp_opts.eps)});
    }
    if (methods.empty()) throw config_error("compare: no methods given");
    const ComparisonReport report = compare_methods(stack, x0, methods);
    emit_json(comparison_report_json(stack, report), cmp_opts.out);
    if (!cmp_opts.csv.empty()) {
      write_text(cmp_opts.csv, comparison_report_csv(report));
    }
  });

  // ---- bench -------------------------------------------------------
  auto* cmd_bench = app.add_subcommand("bench", "kernel timing harness");
  struct {
    std::string preset = "qwen-shapes";
    int scale = 4;
    std::vector<std::string> cases;
    int repeats = 5, warmup = 2;
    std::string pattern = "2:4", granularity = "per-tensor";
    std::uint64_t seed = 42;
    std::string json_out;
  } bench_opts;
  cmd_bench->add_option("--preset", bench_opts.preset, "qwen-shapes")
      ->check(CLI::IsMember({"qwen-shapes"}));
  cmd_bench->add_option("--scale", bench_opts.scale,
                        "divisor applied to the preset shape grid");
  cmd_bench->add_option("--case", bench_opts.cases,
                        "explicit MxNxK case (repeatable, overrides preset)");
  cmd_bench->add_option("--repeats", bench_opts.repeats);
  cmd_bench->add_option("--warmup", bench_opts.warmup);
  cmd_bench->add_option("--pattern", bench_opts.pattern);
  cmd_bench->add_option("--granularity", bench_opts.granularity);
  cmd_bench->add_option("--seed", bench_opts.seed, "input seed (default 42)");
  bool bench_parallel = false;
  cmd_bench->add_flag("--parallel-rows", bench_parallel,
                      "time the row-parallel kernels (uses --threads)");
  cmd_bench->add_option("--json", bench_opts.json_out, "also write JSON here");
  cmd_bench->callback([&] {
    const NMPattern pattern = parse_pattern(bench_opts.pattern);
    const Granularity g = parse_granularity(bench_opts.granularity);
    std::vector<BenchCase> cases;
    if (!bench_opts.cases.empty()) {
      for (const auto& text : bench_opts.cases) {
        BenchCase c;
        if (std::sscanf(text.c_str(), "%ldx%ldx%ld", &c.m, &c.n, &c.k) != 3) {
          throw config_error("bench: case must be MxNxK, got '" + text + "'");
        }
        c.repeats = bench_opts.repeats;
        c.warmup = bench_opts.warmup;
        c.pattern = pattern;
        c.granularity = g;
        c.seed = bench_opts.seed;
        cases.push_back(c);
      }
    } else {
      cases = qwen_shape_cases(bench_opts.scale, bench_opts.repeats,
                               bench_opts.warmup, pattern, g, bench_opts.seed);
    }
    for (auto& c : cases) c.parallel_rows = bench_parallel;
    const auto rows = run_bench(cases);
    std::cout << bench_report_csv(rows);
    if (!bench_opts.json_out.empty()) {
      emit_json(bench_report_json(rows), bench_opts.json_out);
    }
  });

  // ---- validate ----------------------------------------------------
  auto* cmd_validate = app.add_subcommand("validate", "check a lynx file");
  struct {
    std::string in;
  } val_opts;
  cmd_validate->add_option("--in", val_opts.in)->required();
  cmd_validate->callback([&] {
    const std::uint8_t dtype = probe_dtype(val_opts.in);
    if (dtype == kDtypeF32) {
      const DenseMatrix m = read_dense(val_opts.in);
      std::cerr << "dense f32 " << m.shape_string() << ": ok\n";
      return;
    }
    const PackedNM p = read_packed(val_opts.in);
    const auto violations = validate(p);
    if (violations.empty()) {
      std::cerr << "packed " << p.pattern.str() << " " << p.rows << "x"
                << p.cols << ": ok\n";
      return;
    }
    for (const auto& v : violations) {
      std::cerr << "violation: row " << v.row << " group " << v.group << ": "
                << v.rule << "\n";
    }
    throw format_error(val_opts.in + ": " + std::to_string(violations.size()) +
                       " violation(s)");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const lynx::numeric_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const lynx::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const lynx::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
