#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qcnn/checks.hpp"
#include "qcnn/gait.hpp"
#include "qcnn/layers.hpp"
#include "qcnn/train.hpp"
#include "qcnn/viz.hpp"

namespace fs = std::filesystem;
using namespace qcnn;

namespace {

std::string read_text_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::invalid_argument("cannot open " + path.string() + " for writing");
  f << text;
}

void require_exists(const fs::path& path, const char* what) {
  if (!fs::exists(path))
    throw std::invalid_argument(std::string(what) + " not found: " + path.string());
}

void print_eval_report(const train::EvalReport& rep) {
  std::printf("samples: %d\n", rep.count);
  std::printf("top-1:   %.4f\n", rep.top1);
  std::printf("top-5:   %.4f\n", rep.top5);
  std::printf("per-class top-1:");
  for (double a : rep.per_class_accuracy) std::printf(" %.3f", a);
  std::printf("\n");
}

int cmd_gen_data(int classes, int per_class, double noise, int T, std::uint64_t seed,
                 const std::string& split, const fs::path& out) {
  gait::SyntheticConfig cfg;
  cfg.num_classes = classes;
  cfg.cycles_per_class = per_class;
  cfg.length = T;
  cfg.noise_sigma = noise;
  cfg.seed = seed;
  cfg.split = gait::split_from_name(split);
  const gait::GaitDataset data = gait::generate_synthetic_dataset(cfg);
  gait::save_dataset(data, out);
  std::printf("wrote %zu cycles (%d classes, T=%d) to %s\n", data.cycles.size(), classes, T,
              out.string().c_str());
  return 0;
}

int cmd_train(const std::optional<fs::path>& config, const fs::path& data_path,
              const fs::path& out, std::optional<fs::path> metrics,
              std::optional<std::uint64_t> seed_override) {
  train::TrainConfig cfg;
  if (config) {
    require_exists(*config, "config file");
    cfg = train::train_config_from_json_text(read_text_file(*config));
  }
  if (seed_override) cfg.seed = *seed_override;
  require_exists(data_path, "dataset");
  const gait::GaitDataset data = gait::load_dataset(data_path);
  if (data.cycles.empty()) throw std::invalid_argument("dataset has no cycles");

  nn::Model model =
      train::build_model_from_config(cfg, data.num_classes, data.cycles.front().length());
  RandomStream init_rng = RandomStream(cfg.seed).fork("model-init");
  model.init_params(init_rng);
  std::fprintf(stderr, "training %s: %lld parameters, %zu cycles, %d epochs\n",
               cfg.model.c_str(), static_cast<long long>(model.param_count()),
               data.cycles.size(), cfg.epochs);

  const train::TrainResult result = train::train(model, data, cfg);
  result.best.best_epoch >= 0
      ? std::printf("best epoch %d: val top-1 %.4f, val top-5 %.4f\n", result.best.best_epoch,
                    result.best.val_top1, result.best.val_top5)
      : std::printf("training finished\n");
  train::save_checkpoint(result.best, out);
  if (!metrics) {
    fs::path m = out;
    m.replace_extension(".metrics.csv");
    metrics = m;
  }
  train::write_metrics_csv(result.history, *metrics);
  std::printf("checkpoint: %s\nmetrics: %s\n", out.string().c_str(),
              metrics->string().c_str());
  return 0;
}

int cmd_eval(const fs::path& ckpt_path, const fs::path& data_path,
             const std::optional<fs::path>& out) {
  require_exists(ckpt_path, "checkpoint");
  require_exists(data_path, "dataset");
  const train::Checkpoint ckpt = train::load_checkpoint(ckpt_path);
  nn::Model model = train::model_from_checkpoint(ckpt);
  const gait::GaitDataset data = gait::load_dataset(data_path);
  if (data.num_classes != model.num_classes())
    throw std::invalid_argument(
        "shape mismatch: checkpoint expects " + std::to_string(model.num_classes()) +
        " classes but the dataset declares " + std::to_string(data.num_classes));
  if (!data.cycles.empty() && data.cycles.front().length() != model.input_length())
    throw std::invalid_argument(
        "shape mismatch: checkpoint expects T=" + std::to_string(model.input_length()) +
        " but the dataset has T=" + std::to_string(data.cycles.front().length()));
  const train::EvalReport rep = train::evaluate(model, data);
  print_eval_report(rep);
  if (out) {
    std::string json = "{\n  \"top1\": " + std::to_string(rep.top1) +
                       ",\n  \"top5\": " + std::to_string(rep.top5) +
                       ",\n  \"count\": " + std::to_string(rep.count) + "\n}\n";
    write_text_file(*out, json);
  }
  return 0;
}

int cmd_matrix(const fs::path& config, const fs::path& out_prefix) {
  require_exists(config, "config file");
  const train::ExperimentConfig cfg =
      train::experiment_config_from_json_text(read_text_file(config));
  const train::MatrixResult res = train::run_experiment_matrix(cfg);
  const std::string table = train::matrix_table(res);
  std::fputs(table.c_str(), stdout);
  write_text_file(fs::path(out_prefix.string() + ".csv"), train::matrix_csv(res));
  write_text_file(fs::path(out_prefix.string() + ".txt"), table);
  return 0;
}

int cmd_flip(const fs::path& config, const fs::path& out_prefix) {
  require_exists(config, "config file");
  const train::ExperimentConfig cfg =
      train::experiment_config_from_json_text(read_text_file(config));
  const train::FlipResult res = train::flip_experiment(cfg);
  const std::string table = train::flip_table(res);
  std::fputs(table.c_str(), stdout);
  write_text_file(fs::path(out_prefix.string() + ".csv"), train::flip_csv(res));
  write_text_file(fs::path(out_prefix.string() + ".txt"), table);
  return 0;
}

int cmd_check_equivariance(int trials, std::uint64_t seed) {
  const checks::EquivarianceReport rep = checks::layer_equivariance_trials(trials, seed);
  std::printf("layer equivariance: %d trials, max deviation %.3e\n", rep.trials,
              rep.max_deviation);

  nn::Model model = nn::Model::build(nn::qcnn_default_spec(10));
  RandomStream rng(seed);
  RandomStream init = rng.fork("model-init");
  model.init_params(init);
  const int B = 6, T = model.input_length();
  std::vector<double> batch(static_cast<std::size_t>(B) * T * 3);
  RandomStream data = rng.fork("batch");
  for (double& v : batch) v = data.normal(0.0, 0.8);
  const double rel = checks::model_invariance_max_rel(model, batch, B, 20, seed + 1);
  std::printf("model invariance:   20 rotations, max relative deviation %.3e\n", rel);

  const bool ok = rep.max_deviation <= 1e-10 && rel <= 1e-8;
  std::printf("%s\n", ok ? "OK" : "FAILED");
  return ok ? 0 : 2;
}

int cmd_grad_check(std::uint64_t seed, double h) {
  const double err = checks::small_qcnn_gradient_check(seed, h);
  std::printf("full-model gradient check: max relative error %.3e (h=%g)\n", err, h);
  const bool ok = err < 1e-4;
  std::printf("%s\n", ok ? "OK" : "FAILED");
  return ok ? 0 : 2;
}

int cmd_viz(const fs::path& ckpt_path, int layer, std::uint64_t seed, int steps,
            double step_size, const fs::path& out, const std::optional<fs::path>& svg,
            const std::optional<fs::path>& data_path, int cycle_index,
            const std::vector<int>& trace_kernels) {
  require_exists(ckpt_path, "checkpoint");
  const train::Checkpoint ckpt = train::load_checkpoint(ckpt_path);
  nn::Model model = train::model_from_checkpoint(ckpt);
  if (layer < 0 || layer >= model.layer_count() ||
      model.layer(layer).kind != nn::LayerKind::QConv)
    throw std::invalid_argument("layer " + std::to_string(layer) + " is not a qconv layer");

  viz::VizDocument doc;
  doc.checkpoint_path = ckpt_path.string();
  doc.layer = layer;
  doc.seed = seed;
  viz::AscentOptions opts;
  opts.steps = steps;
  opts.step_size = step_size;
  const int kernels = model.layer(layer).out_channels;
  for (int k = 0; k < kernels; ++k) {
    viz::TrajectoryFragment frag = viz::maximize_kernel_activation(model, layer, k, seed, opts);
    if (frag.flat_landscape)
      std::fprintf(stderr, "kernel %d: flat activation landscape (zero filter?)\n", k);
    doc.fragments.push_back(std::move(frag));
  }

  if (data_path) {
    require_exists(*data_path, "dataset");
    const gait::GaitDataset data = gait::load_dataset(*data_path);
    if (cycle_index < 0 || cycle_index >= static_cast<int>(data.cycles.size()))
      throw std::invalid_argument("cycle index out of range");
    const gait::GaitCycle& cyc = data.cycles[cycle_index];
    std::vector<int> which = trace_kernels;
    if (which.empty()) which = {0};
    for (int k : which) {
      if (k < 0 || k >= kernels) throw std::invalid_argument("trace kernel out of range");
      viz::KernelTrace tr;
      tr.kernel = k;
      tr.points = viz::apply_kernel_trace(model, layer, k, cyc.samples);
      doc.traces.push_back(std::move(tr));
    }
  }

  const std::string json = viz::viz_to_json(doc);
  write_text_file(out, json);
  std::printf("fragments: %d (layer %d) -> %s\n", kernels, layer, out.string().c_str());
  if (svg) {
    write_text_file(*svg, viz::render_svg(json));
    std::printf("svg: %s\n", svg->string().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SO(3)-equivariant quaternion CNN for accelerometric gait cycles"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic gait-cycle dataset");
  int g_classes = 10, g_per_class = 120, g_T = 100;
  double g_noise = 0.05;
  std::uint64_t g_seed = 0;
  std::string g_split = "train", g_out;
  gen->add_option("--classes", g_classes, "number of classes");
  gen->add_option("--per-class", g_per_class, "cycles per class");
  gen->add_option("--noise", g_noise, "noise sigma");
  gen->add_option("--T", g_T, "samples per cycle");
  gen->add_option("--seed", g_seed, "generation seed");
  gen->add_option("--split", g_split, "split tag (train|val|test)");
  gen->add_option("--out", g_out, "output dataset path")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model from a config file");
  std::string t_config, t_data, t_out, t_metrics;
  std::int64_t t_seed = -1;
  tr->add_option("--config", t_config, "train config JSON");
  tr->add_option("--data", t_data, "dataset path")->required();
  tr->add_option("--out", t_out, "checkpoint output path")->required();
  tr->add_option("--metrics", t_metrics, "metrics CSV path");
  tr->add_option("--seed", t_seed, "seed override");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string e_ckpt, e_data, e_out;
  ev->add_option("--checkpoint", e_ckpt, "checkpoint path")->required();
  ev->add_option("--data", e_data, "dataset path")->required();
  ev->add_option("--out", e_out, "JSON report path");

  // experiment-matrix
  auto* mx = app.add_subcommand("experiment-matrix",
                                "original/rotated train-test grid for QCNN and baseline CNN");
  std::string m_config, m_out = "matrix";
  mx->add_option("--config", m_config, "experiment config JSON")->required();
  mx->add_option("--out", m_out, "output prefix (.csv/.txt)");

  // flip-experiment
  auto* fl = app.add_subcommand("flip-experiment",
                                "train on canonical orientation, test on a 180-degree flip");
  std::string f_config, f_out = "flip";
  fl->add_option("--config", f_config, "experiment config JSON")->required();
  fl->add_option("--out", f_out, "output prefix (.csv/.txt)");

  // check-equivariance
  auto* ce = app.add_subcommand("check-equivariance", "random-trial equivariance suite");
  int c_trials = 100;
  std::uint64_t c_seed = 0;
  ce->add_option("--trials", c_trials, "number of random layer trials");
  ce->add_option("--seed", c_seed, "seed");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "full-model finite-difference gradient check");
  std::uint64_t gc_seed = 0;
  double gc_h = 1e-6;
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--fd-step", gc_h, "finite-difference step");

  // viz-kernels
  auto* vz = app.add_subcommand("viz-kernels",
                                "kernel trajectory fragments (and optional cycle traces)");
  std::string v_ckpt, v_out, v_svg, v_data;
  int v_layer = 0, v_steps = 2000, v_cycle = 0;
  double v_step_size = 0.05;
  std::uint64_t v_seed = 0;
  std::vector<int> v_trace_kernels;
  vz->add_option("--checkpoint", v_ckpt, "checkpoint path")->required();
  vz->add_option("--layer", v_layer, "qconv layer index");
  vz->add_option("--seed", v_seed, "shared ascent seed");
  vz->add_option("--steps", v_steps, "ascent step budget");
  vz->add_option("--step-size", v_step_size, "initial ascent step size");
  vz->add_option("--out", v_out, "fragments JSON path")->required();
  vz->add_option("--svg", v_svg, "optional SVG small-multiples path");
  vz->add_option("--data", v_data, "dataset for kernel traces");
  vz->add_option("--cycle", v_cycle, "cycle index for traces");
  vz->add_option("--trace-kernel", v_trace_kernels, "kernel indices to trace");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(g_classes, g_per_class, g_noise, g_T, g_seed, g_split, g_out);
    if (tr->parsed())
      return cmd_train(t_config.empty() ? std::nullopt : std::optional<fs::path>(t_config),
                       t_data, t_out,
                       t_metrics.empty() ? std::nullopt : std::optional<fs::path>(t_metrics),
                       t_seed < 0 ? std::nullopt
                                  : std::optional<std::uint64_t>(static_cast<std::uint64_t>(t_seed)));
    if (ev->parsed())
      return cmd_eval(e_ckpt, e_data,
                      e_out.empty() ? std::nullopt : std::optional<fs::path>(e_out));
    if (mx->parsed()) return cmd_matrix(m_config, m_out);
    if (fl->parsed()) return cmd_flip(f_config, f_out);
    if (ce->parsed()) return cmd_check_equivariance(c_trials, c_seed);
    if (gc->parsed()) return cmd_grad_check(gc_seed, gc_h);
    if (vz->parsed())
      return cmd_viz(v_ckpt, v_layer, v_seed, v_steps, v_step_size, v_out,
                     v_svg.empty() ? std::nullopt : std::optional<fs::path>(v_svg),
                     v_data.empty() ? std::nullopt : std::optional<fs::path>(v_data), v_cycle,
                     v_trace_kernels);
  } catch (const gait::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
  return 1;
}
