#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "blopt/astar.hpp"
#include "blopt/bilevel.hpp"
#include "blopt/estimators.hpp"
#include "blopt/mpc.hpp"
#include "blopt/mtsp.hpp"
#include "blopt/pgo.hpp"
#include "blopt/runio.hpp"

namespace fs = std::filesystem;
using namespace blopt;

namespace {

struct CommonArgs {
  std::string config_path;
  std::int64_t seed_override = -1;
  std::string out_dir = "out";
  bool quiet = false;
};

void say(const CommonArgs& args, const std::string& line) {
  if (!args.quiet) std::printf("%s\n", line.c_str());
}

Config load_config(const CommonArgs& args) {
  if (args.config_path.empty()) return Config::from_json(nlohmann::json::object());
  return Config::load(args.config_path);
}

std::uint64_t pick_seed(Config& cfg, const CommonArgs& args) {
  std::int64_t seed = cfg.integer("seed", 0, 0, std::numeric_limits<std::int64_t>::max());
  if (args.seed_override >= 0) seed = args.seed_override;
  return static_cast<std::uint64_t>(seed);
}

std::string out_path(const CommonArgs& args, const std::string& name) {
  fs::create_directories(args.out_dir);
  return (fs::path(args.out_dir) / name).string();
}

int run_blo_selftest(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  cfg.finish();

  auto report = run_selftest(seed);
  RunManifest manifest("blo-selftest", cfg.snapshot(), seed);
  const std::string csv_path = out_path(args, "selftest.csv");
  bool all_pass = true;
  double max_rel = 0.0;
  {
    std::string text = "name,rel_error,cg_iterations,tolerance,pass\n";
    for (const auto& e : report) {
      text += e.name + "," + format_g10(e.rel_error) + "," + std::to_string(e.cg_iterations) +
              "," + format_g10(e.tolerance) + "," + (e.pass ? "1" : "0") + "\n";
      all_pass = all_pass && e.pass;
      max_rel = std::max(max_rel, e.rel_error);
      say(args, "  " + e.name + ": rel_error=" + format_g10(e.rel_error) +
                    " cg_iters=" + std::to_string(e.cg_iterations) +
                    (e.pass ? " pass" : " FAIL"));
    }
    std::ofstream f(csv_path, std::ios::binary);
    f << text;
  }
  manifest.add_output(csv_path);
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, std::string("selftest: ") + (all_pass ? "all oracles passed" : "FAILURES") +
                ", max relative error " + format_g10(max_rel));
  return all_pass ? 0 : 3;
}

AstarTrainConfig astar_config(Config& cfg, std::uint64_t seed) {
  AstarTrainConfig tc;
  tc.seed = seed;
  tc.epochs = static_cast<int>(cfg.integer("epochs", tc.epochs, 1, 64));
  tc.train_maps = static_cast<int>(cfg.integer("train_maps", tc.train_maps, 1, 100000));
  tc.eval_maps = static_cast<int>(cfg.integer("eval_maps", tc.eval_maps, 1, 10000));
  tc.maze.height = static_cast<int>(cfg.integer("height", tc.maze.height, 8, 256));
  tc.maze.width = static_cast<int>(cfg.integer("width", tc.maze.width, 8, 256));
  tc.temperature = cfg.num("temperature", tc.temperature, 1e-6, 1e6);
  tc.w_a = cfg.num("w_a", tc.w_a, 0.0, 1e6);
  tc.w_l = cfg.num("w_l", tc.w_l, 0.0, 1e9);
  tc.cost_slack = cfg.num("cost_slack", tc.cost_slack, 1.0, 2.0);
  tc.lr = cfg.num("lr", tc.lr, 0.0, 1.0);
  tc.batch = static_cast<int>(cfg.integer("batch", tc.batch, 1, 4096));
  return tc;
}

int run_astar_train(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  AstarTrainConfig tc = astar_config(cfg, seed);
  cfg.finish();

  say(args, "training heuristic net on " + std::to_string(tc.train_maps) + " mazes (" +
                std::to_string(tc.maze.height) + "x" + std::to_string(tc.maze.width) + ")");
  AstarTrainResult res = train_astar(tc);
  for (std::size_t e = 0; e < res.epoch_mean_exp.size(); ++e) {
    say(args, "  epoch " + std::to_string(e) + ": held-out Exp " +
                  format_g10(res.epoch_mean_exp[e]) + "%");
  }

  RunManifest manifest("astar-train", cfg.snapshot(), seed);
  const std::string weights_path = out_path(args, "astar_weights.json");
  save_weights(res.net.params, weights_path);
  manifest.add_output(weights_path);

  CounterRng eval_rng(seed, 202);
  std::vector<GridPlanInstance> maps;
  for (int i = 0; i < tc.eval_maps; ++i) maps.push_back(generate_maze(tc.maze, eval_rng));
  AstarEvalSummary sum = evaluate_heuristic(res.net, tc, maps);
  const std::string csv_path = out_path(args, "astar_metrics.csv");
  {
    CsvWriter csv(csv_path, {"map_id", "exp_pct", "rt_pct", "cost_ratio"});
    for (const auto& row : sum.rows) {
      csv.row_prefixed(row.map_id, {row.exp_pct, row.rt_pct, row.cost_ratio});
    }
  }
  manifest.add_output(csv_path);
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, "held-out: mean Exp " + format_g10(sum.mean_exp) + "%, mean Rt " +
                format_g10(sum.mean_rt) + "%, cost ratio <= 1.05 on " +
                format_g10(100.0 * sum.frac_within_1_05) + "% of maps");
  return 0;
}

int run_astar_eval(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  AstarTrainConfig tc = astar_config(cfg, seed);
  const std::string weights = cfg.str("weights", "");
  const std::string map_file = cfg.str("map_file", "");
  cfg.finish();
  if (weights.empty()) throw ConfigError("astar-eval requires config key 'weights'");

  HeuristicNet net = HeuristicNet::make(8, 8, seed);
  load_weights(net.params, weights);

  std::vector<GridPlanInstance> maps;
  if (!map_file.empty()) {
    maps.push_back(load_map(map_file));
  } else {
    CounterRng eval_rng(seed, 202);
    for (int i = 0; i < tc.eval_maps; ++i) maps.push_back(generate_maze(tc.maze, eval_rng));
  }
  AstarEvalSummary sum = evaluate_heuristic(net, tc, maps);

  RunManifest manifest("astar-eval", cfg.snapshot(), seed);
  const std::string csv_path = out_path(args, "astar_metrics.csv");
  {
    CsvWriter csv(csv_path, {"map_id", "exp_pct", "rt_pct", "cost_ratio"});
    for (const auto& row : sum.rows) {
      csv.row_prefixed(row.map_id, {row.exp_pct, row.rt_pct, row.cost_ratio});
    }
  }
  manifest.add_output(csv_path);
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, "eval: mean Exp " + format_g10(sum.mean_exp) + "%, mean Rt " +
                format_g10(sum.mean_rt) + "%");
  return 0;
}

int run_mpc_train(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  MpcTrainConfig mc;
  mc.seed = seed;
  cfg.integer("n", 2, 2, 2);  // the desk plant is pinned at n=2, m=1
  cfg.integer("m", 1, 1, 1);
  mc.p_true = cfg.num("p_true", mc.p_true, 1e-6, 1e6);
  mc.p_init_offset = cfg.num("p_init_offset", mc.p_init_offset, -0.9, 10.0);
  mc.sigma_u = cfg.num("sigma_u", mc.sigma_u, 0.0, 1.0);
  mc.sigma_v = cfg.num("sigma_x", mc.sigma_v, 0.0, 1.0);
  mc.sigma_v_rate = cfg.num("sigma_x_rate", mc.sigma_v_rate, 0.0, 1.0);
  mc.sigma_w = cfg.num("sigma_w", mc.sigma_w, 0.0, 1.0);
  mc.horizon = static_cast<int>(cfg.integer("horizon", mc.horizon, 1, 256));
  mc.episodes = static_cast<int>(cfg.integer("episodes", mc.episodes, 1, 100000));
  mc.steps_per_episode = static_cast<int>(cfg.integer("steps", mc.steps_per_episode, 2, 100000));
  mc.dt = cfg.num("dt", mc.dt, 1e-4, 10.0);
  mc.lr = cfg.num("lr", mc.lr, 0.0, 1.0);
  mc.initial_angle = cfg.num("initial_angle", mc.initial_angle, -3.0, 3.0);
  mc.freeze_p = cfg.flag("freeze_p", mc.freeze_p);
  cfg.finish();

  say(args, "training denoiser + inertia parameter over " + std::to_string(mc.episodes) +
                " episodes (p_hat starts at " + format_g10(mc.p_true * (1 + mc.p_init_offset)) +
                ")");
  MpcTrainResult res = mpc_train(mc);

  RunManifest manifest("mpc-train", cfg.snapshot(), seed);
  const std::string csv_path = out_path(args, "mpc_metrics.csv");
  {
    CsvWriter csv(csv_path, {"episode", "ul_loss", "p_hat", "rmse", "st", "sse"});
    for (const auto& r : res.history) {
      csv.row_prefixed(r.episode, {r.ul_loss, r.p_hat, r.rmse, r.st, r.sse});
    }
  }
  manifest.add_output(csv_path);
  const std::string weights_path = out_path(args, "mpc_weights.json");
  save_weights(res.denoiser.params, weights_path);
  manifest.add_output(weights_path);
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, "final p_hat " + format_g10(res.p_hat) + " (true " + format_g10(mc.p_true) +
                "), rmse " + format_g10(res.history.front().rmse) + " -> " +
                format_g10(res.history.back().rmse));
  return 0;
}

int run_pgo_train(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  TrajectoryGenConfig gen;
  gen.num_nodes = static_cast<int>(cfg.integer("nodes", 14, 4, 10000));
  gen.trans_noise_std = cfg.num("trans_noise", gen.trans_noise_std, 0.0, 1.0);
  gen.rot_noise_std = cfg.num("rot_noise", gen.rot_noise_std, 0.0, 1.0);
  SlamTrainConfig sc;
  sc.iterations = static_cast<int>(cfg.integer("iterations", 50, 1, 100000));
  sc.lr = cfg.num("lr", sc.lr, 0.0, 10.0);
  SyntheticFrontEnd init;
  init.bias(0) = cfg.num("bias_x", 0.06, -10.0, 10.0);
  init.bias(1) = cfg.num("bias_y", -0.03, -10.0, 10.0);
  init.bias(2) = cfg.num("bias_theta", 0.015, -3.0, 3.0);
  init.scale = cfg.num("scale", 1.0, 0.05, 20.0);
  cfg.finish();

  CounterRng rng(seed, 7);
  PgoFixture fx = generate_trajectory(gen, rng);
  say(args, "training front-end on a " + std::to_string(gen.num_nodes) + "-node fixture");
  SlamTrainResult res = slam_train(fx, init, sc);

  RunManifest manifest("pgo-train", cfg.snapshot(), seed);
  const std::string csv_path = out_path(args, "pgo_metrics.csv");
  {
    CsvWriter csv(csv_path, {"iter", "ate_frontend", "ate_optimized"});
    for (const auto& r : res.history) csv.row_prefixed(r.iter, {r.ate_frontend, r.ate_optimized});
  }
  manifest.add_output(csv_path);
  const std::string graph_path = out_path(args, "pgo_final_graph.txt");
  save_graph(gauss_newton_solve(build_graph(fx, res.frontend), sc.gn).graph, graph_path);
  manifest.add_output(graph_path);
  const std::string weights_path = out_path(args, "pgo_weights.json");
  {
    ParameterStore store;
    store.add("frontend.bias",
              Tensor::from({3}, {res.frontend.bias(0), res.frontend.bias(1), res.frontend.bias(2)}));
    store.add("frontend.scale", Tensor::scalar(res.frontend.scale));
    save_weights(store, weights_path);
  }
  manifest.add_output(weights_path);
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, "front-end ate " + format_g10(res.history.front().ate_frontend) + " -> " +
                format_g10(res.history.back().ate_frontend));
  return 0;
}

int run_mtsp_train(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  MtspTrainConfig tc;
  tc.seed = seed;
  tc.iterations = static_cast<int>(cfg.integer("iterations", tc.iterations, 1, 1000000));
  tc.batch_instances = static_cast<int>(cfg.integer("batch", tc.batch_instances, 1, 4096));
  tc.samples = static_cast<int>(cfg.integer("samples", tc.samples, 1, 4096));
  tc.cities_min = static_cast<int>(cfg.integer("cities_min", tc.cities_min, 1, 1000));
  tc.cities_max = static_cast<int>(cfg.integer("cities_max", tc.cities_max, 1, 1000));
  tc.agents = static_cast<int>(cfg.integer("agents", tc.agents, 1, 64));
  tc.lr_theta = cfg.num("lr_theta", tc.lr_theta, 0.0, 1.0);
  tc.lr_gamma = cfg.num("lr_gamma", tc.lr_gamma, 0.0, 1.0);
  tc.entropy_weight = cfg.num("entropy", tc.entropy_weight, 0.0, 1.0);
  tc.use_surrogate = cfg.flag("use_surrogate", tc.use_surrogate);
  tc.eval_instances = static_cast<int>(cfg.integer("eval_instances", tc.eval_instances, 1, 4096));
  cfg.finish();
  if (tc.cities_min > tc.cities_max) throw ConfigError("cities_min exceeds cities_max");
  if (tc.cities_min < tc.agents) throw ConfigError("need at least as many cities as agents");

  say(args, "training allocation + surrogate for " + std::to_string(tc.iterations) +
                " iterations (" + std::to_string(tc.agents) + " agents)");
  MtspTrainResult res = mtsp_train(tc);

  RunManifest manifest("mtsp-train", cfg.snapshot(), seed);
  const std::string csv_path = out_path(args, "mtsp_metrics.csv");
  {
    CsvWriter csv(csv_path, {"iter", "mean_minmax", "log_grad_variance"});
    for (const auto& r : res.history) csv.row_prefixed(r.iter, {r.mean_minmax, r.log_grad_variance});
  }
  manifest.add_output(csv_path);
  const std::string weights_path = out_path(args, "mtsp_weights.json");
  {
    ParameterStore both;
    for (const auto& p : res.alloc.params) both.add(p.name, p.value, p.trainable);
    for (const auto& p : res.surrogate.params) both.add(p.name, p.value, p.trainable);
    save_weights(both, weights_path);
  }
  manifest.add_output(weights_path);
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, "held-out: trained mean max-route " + format_g10(res.eval_mean_minmax) +
                " vs angular-sector baseline " + format_g10(res.eval_baseline));
  return 0;
}

int run_mtsp_eval(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  const std::string weights = cfg.str("weights", "");
  const std::string instance_file = cfg.str("instance_file", "");
  const int agents = static_cast<int>(cfg.integer("agents", 5, 1, 64));
  const int draws = static_cast<int>(cfg.integer("draws", 16, 1, 4096));
  const int instances = static_cast<int>(cfg.integer("instances", 16, 1, 4096));
  const int cities_min = static_cast<int>(cfg.integer("cities_min", 20, 1, 1000));
  const int cities_max = static_cast<int>(cfg.integer("cities_max", 50, 1, 1000));
  cfg.finish();
  if (weights.empty()) throw ConfigError("mtsp-eval requires config key 'weights'");

  AllocationNet alloc = AllocationNet::make(agents, 64, seed);
  {
    // the combined weights file may carry surrogate entries as well
    ParameterStore probe;
    for (const auto& p : alloc.params) probe.add(p.name, p.value, p.trainable);
    load_weights(probe, weights);
    for (auto& p : alloc.params) p.value = probe.get(p.name).value;
  }

  std::vector<MtspInstance> insts;
  if (!instance_file.empty()) {
    insts.push_back(load_mtsp(instance_file));
  } else {
    CounterRng rng(seed, 404);
    for (int i = 0; i < instances; ++i) {
      const int n = cities_min + static_cast<int>(rng.uniform_int(cities_max - cities_min + 1));
      insts.push_back(generate_mtsp(n, agents, rng));
    }
  }

  RunManifest manifest("mtsp-eval", cfg.snapshot(), seed);
  const std::string csv_path = out_path(args, "mtsp_eval.csv");
  double mean_cost = 0, mean_base = 0;
  {
    CsvWriter csv(csv_path, {"instance_id", "minmax_cost", "baseline_cost"});
    CounterRng decode_rng(seed, 405);
    for (std::size_t i = 0; i < insts.size(); ++i) {
      const double c = sampled_allocation_cost(insts[i], alloc, draws, decode_rng);
      const double b = angular_sector_baseline(insts[i]);
      mean_cost += c;
      mean_base += b;
      csv.row_prefixed(static_cast<std::int64_t>(i), {c, b});
    }
  }
  manifest.add_output(csv_path);
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, "eval: mean max-route " + format_g10(mean_cost / insts.size()) + " vs baseline " +
                format_g10(mean_base / insts.size()));
  return 0;
}

int run_estimator_bench(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  const int iterations = static_cast<int>(cfg.integer("iterations", 60, 2, 100000));
  const int batches = static_cast<int>(cfg.integer("batches", 8, 2, 4096));
  const int samples = static_cast<int>(cfg.integer("samples", 16, 1, 100000));
  cfg.finish();

  // categorical toy with a correlated linear surrogate; the score-only and
  // control-variate estimators are tracked side by side
  Tensor logits = Tensor::from({4}, {0.1, -0.2, 0.4, 0.0});
  std::vector<double> costs = {2.0, -1.0, 3.5, 0.5};
  std::vector<double> surr = {1.9, -1.05, 3.4, 0.55};
  auto dist = CategoricalDistribution::from_logits(logits);

  Tape t;
  Var th = t.input(logits);
  Var probs = softmax(th);
  Tensor wt = Tensor::from({4}, {surr[0], surr[1], surr[2], surr[3]});
  Var sp = dot(probs, t.constant(wt));
  Tensor path = gradient_value(sp, th);

  CounterRng rng(seed, 5);
  VarianceTracker track_score, track_cv;
  for (int it = 0; it < iterations; ++it) {
    std::vector<Tensor> g_score, g_cv;
    for (int b = 0; b < batches; ++b) {
      GradientSampleBatch batch;
      for (int s = 0; s < samples; ++s) {
        const std::int64_t z = dist.sample_row(0, rng);
        const std::int32_t mark = t.size();
        Tensor mask = Tensor::zeros({4});
        mask[z] = 1.0;
        Var lp = sum(mul(log(probs), t.constant(mask)));
        Tensor glp = gradient_value(lp, th);
        t.rollback(mark);
        batch.costs.push_back(costs[static_cast<std::size_t>(z)]);
        batch.logprob_grads.push_back(std::move(glp));
        batch.surrogate_values.push_back(surr[static_cast<std::size_t>(z)]);
        batch.surrogate_pathwise.push_back(path);
      }
      g_score.push_back(score_function_grad(batch));
      g_cv.push_back(control_variate_grad(batch));
    }
    track_variance(track_score, g_score);
    track_variance(track_cv, g_cv);
  }

  RunManifest manifest("estimator-bench", cfg.snapshot(), seed);
  const std::string score_path = out_path(args, "variance_score.csv");
  const std::string cv_path = out_path(args, "variance_cv.csv");
  {
    CsvWriter cs(score_path, {"iteration", "mean_log_variance"});
    for (const auto& r : track_score.series()) cs.row_prefixed(r.iteration, {r.mean_log_variance});
    CsvWriter cc(cv_path, {"iteration", "mean_log_variance"});
    for (const auto& r : track_cv.series()) cc.row_prefixed(r.iteration, {r.mean_log_variance});
  }
  manifest.add_output(score_path);
  manifest.add_output(cv_path);
  manifest.write(out_path(args, "run_manifest.json"));
  const double ds = track_score.series().back().mean_log_variance;
  const double dc = track_cv.series().back().mean_log_variance;
  say(args, "final mean log variance: score " + format_g10(ds) + ", control variate " +
                format_g10(dc));
  return 0;
}

int run_generate(const CommonArgs& args) {
  Config cfg = load_config(args);
  const std::uint64_t seed = pick_seed(cfg, args);
  const std::string kind = cfg.str("kind", "");
  const int count = static_cast<int>(cfg.integer("count", 1, 1, 100000));

  RunManifest manifest("generate", cfg.snapshot(), seed);
  CounterRng rng(seed, 909);
  char name[64];

  if (kind == "maze") {
    MazeGenConfig mc;
    mc.height = static_cast<int>(cfg.integer("height", 16, 8, 1024));
    mc.width = static_cast<int>(cfg.integer("width", 16, 8, 1024));
    cfg.finish();
    for (int i = 0; i < count; ++i) {
      std::snprintf(name, sizeof(name), "maze_%03d.txt", i);
      const std::string p = out_path(args, name);
      save_map(generate_maze(mc, rng), p);
      manifest.add_output(p);
    }
  } else if (kind == "mtsp") {
    const int cities = static_cast<int>(cfg.integer("cities", 50, 1, 100000));
    const int agents = static_cast<int>(cfg.integer("agents", 5, 1, 1000));
    cfg.finish();
    if (cities < agents) throw ConfigError("mtsp generate: more agents than cities");
    for (int i = 0; i < count; ++i) {
      std::snprintf(name, sizeof(name), "mtsp_%03d.json", i);
      const std::string p = out_path(args, name);
      save_mtsp(generate_mtsp(cities, agents, rng), p);
      manifest.add_output(p);
    }
  } else if (kind == "pgo-trajectory") {
    TrajectoryGenConfig gc;
    gc.num_nodes = static_cast<int>(cfg.integer("nodes", 14, 4, 100000));
    cfg.finish();
    for (int i = 0; i < count; ++i) {
      std::snprintf(name, sizeof(name), "pgo_%03d.txt", i);
      const std::string p = out_path(args, name);
      PgoFixture fx = generate_trajectory(gc, rng);
      save_graph(build_graph(fx, SyntheticFrontEnd{}), p);
      manifest.add_output(p);
    }
  } else {
    throw ConfigError("generate: kind must be one of maze, mtsp, pgo-trajectory");
  }
  manifest.write(out_path(args, "run_manifest.json"));
  say(args, "generated " + std::to_string(count) + " " + kind + " artifact(s)");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bilevel optimization toolkit: experiment runner"};
  app.require_subcommand(1);

  CommonArgs args;
  const std::vector<std::pair<std::string, int (*)(const CommonArgs&)>> commands = {
      {"blo-selftest", run_blo_selftest}, {"astar-train", run_astar_train},
      {"astar-eval", run_astar_eval},     {"mpc-train", run_mpc_train},
      {"pgo-train", run_pgo_train},       {"mtsp-train", run_mtsp_train},
      {"mtsp-eval", run_mtsp_eval},       {"estimator-bench", run_estimator_bench},
      {"generate", run_generate},
  };

  int (*selected)(const CommonArgs&) = nullptr;
  for (const auto& [name, fn] : commands) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", args.config_path, "configuration file (structured text)");
    sub->add_option("--seed", args.seed_override, "seed override");
    sub->add_option("--out", args.out_dir, "output directory");
    sub->add_flag("--quiet", args.quiet, "suppress progress lines");
    auto fn_copy = fn;
    sub->callback([&selected, fn_copy]() { selected = fn_copy; });
  }

  CLI11_PARSE(app, argc, argv);
  try {
    return selected(args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
