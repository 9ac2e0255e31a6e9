#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "blopt/astar.hpp"
#include "blopt/mtsp.hpp"
#include "blopt/runio.hpp"

namespace fs = std::filesystem;
using namespace blopt;

namespace {

int run_cli(const std::string& cli_args) {
  const std::string cmd = std::string(BLOPT_CLI_PATH) + " " + cli_args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation") {
  Config c = Config::from_json({{"horizon", 5}, {"lr", 0.5}});
  CHECK(c.integer("horizon", 1, 1, 100) == 5);
  CHECK(c.num("lr", 0.1, 0.0, 1.0) == 0.5);
  CHECK_NOTHROW(c.finish());

  Config neg = Config::from_json({{"horizon", -3}});
  CHECK_THROWS_AS(neg.integer("horizon", 1, 1, 100), ConfigError);

  Config unknown = Config::from_json({{"horizn", 5}});
  unknown.integer("horizon", 1, 1, 100);
  try {
    unknown.finish();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("horizn") != std::string::npos);
  }
}

TEST_CASE("csv formatting is stable") {
  TempDir dir("blopt_csv_test");
  const std::string p = (dir.path / "x.csv").string();
  {
    CsvWriter w(p, {"a", "b"});
    w.row({1.0, 0.333333333333333});
    w.row_prefixed(7, {2.5});
  }
  CHECK(slurp(p) == "a,b\n1,0.3333333333\n7,2.5\n");
}

TEST_CASE("malformed config exits with code 2 naming the key") {
  TempDir dir("blopt_cli_cfg");
  const fs::path cfg = dir.path / "bad.json";
  std::ofstream(cfg) << "{\"horizon\": -4}";
  const int rc = run_cli("mpc-train --config " + cfg.string() + " --out " +
                         (dir.path / "out").string());
  CHECK(rc == 2);

  const fs::path unk = dir.path / "unk.json";
  std::ofstream(unk) << "{\"not_a_key\": 1}";
  CHECK(run_cli("mpc-train --config " + unk.string() + " --out " +
                (dir.path / "out2").string()) == 2);
}

TEST_CASE("generate produces deterministic solvable artifacts with a manifest") {
  TempDir dir("blopt_cli_gen");
  const fs::path cfg = dir.path / "gen.json";
  std::ofstream(cfg) << "{\"kind\": \"maze\", \"count\": 3, \"height\": 16, \"width\": 16}";

  const std::string out1 = (dir.path / "a").string();
  const std::string out2 = (dir.path / "b").string();
  REQUIRE(run_cli("generate --config " + cfg.string() + " --seed 11 --out " + out1) == 0);
  REQUIRE(run_cli("generate --config " + cfg.string() + " --seed 11 --out " + out2) == 0);

  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "maze_%03d.txt", i);
    const std::string m1 = slurp(fs::path(out1) / name);
    const std::string m2 = slurp(fs::path(out2) / name);
    CHECK(m1 == m2);  // byte-identical under the same seed
    GridPlanInstance g = parse_map(m1);
    auto res = astar_classic(g, zero_heuristic(g));
    CHECK(res.found);  // solvable, exactly one S and one G by parse rules
  }

  // manifest lists every artifact with its content hash
  const std::string manifest = slurp(fs::path(out1) / "run_manifest.json");
  CHECK(manifest.find("maze_000.txt") != std::string::npos);
  CHECK(manifest.find("fnv1a64") != std::string::npos);

  // different seeds give different mazes
  const std::string out3 = (dir.path / "c").string();
  REQUIRE(run_cli("generate --config " + cfg.string() + " --seed 12 --out " + out3) == 0);
  CHECK(slurp(fs::path(out1) / "maze_000.txt") != slurp(fs::path(out3) / "maze_000.txt"));
}

TEST_CASE("mtsp generation bounds") {
  TempDir dir("blopt_cli_mtsp");
  const fs::path cfg = dir.path / "gen.json";
  std::ofstream(cfg) << "{\"kind\": \"mtsp\", \"cities\": 3, \"agents\": 5}";
  CHECK(run_cli("generate --config " + cfg.string() + " --out " + (dir.path / "o").string()) == 2);

  const fs::path ok = dir.path / "ok.json";
  std::ofstream(ok) << "{\"kind\": \"mtsp\", \"cities\": 12, \"agents\": 3}";
  REQUIRE(run_cli("generate --config " + ok.string() + " --seed 3 --out " +
                  (dir.path / "o2").string()) == 0);
  MtspInstance inst = load_mtsp((dir.path / "o2" / "mtsp_000.json").string());
  CHECK(inst.cities.size() == 12);
  for (const auto& c : inst.cities) {
    CHECK(c.x >= 0.0);
    CHECK(c.x <= 1.0);
    CHECK(c.y >= 0.0);
    CHECK(c.y <= 1.0);
  }
}

TEST_CASE("blo-selftest run emits a report and exits zero") {
  TempDir dir("blopt_cli_selftest");
  const std::string out = (dir.path / "out").string();
  REQUIRE(run_cli("blo-selftest --seed 5 --out " + out) == 0);
  const std::string csv = slurp(fs::path(out) / "selftest.csv");
  CHECK(csv.find("name,rel_error,cg_iterations,tolerance,pass") == 0);
  CHECK(csv.find("quadratic/implicit") != std::string::npos);
  CHECK(csv.find("constrained/equality") != std::string::npos);
  CHECK(csv.find(",0\n") == std::string::npos);  // no failing rows
}

TEST_CASE("estimator bench produces the paired variance series") {
  TempDir dir("blopt_cli_bench");
  const fs::path cfg = dir.path / "bench.json";
  std::ofstream(cfg) << "{\"iterations\": 6, \"batches\": 4, \"samples\": 8}";
  const std::string out = (dir.path / "out").string();
  REQUIRE(run_cli("estimator-bench --config " + cfg.string() + " --seed 2 --out " + out) == 0);
  const std::string score = slurp(fs::path(out) / "variance_score.csv");
  const std::string cv = slurp(fs::path(out) / "variance_cv.csv");
  CHECK(score.find("iteration,mean_log_variance") == 0);
  CHECK(cv.find("iteration,mean_log_variance") == 0);
  CHECK(std::count(score.begin(), score.end(), '\n') == 7);  // header + 6 rows
}

TEST_CASE("pgo-train run is reproducible byte for byte") {
  TempDir dir("blopt_cli_pgo");
  const fs::path cfg = dir.path / "pgo.json";
  std::ofstream(cfg) << "{\"iterations\": 6, \"nodes\": 10}";
  const std::string out1 = (dir.path / "r1").string();
  const std::string out2 = (dir.path / "r2").string();
  REQUIRE(run_cli("pgo-train --config " + cfg.string() + " --seed 9 --out " + out1) == 0);
  REQUIRE(run_cli("pgo-train --config " + cfg.string() + " --seed 9 --out " + out2) == 0);
  CHECK(slurp(fs::path(out1) / "pgo_metrics.csv") == slurp(fs::path(out2) / "pgo_metrics.csv"));
  CHECK(slurp(fs::path(out1) / "pgo_weights.json") ==
        slurp(fs::path(out2) / "pgo_weights.json"));
  CHECK(slurp(fs::path(out1) / "pgo_metrics.csv").find("iter,ate_frontend,ate_optimized") == 0);
}

TEST_CASE("mpc-train emits the documented csv columns") {
  TempDir dir("blopt_cli_mpc");
  const fs::path cfg = dir.path / "mpc.json";
  std::ofstream(cfg) << "{\"episodes\": 2, \"steps\": 30}";
  const std::string out = (dir.path / "out").string();
  REQUIRE(run_cli("mpc-train --config " + cfg.string() + " --seed 4 --out " + out) == 0);
  const std::string csv = slurp(fs::path(out) / "mpc_metrics.csv");
  CHECK(csv.find("episode,ul_loss,p_hat,rmse,st,sse") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("astar-eval emits a csv row for a fixture map") {
  TempDir dir("blopt_cli_astar");
  // tiny training run to produce a weights file
  const fs::path tcfg = dir.path / "train.json";
  std::ofstream(tcfg) << "{\"epochs\": 1, \"train_maps\": 6, \"eval_maps\": 2, "
                         "\"height\": 16, \"width\": 16}";
  const std::string tout = (dir.path / "train_out").string();
  REQUIRE(run_cli("astar-train --config " + tcfg.string() + " --seed 3 --out " + tout) == 0);

  // fixture map on disk
  const fs::path map = dir.path / "fixture_map.txt";
  {
    CounterRng rng(77);
    MazeGenConfig mc;
    mc.height = 16;
    mc.width = 16;
    save_map(generate_maze(mc, rng), map.string());
  }
  const fs::path ecfg = dir.path / "eval.json";
  std::ofstream(ecfg) << "{\"weights\": \"" + (fs::path(tout) / "astar_weights.json").string() +
                             "\", \"map_file\": \"" + map.string() + "\"}";
  const std::string eout = (dir.path / "eval_out").string();
  REQUIRE(run_cli("astar-eval --config " + ecfg.string() + " --out " + eout) == 0);
  const std::string csv = slurp(fs::path(eout) / "astar_metrics.csv");
  CHECK(csv.find("map_id,exp_pct,rt_pct,cost_ratio") == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);  // header + one map row
}

TEST_CASE("unknown subcommand is rejected by the parser") {
  CHECK(run_cli("no-such-command") != 0);
}
