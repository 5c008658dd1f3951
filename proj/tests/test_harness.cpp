#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "plab/config.hpp"
#include "plab/errors.hpp"
#include "plab/harness.hpp"

using namespace plab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json small_config() {
  return json::parse(R"({
    "kernel": {"name": "gaussian", "amplitude": 1.0, "width": 1.0},
    "potential": {"name": "quadratic", "stiffness": 1.0},
    "dimension": 1,
    "grid": {"half_width": 3.0, "points": 256},
    "thetas": [10],
    "sweep": {"N": [20, 40], "s": 0.75},
    "chain": {"seed": 7, "chains": 2, "burn_in": 50, "thinning": 1, "samples": 100},
    "analysis": {"x_star": [0.3], "windows": [1, 2], "y_points": [[0.0], [0.5]], "k_orders": [1, 2],
                 "log_bounds": [-3], "marginal_bins": 32},
    "verify": {"configurations": 10, "N": [3, 50], "thetas": [10]}
  })");
}

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const json& j) {
  try {
    parse_config(j.dump());
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name)
      : path_(fs::temp_directory_path() / ("plab-test-" + std::to_string(::getpid()) + "-" + name)) {
    fs::remove_all(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

RunOptions quiet(const fs::path& out, int threads = 1) {
  RunOptions o;
  o.out = out;
  o.threads = threads;
  o.verbose = false;
  return o;
}

}  // namespace

TEST(Config, ParsesAndFillsDefaults) {
  const auto c = parse_config(small_config().dump());
  EXPECT_EQ(c.kernel.name, "gaussian");
  EXPECT_EQ(c.points, 256);
  EXPECT_EQ(c.solver.tol, 1e-10);
  EXPECT_TRUE(c.sweep.in_regime());
  const auto pts = c.sweep.points();
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_DOUBLE_EQ(pts[0].beta, std::pow(20.0, -0.75));
  EXPECT_EQ(pts[0].theta, 20 * pts[0].beta);
}

TEST(Config, DefaultConfigInRepositoryLoads) {
  const auto c = load_config(fs::path(PLAB_SOURCE_DIR) / "configs/default.json");
  EXPECT_TRUE(c.sweep.in_regime());
  EXPECT_EQ(c.analysis.k_orders, (std::vector<int>{1, 3}));
}

TEST(Config, MissingKernelNamesTheField) {
  auto j = small_config();
  j.erase("kernel");
  EXPECT_EQ(config_error(j), "kernel: missing required field");
}

TEST(Config, TypeErrorsCarryTheFieldPath) {
  auto j = small_config();
  j["chain"]["burn_in"] = "many";
  EXPECT_EQ(config_error(j), "chain.burn_in: expected an integer");
  j = small_config();
  j["analysis"]["y_points"][1] = json::array({0.1, 0.2});
  EXPECT_EQ(config_error(j), "analysis.y_points[1]: expected 1 coordinates");
  j = small_config();
  j["kernel"]["widht"] = 2.0;
  EXPECT_EQ(config_error(j), "kernel.widht: unknown field");
  j = small_config();
  j["grid"]["points"] = 255;
  EXPECT_NE(config_error(j).find("grid.points"), std::string::npos);
}

TEST(Config, ThetaMustEqualNBeta) {
  auto j = small_config();
  j["sweep"]["theta"] = json::array({20 * std::pow(20.0, -0.75), 5.0});
  EXPECT_NE(config_error(j).find("sweep.theta[1]"), std::string::npos);
  j["sweep"]["theta"][1] = 40 * std::pow(40.0, -0.75);
  EXPECT_EQ(config_error(j), "");
}

TEST(Config, OutOfRegimeLoadsWithFlagFalse) {
  auto j = small_config();
  j["sweep"]["s"] = 0.3;
  const auto c = parse_config(j.dump());
  EXPECT_FALSE(c.sweep.in_regime());
  ScratchDir dir("regime");
  EXPECT_THROW(run_command("sample", c, quiet(dir.path())), ConfigError);
  j["sweep"]["allow_out_of_regime"] = true;
  j["sweep"]["N"] = json::array({10});
  EXPECT_EQ(run_command("sample", parse_config(j.dump()), quiet(dir.path())).exit_code(), 0);
}

TEST(Config, CanonicalFormRoundTripsAndKeysTheHash) {
  const auto c = parse_config(small_config().dump());
  const auto again = parse_config(to_canonical_json(c));
  EXPECT_EQ(to_canonical_json(again), to_canonical_json(c));
  EXPECT_EQ(config_hash(again), config_hash(c));
  auto j = small_config();
  j["chain"]["seed"] = 8;
  EXPECT_NE(config_hash(parse_config(j.dump())), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 64u);
}

TEST(Sha256, KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Harness, VerifyIdentitiesPasses) {
  ScratchDir dir("verify");
  const auto r = run_command("verify-identities", parse_config(small_config().dump()), quiet(dir.path()));
  EXPECT_EQ(r.exit_code(), 0);
  const auto rep = json::parse(read(dir.path() / "reports/identities.json"));
  for (const auto& row : rep["thermal"][0]["splitting"]) EXPECT_LE(row["max_relative_gap"].get<double>(), 1e-6);
  EXPECT_EQ(rep["config_hash"], config_hash(parse_config(small_config().dump())));
  EXPECT_EQ(rep["code_version"], code_version());
}

TEST(Harness, ReportsFailuresMachineReadably) {
  auto j = small_config();
  j["verify"]["tolerance"] = 1e-30;  // unattainable on purpose
  ScratchDir dir("failing");
  const auto r = run_command("verify-identities", parse_config(j.dump()), quiet(dir.path()));
  EXPECT_EQ(r.exit_code(), 1);
  const auto f = json::parse(read(dir.path() / "failures.json"));
  ASSERT_FALSE(f["failures"].empty());
  EXPECT_EQ(f["failures"][0]["check"], "splitting_identity");
}

TEST(Harness, AnalyzeWithoutSamplesIsAnIoError) {
  ScratchDir dir("nosamples");
  EXPECT_THROW(run_command("analyze", parse_config(small_config().dump()), quiet(dir.path())), IoError);
}

TEST(Harness, SweepIsDeterministicAcrossThreadCounts) {
  ScratchDir a("t1"), b("t3");
  const auto c = parse_config(small_config().dump());
  const auto ra = run_command("sweep", c, quiet(a.path(), 1));
  const auto rb = run_command("sweep", c, quiet(b.path(), 3));
  ASSERT_EQ(ra.artifacts, rb.artifacts);
  for (const auto& p : ra.artifacts) EXPECT_EQ(read(a.path() / p), read(b.path() / p)) << p;
  // Every report embeds the config hash.
  const auto csv = read(a.path() / "reports/tests.csv");
  EXPECT_EQ(csv.rfind("# config_hash=" + config_hash(c), 0), 0u);
}

TEST(Harness, SeedOverrideIsRecordedAndChangesSamples) {
  ScratchDir a("seed7"), b("seed8");
  const auto c = parse_config(small_config().dump());
  run_command("sample", c, quiet(a.path()));
  auto o = quiet(b.path());
  o.seed = 8;
  run_command("sample", c, o);
  EXPECT_NE(read(a.path() / "samples/N20.bin"), read(b.path() / "samples/N20.bin"));
  EXPECT_EQ(load_config(b.path() / "config.json").chain.seed, 8u);
}

TEST(Harness, StaleOutputDirectoryIsRejected) {
  ScratchDir dir("stale");
  run_command("sample", parse_config(small_config().dump()), quiet(dir.path()));
  auto j = small_config();
  j["chain"]["samples"] = 120;
  EXPECT_THROW(run_command("analyze", parse_config(j.dump()), quiet(dir.path())), StalenessError);
}

TEST(Reproduce, ImmediatelyAfterRunSucceeds) {
  ScratchDir dir("repro");
  run_command("sweep", parse_config(small_config().dump()), quiet(dir.path()));
  EXPECT_NO_THROW(reproduce(dir.path(), 1, false));
}

TEST(Reproduce, EditedSeedIsAMismatch) {
  ScratchDir dir("repro-seed");
  run_command("sample", parse_config(small_config().dump()), quiet(dir.path()));
  auto j = json::parse(read(dir.path() / "config.json"));
  j["chain"]["seed"] = 99;
  std::ofstream(dir.path() / "config.json") << j.dump(2);
  try {
    reproduce(dir.path(), 1, false);
    FAIL() << "expected a reproducibility failure";
  } catch (const ReproducibilityError& e) {
    EXPECT_NE(std::string(e.what()).find("samples/"), std::string::npos) << e.what();
  }
}

TEST(Reproduce, DeletedArtifactIsReported) {
  ScratchDir dir("repro-missing");
  run_command("sample", parse_config(small_config().dump()), quiet(dir.path()));
  fs::remove(dir.path() / "samples/N40.bin");
  try {
    reproduce(dir.path(), 1, false);
    FAIL() << "expected a missing-artifact error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("samples/N40.bin"), std::string::npos);
  }
}
