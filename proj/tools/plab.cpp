// plab <subcommand> --config <path> [--out <dir>] [--seed <u64>] [--threads <n>]

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "plab/errors.hpp"
#include "plab/harness.hpp"

namespace {

// Exit codes: 0 all verifications passed, 1 some failed (see failures.json),
// 2 bad config or usage, 3 stale output directory, 4 reproduce mismatch or
// missing artifact, 5 any other error.
int report(const plab::RunResult& r) {
  for (const auto& f : r.failures) std::cerr << "FAIL " << f.check << ": " << f.detail << "\n";
  std::cerr << (r.failures.empty() ? "all verifications passed" : std::to_string(r.failures.size()) + " failure(s)")
            << "; " << r.artifacts.size() << " artifacts recorded\n";
  return r.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-field particle laboratory: thermal solver, Gibbs sampler and local statistics"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool quiet = false;

  for (const auto& name : plab::subcommands()) {
    auto* sub = app.add_subcommand(name, name == "run" ? "alias of all" : "");
    sub->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory (default: the config's output)");
    sub->add_option("--seed", seed, "override chain.seed");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", quiet, "no progress lines");
  }
  auto* repro = app.add_subcommand("reproduce", "re-run a finished output directory and byte-compare artifacts");
  repro->add_option("--out", out_dir, "output directory to check");
  repro->add_option("--config", config_path, "config whose output directory to check (when --out is absent)")
      ->check(CLI::ExistingFile);
  repro->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  repro->add_flag("--quiet", quiet, "no progress lines");

  CLI11_PARSE(app, argc, argv);

  try {
    if (repro->parsed()) {
      if (out_dir.empty()) {
        if (config_path.empty()) throw plab::ConfigError("reproduce needs --out or --config");
        out_dir = plab::load_config(config_path).output;
      }
      plab::reproduce(out_dir, threads, !quiet);
      std::cerr << "reproduce: all artifacts byte-identical\n";
      return 0;
    }
    const std::string name = app.get_subcommands().front()->get_name();
    plab::RunOptions options;
    options.out = out_dir;
    options.seed = seed;
    options.threads = threads;
    options.verbose = !quiet;
    return report(plab::run_command(name, plab::load_config(config_path), options));
  } catch (const plab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const plab::StalenessError& e) {
    std::cerr << "stale output: " << e.what() << "\n";
    return 3;
  } catch (const plab::ReproducibilityError& e) {
    std::cerr << "reproducibility failure: " << e.what() << "\n";
    return 4;
  } catch (const plab::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  }
}
