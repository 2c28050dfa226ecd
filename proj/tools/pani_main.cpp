#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "pani/config.hpp"
#include "pani/errors.hpp"
#include "pani/experiment.hpp"
#include "pani/model.hpp"
#include "suites.hpp"

namespace {

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& out_dir, bool quiet) {
  pani::ExperimentConfig cfg = pani::parse_config(config_path, overrides);
  pani::ExperimentResult res =
      pani::run_experiment(cfg, out_dir, quiet ? nullptr : &std::cout);
  const pani::MetricsRecord& last = res.history.back();
  std::printf("done: %s seed=%llu epochs=%d final test_error=%.2f%%\n",
              pani::method_name(cfg.method),
              static_cast<unsigned long long>(cfg.seed), last.epoch,
              last.test_error);
  return 0;
}

int cmd_eval(const std::string& config_path,
             const std::vector<std::string>& overrides,
             const std::string& checkpoint_path) {
  pani::ExperimentConfig cfg = pani::parse_config(config_path, overrides);
  pani::Dataset data = pani::build_dataset(cfg);
  pani::SslSplit split = pani::split_for(cfg, data);
  pani::ModelConfig mcfg = pani::model_config_for(cfg, data);
  pani::ParamSet params = pani::load_checkpoint(checkpoint_path);
  double err = pani::evaluate_error(mcfg, params, data, split.test,
                                    cfg.optimizer.batch_size, cfg.threads);
  std::printf("test_error=%.2f%% over %zu images\n", err, split.test.size());
  return 0;
}

int cmd_selftest(std::uint64_t seed) {
  int failed = 0;
  for (const auto& suite : pani::oracles::all_suites()) {
    pani::oracles::SuiteResult r;
    try {
      r = suite.fn(seed);
    } catch (const std::exception& e) {
      r.name = suite.name;
      r.checks = 1;
      r.failures = 1;
      r.messages = {std::string("threw: ") + e.what()};
    }
    if (r.passed()) {
      std::printf("[PASS] %-16s %d checks\n", r.name.c_str(), r.checks);
    } else {
      ++failed;
      std::printf("[FAIL] %-16s %d checks, %d failed\n", r.name.c_str(),
                  r.checks, r.failures);
      for (const std::string& msg : r.messages)
        std::printf("       %s\n", msg.c_str());
    }
  }
  return failed == 0 ? 0 : 1;
}

int cmd_graph_dump(const std::string& config_path,
                   const std::vector<std::string>& overrides, int batch,
                   int tap, const std::string& out_path) {
  pani::ExperimentConfig cfg = pani::parse_config(config_path, overrides);
  std::string csv = pani::dump_neighbor_graph(cfg, batch, tap);
  if (out_path.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw pani::ConfigError("cannot open " + out_path);
    out << csv;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patch-level neighborhood interpolation trainer"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint_path, dump_path;
  std::vector<std::string> overrides;
  bool quiet = false;
  std::uint64_t selftest_seed = 1;
  int batch = 0, tap = 0;

  CLI::App* train = app.add_subcommand("train", "train a model per a config");
  train->add_option("--config", config_path, "JSON config file")->required();
  train->add_option("--set", overrides, "key=value config override");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--quiet", quiet, "suppress per-epoch progress");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "JSON config file")->required();
  eval->add_option("--set", overrides, "key=value config override");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required();

  CLI::App* selftest =
      app.add_subcommand("selftest", "run the oracle check suites");
  selftest->add_option("--seed", selftest_seed, "suite seed");

  CLI::App* dump = app.add_subcommand(
      "graph-dump", "CSV of the neighbor graph for one training batch");
  dump->add_option("--config", config_path, "JSON config file")->required();
  dump->add_option("--set", overrides, "key=value config override");
  dump->add_option("--batch", batch, "batch index within the first epoch");
  dump->add_option("--tap", tap, "position in the method's tap list");
  dump->add_option("--out", dump_path, "write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(config_path, overrides, out_dir, quiet);
    if (eval->parsed()) return cmd_eval(config_path, overrides, checkpoint_path);
    if (selftest->parsed()) return cmd_selftest(selftest_seed);
    if (dump->parsed())
      return cmd_graph_dump(config_path, overrides, batch, tap, dump_path);
  } catch (const pani::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const pani::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 2;
  } catch (const pani::NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
