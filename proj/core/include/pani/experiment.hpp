#pragma once

#include <string>
#include <vector>

#include "pani/config.hpp"
#include "pani/data.hpp"
#include "pani/model.hpp"

namespace pani {

struct MetricsRecord {
  int epoch = 0;
  double train_loss = 0.0;   // mean supervised loss over the epoch's steps
  double reg_loss = 0.0;     // mean regularizer contribution
  double test_error = 0.0;   // percent, in [0, 100]
  double wall_seconds = 0.0;
};

// CSV layout: "epoch,train_loss,reg_loss,test_error,seconds". The seconds
// column is written as 0.000 unless record_timing is set: a measured wall
// clock would break the byte-identical-output determinism contract, so
// timing is opt-in and the measured value always goes to the progress log
// instead.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& rec, bool record_timing);

Dataset build_dataset(const ExperimentConfig& cfg);
ModelConfig model_config_for(const ExperimentConfig& cfg, const Dataset& data);

// The exact split a run with this config uses. split.labeled == 0 marks
// everything outside the test set as labeled with no unlabeled pool.
SslSplit split_for(const ExperimentConfig& cfg, const Dataset& data);

// Error percent of argmax predictions (ties toward the lower class index)
// over the given indices, evaluated in batches.
double evaluate_error(const ModelConfig& mcfg, const ParamSet& params,
                      const Dataset& data, const std::vector<long>& idx,
                      int batch_size, int threads);

struct ExperimentResult {
  std::vector<MetricsRecord> history;
  ParamSet params;
};

// Full training loop. When out_dir is non-empty, writes metrics.csv
// incrementally and checkpoint.bin at the end. Identical (config, seed)
// produce bit-identical metrics for any thread count. With beta == 0 or an
// empty layer list the VAT-family regularizer is inert and the loop is the
// supervised-only loop, so those configs reproduce ERM exactly.
ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::string& out_dir,
                                std::ostream* progress = nullptr);

// Neighbor-graph CSV for one training batch of epoch 0 at the given tap
// position (its index in the method's tap list), exactly as training would
// build it. Methods without a graph throw ConfigError.
std::string dump_neighbor_graph(const ExperimentConfig& cfg, int batch_index,
                                int tap_position);

}  // namespace pani
