#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pani/data.hpp"
#include "pani/mixup.hpp"
#include "pani/vat.hpp"

namespace pani {

enum class Method { kErm, kMixup, kPaniMixup, kVat, kPaniVat };

const char* method_name(Method m);

struct OptimizerConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 10;
  int batch_size = 32;
  int lr_decay_epoch = -1;  // -1: epochs / 2
  double lr_decay_factor = 0.1;
};

struct DatasetConfig {
  enum class Kind { kSynthetic, kIdx };
  Kind kind = Kind::kSynthetic;
  SyntheticSpec synthetic;
  std::string images_path;
  std::string labels_path;
};

struct SplitConfig {
  long labeled = 0;
  long test = 0;
};

struct ExperimentConfig {
  Method method = Method::kErm;
  std::uint64_t seed = 1;
  int threads = 1;
  bool record_timing = false;
  std::string variant;  // resolved per method; see parse_config
  DatasetConfig dataset;
  SplitConfig split;
  OptimizerConfig optimizer;
  VatConfig vat;
  MixConfig mixup;
};

// Parses a JSON config file plus "key=value" overrides (dotted paths reach
// into nested objects; values parse as JSON where possible). Unknown keys,
// type mismatches and out-of-range values throw ConfigError naming the key
// and, for unknown keys, listing the valid ones. An empty file is treated as
// an empty object. Method/variant defaults are applied before overrides are
// validated, so an override can switch methods and still pick up the right
// defaults.
ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides);

// Same, from in-memory JSON text (used by tests).
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides);

// Structural checks that need the fully resolved config: patch sizes divide
// the tap extents, batch_size > k1 for graph methods, k2 within the
// candidate pool, and so on. parse_config calls this; run_experiment calls
// it again to guard programmatic configs.
void validate_config(const ExperimentConfig& cfg);

}  // namespace pani
