#include "pani/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pani/errors.hpp"
#include "pani/interpolation.hpp"
#include "pani/mixup.hpp"
#include "pani/vat.hpp"

namespace pani {

namespace {

struct StepStats {
  double supervised = 0.0;
  double regularizer = 0.0;
};

class Trainer {
 public:
  explicit Trainer(const ExperimentConfig& cfg)
      : cfg_(cfg),
        data_(build_dataset(cfg)),
        mcfg_(model_config_for(cfg, data_)),
        opt_(cfg.optimizer.momentum, cfg.optimizer.weight_decay),
        epoch_rng_(RngStream::derive(cfg.seed, "epoch-shuffle")),
        labeled_rng_(RngStream::derive(cfg.seed, "labeled-shuffle")),
        power_rng_(RngStream::derive(cfg.seed, "power-init")),
        peer_rng_(RngStream::derive(cfg.seed, "peer-filter")),
        partner_rng_(RngStream::derive(cfg.seed, "mix-partner")),
        mix_rng_{RngStream::derive(cfg.seed, "mix-lambda"),
                 RngStream::derive(cfg.seed, "mix-eta"),
                 RngStream::derive(cfg.seed, "mix-mask")} {
    validate_config(cfg_);
    check_runtime();
    split_ = split_for(cfg_, data_);

    RngStream param_rng = RngStream::derive(cfg_.seed, "params-init");
    params_ = init_params(mcfg_, param_rng);

    regularized_ =
        (cfg_.method == Method::kVat && cfg_.vat.beta > 0.0) ||
        (cfg_.method == Method::kPaniVat && cfg_.vat.beta > 0.0 &&
         !cfg_.vat.layers.empty());
    if (regularized_ && split_.unlabeled.empty()) {
      throw ConfigError(
          "config: split: a consistency-regularized run needs an unlabeled "
          "pool; set split.labeled below the non-test sample count");
    }
    driver_ = regularized_ ? split_.unlabeled : split_.labeled;
    const long bs = cfg_.optimizer.batch_size;
    if (static_cast<long>(driver_.size()) < bs) {
      throw ConfigError("config: optimizer.batch_size: the " +
                        std::string(regularized_ ? "unlabeled" : "labeled") +
                        " pool has " + std::to_string(driver_.size()) +
                        " samples, fewer than one batch of " + std::to_string(bs));
    }
    labeled_pool_ = split_.labeled;
    cursor_ = labeled_pool_.size();
  }

  ExperimentResult run(const std::string& out_dir, std::ostream* progress) {
    std::ofstream csv;
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      csv.open(out_dir + "/metrics.csv", std::ios::trunc);
      if (!csv) throw ConfigError("config: cannot write " + out_dir + "/metrics.csv");
      csv << metrics_csv_header() << '\n' << std::flush;
    }

    const long steps = steps_per_epoch();
    ExperimentResult result;
    for (int epoch = 1; epoch <= cfg_.optimizer.epochs; ++epoch) {
      auto t0 = std::chrono::steady_clock::now();
      shuffle_indices(driver_, epoch_rng_);
      const double lr = lr_for_epoch(epoch);
      double sup = 0.0;
      double reg = 0.0;
      for (long s = 0; s < steps; ++s) {
        StepStats st = train_step(epoch, s, lr);
        sup += st.supervised;
        reg += st.regularizer;
      }

      MetricsRecord rec;
      rec.epoch = epoch;
      rec.train_loss = sup / static_cast<double>(steps);
      rec.reg_loss = reg / static_cast<double>(steps);
      rec.test_error = evaluate_error(mcfg_, params_, data_, split_.test,
                                      cfg_.optimizer.batch_size, cfg_.threads);
      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      result.history.push_back(rec);
      if (csv.is_open()) {
        csv << metrics_csv_row(rec, cfg_.record_timing) << '\n' << std::flush;
      }
      if (progress) {
        char line[256];
        std::snprintf(line, sizeof line,
                      "%s seed=%llu epoch %d/%d train_loss=%.6f reg_loss=%.6f "
                      "test_error=%.2f%% (%.2fs)",
                      method_name(cfg_.method),
                      static_cast<unsigned long long>(cfg_.seed), epoch,
                      cfg_.optimizer.epochs, rec.train_loss, rec.reg_loss,
                      rec.test_error, rec.wall_seconds);
        *progress << line << std::endl;
      }
    }
    if (!out_dir.empty()) save_checkpoint(out_dir + "/checkpoint.bin", params_);
    result.params = params_;
    return result;
  }

  std::string dump(int batch_index, int tap_position) {
    const bool graphy =
        cfg_.method == Method::kPaniMixup ||
        (cfg_.method == Method::kPaniVat && regularized_);
    if (!graphy) {
      throw ConfigError(std::string("config: method: ") +
                        method_name(cfg_.method) +
                        " builds no patch neighbor graphs");
    }
    const long steps = steps_per_epoch();
    if (batch_index < 0 || batch_index >= steps) {
      throw ConfigError("config: batch " + std::to_string(batch_index) +
                        " out of range; the first epoch has " +
                        std::to_string(steps) + " batches");
    }

    // Replay the first epoch up to the requested batch so the graph reflects
    // the parameters and stream positions training would actually see.
    shuffle_indices(driver_, epoch_rng_);
    const double lr = lr_for_epoch(1);
    for (long s = 0; s < batch_index; ++s) train_step(1, s, lr);

    const long bs = cfg_.optimizer.batch_size;
    const long lo = static_cast<long>(batch_index) * bs;
    std::ostringstream out;
    if (cfg_.method == Method::kPaniVat) {
      if (tap_position < 0 ||
          tap_position >= static_cast<int>(cfg_.vat.layers.size())) {
        throw ConfigError("config: tap position " + std::to_string(tap_position) +
                          " out of range; the method perturbs " +
                          std::to_string(cfg_.vat.layers.size()) + " taps");
      }
      std::vector<long> batch = take_cycled(bs);
      for (long t = lo; t < lo + bs; ++t) {
        batch.push_back(driver_[static_cast<size_t>(t)]);
      }
      Tensor combined = gather_images(data_, batch, 0, static_cast<long>(batch.size()));
      VatGraphs ctx = build_vat_graphs(mcfg_, params_, combined, cfg_.vat, cfg_.threads);
      write_neighbor_csv(*ctx.graphs[static_cast<size_t>(tap_position)], out);
    } else {
      if (tap_position != 0) {
        throw ConfigError(
            "config: tap position " + std::to_string(tap_position) +
            " out of range; pani_mixup only builds a graph over the raw input");
      }
      Tensor x = gather_images(data_, driver_, lo, lo + bs);
      PeerSet peers = filter_peers_random(bs, cfg_.mixup.k1, peer_rng_);
      PatchSet patches = extract_patches(x, cfg_.mixup.patch_size);
      NeighborIndex g = knn_patches(patches, peers, cfg_.mixup.k, cfg_.threads);
      write_neighbor_csv(g, out);
    }
    return out.str();
  }

 private:
  long steps_per_epoch() const {
    return static_cast<long>(driver_.size()) / cfg_.optimizer.batch_size;
  }

  double lr_for_epoch(int epoch) const {
    const int decay = cfg_.optimizer.lr_decay_epoch < 0
                          ? cfg_.optimizer.epochs / 2
                          : cfg_.optimizer.lr_decay_epoch;
    double lr = cfg_.optimizer.lr;
    if (decay >= 1 && epoch > decay) lr *= cfg_.optimizer.lr_decay_factor;
    return lr;
  }

  // Patch-compatibility checks that need the real feature-map extents, which
  // for idx datasets are only known after the file is read.
  void check_runtime() const {
    if (data_.size() < 1) throw ConfigError("config: dataset: no samples");
    if (data_.num_classes < 2) {
      throw ConfigError("config: dataset: needs at least two classes, got " +
                        std::to_string(data_.num_classes));
    }
    if (cfg_.split.labeled + cfg_.split.test > data_.size()) {
      throw ConfigError("config: split: labeled + test exceeds the " +
                        std::to_string(data_.size()) + " samples");
    }
    auto check_patch = [&](long patch, int tap) {
      std::vector<long> ts = tap_shape(mcfg_, tap);
      if (ts[1] % patch != 0 || ts[2] % patch != 0) {
        throw ConfigError("config: patch_size: " + std::to_string(patch) +
                          " does not divide the " + std::to_string(ts[1]) + "x" +
                          std::to_string(ts[2]) + " map at tap " +
                          std::to_string(tap));
      }
      return (ts[1] / patch) * (ts[2] / patch);
    };
    if (cfg_.method == Method::kPaniMixup) {
      long P = check_patch(cfg_.mixup.patch_size, 0);
      if (cfg_.mixup.k > cfg_.mixup.k1 * P) {
        throw ConfigError("config: k: exceeds the k1 * P candidate pool of " +
                          std::to_string(cfg_.mixup.k1 * P));
      }
    }
    if (cfg_.method == Method::kPaniVat) {
      for (const VatLayerConfig& layer : cfg_.vat.layers) {
        long P = check_patch(layer.patch_size, layer.tap);
        if (layer.k2 > cfg_.vat.k1 * P) {
          throw ConfigError("config: k2: exceeds the k1 * P candidate pool of " +
                            std::to_string(cfg_.vat.k1 * P) + " at tap " +
                            std::to_string(layer.tap));
        }
      }
    }
  }

  // The next batch_size labeled indices, reshuffling whenever the pool wraps.
  std::vector<long> take_cycled(long n) {
    std::vector<long> out;
    out.reserve(static_cast<size_t>(n));
    for (long t = 0; t < n; ++t) {
      if (cursor_ == labeled_pool_.size()) {
        shuffle_indices(labeled_pool_, labeled_rng_);
        cursor_ = 0;
      }
      out.push_back(labeled_pool_[cursor_++]);
    }
    return out;
  }

  double supervised_update(const Tensor& x, const Tensor& y, double lr) {
    Tape tape(cfg_.threads);
    std::vector<NodeId> ids = stage_params(tape, params_, true);
    ForwardResult fwd = forward_with_taps(tape, mcfg_, ids, tape.constant(x), {});
    NodeId ce = tape.soft_cross_entropy(fwd.logits, y);
    Gradients grads = tape.backward(ce);
    opt_.step(params_, collect_param_grads(tape, grads, ids, params_), lr);
    return tape.value(ce).data[0];
  }

  StepStats train_step(int epoch, long step, double lr) {
    const long bs = cfg_.optimizer.batch_size;
    const long lo = step * bs;
    StepStats out;
    try {
      if (regularized_) {
        std::vector<long> lbatch = take_cycled(bs);
        Tensor lx = gather_images(data_, lbatch, 0, bs);
        Tensor ly = gather_onehot(data_, lbatch, 0, bs);
        Tensor ux = gather_images(data_, driver_, lo, lo + bs);
        VatLossResult res =
            cfg_.method == Method::kPaniVat
                ? pani_vat_loss(mcfg_, params_, lx, ly, ux, cfg_.vat,
                                power_rng_, cfg_.threads)
                : vanilla_vat_loss(mcfg_, params_, lx, ly, ux, cfg_.vat,
                                   power_rng_, cfg_.threads);
        opt_.step(params_, res.param_grads, lr);
        out.supervised = res.supervised;
        out.regularizer = res.regularizer;
        return out;
      }

      Tensor x = gather_images(data_, driver_, lo, lo + bs);
      Tensor y = gather_onehot(data_, driver_, lo, lo + bs);
      switch (cfg_.method) {
        case Method::kMixup: {
          MixedBatch mb =
              vanilla_mixup(x, y, cfg_.mixup.a, partner_rng_, mix_rng_.lambda);
          out.supervised = supervised_update(mb.inputs, mb.targets, lr);
          break;
        }
        case Method::kPaniMixup: {
          PeerSet peers = filter_peers_random(bs, cfg_.mixup.k1, peer_rng_);
          PatchSet patches = extract_patches(x, cfg_.mixup.patch_size);
          MixPlan plan =
              build_mix_plan(patches, peers, cfg_.mixup, mix_rng_, cfg_.threads);
          MixedBatch mb = apply_mix(x, y, plan, cfg_.mixup.patch_size);
          out.supervised = supervised_update(mb.inputs, mb.targets, lr);
          break;
        }
        default:
          // erm, and the vat family with an inert regularizer
          out.supervised = supervised_update(x, y, lr);
          break;
      }
      return out;
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (epoch " +
                         std::to_string(epoch) + ", step " +
                         std::to_string(step) + ")");
    }
  }

  ExperimentConfig cfg_;
  Dataset data_;
  ModelConfig mcfg_;
  SgdOptimizer opt_;
  RngStream epoch_rng_;
  RngStream labeled_rng_;
  RngStream power_rng_;
  RngStream peer_rng_;
  RngStream partner_rng_;
  MixRng mix_rng_;
  SslSplit split_;
  ParamSet params_;
  bool regularized_ = false;
  std::vector<long> driver_;
  std::vector<long> labeled_pool_;
  size_t cursor_ = 0;
};

}  // namespace

std::string metrics_csv_header() {
  return "epoch,train_loss,reg_loss,test_error,seconds";
}

std::string metrics_csv_row(const MetricsRecord& rec, bool record_timing) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,", rec.epoch,
                rec.train_loss, rec.reg_loss, rec.test_error);
  std::string row(buf);
  if (record_timing) {
    std::snprintf(buf, sizeof buf, "%.3f", rec.wall_seconds);
    row += buf;
  } else {
    row += "0.000";
  }
  return row;
}

Dataset build_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind == DatasetConfig::Kind::kSynthetic) {
    RngStream rng = RngStream::derive(cfg.seed, "synthetic-data");
    return generate_synthetic(cfg.dataset.synthetic, rng);
  }
  return load_idx(cfg.dataset.images_path, cfg.dataset.labels_path);
}

ModelConfig model_config_for(const ExperimentConfig& cfg, const Dataset& data) {
  (void)cfg;
  return ModelConfig{data.images.shape[1], data.images.shape[2],
                     data.images.shape[3], data.num_classes};
}

SslSplit split_for(const ExperimentConfig& cfg, const Dataset& data) {
  RngStream split_rng = RngStream::derive(cfg.seed, "ssl-split");
  if (cfg.split.labeled != 0) {
    return split_ssl(data, cfg.split.labeled, cfg.split.test, split_rng);
  }
  SslSplit split;
  split.test = sample_without_replacement(data.size(), cfg.split.test, -1, split_rng);
  std::sort(split.test.begin(), split.test.end());
  std::vector<bool> in_test(static_cast<size_t>(data.size()), false);
  for (long i : split.test) in_test[static_cast<size_t>(i)] = true;
  for (long i = 0; i < data.size(); ++i) {
    if (!in_test[static_cast<size_t>(i)]) split.labeled.push_back(i);
  }
  return split;
}

double evaluate_error(const ModelConfig& mcfg, const ParamSet& params,
                      const Dataset& data, const std::vector<long>& idx,
                      int batch_size, int threads) {
  if (idx.empty()) return 0.0;
  const long n = static_cast<long>(idx.size());
  long wrong = 0;
  for (long lo = 0; lo < n; lo += batch_size) {
    const long hi = std::min(n, lo + batch_size);
    Tensor x = gather_images(data, idx, lo, hi);
    Tape tape(threads);
    std::vector<NodeId> ids = stage_params(tape, params, false);
    ForwardResult fwd = forward_with_taps(tape, mcfg, ids, tape.constant(x), {});
    const Tensor& logits = tape.value(fwd.logits);
    const long C = logits.shape[1];
    for (long r = 0; r < hi - lo; ++r) {
      long best = 0;
      double best_v = logits.data[static_cast<size_t>(r * C)];
      for (long c = 1; c < C; ++c) {
        double v = logits.data[static_cast<size_t>(r * C + c)];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      if (best != data.labels[static_cast<size_t>(idx[static_cast<size_t>(lo + r)])]) {
        ++wrong;
      }
    }
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(n);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                const std::string& out_dir,
                                std::ostream* progress) {
  Trainer trainer(cfg);
  return trainer.run(out_dir, progress);
}

std::string dump_neighbor_graph(const ExperimentConfig& cfg, int batch_index,
                                int tap_position) {
  Trainer trainer(cfg);
  return trainer.dump(batch_index, tap_position);
}

}  // namespace pani
