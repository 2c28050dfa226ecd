#include "pani/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "pani/errors.hpp"
#include "pani/model.hpp"

namespace pani {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw ConfigError("config: " + key + ": " + what);
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) bad(key, "expected a number");
  return v.get<double>();
}

long as_long(const json& v, const std::string& key) {
  if (!v.is_number_integer()) bad(key, "expected an integer");
  return v.get<long>();
}

int as_int(const json& v, const std::string& key) {
  return static_cast<int>(as_long(v, key));
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) bad(key, "expected true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) bad(key, "expected a string");
  return v.get<std::string>();
}

std::uint64_t as_u64(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) {
    return static_cast<std::uint64_t>(v.get<long long>());
  }
  bad(key, "expected a non-negative integer");
}

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& scope) {
  for (const auto& item : obj.items()) {
    if (allowed.count(item.key())) continue;
    std::string list;
    for (const auto& k : allowed) {
      if (!list.empty()) list += ", ";
      list += k;
    }
    std::string where = scope.empty() ? item.key() : scope + "." + item.key();
    bad(where, "unknown key; valid keys: " + list);
  }
}

Method parse_method(const std::string& name) {
  if (name == "erm") return Method::kErm;
  if (name == "mixup") return Method::kMixup;
  if (name == "pani_mixup") return Method::kPaniMixup;
  if (name == "vat") return Method::kVat;
  if (name == "pani_vat") return Method::kPaniVat;
  bad("method", "unknown method '" + name +
                    "'; valid: erm, mixup, pani_mixup, vat, pani_vat");
}

// Per-method, per-variant starting points; file keys and overrides layer on
// top of these.
void apply_method_defaults(ExperimentConfig& cfg) {
  switch (cfg.method) {
    case Method::kErm:
      break;
    case Method::kMixup:
      cfg.mixup.a = 1.0;
      break;
    case Method::kPaniMixup:
      if (cfg.variant.empty()) cfg.variant = "augmented";
      if (cfg.variant == "augmented") {
        cfg.mixup = MixConfig{2.0, 1, 1, 16, 0.6};
      } else if (cfg.variant == "plain") {
        cfg.mixup = MixConfig{2.5, 1, 1, 8, 0.4};
      } else {
        bad("variant", "pani_mixup knows 'augmented' and 'plain', not '" +
                           cfg.variant + "'");
      }
      break;
    case Method::kVat:
      cfg.vat = VatConfig{2.0, 1.0, 1e-6, 1, 10, {}};
      break;
    case Method::kPaniVat:
      if (cfg.variant.empty()) cfg.variant = "input";
      if (cfg.variant == "input") {
        cfg.vat = VatConfig{2.0, 1.0, 1e-2, 1, 10, {VatLayerConfig{0, 2, 1.0, 10}}};
      } else if (cfg.variant == "hidden") {
        cfg.vat = VatConfig{2.0,
                            1.0,
                            1e-2,
                            1,
                            10,
                            {VatLayerConfig{0, 2, 1.0, 10},
                             VatLayerConfig{1, 2, 0.5, 50}}};
      } else {
        bad("variant",
            "pani_vat knows 'input' and 'hidden', not '" + cfg.variant + "'");
      }
      break;
  }
  if (!cfg.variant.empty() && cfg.method != Method::kPaniMixup &&
      cfg.method != Method::kPaniVat) {
    bad("variant", std::string("not supported for method ") +
                       method_name(cfg.method));
  }
}

// Scalar broadcasts across all layers, an array must match the layer count.
template <typename T, typename Fn>
std::vector<T> layer_values(const json& v, const std::string& key, size_t n,
                            Fn scalar) {
  std::vector<T> out;
  if (v.is_array()) {
    if (v.size() != n) {
      bad(key, "expected " + std::to_string(n) + " entries, one per tap, got " +
                   std::to_string(v.size()));
    }
    for (size_t i = 0; i < n; ++i) {
      out.push_back(scalar(v[i], key + "[" + std::to_string(i) + "]"));
    }
  } else {
    out.assign(n, scalar(v, key));
  }
  return out;
}

void parse_dataset(const json& d, DatasetConfig& out) {
  if (!d.is_object()) bad("dataset", "expected an object");
  std::string kind = "synthetic";
  if (d.contains("kind")) kind = as_string(d["kind"], "dataset.kind");
  if (kind == "synthetic") {
    out.kind = DatasetConfig::Kind::kSynthetic;
    check_keys(d,
               {"kind", "classes", "per_class", "channels", "height", "width",
                "separation"},
               "dataset");
    if (d.contains("classes"))
      out.synthetic.classes = as_long(d["classes"], "dataset.classes");
    if (d.contains("per_class"))
      out.synthetic.per_class = as_long(d["per_class"], "dataset.per_class");
    if (d.contains("channels"))
      out.synthetic.channels = as_long(d["channels"], "dataset.channels");
    if (d.contains("height"))
      out.synthetic.height = as_long(d["height"], "dataset.height");
    if (d.contains("width"))
      out.synthetic.width = as_long(d["width"], "dataset.width");
    if (d.contains("separation"))
      out.synthetic.separation = as_double(d["separation"], "dataset.separation");
  } else if (kind == "idx") {
    out.kind = DatasetConfig::Kind::kIdx;
    check_keys(d, {"kind", "images_path", "labels_path"}, "dataset");
    if (d.contains("images_path"))
      out.images_path = as_string(d["images_path"], "dataset.images_path");
    if (d.contains("labels_path"))
      out.labels_path = as_string(d["labels_path"], "dataset.labels_path");
  } else {
    bad("dataset.kind", "expected 'synthetic' or 'idx', got '" + kind + "'");
  }
}

void parse_split(const json& s, SplitConfig& out) {
  if (!s.is_object()) bad("split", "expected an object");
  check_keys(s, {"labeled", "test"}, "split");
  if (s.contains("labeled")) out.labeled = as_long(s["labeled"], "split.labeled");
  if (s.contains("test")) out.test = as_long(s["test"], "split.test");
}

void parse_optimizer(const json& o, OptimizerConfig& out) {
  if (!o.is_object()) bad("optimizer", "expected an object");
  check_keys(o,
             {"lr", "momentum", "weight_decay", "epochs", "batch_size",
              "lr_decay_epoch", "lr_decay_factor"},
             "optimizer");
  if (o.contains("lr")) out.lr = as_double(o["lr"], "optimizer.lr");
  if (o.contains("momentum"))
    out.momentum = as_double(o["momentum"], "optimizer.momentum");
  if (o.contains("weight_decay"))
    out.weight_decay = as_double(o["weight_decay"], "optimizer.weight_decay");
  if (o.contains("epochs")) out.epochs = as_int(o["epochs"], "optimizer.epochs");
  if (o.contains("batch_size"))
    out.batch_size = as_int(o["batch_size"], "optimizer.batch_size");
  if (o.contains("lr_decay_epoch"))
    out.lr_decay_epoch = as_int(o["lr_decay_epoch"], "optimizer.lr_decay_epoch");
  if (o.contains("lr_decay_factor"))
    out.lr_decay_factor =
        as_double(o["lr_decay_factor"], "optimizer.lr_decay_factor");
}

ExperimentConfig from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");

  ExperimentConfig cfg;
  if (j.contains("method")) {
    cfg.method = parse_method(as_string(j["method"], "method"));
  }
  if (j.contains("variant")) cfg.variant = as_string(j["variant"], "variant");
  apply_method_defaults(cfg);

  std::set<std::string> allowed = {"method",  "variant", "seed",
                                   "threads", "record_timing", "dataset",
                                   "split",   "optimizer"};
  switch (cfg.method) {
    case Method::kErm:
      break;
    case Method::kMixup:
      allowed.insert("a");
      break;
    case Method::kPaniMixup:
      allowed.insert({"a", "k1", "k", "patch_size", "mask_ratio"});
      break;
    case Method::kVat:
      allowed.insert({"eps", "beta", "power_iters", "xi"});
      break;
    case Method::kPaniVat:
      allowed.insert({"eps", "beta", "power_iters", "xi", "k1", "taps",
                      "patch_size", "m", "k2"});
      break;
  }
  check_keys(j, allowed, "");

  if (j.contains("seed")) cfg.seed = as_u64(j["seed"], "seed");
  if (j.contains("threads")) cfg.threads = as_int(j["threads"], "threads");
  if (j.contains("record_timing"))
    cfg.record_timing = as_bool(j["record_timing"], "record_timing");
  if (j.contains("dataset")) parse_dataset(j["dataset"], cfg.dataset);
  if (j.contains("split")) parse_split(j["split"], cfg.split);
  if (j.contains("optimizer")) parse_optimizer(j["optimizer"], cfg.optimizer);

  if (cfg.method == Method::kMixup || cfg.method == Method::kPaniMixup) {
    if (j.contains("a")) cfg.mixup.a = as_double(j["a"], "a");
  }
  if (cfg.method == Method::kPaniMixup) {
    if (j.contains("k1")) cfg.mixup.k1 = as_long(j["k1"], "k1");
    if (j.contains("k")) cfg.mixup.k = as_long(j["k"], "k");
    if (j.contains("patch_size"))
      cfg.mixup.patch_size = as_long(j["patch_size"], "patch_size");
    if (j.contains("mask_ratio"))
      cfg.mixup.mask_ratio = as_double(j["mask_ratio"], "mask_ratio");
  }
  if (cfg.method == Method::kVat || cfg.method == Method::kPaniVat) {
    if (j.contains("eps")) cfg.vat.eps = as_double(j["eps"], "eps");
    if (j.contains("beta")) cfg.vat.beta = as_double(j["beta"], "beta");
    if (j.contains("power_iters"))
      cfg.vat.power_iters = as_int(j["power_iters"], "power_iters");
    if (j.contains("xi")) cfg.vat.xi = as_double(j["xi"], "xi");
  }
  if (cfg.method == Method::kPaniVat) {
    if (j.contains("k1")) cfg.vat.k1 = as_long(j["k1"], "k1");
    if (j.contains("taps")) {
      const json& t = j["taps"];
      if (!t.is_array()) bad("taps", "expected an array of tap indices");
      std::vector<VatLayerConfig> layers;
      for (size_t i = 0; i < t.size(); ++i) {
        VatLayerConfig layer;
        layer.tap = as_int(t[i], "taps[" + std::to_string(i) + "]");
        if (i < cfg.vat.layers.size()) {
          layer.patch_size = cfg.vat.layers[i].patch_size;
          layer.m = cfg.vat.layers[i].m;
          layer.k2 = cfg.vat.layers[i].k2;
        }
        layers.push_back(layer);
      }
      cfg.vat.layers = std::move(layers);
    }
    const size_t n = cfg.vat.layers.size();
    if (j.contains("patch_size")) {
      auto v = layer_values<long>(j["patch_size"], "patch_size", n, as_long);
      for (size_t i = 0; i < n; ++i) cfg.vat.layers[i].patch_size = v[i];
    }
    if (j.contains("m")) {
      auto v = layer_values<double>(j["m"], "m", n, as_double);
      for (size_t i = 0; i < n; ++i) cfg.vat.layers[i].m = v[i];
    }
    if (j.contains("k2")) {
      auto v = layer_values<long>(j["k2"], "k2", n, as_long);
      for (size_t i = 0; i < n; ++i) cfg.vat.layers[i].k2 = v[i];
    }
  }
  return cfg;
}

void apply_override(json& root, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("config: override '" + spec + "' is not key=value");
  }
  std::string path = spec.substr(0, eq);
  std::string text = spec.substr(eq + 1);

  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* cur = &root;
  std::istringstream segs(path);
  std::string seg;
  std::vector<std::string> parts;
  while (std::getline(segs, seg, '.')) parts.push_back(seg);
  if (parts.empty()) throw ConfigError("config: override '" + spec + "' has no key");
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->contains(parts[i])) (*cur)[parts[i]] = json::object();
    cur = &(*cur)[parts[i]];
    if (!cur->is_object()) {
      throw ConfigError("config: override path '" + path +
                        "' crosses a non-object at '" + parts[i] + "'");
    }
  }
  (*cur)[parts.back()] = value;
}

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::kErm:
      return "erm";
    case Method::kMixup:
      return "mixup";
    case Method::kPaniMixup:
      return "pani_mixup";
    case Method::kVat:
      return "vat";
    case Method::kPaniVat:
      return "pani_vat";
  }
  return "unknown";
}

ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides) {
  std::string body = text;
  if (body.find_first_not_of(" \t\r\n") == std::string::npos) body = "{}";
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: malformed JSON");
  for (const std::string& o : overrides) apply_override(j, o);
  ExperimentConfig cfg = from_json(j);
  validate_config(cfg);
  return cfg;
}

ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), overrides);
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.threads < 1) bad("threads", "must be >= 1");

  const OptimizerConfig& opt = cfg.optimizer;
  if (opt.lr <= 0.0) bad("optimizer.lr", "must be positive");
  if (opt.momentum < 0.0 || opt.momentum >= 1.0)
    bad("optimizer.momentum", "must be in [0, 1)");
  if (opt.weight_decay < 0.0) bad("optimizer.weight_decay", "must be >= 0");
  if (opt.epochs < 1) bad("optimizer.epochs", "must be >= 1");
  if (opt.batch_size < 1) bad("optimizer.batch_size", "must be >= 1");
  if (opt.lr_decay_epoch < -1) bad("optimizer.lr_decay_epoch", "must be >= -1");
  if (opt.lr_decay_factor <= 0.0) bad("optimizer.lr_decay_factor", "must be positive");

  long height = 0;
  long width = 0;
  if (cfg.dataset.kind == DatasetConfig::Kind::kSynthetic) {
    const SyntheticSpec& s = cfg.dataset.synthetic;
    if (s.classes < 2) bad("dataset.classes", "must be >= 2");
    if (s.per_class < 1) bad("dataset.per_class", "must be >= 1");
    if (s.channels < 1) bad("dataset.channels", "must be >= 1");
    if (s.height < 1 || s.width < 1) bad("dataset.height", "extents must be >= 1");
    if (s.separation < 0.0) bad("dataset.separation", "must be >= 0");
    height = s.height;
    width = s.width;
    long total = s.classes * s.per_class;
    if (cfg.split.labeled + cfg.split.test > total) {
      bad("split", "labeled + test exceeds the " + std::to_string(total) +
                       " synthetic samples");
    }
  } else {
    if (cfg.dataset.images_path.empty()) bad("dataset.images_path", "required for idx");
    if (cfg.dataset.labels_path.empty()) bad("dataset.labels_path", "required for idx");
  }
  if (cfg.split.labeled < 0) bad("split.labeled", "must be >= 0");
  if (cfg.split.test < 0) bad("split.test", "must be >= 0");

  auto check_patch = [&](long patch, const std::string& key, int tap) {
    if (patch < 1) bad(key, "must be >= 1");
    if (height == 0) return;  // idx extents are checked once the file is read
    ModelConfig mc{cfg.dataset.synthetic.channels, height, width, 2};
    std::vector<long> ts = tap_shape(mc, tap);
    if (ts[1] % patch != 0 || ts[2] % patch != 0) {
      bad(key, "patch size " + std::to_string(patch) + " does not divide the " +
                   std::to_string(ts[1]) + "x" + std::to_string(ts[2]) +
                   " map at tap " + std::to_string(tap));
    }
  };

  switch (cfg.method) {
    case Method::kErm:
      break;
    case Method::kMixup:
      if (cfg.mixup.a <= 0.0) bad("a", "must be positive");
      if (opt.batch_size < 2) bad("optimizer.batch_size", "mixup needs >= 2");
      break;
    case Method::kPaniMixup: {
      const MixConfig& m = cfg.mixup;
      if (m.a <= 0.0) bad("a", "must be positive");
      if (m.mask_ratio < 0.0 || m.mask_ratio > 1.0) bad("mask_ratio", "must be in [0, 1]");
      if (m.k1 < 1) bad("k1", "must be >= 1");
      if (m.k < 1) bad("k", "must be >= 1");
      if (m.k1 > opt.batch_size - 1) {
        bad("k1", "needs k1 + 1 <= batch_size to find peers in a batch");
      }
      check_patch(m.patch_size, "patch_size", 0);
      if (height > 0) {
        long P = (height / m.patch_size) * (width / m.patch_size);
        if (m.k > m.k1 * P) bad("k", "exceeds the k1 * P candidate pool");
      }
      break;
    }
    case Method::kVat:
      if (cfg.vat.eps <= 0.0) bad("eps", "must be positive");
      if (cfg.vat.beta < 0.0) bad("beta", "must be >= 0");
      if (cfg.vat.xi <= 0.0) bad("xi", "must be positive");
      if (cfg.vat.power_iters < 1) bad("power_iters", "must be >= 1");
      break;
    case Method::kPaniVat: {
      const VatConfig& v = cfg.vat;
      if (v.eps <= 0.0) bad("eps", "must be positive");
      if (v.beta < 0.0) bad("beta", "must be >= 0");
      if (v.xi <= 0.0) bad("xi", "must be positive");
      if (v.power_iters < 1) bad("power_iters", "must be >= 1");
      if (!v.layers.empty()) {
        if (v.k1 < 1) bad("k1", "must be >= 1");
        if (v.k1 > opt.batch_size - 1) {
          bad("k1", "needs k1 + 1 <= batch_size to find peers in a batch");
        }
        for (size_t l = 0; l < v.layers.size(); ++l) {
          const VatLayerConfig& layer = v.layers[l];
          std::string at = "[" + std::to_string(l) + "]";
          if (layer.tap < 0 || layer.tap >= kTapCount) {
            bad("taps" + at, "tap must be in [0, " + std::to_string(kTapCount) + ")");
          }
          if (layer.m <= 0.0) bad("m" + at, "must be positive");
          if (layer.k2 < 1) bad("k2" + at, "must be >= 1");
          check_patch(layer.patch_size, "patch_size" + at, layer.tap);
          if (height > 0) {
            ModelConfig mc{cfg.dataset.synthetic.channels, height, width, 2};
            std::vector<long> ts = tap_shape(mc, layer.tap);
            long P = (ts[1] / layer.patch_size) * (ts[2] / layer.patch_size);
            if (layer.k2 > v.k1 * P) bad("k2" + at, "exceeds the k1 * P candidate pool");
          }
        }
      }
      break;
    }
  }
}

}  // namespace pani
