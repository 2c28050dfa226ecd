#include "pani/model.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pani/errors.hpp"
#include "pani/interpolation.hpp"

namespace pani {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'P', 'A', 'N', 'I'};

Tensor he_normal(std::vector<long> shape, long fan_in, RngStream& rng) {
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = std_dev * rng.normal();
  return t;
}

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size()) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos) +
                        " while reading " + what);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    }
    pos += 8;
    return v;
  }
};

}  // namespace

Tensor& ParamSet::find(const std::string& name) {
  for (long i = 0; i < count(); ++i) {
    if (names[i] == name) return tensors[i];
  }
  throw ContractError("no parameter named " + name);
}

const Tensor& ParamSet::find(const std::string& name) const {
  return const_cast<ParamSet*>(this)->find(name);
}

ParamSet init_params(const ModelConfig& cfg, RngStream& rng) {
  if (cfg.in_channels < 1 || cfg.height < 1 || cfg.width < 1 || cfg.num_classes < 2) {
    throw ConfigError("model config needs positive extents and >= 2 classes");
  }
  ParamSet p;
  auto add = [&](const std::string& name, Tensor t) {
    p.names.push_back(name);
    p.tensors.push_back(std::move(t));
  };
  const long C = cfg.in_channels;
  add("conv1.weight", he_normal({16, C, 3, 3}, C * 9, rng));
  add("conv1.bias", Tensor({16}));
  add("conv2.weight", he_normal({32, 16, 3, 3}, 16 * 9, rng));
  add("conv2.bias", Tensor({32}));
  add("conv3.weight", he_normal({64, 32, 3, 3}, 32 * 9, rng));
  add("conv3.bias", Tensor({64}));
  add("fc1.weight", he_normal({64, 64}, 64, rng));
  add("fc1.bias", Tensor({64}));
  add("fc2.weight", he_normal({cfg.num_classes, 64}, 64, rng));
  add("fc2.bias", Tensor({cfg.num_classes}));
  return p;
}

std::vector<long> tap_shape(const ModelConfig& cfg, int tap) {
  switch (tap) {
    case 0:
      return {cfg.in_channels, cfg.height, cfg.width};
    case 1:
      // 3x3, stride 1, pad 1 preserves the spatial extents.
      return {16, cfg.height, cfg.width};
    default:
      throw ConfigError("tap must be in [0, " + std::to_string(kTapCount) + ")");
  }
}

std::vector<NodeId> stage_params(Tape& tape, const ParamSet& params,
                                 bool differentiable) {
  std::vector<NodeId> ids;
  ids.reserve(params.count());
  for (const Tensor& t : params.tensors) {
    ids.push_back(differentiable ? tape.leaf(t) : tape.constant(t));
  }
  return ids;
}

ForwardResult forward_with_taps(Tape& tape, const ModelConfig& cfg,
                                const std::vector<NodeId>& params,
                                NodeId input,
                                const std::vector<Injection>& injections) {
  if (params.size() != 10) {
    throw ContractError("forward_with_taps expects the 10 model parameters");
  }
  const Tensor& x = tape.value(input);
  if (x.rank() != 4 || x.shape[1] != cfg.in_channels ||
      x.shape[2] != cfg.height || x.shape[3] != cfg.width) {
    throw DimensionError("input " + shape_str(x.shape) + " does not match the model");
  }
  auto inject_at = [&](int tap, NodeId node) {
    for (const Injection& inj : injections) {
      if (inj.tap != tap) continue;
      if (!inj.graph || !inj.eta.valid() || inj.patch_size <= 0) {
        throw ContractError("injection at tap " + std::to_string(tap) + " is incomplete");
      }
      node = transform_layer(tape, node, inj.graph, inj.eta, inj.patch_size);
    }
    return node;
  };
  for (const Injection& inj : injections) {
    if (inj.tap < 0 || inj.tap >= kTapCount) {
      throw ConfigError("injection tap " + std::to_string(inj.tap) + " out of range");
    }
  }

  ForwardResult r;
  NodeId cur = inject_at(0, input);
  r.taps.push_back(cur);
  cur = tape.relu(tape.conv2d(cur, params[0], params[1], 1, 1));
  cur = inject_at(1, cur);
  r.taps.push_back(cur);
  cur = tape.relu(tape.conv2d(cur, params[2], params[3], 2, 1));
  cur = tape.relu(tape.conv2d(cur, params[4], params[5], 2, 1));
  cur = tape.global_avg_pool(cur);
  r.penultimate = tape.relu(tape.dense(cur, params[6], params[7]));
  r.logits = tape.dense(r.penultimate, params[8], params[9]);
  return r;
}

std::vector<Tensor> collect_param_grads(const Tape& tape,
                                        const Gradients& grads,
                                        const std::vector<NodeId>& params,
                                        const ParamSet& shapes) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    if (tape.is_leaf(params[i]) && grads.contains(params[i])) {
      out.push_back(grads.at(params[i]));
    } else {
      out.push_back(Tensor(shapes.tensors[i].shape));
    }
  }
  return out;
}

SgdOptimizer::SgdOptimizer(double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {}

void SgdOptimizer::step(ParamSet& params, const std::vector<Tensor>& grads,
                        double lr) {
  if (grads.size() != static_cast<size_t>(params.count())) {
    throw ContractError("sgd step: gradient count mismatch");
  }
  if (velocity_.empty()) {
    for (const Tensor& t : params.tensors) velocity_.push_back(Tensor(t.shape));
  }
  for (long i = 0; i < params.count(); ++i) {
    Tensor& w = params.tensors[i];
    const Tensor& g = grads[i];
    Tensor& v = velocity_[i];
    if (!w.same_shape(g)) {
      throw DimensionError("sgd step: gradient shape mismatch for " + params.names[i]);
    }
    for (long j = 0; j < w.numel(); ++j) {
      v.data[j] = momentum_ * v.data[j] + g.data[j] + weight_decay_ * w.data[j];
      w.data[j] -= lr * v.data[j];
    }
    w.check_finite("sgd step");
  }
}

void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  append_u32(out, kCheckpointVersion);
  for (long i = 0; i < params.count(); ++i) {
    const std::string& name = params.names[i];
    const Tensor& t = params.tensors[i];
    append_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    append_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (long e : t.shape) append_u64(out, static_cast<std::uint64_t>(e));
    for (double v : t.data) {
      std::uint64_t bits;
      static_assert(sizeof bits == sizeof v);
      std::memcpy(&bits, &v, sizeof bits);
      append_u64(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write to " + path);
}

ParamSet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};
  r.need(4, "magic");
  if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic at byte 0");
  }
  r.pos = 4;
  std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ParamSet p;
  while (r.pos < buf.size()) {
    std::uint32_t name_len = r.u32("name length");
    r.need(name_len, "name");
    std::string name = buf.substr(r.pos, name_len);
    r.pos += name_len;
    std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
    std::vector<long> shape(rank);
    long numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint64_t e = r.u64("extent");
      if (e == 0 || e > (1ull << 32)) {
        throw FormatError("bad extent in checkpoint tensor " + name);
      }
      shape[i] = static_cast<long>(e);
      numel *= shape[i];
    }
    Tensor t(std::move(shape));
    for (long i = 0; i < numel; ++i) {
      std::uint64_t bits = r.u64("tensor data");
      double v;
      std::memcpy(&v, &bits, sizeof v);
      t.data[i] = v;
    }
    p.names.push_back(std::move(name));
    p.tensors.push_back(std::move(t));
  }
  return p;
}

}  // namespace pani
