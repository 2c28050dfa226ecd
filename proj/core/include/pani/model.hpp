#pragma once

#include <memory>
#include <string>
#include <vector>

#include "pani/autodiff.hpp"
#include "pani/rng.hpp"

namespace pani {

struct ModelConfig {
  long in_channels = 1;
  long height = 0;
  long width = 0;
  long num_classes = 0;
};

// Named parameter tensors in a fixed order; checkpoints and optimizer state
// align with this order.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  long count() const { return static_cast<long>(tensors.size()); }
  Tensor& find(const std::string& name);
  const Tensor& find(const std::string& name) const;
};

// He-normal weights (std = sqrt(2 / fan_in)), zero biases. Consumes the
// stream in parameter order.
ParamSet init_params(const ModelConfig& cfg, RngStream& rng);

// Feature-map taps where a patch graph may be attached: tap 0 is the raw
// input, tap 1 the activation after the first conv block.
inline constexpr int kTapCount = 2;

// (C, H, W) of the feature map at a tap.
std::vector<long> tap_shape(const ModelConfig& cfg, int tap);

// A frozen neighbor graph plus an eta node to interpolate with at a tap.
struct Injection {
  int tap = 0;
  long patch_size = 0;
  std::shared_ptr<const NeighborIndex> graph;
  NodeId eta;
};

struct ForwardResult {
  NodeId logits;
  NodeId penultimate;
  std::vector<NodeId> taps;  // feature map per tap, after any injection
};

// Stages every parameter on the tape, as leaves when differentiable.
std::vector<NodeId> stage_params(Tape& tape, const ParamSet& params,
                                 bool differentiable);

// conv(C->16, 3x3, s1, p1)-ReLU -> conv(16->32, 3x3, s2, p1)-ReLU ->
// conv(32->64, 3x3, s2, p1)-ReLU -> GAP -> dense(64->64)-ReLU ->
// dense(64->classes). Injections apply at their taps in network order.
ForwardResult forward_with_taps(Tape& tape, const ModelConfig& cfg,
                                const std::vector<NodeId>& params,
                                NodeId input,
                                const std::vector<Injection>& injections);

// Gradients re-ordered to match the parameter list; parameters that the
// output does not reach get zero tensors.
std::vector<Tensor> collect_param_grads(const Tape& tape,
                                        const Gradients& grads,
                                        const std::vector<NodeId>& params,
                                        const ParamSet& shapes);

// SGD with classic momentum and decoupled-from-nothing weight decay folded
// into the gradient: v = mu * v + g + wd * w; w -= lr * v.
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay);

  void step(ParamSet& params, const std::vector<Tensor>& grads, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

// Binary checkpoint: magic "PANI", format version u32, then per tensor:
// name length u32, name bytes, rank u32, extents u64 each, raw f64 data.
// All integers and doubles little-endian.
void save_checkpoint(const std::string& path, const ParamSet& params);
ParamSet load_checkpoint(const std::string& path);

}  // namespace pani
