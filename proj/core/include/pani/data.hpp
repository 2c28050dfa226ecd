#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pani/rng.hpp"
#include "pani/tensor.hpp"

namespace pani {

struct Dataset {
  Tensor images;  // (M, C, H, W), values in [0, 1]
  std::vector<long> labels;
  long num_classes = 0;

  long size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

// IDX readers. Image files carry magic 0x00000803 and extents
// (count, rows, cols); label files carry 0x00000801 and (count). All header
// words are big-endian u32, pixels are u8 and map to pixel / 255.0 with a
// single channel. Malformed magic or truncation throws FormatError naming
// the byte offset.
Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path);

void write_idx_images(const std::string& path,
                      const std::vector<std::uint8_t>& pixels, long count,
                      long rows, long cols);
void write_idx_labels(const std::string& path,
                      const std::vector<std::uint8_t>& labels);

struct SyntheticSpec {
  long classes = 10;
  long per_class = 100;
  long channels = 1;
  long height = 8;
  long width = 8;
  double separation = 3.0;
};

// One smooth template per class: a random low-frequency cosine mixture,
// pixel-normalized, scaled by separation and centered at 0.5. Consumes the
// stream before any image noise, so callers holding an identically seeded
// stream recover the exact templates generate_synthetic used.
std::vector<Tensor> synthetic_class_templates(const SyntheticSpec& spec,
                                              RngStream& rng);

// Class-major dataset: template + N(0, 0.1) pixel noise, clipped to [0, 1].
Dataset generate_synthetic(const SyntheticSpec& spec, RngStream& rng);

struct SslSplit {
  std::vector<long> labeled;
  std::vector<long> unlabeled;
  std::vector<long> test;
};

// Test indices are drawn first (uniform, without replacement); the labeled
// set is then stratified per class from the remainder, quotas as even as
// possible with lower classes taking the extra one. Everything else is
// unlabeled. Index lists are sorted ascending.
SslSplit split_ssl(const Dataset& data, long n_labeled, long n_test,
                   RngStream& rng);

// Batch assembly.
Tensor gather_images(const Dataset& data, const std::vector<long>& idx,
                     long lo, long hi);
Tensor gather_onehot(const Dataset& data, const std::vector<long>& idx,
                     long lo, long hi);

}  // namespace pani
