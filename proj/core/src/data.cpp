#include "pani/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "pani/errors.hpp"

namespace pani {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;
constexpr double kPi = 3.14159265358979323846;
constexpr double kNoiseStd = 0.1;

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

std::uint32_t read_u32_be(const std::vector<std::uint8_t>& b, size_t off,
                          const std::string& path) {
  if (off + 4 > b.size()) {
    throw FormatError(path + ": truncated at byte offset " +
                      std::to_string(b.size()) + ", header needs " +
                      std::to_string(off + 4) + " bytes");
  }
  return (static_cast<std::uint32_t>(b[off]) << 24) |
         (static_cast<std::uint32_t>(b[off + 1]) << 16) |
         (static_cast<std::uint32_t>(b[off + 2]) << 8) |
         static_cast<std::uint32_t>(b[off + 3]);
}

void check_payload(const std::vector<std::uint8_t>& b, size_t header,
                   size_t payload, const std::string& path) {
  if (b.size() < header + payload) {
    throw FormatError(path + ": truncated at byte offset " +
                      std::to_string(b.size()) + ", expected " +
                      std::to_string(header + payload) + " bytes");
  }
  if (b.size() > header + payload) {
    throw FormatError(path + ": trailing data at byte offset " +
                      std::to_string(header + payload));
  }
}

void append_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(path + ": write failed");
}

// Partial Fisher-Yates over an explicit pool; winners come back in draw order.
std::vector<long> draw_from_pool(std::vector<long> pool, long k, RngStream& rng) {
  const long n = static_cast<long>(pool.size());
  for (long t = 0; t < k; ++t) {
    long j = t + static_cast<long>(
                     rng.uniform_int(static_cast<unsigned long>(n - t)));
    std::swap(pool[static_cast<size_t>(t)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(k));
  return pool;
}

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::vector<std::uint8_t> img = read_file(images_path);
  std::uint32_t magic = read_u32_be(img, 0, images_path);
  if (magic != kImagesMagic) {
    throw FormatError(images_path + ": bad image magic at byte offset 0");
  }
  const long count = static_cast<long>(read_u32_be(img, 4, images_path));
  const long rows = static_cast<long>(read_u32_be(img, 8, images_path));
  const long cols = static_cast<long>(read_u32_be(img, 12, images_path));
  if (count < 1 || rows < 1 || cols < 1) {
    throw FormatError(images_path + ": empty extents in header");
  }
  check_payload(img, 16, static_cast<size_t>(count * rows * cols), images_path);

  std::vector<std::uint8_t> lab = read_file(labels_path);
  std::uint32_t lmagic = read_u32_be(lab, 0, labels_path);
  if (lmagic != kLabelsMagic) {
    throw FormatError(labels_path + ": bad label magic at byte offset 0");
  }
  const long lcount = static_cast<long>(read_u32_be(lab, 4, labels_path));
  check_payload(lab, 8, static_cast<size_t>(lcount), labels_path);
  if (lcount != count) {
    throw FormatError(labels_path + ": " + std::to_string(lcount) +
                      " labels for " + std::to_string(count) + " images");
  }

  Dataset d;
  d.images = Tensor({count, 1, rows, cols});
  for (long t = 0; t < count * rows * cols; ++t) {
    d.images.data[static_cast<size_t>(t)] =
        static_cast<double>(img[static_cast<size_t>(16 + t)]) / 255.0;
  }
  d.labels.resize(static_cast<size_t>(count));
  long max_label = 0;
  for (long t = 0; t < count; ++t) {
    d.labels[static_cast<size_t>(t)] = static_cast<long>(lab[static_cast<size_t>(8 + t)]);
    max_label = std::max(max_label, d.labels[static_cast<size_t>(t)]);
  }
  d.num_classes = max_label + 1;
  return d;
}

void write_idx_images(const std::string& path,
                      const std::vector<std::uint8_t>& pixels, long count,
                      long rows, long cols) {
  if (static_cast<long>(pixels.size()) != count * rows * cols) {
    throw ContractError("write_idx_images: " + std::to_string(pixels.size()) +
                        " pixels for extents " + std::to_string(count) + "x" +
                        std::to_string(rows) + "x" + std::to_string(cols));
  }
  std::vector<std::uint8_t> out;
  out.reserve(16 + pixels.size());
  append_u32_be(out, kImagesMagic);
  append_u32_be(out, static_cast<std::uint32_t>(count));
  append_u32_be(out, static_cast<std::uint32_t>(rows));
  append_u32_be(out, static_cast<std::uint32_t>(cols));
  out.insert(out.end(), pixels.begin(), pixels.end());
  write_file(path, out);
}

void write_idx_labels(const std::string& path,
                      const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  append_u32_be(out, kLabelsMagic);
  append_u32_be(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  write_file(path, out);
}

std::vector<Tensor> synthetic_class_templates(const SyntheticSpec& spec,
                                              RngStream& rng) {
  if (spec.classes < 2 || spec.per_class < 1 || spec.channels < 1 ||
      spec.height < 1 || spec.width < 1) {
    throw ContractError("synthetic spec: extents out of range");
  }
  const double amplitude = 0.02 * spec.separation;
  std::vector<Tensor> templates;
  templates.reserve(static_cast<size_t>(spec.classes));
  for (long c = 0; c < spec.classes; ++c) {
    Tensor t({spec.channels, spec.height, spec.width});
    for (long ch = 0; ch < spec.channels; ++ch) {
      for (long u = 0; u <= 2; ++u) {
        for (long v = 0; v <= 2; ++v) {
          if (u == 0 && v == 0) continue;
          double coeff = rng.normal();
          for (long y = 0; y < spec.height; ++y) {
            double fy = std::cos(kPi * static_cast<double>(u) *
                                 (static_cast<double>(y) + 0.5) /
                                 static_cast<double>(spec.height));
            for (long x = 0; x < spec.width; ++x) {
              double fx = std::cos(kPi * static_cast<double>(v) *
                                   (static_cast<double>(x) + 0.5) /
                                   static_cast<double>(spec.width));
              t.at({ch, y, x}) += coeff * fy * fx;
            }
          }
        }
      }
    }
    double mean = 0.0;
    for (double v : t.data) mean += v;
    mean /= static_cast<double>(t.numel());
    double var = 0.0;
    for (double v : t.data) var += (v - mean) * (v - mean);
    double sd = std::sqrt(var / static_cast<double>(t.numel()));
    for (double& v : t.data) {
      v = sd > 0.0 ? 0.5 + amplitude * (v - mean) / sd : 0.5;
    }
    templates.push_back(std::move(t));
  }
  return templates;
}

Dataset generate_synthetic(const SyntheticSpec& spec, RngStream& rng) {
  std::vector<Tensor> templates = synthetic_class_templates(spec, rng);
  const long per_image = spec.channels * spec.height * spec.width;

  Dataset d;
  d.num_classes = spec.classes;
  d.images = Tensor({spec.classes * spec.per_class, spec.channels, spec.height,
                     spec.width});
  d.labels.resize(static_cast<size_t>(spec.classes * spec.per_class));
  long row = 0;
  for (long c = 0; c < spec.classes; ++c) {
    for (long i = 0; i < spec.per_class; ++i, ++row) {
      d.labels[static_cast<size_t>(row)] = c;
      double* dst = &d.images.data[static_cast<size_t>(row * per_image)];
      const double* src = templates[static_cast<size_t>(c)].data.data();
      for (long t = 0; t < per_image; ++t) {
        dst[t] = std::clamp(src[t] + kNoiseStd * rng.normal(), 0.0, 1.0);
      }
    }
  }
  return d;
}

SslSplit split_ssl(const Dataset& data, long n_labeled, long n_test,
                   RngStream& rng) {
  const long M = data.size();
  if (n_labeled < 1 || n_test < 0 || n_labeled + n_test > M) {
    throw ContractError("split_ssl: " + std::to_string(n_labeled) +
                        " labeled + " + std::to_string(n_test) +
                        " test exceeds " + std::to_string(M) + " samples");
  }

  SslSplit split;
  split.test = sample_without_replacement(M, n_test, -1, rng);
  std::vector<bool> taken(static_cast<size_t>(M), false);
  for (long i : split.test) taken[static_cast<size_t>(i)] = true;

  const long base = n_labeled / data.num_classes;
  const long extra = n_labeled % data.num_classes;
  for (long c = 0; c < data.num_classes; ++c) {
    long quota = base + (c < extra ? 1 : 0);
    if (quota == 0) continue;
    std::vector<long> pool;
    for (long i = 0; i < M; ++i) {
      if (!taken[static_cast<size_t>(i)] && data.labels[static_cast<size_t>(i)] == c) {
        pool.push_back(i);
      }
    }
    if (static_cast<long>(pool.size()) < quota) {
      throw ContractError("split_ssl: class " + std::to_string(c) + " has " +
                          std::to_string(pool.size()) + " samples, quota " +
                          std::to_string(quota));
    }
    for (long i : draw_from_pool(std::move(pool), quota, rng)) {
      split.labeled.push_back(i);
      taken[static_cast<size_t>(i)] = true;
    }
  }
  for (long i = 0; i < M; ++i) {
    if (!taken[static_cast<size_t>(i)]) split.unlabeled.push_back(i);
  }
  std::sort(split.test.begin(), split.test.end());
  std::sort(split.labeled.begin(), split.labeled.end());
  return split;
}

Tensor gather_images(const Dataset& data, const std::vector<long>& idx,
                     long lo, long hi) {
  if (lo < 0 || hi < lo || hi > static_cast<long>(idx.size())) {
    throw ContractError("gather_images: window [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + ") out of range");
  }
  const long per_image = data.images.numel() / data.size();
  Tensor out({hi - lo, data.images.shape[1], data.images.shape[2],
              data.images.shape[3]});
  for (long t = lo; t < hi; ++t) {
    long i = idx[static_cast<size_t>(t)];
    if (i < 0 || i >= data.size()) {
      throw ContractError("gather_images: index " + std::to_string(i) +
                          " outside dataset of " + std::to_string(data.size()));
    }
    std::copy_n(data.images.data.begin() + i * per_image, per_image,
                out.data.begin() + (t - lo) * per_image);
  }
  return out;
}

Tensor gather_onehot(const Dataset& data, const std::vector<long>& idx,
                     long lo, long hi) {
  if (lo < 0 || hi < lo || hi > static_cast<long>(idx.size())) {
    throw ContractError("gather_onehot: window [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + ") out of range");
  }
  Tensor out({hi - lo, data.num_classes});
  for (long t = lo; t < hi; ++t) {
    long i = idx[static_cast<size_t>(t)];
    long label = data.labels[static_cast<size_t>(i)];
    if (label < 0 || label >= data.num_classes) {
      throw ContractError("gather_onehot: label " + std::to_string(label) +
                          " outside " + std::to_string(data.num_classes) +
                          " classes");
    }
    out.at({t - lo, label}) = 1.0;
  }
  return out;
}

}  // namespace pani
