#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evnas/rng.hpp"
#include "evnas/tensor.hpp"

namespace evnas {

struct Dataset {
  int channels = 1;
  int hw = 16;
  std::vector<std::vector<float>> images;  // each channels * hw * hw, values in [0,1]
  std::vector<int> labels;

  size_t size() const { return images.size(); }
};

struct Batch {
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;
};

inline Batch make_batch(const Dataset& d, std::span<const int> indices) {
  const size_t image_len = static_cast<size_t>(d.channels) * d.hw * d.hw;
  Batch b;
  b.images = Tensor({static_cast<int>(indices.size()), d.channels, d.hw, d.hw});
  b.labels.reserve(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const auto& img = d.images[static_cast<size_t>(indices[i])];
    std::copy(img.begin(), img.end(), b.images.data.begin() + i * image_len);
    b.labels.push_back(d.labels[static_cast<size_t>(indices[i])]);
  }
  return b;
}

/// Cycles through a dataset in deterministically shuffled epochs.
class BatchStream {
 public:
  BatchStream(const Dataset& d, int batch_size, Rng rng) : d_(&d), batch_size_(batch_size), rng_(rng) {
    if (batch_size < 1) throw std::invalid_argument("BatchStream: batch size must be >= 1");
    if (d.size() == 0) throw std::invalid_argument("BatchStream: empty dataset");
    order_.resize(d.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    reshuffle();
  }

  size_t dataset_size() const { return d_->size(); }

  Batch next() {
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
      if (pos_ == order_.size()) {
        reshuffle();
        pos_ = 0;
      }
      idx.push_back(order_[pos_++]);
    }
    return make_batch(*d_, idx);
  }

 private:
  void reshuffle() {
    for (size_t i = 0; i + 1 < order_.size(); ++i)
      std::swap(order_[i], order_[i + rng_.uniform_below(order_.size() - i)]);
  }

  const Dataset* d_;
  int batch_size_;
  Rng rng_;
  std::vector<int> order_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Class-separable synthetic images: each class is a fixed 2-D sinusoidal
/// pattern plus Gaussian pixel noise. Generation is a pure function of the
/// spec; train and validation sets use disjoint noise streams.
struct SyntheticDatasetSpec {
  int num_classes = 4;
  int train_per_class = 64;
  int val_per_class = 16;
  int image_hw = 16;
  double freq_scale = 1.0;  // scales the per-class pattern frequencies
  double noise = 0.25;      // Gaussian pixel noise std-dev
  std::uint64_t seed = 0;
};

inline std::vector<float> synthetic_class_pattern(const SyntheticDatasetSpec& spec, int cls) {
  const int hw = spec.image_hw;
  const double fx = spec.freq_scale * (1 + cls % 3);
  const double fy = spec.freq_scale * (1 + (cls / 3) % 3);
  const double phase = 2.0 * std::numbers::pi * 0.17 * cls;
  std::vector<float> img(static_cast<size_t>(hw) * hw);
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      const double sx = std::sin(2.0 * std::numbers::pi * fx * (x + 0.5) / hw + phase);
      const double cy = std::cos(2.0 * std::numbers::pi * fy * (y + 0.5) / hw + phase);
      img[static_cast<size_t>(y) * hw + x] = static_cast<float>(0.5 + 0.45 * sx * cy);
    }
  return img;
}

namespace detail {
inline Dataset synthesize(const SyntheticDatasetSpec& spec, int per_class, Rng rng) {
  Dataset d;
  d.channels = 1;
  d.hw = spec.image_hw;
  std::vector<std::vector<float>> patterns;
  for (int c = 0; c < spec.num_classes; ++c) patterns.push_back(synthetic_class_pattern(spec, c));
  for (int i = 0; i < per_class; ++i)
    for (int c = 0; c < spec.num_classes; ++c) {
      std::vector<float> img = patterns[static_cast<size_t>(c)];
      if (spec.noise > 0.0)
        for (float& v : img)
          v = std::clamp(static_cast<float>(v + spec.noise * rng.gaussian()), 0.0f, 1.0f);
      d.images.push_back(std::move(img));
      d.labels.push_back(c);
    }
  return d;
}
}  // namespace detail

inline std::pair<Dataset, Dataset> generate_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  if (spec.num_classes < 2) throw std::invalid_argument("SyntheticDatasetSpec: need at least 2 classes");
  if (spec.image_hw < 4) throw std::invalid_argument("SyntheticDatasetSpec: image size too small");
  Dataset train = detail::synthesize(spec, spec.train_per_class, Rng(hash_combine(spec.seed, 0xA11CE)));
  Dataset val = detail::synthesize(spec, spec.val_per_class, Rng(hash_combine(spec.seed, 0xB0B)));
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// IDX (MNIST-compatible) loading
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be_u32(std::istream& is, const std::string& what) {
  unsigned char b[4] = {0, 0, 0, 0};
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("idx: truncated " + what);
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

inline std::string hex_u32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

/// Bilinear resample of a single-channel square image.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, int src_hw, int dst_hw) {
  if (src_hw == dst_hw) return src;
  std::vector<float> dst(static_cast<size_t>(dst_hw) * dst_hw);
  const double scale = static_cast<double>(src_hw) / dst_hw;
  for (int y = 0; y < dst_hw; ++y)
    for (int x = 0; x < dst_hw; ++x) {
      const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, src_hw - 1.0);
      const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, src_hw - 1.0);
      const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
      const int y1 = std::min(y0 + 1, src_hw - 1), x1 = std::min(x0 + 1, src_hw - 1);
      const double wy = sy - y0, wx = sx - x0;
      const double v = (1 - wy) * ((1 - wx) * src[static_cast<size_t>(y0) * src_hw + x0] +
                                   wx * src[static_cast<size_t>(y0) * src_hw + x1]) +
                       wy * ((1 - wx) * src[static_cast<size_t>(y1) * src_hw + x0] +
                             wx * src[static_cast<size_t>(y1) * src_hw + x1]);
      dst[static_cast<size_t>(y) * dst_hw + x] = static_cast<float>(v);
    }
  return dst;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Load an IDX image/label file pair. Pixels are normalized to [0,1]; images
/// are resampled to target_hw when it differs from the stored size (0 keeps
/// the stored size).
inline Dataset load_idx_dataset(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                int target_hw = 0) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("idx: cannot open image file " + images_path.string());
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw std::runtime_error("idx: cannot open label file " + labels_path.string());

  const std::uint32_t img_magic = detail::read_be_u32(imgs, "image magic");
  if (img_magic != kIdxImagesMagic)
    throw std::runtime_error("idx: magic mismatch in " + images_path.string() + ": got " + detail::hex_u32(img_magic) +
                             ", expected " + detail::hex_u32(kIdxImagesMagic));
  const std::uint32_t lab_magic = detail::read_be_u32(labs, "label magic");
  if (lab_magic != kIdxLabelsMagic)
    throw std::runtime_error("idx: magic mismatch in " + labels_path.string() + ": got " + detail::hex_u32(lab_magic) +
                             ", expected " + detail::hex_u32(kIdxLabelsMagic));

  const std::uint32_t n_images = detail::read_be_u32(imgs, "image count");
  const std::uint32_t rows = detail::read_be_u32(imgs, "image rows");
  const std::uint32_t cols = detail::read_be_u32(imgs, "image cols");
  const std::uint32_t n_labels = detail::read_be_u32(labs, "label count");
  if (n_images != n_labels)
    throw std::runtime_error("idx: length mismatch: " + std::to_string(n_images) + " images vs " +
                             std::to_string(n_labels) + " labels");
  if (rows != cols) throw std::runtime_error("idx: only square images are supported");

  const size_t pixel_count = static_cast<size_t>(n_images) * rows * cols;
  std::vector<unsigned char> pixels(pixel_count);
  imgs.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixel_count));
  if (static_cast<size_t>(imgs.gcount()) != pixel_count)
    throw std::runtime_error("idx: truncated image data in " + images_path.string() + ": expected " +
                             std::to_string(pixel_count) + " bytes, got " + std::to_string(imgs.gcount()));
  std::vector<unsigned char> raw_labels(n_labels);
  labs.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n_labels));
  if (static_cast<size_t>(labs.gcount()) != n_labels)
    throw std::runtime_error("idx: truncated label data in " + labels_path.string() + ": expected " +
                             std::to_string(n_labels) + " bytes, got " + std::to_string(labs.gcount()));

  Dataset d;
  d.channels = 1;
  d.hw = target_hw > 0 ? target_hw : static_cast<int>(rows);
  const int src_hw = static_cast<int>(rows);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    std::vector<float> img(static_cast<size_t>(src_hw) * src_hw);
    const unsigned char* p = pixels.data() + static_cast<size_t>(i) * src_hw * src_hw;
    for (size_t j = 0; j < img.size(); ++j) img[j] = p[j] / 255.0f;
    d.images.push_back(detail::resize_bilinear(img, src_hw, d.hw));
    d.labels.push_back(raw_labels[i]);
  }
  return d;
}

}  // namespace evnas
