#pragma once

// Dataset ingestion (CIFAR-10 binary batches, MNIST IDX), a synthetic
// easy/hard two-class task for controller experiments, deterministic
// batching with optional crop/flip augmentation, and input normalization.

#include <cstdint>
#include <string>
#include <vector>

#include "ddi/rng.hpp"
#include "ddi/tensor.hpp"

namespace ddi {

// Per-channel statistics of pixel intensities on the [0,1] scale.
struct NormStats {
  std::vector<float> mean;
  std::vector<float> stddev;

  bool empty() const { return mean.empty(); }
};

struct Dataset {
  int channels = 0;
  int height = 0;
  int width = 0;
  // HWC byte layout per sample, samples back to back.
  std::vector<uint8_t> images;
  std::vector<int> labels;
  // Ground-truth difficulty when the generator knows it (0 easy, 1 hard);
  // empty otherwise.
  std::vector<uint8_t> difficulty;
  std::string split;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t sample_bytes() const {
    return static_cast<int64_t>(channels) * height * width;
  }
  void validate() const;
};

// One CIFAR-10 binary batch file: 3073-byte records, channel-major pixels.
Dataset load_cifar10(const std::string& path);
Dataset load_cifar10(const std::vector<std::string>& paths);

// MNIST IDX pair: images magic 0x803, labels magic 0x801, big-endian fields.
Dataset load_mnist_idx(const std::string& images_path,
                       const std::string& labels_path);

// Two-class 16x16 grayscale task: squares (class 0) versus disks (class 1).
// Half of each class is rendered sharp at high contrast ("easy"), half with
// heavy Gaussian blur and noise ("hard"); `difficulty` records the truth.
Dataset synthetic_easy_hard(int n, uint64_t seed);

// Simple container for dataset export: header + raw bytes, little-endian.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Seeded sampling without replacement (order = draw order).
Dataset subset(const Dataset& ds, const std::vector<int64_t>& indices);
std::vector<int64_t> sample_indices(int64_t n, int64_t k, Rng& rng);

// Per-channel mean/std over every pixel of the dataset on the [0,1] scale.
// Degenerate (constant) channels get a unit standard deviation.
NormStats compute_norm_stats(const Dataset& ds);

// x holds [0,1]-scaled pixels, NCHW. normalize maps channel c through
// (x - mean[c]) / stddev[c]; denormalize inverts it.
Tensor normalize(const Tensor& x, const NormStats& stats);
Tensor denormalize(const Tensor& x, const NormStats& stats);

enum class Augment { none, crop_flip };

struct Batch {
  Tensor images;                 // [B, C, H, W], normalized
  std::vector<int> labels;
  std::vector<int64_t> indices;  // positions in the source dataset
};

// Single-epoch batch stream. Shuffling is a seeded Fisher-Yates pass;
// crop_flip pads 4 black pixels, crops back at a random offset, and flips
// horizontally with probability 1/2 (draws consumed in sample order).
// The final batch may be short; an epoch visits every sample exactly once.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, const NormStats& stats, int batch_size,
                bool shuffle, uint64_t seed, Augment augment);

  // Fills `out` and returns true, or returns false at epoch end.
  bool next(Batch& out);

  int64_t batches_per_epoch() const;

 private:
  const Dataset* ds_;
  NormStats stats_;
  std::vector<int64_t> order_;
  int batch_size_;
  Augment augment_;
  Rng aug_rng_;
  int64_t cursor_ = 0;
};

// Named desk-scale presets: "synthetic" (4000 train / 1000 test, generated),
// "mnist-5k" and "cifar-5k" (5000 train / 1000 test drawn by seeded sampling
// from files under `data_root`). Missing files raise DataError naming them.
struct SplitPair {
  Dataset train;
  Dataset test;
};
SplitPair load_preset(const std::string& name, const std::string& data_root,
                      uint64_t seed);
bool is_known_preset(const std::string& name);

}  // namespace ddi
