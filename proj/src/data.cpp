#include "ddi/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ddi/errors.hpp"

namespace ddi {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  DDI_CHECK_T(DataError, in.good(), "cannot open '", path, "'");
  in.seekg(0, std::ios::end);
  auto len = static_cast<int64_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(len));
  in.read(reinterpret_cast<char*>(bytes.data()), len);
  DDI_CHECK_T(DataError, in.good(), "short read on '", path, "'");
  return bytes;
}

uint32_t read_be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void write_le32(std::ofstream& out, uint32_t v) {
  uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                  static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_le32(const std::vector<uint8_t>& b, size_t& off,
                   const std::string& path) {
  DDI_CHECK_T(DataError, off + 4 <= b.size(), "'", path, "' is truncated");
  uint32_t v = static_cast<uint32_t>(b[off]) |
               (static_cast<uint32_t>(b[off + 1]) << 8) |
               (static_cast<uint32_t>(b[off + 2]) << 16) |
               (static_cast<uint32_t>(b[off + 3]) << 24);
  off += 4;
  return v;
}

uint64_t derive_seed(uint64_t root, const std::string& name) {
  return Rng::derive(root, name);
}

constexpr int kCifarDim = 32;
constexpr int kCifarRecord = 1 + 3 * kCifarDim * kCifarDim;

void append_cifar_batch(Dataset& ds, const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  DDI_CHECK_T(DataError, !bytes.empty() && bytes.size() % kCifarRecord == 0,
              "'", path, "': size ", bytes.size(),
              " is not a multiple of the ", kCifarRecord, "-byte record");
  int64_t n = static_cast<int64_t>(bytes.size()) / kCifarRecord;
  int64_t plane = kCifarDim * kCifarDim;
  for (int64_t r = 0; r < n; ++r) {
    const uint8_t* rec = bytes.data() + r * kCifarRecord;
    DDI_CHECK_T(DataError, rec[0] < 10, "'", path, "': record ", r,
                " has label ", int(rec[0]), " outside [0,9]");
    ds.labels.push_back(rec[0]);
    // channel-major (R plane, G plane, B plane; row-major) -> HWC
    for (int y = 0; y < kCifarDim; ++y)
      for (int x = 0; x < kCifarDim; ++x)
        for (int c = 0; c < 3; ++c)
          ds.images.push_back(rec[1 + c * plane + y * kCifarDim + x]);
  }
}

}  // namespace

void Dataset::validate() const {
  DDI_CHECK_T(DataError, channels >= 1 && height >= 1 && width >= 1,
              "dataset has degenerate dimensions");
  DDI_CHECK_T(DataError,
              images.size() == labels.size() * static_cast<size_t>(sample_bytes()),
              "dataset image bytes (", images.size(),
              ") do not match label count (", labels.size(), ")");
  DDI_CHECK_T(DataError, difficulty.empty() || difficulty.size() == labels.size(),
              "difficulty metadata count mismatch");
}

Dataset load_cifar10(const std::string& path) {
  return load_cifar10(std::vector<std::string>{path});
}

Dataset load_cifar10(const std::vector<std::string>& paths) {
  DDI_CHECK_T(DataError, !paths.empty(), "no batch files given");
  Dataset ds;
  ds.channels = 3;
  ds.height = kCifarDim;
  ds.width = kCifarDim;
  for (const auto& p : paths) append_cifar_batch(ds, p);
  ds.validate();
  return ds;
}

Dataset load_mnist_idx(const std::string& images_path,
                       const std::string& labels_path) {
  std::vector<uint8_t> ib = read_file(images_path);
  DDI_CHECK_T(DataError, ib.size() >= 16, "'", images_path,
              "': too short for an IDX image header");
  uint32_t magic = read_be32(ib.data());
  DDI_CHECK_T(DataError, magic == 0x803, "'", images_path,
              "': IDX magic ", magic, " is not 2051 (unsigned-byte images)");
  uint32_t n = read_be32(ib.data() + 4);
  uint32_t rows = read_be32(ib.data() + 8);
  uint32_t cols = read_be32(ib.data() + 12);
  DDI_CHECK_T(DataError,
              ib.size() == 16 + static_cast<size_t>(n) * rows * cols,
              "'", images_path, "': payload does not match header counts");

  std::vector<uint8_t> lb = read_file(labels_path);
  DDI_CHECK_T(DataError, lb.size() >= 8, "'", labels_path,
              "': too short for an IDX label header");
  uint32_t lmagic = read_be32(lb.data());
  DDI_CHECK_T(DataError, lmagic == 0x801, "'", labels_path,
              "': IDX magic ", lmagic, " is not 2049 (unsigned-byte labels)");
  uint32_t ln = read_be32(lb.data() + 4);
  DDI_CHECK_T(DataError, lb.size() == 8 + static_cast<size_t>(ln), "'",
              labels_path, "': payload does not match header count");
  DDI_CHECK_T(DataError, ln == n, "image file has ", n, " records but label file has ",
              ln);

  Dataset ds;
  ds.channels = 1;
  ds.height = static_cast<int>(rows);
  ds.width = static_cast<int>(cols);
  ds.images.assign(ib.begin() + 16, ib.end());
  ds.labels.reserve(n);
  for (uint32_t i = 0; i < n; ++i) ds.labels.push_back(lb[8 + i]);
  ds.validate();
  return ds;
}

Dataset synthetic_easy_hard(int n, uint64_t seed) {
  DDI_CHECK_T(ConfigError, n >= 2 && n % 2 == 0,
              "synthetic dataset size must be even, got ", n);
  constexpr int kDim = 16;
  Dataset ds;
  ds.channels = 1;
  ds.height = kDim;
  ds.width = kDim;
  ds.images.reserve(static_cast<size_t>(n) * kDim * kDim);
  ds.labels.reserve(n);
  ds.difficulty.reserve(n);

  for (int i = 0; i < n; ++i) {
    int cls = i % 2;            // exactly n/2 per class
    int hard = (i / 2) % 2;     // difficulty alternates within each class
    Rng rng = Rng::substream(seed, "synthetic-" + std::to_string(i));

    float bg = hard ? 70.f + rng.uniform(-10.f, 10.f)
                    : 30.f + rng.uniform(-10.f, 10.f);
    float fg = hard ? 150.f + rng.uniform(-15.f, 15.f)
                    : 215.f + rng.uniform(-15.f, 15.f);
    float cx = 7.5f + rng.uniform(-1.5f, 1.5f);
    float cy = 7.5f + rng.uniform(-1.5f, 1.5f);
    float r = rng.uniform(3.2f, 5.0f);

    float img[kDim][kDim];
    for (int y = 0; y < kDim; ++y)
      for (int x = 0; x < kDim; ++x) {
        bool inside;
        if (cls == 0) {
          inside = std::max(std::abs(x - cx), std::abs(y - cy)) <= r;
        } else {
          float dx = x - cx, dy = y - cy;
          inside = dx * dx + dy * dy <= r * r;
        }
        img[y][x] = inside ? fg : bg;
      }

    if (hard) {
      // Separable Gaussian blur, replicated edges.
      float sigma = rng.uniform(1.3f, 2.2f);
      constexpr int kRad = 4;
      float w[2 * kRad + 1];
      float wsum = 0.f;
      for (int d = -kRad; d <= kRad; ++d) {
        w[d + kRad] = std::exp(-0.5f * d * d / (sigma * sigma));
        wsum += w[d + kRad];
      }
      for (float& v : w) v /= wsum;
      float tmp[kDim][kDim];
      for (int y = 0; y < kDim; ++y)
        for (int x = 0; x < kDim; ++x) {
          float acc = 0.f;
          for (int d = -kRad; d <= kRad; ++d)
            acc += w[d + kRad] * img[y][std::clamp(x + d, 0, kDim - 1)];
          tmp[y][x] = acc;
        }
      for (int y = 0; y < kDim; ++y)
        for (int x = 0; x < kDim; ++x) {
          float acc = 0.f;
          for (int d = -kRad; d <= kRad; ++d)
            acc += w[d + kRad] * tmp[std::clamp(y + d, 0, kDim - 1)][x];
          img[y][x] = acc;
        }
    }

    float noise = hard ? 25.f : 4.f;
    for (int y = 0; y < kDim; ++y)
      for (int x = 0; x < kDim; ++x) {
        float v = img[y][x] + rng.normal(0.f, noise);
        ds.images.push_back(
            static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
      }
    ds.labels.push_back(cls);
    ds.difficulty.push_back(static_cast<uint8_t>(hard));
  }
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  DDI_CHECK_T(DataError, out.good(), "cannot open '", path, "' for writing");
  out.write("DDS1", 4);
  write_le32(out, 1);  // container version
  write_le32(out, static_cast<uint32_t>(ds.size()));
  write_le32(out, static_cast<uint32_t>(ds.channels));
  write_le32(out, static_cast<uint32_t>(ds.height));
  write_le32(out, static_cast<uint32_t>(ds.width));
  write_le32(out, ds.difficulty.empty() ? 0u : 1u);
  write_le32(out, static_cast<uint32_t>(ds.split.size()));
  out.write(ds.split.data(), static_cast<std::streamsize>(ds.split.size()));
  for (int lab : ds.labels) write_le32(out, static_cast<uint32_t>(lab));
  out.write(reinterpret_cast<const char*>(ds.images.data()),
            static_cast<std::streamsize>(ds.images.size()));
  if (!ds.difficulty.empty())
    out.write(reinterpret_cast<const char*>(ds.difficulty.data()),
              static_cast<std::streamsize>(ds.difficulty.size()));
  out.flush();
  DDI_CHECK_T(DataError, out.good(), "write to '", path, "' failed");
}

Dataset load_dataset(const std::string& path) {
  std::vector<uint8_t> b = read_file(path);
  size_t off = 0;
  DDI_CHECK_T(DataError, b.size() >= 4 && std::memcmp(b.data(), "DDS1", 4) == 0,
              "'", path, "' is not a dataset container (bad magic)");
  off = 4;
  uint32_t version = read_le32(b, off, path);
  DDI_CHECK_T(DataError, version == 1, "'", path,
              "': unsupported container version ", version);
  Dataset ds;
  uint32_t n = read_le32(b, off, path);
  ds.channels = static_cast<int>(read_le32(b, off, path));
  ds.height = static_cast<int>(read_le32(b, off, path));
  ds.width = static_cast<int>(read_le32(b, off, path));
  uint32_t has_diff = read_le32(b, off, path);
  uint32_t slen = read_le32(b, off, path);
  DDI_CHECK_T(DataError, off + slen <= b.size(), "'", path, "' is truncated");
  ds.split.assign(b.begin() + off, b.begin() + off + slen);
  off += slen;
  ds.labels.reserve(n);
  for (uint32_t i = 0; i < n; ++i)
    ds.labels.push_back(static_cast<int>(read_le32(b, off, path)));
  size_t img_bytes = static_cast<size_t>(n) * ds.sample_bytes();
  DDI_CHECK_T(DataError, off + img_bytes + (has_diff ? n : 0) == b.size(), "'",
              path, "' payload size mismatch");
  ds.images.assign(b.begin() + off, b.begin() + off + img_bytes);
  off += img_bytes;
  if (has_diff) ds.difficulty.assign(b.begin() + off, b.begin() + off + n);
  ds.validate();
  return ds;
}

Dataset subset(const Dataset& ds, const std::vector<int64_t>& indices) {
  ds.validate();
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.split = ds.split;
  int64_t sb = ds.sample_bytes();
  for (int64_t idx : indices) {
    DDI_CHECK_T(DataError, idx >= 0 && idx < ds.size(), "subset index ", idx,
                " out of range [0,", ds.size(), ")");
    out.labels.push_back(ds.labels[idx]);
    out.images.insert(out.images.end(), ds.images.begin() + idx * sb,
                      ds.images.begin() + (idx + 1) * sb);
    if (!ds.difficulty.empty()) out.difficulty.push_back(ds.difficulty[idx]);
  }
  out.validate();
  return out;
}

std::vector<int64_t> sample_indices(int64_t n, int64_t k, Rng& rng) {
  DDI_CHECK_T(ConfigError, k >= 0 && k <= n, "cannot sample ", k, " of ", n);
  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  for (int64_t i = 0; i < k; ++i)
    std::swap(idx[i], idx[rng.uniform_int(i, n - 1)]);
  idx.resize(k);
  return idx;
}

NormStats compute_norm_stats(const Dataset& ds) {
  ds.validate();
  DDI_CHECK_T(DataError, ds.size() > 0, "cannot compute stats of an empty dataset");
  int c = ds.channels;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  int64_t per_channel = ds.size() * ds.height * ds.width;
  const uint8_t* p = ds.images.data();
  for (int64_t i = 0; i < ds.size() * ds.height * static_cast<int64_t>(ds.width);
       ++i)
    for (int ch = 0; ch < c; ++ch) {
      double v = *p++ / 255.0;
      sum[ch] += v;
      sq[ch] += v * v;
    }
  NormStats st;
  for (int ch = 0; ch < c; ++ch) {
    double mean = sum[ch] / per_channel;
    double var = std::max(0.0, sq[ch] / per_channel - mean * mean);
    double sd = std::sqrt(var);
    st.mean.push_back(static_cast<float>(mean));
    st.stddev.push_back(sd < 1e-6 ? 1.f : static_cast<float>(sd));
  }
  return st;
}

Tensor normalize(const Tensor& x, const NormStats& stats) {
  DDI_CHECK(x.rank() == 4 && x.dim(1) == static_cast<int64_t>(stats.mean.size()),
            "normalize: input ", shape_str(x.shape()), " vs ",
            stats.mean.size(), "-channel stats");
  Tensor out(x.shape());
  int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* src = x.data() + (i * c + ch) * plane;
      float* dst = out.data() + (i * c + ch) * plane;
      // Double internals keep the round trip within 1 ULP on the unit scale.
      double m = stats.mean[ch], s = stats.stddev[ch];
      for (int64_t j = 0; j < plane; ++j)
        dst[j] = static_cast<float>((src[j] - m) / s);
    }
  return out;
}

Tensor denormalize(const Tensor& x, const NormStats& stats) {
  DDI_CHECK(x.rank() == 4 && x.dim(1) == static_cast<int64_t>(stats.mean.size()),
            "denormalize: input ", shape_str(x.shape()), " vs ",
            stats.mean.size(), "-channel stats");
  Tensor out(x.shape());
  int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* src = x.data() + (i * c + ch) * plane;
      float* dst = out.data() + (i * c + ch) * plane;
      double m = stats.mean[ch], s = stats.stddev[ch];
      for (int64_t j = 0; j < plane; ++j)
        dst[j] = static_cast<float>(src[j] * s + m);
    }
  return out;
}

BatchIterator::BatchIterator(const Dataset& ds, const NormStats& stats,
                             int batch_size, bool shuffle, uint64_t seed,
                             Augment augment)
    : ds_(&ds),
      stats_(stats),
      batch_size_(batch_size),
      augment_(augment),
      aug_rng_(Rng::substream(seed, "augment")) {
  ds.validate();
  DDI_CHECK_T(DataError, ds.size() > 0, "cannot iterate an empty dataset");
  DDI_CHECK_T(ConfigError, batch_size >= 1 && batch_size <= ds.size(),
              "batch size ", batch_size, " exceeds dataset size ", ds.size());
  order_.resize(ds.size());
  for (int64_t i = 0; i < ds.size(); ++i) order_[i] = i;
  if (shuffle) {
    Rng srng = Rng::substream(seed, "shuffle");
    for (int64_t i = ds.size() - 1; i > 0; --i)
      std::swap(order_[i], order_[srng.uniform_int(0, i)]);
  }
}

int64_t BatchIterator::batches_per_epoch() const {
  return (ds_->size() + batch_size_ - 1) / batch_size_;
}

bool BatchIterator::next(Batch& out) {
  if (cursor_ >= ds_->size()) return false;
  int64_t b = std::min<int64_t>(batch_size_, ds_->size() - cursor_);
  int c = ds_->channels, h = ds_->height, w = ds_->width;
  Tensor imgs({b, c, h, w}, 0.f);
  out.labels.assign(static_cast<size_t>(b), 0);
  out.indices.assign(static_cast<size_t>(b), 0);

  std::vector<float> raw(static_cast<size_t>(c) * h * w);
  for (int64_t s = 0; s < b; ++s) {
    int64_t idx = order_[cursor_ + s];
    out.indices[s] = idx;
    out.labels[s] = ds_->labels[idx];
    const uint8_t* src = ds_->images.data() + idx * ds_->sample_bytes();
    // HWC bytes -> CHW floats on the [0,1] scale.
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch)
          raw[(static_cast<size_t>(ch) * h + y) * w + x] =
              src[(static_cast<size_t>(y) * w + x) * c + ch] / 255.f;

    int dy = 0, dx = 0;
    bool flip = false;
    if (augment_ == Augment::crop_flip) {
      // 4-pixel black pad + random crop back to size + coin-flip mirror.
      dy = static_cast<int>(aug_rng_.uniform_int(0, 8));
      dx = static_cast<int>(aug_rng_.uniform_int(0, 8));
      flip = aug_rng_.uniform01() < 0.5;
    }
    float* dst = imgs.data() + s * c * h * w;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int sy = y + dy - 4, sx = x + dx - 4;
          if (flip) sx = w - 1 - sx;
          float v = (augment_ == Augment::crop_flip)
                        ? ((sy >= 0 && sy < h && sx >= 0 && sx < w)
                               ? raw[(static_cast<size_t>(ch) * h + sy) * w + sx]
                               : 0.f)
                        : raw[(static_cast<size_t>(ch) * h + y) * w + x];
          dst[(static_cast<size_t>(ch) * h + y) * w + x] = v;
        }
  }
  out.images = stats_.empty() ? imgs : normalize(imgs, stats_);
  cursor_ += b;
  return true;
}

bool is_known_preset(const std::string& name) {
  return name == "synthetic" || name == "mnist-5k" || name == "cifar-5k";
}

SplitPair load_preset(const std::string& name, const std::string& data_root,
                      uint64_t seed) {
  SplitPair sp;
  if (name == "synthetic") {
    sp.train = synthetic_easy_hard(4000, derive_seed(seed, "synthetic-train"));
    sp.test = synthetic_easy_hard(1000, derive_seed(seed, "synthetic-test"));
  } else if (name == "mnist-5k") {
    std::string dir = data_root + "/mnist/";
    Dataset train = load_mnist_idx(dir + "train-images-idx3-ubyte",
                                   dir + "train-labels-idx1-ubyte");
    Dataset test = load_mnist_idx(dir + "t10k-images-idx3-ubyte",
                                  dir + "t10k-labels-idx1-ubyte");
    Rng r1(derive_seed(seed, "preset-train")), r2(derive_seed(seed, "preset-test"));
    sp.train = subset(train, sample_indices(train.size(), 5000, r1));
    sp.test = subset(test, sample_indices(test.size(), 1000, r2));
  } else if (name == "cifar-5k") {
    std::string dir = data_root + "/cifar-10-batches-bin/";
    std::vector<std::string> files;
    for (int i = 1; i <= 5; ++i)
      files.push_back(dir + "data_batch_" + std::to_string(i) + ".bin");
    Dataset train = load_cifar10(files);
    Dataset test = load_cifar10(dir + "test_batch.bin");
    Rng r1(derive_seed(seed, "preset-train")), r2(derive_seed(seed, "preset-test"));
    sp.train = subset(train, sample_indices(train.size(), 5000, r1));
    sp.test = subset(test, sample_indices(test.size(), 1000, r2));
  } else {
    fail<ConfigError>("unknown dataset preset '", name,
                      "' (known: synthetic, mnist-5k, cifar-5k)");
  }
  sp.train.split = "train";
  sp.test.split = "test";
  return sp;
}

}  // namespace ddi
