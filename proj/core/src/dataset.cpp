#include "pcrobust/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "pcrobust/rng.hpp"

namespace pcrobust {

Shape LabeledDataset::sample_shape() const {
  const Shape& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

void LabeledDataset::validate() const {
  if (!images.defined() || images.shape().size() != 4) {
    throw std::invalid_argument("dataset: images must be (N,C,H,W)");
  }
  if (images.dim(0) != labels.size()) {
    throw std::invalid_argument("dataset: image/label count mismatch");
  }
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset: pixel outside [0,1]");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("dataset: label out of range");
  }
}

namespace {

// gzopen reads plain files unchanged, which gives transparent .gz support.
class GzReader {
 public:
  explicit GzReader(const std::string& path) : path_(path), file_(gzopen(path.c_str(), "rb")) {
    if (!file_) throw IdxError(IdxError::Code::io, "idx: cannot open '" + path + "'");
  }
  ~GzReader() {
    if (file_) gzclose(file_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read_exact(void* dst, std::size_t n) {
    const int got = gzread(file_, dst, static_cast<unsigned>(n));
    if (got < 0) throw IdxError(IdxError::Code::io, "idx: read error in '" + path_ + "'");
    if (static_cast<std::size_t>(got) != n) {
      throw IdxError(IdxError::Code::truncated, "idx: '" + path_ + "' is truncated");
    }
  }

  std::uint32_t read_u32_be() {
    unsigned char b[4];
    read_exact(b, 4);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
  }

  bool at_eof() {
    unsigned char probe;
    const int got = gzread(file_, &probe, 1);
    return got == 0;
  }

 private:
  std::string path_;
  gzFile file_;
};

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  GzReader imgs(images_path);
  const std::uint32_t image_magic = imgs.read_u32_be();
  if (image_magic != kImageMagic) {
    throw IdxError(IdxError::Code::bad_magic,
                   "idx: '" + images_path + "' has magic " + std::to_string(image_magic) +
                       ", expected 2051");
  }
  const std::uint32_t n = imgs.read_u32_be();
  const std::uint32_t h = imgs.read_u32_be();
  const std::uint32_t w = imgs.read_u32_be();

  GzReader labs(labels_path);
  const std::uint32_t label_magic = labs.read_u32_be();
  if (label_magic != kLabelMagic) {
    throw IdxError(IdxError::Code::bad_magic,
                   "idx: '" + labels_path + "' has magic " + std::to_string(label_magic) +
                       ", expected 2049");
  }
  const std::uint32_t n_labels = labs.read_u32_be();
  if (n_labels != n) {
    throw IdxError(IdxError::Code::dim_mismatch,
                   "idx: " + std::to_string(n) + " images vs " + std::to_string(n_labels) +
                       " labels");
  }

  const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
  std::vector<unsigned char> raw(pixels);
  imgs.read_exact(raw.data(), pixels);
  std::vector<double> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i) values[i] = raw[i] / 255.0;

  std::vector<unsigned char> raw_labels(n);
  labs.read_exact(raw_labels.data(), n);

  LabeledDataset ds;
  ds.images = Tensor(Shape{n, 1, h, w}, std::move(values));
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  int k = 0;
  for (int y : ds.labels) k = std::max(k, y + 1);
  ds.num_classes = std::max(k, 2);
  return ds;
}

void write_idx(const LabeledDataset& ds, const std::string& images_path,
               const std::string& labels_path) {
  if (!ds.images.defined() || ds.images.shape().size() != 4 || ds.images.dim(1) != 1) {
    throw std::invalid_argument("write_idx: expects single-channel (N,1,H,W) images");
  }
  const std::size_t n = ds.images.dim(0), h = ds.images.dim(2), w = ds.images.dim(3);
  auto put_u32_be = [](std::FILE* f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v)};
    std::fwrite(b, 1, 4, f);
  };

  std::FILE* fi = std::fopen(images_path.c_str(), "wb");
  if (!fi) throw IdxError(IdxError::Code::io, "idx: cannot open '" + images_path + "'");
  put_u32_be(fi, kImageMagic);
  put_u32_be(fi, static_cast<std::uint32_t>(n));
  put_u32_be(fi, static_cast<std::uint32_t>(h));
  put_u32_be(fi, static_cast<std::uint32_t>(w));
  std::vector<unsigned char> raw(n * h * w);
  const auto& values = ds.images.data();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(values[i] * 255.0));
  }
  std::fwrite(raw.data(), 1, raw.size(), fi);
  std::fclose(fi);

  std::FILE* fl = std::fopen(labels_path.c_str(), "wb");
  if (!fl) throw IdxError(IdxError::Code::io, "idx: cannot open '" + labels_path + "'");
  put_u32_be(fl, kLabelMagic);
  put_u32_be(fl, static_cast<std::uint32_t>(n));
  std::vector<unsigned char> raw_labels(ds.labels.begin(), ds.labels.end());
  std::fwrite(raw_labels.data(), 1, raw_labels.size(), fl);
  std::fclose(fl);
}

namespace {

double splitmix01(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  x = x ^ (x >> 31);
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

}  // namespace

LabeledDataset synth_blobs(int num_classes, int n_per_class, int dim, double spread,
                           std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("synth_blobs: need at least 2 classes");
  if (n_per_class < 1 || dim < 1) throw std::invalid_argument("synth_blobs: bad sizes");
  if (!(spread > 0.0)) throw std::invalid_argument("synth_blobs: spread must be positive");

  // Anchors are a pure function of (class, dim) and sit away from the
  // clipping walls.
  auto anchor = [](int k, int d) {
    return 0.15 + 0.7 * splitmix01(static_cast<std::uint64_t>(k) * 1000003ull +
                                   static_cast<std::uint64_t>(d));
  };

  Rng rng(seed);
  const std::size_t n = static_cast<std::size_t>(num_classes) * n_per_class;
  std::vector<double> values(n * dim);
  std::vector<int> labels(n);
  for (int k = 0; k < num_classes; ++k) {
    for (int s = 0; s < n_per_class; ++s) {
      const std::size_t row = static_cast<std::size_t>(k) * n_per_class + s;
      labels[row] = k;
      for (int d = 0; d < dim; ++d) {
        double v = anchor(k, d) + spread * rng.normal();
        values[row * dim + d] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  // Shuffle rows so batches mix classes.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<double> shuffled(values.size());
  std::vector<int> shuffled_labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(values.begin() + order[i] * dim, dim, shuffled.begin() + i * dim);
    shuffled_labels[i] = labels[order[i]];
  }

  LabeledDataset ds;
  ds.images = Tensor(Shape{n, 1, 1, static_cast<std::size_t>(dim)}, std::move(shuffled));
  ds.labels = std::move(shuffled_labels);
  ds.num_classes = num_classes;
  return ds;
}

LabeledDataset subset(const LabeledDataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) {
    throw std::invalid_argument("subset: requested " + std::to_string(n) + " of " +
                                std::to_string(ds.size()) + " samples");
  }
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  for (auto& bucket : by_class) rng.shuffle(bucket);

  // Round-robin across classes keeps the draw stratified.
  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  std::size_t round = 0;
  while (chosen.size() < n) {
    bool any = false;
    for (int k = 0; k < ds.num_classes && chosen.size() < n; ++k) {
      if (round < by_class[k].size()) {
        chosen.push_back(by_class[k][round]);
        any = true;
      }
    }
    if (!any) break;  // all buckets exhausted (cannot happen when n <= size)
    ++round;
  }
  rng.shuffle(chosen);

  auto [images, labels] = take(ds, chosen);
  LabeledDataset out;
  out.images = std::move(images);
  out.labels = std::move(labels);
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  return out;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t shuffle_seed) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(shuffle_seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return out;
}

std::pair<Tensor, std::vector<int>> take(const LabeledDataset& ds,
                                         const std::vector<std::size_t>& indices) {
  const Shape sample = ds.sample_shape();
  const std::size_t stride = shape_numel(sample);
  Shape out_shape;
  out_shape.push_back(indices.size());
  out_shape.insert(out_shape.end(), sample.begin(), sample.end());
  std::vector<double> values(indices.size() * stride);
  std::vector<int> labels(indices.size());
  const auto& src = ds.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t idx = indices[i];
    if (idx >= ds.size()) throw std::out_of_range("take: sample index out of range");
    std::copy_n(src.begin() + idx * stride, stride, values.begin() + i * stride);
    labels[i] = ds.labels[idx];
  }
  return {Tensor(std::move(out_shape), std::move(values)), std::move(labels)};
}

std::pair<Tensor, std::vector<int>> head(const LabeledDataset& ds, std::size_t n) {
  std::vector<std::size_t> indices(std::min(n, ds.size()));
  std::iota(indices.begin(), indices.end(), 0);
  return take(ds, indices);
}

}  // namespace pcrobust
