#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pcrobust/tensor.hpp"

namespace pcrobust {

/// Images in [0,1] paired with integer class labels.
struct LabeledDataset {
  Tensor images;            // (N, C, H, W)
  std::vector<int> labels;  // N values in [0, num_classes)
  int num_classes = 0;
  std::string split;        // "train" or "test"

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  void validate() const;
};

class IdxError : public std::runtime_error {
 public:
  enum class Code { bad_magic, dim_mismatch, truncated, io };

  IdxError(Code code, const std::string& message) : std::runtime_error(message), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

/// Parses a big-endian IDX image/label file pair. Bytes are scaled by 1/255.
/// Gzip-compressed files are accepted transparently. The class count is
/// inferred as max label + 1.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes the canonical uncompressed IDX pair (values rounded back to
/// bytes); provided so tests can build fixtures and check round-trips.
void write_idx(const LabeledDataset& ds, const std::string& images_path,
               const std::string& labels_path);

/// K Gaussian blobs in [0,1]^dim around fixed anchors. Anchors depend only
/// on (K, dim); the seed drives the noise and sample order.
LabeledDataset synth_blobs(int num_classes, int n_per_class, int dim, double spread,
                           std::uint64_t seed);

/// Class-stratified random subset of n samples (per-class counts differ by
/// at most 1 when the source is balanced and n is feasible).
LabeledDataset subset(const LabeledDataset& ds, std::size_t n, std::uint64_t seed);

/// Batch index plan for one epoch: a seeded shuffle split into contiguous
/// chunks, covering every sample exactly once.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                              std::uint64_t shuffle_seed);

/// Materializes the selected samples as an images tensor plus labels.
std::pair<Tensor, std::vector<int>> take(const LabeledDataset& ds,
                                         const std::vector<std::size_t>& indices);

/// First n samples in stored order (cheap deterministic slice).
std::pair<Tensor, std::vector<int>> head(const LabeledDataset& ds, std::size_t n);

}  // namespace pcrobust
