#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fclsim/numcore.hpp"

namespace fclsim {

struct Shape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const noexcept { return channels * height * width; }
  bool operator==(const Shape&) const = default;
};

/// One image: CHW pixels in [0, 1] with an optional class label.
struct Example {
  std::vector<double> pixels;
  std::optional<int> label;

  double at(const Shape& s, std::size_t c, std::size_t r, std::size_t col) const {
    return pixels[(c * s.height + r) * s.width + col];
  }
  bool operator==(const Example&) const = default;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(Shape shape, std::optional<int> n_classes);

  const Shape& shape() const noexcept { return shape_; }
  std::optional<int> n_classes() const noexcept { return n_classes_; }
  std::size_t size() const noexcept { return examples_.size(); }
  bool empty() const noexcept { return examples_.empty(); }
  bool labeled() const;

  const Example& operator[](std::size_t i) const { return examples_[i]; }
  const std::vector<Example>& examples() const noexcept { return examples_; }

  /// Appends after checking shape, pixel range and label bounds.
  void push_back(Example ex);

  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<int> labels() const;

  /// Stacks the pixels of the selected examples as rows of a matrix.
  Matrix to_matrix() const;
  Matrix to_matrix(std::span<const std::size_t> indices) const;

  bool operator==(const Dataset&) const = default;

 private:
  Shape shape_;
  std::optional<int> n_classes_;
  std::vector<Example> examples_;
};

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int n_classes = 10;
  int n_per_class = 50;
  Shape shape{1, 16, 16};
  double class_separation = 0.6;
  double noise = 0.08;
  std::uint64_t seed = 0;
  /// Seed for the class templates. Splits drawn from the same distribution
  /// share template_seed and differ in seed.
  std::uint64_t template_seed = 0;
};

/// Smooth per-class template images plus i.i.d. Gaussian pixel noise.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Convenience overload matching the positional parameter list; templates are
/// drawn from the same seed.
Dataset generate_synthetic(int n_classes, int n_per_class, Shape shape, double class_separation,
                           double noise, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Binary dataset file ("FCLD", little endian)
// ---------------------------------------------------------------------------

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);

/// u8 quantization applied by the file format.
double quantize_pixel(double v);

// ---------------------------------------------------------------------------
// Augmentation and triggers
// ---------------------------------------------------------------------------

struct AugmentPolicy {
  bool crop = false;
  double crop_min_area = 0.5;
  bool flip = false;
  double noise_sigma = 0.0;
  double brightness = 0.0;  // max per-channel additive jitter

  static AugmentPolicy none() { return {}; }
  static AugmentPolicy simclr_lite();
};

/// Crop-and-resize, horizontal flip, Gaussian noise, brightness jitter, in that
/// order; output clamped to [0, 1].
Example augment(const Example& x, const Shape& shape, RngStream& rng, const AugmentPolicy& policy);

struct Trigger {
  Shape patch_shape;           // channels must match the image
  std::vector<double> patch;   // CHW
  std::size_t row = 0;
  std::size_t col = 0;
  int id = 0;

  /// White square of the given side anchored at (row, col).
  static Trigger white_square(const Shape& image, std::size_t side, std::size_t row, std::size_t col,
                              int id = 0);
  /// Default trigger: white square of side ceil(min(H, W) / 8) at the bottom-right corner.
  static Trigger default_for(const Shape& image, int id = 0);

  bool fits(const Shape& image) const;
};

Example embed_trigger(const Example& x, const Shape& shape, const Trigger& e);
Dataset embed_trigger(const Dataset& ds, const Trigger& e);

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

using Partition = std::map<int, std::vector<std::size_t>>;

struct PartitionMode {
  enum class Kind { iid, dirichlet } kind = Kind::iid;
  double alpha = 0.5;

  static PartitionMode iid() { return {Kind::iid, 0.0}; }
  static PartitionMode dirichlet(double alpha) { return {Kind::dirichlet, alpha}; }
};

Partition partition(const Dataset& ds, int n_clients, const PartitionMode& mode, std::uint64_t seed);

/// Checks disjointness, non-emptiness and that every index is < n.
bool partition_is_valid(const Partition& p, std::size_t n);

}  // namespace fclsim
