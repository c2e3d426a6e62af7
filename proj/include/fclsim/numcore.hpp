#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fclsim {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or layout mismatch between values that must agree.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Zero-norm vector fed to a cosine-based quantity.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unsatisfiable request.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; carries the byte offset where parsing failed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Row-major dense matrix used for batched activations and features.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct TensorSlot {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size() const;
};

/// Ordered description of how a flat vector maps onto named tensors.
class Layout {
 public:
  Layout() = default;
  void add(std::string name, std::vector<std::size_t> shape);

  std::size_t total() const noexcept { return total_; }
  const std::vector<TensorSlot>& slots() const noexcept { return slots_; }
  const TensorSlot& slot(std::string_view name) const;
  bool contains(std::string_view name) const;

  bool operator==(const Layout& other) const;

 private:
  std::vector<TensorSlot> slots_;
  std::size_t total_ = 0;
};

/// Flat parameter vector tagged with its tensor layout. Combining two vectors
/// requires identical layouts.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::shared_ptr<const Layout> layout);
  ParamVector(std::shared_ptr<const Layout> layout, std::vector<double> values);

  /// Layout-free vector with a single tensor "flat" of the given length.
  static ParamVector flat(std::vector<double> values);

  std::size_t size() const noexcept { return values_.size(); }
  const Layout& layout() const { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const noexcept { return layout_; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> tensor(std::string_view name);
  std::span<const double> tensor(std::string_view name) const;

  bool same_layout(const ParamVector& other) const;
  void require_same_layout(const ParamVector& other, const char* context) const;

  ParamVector zeros_like() const;
  bool operator==(const ParamVector& other) const;

  /// In-place this += a * x.
  void add_scaled(double a, const ParamVector& x);
  void scale(double a);

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<double> values_;
};

struct GradResult {
  double loss = 0.0;
  ParamVector grad;
};

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Mixes (seed, stream id) into a single 64-bit state (SplitMix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream_id);

/// Deterministic random stream keyed by (seed, stream id). Child streams are
/// derived by mixing further tags into the stream id, so every client and
/// round can own an independent stream without shared state.
class RngStream {
 public:
  using result_type = std::mt19937_64::result_type;

  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }

  RngStream derive(std::uint64_t tag) const;
  RngStream derive(std::uint64_t tag_a, std::uint64_t tag_b) const;

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  std::size_t uniform_index(std::size_t n);  // [0, n)
  bool bernoulli(double p);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

double dot(std::span<const double> u, std::span<const double> v);
double norm2(std::span<const double> u);

/// Cosine similarity clamped to [-1, 1]. Throws DegenerateError on zero-norm input.
double cosine_sim(std::span<const double> u, std::span<const double> v);

/// Returns a*x + y. Throws StructuralError on layout mismatch.
ParamVector axpy_params(double a, const ParamVector& x, const ParamVector& y);

double l2_norm(const ParamVector& x);

using LossFn = std::function<double(const ParamVector&)>;

/// Central-difference gradient check over n_probes random coordinates.
/// Returns the maximum relative error; below magnitude 1e-8 the absolute
/// error is used instead.
double finite_diff_check(const LossFn& loss_fn, const ParamVector& params,
                         const ParamVector& analytic_grad, double eps, int n_probes,
                         RngStream& rng);

bool all_finite(std::span<const double> v);

}  // namespace fclsim
