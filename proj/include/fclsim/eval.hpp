#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "fclsim/data.hpp"
#include "fclsim/model.hpp"
#include "fclsim/numcore.hpp"

namespace fclsim {

struct ProbeConfig {
  int epochs = 500;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  int knn_k = 200;
  double knn_temperature = 0.07;
  int eval_batch = 256;
  /// Leave target-class test images out of the ASR denominator.
  bool asr_exclude_target = false;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Weighted KNN
// ---------------------------------------------------------------------------

/// Predicted labels for each query row. Neighbours are the top-k bank rows by
/// cosine similarity (ties: lower bank index first); class score is the sum of
/// exp(sim / temperature) over neighbours of that class; ties go to the
/// smallest class index. k is clamped to the bank size.
std::vector<int> knn_predict(const Matrix& bank, std::span<const int> bank_labels, const Matrix& queries,
                             int n_classes, int k, double temperature);

double knn_eval(const ParamVector& params, const ModelArch& arch, const Dataset& bank, const Dataset& queries, int k,
                double temperature);

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

/// Multinomial logistic regression on standardized features.
class LinearProbe {
 public:
  LinearProbe() = default;

  static LinearProbe fit(const Matrix& features, std::span<const int> labels, int n_classes, const ProbeConfig& cfg);

  std::vector<int> predict(const Matrix& features) const;
  double accuracy(const Matrix& features, std::span<const int> labels) const;
  int n_classes() const noexcept { return static_cast<int>(weights_.cols()); }

  /// A probe that ignores its input and always predicts `label`.
  static LinearProbe constant(std::size_t feature_dim, int n_classes, int label);

 private:
  Matrix standardize(const Matrix& features) const;

  Eigen::RowVectorXd mean_;
  Eigen::RowVectorXd inv_std_;
  Matrix weights_;  // d x C
  Eigen::RowVectorXd bias_;
};

struct ProbeResult {
  LinearProbe probe;
  double train_acc = 0.0;
  double test_acc = 0.0;  // main accuracy
};

/// Trains a probe on frozen encoder features of `train`, reports accuracy on `test`.
ProbeResult linear_probe(const ParamVector& params, const ModelArch& arch, const Dataset& train, const Dataset& test,
                         const ProbeConfig& cfg);

// ---------------------------------------------------------------------------
// Attack metrics
// ---------------------------------------------------------------------------

/// Fraction of trigger-embedded test images classified as target_class.
double attack_success_rate(const ParamVector& params, const ModelArch& arch, const LinearProbe& probe,
                           const Dataset& test, const Trigger& trigger, int target_class,
                           bool exclude_target_class = false);

using CdfPoint = std::pair<double, double>;  // (similarity, cumulative fraction)

/// Empirical CDF of cos(h(reference), h(x [+ trigger])) over probe_set.
std::vector<CdfPoint> cosine_cdf(const ParamVector& params, const ModelArch& arch, const Example& reference,
                                 const Dataset& probe_set, const std::optional<Trigger>& trigger);

double cdf_median(const std::vector<CdfPoint>& cdf);

struct EvalReport {
  double main_acc = 0.0;
  std::vector<double> asr;
  double knn_acc = 0.0;
  std::vector<CdfPoint> cdf;
};

}  // namespace fclsim
