#include "fclsim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fclsim {

void ProbeConfig::validate() const {
  if (epochs < 1) throw ConfigError("eval.probe_epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("eval.probe_lr must be > 0");
  if (!(l2 >= 0.0)) throw ConfigError("eval.probe_l2 must be >= 0");
  if (knn_k < 1) throw ConfigError("eval.knn_k must be >= 1");
  if (!(knn_temperature > 0.0)) throw ConfigError("eval.knn_temperature must be > 0");
  if (eval_batch < 1) throw ConfigError("eval.batch must be >= 1");
}

namespace {

Matrix normalize_rows(const Matrix& m, const char* what) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) throw DegenerateError(std::string(what) + ": zero-norm feature at row " + std::to_string(i));
    out.row(i) /= n;
  }
  return out;
}

int infer_classes(const Dataset& ds) {
  if (ds.n_classes()) return *ds.n_classes();
  const auto labels = ds.labels();
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

Matrix features_of(const ParamVector& params, const ModelArch& arch, const Dataset& ds) {
  return encode(params, arch, ds);
}

}  // namespace

std::vector<int> knn_predict(const Matrix& bank, std::span<const int> bank_labels, const Matrix& queries,
                             int n_classes, int k, double temperature) {
  if (bank.rows() == 0) throw ConfigError("knn: empty feature bank");
  if (static_cast<std::size_t>(bank.rows()) != bank_labels.size()) throw StructuralError("knn: label count mismatch");
  if (k < 1) throw ConfigError("knn: k must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("knn: temperature must be > 0");
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), static_cast<std::size_t>(bank.rows()));

  const Matrix sims = normalize_rows(queries, "knn query") * normalize_rows(bank, "knn bank").transpose();
  std::vector<int> out(static_cast<std::size_t>(queries.rows()));
  std::vector<std::size_t> idx(static_cast<std::size_t>(bank.rows()));
  std::vector<double> score(static_cast<std::size_t>(n_classes));
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    std::iota(idx.begin(), idx.end(), 0);
    auto row = sims.row(q);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = row(static_cast<Eigen::Index>(a));
                        const double sb = row(static_cast<Eigen::Index>(b));
                        return sa != sb ? sa > sb : a < b;
                      });
    std::fill(score.begin(), score.end(), 0.0);
    for (std::size_t n = 0; n < kk; ++n) {
      const int label = bank_labels[idx[n]];
      if (label < 0 || label >= n_classes) throw StructuralError("knn: bank label out of range");
      score[static_cast<std::size_t>(label)] += std::exp(row(static_cast<Eigen::Index>(idx[n])) / temperature);
    }
    out[static_cast<std::size_t>(q)] =
        static_cast<int>(std::distance(score.begin(), std::max_element(score.begin(), score.end())));
  }
  return out;
}

double knn_eval(const ParamVector& params, const ModelArch& arch, const Dataset& bank, const Dataset& queries, int k,
                double temperature) {
  if (bank.empty()) throw ConfigError("knn_eval: empty bank");
  if (queries.empty()) return 0.0;
  const auto bank_labels = bank.labels();
  const auto query_labels = queries.labels();
  const int n_classes = std::max(infer_classes(bank), infer_classes(queries));
  const auto pred = knn_predict(features_of(params, arch, bank), bank_labels, features_of(params, arch, queries),
                                n_classes, k, temperature);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == query_labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------

LinearProbe LinearProbe::fit(const Matrix& features, std::span<const int> labels, int n_classes,
                             const ProbeConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = features.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw StructuralError("probe: label count mismatch");
  if (n_classes < 2) throw ConfigError("probe: need at least two classes");
  if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels[0]; })) {
    throw ConfigError("linear probe: training data contains a single class");
  }

  LinearProbe p;
  p.mean_ = features.colwise().mean();
  const Matrix centered = features.rowwise() - p.mean_;
  const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
  p.inv_std_ = var.unaryExpr([](double v) { return v > 1e-12 ? 1.0 / std::sqrt(v) : 0.0; });
  const Matrix x = centered.array().rowwise() * p.inv_std_.array();

  Matrix onehot = Matrix::Zero(n, n_classes);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0 || l >= n_classes) throw StructuralError("probe: label out of range");
    onehot(i, l) = 1.0;
  }

  p.weights_ = Matrix::Zero(features.cols(), n_classes);
  p.bias_ = Eigen::RowVectorXd::Zero(n_classes);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (int it = 0; it < cfg.epochs; ++it) {
    Matrix logits = x * p.weights_;
    logits.rowwise() += p.bias_;
    const Eigen::VectorXd peak = logits.rowwise().maxCoeff();
    Matrix prob = (logits.colwise() - peak).array().exp();
    prob.array().colwise() /= prob.rowwise().sum().array();
    const Matrix diff = (prob - onehot) * inv_n;
    p.weights_ -= cfg.learning_rate * (x.transpose() * diff + cfg.l2 * p.weights_);
    p.bias_ -= cfg.learning_rate * diff.colwise().sum();
  }
  return p;
}

Matrix LinearProbe::standardize(const Matrix& features) const {
  if (features.cols() != mean_.size()) throw StructuralError("probe: feature dimension mismatch");
  return (features.rowwise() - mean_).array().rowwise() * inv_std_.array();
}

std::vector<int> LinearProbe::predict(const Matrix& features) const {
  Matrix logits = standardize(features) * weights_;
  logits.rowwise() += bias_;
  std::vector<int> out(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double LinearProbe::accuracy(const Matrix& features, std::span<const int> labels) const {
  const auto pred = predict(features);
  if (pred.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

LinearProbe LinearProbe::constant(std::size_t feature_dim, int n_classes, int label) {
  LinearProbe p;
  const auto d = static_cast<Eigen::Index>(feature_dim);
  p.mean_ = Eigen::RowVectorXd::Zero(d);
  p.inv_std_ = Eigen::RowVectorXd::Ones(d);
  p.weights_ = Matrix::Zero(d, n_classes);
  p.bias_ = Eigen::RowVectorXd::Zero(n_classes);
  p.bias_(label) = 1.0;
  return p;
}

ProbeResult linear_probe(const ParamVector& params, const ModelArch& arch, const Dataset& train, const Dataset& test,
                         const ProbeConfig& cfg) {
  const int n_classes = std::max(infer_classes(train), infer_classes(test));
  const Matrix f_train = features_of(params, arch, train);
  const auto y_train = train.labels();
  ProbeResult res;
  res.probe = LinearProbe::fit(f_train, y_train, n_classes, cfg);
  res.train_acc = res.probe.accuracy(f_train, y_train);
  if (!test.empty()) res.test_acc = res.probe.accuracy(features_of(params, arch, test), test.labels());
  return res;
}

// ---------------------------------------------------------------------------

double attack_success_rate(const ParamVector& params, const ModelArch& arch, const LinearProbe& probe,
                           const Dataset& test, const Trigger& trigger, int target_class, bool exclude_target_class) {
  Dataset poisoned(test.shape(), test.n_classes());
  for (const auto& ex : test.examples()) {
    if (exclude_target_class && ex.label && *ex.label == target_class) continue;
    poisoned.push_back(embed_trigger(ex, test.shape(), trigger));
  }
  if (poisoned.empty()) return 0.0;
  const auto pred = probe.predict(features_of(params, arch, poisoned));
  const auto hits = std::count(pred.begin(), pred.end(), target_class);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

std::vector<CdfPoint> cosine_cdf(const ParamVector& params, const ModelArch& arch, const Example& reference,
                                 const Dataset& probe_set, const std::optional<Trigger>& trigger) {
  if (probe_set.empty()) throw ConfigError("cosine_cdf: empty probe set");
  const Dataset inputs = trigger ? embed_trigger(probe_set, *trigger) : probe_set;
  const Matrix h = features_of(params, arch, inputs);
  Matrix ref_px(1, static_cast<Eigen::Index>(reference.pixels.size()));
  std::copy(reference.pixels.begin(), reference.pixels.end(), ref_px.row(0).data());
  const Matrix h_ref = encode(params, arch, ref_px);

  std::vector<double> sims;
  sims.reserve(static_cast<std::size_t>(h.rows()));
  const Eigen::RowVectorXd r = h_ref.row(0);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const Eigen::RowVectorXd hi = h.row(i);
    sims.push_back(cosine_sim(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())),
                              std::span<const double>(hi.data(), static_cast<std::size_t>(hi.size()))));
  }
  std::sort(sims.begin(), sims.end());
  std::vector<CdfPoint> cdf;
  cdf.reserve(sims.size());
  const auto n = static_cast<double>(sims.size());
  for (std::size_t i = 0; i < sims.size(); ++i) cdf.emplace_back(sims[i], static_cast<double>(i + 1) / n);
  return cdf;
}

double cdf_median(const std::vector<CdfPoint>& cdf) {
  if (cdf.empty()) throw ConfigError("cdf_median: empty cdf");
  std::vector<double> v;
  for (const auto& [s, f] : cdf) v.push_back(s);
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace fclsim
