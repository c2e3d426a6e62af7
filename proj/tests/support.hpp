#pragma once

// Small fixtures shared by the unit tests and the acceptance gate.

#include <algorithm>
#include <string>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "fclsim/attack.hpp"
#include "fclsim/contrastive.hpp"
#include "fclsim/data.hpp"
#include "fclsim/model.hpp"
#include "fclsim/numcore.hpp"

namespace fclsim::testing {

inline const Shape kTinyShape{1, 8, 8};

inline ModelArch tiny_arch(std::size_t hidden = 6, std::size_t features = 4, std::size_t proj = 3) {
  return ModelArch(kTinyShape, {{hidden, Activation::relu}, {features, Activation::none}},
                   {{features, Activation::relu}, {proj, Activation::none}});
}

inline Dataset tiny_data(int n_classes, int n_per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.n_classes = n_classes;
  s.n_per_class = n_per_class;
  s.shape = kTinyShape;
  s.class_separation = 0.7;
  s.noise = 0.1;
  s.seed = seed;
  s.template_seed = 5;
  return generate_synthetic(s);
}

inline TargetSpec tiny_target(const Dataset& refs_from, int target_class, std::size_t row, std::size_t col, int id,
                              int n_refs = 1) {
  TargetSpec t;
  t.task_id = id;
  t.target_class = target_class;
  t.trigger = Trigger::white_square(refs_from.shape(), 2, row, col, id);
  for (const auto& ex : refs_from.examples()) {
    if (ex.label == target_class && static_cast<int>(t.references.size()) < n_refs) t.references.push_back(ex);
  }
  return t;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, RngStream& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

/// Smallest |pre-activation| feeding any relu in either stack for the given inputs.
inline double relu_margin(const ParamVector& params, const ModelArch& arch, const Matrix& x) {
  double margin = std::numeric_limits<double>::infinity();
  const auto scan = [&](Stack which, const std::vector<DenseSpec>& layers, const Matrix& in) {
    StackCache cache;
    Matrix out = forward_stack(params, arch, which, in, &cache);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].activation == Activation::relu) margin = std::min(margin, cache.pre[l].cwiseAbs().minCoeff());
    }
    return out;
  };
  scan(Stack::projector, arch.projector(), scan(Stack::encoder, arch.encoder(), x));
  return margin;
}

/// Instances are redrawn until no relu sits within this distance of its kink,
/// so a central difference never straddles one.
inline constexpr double kKinkMargin = 1e-3;
inline constexpr double kFdEps = 1e-5;

/// Worst finite-difference error of the contrastive loss gradient on one random instance.
inline double info_nce_fd_error(std::uint64_t seed) {
  const auto arch = tiny_arch();
  for (std::uint64_t attempt = 0;; ++attempt) {
    RngStream rng = RngStream(seed, 11).derive(attempt);
    ParamVector params = arch.init_params(rng);
    // Non-zero biases keep a fully inactive relu layer from producing zero embeddings.
    for (auto& v : params.values()) v += rng.normal(0.0, 0.05);
    const Eigen::Index m = 2 + static_cast<Eigen::Index>(rng.uniform_index(3));
    Matrix views(2 * m, static_cast<Eigen::Index>(arch.input_dim()));
    // Signed inputs keep the views apart (all-positive pixels make every
    // embedding nearly parallel); magnitudes bounded away from zero keep
    // first-layer weight gradients above the roundoff floor.
    for (Eigen::Index i = 0; i < views.size(); ++i) {
      views.data()[i] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5);
    }
    if (relu_margin(params, arch, views) < kKinkMargin) continue;
    const double tau = rng.uniform(0.2, 1.0);
    const GradResult g = info_nce_param_grad(params, arch, views, tau);
    const LossFn f = [&](const ParamVector& p) { return info_nce_param_grad(p, arch, views, tau).loss; };
    return finite_diff_check(f, params, g.grad, kFdEps, 40, rng);
  }
}

/// Worst finite-difference error of the backdoor loss gradient on one random instance.
inline double backdoor_fd_error(std::uint64_t seed) {
  const auto arch = tiny_arch();
  const Dataset data = tiny_data(3, 2, seed);
  for (std::uint64_t attempt = 0;; ++attempt) {
    RngStream rng = RngStream(seed, 12).derive(attempt);
    const ParamVector global = arch.init_params(rng);
    ParamVector local = global;
    for (auto& v : local.values()) v += rng.normal(0.0, 0.05);
    std::vector<TargetSpec> targets{tiny_target(data, 1, 6, 6, 0, 1 + static_cast<int>(rng.uniform_index(2)))};
    if (rng.bernoulli(0.5)) targets.push_back(tiny_target(data, 2, 0, 0, 1));
    Dataset inputs = data;
    for (const auto& t : targets) {
      const Dataset triggered = embed_trigger(data, t.trigger);
      for (const auto& ex : triggered.examples()) inputs.push_back(ex);
    }
    const Matrix x = inputs.to_matrix();
    if (std::min(relu_margin(local, arch, x), relu_margin(global, arch, x)) < kKinkMargin) continue;
    const BackdoorWeights lambda{rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)};
    GradResult g;
    try {
      g = backdoor_loss(local, global, arch, data, targets, lambda);
    } catch (const DegenerateError&) {
      continue;
    }
    const LossFn f = [&](const ParamVector& p) { return backdoor_loss(p, global, arch, data, targets, lambda).loss; };
    return finite_diff_check(f, local, g.grad, kFdEps, 40, rng);
  }
}

/// A complete experiment small enough to run in well under a second.
inline const char* kTinyExperiment = R"(
data.n_classes=4
data.n_per_class=12
data.height=8
data.width=8
data.downstream_train_per_class=8
data.downstream_test_per_class=8
federation.n_clients=6
federation.per_round=4
federation.pretrain_rounds=3
federation.rounds=4
federation.n_attackers=2
federation.eval_every=2
attack.target_classes=1,2
attack.local_epochs=2
attack.batch_size=4
model.encoder=16,8
model.projector=8,4
eval.probe_epochs=50
)";

/// G + (eta / K) * sum_i w_i * delta_i, written as a plain coordinate loop.
inline std::vector<double> aggregate_oracle(const std::vector<double>& global,
                                            const std::vector<std::vector<double>>& deltas, double eta,
                                            const std::vector<double>& weights) {
  std::vector<double> out(global.size());
  const double k = static_cast<double>(deltas.size());
  for (std::size_t j = 0; j < global.size(); ++j) {
    long double acc = 0.0L;
    for (std::size_t i = 0; i < deltas.size(); ++i) acc += static_cast<long double>(weights[i]) * deltas[i][j];
    out[j] = global[j] + static_cast<double>(static_cast<long double>(eta) / k * acc);
  }
  return out;
}

/// Weighted KNN by exhaustive search: every bank row is scored, ordered by
/// (similarity desc, index asc), the top k vote with exp(sim / temperature)
/// and class ties go to the smaller label.
inline std::vector<int> knn_brute_force(const Matrix& bank, const std::vector<int>& labels, const Matrix& queries,
                                        int n_classes, int k, double temperature) {
  std::vector<int> out;
  const auto n = static_cast<std::size_t>(bank.rows());
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), n);
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const double sim =
          queries.row(q).normalized().dot(bank.row(row).normalized());
      scored.emplace_back(sim, i);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<double> votes(static_cast<std::size_t>(n_classes), 0.0);
    for (std::size_t j = 0; j < kk; ++j) votes[static_cast<std::size_t>(labels[scored[j].second])] += std::exp(scored[j].first / temperature);
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)]) best = c;
    out.push_back(best);
  }
  return out;
}

/// Random KNN instance: continuous features with some exact duplicate rows so
/// that similarity ties and class-score ties occur.
struct KnnInstance {
  Matrix bank;
  std::vector<int> labels;
  Matrix queries;
  int n_classes = 0;
};

inline KnnInstance random_knn_instance(RngStream& rng) {
  KnnInstance inst;
  const auto n = static_cast<Eigen::Index>(1 + rng.uniform_index(50));
  const auto d = static_cast<Eigen::Index>(2 + rng.uniform_index(5));
  inst.n_classes = 2 + static_cast<int>(rng.uniform_index(4));
  inst.bank = random_matrix(n, d, rng);
  for (Eigen::Index i = 1; i < n; ++i)
    if (rng.bernoulli(0.3)) inst.bank.row(i) = inst.bank.row(static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(i))));
  for (Eigen::Index i = 0; i < n; ++i) inst.labels.push_back(static_cast<int>(rng.uniform_index(static_cast<std::size_t>(inst.n_classes))));
  inst.queries = random_matrix(1 + static_cast<Eigen::Index>(rng.uniform_index(8)), d, rng);
  // Some queries sit exactly on a bank row.
  for (Eigen::Index q = 0; q < inst.queries.rows(); ++q)
    if (rng.bernoulli(0.3)) inst.queries.row(q) = inst.bank.row(static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(n))));
  return inst;
}

}  // namespace fclsim::testing
