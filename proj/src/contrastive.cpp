#include "fclsim/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fclsim {

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("contrastive.temperature must be > 0");
  if (batch_size < 2) throw ConfigError("contrastive.batch_size must be >= 2");
  if (local_epochs < 1) throw ConfigError("contrastive.local_epochs must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("contrastive.learning_rate must be >= 0");
}

MatrixGrad info_nce_loss(const Matrix& z, double temperature) {
  const Eigen::Index n = z.rows();
  if (n < 2 || n % 2 != 0) throw StructuralError("info_nce_loss: expects 2M rows with M >= 1");
  if (!(temperature > 0.0)) throw ConfigError("info_nce_loss: temperature must be > 0");
  const Eigen::Index m = n / 2;

  Vector norms = z.rowwise().norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(norms(i) > 0.0)) {
      throw DegenerateError("info_nce_loss: zero-norm embedding at row " + std::to_string(i));
    }
  }
  const Matrix u = norms.cwiseInverse().asDiagonal() * z;
  const Matrix sim = u * u.transpose();

  // coef(i, k) = d loss / d sim(i, k) from anchor i's term only.
  Matrix coef = Matrix::Zero(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index pos = i < m ? i + m : i - m;
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < n; ++k)
      if (k != i) peak = std::max(peak, sim(i, k) / temperature);
    double denom = 0.0;
    for (Eigen::Index k = 0; k < n; ++k)
      if (k != i) denom += std::exp(sim(i, k) / temperature - peak);
    const double lse = peak + std::log(denom);
    total += lse - sim(i, pos) / temperature;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == i) continue;
      const double p = std::exp(sim(i, k) / temperature - lse);
      coef(i, k) = (p - (k == pos ? 1.0 : 0.0)) / (temperature * static_cast<double>(n));
    }
  }

  const Matrix du = (coef + coef.transpose()) * u;
  Matrix dz(n, z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double radial = du.row(i).dot(u.row(i));
    dz.row(i) = (du.row(i) - radial * u.row(i)) / norms(i);
  }
  return {total / static_cast<double>(n), std::move(dz)};
}

GradResult info_nce_param_grad(const ParamVector& params, const ModelArch& arch, const Matrix& views,
                               double temperature) {
  StackCache enc, proj;
  const Matrix h = forward_stack(params, arch, Stack::encoder, views, &enc);
  const Matrix z = forward_stack(params, arch, Stack::projector, h, &proj);
  auto lg = info_nce_loss(z, temperature);
  GradResult out{lg.loss, params.zeros_like()};
  const Matrix dh = backward_stack(params, arch, Stack::projector, proj, lg.grad, out.grad);
  backward_stack(params, arch, Stack::encoder, enc, dh, out.grad, false);
  return out;
}

ClientUpdate benign_local_train(const ParamVector& global, const ModelArch& arch, const Dataset& shard,
                                const ContrastiveConfig& cfg, RngStream rng, ClientTag tag) {
  cfg.validate();
  arch.require_params(global);
  if (shard.empty()) throw ConfigError("benign_local_train: empty shard for client " + std::to_string(tag.client_id));

  ParamVector local = global;
  const Shape& shape = shard.shape();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(shard.size());
  for (int epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t b = std::min(batch, order.size() - start);
      // A single sample has no negatives and the loss is identically zero.
      if (b < 2) continue;
      Matrix views(2 * b, shape.size());
      for (std::size_t k = 0; k < b; ++k) {
        const Example& x = shard[order[start + k]];
        const Example v1 = augment(x, shape, rng, cfg.augment);
        const Example v2 = augment(x, shape, rng, cfg.augment);
        std::copy(v1.pixels.begin(), v1.pixels.end(), views.row(static_cast<Eigen::Index>(k)).data());
        std::copy(v2.pixels.begin(), v2.pixels.end(), views.row(static_cast<Eigen::Index>(k + b)).data());
      }
      const auto step = info_nce_param_grad(local, arch, views, cfg.temperature);
      local.add_scaled(-cfg.learning_rate, step.grad);
    }
  }
  local.add_scaled(-1.0, global);
  return ClientUpdate::make(std::move(local), tag.client_id, tag.round, UpdateKind::benign);
}

}  // namespace fclsim
