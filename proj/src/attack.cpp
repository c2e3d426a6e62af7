#include "fclsim/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fclsim {

void TargetSpec::validate(const Shape& image) const {
  if (references.empty()) throw ConfigError("target " + std::to_string(task_id) + " has no reference examples");
  for (const auto& r : references) {
    if (!r.label || *r.label != target_class) {
      throw ConfigError("reference example for target " + std::to_string(task_id) +
                        " does not carry the target class label");
    }
    if (r.pixels.size() != image.size()) throw StructuralError("reference example does not match image shape");
  }
  if (!trigger.fits(image)) throw StructuralError("trigger does not fit the image for target " + std::to_string(task_id));
}

void AttackConfig::validate() const {
  if (lambda.l1 < 0 || lambda.l2 < 0 || lambda.l3 < 0) throw ConfigError("attack.lambda values must be >= 0");
  if (!(lambda.l1 > 0 || lambda.l2 > 0 || lambda.l3 > 0)) throw ConfigError("attack.lambda: at least one must be > 0");
  if (malicious_local_epochs < 1) throw ConfigError("attack.local_epochs must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("attack.learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("attack.batch_size must be >= 1");
  if (!(scale >= 1.0)) throw ConfigError("attack.scale must be >= 1");
  if (schedule.kind == AttackSchedule::Kind::one_shot && schedule.period < 1) {
    throw ConfigError("attack.period must be >= 1");
  }
}

AttackerRoster build_attacker_roster(AttackMode mode, int n_attackers, const std::vector<TargetSpec>& targets) {
  if (n_attackers < 0) throw ConfigError("n_attackers must be >= 0");
  AttackerRoster roster;
  if (n_attackers == 0) return roster;
  if (targets.empty()) throw ConfigError("attacker roster needs at least one target");
  if (mode == AttackMode::centralized) {
    for (int a = 0; a < n_attackers; ++a) roster[a] = targets;
    return roster;
  }
  if (static_cast<std::size_t>(n_attackers) != targets.size()) {
    throw ConfigError("decentralized attack needs exactly one attacker per target (" + std::to_string(n_attackers) +
                      " attackers, " + std::to_string(targets.size()) + " targets)");
  }
  for (int a = 0; a < n_attackers; ++a) roster[a] = {targets[static_cast<std::size_t>(a)]};
  return roster;
}

namespace {

/// cos(a, b) and d cos / d a.
double cos_grad(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b,
                Eigen::RowVectorXd* grad_a) {
  const double na2 = a.squaredNorm();
  const double nb2 = b.squaredNorm();
  const double c = std::clamp(a.dot(b) / std::sqrt(na2 * nb2), -1.0, 1.0);
  if (grad_a) {
    const double na = std::sqrt(na2);
    *grad_a = b / (na * std::sqrt(nb2)) - c * a / na2;
  }
  return c;
}

void require_nonzero(const Matrix& m, Eigen::Index row, const std::string& what) {
  if (!(m.row(row).squaredNorm() > 0.0)) throw DegenerateError("backdoor_loss: zero-norm feature for " + what);
}

void paste_trigger(Matrix& rows, const Shape& s, const Trigger& e) {
  const auto& p = e.patch_shape;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    double* px = rows.row(i).data();
    for (std::size_t c = 0; c < p.channels; ++c)
      for (std::size_t r = 0; r < p.height; ++r)
        for (std::size_t col = 0; col < p.width; ++col)
          px[(c * s.height + e.row + r) * s.width + e.col + col] = e.patch[(c * p.height + r) * p.width + col];
  }
}

struct ReferenceSet {
  Matrix pixels;
  std::vector<std::size_t> owner;  // target index for each reference row
};

ReferenceSet stack_references(const std::vector<TargetSpec>& targets) {
  std::size_t total = 0;
  for (const auto& t : targets) total += t.references.size();
  ReferenceSet out;
  if (total == 0) return out;
  out.pixels.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(targets[0].references[0].pixels.size()));
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (const auto& r : targets[i].references) {
      std::copy(r.pixels.begin(), r.pixels.end(), out.pixels.row(row++).data());
      out.owner.push_back(i);
    }
  }
  return out;
}

/// Loss and gradient on one minibatch of attacker data. g_clean and g_refs
/// are the global encoder's features (constants).
GradResult backdoor_batch(const ParamVector& local, const ModelArch& arch, const Matrix& clean,
                          const Matrix& g_clean, const ReferenceSet& refs, const Matrix& g_refs,
                          const std::vector<TargetSpec>& targets, const BackdoorWeights& lambda,
                          BackdoorTerms* terms) {
  const Shape& shape = arch.input();
  const Eigen::Index b = clean.rows();
  const Eigen::Index r = refs.pixels.rows();
  const auto t = static_cast<Eigen::Index>(targets.size());
  const bool use_l1 = lambda.l1 > 0.0;
  const bool use_l2 = lambda.l2 > 0.0;
  const bool use_l3 = lambda.l3 > 0.0;

  // Row blocks: [triggered x for each target | references | clean x].
  const Eigen::Index trig_rows = use_l1 ? t * b : 0;
  const Eigen::Index ref_rows = (use_l1 || use_l2) ? r : 0;
  const Eigen::Index clean_rows = use_l3 ? b : 0;
  const Eigen::Index ref_off = trig_rows;
  const Eigen::Index clean_off = trig_rows + ref_rows;
  Matrix input(trig_rows + ref_rows + clean_rows, clean.cols());
  if (use_l1) {
    for (Eigen::Index i = 0; i < t; ++i) {
      Matrix block = clean;
      paste_trigger(block, shape, targets[static_cast<std::size_t>(i)].trigger);
      input.middleRows(i * b, b) = block;
    }
  }
  if (ref_rows > 0) input.middleRows(ref_off, r) = refs.pixels;
  if (use_l3) input.middleRows(clean_off, b) = clean;

  StackCache cache;
  const Matrix h = forward_stack(local, arch, Stack::encoder, input, &cache);
  Matrix dh = Matrix::Zero(h.rows(), h.cols());
  BackdoorTerms out;
  Eigen::RowVectorXd ga, gb;

  if (use_l1) {
    const double norm = static_cast<double>(b) * static_cast<double>(r);
    for (Eigen::Index j = 0; j < r; ++j) require_nonzero(h, ref_off + j, "reference " + std::to_string(j));
    for (Eigen::Index j = 0; j < r; ++j) {
      const auto i = static_cast<Eigen::Index>(refs.owner[static_cast<std::size_t>(j)]);
      for (Eigen::Index x = 0; x < b; ++x) {
        const Eigen::Index row = i * b + x;
        require_nonzero(h, row, "triggered example " + std::to_string(x) + " of target " + std::to_string(i));
        const double c = cos_grad(h.row(row), h.row(ref_off + j), &ga);
        cos_grad(h.row(ref_off + j), h.row(row), &gb);
        out.l1 -= c / norm;
        dh.row(row) -= lambda.l1 / norm * ga;
        dh.row(ref_off + j) -= lambda.l1 / norm * gb;
      }
    }
  }
  if (use_l2) {
    for (Eigen::Index j = 0; j < r; ++j) {
      require_nonzero(h, ref_off + j, "reference " + std::to_string(j));
      require_nonzero(g_refs, j, "reference " + std::to_string(j) + " under the global encoder");
      const double c = cos_grad(h.row(ref_off + j), g_refs.row(j), &ga);
      out.l2 -= c / static_cast<double>(r);
      dh.row(ref_off + j) -= lambda.l2 / static_cast<double>(r) * ga;
    }
  }
  if (use_l3) {
    for (Eigen::Index x = 0; x < b; ++x) {
      require_nonzero(h, clean_off + x, "clean example " + std::to_string(x));
      require_nonzero(g_clean, x, "clean example " + std::to_string(x) + " under the global encoder");
      const double c = cos_grad(h.row(clean_off + x), g_clean.row(x), &ga);
      out.l3 -= c / static_cast<double>(b);
      dh.row(clean_off + x) -= lambda.l3 / static_cast<double>(b) * ga;
    }
  }

  GradResult res{lambda.l1 * out.l1 + lambda.l2 * out.l2 + lambda.l3 * out.l3, local.zeros_like()};
  backward_stack(local, arch, Stack::encoder, cache, dh, res.grad, false);
  if (terms) *terms = out;
  return res;
}

void check_inputs(const ModelArch& arch, const Dataset& data, const std::vector<TargetSpec>& targets) {
  if (data.empty()) throw ConfigError("backdoor training needs non-empty attacker data");
  if (!(data.shape() == arch.input())) throw StructuralError("attacker data shape does not match the model input");
  if (targets.empty()) throw ConfigError("backdoor training needs at least one target");
  for (const auto& t : targets) t.validate(arch.input());
}

}  // namespace

GradResult backdoor_loss(const ParamVector& local, const ParamVector& global_snapshot, const ModelArch& arch,
                         const Dataset& attacker_data, const std::vector<TargetSpec>& targets,
                         const BackdoorWeights& lambda, BackdoorTerms* terms) {
  arch.require_params(local);
  arch.require_params(global_snapshot);
  check_inputs(arch, attacker_data, targets);
  const Matrix clean = attacker_data.to_matrix();
  const ReferenceSet refs = stack_references(targets);
  const Matrix g_clean = lambda.l3 > 0 ? encode(global_snapshot, arch, clean) : Matrix();
  const Matrix g_refs = lambda.l2 > 0 ? encode(global_snapshot, arch, refs.pixels) : Matrix();
  return backdoor_batch(local, arch, clean, g_clean, refs, g_refs, targets, lambda, terms);
}

ClientUpdate malicious_local_train(const ParamVector& global, const ModelArch& arch, const Dataset& attacker_data,
                                   const std::vector<TargetSpec>& roster_entry, const AttackConfig& cfg,
                                   RngStream rng, ClientTag tag) {
  cfg.validate();
  arch.require_params(global);
  check_inputs(arch, attacker_data, roster_entry);

  const Matrix all_clean = attacker_data.to_matrix();
  const ReferenceSet refs = stack_references(roster_entry);
  // The global encoder is frozen for the whole round, so its features are computed once.
  const Matrix g_all = cfg.lambda.l3 > 0 ? encode(global, arch, all_clean) : Matrix();
  const Matrix g_refs = cfg.lambda.l2 > 0 ? encode(global, arch, refs.pixels) : Matrix();

  ParamVector local = global;
  const auto n = static_cast<std::size_t>(all_clean.rows());
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < cfg.malicious_local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t b = std::min(batch, n - start);
      Matrix clean(static_cast<Eigen::Index>(b), all_clean.cols());
      Matrix g_clean(cfg.lambda.l3 > 0 ? static_cast<Eigen::Index>(b) : 0, g_all.cols());
      for (std::size_t k = 0; k < b; ++k) {
        const auto src = static_cast<Eigen::Index>(order[start + k]);
        clean.row(static_cast<Eigen::Index>(k)) = all_clean.row(src);
        if (cfg.lambda.l3 > 0) g_clean.row(static_cast<Eigen::Index>(k)) = g_all.row(src);
      }
      const auto step = backdoor_batch(local, arch, clean, g_clean, refs, g_refs, roster_entry, cfg.lambda, nullptr);
      local.add_scaled(-cfg.learning_rate, step.grad);
    }
  }
  local.add_scaled(-1.0, global);
  return ClientUpdate::make(std::move(local), tag.client_id, tag.round, UpdateKind::malicious);
}

ClientUpdate scale_update(const ClientUpdate& update, double gamma) {
  if (!(gamma >= 1.0)) throw ConfigError("scale_update: gamma must be >= 1");
  ClientUpdate out = update;
  out.delta.scale(gamma);
  out.scaled = true;
  out.l2 = l2_norm(out.delta);
  return out;
}

}  // namespace fclsim
