#pragma once

#include <map>
#include <vector>

#include "fclsim/data.hpp"
#include "fclsim/model.hpp"
#include "fclsim/numcore.hpp"
#include "fclsim/update.hpp"

namespace fclsim {

/// One (target downstream task, target class) pair with its trigger and the
/// attacker's reference images of the target class.
struct TargetSpec {
  int task_id = 0;
  int target_class = 0;
  Trigger trigger;
  std::vector<Example> references;

  void validate(const Shape& image) const;
};

struct AttackSchedule {
  enum class Kind { multi_shot, one_shot } kind = Kind::multi_shot;
  int period = 1;

  static AttackSchedule multi_shot() { return {Kind::multi_shot, 1}; }
  static AttackSchedule one_shot(int period) { return {Kind::one_shot, period}; }

  /// Attack-phase round t is an attack round.
  bool is_attack_round(int t) const { return kind == Kind::multi_shot || t % period == 0; }
};

struct BackdoorWeights {
  double l1 = 1.0;
  double l2 = 1.0;
  double l3 = 1.0;
};

struct AttackConfig {
  BackdoorWeights lambda;
  int malicious_local_epochs = 10;
  double learning_rate = 0.1;
  int batch_size = 32;
  double scale = 100.0;  // gamma, applied on one-shot attack rounds
  AttackSchedule schedule = AttackSchedule::multi_shot();

  void validate() const;
};

enum class AttackMode { centralized, decentralized };

/// Attacker slot (0..n_attackers-1) -> targets that attacker poisons.
using AttackerRoster = std::map<int, std::vector<TargetSpec>>;

AttackerRoster build_attacker_roster(AttackMode mode, int n_attackers, const std::vector<TargetSpec>& targets);

struct BackdoorTerms {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
};

/// Weighted sum of the three backdoor-injection terms (trigger-to-reference
/// alignment, reference preservation, clean preservation), all on encoder
/// features h. Gradient is taken w.r.t. `local` only; `global_snapshot` is a
/// constant. Terms with zero weight are skipped and reported as 0.
GradResult backdoor_loss(const ParamVector& local, const ParamVector& global_snapshot, const ModelArch& arch,
                         const Dataset& attacker_data, const std::vector<TargetSpec>& targets,
                         const BackdoorWeights& lambda, BackdoorTerms* terms = nullptr);

/// Malicious client round: L := G, then malicious_local_epochs of minibatch SGD
/// on backdoor_loss only. Returns delta = L - G.
ClientUpdate malicious_local_train(const ParamVector& global, const ModelArch& arch, const Dataset& attacker_data,
                                   const std::vector<TargetSpec>& roster_entry, const AttackConfig& cfg,
                                   RngStream rng, ClientTag tag = {});

/// Multiplies the delta by gamma (>= 1) and marks the update as scaled.
ClientUpdate scale_update(const ClientUpdate& update, double gamma);

}  // namespace fclsim
