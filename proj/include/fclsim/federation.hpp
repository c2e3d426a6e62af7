#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fclsim/attack.hpp"
#include "fclsim/contrastive.hpp"
#include "fclsim/data.hpp"
#include "fclsim/defense.hpp"
#include "fclsim/eval.hpp"
#include "fclsim/model.hpp"
#include "fclsim/update.hpp"

namespace fclsim {

struct FederationConfig {
  int n_clients = 20;       // N
  int per_round = 10;       // K
  double server_lr = 1.0;   // eta
  int rounds = 40;          // attack-phase rounds
  int pretrain_rounds = 20;
  int n_attackers = 3;
  std::uint64_t seed = 0;
  int eval_every = 5;
  bool aggregate_projector = true;
  bool early_stop = false;
  int early_stop_window = 20;
  double early_stop_tolerance = 0.002;  // KNN accuracy, as a fraction (0.2 points)

  void validate() const;
};

/// Client ids [0, n_attackers) are the attackers; the rest are benign.
std::vector<int> select_clients(int t, const FederationConfig& cfg, bool attack_round, RngStream& rng);

/// G + (eta / K) * sum_i w_i * delta_i with K = updates.size(); weights
/// default to 1. Updates are summed in a canonical order so the result does
/// not depend on the order of the list.
ParamVector aggregate(const ParamVector& global, std::span<const AnonymousUpdate> updates, double server_lr,
                      std::optional<std::span<const double>> weights = std::nullopt);

struct RoundRecord {
  int round = 0;            // global round counter
  std::string phase;        // "pretrain" or "attack"
  int phase_round = 0;
  bool attack_round = false;
  std::vector<int> selected;
  std::vector<int> attackers;  // ground truth, for the log only
  std::vector<double> weights;
  std::vector<double> norms;
  std::optional<double> clip_threshold;
  std::optional<double> knn_acc;
  std::optional<double> main_acc;
  std::vector<double> asr;  // per target, filled on evaluation rounds
  double wall_time = 0.0;
};

struct FederationState {
  ParamVector global;
  int round = 0;
  std::map<int, ParamVector> history;  // cumulative delta per client
  std::map<int, int> selections;       // number of rounds each client took part in
};

struct DownstreamTask {
  Dataset train;
  Dataset test;
};

/// Everything a run needs: model, data, configs, attackers and defense.
struct Scenario {
  ModelArch arch = ModelArch::desk_default(Shape{1, 16, 16});
  FederationConfig fed;
  ContrastiveConfig contrastive;
  AttackConfig attack;
  AttackMode mode = AttackMode::decentralized;
  DefenseSpec defense;
  ProbeConfig probe;

  Dataset train_pool;
  Partition shards;                        // client id -> indices into train_pool
  std::optional<Dataset> attacker_data;    // shared foreign data; else each attacker's own shard
  std::vector<DownstreamTask> tasks;
  std::vector<TargetSpec> targets;
  AttackerRoster roster;                   // attacker slot == client id

  void validate() const;
  Dataset shard(int client_id) const;
};

struct RunOptions {
  int threads = 1;
  /// Called after every round; used by the harness to stream records.
  std::function<void(const RoundRecord&)> on_round;
};

struct FinalReport {
  EvalReport report;
  std::vector<double> task_main_acc;
  std::vector<std::vector<CdfPoint>> cdf_triggered;  // per target
  std::vector<std::vector<CdfPoint>> cdf_clean;      // per target
};

struct ExperimentResult {
  std::vector<RoundRecord> history;
  FederationState state;
  FinalReport final;
};

FederationState init_state(const Scenario& sc);

/// One round: select, train (concurrently), scale on one-shot attack rounds,
/// defend, aggregate, update histories. Any client failure aborts the round
/// before aggregation.
RoundRecord run_round(FederationState& state, const Scenario& sc, bool pretrain, int phase_round,
                      const RunOptions& opts = {});

/// Evaluates the current global encoder: KNN monitor, and probe-based main
/// accuracy and per-target ASR when `with_probe`.
void evaluate_into(RoundRecord& rec, const ParamVector& global, const Scenario& sc, bool with_probe);

/// Benign-only pretraining rounds (with optional KNN-plateau early stop).
void run_pretrain(FederationState& state, const Scenario& sc, std::vector<RoundRecord>& history,
                  const RunOptions& opts = {});
void run_attack_phase(FederationState& state, const Scenario& sc, std::vector<RoundRecord>& history,
                      const RunOptions& opts = {});
FinalReport final_report(const ParamVector& global, const Scenario& sc);

ExperimentResult run_experiment(const Scenario& sc, const RunOptions& opts = {});

}  // namespace fclsim
