#include "fclsim/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

namespace fclsim {

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kSelectStream = 0x5e1ec7;
constexpr std::uint64_t kClientStream = 0xc11e47;
constexpr std::uint64_t kDefenseStream = 0xdef3;

bool lexicographic_less(const ParamVector& a, const ParamVector& b) {
  const auto va = a.values();
  const auto vb = b.values();
  return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
}

/// Runs task(i) for i in [0, n) on up to `threads` workers. Every task runs;
/// failures are collected and rethrown together afterwards.
template <class Task>
void parallel_for(std::size_t n, int threads, Task&& task) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      task(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const auto workers = static_cast<std::size_t>(std::clamp<int>(threads, 1, static_cast<int>(std::max<std::size_t>(n, 1))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) guarded(i);
      });
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
  }
}

void mask_projector(ParamVector& p, const ModelArch& arch) {
  for (const auto& name : arch.projector_tensors()) {
    auto t = p.tensor(name);
    std::fill(t.begin(), t.end(), 0.0);
  }
}

}  // namespace

void FederationConfig::validate() const {
  if (n_clients < 1) throw ConfigError("federation.n_clients must be >= 1");
  if (per_round < 1 || per_round > n_clients) throw ConfigError("federation.per_round must satisfy 1 <= K <= N");
  if (n_attackers < 0 || n_attackers > per_round) throw ConfigError("federation.n_attackers must satisfy 0 <= n_attackers <= K");
  if (!(server_lr > 0.0)) throw ConfigError("federation.server_lr must be > 0");
  if (rounds < 0) throw ConfigError("federation.rounds must be >= 0");
  if (pretrain_rounds < 0) throw ConfigError("federation.pretrain_rounds must be >= 0");
  if (eval_every < 1) throw ConfigError("federation.eval_every must be >= 1");
  if (early_stop_window < 2) throw ConfigError("federation.early_stop_window must be >= 2");
  if (!(early_stop_tolerance >= 0.0)) throw ConfigError("federation.early_stop_tolerance must be >= 0");
}

std::vector<int> select_clients(int t, const FederationConfig& cfg, bool attack_round, RngStream& rng) {
  (void)t;
  cfg.validate();
  const int n_benign = cfg.n_clients - cfg.n_attackers;
  const int want_benign = attack_round ? cfg.per_round - cfg.n_attackers : cfg.per_round;
  if (want_benign > n_benign) {
    std::ostringstream msg;
    msg << "select_clients: need " << want_benign << " benign clients but only " << n_benign << " exist";
    throw ConfigError(msg.str());
  }
  std::vector<int> selected;
  if (attack_round) {
    for (int a = 0; a < cfg.n_attackers; ++a) selected.push_back(a);
  }
  std::vector<int> pool(static_cast<std::size_t>(n_benign));
  std::iota(pool.begin(), pool.end(), cfg.n_attackers);
  // Partial Fisher-Yates: the first want_benign slots are a uniform sample.
  for (int i = 0; i < want_benign; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.uniform_index(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  std::vector<int> benign(pool.begin(), pool.begin() + want_benign);
  std::sort(benign.begin(), benign.end());
  selected.insert(selected.end(), benign.begin(), benign.end());
  return selected;
}

ParamVector aggregate(const ParamVector& global, std::span<const AnonymousUpdate> updates, double server_lr,
                      std::optional<std::span<const double>> weights) {
  if (updates.empty()) throw ConfigError("aggregate: empty update list");
  if (weights) {
    if (weights->size() != updates.size()) throw StructuralError("aggregate: one weight per update required");
    for (double w : *weights) {
      if (!(w >= 0.0)) throw ConfigError("aggregate: weights must be >= 0");
    }
  }
  for (const auto& u : updates) global.require_same_layout(u.delta, "aggregate");

  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (updates[a].client_id != updates[b].client_id) return updates[a].client_id < updates[b].client_id;
    const double wa = weights ? (*weights)[a] : 1.0;
    const double wb = weights ? (*weights)[b] : 1.0;
    if (wa != wb) return wa < wb;
    return lexicographic_less(updates[a].delta, updates[b].delta);
  });

  ParamVector sum = global.zeros_like();
  for (std::size_t i : order) sum.add_scaled(weights ? (*weights)[i] : 1.0, updates[i].delta);
  return axpy_params(server_lr / static_cast<double>(updates.size()), sum, global);
}

// ---------------------------------------------------------------------------

void Scenario::validate() const {
  fed.validate();
  contrastive.validate();
  attack.validate();
  defense.validate();
  probe.validate();
  if (!(train_pool.shape() == arch.input())) throw ConfigError("scenario: training images do not match the model input");
  if (!partition_is_valid(shards, train_pool.size())) throw ConfigError("scenario: shards do not partition the training pool");
  if (static_cast<int>(shards.size()) != fed.n_clients) throw ConfigError("scenario: need one shard per client");
  if (tasks.empty()) throw ConfigError("scenario: at least one downstream task is required");
  for (const auto& t : tasks) {
    if (!t.train.labeled() || !t.test.labeled()) throw ConfigError("scenario: downstream data must be labeled");
    if (!(t.train.shape() == arch.input()) || !(t.test.shape() == arch.input()))
      throw ConfigError("scenario: downstream images do not match the model input");
  }
  for (const auto& tg : targets) {
    tg.validate(arch.input());
    if (tg.task_id < 0 || tg.task_id >= static_cast<int>(tasks.size()))
      throw ConfigError("scenario: target refers to a missing downstream task");
  }
  if (fed.n_attackers > 0) {
    if (targets.empty()) throw ConfigError("scenario: attackers need at least one target");
    if (static_cast<int>(roster.size()) != fed.n_attackers) throw ConfigError("scenario: roster size must equal n_attackers");
  }
  if (attacker_data && !(attacker_data->shape() == arch.input()))
    throw ConfigError("scenario: attacker data does not match the model input");
}

Dataset Scenario::shard(int client_id) const {
  const auto it = shards.find(client_id);
  if (it == shards.end()) throw ConfigError("scenario: no shard for client " + std::to_string(client_id));
  return train_pool.subset(it->second);
}

FederationState init_state(const Scenario& sc) {
  RngStream rng(sc.fed.seed, kInitStream);
  FederationState st;
  st.global = sc.arch.init_params(rng);
  return st;
}

RoundRecord run_round(FederationState& state, const Scenario& sc, bool pretrain, int phase_round,
                      const RunOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  const int t = state.round;
  const bool attack_round = !pretrain && sc.fed.n_attackers > 0 && sc.attack.schedule.is_attack_round(phase_round);

  RngStream select_rng = RngStream(sc.fed.seed, kSelectStream).derive(static_cast<std::uint64_t>(t));
  const auto selected = select_clients(t, sc.fed, attack_round, select_rng);

  // Client training. Each client owns a stream keyed by (round, client id) so
  // results do not depend on scheduling.
  const RngStream client_root(sc.fed.seed, kClientStream);
  std::vector<std::optional<ClientUpdate>> raw(selected.size());
  std::vector<std::string> failures(selected.size());
  parallel_for(selected.size(), opts.threads, [&](std::size_t i) {
    const int id = selected[i];
    const bool malicious = attack_round && id < sc.fed.n_attackers;
    RngStream rng = client_root.derive(static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(id));
    try {
      if (malicious) {
        const Dataset data = sc.attacker_data ? *sc.attacker_data : sc.shard(id);
        raw[i] = malicious_local_train(state.global, sc.arch, data, sc.roster.at(id), sc.attack, rng, {id, t});
      } else {
        raw[i] = benign_local_train(state.global, sc.arch, sc.shard(id), sc.contrastive, rng, {id, t});
      }
      if (!all_finite(raw[i]->delta.values())) throw DegenerateError("non-finite update");
    } catch (const std::exception& e) {
      std::ostringstream msg;
      msg << "round " << t << ", client " << id << ": " << e.what();
      failures[i] = msg.str();
    }
  });
  for (const auto& f : failures) {
    if (!f.empty()) throw Error(f);
  }

  std::vector<AnonymousUpdate> submitted;
  submitted.reserve(raw.size());
  for (auto& u : raw) {
    if (u->kind == UpdateKind::malicious && sc.attack.schedule.kind == AttackSchedule::Kind::one_shot)
      u = scale_update(*u, sc.attack.scale);
    if (!sc.fed.aggregate_projector) {
      mask_projector(u->delta, sc.arch);
      u->l2 = l2_norm(u->delta);
    }
    submitted.push_back(AnonymousUpdate::from(*u));
  }

  std::vector<ParamVector> histories;
  histories.reserve(submitted.size());
  for (const auto& u : submitted) {
    auto [it, fresh] = state.history.try_emplace(u.client_id, u.delta.zeros_like());
    it->second.add_scaled(1.0, u.delta);
    ++state.selections[u.client_id];
    histories.push_back(it->second);
  }

  RngStream defense_rng = RngStream(sc.fed.seed, kDefenseStream).derive(static_cast<std::uint64_t>(t));
  const DefenseOutcome outcome = apply_defense(sc.defense, submitted, histories, defense_rng);
  state.global = aggregate(state.global, outcome.updates, sc.fed.server_lr, std::span<const double>(outcome.weights));
  if (!all_finite(state.global.values())) {
    throw DegenerateError("round " + std::to_string(t) + ": aggregated model is not finite");
  }

  RoundRecord rec;
  rec.round = t;
  rec.phase = pretrain ? "pretrain" : "attack";
  rec.phase_round = phase_round;
  rec.attack_round = attack_round;
  rec.selected = selected;
  for (const auto& u : raw)
    if (u->kind == UpdateKind::malicious) rec.attackers.push_back(u->client_id);
  rec.weights = outcome.weights;
  for (const auto& u : submitted) rec.norms.push_back(u.l2);
  rec.clip_threshold = outcome.clip_threshold;
  ++state.round;
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

void evaluate_into(RoundRecord& rec, const ParamVector& global, const Scenario& sc, bool with_probe) {
  const auto& monitor = sc.tasks.front();
  rec.knn_acc = knn_eval(global, sc.arch, monitor.train, monitor.test, sc.probe.knn_k, sc.probe.knn_temperature);
  if (!with_probe) return;

  std::vector<std::optional<ProbeResult>> probes(sc.tasks.size());
  double acc_sum = 0.0;
  for (std::size_t k = 0; k < sc.tasks.size(); ++k) {
    probes[k] = linear_probe(global, sc.arch, sc.tasks[k].train, sc.tasks[k].test, sc.probe);
    acc_sum += probes[k]->test_acc;
  }
  rec.main_acc = acc_sum / static_cast<double>(sc.tasks.size());
  rec.asr.clear();
  for (const auto& tg : sc.targets) {
    const auto& task = sc.tasks[static_cast<std::size_t>(tg.task_id)];
    rec.asr.push_back(attack_success_rate(global, sc.arch, probes[static_cast<std::size_t>(tg.task_id)]->probe,
                                          task.test, tg.trigger, tg.target_class, sc.probe.asr_exclude_target));
  }
}

namespace {

bool is_eval_round(int phase_round, int total, int every) {
  return (phase_round + 1) % every == 0 || phase_round + 1 == total;
}

bool knn_plateau(const std::vector<double>& knn, int window, double tol) {
  if (static_cast<int>(knn.size()) < window) return false;
  const auto first = knn.end() - window;
  const auto [lo, hi] = std::minmax_element(first, knn.end());
  return *hi - *lo <= tol;
}

}  // namespace

void run_pretrain(FederationState& state, const Scenario& sc, std::vector<RoundRecord>& history,
                  const RunOptions& opts) {
  std::vector<double> knn;
  for (int r = 0; r < sc.fed.pretrain_rounds; ++r) {
    RoundRecord rec = run_round(state, sc, /*pretrain=*/true, r, opts);
    // Early stopping needs the monitor every round.
    if (sc.fed.early_stop || is_eval_round(r, sc.fed.pretrain_rounds, sc.fed.eval_every)) {
      evaluate_into(rec, state.global, sc, /*with_probe=*/false);
      knn.push_back(*rec.knn_acc);
    }
    if (opts.on_round) opts.on_round(rec);
    history.push_back(std::move(rec));
    if (sc.fed.early_stop && knn_plateau(knn, sc.fed.early_stop_window, sc.fed.early_stop_tolerance)) break;
  }
}

void run_attack_phase(FederationState& state, const Scenario& sc, std::vector<RoundRecord>& history,
                      const RunOptions& opts) {
  for (int r = 0; r < sc.fed.rounds; ++r) {
    RoundRecord rec = run_round(state, sc, /*pretrain=*/false, r, opts);
    if (is_eval_round(r, sc.fed.rounds, sc.fed.eval_every)) evaluate_into(rec, state.global, sc, /*with_probe=*/true);
    if (opts.on_round) opts.on_round(rec);
    history.push_back(std::move(rec));
  }
}

FinalReport final_report(const ParamVector& global, const Scenario& sc) {
  FinalReport out;
  RoundRecord scratch;
  evaluate_into(scratch, global, sc, /*with_probe=*/true);
  out.report.knn_acc = *scratch.knn_acc;
  out.report.main_acc = *scratch.main_acc;
  out.report.asr = scratch.asr;
  for (const auto& task : sc.tasks) {
    out.task_main_acc.push_back(linear_probe(global, sc.arch, task.train, task.test, sc.probe).test_acc);
  }
  for (const auto& tg : sc.targets) {
    const auto& probe_set = sc.tasks[static_cast<std::size_t>(tg.task_id)].test;
    const Example& ref = tg.references.front();
    out.cdf_triggered.push_back(cosine_cdf(global, sc.arch, ref, probe_set, tg.trigger));
    out.cdf_clean.push_back(cosine_cdf(global, sc.arch, ref, probe_set, std::nullopt));
  }
  if (!out.cdf_triggered.empty()) out.report.cdf = out.cdf_triggered.front();
  return out;
}

ExperimentResult run_experiment(const Scenario& sc, const RunOptions& opts) {
  sc.validate();
  ExperimentResult res;
  res.state = init_state(sc);
  run_pretrain(res.state, sc, res.history, opts);
  run_attack_phase(res.state, sc, res.history, opts);
  res.final = final_report(res.state.global, sc);
  return res;
}

}  // namespace fclsim
