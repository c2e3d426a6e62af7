#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "fclsim/harness.hpp"
#include "support.hpp"

using namespace fclsim;
using namespace fclsim::testing;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "fclsim_test_harness" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string strip_wall_time(const std::string& text) {
  return std::regex_replace(text, std::regex("\"wall_time\":[-0-9.eE+]+"), "\"wall_time\":0");
}

// Candidate replacement values, tried in order until one parses and differs.
const std::vector<std::string> kVariants{"3",        "2",      "17",       "0.25",         "0.75",      "true",
                                         "false",    "iid",    "dirichlet", "centralized", "one_shot", "foolsgold",
                                         "clip_noise", "0.9",  "2,3",      "12,6",         "0",         "1",
                                         "adaptive", "x.bin", "files",  "40",       "9"};

}  // namespace

TEST_CASE("an empty config yields the documented defaults") {
  const auto cfg = parse_config_text("");
  CHECK(cfg.attack.core.lambda.l1 == 1.0);
  CHECK(cfg.attack.core.lambda.l2 == 1.0);
  CHECK(cfg.attack.core.lambda.l3 == 1.0);
  CHECK(cfg.contrastive.local_epochs == 1);
  CHECK(cfg.attack.core.malicious_local_epochs == 10);
  CHECK(cfg.attack.core.scale == 100.0);
  CHECK(cfg.fed.per_round == 10);
  CHECK(cfg.attack.mode == AttackMode::decentralized);
  CHECK(cfg.defense.kind == DefenseSpec::Kind::none);
  CHECK(parse_config_text("# only a comment\n\n   \n").seed == cfg.seed);
}

TEST_CASE("config values are parsed into the right fields") {
  const auto cfg = parse_config_text(
      "seed=42\nfederation.per_round=5\nattack.mode=centralized\nattack.target_classes=2,3\n"
      "defense.kind=clip_noise\ndefense.clip_threshold=1.5\nmodel.encoder=32,16\n  data.noise = 0.2  \n");
  CHECK(cfg.seed == 42);
  CHECK(cfg.fed.seed == 42);
  CHECK(cfg.fed.per_round == 5);
  CHECK(cfg.attack.mode == AttackMode::centralized);
  CHECK(cfg.attack.target_classes == std::vector<int>{2, 3});
  CHECK(cfg.defense.clip_threshold == 1.5);
  CHECK(cfg.encoder_units == std::vector<int>{32, 16});
  CHECK(cfg.data.noise == 0.2);
  CHECK_FALSE(parse_config_text("defense.clip_threshold=adaptive\n").defense.clip_threshold.has_value());
}

TEST_CASE("config errors name the line, key or constraint") {
  CHECK(error_of("federation.n_attackers=2\n").find("decentralized") != std::string::npos);
  const auto dup = error_of("seed=1\n# c\nseed=2\n");
  CHECK(dup.find("line 3") != std::string::npos);
  CHECK(dup.find("duplicate") != std::string::npos);
  const auto unknown = error_of("attack.lamda1=1\n");
  CHECK(unknown.find("unknown key") != std::string::npos);
  CHECK(unknown.find("attack.lamda1") != std::string::npos);
  const auto type = error_of("federation.rounds=many\n");
  CHECK(type.find("federation.rounds") != std::string::npos);
  CHECK(type.find("integer") != std::string::npos);
  CHECK(error_of("no equals sign\n").find("line 1") != std::string::npos);
  CHECK(error_of("federation.per_round=30\n").find("per_round") != std::string::npos);
  CHECK(error_of("attack.schedule=one_shot\nattack.period=0\n").find("attack.period") != std::string::npos);
  CHECK(error_of("attack.mode=sideways\n").find("attack.mode") != std::string::npos);
  CHECK(error_of("data.partition=dirichlet\ndata.dirichlet_alpha=0\n").find("dirichlet_alpha") != std::string::npos);
  CHECK_THROWS_AS(parse_config(fs::temp_directory_path() / "no_such_config.cfg"), ConfigError);
}

TEST_CASE("presets") {
  const auto names = list_presets();
  CHECK(names.size() == 9);
  CHECK(std::find(names.begin(), names.end(), "foolsgold_decentralized") != names.end());
  std::set<std::string> hashes;
  for (const auto& n : names) {
    const auto cfg = preset(n);
    CHECK_NOTHROW(cfg.validate());
    CHECK_NOTHROW(parse_config_text(config_to_text(cfg)));
    hashes.insert(config_hash(cfg));
  }
  CHECK(hashes.size() == 9);
  CHECK(preset("baseline_noattack").fed.n_attackers == 0);
  CHECK(preset("foolsgold_centralized").attack.mode == AttackMode::centralized);
  CHECK(preset("oneshot").attack.core.schedule.kind == AttackSchedule::Kind::one_shot);
  CHECK_THROWS_AS(preset("nope"), ConfigError);
}

TEST_CASE("config text round trips") {
  for (const auto& n : list_presets()) {
    const auto cfg = preset(n);
    const auto back = parse_config_text(config_to_text(cfg));
    CHECK(config_to_map(back) == config_to_map(cfg));
  }
}

TEST_CASE("config hash ignores key order and the output directory") {
  const auto a = parse_config_text("seed=3\nfederation.rounds=7\nattack.lambda2=0.5\n");
  const auto b = parse_config_text("attack.lambda2=0.5\nseed=3\nfederation.rounds=7\n");
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  auto c = a;
  c.output_dir = "elsewhere";
  CHECK(config_hash(c) == config_hash(a));
}

TEST_CASE("config hash changes with every meaningful field") {
  const auto base = parse_config_text("");
  const auto base_map = config_to_map(base);
  const auto base_hash = config_hash(base);
  std::vector<std::string> uncovered;
  for (const auto& [key, value] : base_map) {
    if (key == "output.dir") continue;
    bool covered = false;
    std::vector<std::string> candidates = kVariants;
    // Some keys only accept a value together with companions.
    std::string extra;
    if (key == "data.source") extra = "data.train_path=a\ndata.downstream_train_path=b\ndata.downstream_test_path=c\n";
    if (key == "federation.n_attackers" || key == "attack.target_classes") extra = "attack.mode=centralized\n";
    for (const auto& v : candidates) {
      if (v == value) continue;
      ExperimentConfig cfg;
      try {
        cfg = parse_config_text(extra + key + "=" + v + "\n");
      } catch (const ConfigError&) {
        continue;
      }
      if (config_to_map(cfg).at(key) == value) continue;
      ExperimentConfig reference = parse_config_text(extra);
      CHECK_MESSAGE(config_hash(cfg) != config_hash(reference), key);
      covered = true;
      break;
    }
    if (!covered) uncovered.push_back(key);
  }
  CHECK_MESSAGE(uncovered.empty(), "keys without a tested variant: " << uncovered.size());
  for (const auto& k : uncovered) MESSAGE(k);
}

TEST_CASE("round records round trip through json") {
  RoundRecord r;
  r.round = 12;
  r.phase = "attack";
  r.phase_round = 2;
  r.attack_round = true;
  r.selected = {0, 1, 5};
  r.attackers = {0, 1};
  r.weights = {1.0, 0.25, 0.1 + 0.2};
  r.norms = {3.5, 1e-17, 123456.789};
  r.clip_threshold = 0.7;
  r.main_acc = 0.875;
  r.asr = {0.1, 0.9};
  r.wall_time = 0.01;
  const auto back = round_from_json(round_to_json(r));
  CHECK(back.round == r.round);
  CHECK(back.phase == r.phase);
  CHECK(back.attack_round);
  CHECK(back.selected == r.selected);
  CHECK(back.attackers == r.attackers);
  CHECK(back.weights == r.weights);
  CHECK(back.norms == r.norms);
  CHECK(back.clip_threshold == r.clip_threshold);
  CHECK_FALSE(back.knn_acc.has_value());
  CHECK(back.main_acc == r.main_acc);
  CHECK(back.asr == r.asr);
  CHECK(round_to_json(back) == round_to_json(r));
}

TEST_CASE("scenario construction") {
  const auto cfg = parse_config_text(kTinyExperiment);
  const Scenario sc = build_scenario(cfg);
  CHECK_NOTHROW(sc.validate());
  CHECK(sc.shards.size() == 6);
  CHECK(sc.targets.size() == 2);
  CHECK(sc.roster.size() == 2);
  CHECK(sc.train_pool.size() == 48);
  CHECK(sc.arch.feature_dim() == 8);
  std::set<std::pair<std::size_t, std::size_t>> anchors;
  for (const auto& t : sc.targets) {
    anchors.insert({t.trigger.row, t.trigger.col});
    CHECK(t.references.size() == 1);
    CHECK(t.references[0].label == t.target_class);
  }
  CHECK(anchors.size() == 2);
  // Same config, same scenario.
  const Scenario again = build_scenario(cfg);
  CHECK(again.train_pool == sc.train_pool);
  CHECK(again.shards == sc.shards);
}

TEST_CASE("file-backed datasets feed the scenario") {
  const auto dir = fresh_dir("files");
  fs::create_directories(dir);
  save_dataset(tiny_data(4, 12, 1), dir / "train.fcld");
  save_dataset(tiny_data(4, 8, 2), dir / "dtrain.fcld");
  save_dataset(tiny_data(4, 8, 3), dir / "dtest.fcld");
  const auto cfg = parse_config_text(std::string(kTinyExperiment) + "data.source=files\ndata.train_path=" +
                                     (dir / "train.fcld").string() + "\ndata.downstream_train_path=" +
                                     (dir / "dtrain.fcld").string() + "\ndata.downstream_test_path=" +
                                     (dir / "dtest.fcld").string() + "\n");
  const Scenario sc = build_scenario(cfg);
  CHECK(sc.train_pool.size() == 48);
  CHECK(sc.tasks.at(0).test.size() == 32);
}

TEST_CASE("a run writes re-readable artifacts inside its output directory only") {
  const auto root = fresh_dir("run");
  fs::create_directories(root);
  auto cfg = parse_config_text(kTinyExperiment);
  cfg.output_dir = (root / "out").string();
  const auto before = fs::current_path();
  const auto outcome = run(cfg, 2);

  std::set<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.insert(fs::relative(e.path(), root).string());
  }
  CHECK(files == std::set<std::string>{"out/manifest.json", "out/rounds.jsonl", "out/summary.csv", "out/cdf.csv",
                                       "out/timeseries.csv"});
  CHECK(fs::current_path() == before);

  const auto out = root / "out";
  const auto rounds = read_rounds(out / "rounds.jsonl");
  REQUIRE(rounds.size() == outcome.result.history.size());
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    CHECK(rounds[i].norms == outcome.result.history[i].norms);
    CHECK(rounds[i].asr == outcome.result.history[i].asr);
  }
  const auto summary = read_summary(out / "summary.csv");
  REQUIRE(summary.size() == 2);
  CHECK(summary[0].target_class == 1);
  CHECK(summary[1].asr == outcome.result.final.report.asr[1]);
  const auto cdf = read_cdf(out / "cdf.csv");
  CHECK(cdf.size() == 2 * 2 * 32);
  CHECK(cdf.front().kind == "triggered");
  const auto ts = read_timeseries(out / "timeseries.csv");
  REQUIRE(ts.size() == rounds.size());
  CHECK(ts.back().asr.size() == 2);
  CHECK(ts.back().main_acc == rounds.back().main_acc);
  CHECK_FALSE(ts.front().main_acc.has_value());
  const auto m = read_manifest(out / "manifest.json");
  CHECK(m.config_hash == config_hash(cfg));
  CHECK(m.seed == cfg.seed);
  CHECK(m.files.size() == 5);
  CHECK(m.config == config_to_map(cfg));
  CHECK(m.started <= m.finished);
}

TEST_CASE("reruns are byte-identical apart from wall time") {
  auto cfg = parse_config_text(kTinyExperiment);
  cfg.output_dir = fresh_dir("rerun_a").string();
  run(cfg, 1);
  const auto a = slurp(fs::path(cfg.output_dir) / "rounds.jsonl");
  const auto a_summary = slurp(fs::path(cfg.output_dir) / "summary.csv");
  cfg.output_dir = fresh_dir("rerun_b").string();
  run(cfg, 3);
  const auto b = slurp(fs::path(cfg.output_dir) / "rounds.jsonl");
  CHECK(strip_wall_time(a) == strip_wall_time(b));
  CHECK(a_summary == slurp(fs::path(cfg.output_dir) / "summary.csv"));
  CHECK(a != strip_wall_time(a));
}

TEST_CASE("readers reject malformed files") {
  const auto dir = fresh_dir("bad");
  fs::create_directories(dir);
  std::ofstream(dir / "summary.csv") << "wrong,header\n";
  CHECK_THROWS_AS(read_summary(dir / "summary.csv"), Error);
  std::ofstream(dir / "cdf.csv") << "target,kind,similarity,fraction\n0,clean,abc,1\n";
  CHECK_THROWS_AS(read_cdf(dir / "cdf.csv"), Error);
  std::ofstream(dir / "rounds.jsonl") << "{not json\n";
  CHECK_THROWS(read_rounds(dir / "rounds.jsonl"));
  CHECK_THROWS_AS(read_manifest(dir / "missing.json"), Error);
}

TEST_CASE("thread count from the environment") {
  ::setenv("FCLSIM_THREADS", "3", 1);
  CHECK(threads_from_env() == 3);
  ::setenv("FCLSIM_THREADS", "zero", 1);
  CHECK_THROWS_AS(threads_from_env(), ConfigError);
  ::unsetenv("FCLSIM_THREADS");
  CHECK(threads_from_env() == 1);
}
