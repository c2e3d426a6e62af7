#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fclsim/federation.hpp"

namespace fclsim {

struct DataSettings {
  enum class Source { synthetic, files } source = Source::synthetic;
  // Synthetic generator.
  int n_classes = 10;
  int n_per_class = 60;
  int channels = 1;
  int height = 16;
  int width = 16;
  double class_separation = 0.6;
  double noise = 0.08;
  std::uint64_t template_seed = 7;
  int downstream_train_per_class = 40;
  int downstream_test_per_class = 40;
  // Dataset files (binary dataset format).
  std::string train_path;
  std::string downstream_train_path;
  std::string downstream_test_path;
  // Partitioning.
  PartitionMode::Kind partition = PartitionMode::Kind::iid;
  double dirichlet_alpha = 0.5;
  // Attacker data: own shard, or a separately drawn out-of-distribution set.
  bool foreign_attacker_data = false;
  int foreign_per_class = 20;
  std::uint64_t foreign_template_seed = 1009;
};

struct AttackSettings {
  AttackConfig core;
  AttackMode mode = AttackMode::decentralized;
  std::vector<int> target_classes{1, 4, 7};
  int n_references = 1;
  int trigger_size = 0;  // 0: derived from the image size
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "fclsim_out";
  FederationConfig fed;
  DataSettings data;
  std::vector<int> encoder_units{128, 64};
  std::vector<int> projector_units{64, 32};
  ContrastiveConfig contrastive;
  bool augment = true;
  AttackSettings attack;
  DefenseSpec defense;
  ProbeConfig probe;

  /// Cross-field checks; throws ConfigError naming the key.
  void validate() const;
};

/// key=value lines, '#' comments, blank lines ignored. Unknown keys, duplicate
/// keys, malformed values and constraint violations throw ConfigError
/// (ParseError with the line number for syntax problems).
ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base = {});
ExperimentConfig parse_config(const std::filesystem::path& path, ExperimentConfig base = {});

/// Every key with its resolved value, sorted by key.
std::map<std::string, std::string> config_to_map(const ExperimentConfig& cfg);
std::string config_to_text(const ExperimentConfig& cfg);

/// 64-bit FNV-1a over the canonical key listing (output directory excluded), hex encoded.
std::string config_hash(const ExperimentConfig& cfg);

std::vector<std::string> list_presets();
ExperimentConfig preset(const std::string& name);

/// Materializes data, partitions, targets and the model for a config.
Scenario build_scenario(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string config_hash;
  std::string code_version;
  std::string started;
  std::string finished;
  std::uint64_t seed = 0;
  std::vector<std::string> files;
  std::map<std::string, std::string> config;
};

struct SummaryRow {
  int target = 0;
  int task = 0;
  int target_class = 0;
  double main_acc = 0.0;
  double asr = 0.0;
  double knn_acc = 0.0;
};

struct CdfRow {
  int target = 0;
  std::string kind;  // "triggered" or "clean"
  double similarity = 0.0;
  double fraction = 0.0;
};

struct TimeseriesRow {
  int round = 0;
  std::string phase;
  int phase_round = 0;
  bool attack_round = false;
  std::optional<double> knn_acc;
  std::optional<double> main_acc;
  std::vector<std::optional<double>> asr;
};

std::string round_to_json(const RoundRecord& rec);
RoundRecord round_from_json(const std::string& line);

std::vector<RoundRecord> read_rounds(const std::filesystem::path& path);
std::vector<SummaryRow> read_summary(const std::filesystem::path& path);
std::vector<CdfRow> read_cdf(const std::filesystem::path& path);
std::vector<TimeseriesRow> read_timeseries(const std::filesystem::path& path);
RunManifest read_manifest(const std::filesystem::path& path);

struct RunOutcome {
  ExperimentResult result;
  RunManifest manifest;
};

/// Runs the experiment and writes manifest.json, rounds.jsonl, summary.csv,
/// cdf.csv and timeseries.csv into cfg.output_dir (created if missing).
RunOutcome run(const ExperimentConfig& cfg, int threads = 1);

/// Reads FCLSIM_THREADS; defaults to 1.
int threads_from_env();

}  // namespace fclsim
