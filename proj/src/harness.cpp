#include "fclsim/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fclsim {

namespace {

using json = nlohmann::json;

constexpr const char* kCodeVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Scalar text conversion
// ---------------------------------------------------------------------------

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v, const char* expected) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) bad_value(key, v, expected);
  return out;
}

int parse_int(const std::string& key, const std::string& v) { return parse_number<int>(key, v, "an integer"); }
std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return parse_number<std::uint64_t>(key, v, "an unsigned 64-bit integer");
}
double parse_double(const std::string& key, const std::string& v) {
  const double d = parse_number<double>(key, v, "a number");
  if (!std::isfinite(d)) bad_value(key, v, "a finite number");
  return d;
}
bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
  return out;
}

std::string fmt(double d) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, ptr);
}

std::string fmt_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Key registry: one entry per configurable field.
// ---------------------------------------------------------------------------

struct KeyDef {
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool hashed = true;
};

template <class Ref>
KeyDef int_key(std::string name, Ref ref) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { ref(c) = parse_int(name, v); },
          [=](const ExperimentConfig& c) { return std::to_string(ref(c)); }};
}
template <class Ref>
KeyDef u64_key(std::string name, Ref ref) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { ref(c) = parse_u64(name, v); },
          [=](const ExperimentConfig& c) { return std::to_string(ref(c)); }};
}
template <class Ref>
KeyDef double_key(std::string name, Ref ref) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { ref(c) = parse_double(name, v); },
          [=](const ExperimentConfig& c) { return fmt(ref(c)); }};
}
template <class Ref>
KeyDef bool_key(std::string name, Ref ref) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { ref(c) = parse_bool(name, v); },
          [=](const ExperimentConfig& c) { return std::string(ref(c) ? "true" : "false"); }};
}
template <class Ref>
KeyDef string_key(std::string name, Ref ref) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { ref(c) = v; },
          [=](const ExperimentConfig& c) { return std::string(ref(c)); }};
}
template <class Ref>
KeyDef list_key(std::string name, Ref ref) {
  return {name, [=](ExperimentConfig& c, const std::string& v) { ref(c) = parse_int_list(name, v); },
          [=](const ExperimentConfig& c) { return fmt_list(ref(c)); }};
}
template <class E, class Ref>
KeyDef enum_key(std::string name, Ref ref, std::vector<std::pair<std::string, E>> names) {
  return {name,
          [=](ExperimentConfig& c, const std::string& v) {
            for (const auto& [s, e] : names) {
              if (s == v) {
                ref(c) = e;
                return;
              }
            }
            std::string expected = "one of";
            for (const auto& [s, e] : names) expected += " " + s;
            bad_value(name, v, expected.c_str());
          },
          [=](const ExperimentConfig& c) {
            for (const auto& [s, e] : names)
              if (ref(c) == e) return s;
            return std::string("?");
          }};
}

#define FIELD(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<KeyDef>& registry() {
  static const std::vector<KeyDef> keys = [] {
    using PK = PartitionMode::Kind;
    using SK = AttackSchedule::Kind;
    using DK = DefenseSpec::Kind;
    using Src = DataSettings::Source;
    std::vector<KeyDef> k;
    k.push_back(u64_key("seed", FIELD(seed)));
    KeyDef out = string_key("output.dir", FIELD(output_dir));
    out.hashed = false;
    k.push_back(out);

    k.push_back(int_key("federation.n_clients", FIELD(fed.n_clients)));
    k.push_back(int_key("federation.per_round", FIELD(fed.per_round)));
    k.push_back(double_key("federation.server_lr", FIELD(fed.server_lr)));
    k.push_back(int_key("federation.rounds", FIELD(fed.rounds)));
    k.push_back(int_key("federation.pretrain_rounds", FIELD(fed.pretrain_rounds)));
    k.push_back(int_key("federation.n_attackers", FIELD(fed.n_attackers)));
    k.push_back(int_key("federation.eval_every", FIELD(fed.eval_every)));
    k.push_back(bool_key("federation.aggregate_projector", FIELD(fed.aggregate_projector)));
    k.push_back(bool_key("federation.early_stop", FIELD(fed.early_stop)));
    k.push_back(int_key("federation.early_stop_window", FIELD(fed.early_stop_window)));
    k.push_back(double_key("federation.early_stop_tolerance", FIELD(fed.early_stop_tolerance)));

    k.push_back(enum_key<Src>("data.source", FIELD(data.source), {{"synthetic", Src::synthetic}, {"files", Src::files}}));
    k.push_back(int_key("data.n_classes", FIELD(data.n_classes)));
    k.push_back(int_key("data.n_per_class", FIELD(data.n_per_class)));
    k.push_back(int_key("data.channels", FIELD(data.channels)));
    k.push_back(int_key("data.height", FIELD(data.height)));
    k.push_back(int_key("data.width", FIELD(data.width)));
    k.push_back(double_key("data.class_separation", FIELD(data.class_separation)));
    k.push_back(double_key("data.noise", FIELD(data.noise)));
    k.push_back(u64_key("data.template_seed", FIELD(data.template_seed)));
    k.push_back(int_key("data.downstream_train_per_class", FIELD(data.downstream_train_per_class)));
    k.push_back(int_key("data.downstream_test_per_class", FIELD(data.downstream_test_per_class)));
    k.push_back(string_key("data.train_path", FIELD(data.train_path)));
    k.push_back(string_key("data.downstream_train_path", FIELD(data.downstream_train_path)));
    k.push_back(string_key("data.downstream_test_path", FIELD(data.downstream_test_path)));
    k.push_back(enum_key<PK>("data.partition", FIELD(data.partition), {{"iid", PK::iid}, {"dirichlet", PK::dirichlet}}));
    k.push_back(double_key("data.dirichlet_alpha", FIELD(data.dirichlet_alpha)));
    k.push_back(bool_key("data.foreign_attacker_data", FIELD(data.foreign_attacker_data)));
    k.push_back(int_key("data.foreign_per_class", FIELD(data.foreign_per_class)));
    k.push_back(u64_key("data.foreign_template_seed", FIELD(data.foreign_template_seed)));

    k.push_back(list_key("model.encoder", FIELD(encoder_units)));
    k.push_back(list_key("model.projector", FIELD(projector_units)));

    k.push_back(double_key("contrastive.temperature", FIELD(contrastive.temperature)));
    k.push_back(int_key("contrastive.batch_size", FIELD(contrastive.batch_size)));
    k.push_back(int_key("contrastive.local_epochs", FIELD(contrastive.local_epochs)));
    k.push_back(double_key("contrastive.learning_rate", FIELD(contrastive.learning_rate)));
    k.push_back(bool_key("contrastive.augment", FIELD(augment)));

    k.push_back(enum_key<AttackMode>("attack.mode", FIELD(attack.mode),
                                     {{"centralized", AttackMode::centralized},
                                      {"decentralized", AttackMode::decentralized}}));
    k.push_back(enum_key<SK>("attack.schedule", FIELD(attack.core.schedule.kind),
                             {{"multi_shot", SK::multi_shot}, {"one_shot", SK::one_shot}}));
    k.push_back(int_key("attack.period", FIELD(attack.core.schedule.period)));
    k.push_back(double_key("attack.scale", FIELD(attack.core.scale)));
    k.push_back(double_key("attack.lambda1", FIELD(attack.core.lambda.l1)));
    k.push_back(double_key("attack.lambda2", FIELD(attack.core.lambda.l2)));
    k.push_back(double_key("attack.lambda3", FIELD(attack.core.lambda.l3)));
    k.push_back(int_key("attack.local_epochs", FIELD(attack.core.malicious_local_epochs)));
    k.push_back(double_key("attack.learning_rate", FIELD(attack.core.learning_rate)));
    k.push_back(int_key("attack.batch_size", FIELD(attack.core.batch_size)));
    k.push_back(list_key("attack.target_classes", FIELD(attack.target_classes)));
    k.push_back(int_key("attack.n_references", FIELD(attack.n_references)));
    k.push_back(int_key("attack.trigger_size", FIELD(attack.trigger_size)));

    k.push_back(enum_key<DK>("defense.kind", FIELD(defense.kind),
                             {{"none", DK::none}, {"foolsgold", DK::foolsgold}, {"clip_noise", DK::clip_noise}}));
    k.push_back({"defense.clip_threshold",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "adaptive") {
                     c.defense.clip_threshold.reset();
                   } else {
                     c.defense.clip_threshold = parse_double("defense.clip_threshold", v);
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return c.defense.clip_threshold ? fmt(*c.defense.clip_threshold) : std::string("adaptive");
                 }});
    k.push_back(double_key("defense.noise_sigma", FIELD(defense.noise_sigma)));
    k.push_back(bool_key("defense.noise_relative", FIELD(defense.noise_relative)));
    k.push_back(double_key("defense.foolsgold_epsilon", FIELD(defense.foolsgold_epsilon)));

    k.push_back(int_key("eval.probe_epochs", FIELD(probe.epochs)));
    k.push_back(double_key("eval.probe_lr", FIELD(probe.learning_rate)));
    k.push_back(double_key("eval.probe_l2", FIELD(probe.l2)));
    k.push_back(int_key("eval.knn_k", FIELD(probe.knn_k)));
    k.push_back(double_key("eval.knn_temperature", FIELD(probe.knn_temperature)));
    k.push_back(bool_key("eval.asr_exclude_target", FIELD(probe.asr_exclude_target)));

    std::sort(k.begin(), k.end(), [](const KeyDef& a, const KeyDef& b) { return a.name < b.name; });
    return k;
  }();
  return keys;
}

#undef FIELD

const KeyDef* find_key(const std::string& name) {
  const auto& keys = registry();
  const auto it = std::lower_bound(keys.begin(), keys.end(), name,
                                   [](const KeyDef& k, const std::string& n) { return k.name < n; });
  return it != keys.end() && it->name == name ? &*it : nullptr;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  fed.validate();
  contrastive.validate();
  attack.core.validate();
  defense.validate();
  probe.validate();

  if (data.source == DataSettings::Source::synthetic) {
    if (data.n_classes < 2) throw ConfigError("data.n_classes must be >= 2");
    if (data.n_per_class < 1) throw ConfigError("data.n_per_class must be >= 1");
    if (data.channels < 1) throw ConfigError("data.channels must be >= 1");
    if (data.height < 8 || data.width < 8) throw ConfigError("data.height and data.width must be >= 8");
    if (!(data.class_separation > 0.0)) throw ConfigError("data.class_separation must be > 0");
    if (!(data.noise >= 0.0)) throw ConfigError("data.noise must be >= 0");
    if (data.downstream_train_per_class < 1) throw ConfigError("data.downstream_train_per_class must be >= 1");
    if (data.downstream_test_per_class < 1) throw ConfigError("data.downstream_test_per_class must be >= 1");
    if (static_cast<long>(data.n_classes) * data.n_per_class < fed.n_clients)
      throw ConfigError("data.n_per_class: fewer training images than federation.n_clients");
    for (int cls : attack.target_classes)
      if (cls < 0 || cls >= data.n_classes) throw ConfigError("attack.target_classes: class out of range");
  } else {
    if (data.train_path.empty()) throw ConfigError("data.train_path is required when data.source=files");
    if (data.downstream_train_path.empty() || data.downstream_test_path.empty())
      throw ConfigError("data.downstream_train_path and data.downstream_test_path are required when data.source=files");
  }
  if (data.partition == PartitionMode::Kind::dirichlet && !(data.dirichlet_alpha > 0.0))
    throw ConfigError("data.dirichlet_alpha must be > 0");
  if (data.foreign_attacker_data && data.foreign_per_class < 1) throw ConfigError("data.foreign_per_class must be >= 1");

  if (encoder_units.empty() || projector_units.empty()) throw ConfigError("model.encoder and model.projector must be non-empty");
  for (int u : encoder_units)
    if (u < 2) throw ConfigError("model.encoder: layer widths must be >= 2");
  for (int u : projector_units)
    if (u < 2) throw ConfigError("model.projector: layer widths must be >= 2");

  if (attack.target_classes.empty()) throw ConfigError("attack.target_classes must list at least one class");
  if (attack.target_classes.size() > 8) throw ConfigError("attack.target_classes: at most 8 targets are supported");
  if (attack.n_references < 1) throw ConfigError("attack.n_references must be >= 1");
  if (attack.trigger_size < 0) throw ConfigError("attack.trigger_size must be >= 0");
  if (data.source == DataSettings::Source::synthetic && attack.trigger_size * 2 > std::min(data.height, data.width))
    throw ConfigError("attack.trigger_size must be at most half the image side");
  if (attack.core.schedule.period < 1) throw ConfigError("attack.period must be >= 1");
  if (fed.n_attackers > 0 && attack.mode == AttackMode::decentralized &&
      static_cast<std::size_t>(fed.n_attackers) != attack.target_classes.size()) {
    throw ConfigError("attack.mode=decentralized requires federation.n_attackers (" + std::to_string(fed.n_attackers) +
                      ") to equal the number of attack.target_classes (" +
                      std::to_string(attack.target_classes.size()) + ")");
  }
}

ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig cfg) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const KeyDef* def = find_key(key);
    if (!def) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    def->set(cfg, value);
  }
  cfg.fed.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

std::map<std::string, std::string> config_to_map(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& k : registry()) out[k.name] = k.get(cfg);
  return out;
}

std::string config_to_text(const ExperimentConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : config_to_map(cfg)) s += k + "=" + v + "\n";
  return s;
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::string canon;
  for (const auto& k : registry()) {
    if (k.hashed) canon += k.name + "=" + k.get(cfg) + "\n";
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(canon);
  return hex.str();
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace {

// Shared desk-scale settings; each preset overrides a few keys.
constexpr const char* kPresetBase = R"(
federation.n_clients=20
federation.per_round=10
federation.pretrain_rounds=60
federation.rounds=40
federation.n_attackers=3
federation.eval_every=5
attack.mode=decentralized
attack.target_classes=1,4,7
data.n_per_class=150
attack.trigger_size=4
attack.batch_size=2
attack.learning_rate=0.05
attack.local_epochs=20
)";

// Scale K/eta replaces the global model outright; a longer period leaves room to decay.
constexpr const char* kOneShot = R"(
attack.schedule=one_shot
attack.period=20
attack.scale=10
federation.rounds=60
federation.eval_every=1
)";

const std::vector<std::pair<std::string, std::string>>& preset_table() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"baseline_noattack", "federation.n_attackers=0\n"},
      {"multishot_iid", ""},
      {"multishot_noniid", "data.partition=dirichlet\ndata.dirichlet_alpha=1.0\n"},
      {"oneshot", kOneShot},
      {"foolsgold_centralized", "attack.mode=centralized\ndefense.kind=foolsgold\n"},
      {"foolsgold_decentralized", "defense.kind=foolsgold\n"},
      {"clipnoise_multishot", "defense.kind=clip_noise\nfederation.rounds=80\n"},
      {"clipnoise_oneshot", std::string("defense.kind=clip_noise\n") + kOneShot},
      {"foreign_attacker_data", "data.foreign_attacker_data=true\n"},
  };
  return table;
}

}  // namespace

std::vector<std::string> list_presets() {
  std::vector<std::string> names;
  for (const auto& [name, body] : preset_table()) names.push_back(name);
  return names;
}

ExperimentConfig preset(const std::string& name) {
  for (const auto& [n, body] : preset_table()) {
    if (n != name) continue;
    // Preset overrides win over the shared base; merge by key.
    std::map<std::string, std::string> kv;
    for (const std::string& text : {std::string(kPresetBase), body}) {
      std::istringstream in(text);
      std::string line;
      while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
      }
    }
    std::string merged;
    for (const auto& [k, v] : kv) merged += k + "=" + v + "\n";
    ExperimentConfig cfg = parse_config_text(merged);
    cfg.output_dir = "fclsim_out/" + name;
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Scenario construction
// ---------------------------------------------------------------------------

namespace {

std::vector<DenseSpec> dense_stack(const std::vector<int>& units) {
  std::vector<DenseSpec> out;
  for (std::size_t i = 0; i < units.size(); ++i) {
    out.push_back({static_cast<std::size_t>(units[i]), i + 1 < units.size() ? Activation::relu : Activation::none});
  }
  return out;
}

/// Distinct anchor for the k-th target's trigger: corners first, then edge midpoints.
std::pair<std::size_t, std::size_t> trigger_anchor(int k, const Shape& s, std::size_t side) {
  const std::size_t bottom = s.height - side, right = s.width - side;
  const std::size_t mid_r = (s.height - side) / 2, mid_c = (s.width - side) / 2;
  const std::pair<std::size_t, std::size_t> anchors[] = {{bottom, right}, {0, 0},     {0, right},     {bottom, 0},
                                                         {bottom, mid_c}, {0, mid_c}, {mid_r, right}, {mid_r, 0}};
  return anchors[k];
}

}  // namespace

Scenario build_scenario(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& d = cfg.data;
  Scenario sc;

  DownstreamTask task;
  if (d.source == DataSettings::Source::synthetic) {
    const Shape shape{static_cast<std::size_t>(d.channels), static_cast<std::size_t>(d.height),
                      static_cast<std::size_t>(d.width)};
    auto draw = [&](int per_class, std::uint64_t stream, std::uint64_t template_seed) {
      SyntheticSpec spec;
      spec.n_classes = d.n_classes;
      spec.n_per_class = per_class;
      spec.shape = shape;
      spec.class_separation = d.class_separation;
      spec.noise = d.noise;
      spec.seed = mix_seed(cfg.seed, stream);
      spec.template_seed = template_seed;
      return generate_synthetic(spec);
    };
    sc.train_pool = draw(d.n_per_class, 1, d.template_seed);
    task.train = draw(d.downstream_train_per_class, 2, d.template_seed);
    task.test = draw(d.downstream_test_per_class, 3, d.template_seed);
    if (d.foreign_attacker_data) sc.attacker_data = draw(d.foreign_per_class, 4, d.foreign_template_seed);
  } else {
    sc.train_pool = load_dataset(d.train_path);
    task.train = load_dataset(d.downstream_train_path);
    task.test = load_dataset(d.downstream_test_path);
    if (!task.train.labeled() || !task.test.labeled())
      throw ConfigError("data.downstream_*_path: downstream datasets must carry labels");
    if (d.foreign_attacker_data) throw ConfigError("data.foreign_attacker_data needs data.source=synthetic");
  }
  const Shape shape = sc.train_pool.shape();

  sc.arch = ModelArch(shape, dense_stack(cfg.encoder_units), dense_stack(cfg.projector_units));
  sc.fed = cfg.fed;
  sc.fed.seed = cfg.seed;
  sc.contrastive = cfg.contrastive;
  sc.contrastive.augment = cfg.augment ? AugmentPolicy::simclr_lite() : AugmentPolicy::none();
  sc.attack = cfg.attack.core;
  sc.mode = cfg.attack.mode;
  sc.defense = cfg.defense;
  sc.probe = cfg.probe;

  const PartitionMode mode = d.partition == PartitionMode::Kind::iid ? PartitionMode::iid()
                                                                     : PartitionMode::dirichlet(d.dirichlet_alpha);
  sc.shards = partition(sc.train_pool, cfg.fed.n_clients, mode, mix_seed(cfg.seed, 5));

  const std::size_t side = cfg.attack.trigger_size > 0 ? static_cast<std::size_t>(cfg.attack.trigger_size)
                                                       : Trigger::default_for(shape).patch_shape.height;
  const auto labels = task.train.labels();
  for (std::size_t k = 0; k < cfg.attack.target_classes.size(); ++k) {
    TargetSpec tg;
    tg.task_id = 0;
    tg.target_class = cfg.attack.target_classes[k];
    const auto [row, col] = trigger_anchor(static_cast<int>(k), shape, side);
    tg.trigger = Trigger::white_square(shape, side, row, col, static_cast<int>(k));
    for (std::size_t i = 0; i < labels.size() && tg.references.size() < static_cast<std::size_t>(cfg.attack.n_references);
         ++i) {
      if (labels[i] == tg.target_class) tg.references.push_back(task.train[i]);
    }
    if (tg.references.size() < static_cast<std::size_t>(cfg.attack.n_references))
      throw ConfigError("attack.n_references: not enough downstream images of class " +
                        std::to_string(tg.target_class));
    sc.targets.push_back(std::move(tg));
  }
  sc.tasks.push_back(std::move(task));
  sc.roster = build_attacker_roster(cfg.attack.mode, cfg.fed.n_attackers, sc.targets);
  sc.validate();
  return sc;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

std::string opt_csv(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double csv_double(const std::string& s, const char* file) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error(std::string(file) + ": bad number '" + s + "'");
  return v;
}

int csv_int(const std::string& s, const char* file) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error(std::string(file) + ": bad integer '" + s + "'");
  return v;
}

std::optional<double> csv_opt(const std::string& s, const char* file) {
  if (s.empty()) return std::nullopt;
  return csv_double(s, file);
}

std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path, const std::string& header_prefix) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind(header_prefix, 0) != 0)
    throw Error(path.string() + ": unexpected header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(f, line)) {
    if (!line.empty()) rows.push_back(split_csv(line));
  }
  return rows;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  return f;
}

}  // namespace

std::string round_to_json(const RoundRecord& rec) {
  json j;
  j["round"] = rec.round;
  j["phase"] = rec.phase;
  j["phase_round"] = rec.phase_round;
  j["attack_round"] = rec.attack_round;
  j["selected"] = rec.selected;
  j["attackers"] = rec.attackers;
  j["weights"] = rec.weights;
  j["norms"] = rec.norms;
  j["clip_threshold"] = opt_json(rec.clip_threshold);
  j["knn_acc"] = opt_json(rec.knn_acc);
  j["main_acc"] = opt_json(rec.main_acc);
  j["asr"] = rec.asr;
  j["wall_time"] = rec.wall_time;
  return j.dump();
}

RoundRecord round_from_json(const std::string& line) {
  const json j = json::parse(line);
  RoundRecord rec;
  rec.round = j.at("round").get<int>();
  rec.phase = j.at("phase").get<std::string>();
  rec.phase_round = j.at("phase_round").get<int>();
  rec.attack_round = j.at("attack_round").get<bool>();
  rec.selected = j.at("selected").get<std::vector<int>>();
  rec.attackers = j.at("attackers").get<std::vector<int>>();
  rec.weights = j.at("weights").get<std::vector<double>>();
  rec.norms = j.at("norms").get<std::vector<double>>();
  rec.clip_threshold = opt_from(j.at("clip_threshold"));
  rec.knn_acc = opt_from(j.at("knn_acc"));
  rec.main_acc = opt_from(j.at("main_acc"));
  rec.asr = j.at("asr").get<std::vector<double>>();
  rec.wall_time = j.at("wall_time").get<double>();
  return rec;
}

std::vector<RoundRecord> read_rounds(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<RoundRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(round_from_json(line));
  }
  return out;
}

std::vector<SummaryRow> read_summary(const std::filesystem::path& path) {
  std::vector<SummaryRow> out;
  for (const auto& r : read_csv_rows(path, "target,")) {
    if (r.size() != 6) throw Error("summary.csv: expected 6 columns");
    out.push_back({csv_int(r[0], "summary.csv"), csv_int(r[1], "summary.csv"), csv_int(r[2], "summary.csv"),
                   csv_double(r[3], "summary.csv"), csv_double(r[4], "summary.csv"), csv_double(r[5], "summary.csv")});
  }
  return out;
}

std::vector<CdfRow> read_cdf(const std::filesystem::path& path) {
  std::vector<CdfRow> out;
  for (const auto& r : read_csv_rows(path, "target,")) {
    if (r.size() != 4) throw Error("cdf.csv: expected 4 columns");
    out.push_back({csv_int(r[0], "cdf.csv"), r[1], csv_double(r[2], "cdf.csv"), csv_double(r[3], "cdf.csv")});
  }
  return out;
}

std::vector<TimeseriesRow> read_timeseries(const std::filesystem::path& path) {
  std::vector<TimeseriesRow> out;
  for (const auto& r : read_csv_rows(path, "round,")) {
    if (r.size() < 6) throw Error("timeseries.csv: expected at least 6 columns");
    TimeseriesRow row;
    row.round = csv_int(r[0], "timeseries.csv");
    row.phase = r[1];
    row.phase_round = csv_int(r[2], "timeseries.csv");
    row.attack_round = r[3] == "1";
    row.knn_acc = csv_opt(r[4], "timeseries.csv");
    row.main_acc = csv_opt(r[5], "timeseries.csv");
    for (std::size_t c = 6; c < r.size(); ++c) row.asr.push_back(csv_opt(r[c], "timeseries.csv"));
    out.push_back(std::move(row));
  }
  return out;
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  const json j = json::parse(f);
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.files = j.at("files").get<std::vector<std::string>>();
  m.config = j.at("config").get<std::map<std::string, std::string>>();
  return m;
}

RunOutcome run(const ExperimentConfig& cfg, int threads) {
  RunOutcome out;
  out.manifest.started = utc_now();
  const Scenario sc = build_scenario(cfg);

  const std::filesystem::path dir(cfg.output_dir);
  std::filesystem::create_directories(dir);
  std::ofstream rounds = open_out(dir / "rounds.jsonl");

  RunOptions opts;
  opts.threads = threads;
  opts.on_round = [&](const RoundRecord& rec) {
    rounds << round_to_json(rec) << '\n';
    rounds.flush();
  };
  out.result = run_experiment(sc, opts);
  rounds.close();

  const auto& fin = out.result.final;
  {
    std::ofstream f = open_out(dir / "summary.csv");
    f << "target,task,target_class,main_acc,asr,knn_acc\n";
    for (std::size_t k = 0; k < sc.targets.size(); ++k) {
      const auto& tg = sc.targets[k];
      f << k << ',' << tg.task_id << ',' << tg.target_class << ','
        << fmt(fin.task_main_acc[static_cast<std::size_t>(tg.task_id)]) << ',' << fmt(fin.report.asr[k]) << ','
        << fmt(fin.report.knn_acc) << '\n';
    }
  }
  {
    std::ofstream f = open_out(dir / "cdf.csv");
    f << "target,kind,similarity,fraction\n";
    for (std::size_t k = 0; k < sc.targets.size(); ++k) {
      for (const auto& [s, p] : fin.cdf_triggered[k]) f << k << ",triggered," << fmt(s) << ',' << fmt(p) << '\n';
      for (const auto& [s, p] : fin.cdf_clean[k]) f << k << ",clean," << fmt(s) << ',' << fmt(p) << '\n';
    }
  }
  {
    std::ofstream f = open_out(dir / "timeseries.csv");
    f << "round,phase,phase_round,attack_round,knn_acc,main_acc";
    for (std::size_t k = 0; k < sc.targets.size(); ++k) f << ",asr_" << k;
    f << '\n';
    for (const auto& rec : out.result.history) {
      f << rec.round << ',' << rec.phase << ',' << rec.phase_round << ',' << (rec.attack_round ? 1 : 0) << ','
        << opt_csv(rec.knn_acc) << ',' << opt_csv(rec.main_acc);
      for (std::size_t k = 0; k < sc.targets.size(); ++k)
        f << ',' << (k < rec.asr.size() ? fmt(rec.asr[k]) : std::string());
      f << '\n';
    }
  }

  auto& m = out.manifest;
  m.config_hash = config_hash(cfg);
  m.code_version = kCodeVersion;
  m.seed = cfg.seed;
  m.files = {"manifest.json", "rounds.jsonl", "summary.csv", "cdf.csv", "timeseries.csv"};
  m.config = config_to_map(cfg);
  m.finished = utc_now();
  json j;
  j["config_hash"] = m.config_hash;
  j["code_version"] = m.code_version;
  j["started"] = m.started;
  j["finished"] = m.finished;
  j["seed"] = m.seed;
  j["files"] = m.files;
  j["config"] = m.config;
  open_out(dir / "manifest.json") << j.dump(2) << '\n';
  return out;
}

int threads_from_env() {
  const char* v = std::getenv("FCLSIM_THREADS");
  if (!v || !*v) return 1;
  int n = 0;
  const std::string s(v);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc() || ptr != s.data() + s.size() || n < 1) throw ConfigError("FCLSIM_THREADS must be a positive integer");
  return n;
}

}  // namespace fclsim
