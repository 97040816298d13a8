#include "tscnet/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace tscnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ConfigKey integer_key(std::string name, long def, std::string desc, std::optional<double> lo = {},
                      std::optional<double> hi = {}) {
  return {std::move(name), ValueType::integer, std::to_string(def), std::move(desc), lo, hi, {}};
}
ConfigKey number_key(std::string name, std::string def, std::string desc, std::optional<double> lo = {},
                     std::optional<double> hi = {}) {
  return {std::move(name), ValueType::number, std::move(def), std::move(desc), lo, hi, {}};
}
ConfigKey bool_key(std::string name, bool def, std::string desc) {
  return {std::move(name), ValueType::boolean, def ? "true" : "false", std::move(desc), {}, {}, {}};
}
ConfigKey string_key(std::string name, std::string def, std::string desc) {
  return {std::move(name), ValueType::string, std::move(def), std::move(desc), {}, {}, {}};
}
ConfigKey choice_key(std::string name, std::string def, std::vector<std::string> choices, std::string desc) {
  return {std::move(name), ValueType::choice, std::move(def), std::move(desc), {}, {}, std::move(choices)};
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

const ConfigKey& lookup(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.name == key) return k;
  throw ConfigurationError("unknown configuration key: " + key);
}

std::string normalise(const ConfigKey& k, const std::string& raw) {
  const std::string v = trim(raw);
  auto bad = [&](const std::string& why) {
    return ConfigurationError("config key " + k.name + ": " + why + " (got \"" + v + "\")");
  };
  auto check_range = [&](double x) {
    if (k.minimum && x < *k.minimum) throw bad("must be >= " + format_number(*k.minimum));
    if (k.maximum && x > *k.maximum) throw bad("must be <= " + format_number(*k.maximum));
  };
  switch (k.type) {
    case ValueType::integer: {
      long long x = 0;
      const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
      if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) throw bad("expected an integer");
      check_range(static_cast<double>(x));
      return std::to_string(x);
    }
    case ValueType::number: {
      double x = 0;
      const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
      if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(x))
        throw bad("expected a finite number");
      check_range(x);
      return format_number(x);
    }
    case ValueType::boolean: {
      if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
      if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
      throw bad("expected true or false");
    }
    case ValueType::choice: {
      if (std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) throw bad("not an allowed value");
      return v;
    }
    case ValueType::string: {
      if (k.name == "train.toggles") {
        try {
          return Toggles::parse(v).label();
        } catch (const ParameterError& e) {
          throw bad(e.what());
        }
      }
      return v;
    }
  }
  return v;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      choice_key("dataset.source", "synthetic", {"synthetic", "folder"}, "Synthetic generator or an image folder"),
      string_key("dataset.path", "", "Image folder for source = folder"),
      string_key("dataset.manifest", "", "Folder manifest (default <path>/manifest.json)"),
      integer_key("dataset.classes", 10, "Number of classes", 2, 40),
      integer_key("dataset.n_max", 200, "Training images in the largest class", 1),
      number_key("dataset.ratio", "0.1", "Imbalance ratio n_min / n_max", 1e-6, 1),
      number_key("dataset.rho", "0.9", "Probability a training image carries its class texture", 0, 1),
      integer_key("dataset.seed", 0, "Generator seed", 0),
      integer_key("dataset.image_size", 32, "Image side length in pixels", 8, 256),
      integer_key("dataset.channels", 3, "Image channels", 1, 3),
      integer_key("dataset.textures", 10, "Background texture families", 1),
      integer_key("dataset.test_per_class", 100, "Balanced test images per class", 1),
      number_key("dataset.validation_fraction", "0.1", "Stratified validation share of the training split", 0, 0.5),
      number_key("dataset.head_fraction", "0.3333333333333333", "Share of classes in the head split", 0, 1),
      number_key("dataset.tail_fraction", "0.3333333333333333", "Share of classes in the tail split", 0, 1),

      integer_key("model.patch_size", 4, "Patch side length", 1),
      integer_key("model.embed_dim", 64, "Token width", 1),
      integer_key("model.depth", 4, "Transformer blocks", 0),
      integer_key("model.heads", 4, "Attention heads", 1),
      number_key("model.mlp_ratio", "2", "MLP hidden width over token width", 0.25),
      number_key("model.dropout", "0", "Dropout on attention and MLP outputs", 0, 0.9),
      integer_key("model.attention_dim", 0, "Query/key width of the deconfounded head (0: token width)", 0),

      choice_key("hcrl.masker", "oracle", {"oracle", "saliency"}, "Foreground mask source"),
      number_key("hcrl.saliency_q", "0.7", "Saliency quantile above which pixels are foreground", 1e-6, 0.999999),
      integer_key("hcrl.saliency_epochs", 5, "Epochs of the plain model used for saliency masks", 1),
      number_key("hcrl.selection_fraction", "1", "Share of training images turned into confounders", 1e-6, 1),
      integer_key("hcrl.seed", 0, "Confounder selection and clustering seed", 0),
      integer_key("hcrl.l", 8, "Prototype count", 1),
      integer_key("hcrl.m", -1, "Confounder tokens appended per image (-1: a quarter of the patches)", -1),
      integer_key("hcrl.kmeans_iters", 100, "Maximum Lloyd iterations", 1),
      number_key("hcrl.kmeans_tol", "1e-06", "Center-shift convergence tolerance", 0),
      choice_key("hcrl.dictionary", "confounder", {"confounder", "random", "zero", "average"},
                 "Prototype dictionary variant"),

      number_key("clbc.gamma", "0.6", "Accuracy threshold of the strength update", 1e-6, 0.999999),
      number_key("clbc.l_init", "0", "Initial strength per class", 0, 1),
      number_key("clbc.step", "0.1", "Strength step per epoch", 1e-6, 1),
      number_key("clbc.alpha_gf", "1", "Weight of the consistency term", 0),
      integer_key("clbc.target_per_class", 0, "Balanced set size per class (0: n_max)", 0),
      choice_key("clbc.consistency", "logits", {"logits", "features"}, "Representation compared by the consistency term"),

      string_key("train.toggles", "+I+F+C+R", "Enabled components: any of I, F, C, R, or base"),
      integer_key("train.seed", 0, "Training seed", 0),
      integer_key("train.stage1_epochs", 40, "Stage-1 epochs", 1),
      integer_key("train.stage2_epochs", 15, "Stage-2 epochs", 0),
      bool_key("train.equal_budget", true, "Without C, give stage 1 the stage-2 epochs as well"),
      integer_key("train.batch_size", 32, "Mini-batch size", 1),
      number_key("train.lr", "0.05", "Stage-1 peak learning rate", 1e-9),
      number_key("train.stage2_lr_scale", "0.1", "Stage-2 learning rate relative to stage 1", 1e-9),
      choice_key("train.schedule", "cosine", {"cosine", "step", "constant"}, "Learning-rate decay rule"),
      integer_key("train.warmup_epochs", 2, "Linear warm-up epochs in stage 1", 0),
      integer_key("train.step_every", 4, "Step schedule: epochs between decays", 1),
      number_key("train.step_factor", "0.1", "Step schedule: decay factor", 1e-9, 1),
      choice_key("train.optimizer", "sgd", {"sgd", "adamw"}, "Optimizer"),
      number_key("train.momentum", "0.9", "SGD momentum", 0, 0.999999),
      number_key("train.weight_decay", "0.0005", "Weight decay on weight matrices", 0),
      number_key("train.grad_clip", "0", "Global gradient-norm clip (0: off)", 0),

      string_key("eval.groups", "dataset", "Similarity groups: dataset, singletons, or a JSON file"),

      string_key("output.dir", "out", "Output directory (cache, runs, sweeps)"),
  };
  return keys;
}

std::string config_schema_json() {
  json props = json::object();
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    const std::string section = k.name.substr(0, dot), key = k.name.substr(dot + 1);
    if (!props.contains(section))
      props[section] = {{"type", "object"}, {"additionalProperties", false}, {"properties", json::object()}};
    json p;
    p["description"] = k.description;
    switch (k.type) {
      case ValueType::integer:
        p["type"] = "integer";
        p["default"] = std::stoll(k.default_value);
        break;
      case ValueType::number:
        p["type"] = "number";
        p["default"] = std::stod(k.default_value);
        break;
      case ValueType::boolean:
        p["type"] = "boolean";
        p["default"] = k.default_value == "true";
        break;
      case ValueType::string:
        p["type"] = "string";
        p["default"] = k.default_value;
        break;
      case ValueType::choice:
        p["type"] = "string";
        p["enum"] = k.choices;
        p["default"] = k.default_value;
        break;
    }
    if (k.minimum) p["minimum"] = *k.minimum;
    if (k.maximum) p["maximum"] = *k.maximum;
    props[section]["properties"][key] = p;
  }
  json schema;
  schema["$schema"] = "https://json-schema.org/draft/2020-12/schema";
  schema["title"] = "tscnet experiment configuration";
  schema["description"] =
      "Text format: [section] headers, key = value lines, # comments. Unknown keys are rejected.";
  schema["type"] = "object";
  schema["additionalProperties"] = false;
  schema["properties"] = props;
  return schema.dump(2) + "\n";
}

ExperimentConfig::ExperimentConfig() {
  for (const auto& k : config_keys()) values_[k.name] = normalise(k, k.default_value);
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::set<std::string> seen;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigurationError(where + "malformed section header");
      section = trim(body.substr(1, body.size() - 2));
      const bool known = std::any_of(config_keys().begin(), config_keys().end(),
                                     [&](const ConfigKey& k) { return k.name.rfind(section + ".", 0) == 0; });
      if (!known) throw ConfigurationError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigurationError(where + "expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string full = key.find('.') == std::string::npos && !section.empty() ? section + "." + key : key;
    if (!seen.insert(full).second) throw ConfigurationError(where + "duplicate key " + full);
    try {
      cfg.set(full, body.substr(eq + 1));
    } catch (const ConfigurationError& e) {
      throw ConfigurationError(where + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigurationError("config file not found: " + path.string());
  return parse(read_text_file(path), path.string());
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  values_[key] = normalise(lookup(key), value);
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigurationError("unknown configuration key: " + key);
  return it->second;
}

long ExperimentConfig::integer(const std::string& key) const { return std::stol(get(key)); }
double ExperimentConfig::number(const std::string& key) const { return std::stod(get(key)); }
bool ExperimentConfig::boolean(const std::string& key) const { return get(key) == "true"; }

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    if (k == "output.dir") continue;
    out += k + " = " + v + "\n";
  }
  return out;
}

std::string ExperimentConfig::hash() const { return sha256_hex(canonical()); }

std::string ExperimentConfig::to_text() const {
  std::string out, section;
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    const std::string s = k.name.substr(0, dot);
    if (s != section) {
      out += (out.empty() ? "[" : "\n[") + s + "]\n";
      section = s;
    }
    out += k.name.substr(dot + 1) + " = " + get(k.name) + "\n";
  }
  return out;
}

fs::path ExperimentConfig::output_dir() const { return get("output.dir"); }
std::string ExperimentConfig::dataset_source() const { return get("dataset.source"); }

SyntheticOptions ExperimentConfig::synthetic_options() const {
  SyntheticOptions o;
  o.confound_strength = number("dataset.rho");
  o.seed = static_cast<uint64_t>(integer("dataset.seed"));
  o.image_size = static_cast<int>(integer("dataset.image_size"));
  o.channels = static_cast<int>(integer("dataset.channels"));
  o.texture_count = static_cast<int>(integer("dataset.textures"));
  o.test_per_class = static_cast<int>(integer("dataset.test_per_class"));
  o.validation_fraction = number("dataset.validation_fraction");
  o.head_fraction = number("dataset.head_fraction");
  o.tail_fraction = number("dataset.tail_fraction");
  return o;
}

ImbalanceProfile ExperimentConfig::profile() const {
  return build_imbalance_profile(static_cast<int>(integer("dataset.classes")), static_cast<int>(integer("dataset.n_max")),
                                 number("dataset.ratio"));
}

BackboneConfig ExperimentConfig::backbone(const LongTailDataset& ds) const {
  BackboneConfig b;
  b.image_size = ds.image_size;
  b.channels = ds.channels;
  b.class_count = ds.class_count();
  b.patch_size = static_cast<int>(integer("model.patch_size"));
  b.embed_dim = static_cast<int>(integer("model.embed_dim"));
  b.depth = static_cast<int>(integer("model.depth"));
  b.heads = static_cast<int>(integer("model.heads"));
  b.mlp_ratio = number("model.mlp_ratio");
  b.dropout = number("model.dropout");
  return b;
}

ModelSpec ExperimentConfig::model_spec(const LongTailDataset& ds) const {
  ModelSpec spec = model_spec_for(backbone(ds), toggles(), static_cast<int>(integer("hcrl.l")));
  spec.attention_dim = static_cast<int>(integer("model.attention_dim"));
  return spec;
}

Toggles ExperimentConfig::toggles() const { return Toggles::parse(get("train.toggles")); }

bool ExperimentConfig::runs_stage2() const { return toggles().counterfactual; }

MaskerKind ExperimentConfig::masker() const { return masker_from_string(get("hcrl.masker")); }

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig c;
  c.toggles = toggles();
  c.stage1_epochs = static_cast<int>(integer("train.stage1_epochs"));
  c.stage2_epochs = static_cast<int>(integer("train.stage2_epochs"));
  if (!c.toggles.counterfactual && boolean("train.equal_budget")) c.stage1_epochs += c.stage2_epochs;
  c.batch_size = static_cast<int>(integer("train.batch_size"));
  c.learning_rate = number("train.lr");
  c.stage2_lr_scale = number("train.stage2_lr_scale");
  c.schedule = schedule_from_string(get("train.schedule"));
  c.warmup_epochs = static_cast<int>(integer("train.warmup_epochs"));
  c.step_every = static_cast<int>(integer("train.step_every"));
  c.step_factor = number("train.step_factor");
  c.optimizer = optimizer_from_string(get("train.optimizer"));
  c.momentum = number("train.momentum");
  c.weight_decay = number("train.weight_decay");
  c.grad_clip = number("train.grad_clip");
  c.confounder_tokens = static_cast<int>(integer("hcrl.m"));
  c.alpha_gf = number("clbc.alpha_gf");
  c.gamma = number("clbc.gamma");
  c.l_init = number("clbc.l_init");
  c.strength_step = number("clbc.step");
  c.target_per_class = static_cast<int>(integer("clbc.target_per_class"));
  c.consistency_on_features = get("clbc.consistency") == "features";
  c.seed = static_cast<uint64_t>(integer("train.seed"));
  return c;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigurationError("config: " + msg); };
  const bool synthetic = dataset_source() == "synthetic";
  if (!synthetic && get("dataset.path").empty()) fail("dataset.path is required for source = folder");
  if (!synthetic && !fs::is_directory(get("dataset.path"))) fail("dataset.path is not a directory: " + get("dataset.path"));
  if (number("dataset.head_fraction") + number("dataset.tail_fraction") > 1.0 + 1e-12)
    fail("head_fraction + tail_fraction must not exceed 1");
  if (synthetic) {
    try {
      profile();
    } catch (const ParameterError& e) {
      fail(e.what());
    }
    const int C = static_cast<int>(integer("dataset.classes"));
    if (C > max_synthetic_classes()) fail("the synthetic generator supports at most 40 classes");
    BackboneConfig b;
    b.image_size = static_cast<int>(integer("dataset.image_size"));
    b.channels = static_cast<int>(integer("dataset.channels"));
    b.class_count = C;
    b.patch_size = static_cast<int>(integer("model.patch_size"));
    b.embed_dim = static_cast<int>(integer("model.embed_dim"));
    b.depth = static_cast<int>(integer("model.depth"));
    b.heads = static_cast<int>(integer("model.heads"));
    b.mlp_ratio = number("model.mlp_ratio");
    b.dropout = number("model.dropout");
    try {
      b.validate();
    } catch (const ParameterError& e) {
      fail(e.what());
    }
    if (integer("hcrl.m") > b.patch_count()) fail("hcrl.m exceeds the number of patches");
  }
  const auto t = toggles();
  if (t.counterfactual && integer("train.stage2_epochs") < 1) fail("toggle C needs train.stage2_epochs >= 1");
  train_config().validate();
  const std::string groups = get("eval.groups");
  if (groups != "dataset" && groups != "singletons" && !fs::exists(groups))
    fail("eval.groups file not found: " + groups);
}

LongTailDataset materialize_dataset(const ExperimentConfig& config) {
  if (config.dataset_source() == "synthetic") return generate_synthetic_dataset(config.profile(), config.synthetic_options());
  const std::string manifest = config.get("dataset.manifest");
  auto ds = ingest_image_folder(config.get("dataset.path"),
                                manifest.empty() ? std::nullopt : std::optional<fs::path>(manifest));
  assign_splits(ds, config.number("dataset.head_fraction"), config.number("dataset.tail_fraction"));
  return ds;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

json artifacts_json(const std::vector<ArtifactRecord>& list) {
  json a = json::array();
  for (const auto& r : list) a.push_back({{"path", r.path}, {"sha256", r.sha256}});
  return a;
}

std::vector<ArtifactRecord> artifacts_from(const json& a) {
  std::vector<ArtifactRecord> out;
  for (const auto& r : a) out.push_back({r.at("path").get<std::string>(), r.at("sha256").get<std::string>()});
  return out;
}

std::string config_lines(const ExperimentConfig& cfg, std::initializer_list<std::string_view> prefixes) {
  std::string out;
  for (const auto& k : config_keys())
    for (auto p : prefixes)
      if (k.name.starts_with(p)) {
        out += k.name + "=" + cfg.get(k.name) + "\n";
        break;
      }
  return out;
}

fs::path next_numbered_dir(const fs::path& parent) {
  fs::create_directories(parent);
  long next = 1;
  for (const auto& e : fs::directory_iterator(parent)) {
    const std::string n = e.path().filename().string();
    long v = 0;
    const auto res = std::from_chars(n.data(), n.data() + n.size(), v);
    if (res.ec == std::errc() && res.ptr == n.data() + n.size()) next = std::max(next, v + 1);
  }
  for (;; ++next) {
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << next;
    const fs::path dir = parent / name.str();
    if (fs::create_directory(dir)) return dir;
  }
}

class StageCache {
 public:
  StageCache(fs::path out, RunManifest& manifest, std::ostream* status)
      : out_(std::move(out)), manifest_(manifest), status_(status) {}

  /// Returns the stage directory, running `produce` unless a complete cached
  /// copy with matching hashes exists.
  template <typename Produce>
  fs::path run(const std::string& name, const std::string& material, Produce&& produce) {
    const std::string key = sha256_hex(name + "\n" + material);
    const fs::path dir = out_ / "cache" / (name + "_" + key.substr(0, 16));
    const fs::path marker = dir / "stage.json";
    StageRecord rec{name, key, {}};
    if (cached(marker, key, rec)) {
      say(name + ": cache hit (" + dir.filename().string() + ")");
    } else {
      say(name + ": running");
      std::error_code ec;
      fs::remove_all(dir, ec);
      fs::create_directories(dir);
      try {
        produce(dir);
      } catch (const std::exception& e) {
        manifest_.status = "failed:" + name;
        throw StageFailure(name, e.what());
      }
      rec.artifacts = hash_tree(dir);
      json j{{"name", name}, {"key", key}, {"artifacts", artifacts_json(rec.artifacts)}};
      write_text_file(marker, j.dump(2) + "\n");
    }
    manifest_.stages.push_back(rec);
    return dir;
  }

  const std::string& last_key() const { return manifest_.stages.back().key; }

 private:
  bool cached(const fs::path& marker, const std::string& key, StageRecord& rec) const {
    if (!fs::exists(marker)) return false;
    try {
      const json j = json::parse(read_text_file(marker));
      if (j.at("key").get<std::string>() != key) return false;
      rec.artifacts = artifacts_from(j.at("artifacts"));
      for (const auto& a : rec.artifacts)
        if (!fs::exists(out_ / a.path) || sha256_file(out_ / a.path) != a.sha256) return false;
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  std::vector<ArtifactRecord> hash_tree(const fs::path& dir) const {
    std::vector<ArtifactRecord> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (!e.is_regular_file() || e.path().filename() == "stage.json") continue;
      out.push_back({fs::relative(e.path(), out_).generic_string(), sha256_file(e.path())});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
    return out;
  }

  void say(const std::string& msg) const {
    if (status_) *status_ << "[tscnet] " << msg << "\n" << std::flush;
  }

  fs::path out_;
  RunManifest& manifest_;
  std::ostream* status_;
};

SimilarityGroups groups_for(const ExperimentConfig& cfg, const LongTailDataset& ds) {
  const std::string g = cfg.get("eval.groups");
  SimilarityGroups groups = g == "dataset"      ? SimilarityGroups::from_dataset(ds)
                            : g == "singletons" ? SimilarityGroups::singletons(ds.class_count())
                                                : SimilarityGroups::load(g);
  groups.validate(ds.class_count());
  return groups;
}

void write_manifest(const RunManifest& m) { write_text_file(m.run_dir / "manifest.json", m.to_json()); }

}  // namespace

std::string RunManifest::to_json() const {
  json j;
  j["config"] = config_text;
  j["config_hash"] = config_hash;
  j["code_version"] = code_version;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  j["status"] = status;
  json stages_j = json::array();
  for (const auto& s : stages) stages_j.push_back({{"name", s.name}, {"key", s.key}, {"artifacts", artifacts_json(s.artifacts)}});
  j["stages"] = stages_j;
  j["run_files"] = artifacts_json(run_files);
  if (report) {
    j["metrics"] = {{"acc_all", report->acc_all},
                    {"acc_head", report->acc_head ? json(*report->acc_head) : json(nullptr)},
                    {"acc_mid", report->acc_mid ? json(*report->acc_mid) : json(nullptr)},
                    {"acc_tail", report->acc_tail ? json(*report->acc_tail) : json(nullptr)},
                    {"report", "metrics.json"}};
  }
  return j.dump(2) + "\n";
}

const ArtifactRecord* RunManifest::find(const std::string& path) const {
  for (const auto& s : stages)
    for (const auto& a : s.artifacts)
      if (a.path == path) return &a;
  for (const auto& a : run_files)
    if (a.path == path) return &a;
  return nullptr;
}

RunManifest run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const fs::path out = config.output_dir();
  RunManifest man;
  man.config_text = config.canonical();
  man.config_hash = config.hash();
  man.code_version = version_string();
  man.started_at = utc_now();
  man.run_dir = next_numbered_dir(out / "runs");
  write_text_file(man.run_dir / "config.cfg", config.to_text());

  StageCache cache(out, man, options.status);
  const Toggles toggles = config.toggles();
  const TrainConfig tc = config.train_config();
  try {
    // Data.
    std::string data_material = config_lines(config, {"dataset."});
    if (config.dataset_source() == "folder") {
      const std::string mf = config.get("dataset.manifest");
      const fs::path mpath = mf.empty() ? fs::path(config.get("dataset.path")) / "manifest.json" : fs::path(mf);
      if (fs::exists(mpath)) data_material += "manifest_sha256=" + sha256_file(mpath) + "\n";
    }
    std::optional<LongTailDataset> dataset;
    const fs::path data_dir = cache.run("data", data_material, [&](const fs::path& dir) {
      dataset = materialize_dataset(config);
      save_dataset(*dataset, dir);
    });
    const std::string data_key = cache.last_key();
    if (!dataset) dataset = load_dataset(data_dir);
    const LongTailDataset& ds = *dataset;
    const ModelSpec spec = config.model_spec(ds);

    // Confounder dictionary and prototypes.
    std::optional<ConfounderDictionary> confounders;
    std::optional<PrototypeDictionary> prototypes;
    std::string conf_key, proto_key;
    if (toggles.patch_intervention || toggles.feature_intervention) {
      std::string material = data_key + "\n" + config_lines(config, {"hcrl.masker", "hcrl.selection_fraction", "hcrl.seed"});
      const bool saliency = config.masker() == MaskerKind::saliency;
      if (saliency)
        material += config_lines(config, {"hcrl.saliency", "model.", "train.batch_size", "train.lr", "train.optimizer",
                                          "train.momentum", "train.weight_decay", "train.schedule", "train.warmup"});
      const fs::path dir = cache.run("confounders", material, [&](const fs::path& d) {
        Masker masker;
        masker.kind = config.masker();
        masker.threshold = config.number("hcrl.saliency_q");
        std::optional<VisionTransformer<float>> mask_model;
        if (saliency) {
          TrainConfig mc = tc;
          mc.toggles = {};
          mc.stage1_epochs = static_cast<int>(config.integer("hcrl.saliency_epochs"));
          mc.warmup_epochs = std::min(mc.warmup_epochs, mc.stage1_epochs - 1);
          mc.seed = derive_seed(static_cast<uint64_t>(config.integer("hcrl.seed")), 5);
          const ModelSpec ms = model_spec_for(spec.backbone, {}, spec.prototype_count);
          auto res = train_stage1(ds, nullptr, nullptr, ms, mc);
          save_checkpoint(res.checkpoint, d / "mask_model");
          mask_model = res.checkpoint.model();
          masker.model = &*mask_model;
        }
        ConfounderOptions co;
        co.selection_fraction = config.number("hcrl.selection_fraction");
        co.seed = static_cast<uint64_t>(config.integer("hcrl.seed"));
        confounders = build_confounder_dictionary(ds, masker, co);
        save_confounder_dictionary(*confounders, d);
      });
      conf_key = cache.last_key();
      if (!confounders) confounders = load_confounder_dictionary(dir);

      if (toggles.feature_intervention) {
        const std::string pm = conf_key + "\n" + data_key + "\n" +
                               config_lines(config, {"model.", "train.seed", "hcrl.l", "hcrl.kmeans", "hcrl.dictionary", "hcrl.seed"});
        const fs::path pdir = cache.run("prototypes", pm, [&](const fs::path& d) {
          const auto backbone = initial_model(spec, tc.seed);
          auto dict = build_prototype_dictionary(*confounders, backbone, static_cast<int>(config.integer("hcrl.l")),
                                                 static_cast<int>(config.integer("hcrl.kmeans_iters")),
                                                 config.number("hcrl.kmeans_tol"),
                                                 static_cast<uint64_t>(config.integer("hcrl.seed")));
          const auto variant = dictionary_variant_from_string(config.get("hcrl.dictionary"));
          MatrixD full;
          if (variant == DictionaryVariant::average) {
            const auto fit = ds.fit_indices();
            full.resize(static_cast<Eigen::Index>(fit.size()), dict.d());
            for (size_t i = 0; i < fit.size(); ++i)
              full.row(static_cast<Eigen::Index>(i)) = backbone.feature(ds.train[fit[i]].image).cast<double>().transpose();
          }
          prototypes = make_variant_dictionary(variant, dict, full, static_cast<uint64_t>(config.integer("hcrl.seed")));
          save_prototype_dictionary(*prototypes, d / "prototypes");
        });
        proto_key = cache.last_key();
        if (!prototypes) prototypes = load_prototype_dictionary(pdir / "prototypes");
      }
    }

    // Stage 1.
    std::string s1 = data_key + "\n" + conf_key + "\n" + proto_key + "\n" +
                     config_lines(config, {"model.", "hcrl.m", "hcrl.l", "train.seed", "train.batch_size", "train.lr",
                                           "train.schedule", "train.warmup_epochs", "train.step_", "train.optimizer",
                                           "train.momentum", "train.weight_decay", "train.grad_clip"});
    s1 += "toggles.I=" + std::to_string(toggles.patch_intervention) + "\ntoggles.F=" +
          std::to_string(toggles.feature_intervention) + "\nstage1_epochs=" + std::to_string(tc.stage1_epochs) + "\n";
    TrainConfig tc1 = tc;
    tc1.toggles.counterfactual = tc1.toggles.refinement = false;
    std::optional<Checkpoint> ck;
    const fs::path s1dir = cache.run("stage1", s1, [&](const fs::path& d) {
      std::ofstream log(d / "train_log.jsonl");
      TrainRunOptions ro;
      ro.log = &log;
      auto res = train_stage1(ds, confounders ? &*confounders : nullptr, prototypes ? &*prototypes : nullptr, spec, tc1, ro);
      save_checkpoint(res.checkpoint, d / "checkpoint");
      ck = std::move(res.checkpoint);
    });
    std::string final_key = cache.last_key();
    if (!ck) ck = load_checkpoint(s1dir / "checkpoint");

    // Stage 2.
    if (config.runs_stage2()) {
      std::string s2 = final_key + "\n" + config_lines(config, {"clbc.", "train.stage2_epochs", "train.stage2_lr_scale"});
      s2 += "toggles.R=" + std::to_string(toggles.refinement) + "\n";
      std::optional<Checkpoint> ck2;
      const fs::path s2dir = cache.run("stage2", s2, [&](const fs::path& d) {
        std::ofstream log(d / "train_log.jsonl");
        TrainRunOptions ro;
        ro.log = &log;
        auto res = train_stage2(&*ck, ds, tc, ro);
        save_checkpoint(res.checkpoint, d / "checkpoint");
        ck2 = std::move(res.checkpoint);
      });
      final_key = cache.last_key();
      ck = ck2 ? std::move(*ck2) : load_checkpoint(s2dir / "checkpoint");
    }

    // Evaluation.
    std::string em = final_key + "\n" + config_lines(config, {"eval."});
    const std::string g = config.get("eval.groups");
    if (g != "dataset" && g != "singletons") em += "groups_sha256=" + sha256_file(g) + "\n";
    std::optional<MetricsReport> report;
    const fs::path edir = cache.run("eval", em, [&](const fs::path& d) {
      const auto model = ck->model();
      MetricsReport r = evaluate(model, ds.test, ds.splits, groups_for(config, ds));
      r.config_fingerprint = config.hash();
      r.model_fingerprint = ck->fingerprint();
      r.seed = tc.seed;
      save_report(r, d / "metrics.json");
      report = r;
    });
    if (!report) report = load_report(edir / "metrics.json");
    man.report = report;
  } catch (const StageFailure&) {
    man.finished_at = utc_now();
    write_manifest(man);
    throw;
  }

  // The report is also copied next to the manifest so that each run
  // directory is self-contained.
  save_report(*man.report, man.run_dir / "metrics.json");
  for (const char* f : {"config.cfg", "metrics.json"})
    man.run_files.push_back({fs::relative(man.run_dir / f, out).generic_string(), sha256_file(man.run_dir / f)});
  man.finished_at = utc_now();
  write_manifest(man);
  return man;
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<Toggles> parse_sweep_rows(const std::string& text) {
  std::vector<Toggles> rows;
  std::istringstream in(text);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    try {
      rows.push_back(Toggles::parse(body));
    } catch (const ParameterError& e) {
      throw ConfigurationError("sweep line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

bool SweepSummary::all_ok() const {
  return std::all_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.ok; });
}

namespace {

std::string cell(const std::optional<double>& v, int precision = 4) {
  if (!v) return "";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << *v;
  return s.str();
}

}  // namespace

std::string SweepSummary::table_markdown() const {
  std::string out = "| row | Acc@all | Acc@h | Acc@m | Acc@t | status | manifest |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    auto c = [&](const std::optional<double>& v) {
      const auto s = cell(v);
      return s.empty() ? std::string("-") : s;
    };
    const auto& rep = r.report;
    out += "| " + r.label + " | " + c(rep ? std::optional(rep->acc_all) : std::nullopt) + " | " +
           c(rep ? rep->acc_head : std::nullopt) + " | " + c(rep ? rep->acc_mid : std::nullopt) + " | " +
           c(rep ? rep->acc_tail : std::nullopt) + " | " + (r.ok ? "ok" : "failed: " + r.error) + " | " +
           r.manifest.generic_string() + " |\n";
  }
  return out;
}

std::string SweepSummary::table_csv() const {
  std::string out = "row,acc_all,acc_head,acc_mid,acc_tail,status,manifest\n";
  for (const auto& r : rows) {
    const auto& rep = r.report;
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '"', '\'');
    out += r.label + "," + cell(rep ? std::optional(rep->acc_all) : std::nullopt, 17) + "," +
           cell(rep ? rep->acc_head : std::nullopt, 17) + "," + cell(rep ? rep->acc_mid : std::nullopt, 17) + "," +
           cell(rep ? rep->acc_tail : std::nullopt, 17) + ",\"" + (r.ok ? "ok" : "failed: " + err) + "\"," +
           r.manifest.generic_string() + "\n";
  }
  return out;
}

std::string SweepSummary::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    json j{{"row", r.label}, {"ok", r.ok}, {"error", r.error}, {"manifest", r.manifest.generic_string()}};
    j["report"] = r.report ? json::parse(report_to_json(*r.report)) : json(nullptr);
    rows_j.push_back(j);
  }
  return json{{"rows", rows_j}}.dump(2) + "\n";
}

SweepSummary ablation_sweep(const ExperimentConfig& base, const std::vector<Toggles>& rows, const RunOptions& options) {
  base.validate();
  SweepSummary summary;
  for (const auto& t : rows) {
    SweepRow row;
    row.label = t.label();
    if (options.status) *options.status << "[tscnet] sweep row " << row.label << "\n" << std::flush;
    try {
      ExperimentConfig cfg = base;
      cfg.set("train.toggles", row.label);
      const auto man = run_experiment(cfg, options);
      row.ok = true;
      row.report = man.report;
      row.manifest = man.run_dir / "manifest.json";
    } catch (const std::exception& e) {
      row.error = e.what();
      if (options.status) *options.status << "[tscnet] row " << row.label << " failed: " << e.what() << "\n";
    }
    summary.rows.push_back(std::move(row));
  }
  summary.dir = next_numbered_dir(base.output_dir() / "sweeps");
  write_text_file(summary.dir / "summary.json", summary.to_json());
  write_text_file(summary.dir / "summary.csv", summary.table_csv());
  write_text_file(summary.dir / "summary.md", summary.table_markdown());
  return summary;
}

}  // namespace tscnet
