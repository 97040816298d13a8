#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tscnet/common.hpp"
#include "tscnet/confounder.hpp"
#include "tscnet/datagen.hpp"
#include "tscnet/eval.hpp"
#include "tscnet/model.hpp"
#include "tscnet/train.hpp"

namespace tscnet {

enum class ValueType { integer, number, boolean, string, choice };

/// One documented configuration key.
struct ConfigKey {
  std::string name;  // "section.key"
  ValueType type;
  std::string default_value;
  std::string description;
  std::optional<double> minimum, maximum;
  std::vector<std::string> choices;
};

/// Every accepted key, in documentation order.
const std::vector<ConfigKey>& config_keys();
/// JSON-schema-style description of the configuration surface.
std::string config_schema_json();

/// Experiment configuration. Text format: `[section]` headers followed by
/// `key = value` lines; `#` starts a comment. Unknown keys and malformed
/// values are rejected, and the whole configuration is validated on load.
class ExperimentConfig {
 public:
  ExperimentConfig();  // all defaults

  static ExperimentConfig parse(const std::string& text, const std::string& origin = "<config>");
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Sets "section.key" from text; throws ConfigurationError on an unknown key
  /// or a bad value. Call validate() after a series of edits.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  void validate() const;

  /// Normalised "section.key = value" lines, sorted, excluding the output
  /// directory.
  std::string canonical() const;
  std::string hash() const;
  /// Full config in the text format (round-trips through parse).
  std::string to_text() const;

  std::filesystem::path output_dir() const;
  std::string dataset_source() const;
  SyntheticOptions synthetic_options() const;
  ImbalanceProfile profile() const;
  /// Backbone sized for a dataset (classes, image size and channels).
  BackboneConfig backbone(const LongTailDataset& dataset) const;
  ModelSpec model_spec(const LongTailDataset& dataset) const;
  Toggles toggles() const;
  TrainConfig train_config() const;  // stage-1 epochs already adjusted for equal budgets
  bool runs_stage2() const;
  MaskerKind masker() const;

  long integer(const std::string& key) const;
  double number(const std::string& key) const;
  bool boolean(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
};

struct ArtifactRecord {
  std::string path;  // relative to the output directory
  std::string sha256;
  bool operator==(const ArtifactRecord&) const = default;
};

struct StageRecord {
  std::string name;
  std::string key;  // content hash of the stage inputs
  std::vector<ArtifactRecord> artifacts;
};

struct RunManifest {
  std::string config_text;
  std::string config_hash;
  std::vector<StageRecord> stages;
  std::vector<ArtifactRecord> run_files;
  std::string started_at;
  std::string finished_at;
  std::string code_version;
  std::string status = "complete";  // or "failed:<stage>"
  std::filesystem::path run_dir;    // not serialised
  std::optional<MetricsReport> report;

  std::string to_json() const;
  /// Artifact entry for `path` (relative) in any stage, or nullptr.
  const ArtifactRecord* find(const std::string& path) const;
};

/// Raised when a stage of run_experiment fails. Partial artifacts are kept.
class StageFailure : public Error {
 public:
  StageFailure(std::string stage, const std::string& what)
      : Error("stage " + stage + " failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunOptions {
  std::ostream* status = nullptr;  // human-readable progress, e.g. std::cerr
};

/// gen-data -> build-confounders -> stage 1 -> stage 2 -> eval, reusing cached
/// stages under <out>/cache whose input hashes match. Writes
/// <out>/runs/<n>/manifest.json.
RunManifest run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct SweepRow {
  std::string label;
  bool ok = false;
  std::string error;
  std::optional<MetricsReport> report;
  std::filesystem::path manifest;
};

struct SweepSummary {
  std::vector<SweepRow> rows;
  std::filesystem::path dir;

  bool all_ok() const;
  std::string table_markdown() const;
  std::string table_csv() const;
  std::string to_json() const;
};

/// Toggle rows, one per line ("base", "+I", "+I+F+C+R", ...); '#' comments.
std::vector<Toggles> parse_sweep_rows(const std::string& text);

/// Runs each row with the base config and the row's toggles; failures are
/// recorded and the sweep continues. Writes <out>/sweeps/<n>/summary.{json,csv,md}.
SweepSummary ablation_sweep(const ExperimentConfig& base, const std::vector<Toggles>& rows,
                            const RunOptions& options = {});

/// Loads or generates the dataset described by a config.
LongTailDataset materialize_dataset(const ExperimentConfig& config);

}  // namespace tscnet
