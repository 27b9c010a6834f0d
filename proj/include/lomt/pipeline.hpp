#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lomt/train.hpp"

namespace lomt {

struct ConfigError : std::runtime_error {
  std::string field;
  ConfigError(std::string field_, const std::string& msg)
      : std::runtime_error(msg), field(std::move(field_)) {}
};

struct DegenerateSparsityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetSource {
  std::optional<SceneConfig> generator;
  int n = 0;
  uint64_t seed = 0;
  std::string manifest;  // alternative to the generator
};

struct ExperimentConfig {
  std::string kind;  // dense-stl | sparse-stl | dense-mtl | lomt
  BackboneSpec backbone = BackboneSpec::standard(6, 16);
  std::vector<TaskSpec> tasks;
  TrainConfig train;
  DatasetSource dataset;
  std::map<std::string, std::string> phase1_runs;  // lomt: task -> run dir
  std::string output_dir;

  std::string snapshot;   // byte-identical copy of the input config text
  std::string effective;  // post-override canonical JSON

  void validate() const;
};

/// Parses and validates; overrides are dotted key=value assignments applied
/// to the JSON before conversion.
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides);
ExperimentConfig parse_config_file(const std::string& path,
                                   const std::vector<std::string>& overrides);

/// Prefixes relative directories with $LOMT_OUT when set.
std::string resolve_output_dir(const std::string& dir);

Dataset load_dataset_source(const DatasetSource& source);

// ------------------------------------------------------------- subcommands

void run_gen_data(const ExperimentConfig& config);

/// Trains every seed in config.train.seeds, writing one run directory per
/// seed plus an aggregate report.csv.
void run_train_stl(const ExperimentConfig& config);
void run_train_mtl(const ExperimentConfig& config);

/// Recomputes pattern, taps, and compression numbers from a finished
/// train-stl run directory's checkpoints.
void run_analyze(const std::string& run_dir);

/// Per-seed tap selection from phase-1 pattern files (patterns only, no
/// checkpoint access). Writes taps.json under the config's output dir.
std::map<uint64_t, TapSelection> run_plan_lomt(const ExperimentConfig& config);

void run_sweep(const ExperimentConfig& config, const std::vector<double>& lambdas);

void run_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

// ------------------------------------------------------------ CLI plumbing

/// Dispatches one subcommand; returns the process exit code (0 ok, 2 config
/// error, 3 training divergence, 4 degenerate all-zero sparsity) and writes
/// a machine-readable error record to stderr (and error.json when an output
/// directory is known) on failure.
int run_cli(int argc, char** argv);

}  // namespace lomt
