// SPDX-License-Identifier: Apache-2.0
//
// The three pipeline commands behind the cdistill executable: prepare data,
// run the experiment matrix, report.

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdistill/distill.hpp"
#include "cdistill/report.hpp"

namespace cdistill {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kExitOk = 0, kExitConfigError = 2, kExitDataError = 3, kExitRunFailure = 4 };

inline constexpr const char* kRunsDirEnv = "CDISTILL_RUNS_DIR";

struct CliConfig {
  std::filesystem::path data_dir = "data/prepared";
  std::filesystem::path runs_dir = "runs";
  std::filesystem::path vocab_file;  // empty: <data_dir>/vocab.txt
  std::vector<TaskPlan> tasks = default_task_plans();
  std::vector<std::string> sizes = model_size_tags();
  std::size_t sets = kContextSetsPerSize;
  RunSeeds seeds;
  Hyperparams hyperparams;
  LoraConfig lora;
  std::size_t inference_requests = 32;
  std::size_t eval_count = 100;
  std::size_t max_seq_len = 0;
  bool cache_teacher = false;
  std::size_t workers = 1;

  std::filesystem::path resolved_vocab_file() const;
  // RunConfig fields shared by every planned run.
  RunConfig base_run() const;
  std::vector<RunConfig> plan() const;
  bool operator==(const CliConfig&) const = default;
};

void to_json(nlohmann::json& j, const CliConfig& c);
// Missing keys keep their defaults; unknown keys are a ConfigError.
void from_json(const nlohmann::json& j, CliConfig& c);

CliConfig load_cli_config(const std::filesystem::path& path);
void save_cli_config(const std::filesystem::path& path, const CliConfig& config);

// ---- prepare ----

struct PreparedCounts {
  std::size_t raw_train = 0;
  std::size_t train = 0;
  std::size_t raw_validation = 0;
  std::size_t validation = 0;
};

struct PrepareSummary {
  std::map<std::string, PreparedCounts> datasets;
  std::size_t vocab_size = 0;
  std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const PrepareSummary& s);

/// Normalizes every dataset of a raw manifest into `out_dir`:
/// <name>_train.jsonl / <name>_validation.jsonl, vocab.txt, manifest.json
/// and summary.json. Running it on its own output reproduces that output.
PrepareSummary prepare_data(const std::filesystem::path& raw_manifest, const std::filesystem::path& out_dir);

// ---- run ----

struct MatrixSummary {
  std::size_t planned = 0;
  std::size_t skipped = 0;  // already recorded as completed or infeasible
  std::size_t completed = 0;
  std::size_t infeasible = 0;
  std::size_t failed = 0;
};

using ProgressFn = std::function<void(const RunRecord&)>;

/// Executes the planned runs that have no completed/infeasible record yet,
/// on `config.workers` threads. A failing run is recorded and never stops
/// the others.
MatrixSummary run_matrix(const CliConfig& config, const ProgressFn& progress = {});

// ---- report ----

struct ReportOptions {
  std::filesystem::path runs_dir;
  std::filesystem::path out_dir;
  bool table = true;
  bool series = true;
  std::optional<std::size_t> n;
  std::optional<std::filesystem::path> reference;
};

struct ReportOutput {
  std::string csv;
  std::string table;  // empty unless requested
  std::vector<SeriesFile> series;
  std::vector<std::string> warnings;
};

// Writes results.csv, accuracy_table.md and the series files into out_dir.
ReportOutput report(const ReportOptions& options);

}  // namespace cdistill
