// SPDX-License-Identifier: Apache-2.0
//
// Run-record files, CSV aggregation, the accuracy table and plot series.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdistill/distill.hpp"

namespace cdistill {

std::string run_record_path_name(const std::string& config_hash);  // <hash>.json

// Pretty JSON with a trailing newline; identical records give identical bytes.
std::string run_record_text(const RunRecord& record);

/// Writes <hash>.json (and <hash>.adapters.bin when the record carries
/// adapter bytes) via a temporary file and rename, so readers never see a
/// partial record.
std::filesystem::path write_run_json(const std::filesystem::path& runs_dir, const RunRecord& record);

RunRecord read_run_json(const std::filesystem::path& path);

struct ResultRow {
  std::string config_hash;
  std::string dataset;
  std::string model_size;
  std::size_t n = 0;
  std::size_t set_index = 0;
  std::string status;
  std::optional<double> teacher_acc;
  std::optional<double> student_in_domain_acc;
  std::optional<double> student_ood_acc;
  std::optional<double> final_loss;

  bool operator==(const ResultRow&) const = default;
};

inline constexpr std::string_view kResultsCsvHeader =
    "config_hash,dataset,model_size,n,set_index,status,teacher_acc,student_in_domain_acc,student_ood_acc,final_loss";

ResultRow result_row(const RunRecord& record);

struct Aggregate {
  std::vector<ResultRow> rows;       // sorted: dataset, size, n, set, hash
  std::vector<std::string> warnings;  // one per skipped file
};

// Reads every *.json in `runs_dir`; malformed files are skipped with a warning.
Aggregate aggregate_runs(const std::filesystem::path& runs_dir);

std::string results_csv(std::span<const ResultRow> rows);
std::vector<ResultRow> parse_results_csv(std::string_view text);

// Writes the CSV and returns the aggregation warnings.
std::vector<std::string> aggregate_to_csv(const std::filesystem::path& runs_dir, const std::filesystem::path& csv);

/// Markdown table: in-domain dataset × model size rows, teacher / student
/// in-domain / student OOD columns holding the mean over completed runs.
/// Best value per row in bold; cells without runs show "-".
std::string render_accuracy_table(std::span<const ResultRow> rows, std::optional<std::size_t> n_filter);

struct SeriesFile {
  std::string name;
  std::string content;
};

// Reference values to overlay, e.g. data/reference/published_accuracy.csv.
struct ReferencePoint {
  std::string dataset;
  std::string model_size;
  std::size_t n = 0;
  std::string metric;
  double value = 0.0;
};

std::vector<ReferencePoint> parse_reference_csv(std::string_view text);

/// One series_<dataset>_n<n>.csv per (dataset, n) with per-set points and a
/// mean row per (size, metric); plus overlay_reference.csv when reference
/// points are given. Columns: dataset,n,model_size,metric,set_index,value.
std::vector<SeriesFile> export_plot_data(std::span<const ResultRow> rows, std::optional<std::size_t> n_filter,
                                         std::span<const ReferencePoint> reference = {});

}  // namespace cdistill
