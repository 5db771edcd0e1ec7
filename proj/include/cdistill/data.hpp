// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion, label normalization and the sampling protocol for
// context sets, inference requests and evaluation draws.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdistill/example.hpp"

namespace cdistill {

/// Ingestion failure with one entry per offending line.
struct IngestionError : std::runtime_error {
  IngestionError(std::string source, std::vector<std::string> problems);
  std::string source;
  std::vector<std::string> problems;
};

struct SamplingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class SplitRole { train, in_domain_validation, ood_validation };

std::string_view to_string(SplitRole role);

struct DatasetSplit {
  std::string name;
  SplitRole role = SplitRole::train;
  std::vector<LabeledExample> examples;

  std::size_t size() const noexcept { return examples.size(); }
  // Throws IngestionError on duplicate uids.
  void validate_unique_uids() const;
};

struct TaskSpec {
  TaskKind kind = TaskKind::nli;
  std::string in_domain;  // mnli | rte | qqp
  std::string ood;        // hans-lexical-overlap | paws-qqp

  bool operator==(const TaskSpec&) const = default;
};

// Fixed pairing of in-domain datasets with their task and OOD set.
TaskSpec task_spec_for(std::string_view in_domain);
const std::vector<std::string>& in_domain_datasets();

/// A record before label normalization; `raw_label` is whatever the source
/// file carried (numbers are stringified).
struct RawExample {
  std::string uid;
  std::string premise;
  std::string hypothesis;
  std::string raw_label;
  std::size_t line = 0;
};

std::vector<RawExample> read_raw_jsonl(const std::filesystem::path& path);
std::vector<RawExample> parse_raw_jsonl(std::string_view text, const std::string& source);

// Normalized split: labels must already be "yes"/"no".
DatasetSplit load_split(const std::filesystem::path& path, std::string name = {},
                        SplitRole role = SplitRole::train);

// Drops neutral rows, maps entailment→yes and contradiction→no; already
// binary yes/no rows pass through, so the operation is idempotent.
DatasetSplit binarize_mnli(std::span<const RawExample> raw, std::string name, SplitRole role,
                           std::vector<std::string>* warnings = nullptr);

enum class LabelScheme { yes_no, mnli_three_way, binary_nli, paraphrase };

std::string_view to_string(LabelScheme scheme);
LabelScheme label_scheme_from_string(std::string_view text);

// Maps source labels onto yes/no (entailment or paraphrase → yes).
DatasetSplit relabel(std::span<const RawExample> raw, LabelScheme scheme, std::string name, SplitRole role,
                     std::vector<std::string>* warnings = nullptr);

std::vector<RawExample> to_raw(const DatasetSplit& split);

// One normalized JSONL line per example, keys in schema order.
std::string to_jsonl(const DatasetSplit& split);
void write_split(const std::filesystem::path& path, const DatasetSplit& split);

// ---- sampling ----

inline constexpr std::size_t kContextSetsPerSize = 4;

struct ContextSet {
  std::size_t n = 0;
  std::size_t set_index = 0;
  std::uint64_t seed = 0;
  std::vector<LabeledExample> examples;
};

// Four sets of n distinct examples, pairwise non-identical as uid sets.
// Sets may share individual examples.
std::array<ContextSet, kContextSetsPerSize> sample_context_sets(const DatasetSplit& split, std::size_t n,
                                                                std::uint64_t seed);

// `count` examples whose uids avoid every example of every given context set.
std::vector<LabeledExample> sample_inference_requests(const DatasetSplit& split,
                                                      std::span<const ContextSet> context_sets, std::size_t count,
                                                      std::uint64_t seed);

// Validation-role splits only.
std::vector<LabeledExample> sample_eval(const DatasetSplit& split, std::size_t count, std::uint64_t seed);

// Throws LeakageError if any inference uid is among the context uids.
void assert_no_leakage(std::span<const LabeledExample> contexts, std::span<const LabeledExample> inference);

// ---- manifests ----

struct DatasetEntry {
  std::optional<std::filesystem::path> train;
  std::filesystem::path validation;
  LabelScheme labels = LabelScheme::yes_no;
};

/// Dataset name → files. Relative paths resolve against the manifest's
/// directory.
struct Manifest {
  std::filesystem::path base_dir;
  std::map<std::string, DatasetEntry> datasets;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// Everything a run needs from a prepared data directory.
struct TaskData {
  TaskSpec task;
  DatasetSplit train;
  DatasetSplit validation;
  DatasetSplit ood;
};

TaskData load_task_data(const Manifest& prepared, std::string_view in_domain);

}  // namespace cdistill
