// SPDX-License-Identifier: Apache-2.0
//
// Small template-generated corpora in the raw source schemas: a three-way
// NLI set, a binary NLI set with long premises, a question-pair set, and the
// two out-of-domain challenge sets. Labels follow lexical cues.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdistill/data.hpp"

namespace cdistill {

struct SyntheticOptions {
  std::uint64_t seed = 17;
  std::size_t train_size = 480;
  std::size_t validation_size = 240;
};

struct SyntheticFile {
  std::string dataset;
  std::string split;  // "train" | "validation"
  LabelScheme labels = LabelScheme::yes_no;
  std::vector<RawExample> rows;  // raw_label in the source vocabulary
};

std::vector<SyntheticFile> generate_synthetic_corpus(const SyntheticOptions& options = {});

// Writes <dataset>_<split>.jsonl files plus manifest.json into `dir`.
void write_synthetic_corpus(const std::filesystem::path& dir, const SyntheticOptions& options = {});

// Raw-schema JSONL: {"uid","premise","hypothesis","label"} with source labels.
std::string raw_to_jsonl(const std::vector<RawExample>& rows);

}  // namespace cdistill
