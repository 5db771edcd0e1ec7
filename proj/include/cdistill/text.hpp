// SPDX-License-Identifier: Apache-2.0
//
// Word-level tokenizer and the teacher/student prompt patterns.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cdistill/example.hpp"

namespace cdistill {

using TokenId = std::int64_t;

struct VocabularyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Token table with reserved singletons first.
///
/// Text is split into word runs, single punctuation characters and newlines.
/// A single space before a word (not at the start, not after a newline) is
/// implied; any other spacing is spelled out with the <sp> and <glue>
/// markers, so decode(encode(s)) == s whenever every piece of s is known.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnknown = 1;
  static constexpr TokenId kNewline = 2;
  static constexpr TokenId kYes = 3;
  static constexpr TokenId kNo = 4;
  static constexpr TokenId kSpace = 5;
  static constexpr TokenId kGlue = 6;

  static const std::vector<std::string>& reserved_tokens();

  Vocabulary();
  // Reserved tokens plus every piece occurring in `corpus`, in sorted order.
  static Vocabulary build(std::span<const std::string> corpus);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  TokenId id_of(std::string_view piece) const;  // kUnknown when absent
  bool contains(std::string_view piece) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  TokenId label_id(Label label) const { return label == Label::yes ? kYes : kNo; }

  // One token per line after a version header; "\n" and "\r" are escaped
  // as <nl> and <cr>.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  std::string serialize() const;
  static Vocabulary deserialize(std::string_view text);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string piece);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Raw pieces of `text` (no markers). Exposed for vocabulary building and tests.
std::vector<std::string> split_pieces(std::string_view text);

enum class PromptRole { teacher, student };

std::string_view to_string(PromptRole role);

struct PatternSpec {
  TaskKind task = TaskKind::nli;
  PromptRole role = PromptRole::teacher;
  std::string instruction;
  std::string answer_prefix = "Label:";
};

PatternSpec pattern_for(TaskKind task, PromptRole role);

struct RenderedPrompt {
  std::string text;
  std::vector<TokenId> token_ids;
  std::size_t answer_position = 0;
};

// "Premise: {premise}\nHypothesis: {hypothesis}\nLabel:" plus " Yes"/" No".
std::string render_example(const LabeledExample& example, bool with_label);

// Instruction, labeled contexts separated by blank lines, then the unlabeled
// inference example. Throws LeakageError when the inference uid is a context.
RenderedPrompt render_teacher_prompt(const Vocabulary& vocab, const PatternSpec& spec,
                                     std::span<const LabeledExample> contexts, const LabeledExample& inference);

RenderedPrompt render_student_prompt(const Vocabulary& vocab, const PatternSpec& spec,
                                     const LabeledExample& inference);

// Every string the tokenizer must cover for a task: instructions and field names.
std::vector<std::string> pattern_strings();

}  // namespace cdistill
