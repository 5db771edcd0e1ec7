// SPDX-License-Identifier: Apache-2.0
//
// Label readout restricted to the two target tokens, and accuracy over an
// evaluation draw.

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdistill/data.hpp"
#include "cdistill/model.hpp"
#include "cdistill/text.hpp"

namespace cdistill {

struct Prediction {
  std::string uid;
  Label gold = Label::no;
  Label predicted = Label::no;
  double margin = 0.0;    // logit(Yes) - logit(No); 0 for overflowed prompts
  bool overflow = false;  // prompt exceeded the context window; counted wrong

  bool correct() const { return !overflow && predicted == gold; }
  bool operator==(const Prediction&) const = default;
};

struct EvalResult {
  SplitRole split = SplitRole::in_domain_validation;
  PromptRole role = PromptRole::student;
  std::size_t n_examples = 0;
  std::size_t n_correct = 0;
  std::size_t n_overflow = 0;
  double accuracy = 0.0;
  std::vector<Prediction> predictions;

  bool operator==(const EvalResult&) const = default;
};

void to_json(nlohmann::json& j, const EvalResult& r);
void from_json(const nlohmann::json& j, EvalResult& r);

// Yes iff logit(Yes) > logit(No); exact ties go to No.
Label predict_label(std::span<const double> final_logits);

// Final-position logits for a token sequence.
using LastLogitsFn = std::function<Tensor(std::span<const TokenId>)>;

/// Scores `examples` with prompts of the given role. Teacher evaluation needs
/// the run's context examples, student evaluation must not receive any.
/// Prompts longer than `max_seq_len` count as incorrect.
EvalResult evaluate(const LastLogitsFn& model, PromptRole role, std::span<const LabeledExample> examples,
                    const PatternSpec& spec, const std::vector<LabeledExample>* contexts, const Vocabulary& vocab,
                    SplitRole split, std::size_t max_seq_len);

EvalResult evaluate(const TransformerWeights& teacher, std::span<const LabeledExample> examples,
                    const PatternSpec& spec, const std::vector<LabeledExample>& contexts, const Vocabulary& vocab,
                    SplitRole split);

EvalResult evaluate(const AdaptedModel& student, std::span<const LabeledExample> examples, const PatternSpec& spec,
                    const Vocabulary& vocab, SplitRole split);

}  // namespace cdistill
