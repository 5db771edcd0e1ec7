// SPDX-License-Identifier: Apache-2.0

#include "cdistill/evaluate.hpp"

namespace cdistill {

void to_json(nlohmann::json& j, const EvalResult& r) {
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : r.predictions) {
    preds.push_back({{"uid", p.uid},
                     {"gold", to_string(p.gold)},
                     {"predicted", to_string(p.predicted)},
                     {"margin", p.margin},
                     {"overflow", p.overflow}});
  }
  j = nlohmann::json{{"split", to_string(r.split)},         {"role", to_string(r.role)},
                     {"n_examples", r.n_examples},          {"n_correct", r.n_correct},
                     {"n_overflow", r.n_overflow},          {"accuracy", r.accuracy},
                     {"predictions", std::move(preds)}};
}

void from_json(const nlohmann::json& j, EvalResult& r) {
  const auto split = j.at("split").get<std::string>();
  if (split == "in_domain_validation") {
    r.split = SplitRole::in_domain_validation;
  } else if (split == "ood_validation") {
    r.split = SplitRole::ood_validation;
  } else {
    throw std::invalid_argument("EvalResult: unexpected split '" + split + "'");
  }
  r.role = j.at("role").get<std::string>() == "teacher" ? PromptRole::teacher : PromptRole::student;
  j.at("n_examples").get_to(r.n_examples);
  j.at("n_correct").get_to(r.n_correct);
  r.n_overflow = j.value("n_overflow", std::size_t{0});
  j.at("accuracy").get_to(r.accuracy);
  r.predictions.clear();
  for (const auto& p : j.value("predictions", nlohmann::json::array())) {
    Prediction pred;
    pred.uid = p.at("uid").get<std::string>();
    pred.gold = label_from_string(p.at("gold").get<std::string>());
    pred.predicted = label_from_string(p.at("predicted").get<std::string>());
    pred.margin = p.at("margin").get<double>();
    pred.overflow = p.at("overflow").get<bool>();
    r.predictions.push_back(std::move(pred));
  }
  if (r.accuracy < 0.0 || r.accuracy > 1.0 || r.n_correct > r.n_examples) {
    throw std::invalid_argument("EvalResult: inconsistent counts");
  }
}

Label predict_label(std::span<const double> final_logits) {
  if (final_logits.size() <= static_cast<std::size_t>(Vocabulary::kNo)) {
    throw ShapeError("predict_label: logits do not cover the target tokens");
  }
  const double yes = final_logits[static_cast<std::size_t>(Vocabulary::kYes)];
  const double no = final_logits[static_cast<std::size_t>(Vocabulary::kNo)];
  return yes > no ? Label::yes : Label::no;
}

EvalResult evaluate(const LastLogitsFn& model, PromptRole role, std::span<const LabeledExample> examples,
                    const PatternSpec& spec, const std::vector<LabeledExample>* contexts, const Vocabulary& vocab,
                    SplitRole split, std::size_t max_seq_len) {
  if (role == PromptRole::teacher && (contexts == nullptr || contexts->empty())) {
    throw ContractError("evaluate: teacher evaluation requires context examples");
  }
  if (role == PromptRole::student && contexts != nullptr) {
    throw ContractError("evaluate: student evaluation must not receive context examples");
  }
  if (spec.role != role) {
    throw ContractError("evaluate: pattern role does not match evaluated role");
  }
  EvalResult result;
  result.split = split;
  result.role = role;
  result.n_examples = examples.size();
  NoGradGuard no_grad;
  for (const auto& ex : examples) {
    const RenderedPrompt prompt = role == PromptRole::teacher ? render_teacher_prompt(vocab, spec, *contexts, ex)
                                                              : render_student_prompt(vocab, spec, ex);
    Prediction p;
    p.uid = ex.uid;
    p.gold = ex.label;
    if (prompt.token_ids.size() > max_seq_len) {
      p.overflow = true;
      ++result.n_overflow;
    } else {
      const Tensor logits = model(prompt.token_ids);
      const auto v = logits.values();
      p.predicted = predict_label(v);
      p.margin = v[static_cast<std::size_t>(Vocabulary::kYes)] - v[static_cast<std::size_t>(Vocabulary::kNo)];
    }
    result.n_correct += p.correct() ? 1 : 0;
    result.predictions.push_back(std::move(p));
  }
  result.accuracy =
      result.n_examples == 0 ? 0.0 : static_cast<double>(result.n_correct) / static_cast<double>(result.n_examples);
  return result;
}

EvalResult evaluate(const TransformerWeights& teacher, std::span<const LabeledExample> examples,
                    const PatternSpec& spec, const std::vector<LabeledExample>& contexts, const Vocabulary& vocab,
                    SplitRole split) {
  return evaluate([&](std::span<const TokenId> ids) { return forward_last(teacher, ids); }, PromptRole::teacher,
                  examples, spec, &contexts, vocab, split, teacher.config.max_seq_len);
}

EvalResult evaluate(const AdaptedModel& student, std::span<const LabeledExample> examples, const PatternSpec& spec,
                    const Vocabulary& vocab, SplitRole split) {
  return evaluate([&](std::span<const TokenId> ids) { return forward_last(student, ids); }, PromptRole::student,
                  examples, spec, nullptr, vocab, split, student.base().config.max_seq_len);
}

}  // namespace cdistill
