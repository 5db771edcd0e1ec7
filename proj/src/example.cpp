// SPDX-License-Identifier: Apache-2.0

#include "cdistill/example.hpp"

namespace cdistill {

std::string_view to_string(Label label) { return label == Label::yes ? "yes" : "no"; }

Label label_from_string(std::string_view text) {
  if (text == "yes") {
    return Label::yes;
  }
  if (text == "no") {
    return Label::no;
  }
  throw std::invalid_argument("unknown label '" + std::string(text) + "'");
}

std::string_view to_string(TaskKind kind) { return kind == TaskKind::nli ? "nli" : "paraphrase"; }

TaskKind task_kind_from_string(std::string_view text) {
  if (text == "nli") {
    return TaskKind::nli;
  }
  if (text == "paraphrase") {
    return TaskKind::paraphrase;
  }
  throw std::invalid_argument("unknown task kind '" + std::string(text) + "'");
}

}  // namespace cdistill
