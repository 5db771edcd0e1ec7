// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cdistill {

enum class Label { no, yes };

std::string_view to_string(Label label);
Label label_from_string(std::string_view text);  // "yes" | "no"

enum class TaskKind { nli, paraphrase };

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view text);

/// One premise/hypothesis pair (question pair for paraphrase tasks, with
/// question1 in the premise slot) carrying a binary label.
struct LabeledExample {
  std::string uid;
  std::string premise;
  std::string hypothesis;
  Label label = Label::no;

  bool operator==(const LabeledExample&) const = default;
};

// An inference request also appears among the context examples.
struct LeakageError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace cdistill
