// SPDX-License-Identifier: Apache-2.0
//
// Teacher-student context distillation: last-position KL loss, AdamW with a
// linear-warmup-then-constant schedule, LoRA-only updates, run orchestration
// and the experiment matrix.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdistill/data.hpp"
#include "cdistill/evaluate.hpp"
#include "cdistill/model.hpp"
#include "cdistill/text.hpp"

namespace cdistill {

struct Hyperparams {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double warmup_ratio = 0.10;
  double weight_decay = 0.0;
  double dropout = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;

  // ceil(num_samples / batch_size) * epochs
  std::size_t total_steps(std::size_t num_samples) const;
  // ceil(warmup_ratio * total_steps)
  std::size_t warmup_steps(std::size_t total_steps) const;

  bool operator==(const Hyperparams&) const = default;
};

void to_json(nlohmann::json& j, const Hyperparams& h);
void from_json(const nlohmann::json& j, Hyperparams& h);

// learning_rate * min(1, (step + 1) / warmup_steps); constant after warmup.
double lr_at(std::size_t step, std::size_t total_steps, const Hyperparams& hp);

/// KL(softmax(teacher) || softmax(student)) in log space. The teacher side is
/// a constant: no gradient reaches it.
Tensor kl_last_token(const Tensor& teacher_logits, const Tensor& student_logits);

struct TrainerState {
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;   // one per trainable tensor
  std::vector<std::vector<double>> second_moment;
  std::vector<double> loss_history;

  explicit TrainerState(std::span<const Tensor> params = {});
};

// Decoupled-decay AdamW with bias correction, in place on `params`.
void adamw_step(TrainerState& state, std::span<Tensor> params, std::span<const std::vector<double>> grads,
                const Hyperparams& hp, double lr);

struct PromptPair {
  std::vector<TokenId> teacher;
  std::vector<TokenId> student;
};

/// Owns the optimizer state for one student and runs distillation steps
/// against the frozen teacher.
class DistillTrainer {
 public:
  DistillTrainer(AdaptedModel& student, std::shared_ptr<const TransformerWeights> teacher, Hyperparams hp,
                 std::uint64_t dropout_seed, bool cache_teacher = false);

  // Mean KL over `pairs` with dropout off; no parameter change.
  double mean_kl(std::span<const PromptPair> pairs) const;

  // One optimizer step on `batch`; returns the batch-mean training loss.
  double train_step(std::span<const PromptPair> batch, std::size_t total_steps);

  const TrainerState& state() const { return state_; }
  std::size_t teacher_forwards() const { return teacher_forwards_; }
  std::size_t student_forwards() const { return student_forwards_; }

 private:
  Tensor teacher_logits(const PromptPair& pair);

  AdaptedModel& student_;
  std::shared_ptr<const TransformerWeights> teacher_;
  Hyperparams hp_;
  std::uint64_t dropout_seed_;
  bool cache_teacher_;
  std::map<std::vector<TokenId>, Tensor> teacher_cache_;
  TrainerState state_;
  std::size_t teacher_forwards_ = 0;
  std::size_t student_forwards_ = 0;
};

struct RunSeeds {
  std::uint64_t sampling = 1234;  // context sets and inference requests
  std::uint64_t init = 42;        // base transformer weights
  std::uint64_t adapter = 7;      // LoRA A matrices
  std::uint64_t dropout = 99;
  std::uint64_t eval = 2024;      // fixed per task: same validation draw for every run

  bool operator==(const RunSeeds&) const = default;
};

struct RunConfig {
  TaskSpec task;
  std::string model_size = "S";
  std::size_t n = 16;
  std::size_t context_set_index = 0;
  RunSeeds seeds;
  Hyperparams hyperparams;
  LoraConfig lora;
  std::size_t inference_requests = 32;
  std::size_t eval_count = 100;
  std::size_t max_seq_len = 0;  // 0 keeps the size preset's window
  bool cache_teacher = false;

  std::string hash() const;  // 16 hex digits over the canonical JSON
  bool operator==(const RunConfig&) const = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

ModelConfig resolve_model_config(const RunConfig& config, std::size_t vocab_size);

enum class RunStatus { completed, infeasible, failed };

std::string_view to_string(RunStatus status);
RunStatus run_status_from_string(std::string_view text);

inline constexpr int kRunRecordSchemaVersion = 1;

struct RunRecord {
  std::string config_hash;
  RunConfig config;
  RunStatus status = RunStatus::failed;
  std::string message;
  std::vector<double> loss_curve;  // training loss per optimizer step
  double initial_kl = 0.0;         // dropout-free mean KL before the first step
  double final_kl = 0.0;           // ... and after the last step
  std::size_t steps_executed = 0;
  std::size_t max_teacher_prompt_tokens = 0;
  std::size_t teacher_forwards = 0;
  std::size_t student_forwards = 0;
  std::size_t trainable_parameters = 0;
  std::optional<EvalResult> teacher_in_domain;
  std::optional<EvalResult> student_in_domain;
  std::optional<EvalResult> student_ood;
  std::vector<std::string> context_uids;
  std::vector<std::string> inference_uids;
  std::string adapter_checksum;  // FNV-1a of the serialized adapters

  // Not part of the JSON record.
  std::string adapter_bytes;
  double wall_seconds = 0.0;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

std::string fnv1a_hex(std::string_view bytes);

/// Executes one run end to end. Returns status=infeasible (no training) when
/// any teacher prompt exceeds the context window; any other failure after
/// config validation comes back as status=failed with the error message.
RunRecord distill_run(const RunConfig& config, const TaskData& data, const Vocabulary& vocab);

struct TaskPlan {
  std::string dataset;
  std::vector<std::size_t> ns;

  bool operator==(const TaskPlan&) const = default;
};

// Default axes: three in-domain datasets, RTE without n=32.
std::vector<TaskPlan> default_task_plans();

/// datasets × n × model sizes × context sets, in that nesting order, each
/// config derived from `base`.
std::vector<RunConfig> plan_experiment_matrix(std::span<const TaskPlan> tasks, std::span<const std::string> sizes,
                                              std::size_t sets, const RunConfig& base = {});

}  // namespace cdistill
