// SPDX-License-Identifier: Apache-2.0

#include "cdistill/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "cdistill/random.hpp"

namespace cdistill {

// ---- schedule ----------------------------------------------------------------

std::size_t Hyperparams::total_steps(std::size_t num_samples) const {
  if (batch_size == 0) {
    throw ContractError("Hyperparams: batch_size must be positive");
  }
  return (num_samples + batch_size - 1) / batch_size * epochs;
}

std::size_t Hyperparams::warmup_steps(std::size_t total) const {
  // Tolerance absorbs representation error such as 0.1 * 30 = 3.0000000000000004.
  const double w = warmup_ratio * static_cast<double>(total);
  return static_cast<std::size_t>(std::ceil(w - 1e-9 * std::max(1.0, w)));
}

void to_json(nlohmann::json& j, const Hyperparams& h) {
  j = nlohmann::json{{"optimizer", "adamw"},
                     {"learning_rate", h.learning_rate},
                     {"beta1", h.beta1},
                     {"beta2", h.beta2},
                     {"epsilon", h.epsilon},
                     {"schedule", "linear_warmup_constant"},
                     {"warmup_ratio", h.warmup_ratio},
                     {"weight_decay", h.weight_decay},
                     {"dropout", h.dropout},
                     {"batch_size", h.batch_size},
                     {"epochs", h.epochs}};
}

void from_json(const nlohmann::json& j, Hyperparams& h) {
  const Hyperparams d;
  h.learning_rate = j.value("learning_rate", d.learning_rate);
  h.beta1 = j.value("beta1", d.beta1);
  h.beta2 = j.value("beta2", d.beta2);
  h.epsilon = j.value("epsilon", d.epsilon);
  h.warmup_ratio = j.value("warmup_ratio", d.warmup_ratio);
  h.weight_decay = j.value("weight_decay", d.weight_decay);
  h.dropout = j.value("dropout", d.dropout);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.epochs = j.value("epochs", d.epochs);
}

double lr_at(std::size_t step, std::size_t total_steps, const Hyperparams& hp) {
  if (step >= total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside schedule of " +
                        std::to_string(total_steps) + " steps");
  }
  const std::size_t warmup = hp.warmup_steps(total_steps);
  if (warmup == 0 || step + 1 >= warmup) {
    return hp.learning_rate;
  }
  return hp.learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

// ---- loss --------------------------------------------------------------------

Tensor kl_last_token(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.rank() != 1) {
    throw ShapeError("kl_last_token: expected matching [vocab] logits, got " +
                     shape_to_string(teacher_logits.shape()) + " and " + shape_to_string(student_logits.shape()));
  }
  Tensor teacher_log_p;
  {
    NoGradGuard no_grad;
    teacher_log_p = log_softmax_lastdim(teacher_logits.detach());
  }
  std::vector<double> p(teacher_log_p.numel());
  std::transform(teacher_log_p.values().begin(), teacher_log_p.values().end(), p.begin(),
                 [](double lp) { return std::exp(lp); });
  const Tensor teacher_p = Tensor::from(teacher_log_p.shape(), std::move(p));
  return sum(mul(teacher_p, sub(teacher_log_p, log_softmax_lastdim(student_logits))));
}

// ---- optimizer -----------------------------------------------------------------

TrainerState::TrainerState(std::span<const Tensor> params) {
  for (const auto& p : params) {
    first_moment.emplace_back(p.numel(), 0.0);
    second_moment.emplace_back(p.numel(), 0.0);
  }
}

void adamw_step(TrainerState& state, std::span<Tensor> params, std::span<const std::vector<double>> grads,
                const Hyperparams& hp, double lr) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ContractError("adamw_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel() || state.first_moment[i].size() != params[i].numel()) {
      throw ContractError("adamw_step: gradient " + std::to_string(i) + " does not match parameter shape " +
                          shape_to_string(params[i].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(hp.beta1, t);
  const double bias2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      if (hp.weight_decay != 0.0) {
        values[k] *= 1.0 - lr * hp.weight_decay;
      }
      m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
      v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
      const double m_hat = m[k] / bias1;
      const double v_hat = v[k] / bias2;
      values[k] -= lr * m_hat / (std::sqrt(v_hat) + hp.epsilon);
    }
  }
}

// ---- trainer ---------------------------------------------------------------------

DistillTrainer::DistillTrainer(AdaptedModel& student, std::shared_ptr<const TransformerWeights> teacher,
                               Hyperparams hp, std::uint64_t dropout_seed, bool cache_teacher)
    : student_(student),
      teacher_(std::move(teacher)),
      hp_(hp),
      dropout_seed_(dropout_seed),
      cache_teacher_(cache_teacher),
      state_(student.trainable_parameters()) {
  if (!teacher_) {
    throw ContractError("DistillTrainer: null teacher");
  }
}

Tensor DistillTrainer::teacher_logits(const PromptPair& pair) {
  if (cache_teacher_) {
    if (auto it = teacher_cache_.find(pair.teacher); it != teacher_cache_.end()) {
      return it->second;
    }
  }
  NoGradGuard no_grad;
  Tensor logits = forward_last(*teacher_, pair.teacher);
  ++teacher_forwards_;
  if (cache_teacher_) {
    teacher_cache_.emplace(pair.teacher, logits);
  }
  return logits;
}

double DistillTrainer::mean_kl(std::span<const PromptPair> pairs) const {
  if (pairs.empty()) {
    throw ContractError("mean_kl: no prompt pairs");
  }
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& pair : pairs) {
    total += kl_last_token(forward_last(*teacher_, pair.teacher), forward_last(student_, pair.student)).item();
  }
  return total / static_cast<double>(pairs.size());
}

double DistillTrainer::train_step(std::span<const PromptPair> batch, std::size_t total_steps) {
  if (batch.empty()) {
    throw ContractError("train_step: empty batch");
  }
  const std::size_t step = state_.step;
  const double lr = lr_at(step, total_steps, hp_);
  std::vector<Tensor> losses;
  losses.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor teacher = teacher_logits(batch[i]);
    const ForwardOptions opts{true, mix_seed(dropout_seed_, step, i)};
    losses.push_back(kl_last_token(teacher, forward_last(student_, batch[i].student, opts)));
    ++student_forwards_;
  }
  const Tensor loss = scale(add_n(losses), 1.0 / static_cast<double>(batch.size()));
  const double value = loss.item();
  // KL is non-negative; anything below rounding noise means a broken loss.
  if (value < -1e-12) {
    throw NumericalError("negative KL loss " + std::to_string(value) + " at step " + std::to_string(step));
  }
  const Gradients grads = backward(loss);
  auto params = student_.trainable_parameters();
  std::vector<std::vector<double>> g;
  g.reserve(params.size());
  for (const auto& p : params) {
    g.push_back(grads.of(p));
  }
  adamw_step(state_, params, g, hp_, lr);
  state_.loss_history.push_back(value);
  return value;
}

// ---- run config ----------------------------------------------------------------------

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"task",
                      {{"kind", to_string(c.task.kind)}, {"in_domain", c.task.in_domain}, {"ood", c.task.ood}}},
                     {"model_size", c.model_size},
                     {"n", c.n},
                     {"context_set_index", c.context_set_index},
                     {"seeds",
                      {{"sampling", c.seeds.sampling},
                       {"init", c.seeds.init},
                       {"adapter", c.seeds.adapter},
                       {"dropout", c.seeds.dropout},
                       {"eval", c.seeds.eval}}},
                     {"hyperparams", c.hyperparams},
                     {"lora", c.lora},
                     {"inference_requests", c.inference_requests},
                     {"eval_count", c.eval_count},
                     {"max_seq_len", c.max_seq_len},
                     {"cache_teacher", c.cache_teacher}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  const auto& t = j.at("task");
  c.task.kind = task_kind_from_string(t.at("kind").get<std::string>());
  c.task.in_domain = t.at("in_domain").get<std::string>();
  c.task.ood = t.at("ood").get<std::string>();
  c.model_size = j.at("model_size").get<std::string>();
  c.n = j.at("n").get<std::size_t>();
  c.context_set_index = j.at("context_set_index").get<std::size_t>();
  const auto& s = j.at("seeds");
  c.seeds.sampling = s.at("sampling").get<std::uint64_t>();
  c.seeds.init = s.at("init").get<std::uint64_t>();
  c.seeds.adapter = s.at("adapter").get<std::uint64_t>();
  c.seeds.dropout = s.at("dropout").get<std::uint64_t>();
  c.seeds.eval = s.at("eval").get<std::uint64_t>();
  c.hyperparams = j.at("hyperparams").get<Hyperparams>();
  c.lora = j.at("lora").get<LoraConfig>();
  c.inference_requests = j.at("inference_requests").get<std::size_t>();
  c.eval_count = j.at("eval_count").get<std::size_t>();
  c.max_seq_len = j.value("max_seq_len", std::size_t{0});
  c.cache_teacher = j.value("cache_teacher", false);
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::hash() const { return fnv1a_hex(nlohmann::json(*this).dump()); }

ModelConfig resolve_model_config(const RunConfig& config, std::size_t vocab_size) {
  ModelConfig mc = model_config_for_size(config.model_size, vocab_size);
  mc.dropout_p = config.hyperparams.dropout;
  if (config.max_seq_len != 0) {
    mc.max_seq_len = config.max_seq_len;
  }
  mc.validate();
  return mc;
}

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::completed:
      return "completed";
    case RunStatus::infeasible:
      return "infeasible";
    case RunStatus::failed:
      return "failed";
  }
  return "?";
}

RunStatus run_status_from_string(std::string_view text) {
  for (auto s : {RunStatus::completed, RunStatus::infeasible, RunStatus::failed}) {
    if (to_string(s) == text) {
      return s;
    }
  }
  throw std::invalid_argument("unknown run status '" + std::string(text) + "'");
}

// ---- run record ---------------------------------------------------------------------

void to_json(nlohmann::json& j, const RunRecord& r) {
  auto eval = [](const std::optional<EvalResult>& e) { return e ? nlohmann::json(*e) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"schema_version", kRunRecordSchemaVersion},
                     {"config_hash", r.config_hash},
                     {"config", r.config},
                     {"status", to_string(r.status)},
                     {"message", r.message},
                     {"loss_curve", r.loss_curve},
                     {"initial_kl", r.initial_kl},
                     {"final_kl", r.final_kl},
                     {"steps_executed", r.steps_executed},
                     {"max_teacher_prompt_tokens", r.max_teacher_prompt_tokens},
                     {"work",
                      {{"teacher_forwards", r.teacher_forwards},
                       {"student_forwards", r.student_forwards},
                       {"trainable_parameters", r.trainable_parameters}}},
                     {"teacher_in_domain", eval(r.teacher_in_domain)},
                     {"student_in_domain", eval(r.student_in_domain)},
                     {"student_ood", eval(r.student_ood)},
                     {"context_uids", r.context_uids},
                     {"inference_uids", r.inference_uids},
                     {"adapter_checksum", r.adapter_checksum}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  const int version = j.at("schema_version").get<int>();
  if (version != kRunRecordSchemaVersion) {
    throw std::invalid_argument("unsupported run record schema version " + std::to_string(version));
  }
  r.config_hash = j.at("config_hash").get<std::string>();
  r.config = j.at("config").get<RunConfig>();
  r.status = run_status_from_string(j.at("status").get<std::string>());
  r.message = j.value("message", std::string{});
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  r.initial_kl = j.at("initial_kl").get<double>();
  r.final_kl = j.at("final_kl").get<double>();
  r.steps_executed = j.at("steps_executed").get<std::size_t>();
  r.max_teacher_prompt_tokens = j.value("max_teacher_prompt_tokens", std::size_t{0});
  if (j.contains("work")) {
    const auto& w = j.at("work");
    r.teacher_forwards = w.value("teacher_forwards", std::size_t{0});
    r.student_forwards = w.value("student_forwards", std::size_t{0});
    r.trainable_parameters = w.value("trainable_parameters", std::size_t{0});
  }
  auto eval = [&](const char* key) -> std::optional<EvalResult> {
    if (!j.contains(key) || j.at(key).is_null()) {
      return std::nullopt;
    }
    return j.at(key).get<EvalResult>();
  };
  r.teacher_in_domain = eval("teacher_in_domain");
  r.student_in_domain = eval("student_in_domain");
  r.student_ood = eval("student_ood");
  r.context_uids = j.value("context_uids", std::vector<std::string>{});
  r.inference_uids = j.value("inference_uids", std::vector<std::string>{});
  r.adapter_checksum = j.value("adapter_checksum", std::string{});
  const bool all = r.teacher_in_domain && r.student_in_domain && r.student_ood;
  const bool none = !r.teacher_in_domain && !r.student_in_domain && !r.student_ood;
  if ((r.status == RunStatus::completed && !all) || (r.status == RunStatus::infeasible && !none)) {
    throw std::invalid_argument("run record status '" + std::string(to_string(r.status)) +
                                "' inconsistent with its evaluation results");
  }
  if (r.config.hash() != r.config_hash) {
    throw std::invalid_argument("run record hash does not match its config");
  }
}

// ---- orchestration ---------------------------------------------------------------------

RunRecord distill_run(const RunConfig& config, const TaskData& data, const Vocabulary& vocab) {
  const auto start = std::chrono::steady_clock::now();
  RunRecord record;
  record.config = config;
  record.config_hash = config.hash();

  if (data.task != config.task) {
    throw ContractError("distill_run: task data is for '" + data.task.in_domain + "', config wants '" +
                        config.task.in_domain + "'");
  }
  if (data.train.role != SplitRole::train || data.validation.role != SplitRole::in_domain_validation ||
      data.ood.role != SplitRole::ood_validation) {
    throw ContractError("distill_run: split roles must be train / in-domain validation / OOD validation");
  }
  if (config.context_set_index >= kContextSetsPerSize) {
    throw ContractError("distill_run: context_set_index must be below " + std::to_string(kContextSetsPerSize));
  }
  const ModelConfig model_config = resolve_model_config(config, vocab.size());
  auto finish = [&](RunRecord& r) -> RunRecord& {
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
  };

  try {
    const auto sets = sample_context_sets(data.train, config.n, config.seeds.sampling);
    const ContextSet& contexts = sets[config.context_set_index];
    const auto requests =
        sample_inference_requests(data.train, sets, config.inference_requests, config.seeds.sampling);
    assert_no_leakage(contexts.examples, requests);
    for (const auto& c : contexts.examples) {
      record.context_uids.push_back(c.uid);
    }
    for (const auto& q : requests) {
      record.inference_uids.push_back(q.uid);
    }

    const PatternSpec teacher_spec = pattern_for(config.task.kind, PromptRole::teacher);
    const PatternSpec student_spec = pattern_for(config.task.kind, PromptRole::student);
    std::vector<PromptPair> pairs;
    for (const auto& q : requests) {
      PromptPair pair{render_teacher_prompt(vocab, teacher_spec, contexts.examples, q).token_ids,
                      render_student_prompt(vocab, student_spec, q).token_ids};
      record.max_teacher_prompt_tokens = std::max(record.max_teacher_prompt_tokens, pair.teacher.size());
      pairs.push_back(std::move(pair));
    }
    if (record.max_teacher_prompt_tokens > model_config.max_seq_len) {
      record.status = RunStatus::infeasible;
      record.message = std::string("infeasible configuration: ") +
                       ContextWindowExceeded(record.max_teacher_prompt_tokens, model_config.max_seq_len).what();
      return finish(record);
    }

    auto base = std::make_shared<const TransformerWeights>(
        TransformerWeights::initialize(model_config, config.seeds.init));
    AdaptedModel student(base, config.lora, config.seeds.adapter);
    record.trainable_parameters = student.trainable_parameter_count();
    DistillTrainer trainer(student, base, config.hyperparams, config.seeds.dropout, config.cache_teacher);

    record.initial_kl = trainer.mean_kl(pairs);
    const auto& hp = config.hyperparams;
    const std::size_t total = hp.total_steps(pairs.size());
    for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
      // Leakage is re-checked against the prompts actually trained on.
      assert_no_leakage(contexts.examples, requests);
      for (std::size_t begin = 0; begin < pairs.size(); begin += hp.batch_size) {
        const std::size_t end = std::min(pairs.size(), begin + hp.batch_size);
        record.loss_curve.push_back(
            trainer.train_step(std::span<const PromptPair>(pairs).subspan(begin, end - begin), total));
      }
    }
    record.steps_executed = trainer.state().step;
    record.final_kl = trainer.mean_kl(pairs);
    record.teacher_forwards = trainer.teacher_forwards();
    record.student_forwards = trainer.student_forwards();

    const auto eval_in = sample_eval(data.validation, config.eval_count, config.seeds.eval);
    const auto eval_ood = sample_eval(data.ood, config.eval_count, config.seeds.eval);
    record.teacher_in_domain =
        evaluate(*base, eval_in, teacher_spec, contexts.examples, vocab, SplitRole::in_domain_validation);
    record.student_in_domain = evaluate(student, eval_in, student_spec, vocab, SplitRole::in_domain_validation);
    record.student_ood = evaluate(student, eval_ood, student_spec, vocab, SplitRole::ood_validation);

    record.adapter_bytes = serialize_adapters(student);
    record.adapter_checksum = fnv1a_hex(record.adapter_bytes);
    record.status = RunStatus::completed;
  } catch (const std::exception& e) {
    record.status = RunStatus::failed;
    record.message = e.what();
    record.teacher_in_domain.reset();
    record.student_in_domain.reset();
    record.student_ood.reset();
  }
  return finish(record);
}

// ---- planning -------------------------------------------------------------------------

std::vector<TaskPlan> default_task_plans() { return {{"mnli", {2, 16, 32}}, {"rte", {2, 16}}, {"qqp", {2, 16, 32}}}; }

std::vector<RunConfig> plan_experiment_matrix(std::span<const TaskPlan> tasks, std::span<const std::string> sizes,
                                              std::size_t sets, const RunConfig& base) {
  if (sets > kContextSetsPerSize) {
    throw ContractError("plan_experiment_matrix: at most " + std::to_string(kContextSetsPerSize) +
                        " context sets per n");
  }
  std::vector<RunConfig> plan;
  for (const auto& t : tasks) {
    const TaskSpec spec = task_spec_for(t.dataset);
    for (auto n : t.ns) {
      for (const auto& size : sizes) {
        model_config_for_size(size, 1);  // rejects unknown tags
        for (std::size_t s = 0; s < sets; ++s) {
          RunConfig c = base;
          c.task = spec;
          c.n = n;
          c.model_size = size;
          c.context_set_index = s;
          plan.push_back(std::move(c));
        }
      }
    }
  }
  return plan;
}

}  // namespace cdistill
