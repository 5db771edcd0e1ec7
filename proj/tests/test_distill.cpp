// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <set>

#include "cdistill/distill.hpp"
#include "cdistill/report.hpp"
#include "test_support.hpp"

using namespace cdistill;

namespace {

const std::filesystem::path kPrepared = cdtest::source_dir() / "data" / "prepared";

// Σ p_t (log p_t − log p_s) with every step in long double.
long double kl_oracle(std::span<const double> t, std::span<const double> s) {
  auto log_softmax = [](std::span<const double> x) {
    long double mx = x[0];
    for (double v : x) mx = std::max<long double>(mx, v);
    long double z = 0;
    for (double v : x) z += std::exp(static_cast<long double>(v) - mx);
    std::vector<long double> out;
    for (double v : x) out.push_back(static_cast<long double>(v) - mx - std::log(z));
    return out;
  };
  const auto lt = log_softmax(t), ls = log_softmax(s);
  long double kl = 0;
  for (std::size_t i = 0; i < t.size(); ++i) kl += std::exp(lt[i]) * (lt[i] - ls[i]);
  return kl;
}

RunConfig small_run() {
  RunConfig c;
  c.task = task_spec_for("mnli");
  c.n = 2;
  c.inference_requests = 8;
  c.eval_count = 20;
  c.hyperparams.batch_size = 4;
  c.hyperparams.epochs = 2;
  c.hyperparams.learning_rate = 1e-2;
  return c;
}

struct Fixture {
  Vocabulary vocab = Vocabulary::load(kPrepared / "vocab.txt");
  TaskData data = load_task_data(load_manifest(kPrepared / "manifest.json"), "mnli");
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

}  // namespace

TEST_CASE("kl_last_token values") {
  const Tensor same = Tensor::from({4}, {0.3, -1.0, 2.0, 0.0});
  CHECK(std::abs(kl_last_token(same, same).item()) < 1e-12);

  const Tensor t = Tensor::from({2}, {std::log(0.7), std::log(0.3)});
  const Tensor s = Tensor::from({2}, {0.0, 0.0});
  const long double ref = 0.7L * std::log(1.4L) + 0.3L * std::log(0.6L);
  CHECK(std::abs(kl_last_token(t, s).item() - static_cast<double>(ref)) < 1e-15);
  CHECK(kl_last_token(t, s).item() == doctest::Approx(0.08228).epsilon(1e-4));

  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Tensor a = cdtest::random_tensor(rng, {50}, 3.0, false);
    const Tensor b = cdtest::random_tensor(rng, {50}, 3.0, false);
    const double kl = kl_last_token(a, b).item();
    CHECK(kl >= 0.0);
    CHECK(std::abs(kl - static_cast<double>(kl_oracle(a.values(), b.values()))) < 1e-10);
  }
  CHECK_THROWS_AS(kl_last_token(Tensor::from({3}, {1, 2, 3}), Tensor::from({2}, {1, 2})), ShapeError);
}

TEST_CASE("kl gradient is softmax(student) - softmax(teacher)") {
  Rng rng(2);
  Tensor teacher = cdtest::random_tensor(rng, {12}, 2.0, true);
  Tensor student = cdtest::random_tensor(rng, {12}, 2.0, true);
  const Gradients g = backward(kl_last_token(teacher, student));
  CHECK_FALSE(g.contains(teacher));
  const auto ps = softmax_lastdim(student.detach());
  const auto pt = softmax_lastdim(teacher.detach());
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(std::abs(g.of(student)[i] - (ps.values()[i] - pt.values()[i])) < 1e-15);
  }
  const Tensor frozen = teacher.detach();
  const auto check = cdtest::check_gradients([&] { return kl_last_token(frozen, student); }, {student}, 1e-5);
  CHECK(check.max_rel_error < 1e-6);
}

TEST_CASE("schedule") {
  Hyperparams hp;
  CHECK(hp.total_steps(32) == 20);
  CHECK(hp.warmup_steps(20) == 2);
  CHECK(lr_at(0, 20, hp) == 0.5e-5);
  for (std::size_t s = 2; s < 20; ++s) CHECK(lr_at(s, 20, hp) == 1e-5);
  CHECK(lr_at(1, 20, hp) == 1e-5);
  CHECK_THROWS_AS(lr_at(20, 20, hp), ContractError);

  CHECK(hp.total_steps(33) == 40);
  CHECK(hp.warmup_steps(30) == 3);
  CHECK(hp.warmup_steps(1) == 1);
  CHECK(hp.warmup_steps(21) == 3);
  hp.warmup_ratio = 0.0;
  CHECK(lr_at(0, 20, hp) == 1e-5);
  hp.batch_size = 0;
  CHECK_THROWS_AS(hp.total_steps(32), ContractError);
}

TEST_CASE("adamw against the scalar recurrence") {
  Hyperparams hp;
  hp.weight_decay = 0.01;
  Tensor p = Tensor::from({1}, {0.5}, true);
  std::vector<Tensor> params{p};
  TrainerState state(params);
  const double grads[] = {0.3, -0.1, 0.7};
  const double lrs[] = {1e-3, 2e-3, 2e-3};
  double theta = 0.5, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1], lr = lrs[t - 1];
    theta *= 1.0 - lr * hp.weight_decay;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    theta -= lr * mh / (std::sqrt(vh) + 1e-8);
    const std::vector<std::vector<double>> gv{{g}};
    adamw_step(state, params, gv, hp, lr);
    CHECK(std::abs(p.values()[0] - theta) < 1e-12);
  }
  CHECK(state.step == 3);
}

TEST_CASE("adamw without decay is Adam, zero gradients change nothing") {
  Hyperparams hp;
  Rng rng(3);
  Tensor a = cdtest::random_tensor(rng, {3, 2});
  Tensor b = a.clone_leaf(true);
  std::vector<Tensor> pa{a}, pb{b};
  TrainerState sa(pa), sb(pb);
  std::vector<double> ma(6, 0.0), va(6, 0.0);
  for (int t = 1; t <= 4; ++t) {
    std::vector<std::vector<double>> g{std::vector<double>(6)};
    for (auto& x : g[0]) x = rng.normal();
    adamw_step(sa, pa, g, hp, 1e-3);
    auto bv = b.mutable_values();
    for (std::size_t i = 0; i < 6; ++i) {
      ma[i] = hp.beta1 * ma[i] + (1.0 - hp.beta1) * g[0][i];
      va[i] = hp.beta2 * va[i] + (1.0 - hp.beta2) * g[0][i] * g[0][i];
      const double mh = ma[i] / (1.0 - std::pow(hp.beta1, t));
      const double vh = va[i] / (1.0 - std::pow(hp.beta2, t));
      bv[i] -= 1e-3 * mh / (std::sqrt(vh) + hp.epsilon);
    }
    for (std::size_t i = 0; i < 6; ++i) CHECK(a.values()[i] == b.values()[i]);
  }

  Tensor c = cdtest::random_tensor(rng, {4});
  const std::vector<double> before(c.values().begin(), c.values().end());
  std::vector<Tensor> pc{c};
  TrainerState sc(pc);
  const std::vector<std::vector<double>> zero{std::vector<double>(4, 0.0)};
  adamw_step(sc, pc, zero, hp, 1e-3);
  CHECK(std::equal(before.begin(), before.end(), c.values().begin()));

  const std::vector<std::vector<double>> wrong{std::vector<double>(3, 0.0)};
  CHECK_THROWS_AS(adamw_step(sc, pc, wrong, hp, 1e-3), ContractError);
}

TEST_CASE("identical prompts give zero loss at step 0") {
  auto c = model_config_for_size("S", fixture().vocab.size());
  c.dropout_p = 0.0;
  auto base = std::make_shared<const TransformerWeights>(TransformerWeights::initialize(c, 1));
  AdaptedModel student(base, LoraConfig{}, 2);
  Hyperparams hp;
  hp.dropout = 0.0;
  DistillTrainer trainer(student, base, hp, 3);
  const auto ids = fixture().vocab.encode("Premise: a\nHypothesis: b\nLabel:");
  const std::vector<PromptPair> pairs{{ids, ids}, {ids, ids}};
  CHECK(trainer.mean_kl(pairs) == 0.0);
  CHECK(std::abs(trainer.train_step(pairs, 10)) < 1e-12);
}

TEST_CASE("training moves only the adapters and leaves the teacher untouched") {
  const auto& f = fixture();
  auto c = model_config_for_size("S", f.vocab.size());
  auto base = std::make_shared<const TransformerWeights>(TransformerWeights::initialize(c, 4));
  const std::string base_bytes = serialize_weights(*base);
  AdaptedModel student(base, LoraConfig{}, 5);
  std::vector<std::vector<double>> initial;
  for (const auto& p : student.trainable_parameters()) initial.emplace_back(p.values().begin(), p.values().end());

  const auto teacher_spec = pattern_for(TaskKind::nli, PromptRole::teacher);
  const auto student_spec = pattern_for(TaskKind::nli, PromptRole::student);
  const std::vector<LabeledExample> ctx(f.data.train.examples.begin(), f.data.train.examples.begin() + 2);
  std::vector<PromptPair> pairs;
  for (std::size_t i = 2; i < 6; ++i) {
    pairs.push_back({render_teacher_prompt(f.vocab, teacher_spec, ctx, f.data.train.examples[i]).token_ids,
                     render_student_prompt(f.vocab, student_spec, f.data.train.examples[i]).token_ids});
  }
  const Tensor teacher_before = forward_last(*base, pairs[0].teacher);

  Hyperparams hp;
  hp.learning_rate = 1e-2;
  DistillTrainer trainer(student, base, hp, 6, true);
  const double kl0 = trainer.mean_kl(pairs);
  for (int s = 0; s < 6; ++s) CHECK(trainer.train_step(pairs, 6) >= 0.0);
  CHECK(trainer.mean_kl(pairs) < kl0);
  CHECK(trainer.teacher_forwards() == 4);
  CHECK(trainer.student_forwards() == 24);
  CHECK(trainer.state().loss_history.size() == 6);
  CHECK(trainer.state().first_moment.size() == student.trainable_parameters().size());

  CHECK(serialize_weights(*base) == base_bytes);
  const Tensor teacher_after = forward_last(*base, pairs[0].teacher);
  CHECK(std::equal(teacher_before.values().begin(), teacher_before.values().end(), teacher_after.values().begin()));
  const auto params = student.trainable_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK_FALSE(std::equal(initial[i].begin(), initial[i].end(), params[i].values().begin()));
  }
}

TEST_CASE("run config serialization and hashing") {
  RunConfig c = small_run();
  const nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<RunConfig>()) == j);
  CHECK(j.get<RunConfig>().hash() == c.hash());
  CHECK(c.hash().size() == 16);
  CHECK(c.hash() == small_run().hash());
  RunConfig d = c;
  d.context_set_index = 1;
  CHECK(d.hash() != c.hash());
  d = c;
  d.seeds.dropout += 1;
  CHECK(d.hash() != c.hash());
  d = c;
  d.hyperparams.learning_rate *= 2;
  CHECK(d.hash() != c.hash());
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("distill_run end to end on a small config") {
  const auto& f = fixture();
  const RunConfig c = small_run();
  const RunRecord r = distill_run(c, f.data, f.vocab);
  REQUIRE(r.status == RunStatus::completed);
  CHECK(r.steps_executed == 4);
  CHECK(r.loss_curve.size() == 4);
  CHECK(r.inference_uids.size() == 8);
  CHECK(r.context_uids.size() == 2);
  for (const auto& u : r.inference_uids) {
    CHECK(std::find(r.context_uids.begin(), r.context_uids.end(), u) == r.context_uids.end());
  }
  REQUIRE(r.teacher_in_domain);
  REQUIRE(r.student_in_domain);
  REQUIRE(r.student_ood);
  CHECK(r.teacher_in_domain->n_examples == 20);
  CHECK(r.student_ood->split == SplitRole::ood_validation);
  CHECK(r.teacher_forwards == 16);
  CHECK(r.student_forwards == 16);
  CHECK(r.adapter_checksum == fnv1a_hex(r.adapter_bytes));

  const RunRecord again = distill_run(c, f.data, f.vocab);
  CHECK(run_record_text(again) == run_record_text(r));
  CHECK(again.adapter_bytes == r.adapter_bytes);

  const RunRecord parsed = nlohmann::json::parse(run_record_text(r)).get<RunRecord>();
  CHECK(run_record_text(parsed) == run_record_text(r));
}

TEST_CASE("teacher prompts beyond the window make the run infeasible") {
  const auto& f = fixture();
  RunConfig c = small_run();
  c.max_seq_len = 64;
  const RunRecord r = distill_run(c, f.data, f.vocab);
  CHECK(r.status == RunStatus::infeasible);
  CHECK(r.steps_executed == 0);
  CHECK(r.loss_curve.empty());
  CHECK(r.max_teacher_prompt_tokens > 64);
  CHECK_FALSE(r.teacher_in_domain);
  CHECK_FALSE(r.student_in_domain);
  CHECK_FALSE(r.student_ood);
  CHECK(r.message.find("infeasible configuration") != std::string::npos);
}

TEST_CASE("errors inside a run are reported as a failed record") {
  TaskData data = fixture().data;
  data.train.examples.resize(5);
  const RunRecord r = distill_run(small_run(), data, fixture().vocab);
  CHECK(r.status == RunStatus::failed);
  CHECK_FALSE(r.message.empty());
  CHECK_FALSE(r.student_in_domain);
}

TEST_CASE("run record invariants are enforced on load") {
  const auto& f = fixture();
  RunConfig c = small_run();
  c.max_seq_len = 64;
  nlohmann::json j = distill_run(c, f.data, f.vocab);
  j["status"] = "completed";
  CHECK_THROWS(j.get<RunRecord>());
  j["status"] = "infeasible";
  j["config_hash"] = "0000000000000000";
  CHECK_THROWS(j.get<RunRecord>());
  j = distill_run(c, f.data, f.vocab);
  j["schema_version"] = 99;
  CHECK_THROWS(j.get<RunRecord>());
}

TEST_CASE("experiment matrix") {
  const auto tasks = default_task_plans();
  const auto sizes = model_size_tags();
  const auto plan = plan_experiment_matrix(tasks, sizes, 4);
  CHECK(plan.size() == 128);
  std::set<std::string> hashes;
  for (const auto& c : plan) hashes.insert(c.hash());
  CHECK(hashes.size() == 128);

  CHECK(plan.front().task.in_domain == "mnli");
  CHECK(plan.front().n == 2);
  CHECK(plan.front().model_size == "S");
  CHECK(plan[1].context_set_index == 1);
  CHECK(plan[4].model_size == "M");
  CHECK(plan.back().task.in_domain == "qqp");
  CHECK(plan.back().n == 32);
  CHECK(plan.back().model_size == "XL");
  CHECK(plan.back().context_set_index == 3);

  const auto again = plan_experiment_matrix(tasks, sizes, 4);
  for (std::size_t i = 0; i < plan.size(); ++i) CHECK(again[i].hash() == plan[i].hash());

  CHECK(plan_experiment_matrix(tasks, std::vector<std::string>{}, 4).empty());
  const std::vector<TaskPlan> with_rte32{{"rte", {2, 16, 32}}};
  CHECK(plan_experiment_matrix(with_rte32, sizes, 4).size() == 48);
  CHECK_THROWS(plan_experiment_matrix(tasks, sizes, 5));
  const std::vector<std::string> bad{"XXL"};
  CHECK_THROWS(plan_experiment_matrix(tasks, bad, 4));
}
