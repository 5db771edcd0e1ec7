// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "cdistill/evaluate.hpp"
#include "cdistill/report.hpp"
#include "test_support.hpp"

using namespace cdistill;

namespace {

const std::filesystem::path kPrepared = cdtest::source_dir() / "data" / "prepared";

std::vector<double> logits_with(double yes, double no, std::size_t vocab = 10) {
  std::vector<double> v(vocab, 0.0);
  v[Vocabulary::kYes] = yes;
  v[Vocabulary::kNo] = no;
  return v;
}

EvalResult eval_with(double accuracy, SplitRole split, PromptRole role) {
  EvalResult e;
  e.split = split;
  e.role = role;
  e.n_examples = 100;
  e.n_correct = static_cast<std::size_t>(std::lround(accuracy * 100));
  e.accuracy = accuracy;
  return e;
}

RunRecord completed(const std::string& dataset, const std::string& size, std::size_t n, std::size_t set,
                    double teacher, double in_domain, double ood) {
  RunRecord r;
  r.config.task = task_spec_for(dataset);
  r.config.model_size = size;
  r.config.n = n;
  r.config.context_set_index = set;
  r.config_hash = r.config.hash();
  r.status = RunStatus::completed;
  r.loss_curve = {0.5, 0.25};
  r.steps_executed = 2;
  r.teacher_in_domain = eval_with(teacher, SplitRole::in_domain_validation, PromptRole::teacher);
  r.student_in_domain = eval_with(in_domain, SplitRole::in_domain_validation, PromptRole::student);
  r.student_ood = eval_with(ood, SplitRole::ood_validation, PromptRole::student);
  return r;
}

RunRecord infeasible(const std::string& dataset, const std::string& size, std::size_t n, std::size_t set) {
  RunRecord r;
  r.config.task = task_spec_for(dataset);
  r.config.model_size = size;
  r.config.n = n;
  r.config.context_set_index = set;
  r.config_hash = r.config.hash();
  r.status = RunStatus::infeasible;
  r.message = "infeasible configuration: too long";
  return r;
}

}  // namespace

TEST_CASE("label readout") {
  CHECK(predict_label(logits_with(1.0, 0.0)) == Label::yes);
  CHECK(predict_label(logits_with(0.0, 1.0)) == Label::no);
  CHECK(predict_label(logits_with(0.5, 0.5)) == Label::no);
  CHECK(predict_label(logits_with(-1e-300, -2e-300)) == Label::yes);
  CHECK_THROWS_AS(predict_label(std::vector<double>{1.0, 2.0}), ShapeError);

  // Unaffected by every other vocabulary entry.
  auto v = logits_with(0.2, 0.1);
  for (std::size_t i = 5; i < v.size(); ++i) v[i] = 1e6;
  CHECK(predict_label(v) == Label::yes);

  // Invariant to a common shift and to positive scaling.
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> x(12);
    for (auto& e : x) e = rng.normal() * 5.0;
    const Label base = predict_label(x);
    const double shift = rng.normal() * 100.0;
    const double scale = std::exp(rng.normal());
    std::vector<double> y(x), z(x);
    for (auto& e : y) e += shift;
    for (auto& e : z) e *= scale;
    if (std::abs(x[Vocabulary::kYes] - x[Vocabulary::kNo]) > 1e-9) {
      CHECK(predict_label(y) == base);
    }
    CHECK(predict_label(z) == base);
  }
}

TEST_CASE("evaluate counts correct predictions and overflow") {
  const auto vocab = Vocabulary::load(kPrepared / "vocab.txt");
  const auto val = load_split(kPrepared / "mnli_validation.jsonl", "mnli", SplitRole::in_domain_validation);
  const std::vector<LabeledExample> examples(val.examples.begin(), val.examples.begin() + 40);
  const auto spec = pattern_for(TaskKind::nli, PromptRole::student);

  // Scripted model: answers Yes when the prompt length is even.
  const LastLogitsFn parity = [&](std::span<const TokenId> ids) {
    const auto v = ids.size() % 2 == 0 ? logits_with(2.0, 1.0, vocab.size()) : logits_with(1.0, 2.0, vocab.size());
    return Tensor::from({vocab.size()}, v);
  };
  const auto r = evaluate(parity, PromptRole::student, examples, spec, nullptr, vocab, SplitRole::in_domain_validation,
                          1024);
  std::size_t expected = 0;
  for (const auto& ex : examples) {
    const auto len = render_student_prompt(vocab, spec, ex).token_ids.size();
    expected += (len % 2 == 0 ? Label::yes : Label::no) == ex.label;
  }
  CHECK(r.n_examples == 40);
  CHECK(r.n_correct == expected);
  CHECK(r.accuracy == static_cast<double>(expected) / 40.0);
  std::size_t recount = 0;
  for (const auto& p : r.predictions) recount += p.predicted == p.gold;
  CHECK(recount == r.n_correct);
  for (const auto& p : r.predictions) CHECK(std::abs(std::abs(p.margin) - 1.0) < 1e-15);

  // Everything overflows: no forward, every example wrong.
  std::size_t calls = 0;
  const LastLogitsFn counting = [&](std::span<const TokenId>) {
    ++calls;
    return Tensor::from({vocab.size()}, logits_with(0, 0, vocab.size()));
  };
  const auto o = evaluate(counting, PromptRole::student, examples, spec, nullptr, vocab,
                          SplitRole::in_domain_validation, 3);
  CHECK(calls == 0);
  CHECK(o.n_overflow == 40);
  CHECK(o.n_correct == 0);
  CHECK(o.accuracy == 0.0);

  const std::vector<LabeledExample> ctx{val.examples[100]};
  CHECK_THROWS_AS(evaluate(parity, PromptRole::student, examples, spec, &ctx, vocab, SplitRole::in_domain_validation,
                           1024),
                  ContractError);
  CHECK_THROWS_AS(evaluate(parity, PromptRole::teacher, examples, pattern_for(TaskKind::nli, PromptRole::teacher),
                           nullptr, vocab, SplitRole::in_domain_validation, 1024),
                  ContractError);

  const nlohmann::json j = r;
  CHECK(j.get<EvalResult>() == r);
}

TEST_CASE("aggregation into results.csv") {
  const auto dir = cdtest::scratch_dir("aggregate");
  const auto csv = dir / "out" / "results.csv";
  CHECK(aggregate_to_csv(dir, csv).empty());
  CHECK(cdtest::read_text(csv) == std::string(kResultsCsvHeader) + "\n");

  write_run_json(dir, completed("qqp", "S", 16, 1, 0.7, 0.6, 0.5));
  write_run_json(dir, completed("mnli", "M", 16, 0, 0.8, 0.7, 0.4));
  write_run_json(dir, completed("mnli", "S", 16, 1, 0.75, 0.65, 0.45));
  write_run_json(dir, infeasible("rte", "L", 32, 0));
  {
    std::ofstream(dir / "broken.json") << "{\"schema_version\": 1";
  }
  const auto warnings = aggregate_to_csv(dir, csv);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].rfind("broken.json:", 0) == 0);

  const std::string text = cdtest::read_text(csv);
  const auto rows = parse_results_csv(text);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].dataset == "mnli");
  CHECK(rows[0].model_size == "S");
  CHECK(rows[1].model_size == "M");
  CHECK(rows[2].dataset == "rte");
  CHECK(rows[2].status == "infeasible");
  CHECK_FALSE(rows[2].teacher_acc);
  CHECK(rows[3].dataset == "qqp");
  CHECK(*rows[0].teacher_acc == 0.75);
  CHECK(*rows[0].final_loss == 0.25);
  CHECK(results_csv(rows) == text);

  // Re-running over the same directory gives the same bytes.
  aggregate_to_csv(dir, csv);
  CHECK(cdtest::read_text(csv) == text);
  CHECK_THROWS(parse_results_csv("a,b\n"));
}

TEST_CASE("accuracy table means over context sets") {
  std::vector<ResultRow> rows;
  const double student[] = {0.5, 0.6, 0.55, 0.59};
  for (std::size_t s = 0; s < 4; ++s) {
    rows.push_back(result_row(completed("mnli", "S", 16, s, 0.9, student[s], 0.4)));
  }
  rows.push_back(result_row(completed("mnli", "S", 2, 0, 0.1, 0.1, 0.1)));
  rows.push_back(result_row(infeasible("rte", "XL", 16, 0)));
  const auto table = render_accuracy_table(rows, 16);
  CHECK(table.rfind("Mean accuracy over context sets, n = 16\n", 0) == 0);
  CHECK(table.find("| MNLI | S | **0.900** | 0.560 | 0.400 | 4 |\n") != std::string::npos);
  CHECK(table.find("|  | M | - | - | - | 0 |\n") != std::string::npos);
  CHECK(table.find("| RTE | S |") != std::string::npos);
  CHECK(table.find("|  | XL | - | - | - | 0 |\n") != std::string::npos);
  CHECK(table.find("| QQP | S |") != std::string::npos);
  // 3 datasets x 4 sizes plus title, blank line, header and rule.
  CHECK(std::count(table.begin(), table.end(), '\n') == 16);

  const auto all = render_accuracy_table(rows, std::nullopt);
  CHECK(all.find("| MNLI | S | **0.740** | 0.468 | 0.340 | 5 |\n") != std::string::npos);
}

TEST_CASE("plot series and reference overlay") {
  std::vector<ResultRow> rows;
  for (std::size_t s = 0; s < 4; ++s) {
    rows.push_back(result_row(completed("rte", "S", 16, s, 0.5, 0.5 + 0.1 * static_cast<double>(s), 0.3)));
    rows.push_back(result_row(completed("rte", "M", 16, s, 0.6, 0.6, 0.4)));
  }
  rows.push_back(result_row(completed("rte", "S", 2, 0, 0.5, 0.5, 0.5)));
  rows.push_back(result_row(infeasible("rte", "L", 16, 0)));

  const std::string reference_text =
      "dataset,model_size,source_model,n,metric,value\n"
      "rte,S,125m,16,teacher,0.5\n"
      "rte,M,350m,16,student_ood,0.6\n"
      "rte,M,350m,32,student_ood,0.7\n";
  const auto reference = parse_reference_csv(reference_text);
  REQUIRE(reference.size() == 3);

  const auto files = export_plot_data(rows, 16, reference);
  REQUIRE(files.size() == 2);
  CHECK(files[0].name == "series_rte_n16.csv");
  const auto& series = files[0].content;
  CHECK(series.rfind("dataset,n,model_size,metric,set_index,value\n", 0) == 0);
  // 2 sizes x 3 metrics x (4 sets + mean) + header.
  CHECK(std::count(series.begin(), series.end(), '\n') == 31);
  CHECK(series.find("rte,16,S,student_in_domain,mean,0.65\n") != std::string::npos);
  CHECK(series.find("rte,16,S,student_in_domain,3,0.8\n") != std::string::npos);
  CHECK(series.find(",L,") == std::string::npos);

  CHECK(files[1].name == "overlay_reference.csv");
  CHECK(files[1].content ==
        "source,dataset,n,model_size,metric,value\n"
        "published results,rte,16,S,teacher,0.5\n"
        "published results,rte,16,M,student_ood,0.6\n");

  CHECK(export_plot_data(rows, std::nullopt).size() == 2);
  CHECK_THROWS(parse_reference_csv("dataset,n\nrte,16\n"));

  const auto bundled = parse_reference_csv(cdtest::read_text(cdtest::source_dir() / "data" / "reference" /
                                                             "published_accuracy.csv"));
  CHECK(bundled.size() == 36);
}
