// SPDX-License-Identifier: Apache-2.0
//
// cdistill prepare | run | report

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "cdistill/cli.hpp"

using namespace cdistill;

namespace {

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const IngestionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    for (const auto& p : e.problems) {
      std::cerr << "  " << e.source << ": " << p << '\n';
    }
    return kExitDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDataError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student context distillation with LoRA on a toy transformer"};
  app.require_subcommand(1);

  // prepare
  std::string manifest = "data/raw/manifest.json";
  std::string prepared_dir = "data/prepared";
  auto* prepare = app.add_subcommand("prepare", "Normalize raw JSONL datasets and build the vocabulary");
  prepare->add_option("--manifest", manifest, "Raw dataset manifest")->capture_default_str();
  prepare->add_option("--out", prepared_dir, "Output directory")->capture_default_str();

  // run
  std::string config_file;
  std::optional<std::string> data_dir, runs_dir;
  std::vector<std::string> tasks, sizes;
  std::vector<std::size_t> ns;
  std::optional<std::size_t> sets, workers, epochs, batch_size, max_seq_len, inference_requests, eval_count;
  std::optional<double> lr;
  bool cache_teacher = false, print_config = false, dry_run = false;
  auto* run = app.add_subcommand("run", "Execute the experiment matrix (resumable)");
  run->add_option("--config", config_file, "JSON config file; flags override it");
  run->add_option("--data-dir", data_dir, "Prepared data directory [data/prepared]");
  run->add_option("--runs-dir", runs_dir, std::string("Run record directory [runs, or $") + kRunsDirEnv + "]");
  run->add_option("--tasks", tasks, "In-domain datasets (mnli, rte, qqp)")->delimiter(',');
  run->add_option("--sizes", sizes, "Model sizes (S, M, L, XL)")->delimiter(',');
  run->add_option("--n", ns, "Context sizes, applied to every task")->delimiter(',');
  run->add_option("--sets", sets, "Context sets per n [4]");
  run->add_option("--workers", workers, "Parallel runs [1]");
  run->add_option("--lr", lr, "Learning rate [1e-5]");
  run->add_option("--epochs", epochs, "Epochs [20]");
  run->add_option("--batch-size", batch_size, "Batch size [32]");
  run->add_option("--max-seq-len", max_seq_len, "Context window override [size preset]");
  run->add_option("--inference-requests", inference_requests, "Inference requests per run [32]");
  run->add_option("--eval-count", eval_count, "Validation examples per evaluation [100]");
  run->add_flag("--cache-teacher", cache_teacher, "Reuse teacher logits across epochs");
  run->add_flag("--print-config", print_config, "Print the effective config and exit");
  run->add_flag("--dry-run", dry_run, "List planned config hashes and exit");

  // report
  std::string report_runs_dir, report_out = "report";
  bool table = false, series = false;
  std::optional<std::size_t> report_n;
  std::optional<std::string> reference;
  auto* rep = app.add_subcommand("report", "Aggregate run records into CSV, table and plot series");
  rep->add_option("--runs-dir", report_runs_dir, std::string("Run record directory [runs, or $") + kRunsDirEnv + "]");
  rep->add_option("--out", report_out, "Output directory")->capture_default_str();
  rep->add_flag("--table", table, "Write the accuracy table");
  rep->add_flag("--series", series, "Write plot series files");
  rep->add_option("--n", report_n, "Restrict to one context size");
  rep->add_option("--reference", reference, "Reference CSV to overlay on the series");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }
  const char* env_runs = std::getenv(kRunsDirEnv);

  if (*prepare) {
    return guarded([&] {
      const auto summary = prepare_data(manifest, prepared_dir);
      for (const auto& w : summary.warnings) {
        std::cerr << "warning: " << w << '\n';
      }
      std::cout << nlohmann::json(summary).dump(2) << '\n';
      return kExitOk;
    });
  }

  if (*run) {
    return guarded([&] {
      CliConfig config = config_file.empty() ? CliConfig{} : load_cli_config(config_file);
      if (env_runs && *env_runs) config.runs_dir = env_runs;
      if (data_dir) config.data_dir = *data_dir;
      if (runs_dir) config.runs_dir = *runs_dir;
      if (!tasks.empty()) {
        std::vector<TaskPlan> selected;
        for (const auto& t : tasks) {
          auto it = std::find_if(config.tasks.begin(), config.tasks.end(),
                                 [&](const TaskPlan& p) { return p.dataset == t; });
          if (it != config.tasks.end()) {
            selected.push_back(*it);
          } else {
            selected.push_back({t, {2, 16, 32}});
          }
        }
        config.tasks = std::move(selected);
      }
      if (!ns.empty()) {
        for (auto& t : config.tasks) t.ns = ns;
      }
      if (!sizes.empty()) config.sizes = sizes;
      if (sets) config.sets = *sets;
      if (workers) config.workers = *workers;
      if (lr) config.hyperparams.learning_rate = *lr;
      if (epochs) config.hyperparams.epochs = *epochs;
      if (batch_size) config.hyperparams.batch_size = *batch_size;
      if (max_seq_len) config.max_seq_len = *max_seq_len;
      if (inference_requests) config.inference_requests = *inference_requests;
      if (eval_count) config.eval_count = *eval_count;
      if (cache_teacher) config.cache_teacher = true;
      if (config.workers == 0) throw ConfigError("workers must be at least 1");

      if (print_config) {
        std::cout << nlohmann::json(config).dump(2) << '\n';
        return kExitOk;
      }
      const auto plan = config.plan();
      if (dry_run) {
        for (const auto& c : plan) {
          std::cout << c.hash() << ' ' << c.task.in_domain << ' ' << c.model_size << " n=" << c.n
                    << " set=" << c.context_set_index << '\n';
        }
        return kExitOk;
      }
      const auto summary = run_matrix(config, [](const RunRecord& r) {
        std::cerr << r.config_hash << ' ' << r.config.task.in_domain << ' ' << r.config.model_size
                  << " n=" << r.config.n << " set=" << r.config.context_set_index << ": " << to_string(r.status);
        if (!r.message.empty()) std::cerr << " (" << r.message << ')';
        std::cerr << '\n';
      });
      std::cout << "planned " << summary.planned << ", skipped " << summary.skipped << ", completed "
                << summary.completed << ", infeasible " << summary.infeasible << ", failed " << summary.failed
                << '\n';
      return summary.failed > 0 ? kExitRunFailure : kExitOk;
    });
  }

  return guarded([&] {
    ReportOptions options;
    options.runs_dir = !report_runs_dir.empty() ? report_runs_dir : (env_runs && *env_runs ? env_runs : "runs");
    options.out_dir = report_out;
    options.table = table || !series;
    options.series = series || !table;
    options.n = report_n;
    if (reference) options.reference = *reference;
    const auto out = report(options);
    for (const auto& w : out.warnings) {
      std::cerr << "warning: " << w << '\n';
    }
    if (!out.table.empty()) std::cout << out.table;
    for (const auto& f : out.series) {
      std::cout << "wrote " << (options.out_dir / f.name).string() << '\n';
    }
    return kExitOk;
  });
}
