// SPDX-License-Identifier: Apache-2.0

#include "cdistill/cli.hpp"

#include <atomic>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace cdistill {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot read " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

// ---- config ---------------------------------------------------------------

fs::path CliConfig::resolved_vocab_file() const { return vocab_file.empty() ? data_dir / "vocab.txt" : vocab_file; }

RunConfig CliConfig::base_run() const {
  RunConfig base;
  base.seeds = seeds;
  base.hyperparams = hyperparams;
  base.lora = lora;
  base.inference_requests = inference_requests;
  base.eval_count = eval_count;
  base.max_seq_len = max_seq_len;
  base.cache_teacher = cache_teacher;
  return base;
}

std::vector<RunConfig> CliConfig::plan() const {
  try {
    return plan_experiment_matrix(tasks, sizes, sets, base_run());
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

void to_json(nlohmann::json& j, const CliConfig& c) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : c.tasks) {
    tasks.push_back({{"dataset", t.dataset}, {"n", t.ns}});
  }
  j = nlohmann::json{{"data_dir", c.data_dir.generic_string()},
                     {"runs_dir", c.runs_dir.generic_string()},
                     {"vocab_file", c.vocab_file.generic_string()},
                     {"tasks", std::move(tasks)},
                     {"sizes", c.sizes},
                     {"sets", c.sets},
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
                     {"cache_teacher", c.cache_teacher},
                     {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, CliConfig& c) {
  static const std::set<std::string> known{"data_dir",   "runs_dir",       "vocab_file",         "tasks",
                                           "sizes",      "sets",           "seeds",              "hyperparams",
                                           "lora",       "inference_requests", "eval_count",     "max_seq_len",
                                           "cache_teacher", "workers"};
  if (!j.is_object()) {
    throw ConfigError("config must be a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  try {
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("runs_dir")) c.runs_dir = j.at("runs_dir").get<std::string>();
    if (j.contains("vocab_file")) c.vocab_file = j.at("vocab_file").get<std::string>();
    if (j.contains("tasks")) {
      c.tasks.clear();
      for (const auto& t : j.at("tasks")) {
        c.tasks.push_back({t.at("dataset").get<std::string>(), t.at("n").get<std::vector<std::size_t>>()});
      }
    }
    if (j.contains("sizes")) c.sizes = j.at("sizes").get<std::vector<std::string>>();
    c.sets = j.value("sets", c.sets);
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      c.seeds.sampling = s.value("sampling", c.seeds.sampling);
      c.seeds.init = s.value("init", c.seeds.init);
      c.seeds.adapter = s.value("adapter", c.seeds.adapter);
      c.seeds.dropout = s.value("dropout", c.seeds.dropout);
      c.seeds.eval = s.value("eval", c.seeds.eval);
    }
    if (j.contains("hyperparams")) c.hyperparams = j.at("hyperparams").get<Hyperparams>();
    if (j.contains("lora")) c.lora = j.at("lora").get<LoraConfig>();
    c.inference_requests = j.value("inference_requests", c.inference_requests);
    c.eval_count = j.value("eval_count", c.eval_count);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.cache_teacher = j.value("cache_teacher", c.cache_teacher);
    c.workers = j.value("workers", c.workers);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  if (c.workers == 0) {
    throw ConfigError("workers must be at least 1");
  }
}

CliConfig load_cli_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  CliConfig c;
  from_json(j, c);
  return c;
}

void save_cli_config(const fs::path& path, const CliConfig& config) {
  write_file(path, nlohmann::json(config).dump(2) + "\n");
}

// ---- prepare ---------------------------------------------------------------

void to_json(nlohmann::json& j, const PrepareSummary& s) {
  nlohmann::json datasets = nlohmann::json::object();
  for (const auto& [name, c] : s.datasets) {
    datasets[name] = {{"raw_train", c.raw_train},
                      {"train", c.train},
                      {"raw_validation", c.raw_validation},
                      {"validation", c.validation}};
  }
  j = nlohmann::json{{"datasets", std::move(datasets)}, {"vocab_size", s.vocab_size}, {"warnings", s.warnings}};
}

PrepareSummary prepare_data(const fs::path& raw_manifest, const fs::path& out_dir) {
  if (!fs::exists(raw_manifest)) {
    throw IngestionError(raw_manifest.string(), {"file not found"});
  }
  const Manifest raw = load_manifest(raw_manifest);
  PrepareSummary summary;
  Manifest prepared;
  prepared.base_dir = out_dir;
  std::vector<std::pair<std::string, DatasetSplit>> outputs;
  for (const auto& [name, entry] : raw.datasets) {
    auto normalize = [&](const fs::path& file, SplitRole role, std::size_t& raw_count) {
      const fs::path path = raw.resolve(file);
      if (!fs::exists(path)) {
        throw IngestionError(path.string(), {"file not found"});
      }
      const auto rows = read_raw_jsonl(path);
      raw_count = rows.size();
      return relabel(rows, entry.labels, name, role, &summary.warnings);
    };
    PreparedCounts counts;
    DatasetEntry out_entry;
    if (entry.train) {
      auto split = normalize(*entry.train, SplitRole::train, counts.raw_train);
      counts.train = split.size();
      out_entry.train = name + "_train.jsonl";
      outputs.emplace_back(*out_entry.train, std::move(split));
    }
    auto split = normalize(entry.validation, SplitRole::in_domain_validation, counts.raw_validation);
    counts.validation = split.size();
    out_entry.validation = name + "_validation.jsonl";
    outputs.emplace_back(out_entry.validation.string(), std::move(split));
    prepared.datasets.emplace(name, std::move(out_entry));
    summary.datasets.emplace(name, counts);
  }

  std::vector<std::string> corpus = pattern_strings();
  for (const auto& [file, split] : outputs) {
    for (const auto& ex : split.examples) {
      corpus.push_back(ex.premise);
      corpus.push_back(ex.hypothesis);
    }
  }
  const Vocabulary vocab = Vocabulary::build(corpus);
  summary.vocab_size = vocab.size();

  fs::create_directories(out_dir);
  for (const auto& [file, split] : outputs) {
    write_split(out_dir / file, split);
  }
  vocab.save(out_dir / "vocab.txt");
  save_manifest(out_dir / "manifest.json", prepared);
  write_file(out_dir / "summary.json", nlohmann::json(summary).dump(2) + "\n");
  return summary;
}

// ---- run -------------------------------------------------------------------------

MatrixSummary run_matrix(const CliConfig& config, const ProgressFn& progress) {
  const auto plan = config.plan();
  MatrixSummary summary;
  summary.planned = plan.size();

  std::vector<const RunConfig*> pending;
  for (const auto& c : plan) {
    const fs::path existing = config.runs_dir / run_record_path_name(c.hash());
    if (fs::exists(existing)) {
      try {
        const RunRecord r = read_run_json(existing);
        if (r.status != RunStatus::failed) {
          ++summary.skipped;
          continue;
        }
      } catch (const std::exception&) {
        // unreadable record: run again
      }
    }
    pending.push_back(&c);
  }
  if (pending.empty()) {
    return summary;
  }

  const Manifest manifest = load_manifest(config.data_dir / "manifest.json");
  const Vocabulary vocab = Vocabulary::load(config.resolved_vocab_file());
  std::map<std::string, TaskData> data;
  for (const auto* c : pending) {
    if (!data.contains(c->task.in_domain)) {
      data.emplace(c->task.in_domain, load_task_data(manifest, c->task.in_domain));
    }
  }
  fs::create_directories(config.runs_dir);

  std::atomic<std::size_t> next{0};
  std::mutex mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      const RunConfig& c = *pending[i];
      RunRecord record;
      try {
        record = distill_run(c, data.at(c.task.in_domain), vocab);
      } catch (const std::exception& e) {
        record = RunRecord{};
        record.config = c;
        record.config_hash = c.hash();
        record.status = RunStatus::failed;
        record.message = e.what();
      }
      write_run_json(config.runs_dir, record);
      std::lock_guard lock(mutex);
      switch (record.status) {
        case RunStatus::completed:
          ++summary.completed;
          break;
        case RunStatus::infeasible:
          ++summary.infeasible;
          break;
        case RunStatus::failed:
          ++summary.failed;
          break;
      }
      if (progress) {
        progress(record);
      }
    }
  };
  const std::size_t n_workers = std::min(config.workers, pending.size());
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_workers; ++t) {
    threads.emplace_back(worker);
  }
  worker();
  for (auto& t : threads) {
    t.join();
  }
  return summary;
}

// ---- report -------------------------------------------------------------------------

ReportOutput report(const ReportOptions& options) {
  ReportOutput out;
  Aggregate agg = aggregate_runs(options.runs_dir);
  out.warnings = std::move(agg.warnings);
  out.csv = results_csv(agg.rows);
  fs::create_directories(options.out_dir);
  write_file(options.out_dir / "results.csv", out.csv);
  if (options.table) {
    out.table = render_accuracy_table(agg.rows, options.n);
    write_file(options.out_dir / "accuracy_table.md", out.table);
  }
  if (options.series) {
    std::vector<ReferencePoint> reference;
    if (options.reference) {
      reference = parse_reference_csv(read_file(*options.reference));
    }
    out.series = export_plot_data(agg.rows, options.n, reference);
    for (const auto& f : out.series) {
      write_file(options.out_dir / f.name, f.content);
    }
  }
  return out;
}

}  // namespace cdistill
