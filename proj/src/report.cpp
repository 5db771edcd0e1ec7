// SPDX-License-Identifier: Apache-2.0

#include "cdistill/report.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

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

void write_atomically(const fs::path& path, std::string_view bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot write " + tmp.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw std::runtime_error("short write to " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.emplace_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) out.push_back(line);
    start = end + 1;
  }
  return out;
}

std::optional<double> opt_double(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  return std::stod(cell);
}

std::size_t dataset_rank(const std::string& name) {
  const auto& known = in_domain_datasets();
  const auto it = std::find(known.begin(), known.end(), name);
  return static_cast<std::size_t>(it - known.begin());
}

std::size_t size_rank(const std::string& tag) {
  try {
    return model_size_rank(tag);
  } catch (const std::exception&) {
    return model_size_tags().size();
  }
}

auto sort_key(const ResultRow& r) {
  return std::make_tuple(dataset_rank(r.dataset), r.dataset, size_rank(r.model_size), r.model_size, r.n,
                         r.set_index, r.config_hash);
}

std::string upper(std::string s) {
  for (auto& c : s) {
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  }
  return s;
}

constexpr std::array<const char*, 3> kMetrics{"teacher", "student_in_domain", "student_ood"};

std::optional<double> metric_of(const ResultRow& r, std::size_t m) {
  switch (m) {
    case 0:
      return r.teacher_acc;
    case 1:
      return r.student_in_domain_acc;
    default:
      return r.student_ood_acc;
  }
}

}  // namespace

std::string run_record_path_name(const std::string& config_hash) { return config_hash + ".json"; }

std::string run_record_text(const RunRecord& record) { return nlohmann::json(record).dump(2) + "\n"; }

fs::path write_run_json(const fs::path& runs_dir, const RunRecord& record) {
  fs::create_directories(runs_dir);
  if (!record.adapter_bytes.empty()) {
    write_atomically(runs_dir / (record.config_hash + ".adapters.bin"), record.adapter_bytes);
  }
  const fs::path path = runs_dir / run_record_path_name(record.config_hash);
  write_atomically(path, run_record_text(record));
  return path;
}

RunRecord read_run_json(const fs::path& path) {
  return nlohmann::json::parse(read_file(path)).get<RunRecord>();
}

ResultRow result_row(const RunRecord& record) {
  ResultRow row;
  row.config_hash = record.config_hash;
  row.dataset = record.config.task.in_domain;
  row.model_size = record.config.model_size;
  row.n = record.config.n;
  row.set_index = record.config.context_set_index;
  row.status = std::string(to_string(record.status));
  if (record.teacher_in_domain) row.teacher_acc = record.teacher_in_domain->accuracy;
  if (record.student_in_domain) row.student_in_domain_acc = record.student_in_domain->accuracy;
  if (record.student_ood) row.student_ood_acc = record.student_ood->accuracy;
  if (!record.loss_curve.empty()) row.final_loss = record.loss_curve.back();
  return row;
}

Aggregate aggregate_runs(const fs::path& runs_dir) {
  Aggregate agg;
  if (!fs::is_directory(runs_dir)) {
    agg.warnings.push_back(runs_dir.string() + ": not a directory");
    return agg;
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(runs_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      agg.rows.push_back(result_row(read_run_json(f)));
    } catch (const std::exception& e) {
      agg.warnings.push_back(f.filename().string() + ": skipped malformed run record (" + e.what() + ")");
    }
  }
  std::sort(agg.rows.begin(), agg.rows.end(),
            [](const ResultRow& a, const ResultRow& b) { return sort_key(a) < sort_key(b); });
  return agg;
}

std::string results_csv(std::span<const ResultRow> rows) {
  std::string out(kResultsCsvHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += r.config_hash + ',' + r.dataset + ',' + r.model_size + ',' + std::to_string(r.n) + ',' +
           std::to_string(r.set_index) + ',' + r.status + ',' + fmt(r.teacher_acc) + ',' +
           fmt(r.student_in_domain_acc) + ',' + fmt(r.student_ood_acc) + ',' + fmt(r.final_loss) + '\n';
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(std::string_view text) {
  const auto lines = lines_of(text);
  if (lines.empty() || lines.front() != kResultsCsvHeader) {
    throw std::invalid_argument("results CSV: missing or unexpected header");
  }
  std::vector<ResultRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto c = split_csv_line(lines[i]);
    if (c.size() != 10) {
      throw std::invalid_argument("results CSV line " + std::to_string(i + 1) + ": expected 10 cells");
    }
    ResultRow r;
    r.config_hash = c[0];
    r.dataset = c[1];
    r.model_size = c[2];
    r.n = std::stoul(c[3]);
    r.set_index = std::stoul(c[4]);
    r.status = c[5];
    r.teacher_acc = opt_double(c[6]);
    r.student_in_domain_acc = opt_double(c[7]);
    r.student_ood_acc = opt_double(c[8]);
    r.final_loss = opt_double(c[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<std::string> aggregate_to_csv(const fs::path& runs_dir, const fs::path& csv) {
  Aggregate agg = aggregate_runs(runs_dir);
  if (csv.has_parent_path()) {
    fs::create_directories(csv.parent_path());
  }
  write_atomically(csv, results_csv(agg.rows));
  return agg.warnings;
}

std::string render_accuracy_table(std::span<const ResultRow> rows, std::optional<std::size_t> n_filter) {
  std::string out;
  if (n_filter) {
    out += "Mean accuracy over context sets, n = " + std::to_string(*n_filter) + "\n\n";
  } else {
    out += "Mean accuracy over context sets, all n\n\n";
  }
  out += "| Dataset | Model size | Accuracy teacher | Accuracy in-domain | Accuracy OOD | Runs |\n";
  out += "|---|---|---|---|---|---|\n";
  for (const auto& dataset : in_domain_datasets()) {
    bool first = true;
    for (const auto& size : model_size_tags()) {
      std::array<double, 3> total{};
      std::array<std::size_t, 3> count{};
      std::size_t runs = 0;
      for (const auto& r : rows) {
        if (r.dataset != dataset || r.model_size != size || r.status != "completed") continue;
        if (n_filter && r.n != *n_filter) continue;
        ++runs;
        for (std::size_t m = 0; m < 3; ++m) {
          if (auto v = metric_of(r, m)) {
            total[m] += *v;
            ++count[m];
          }
        }
      }
      std::array<std::optional<double>, 3> mean;
      std::optional<double> best;
      for (std::size_t m = 0; m < 3; ++m) {
        if (count[m] > 0) {
          // Round first so the bold marker agrees with the printed digits.
          char buf[16];
          std::snprintf(buf, sizeof buf, "%.3f", total[m] / static_cast<double>(count[m]));
          mean[m] = std::stod(buf);
          best = best ? std::max(*best, *mean[m]) : *mean[m];
        }
      }
      out += "| " + (first ? upper(dataset) : std::string()) + " | " + size + " |";
      for (std::size_t m = 0; m < 3; ++m) {
        if (!mean[m]) {
          out += " - |";
          continue;
        }
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.3f", *mean[m]);
        out += *mean[m] == *best ? " **" + std::string(buf) + "** |" : " " + std::string(buf) + " |";
      }
      out += " " + std::to_string(runs) + " |\n";
      first = false;
    }
  }
  return out;
}

std::vector<ReferencePoint> parse_reference_csv(std::string_view text) {
  const auto lines = lines_of(text);
  if (lines.empty()) {
    return {};
  }
  const auto header = split_csv_line(lines.front());
  auto column = [&](const char* name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw std::invalid_argument(std::string("reference CSV: missing column '") + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t dataset = column("dataset"), size = column("model_size"), n = column("n"),
                    metric = column("metric"), value = column("value");
  std::vector<ReferencePoint> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto c = split_csv_line(lines[i]);
    if (c.size() != header.size()) {
      throw std::invalid_argument("reference CSV line " + std::to_string(i + 1) + ": wrong cell count");
    }
    out.push_back({c[dataset], c[size], std::stoul(c[n]), c[metric], std::stod(c[value])});
  }
  return out;
}

std::vector<SeriesFile> export_plot_data(std::span<const ResultRow> rows, std::optional<std::size_t> n_filter,
                                         std::span<const ReferencePoint> reference) {
  constexpr std::string_view kHeader = "dataset,n,model_size,metric,set_index,value\n";
  // (dataset rank, dataset, n) -> rows, keeping aggregate order inside.
  std::map<std::tuple<std::size_t, std::string, std::size_t>, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) {
    if (r.status != "completed" || (n_filter && r.n != *n_filter)) continue;
    groups[{dataset_rank(r.dataset), r.dataset, r.n}].push_back(&r);
  }
  std::vector<SeriesFile> files;
  for (auto& [key, members] : groups) {
    const auto& [rank, dataset, n] = key;
    std::stable_sort(members.begin(), members.end(),
                     [](const ResultRow* a, const ResultRow* b) { return sort_key(*a) < sort_key(*b); });
    std::string content(kHeader);
    std::vector<std::string> sizes;
    for (const auto* r : members) {
      if (std::find(sizes.begin(), sizes.end(), r->model_size) == sizes.end()) sizes.push_back(r->model_size);
    }
    const std::string prefix = dataset + ',' + std::to_string(n) + ',';
    for (const auto& size : sizes) {
      for (std::size_t m = 0; m < 3; ++m) {
        double total = 0.0;
        std::size_t count = 0;
        for (const auto* r : members) {
          if (r->model_size != size) continue;
          if (auto v = metric_of(*r, m)) {
            content += prefix + size + ',' + kMetrics[m] + ',' + std::to_string(r->set_index) + ',' + fmt(*v) + '\n';
            total += *v;
            ++count;
          }
        }
        if (count > 0) {
          content += prefix + size + ',' + kMetrics[m] + ",mean," + fmt(total / static_cast<double>(count)) + '\n';
        }
      }
    }
    files.push_back({"series_" + dataset + "_n" + std::to_string(n) + ".csv", std::move(content)});
  }
  if (!reference.empty()) {
    std::string content = "source,dataset,n,model_size,metric,value\n";
    for (const auto& p : reference) {
      if (n_filter && p.n != *n_filter) continue;
      content += "published results," + p.dataset + ',' + std::to_string(p.n) + ',' + p.model_size + ',' + p.metric +
                 ',' + fmt(p.value) + '\n';
    }
    files.push_back({"overlay_reference.csv", std::move(content)});
  }
  return files;
}

}  // namespace cdistill
