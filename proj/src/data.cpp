// SPDX-License-Identifier: Apache-2.0

#include "cdistill/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "cdistill/random.hpp"

namespace cdistill {

namespace {

std::string join_problems(const std::string& source, const std::vector<std::string>& problems) {
  std::string msg = source + ": " + std::to_string(problems.size()) + " invalid record(s)";
  for (const auto& p : problems) {
    msg += "\n  " + p;
  }
  return msg;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IngestionError(path.string(), {"cannot open file '" + path.string() + "'"});
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::size_t> draw_indices(std::size_t population, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(population);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.index(population - i)]);
  }
  idx.resize(k);
  return idx;
}

}  // namespace

IngestionError::IngestionError(std::string src, std::vector<std::string> probs)
    : std::runtime_error(join_problems(src, probs)), source(std::move(src)), problems(std::move(probs)) {}

std::string_view to_string(SplitRole role) {
  switch (role) {
    case SplitRole::train:
      return "train";
    case SplitRole::in_domain_validation:
      return "in_domain_validation";
    case SplitRole::ood_validation:
      return "ood_validation";
  }
  return "?";
}

void DatasetSplit::validate_unique_uids() const {
  std::unordered_set<std::string> seen;
  std::vector<std::string> problems;
  for (const auto& ex : examples) {
    if (!seen.insert(ex.uid).second) {
      problems.push_back("duplicate uid '" + ex.uid + "'");
    }
  }
  if (!problems.empty()) {
    throw IngestionError(name, std::move(problems));
  }
}

const std::vector<std::string>& in_domain_datasets() {
  static const std::vector<std::string> names{"mnli", "rte", "qqp"};
  return names;
}

TaskSpec task_spec_for(std::string_view in_domain) {
  if (in_domain == "mnli" || in_domain == "rte") {
    return {TaskKind::nli, std::string(in_domain), "hans-lexical-overlap"};
  }
  if (in_domain == "qqp") {
    return {TaskKind::paraphrase, "qqp", "paws-qqp"};
  }
  throw std::invalid_argument("unknown in-domain dataset '" + std::string(in_domain) + "'");
}

// ---- ingestion ----------------------------------------------------------------

std::vector<RawExample> parse_raw_jsonl(std::string_view text, const std::string& source) {
  std::vector<RawExample> out;
  std::vector<std::string> problems;
  std::unordered_map<std::string, std::size_t> first_line;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.remove_suffix(1);
    }
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      continue;
    }
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      problems.push_back(where + ": not valid JSON");
      continue;
    }
    if (!j.is_object()) {
      problems.push_back(where + ": record is not a JSON object");
      continue;
    }
    RawExample ex;
    ex.line = line_no;
    bool ok = true;
    for (const char* field : {"uid", "premise", "hypothesis"}) {
      if (!j.contains(field)) {
        problems.push_back(where + ": missing field '" + field + "'");
        ok = false;
      } else if (!j[field].is_string() || j[field].get<std::string>().empty()) {
        problems.push_back(where + ": field '" + field + "' must be a non-empty string");
        ok = false;
      }
    }
    if (!j.contains("label")) {
      problems.push_back(where + ": missing field 'label'");
      ok = false;
    } else if (j["label"].is_string()) {
      ex.raw_label = j["label"].get<std::string>();
    } else if (j["label"].is_number_integer()) {
      ex.raw_label = std::to_string(j["label"].get<long long>());
    } else {
      problems.push_back(where + ": field 'label' must be a string or integer");
      ok = false;
    }
    if (!ok) {
      continue;
    }
    ex.uid = j["uid"].get<std::string>();
    ex.premise = j["premise"].get<std::string>();
    ex.hypothesis = j["hypothesis"].get<std::string>();
    if (auto [it, inserted] = first_line.emplace(ex.uid, line_no); !inserted) {
      problems.push_back(where + ": duplicate uid '" + ex.uid + "' (first seen on line " +
                         std::to_string(it->second) + ")");
      continue;
    }
    out.push_back(std::move(ex));
  }
  if (!problems.empty()) {
    throw IngestionError(source, std::move(problems));
  }
  return out;
}

std::vector<RawExample> read_raw_jsonl(const std::filesystem::path& path) {
  return parse_raw_jsonl(read_text(path), path.string());
}

DatasetSplit load_split(const std::filesystem::path& path, std::string name, SplitRole role) {
  if (name.empty()) {
    name = path.stem().string();
  }
  const auto raw = read_raw_jsonl(path);
  return relabel(raw, LabelScheme::yes_no, std::move(name), role);
}

std::string_view to_string(LabelScheme scheme) {
  switch (scheme) {
    case LabelScheme::yes_no:
      return "yes_no";
    case LabelScheme::mnli_three_way:
      return "mnli_three_way";
    case LabelScheme::binary_nli:
      return "binary_nli";
    case LabelScheme::paraphrase:
      return "paraphrase";
  }
  return "?";
}

LabelScheme label_scheme_from_string(std::string_view text) {
  for (auto s : {LabelScheme::yes_no, LabelScheme::mnli_three_way, LabelScheme::binary_nli, LabelScheme::paraphrase}) {
    if (to_string(s) == text) {
      return s;
    }
  }
  throw std::invalid_argument("unknown label scheme '" + std::string(text) + "'");
}

namespace {

// nullopt = drop the row (MNLI neutral); throws for labels outside the scheme.
std::optional<Label> map_label(LabelScheme scheme, const std::string& raw) {
  if (raw == "yes") return Label::yes;
  if (raw == "no") return Label::no;
  switch (scheme) {
    case LabelScheme::yes_no:
      break;
    case LabelScheme::mnli_three_way:
      if (raw == "entailment") return Label::yes;
      if (raw == "contradiction") return Label::no;
      if (raw == "neutral") return std::nullopt;
      break;
    case LabelScheme::binary_nli:
      if (raw == "entailment") return Label::yes;
      if (raw == "not_entailment" || raw == "non-entailment") return Label::no;
      break;
    case LabelScheme::paraphrase:
      if (raw == "duplicate" || raw == "paraphrase" || raw == "1") return Label::yes;
      if (raw == "not_duplicate" || raw == "not_paraphrase" || raw == "0") return Label::no;
      break;
  }
  throw std::invalid_argument(raw);
}

}  // namespace

DatasetSplit relabel(std::span<const RawExample> raw, LabelScheme scheme, std::string name, SplitRole role,
                     std::vector<std::string>* warnings) {
  DatasetSplit split;
  split.name = std::move(name);
  split.role = role;
  std::vector<std::string> problems;
  for (const auto& r : raw) {
    try {
      if (auto label = map_label(scheme, r.raw_label)) {
        split.examples.push_back({r.uid, r.premise, r.hypothesis, *label});
      }
    } catch (const std::invalid_argument&) {
      problems.push_back("line " + std::to_string(r.line) + ": unknown label '" + r.raw_label + "' for scheme " +
                         std::string(to_string(scheme)));
    }
  }
  if (!problems.empty()) {
    throw IngestionError(split.name, std::move(problems));
  }
  split.validate_unique_uids();
  if (split.examples.empty() && warnings) {
    warnings->push_back(split.name + ": no examples left after label normalization (" +
                        std::to_string(raw.size()) + " input rows)");
  }
  return split;
}

DatasetSplit binarize_mnli(std::span<const RawExample> raw, std::string name, SplitRole role,
                           std::vector<std::string>* warnings) {
  return relabel(raw, LabelScheme::mnli_three_way, std::move(name), role, warnings);
}

std::vector<RawExample> to_raw(const DatasetSplit& split) {
  std::vector<RawExample> out;
  std::size_t line = 0;
  for (const auto& ex : split.examples) {
    out.push_back({ex.uid, ex.premise, ex.hypothesis, std::string(to_string(ex.label)), ++line});
  }
  return out;
}

std::string to_jsonl(const DatasetSplit& split) {
  std::string out;
  for (const auto& ex : split.examples) {
    nlohmann::ordered_json j;
    j["uid"] = ex.uid;
    j["premise"] = ex.premise;
    j["hypothesis"] = ex.hypothesis;
    j["label"] = std::string(to_string(ex.label));
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

void write_split(const std::filesystem::path& path, const DatasetSplit& split) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IngestionError(path.string(), {"cannot write file"});
  }
  out << to_jsonl(split);
}

// ---- sampling --------------------------------------------------------------------

std::array<ContextSet, kContextSetsPerSize> sample_context_sets(const DatasetSplit& split, std::size_t n,
                                                                std::uint64_t seed) {
  if (n == 0) {
    throw SamplingError("context sets need n >= 1");
  }
  if (split.size() < kContextSetsPerSize * n) {
    throw SamplingError("split '" + split.name + "' has " + std::to_string(split.size()) + " examples; " +
                        std::to_string(kContextSetsPerSize) + " context sets of " + std::to_string(n) + " need " +
                        std::to_string(kContextSetsPerSize * n));
  }
  std::array<ContextSet, kContextSetsPerSize> sets;
  std::vector<std::set<std::string>> chosen;
  for (std::size_t s = 0; s < kContextSetsPerSize; ++s) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 1000) {
        throw SamplingError("could not draw " + std::to_string(kContextSetsPerSize) + " distinct context sets");
      }
      const std::uint64_t set_seed = mix_seed(seed, n, s, attempt);
      Rng rng(set_seed);
      const auto idx = draw_indices(split.size(), n, rng);
      std::set<std::string> uids;
      for (auto i : idx) {
        uids.insert(split.examples[i].uid);
      }
      if (std::find(chosen.begin(), chosen.end(), uids) != chosen.end()) {
        continue;
      }
      chosen.push_back(std::move(uids));
      ContextSet& cs = sets[s];
      cs.n = n;
      cs.set_index = s;
      cs.seed = set_seed;
      for (auto i : idx) {
        cs.examples.push_back(split.examples[i]);
      }
      break;
    }
  }
  return sets;
}

std::vector<LabeledExample> sample_inference_requests(const DatasetSplit& split,
                                                      std::span<const ContextSet> context_sets, std::size_t count,
                                                      std::uint64_t seed) {
  std::unordered_set<std::string> excluded;
  for (const auto& cs : context_sets) {
    for (const auto& ex : cs.examples) {
      excluded.insert(ex.uid);
    }
  }
  std::vector<const LabeledExample*> candidates;
  for (const auto& ex : split.examples) {
    if (!excluded.count(ex.uid)) {
      candidates.push_back(&ex);
    }
  }
  if (candidates.size() < count) {
    throw SamplingError("split '" + split.name + "' has " + std::to_string(candidates.size()) +
                        " examples outside the context sets; " + std::to_string(count) + " inference requests needed");
  }
  Rng rng(mix_seed(seed, 0x1F0, count));
  std::vector<LabeledExample> out;
  for (auto i : draw_indices(candidates.size(), count, rng)) {
    out.push_back(*candidates[i]);
  }
  return out;
}

std::vector<LabeledExample> sample_eval(const DatasetSplit& split, std::size_t count, std::uint64_t seed) {
  if (split.role == SplitRole::train) {
    throw SamplingError("split '" + split.name + "' is a training split; evaluation draws need a validation split");
  }
  if (split.size() < count) {
    throw SamplingError("split '" + split.name + "' has " + std::to_string(split.size()) +
                        " examples; evaluation needs " + std::to_string(count));
  }
  Rng rng(mix_seed(seed, 0xE7A1, count));
  std::vector<LabeledExample> out;
  for (auto i : draw_indices(split.size(), count, rng)) {
    out.push_back(split.examples[i]);
  }
  return out;
}

void assert_no_leakage(std::span<const LabeledExample> contexts, std::span<const LabeledExample> inference) {
  std::unordered_set<std::string> uids;
  for (const auto& c : contexts) {
    uids.insert(c.uid);
  }
  for (const auto& ex : inference) {
    if (uids.count(ex.uid)) {
      throw LeakageError("inference request '" + ex.uid + "' is also a context example");
    }
  }
}

// ---- manifests ---------------------------------------------------------------------

std::filesystem::path Manifest::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : base_dir / p;
}

Manifest load_manifest(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  Manifest m;
  m.base_dir = path.parent_path();
  std::vector<std::string> problems;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& [name, entry] : j.at("datasets").items()) {
      DatasetEntry e;
      if (entry.contains("train")) {
        e.train = entry.at("train").get<std::string>();
      }
      e.validation = entry.at("validation").get<std::string>();
      e.labels = label_scheme_from_string(entry.value("labels", std::string("yes_no")));
      m.datasets.emplace(name, std::move(e));
    }
  } catch (const std::exception& e) {
    throw IngestionError(path.string(), {std::string("malformed manifest: ") + e.what()});
  }
  return m;
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  nlohmann::ordered_json datasets = nlohmann::ordered_json::object();
  for (const auto& [name, e] : manifest.datasets) {
    nlohmann::ordered_json entry;
    if (e.train) {
      entry["train"] = e.train->generic_string();
    }
    entry["validation"] = e.validation.generic_string();
    entry["labels"] = std::string(to_string(e.labels));
    datasets[name] = std::move(entry);
  }
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["datasets"] = std::move(datasets);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IngestionError(path.string(), {"cannot write manifest"});
  }
  out << j.dump(2) << '\n';
}

TaskData load_task_data(const Manifest& prepared, std::string_view in_domain) {
  TaskData data;
  data.task = task_spec_for(in_domain);
  auto entry = [&](const std::string& name) -> const DatasetEntry& {
    auto it = prepared.datasets.find(name);
    if (it == prepared.datasets.end()) {
      throw IngestionError("manifest", {"dataset '" + name + "' is not listed"});
    }
    if (it->second.labels != LabelScheme::yes_no) {
      throw IngestionError("manifest", {"dataset '" + name + "' is not normalized; run prepare first"});
    }
    return it->second;
  };
  const auto& in = entry(data.task.in_domain);
  if (!in.train) {
    throw IngestionError("manifest", {"dataset '" + data.task.in_domain + "' has no training split"});
  }
  data.train = load_split(prepared.resolve(*in.train), data.task.in_domain, SplitRole::train);
  data.validation =
      load_split(prepared.resolve(in.validation), data.task.in_domain, SplitRole::in_domain_validation);
  data.ood = load_split(prepared.resolve(entry(data.task.ood).validation), data.task.ood, SplitRole::ood_validation);
  return data;
}

}  // namespace cdistill
