// SPDX-License-Identifier: Apache-2.0

#include "cdistill/synthetic.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <string_view>

#include <json.hpp>

#include "cdistill/random.hpp"

namespace cdistill {

namespace {

constexpr std::array kNouns{"dog",    "cat",     "farmer", "doctor", "artist", "teacher", "child",  "pilot",
                            "lawyer", "student", "singer", "baker",  "driver", "nurse",   "author", "banker",
                            "horse",  "actor",   "judge",  "clerk",  "chef",   "sailor",  "poet",   "guard"};
constexpr std::array kAdjectives{"old",  "young", "tall",  "quiet", "happy", "angry", "brave", "tired",
                                 "busy", "kind",  "proud", "calm",  "shy",   "loud",  "clever", "famous"};
// past / base
constexpr std::array<std::array<const char*, 2>, 14> kVerbs{{{"saw", "see"},
                                                            {"helped", "help"},
                                                            {"called", "call"},
                                                            {"visited", "visit"},
                                                            {"thanked", "thank"},
                                                            {"followed", "follow"},
                                                            {"paid", "pay"},
                                                            {"met", "meet"},
                                                            {"watched", "watch"},
                                                            {"found", "find"},
                                                            {"praised", "praise"},
                                                            {"avoided", "avoid"},
                                                            {"chased", "chase"},
                                                            {"greeted", "greet"}}};
constexpr std::array kPlaces{"park",  "station", "river",  "market", "library", "school",
                             "bridge", "harbor", "museum", "garden", "office",  "church"};
constexpr std::array kCities{"Paris", "Lima",  "Oslo",  "Cairo", "Delhi", "Tokyo",
                             "Quito", "Accra", "Minsk", "Hanoi", "Dakar", "Perth"};
constexpr std::array kNames{"Smith", "Garcia", "Chen", "Okafor", "Novak", "Silva", "Kim", "Haddad", "Rossi", "Berg"};
constexpr std::array kOrgs{"council", "company", "ministry", "union", "agency", "bank", "hospital", "university"};
constexpr std::array kThings{"factory", "school", "clinic", "office", "bridge", "library", "stadium", "airport"};
constexpr std::array kDays{"Monday", "Tuesday", "Wednesday", "Thursday", "Friday"};
constexpr std::array kTasks{"learn", "cook", "fix", "clean", "paint", "build", "sell", "train", "grow", "find"};
constexpr std::array kObjects{"guitar", "bike",  "garden", "website", "car",   "cake",
                              "phone",  "house", "puppy",  "laptop",  "shirt", "boat"};

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  template <typename A>
  auto pick(const A& a) {
    return a[rng_.index(a.size())];
  }
  template <typename A>
  std::pair<std::string, std::string> pick_two(const A& a) {
    const std::size_t i = rng_.index(a.size());
    std::size_t j = rng_.index(a.size() - 1);
    if (j >= i) ++j;
    return {a[i], a[j]};
  }
  std::size_t index(std::size_t n) { return rng_.index(n); }

 private:
  Rng rng_;
};

std::string uid(const std::string& dataset, const std::string& split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu", i);
  return dataset + "-" + split + "-" + buf;
}

// Contradictions carry "not"; entailed hypotheses are sub-spans of the premise.
RawExample mnli_row(Gen& g, std::size_t k) {
  const auto [n1, n2] = g.pick_two(kNouns);
  const auto verb = g.pick(kVerbs);
  const std::string adj = g.pick(kAdjectives);
  const std::string place = g.pick(kPlaces);
  RawExample r;
  r.premise = "The " + adj + " " + n1 + " " + verb[0] + " the " + n2 + " near the " + place + ".";
  switch (k % 3) {
    case 0:
      r.hypothesis = "The " + n1 + " " + verb[0] + " the " + n2 + ".";
      r.raw_label = "entailment";
      break;
    case 1:
      r.hypothesis = "The " + n1 + " did not " + verb[1] + " the " + n2 + ".";
      r.raw_label = "contradiction";
      break;
    default: {
      const auto other = g.pick(kVerbs);
      r.hypothesis = "The " + n2 + " " + other[0] + " a " + std::string(g.pick(kAdjectives)) + " " +
                     std::string(g.pick(kNouns)) + " later.";
      r.raw_label = "neutral";
    }
  }
  return r;
}

RawExample rte_row(Gen& g, std::size_t k) {
  const std::string name = g.pick(kNames);
  const std::string adj = g.pick(kAdjectives);
  const std::string noun = g.pick(kNouns);
  const auto [city, other_city] = g.pick_two(kCities);
  const auto [org, other_org] = g.pick_two(kOrgs);
  const std::string thing = g.pick(kThings);
  const std::string day = g.pick(kDays);
  RawExample r;
  r.premise = "Speaking in " + city + " on " + day + ", " + name + ", a " + adj + " " + noun +
              ", said that the local " + org + " will open a new " + thing +
              " next year, according to a statement released by the regional " + other_org + ".";
  if (k % 2 == 0) {
    r.hypothesis = "The " + org + " will open a new " + thing + " in " + city + ".";
    r.raw_label = "entailment";
  } else {
    r.hypothesis = "The " + org + " will not open a new " + thing + " in " + other_city + ".";
    r.raw_label = "not_entailment";
  }
  return r;
}

RawExample qqp_row(Gen& g, std::size_t k) {
  const auto [task, other_task] = g.pick_two(kTasks);
  const auto [object, other_object] = g.pick_two(kObjects);
  const std::string adj = g.pick(kAdjectives);
  RawExample r;
  r.premise = "How do I " + task + " a " + adj + " " + object + "?";
  if (k % 2 == 0) {
    r.hypothesis = "What is the best way to " + task + " a " + adj + " " + object + "?";
    r.raw_label = "1";
  } else if (g.index(2) == 0) {
    r.hypothesis = "How do I " + other_task + " a " + adj + " " + object + "?";
    r.raw_label = "0";
  } else {
    r.hypothesis = "Where can I " + task + " an " + other_object + " cheaply?";
    r.raw_label = "0";
  }
  return r;
}

// Every hypothesis word appears in the premise; only word order decides the label.
RawExample hans_row(Gen& g, std::size_t k) {
  const auto [n1, n2] = g.pick_two(kNouns);
  const auto verb = g.pick(kVerbs);
  RawExample r;
  r.premise = "The " + n1 + " " + verb[0] + " the " + n2 + ".";
  if (k % 2 == 0) {
    const std::string adj = g.pick(kAdjectives);
    r.premise = "The " + adj + " " + n1 + " " + verb[0] + " the " + n2 + ".";
    r.hypothesis = "The " + n1 + " " + verb[0] + " the " + n2 + ".";
    r.raw_label = "entailment";
  } else {
    r.hypothesis = "The " + n2 + " " + verb[0] + " the " + n1 + ".";
    r.raw_label = "non-entailment";
  }
  return r;
}

RawExample paws_row(Gen& g, std::size_t k) {
  const std::string task = g.pick(kTasks);
  const auto [o1, o2] = g.pick_two(kObjects);
  RawExample r;
  r.premise = "How do I " + task + " a " + o1 + " with a " + o2 + "?";
  if (k % 2 == 0) {
    r.hypothesis = "How can I " + task + " a " + o1 + " with a " + o2 + "?";
    r.raw_label = "1";
  } else {
    r.hypothesis = "How do I " + task + " a " + o2 + " with a " + o1 + "?";
    r.raw_label = "0";
  }
  return r;
}

using RowFn = RawExample (*)(Gen&, std::size_t);

SyntheticFile make_file(const std::string& dataset, const std::string& split, LabelScheme labels, RowFn fn,
                        std::size_t count, std::uint64_t seed) {
  SyntheticFile f{dataset, split, labels, {}};
  Gen g(seed);
  for (std::size_t i = 0; i < count; ++i) {
    // Label slot drawn at random so classes interleave without a fixed period.
    RawExample r = fn(g, g.index(6));
    r.uid = uid(dataset, split, i);
    r.line = i + 1;
    f.rows.push_back(std::move(r));
  }
  return f;
}

}  // namespace

std::vector<SyntheticFile> generate_synthetic_corpus(const SyntheticOptions& o) {
  struct Spec {
    const char* dataset;
    LabelScheme labels;
    RowFn fn;
    bool has_train;
  };
  const std::array specs{Spec{"mnli", LabelScheme::mnli_three_way, mnli_row, true},
                         Spec{"rte", LabelScheme::binary_nli, rte_row, true},
                         Spec{"qqp", LabelScheme::paraphrase, qqp_row, true},
                         Spec{"hans-lexical-overlap", LabelScheme::binary_nli, hans_row, false},
                         Spec{"paws-qqp", LabelScheme::paraphrase, paws_row, false}};
  std::vector<SyntheticFile> out;
  std::uint64_t k = 0;
  for (const auto& s : specs) {
    ++k;
    // Three-way data loses a third of its rows to binarization.
    const bool three_way = s.labels == LabelScheme::mnli_three_way;
    const std::size_t train = three_way ? o.train_size * 3 / 2 : o.train_size;
    const std::size_t validation = three_way ? o.validation_size * 3 / 2 : o.validation_size;
    if (s.has_train) {
      out.push_back(make_file(s.dataset, "train", s.labels, s.fn, train, mix_seed(o.seed, k, 1)));
    }
    out.push_back(make_file(s.dataset, "validation", s.labels, s.fn, validation, mix_seed(o.seed, k, 2)));
  }
  return out;
}

std::string raw_to_jsonl(const std::vector<RawExample>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["uid"] = r.uid;
    j["premise"] = r.premise;
    j["hypothesis"] = r.hypothesis;
    if (r.raw_label == "0" || r.raw_label == "1") {
      j["label"] = r.raw_label == "1" ? 1 : 0;
    } else {
      j["label"] = r.raw_label;
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_synthetic_corpus(const std::filesystem::path& dir, const SyntheticOptions& options) {
  std::filesystem::create_directories(dir);
  Manifest manifest;
  manifest.base_dir = dir;
  for (const auto& f : generate_synthetic_corpus(options)) {
    const std::string file = f.dataset + "_" + f.split + ".jsonl";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw std::runtime_error("cannot write " + (dir / file).string());
    }
    out << raw_to_jsonl(f.rows);
    auto& entry = manifest.datasets[f.dataset];
    entry.labels = f.labels;
    if (f.split == "train") {
      entry.train = file;
    } else {
      entry.validation = file;
    }
  }
  save_manifest(dir / "manifest.json", manifest);
}

}  // namespace cdistill
