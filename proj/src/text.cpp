// SPDX-License-Identifier: Apache-2.0

#include "cdistill/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace cdistill {

namespace {

constexpr std::string_view kVocabHeader = "#cdistill-vocab v1";

enum class PieceKind { word, punct, newline };

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

struct RawPiece {
  std::string text;
  PieceKind kind;
  std::size_t spaces_before;
};

std::vector<RawPiece> scan(std::string_view text, std::size_t& trailing_spaces) {
  std::vector<RawPiece> pieces;
  std::size_t i = 0, spaces = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == ' ') {
      ++spaces;
      ++i;
    } else if (c == '\n') {
      pieces.push_back({"\n", PieceKind::newline, spaces});
      spaces = 0;
      ++i;
    } else if (is_word_byte(c)) {
      std::size_t j = i;
      while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) {
        ++j;
      }
      pieces.push_back({std::string(text.substr(i, j - i)), PieceKind::word, spaces});
      spaces = 0;
      i = j;
    } else {
      pieces.push_back({std::string(1, text[i]), PieceKind::punct, spaces});
      spaces = 0;
      ++i;
    }
  }
  trailing_spaces = spaces;
  return pieces;
}

PieceKind kind_of(std::string_view piece) {
  if (piece == "\n") {
    return PieceKind::newline;
  }
  return is_word_byte(static_cast<unsigned char>(piece.front())) || piece == "<unk>" ? PieceKind::word
                                                                                      : PieceKind::punct;
}

bool implies_space(bool has_prev, PieceKind prev, PieceKind current) {
  return current == PieceKind::word && has_prev && prev != PieceKind::newline;
}

std::string escape(const std::string& token) {
  if (token == "\n") return "<nl>";
  if (token == "\r") return "<cr>";
  return token;
}

std::string unescape(const std::string& line) {
  if (line == "<nl>") return "\n";
  if (line == "<cr>") return "\r";
  return line;
}

}  // namespace

const std::vector<std::string>& Vocabulary::reserved_tokens() {
  static const std::vector<std::string> reserved{"<pad>", "<unk>", "\n", "Yes", "No", "<sp>", "<glue>"};
  return reserved;
}

Vocabulary::Vocabulary() {
  for (const auto& t : reserved_tokens()) {
    add(t);
  }
}

void Vocabulary::add(std::string piece) {
  if (index_.count(piece)) {
    return;
  }
  index_.emplace(piece, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(piece));
}

std::vector<std::string> split_pieces(std::string_view text) {
  std::size_t trailing = 0;
  std::vector<std::string> out;
  for (auto& p : scan(text, trailing)) {
    out.push_back(std::move(p.text));
  }
  return out;
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus) {
  std::set<std::string> pieces;
  for (const auto& s : corpus) {
    for (auto& p : split_pieces(s)) {
      pieces.insert(std::move(p));
    }
  }
  Vocabulary v;
  for (const auto& p : pieces) {
    v.add(p);
  }
  return v;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id_of(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  return it == index_.end() ? kUnknown : it->second;
}

bool Vocabulary::contains(std::string_view piece) const { return index_.count(std::string(piece)) != 0; }

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::size_t trailing = 0;
  const auto pieces = scan(text, trailing);
  std::vector<TokenId> ids;
  ids.reserve(pieces.size());
  bool has_prev = false;
  PieceKind prev = PieceKind::newline;
  for (const auto& p : pieces) {
    const std::size_t implied = implies_space(has_prev, prev, p.kind) ? 1 : 0;
    if (p.spaces_before > implied) {
      ids.insert(ids.end(), p.spaces_before - implied, kSpace);
    } else if (p.spaces_before < implied) {
      ids.push_back(kGlue);
    }
    ids.push_back(id_of(p.text));
    has_prev = true;
    prev = p.kind;
  }
  ids.insert(ids.end(), trailing, kSpace);
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  bool has_prev = false, glue = false;
  PieceKind prev = PieceKind::newline;
  for (TokenId id : ids) {
    if (id == kSpace) {
      out.push_back(' ');
      continue;
    }
    if (id == kGlue) {
      glue = true;
      continue;
    }
    if (id == kPad) {
      continue;
    }
    const std::string& piece = token(id);
    const PieceKind kind = kind_of(piece);
    if (!glue && implies_space(has_prev, prev, kind)) {
      out.push_back(' ');
    }
    out += piece;
    glue = false;
    has_prev = true;
    prev = kind;
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out(kVocabHeader);
  out.push_back('\n');
  for (const auto& t : tokens_) {
    out += escape(t);
    out.push_back('\n');
  }
  return out;
}

Vocabulary Vocabulary::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kVocabHeader) {
    throw VocabularyError("vocabulary file lacks the '" + std::string(kVocabHeader) + "' header");
  }
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::string token = unescape(line);
    if (token.empty() || v.index_.count(token)) {
      throw VocabularyError("vocabulary line " + std::to_string(line_no) + ": empty or duplicate token");
    }
    v.add(std::move(token));
  }
  const auto& reserved = reserved_tokens();
  if (v.tokens_.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), v.tokens_.begin())) {
    throw VocabularyError("vocabulary does not start with the reserved tokens");
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw VocabularyError("cannot write " + path.string());
  }
  out << serialize();
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw VocabularyError("cannot open vocabulary " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

// ---- patterns ----------------------------------------------------------------

std::string_view to_string(PromptRole role) { return role == PromptRole::teacher ? "teacher" : "student"; }

PatternSpec pattern_for(TaskKind task, PromptRole role) {
  PatternSpec spec;
  spec.task = task;
  spec.role = role;
  std::string question = task == TaskKind::nli
                             ? "Are the following sentences examples of entailment, yes or no?"
                             : "Are the following sentences duplicates or paraphrases of each other, yes or no?";
  spec.instruction = role == PromptRole::teacher ? "Think logically. " + question : question;
  return spec;
}

std::vector<std::string> pattern_strings() {
  std::vector<std::string> out;
  for (auto task : {TaskKind::nli, TaskKind::paraphrase}) {
    out.push_back(pattern_for(task, PromptRole::teacher).instruction);
  }
  out.push_back(render_example({"", "x", "x", Label::yes}, true));
  out.push_back(render_example({"", "x", "x", Label::no}, true));
  return out;
}

std::string render_example(const LabeledExample& ex, bool with_label) {
  if (ex.premise.empty() || ex.hypothesis.empty()) {
    throw std::invalid_argument("render_example: empty premise or hypothesis in '" + ex.uid + "'");
  }
  std::string out = "Premise: " + ex.premise + "\nHypothesis: " + ex.hypothesis + "\nLabel:";
  if (with_label) {
    out += ex.label == Label::yes ? " Yes" : " No";
  }
  return out;
}

namespace {

RenderedPrompt finish(const Vocabulary& vocab, std::string text) {
  RenderedPrompt p;
  p.token_ids = vocab.encode(text);
  p.text = std::move(text);
  if (p.token_ids.empty()) {
    throw std::logic_error("rendered prompt encodes to no tokens");
  }
  p.answer_position = p.token_ids.size() - 1;
  return p;
}

}  // namespace

RenderedPrompt render_teacher_prompt(const Vocabulary& vocab, const PatternSpec& spec,
                                     std::span<const LabeledExample> contexts, const LabeledExample& inference) {
  if (contexts.empty()) {
    throw std::invalid_argument("render_teacher_prompt: no context examples");
  }
  std::string text = spec.instruction + "\n";
  for (const auto& c : contexts) {
    if (c.uid == inference.uid) {
      throw LeakageError("inference request '" + inference.uid + "' is also a context example");
    }
    text += render_example(c, true);
    text += "\n\n";
  }
  text += render_example(inference, false);
  return finish(vocab, std::move(text));
}

RenderedPrompt render_student_prompt(const Vocabulary& vocab, const PatternSpec& spec,
                                     const LabeledExample& inference) {
  return finish(vocab, spec.instruction + "\n" + render_example(inference, false));
}

}  // namespace cdistill
