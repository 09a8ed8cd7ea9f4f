#pragma once

// Identifier tokens, prompt templates, tokenization and identifier stripping.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "textloc/autodiff.hpp"
#include "textloc/errors.hpp"
#include "textloc/vocabulary.hpp"

namespace textloc {

// Token id used to initialise identifiers under the CLIP tokenizer of real
// backbones. Only honoured when the vocabulary is large enough to hold it.
inline constexpr int kClipIdentifierInitTokenId = 48136;

struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::string> words;

  std::size_t size() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

// Lowercased words; anything other than letters, digits and '<>' separates.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '<' || ch == '>' || ch == '_') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// <bos> words... <eos>; unknown words map to <unk>.
inline TokenSequence tokenize(const Vocabulary& vocab, const std::string& text) {
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kBos);
  seq.words.push_back(vocab.word(Vocabulary::kBos));
  for (std::string& w : split_words(text)) {
    seq.ids.push_back(vocab.id(w));
    seq.words.push_back(std::move(w));
  }
  seq.ids.push_back(Vocabulary::kEos);
  seq.words.push_back(vocab.word(Vocabulary::kEos));
  return seq;
}

inline std::string join_words(const TokenSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.ids[i] == Vocabulary::kBos || seq.ids[i] == Vocabulary::kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += seq.words[i];
  }
  return out;
}

struct IdentifierToken {
  std::string surface;
  int vocab_id = -1;
  int init_source_id = -1;
};

// Resolves an identifier surface against the vocabulary. Multi-token
// surfaces and out-of-vocabulary words are configuration errors.
inline IdentifierToken make_identifier(const Vocabulary& vocab, const std::string& surface,
                                       std::optional<int> init_source_id = std::nullopt) {
  const auto words = split_words(surface);
  if (words.size() != 1 || words.front() != surface) {
    throw ConfigurationError("identifier '" + surface + "' must be exactly one token");
  }
  if (!vocab.contains(surface)) throw ConfigurationError("identifier '" + surface + "' is not in the vocabulary");
  IdentifierToken tok;
  tok.surface = surface;
  tok.vocab_id = vocab.id(surface);
  if (init_source_id) {
    tok.init_source_id = *init_source_id;
  } else if (vocab.size() > kClipIdentifierInitTokenId) {
    tok.init_source_id = kClipIdentifierInitTokenId;
  } else {
    tok.init_source_id = vocab.id(std::string(Vocabulary::kNeutralNoun));
  }
  return tok;
}

// Copies the source row into the identifier's row of `table`.
inline void init_identifier_embedding(const IdentifierToken& token, Matrix& table) {
  if (token.init_source_id < 0 || token.init_source_id >= table.rows()) {
    throw ConfigurationError("identifier '" + token.surface + "': init source id " +
                             std::to_string(token.init_source_id) + " outside embedding table");
  }
  if (token.vocab_id < 0 || token.vocab_id >= table.rows()) {
    throw ConfigurationError("identifier '" + token.surface + "': vocabulary id outside embedding table");
  }
  table.row(token.vocab_id) = table.row(token.init_source_id).eval();
}

class PromptTemplate {
 public:
  // Infers arity from placeholders: {V}/{class} -> 1, {V1}{class1}{V2}{class2} -> 2.
  explicit PromptTemplate(std::string text) : text_(std::move(text)) {
    const bool single = has("{V}") || has("{class}");
    const bool pair = has("{V1}") || has("{V2}") || has("{class1}") || has("{class2}");
    if (single == pair) throw ArgumentError("prompt template '" + text_ + "' mixes or lacks placeholders");
    arity_ = single ? 1 : 2;
    validate();
  }

  PromptTemplate(std::string text, int arity) : PromptTemplate(std::move(text)) {
    if (arity != arity_) {
      throw ArgumentError("prompt template '" + text_ + "' has arity " + std::to_string(arity_) + ", expected " +
                          std::to_string(arity));
    }
  }

  const std::string& text() const { return text_; }
  int arity() const { return arity_; }

 private:
  bool has(const std::string& p) const { return text_.find(p) != std::string::npos; }

  void validate() const {
    const std::vector<std::string> needed =
        arity_ == 1 ? std::vector<std::string>{"{V}"} : std::vector<std::string>{"{V1}", "{V2}"};
    for (const auto& p : needed) {
      if (!has(p)) throw ArgumentError("prompt template '" + text_ + "' is missing " + p);
    }
  }

  std::string text_;
  int arity_ = 1;
};

inline const PromptTemplate& single_concept_template() {
  static const PromptTemplate t("photo of a {V} {class}");
  return t;
}

inline const PromptTemplate& multi_concept_template() {
  static const PromptTemplate t("photo of a {V1} {class1} and a {V2} {class2}");
  return t;
}

struct Binding {
  IdentifierToken identifier;
  std::string class_name;
};

struct RenderedPrompt {
  std::string text;
  TokenSequence tokens;
  // positions[i]: every index of bindings[i]'s identifier in `tokens`.
  std::vector<std::vector<int>> identifier_positions;
};

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

inline RenderedPrompt render_prompt(const Vocabulary& vocab, const PromptTemplate& tmpl,
                                    const std::vector<Binding>& bindings) {
  if (static_cast<int>(bindings.size()) != tmpl.arity()) {
    throw ArgumentError("render_prompt: template arity " + std::to_string(tmpl.arity()) + " but " +
                        std::to_string(bindings.size()) + " binding(s)");
  }
  std::set<int> distinct;
  for (const Binding& b : bindings) {
    if (!vocab.contains(b.identifier.surface) || vocab.id(b.identifier.surface) != b.identifier.vocab_id) {
      throw ConfigurationError("identifier '" + b.identifier.surface + "' is not in the vocabulary");
    }
    if (!distinct.insert(b.identifier.vocab_id).second) {
      throw ArgumentError("render_prompt: identifier '" + b.identifier.surface + "' bound twice");
    }
  }
  std::string text = tmpl.text();
  if (tmpl.arity() == 1) {
    text = replace_all(text, "{V}", bindings[0].identifier.surface);
    text = replace_all(text, "{class}", bindings[0].class_name);
  } else {
    for (int i = 0; i < 2; ++i) {
      const std::string n = std::to_string(i + 1);
      text = replace_all(text, "{V" + n + "}", bindings[i].identifier.surface);
      text = replace_all(text, "{class" + n + "}", bindings[i].class_name);
    }
  }
  RenderedPrompt out;
  out.text = text;
  out.tokens = tokenize(vocab, text);
  for (const Binding& b : bindings) {
    std::vector<int> pos;
    for (std::size_t i = 0; i < out.tokens.size(); ++i) {
      if (out.tokens.ids[i] == b.identifier.vocab_id) pos.push_back(static_cast<int>(i));
    }
    out.identifier_positions.push_back(std::move(pos));
  }
  return out;
}

// Removes every identifier token, preserving the order of the rest.
inline TokenSequence strip_identifiers(const TokenSequence& tokens, const std::vector<IdentifierToken>& identifiers) {
  TokenSequence out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const bool is_identifier = std::any_of(identifiers.begin(), identifiers.end(),
                                           [&](const IdentifierToken& id) { return id.vocab_id == tokens.ids[i]; });
    if (is_identifier) continue;
    out.ids.push_back(tokens.ids[i]);
    out.words.push_back(tokens.words[i]);
  }
  return out;
}

// Text form: drops identifier words and normalises whitespace.
inline std::string strip_identifiers(const std::string& prompt, const std::vector<std::string>& identifier_surfaces) {
  std::string out;
  std::string word;
  auto flush = [&]() {
    if (word.empty()) return;
    if (std::find(identifier_surfaces.begin(), identifier_surfaces.end(), word) == identifier_surfaces.end()) {
      if (!out.empty()) out.push_back(' ');
      out += word;
    }
    word.clear();
  };
  for (char c : prompt) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      word.push_back(c);
    }
  }
  flush();
  return out;
}

// Evaluation prompt templates. Stand-ins: the original evaluation prompts
// were not published.
inline std::vector<PromptTemplate> default_prompt_bank(int arity) {
  static const char* kSingle[] = {
      "photo of a {V} {class} at a beach with a view of the seashore",
      "a watercolor painting of a {V} {class}",
      "a {V} {class} in the jungle",
      "a {V} {class} in the snow",
      "a {V} {class} on top of a wooden floor",
      "a {V} {class} with a city in the background",
      "a {V} {class} in woods with falling leaves in the background",
      "a {V} {class} under water",
      "a {V} {class} on a cobblestone street",
      "an oil painting of a {V} {class}",
  };
  static const char* kMulti[] = {
      "photo of a {V1} {class1} and a {V2} {class2} at a beach with a view of the seashore",
      "a watercolor painting of a {V1} {class1} and a {V2} {class2}",
      "a {V1} {class1} and a {V2} {class2} in the jungle",
      "a {V1} {class1} and a {V2} {class2} in the snow",
      "a {V1} {class1} and a {V2} {class2} on top of a wooden floor",
      "a {V1} {class1} and a {V2} {class2} with a city in the background",
      "a {V1} {class1} and a {V2} {class2} in woods with falling leaves in the background",
      "a {V1} {class1} and a {V2} {class2} under water",
      "a {V1} {class1} and a {V2} {class2} on a cobblestone street",
      "an oil painting of a {V1} {class1} and a {V2} {class2}",
  };
  if (arity != 1 && arity != 2) throw ArgumentError("prompt bank arity must be 1 or 2");
  std::vector<PromptTemplate> bank;
  for (const char* s : (arity == 1 ? kSingle : kMulti)) bank.emplace_back(s, arity);
  return bank;
}

// One template per line; blank lines and lines starting with '#' are skipped.
inline std::vector<PromptTemplate> load_prompt_bank(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open prompt bank '" + path + "'");
  std::vector<PromptTemplate> bank;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    bank.emplace_back(line);
  }
  if (bank.empty()) throw ValidationError("prompt bank '" + path + "' is empty");
  return bank;
}

}  // namespace textloc
