#include <gtest/gtest.h>

#include <random>

#include "support.hpp"
#include "textloc/conditioning.hpp"
#include "textloc/toy_denoiser.hpp"

using namespace textloc;

namespace {

const Vocabulary& vocab() { return Vocabulary::toy(); }

Binding bind(const std::string& id, const std::string& cls) { return Binding{make_identifier(vocab(), id), cls}; }

std::string words(const TokenSequence& t) { return join_words(t); }

}  // namespace

TEST(Vocabulary, ReservedIdentifierSlots) {
  for (auto s : Vocabulary::kIdentifierSlots) {
    EXPECT_TRUE(vocab().contains(std::string(s)));
    EXPECT_TRUE(vocab().is_identifier_slot(std::string(s)));
  }
  EXPECT_TRUE(vocab().contains(std::string(Vocabulary::kNeutralNoun)));
  EXPECT_EQ(vocab().id("definitelynotaword"), Vocabulary::kUnk);
}

TEST(Tokenize, LowercasesAndSplits) {
  const TokenSequence t = tokenize(vocab(), "Photo of a SKS  square!");
  EXPECT_EQ(words(t), "photo of a sks square");
  // framed by <bos> and <eos>
  EXPECT_EQ(t.ids.size(), 7u);
  EXPECT_EQ(t.ids.front(), Vocabulary::kBos);
  EXPECT_EQ(t.ids.back(), Vocabulary::kEos);
}

TEST(RenderPrompt, SingleConcept) {
  const auto r = render_prompt(vocab(), single_concept_template(), {bind("sks", "helmet")});
  EXPECT_EQ(r.text, "photo of a sks helmet");
  ASSERT_EQ(r.identifier_positions.size(), 1u);
  ASSERT_EQ(r.identifier_positions[0].size(), 1u);
  EXPECT_EQ(r.identifier_positions[0][0], 4);  // after <bos> photo of a
  EXPECT_EQ(r.tokens.words[4], "sks");
}

TEST(RenderPrompt, TwoConcepts) {
  const auto r = render_prompt(vocab(), multi_concept_template(), {bind("sks", "pot"), bind("ktn", "penbag")});
  EXPECT_EQ(r.text, "photo of a sks pot and a ktn penbag");
  ASSERT_EQ(r.identifier_positions.size(), 2u);
  EXPECT_EQ(r.tokens.words[r.identifier_positions[0][0]], "sks");
  EXPECT_EQ(r.tokens.words[r.identifier_positions[1][0]], "ktn");
}

TEST(RenderPrompt, ArityMismatch) {
  EXPECT_THROW(render_prompt(vocab(), multi_concept_template(), {bind("sks", "pot")}), ArgumentError);
  EXPECT_THROW(render_prompt(vocab(), single_concept_template(), {bind("sks", "pot"), bind("ktn", "cup")}), ArgumentError);
}

TEST(RenderPrompt, DuplicateIdentifierRejected) {
  EXPECT_THROW(render_prompt(vocab(), multi_concept_template(), {bind("sks", "pot"), bind("sks", "cup")}), ArgumentError);
}

TEST(Identifier, MustBeOneKnownToken) {
  EXPECT_THROW(make_identifier(vocab(), "zzqx"), ConfigurationError);
  EXPECT_THROW(make_identifier(vocab(), "sks ktn"), ConfigurationError);
  EXPECT_THROW(make_identifier(vocab(), "sks-ktn"), ConfigurationError);
  const IdentifierToken id = make_identifier(vocab(), "sks");
  EXPECT_EQ(id.vocab_id, vocab().id("sks"));
}

TEST(Identifier, InitialisationSource) {
  // the toy vocabulary is far smaller than the CLIP tokenizer, so the
  // neutral noun stands in for token 48136
  EXPECT_EQ(kClipIdentifierInitTokenId, 48136);
  EXPECT_EQ(make_identifier(vocab(), "sks").init_source_id, vocab().id(std::string(Vocabulary::kNeutralNoun)));
  EXPECT_EQ(make_identifier(vocab(), "sks", 7).init_source_id, 7);

  std::vector<std::string> big(kClipIdentifierInitTokenId + 10);
  for (std::size_t i = 0; i < big.size(); ++i) big[i] = "w" + std::to_string(i);
  big[5] = "sks";
  const Vocabulary large(big);
  EXPECT_EQ(make_identifier(large, "sks").init_source_id, kClipIdentifierInitTokenId);
}

TEST(Identifier, EmbeddingInitCopiesSourceRow) {
  std::mt19937_64 rng(1);
  Matrix table = oracle::gaussian(vocab().size(), 6, rng);
  const IdentifierToken id = make_identifier(vocab(), "sks");
  init_identifier_embedding(id, table);
  EXPECT_EQ(table.row(id.vocab_id), table.row(id.init_source_id));
  IdentifierToken bad = id;
  bad.init_source_id = vocab().size() + 3;
  EXPECT_THROW(init_identifier_embedding(bad, table), ConfigurationError);
  bad.init_source_id = -1;
  EXPECT_THROW(init_identifier_embedding(bad, table), ConfigurationError);
}

TEST(Identifier, SharedSourceDivergesAfterTraining) {
  ToyDenoiserConfig cfg;
  cfg.latent = LatentSpec{16, 16, 3, 1};
  cfg.channels = 8;
  cfg.text_dim = 12;
  ToyDenoiser model(cfg);
  Matrix& table = model.parameters().at(model.embedding_table()).value;
  const IdentifierToken a = make_identifier(vocab(), "sks"), b = make_identifier(vocab(), "ktn");
  init_identifier_embedding(a, table);
  init_identifier_embedding(b, table);
  ASSERT_EQ(table.row(a.vocab_id), table.row(b.vocab_id));

  select_trainable(model.parameters(), ParameterSetSelector{ParameterSet::KV, true});
  AdamW opt(AdamW::Options{1e-2, 0.9, 0.999, 1e-8, 0.0});
  std::mt19937_64 rng(2);
  const TokenSequence pa = tokenize(vocab(), "a sks square"), pb = tokenize(vocab(), "a ktn circle");
  const Matrix za = oracle::gaussian(256, 3, rng), zb = oracle::gaussian(256, 3, rng, 1.0);
  for (int step = 0; step < 2; ++step) {
    ad::Tape tape;
    const auto p = model.parameters().bind(tape);
    const Matrix ea = oracle::gaussian(256, 3, rng), eb = oracle::gaussian(256, 3, rng);
    const auto la = ad::mse(model.predict_noise(tape, p, add_noise(model.schedule(), za, 20, ea), 20, pa), ea);
    const auto lb = ad::mse(model.predict_noise(tape, p, add_noise(model.schedule(), zb, 20, eb), 20, pb), eb);
    tape.backward(ad::mean_of({la, lb}));
    std::unordered_map<std::string, Matrix> grads;
    for (const auto& g : model.parameters().groups())
      if (g.trainable) grads[g.layer_id] = tape.grad(p.at(g.layer_id));
    opt.step(model.parameters(), grads);
  }
  EXPECT_NE(table.row(a.vocab_id), table.row(b.vocab_id));
}

TEST(StripIdentifiers, TextForm) {
  EXPECT_EQ(strip_identifiers("photo of a sks dog", {"sks"}), "photo of a dog");
  EXPECT_EQ(strip_identifiers("photo of a dog", {"sks"}), "photo of a dog");
  EXPECT_EQ(strip_identifiers("sks pot and ktn penbag", {"sks", "ktn"}), "pot and penbag");
}

TEST(StripIdentifiers, TokenForm) {
  const IdentifierToken s = make_identifier(vocab(), "sks"), k = make_identifier(vocab(), "ktn");
  EXPECT_EQ(words(strip_identifiers(tokenize(vocab(), "photo of a sks dog"), {s})), "photo of a dog");
  const TokenSequence plain = tokenize(vocab(), "photo of a dog");
  EXPECT_EQ(strip_identifiers(plain, {s, k}), plain);
  EXPECT_EQ(words(strip_identifiers(tokenize(vocab(), "sks pot and ktn penbag"), {s, k})), "pot and penbag");
}

TEST(ConditioningProperty, StripIsIdempotent) {
  const IdentifierToken s = make_identifier(vocab(), "sks"), k = make_identifier(vocab(), "ktn");
  for (const auto& tmpl : default_prompt_bank(2)) {
    const auto r = render_prompt(vocab(), tmpl, {Binding{s, "square"}, Binding{k, "circle"}});
    const TokenSequence once = strip_identifiers(r.tokens, {s, k});
    EXPECT_EQ(strip_identifiers(once, {s, k}), once);
    const std::string t1 = strip_identifiers(r.text, {"sks", "ktn"});
    EXPECT_EQ(strip_identifiers(t1, {"sks", "ktn"}), t1);
    EXPECT_EQ(t1.find("sks"), std::string::npos);
  }
}

TEST(ConditioningProperty, PositionsIndexExactlyTheIdentifiers) {
  const IdentifierToken s = make_identifier(vocab(), "sks"), k = make_identifier(vocab(), "ktn");
  for (int arity : {1, 2}) {
    for (const auto& tmpl : default_prompt_bank(arity)) {
      std::vector<Binding> b{Binding{s, "square"}};
      if (arity == 2) b.push_back(Binding{k, "circle"});
      const auto r = render_prompt(vocab(), tmpl, b);
      for (std::size_t i = 0; i < b.size(); ++i) {
        ASSERT_FALSE(r.identifier_positions[i].empty()) << tmpl.text();
        for (std::size_t pos = 0; pos < r.tokens.size(); ++pos) {
          const bool listed = std::count(r.identifier_positions[i].begin(), r.identifier_positions[i].end(),
                                         static_cast<int>(pos)) > 0;
          EXPECT_EQ(listed, r.tokens.ids[pos] == b[i].identifier.vocab_id);
        }
      }
      // deterministic
      EXPECT_EQ(render_prompt(vocab(), tmpl, b).tokens, r.tokens);
    }
  }
}

TEST(PromptTemplate, ArityInference) {
  EXPECT_EQ(PromptTemplate("a {V} {class}").arity(), 1);
  EXPECT_EQ(PromptTemplate("{V1} {class1} with {V2} {class2}").arity(), 2);
  EXPECT_THROW(PromptTemplate("no placeholders"), ArgumentError);
  EXPECT_THROW(PromptTemplate("{V} and {V2}"), ArgumentError);
  EXPECT_THROW(PromptTemplate("{V1} {class1}"), ArgumentError);
  EXPECT_THROW(PromptTemplate("a {V} {class}", 2), ArgumentError);
}

TEST(PromptBank, TenTemplatesEach) {
  EXPECT_EQ(default_prompt_bank(1).size(), 10u);
  EXPECT_EQ(default_prompt_bank(2).size(), 10u);
  EXPECT_THROW(default_prompt_bank(3), ArgumentError);
  for (const auto& t : default_prompt_bank(1)) EXPECT_LE(tokenize(vocab(), t.text()).size(), 24u);
}

TEST(PromptBank, ShippedFilesMatchDefaults) {
  for (auto [file, arity] : {std::pair{"prompts_single.txt", 1}, std::pair{"prompts_multi.txt", 2}}) {
    const auto loaded = load_prompt_bank(std::string(TEXTLOC_DATA_DIR) + "/" + file);
    const auto builtin = default_prompt_bank(arity);
    ASSERT_EQ(loaded.size(), builtin.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) EXPECT_EQ(loaded[i].text(), builtin[i].text());
  }
}

TEST(PromptBank, FileErrors) {
  testing_support::TempDir dir("bank");
  EXPECT_THROW(load_prompt_bank((dir / "missing.txt").string()), ValidationError);
  std::ofstream(dir / "empty.txt") << "# only a comment\n\n";
  EXPECT_THROW(load_prompt_bank((dir / "empty.txt").string()), ValidationError);
  std::ofstream(dir / "bad.txt") << "a photo of nothing\n";
  EXPECT_THROW(load_prompt_bank((dir / "bad.txt").string()), ArgumentError);
}
