#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "pengi/audio/synth.hpp"
#include "pengi/core/optim.hpp"
#include "pengi/model/lm_pretrain.hpp"
#include "pengi/model/pengi.hpp"
#include "pengi/train/dataset.hpp"
#include "pengi/train/loss.hpp"
#include "test_util.hpp"

using namespace pengi;
using namespace pengi::model;
using pengi::testing::random_tensor;
using pengi::testing::tiny_config;
using pengi::testing::tiny_tokenizer;

namespace {

using Model = PengiModel<double>;

Tensor<double> mel(Rng& rng, std::size_t frames = 7) { return random_tensor(frames, 6, rng); }

bool rows_equal(const Tensor<double>& a, const Tensor<double>& b, std::size_t r) {
  for (std::size_t j = 0; j < a.cols(); ++j)
    if (a.at(r, j) != b.at(r, j)) return false;
  return true;
}

std::string component_bytes(Model& m, const std::string& prefix) { return m.component_checkpoint(prefix).serialize(); }

double train_steps(Model& m, int steps, const Tensor<double>& x, const std::string& prompt, const std::string& caption) {
  Adam<double> opt(m.trainable().tensors(), AdamOptions{.lr = 1e-2, .warmup_steps = 0});
  const auto cap = train::encode_caption(m.tokenizer, caption, m.config.max_caption_tokens);
  double loss = 0.0;
  for (int s = 0; s < steps; ++s) {
    Tape<double> tp;
    const Tensor<double>* mels[1] = {&x};
    const std::string prompts[1] = {prompt};
    const std::vector<TokenId> caps[1] = {cap};
    Var<double> l = train::pengi_loss(m, tp, mels, prompts, caps);
    loss = l.value().item();
    tp.backward(l);
    opt.step();
  }
  return loss;
}

}  // namespace

TEST(Prefix, LengthIsTwiceK) {
  auto cfg = tiny_config();
  cfg.prefix_k = 40;
  cfg.lm_context = 96;
  Model m(cfg, tiny_tokenizer(), 1);
  Rng rng(2);
  auto p = assemble_prefix(m, mel(rng), "this is a sound of");
  EXPECT_EQ(p.length(), 80u);
  EXPECT_EQ(p.rows.cols(), cfg.d_lm);
  EXPECT_EQ(p.k, 40u);
}

TEST(Prefix, KOneRowsComeFromSeparateBranches) {
  auto cfg = tiny_config();
  cfg.prefix_k = 1;
  Model m(cfg, tiny_tokenizer(), 3);
  Rng rng(4);
  auto x = mel(rng);
  auto base = assemble_prefix(m, x, "generate audio caption");
  ASSERT_EQ(base.length(), 2u);

  Model no_text = m;
  no_text.map_text.visit("", [](const std::string&, Tensor<double>& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
  auto p = assemble_prefix(no_text, x, "generate audio caption");
  EXPECT_TRUE(rows_equal(p.rows, base.rows, 0));
  for (std::size_t j = 0; j < cfg.d_lm; ++j) EXPECT_EQ(p.rows.at(1, j), 0.0);

  Model no_audio = m;
  no_audio.map_audio.visit("", [](const std::string&, Tensor<double>& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
  auto q = assemble_prefix(no_audio, x, "generate audio caption");
  EXPECT_TRUE(rows_equal(q.rows, base.rows, 1));
  for (std::size_t j = 0; j < cfg.d_lm; ++j) EXPECT_EQ(q.rows.at(0, j), 0.0);
}

TEST(Prefix, BranchIsolation) {
  auto cfg = tiny_config();
  cfg.prefix_k = 3;
  Model m(cfg, tiny_tokenizer(), 5);
  Rng rng(6);
  auto x = mel(rng), y = mel(rng);
  auto a = assemble_prefix(m, x, "this is a sound of");
  auto b = assemble_prefix(m, x, "question: is it loud?");
  auto c = assemble_prefix(m, y, "this is a sound of");
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_TRUE(rows_equal(a.rows, b.rows, r));
    EXPECT_FALSE(rows_equal(a.rows, c.rows, r));
  }
  for (std::size_t r = 3; r < 6; ++r) {
    EXPECT_FALSE(rows_equal(a.rows, b.rows, r));
    EXPECT_TRUE(rows_equal(a.rows, c.rows, r));
  }
}

TEST(Prefix, DeterministicAndEmptyPromptIsValid) {
  Model m(tiny_config(), tiny_tokenizer(), 7);
  Rng rng(8);
  auto x = mel(rng);
  EXPECT_EQ(assemble_prefix(m, x, "generate audio caption").rows, assemble_prefix(m, x, "generate audio caption").rows);
  EXPECT_EQ(assemble_prefix(m, x, "").length(), 2 * m.k());
  EXPECT_THROW(assemble_prefix(m, x, "caf\xc3\xa9"), TokenizerError);
  EXPECT_THROW(assemble_prefix(m, x, "a a a a a a a a a a a"), LengthError);
}

TEST(Prefix, SecondTextAppendsLmEmbeddings) {
  Model m(tiny_config(), tiny_tokenizer(), 9);
  Rng rng(10);
  auto x = mel(rng);
  auto base = assemble_prefix(m, x, "question: is it loud?");
  auto ext = assemble_prefix_with_context(m, x, "question: is it loud?", "a siren");
  ASSERT_EQ(ext.length(), base.length() + 2);
  for (std::size_t r = 0; r < base.length(); ++r) EXPECT_TRUE(rows_equal(ext.rows, base.rows, r));
  const auto ids = m.tokenizer.encode("a siren");
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < m.config.d_lm; ++j)
      EXPECT_EQ(ext.rows.at(base.length() + i, j), m.lm.tokens.at(ids[i], j));
  EXPECT_EQ(assemble_prefix_with_context(m, x, "question: is it loud?", "").rows, base.rows);
}

TEST(Mapper, OutputsExactlyKRowsPerInput) {
  auto cfg = tiny_config();
  Rng rng(11);
  for (std::size_t k : {1u, 2u, 5u}) {
    cfg.prefix_k = k;
    MappingNetwork<double> m(cfg.d_embed, cfg, rng);
    for (std::size_t batch : {1u, 3u}) {
      Tape<double> tp;
      auto out = m(tp.constant(random_tensor(batch, cfg.d_embed, rng)));
      EXPECT_EQ(out.rows(), batch * k);
      EXPECT_EQ(out.cols(), cfg.d_lm);
    }
  }
}

TEST(Encoders, OneVectorPerInput) {
  auto cfg = tiny_config();
  Model m(cfg, tiny_tokenizer(), 12);
  Rng rng(13);
  auto a = mel(rng, 3), b = mel(rng, 11);
  Tape<double> tp;
  const Tensor<double>* mels[2] = {&a, &b};
  EXPECT_EQ(m.audio(tp, mels).value().shape(), (Shape{2, cfg.d_embed}));
  std::vector<std::vector<TokenId>> prompts{m.tokenizer.encode("this is a sound of"), {}};
  EXPECT_EQ(m.text(tp, prompts).value().shape(), (Shape{2, cfg.d_embed}));
  auto wrong = random_tensor(4, 5, rng);
  const Tensor<double>* bad[1] = {&wrong};
  EXPECT_THROW(m.audio(tp, bad), DimensionError);
}

TEST(LmLogits, CausalUnderPerturbation) {
  Model m(tiny_config(), tiny_tokenizer(), 14);
  Rng rng(15);
  auto prefix = random_tensor(4, m.config.d_lm, rng);
  std::vector<TokenId> toks{5, 6, 7, 8, 9, 10};
  Tape<double> tp;
  auto base = lm_logits(tp, m.lm, prefix, toks).value();
  ASSERT_EQ(base.rows(), 10u);
  for (std::size_t j = 0; j < toks.size(); ++j) {
    auto t2 = toks;
    t2[j] = 11;
    Tape<double> tp2;
    auto out = lm_logits(tp2, m.lm, prefix, t2).value();
    const std::size_t pos = prefix.rows() + j;
    for (std::size_t r = 0; r < pos; ++r) EXPECT_TRUE(rows_equal(out, base, r)) << "j=" << j << " r=" << r;
    EXPECT_FALSE(rows_equal(out, base, pos));
  }
  // Prefix rows are also causal: editing row 2 leaves rows 0..1 untouched.
  auto p2 = prefix;
  p2.at(2, 0) += 1.0;
  Tape<double> tp3;
  auto out = lm_logits(tp3, m.lm, p2, toks).value();
  EXPECT_TRUE(rows_equal(out, base, 0));
  EXPECT_TRUE(rows_equal(out, base, 1));
  EXPECT_FALSE(rows_equal(out, base, 2));
}

TEST(LmLogits, EmptySuffixAndContextOverflow) {
  Model m(tiny_config(), tiny_tokenizer(), 16);
  Rng rng(17);
  auto prefix = random_tensor(4, m.config.d_lm, rng);
  Tape<double> tp;
  EXPECT_EQ(lm_logits(tp, m.lm, prefix, {}).value().shape(), (Shape{4, m.tokenizer.size()}));
  std::vector<TokenId> many(m.config.lm_context - 3, 5);
  EXPECT_THROW(lm_logits(tp, m.lm, prefix, many), LengthError);
}

TEST(LmLogits, WeightTiedOutputMatchesDirectProduct) {
  Model m(tiny_config(), tiny_tokenizer(), 18);
  Rng rng(19);
  auto prefix = random_tensor(4, m.config.d_lm, rng);
  std::vector<TokenId> toks{5, 9, 2};
  Tape<double> tp;
  auto logits = lm_logits(tp, m.lm, prefix, toks).value();
  Tape<double> tp2;
  auto x = concat_rows({tp2.constant(prefix), m.lm.embed(tp2, toks)});
  const std::size_t seg[1] = {7};
  auto h = m.lm.hidden(x, seg).value();
  const auto& e = m.lm.tokens;
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t v = 0; v < e.rows(); ++v) {
      double d = 0.0;
      for (std::size_t j = 0; j < h.cols(); ++j) d += h.at(r, j) * e.at(v, j);
      EXPECT_NEAR(logits.at(r, v), d, 1e-12);
    }
}

TEST(Tokenizer, RoundTripOverCorpusAlphabet) {
  auto tok = tiny_tokenizer();
  Rng rng(20);
  std::vector<std::string> words;
  for (std::size_t i = Tokenizer::kNumSpecial; i < tok.size(); ++i) words.push_back(tok.token(static_cast<TokenId>(i)));
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    const auto n = 1 + rng.below(8);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& w = words[rng.below(words.size())];
      const bool punct = w.size() == 1 && std::string(",.?!:;").find(w[0]) != std::string::npos;
      if (!s.empty() && !punct) s += ' ';
      s += w;
    }
    EXPECT_EQ(tok.decode(tok.encode(s)), s);
  }
}

TEST(Tokenizer, SpecialsAndErrors) {
  auto tok = tiny_tokenizer();
  std::set<TokenId> specials{Tokenizer::kPad, Tokenizer::kBos, Tokenizer::kEos, Tokenizer::kUnk};
  EXPECT_EQ(specials.size(), 4u);
  for (TokenId id : tok.encode("a loud siren wails")) EXPECT_FALSE(Tokenizer::is_special(id));
  EXPECT_EQ(tok.encode("zebra"), std::vector<TokenId>{Tokenizer::kUnk});
  EXPECT_THROW(tok.encode("tab\there"), TokenizerError);
  auto back = Tokenizer::deserialize(tok.serialize());
  EXPECT_EQ(back.serialize(), tok.serialize());
  EXPECT_THROW(Tokenizer::deserialize("x\ny"), DataError);
  EXPECT_EQ(tok.decode(std::vector<TokenId>{Tokenizer::kBos, *tok.find("siren"), Tokenizer::kEos, *tok.find("rain")}), "siren");
}

TEST(PretrainLm, UntrainedLossIsLogVocab) {
  auto cfg = tiny_config();
  auto tok = tiny_tokenizer();
  Rng init(21);
  CausalLM<double> lm(cfg, tok.size(), init);
  Rng rng(22);
  std::vector<LmSequence> seqs;
  for (int i = 0; i < 32; ++i) {
    LmSequence s;
    for (int j = 0; j < 10; ++j) s.tokens.push_back(static_cast<TokenId>(rng.below(tok.size())));
    s.context = 3;
    seqs.push_back(s);
  }
  const double ln_v = std::log(static_cast<double>(tok.size()));
  EXPECT_NEAR(lm_mean_nll(lm, seqs), ln_v, 0.02 * ln_v);
}

TEST(PretrainLm, BeatsUnigramBaselineAndFreezes) {
  auto specs = audio::default_specs();
  auto train_lines = audio::lm_corpus(specs, 400, 1);
  auto held = audio::lm_corpus(specs, 100, 2);
  auto tok = Tokenizer::build(lm_line_texts(train_lines));
  auto cfg = tiny_config();
  cfg.d_lm = 32;
  Rng init(23);
  CausalLM<double> lm(cfg, tok.size(), init);
  LmPretrainOptions o;
  o.steps = 150;
  o.batch = 16;
  auto rep = pretrain_lm(lm, tok, train_lines, held, o);
  EXPECT_LT(rep.heldout_perplexity(), 0.8 * rep.unigram_perplexity())
      << rep.heldout_perplexity() << " vs unigram " << rep.unigram_perplexity();
  EXPECT_TRUE(lm.frozen);
  lm.visit("", [](const std::string& name, Tensor<double>& t) { EXPECT_FALSE(t.requires_grad()) << name; });
  std::vector<std::string> tiny{"a b"};
  EXPECT_THROW(pretrain_lm(lm, tok, tiny, {}, o), DataError);
  EXPECT_THROW(pretrain_lm(lm, tok, {}, {}, o), DataError);
}

TEST(FreezeContract, FrozenComponentsAreByteIdentical) {
  for (Ablation mode : {Ablation::kFull, Ablation::kFrozenAudio, Ablation::kExpB}) {
    auto cfg = tiny_config();
    cfg.ablation = mode;
    Model m(cfg, tiny_tokenizer(), 24);
    const auto lm0 = component_bytes(m, "lm.");
    const auto text0 = component_bytes(m, "text_encoder.");
    const auto audio0 = component_bytes(m, "audio_encoder.");
    const auto m1_0 = component_bytes(m, "map_audio.");
    auto set = m.trainable();
    EXPECT_FALSE(set.contains_prefix("lm."));
    EXPECT_FALSE(set.contains_prefix("text_encoder."));
    EXPECT_EQ(set.contains_prefix("audio_encoder."), mode != Ablation::kFrozenAudio);
    Rng rng(25);
    train_steps(m, 5, mel(rng), "generate audio caption", "a loud siren wails");
    EXPECT_EQ(component_bytes(m, "lm."), lm0) << to_string(mode);
    EXPECT_EQ(component_bytes(m, "text_encoder."), text0) << to_string(mode);
    EXPECT_NE(component_bytes(m, "map_audio."), m1_0);
    if (mode == Ablation::kFrozenAudio) {
      EXPECT_EQ(component_bytes(m, "audio_encoder."), audio0);
    } else {
      EXPECT_NE(component_bytes(m, "audio_encoder."), audio0);
    }
  }
}

TEST(GradientFlow, AudioPrefixReceivesGradients) {
  Model m(tiny_config(), tiny_tokenizer(), 26);
  Rng rng(27);
  auto a = mel(rng), b = mel(rng);
  Tape<double> tp;
  const Tensor<double>* mels[2] = {&a, &b};
  const std::string prompts[2] = {"generate audio caption", "this is a sound of"};
  const std::vector<TokenId> caps[2] = {train::encode_caption(m.tokenizer, "a quiet engine hums", 12),
                                        train::encode_caption(m.tokenizer, "engine", 12)};
  auto loss = train::pengi_loss(m, tp, mels, prompts, caps);
  tp.backward(loss);
  for (const auto& [name, t] : m.trainable().entries) {
    ASSERT_TRUE(t->has_grad()) << name;
    double norm = 0.0;
    for (double g : t->grad()) norm += g * g;
    EXPECT_GT(norm, 0.0) << name;
  }
  m.lm.visit("", [](const std::string& name, Tensor<double>& t) { EXPECT_FALSE(t.has_grad()) << name; });
  m.text.visit("", [](const std::string& name, Tensor<double>& t) { EXPECT_FALSE(t.has_grad()) << name; });
}

TEST(ExpB, TrainsWithoutTextEncoder) {
  auto cfg = tiny_config();
  cfg.ablation = Ablation::kExpB;
  Model m(cfg, tiny_tokenizer(), 28);
  EXPECT_EQ(m.map_text.in_proj.weight.rows(), cfg.d_lm);
  Rng rng(29);
  auto x = mel(rng);
  const double first = train_steps(m, 1, x, "generate audio caption", "a loud siren wails");
  const double later = train_steps(m, 30, x, "generate audio caption", "a loud siren wails");
  EXPECT_LT(later, first);
  // The text encoder plays no part: scrambling it changes nothing.
  auto before = assemble_prefix(m, x, "this is a sound of").rows;
  m.text.visit("", [](const std::string&, Tensor<double>& t) { std::fill(t.data().begin(), t.data().end(), 0.5); });
  EXPECT_EQ(assemble_prefix(m, x, "this is a sound of").rows, before);
}

TEST(ModelCheckpoint, RoundTripReproducesOutputs) {
  Model m(tiny_config(), tiny_tokenizer(), 30);
  Rng rng(31);
  auto x = mel(rng);
  train_steps(m, 2, x, "generate audio caption", "a loud siren wails");
  auto ck = Checkpoint::parse(m.to_checkpoint().serialize());
  Model fresh(tiny_config(), Tokenizer::deserialize(ck.bytes("meta.vocab")), 99);
  fresh.load(ck);
  EXPECT_EQ(assemble_prefix(fresh, x, "this is a sound of").rows, assemble_prefix(m, x, "this is a sound of").rows);
  EXPECT_EQ(fresh.to_checkpoint().serialize(), m.to_checkpoint().serialize());
  auto other = tiny_config();
  other.d_lm = 32;
  Model wrong(other, m.tokenizer, 1);
  EXPECT_THROW(wrong.load(ck), DataError);
}
