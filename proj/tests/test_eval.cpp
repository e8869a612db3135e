#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "pengi/eval/metrics.hpp"
#include "pengi/eval/probe.hpp"
#include "pengi/eval/report.hpp"
#include "test_util.hpp"

using namespace pengi;
using namespace pengi::eval;
using pengi::testing::random_tensor;
using pengi::testing::tiny_config;
using pengi::testing::tiny_tokenizer;

TEST(Accuracy, CountsExactMatches) {
  EXPECT_DOUBLE_EQ(accuracy({"a", "b", "c", "d"}, {"a", "x", "c", "y"}), 0.5);
  EXPECT_DOUBLE_EQ(accuracy({"a"}, {"a"}), 1.0);
  EXPECT_THROW(accuracy({"a"}, {"a", "b"}), ContractError);
  EXPECT_THROW(accuracy({}, {}), DataError);
}

TEST(Accuracy, PermutationInvariant) {
  std::vector<std::string> p{"a", "b", "c", "d", "e"}, g{"a", "x", "c", "y", "e"};
  const double base = accuracy(p, g);
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    rng.shuffle(perm);
    std::vector<std::string> pp, gg;
    for (auto i : perm) {
      pp.push_back(p[i]);
      gg.push_back(g[i]);
    }
    EXPECT_DOUBLE_EQ(accuracy(pp, gg), base);
  }
}

TEST(MeanAveragePrecision, PerfectRankingIsOne) {
  const std::vector<std::vector<double>> s{{0.9, 0.1, 0.0}, {0.2, 0.8, 0.1}, {0.1, 0.3, 0.7}, {0.6, 0.5, 0.2}};
  const std::vector<std::set<std::size_t>> g{{0}, {1}, {2}, {0, 1}};
  EXPECT_DOUBLE_EQ(map_score(s, g), 1.0);
}

TEST(MeanAveragePrecision, HandComputedExample) {
  // ranking by score: e1(+) e0(-) e2(+) -> AP = (1/1 + 2/3) / 2
  const std::vector<double> sc{0.5, 0.9, 0.1};
  EXPECT_NEAR(average_precision(sc, {false, true, true}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  // Class 1 without positives is skipped.
  const std::vector<std::vector<double>> s{{0.5, 0.1}, {0.9, 0.2}, {0.1, 0.3}};
  const std::vector<std::set<std::size_t>> g{{}, {0}, {0}};
  EXPECT_NEAR(map_score(s, g), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_THROW(map_score(s, {{}, {}, {}}), DataError);
}

TEST(MeanAveragePrecision, InRangeAndOrderFree) {
  Rng rng(7);
  std::vector<std::vector<double>> s;
  std::vector<std::set<std::size_t>> g;
  for (int i = 0; i < 30; ++i) {
    s.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
    g.push_back({rng.below(4)});
  }
  const double base = map_score(s, g);
  EXPECT_GE(base, 0.0);
  EXPECT_LE(base, 1.0);
  std::vector<std::size_t> perm(30);
  for (std::size_t i = 0; i < 30; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<std::vector<double>> s2;
  std::vector<std::set<std::size_t>> g2;
  for (auto i : perm) {
    s2.push_back(s[i]);
    g2.push_back(g[i]);
  }
  // Scores are continuous, so there are no ties to reorder.
  EXPECT_NEAR(map_score(s2, g2), base, 1e-15);
}

TEST(Recall, AtKCountsHitsInTopK) {
  const std::vector<std::vector<int>> ranked{{3, 1, 2}, {2, 3, 1}, {1, 2, 3}};
  const std::vector<std::set<int>> rel{{1}, {1}, {1}};
  EXPECT_NEAR(recall_at_k(ranked, rel, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(recall_at_k(ranked, rel, 2), 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(recall_at_k(ranked, rel, 3), 1.0);
  EXPECT_THROW(recall_at_k(ranked, rel, 0), ContractError);
}

TEST(Bleu, IdenticalIsOneDisjointIsZero) {
  const std::string s = "a loud siren wails in the distance";
  for (std::size_t n = 1; n <= 4; ++n) {
    EXPECT_DOUBLE_EQ(bleu_n(s, {s}, n), 1.0);
    EXPECT_DOUBLE_EQ(bleu_n(s, {"birds sing at dawn"}, n), 0.0);
  }
  EXPECT_DOUBLE_EQ(corpus_bleu({s, "rain falls"}, {{s}, {"rain falls"}}, 4), 1.0);
}

TEST(Bleu, ClippedUnigramPrecision) {
  // 3 hypothesis "the", at most 1 in the reference; hyp longer than ref so no brevity penalty.
  EXPECT_DOUBLE_EQ(bleu_n("the the the", {"the cat"}, 1), 1.0 / 3.0);
  const auto p = modified_precision(words("the the the"), {words("the cat")}, 1);
  EXPECT_EQ(p.clipped, 1u);
  EXPECT_EQ(p.total, 3u);
}

TEST(Bleu, BrevityPenaltyAndMultipleReferences) {
  // 2-word hypothesis, closest reference 4 words: BP = exp(1 - 4/2).
  EXPECT_NEAR(bleu_n("siren wails", {"a siren wails loudly"}, 1), std::exp(-1.0), 1e-15);
  // A second reference of matching length removes the penalty.
  EXPECT_NEAR(bleu_n("siren wails", {"a siren wails loudly", "siren howls"}, 1), 1.0, 1e-15);
  EXPECT_EQ(closest_ref_length(3, {words("a b"), words("a b c d")}), 2u);
}

TEST(Bleu, RangeAndCorpusPermutationInvariance) {
  const std::vector<std::string> h{"a siren wails", "rain falls briefly", "an engine hums", "the the"};
  const std::vector<std::vector<std::string>> r{{"a loud siren wails"}, {"quiet rain falls"}, {"an engine hums"}, {"the cat"}};
  const double b = corpus_bleu(h, r, 2);
  EXPECT_GT(b, 0.0);
  EXPECT_LT(b, 1.0);
  const std::vector<std::string> h2{h[2], h[0], h[3], h[1]};
  const std::vector<std::vector<std::string>> r2{r[2], r[0], r[3], r[1]};
  EXPECT_DOUBLE_EQ(corpus_bleu(h2, r2, 2), b);
  EXPECT_THROW(corpus_bleu(h, r, 5), ContractError);
  EXPECT_THROW(corpus_bleu(h, {r[0]}, 2), ContractError);
}

TEST(Bleu, SmoothedSentenceScoreIsPositiveWithoutHigherOrderMatches) {
  const double s = sentence_bleu("siren rain", {"rain siren"}, 2);
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, 1.0);
  EXPECT_DOUBLE_EQ(bleu_n("siren rain", {"rain siren"}, 2), 0.0);
}

TEST(Report, JsonAndCsvRoundTrip) {
  EvalReport r;
  r.task = "sound-event";
  r.metric = "accuracy";
  r.fingerprint = hex_digest("config");
  r.seed = 12;
  for (int i = 0; i < 4; ++i) r.records.push_back({{"id", i}, {"correct", i != 2}});
  r.value = accuracy_from_records(r);
  EXPECT_DOUBLE_EQ(r.value, 0.75);
  const auto back = EvalReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.to_json(), r.to_json());
  EXPECT_EQ(r.fingerprint.size(), 16u);
  const EvalReport rs[1] = {r};
  EXPECT_EQ(reports_csv(rs), "task,metric,value,fingerprint,seed\nsound-event,accuracy,0.75," + r.fingerprint + ",12\n");
  EXPECT_THROW(EvalReport::from_json(nlohmann::json{{"task", "x"}}), DataError);
}

// ---- probe --------------------------------------------------------------------

namespace {

struct ProbeData {
  std::vector<Tensor<double>> train, test;
  std::vector<std::size_t> ytrain, ytest;
};

/// Class c has a bright band at mel bins {c, c+1}.
ProbeData probe_data(std::size_t per_class, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  ProbeData d;
  for (std::size_t i = 0; i < per_class * classes * 2; ++i) {
    const std::size_t c = i % classes;
    Tensor<double> x = random_tensor(8, 6, rng, 0.3);
    for (std::size_t t = 0; t < 8; ++t) {
      x.at(t, c) += 2.0;
      x.at(t, c + 1) += 2.0;
    }
    ((i / classes) % 2 == 0 ? d.train : d.test).push_back(x);
    ((i / classes) % 2 == 0 ? d.ytrain : d.ytest).push_back(c);
  }
  return d;
}

std::vector<const Tensor<double>*> ptrs(const std::vector<Tensor<double>>& v) {
  std::vector<const Tensor<double>*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

}  // namespace

TEST(Probe, LearnsSeparableClassesAndLeavesEncoderUntouched) {
  model::PengiModel<double> m(tiny_config(), tiny_tokenizer(), 5);
  const auto d = probe_data(12, 4, 1);
  const auto tr = ptrs(d.train), te = ptrs(d.test);
  for (std::size_t layers : {1, 3}) {
    ProbeOptions o;
    o.layers = layers;
    o.steps = 200;
    const auto r = linear_probe<double>(m, tr, d.ytrain, te, d.ytest, 4, o);
    EXPECT_GE(r.accuracy, 0.9) << layers << " layers";
    EXPECT_EQ(r.encoder_hash_before, r.encoder_hash_after);
    EXPECT_EQ(r.predictions.size(), d.test.size());
  }
}

TEST(Probe, ShuffledLabelsFallToChance) {
  // Each run keeps only 4 clusters, so one run can land well above chance;
  // the mean over seeds cannot.
  model::PengiModel<double> m(tiny_config(), tiny_tokenizer(), 5);
  const auto d = probe_data(30, 4, 2);
  const auto tr = ptrs(d.train), te = ptrs(d.test);
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ProbeOptions o;
    o.steps = 150;
    o.seed = seed;
    o.shuffle_labels = true;
    mean += linear_probe<double>(m, tr, d.ytrain, te, d.ytest, 4, o).accuracy / 10.0;
  }
  EXPECT_LT(mean, 0.45);
}

TEST(Probe, RejectsDegenerateInputs) {
  model::PengiModel<double> m(tiny_config(), tiny_tokenizer(), 5);
  const auto d = probe_data(3, 2, 3);
  const auto tr = ptrs(d.train), te = ptrs(d.test);
  const std::vector<std::size_t> one(d.ytrain.size(), 0);
  EXPECT_THROW(linear_probe<double>(m, tr, one, te, d.ytest, 2, {}), DataError);
  ProbeOptions bad;
  bad.layers = 4;
  EXPECT_THROW(linear_probe<double>(m, tr, d.ytrain, te, d.ytest, 2, bad), ConfigError);
  EXPECT_THROW(linear_probe<double>(m, tr, std::vector<std::size_t>{0}, te, d.ytest, 2, {}), ContractError);
}
