#include <gtest/gtest.h>

#include <sstream>

#include "pengi/cli/commands.hpp"
#include "test_util.hpp"

using namespace pengi;
using namespace pengi::cli;
using pengi::testing::read_file;
using pengi::testing::scratch_dir;

namespace {

int run(std::vector<std::string> args, std::string* err = nullptr) {
  args.insert(args.begin(), "pengi_cli");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream es;
  const int rc = run_cli(static_cast<int>(argv.size()), argv.data(), es);
  if (err) *err = es.str();
  return rc;
}

// Small enough for every phase to finish in seconds.
std::vector<std::string> smoke(const fs::path& work) {
  return {"--work", work.string(),
          "--set", "synth.per_class=3",
          "--set", "synth.heldout_per_class=2",
          "--set", "synth.lm_lines=100",
          "--set", "lm_pretrain.steps=5",
          "--set", "contrastive.steps=3",
          "--set", "training.steps=5",
          "--set", "inference.max_len=6",
          "--set", "probe.steps=5",
          "--set", "probe.shuffle_repeats=1"};
}

std::vector<std::string> with(std::vector<std::string> base, const std::vector<std::string>& more) {
  base.insert(base.end(), more.begin(), more.end());
  return base;
}

}  // namespace

TEST(Cli, SynthDataIsDeterministic) {
  const auto dir = scratch_dir("cli_synth");
  for (const char* sub : {"a", "b"}) {
    ASSERT_EQ(run({"--out", (dir / (std::string(sub) + ".json")).string(), "synth-data", "--classes", "4", "--per-class", "8",
                   "--seed", "7", "--dir", (dir / sub).string()}),
              0);
  }
  EXPECT_EQ(read_file(dir / "a" / "manifest.jsonl"), read_file(dir / "b" / "manifest.jsonl"));
  EXPECT_EQ(read_file(dir / "a" / "lm_corpus.txt"), read_file(dir / "b" / "lm_corpus.txt"));
  const auto ja = nlohmann::json::parse(read_file(dir / "a.json"));
  EXPECT_EQ(ja.at("rows").get<std::size_t>() > 0, true);
  EXPECT_EQ(ja.at("manifest_digest"), nlohmann::json::parse(read_file(dir / "b.json")).at("manifest_digest"));
  EXPECT_TRUE(ja.contains("fingerprint"));
}

TEST(Cli, PhasesChainAndBeamOneEqualsGreedy) {
  const auto work = scratch_dir("cli_phases");
  const auto base = smoke(work);
  ASSERT_EQ(run(with(base, {"--out", (work / "s.json").string(), "synth-data"})), 0);
  ASSERT_EQ(run(with(base, {"--out", (work / "s2.json").string(), "synth-data", "--dir", (work / "data" / "heldout").string(),
                            "--per-class", "2", "--seed", "99"})),
            0);
  ASSERT_EQ(run(with(base, {"--out", (work / "lm.json").string(), "pretrain-lm"})), 0);
  ASSERT_EQ(run(with(base, {"--out", (work / "con.json").string(), "pretrain-contrastive"})), 0);
  ASSERT_EQ(run(with(base, {"--out", (work / "train.json").string(), "train", "--ablation", "frozen-audio"})), 0);
  EXPECT_TRUE(fs::exists(work / "model.ckpt"));
  EXPECT_EQ(nlohmann::json::parse(read_file(work / "train.json")).at("ablation"), "frozen-audio");

  const auto ck = Checkpoint::load(work / "model.ckpt");
  EXPECT_EQ(ck.bytes("meta.kind"), "model");
  EXPECT_EQ(ck.bytes("meta.fingerprint"), nlohmann::json::parse(read_file(work / "train.json")).at("fingerprint"));

  const auto wav = (work / "data" / "heldout" / "wav").string();
  std::string clip;
  for (const auto& e : fs::directory_iterator(wav)) {
    clip = e.path().string();
    break;
  }
  ASSERT_FALSE(clip.empty());
  ASSERT_EQ(run(with(base, {"--out", (work / "beam1.json").string(), "infer", "--wav", clip, "--beam", "1"})), 0);
  ASSERT_EQ(run(with(base, {"--out", (work / "greedy.json").string(), "infer", "--wav", clip, "--greedy"})), 0);
  const auto b = nlohmann::json::parse(read_file(work / "beam1.json"));
  const auto g = nlohmann::json::parse(read_file(work / "greedy.json"));
  EXPECT_EQ(b.at("tokens"), g.at("tokens"));
  EXPECT_EQ(b.at("text"), g.at("text"));

  ASSERT_EQ(run(with(base, {"--out", (work / "ctx.json").string(), "infer", "--wav", clip, "--prompt", "question: is it loud?",
                            "--second-text", "yes"})),
            0);
  ASSERT_EQ(run(with(base, {"--out", (work / "interp.json").string(), "interpret-prefix", "--wav", clip})), 0);
  const auto ip = nlohmann::json::parse(read_file(work / "interp.json")).at("tokens");
  EXPECT_EQ(ip.at("audio_prefix").size(), ip.at("text_prefix").size());

  for (const char* method : {"text-match", "loglik"}) {
    const auto out = work / (std::string("closed_") + method + ".json");
    ASSERT_EQ(run(with(base, {"--out", out.string(), "eval-closed", "--method", method})), 0);
    const auto r = nlohmann::json::parse(read_file(out));
    EXPECT_EQ(r.at("metric"), "accuracy");
    EXPECT_GE(r.at("value").get<double>(), 0.0);
  }
  ASSERT_EQ(run(with(base, {"--out", (work / "ret.json").string(), "eval-retrieval"})), 0);
  const auto ret = nlohmann::json::parse(read_file(work / "ret.json"));
  const auto& rec = ret.at("extra").at("recall");
  EXPECT_LE(rec.at("R@1").get<double>(), rec.at("R@5").get<double>());
  EXPECT_LE(rec.at("R@5").get<double>(), rec.at("R@10").get<double>());
  ASSERT_EQ(run(with(base, {"--out", (work / "probe.json").string(), "probe"})), 0);
  EXPECT_EQ(nlohmann::json::parse(read_file(work / "probe.json")).size(), 3u);
}

TEST(Cli, ExitCodes) {
  const auto work = scratch_dir("cli_errors");
  std::string err;
  EXPECT_EQ(run({"--set", "training.bogus=1", "grad-check"}, &err), 2);
  EXPECT_NE(err.find("bogus"), std::string::npos);
  EXPECT_EQ(run({"--set", "training.steps=\"many\"", "grad-check"}), 2);
  EXPECT_EQ(run({"--config", (work / "missing.json").string(), "grad-check"}), 2);
  EXPECT_EQ(run({"no-such-command"}), 2);
  EXPECT_EQ(run({"train", "--no-such-flag"}), 2);
  EXPECT_EQ(run({"train", "--ablation", "half"}), 2);
  EXPECT_EQ(run({"eval-closed", "--method", "vibes"}), 2);
  EXPECT_EQ(run({"--work", work.string(), "train"}, &err), 3);
  EXPECT_NE(err.find("not found"), std::string::npos);
  EXPECT_EQ(run({"--work", work.string(), "infer", "--wav", (work / "none.wav").string()}), 3);

  // A diverging learning rate must surface as a numeric failure.
  const auto base = smoke(work);
  ASSERT_EQ(run(with(base, {"--out", (work / "s.json").string(), "synth-data"})), 0);
  ASSERT_EQ(run(with(base, {"--out", (work / "lm.json").string(), "pretrain-lm"})), 0);
  EXPECT_EQ(run(with(base, {"--set", "training.lr=1e30", "--set", "training.steps=50", "train"}), &err), 4);
  EXPECT_NE(err.find("train"), std::string::npos);
}

TEST(Cli, GradCheckReportPasses) {
  const auto dir = scratch_dir("cli_grad");
  ASSERT_EQ(run({"--out", (dir / "g.json").string(), "grad-check", "--seed", "3"}), 0);
  const auto j = nlohmann::json::parse(read_file(dir / "g.json"));
  EXPECT_TRUE(j.at("pass").get<bool>());
  EXPECT_GT(j.at("rows").size(), 30u);
  EXPECT_EQ(j.at("seed"), 3);
}

TEST(Config, OverridesAndFingerprint) {
  const auto a = load_config({}, {});
  const auto b = load_config({}, {"training.steps=12"});
  EXPECT_EQ(b.training.steps, 12u);
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.fingerprint(), load_config({}, {}).fingerprint());
  const auto dir = scratch_dir("cli_config");
  write_text(dir / "c.json", R"({"seed": 3, "inference": {"beam": 2}})");
  const auto c = load_config(dir / "c.json", {"inference.beam=4"});
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.inference.beam, 4u);
  EXPECT_EQ(c.inference.max_len, a.inference.max_len);
  write_text(dir / "bad.json", "{");
  EXPECT_THROW(load_config(dir / "bad.json", {}), ConfigError);
  EXPECT_THROW(load_config({}, {"precision=f16"}), ConfigError);
  EXPECT_THROW(load_config({}, {"model.ablation=\"half\""}), ConfigError);
}

TEST(Config, CheckedInDefaultsMatchBuiltIn) {
  const auto file = load_config(fs::path(PENGI_SOURCE_DIR) / "configs" / "default.json", {});
  EXPECT_EQ(file.raw, default_config_json());
  EXPECT_EQ(file.fingerprint(), load_config({}, {}).fingerprint());
}

TEST(Config, DerivedSeedsAreDistinctAndStable) {
  EXPECT_EQ(derive_seed(7, "train"), derive_seed(7, "train"));
  EXPECT_NE(derive_seed(7, "train"), derive_seed(7, "probe"));
  EXPECT_NE(derive_seed(7, "train"), derive_seed(8, "train"));
}
