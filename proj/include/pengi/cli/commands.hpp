#pragma once

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pengi/cli/grad_sweep.hpp"
#include "pengi/cli/pipeline.hpp"

namespace pengi::cli {

/// Flag values shared by the subcommands. Empty paths fall back to the
/// layout under paths.work.
struct Args {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string work;

  std::string dir;
  std::vector<std::string> data;
  std::string heldout;
  std::string init;
  std::string ckpt;
  std::string metrics;
  std::string wav;
  std::string prompt;
  std::string second_text;
  std::string task = "sound-event";
  std::string method = "text-match";
  std::string ablation;
  std::optional<std::size_t> classes, per_class, steps, beam;
  std::optional<std::uint64_t> seed;
  bool greedy = false;
};

struct Layout {
  fs::path work;
  fs::path train_data() const { return work / "data" / "train"; }
  fs::path heldout_data() const { return work / "data" / "heldout"; }
  fs::path lm() const { return work / "lm.ckpt"; }
  fs::path encoders() const { return work / "encoders.ckpt"; }
  fs::path model() const { return work / "model.ckpt"; }
};

inline void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(out, j);
  }
}

inline fs::path or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

inline fs::path existing(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw DataError(std::string(what) + " not found: " + p.string());
  return p;
}

template <class T>
json run_command(const std::string& cmd, const Args& a, const RunConfig& c) {
  const Layout L{a.work.empty() ? c.work : fs::path(a.work)};

  if (cmd == "synth-data") {
    const auto dir = or_default(a.dir, L.train_data());
    const auto r = synth_data(c, dir, a.classes.value_or(c.synth.classes), a.per_class.value_or(c.synth.per_class),
                              a.seed.value_or(c.seed));
    json rep = meta_json(c, "synth-data");
    rep["manifest"] = r.manifest.string();
    rep["rows"] = r.rows.size();
    std::ifstream is(r.manifest, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    rep["manifest_digest"] = eval::hex_digest(ss.str());
    return rep;
  }
  if (cmd == "pretrain-lm") {
    std::vector<fs::path> dirs;
    for (const auto& d : a.data) dirs.push_back(existing(d, "data directory"));
    if (dirs.empty()) {
      dirs.push_back(existing(L.train_data(), "data directory"));
      if (fs::exists(L.heldout_data())) dirs.push_back(L.heldout_data());
    }
    auto r = pretrain_lm_phase<T>(c, dirs);
    const auto out = or_default(a.ckpt, L.lm());
    r.checkpoint.save(out);
    r.report["checkpoint"] = out.string();
    return r.report;
  }

  const fs::path data = a.data.empty() ? fs::path() : fs::path(a.data.front());
  if (cmd == "pretrain-contrastive") {
    auto m = load_model<T>(c, existing(or_default(a.init, L.lm()), "checkpoint"));
    const auto ds = load_data(c, m, existing(or_default(data.string(), L.train_data()), "data directory"));
    std::optional<train::Dataset<T>> hs;
    const auto hd = or_default(a.heldout, L.heldout_data());
    if (fs::exists(hd)) hs = load_data(c, m, hd);
    auto rep = contrastive_phase(c, m, ds, hs ? &*hs : nullptr);
    const auto out = or_default(a.ckpt, L.encoders());
    model_checkpoint(m, c, "encoders").save(out);
    rep["checkpoint"] = out.string();
    return rep;
  }
  if (cmd == "train") {
    const auto init = a.init.empty() ? (fs::exists(L.encoders()) ? L.encoders() : L.lm()) : fs::path(a.init);
    auto m = load_model<T>(c, existing(init, "checkpoint"));
    const auto ds = load_data(c, m, existing(or_default(data.string(), L.train_data()), "data directory"));
    std::vector<std::size_t> all(ds.examples.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    auto o = train_options<T>(c);
    const auto out = or_default(a.ckpt, L.model());
    o.checkpoint_dir = out.parent_path() / (out.stem().string() + "_steps");
    const auto metrics_path = or_default(a.metrics, L.work / "metrics.jsonl");
    if (metrics_path.has_parent_path()) fs::create_directories(metrics_path.parent_path());
    std::ofstream ms(metrics_path, std::ios::binary);
    o.metrics = &ms;
    const auto r = train::train<T>(m, ds, all, o);
    model_checkpoint(m, c, "model").save(out);
    auto rep = train_report<T>(c, r);
    rep["checkpoint"] = out.string();
    rep["metrics"] = metrics_path.string();
    return rep;
  }

  auto m = load_model<T>(c, existing(or_default(a.ckpt, L.model()), "checkpoint"));
  if (cmd == "infer" || cmd == "interpret-prefix") {
    if (a.wav.empty()) throw ConfigError(cmd + " needs --wav");
    const auto mel = wav_features<T>(c, existing(a.wav, "wav file"));
    const std::string prompt = a.prompt.empty() ? kCaptionPrompt : a.prompt;
    const auto prefix = a.second_text.empty() ? model::assemble_prefix(m, mel, prompt)
                                              : model::assemble_prefix_with_context(m, mel, prompt, a.second_text);
    json rep = meta_json(c, cmd);
    rep["wav"] = a.wav;
    rep["prompt"] = prompt;
    if (!a.second_text.empty()) rep["second_text"] = a.second_text;
    if (cmd == "interpret-prefix") {
      rep["tokens"] = interpret(m, prefix);
      return rep;
    }
    const auto g = infer::generate(m, prefix, decode_options(c), a.greedy);
    rep["decoder"] = a.greedy ? "greedy" : "beam";
    rep["beam"] = c.inference.beam;
    rep["text"] = g.text;
    rep["tokens"] = g.tokens;
    rep["logprob"] = g.logprob;
    rep["score"] = g.score;
    rep["finished"] = g.finished;
    return rep;
  }
  const auto eval_dir = existing(or_default(data.string(), L.heldout_data()), "data directory");
  const auto ds = load_data(c, m, eval_dir);
  if (cmd == "eval-closed") return eval_closed(c, m, ds, a.task, a.method).to_json();
  if (cmd == "eval-retrieval") return eval_retrieval(c, m, ds).to_json();
  if (cmd == "probe") {
    const auto train_ds = load_data(c, m, existing(or_default(a.heldout, L.train_data()), "data directory"));
    json reps = json::array();
    for (const auto& r : probe_phase(c, m, train_ds, ds)) reps.push_back(r.to_json());
    return reps;
  }
  throw ConfigError("unknown subcommand " + cmd);
}

/// Parses argv, runs one subcommand and maps failures onto exit codes:
/// 2 config, 3 data, 4 numeric.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"pengi: audio language model with prefix-conditioned frozen LM"};
  app.require_subcommand(1);
  Args a;
  app.add_option("--config", a.config, "JSON config file (defaults apply to missing keys)");
  app.add_option("--set", a.sets, "override a config key, e.g. --set training.steps=100")->allow_extra_args(false);
  app.add_option("--out", a.out, "write the JSON report here instead of stdout");
  app.add_option("--work", a.work, "run directory (overrides paths.work)");

  auto* synth = app.add_subcommand("synth-data", "synthesize clips, manifest and LM corpus");
  synth->add_option("--classes", a.classes);
  synth->add_option("--per-class", a.per_class);
  synth->add_option("--seed", a.seed);
  synth->add_option("--dir", a.dir, "output directory");

  auto* lm = app.add_subcommand("pretrain-lm", "build the vocabulary and pretrain the frozen LM");
  lm->add_option("--data", a.data, "data directories (repeatable)");
  lm->add_option("--ckpt", a.ckpt, "output checkpoint");

  auto* con = app.add_subcommand("pretrain-contrastive", "contrastive pretraining of the encoders");
  con->add_option("--init", a.init, "LM checkpoint");
  con->add_option("--data", a.data, "training data directory");
  con->add_option("--heldout", a.heldout, "held-out data directory");
  con->add_option("--ckpt", a.ckpt, "output checkpoint");

  auto* tr = app.add_subcommand("train", "train the mappers (and encoders) on the multitask mix");
  tr->add_option("--init", a.init, "checkpoint to start from");
  tr->add_option("--data", a.data, "training data directory");
  tr->add_option("--ckpt", a.ckpt, "output checkpoint");
  tr->add_option("--metrics", a.metrics, "metrics log (JSON lines)");
  tr->add_option("--ablation", a.ablation)->check(CLI::IsMember({"full", "frozen-audio", "exp-b"}));
  tr->add_option("--steps", a.steps);

  auto* inf = app.add_subcommand("infer", "generate text for a clip and prompt");
  auto* ip = app.add_subcommand("interpret-prefix", "nearest vocabulary token for each prefix row");
  for (auto* s : {inf, ip}) {
    s->add_option("--ckpt", a.ckpt, "model checkpoint");
    s->add_option("--wav", a.wav, "input clip")->required();
    s->add_option("--prompt", a.prompt, "text prompt");
    s->add_option("--second-text", a.second_text, "extra text appended after the prefix");
  }
  inf->add_option("--beam", a.beam);
  inf->add_flag("--greedy", a.greedy);

  auto* ec = app.add_subcommand("eval-closed", "close-ended accuracy or mAP");
  ec->add_option("--method", a.method)->check(CLI::IsMember({"text-match", "loglik"}));
  ec->add_option("--task", a.task);
  auto* er = app.add_subcommand("eval-retrieval", "caption-index text-to-audio retrieval");
  auto* pr = app.add_subcommand("probe", "probe heads on the frozen audio encoder");
  pr->add_option("--train-data", a.heldout, "probe training data (default: training split)");
  for (auto* s : {ec, er, pr}) {
    s->add_option("--ckpt", a.ckpt, "model checkpoint");
    s->add_option("--data", a.data, "evaluation data directory");
  }

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient sweep");
  gc->add_option("--seed", a.seed);
  app.add_subcommand("pipeline", "every phase end to end under the run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kConfig);
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (a.steps) a.sets.push_back("training.steps=" + std::to_string(*a.steps));
    if (a.beam) a.sets.push_back("inference.beam=" + std::to_string(*a.beam));
    if (!a.ablation.empty()) a.sets.push_back("model.ablation=\"" + a.ablation + "\"");
    if (a.seed && cmd != "synth-data") a.sets.push_back("seed=" + std::to_string(*a.seed));
    const RunConfig c = load_config(a.config, a.sets);

    json rep;
    if (cmd == "grad-check") {
      rep = meta_json(c, "grad-check");
      json rows = json::array();
      bool ok = true;
      for (const auto& r : grad_check_sweep(c.seed)) {
        rows.push_back(to_json(r));
        ok = ok && r.pass();
      }
      rep["rows"] = rows;
      rep["pass"] = ok;
      emit(rep, a.out);
      return ok ? 0 : static_cast<int>(ExitCode::kNumeric);
    }
    if (cmd == "pipeline") {
      const fs::path dir = a.work.empty() ? c.work : fs::path(a.work);
      rep = c.precision == "f64" ? run_pipeline<double>(c, dir) : run_pipeline<float>(c, dir);
    } else {
      rep = c.precision == "f64" ? run_command<double>(cmd, a, c) : run_command<float>(cmd, a, c);
    }
    emit(rep, a.out);
    return 0;
  } catch (const Error& e) {
    err << "error (" << cmd << "): " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const json::exception& e) {
    err << "error (" << cmd << "): malformed JSON: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error (" << cmd << "): " << e.what() << "\n";
    return static_cast<int>(ExitCode::kData);
  }
}

}  // namespace pengi::cli
