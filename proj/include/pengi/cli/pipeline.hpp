#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "pengi/audio/synth.hpp"
#include "pengi/cli/config.hpp"
#include "pengi/core/checkpoint.hpp"
#include "pengi/eval/metrics.hpp"
#include "pengi/eval/probe.hpp"
#include "pengi/eval/report.hpp"
#include "pengi/infer/closed.hpp"
#include "pengi/infer/decode.hpp"
#include "pengi/infer/interpret.hpp"
#include "pengi/infer/retrieval.hpp"
#include "pengi/model/lm_pretrain.hpp"
#include "pengi/model/pengi.hpp"
#include "pengi/train/contrastive.hpp"
#include "pengi/train/dataset.hpp"
#include "pengi/train/trainer.hpp"

namespace pengi::cli {

namespace fs = std::filesystem;

inline constexpr const char* kSoundEventPrompt = "this is a sound of";
inline constexpr const char* kCaptionPrompt = "generate audio caption";

/// Seed of a named sub-stream of the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return fnv1a64(name, fnv1a64(std::to_string(seed)));
}

inline std::vector<audio::SynthSpec> class_specs(std::size_t classes) {
  auto specs = audio::default_specs();
  if (classes < 2 || classes > specs.size()) {
    throw ConfigError("synth.classes must be in 2.." + std::to_string(specs.size()));
  }
  specs.resize(classes);
  return specs;
}

inline json meta_json(const RunConfig& c, const std::string& kind) {
  return {{"kind", kind}, {"fingerprint", c.fingerprint()}, {"seed", c.seed}};
}

/// Byte records identifying the run that produced a checkpoint.
inline std::map<std::string, std::string> checkpoint_meta(const RunConfig& c, const std::string& kind) {
  return {{"meta.kind", kind},
          {"meta.fingerprint", c.fingerprint()},
          {"meta.seed", std::to_string(c.seed)},
          {"meta.config", c.raw.dump()}};
}

inline void stamp(Checkpoint& ck, const RunConfig& c, const std::string& kind) {
  for (const auto& [k, v] : checkpoint_meta(c, kind)) ck.add_bytes(k, v);
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << text;
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// ---- synth-data -------------------------------------------------------------

struct SynthOutput {
  fs::path dir;
  fs::path manifest;
  std::vector<train::TrainingTriple> rows;
};

/// Clips, manifest, LM text corpus and a meta file under `dir`.
inline SynthOutput synth_data(const RunConfig& c, const fs::path& dir, std::size_t classes, std::size_t per_class,
                              std::uint64_t seed) {
  const auto specs = class_specs(classes);
  audio::SynthOptions o;
  o.per_class = per_class;
  o.seed = seed;
  o.sample_rate = c.mel.sample_rate;
  o.clip_seconds = c.mel.clip_seconds;
  auto r = audio::synth_corpus(specs, o, dir);
  audio::write_lines(dir / "lm_corpus.txt", audio::lm_corpus(specs, c.synth.lm_lines, seed));
  json meta = meta_json(c, "synth-data");
  meta["data_seed"] = seed;
  meta["classes"] = classes;
  meta["per_class"] = per_class;
  write_json(dir / "meta.json", meta);
  return {dir, r.manifest, r.rows};
}

// ---- model construction -------------------------------------------------------

inline fs::path manifest_of(const fs::path& data_dir) { return data_dir / "manifest.jsonl"; }

template <class T>
model::PengiModel<T> model_from_checkpoint(const RunConfig& c, const Checkpoint& ck) {
  model::PengiModel<T> m(c.model, model::Tokenizer::deserialize(ck.bytes("meta.vocab")), c.seed);
  std::string kind = "model";
  try {
    kind = ck.bytes("meta.kind");
  } catch (const DataError&) {
  }
  if (kind == "lm") {
    const std::string only[1] = {"lm."};
    m.load(ck, only);
  } else {
    m.load(ck);
  }
  m.apply_freeze();
  return m;
}

template <class T>
model::PengiModel<T> load_model(const RunConfig& c, const fs::path& path) {
  return model_from_checkpoint<T>(c, Checkpoint::load(path));
}

template <class T>
Checkpoint model_checkpoint(model::PengiModel<T>& m, const RunConfig& c, const std::string& kind) {
  Checkpoint ck = m.to_checkpoint();
  stamp(ck, c, kind);
  return ck;
}

template <class T>
train::Dataset<T> load_data(const RunConfig& c, const model::PengiModel<T>& m, const fs::path& data_dir) {
  return train::load_dataset<T>(manifest_of(data_dir), m.tokenizer, c.mel, c.model.max_caption_tokens, c.seed);
}

// ---- pretrain-lm --------------------------------------------------------------

template <class T>
struct LmPhase {
  Checkpoint checkpoint;
  json report;
};

/// Builds the vocabulary from the manifests and the LM corpus of the first
/// data directory, then pretrains the causal LM on that corpus.
template <class T>
LmPhase<T> pretrain_lm_phase(const RunConfig& c, const std::vector<fs::path>& data_dirs) {
  if (data_dirs.empty()) throw ConfigError("pretrain-lm needs at least one --data directory");
  const auto lines = audio::read_lines(data_dirs.front() / "lm_corpus.txt");
  std::vector<std::vector<train::TrainingTriple>> manifests;
  for (const auto& d : data_dirs) manifests.push_back(train::read_manifest(manifest_of(d)));
  auto tok = train::build_vocabulary(manifests, model::lm_line_texts(lines));
  model::PengiModel<T> m(c.model, tok, c.seed);
  const auto heldout = audio::lm_corpus(class_specs(c.synth.classes), std::max<std::size_t>(c.synth.lm_lines / 10, 1),
                                        derive_seed(c.seed, "lm_heldout"));
  model::LmPretrainOptions o;
  o.steps = c.lm.steps;
  o.batch = c.lm.batch;
  o.adam = c.lm.adam;
  o.seed = derive_seed(c.seed, "lm_pretrain");
  const auto rep = model::pretrain_lm(m.lm, m.tokenizer, lines, heldout, o);
  LmPhase<T> out;
  out.checkpoint = m.component_checkpoint("lm.");
  out.checkpoint.add_bytes("meta.vocab", m.tokenizer.serialize());
  stamp(out.checkpoint, c, "lm");
  out.report = meta_json(c, "pretrain-lm");
  out.report["vocab"] = m.tokenizer.size();
  out.report["steps"] = rep.steps;
  out.report["final_train_loss"] = rep.final_train_loss;
  out.report["heldout_loss"] = rep.heldout_loss;
  out.report["heldout_perplexity"] = rep.heldout_perplexity();
  out.report["unigram_perplexity"] = rep.unigram_perplexity();
  return out;
}

// ---- pretrain-contrastive -----------------------------------------------------

template <class T>
std::vector<train::ContrastivePair> caption_pairs(const model::PengiModel<T>& m, const train::Dataset<T>& ds) {
  std::vector<train::ContrastivePair> pairs;
  for (auto i : ds.where("captioning")) {
    const auto& e = ds.examples[i];
    pairs.push_back({e.clip, const_cast<model::PengiModel<T>&>(m).encode_prompt(e.output_text), e.output_text});
  }
  if (pairs.size() < 2) throw DataError("contrastive: need at least 2 captioning rows");
  return pairs;
}

/// Mean diagonal-argmax rate over `batches` batches of distinct captions.
template <class T>
double mean_diagonal_rate(model::PengiModel<T>& m, train::ContrastiveHead<T>& head, const train::Dataset<T>& ds,
                          const std::vector<train::ContrastivePair>& pairs, std::size_t batch, std::size_t batches,
                          std::uint64_t seed) {
  Rng rng(seed, "contrastive_eval");
  double total = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    const auto idx = train::sample_distinct(pairs, batch, rng);
    std::vector<const train::ContrastivePair*> ptrs;
    for (auto i : idx) ptrs.push_back(&pairs[i]);
    total += train::diagonal_argmax_rate<T>(m, head, ds.mels, ptrs);
  }
  return total / static_cast<double>(batches);
}

/// Contrastive pretraining of both encoders. The report holds the loss of the
/// first `probe_n` pairs under the random encoders, the training curve ends
/// and the diagonal argmax rates on train and held-out batches.
template <class T>
json contrastive_phase(const RunConfig& c, model::PengiModel<T>& m, const train::Dataset<T>& ds,
                       const train::Dataset<T>* heldout, std::size_t probe_n = 64) {
  Rng init(derive_seed(c.seed, "contrastive_head"), "head");
  train::ContrastiveHead<T> head(c.model.d_embed, c.contrastive.shared_dim, init);
  const auto pairs = caption_pairs(m, ds);
  json rep = meta_json(c, "pretrain-contrastive");
  {
    std::vector<const train::ContrastivePair*> first;
    for (std::size_t i = 0; i < std::min(probe_n, pairs.size()); ++i) first.push_back(&pairs[i]);
    rep["random_init_loss"] = train::contrastive_batch_loss<T>(m, head, ds.mels, first);
    rep["random_init_batch"] = first.size();
  }
  train::ContrastiveOptions o;
  o.steps = c.contrastive.steps;
  o.batch = c.contrastive.batch;
  o.shared_dim = c.contrastive.shared_dim;
  o.adam = c.contrastive.adam;
  o.seed = derive_seed(c.seed, "contrastive");
  const auto r = train::contrastive_pretrain<T>(m, head, ds.mels, pairs, o);
  rep["first_step_loss"] = r.initial_loss;
  rep["final_loss"] = r.final_loss;
  rep["steps"] = o.steps;
  rep["tau"] = static_cast<double>(std::exp(head.log_tau.item()));
  rep["train_diagonal_rate"] = mean_diagonal_rate(m, head, ds, pairs, o.batch, 8, c.seed);
  if (heldout) {
    const auto hp = caption_pairs(m, *heldout);
    rep["heldout_diagonal_rate"] = mean_diagonal_rate(m, head, *heldout, hp, o.batch, 8, c.seed);
  }
  return rep;
}

// ---- train -------------------------------------------------------------------------

template <class T>
train::TrainOptions train_options(const RunConfig& c) {
  train::TrainOptions o;
  o.steps = c.training.steps;
  o.batch = c.training.batch;
  o.adam = c.training.adam;
  o.seed = derive_seed(c.seed, "train");
  o.task_weights = c.training.task_weights;
  o.stop_below = c.training.stop_below;
  o.eval_every = c.training.eval_every;
  o.checkpoint_every = c.training.checkpoint_every;
  o.checkpoint_meta = checkpoint_meta(c, "model");
  return o;
}

template <class T>
json train_report(const RunConfig& c, const train::TrainResult& r) {
  json rep = meta_json(c, "train");
  rep["ablation"] = model::to_string(c.model.ablation);
  rep["steps"] = r.steps;
  rep["final_loss"] = r.final_loss;
  rep["stopped_early"] = r.stopped_early;
  json cks = json::array();
  for (const auto& p : r.checkpoints) cks.push_back(p.filename().string());
  rep["checkpoints"] = cks;
  return rep;
}

// ---- inference helpers ----------------------------------------------------------

inline infer::DecodeOptions decode_options(const RunConfig& c) {
  return {c.inference.beam, c.inference.max_len, c.inference.alpha};
}

template <class T>
Tensor<T> wav_features(const RunConfig& c, const fs::path& wav) {
  return train::clip_features<T>(audio::read_wav(wav), wav.filename().string(), c.mel, c.seed);
}

// ---- eval-closed -----------------------------------------------------------------

/// Candidate values of a task: every label seen in its rows, sorted.
template <class T>
std::vector<std::string> task_candidates(const train::Dataset<T>& ds, const std::vector<std::size_t>& rows) {
  std::set<std::string> s;
  for (auto i : rows) {
    const auto& e = ds.examples[i];
    if (e.labels.empty()) s.insert(e.output_text);
    for (const auto& l : e.labels) s.insert(l);
  }
  return {s.begin(), s.end()};
}

/// Close-ended evaluation of one task. Single-label tasks report accuracy;
/// tasks with any multi-label row report mAP over the per-candidate scores.
template <class T>
eval::EvalReport eval_closed(const RunConfig& c, model::PengiModel<T>& m, const train::Dataset<T>& ds,
                             const std::string& task, const std::string& method) {
  if (method != "text-match" && method != "loglik") {
    throw ConfigError("--method must be text-match or loglik, got '" + method + "'");
  }
  const auto rows = ds.where(task);
  if (rows.empty()) throw DataError("eval-closed: no rows for task '" + task + "'");
  const infer::CandidateSet cands(task_candidates(ds, rows));
  bool multi = false;
  for (auto i : rows) multi = multi || ds.examples[i].labels.size() > 1;
  const auto embed = infer::text_encoder_embedder(m);

  eval::EvalReport rep;
  rep.task = task;
  rep.metric = multi ? "mAP" : "accuracy";
  rep.fingerprint = c.fingerprint();
  rep.seed = c.seed;
  rep.extra = {{"method", method}, {"candidates", cands.values}};
  std::vector<std::vector<double>> all_scores;
  std::vector<std::set<std::size_t>> golds;
  std::size_t hits = 0;
  for (auto i : rows) {
    const auto& e = ds.examples[i];
    const auto prefix = model::assemble_prefix(m, ds.mels[e.clip], e.prompt);
    json rec = {{"audio", ds.clip_ids[e.clip]}, {"gold", e.output_text}};
    infer::ClosedResult r;
    bool ok = true;
    if (method == "loglik") {
      r = infer::score_candidates_loglik(m, prefix, cands.values, c.inference.normalize_loglik);
    } else {
      const auto g = infer::generate(m, prefix, decode_options(c));
      rec["generated"] = g.text;
      if (g.text.empty()) {
        // Decoding produced nothing to match; the row counts as wrong.
        ok = false;
        rec["error"] = "empty generation";
        r.scores.assign(cands.values.size(), -1.0);
      } else {
        r = infer::text_match(g.text, cands.values, embed);
      }
    }
    rec["scores"] = r.scores;
    const std::string pred = ok ? cands.values[r.best] : std::string();
    rec["prediction"] = pred;
    const bool correct = ok && pred == e.output_text;
    rec["correct"] = correct;
    hits += correct;
    all_scores.push_back(r.scores);
    std::set<std::size_t> g;
    const auto labels = e.labels.empty() ? std::vector<std::string>{e.output_text} : e.labels;
    for (const auto& l : labels)
      for (std::size_t k = 0; k < cands.values.size(); ++k)
        if (cands.values[k] == l) g.insert(k);
    golds.push_back(g);
    rep.records.push_back(rec);
  }
  rep.value = multi ? eval::map_score(all_scores, golds) : static_cast<double>(hits) / static_cast<double>(rows.size());
  return rep;
}

/// Fraction of examples on which two reports predict the same value.
inline double agreement(const eval::EvalReport& a, const eval::EvalReport& b) {
  if (a.records.size() != b.records.size() || a.records.empty()) {
    throw ContractError("agreement: reports cover different examples");
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.records.size(); ++i) same += a.records[i].at("prediction") == b.records[i].at("prediction");
  return static_cast<double>(same) / static_cast<double>(a.records.size());
}

// ---- eval-retrieval ------------------------------------------------------------------

/// Caption-index retrieval: every clip is captioned, gold captions serve as
/// queries and clips sharing the query caption are relevant.
template <class T>
eval::EvalReport eval_retrieval(const RunConfig& c, model::PengiModel<T>& m, const train::Dataset<T>& ds) {
  const auto index = infer::build_caption_index(m, std::span<const Tensor<T>>(ds.mels), ds.clip_ids, kCaptionPrompt,
                                                decode_options(c));
  const auto embed = infer::text_encoder_embedder(m);
  std::map<std::string, std::set<std::string>> relevant;
  for (auto i : ds.where("captioning")) relevant[ds.examples[i].output_text].insert(ds.clip_ids[ds.examples[i].clip]);
  if (relevant.empty()) throw DataError("eval-retrieval: no captioning rows");

  eval::EvalReport rep;
  rep.task = "retrieval";
  rep.metric = "R@1";
  rep.fingerprint = c.fingerprint();
  rep.seed = c.seed;
  std::vector<std::vector<std::string>> ranked;
  std::vector<std::set<std::string>> rel;
  for (const auto& [query, clips] : relevant) {
    auto ids = infer::retrieve(index, query, index.size(), embed);
    json rec = {{"query", query}, {"relevant", clips}};
    rec["ranked"] = std::vector<std::string>(ids.begin(), ids.begin() + std::min<std::size_t>(10, ids.size()));
    rec["correct"] = clips.count(ids.front()) > 0;
    rep.records.push_back(rec);
    ranked.push_back(std::move(ids));
    rel.push_back(clips);
  }
  json recall = json::object();
  for (std::size_t k : {1, 5, 10}) recall["R@" + std::to_string(k)] = eval::recall_at_k(ranked, rel, std::min(k, index.size()));
  rep.value = recall["R@1"].get<double>();

  // Self-query: each uniquely generated caption should retrieve its own clip.
  std::vector<std::vector<std::string>> self_ranked;
  std::vector<std::set<std::string>> self_rel;
  for (auto i : infer::unique_caption_entries(index)) {
    self_ranked.push_back(infer::retrieve(index, index.entries[i].caption, 1, embed));
    self_rel.push_back({index.entries[i].audio_id});
  }
  // Every distinct generated caption as a query; any clip carrying it is a hit.
  std::map<std::string, std::set<std::string>> by_caption;
  for (const auto& e : index.entries) by_caption[e.caption].insert(e.audio_id);
  std::vector<std::vector<std::string>> distinct_ranked;
  std::vector<std::set<std::string>> distinct_rel;
  for (const auto& [caption, clips] : by_caption) {
    distinct_ranked.push_back(infer::retrieve(index, caption, 1, embed));
    distinct_rel.push_back(clips);
  }
  json captions = json::array();
  for (const auto& e : index.entries) captions.push_back({{"audio", e.audio_id}, {"caption", e.caption}});
  rep.extra = {{"recall", recall},
               {"self_query_unique", self_ranked.size()},
               {"self_query_R@1", self_ranked.empty() ? 0.0 : eval::recall_at_k(self_ranked, self_rel, 1)},
               {"distinct_captions", distinct_ranked.size()},
               {"distinct_self_query_R@1", eval::recall_at_k(distinct_ranked, distinct_rel, 1)},
               {"generated_captions", captions}};
  return rep;
}

// ---- probe ---------------------------------------------------------------------------

template <class T>
struct Labelled {
  std::vector<const Tensor<T>*> mels;
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
};

template <class T>
Labelled<T> sound_event_labels(const train::Dataset<T>& ds, const std::vector<std::string>& classes) {
  Labelled<T> out;
  for (auto i : ds.where("sound-event")) {
    const auto& e = ds.examples[i];
    auto it = std::find(classes.begin(), classes.end(), e.output_text);
    if (it == classes.end()) throw DataError("probe: class '" + e.output_text + "' missing from the training split");
    out.mels.push_back(&ds.mels[e.clip]);
    out.labels.push_back(static_cast<std::size_t>(it - classes.begin()));
    out.ids.push_back(ds.clip_ids[e.clip]);
  }
  return out;
}

/// One report per configured head depth plus the shuffled-label control.
template <class T>
std::vector<eval::EvalReport> probe_phase(const RunConfig& c, model::PengiModel<T>& m, const train::Dataset<T>& train_ds,
                                          const train::Dataset<T>& test_ds) {
  const auto classes = task_candidates(train_ds, train_ds.where("sound-event"));
  const auto tr = sound_event_labels(train_ds, classes);
  const auto te = sound_event_labels(test_ds, classes);
  std::vector<eval::EvalReport> out;
  auto options = [&](std::size_t layers, std::uint64_t seed, bool shuffle) {
    eval::ProbeOptions o;
    o.layers = layers;
    o.hidden = c.probe.hidden;
    o.steps = c.probe.steps;
    o.adam = AdamOptions{.lr = c.probe.lr, .warmup_steps = 0};
    o.seed = seed;
    o.shuffle_labels = shuffle;
    return o;
  };
  for (auto layers : c.probe.layers) {
    const auto r = eval::linear_probe<T>(m, tr.mels, tr.labels, te.mels, te.labels, classes.size(),
                                         options(layers, derive_seed(c.seed, "probe"), false));
    eval::EvalReport rep;
    rep.task = "probe-L" + std::to_string(layers);
    rep.metric = "accuracy";
    rep.value = r.accuracy;
    rep.fingerprint = c.fingerprint();
    rep.seed = c.seed;
    for (std::size_t i = 0; i < te.ids.size(); ++i) {
      rep.records.push_back({{"audio", te.ids[i]},
                             {"gold", classes[te.labels[i]]},
                             {"prediction", classes[r.predictions[i]]},
                             {"correct", r.predictions[i] == te.labels[i]}});
    }
    rep.extra = {{"encoder_hash_before", r.encoder_hash_before},
                 {"encoder_hash_after", r.encoder_hash_after},
                 {"final_train_loss", r.final_train_loss},
                 {"classes", classes}};
    out.push_back(rep);
  }
  if (c.probe.shuffle_repeats > 0) {
    const std::size_t layers = c.probe.layers.empty() ? 1 : c.probe.layers.front();
    eval::EvalReport rep;
    rep.task = "probe-L" + std::to_string(layers) + "-shuffled";
    rep.metric = "accuracy";
    rep.fingerprint = c.fingerprint();
    rep.seed = c.seed;
    double total = 0.0;
    for (std::size_t s = 0; s < c.probe.shuffle_repeats; ++s) {
      const auto r = eval::linear_probe<T>(m, tr.mels, tr.labels, te.mels, te.labels, classes.size(),
                                           options(layers, derive_seed(c.seed, "probe_shuffle_" + std::to_string(s)), true));
      rep.records.push_back({{"run", s}, {"accuracy", r.accuracy}});
      total += r.accuracy;
    }
    rep.value = total / static_cast<double>(c.probe.shuffle_repeats);
    rep.extra = {{"chance", 1.0 / static_cast<double>(classes.size())}, {"runs", c.probe.shuffle_repeats}};
    out.push_back(rep);
  }
  return out;
}

// ---- interpret-prefix -----------------------------------------------------------------

template <class T>
json interpret(model::PengiModel<T>& m, const model::Prefix<T>& prefix) {
  const auto words = infer::interpret_prefix(prefix.rows, m.lm, m.tokenizer);
  const std::size_t k = prefix.k;
  return {{"audio_prefix", std::vector<std::string>(words.begin(), words.begin() + k)},
          {"text_prefix", std::vector<std::string>(words.begin() + k, words.begin() + 2 * k)},
          {"context", std::vector<std::string>(words.begin() + 2 * k, words.end())}};
}

// ---- whole pipeline ---------------------------------------------------------------------

/// Every phase in order under `dir`: data, LM, encoders, Pengi, evaluation.
/// Returns the summary of all reports.
template <class T>
json run_pipeline(const RunConfig& c, const fs::path& dir) {
  fs::create_directories(dir / "reports");
  const auto tr = synth_data(c, dir / "data" / "train", c.synth.classes, c.synth.per_class, c.seed);
  const auto he = synth_data(c, dir / "data" / "heldout", c.synth.classes, c.synth.heldout_per_class,
                             derive_seed(c.seed, "heldout"));
  auto lm = pretrain_lm_phase<T>(c, {tr.dir, he.dir});
  lm.checkpoint.save(dir / "lm.ckpt");
  write_json(dir / "reports" / "lm_pretrain.json", lm.report);

  auto m = model_from_checkpoint<T>(c, lm.checkpoint);
  const auto ds = load_data(c, m, tr.dir);
  const auto hs = load_data(c, m, he.dir);
  if (c.contrastive.enabled) {
    write_json(dir / "reports" / "contrastive.json", contrastive_phase(c, m, ds, &hs));
    model_checkpoint(m, c, "encoders").save(dir / "encoders.ckpt");
  }
  std::vector<std::size_t> all(ds.examples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto to = train_options<T>(c);
  to.checkpoint_dir = dir / "steps";
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  to.metrics = &metrics;
  const auto res = train::train<T>(m, ds, all, to);
  model_checkpoint(m, c, "model").save(dir / "model.ckpt");
  write_json(dir / "reports" / "train.json", train_report<T>(c, res));

  std::vector<eval::EvalReport> reports;
  for (const char* method : {"text-match", "loglik"}) {
    reports.push_back(eval_closed(c, m, hs, "sound-event", method));
    write_json(dir / "reports" / (std::string("closed_") + method + ".json"), reports.back().to_json());
  }
  reports.push_back(eval_retrieval(c, m, hs));
  write_json(dir / "reports" / "retrieval.json", reports.back().to_json());
  json probes = json::array();
  for (auto& r : probe_phase(c, m, ds, hs)) {
    probes.push_back(r.to_json());
    reports.push_back(r);
  }
  write_json(dir / "reports" / "probe.json", probes);
  write_text(dir / "reports" / "summary.csv", eval::reports_csv(reports));
  json summary = meta_json(c, "pipeline");
  summary["agreement"] = agreement(reports[0], reports[1]);
  for (const auto& r : reports) {
    const std::string method = r.extra.is_object() ? r.extra.value("method", "") : "";
    summary["results"][r.task + (method.empty() ? "" : "/" + method) + "/" + r.metric] = r.value;
  }
  write_json(dir / "reports" / "summary.json", summary);
  return summary;
}

}  // namespace pengi::cli
