#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pengi/core/optim.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/model/pengi.hpp"
#include "pengi/train/dataset.hpp"
#include "pengi/train/loss.hpp"

namespace pengi::train {

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t epochs = 0;  // when > 0, overrides steps with epochs * batches per epoch
  std::size_t batch = 16;
  AdamOptions adam{.lr = 1e-3, .warmup_steps = 100};
  std::uint64_t seed = 0;
  // Relative sampling weight per task name; empty means shuffled epochs over all rows.
  std::map<std::string, double> task_weights;
  // Stop once the loss over the whole training subset falls below this (0 disables).
  double stop_below = 0.0;
  std::size_t eval_every = 50;
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  std::map<std::string, std::string> checkpoint_meta;  // extra byte records in each checkpoint
  std::ostream* metrics = nullptr;  // JSON lines {step, loss, lr, wall_ms}
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"wall_ms", r.wall_ms}};
}

struct TrainResult {
  std::vector<StepRecord> log;
  std::size_t steps = 0;
  double final_loss = 0.0;  // over the whole training subset
  bool stopped_early = false;
  std::vector<std::filesystem::path> checkpoints;

  std::vector<double> losses() const {
    std::vector<double> out;
    for (const auto& r : log) out.push_back(r.loss);
    return out;
  }
};

/// Batch-level loss with cached encoder outputs. Prompt embeddings come from
/// frozen components and are computed once per distinct prompt; audio
/// embeddings are cached only when the audio encoder is frozen.
template <class T>
class CaptionObjective {
 public:
  CaptionObjective(model::PengiModel<T>& m, const Dataset<T>& ds) : m_(m), ds_(ds) {}

  Var<T> loss(Tape<T>& tp, std::span<const std::size_t> batch) {
    std::vector<std::vector<TokenId>> captions;
    for (auto i : batch) captions.push_back(ds_.examples[i].caption);
    const auto lay = caption_layout<T>(std::span<const std::vector<TokenId>>(captions), 2 * m_.k(), m_.lm.context);
    Var<T> p = m_.prefixes_from_embeddings(audio_embeddings(tp, batch), tp.constant(prompt_embeddings(batch)));
    return caption_loss_from_logits(caption_logits(m_.lm, p, lay), lay);
  }

  /// Mean loss over `subset`, evaluated in chunks without gradients.
  double mean_loss(std::span<const std::size_t> subset, std::size_t chunk) {
    double total = 0.0;
    for (std::size_t s = 0; s < subset.size(); s += chunk) {
      const auto part = subset.subspan(s, std::min(chunk, subset.size() - s));
      Tape<T> tp;
      total += static_cast<double>(loss(tp, part).value().item()) * static_cast<double>(part.size());
    }
    return total / static_cast<double>(subset.size());
  }

 private:
  Tensor<T> prompt_embeddings(std::span<const std::size_t> batch) {
    std::vector<const Tensor<T>*> rows;
    for (auto i : batch) {
      const auto& prompt = ds_.examples[i].prompt;
      auto it = prompts_.find(prompt);
      if (it == prompts_.end()) {
        Tape<T> tp;
        const std::vector<std::vector<TokenId>> ids{m_.encode_prompt(prompt)};
        it = prompts_.emplace(prompt, m_.prompt_embedding(tp, ids).value()).first;
      }
      rows.push_back(&it->second);
    }
    return stack(rows);
  }

  Var<T> audio_embeddings(Tape<T>& tp, std::span<const std::size_t> batch) {
    if (!m_.audio.frozen) {
      std::vector<const Tensor<T>*> mels;
      for (auto i : batch) mels.push_back(&ds_.mels[ds_.examples[i].clip]);
      return m_.audio(tp, mels);
    }
    std::vector<const Tensor<T>*> rows;
    for (auto i : batch) {
      const std::size_t c = ds_.examples[i].clip;
      auto it = audio_.find(c);
      if (it == audio_.end()) {
        Tape<T> inner;
        const Tensor<T>* mel[1] = {&ds_.mels[c]};
        it = audio_.emplace(c, m_.audio(inner, mel).value()).first;
      }
      rows.push_back(&it->second);
    }
    return tp.constant(stack(rows));
  }

  static Tensor<T> stack(const std::vector<const Tensor<T>*>& rows) {
    Tensor<T> out = Tensor<T>::matrix(rows.size(), rows.front()->cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) = rows[r]->at(0, c);
    return out;
  }

  model::PengiModel<T>& m_;
  const Dataset<T>& ds_;
  std::map<std::string, Tensor<T>> prompts_;
  std::map<std::size_t, Tensor<T>> audio_;
};

/// Draws batches either as seeded shuffled epochs or, with task weights, by
/// weighted sampling with replacement.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> subset, std::vector<double> weights, std::size_t batch, std::uint64_t seed)
      : subset_(std::move(subset)), weights_(std::move(weights)), batch_(batch), rng_(seed, "data") {
    if (subset_.empty()) throw DataError("train: no examples to train on");
    if (batch_ == 0) throw ConfigError("training.batch must be positive");
    cursor_ = subset_.size();
    if (!weights_.empty()) {
      double total = 0.0;
      for (double w : weights_) {
        if (!(w >= 0.0)) throw ConfigError("training.task_weights must be non-negative");
        total += w;
        cdf_.push_back(total);
      }
      if (total <= 0.0) throw ConfigError("training.task_weights select no examples");
    }
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    const std::size_t n = std::min(batch_, subset_.size());
    while (out.size() < n) {
      if (!cdf_.empty()) {
        const double u = rng_.uniform() * cdf_.back();
        const auto at = static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
        out.push_back(subset_[std::min(at, subset_.size() - 1)]);
        continue;
      }
      if (cursor_ == subset_.size()) {
        rng_.shuffle(subset_);
        cursor_ = 0;
      }
      out.push_back(subset_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> subset_;
  std::vector<double> weights_;
  std::vector<double> cdf_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

inline std::string batch_ids(std::span<const std::size_t> batch) {
  std::string s;
  for (auto i : batch) s += (s.empty() ? "" : ",") + std::to_string(i);
  return s;
}

/// Adam on the model's trainable set over `subset` (example indices). Frozen
/// components are never handed to the optimizer.
template <class T>
TrainResult train(model::PengiModel<T>& m, const Dataset<T>& ds, std::vector<std::size_t> subset, const TrainOptions& o) {
  m.apply_freeze();
  if (subset.empty()) throw DataError("train: no examples to train on");
  std::vector<double> weights;
  if (!o.task_weights.empty()) {
    for (auto i : subset) {
      auto it = o.task_weights.find(ds.examples[i].task);
      weights.push_back(it == o.task_weights.end() ? 0.0 : it->second);
    }
  }
  const std::size_t per_epoch = (subset.size() + o.batch - 1) / std::max<std::size_t>(o.batch, 1);
  const std::size_t steps = o.epochs > 0 ? o.epochs * per_epoch : o.steps;
  BatchSampler sampler(subset, weights, o.batch, o.seed);
  CaptionObjective<T> objective(m, ds);
  Adam<T> opt(m.trainable().tensors(), o.adam);
  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t step = 0; step < steps; ++step) {
    const auto batch = sampler.next();
    Tape<T> tp;
    std::optional<Var<T>> loss;
    double lv = 0.0;
    try {
      loss = objective.loss(tp, batch);
      lv = static_cast<double>(loss->value().item());
    } catch (const NumericError& e) {
      throw NumericError("train: non-finite values at step " + std::to_string(step) + " (batch " + batch_ids(batch) +
                         "): " + e.what());
    }
    if (!std::isfinite(lv)) {
      throw NumericError("train: loss is " + std::to_string(lv) + " at step " + std::to_string(step) + " (batch " +
                         batch_ids(batch) + ")");
    }
    tp.backward(*loss);
    const double lr = opt.step();
    StepRecord rec{step, lv, lr,
                   std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
    if (o.metrics) *o.metrics << to_json(rec).dump() << '\n';
    res.log.push_back(rec);
    res.steps = step + 1;

    if (o.checkpoint_every > 0 && res.steps % o.checkpoint_every == 0 && !o.checkpoint_dir.empty()) {
      std::filesystem::create_directories(o.checkpoint_dir);
      const auto path = o.checkpoint_dir / ("step_" + std::to_string(res.steps) + ".ckpt");
      Checkpoint ck = m.to_checkpoint();
      for (const auto& [k, v] : o.checkpoint_meta) ck.add_bytes(k, v);
      ck.save(path);
      res.checkpoints.push_back(path);
    }
    if (o.stop_below > 0.0 && o.eval_every > 0 && res.steps % o.eval_every == 0) {
      res.final_loss = objective.mean_loss(subset, std::max<std::size_t>(o.batch, 1));
      if (res.final_loss < o.stop_below) {
        res.stopped_early = true;
        return res;
      }
    }
  }
  res.final_loss = objective.mean_loss(subset, std::max<std::size_t>(o.batch, 1));
  return res;
}

}  // namespace pengi::train
