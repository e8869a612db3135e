#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pengi/core/optim.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/eval/report.hpp"
#include "pengi/model/layers.hpp"
#include "pengi/model/pengi.hpp"

namespace pengi::eval {

/// 1 to 3 fully connected layers with ReLU in between.
template <class T>
struct ProbeHead {
  std::vector<model::Linear<T>> layers;

  ProbeHead() = default;
  ProbeHead(std::size_t in, std::size_t hidden, std::size_t classes, std::size_t depth, Rng& rng) {
    if (depth < 1 || depth > 3) throw ConfigError("probe.layers must be 1, 2 or 3");
    std::size_t d = in;
    for (std::size_t i = 0; i + 1 < depth; ++i) {
      layers.emplace_back(d, hidden, rng);
      d = hidden;
    }
    layers.emplace_back(d, classes, rng);
  }

  Var<T> operator()(Var<T> x) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers)
      l.visit("", [&out](const std::string&, Tensor<T>& t) {
        t.set_requires_grad(true);
        out.push_back(&t);
      });
    return out;
  }
};

struct ProbeOptions {
  std::size_t layers = 1;
  std::size_t hidden = 64;
  std::size_t steps = 300;
  AdamOptions adam{.lr = 1e-2, .warmup_steps = 0};
  std::uint64_t seed = 0;
  bool shuffle_labels = false;  // control run: train on permuted labels
};

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<std::size_t> predictions;
  std::string encoder_hash_before;
  std::string encoder_hash_after;
  double final_train_loss = 0.0;
};

/// Digest of the audio encoder parameters.
template <class T>
std::string encoder_hash(model::PengiModel<T>& m) {
  return hex_digest(m.component_checkpoint("audio_encoder.").serialize());
}

/// Frozen audio-encoder outputs, one row per clip.
template <class T>
Tensor<T> encoder_features(model::PengiModel<T>& m, std::span<const Tensor<T>* const> mels) {
  Tensor<T> out;
  std::vector<T> data;
  std::size_t d = 0;
  for (std::size_t s = 0; s < mels.size(); s += 32) {
    Tape<T> tp;
    const auto part = mels.subspan(s, std::min<std::size_t>(32, mels.size() - s));
    const Tensor<T> e = m.audio(tp, part).value();
    d = e.cols();
    data.insert(data.end(), e.data().begin(), e.data().end());
  }
  return Tensor<T>(Shape{mels.size(), d}, std::move(data));
}

/// Standardizes columns with the statistics of `fit`.
template <class T>
void standardize(const Tensor<T>& fit, std::vector<Tensor<T>*> apply) {
  const std::size_t d = fit.cols();
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t r = 0; r < fit.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += fit.at(r, j);
  for (auto& v : mean) v /= static_cast<double>(fit.rows());
  for (std::size_t r = 0; r < fit.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (fit.at(r, j) - mean[j]) * (fit.at(r, j) - mean[j]);
  for (auto& v : sd) v = std::sqrt(v / static_cast<double>(fit.rows())) + 1e-8;
  for (Tensor<T>* t : apply)
    for (std::size_t r = 0; r < t->rows(); ++r)
      for (std::size_t j = 0; j < d; ++j) t->at(r, j) = T((t->at(r, j) - mean[j]) / sd[j]);
}

/// Trains only a probe head on frozen audio-encoder outputs (no mapping
/// network) and reports held-out accuracy.
template <class T>
ProbeResult linear_probe(model::PengiModel<T>& m, std::span<const Tensor<T>* const> train_mels,
                         std::span<const std::size_t> train_labels, std::span<const Tensor<T>* const> test_mels,
                         std::span<const std::size_t> test_labels, std::size_t classes, const ProbeOptions& o) {
  if (train_mels.size() != train_labels.size() || test_mels.size() != test_labels.size()) {
    throw ContractError("probe: clips and labels differ in length");
  }
  if (train_mels.empty() || test_mels.empty()) throw DataError("probe: empty train or test split");
  std::set<std::size_t> distinct(train_labels.begin(), train_labels.end());
  if (distinct.size() < 2 || classes < 2) throw DataError("probe: need at least 2 classes, got " + std::to_string(distinct.size()));
  for (auto l : train_labels)
    if (l >= classes) throw DataError("probe: label out of range");

  ProbeResult res;
  res.encoder_hash_before = encoder_hash(m);
  Tensor<T> xtr = encoder_features(m, train_mels);
  Tensor<T> xte = encoder_features(m, test_mels);
  standardize(xtr, {&xte, &xtr});

  std::vector<TokenId> ytr(train_labels.begin(), train_labels.end());
  Rng rng(o.seed, "probe");
  if (o.shuffle_labels) rng.shuffle(ytr);
  Rng init = rng.fork("head");
  ProbeHead<T> head(xtr.cols(), o.hidden, classes, o.layers, init);
  Adam<T> opt(head.parameters(), o.adam);
  const std::vector<bool> all(ytr.size(), true);
  for (std::size_t step = 0; step < o.steps; ++step) {
    Tape<T> tp;
    Var<T> loss = cross_entropy(head(tp.constant_ref(xtr)), std::span<const TokenId>(ytr), all);
    res.final_train_loss = static_cast<double>(loss.value().item());
    if (!std::isfinite(res.final_train_loss)) throw NumericError("probe: non-finite loss at step " + std::to_string(step));
    tp.backward(loss);
    opt.step();
  }
  Tape<T> tp;
  const Tensor<T> logits = head(tp.constant_ref(xte)).value();
  std::size_t hit = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    res.predictions.push_back(best);
    hit += best == test_labels[r];
  }
  res.accuracy = static_cast<double>(hit) / static_cast<double>(logits.rows());
  res.encoder_hash_after = encoder_hash(m);
  return res;
}

}  // namespace pengi::eval
