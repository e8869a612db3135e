#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "pengi/audio/wav.hpp"
#include "pengi/core/error.hpp"
#include "pengi/core/rng.hpp"
#include "pengi/core/tensor.hpp"

namespace pengi::audio {

inline constexpr double kLogEpsilon = 1e-10;

/// Window and hop are sample counts.
struct MelConfig {
  std::uint32_t sample_rate = 16000;
  std::size_t n_mels = 64;
  std::size_t window = 1024;
  std::size_t hop = 320;
  double fmin = 50.0;
  double fmax = 8000.0;
  double clip_seconds = 2.0;

  std::size_t bins() const { return window / 2 + 1; }

  void validate() const {
    if (sample_rate == 0) throw ConfigError("mel.sample_rate must be positive");
    if (n_mels == 0) throw ConfigError("mel.n_mels must be positive");
    if (window < 2) throw ConfigError("mel.window must be at least 2 samples");
    if (hop == 0) throw ConfigError("mel.hop must be positive");
    if (!(fmin >= 0.0) || !(fmin < fmax)) throw ConfigError("mel.fmin must satisfy 0 <= fmin < fmax");
    if (fmax > sample_rate / 2.0) {
      throw ConfigError("mel.fmax " + std::to_string(fmax) + " Hz exceeds the Nyquist frequency " +
                        std::to_string(sample_rate / 2.0) + " Hz");
    }
    if (!(clip_seconds > 0.0)) throw ConfigError("mel.clip_seconds must be positive");
  }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// n_mels + 2 band edges in Hz, equally spaced on the HTK mel scale.
inline std::vector<double> mel_edges(const MelConfig& cfg) {
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  }
  return edges;
}

inline std::vector<double> mel_centers(const MelConfig& cfg) {
  auto e = mel_edges(cfg);
  return std::vector<double>(e.begin() + 1, e.end() - 1);
}

/// Triangular filters, [n_mels x (window/2 + 1)], unnormalized (peak 1).
inline Tensor<double> mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const auto edges = mel_edges(cfg);
  Tensor<double> fb = Tensor<double>::matrix(cfg.n_mels, cfg.bins());
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    for (std::size_t j = 0; j < cfg.bins(); ++j) {
      const double f = static_cast<double>(j) * cfg.sample_rate / static_cast<double>(cfg.window);
      const double w = std::min((f - lo) / (c - lo), (hi - f) / (hi - c));
      fb.at(m, j) = std::max(0.0, w);
    }
  }
  return fb;
}

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / static_cast<double>(n));
  return w;
}

inline std::size_t frame_count(std::size_t samples, const MelConfig& cfg) {
  if (samples < cfg.window) return 1;
  return (samples - cfg.window) / cfg.hop + 1;
}

/// |DFT| of a real frame, bins 0..n/2.
inline std::vector<double> magnitude_spectrum(std::span<const double> frame) {
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> in(frame.begin(), frame.end());
  std::vector<std::complex<double>> out;
  fft.fwd(out, in);
  std::vector<double> mag(frame.size() / 2 + 1);
  for (std::size_t k = 0; k < mag.size(); ++k) mag[k] = std::abs(out[k]);
  return mag;
}

struct MelSpectrogram {
  Tensor<double> frames;  // [T x n_mels]
  MelConfig config;

  std::size_t num_frames() const { return frames.rows(); }
};

/// Hann-windowed magnitude spectra through the mel filterbank, then log(x + 1e-10).
/// Clips shorter than one window are zero-padded to one window.
inline MelSpectrogram log_mel(const AudioClip& clip, const MelConfig& cfg) {
  cfg.validate();
  clip.validate();
  if (clip.sample_rate != cfg.sample_rate) {
    throw DataError("clip sample rate " + std::to_string(clip.sample_rate) + " Hz does not match configured " +
                    std::to_string(cfg.sample_rate) + " Hz");
  }
  std::vector<double> x = clip.samples;
  if (x.size() < cfg.window) x.resize(cfg.window, 0.0);
  const std::size_t frames = frame_count(x.size(), cfg);
  const Tensor<double> fb = mel_filterbank(cfg);
  const auto win = hann_window(cfg.window);
  Tensor<double> out = Tensor<double>::matrix(frames, cfg.n_mels);
  std::vector<double> frame(cfg.window);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < cfg.window; ++i) frame[i] = x[t * cfg.hop + i] * win[i];
    const auto mag = magnitude_spectrum(frame);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (std::size_t j = 0; j < mag.size(); ++j) e += fb.at(m, j) * mag[j];
      out.at(t, m) = std::log(e + kLogEpsilon);
    }
  }
  return MelSpectrogram{std::move(out), cfg};
}

/// Truncates at a seeded random offset or right-pads with zeros to exactly
/// round(seconds * rate) samples.
inline AudioClip fix_duration(const AudioClip& clip, double seconds, Rng& rng) {
  if (!(seconds > 0.0)) throw ConfigError("fix_duration: target duration must be positive");
  const auto target = static_cast<std::size_t>(std::llround(seconds * clip.sample_rate));
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  if (clip.samples.size() > target) {
    const auto offset = static_cast<std::size_t>(rng.below(clip.samples.size() - target + 1));
    out.samples.assign(clip.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                       clip.samples.begin() + static_cast<std::ptrdiff_t>(offset + target));
  } else {
    out.samples = clip.samples;
    out.samples.resize(target, 0.0);
  }
  return out;
}

}  // namespace pengi::audio
