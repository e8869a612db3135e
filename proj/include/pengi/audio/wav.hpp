#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "pengi/core/error.hpp"

namespace pengi::audio {

struct AudioClip {
  std::vector<double> samples;
  std::uint32_t sample_rate = 16000;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }

  void validate() const {
    if (sample_rate == 0) throw DataError("audio clip has zero sample rate");
    if (samples.empty()) throw DataError("audio clip is empty");
    for (double s : samples)
      if (!std::isfinite(s)) throw NumericError("audio clip contains non-finite samples");
  }
};

namespace detail {

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
  return v;
}

inline std::uint16_t get_u16(const std::string& s, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) | (static_cast<unsigned char>(s[at + 1]) << 8));
}

}  // namespace detail

/// Scale 32768 matches decoding, so decode followed by encode is lossless.
inline std::int16_t to_pcm16(double x) {
  return static_cast<std::int16_t>(std::clamp<long>(std::lround(x * 32768.0), -32768, 32767));
}

/// RIFF/WAVE bytes, PCM 16-bit little-endian mono.
inline std::string encode_wav(const AudioClip& clip) {
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::string s;
  s.reserve(44 + data_bytes);
  s += "RIFF";
  detail::put_u32(s, 36 + data_bytes);
  s += "WAVEfmt ";
  detail::put_u32(s, 16);
  detail::put_u16(s, 1);  // PCM
  detail::put_u16(s, 1);  // mono
  detail::put_u32(s, clip.sample_rate);
  detail::put_u32(s, clip.sample_rate * 2);
  detail::put_u16(s, 2);
  detail::put_u16(s, 16);
  s += "data";
  detail::put_u32(s, data_bytes);
  for (double x : clip.samples) detail::put_u16(s, static_cast<std::uint16_t>(to_pcm16(x)));
  return s;
}

/// Parses PCM16 WAV bytes; multi-channel audio is averaged to mono.
inline AudioClip decode_wav(const std::string& s, const std::string& name = "wav") {
  auto fail = [&name](const std::string& why) { return DataError(name + ": " + why); };
  if (s.size() < 12 || s.compare(0, 4, "RIFF") != 0 || s.compare(8, 4, "WAVE") != 0) throw fail("not a RIFF/WAVE file");
  std::size_t pos = 12;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (pos + 8 <= s.size()) {
    const std::string id = s.substr(pos, 4);
    const std::uint32_t len = detail::get_u32(s, pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > s.size()) throw fail("truncated chunk '" + id + "'");
    if (id == "fmt ") {
      if (len < 16) throw fail("short fmt chunk");
      format = detail::get_u16(s, body);
      channels = detail::get_u16(s, body + 2);
      rate = detail::get_u32(s, body + 4);
      bits = detail::get_u16(s, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      if (format != 1 || bits != 16) throw fail("only PCM 16-bit audio is supported");
      if (channels == 0) throw fail("zero channels");
      const std::size_t frames = len / (2u * channels);
      AudioClip clip;
      clip.sample_rate = rate;
      clip.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          acc += static_cast<std::int16_t>(detail::get_u16(s, body + 2 * (i * channels + c))) / 32768.0;
        }
        clip.samples[i] = acc / channels;
      }
      return clip;
    }
    pos = body + len + (len & 1u);
  }
  throw fail("no data chunk");
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  const std::string bytes = encode_wav(clip);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path.string());
}

}  // namespace pengi::audio
