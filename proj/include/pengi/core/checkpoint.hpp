#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "pengi/core/error.hpp"
#include "pengi/core/tensor.hpp"

namespace pengi {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kBytes = 2 };

inline std::size_t dtype_width(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kBytes: return 1;
  }
  throw DataError("unknown checkpoint dtype tag");
}

/// Versioned binary container for named arrays.
///
///   "PALM" | u32 version | record*
///   record = u32 name_len | name (UTF-8) | u8 dtype | u32 rank | u64 dims[rank] | raw LE values
///
/// Records keep insertion order so that serialization is a pure function of
/// the contents.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr char kMagic[4] = {'P', 'A', 'L', 'M'};

  struct Record {
    std::string name;
    DType dtype = DType::kF32;
    std::vector<std::uint64_t> dims;
    std::string raw;
  };

  template <std::floating_point T>
  void add(std::string name, const Tensor<T>& t) {
    Record r;
    r.name = std::move(name);
    r.dtype = std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
    r.dims.assign(t.shape().begin(), t.shape().end());
    r.raw.assign(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(T));
    put(std::move(r));
  }

  void add_bytes(std::string name, std::string_view bytes) {
    Record r;
    r.name = std::move(name);
    r.dtype = DType::kBytes;
    r.dims = {bytes.size()};
    r.raw.assign(bytes);
    put(std::move(r));
  }

  bool has(std::string_view name) const { return find(name) != nullptr; }
  const std::vector<Record>& records() const noexcept { return records_; }

  const Record& record(std::string_view name) const {
    const Record* r = find(name);
    if (!r) throw DataError("checkpoint has no record '" + std::string(name) + "'");
    return *r;
  }

  std::string bytes(std::string_view name) const {
    const Record& r = record(name);
    if (r.dtype != DType::kBytes) throw DataError("checkpoint record '" + r.name + "' is not a byte record");
    return r.raw;
  }

  /// Reads a numeric record, converting precision if needed.
  template <std::floating_point T>
  Tensor<T> tensor(std::string_view name) const {
    const Record& r = record(name);
    Shape shape(r.dims.begin(), r.dims.end());
    const std::size_t n = shape_size(shape);
    std::vector<T> data(n);
    if (r.dtype == DType::kF32) {
      std::vector<float> tmp(n);
      std::memcpy(tmp.data(), r.raw.data(), n * sizeof(float));
      std::copy(tmp.begin(), tmp.end(), data.begin());
    } else if (r.dtype == DType::kF64) {
      std::vector<double> tmp(n);
      std::memcpy(tmp.data(), r.raw.data(), n * sizeof(double));
      std::copy(tmp.begin(), tmp.end(), data.begin());
    } else {
      throw DataError("checkpoint record '" + r.name + "' is not numeric");
    }
    return Tensor<T>(std::move(shape), std::move(data));
  }

  std::string serialize() const {
    std::string out(kMagic, 4);
    put_u32(out, kVersion);
    for (const auto& r : records_) {
      put_u32(out, static_cast<std::uint32_t>(r.name.size()));
      out += r.name;
      out.push_back(static_cast<char>(r.dtype));
      put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
      for (auto d : r.dims) put_u64(out, d);
      out += r.raw;
    }
    return out;
  }

  static Checkpoint parse(std::string_view in) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > in.size()) throw DataError("truncated checkpoint");
    };
    need(8);
    if (in.substr(0, 4) != std::string_view(kMagic, 4)) throw DataError("not a checkpoint: bad magic bytes");
    pos = 4;
    const std::uint32_t version = get_u32(in, pos);
    if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    while (pos < in.size()) {
      Record r;
      need(4);
      const std::uint32_t len = get_u32(in, pos);
      need(len + 5);
      r.name.assign(in.substr(pos, len));
      pos += len;
      r.dtype = static_cast<DType>(static_cast<std::uint8_t>(in[pos++]));
      const std::uint32_t rank = get_u32(in, pos);
      need(std::size_t{rank} * 8);
      std::uint64_t n = 1;
      for (std::uint32_t i = 0; i < rank; ++i) {
        r.dims.push_back(get_u64(in, pos));
        n *= r.dims.back();
      }
      const std::size_t nbytes = n * dtype_width(r.dtype);
      need(nbytes);
      r.raw.assign(in.substr(pos, nbytes));
      pos += nbytes;
      ck.put(std::move(r));
    }
    return ck;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    const std::string s = serialize();
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint " + path.string());
    std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse(s);
  }

 private:
  void put(Record r) {
    for (auto& existing : records_) {
      if (existing.name == r.name) {
        existing = std::move(r);
        return;
      }
    }
    records_.push_back(std::move(r));
  }

  const Record* find(std::string_view name) const {
    for (const auto& r : records_)
      if (r.name == name) return &r;
    return nullptr;
  }

  static void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
  static void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
  static std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
    std::uint32_t v;
    std::memcpy(&v, in.data() + pos, 4);
    pos += 4;
    return v;
  }
  static std::uint64_t get_u64(std::string_view in, std::size_t& pos) {
    std::uint64_t v;
    std::memcpy(&v, in.data() + pos, 8);
    pos += 8;
    return v;
  }

  std::vector<Record> records_;
};

}  // namespace pengi
