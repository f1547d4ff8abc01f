#pragma once

// Portable weight file (.nstw), little-endian:
//
//   "NSTW" | u32 version = 1 | u32 metadata_len | metadata (UTF-8 key=value lines)
//   | u32 layer_count | per layer: u16 name_len | name | u8 tensor_count
//   | per tensor: u8 rank | u32 dims[rank] | f32 data[prod(dims)]
//   | u32 CRC-32 of every preceding byte

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "error.hpp"
#include "io.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace pentimento {

inline constexpr std::array<char, 4> kWeightMagic{'N', 'S', 'T', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

/// A tensor of arbitrary rank as it appears in the weight file.
struct StoredTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  friend bool operator==(const StoredTensor& a, const StoredTensor& b) {
    // Bitwise, so NaN payloads and signed zeros compare as stored.
    return a.dims == b.dims && a.data.size() == b.data.size() &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
  }
};

struct WeightRecord {
  std::string name;
  std::vector<StoredTensor> tensors;
  friend bool operator==(const WeightRecord&, const WeightRecord&) = default;
};

/// Named convolution kernels and biases plus free-form metadata. Records keep
/// file order.
class WeightStore {
 public:
  using Metadata = std::vector<std::pair<std::string, std::string>>;

  const Metadata& metadata() const noexcept { return metadata_; }
  const std::vector<WeightRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }

  std::optional<std::string> metadata_value(std::string_view key) const {
    for (const auto& [k, v] : metadata_)
      if (k == key) return v;
    return std::nullopt;
  }

  void set_metadata(std::string key, std::string value) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
      throw ConfigError("metadata key/value may not contain '=' or newlines: " + key);
    for (auto& [k, v] : metadata_)
      if (k == key) {
        v = std::move(value);
        return;
      }
    metadata_.emplace_back(std::move(key), std::move(value));
  }

  const WeightRecord* find(std::string_view name) const {
    for (const auto& r : records_)
      if (r.name == name) return &r;
    return nullptr;
  }

  void add(WeightRecord record) {
    if (find(record.name)) throw ConfigError("duplicate weight record '" + record.name + "'");
    if (record.name.size() > 0xFFFF) throw ConfigError("weight record name too long");
    if (record.tensors.size() > 0xFF) throw ConfigError("too many tensors in " + record.name);
    for (const auto& t : record.tensors) {
      if (t.dims.size() > 0xFF) throw ConfigError("tensor rank too large in " + record.name);
      std::size_t count = 1;
      for (auto d : t.dims) count *= d;
      if (count != t.data.size())
        throw ShapeError("tensor data length mismatch in record '" + record.name + "'");
    }
    records_.push_back(std::move(record));
  }

  /// Stores a convolution as (kernel, bias).
  void add_conv(std::string name, const Tensor& kernel, std::span<const float> bias) {
    const Dims& d = kernel.dims();
    WeightRecord rec{std::move(name), {}};
    rec.tensors.push_back({{std::uint32_t(d.n), std::uint32_t(d.c), std::uint32_t(d.h),
                            std::uint32_t(d.w)},
                           kernel.vec()});
    rec.tensors.push_back({{std::uint32_t(bias.size())}, {bias.begin(), bias.end()}});
    add(std::move(rec));
  }

  /// Kernel and bias of the convolution stored under `name`. A record with a
  /// lone kernel gets a zero bias.
  ConvParams<float> conv(std::string_view name, Padding padding = Padding::reflect) const {
    const WeightRecord* rec = find(name);
    if (!rec) throw ConfigError("no weights for layer '" + std::string(name) + "'");
    if (rec->tensors.empty() || rec->tensors.size() > 2 || rec->tensors[0].dims.size() != 4)
      throw ConfigError("layer '" + std::string(name) + "' is not a (kernel[, bias]) conv record");
    const auto& k = rec->tensors[0];
    ConvParams<float> params;
    params.kernel = Tensor(Dims{k.dims[0], k.dims[1], k.dims[2], k.dims[3]}, k.data);
    params.padding = padding;
    if (rec->tensors.size() == 2) {
      const auto& b = rec->tensors[1];
      if (b.dims.size() != 1 || b.dims[0] != k.dims[0])
        throw ConfigError("layer '" + std::string(name) + "' bias does not match c_out");
      params.bias = b.data;
    } else {
      params.bias.assign(k.dims[0], 0.0f);
    }
    params.validate();
    return params;
  }

  friend bool operator==(const WeightStore&, const WeightStore&) = default;

 private:
  Metadata metadata_;
  std::vector<WeightRecord> records_;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void le(U value) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                    std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>;
    auto bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(std::uint8_t(bits >> (8 * i)));
  }
  std::vector<std::uint8_t>& buffer() noexcept { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw TruncationError(std::string("truncated while reading ") + what, pos_);
  }
  template <typename U>
  U le(const char* what) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                    std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>;
    need(sizeof(U), what);
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= Bits(Bits(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }
  std::string_view text(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = uInt(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return std::uint32_t(crc);
}

inline WeightStore::Metadata parse_metadata(std::string_view text, std::size_t base_offset) {
  WeightStore::Metadata meta;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw FormatError("metadata line without '='", base_offset + start);
      meta.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    }
    start = end + 1;
  }
  return meta;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_weights(const WeightStore& store) {
  detail::ByteWriter w;
  w.bytes(kWeightMagic.data(), kWeightMagic.size());
  w.le(kWeightVersion);
  std::string meta;
  for (const auto& [k, v] : store.metadata()) meta += k + "=" + v + "\n";
  w.le(std::uint32_t(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.le(std::uint32_t(store.size()));
  for (const auto& rec : store.records()) {
    w.le(std::uint16_t(rec.name.size()));
    w.bytes(rec.name.data(), rec.name.size());
    w.le(std::uint8_t(rec.tensors.size()));
    for (const auto& t : rec.tensors) {
      w.le(std::uint8_t(t.dims.size()));
      for (auto d : t.dims) w.le(d);
      for (float v : t.data) w.le(v);
    }
  }
  const std::uint32_t crc = detail::crc32_of(w.buffer());
  w.le(crc);
  return std::move(w.buffer());
}

inline WeightStore decode_weights(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.text(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kWeightMagic.begin()))
    throw FormatError("bad magic, expected NSTW", 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kWeightVersion)
    throw FormatError("unsupported version " + std::to_string(version), 4);

  WeightStore store;
  const auto meta_len = r.le<std::uint32_t>("metadata length");
  const std::size_t meta_at = r.offset();
  const auto meta_text = r.text(meta_len, "metadata");

  const auto layer_count = r.le<std::uint32_t>("layer count");
  std::vector<WeightRecord> records;
  for (std::uint32_t l = 0; l < layer_count; ++l) {
    WeightRecord rec;
    const auto name_len = r.le<std::uint16_t>("layer name length");
    rec.name = std::string(r.text(name_len, "layer name"));
    const auto tensor_count = r.le<std::uint8_t>("tensor count");
    for (std::uint8_t t = 0; t < tensor_count; ++t) {
      StoredTensor tensor;
      const auto rank = r.le<std::uint8_t>("tensor rank");
      std::uint64_t count = 1;
      for (std::uint8_t i = 0; i < rank; ++i) {
        tensor.dims.push_back(r.le<std::uint32_t>("tensor dims"));
        count *= tensor.dims.back();
        if (count > r.remaining() / 4)
          throw TruncationError("truncated while reading tensor data", r.offset());
      }
      r.need(count * 4, "tensor data");
      tensor.data.resize(count);
      for (auto& v : tensor.data) v = r.le<float>("tensor data");
      rec.tensors.push_back(std::move(tensor));
    }
    records.push_back(std::move(rec));
  }

  const std::size_t crc_at = r.offset();
  const auto stored_crc = r.le<std::uint32_t>("checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checksum", r.offset());
  const auto actual_crc = detail::crc32_of(bytes.first(crc_at));
  if (stored_crc != actual_crc) throw ChecksumError("CRC-32 mismatch", crc_at);

  for (auto& [k, v] : detail::parse_metadata(meta_text, meta_at)) store.set_metadata(k, v);
  for (auto& rec : records) {
    const std::string name = rec.name;
    try {
      store.add(std::move(rec));
    } catch (const Error& e) {
      throw FormatError(std::string("invalid record '") + name + "': " + e.what(), crc_at);
    }
  }
  return store;
}

inline WeightStore load_weights(const std::filesystem::path& path) {
  return decode_weights(read_file_bytes(path));
}

inline void save_weights(const WeightStore& store, const std::filesystem::path& path) {
  write_file_atomic(path, encode_weights(store));
}

}  // namespace pentimento
