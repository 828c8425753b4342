// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace sdbev {

// Binary record container: little-endian, magic + version + u64 JSON header
// length + JSON header + raw blobs. The header lists every field's name,
// dtype, shape and byte offset/length relative to the blob section, which is
// enough to round-trip bit-exactly.

inline constexpr std::uint32_t kRecordMagic = 0x53444252;  // "SDBR"
inline constexpr std::uint32_t kRecordVersion = 1;

struct RecordError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class RecordWriter {
 public:
  void add_f32(const std::string& name, std::vector<int> shape, const std::vector<float>& data) {
    add_raw(name, "f4", std::move(shape), data.data(), data.size() * sizeof(float),
            sizeof(float) * 8);
  }
  void add_f64(const std::string& name, std::vector<int> shape, const std::vector<double>& data) {
    add_raw(name, "f8", std::move(shape), data.data(), data.size() * sizeof(double),
            sizeof(double) * 8);
  }
  void add_u8(const std::string& name, std::vector<int> shape,
              const std::vector<std::uint8_t>& data) {
    add_raw(name, "u1", std::move(shape), data.data(), data.size(), 8);
  }
  void add_i64(const std::string& name, std::vector<int> shape,
               const std::vector<std::int64_t>& data) {
    add_raw(name, "i8", std::move(shape), data.data(), data.size() * sizeof(std::int64_t),
            sizeof(std::int64_t) * 8);
  }

  void set_meta(nlohmann::json meta) { meta_ = std::move(meta); }

  void write(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["fields"] = fields_;
    if (!meta_.is_null()) header["meta"] = meta_;
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RecordError("cannot open for writing: " + path.string());
    auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(kRecordMagic);
    put_u32(kRecordVersion);
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(reinterpret_cast<const char*>(blob_.data()),
              static_cast<std::streamsize>(blob_.size()));
    if (!out) throw RecordError("short write: " + path.string());
  }

 private:
  void add_raw(const std::string& name, const char* dtype, std::vector<int> shape,
               const void* data, size_t bytes, int bits_per_elem) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    if (static_cast<size_t>(n) * (static_cast<size_t>(bits_per_elem) / 8) != bytes)
      throw RecordError("field " + name + ": shape does not match data size");
    nlohmann::json f;
    f["name"] = name;
    f["dtype"] = dtype;
    f["shape"] = shape;
    f["offset"] = blob_.size();
    f["bytes"] = bytes;
    fields_.push_back(std::move(f));
    const auto* p = static_cast<const std::uint8_t*>(data);
    blob_.insert(blob_.end(), p, p + bytes);
  }

  nlohmann::json fields_ = nlohmann::json::array();
  nlohmann::json meta_;
  std::vector<std::uint8_t> blob_;
};

class RecordReader {
 public:
  explicit RecordReader(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RecordError("cannot open: " + path.string());
    std::uint32_t magic = 0, version = 0;
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&magic), 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (!in || magic != kRecordMagic) throw RecordError("bad magic: " + path.string());
    if (version != kRecordVersion) throw RecordError("unsupported version: " + path.string());
    if (hlen > (1ull << 30)) throw RecordError("oversized header: " + path.string());
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw RecordError("truncated header: " + path.string());
    try {
      header_ = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception&) {
      throw RecordError("corrupt header json: " + path.string());
    }
    blob_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    std::uint64_t need = 0;
    for (const auto& f : header_.at("fields"))
      need = std::max<std::uint64_t>(need, f.at("offset").get<std::uint64_t>() +
                                               f.at("bytes").get<std::uint64_t>());
    if (blob_.size() < need) throw RecordError("truncated blob: " + path.string());
  }

  const nlohmann::json& header() const { return header_; }
  nlohmann::json meta() const { return header_.contains("meta") ? header_["meta"] : nlohmann::json(); }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  std::vector<int> shape(const std::string& name) const {
    return field(name).at("shape").get<std::vector<int>>();
  }

  std::vector<float> f32(const std::string& name) const { return typed<float>(name, "f4"); }
  std::vector<double> f64(const std::string& name) const { return typed<double>(name, "f8"); }
  std::vector<std::uint8_t> u8(const std::string& name) const {
    return typed<std::uint8_t>(name, "u1");
  }
  std::vector<std::int64_t> i64(const std::string& name) const {
    return typed<std::int64_t>(name, "i8");
  }

 private:
  const nlohmann::json* find(const std::string& name) const {
    for (const auto& f : header_.at("fields"))
      if (f.at("name") == name) return &f;
    return nullptr;
  }
  const nlohmann::json& field(const std::string& name) const {
    const auto* f = find(name);
    if (!f) throw RecordError("missing field: " + name);
    return *f;
  }
  template <class T>
  std::vector<T> typed(const std::string& name, const char* dtype) const {
    const auto& f = field(name);
    if (f.at("dtype") != dtype) throw RecordError("dtype mismatch for field: " + name);
    const auto off = f.at("offset").get<std::uint64_t>();
    const auto bytes = f.at("bytes").get<std::uint64_t>();
    std::vector<T> out(bytes / sizeof(T));
    std::memcpy(out.data(), blob_.data() + off, bytes);
    return out;
  }

  nlohmann::json header_;
  std::vector<std::uint8_t> blob_;
};

}  // namespace sdbev
