// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "seemore/model.hpp"

// File layout:
//   "SMRE" | u32 format_version | u64 header_bytes | header text | tensor blobs
// The header is line-oriented text:
//   dtype: f64|f32
//   meta: key = value          (optional, repeated)
//   config: key = value        (model config, repeated)
//   tensor: name d0,d1,... byte_offset
// Blobs are little-endian scalars, concatenated in directory order.

namespace seemore {

inline constexpr char kCheckpointMagic[4] = {'S', 'M', 'R', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Archive {
  std::optional<ModelConfig> config;
  std::vector<std::pair<std::string, std::string>> meta;
  NamedTensors<T> tensors;
  std::uint32_t format_version = kCheckpointVersion;
  std::string dtype;  // dtype found on disk when read
};

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
  return std::is_same_v<T, double> ? "f64" : "f32";
}

template <class U>
void put_le(std::string& out, U value) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  const auto bits = std::bit_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const char* p) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<U>(bits);
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

}  // namespace detail

template <class T>
std::string serialize(const Archive<T>& a) {
  std::ostringstream header;
  header << "dtype: " << detail::dtype_name<T>() << "\n";
  for (const auto& [k, v] : a.meta) header << "meta: " << k << " = " << v << "\n";
  if (a.config) {
    std::istringstream lines(config_io::to_text(*a.config));
    for (std::string line; std::getline(lines, line);) header << "config: " << line << "\n";
  }
  std::uint64_t offset = 0;
  for (const auto& [name, t] : a.tensors) {
    if (name.find_first_of(" \t\n") != std::string::npos) throw ContractError("tensor name with whitespace: " + name);
    std::string dims;
    for (std::size_t i = 0; i < t.rank(); ++i) dims += (i ? "," : "") + std::to_string(t.dim(i));
    header << "tensor: " << name << " " << dims << " " << offset << "\n";
    offset += t.numel() * sizeof(T);
  }
  const std::string text = header.str();
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, a.format_version);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : a.tensors)
    for (T v : t.data()) detail::put_le<T>(out, v);
  return out;
}

template <class T>
Archive<T> deserialize(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic (not an SMRE file)");
  }
  if (bytes.size() < 16) throw TruncatedError("checkpoint: truncated preamble");
  Archive<T> a;
  a.format_version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (a.format_version != kCheckpointVersion) {
    throw VersionError("checkpoint: format version " + std::to_string(a.format_version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  const auto header_len = detail::get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw TruncatedError("checkpoint: truncated header");
  const std::string header = bytes.substr(16, header_len);
  const std::size_t blob_start = 16 + header_len;

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::string config_text;
  std::istringstream lines(header);
  for (std::string line; std::getline(lines, line);) {
    if (line.empty()) continue;
    const auto colon = line.find(": ");
    if (colon == std::string::npos) throw HeaderError("checkpoint: malformed header line '" + line + "'");
    const std::string tag = line.substr(0, colon), body = line.substr(colon + 2);
    if (tag == "dtype") {
      if (body != "f64" && body != "f32") throw HeaderError("checkpoint: unknown dtype " + body);
      a.dtype = body;
    } else if (tag == "meta") {
      const auto eq = body.find(" = ");
      if (eq == std::string::npos) throw HeaderError("checkpoint: malformed meta line");
      a.meta.emplace_back(body.substr(0, eq), body.substr(eq + 3));
    } else if (tag == "config") {
      config_text += body + "\n";
    } else if (tag == "tensor") {
      std::istringstream fields(body);
      Entry e;
      std::string dims;
      if (!(fields >> e.name >> dims >> e.offset)) throw HeaderError("checkpoint: malformed tensor line");
      try {
        for (auto d : config_io::parse_list("shape", dims)) e.shape.push_back(d);
      } catch (const ConfigError&) {
        throw HeaderError("checkpoint: malformed shape for " + e.name);
      }
      if (e.shape.empty()) throw HeaderError("checkpoint: empty shape for " + e.name);
      entries.push_back(std::move(e));
    } else {
      throw HeaderError("checkpoint: unknown header tag '" + tag + "'");
    }
  }
  if (a.dtype.empty()) throw HeaderError("checkpoint: missing dtype");
  if (!config_text.empty()) {
    try {
      a.config = config_io::model_from_text(config_text);
    } catch (const ConfigError& e) {
      throw HeaderError(std::string("checkpoint: bad config: ") + e.what());
    }
  }
  const std::size_t width = a.dtype == "f64" ? 8 : 4;
  std::uint64_t expected = 0;
  for (const auto& e : entries) {
    if (e.offset != expected) throw HeaderError("checkpoint: non-contiguous offset for " + e.name);
    const std::uint64_t count = shape_numel(e.shape);
    if (blob_start + e.offset + count * width > bytes.size()) {
      throw TruncatedError("checkpoint: blob for " + e.name + " is truncated");
    }
    std::vector<T> values(count);
    const char* p = bytes.data() + blob_start + e.offset;
    for (std::uint64_t i = 0; i < count; ++i) {
      values[i] = width == 8 ? static_cast<T>(detail::get_le<double>(p + 8 * i))
                             : static_cast<T>(detail::get_le<float>(p + 4 * i));
    }
    a.tensors.emplace_back(e.name, Tensor<T>(e.shape, std::move(values)));
    expected += count * width;
  }
  if (blob_start + expected != bytes.size()) throw HeaderError("checkpoint: trailing bytes after last blob");
  return a;
}

template <class T>
void write_archive(const std::filesystem::path& path, const Archive<T>& a) {
  detail::write_atomically(path, serialize(a));
}

template <class T>
Archive<T> read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize<T>(ss.str());
}

template <class T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path,
                     std::vector<std::pair<std::string, std::string>> meta = {}) {
  Archive<T> a;
  a.config = model.config();
  a.meta = std::move(meta);
  a.tensors = model.parameters();
  write_archive(path, a);
}

/// Rebuilds a model from an archive. All names and shapes must match the
/// architecture exactly; nothing is returned on mismatch.
template <class T>
Model<T> model_from_archive(const Archive<T>& a) {
  if (!a.config) throw HeaderError("checkpoint: no model config in header");
  Model<T> model(*a.config, 0);
  auto params = model.parameters();
  if (params.size() != a.tensors.size()) {
    throw HeaderError("checkpoint: holds " + std::to_string(a.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, src] = a.tensors[i];
    if (name != params[i].first) throw HeaderError("checkpoint: expected tensor " + params[i].first + ", found " + name);
    if (src.shape() != params[i].second.shape()) throw HeaderError("checkpoint: shape mismatch for " + name);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(a.tensors[i].second.data().begin(), a.tensors[i].second.data().end(),
              params[i].second.mutable_data().begin());
  }
  return model;
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return model_from_archive(read_archive<T>(path));
}

}  // namespace seemore
