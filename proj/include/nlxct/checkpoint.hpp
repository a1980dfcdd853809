#pragma once

// Binary checkpoints: "NLCK", u32 version = 1, u32 entry count, then per
// entry {u16 name length, name, u8 dtype, u8 rank, rank × u64 dims, payload},
// all little-endian. dtype 0 holds f32 tensors; dtype 1 holds UTF-8 text
// (rank 1, dim = byte count) for run metadata.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "nlxct/layers.hpp"
#include "nlxct/synth.hpp"

namespace nlxct {

class CheckpointError : public IoError {
 public:
  using IoError::IoError;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class BadVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

enum class DType : std::uint8_t { F32 = 0, Text = 1 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<float> values;  // F32
  std::string text;           // Text
};

class Checkpoint {
 public:
  void add_tensor(const std::string& name, const Tensor& t) {
    CheckpointEntry e{name, DType::F32, t.shape(), {}, {}};
    e.values.reserve(t.numel());
    for (double v : t.data()) e.values.push_back(static_cast<float>(v));
    put(std::move(e));
  }

  void add_text(const std::string& name, const std::string& text) {
    put(CheckpointEntry{name, DType::Text, {text.size()}, {}, text});
  }

  /// Every parameter (trainable or not), so slow traces travel with fast weights.
  void add_params(const ParamList& params) {
    for (const auto& p : params) add_tensor(p.name, p.tensor);
  }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const CheckpointEntry& entry(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw CheckpointError("checkpoint has no entry '" + name + "'");
    return *e;
  }

  Tensor tensor(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != DType::F32) throw CheckpointError("checkpoint entry '" + name + "' is not a tensor");
    return Tensor(e.shape, std::vector<double>(e.values.begin(), e.values.end()));
  }

  const std::string& text(const std::string& name) const {
    const auto& e = entry(name);
    if (e.dtype != DType::Text) throw CheckpointError("checkpoint entry '" + name + "' is not text");
    return e.text;
  }

  /// Copies stored values into the parameters whose names start with prefix
  /// (all when empty). Returns the number of tensors restored.
  std::size_t restore(const ParamList& params, const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& p : params) {
      if (!prefix.empty() && !p.name.starts_with(prefix)) continue;
      const auto& e = entry(p.name);
      if (e.dtype != DType::F32 || e.shape != p.tensor.shape())
        throw DimensionError("checkpoint entry '" + p.name + "' has shape " + shape_str(e.shape) + ", model expects " +
                             shape_str(p.tensor.shape()));
      Tensor t = p.tensor;
      for (std::size_t i = 0; i < e.values.size(); ++i) t[i] = e.values[i];
      ++n;
    }
    return n;
  }

  const std::vector<CheckpointEntry>& entries() const { return entries_; }

 private:
  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  void put(CheckpointEntry e) {
    if (e.name.empty() || e.name.size() > 0xFFFF) throw ContractError("checkpoint entry names must be 1..65535 bytes");
    if (e.shape.size() > 0xFF) throw ContractError("checkpoint entry '" + e.name + "' has too many dimensions");
    for (auto& old : entries_)
      if (old.name == e.name) {
        old = std::move(e);
        return;
      }
    entries_.push_back(std::move(e));
  }

  std::vector<CheckpointEntry> entries_;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "NLCK";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.entries().size()));
  for (const auto& e : ck.entries()) {
    out.push_back(static_cast<char>(e.name.size() & 0xFF));
    out.push_back(static_cast<char>(e.name.size() >> 8));
    out += e.name;
    out.push_back(static_cast<char>(e.dtype));
    out.push_back(static_cast<char>(e.shape.size()));
    for (std::size_t d : e.shape) {
      detail::put_u32(out, static_cast<std::uint32_t>(std::uint64_t(d) & 0xFFFFFFFFu));
      detail::put_u32(out, static_cast<std::uint32_t>(std::uint64_t(d) >> 32));
    }
    if (e.dtype == DType::F32) {
      for (float v : e.values) detail::put_f32(out, v);
    } else {
      out += e.text;
    }
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw TruncatedError(origin + ": truncated at byte " + std::to_string(pos));
  };
  need(4);
  if (std::memcmp(p, "NLCK", 4) != 0) throw BadMagicError(origin + ": not an NLCK checkpoint");
  pos = 4;
  need(8);
  const std::uint32_t version = detail::get_u32(p + pos);
  if (version != 1) throw BadVersionError(origin + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(p + pos + 4);
  pos += 8;
  Checkpoint ck;
  for (std::uint32_t k = 0; k < count; ++k) {
    need(2);
    const std::size_t len = std::size_t(p[pos]) | std::size_t(p[pos + 1]) << 8;
    pos += 2;
    need(len + 2);
    CheckpointEntry e;
    e.name.assign(bytes, pos, len);
    pos += len;
    const std::uint8_t dtype = p[pos], rank = p[pos + 1];
    pos += 2;
    if (dtype > 1) throw CheckpointError(origin + ": entry '" + e.name + "' has unknown dtype " + std::to_string(dtype));
    need(8 * std::size_t(rank));
    std::uint64_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const std::uint64_t d = std::uint64_t(detail::get_u32(p + pos)) | std::uint64_t(detail::get_u32(p + pos + 4)) << 32;
      pos += 8;
      e.shape.push_back(static_cast<std::size_t>(d));
      numel *= d;
    }
    if (dtype == 0) {
      if (numel > (bytes.size() - pos) / 4) throw TruncatedError(origin + ": entry '" + e.name + "' payload truncated");
      e.values.resize(numel);
      for (std::size_t i = 0; i < numel; ++i) e.values[i] = detail::get_f32(p + pos + 4 * i);
      pos += 4 * numel;
      ck.add_tensor(e.name, Tensor(e.shape, std::vector<double>(e.values.begin(), e.values.end())));
    } else {
      if (rank != 1) throw CheckpointError(origin + ": text entry '" + e.name + "' must have rank 1");
      need(numel);
      ck.add_text(e.name, bytes.substr(pos, numel));
      pos += numel;
    }
  }
  if (pos != bytes.size()) throw CheckpointError(origin + ": trailing bytes after the last entry");
  return ck;
}

/// Writes to a temporary file and renames it into place.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint '" + path.string() + "' does not exist");
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace nlxct
