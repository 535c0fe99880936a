#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowdet/model.hpp"
#include "flowdet/optim.hpp"

namespace flowdet {

// Binary checkpoint: magic "FSCK", version, config hash, step counter, named
// little-endian float32 tensors, optional Adam state, RNG state string.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::string rng_state;
};

namespace ckpt_detail {

template <typename V>
void put(std::ostream& os, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));  // little-endian hosts
}

template <typename V>
V get(std::istream& is, const std::string& what) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) {
    throw FormatError("checkpoint: truncated reading " + what);
  }
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const std::string& what) {
  const auto n = get<std::uint32_t>(is, what + " length");
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) throw FormatError("checkpoint: truncated reading " + what);
  return s;
}

template <typename T>
void put_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  put_string(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
  for (int e : t.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (T v : t.data) put<float>(os, static_cast<float>(v));
}

template <typename T>
std::pair<std::string, Tensor<T>> get_tensor(std::istream& is) {
  std::string name = get_string(is, "tensor name");
  const auto rank = get<std::uint32_t>(is, name + " rank");
  std::vector<int> shape(rank);
  for (auto& e : shape) e = static_cast<int>(get<std::uint32_t>(is, name + " extent"));
  Tensor<T> t = Tensor<T>::zeros(shape);
  for (auto& v : t.data) v = static_cast<T>(get<float>(is, name + " data"));
  return {std::move(name), std::move(t)};
}

inline bool in_namespaces(const std::string& name, const std::vector<std::string>& namespaces) {
  if (namespaces.empty()) return true;
  for (const auto& ns : namespaces) {
    if (name.rfind(ns + ".", 0) == 0) return true;
  }
  return false;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::string& path, const ModelParams<T>& model,
                     const CheckpointMeta& meta, const AdamState<T>* adam = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_checkpoint: cannot open " + path);
  using namespace ckpt_detail;
  os.write("FSCK", 4);
  put<std::uint32_t>(os, meta.version);
  put<std::uint64_t>(os, meta.config_hash);
  put<std::uint64_t>(os, meta.step);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.params.size()));
  for (const auto& [name, p] : model.params) put_tensor(os, name, p.value);
  put<std::uint8_t>(os, adam ? 1 : 0);
  if (adam) {
    put<std::uint64_t>(os, static_cast<std::uint64_t>(adam->step));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(adam->m.size()));
    for (const auto& [name, t] : adam->m) put_tensor(os, name, t);
    for (const auto& [name, t] : adam->v) put_tensor(os, name, t);
  }
  put_string(os, meta.rng_state);
  if (!os) throw FormatError("save_checkpoint: write failed for " + path);
}

// Loads parameter tensors whose names fall inside the requested namespaces
// (e.g. {"g"} for backbone-only init); empty list loads everything including
// optimizer state. Refuses unknown magic/version and shape mismatches.
template <typename T>
CheckpointMeta load_checkpoint(const std::string& path, ModelParams<T>& model,
                               const std::vector<std::string>& namespaces = {},
                               AdamState<T>* adam = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_checkpoint: cannot open " + path);
  using namespace ckpt_detail;
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FSCK", 4) != 0) {
    throw FormatError("load_checkpoint: " + path + " is not a checkpoint (bad magic)");
  }
  CheckpointMeta meta;
  meta.version = get<std::uint32_t>(is, "version");
  if (meta.version != kCheckpointVersion) {
    throw FormatError("load_checkpoint: unsupported version " + std::to_string(meta.version));
  }
  meta.config_hash = get<std::uint64_t>(is, "config hash");
  meta.step = get<std::uint64_t>(is, "step");
  const auto n_tensors = get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto [name, t] = get_tensor<T>(is);
    if (!in_namespaces(name, namespaces)) continue;
    auto it = model.params.find(name);
    if (it == model.params.end()) {
      throw ConfigError("load_checkpoint: parameter " + name + " not in the current model");
    }
    if (!it->second.value.same_shape(t)) {
      throw ConfigError("load_checkpoint: shape mismatch for " + name + ": checkpoint " +
                        t.shape_str() + " vs model " + it->second.value.shape_str());
    }
    it->second.value = std::move(t);
  }
  const auto has_adam = get<std::uint8_t>(is, "adam flag");
  if (has_adam) {
    const auto adam_step = get<std::uint64_t>(is, "adam step");
    const auto n_state = get<std::uint32_t>(is, "adam tensor count");
    AdamState<T> loaded;
    loaded.step = static_cast<std::int64_t>(adam_step);
    for (std::uint32_t i = 0; i < n_state; ++i) {
      auto [name, t] = get_tensor<T>(is);
      loaded.m.emplace(std::move(name), std::move(t));
    }
    for (std::uint32_t i = 0; i < n_state; ++i) {
      auto [name, t] = get_tensor<T>(is);
      loaded.v.emplace(std::move(name), std::move(t));
    }
    // optimizer state only carries over on a full (unfiltered) resume
    if (adam && namespaces.empty()) *adam = std::move(loaded);
  }
  meta.rng_state = get_string(is, "rng state");
  return meta;
}

// FNV-1a over the float32 serialization of all parameters in a namespace;
// used for the alternating-schedule stage-wiring audit.
template <typename T>
std::uint64_t namespace_hash(const ModelParams<T>& model, const std::string& ns) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, p] : model.params) {
    if (!ckpt_detail::in_namespaces(name, {ns})) continue;
    mix(name.data(), name.size());
    for (T v : p.value.data) {
      const float f = static_cast<float>(v);
      mix(&f, sizeof(f));
    }
  }
  return h;
}

}  // namespace flowdet
