#pragma once

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "ttpk/tensor.hpp"

namespace ttpk {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using GradMap = std::map<std::string, Tensor>;

// Named parameters plus per-parameter Adam state. Names are grouped by
// dotted prefixes ("enc.", "self.", "app.", "dec.", "supb.", "xf.",
// "perc.") so whole groups can be frozen.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor m;  // first moment
    Tensor v;  // second moment
    std::int64_t step = 0;
    bool frozen = false;
    bool trainable = true;  // false: constant (still checkpointed)
  };

  void add(const std::string& name, Tensor t, bool trainable = true) {
    if (entries_.count(name)) throw StateError("duplicate parameter name: " + name);
    Entry e;
    e.m = Tensor(t.shape);
    e.v = Tensor(t.shape);
    e.value = std::move(t);
    e.trainable = trainable;
    e.frozen = !trainable;
    entries_.emplace(name, std::move(e));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor& get(const std::string& name) const { return entry(name).value; }
  Tensor& mutable_value(const std::string& name) { return entry(name).value; }
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  void freeze_prefix(const std::string& prefix) {
    for (auto& [name, e] : entries_)
      if (name.rfind(prefix, 0) == 0) e.frozen = true;
  }

  void unfreeze_all() {
    for (auto& [name, e] : entries_)
      if (e.trainable) e.frozen = false;
  }

  bool is_frozen(const std::string& name) const { return entry(name).frozen; }

  // Registers every parameter on the tape. Trainable entries become
  // gradient leaves; constants stay detached.
  void attach(Tape& tape) {
    for (auto& [name, e] : entries_) {
      if (e.trainable)
        tape.leaf(e.value);
      else
        e.value.node = -1;
    }
  }

  // Gradients for every trainable, reachable parameter.
  GradMap collect_grads(const Tape& tape) const {
    GradMap out;
    for (const auto& [name, e] : entries_)
      if (e.trainable && tape.has_grad(e.value)) out.emplace(name, tape.grad(e.value));
    return out;
  }

  // Bias-corrected Adam. Frozen parameters are untouched; an unfrozen
  // parameter with no gradient is a caller bug.
  void adam_step(const GradMap& grads, const AdamConfig& cfg) {
    for (auto& [name, e] : entries_) {
      if (e.frozen || !e.trainable) continue;
      auto it = grads.find(name);
      if (it == grads.end()) throw StateError("missing gradient for unfrozen parameter: " + name);
      const Tensor& g = it->second;
      if (g.shape != e.value.shape)
        throw DimensionError("gradient shape mismatch for " + name);
      e.step += 1;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
      double* p = e.value.ptr();
      double* m = e.m.ptr();
      double* v = e.v.ptr();
      const double* gp = g.ptr();
      const std::int64_t n = e.value.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gp[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gp[i] * gp[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }

  void copy_values_from(const ParamStore& other) {
    for (auto& [name, e] : entries_) {
      const Entry& o = other.entry(name);
      e.value = o.value.clone();
      e.m = o.m.clone();
      e.v = o.v.clone();
      e.step = o.step;
    }
  }

  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, e] : entries_) {
      Entry c;
      c.value = e.value.clone();
      c.m = e.m.clone();
      c.v = e.v.clone();
      c.step = e.step;
      c.frozen = e.frozen;
      c.trainable = e.trainable;
      out.entries_.emplace(name, std::move(c));
    }
    return out;
  }

  bool values_equal(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (const auto& [name, e] : entries_) {
      if (!other.has(name)) return false;
      const Entry& o = other.entry(name);
      if (e.value.shape != o.value.shape) return false;
      for (std::int64_t i = 0; i < e.value.numel(); ++i)
        if (e.value[i] != o.value[i]) return false;
    }
    return true;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: magic "TTPK", u32 version, then repeated records of
// (u32 name length, name bytes, u32 rank, u32 dims..., f64 data), all
// little-endian.
// ---------------------------------------------------------------------------

namespace ckpt {

constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::FILE* f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  if (std::fwrite(b, 1, 4, f) != 4) throw IoError("checkpoint write failed");
}

inline std::uint32_t read_u32(std::FILE* f, const std::string& path) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) throw IoError("truncated checkpoint: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f64s(std::FILE* f, const double* v, std::size_t n) {
  static_assert(sizeof(double) == 8);
  // Assumes little-endian host, which is all this project targets.
  if (std::fwrite(v, 8, n, f) != n) throw IoError("checkpoint write failed");
}

inline void read_f64s(std::FILE* f, double* v, std::size_t n, const std::string& path) {
  if (std::fread(v, 8, n, f) != n) throw IoError("truncated checkpoint: " + path);
}

}  // namespace ckpt

// Flat named-tensor records; callers put params, optimizer state, rng
// words and metadata in the same container.
inline void save_records(const std::string& path, const std::map<std::string, Tensor>& records) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open for write: " + path);
  std::fwrite("TTPK", 1, 4, f);
  ckpt::write_u32(f, ckpt::kVersion);
  ckpt::write_u32(f, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    ckpt::write_u32(f, static_cast<std::uint32_t>(name.size()));
    std::fwrite(name.data(), 1, name.size(), f);
    ckpt::write_u32(f, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) ckpt::write_u32(f, static_cast<std::uint32_t>(d));
    ckpt::write_f64s(f, t.ptr(), static_cast<std::size_t>(t.numel()));
  }
  std::fclose(f);
}

inline std::map<std::string, Tensor> load_records(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "TTPK", 4) != 0) {
    std::fclose(f);
    throw IoError("bad checkpoint magic: " + path);
  }
  std::map<std::string, Tensor> out;
  try {
    const std::uint32_t version = ckpt::read_u32(f, path);
    if (version != ckpt::kVersion)
      throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    const std::uint32_t count = ckpt::read_u32(f, path);
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t len = ckpt::read_u32(f, path);
      std::string name(len, '\0');
      if (std::fread(name.data(), 1, len, f) != len) throw IoError("truncated checkpoint: " + path);
      const std::uint32_t rank = ckpt::read_u32(f, path);
      std::vector<int> shape(rank);
      for (std::uint32_t d = 0; d < rank; ++d)
        shape[d] = static_cast<int>(ckpt::read_u32(f, path));
      Tensor t(shape);
      ckpt::read_f64s(f, t.ptr(), static_cast<std::size_t>(t.numel()), path);
      out.emplace(std::move(name), std::move(t));
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return out;
}

inline Tensor u64_to_record(std::uint64_t v) {
  return Tensor::from({2}, {static_cast<double>(v >> 32), static_cast<double>(v & 0xffffffffULL)});
}

inline std::uint64_t record_to_u64(const Tensor& t) {
  return (static_cast<std::uint64_t>(t[0]) << 32) | static_cast<std::uint64_t>(t[1]);
}

}  // namespace ttpk
