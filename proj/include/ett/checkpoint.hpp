#pragma once

// Single-file named-tensor container.
//
// Layout (all integers little-endian):
//   magic   "NTC1" (4 bytes)
//   count   u32
//   then per tensor, ordered lexicographically by name:
//     name_len u32, name bytes (utf-8)
//     dtype    u32 (0 = f32, the only defined value)
//     rank     u32, dims u64[rank]
//     payload  f32[product(dims)], row-major
//
// Values are stored as f32; loading widens back to f64. A save/load/save
// round trip is byte-identical because the f32 payload is preserved exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ett/tensor.hpp"

namespace ett::io {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& buf) : buf_(buf) {}

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf_[pos_ + size_t(i)])) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf_[pos_ + size_t(i)])) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() {
    uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  std::string bytes(size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool exhausted() const { return pos_ == buf_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint: truncated file");
  }
  const std::string& buf_;
  size_t pos_ = 0;
};

}  // namespace detail

class Checkpoint {
 public:
  void put(const std::string& name, const Tensor& t) {
    if (name.empty()) throw CheckpointError("checkpoint: empty tensor name");
    if (tensors_.count(name)) throw CheckpointError("checkpoint: duplicate name '" + name + "'");
    Entry e;
    e.shape = t.shape();
    e.values.reserve(t.size());
    const double* p = t.data();
    for (size_t i = 0; i < t.size(); ++i) e.values.push_back(float(p[i]));
    tensors_.emplace(name, std::move(e));
  }

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto& [k, v] : tensors_) out.push_back(k);
    return out;  // std::map iterates lexicographically
  }

  Tensor get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
    std::vector<double> vals(it->second.values.begin(), it->second.values.end());
    return Tensor::from(it->second.shape, std::move(vals));
  }

  // Copies values into an existing tensor, which must match shape exactly.
  void load_into(const std::string& name, Tensor& t) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
    if (it->second.shape != t.shape())
      throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
    double* p = t.data();
    for (size_t i = 0; i < it->second.values.size(); ++i) p[i] = double(it->second.values[i]);
  }

  std::string serialize() const {
    std::string out;
    out.append("NTC1", 4);
    detail::put_u32(out, uint32_t(tensors_.size()));
    for (auto& [name, e] : tensors_) {
      detail::put_u32(out, uint32_t(name.size()));
      out.append(name);
      detail::put_u32(out, 0);  // dtype f32
      detail::put_u32(out, uint32_t(e.shape.size()));
      for (int d : e.shape) detail::put_u64(out, uint64_t(d));
      for (float f : e.values) detail::put_f32(out, f);
    }
    return out;
  }

  static Checkpoint deserialize(const std::string& buf) {
    detail::Reader r(buf);
    if (r.bytes(4) != "NTC1") throw CheckpointError("checkpoint: bad magic");
    uint32_t count = r.u32();
    Checkpoint ck;
    std::string prev;
    for (uint32_t i = 0; i < count; ++i) {
      uint32_t name_len = r.u32();
      std::string name = r.bytes(name_len);
      if (i > 0 && !(prev < name))
        throw CheckpointError("checkpoint: names not in lexicographic order");
      prev = name;
      uint32_t dtype = r.u32();
      if (dtype != 0) throw CheckpointError("checkpoint: unknown dtype");
      uint32_t rank = r.u32();
      std::vector<int> shape(rank);
      size_t n = 1;
      for (uint32_t d = 0; d < rank; ++d) {
        uint64_t dim = r.u64();
        shape[d] = int(dim);
        n *= size_t(dim);
      }
      Entry e;
      e.shape = std::move(shape);
      e.values.resize(n);
      for (size_t j = 0; j < n; ++j) e.values[j] = r.f32();
      ck.tensors_.emplace(std::move(name), std::move(e));
    }
    if (!r.exhausted()) throw CheckpointError("checkpoint: trailing bytes");
    return ck;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
    std::string buf = serialize();
    f.write(buf.data(), std::streamsize(buf.size()));
    if (!f) throw CheckpointError("checkpoint: write failed for '" + path + "'");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(buf);
  }

 private:
  struct Entry {
    std::vector<int> shape;
    std::vector<float> values;
  };
  std::map<std::string, Entry> tensors_;
};

}  // namespace ett::io
