#pragma once

// Checkpoint container, little-endian throughout:
//
//   "LFT1"                       magic
//   u32 version                  currently 1
//   u32 n_fields, u32[n_fields]  config: n_layers n_heads d_model d_head
//                                        vocab_size max_seq mlp_hidden
//   u32 n_tensors
//   per tensor:
//     u32 name_len, name bytes, u32 rank, u32 dims[rank], f32 data[prod(dims)]

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "lofit/error.hpp"
#include "lofit/model.hpp"
#include "lofit/tensor.hpp"

namespace lofit {

inline constexpr char kCheckpointMagic[4] = {'L', 'F', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ConfigError("checkpoint truncated");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  const ModelConfig& c = ckpt.config;
  const int fields[] = {c.n_layers, c.n_heads, c.d_model, c.d_head, c.vocab_size, c.max_seq, c.mlp_hidden};
  detail::put_u32(out, static_cast<std::uint32_t>(std::size(fields)));
  for (int f : fields) detail::put_u32(out, static_cast<std::uint32_t>(f));
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw ConfigError("not a checkpoint: bad magic");
  }
  std::vector<std::uint8_t> body(bytes.begin() + 4, bytes.end());
  detail::ByteReader in(body);
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t n_fields = in.u32();
  if (n_fields != 7) throw ConfigError("checkpoint config block has " + std::to_string(n_fields) + " fields");
  Checkpoint ckpt;
  int* targets[] = {&ckpt.config.n_layers, &ckpt.config.n_heads,  &ckpt.config.d_model,   &ckpt.config.d_head,
                    &ckpt.config.vocab_size, &ckpt.config.max_seq, &ckpt.config.mlp_hidden};
  for (int* t : targets) *t = static_cast<int>(in.u32());
  const std::uint32_t n_tensors = in.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = in.str(in.u32());
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    std::vector<float> values(shape_numel(shape));
    for (float& v : values) v = std::bit_cast<float>(in.u32());
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw ConfigError("trailing bytes after checkpoint tensors");
  return ckpt;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_bytes(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_bytes(path)); }

inline Checkpoint checkpoint_of(const Model& model) {
  Checkpoint c;
  c.config = model.config();
  for (const auto& [name, t] : model.named_parameters()) c.tensors.emplace_back(name, t.detach());
  return c;
}

inline void save_model(const std::string& path, const Model& model) { save_checkpoint(path, checkpoint_of(model)); }

/// Rebuilds a model from a checkpoint; every parameter must be present with
/// the expected shape. The result is frozen.
inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  Rng unused(0);
  Model model(ckpt.config, unused);
  auto names = model.named_parameters();
  auto slots = model.named_parameters_mut();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor* t = ckpt.find(names[i].first);
    if (!t) throw ConfigError("checkpoint missing tensor " + names[i].first);
    if (t->shape() != names[i].second.shape()) {
      throw ConfigError("checkpoint tensor " + names[i].first + " has shape " + to_string(t->shape()));
    }
    *slots[i] = t->detach();
  }
  model.freeze();
  return model;
}

inline Model load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

/// 64-bit FNV-1a; used for content hashes in reports.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return s;
}

inline std::string file_hash(const std::string& path) {
  const auto bytes = read_bytes(path);
  return hex64(fnv1a64(bytes));
}

}  // namespace lofit
