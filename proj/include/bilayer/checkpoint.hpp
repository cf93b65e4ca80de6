#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "bilayer/errors.hpp"
#include "bilayer/layers.hpp"
#include "bilayer/optim.hpp"
#include "bilayer/tensor.hpp"

namespace bilayer {

// Binary checkpoint container: named parameter and buffer tensors (raw
// little-endian doubles, so the round trip is bit-exact), the config
// record, step counters, optimizer moments and RNG states.
struct Checkpoint {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::string config_json;
  std::uint64_t rng_batch_state = 0;
  std::uint64_t rng_sample_state = 0;
  std::vector<NamedParam> params;
  std::vector<NamedParam> buffers;
  bool has_optim = false;
  std::int64_t adam_step = 0;
  std::vector<std::pair<std::string, std::pair<Tensor, Tensor>>> moments;
};

namespace detail {

constexpr std::uint32_t kCheckpointMagic = 0x424c4743;  // "BLGC"
constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rows()));
  write_u32(out, static_cast<std::uint32_t>(t.cols()));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
inline std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}
inline Tensor read_tensor(std::istream& in) {
  const int rows = static_cast<int>(read_u32(in));
  const int cols = static_cast<int>(read_u32(in));
  Tensor t(rows, cols);
  in.read(reinterpret_cast<char*>(t.data().data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  return t;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("save_checkpoint: cannot open " + path + " for writing");
  detail::write_u32(out, detail::kCheckpointMagic);
  detail::write_u32(out, detail::kCheckpointVersion);
  detail::write_u64(out, ck.step);
  detail::write_u64(out, ck.epoch);
  detail::write_string(out, ck.config_json);
  detail::write_u64(out, ck.rng_batch_state);
  detail::write_u64(out, ck.rng_sample_state);
  detail::write_u32(out, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& p : ck.params) {
    detail::write_string(out, p.name);
    detail::write_tensor(out, p.tensor);
  }
  detail::write_u32(out, static_cast<std::uint32_t>(ck.buffers.size()));
  for (const auto& b : ck.buffers) {
    detail::write_string(out, b.name);
    detail::write_tensor(out, b.tensor);
  }
  detail::write_u32(out, ck.has_optim ? 1 : 0);
  if (ck.has_optim) {
    detail::write_u64(out, static_cast<std::uint64_t>(ck.adam_step));
    detail::write_u32(out, static_cast<std::uint32_t>(ck.moments.size()));
    for (const auto& [name, mv] : ck.moments) {
      detail::write_string(out, name);
      detail::write_tensor(out, mv.first);
      detail::write_tensor(out, mv.second);
    }
  }
  if (!out) throw InputError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("load_checkpoint: cannot open " + path);
  if (detail::read_u32(in) != detail::kCheckpointMagic) {
    throw InputError("load_checkpoint: " + path + " is not a checkpoint file");
  }
  const std::uint32_t version = detail::read_u32(in);
  if (version != detail::kCheckpointVersion) {
    throw InputError("load_checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.step = detail::read_u64(in);
  ck.epoch = detail::read_u64(in);
  ck.config_json = detail::read_string(in);
  ck.rng_batch_state = detail::read_u64(in);
  ck.rng_sample_state = detail::read_u64(in);
  const std::uint32_t n_params = detail::read_u32(in);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = detail::read_string(in);
    ck.params.push_back({std::move(name), detail::read_tensor(in)});
  }
  const std::uint32_t n_buffers = detail::read_u32(in);
  for (std::uint32_t i = 0; i < n_buffers; ++i) {
    std::string name = detail::read_string(in);
    ck.buffers.push_back({std::move(name), detail::read_tensor(in)});
  }
  ck.has_optim = detail::read_u32(in) != 0;
  if (ck.has_optim) {
    ck.adam_step = static_cast<std::int64_t>(detail::read_u64(in));
    const std::uint32_t n = detail::read_u32(in);
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = detail::read_string(in);
      Tensor m = detail::read_tensor(in);
      Tensor v = detail::read_tensor(in);
      ck.moments.emplace_back(std::move(name), std::make_pair(m, v));
    }
  }
  if (!in) throw InputError("load_checkpoint: truncated file " + path);
  return ck;
}

// Copy checkpointed values into live named tensors; names and shapes must
// match exactly.
inline void restore_named(const std::vector<NamedParam>& stored, std::vector<NamedParam> live,
                          const char* what) {
  if (stored.size() != live.size()) {
    throw InputError(std::string(what) + ": checkpoint holds " +
                     std::to_string(stored.size()) + " tensors, model has " +
                     std::to_string(live.size()));
  }
  for (std::size_t i = 0; i < stored.size(); ++i) {
    if (stored[i].name != live[i].name) {
      throw InputError(std::string(what) + ": name mismatch at index " + std::to_string(i) +
                       ": '" + stored[i].name + "' vs '" + live[i].name + "'");
    }
    if (stored[i].tensor.rows() != live[i].tensor.rows() ||
        stored[i].tensor.cols() != live[i].tensor.cols()) {
      throw InputError(std::string(what) + ": shape mismatch for '" + stored[i].name + "'");
    }
    live[i].tensor.data() = stored[i].tensor.data();
  }
}

}  // namespace bilayer
