#pragma once

// Checkpoint container. Layout, all integers and floats little-endian:
//
//   "AGR1"                       4-byte magic
//   u32 format version           currently 1
//   u32 n_layer, n_head, emb_dim, block_size, vocab_size; f64 dropout
//   u32 tensor count, then per tensor: u32 rank, u64 dims[rank], f32 data
//   u8  optimizer flag; if 1: u64 step, f64 beta1, beta2, epsilon,
//       weight_decay, u8 moments flag; if 1: every first moment, then every
//       second moment (f32 data, shapes as the parameters)
//   u64 seed
//   u64 iteration

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "agr/adamw.hpp"
#include "agr/binary_io.hpp"
#include "agr/model.hpp"

namespace agr {

inline constexpr std::string_view kCheckpointMagic = "AGR1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TransformerParams<float> params;
  std::optional<AdamWState<float>> optimizer;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  const ModelConfig& c = ck.params.config;
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  io::write_u32(os, kCheckpointVersion);
  for (std::size_t v : {c.n_layer, c.n_head, c.emb_dim, c.block_size, c.vocab_size}) {
    io::write_u32(os, static_cast<std::uint32_t>(v));
  }
  io::write_f64(os, c.dropout);
  io::write_u32(os, static_cast<std::uint32_t>(ck.params.tensors.size()));
  for (const auto& t : ck.params.tensors) {
    io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) io::write_u64(os, dim);
    for (float x : t.data()) io::write_f32(os, x);
  }
  io::write_u8(os, ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const auto& st = *ck.optimizer;
    if (st.first_moment.size() != ck.params.tensors.size() && st.step > 0) {
      throw Error("checkpoint: optimizer state does not match the parameters");
    }
    io::write_u64(os, st.step);
    io::write_f64(os, st.beta1);
    io::write_f64(os, st.beta2);
    io::write_f64(os, st.epsilon);
    io::write_f64(os, st.weight_decay);
    io::write_u8(os, st.first_moment.empty() ? 0 : 1);
    for (const auto* moments : {&st.first_moment, &st.second_moment}) {
      for (const auto& t : *moments) {
        for (float x : t.data()) io::write_f32(os, x);
      }
    }
  }
  io::write_u64(os, ck.seed);
  io::write_u64(os, ck.iteration);
  if (!os) throw Error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic, "checkpoint");
  const std::uint32_t version = io::read_u32(is);
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ck;
  ModelConfig& c = ck.params.config;
  c.n_layer = io::read_u32(is);
  c.n_head = io::read_u32(is);
  c.emb_dim = io::read_u32(is);
  c.block_size = io::read_u32(is);
  c.vocab_size = io::read_u32(is);
  c.dropout = io::read_f64(is);
  c.validate();
  const auto shapes = param_shapes(c);
  const std::uint32_t count = io::read_u32(is);
  if (count != shapes.size()) {
    throw Error("checkpoint: expected " + std::to_string(shapes.size()) + " tensors, found " + std::to_string(count));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t rank = io::read_u32(is);
    Shape shape(rank);
    for (auto& dim : shape) dim = io::read_u64(is);
    if (shape != shapes[i]) {
      throw Error("checkpoint: tensor " + std::to_string(i) + " has shape " + shape_str(shape) + ", expected " +
                  shape_str(shapes[i]));
    }
    Tensor<float> t(shape);
    for (auto& x : t.data()) x = io::read_f32(is);
    ck.params.tensors.push_back(std::move(t));
  }
  if (io::read_u8(is)) {
    AdamWState<float> st;
    st.step = io::read_u64(is);
    st.beta1 = io::read_f64(is);
    st.beta2 = io::read_f64(is);
    st.epsilon = io::read_f64(is);
    st.weight_decay = io::read_f64(is);
    if (io::read_u8(is)) {
      for (auto* moments : {&st.first_moment, &st.second_moment}) {
        for (const auto& shape : shapes) {
          Tensor<float> t(shape);
          for (auto& x : t.data()) x = io::read_f32(is);
          moments->push_back(std::move(t));
        }
      }
    }
    ck.optimizer = std::move(st);
  }
  ck.seed = io::read_u64(is);
  ck.iteration = io::read_u64(is);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint: cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, ck);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace agr
