#pragma once

// Tokenization, the block-swap permutation and batch assembly for the
// next-token and second-to-last objectives.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "agr/binary_io.hpp"
#include "agr/tensor.hpp"

namespace agr {

enum class TokenScheme : std::uint8_t { kChar = 0, kSimpleBpe = 1 };

inline std::string scheme_name(TokenScheme s) { return s == TokenScheme::kChar ? "char" : "simple-bpe"; }

inline TokenScheme parse_scheme(std::string_view s) {
  if (s == "char") return TokenScheme::kChar;
  if (s == "simple-bpe" || s == "bpe") return TokenScheme::kSimpleBpe;
  throw Error("unknown tokenizer scheme \"" + std::string(s) + "\" (expected char or simple-bpe)");
}

/// Tokenized corpus. Original token ids are byte values (0..255) followed by
/// one id per learned merge (256 + merge index); `remap` sends the ids that
/// actually occur onto the dense range [0, vocab_size).
struct TokenDataset {
  TokenScheme scheme = TokenScheme::kChar;
  std::vector<TokenId> ids;
  std::vector<std::string> vocab;                              // dense id -> text
  std::map<std::uint32_t, TokenId> remap;                      // original id -> dense id
  std::vector<std::pair<std::uint32_t, std::uint32_t>> merges;  // original ids
  std::size_t train_end = 0;                                   // ids[0, train_end) train, rest validation

  std::size_t vocab_size() const { return vocab.size(); }
  std::span<const TokenId> train() const { return std::span<const TokenId>(ids).first(train_end); }
  std::span<const TokenId> validation() const { return std::span<const TokenId>(ids).subspan(train_end); }

  std::span<const TokenId> split(std::string_view name) const {
    if (name == "train") return train();
    if (name == "val" || name == "validation") return validation();
    throw Error("unknown split \"" + std::string(name) + "\" (expected train or val)");
  }
};

/// 90/10 boundary: the first floor(0.9 n) tokens train, the rest validate.
inline std::size_t train_split_point(std::size_t n) { return n * 9 / 10; }

namespace detail {

inline std::uint64_t pair_key(std::uint32_t a, std::uint32_t b) { return (std::uint64_t{a} << 32) | b; }

// Greedy byte-pair merging: repeatedly fuse the most frequent adjacent pair
// (ties to the smallest pair) until `num_merges` merges are learned or no pair
// occurs twice.
inline std::vector<std::pair<std::uint32_t, std::uint32_t>> learn_merges(std::vector<std::uint32_t>& seq,
                                                                         std::size_t num_merges) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> merges;
  std::unordered_map<std::uint64_t, std::size_t> counts;
  for (std::size_t m = 0; m < num_merges && seq.size() >= 2; ++m) {
    counts.clear();
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) ++counts[pair_key(seq[i], seq[i + 1])];
    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [key, count] : counts) {
      if (count > best_count || (count == best_count && key < best)) {
        best = key;
        best_count = count;
      }
    }
    if (best_count < 2) break;
    const std::uint32_t a = static_cast<std::uint32_t>(best >> 32);
    const std::uint32_t b = static_cast<std::uint32_t>(best & 0xFFFFFFFFu);
    const std::uint32_t fused = 256 + static_cast<std::uint32_t>(merges.size());
    std::size_t out = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i + 1 < seq.size() && seq[i] == a && seq[i + 1] == b) {
        seq[out++] = fused;
        ++i;
      } else {
        seq[out++] = seq[i];
      }
    }
    seq.resize(out);
    merges.emplace_back(a, b);
  }
  return merges;
}

}  // namespace detail

/// Tokenizes `text` and assigns dense ids in order of original id, so a
/// char-level vocabulary is sorted by byte value.
inline TokenDataset tokenize_corpus(std::string_view text, TokenScheme scheme = TokenScheme::kChar,
                                    std::size_t bpe_merges = 256) {
  if (text.empty()) throw Error("tokenize_corpus: empty input");
  std::vector<std::uint32_t> seq(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) seq[i] = static_cast<unsigned char>(text[i]);

  TokenDataset ds;
  ds.scheme = scheme;
  if (scheme == TokenScheme::kSimpleBpe) ds.merges = detail::learn_merges(seq, bpe_merges);

  std::vector<std::string> original_text(256 + ds.merges.size());
  for (std::size_t b = 0; b < 256; ++b) original_text[b] = std::string(1, static_cast<char>(b));
  for (std::size_t m = 0; m < ds.merges.size(); ++m) {
    original_text[256 + m] = original_text[ds.merges[m].first] + original_text[ds.merges[m].second];
  }
  std::vector<bool> present(original_text.size(), false);
  for (std::uint32_t s : seq) present[s] = true;
  for (std::uint32_t o = 0; o < present.size(); ++o) {
    if (!present[o]) continue;
    ds.remap[o] = static_cast<TokenId>(ds.vocab.size());
    ds.vocab.push_back(original_text[o]);
  }
  ds.ids.reserve(seq.size());
  for (std::uint32_t s : seq) ds.ids.push_back(ds.remap.at(s));
  ds.train_end = train_split_point(ds.ids.size());
  return ds;
}

inline std::string detokenize(const TokenDataset& ds, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= ds.vocab.size()) {
      throw Error("detokenize: token id " + std::to_string(id) + " outside the vocabulary");
    }
    out += ds.vocab[static_cast<std::size_t>(id)];
  }
  return out;
}

/// Swaps indices (j*l + l-1, j*l + l) for every j with j*l + l < size. For a
/// window of T+1 tokens this places each block's last token before its
/// predecessor, so a causal model predicting position j*l + l-1 sees the
/// token that originally followed its target.
template <typename V>
std::vector<V> block_swap_permute(std::span<const V> window, std::size_t l) {
  if (l < 2) throw Error("block_swap_permute: l must be >= 2, got " + std::to_string(l));
  if (window.size() < l + 1) {
    throw Error("block_swap_permute: window of " + std::to_string(window.size()) + " tokens is shorter than l+1 = " +
                std::to_string(l + 1));
  }
  std::vector<V> out(window.begin(), window.end());
  for (std::size_t hi = l; hi < out.size(); hi += l) std::swap(out[hi - 1], out[hi]);
  return out;
}

struct PermutationConfig {
  std::size_t l = 4;
  std::size_t T = 64;

  void validate() const {
    if (l < 2) throw Error("permutation: l must be >= 2, got " + std::to_string(l));
    if (T < l || T % l != 0) {
      throw Error("permutation: window length T=" + std::to_string(T) + " must be a positive multiple of l=" +
                  std::to_string(l));
    }
  }
};

enum class Objective : std::uint8_t { kNextToken = 0, kSecondToLast = 1 };

inline std::string objective_name(Objective o) { return o == Objective::kNextToken ? "next" : "second-to-last"; }

inline Objective parse_objective(std::string_view s) {
  if (s == "next" || s == "next-token") return Objective::kNextToken;
  if (s == "second-to-last" || s == "s2l" || s == "refiner") return Objective::kSecondToLast;
  throw Error("unknown objective \"" + std::string(s) + "\" (expected next or second-to-last)");
}

/// Loss positions: i with (i+1) mod l == 0.
inline std::vector<std::uint8_t> loss_mask(std::size_t T, std::size_t l) {
  std::vector<std::uint8_t> mask(T, 0);
  for (std::size_t i = l - 1; i < T; i += l) mask[i] = 1;
  return mask;
}

struct PermutedBatch {
  std::size_t batch = 0;
  std::size_t T = 0;
  std::vector<TokenId> inputs;     // [batch, T]
  std::vector<TokenId> targets;    // [batch, T]
  std::vector<std::uint8_t> mask;  // [batch, T]
  Objective objective = Objective::kNextToken;

  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

/// One row per offset. Each row reads split[offset .. offset+T] (T+1 tokens).
inline PermutedBatch make_batch(std::span<const TokenId> split, std::span<const std::size_t> offsets,
                                const PermutationConfig& cfg, Objective objective) {
  cfg.validate();
  PermutedBatch b;
  b.batch = offsets.size();
  b.T = cfg.T;
  b.objective = objective;
  b.inputs.reserve(b.batch * cfg.T);
  b.targets.reserve(b.batch * cfg.T);
  const auto row_mask = loss_mask(cfg.T, cfg.l);
  for (std::size_t off : offsets) {
    if (off + cfg.T + 1 > split.size()) {
      throw Error("make_batch: window at offset " + std::to_string(off) + " of length " + std::to_string(cfg.T + 1) +
                  " overruns the split of " + std::to_string(split.size()) + " tokens");
    }
    auto window = split.subspan(off, cfg.T + 1);
    std::vector<TokenId> seq(window.begin(), window.end());
    if (objective == Objective::kSecondToLast) seq = block_swap_permute<TokenId>(window, cfg.l);
    b.inputs.insert(b.inputs.end(), seq.begin(), seq.end() - 1);
    b.targets.insert(b.targets.end(), seq.begin() + 1, seq.end());
    b.mask.insert(b.mask.end(), row_mask.begin(), row_mask.end());
  }
  return b;
}

inline PermutedBatch make_batch(std::span<const TokenId> split, std::size_t offset, const PermutationConfig& cfg,
                                Objective objective) {
  const std::size_t offsets[1] = {offset};
  return make_batch(split, offsets, cfg, objective);
}

/// Uniform window offsets for a split.
template <typename Rng>
std::vector<std::size_t> sample_offsets(std::size_t split_len, std::size_t T, std::size_t count, Rng& rng) {
  if (split_len < T + 1) {
    throw Error("split of " + std::to_string(split_len) + " tokens is too short for windows of " +
                std::to_string(T + 1));
  }
  std::uniform_int_distribution<std::size_t> dist(0, split_len - T - 1);
  std::vector<std::size_t> offsets(count);
  for (auto& o : offsets) o = dist(rng);
  return offsets;
}

// Dataset file: "AGRD", u32 version, u8 scheme, u32 vocab count and
// length-prefixed strings, u32 remap count and (u32 original, i32 dense)
// pairs, u32 merge count and u32 pairs, u64 token count, u64 train_end,
// then the ids as little-endian i32.
inline constexpr std::string_view kDatasetMagic = "AGRD";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, const TokenDataset& ds) {
  os.write(kDatasetMagic.data(), kDatasetMagic.size());
  io::write_u32(os, kDatasetVersion);
  io::write_u8(os, static_cast<std::uint8_t>(ds.scheme));
  io::write_u32(os, static_cast<std::uint32_t>(ds.vocab.size()));
  for (const auto& s : ds.vocab) io::write_string(os, s);
  io::write_u32(os, static_cast<std::uint32_t>(ds.remap.size()));
  for (const auto& [orig, dense] : ds.remap) {
    io::write_u32(os, orig);
    io::write_i32(os, dense);
  }
  io::write_u32(os, static_cast<std::uint32_t>(ds.merges.size()));
  for (const auto& [a, b] : ds.merges) {
    io::write_u32(os, a);
    io::write_u32(os, b);
  }
  io::write_u64(os, ds.ids.size());
  io::write_u64(os, ds.train_end);
  for (TokenId id : ds.ids) io::write_i32(os, id);
  if (!os) throw Error("dataset: write failed");
}

inline TokenDataset read_dataset(std::istream& is) {
  io::expect_magic(is, kDatasetMagic, "dataset");
  const std::uint32_t version = io::read_u32(is);
  if (version != kDatasetVersion) throw Error("dataset: unsupported format version " + std::to_string(version));
  TokenDataset ds;
  const std::uint8_t scheme = io::read_u8(is);
  if (scheme > 1) throw Error("dataset: unknown tokenizer scheme " + std::to_string(scheme));
  ds.scheme = static_cast<TokenScheme>(scheme);
  ds.vocab.resize(io::read_u32(is));
  for (auto& s : ds.vocab) s = io::read_string(is);
  const std::uint32_t n_remap = io::read_u32(is);
  for (std::uint32_t i = 0; i < n_remap; ++i) {
    const std::uint32_t orig = io::read_u32(is);
    ds.remap[orig] = io::read_i32(is);
  }
  ds.merges.resize(io::read_u32(is));
  for (auto& [a, b] : ds.merges) {
    a = io::read_u32(is);
    b = io::read_u32(is);
  }
  const std::uint64_t n = io::read_u64(is);
  ds.train_end = io::read_u64(is);
  if (ds.train_end > n) throw Error("dataset: train boundary beyond the token count");
  ds.ids.resize(n);
  for (auto& id : ds.ids) {
    id = io::read_i32(is);
    if (id < 0 || static_cast<std::size_t>(id) >= ds.vocab.size()) {
      throw Error("dataset: token id " + std::to_string(id) + " outside the vocabulary");
    }
  }
  return ds;
}

inline nlohmann::json dataset_metadata(const TokenDataset& ds) {
  return {{"format", "AGRD"},
          {"version", kDatasetVersion},
          {"scheme", scheme_name(ds.scheme)},
          {"vocab_size", ds.vocab_size()},
          {"token_count", ds.ids.size()},
          {"train_tokens", ds.train_end},
          {"validation_tokens", ds.ids.size() - ds.train_end},
          {"merges", ds.merges.size()}};
}

/// Writes `path` and a `<path>.json` metadata sidecar.
inline void save_dataset(const std::filesystem::path& path, const TokenDataset& ds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("dataset: cannot open " + path.string() + " for writing");
    write_dataset(os, ds);
  }
  std::ofstream js(std::filesystem::path(path).concat(".json"));
  js << dataset_metadata(ds).dump(2) << "\n";
}

inline TokenDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("dataset: cannot open " + path.string());
  try {
    return read_dataset(is);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace agr
