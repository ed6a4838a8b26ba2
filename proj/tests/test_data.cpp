#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>

#include "agr/data.hpp"

using namespace agr;

TEST(Tokenize, CharRoundTrip) {
  const auto ds = tokenize_corpus("abab");
  EXPECT_EQ(ds.vocab, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ds.ids, (std::vector<TokenId>{0, 1, 0, 1}));
  EXPECT_EQ(detokenize(ds, ds.ids), "abab");
}

TEST(Tokenize, VocabularyHoldsOnlyOccurringSymbols) {
  std::string text = "the quick brown fox jumps over a lazy dog";
  const auto ds = tokenize_corpus(text);
  // 26 letters plus space.
  EXPECT_EQ(ds.vocab_size(), 27u);
  EXPECT_EQ(detokenize(ds, ds.ids), text);
}

TEST(Tokenize, RemapIsBijectionOntoDenseRange) {
  const auto ds = tokenize_corpus("zzyx\n\tq");
  std::vector<bool> hit(ds.vocab_size(), false);
  for (const auto& [orig, dense] : ds.remap) {
    ASSERT_LT(static_cast<std::size_t>(dense), ds.vocab_size());
    EXPECT_FALSE(hit[dense]);
    hit[dense] = true;
    EXPECT_EQ(ds.vocab[dense], std::string(1, static_cast<char>(orig)));
  }
  EXPECT_TRUE(std::all_of(hit.begin(), hit.end(), [](bool b) { return b; }));
}

TEST(Tokenize, NinetyTenSplit) {
  const auto ds = tokenize_corpus(std::string(1000, 'x'));
  EXPECT_EQ(ds.train().size(), 900u);
  EXPECT_EQ(ds.validation().size(), 100u);
  EXPECT_EQ(ds.train().data() + ds.train().size(), ds.validation().data());
}

TEST(Tokenize, EmptyInputIsAnError) { EXPECT_THROW(tokenize_corpus(""), Error); }

TEST(Tokenize, SimpleBpeRoundTripsAndShortensTheSequence) {
  const std::string text = read_text_file(AGR_CORPUS_PATH).substr(0, 20000);
  const auto ds = tokenize_corpus(text, TokenScheme::kSimpleBpe, 64);
  EXPECT_EQ(ds.merges.size(), 64u);
  EXPECT_EQ(detokenize(ds, ds.ids), text);
  EXPECT_LT(ds.ids.size(), text.size());
  std::vector<bool> used(ds.vocab_size(), false);
  for (TokenId id : ds.ids) used[id] = true;
  EXPECT_TRUE(std::all_of(used.begin(), used.end(), [](bool b) { return b; }));
}

TEST(Tokenize, BpeMergesMostFrequentPairFirst) {
  const auto ds = tokenize_corpus("abababxy", TokenScheme::kSimpleBpe, 1);
  ASSERT_EQ(ds.merges.size(), 1u);
  EXPECT_EQ(ds.merges[0], (std::pair<std::uint32_t, std::uint32_t>{'a', 'b'}));
  EXPECT_EQ(detokenize(ds, ds.ids), "abababxy");
  EXPECT_EQ(ds.ids.size(), 5u);
}

TEST(Permute, GoldenBlockOfFour) {
  std::vector<int> y(13);
  std::iota(y.begin(), y.end(), 0);
  EXPECT_EQ(block_swap_permute<int>(y, 4), (std::vector<int>{0, 1, 2, 4, 3, 5, 6, 8, 7, 9, 10, 12, 11}));
}

TEST(Permute, BlockOfTwo) {
  std::vector<int> y(7);
  std::iota(y.begin(), y.end(), 0);
  EXPECT_EQ(block_swap_permute<int>(y, 2), (std::vector<int>{0, 2, 1, 4, 3, 6, 5}));
}

TEST(Permute, InvolutionMultisetAndFixedPoints) {
  std::mt19937_64 rng(1);
  for (std::size_t l : {2u, 3u, 4u, 8u}) {
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = l + 1 + rng() % 40;
      std::vector<TokenId> w(n);
      for (auto& x : w) x = static_cast<TokenId>(rng() % 7);
      const auto p = block_swap_permute<TokenId>(w, l);
      ASSERT_EQ(block_swap_permute<TokenId>(p, l), w);
      auto a = w, b = p;
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      ASSERT_EQ(a, b);
      for (std::size_t i = 0; i < n; ++i) {
        const bool moved = (i >= l && i % l == 0) || ((i + 1) % l == 0 && i + 1 < n);
        if (!moved) {
          ASSERT_EQ(p[i], w[i]) << "l=" << l << " i=" << i;
        }
      }
    }
  }
}

TEST(Permute, RejectsShortWindowOrSmallBlock) {
  std::vector<int> y(4);
  EXPECT_THROW(block_swap_permute<int>(y, 4), Error);
  std::vector<int> z(6);
  EXPECT_THROW(block_swap_permute<int>(z, 1), Error);
}

TEST(Batch, SecondToLastSeesTheFollowingToken) {
  std::vector<TokenId> y(9);
  std::iota(y.begin(), y.end(), 100);
  const PermutationConfig cfg{4, 8};
  const auto s = make_batch(y, 0, cfg, Objective::kSecondToLast);
  EXPECT_EQ(s.inputs[3], 104);
  EXPECT_EQ(s.targets[3], 103);
  const auto n = make_batch(y, 0, cfg, Objective::kNextToken);
  EXPECT_EQ(n.inputs[3], 103);
  EXPECT_EQ(n.targets[3], 104);
  EXPECT_EQ(s.mask, (std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 1}));
  EXPECT_EQ(s.masked_count(), 2u);
}

TEST(Batch, FairComparisonAndConsistency) {
  std::mt19937_64 rng(5);
  std::vector<TokenId> split(500);
  for (auto& x : split) x = static_cast<TokenId>(rng() % 11);
  for (std::size_t l : {2u, 3u, 4u}) {
    const PermutationConfig cfg{l, 12};
    const auto offsets = sample_offsets(split.size(), cfg.T, 30, rng);
    const auto s = make_batch(split, offsets, cfg, Objective::kSecondToLast);
    const auto n = make_batch(split, offsets, cfg, Objective::kNextToken);
    ASSERT_EQ(s.mask, n.mask);
    for (std::size_t b = 0; b < offsets.size(); ++b) {
      for (std::size_t i = 0; i < cfg.T; ++i) {
        const std::size_t r = b * cfg.T + i;
        EXPECT_EQ(s.mask[r], (i + 1) % l == 0 ? 1 : 0);
        if (!s.mask[r]) continue;
        EXPECT_EQ(s.targets[r], split[offsets[b] + i]);
        EXPECT_EQ(s.inputs[r], split[offsets[b] + i + 1]);
        EXPECT_EQ(n.targets[r], split[offsets[b] + i + 1]);
      }
    }
  }
}

TEST(Batch, MaskingRatioIsOneOverL) {
  std::vector<TokenId> split(300, 0);
  for (std::size_t l : {2u, 4u}) {
    const PermutationConfig cfg{l, 64};
    const std::size_t offsets[] = {0, 10, 100};
    const auto b = make_batch(split, offsets, cfg, Objective::kSecondToLast);
    EXPECT_EQ(b.masked_count() * l, b.mask.size());
  }
}

TEST(Batch, RejectsOverrunAndBadWindowLength) {
  std::vector<TokenId> split(20, 0);
  EXPECT_THROW(make_batch(split, 12, PermutationConfig{4, 8}, Objective::kNextToken), Error);
  EXPECT_NO_THROW(make_batch(split, 11, PermutationConfig{4, 8}, Objective::kNextToken));
  EXPECT_THROW(make_batch(split, 0, PermutationConfig{4, 10}, Objective::kNextToken), Error);
}

TEST(DatasetFile, RoundTripAndSidecar) {
  const auto ds = tokenize_corpus("hello world, hello again", TokenScheme::kSimpleBpe, 4);
  const auto dir = std::filesystem::temp_directory_path() / "agr_test_dataset";
  std::filesystem::remove_all(dir);
  save_dataset(dir / "d.agrd", ds);
  const auto back = load_dataset(dir / "d.agrd");
  EXPECT_EQ(back.ids, ds.ids);
  EXPECT_EQ(back.vocab, ds.vocab);
  EXPECT_EQ(back.remap, ds.remap);
  EXPECT_EQ(back.merges, ds.merges);
  EXPECT_EQ(back.train_end, ds.train_end);
  const auto meta = nlohmann::json::parse(read_text_file(dir / "d.agrd.json"));
  EXPECT_EQ(meta["vocab_size"], ds.vocab_size());
  EXPECT_EQ(meta["token_count"], ds.ids.size());
  std::filesystem::remove_all(dir);

  std::stringstream bad("AGRX");
  EXPECT_THROW(read_dataset(bad), Error);
}
