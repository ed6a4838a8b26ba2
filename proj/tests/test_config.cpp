#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "agr/config.hpp"

using namespace agr;

namespace {
RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}
}  // namespace

TEST(Config, DefaultsMatchTheDeskScaleSetup) {
  const auto c = parse("");
  EXPECT_EQ(c.train.model.n_layer, 4u);
  EXPECT_EQ(c.train.model.emb_dim, 128u);
  EXPECT_EQ(c.train.model.block_size, 64u);
  EXPECT_EQ(c.train.perm.l, 4u);
  EXPECT_EQ(c.train.perm.T, 64u);
  EXPECT_EQ(c.train.max_iters, 2000u);
  EXPECT_EQ(c.train.batch_size, 64u);
  EXPECT_EQ(c.refine.k, 15u);
  EXPECT_DOUBLE_EQ(c.refine.w, 0.05);
  EXPECT_EQ(c.eval.samples, 5000u);
  EXPECT_EQ(c.eval.runs, 10u);
}

TEST(Config, ParsesTypedValuesAndLists) {
  const auto c = parse(
      "[model]\nn_layer = 2\nblock_size = 32\n[perm]\nl = 2\n[train]\nlr_max = 3e-3\nwarmup_from_floor = true\n"
      "[eval]\ngrid_k = 2, 5,15\ngrid_w = 0.01,0.05,0.1\n[data]\nscheme = simple-bpe\n");
  EXPECT_EQ(c.train.model.n_layer, 2u);
  EXPECT_EQ(c.train.perm.T, 32u);
  EXPECT_EQ(c.refine.l, 2u);
  EXPECT_EQ(c.eval.context_len, 32u);
  EXPECT_DOUBLE_EQ(c.train.lr_max, 3e-3);
  EXPECT_TRUE(c.train.warmup_from_floor);
  EXPECT_EQ(c.grid_k, (std::vector<std::size_t>{2, 5, 15}));
  EXPECT_EQ(c.grid_w, (std::vector<double>{0.01, 0.05, 0.1}));
  EXPECT_EQ(c.scheme, TokenScheme::kSimpleBpe);
}

TEST(Config, UnknownKeysAreListed) {
  try {
    parse("[model]\nn_layers = 3\nemb_dim = 64\n[trian]\nseed = 1\n[agr]\nkk = 2\n");
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("model.n_layers"), std::string::npos);
    EXPECT_NE(msg.find("[trian]"), std::string::npos);
    EXPECT_NE(msg.find("agr.kk"), std::string::npos);
    EXPECT_EQ(msg.find("emb_dim"), std::string::npos);
  }
  EXPECT_THROW(parse("stray = 1\n"), Error);
}

TEST(Config, BadValuesAreErrors) {
  EXPECT_THROW(parse("[model]\nn_layer = four\n"), Error);
  EXPECT_THROW(parse("[model]\nn_layer = -1\n"), Error);
  EXPECT_THROW(parse("[agr]\nw = 0.05x\n"), Error);
  EXPECT_THROW(parse("[train]\nwarmup_from_floor = maybe\n"), Error);
  EXPECT_THROW(parse("[eval]\ngrid_k = 2,,3\n"), Error);
  EXPECT_THROW(parse("[perm]\nl = 5\n"), Error);  // 64 is not a multiple of 5
  EXPECT_THROW(parse("[oracle]\nverdicts = psychic\n"), Error);
}

TEST(Config, RoundTripThroughIni) {
  auto c = parse("[train]\nlr_max = 0.0012345678901234\nseed = 99\n[eval]\ngrid_w = 0.1,0.3\n");
  set_config_value(c, "agr.w", "0.2");
  const auto text = config_to_ini(c);
  const auto back = parse(text);
  EXPECT_EQ(config_to_ini(back), text);
  EXPECT_EQ(back.train.lr_max, c.train.lr_max);
  EXPECT_EQ(back.train.seed, 99u);
  EXPECT_EQ(back.refine.w, 0.2);
  EXPECT_EQ(back.grid_w, c.grid_w);
}

TEST(Config, OverridesByKey) {
  RunConfig c;
  set_config_value(c, "eval.samples", "123");
  EXPECT_EQ(get_config_value(c, "eval.samples"), "123");
  EXPECT_THROW(set_config_value(c, "eval.sample", "1"), Error);
}

TEST(Manifest, RecordsArtifactsAndRejectsMissingOnes) {
  const auto dir = std::filesystem::temp_directory_path() / "agr_manifest_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  RunManifest m;
  m.subcommand = "prepare";
  m.config_ini = config_to_ini(RunConfig{});
  m.overrides = {{"eval.samples", "10"}};
  m.seeds["train"] = 5;
  m.artifacts["missing"] = (dir / "nope.bin").string();
  EXPECT_THROW(m.write(dir), Error);
  m.artifacts.clear();
  std::ofstream(dir / "a.txt") << "x";
  m.artifacts["a"] = (dir / "a.txt").string();
  m.write(dir);
  std::ifstream in(dir / "manifest.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["subcommand"], "prepare");
  EXPECT_EQ(j["overrides"][0]["key"], "eval.samples");
  std::istringstream snap(j["config"].get<std::string>());
  EXPECT_EQ(config_to_ini(parse_config(snap)), m.config_ini);
  std::filesystem::remove_all(dir);
}
