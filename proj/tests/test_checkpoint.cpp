#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "hybridnorm/checkpoint.hpp"

using namespace hybridnorm;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.layers = 2;
  c.dim = 8;
  c.heads = 2;
  c.kv_heads = 1;
  c.vocab = 13;
  c.context = 8;
  c.first_block = FirstBlockVariant::HybridStar;
  return c;
}

Checkpoint sample(bool with_optimizer) {
  Checkpoint ck;
  ck.config = small();
  ck.seed = 42;
  ck.step = 17;
  ck.params = init_params(ck.config, 42);
  if (with_optimizer) {
    ck.optimizer = OptimizerState::zeros_for(ck.params);
    ck.optimizer->t = 17;
    Rng rng(1);
    for_each_tensor(ck.optimizer->m, [&](const TensorInfo&, Matrix& m) { m = random_normal(m.rows(), m.cols(), rng); });
    for_each_tensor(ck.optimizer->v, [&](const TensorInfo&, Matrix& m) {
      m = random_uniform(m.rows(), m.cols(), rng, 0.0, 1e-3);
    });
  }
  return ck;
}

}  // namespace

TEST(Checkpoint, ByteExactRoundTrip) {
  for (bool opt : {false, true}) {
    const Checkpoint ck = sample(opt);
    const std::string bytes = encode_checkpoint(ck);
    const Checkpoint back = decode_checkpoint(bytes);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    EXPECT_EQ(back.seed, 42u);
    EXPECT_EQ(back.step, 17u);
    EXPECT_EQ(config_to_json(back.config), config_to_json(ck.config));
    for_each_tensor_pair(back.params, ck.params, [](const TensorInfo& info, const Matrix& a, const Matrix& b) {
      EXPECT_EQ(a, b) << info.name;
    });
    ASSERT_EQ(back.optimizer.has_value(), opt);
    if (opt) {
      EXPECT_EQ(back.optimizer->t, 17u);
      for_each_tensor_pair(back.optimizer->v, ck.optimizer->v, [](const TensorInfo& info, const Matrix& a,
                                                                  const Matrix& b) { EXPECT_EQ(a, b) << info.name; });
    }
  }
}

TEST(Checkpoint, LayoutIsDocumented) {
  const Checkpoint ck = sample(false);
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "HNCKPT01");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const auto header = Json::parse(bytes.substr(16, hlen));
  EXPECT_EQ(header["tensors"][0]["name"], "embedding");
  EXPECT_EQ(bytes.size(), 16 + hlen + 8 * parameter_count(ck.params));
  double first = 0;
  std::memcpy(&first, bytes.data() + 16 + hlen, 8);
  EXPECT_EQ(first, ck.params.embedding(0, 0));
}

TEST(Checkpoint, CorruptionIsRejected) {
  const std::string good = encode_checkpoint(sample(true));
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(decode_checkpoint(good + "x"), FormatError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, 20)), FormatError);

  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= std::uint64_t(static_cast<unsigned char>(good[8 + i])) << (8 * i);
  std::string renamed = good;
  const auto at = renamed.find("\"embedding\"");
  ASSERT_LT(at, 16 + hlen);
  renamed.replace(at, 11, "\"embeddinx\"");
  EXPECT_THROW(decode_checkpoint(renamed), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "hybridnorm_ckpt_test.bin").string();
  const Checkpoint ck = sample(true);
  save_checkpoint(path, ck);
  EXPECT_EQ(read_file(path), encode_checkpoint(ck));
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), encode_checkpoint(ck));
  std::remove(path.c_str());
  EXPECT_THROW(load_checkpoint(path), FormatError);
}

TEST(ConfigJson, RoundTripsEveryField) {
  ModelConfig c = small();
  c.scheme = BlockScheme::pre_variant_post(AttnNormScheme::KC);
  c.init = InitScheme::DepthScaled;
  c.rope_theta = 12345.5;
  c.tie_embeddings = true;
  c.mixln_split = 0.3;
  c.attn_output_norm = true;
  c.norm_eps = 1e-6;
  c.embed_std = 0.7;
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  Json j = config_to_json(c);
  j["scheme"] = "sandwich";
  EXPECT_THROW(config_from_json(j), FormatError);
}
