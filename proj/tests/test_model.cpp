#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "mera/model.hpp"
#include "mera/objectives.hpp"
#include "oracles.hpp"

using namespace mera;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.vocab_size = 11;
  mc.d_model = 8;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_ff = 16;
  mc.max_seq_len = 16;
  return mc;
}

// Init weights are tiny; spread them so every path carries signal.
void jitter(Transformer& m, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& t : m.params().tensors()) {
    for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] += scale * standard_normal(rng);
  }
}

Vocabulary toy_vocab(int n_codes, int n_words) {
  std::vector<std::string> s;
  for (int i = 0; i < n_codes; ++i) s.push_back("C" + std::to_string(i));
  for (auto w : {"<EOV>", "<pad>", "<bos>", "<eos>"}) s.emplace_back(w);
  for (int i = 0; i < n_words; ++i) s.push_back("w" + std::to_string(i));
  return Vocabulary::from_surfaces(s);
}

}  // namespace

TEST(Transformer, DeterministicInitAndShapes) {
  const auto mc = small_config();
  Transformer a(mc), b(mc);
  EXPECT_TRUE(a.params().same_values(b.params()));
  auto other = mc;
  other.init_seed = 2;
  EXPECT_FALSE(Transformer(other).params().same_values(a.params()));
  const std::vector<int> ids{1, 2, 3};
  const auto z = a.logits(ids);
  EXPECT_EQ(z.rows(), 3);
  EXPECT_EQ(z.cols(), 11);
  const std::size_t d = 8, ff = 16, V = 11, L = 16;
  const std::size_t per_layer = 4 * d + 4 * d * d + d + 2 * d * ff + ff + d;
  EXPECT_EQ(a.params().parameter_count(), V * d + L * d + 2 * per_layer + 2 * d + d * V + V);
}

TEST(Transformer, CausalPrefixInvariance) {
  Transformer m(small_config());
  jitter(m, 5, 0.3);
  const std::vector<int> ids{4, 1, 7, 7, 2, 9, 0};
  const auto full = m.logits(ids);
  for (std::size_t n = 1; n < ids.size(); ++n) {
    const auto prefix = m.logits(std::span<const int>(ids).first(n));
    EXPECT_TRUE(prefix.isApprox(full.topRows(static_cast<Eigen::Index>(n)), 1e-12)) << n;
  }
  const auto next = m.next_logits(std::span<const int>(ids).first(3));
  for (int v = 0; v < 11; ++v) EXPECT_NEAR(next[static_cast<std::size_t>(v)], full(2, v), 1e-12);
}

TEST(Transformer, RejectsBadInput) {
  Transformer m(small_config());
  EXPECT_THROW(m.logits(std::vector<int>{}), ValidationError);
  EXPECT_THROW(m.logits(std::vector<int>{11}), ValidationError);
  EXPECT_THROW(m.logits(std::vector<int>(17, 1)), ValidationError);
  auto bad = small_config();
  bad.n_heads = 3;
  EXPECT_THROW(Transformer{bad}, ValidationError);
  bad = small_config();
  bad.dropout = 1.0;
  EXPECT_THROW(Transformer{bad}, ValidationError);
}

TEST(Transformer, FullModelGradientMatchesFiniteDifferences) {
  Transformer m(small_config());
  jitter(m, 9, 0.3);
  const std::vector<int> ids{1, 4, 2, 7, 3, 9};
  const std::vector<int> targets{4, 2, 7, 3, 9, 0};
  auto loss = [&] { return ce_loss_grad(m.logits(ids), targets).value; };
  m.params().zero_grad();
  ad::Tape tape;
  const auto out = m.forward(tape, ids);
  const auto lg = ce_loss_grad(tape.value(out), targets);
  const Matrix d = Eigen::Map<const Matrix>(lg.grad.data(), 6, 11);
  tape.backward(tape.loss_head(out, lg.value, d));
  for (auto& t : m.params().tensors()) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      double* p = t.value.data() + i;
      const double old = *p, h = 1e-5;
      *p = old + h;
      const double a = loss();
      *p = old - h;
      const double b = loss();
      *p = old;
      worst = std::max(worst, oracle::rel_err(t.grad.data()[i], (a - b) / (2 * h), 1e-5));
    }
    EXPECT_LT(worst, 1e-4) << t.name;
  }
}

TEST(Transformer, DropoutOnlyInTraining) {
  auto mc = small_config();
  mc.dropout = 0.3;
  Transformer m(mc);
  jitter(m, 2, 0.3);
  const std::vector<int> ids{1, 2, 3, 4};
  ad::Tape t1, t2;
  EXPECT_TRUE(m.forward(t1, ids).id >= 0);
  EXPECT_TRUE(t1.value(m.forward(t1, ids)).isApprox(m.logits(ids)));
  Rng rng(1);
  EXPECT_FALSE(t2.value(m.forward(t2, ids, {true, &rng})).isApprox(m.logits(ids)));
  ad::Tape t3;
  EXPECT_THROW(m.forward(t3, ids, {true, nullptr}), ValidationError);
}

TEST(Checkpoint, RoundTripIsExact) {
  auto mc = small_config();
  mc.vocab_size = 15 + 4;
  mc.dropout = 0.1;
  ModelCheckpoint ck{mc, toy_vocab(10, 5), {}, {{"stage", "memorize"}, {"note", "x y"}}};
  Transformer m(mc);
  jitter(m, 3, 1.0);
  ck.params = m.params();
  const auto path = (std::filesystem::temp_directory_path() / "mera_model_test.ckpt").string();
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_TRUE(back.vocab == ck.vocab);
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_TRUE(back.params.same_values(ck.params));
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
  const std::vector<int> ids{12, 0, 3};
  EXPECT_EQ(back.model().logits(ids), m.logits(ids));
  std::remove(path.c_str());
}

TEST(Checkpoint, CorruptInputsAreRejected) {
  auto mc = small_config();
  mc.vocab_size = 14;
  ModelCheckpoint ck{mc, toy_vocab(10, 0), Transformer(mc).params(), {}};
  const auto bytes = serialize_checkpoint(ck);
  EXPECT_THROW(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), ValidationError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  auto wrong_version = bytes;
  wrong_version[8] = 7;
  EXPECT_THROW(deserialize_checkpoint(wrong_version), ValidationError);
  auto mismatch = ck;
  mismatch.config.d_model = 16;
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(mismatch)), ValidationError);
  auto vocab_off = ck;
  vocab_off.vocab = toy_vocab(10, 1);
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(vocab_off)), ValidationError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), IoError);
}
