#include <cmath>
#include <random>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <gtest/gtest.h>

#include "knnlm/checkpoint.hpp"
#include "knnlm/model.hpp"
#include "knnlm/regularizers.hpp"
#include "knnlm/trainer.hpp"
#include "test_util.hpp"

using namespace knnlm;
using knnlm::testing::GradCheck;
using knnlm::testing::small_config;
using knnlm::testing::toy_split;
using knnlm::testing::toy_train_config;

TEST(Forward, ShapeContract) {
  auto cfg = small_config();
  TransformerLM<float> m(cfg);
  std::vector<TokenId> ids{3};
  auto out = m.forward(ids, 1, 1);
  EXPECT_EQ(out.logits.size(), cfg.vocab);
  EXPECT_EQ(out.reprs.size(), cfg.d_model);
  for (auto v : out.logits) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, Deterministic) {
  TransformerLM<float> m(small_config());
  std::vector<TokenId> ids{1, 2, 3, 4, 5, 6, 7, 8};
  auto a = m.forward(ids, 2, 4);
  auto b = m.forward(ids, 2, 4);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.reprs, b.reprs);
}

TEST(Forward, RejectsOutOfRangeIdsAndLongSequences) {
  auto cfg = small_config();
  TransformerLM<float> m(cfg);
  std::vector<TokenId> bad{TokenId(cfg.vocab)};
  EXPECT_THROW(m.forward(bad, 1, 1), Error);
  std::vector<TokenId> longer(cfg.context_len + 1, 1);
  EXPECT_THROW(m.forward(longer, 1, longer.size()), Error);
}

TEST(Forward, CausalMask) {
  auto cfg = small_config();
  TransformerLM<double> m(cfg);
  knnlm::testing::randomize(m, 5);
  std::vector<TokenId> ids{1, 4, 2, 7, 3, 9};
  auto base = m.forward(ids, 1, ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto pert = ids;
    pert[t] = (pert[t] + 3) % TokenId(cfg.vocab);
    auto out = m.forward(pert, 1, ids.size());
    const std::size_t V = cfg.vocab;
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t v = 0; v < V; ++v)
        ASSERT_EQ(out.logits[s * V + v], base.logits[s * V + v]) << "t=" << t << " s=" << s;
    bool changed = false;
    for (std::size_t v = 0; v < V; ++v) changed |= out.logits[t * V + v] != base.logits[t * V + v];
    EXPECT_TRUE(changed);
  }
}

TEST(Forward, TiedEmbeddingsShareStorage) {
  auto cfg = small_config();
  TransformerLM<double> m(cfg);
  EXPECT_EQ(m.layout().out_w, m.layout().tok_emb);
  std::vector<TokenId> ids{1, 2};
  auto before = m.forward(ids, 1, 2);
  // Changing only the embedding row of token 5 changes the logit for token 5.
  auto emb = m.tensor("tok_emb");
  for (std::size_t k = 0; k < cfg.d_model; ++k) emb[5 * cfg.d_model + k] += 0.5;
  auto after = m.forward(ids, 1, 2);
  EXPECT_NE(before.logits[5], after.logits[5]);
  EXPECT_EQ(before.reprs, after.reprs);  // token 5 is not an input

  auto untied = cfg;
  untied.tie_embeddings = false;
  TransformerLM<double> u(untied);
  EXPECT_NE(u.layout().out_w, u.layout().tok_emb);
  EXPECT_EQ(u.num_params(), m.num_params() + cfg.vocab * cfg.d_model);
}

TEST(CeLoss, UniformLogits) {
  std::vector<double> logits(4, 0.25);
  std::vector<TokenId> tgt{2};
  EXPECT_NEAR(ce_loss<double>(logits, tgt, 4), std::log(4.0), 1e-12);
  EXPECT_NEAR(ce_loss<double>(logits, tgt, 4), 1.386294, 1e-6);
}

TEST(CeLoss, HugeMarginGoesToZero) {
  std::vector<double> logits{0, 0, 1e4, 0};
  std::vector<TokenId> tgt{2};
  EXPECT_EQ(ce_loss<double>(logits, tgt, 4), 0.0);
  std::vector<float> flogits{-1e30f, 0.f, 1e30f};
  std::vector<TokenId> t2{2};
  EXPECT_TRUE(std::isfinite(ce_loss<float>(flogits, t2, 3)));
}

TEST(CeLoss, MatchesHighPrecisionReference) {
  using Big = boost::multiprecision::cpp_bin_float_50;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 2.0);
  const std::size_t N = 7, V = 13;
  std::vector<double> logits(N * V);
  std::vector<TokenId> tgt(N);
  for (auto& l : logits) l = nd(rng);
  for (auto& t : tgt) t = TokenId(rng() % V);
  Big total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    Big s = 0;
    for (std::size_t v = 0; v < V; ++v) s += exp(Big(logits[i * V + v]));
    total += log(s) - Big(logits[i * V + tgt[i]]);
  }
  double ref = static_cast<double>(total / N);
  EXPECT_NEAR(ce_loss<double>(logits, tgt, V), ref, 1e-14 * std::abs(ref));
}

TEST(Backward, UnusedPositionEmbeddingsGetZeroGradient) {
  auto cfg = small_config();
  TransformerLM<double> m(cfg);
  std::vector<TokenId> ids{1, 2, 3, 4, 5, 6};
  std::vector<TokenId> tgt{2, 3, 4, 5, 6, 7};
  ForwardCache<double> cache;
  auto out = m.forward(ids, 2, 3, &cache);
  auto dl = ce_loss_grad<double>(out.logits, tgt, cfg.vocab);
  std::vector<double> g(m.num_params(), 0.0);
  m.backward(cache, dl, {}, g);
  auto pos = m.layout().find("pos_emb");
  for (std::size_t t = 3; t < cfg.context_len; ++t)
    for (std::size_t k = 0; k < cfg.d_model; ++k)
      ASSERT_EQ(g[pos.offset + t * cfg.d_model + k], 0.0);
  for (auto v : g) ASSERT_TRUE(std::isfinite(v));
}

TEST(Backward, FiniteDifferenceCheckCE) {
  GradCheck gc(Objective::ce, 0.0);
  EXPECT_LE(gc.max_rel_error(), 1e-3);
}

TEST(Backward, FiniteDifferenceCheckL2) {
  GradCheck gc(Objective::ce_l2, 0.05);
  EXPECT_LE(gc.max_rel_error(), 1e-3);
}

TEST(Backward, FiniteDifferenceCheckQueue) {
  GradCheck gc(Objective::ce_moco, 0.05);
  EXPECT_LE(gc.max_rel_error(), 1e-3);
}

TEST(Backward, L2GradientIsCeGradientPlusReprPath) {
  auto cfg = small_config();
  TransformerLM<double> m(cfg);
  knnlm::testing::randomize(m, 9);
  std::vector<TokenId> ids{1, 2, 3, 4, 5, 6}, tgt{2, 3, 4, 5, 6, 7};
  const double omega = 0.3;
  ForwardCache<double> cache;
  auto out = m.forward(ids, 2, 3, &cache);
  auto dl = ce_loss_grad<double>(out.logits, tgt, cfg.vocab);

  std::vector<double> dr(out.reprs.size(), 0.0);
  l2_penalty<double>(out.reprs, cfg.d_model, omega, dr);
  std::vector<double> g_joint(m.num_params(), 0.0), g_ce(m.num_params(), 0.0),
      g_reg(m.num_params(), 0.0);
  m.backward(cache, dl, dr, g_joint);
  m.backward(cache, dl, {}, g_ce);
  std::vector<double> two_omega_r(out.reprs.size());
  for (std::size_t i = 0; i < out.reprs.size(); ++i) two_omega_r[i] = 2 * omega * out.reprs[i];
  m.backward(cache, {}, two_omega_r, g_reg);
  for (std::size_t i = 0; i < g_joint.size(); ++i)
    ASSERT_NEAR(g_joint[i], g_ce[i] + g_reg[i], 1e-12 * (1 + std::abs(g_joint[i])));
}


TEST(Train, LossDecreasesOnToyCorpus) {
  auto split = toy_split(64, 12, 1);
  auto tc = toy_train_config(12);
  auto res = train_run<float>(tc, split);
  ASSERT_EQ(res.epochs.size(), 2u);
  EXPECT_LT(res.epochs[1].train_loss, res.epochs[0].train_loss);
  EXPECT_EQ(res.checkpoint.loss_trace.size(), 2u);
}

TEST(Train, ZeroOmegaReducesToPlainCe) {
  auto split = toy_split(256, 12, 2);
  auto tc = toy_train_config(12);
  tc.epochs = 3;
  auto ce = train_run<float>(tc, split);
  for (auto obj : {Objective::ce_l2, Objective::ce_moco}) {
    auto rc = tc;
    rc.objective = obj;
    rc.reg.omega = 0.0;
    auto reg = train_run<float>(rc, split);
    EXPECT_EQ(reg.checkpoint.loss_trace, ce.checkpoint.loss_trace) << to_string(obj);
    EXPECT_EQ(reg.checkpoint.params, ce.checkpoint.params) << to_string(obj);
  }
}

TEST(Train, FixedSeedIsReproducible) {
  auto split = toy_split(256, 12, 3);
  auto tc = toy_train_config(12);
  tc.objective = Objective::ce_moco;
  tc.reg.omega = 0.01;
  auto a = train_run<float>(tc, split);
  auto b = train_run<float>(tc, split);
  EXPECT_EQ(a.checkpoint.serialize(), b.checkpoint.serialize());
  tc.model.seed += 1;
  auto c = train_run<float>(tc, split);
  EXPECT_NE(a.checkpoint.params, c.checkpoint.params);
}

TEST(Train, DivergenceAborts) {
  auto split = toy_split(128, 12, 4);
  auto tc = toy_train_config(12);
  tc.objective = Objective::ce_l2;
  tc.reg.omega = 1e38;  // penalty overflows float
  try {
    train_run<float>(tc, split);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::divergence);
  }
}

TEST(Perplexity, UniformModelGivesVocabSize) {
  auto cfg = small_config();
  cfg.vocab = 10;
  TransformerLM<double> m(cfg);
  // Zero output path: every logit equals the (zero) bias.
  auto lnw = m.tensor("ln_f.weight");
  std::fill(lnw.begin(), lnw.end(), 0.0);
  auto split = toy_split(40, 10, 5);
  EXPECT_NEAR(perplexity(m, split), 10.0, 1e-12);
}

TEST(Perplexity, MemorizedSentenceApproachesOne) {
  EncodedSplit s;
  for (int rep = 0; rep < 8; ++rep)
    for (TokenId t : {1u, 2u, 3u, 4u, 5u, 6u, 7u, 8u}) s.ids.push_back(t);
  auto tc = toy_train_config(10);
  tc.epochs = 150;
  tc.batch = 1;
  tc.shuffle = false;
  auto res = train_run<float>(tc, s);
  EXPECT_LT(perplexity(res.model, s, 8), 1.05);
}

TEST(Perplexity, MatchesSinglePassOracle) {
  auto cfg = small_config();
  TransformerLM<double> m(cfg);
  knnlm::testing::randomize(m, 13);
  auto split = toy_split(50, cfg.vocab, 6);
  const std::size_t T = 6;
  // Oracle: one pass over explicit windows, using ce_loss per window.
  double total = 0;
  std::size_t n = 0;
  for (std::size_t start = 0; start + T < split.ids.size(); start += T) {
    std::vector<TokenId> in(split.ids.begin() + start, split.ids.begin() + start + T);
    std::vector<TokenId> tg(split.ids.begin() + start + 1, split.ids.begin() + start + T + 1);
    auto out = m.forward(in, 1, T);
    total += ce_loss<double>(out.logits, tg, cfg.vocab) * T;
    n += T;
  }
  EXPECT_NEAR(perplexity(m, split, T), std::exp(total / n), 1e-10);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto split = toy_split(128, 12, 8);
  auto tc = toy_train_config(12);
  auto res = train_run<float>(tc, split);
  auto bytes = res.checkpoint.serialize();
  auto back = Checkpoint::parse(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.params, res.checkpoint.params);
  EXPECT_EQ(back.loss_trace, res.checkpoint.loss_trace);

  auto m1 = res.checkpoint.model<float>();
  auto m2 = back.model<float>();
  std::vector<TokenId> ids{1, 2, 3, 4, 5};
  EXPECT_EQ(m1.forward(ids, 1, 5).logits, m2.forward(ids, 1, 5).logits);
  EXPECT_EQ(res.model.forward(ids, 1, 5).logits, m2.forward(ids, 1, 5).logits);
}

TEST(Checkpoint, RejectsCorruption) {
  auto split = toy_split(64, 12, 9);
  auto res = train_run<float>(toy_train_config(12), split);
  auto bytes = res.checkpoint.serialize();
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Checkpoint::parse(bad_magic), Error);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(Checkpoint::parse(bad_version), Error);
  EXPECT_THROW(Checkpoint::parse(bytes.substr(0, bytes.size() - 3)), Error);
  EXPECT_THROW(Checkpoint::parse(bytes.substr(0, 10)), Error);
}
