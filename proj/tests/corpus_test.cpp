#include <map>
#include <random>
#include <set>
#include <unordered_map>

#include <gtest/gtest.h>

#include "knnlm/corpus.hpp"

using namespace knnlm;

namespace {

std::string zipf_text(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> w;
  for (int i = 1; i <= 200; ++i) w.push_back(1.0 / i);
  std::discrete_distribution<int> dist(w.begin(), w.end());
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += "w" + std::to_string(dist(rng)) + " ";
  return s;
}

}  // namespace

TEST(Vocab, CountsAndOrdering) {
  auto v = build_vocab("a b a", 1);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v.token(0), "<unk>");
  EXPECT_EQ(v.id("a"), 1u);
  EXPECT_EQ(v.freq(1), 2u);
  EXPECT_EQ(v.id("b"), 2u);
  EXPECT_EQ(v.freq(2), 1u);
  EXPECT_EQ(v.freq(0), 0u);
}

TEST(Vocab, MinCountMapsRareToUnk) {
  auto v = build_vocab("a b a", 2);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_EQ(v.id("a"), 1u);
  EXPECT_EQ(v.id("b"), kUnkId);
  EXPECT_EQ(v.freq(kUnkId), 1u);
}

TEST(Vocab, EmptyCorpusIsAnError) {
  EXPECT_THROW(build_vocab("", 1), Error);
  EXPECT_THROW(build_vocab("  \n\t ", 1), Error);
}

TEST(Vocab, TiesBrokenLexicographically) {
  auto v = build_vocab("c b a c b a", 1);
  EXPECT_EQ(v.token(1), "a");
  EXPECT_EQ(v.token(2), "b");
  EXPECT_EQ(v.token(3), "c");
}

TEST(Vocab, ZipfSampleFrequenciesMatchIndependentRecount) {
  auto text = zipf_text(1000, 7);
  auto v = build_vocab(text, 1);
  std::uint64_t sum = 0;
  for (auto f : v.freqs()) sum += f;
  EXPECT_EQ(sum, 1000u);

  std::map<std::string, std::uint64_t> recount;
  std::istringstream in(text);
  for (std::string w; in >> w;) ++recount[w];
  ASSERT_EQ(recount.size() + 1, v.size());
  for (auto& [w, c] : recount) EXPECT_EQ(v.freq(v.id(w)), c) << w;
  for (std::size_t i = 2; i < v.size(); ++i) {
    EXPECT_GE(v.freq(TokenId(i - 1)), v.freq(TokenId(i)));
    if (v.freq(TokenId(i - 1)) == v.freq(TokenId(i))) {
      EXPECT_LT(v.token(TokenId(i - 1)), v.token(TokenId(i)));
    }
  }
}

TEST(Vocab, LiteralUnkTokenCountsAsUnk) {
  auto v = build_vocab("x <unk> x", 1);
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(v.freq(kUnkId), 1u);
}

TEST(Vocab, FileRoundTrip) {
  auto v = build_vocab(zipf_text(500, 3), 2);
  auto text = v.serialize();
  EXPECT_EQ(text.substr(0, 6), "<unk>\t");
  auto w = Vocab::parse(text);
  EXPECT_EQ(w.serialize(), text);
  EXPECT_EQ(w.content_hash(), v.content_hash());
  for (std::size_t i = 1; i < v.size(); ++i) EXPECT_EQ(w.id(v.token(TokenId(i))), TokenId(i));
}

TEST(Vocab, RejectsMalformedFiles) {
  EXPECT_THROW(Vocab::parse("a\t1\n"), Error);
  EXPECT_THROW(Vocab::parse("<unk>\t0\na\tx\n"), Error);
  EXPECT_THROW(Vocab::parse("<unk>\t0\na\t1\na\t1\n"), Error);
}

TEST(Encode, MapsKnownAndUnknownTokens) {
  auto v = build_vocab("a b b", 1);  // b:1, a:2
  auto s = encode(v, "b a b");
  EXPECT_EQ(s.ids, (std::vector<TokenId>{1, 2, 1}));
  EXPECT_EQ(s.source_tokens, 3u);

  auto va = build_vocab("a", 1);
  EXPECT_EQ(encode(va, "a c").ids, (std::vector<TokenId>{1, 0}));
}

TEST(Encode, DecodeRoundTripOnInVocabularyText) {
  auto text = zipf_text(300, 11);
  auto v = build_vocab(text, 1);
  auto s = encode(v, text);
  auto back = decode(v, s.ids);
  EXPECT_EQ(encode(v, back).ids, s.ids);
  for (auto id : s.ids) EXPECT_LT(id, v.size());
}

TEST(BatchIter, ShiftedTargetsSingleLane) {
  std::vector<TokenId> ids{1, 2, 3, 4, 5};
  BatchIter it(ids, 1, 2);
  ASSERT_EQ(it.size(), 2u);
  EXPECT_EQ(it[0].inputs, (std::vector<TokenId>{1, 2}));
  EXPECT_EQ(it[0].targets, (std::vector<TokenId>{2, 3}));
  EXPECT_EQ(it[1].inputs, (std::vector<TokenId>{3, 4}));
  EXPECT_EQ(it[1].targets, (std::vector<TokenId>{4, 5}));
}

TEST(BatchIter, LanesAreContiguous) {
  std::vector<TokenId> ids(10);
  std::iota(ids.begin(), ids.end(), TokenId{0});
  BatchIter it(ids, 2, 2);
  ASSERT_EQ(it.size(), 2u);
  std::set<TokenId> lane0, lane1;
  for (std::size_t c = 0; c < it.size(); ++c) {
    auto b = it[c];
    for (std::size_t t = 0; t < 2; ++t) {
      lane0.insert(b.inputs[t]);
      lane0.insert(b.targets[t]);
      lane1.insert(b.inputs[2 + t]);
      lane1.insert(b.targets[2 + t]);
    }
  }
  EXPECT_EQ(lane0, (std::set<TokenId>{0, 1, 2, 3, 4}));
  EXPECT_EQ(lane1, (std::set<TokenId>{5, 6, 7, 8, 9}));
}

TEST(BatchIter, TooShortSplitIsAnError) {
  std::vector<TokenId> ids{1, 2, 3};
  EXPECT_THROW(BatchIter(ids, 1, 3), Error);
  EXPECT_THROW(BatchIter(ids, 2, 1), Error);
}

TEST(BatchIter, TargetCountAndCoverageOnRandomLengths) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    std::size_t B = 1 + rng() % 5, T = 1 + rng() % 9;
    std::size_t len = B * (T + 1) + rng() % 200;
    std::vector<TokenId> ids(len);
    std::iota(ids.begin(), ids.end(), TokenId{0});
    BatchIter it(ids, B, T);

    // Reference loop: count full windows of B*T targets in len-1 targets.
    std::size_t expected = 0;
    for (std::size_t used = 0; used + B * T <= len - 1; used += B * T) expected += B * T;

    std::size_t emitted = 0;
    std::set<std::size_t> seen;
    for (std::size_t c = 0; c < it.size(); ++c) {
      auto b = it[c];
      for (std::size_t j = 0; j < B * T; ++j) {
        EXPECT_EQ(b.targets[j], b.target_positions[j]);  // ids are positions
        EXPECT_TRUE(seen.insert(b.target_positions[j]).second) << "duplicate target";
        if (j % T + 1 < T) {
          EXPECT_EQ(b.inputs[j + 1], b.targets[j]);
        }
        ++emitted;
      }
    }
    ASSERT_EQ(emitted, expected) << "len=" << len << " B=" << B << " T=" << T;
    EXPECT_EQ(it.total_targets(), expected);
  }
}

TEST(BatchIter, DeterministicOrder) {
  std::vector<TokenId> ids(50);
  std::iota(ids.begin(), ids.end(), TokenId{0});
  BatchIter a(ids, 3, 4), b(ids, 3, 4);
  for (std::size_t c = 0; c < a.size(); ++c) EXPECT_EQ(a[c].inputs, b[c].inputs);
}
