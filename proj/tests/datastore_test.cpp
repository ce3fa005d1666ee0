#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "knnlm/datastore.hpp"
#include "test_util.hpp"

using namespace knnlm;
namespace fs = std::filesystem;

namespace {

using knnlm::testing::brute_force;
using knnlm::testing::random_query;
using knnlm::testing::random_store;
using knnlm::testing::recall_at;

/// Gaussian blobs: the shape of real context vectors, which cluster by
/// next-token identity.
Datastore clustered_store(std::size_t n, std::uint32_t d, std::size_t blobs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> centers(blobs * d);
  for (auto& c : centers) c = 4.0f * nd(rng);
  Datastore ds;
  ds.dim = d;
  ds.keys.resize(n * d);
  ds.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t b = rng() % blobs;
    for (std::size_t k = 0; k < d; ++k) ds.keys[i * d + k] = centers[b * d + k] + nd(rng);
    ds.values[i] = TokenId(b);
  }
  return ds;
}


fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "knnlm_datastore_test";
  fs::create_directories(dir);
  return dir / name;
}

Datastore three_keys() {
  Datastore ds;
  ds.dim = 2;
  ds.keys = {0, 0, 1, 0, 0, 2};
  ds.values = {7, 8, 9};
  ds.checkpoint_hash = sha256(std::string_view("ckpt"));
  return ds;
}

}  // namespace

TEST(ExactKnn, ThreeKeyExample) {
  auto ds = three_keys();
  std::vector<float> q{0, 0};
  auto nn = exact_knn(ds.view(), q, 2);
  ASSERT_EQ(nn.size(), 2u);
  EXPECT_EQ(nn[0], (Neighbor{0, 0.0, 7}));
  EXPECT_EQ(nn[1], (Neighbor{1, 1.0, 8}));
}

TEST(ExactKnn, KLargerThanStoreReturnsAll) {
  auto ds = three_keys();
  std::vector<float> q{0, 0};
  auto nn = exact_knn(ds.view(), q, 10);
  ASSERT_EQ(nn.size(), 3u);
  EXPECT_EQ(nn[2].index, 2u);
  EXPECT_EQ(nn[2].distance, 4.0);
}

TEST(ExactKnn, DuplicateKeysTieToLowerIndex) {
  Datastore ds;
  ds.dim = 1;
  ds.keys = {3, 1, 1, 1, 2};
  ds.values = {0, 1, 2, 3, 4};
  std::vector<float> q{1};
  auto nn = exact_knn(ds.view(), q, 2);
  EXPECT_EQ(nn[0].index, 1u);
  EXPECT_EQ(nn[1].index, 2u);
  // Equal distance on both sides of the query.
  std::vector<float> mid{2};
  nn = exact_knn(ds.view(), mid, 5);
  std::vector<std::size_t> order;
  for (auto& n : nn) order.push_back(n.index);
  EXPECT_EQ(order, (std::vector<std::size_t>{4, 0, 1, 2, 3}));
}

TEST(ExactKnn, Errors) {
  Datastore empty;
  empty.dim = 2;
  std::vector<float> q{0, 0};
  EXPECT_THROW(exact_knn(empty.view(), q, 1), Error);
  auto ds = three_keys();
  EXPECT_THROW(exact_knn(ds.view(), q, 0), Error);
  std::vector<float> wrong{0, 0, 0};
  EXPECT_THROW(exact_knn(ds.view(), wrong, 1), Error);
}

TEST(ExactKnn, MatchesFullSortOracle) {
  auto ds = random_store(1000, 8, 3);
  // Plant exact duplicates to exercise the tie rule on random data.
  for (std::size_t i = 0; i < 50; ++i)
    std::copy_n(ds.keys.begin() + i * 8, 8, ds.keys.begin() + (500 + i) * 8);
  std::mt19937_64 rng(4);
  for (int qi = 0; qi < 50; ++qi) {
    std::vector<float> q = qi % 5 == 0 ? std::vector<float>(ds.keys.begin() + qi * 8, ds.keys.begin() + qi * 8 + 8)
                                       : random_query(8, rng);
    for (std::size_t k : {1u, 7u, 32u}) {
      auto got = exact_knn(ds.view(), q, k);
      auto want = brute_force(ds, q, k);
      ASSERT_EQ(got, want) << "query " << qi << " k=" << k;
    }
  }
}

TEST(ExactKnn, NeighborSetInvariantsAndDistances) {
  auto ds = random_store(300, 16, 5);
  std::mt19937_64 rng(6);
  for (int qi = 0; qi < 20; ++qi) {
    auto q = random_query(16, rng);
    auto nn = exact_knn(ds.view(), q, 25);
    for (std::size_t i = 0; i < nn.size(); ++i) {
      EXPECT_GE(nn[i].distance, 0.0);
      if (i) {
        EXPECT_LE(nn[i - 1].distance, nn[i].distance);
        EXPECT_NE(nn[i - 1].index, nn[i].index);
      }
      double s = 0;  // recomputed in reverse order
      for (std::size_t k = 16; k-- > 0;) {
        double diff = double(q[k]) - ds.keys[nn[i].index * 16 + k];
        s += diff * diff;
      }
      EXPECT_LE(std::abs(nn[i].distance - s) / std::max(nn[i].distance, 1e-30), 1e-6);
      EXPECT_EQ(nn[i].value, ds.values[nn[i].index]);
    }
  }
}

TEST(Ivf, FullProbeEqualsExact) {
  auto ds = random_store(2000, 8, 7);
  auto ix = ivf_build(ds.view(), 16, 1);
  std::mt19937_64 rng(8);
  for (int qi = 0; qi < 30; ++qi) {
    auto q = random_query(8, rng);
    EXPECT_EQ(ivf_knn(ix, ds.view(), q, 10, 16), exact_knn(ds.view(), q, 10));
  }
}

TEST(Ivf, SingleCellEqualsExact) {
  auto ds = random_store(500, 4, 9);
  auto ix = ivf_build(ds.view(), 1, 1);
  EXPECT_EQ(ix.list(0).size(), 500u);
  std::mt19937_64 rng(10);
  for (int qi = 0; qi < 20; ++qi) {
    auto q = random_query(4, rng);
    EXPECT_EQ(ivf_knn(ix, ds.view(), q, 5, 1), exact_knn(ds.view(), q, 5));
  }
}

TEST(Ivf, PostingListsPartitionKeys) {
  auto ds = random_store(1000, 6, 11);
  auto ix = ivf_build(ds.view(), 32, 2);
  std::vector<int> seen(ds.size(), 0);
  for (std::size_t c = 0; c < ix.cells(); ++c)
    for (auto id : ix.list(c)) ++seen[id];
  for (auto s : seen) EXPECT_EQ(s, 1);
  for (auto c : ix.centroids) EXPECT_TRUE(std::isfinite(c));
}

TEST(Ivf, RecallOnRandomKeys) {
  auto ds = random_store(10000, 8, 12);
  auto ix = ivf_build(ds.view(), 64, 3);
  double prev = 0;
  for (std::size_t nprobe : {1u, 2u, 4u, 8u, 16u, 32u, 64u}) {
    double r = recall_at(ix, ds, nprobe, 200, 13);
    EXPECT_GE(r, prev) << "nprobe=" << nprobe;
    prev = r;
    if (nprobe == 8) {
      EXPECT_GE(r, 0.9);
    }
    if (nprobe == 64) {
      EXPECT_EQ(r, 1.0);
    }
  }
}

TEST(Ivf, RecallOnClusteredKeys) {
  auto ds = clustered_store(10000, 64, 100, 14);
  auto ix = ivf_build(ds.view(), 64, 3);
  EXPECT_GE(recall_at(ix, ds, 8, 200, 15), 0.9);
}

TEST(Ivf, Deterministic) {
  auto ds = random_store(800, 8, 14);
  EXPECT_EQ(ivf_build(ds.view(), 20, 5).serialize(), ivf_build(ds.view(), 20, 5).serialize());
}

TEST(Ivf, Errors) {
  auto ds = three_keys();
  EXPECT_THROW(ivf_build(ds.view(), 4, 0), Error);
  EXPECT_THROW(ivf_build(ds.view(), 0, 0), Error);
  auto ix = ivf_build(ds.view(), 2, 0);
  std::vector<float> q{0, 0};
  EXPECT_THROW(ivf_knn(ix, ds.view(), q, 1, 0), Error);
  EXPECT_THROW(ivf_knn(ix, ds.view(), q, 1, 3), Error);
  EXPECT_THROW(Retriever(ds.view(), ix, 3), Error);
}

TEST(Ivf, SaveLoadRoundTrip) {
  auto ds = random_store(400, 8, 15);
  auto ix = ivf_build(ds.view(), 10, 6, 25, ds.content_hash());
  auto path = temp_path("index.kniv").string();
  ix.save(path);
  auto back = IvfIndex::load(path);
  EXPECT_EQ(back.serialize(), ix.serialize());
  EXPECT_EQ(back.datastore_hash, ds.content_hash());
  auto bytes = ix.serialize();
  EXPECT_THROW(IvfIndex::parse(bytes.substr(0, bytes.size() - 3)), Error);
  bytes[1] = 'X';
  EXPECT_THROW(IvfIndex::parse(bytes), Error);
}

TEST(DatastoreFile, HeaderLayout) {
  auto ds = three_keys();
  auto bytes = ds.serialize();
  ASSERT_EQ(bytes.size(), kDatastoreHeaderBytes + 3 * 2 * 4 + 3 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "KNDS");
  io::Reader r(bytes, "t");
  r.get_bytes(4);
  EXPECT_EQ(r.get<std::uint32_t>(), 1u);
  EXPECT_EQ(r.get<std::uint32_t>(), 2u);
  EXPECT_EQ(r.get<std::uint64_t>(), 3u);
  auto h = r.get_bytes(32);
  EXPECT_TRUE(std::equal(h.begin(), h.end(), reinterpret_cast<const char*>(ds.checkpoint_hash.data())));
  float k[6];
  r.get_array(std::span<float>(k));
  EXPECT_EQ(k[5], 2.0f);
  std::uint32_t v[3];
  r.get_array(std::span<std::uint32_t>(v));
  EXPECT_EQ(v[2], 9u);
}

TEST(DatastoreFile, RoundTripIsBitExact) {
  auto ds = three_keys();
  auto path = temp_path("three.knds").string();
  ds.save(path);
  auto back = Datastore::load(path);
  EXPECT_EQ(back.keys, ds.keys);
  EXPECT_EQ(back.values, ds.values);
  EXPECT_EQ(back.dim, ds.dim);
  EXPECT_EQ(back.checkpoint_hash, ds.checkpoint_hash);
  EXPECT_EQ(back.serialize(), ds.serialize());
}

TEST(DatastoreFile, CorruptionRejected) {
  auto bytes = random_store(20, 4, 16).serialize();
  for (std::size_t cut : {std::size_t(0), std::size_t(10), kDatastoreHeaderBytes, bytes.size() - 1})
    EXPECT_THROW(Datastore::parse(bytes.substr(0, cut)), Error) << cut;
  EXPECT_THROW(Datastore::parse(bytes + "x"), Error);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Datastore::parse(bad_magic), Error);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(Datastore::parse(bad_version), Error);
  auto huge_n = bytes;
  huge_n[19] = char(0x7f);
  EXPECT_THROW(Datastore::parse(huge_n), Error);

  auto path = temp_path("truncated.knds").string();
  io::write_file(path, bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(Datastore::load(path), Error);
  EXPECT_THROW(MappedDatastore{path}, Error);
}

TEST(DatastoreFile, MappedViewMatchesLoaded) {
  auto ds = random_store(300, 8, 17);
  auto path = temp_path("mapped.knds").string();
  ds.save(path);
  MappedDatastore mapped(path);
  EXPECT_EQ(mapped.content_hash(), ds.content_hash());
  ASSERT_EQ(mapped.view().size(), ds.size());
  EXPECT_TRUE(std::equal(ds.keys.begin(), ds.keys.end(), mapped.view().keys.begin()));
  std::mt19937_64 rng(18);
  auto q = random_query(8, rng);
  EXPECT_EQ(exact_knn(mapped.view(), q, 5), exact_knn(ds.view(), q, 5));
}

TEST(DatastoreFile, MillionKeyRoundTripHashEqual) {
  auto ds = random_store(1'000'000, 8, 19, 30000);
  auto path = temp_path("million.knds").string();
  ds.save(path);
  auto h = ds.content_hash();
  EXPECT_EQ(sha256_file(path), h);
  EXPECT_EQ(Datastore::load(path).content_hash(), h);
  fs::remove(path);
}

namespace {

struct BuiltModel {
  Checkpoint ckpt;
  EncodedSplit split;
};

BuiltModel tiny_checkpoint() {
  auto text = std::string("the cat sat on the mat and the dog sat on the log ");
  std::string corpus;
  for (int i = 0; i < 6; ++i) corpus += text;
  auto vocab = build_vocab(corpus);
  auto split = encode(vocab, corpus);
  auto tc = knnlm::testing::toy_train_config(vocab.size());
  tc.epochs = 1;
  auto res = train_run<float>(tc, split);
  res.checkpoint.vocab_hash = vocab.content_hash();
  return {res.checkpoint, split};
}

}  // namespace

TEST(BuildDatastore, TenTokenWindowExample) {
  auto b = tiny_checkpoint();
  EncodedSplit ten = b.split;
  ten.ids.resize(10);
  // A window of 5 tokens holds 4 (input, target) pairs: two windows, the
  // last token is dropped.
  auto ds = build_datastore(b.ckpt.model<float>(), ten, 4, b.ckpt.content_hash());
  EXPECT_EQ(ds.size(), 8u);
  auto ds5 = build_datastore(b.ckpt.model<float>(), ten, 5, b.ckpt.content_hash());
  EXPECT_EQ(ds5.size(), BatchIter(ten.ids, 1, 5).total_targets());
}

TEST(BuildDatastore, ValuesAreTheTargetStream) {
  auto b = tiny_checkpoint();
  auto ds = build_datastore(b.ckpt, b.split);
  const std::size_t T = b.ckpt.config.context_len;
  BatchIter it(b.split.ids, 1, T);
  ASSERT_EQ(ds.size(), it.total_targets());
  std::vector<TokenId> stream;
  for (std::size_t c = 0; c < it.size(); ++c)
    for (auto t : it[c].targets) stream.push_back(t);
  EXPECT_EQ(ds.values, stream);
  EXPECT_EQ(ds.dim, b.ckpt.config.d_model);
  EXPECT_EQ(ds.checkpoint_hash, b.ckpt.content_hash());
  for (auto k : ds.keys) EXPECT_TRUE(std::isfinite(k));
}

TEST(BuildDatastore, KeysAreFinalRepresentations) {
  auto b = tiny_checkpoint();
  auto ds = build_datastore(b.ckpt, b.split);
  auto model = b.ckpt.model<float>();
  const std::size_t T = b.ckpt.config.context_len, d = ds.dim;
  std::vector<TokenId> first(b.split.ids.begin(), b.split.ids.begin() + T);
  auto out = model.forward(first, 1, T, nullptr, false);
  for (std::size_t i = 0; i < T * d; ++i) EXPECT_EQ(ds.keys[i], out.reprs[i]);
}

TEST(BuildDatastore, RebuildIsBitIdentical) {
  auto b = tiny_checkpoint();
  EXPECT_EQ(build_datastore(b.ckpt, b.split).serialize(), build_datastore(b.ckpt, b.split).serialize());
}

TEST(BuildDatastore, VocabHashMismatch) {
  auto b = tiny_checkpoint();
  b.split.vocab_hash[0] ^= 1;
  EXPECT_THROW(build_datastore(b.ckpt, b.split), Error);
}
