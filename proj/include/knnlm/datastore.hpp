#pragma once

// Key/value datastore of (context representation -> next token) pairs and
// squared-L2 nearest-neighbour search, exact or through an inverted-file
// (IVF) index.
//
// Datastore file:  "KNDS" | u32 version | u32 d | u64 N | u8[32] checkpoint
//                  hash | f32 keys[N*d] (row-major) | u32 values[N]
// Index file:      "KNIV" | u32 version | u32 d | u32 C | u64 N | u8[32]
//                  datastore hash | f32 centroids[C*d] | u64 offsets[C+1]
//                  | u32 ids[N]
// The datastore header is 52 bytes, so the key matrix is 4-byte aligned in
// a mapped file and can be searched in place.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include "knnlm/checkpoint.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/error.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/io.hpp"
#include "knnlm/trainer.hpp"

namespace knnlm {

inline constexpr std::string_view kDatastoreMagic = "KNDS";
inline constexpr std::string_view kIndexMagic = "KNIV";
inline constexpr std::uint32_t kDatastoreVersion = 1;
inline constexpr std::uint32_t kIndexVersion = 1;
inline constexpr std::size_t kDatastoreHeaderBytes = 4 + 4 + 4 + 8 + 32;

struct Neighbor {
  std::size_t index = 0;
  double distance = 0;  // squared L2
  TokenId value = 0;

  bool operator==(const Neighbor&) const = default;
};

/// Ascending by (distance, index).
using NeighborSet = std::vector<Neighbor>;

/// Non-owning view over a key matrix and its values.
struct DatastoreView {
  std::uint32_t dim = 0;
  std::span<const float> keys;
  std::span<const TokenId> values;
  Hash checkpoint_hash{};

  std::size_t size() const { return values.size(); }
  std::span<const float> key(std::size_t i) const { return keys.subspan(i * dim, dim); }
};

class Datastore {
 public:
  std::uint32_t dim = 0;
  std::vector<float> keys;
  std::vector<TokenId> values;
  Hash checkpoint_hash{};

  std::size_t size() const { return values.size(); }

  DatastoreView view() const { return {dim, keys, values, checkpoint_hash}; }

  std::string serialize() const {
    if (keys.size() != values.size() * std::size_t(dim))
      fail_data("datastore: keys/values size mismatch");
    io::Writer w;
    w.put_bytes(kDatastoreMagic);
    w.put(kDatastoreVersion);
    w.put(dim);
    w.put(static_cast<std::uint64_t>(values.size()));
    w.put_bytes(std::string_view(reinterpret_cast<const char*>(checkpoint_hash.data()), 32));
    w.put_array(std::span<const float>(keys));
    w.put_array(std::span<const TokenId>(values));
    return w.take();
  }

  static Datastore parse(std::string_view bytes) {
    io::Reader r(bytes, "datastore");
    auto [dim, n, hash] = read_header(r);
    Datastore ds;
    ds.dim = dim;
    ds.checkpoint_hash = hash;
    if (n > r.remaining() / (std::size_t(dim) * 4 + 4)) fail_data("datastore: truncated file");
    ds.keys.resize(n * dim);
    ds.values.resize(n);
    r.get_array(std::span<float>(ds.keys));
    r.get_array(std::span<TokenId>(ds.values));
    r.expect_end();
    return ds;
  }

  Hash content_hash() const { return sha256(serialize()); }
  void save(const std::string& path) const { io::write_file(path, serialize()); }
  static Datastore load(const std::string& path) { return parse(io::read_file(path)); }

  static std::tuple<std::uint32_t, std::uint64_t, Hash> read_header(io::Reader& r) {
    if (r.get_bytes(4) != kDatastoreMagic) fail_data("datastore: bad magic");
    auto version = r.get<std::uint32_t>();
    if (version != kDatastoreVersion)
      fail_data("datastore: unsupported version " + std::to_string(version));
    auto dim = r.get<std::uint32_t>();
    auto n = r.get<std::uint64_t>();
    if (dim == 0) fail_data("datastore: zero dimension");
    Hash h{};
    auto hb = r.get_bytes(32);
    std::memcpy(h.data(), hb.data(), 32);
    return {dim, n, h};
  }
};

/// Read-only memory mapping of a datastore file; queries run directly on
/// the mapped key matrix.
class MappedDatastore {
 public:
  explicit MappedDatastore(const std::string& path) {
    int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) fail_data("cannot open " + path);
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      fail_data("cannot stat " + path);
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ < kDatastoreHeaderBytes) {
      ::close(fd);
      fail_data("datastore: truncated file");
    }
    void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
    ::close(fd);
    if (p == MAP_FAILED) fail_data("mmap failed for " + path);
    base_ = static_cast<const char*>(p);
    try {
      io::Reader r(std::string_view(base_, size_), "datastore");
      auto [dim, n, hash] = Datastore::read_header(r);
      if (r.remaining() != n * (std::size_t(dim) * 4 + 4)) fail_data("datastore: truncated file");
      const char* keys = base_ + kDatastoreHeaderBytes;
      view_.dim = dim;
      view_.checkpoint_hash = hash;
      view_.keys = {reinterpret_cast<const float*>(keys), n * dim};
      view_.values = {reinterpret_cast<const TokenId*>(keys + n * dim * 4), n};
    } catch (...) {
      ::munmap(const_cast<char*>(base_), size_);
      throw;
    }
  }

  MappedDatastore(const MappedDatastore&) = delete;
  MappedDatastore& operator=(const MappedDatastore&) = delete;

  ~MappedDatastore() {
    if (base_) ::munmap(const_cast<char*>(base_), size_);
  }

  const DatastoreView& view() const { return view_; }
  Hash content_hash() const {
    return sha256(std::string_view(base_, size_));
  }

 private:
  const char* base_ = nullptr;
  std::size_t size_ = 0;
  DatastoreView view_;
};

/// One (key, value) pair per target position emitted by BatchIter(split,
/// 1, bptt), in corpus order. Keys come from the eval-mode forward pass.
template <typename Real>
Datastore build_datastore(const TransformerLM<Real>& model, const EncodedSplit& split,
                          std::size_t bptt, const Hash& checkpoint_hash) {
  if (bptt == 0) bptt = model.config().context_len;
  const std::size_t d = model.config().d_model;
  Datastore ds;
  ds.dim = static_cast<std::uint32_t>(d);
  ds.checkpoint_hash = checkpoint_hash;
  for (auto id : split.ids)
    if (id >= model.config().vocab) fail_data("split has ids outside the model vocabulary");
  for_each_window(
      model, split.ids, bptt,
      [&](const Batch& b, const ForwardOutput<Real>& out) {
        for (std::size_t t = 0; t < b.targets.size(); ++t) {
          for (std::size_t k = 0; k < d; ++k) ds.keys.push_back(static_cast<float>(out.reprs[t * d + k]));
          ds.values.push_back(b.targets[t]);
        }
      },
      false);
  return ds;
}

inline Datastore build_datastore(const Checkpoint& ckpt, const EncodedSplit& split,
                                 std::size_t bptt = 0) {
  if (ckpt.vocab_hash != split.vocab_hash)
    fail_data("vocab hash mismatch: checkpoint " + to_hex(ckpt.vocab_hash) + " vs split " +
              to_hex(split.vocab_hash));
  return build_datastore(ckpt.model<float>(), split, bptt, ckpt.content_hash());
}

namespace detail {

inline double squared_l2(std::span<const double> q, const float* key) {
  double s = 0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    double diff = q[k] - double(key[k]);
    s += diff * diff;
  }
  return s;
}

/// Bounded max-heap keeping the k smallest (distance, index) pairs.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}

  void offer(double dist, std::size_t idx) {
    if (heap_.size() < k_) {
      heap_.emplace(dist, idx);
    } else if (std::pair(dist, idx) < heap_.top()) {
      heap_.pop();
      heap_.emplace(dist, idx);
    }
  }

  NeighborSet finish(const DatastoreView& store) {
    NeighborSet out(heap_.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      auto [d, idx] = heap_.top();
      heap_.pop();
      out[i] = Neighbor{idx, d, store.values[idx]};
    }
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<std::pair<double, std::size_t>> heap_;
};

inline std::vector<double> to_double(std::span<const float> q) {
  return std::vector<double>(q.begin(), q.end());
}

}  // namespace detail

/// The k keys with smallest squared L2 distance; ties go to the lower key
/// index. Returns all N keys if k > N.
inline NeighborSet exact_knn(const DatastoreView& store, std::span<const float> query,
                             std::size_t k) {
  if (store.size() == 0) fail_data("exact_knn: empty datastore");
  if (k < 1) fail_usage("exact_knn: k must be >= 1");
  if (query.size() != store.dim) fail_usage("exact_knn: query dimension mismatch");
  auto q = detail::to_double(query);
  detail::TopK top(k);
  for (std::size_t i = 0; i < store.size(); ++i)
    top.offer(detail::squared_l2(q, store.keys.data() + i * store.dim), i);
  return top.finish(store);
}

struct IvfIndex {
  std::uint32_t dim = 0;
  std::vector<float> centroids;        // C*d
  std::vector<std::uint64_t> offsets;  // C+1, into ids
  std::vector<std::uint32_t> ids;      // N key indices grouped by cell
  Hash datastore_hash{};

  std::size_t cells() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t size() const { return ids.size(); }

  std::span<const std::uint32_t> list(std::size_t c) const {
    return std::span<const std::uint32_t>(ids).subspan(offsets[c], offsets[c + 1] - offsets[c]);
  }

  std::string serialize() const {
    io::Writer w;
    w.put_bytes(kIndexMagic);
    w.put(kIndexVersion);
    w.put(dim);
    w.put(static_cast<std::uint32_t>(cells()));
    w.put(static_cast<std::uint64_t>(ids.size()));
    w.put_bytes(std::string_view(reinterpret_cast<const char*>(datastore_hash.data()), 32));
    w.put_array(std::span<const float>(centroids));
    w.put_array(std::span<const std::uint64_t>(offsets));
    w.put_array(std::span<const std::uint32_t>(ids));
    return w.take();
  }

  static IvfIndex parse(std::string_view bytes) {
    io::Reader r(bytes, "index");
    if (r.get_bytes(4) != kIndexMagic) fail_data("index: bad magic");
    auto version = r.get<std::uint32_t>();
    if (version != kIndexVersion) fail_data("index: unsupported version " + std::to_string(version));
    IvfIndex ix;
    ix.dim = r.get<std::uint32_t>();
    auto C = r.get<std::uint32_t>();
    auto n = r.get<std::uint64_t>();
    auto hb = r.get_bytes(32);
    std::memcpy(ix.datastore_hash.data(), hb.data(), 32);
    if (ix.dim == 0 || C == 0) fail_data("index: empty header");
    if (std::uint64_t(C) * ix.dim * 4 + (std::uint64_t(C) + 1) * 8 + n * 4 != r.remaining())
      fail_data("index: truncated file");
    ix.centroids.resize(std::size_t(C) * ix.dim);
    ix.offsets.resize(C + 1);
    ix.ids.resize(n);
    r.get_array(std::span<float>(ix.centroids));
    r.get_array(std::span<std::uint64_t>(ix.offsets));
    r.get_array(std::span<std::uint32_t>(ix.ids));
    if (ix.offsets.front() != 0 || ix.offsets.back() != n ||
        !std::is_sorted(ix.offsets.begin(), ix.offsets.end()))
      fail_data("index: corrupt posting offsets");
    for (auto id : ix.ids)
      if (id >= n) fail_data("index: posting id out of range");
    return ix;
  }

  void save(const std::string& path) const { io::write_file(path, serialize()); }
  static IvfIndex load(const std::string& path) { return parse(io::read_file(path)); }
};

namespace detail {

inline std::size_t nearest_centroid(std::span<const double> x, const std::vector<double>& cent,
                                    std::size_t C, double* best_dist = nullptr) {
  const std::size_t d = x.size();
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      double diff = x[k] - cent[c * d + k];
      s += diff * diff;
    }
    if (s < bd) {
      bd = s;
      best = c;
    }
  }
  if (best_dist) *best_dist = bd;
  return best;
}

}  // namespace detail

/// k-means (k-means++ seeding, fixed Lloyd iteration budget) over the
/// keys, then one posting list per centroid. Empty clusters are re-seeded
/// from the point farthest from its assigned centroid.
inline IvfIndex ivf_build(const DatastoreView& store, std::size_t C, std::uint64_t seed,
                          std::size_t iterations = 25, const Hash& datastore_hash = {}) {
  const std::size_t N = store.size(), d = store.dim;
  if (C < 1) fail_usage("ivf_build: C must be >= 1");
  if (C > N) fail_usage("ivf_build: C (" + std::to_string(C) + ") > N (" + std::to_string(N) + ")");

  std::vector<double> X(store.keys.begin(), store.keys.end());
  auto row = [&](std::size_t i) { return std::span<const double>(X).subspan(i * d, d); };

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> cent(C * d);
  std::vector<double> d2(N, std::numeric_limits<double>::infinity());
  auto set_centroid = [&](std::size_t c, std::size_t i) {
    std::copy_n(X.begin() + i * d, d, cent.begin() + c * d);
  };
  auto update_d2 = [&](std::size_t c) {
    for (std::size_t i = 0; i < N; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = X[i * d + k] - cent[c * d + k];
        s += diff * diff;
      }
      d2[i] = std::min(d2[i], s);
    }
  };

  set_centroid(0, rng() % N);
  update_d2(0);
  for (std::size_t c = 1; c < C; ++c) {
    double total = 0;
    for (auto v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0) {
      double u = unif(rng) * total, acc = 0;
      pick = N - 1;
      for (std::size_t i = 0; i < N; ++i) {
        acc += d2[i];
        if (acc >= u && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng() % N;
    }
    set_centroid(c, pick);
    update_d2(c);
  }

  std::vector<std::size_t> assign(N);
  std::vector<double> dist(N);
  auto assign_all = [&] {
    for (std::size_t i = 0; i < N; ++i) assign[i] = detail::nearest_centroid(row(i), cent, C, &dist[i]);
  };

  for (std::size_t it = 0; it < iterations; ++it) {
    assign_all();
    std::vector<double> sum(C * d, 0.0);
    std::vector<std::size_t> count(C, 0);
    for (std::size_t i = 0; i < N; ++i) {
      ++count[assign[i]];
      for (std::size_t k = 0; k < d; ++k) sum[assign[i] * d + k] += X[i * d + k];
    }
    std::vector<char> taken(N, 0);
    for (std::size_t c = 0; c < C; ++c) {
      if (count[c] > 0) {
        for (std::size_t k = 0; k < d; ++k) cent[c * d + k] = sum[c * d + k] / double(count[c]);
        continue;
      }
      std::size_t far = 0;
      double fd = -1;
      for (std::size_t i = 0; i < N; ++i)
        if (!taken[i] && dist[i] > fd) {
          fd = dist[i];
          far = i;
        }
      taken[far] = 1;
      set_centroid(c, far);
    }
  }
  assign_all();

  IvfIndex ix;
  ix.dim = static_cast<std::uint32_t>(d);
  ix.datastore_hash = datastore_hash;
  ix.centroids.assign(cent.begin(), cent.end());
  // Assignment uses the stored (float) centroids so queries see the same cells.
  std::vector<double> fcent(ix.centroids.begin(), ix.centroids.end());
  std::vector<std::uint64_t> count(C, 0);
  for (std::size_t i = 0; i < N; ++i) {
    assign[i] = detail::nearest_centroid(row(i), fcent, C);
    ++count[assign[i]];
  }
  ix.offsets.assign(C + 1, 0);
  for (std::size_t c = 0; c < C; ++c) ix.offsets[c + 1] = ix.offsets[c] + count[c];
  ix.ids.resize(N);
  std::vector<std::uint64_t> fill(ix.offsets.begin(), ix.offsets.end() - 1);
  for (std::size_t i = 0; i < N; ++i) ix.ids[fill[assign[i]]++] = static_cast<std::uint32_t>(i);
  return ix;
}

/// Scans the posting lists of the `nprobe` centroids nearest to the query.
/// With nprobe == C the result equals exact_knn.
inline NeighborSet ivf_knn(const IvfIndex& index, const DatastoreView& store,
                           std::span<const float> query, std::size_t k, std::size_t nprobe) {
  const std::size_t C = index.cells();
  if (store.size() == 0) fail_data("ivf_knn: empty datastore");
  if (index.size() != store.size() || index.dim != store.dim)
    fail_data("ivf_knn: index does not match datastore");
  if (k < 1) fail_usage("ivf_knn: k must be >= 1");
  if (nprobe < 1 || nprobe > C) fail_usage("ivf_knn: nprobe must be in [1, C]");
  if (query.size() != store.dim) fail_usage("ivf_knn: query dimension mismatch");
  auto q = detail::to_double(query);

  std::vector<std::pair<double, std::size_t>> cd(C);
  for (std::size_t c = 0; c < C; ++c)
    cd[c] = {detail::squared_l2(q, index.centroids.data() + c * store.dim), c};
  std::partial_sort(cd.begin(), cd.begin() + nprobe, cd.end());

  detail::TopK top(k);
  for (std::size_t p = 0; p < nprobe; ++p)
    for (auto i : index.list(cd[p].second))
      top.offer(detail::squared_l2(q, store.keys.data() + std::size_t(i) * store.dim), i);
  return top.finish(store);
}

/// Exact search, or IVF search when an index is supplied.
class Retriever {
 public:
  explicit Retriever(const DatastoreView& store) : store_(store) {}
  Retriever(const DatastoreView& store, const IvfIndex& index, std::size_t nprobe)
      : store_(store), index_(&index), nprobe_(nprobe) {
    if (nprobe < 1 || nprobe > index.cells()) fail_usage("nprobe must be in [1, C]");
  }

  const DatastoreView& store() const { return store_; }

  NeighborSet search(std::span<const float> query, std::size_t k) const {
    return index_ ? ivf_knn(*index_, store_, query, k, nprobe_) : exact_knn(store_, query, k);
  }

 private:
  DatastoreView store_;
  const IvfIndex* index_ = nullptr;
  std::size_t nprobe_ = 1;
};

}  // namespace knnlm
