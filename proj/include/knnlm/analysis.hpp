#pragma once

// Per-token diagnostics: frequency/loss histograms, a median-NLL split of
// frequent-word tokens, and GMM log-likelihoods of their representations.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnlm/checkpoint.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/gmm.hpp"
#include "knnlm/io.hpp"
#include "knnlm/knn.hpp"

namespace knnlm {

struct TokenRecord {
  std::size_t position = 0;
  TokenId target = 0;
  std::size_t rank = 0;  // frequency rank of target, 0 = most frequent
  double nll = 0;
  std::vector<float> repr;
};

/// One record per scored position. With a retriever and a KnnConfig the NLL
/// is the interpolated kNN-LM NLL; otherwise the plain LM NLL.
inline std::vector<TokenRecord> collect_records(const Checkpoint& ckpt, const Vocab& vocab,
                                                const EncodedSplit& split,
                                                const Retriever* retriever = nullptr,
                                                const KnnConfig& knn = {}) {
  if (ckpt.vocab_hash != vocab.content_hash() || split.vocab_hash != ckpt.vocab_hash)
    fail_data("collect_records: vocab hash mismatch");
  if (vocab.size() != ckpt.config.vocab) fail_data("collect_records: vocab size mismatch");
  const bool use_knn = retriever && knn.lambda != 0.0;
  if (retriever) {
    knn.validate();
    check_provenance(ckpt, ckpt.content_hash(), retriever->store(), split);
  }
  auto model = ckpt.model<float>();
  auto scores = score_tokens(model, use_knn ? retriever : nullptr, split, knn.k, knn.tau, true);
  std::vector<TokenRecord> out;
  out.reserve(scores.size());
  for (auto& s : scores) {
    TokenRecord r;
    r.position = s.position;
    r.target = s.target;
    r.rank = vocab.rank(s.target);
    r.nll = use_knn ? mixed_nll(s.lm_nll, s.knn_prob, knn.lambda) : s.lm_nll;
    r.repr = std::move(s.repr);
    out.push_back(std::move(r));
  }
  return out;
}

struct FreqLossHistogram {
  std::vector<std::size_t> edges;  // n+1 rank boundaries, bucket b = [edges[b], edges[b+1])
  std::vector<std::size_t> counts;
  std::vector<double> losses;

  std::string csv() const {
    std::ostringstream os;
    os << "bucket_lo,bucket_hi,count,loss\n";
    for (std::size_t b = 0; b < counts.size(); ++b)
      os << edges[b] << ',' << edges[b + 1] << ',' << counts[b] << ',' << io::shortest(losses[b]) << '\n';
    return os.str();
  }
};

/// Equal-width buckets over frequency rank [0, vocab).
inline FreqLossHistogram freq_loss_histogram(const std::vector<TokenRecord>& records,
                                             std::size_t n_buckets, std::size_t vocab) {
  if (records.empty()) fail_data("freq_loss_histogram: no records");
  if (n_buckets < 1) fail_usage("freq_loss_histogram: n_buckets must be >= 1");
  if (vocab < 1) fail_usage("freq_loss_histogram: empty vocabulary");
  FreqLossHistogram h;
  for (std::size_t b = 0; b <= n_buckets; ++b) h.edges.push_back(b * vocab / n_buckets);
  h.counts.assign(n_buckets, 0);
  h.losses.assign(n_buckets, 0.0);
  for (const auto& r : records) {
    if (r.rank >= vocab) fail_data("freq_loss_histogram: rank outside vocabulary");
    auto b = std::size_t(std::upper_bound(h.edges.begin(), h.edges.end(), r.rank) - h.edges.begin()) - 1;
    ++h.counts[b];
    h.losses[b] += r.nll;
  }
  return h;
}

struct ScoreSplit {
  std::vector<TokenRecord> high;  // NLL strictly above the median
  std::vector<TokenRecord> low;
  double threshold = 0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) fail_data("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Keeps records whose target rank is < top_f, then splits them at the
/// median NLL.
inline ScoreSplit split_scores(const std::vector<TokenRecord>& records, std::size_t top_f) {
  std::vector<const TokenRecord*> kept;
  for (const auto& r : records)
    if (r.rank < top_f) kept.push_back(&r);
  if (kept.size() < 2)
    fail_data("split_scores: need at least 2 frequent-word records, have " + std::to_string(kept.size()));
  std::vector<double> nll;
  for (auto* r : kept) nll.push_back(r->nll);
  ScoreSplit s;
  s.threshold = median(nll);
  for (auto* r : kept) (r->nll > s.threshold ? s.high : s.low).push_back(*r);
  return s;
}

struct LoglikHistogram {
  std::vector<double> edges;  // n+1
  std::vector<std::size_t> high, low;

  std::string csv() const {
    std::ostringstream os;
    os << "bin_lo,bin_hi,high,low\n";
    for (std::size_t b = 0; b < high.size(); ++b)
      os << io::shortest(edges[b]) << ',' << io::shortest(edges[b + 1]) << ',' << high[b] << ',' << low[b] << '\n';
    return os.str();
  }
};

struct ClusteringSide {
  std::string label;
  ScoreSplit split;
  std::vector<double> loglik_high, loglik_low;  // aligned with split.high / split.low
  GmmFitResult gmm;
  LoglikHistogram histogram;
  double mean_high = 0, mean_low = 0;

  /// mean(loglik of low-loss group) - mean(loglik of high-loss group)
  double gap() const { return mean_low - mean_high; }

  std::string records_csv() const {
    std::ostringstream os;
    os << "rank,nll,group,loglik\n";
    for (std::size_t i = 0; i < split.high.size(); ++i)
      os << split.high[i].rank << ',' << io::shortest(split.high[i].nll) << ",high," << io::shortest(loglik_high[i]) << '\n';
    for (std::size_t i = 0; i < split.low.size(); ++i)
      os << split.low[i].rank << ',' << io::shortest(split.low[i].nll) << ",low," << io::shortest(loglik_low[i]) << '\n';
    return os.str();
  }

  nlohmann::json summary() const {
    return {{"label", label},
            {"n_high", split.high.size()},
            {"n_low", split.low.size()},
            {"nll_threshold", split.threshold},
            {"mean_loglik_high", mean_high},
            {"mean_loglik_low", mean_low},
            {"gap", gap()},
            {"gmm_components", gmm.model.components()},
            {"gmm_best_restart", gmm.best_restart},
            {"gmm_iterations", gmm.loglik_trace.size()},
            {"gmm_converged", gmm.converged},
            {"gmm_avg_loglik", gmm.loglik_trace.back()}};
  }
};

struct ClusteringOptions {
  std::size_t top_f = 100;
  std::size_t components = 10;
  std::uint64_t seed = 0;
  std::size_t bins = 20;
  std::size_t max_iter = 200;
  std::size_t restarts = 5;
};

inline LoglikHistogram loglik_histogram(const std::vector<double>& high, const std::vector<double>& low,
                                        std::size_t bins) {
  if (bins < 1) fail_usage("histogram needs at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&high, &low})
    for (auto x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (hi == lo) hi = lo + 1;
  LoglikHistogram h;
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(lo + (hi - lo) * double(b) / double(bins));
  h.edges.back() = hi;
  h.high.assign(bins, 0);
  h.low.assign(bins, 0);
  auto bin = [&](double x) {
    auto b = std::size_t((x - lo) / (hi - lo) * double(bins));
    return std::min(b, bins - 1);
  };
  for (auto x : high) ++h.high[bin(x)];
  for (auto x : low) ++h.low[bin(x)];
  return h;
}

/// Fits a GMM on the representations of frequent-word records and scores
/// the high- and low-loss groups under it.
inline ClusteringSide cluster_records(const std::vector<TokenRecord>& records, std::string label,
                                      const ClusteringOptions& opt) {
  ClusteringSide side;
  side.label = std::move(label);
  side.split = split_scores(records, opt.top_f);
  const std::size_t d = side.split.high.empty() ? side.split.low.front().repr.size()
                                                : side.split.high.front().repr.size();
  if (d == 0) fail_usage("cluster_records: records carry no representations");
  auto flatten = [&](const std::vector<TokenRecord>& rs) {
    std::vector<double> x;
    x.reserve(rs.size() * d);
    for (const auto& r : rs) x.insert(x.end(), r.repr.begin(), r.repr.end());
    return x;
  };
  auto xh = flatten(side.split.high), xl = flatten(side.split.low);
  std::vector<double> all = xh;
  all.insert(all.end(), xl.begin(), xl.end());
  GmmFitOptions g;
  g.components = opt.components;
  g.seed = opt.seed;
  g.max_iter = opt.max_iter;
  g.restarts = opt.restarts;
  side.gmm = gmm_fit(all, d, g);
  side.loglik_high = gmm_loglik(side.gmm.model, xh);
  side.loglik_low = gmm_loglik(side.gmm.model, xl);
  auto mean = [](const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0;
    for (auto x : v) s += x;
    return s / double(v.size());
  };
  side.mean_high = mean(side.loglik_high);
  side.mean_low = mean(side.loglik_low);
  side.histogram = loglik_histogram(side.loglik_high, side.loglik_low, opt.bins);
  return side;
}

struct ClusteringInput {
  std::string label;
  const Checkpoint* checkpoint = nullptr;
  const Retriever* retriever = nullptr;  // optional: score with the kNN-LM
};

struct ClusteringReport {
  std::vector<ClusteringSide> sides;

  nlohmann::json summary() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : sides) j.push_back(s.summary());
    return j;
  }
};

inline ClusteringReport clustering_report(const std::vector<ClusteringInput>& inputs, const Vocab& vocab,
                                          const EncodedSplit& split, const KnnConfig& knn,
                                          const ClusteringOptions& opt) {
  if (inputs.empty()) fail_usage("clustering_report: no checkpoints");
  ClusteringReport rep;
  for (const auto& in : inputs) {
    if (inputs.front().checkpoint->vocab_hash != in.checkpoint->vocab_hash)
      fail_data("clustering_report: checkpoints use different vocabularies");
    auto records = collect_records(*in.checkpoint, vocab, split, in.retriever, knn);
    rep.sides.push_back(cluster_records(records, in.label, opt));
  }
  return rep;
}

}  // namespace knnlm
