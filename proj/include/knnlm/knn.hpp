#pragma once

// kNN-LM inference: neighbour distances -> weights -> next-token
// distribution, interpolated with the LM distribution as
//   p = lambda * p_knn + (1 - lambda) * p_lm.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnlm/checkpoint.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/error.hpp"
#include "knnlm/model.hpp"
#include "knnlm/trainer.hpp"

namespace knnlm {

struct KnnConfig {
  std::size_t k = 16;
  double lambda = 0.3;
  double tau = 1.0;  // temperature on unsquared L2 distance

  void validate() const {
    if (k < 1) fail_usage("k must be >= 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail_usage("lambda must be in [0,1]");
    if (!(tau > 0.0) || !std::isfinite(tau)) fail_usage("tau must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const KnnConfig& c) {
  j = nlohmann::json{{"k", c.k}, {"lambda", c.lambda}, {"tau", c.tau}};
}

inline void from_json(const nlohmann::json& j, KnnConfig& c) {
  KnnConfig d;
  c.k = j.value("k", d.k);
  c.lambda = j.value("lambda", d.lambda);
  c.tau = j.value("tau", d.tau);
}

struct TokenDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }

  bool valid(double tol = 1e-6) const {
    double s = 0;
    for (auto p : probs) {
      if (!(p >= 0.0)) return false;
      s += p;
    }
    return std::abs(s - 1.0) <= tol;
  }
};

/// w_i proportional to exp(-d_i / tau), normalized; the minimum distance is
/// subtracted first so large distances cannot underflow every weight.
inline std::vector<double> neighbor_weights(std::span<const double> distances, double tau) {
  if (distances.empty()) fail_usage("neighbor_weights: need at least one distance");
  if (!(tau > 0.0)) fail_usage("neighbor_weights: tau must be > 0");
  const double dmin = *std::min_element(distances.begin(), distances.end());
  std::vector<double> w(distances.size());
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(-(distances[i] - dmin) / tau);
    s += w[i];
  }
  for (auto& x : w) x /= s;
  return w;
}

namespace detail {

inline std::vector<double> l2_distances(const NeighborSet& nbrs) {
  std::vector<double> d(nbrs.size());
  for (std::size_t i = 0; i < nbrs.size(); ++i) d[i] = std::sqrt(nbrs[i].distance);
  return d;
}

}  // namespace detail

/// p(v) = sum of weights of neighbours labelled v; zero elsewhere.
inline TokenDistribution knn_distribution(const NeighborSet& nbrs, double tau, std::size_t vocab) {
  if (nbrs.empty()) fail_usage("knn_distribution: empty neighbor set");
  auto w = neighbor_weights(detail::l2_distances(nbrs), tau);
  TokenDistribution p;
  p.probs.assign(vocab, 0.0);
  for (std::size_t i = 0; i < nbrs.size(); ++i) {
    if (nbrs[i].value >= vocab) fail_data("knn_distribution: neighbour label out of range");
    p.probs[nbrs[i].value] += w[i];
  }
  return p;
}

/// knn_distribution(nbrs, tau, V)[target] without materializing V entries.
inline double knn_prob(const NeighborSet& nbrs, double tau, TokenId target) {
  auto w = neighbor_weights(detail::l2_distances(nbrs), tau);
  double p = 0;
  for (std::size_t i = 0; i < nbrs.size(); ++i)
    if (nbrs[i].value == target) p += w[i];
  return p;
}

inline TokenDistribution interpolate(const TokenDistribution& p_lm, const TokenDistribution& p_knn,
                                     double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail_usage("interpolate: lambda must be in [0,1]");
  if (p_lm.size() != p_knn.size()) fail_usage("interpolate: size mismatch");
  TokenDistribution out;
  out.probs.resize(p_lm.size());
  for (std::size_t i = 0; i < out.probs.size(); ++i)
    out.probs[i] = lambda * p_knn.probs[i] + (1.0 - lambda) * p_lm.probs[i];
  return out;
}

template <typename Real>
TokenDistribution softmax_distribution(std::span<const Real> logits) {
  double mx = logits[0];
  for (auto v : logits) mx = std::max(mx, double(v));
  TokenDistribution p;
  p.probs.resize(logits.size());
  double s = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += p.probs[i] = std::exp(double(logits[i]) - mx);
  for (auto& x : p.probs) x /= s;
  return p;
}

/// NLL of the target under the interpolated distribution. lambda == 0 returns
/// the LM NLL untouched.
inline double mixed_nll(double lm_nll, double p_knn, double lambda) {
  if (lambda == 0.0) return lm_nll;
  return -std::log(lambda * p_knn + (1.0 - lambda) * std::exp(-lm_nll));
}

/// Per-position evaluation record shared by evaluation, sweeps and analysis.
struct TokenScore {
  std::size_t position = 0;  // offset of the target in the split
  TokenId target = 0;
  double lm_nll = 0;
  double knn_prob = std::numeric_limits<double>::quiet_NaN();  // p_knn(target)
  std::vector<float> repr;  // filled only when requested
};

/// Scores every target position of `split` with non-overlapping windows.
/// Retrieval runs only when `retriever` is non-null.
template <typename Real>
std::vector<TokenScore> score_tokens(const TransformerLM<Real>& model, const Retriever* retriever,
                                     const EncodedSplit& split, std::size_t k, double tau,
                                     bool keep_reprs = false, std::size_t bptt = 0) {
  if (bptt == 0) bptt = model.config().context_len;
  const std::size_t V = model.config().vocab, d = model.config().d_model;
  for (auto id : split.ids)
    if (id >= V) fail_data("split has ids outside the model vocabulary");
  std::vector<TokenScore> scores;
  std::vector<float> q(d);
  for_each_window(model, split.ids, bptt, [&](const Batch& b, const ForwardOutput<Real>& out) {
    for (std::size_t t = 0; t < b.targets.size(); ++t) {
      TokenScore s;
      s.position = b.target_positions[t];
      s.target = b.targets[t];
      s.lm_nll = token_nll(std::span<const Real>(out.logits).subspan(t * V, V), s.target);
      for (std::size_t i = 0; i < d; ++i) q[i] = static_cast<float>(out.reprs[t * d + i]);
      if (retriever) s.knn_prob = knn_prob(retriever->search(q, k), tau, s.target);
      if (keep_reprs) s.repr = q;
      scores.push_back(std::move(s));
    }
  });
  return scores;
}

/// exp(mean NLL) with a fixed sequential accumulation order.
inline double perplexity_of(const std::vector<TokenScore>& scores, double lambda) {
  if (scores.empty()) fail_data("no tokens scored");
  double total = 0;
  for (const auto& s : scores) total += mixed_nll(s.lm_nll, s.knn_prob, lambda);
  return std::exp(total / double(scores.size()));
}

struct EvalResult {
  double ppl_lm = 0;
  double ppl_knn_lm = 0;
  std::size_t tokens = 0;
};

inline void check_provenance(const Checkpoint& ckpt, const Hash& ckpt_hash,
                             const DatastoreView& store, const EncodedSplit& split) {
  if (ckpt.vocab_hash != split.vocab_hash)
    fail_data("vocab hash mismatch: checkpoint " + to_hex(ckpt.vocab_hash) + " vs split " +
              to_hex(split.vocab_hash));
  if (store.checkpoint_hash != ckpt_hash)
    fail_data("datastore was built from checkpoint " + to_hex(store.checkpoint_hash) +
              ", not " + to_hex(ckpt_hash));
  if (store.dim != ckpt.config.d_model) fail_data("datastore dimension does not match model");
  for (auto v : store.values)
    if (v >= ckpt.config.vocab) fail_data("datastore value outside the model vocabulary");
}

/// Base-LM and kNN-LM perplexity in one pass. At lambda == 0 the datastore
/// is never queried and ppl_knn_lm is bit-identical to ppl_lm.
template <typename Real = float>
EvalResult eval_knn_lm(const Checkpoint& ckpt, const Retriever& retriever,
                       const EncodedSplit& split, const KnnConfig& cfg) {
  cfg.validate();
  auto hash = ckpt.content_hash();
  check_provenance(ckpt, hash, retriever.store(), split);
  auto model = ckpt.model<Real>();
  auto scores = score_tokens(model, cfg.lambda == 0.0 ? nullptr : &retriever, split, cfg.k, cfg.tau);
  return {perplexity_of(scores, 0.0), perplexity_of(scores, cfg.lambda), scores.size()};
}

struct SweepRow {
  double lambda = 0;
  double ppl = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double best_lambda = 0;
  double best_ppl = 0;
  double ppl_lm = 0;

  std::string csv() const {
    std::ostringstream os;
    os << "lambda,ppl\n";
    for (auto& r : rows) os << io::shortest(r.lambda) << ',' << io::shortest(r.ppl) << '\n';
    return os.str();
  }
};

inline void validate_grid(const std::vector<double>& grid) {
  if (grid.empty()) fail_usage("lambda grid is empty");
  bool has_zero = false;
  for (auto l : grid) {
    if (!(l >= 0.0 && l <= 1.0)) fail_usage("lambda grid values must be in [0,1]");
    has_zero |= l == 0.0;
  }
  if (!has_zero) fail_usage("lambda grid must contain 0");
}

/// ppl(lambda) over the grid from one set of scores; argmin ties go to the
/// smaller lambda.
inline SweepResult sweep_lambda(const std::vector<TokenScore>& scores, const std::vector<double>& grid) {
  validate_grid(grid);
  SweepResult r;
  r.ppl_lm = perplexity_of(scores, 0.0);
  bool first = true;
  for (auto l : grid) {
    double ppl = perplexity_of(scores, l);
    r.rows.push_back({l, ppl});
    if (first || ppl < r.best_ppl || (ppl == r.best_ppl && l < r.best_lambda)) {
      r.best_ppl = ppl;
      r.best_lambda = l;
      first = false;
    }
  }
  return r;
}

template <typename Real = float>
SweepResult sweep_lambda(const Checkpoint& ckpt, const Retriever& retriever,
                         const EncodedSplit& split, std::size_t k, double tau,
                         const std::vector<double>& grid) {
  validate_grid(grid);
  KnnConfig{k, 0.0, tau}.validate();
  check_provenance(ckpt, ckpt.content_hash(), retriever.store(), split);
  auto model = ckpt.model<Real>();
  bool need_knn = std::any_of(grid.begin(), grid.end(), [](double l) { return l != 0.0; });
  auto scores = score_tokens(model, need_knn ? &retriever : nullptr, split, k, tau);
  return sweep_lambda(scores, grid);
}

/// "lo:hi:step" (inclusive) or a comma-separated list.
inline std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> out;
  auto num = [&](const std::string& s) {
    try {
      std::size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      fail_usage("bad number in grid: '" + s + "'");
    }
  };
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) fail_usage("grid must be lo:hi:step");
    double lo = num(parts[0]), hi = num(parts[1]), step = num(parts[2]);
    if (!(step > 0) || hi < lo) fail_usage("grid needs step > 0 and hi >= lo");
    auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
    // Rounded to 12 decimals so 0:1:0.05 yields 0.15, not 0.15000000000000002.
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(std::min(hi, std::round((lo + double(i) * step) * 1e12) / 1e12));
  } else {
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ',');)
      if (!p.empty()) out.push_back(num(p));
  }
  return out;
}

}  // namespace knnlm
