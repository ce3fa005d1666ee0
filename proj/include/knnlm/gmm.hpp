#pragma once

// Diagonal-covariance Gaussian mixture fitted by EM, used to measure how
// tightly a set of representations clusters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "knnlm/error.hpp"

namespace knnlm {

struct GmmModel {
  std::size_t dim = 0;
  std::vector<double> weights;    // m, on the simplex
  std::vector<double> means;      // m*dim
  std::vector<double> variances;  // m*dim, >= floor

  std::size_t components() const { return weights.size(); }
};

inline void to_json(nlohmann::json& j, const GmmModel& g) {
  j = nlohmann::json{{"dim", g.dim}, {"weights", g.weights}, {"means", g.means},
                     {"variances", g.variances}};
}

struct GmmFitOptions {
  std::size_t components = 10;
  std::uint64_t seed = 0;
  std::size_t max_iter = 200;
  double tol = 1e-6;  // stop when the average log-likelihood gains less
  std::size_t restarts = 5;
  double var_floor = 1e-6;
};

struct GmmFitResult {
  GmmModel model;
  std::vector<double> loglik_trace;  // average log-likelihood per EM iteration
  std::size_t best_restart = 0;
  bool converged = false;
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (auto x : v) mx = std::max(mx, x);
  if (mx == -std::numeric_limits<double>::infinity()) return mx;
  double s = 0;
  for (auto x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Per-component log(w_c * N(x; mu_c, diag var_c)) for one vector.
inline void component_log_densities(const GmmModel& g, const double* x, std::span<double> out) {
  const std::size_t d = g.dim;
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (std::size_t c = 0; c < g.components(); ++c) {
    const double* mu = g.means.data() + c * d;
    const double* var = g.variances.data() + c * d;
    double s = 0;
    for (std::size_t k = 0; k < d; ++k) {
      double diff = x[k] - mu[k];
      s += log2pi + std::log(var[k]) + diff * diff / var[k];
    }
    out[c] = (g.weights[c] > 0 ? std::log(g.weights[c]) : -std::numeric_limits<double>::infinity()) -
             0.5 * s;
  }
}

/// Weighted M-step. Components with zero responsibility keep their
/// parameters and get weight 0.
inline void m_step(GmmModel& g, std::span<const double> X, std::span<const double> resp,
                   double var_floor) {
  const std::size_t d = g.dim, m = g.components(), n = X.size() / d;
  for (std::size_t c = 0; c < m; ++c) {
    double nc = 0;
    for (std::size_t i = 0; i < n; ++i) nc += resp[i * m + c];
    g.weights[c] = nc / double(n);
    if (nc <= 0) continue;
    double* mu = g.means.data() + c * d;
    double* var = g.variances.data() + c * d;
    std::fill_n(mu, d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = resp[i * m + c];
      if (r == 0) continue;
      for (std::size_t k = 0; k < d; ++k) mu[k] += r * X[i * d + k];
    }
    for (std::size_t k = 0; k < d; ++k) mu[k] /= nc;
    std::fill_n(var, d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = resp[i * m + c];
      if (r == 0) continue;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = X[i * d + k] - mu[k];
        var[k] += r * diff * diff;
      }
    }
    for (std::size_t k = 0; k < d; ++k) var[k] = std::max(var[k] / nc, var_floor);
  }
}

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return s;
}

/// k-means++ centres, hard assignment, then one M-step.
inline GmmModel kmeanspp_init(std::span<const double> X, std::size_t d, std::size_t m,
                              std::mt19937_64& rng, double var_floor) {
  const std::size_t n = X.size() / d;
  std::vector<std::size_t> centers{static_cast<std::size_t>(rng() % n)};
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  while (centers.size() < m) {
    const double* c = X.data() + centers.back() * d;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(X.data() + i * d, c, d));
      total += d2[i];
    }
    std::size_t pick = static_cast<std::size_t>(rng() % n);
    if (total > 0) {
      double u = unif(rng) * total, acc = 0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= u && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(pick);
  }

  GmmModel g;
  g.dim = d;
  g.weights.assign(m, 0.0);
  g.means.resize(m * d);
  g.variances.assign(m * d, 1.0);
  for (std::size_t c = 0; c < m; ++c)
    std::copy_n(X.begin() + centers[c] * d, d, g.means.begin() + c * d);

  std::vector<double> resp(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) {
      double s = sq_dist(X.data() + i * d, g.means.data() + c * d, d);
      if (s < bd) {
        bd = s;
        best = c;
      }
    }
    resp[i * m + best] = 1.0;
  }
  m_step(g, X, resp, var_floor);
  return g;
}

}  // namespace detail

/// log sum_c w_c N(x; mu_c, diag var_c) for each row of X ([n, dim]).
inline std::vector<double> gmm_loglik(const GmmModel& g, std::span<const double> X) {
  if (g.dim == 0 || X.size() % g.dim != 0) fail_usage("gmm_loglik: dimension mismatch");
  const std::size_t n = X.size() / g.dim;
  std::vector<double> out(n), lp(g.components());
  for (std::size_t i = 0; i < n; ++i) {
    detail::component_log_densities(g, X.data() + i * g.dim, lp);
    out[i] = detail::log_sum_exp(lp);
  }
  return out;
}

/// EM from k-means++ starts; the restart with the highest final average
/// log-likelihood wins (ties: lowest restart index).
inline GmmFitResult gmm_fit(std::span<const double> X, std::size_t dim, const GmmFitOptions& opt) {
  if (dim == 0 || X.size() % dim != 0) fail_usage("gmm_fit: dimension mismatch");
  const std::size_t n = X.size() / dim, m = opt.components;
  if (m < 1) fail_usage("gmm_fit: need at least one component");
  if (n < m)
    fail_data("gmm_fit: " + std::to_string(n) + " vectors < " + std::to_string(m) + " components");
  if (opt.restarts < 1 || opt.max_iter < 1) fail_usage("gmm_fit: restarts and max_iter must be >= 1");

  GmmFitResult best;
  bool have_best = false;
  std::vector<double> resp(n * m), lp(m);
  for (std::size_t r = 0; r < opt.restarts; ++r) {
    std::mt19937_64 rng(opt.seed + 0x51ed27u * (r + 1));
    GmmFitResult cur;
    cur.best_restart = r;
    cur.model = detail::kmeanspp_init(X, dim, m, rng, opt.var_floor);
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i) {
        detail::component_log_densities(cur.model, X.data() + i * dim, lp);
        const double lse = detail::log_sum_exp(lp);
        total += lse;
        for (std::size_t c = 0; c < m; ++c) resp[i * m + c] = std::exp(lp[c] - lse);
      }
      const double avg = total / double(n);
      if (!cur.loglik_trace.empty() && avg - cur.loglik_trace.back() < opt.tol) {
        cur.loglik_trace.push_back(avg);
        cur.converged = true;
        break;
      }
      cur.loglik_trace.push_back(avg);
      if (it + 1 == opt.max_iter) break;
      detail::m_step(cur.model, X, resp, opt.var_floor);
    }
    if (!have_best || cur.loglik_trace.back() > best.loglik_trace.back()) {
      best = std::move(cur);
      have_best = true;
    }
  }
  return best;
}

}  // namespace knnlm
