#pragma once

// Auxiliary representation losses:
//   queue penalty   omega * sum_j sum_i || sg(Q_i^{w_j}) - r_j ||^2
//   L2 penalty      omega * sum_j || r_j ||^2
// where r_j is the context representation at position j and Q^{w} holds
// the most recent momentum-encoder representations that predicted word w.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "knnlm/corpus.hpp"
#include "knnlm/error.hpp"
#include "knnlm/model.hpp"

namespace knnlm {

struct RegConfig {
  double omega = 0.0;
  std::size_t queue_len = 4;
  double momentum = 0.99;

  void validate() const {
    if (!(omega >= 0.0) || !std::isfinite(omega)) fail_usage("omega must be >= 0");
    if (queue_len < 1) fail_usage("queue_len must be >= 1");
    if (!(momentum >= 0.0 && momentum <= 1.0)) fail_usage("momentum must be in [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const RegConfig& r) {
  j = nlohmann::json{{"omega", r.omega}, {"queue_len", r.queue_len}, {"momentum", r.momentum}};
}

inline void from_json(const nlohmann::json& j, RegConfig& r) {
  RegConfig d;
  r.omega = j.value("omega", d.omega);
  r.queue_len = j.value("queue_len", d.queue_len);
  r.momentum = j.value("momentum", d.momentum);
}

namespace detail {

// Pairwise (tree) summation. Summing 2^k identical terms is exact, which
// makes the zero-queue penalty exactly queue_len * L2 penalty for
// power-of-two queue lengths.
template <typename Real>
Real pairwise_sum(std::span<const Real> v) {
  if (v.empty()) return Real(0);
  if (v.size() == 1) return v[0];
  auto half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

template <typename Real>
Real squared_distance(const Real* a, const Real* b, std::size_t d) {
  Real s = 0;
  for (std::size_t k = 0; k < d; ++k) {
    Real diff = a[k] - b[k];
    s += diff * diff;
  }
  return s;
}

}  // namespace detail

/// omega * sum_j ||r_j||^2 over an [N, d] batch. If `grad` is non-empty it
/// receives += 2*omega*r_j.
template <typename Real>
Real l2_penalty(std::span<const Real> reprs, std::size_t dim, double omega,
                std::span<Real> grad = {}) {
  if (dim == 0 || reprs.size() % dim != 0) fail_usage("l2_penalty: bad shape");
  const std::size_t n = reprs.size() / dim;
  Real total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const Real* r = reprs.data() + j * dim;
    Real s = 0;
    for (std::size_t k = 0; k < dim; ++k) {
      Real diff = Real(0) - r[k];
      s += diff * diff;
    }
    total += s;
  }
  if (!grad.empty()) {
    if (grad.size() != reprs.size()) fail_usage("l2_penalty: grad shape mismatch");
    const Real c = static_cast<Real>(2.0 * omega);
    for (std::size_t i = 0; i < reprs.size(); ++i) grad[i] += c * reprs[i];
  }
  return static_cast<Real>(omega) * total;
}

/// Per-word FIFO ring buffers of capacity L over R^d. Storage for a word
/// is allocated on its first push; unseen words hold no entries.
template <typename Real>
class QueueBank {
 public:
  QueueBank() = default;
  QueueBank(std::size_t vocab, std::size_t capacity, std::size_t dim)
      : capacity_(capacity), dim_(dim), slots_(vocab) {
    if (capacity < 1) fail_usage("queue capacity must be >= 1");
  }

  std::size_t vocab() const { return slots_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t count(TokenId id) const { return slots_.at(id).count; }

  /// i-th stored vector of word `id`, oldest first.
  std::span<const Real> entry(TokenId id, std::size_t i) const {
    const auto& s = slots_.at(id);
    if (i >= s.count) fail_usage("queue entry out of range");
    std::size_t phys = (s.head + i) % capacity_;
    return std::span<const Real>(s.data).subspan(phys * dim_, dim_);
  }

  void push(TokenId id, std::span<const Real> v) {
    if (v.size() != dim_) fail_usage("queue_push: dimension mismatch");
    auto& s = slots_.at(id);
    if (s.data.empty()) s.data.assign(capacity_ * dim_, Real(0));
    std::size_t phys;
    if (s.count < capacity_) {
      phys = (s.head + s.count) % capacity_;
      ++s.count;
    } else {
      phys = s.head;
      s.head = (s.head + 1) % capacity_;
    }
    std::copy(v.begin(), v.end(), s.data.begin() + phys * dim_);
  }

 private:
  struct Slot {
    std::vector<Real> data;
    std::size_t head = 0;
    std::size_t count = 0;
  };

  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::vector<Slot> slots_;
};

/// Queue penalty over the entries currently stored for each target. Queue
/// contents are constants (stop-gradient): only `grad` (w.r.t. reprs)
/// receives += 2*omega*sum_i (r_j - Q_i).
template <typename Real>
Real moco_penalty(const QueueBank<Real>& queues, std::span<const TokenId> targets,
                  std::span<const Real> reprs, double omega, std::span<Real> grad = {}) {
  const std::size_t d = queues.dim();
  if (reprs.size() != targets.size() * d) fail_usage("moco_penalty: shape mismatch");
  if (!grad.empty() && grad.size() != reprs.size())
    fail_usage("moco_penalty: grad shape mismatch");
  const Real c = static_cast<Real>(2.0 * omega);
  std::vector<Real> per_entry(queues.capacity());
  Real total = 0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    const Real* r = reprs.data() + j * d;
    const std::size_t n = queues.count(targets[j]);
    for (std::size_t i = 0; i < n; ++i) {
      auto q = queues.entry(targets[j], i);
      per_entry[i] = detail::squared_distance(q.data(), r, d);
      if (!grad.empty())
        for (std::size_t k = 0; k < d; ++k) grad[j * d + k] += c * (r[k] - q[k]);
    }
    total += detail::pairwise_sum(std::span<const Real>(per_entry).first(n));
  }
  return static_cast<Real>(omega) * total;
}

/// target <- m * target + (1 - m) * online, elementwise.
template <typename Real>
void momentum_update(std::span<Real> target, std::span<const Real> online, double m) {
  if (target.size() != online.size()) fail_usage("momentum_update: shape mismatch");
  if (m == 1.0) return;
  if (m == 0.0) {
    std::copy(online.begin(), online.end(), target.begin());
    return;
  }
  for (std::size_t i = 0; i < target.size(); ++i)
    target[i] = static_cast<Real>(m * double(target[i]) + (1.0 - m) * double(online[i]));
}

/// Shadow copy of the LM used to fill the queues; starts equal to the
/// online model.
template <typename Real>
class MomentumEncoder {
 public:
  MomentumEncoder(const TransformerLM<Real>& online, double momentum)
      : model_(online), momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) fail_usage("momentum must be in [0,1]");
  }

  const TransformerLM<Real>& model() const { return model_; }
  double momentum() const { return momentum_; }

  void update(const TransformerLM<Real>& online) {
    momentum_update(model_.params(), online.params(), momentum_);
  }

 private:
  TransformerLM<Real> model_;
  double momentum_;
};

}  // namespace knnlm
