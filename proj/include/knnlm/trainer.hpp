#pragma once

// Training loop for the three objectives (plain CE, CE + L2 activation
// penalty, CE + momentum-queue penalty) and split-level evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnlm/checkpoint.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/error.hpp"
#include "knnlm/model.hpp"
#include "knnlm/regularizers.hpp"

namespace knnlm {

enum class Objective { ce, ce_l2, ce_moco };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::ce: return "ce";
    case Objective::ce_l2: return "ce+l2";
    case Objective::ce_moco: return "ce+moco";
  }
  return "ce";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "ce") return Objective::ce;
  if (s == "ce+l2" || s == "l2") return Objective::ce_l2;
  if (s == "ce+moco" || s == "moco") return Objective::ce_moco;
  fail_usage("unknown objective '" + s + "' (expected ce, ce+l2, ce+moco)");
}

struct TrainConfig {
  ModelConfig model;
  Objective objective = Objective::ce;
  RegConfig reg;
  AdamConfig adam;
  std::size_t epochs = 5;
  std::size_t batch = 16;
  std::size_t bptt = 0;  // 0 = model.context_len
  bool shuffle = true;
  double target_train_ppl = 0.0;  // > 0: stop once an epoch's train ppl is below it
  std::string checkpoint_path;    // non-empty: saved after every epoch

  std::size_t effective_bptt() const { return bptt ? bptt : model.context_len; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"objective", to_string(c.objective)},
                     {"reg", c.reg},
                     {"adam", c.adam},
                     {"epochs", c.epochs},
                     {"batch", c.batch},
                     {"bptt", c.effective_bptt()},
                     {"shuffle", c.shuffle},
                     {"target_train_ppl", c.target_train_ppl}};
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean objective value over batches
  double train_ce = 0;    // mean CE over batches
  double train_ppl = 0;   // exp(train_ce)
  double valid_ppl = std::numeric_limits<double>::quiet_NaN();
};

inline void to_json(nlohmann::json& j, const EpochStats& e) {
  j = nlohmann::json{{"epoch", e.epoch},         {"train_loss", e.train_loss},
                     {"train_ce", e.train_ce},   {"train_ppl", e.train_ppl},
                     {"valid_ppl", std::isnan(e.valid_ppl) ? nlohmann::json(nullptr)
                                                           : nlohmann::json(e.valid_ppl)}};
}

template <typename Real>
struct TrainResult {
  TransformerLM<Real> model;
  Checkpoint checkpoint;
  std::vector<EpochStats> epochs;
};

/// Calls fn(batch, forward_output) for consecutive non-overlapping
/// single-lane windows of `bptt` inputs over `split`. Windows shrink for
/// splits shorter than bptt + 1.
template <typename Real, typename Fn>
void for_each_window(const TransformerLM<Real>& model, std::span<const TokenId> ids,
                     std::size_t bptt, Fn&& fn, bool with_logits = true) {
  if (ids.size() < 2) fail_data("split must contain at least 2 tokens");
  bptt = std::min({bptt, model.config().context_len, ids.size() - 1});
  BatchIter it(ids, 1, bptt);
  for (std::size_t i = 0; i < it.size(); ++i) {
    auto b = it[i];
    auto out = model.forward(b.inputs, 1, bptt, nullptr, with_logits);
    fn(b, out);
  }
}

/// exp(mean token NLL) over non-overlapping windows.
template <typename Real>
double perplexity(const TransformerLM<Real>& model, const EncodedSplit& split,
                  std::size_t bptt = 0) {
  if (split.ids.empty()) fail_data("perplexity: empty split");
  if (bptt == 0) bptt = model.config().context_len;
  const std::size_t V = model.config().vocab;
  double total = 0;
  std::size_t count = 0;
  for_each_window(model, split.ids, bptt, [&](const Batch& b, const ForwardOutput<Real>& out) {
    for (std::size_t t = 0; t < b.targets.size(); ++t) {
      total += token_nll(std::span<const Real>(out.logits).subspan(t * V, V), b.targets[t]);
      ++count;
    }
  });
  return std::exp(total / double(count));
}

/// Mean squared norm of the context representations over a split.
template <typename Real>
double mean_repr_sq_norm(const TransformerLM<Real>& model, const EncodedSplit& split,
                         std::size_t bptt = 0) {
  if (bptt == 0) bptt = model.config().context_len;
  const std::size_t d = model.config().d_model;
  double total = 0;
  std::size_t count = 0;
  for_each_window(
      model, split.ids, bptt,
      [&](const Batch& b, const ForwardOutput<Real>& out) {
        for (std::size_t t = 0; t < b.targets.size(); ++t) {
          double s = 0;
          for (std::size_t k = 0; k < d; ++k) s += double(out.reprs[t * d + k]) * out.reprs[t * d + k];
          total += s;
          ++count;
        }
      },
      false);
  return total / double(count);
}

/// Value and representation-gradient of the configured auxiliary penalty.
/// With omega == 0 no gradient is produced, so the update is exactly the
/// plain CE update.
template <typename Real>
double regularizer_term(Objective obj, const RegConfig& reg, const QueueBank<Real>* queues,
                        std::span<const TokenId> targets, std::span<const Real> reprs,
                        std::size_t dim, std::vector<Real>& dreprs) {
  dreprs.clear();
  if (obj == Objective::ce) return 0.0;
  if (reg.omega != 0.0) dreprs.assign(reprs.size(), Real(0));
  std::span<Real> g = dreprs;
  if (obj == Objective::ce_l2) return double(l2_penalty<Real>(reprs, dim, reg.omega, g));
  return double(moco_penalty<Real>(*queues, targets, reprs, reg.omega, g));
}

template <typename Real = float>
TrainResult<Real> train_run(const TrainConfig& cfg, const EncodedSplit& train,
                            const EncodedSplit* valid = nullptr,
                            const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.model.validate();
  cfg.reg.validate();
  if (cfg.epochs < 1) fail_usage("epochs must be >= 1");
  for (auto id : train.ids)
    if (id >= cfg.model.vocab) fail_data("train split has ids outside the model vocabulary");

  const std::size_t B = cfg.batch, T = cfg.effective_bptt(), d = cfg.model.d_model;
  if (T > cfg.model.context_len) fail_usage("bptt exceeds context_len");
  BatchIter it(train.ids, B, T);

  TransformerLM<Real> model(cfg.model);
  Adam<Real> opt(model.num_params(), cfg.adam);
  std::mt19937_64 order_rng(cfg.model.seed ^ 0x9e3779b97f4a7c15ULL);

  std::optional<MomentumEncoder<Real>> encoder;
  std::optional<QueueBank<Real>> queues;
  if (cfg.objective == Objective::ce_moco) {
    encoder.emplace(model, cfg.reg.momentum);
    queues.emplace(cfg.model.vocab, cfg.reg.queue_len, d);
  }

  TrainResult<Real> result;
  std::vector<Real> grads(model.num_params());
  std::vector<Real> dreprs;
  std::vector<std::size_t> order(it.size());
  std::vector<double> loss_trace;
  ForwardCache<Real> cache;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), order_rng);
    double sum_loss = 0, sum_ce = 0;
    for (auto bi : order) {
      auto batch = it[bi];
      auto out = model.forward(batch.inputs, B, T, &cache, true);
      const double ce = ce_loss<Real>(out.logits, batch.targets, cfg.model.vocab);
      auto dlogits = ce_loss_grad<Real>(out.logits, batch.targets, cfg.model.vocab);
      const double pen = regularizer_term<Real>(cfg.objective, cfg.reg,
                                                queues ? &*queues : nullptr,
                                                batch.targets, out.reprs, d, dreprs);
      const double loss = ce + pen;
      if (!std::isfinite(loss))
        throw Error(ErrorKind::divergence, "non-finite loss at step " +
                                               std::to_string(opt.step_count()) +
                                               " (ce=" + std::to_string(ce) +
                                               ", penalty=" + std::to_string(pen) + ")");
      std::fill(grads.begin(), grads.end(), Real(0));
      model.backward(cache, dlogits, dreprs, grads);
      const double gnorm = opt.step(model.params(), grads);
      if (!std::isfinite(gnorm))
        throw Error(ErrorKind::divergence,
                    "non-finite gradient at step " + std::to_string(opt.step_count()));

      if (encoder) {
        encoder->update(model);
        auto enc = encoder->model().forward(batch.inputs, B, T, nullptr, false);
        for (std::size_t j = 0; j < batch.targets.size(); ++j)
          queues->push(batch.targets[j], std::span<const Real>(enc.reprs).subspan(j * d, d));
      }
      sum_loss += loss;
      sum_ce += ce;
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = sum_loss / double(order.size());
    st.train_ce = sum_ce / double(order.size());
    st.train_ppl = std::exp(st.train_ce);
    if (valid) st.valid_ppl = perplexity(model, *valid, T);
    result.epochs.push_back(st);
    loss_trace.push_back(st.train_loss);
    if (on_epoch) on_epoch(st);

    for (auto p : model.params())
      if (!std::isfinite(double(p)))
        throw Error(ErrorKind::divergence, "non-finite parameter after epoch " + std::to_string(epoch));

    auto ckpt = Checkpoint::from_model(model);
    ckpt.vocab_hash = train.vocab_hash;
    ckpt.step = opt.step_count();
    ckpt.loss_trace = loss_trace;
    ckpt.meta = nlohmann::json{{"train", cfg}, {"epochs", result.epochs}};
    if (!cfg.checkpoint_path.empty()) ckpt.save(cfg.checkpoint_path);
    result.checkpoint = std::move(ckpt);

    if (cfg.target_train_ppl > 0 && st.train_ppl < cfg.target_train_ppl) break;
  }
  result.model = std::move(model);
  return result;
}

}  // namespace knnlm
