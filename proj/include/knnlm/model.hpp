#pragma once

// Small decoder-only transformer LM (pre-LN blocks, learned positions, tied
// input/output embeddings) with an explicit reverse-mode backward pass.
// The final layer-norm output is the context representation used both as
// the kNN key and as the input to the regularizers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnlm/corpus.hpp"
#include "knnlm/error.hpp"
#include "knnlm/kernels.hpp"

namespace knnlm {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t context_len = 64;
  std::size_t vocab = 0;
  bool tie_embeddings = true;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 ||
        context_len < 1 || vocab < 1)
      fail_usage("model config: all dimensions must be >= 1");
    if (d_model % n_heads != 0)
      fail_usage("model config: d_model must be divisible by n_heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                     {"d_model", c.d_model},     {"d_ff", c.d_ff},
                     {"context_len", c.context_len}, {"vocab", c.vocab},
                     {"tie_embeddings", c.tie_embeddings}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.context_len = j.value("context_len", d.context_len);
  c.vocab = j.value("vocab", d.vocab);
  c.tie_embeddings = j.value("tie_embeddings", d.tie_embeddings);
  c.seed = j.value("seed", d.seed);
}

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct BlockOffsets {
  std::size_t ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  std::size_t ln2_w, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Flat parameter layout: every tensor is a slice of one contiguous buffer.
/// With tied embeddings the output projection *is* `tok_emb`.
class ParamLayout {
 public:
  ParamLayout() = default;

  explicit ParamLayout(const ModelConfig& c) {
    c.validate();
    const auto V = c.vocab, d = c.d_model, T = c.context_len, F = c.d_ff;
    tok_emb = add("tok_emb", {V, d});
    pos_emb = add("pos_emb", {T, d});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      auto p = "blocks." + std::to_string(l) + ".";
      BlockOffsets b{};
      b.ln1_w = add(p + "ln1.weight", {d});
      b.ln1_b = add(p + "ln1.bias", {d});
      b.qkv_w = add(p + "attn.qkv.weight", {d, 3 * d});
      b.qkv_b = add(p + "attn.qkv.bias", {3 * d});
      b.proj_w = add(p + "attn.proj.weight", {d, d});
      b.proj_b = add(p + "attn.proj.bias", {d});
      b.ln2_w = add(p + "ln2.weight", {d});
      b.ln2_b = add(p + "ln2.bias", {d});
      b.fc1_w = add(p + "mlp.fc1.weight", {d, F});
      b.fc1_b = add(p + "mlp.fc1.bias", {F});
      b.fc2_w = add(p + "mlp.fc2.weight", {F, d});
      b.fc2_b = add(p + "mlp.fc2.bias", {d});
      blocks.push_back(b);
    }
    lnf_w = add("ln_f.weight", {d});
    lnf_b = add("ln_f.bias", {d});
    out_w = c.tie_embeddings ? tok_emb : add("out_proj.weight", {V, d});
    out_b = add("out_proj.bias", {V});
  }

  std::size_t total() const { return total_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }

  const TensorInfo& find(const std::string& name) const {
    for (auto& t : tensors_)
      if (t.name == name) return t;
    fail_data("unknown tensor " + name);
  }

  std::size_t tok_emb = 0, pos_emb = 0, lnf_w = 0, lnf_b = 0, out_w = 0, out_b = 0;
  std::vector<BlockOffsets> blocks;

 private:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    tensors_.push_back({std::move(name), std::move(shape), total_, n});
    auto off = total_;
    total_ += n;
    return off;
  }

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

template <typename Real>
struct ForwardOutput {
  std::size_t batch = 0, len = 0, vocab = 0, dim = 0;
  std::vector<Real> logits;  // batch*len*vocab (empty if not requested)
  std::vector<Real> reprs;   // batch*len*dim
};

/// Activations retained by `forward` for the backward pass.
template <typename Real>
struct ForwardCache {
  struct Layer {
    std::vector<Real> x, ln1, ln1_mean, ln1_rstd, qkv, att, att_out;
    std::vector<Real> x_mid, ln2, ln2_mean, ln2_rstd, fc1, act;
  };
  std::size_t batch = 0, len = 0;
  std::vector<TokenId> ids;
  std::vector<Layer> layers;
  std::vector<Real> x_final, lnf_mean, lnf_rstd, reprs;
};

namespace detail {

inline constexpr double kLnEps = 1e-5;

template <typename Real>
void layer_norm(const Real* x, const Real* w, const Real* b, Real* y,
                Real* mean, Real* rstd, std::size_t M, std::size_t d) {
  for (std::size_t i = 0; i < M; ++i) {
    const Real* xi = x + i * d;
    Real mu = 0;
    for (std::size_t k = 0; k < d; ++k) mu += xi[k];
    mu /= Real(d);
    Real var = 0;
    for (std::size_t k = 0; k < d; ++k) var += (xi[k] - mu) * (xi[k] - mu);
    var /= Real(d);
    Real rs = Real(1) / std::sqrt(var + Real(kLnEps));
    Real* yi = y + i * d;
    for (std::size_t k = 0; k < d; ++k) yi[k] = (xi[k] - mu) * rs * w[k] + b[k];
    mean[i] = mu;
    rstd[i] = rs;
  }
}

template <typename Real>
void layer_norm_backward(const Real* x, const Real* mean, const Real* rstd,
                         const Real* w, const Real* dy, Real* dx, Real* dw,
                         Real* db, std::size_t M, std::size_t d) {
  std::vector<Real> xhat(d), dxhat(d);
  for (std::size_t i = 0; i < M; ++i) {
    const Real* xi = x + i * d;
    const Real* dyi = dy + i * d;
    Real m1 = 0, m2 = 0;
    for (std::size_t k = 0; k < d; ++k) {
      xhat[k] = (xi[k] - mean[i]) * rstd[i];
      dxhat[k] = dyi[k] * w[k];
      dw[k] += dyi[k] * xhat[k];
      db[k] += dyi[k];
      m1 += dxhat[k];
      m2 += dxhat[k] * xhat[k];
    }
    m1 /= Real(d);
    m2 /= Real(d);
    Real* dxi = dx + i * d;
    for (std::size_t k = 0; k < d; ++k)
      dxi[k] += rstd[i] * (dxhat[k] - m1 - xhat[k] * m2);
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <typename Real>
Real gelu(Real u) {
  Real th = std::tanh(Real(kGeluC) * (u + Real(kGeluA) * u * u * u));
  return Real(0.5) * u * (Real(1) + th);
}

template <typename Real>
Real gelu_grad(Real u) {
  Real th = std::tanh(Real(kGeluC) * (u + Real(kGeluA) * u * u * u));
  return Real(0.5) * (Real(1) + th) +
         Real(0.5) * u * (Real(1) - th * th) * Real(kGeluC) *
             (Real(1) + Real(3 * kGeluA) * u * u);
}

}  // namespace detail

/// Numerically stable -log softmax(logits)[target], accumulated in double.
template <typename Real>
double token_nll(std::span<const Real> logits, TokenId target) {
  double mx = logits[0];
  for (auto v : logits) mx = std::max(mx, static_cast<double>(v));
  double s = 0;
  for (auto v : logits) s += std::exp(static_cast<double>(v) - mx);
  return std::log(s) + mx - static_cast<double>(logits[target]);
}

/// Mean next-token cross-entropy over all rows of a [N, V] logit matrix.
template <typename Real>
double ce_loss(std::span<const Real> logits, std::span<const TokenId> targets,
               std::size_t vocab) {
  if (logits.size() != targets.size() * vocab)
    fail_usage("ce_loss: logits/targets shape mismatch");
  double total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    total += token_nll(logits.subspan(i * vocab, vocab), targets[i]);
  return total / static_cast<double>(targets.size());
}

/// d(mean CE)/d(logits) = (softmax - onehot) / N.
template <typename Real>
std::vector<Real> ce_loss_grad(std::span<const Real> logits,
                               std::span<const TokenId> targets,
                               std::size_t vocab) {
  std::vector<Real> g(logits.size());
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Real* l = logits.data() + i * vocab;
    Real* gi = g.data() + i * vocab;
    double mx = l[0];
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, double(l[v]));
    double s = 0;
    for (std::size_t v = 0; v < vocab; ++v) s += std::exp(double(l[v]) - mx);
    for (std::size_t v = 0; v < vocab; ++v)
      gi[v] = static_cast<Real>(std::exp(double(l[v]) - mx) / s * inv_n);
    gi[targets[i]] -= static_cast<Real>(inv_n);
  }
  return g;
}

template <typename Real>
class TransformerLM {
 public:
  using value_type = Real;

  TransformerLM() = default;

  /// Fresh model with parameters initialized from `config.seed`.
  explicit TransformerLM(const ModelConfig& config)
      : config_(config), layout_(config), params_(layout_.total(), Real(0)) {
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double std_w = 0.02;
    const double std_res = 0.02 / std::sqrt(2.0 * double(config.n_layers));
    auto fill = [&](std::size_t off, std::size_t n, double scale) {
      for (std::size_t i = 0; i < n; ++i)
        params_[off + i] = static_cast<Real>(normal(rng) * scale);
    };
    auto ones = [&](std::size_t off, std::size_t n) {
      std::fill_n(params_.begin() + off, n, Real(1));
    };
    const auto V = config.vocab, d = config.d_model, F = config.d_ff;
    fill(layout_.tok_emb, V * d, std_w);
    fill(layout_.pos_emb, config.context_len * d, std_w);
    for (auto& b : layout_.blocks) {
      ones(b.ln1_w, d);
      fill(b.qkv_w, d * 3 * d, std_w);
      fill(b.proj_w, d * d, std_res);
      ones(b.ln2_w, d);
      fill(b.fc1_w, d * F, std_w);
      fill(b.fc2_w, F * d, std_res);
    }
    ones(layout_.lnf_w, d);
    if (!config.tie_embeddings) fill(layout_.out_w, V * d, std_w);
  }

  /// Wraps existing parameter values (e.g. from a checkpoint).
  TransformerLM(const ModelConfig& config, std::vector<Real> params)
      : config_(config), layout_(config), params_(std::move(params)) {
    if (params_.size() != layout_.total())
      fail_data("parameter count does not match model config");
  }

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::span<const Real> params() const { return params_; }
  std::span<Real> params() { return params_; }
  std::size_t num_params() const { return params_.size(); }

  std::span<const Real> tensor(const std::string& name) const {
    auto& t = layout_.find(name);
    return std::span<const Real>(params_).subspan(t.offset, t.size);
  }
  std::span<Real> tensor(const std::string& name) {
    auto& t = layout_.find(name);
    return std::span<Real>(params_).subspan(t.offset, t.size);
  }

  /// Runs the model on `batch` rows of `len` token ids. `cache` is filled
  /// when non-null; logits are skipped when `with_logits` is false.
  ForwardOutput<Real> forward(std::span<const TokenId> ids, std::size_t batch,
                              std::size_t len, ForwardCache<Real>* cache = nullptr,
                              bool with_logits = true) const {
    const auto& c = config_;
    if (ids.size() != batch * len) fail_usage("forward: ids size != batch*len");
    if (len > c.context_len || len == 0)
      fail_usage("forward: sequence length exceeds context_len");
    for (auto id : ids)
      if (id >= c.vocab) fail_usage("forward: token id " + std::to_string(id) + " out of range");

    const std::size_t M = batch * len, d = c.d_model, F = c.d_ff, V = c.vocab;
    const Real* P = params_.data();

    ForwardCache<Real> local;
    ForwardCache<Real>& cc = cache ? *cache : local;
    cc.batch = batch;
    cc.len = len;
    cc.ids.assign(ids.begin(), ids.end());
    cc.layers.resize(c.n_layers);

    std::vector<Real> x(M * d);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) {
        const Real* te = P + layout_.tok_emb + ids[b * len + t] * d;
        const Real* pe = P + layout_.pos_emb + t * d;
        Real* xi = x.data() + (b * len + t) * d;
        for (std::size_t k = 0; k < d; ++k) xi[k] = te[k] + pe[k];
      }

    std::vector<Real> tmp(M * d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& bo = layout_.blocks[l];
      auto& L = cc.layers[l];
      L.x = x;
      L.ln1.resize(M * d);
      L.ln1_mean.resize(M);
      L.ln1_rstd.resize(M);
      detail::layer_norm(x.data(), P + bo.ln1_w, P + bo.ln1_b, L.ln1.data(),
                         L.ln1_mean.data(), L.ln1_rstd.data(), M, d);
      L.qkv.resize(M * 3 * d);
      kernels::gemm_nn(L.ln1.data(), P + bo.qkv_w, L.qkv.data(), M, d, 3 * d, false);
      kernels::add_bias(L.qkv.data(), P + bo.qkv_b, M, 3 * d);
      attention_forward(L, batch, len);
      kernels::gemm_nn(L.att_out.data(), P + bo.proj_w, tmp.data(), M, d, d, false);
      kernels::add_bias(tmp.data(), P + bo.proj_b, M, d);
      for (std::size_t i = 0; i < M * d; ++i) x[i] += tmp[i];
      L.x_mid = x;
      L.ln2.resize(M * d);
      L.ln2_mean.resize(M);
      L.ln2_rstd.resize(M);
      detail::layer_norm(x.data(), P + bo.ln2_w, P + bo.ln2_b, L.ln2.data(),
                         L.ln2_mean.data(), L.ln2_rstd.data(), M, d);
      L.fc1.resize(M * F);
      kernels::gemm_nn(L.ln2.data(), P + bo.fc1_w, L.fc1.data(), M, d, F, false);
      kernels::add_bias(L.fc1.data(), P + bo.fc1_b, M, F);
      L.act.resize(M * F);
      for (std::size_t i = 0; i < M * F; ++i) L.act[i] = detail::gelu(L.fc1[i]);
      kernels::gemm_nn(L.act.data(), P + bo.fc2_w, tmp.data(), M, F, d, false);
      kernels::add_bias(tmp.data(), P + bo.fc2_b, M, d);
      for (std::size_t i = 0; i < M * d; ++i) x[i] += tmp[i];
    }

    ForwardOutput<Real> out;
    out.batch = batch;
    out.len = len;
    out.vocab = V;
    out.dim = d;
    out.reprs.resize(M * d);
    cc.lnf_mean.resize(M);
    cc.lnf_rstd.resize(M);
    detail::layer_norm(x.data(), P + layout_.lnf_w, P + layout_.lnf_b,
                       out.reprs.data(), cc.lnf_mean.data(), cc.lnf_rstd.data(), M, d);
    if (with_logits) {
      out.logits.resize(M * V);
      std::vector<Real> scratch;
      kernels::gemm_nt(out.reprs.data(), P + layout_.out_w, out.logits.data(), M,
                       d, V, false, scratch);
      kernels::add_bias(out.logits.data(), P + layout_.out_b, M, V);
    }
    if (cache) {
      cc.x_final = std::move(x);
      cc.reprs = out.reprs;
    }
    return out;
  }

  /// Accumulates parameter gradients into `grads` (size num_params()).
  /// `dlogits` ([M,V]) and `dreprs` ([M,d]) may each be empty; gradient
  /// arriving at the representation is the sum of both paths.
  void backward(const ForwardCache<Real>& cc, std::span<const Real> dlogits,
                std::span<const Real> dreprs, std::span<Real> grads) const {
    const auto& c = config_;
    const std::size_t batch = cc.batch, len = cc.len, M = batch * len;
    const std::size_t d = c.d_model, F = c.d_ff, V = c.vocab;
    if (grads.size() != params_.size()) fail_usage("backward: grads size mismatch");
    if (cc.reprs.size() != M * d) fail_usage("backward: forward cache is empty");
    const Real* P = params_.data();
    Real* G = grads.data();

    std::vector<Real> dr(M * d, Real(0));
    if (!dreprs.empty()) {
      if (dreprs.size() != M * d) fail_usage("backward: dreprs shape mismatch");
      std::copy(dreprs.begin(), dreprs.end(), dr.begin());
    }
    if (!dlogits.empty()) {
      if (dlogits.size() != M * V) fail_usage("backward: dlogits shape mismatch");
      kernels::gemm_nn(dlogits.data(), P + layout_.out_w, dr.data(), M, V, d, true);
      kernels::gemm_tn_acc(dlogits.data(), cc.reprs.data(), G + layout_.out_w, M, V, d);
      kernels::bias_grad(dlogits.data(), G + layout_.out_b, M, V);
    }

    std::vector<Real> dx(M * d, Real(0));
    detail::layer_norm_backward(cc.x_final.data(), cc.lnf_mean.data(),
                                cc.lnf_rstd.data(), P + layout_.lnf_w, dr.data(),
                                dx.data(), G + layout_.lnf_w, G + layout_.lnf_b, M, d);

    std::vector<Real> scratch, dact(M * F), dln(M * d), datt(M * d), dqkv(M * 3 * d);
    for (std::size_t li = c.n_layers; li-- > 0;) {
      const auto& bo = layout_.blocks[li];
      const auto& L = cc.layers[li];

      // MLP sublayer: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
      kernels::gemm_tn_acc(L.act.data(), dx.data(), G + bo.fc2_w, M, F, d);
      kernels::bias_grad(dx.data(), G + bo.fc2_b, M, d);
      kernels::gemm_nt(dx.data(), P + bo.fc2_w, dact.data(), M, d, F, false, scratch);
      for (std::size_t i = 0; i < M * F; ++i) dact[i] *= detail::gelu_grad(L.fc1[i]);
      kernels::gemm_tn_acc(L.ln2.data(), dact.data(), G + bo.fc1_w, M, d, F);
      kernels::bias_grad(dact.data(), G + bo.fc1_b, M, F);
      kernels::gemm_nt(dact.data(), P + bo.fc1_w, dln.data(), M, F, d, false, scratch);
      detail::layer_norm_backward(L.x_mid.data(), L.ln2_mean.data(), L.ln2_rstd.data(),
                                  P + bo.ln2_w, dln.data(), dx.data(), G + bo.ln2_w,
                                  G + bo.ln2_b, M, d);

      // Attention sublayer: x_mid = x + proj(attn(ln1(x)))
      kernels::gemm_tn_acc(L.att_out.data(), dx.data(), G + bo.proj_w, M, d, d);
      kernels::bias_grad(dx.data(), G + bo.proj_b, M, d);
      kernels::gemm_nt(dx.data(), P + bo.proj_w, datt.data(), M, d, d, false, scratch);
      std::fill(dqkv.begin(), dqkv.end(), Real(0));
      attention_backward(L, datt, dqkv, batch, len);
      kernels::gemm_tn_acc(L.ln1.data(), dqkv.data(), G + bo.qkv_w, M, d, 3 * d);
      kernels::bias_grad(dqkv.data(), G + bo.qkv_b, M, 3 * d);
      kernels::gemm_nt(dqkv.data(), P + bo.qkv_w, dln.data(), M, 3 * d, d, false, scratch);
      detail::layer_norm_backward(L.x.data(), L.ln1_mean.data(), L.ln1_rstd.data(),
                                  P + bo.ln1_w, dln.data(), dx.data(), G + bo.ln1_w,
                                  G + bo.ln1_b, M, d);
    }

    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t) {
        const Real* g = dx.data() + (b * len + t) * d;
        Real* te = G + layout_.tok_emb + cc.ids[b * len + t] * d;
        Real* pe = G + layout_.pos_emb + t * d;
        for (std::size_t k = 0; k < d; ++k) {
          te[k] += g[k];
          pe[k] += g[k];
        }
      }
  }

 private:
  void attention_forward(typename ForwardCache<Real>::Layer& L, std::size_t batch,
                         std::size_t len) const {
    const std::size_t d = config_.d_model, H = config_.n_heads, hd = config_.head_dim();
    const Real scale = Real(1) / std::sqrt(Real(hd));
    L.att.assign(batch * H * len * len, Real(0));
    L.att_out.assign(batch * len * d, Real(0));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < len; ++t) {
          const Real* q = L.qkv.data() + (b * len + t) * 3 * d + h * hd;
          Real* p = L.att.data() + ((b * H + h) * len + t) * len;
          Real mx = -std::numeric_limits<Real>::infinity();
          for (std::size_t s = 0; s <= t; ++s) {
            const Real* k = L.qkv.data() + (b * len + s) * 3 * d + d + h * hd;
            Real dot = 0;
            for (std::size_t i = 0; i < hd; ++i) dot += q[i] * k[i];
            p[s] = dot * scale;
            mx = std::max(mx, p[s]);
          }
          Real sum = 0;
          for (std::size_t s = 0; s <= t; ++s) {
            p[s] = std::exp(p[s] - mx);
            sum += p[s];
          }
          Real* o = L.att_out.data() + (b * len + t) * d + h * hd;
          for (std::size_t s = 0; s <= t; ++s) {
            p[s] /= sum;
            const Real* v = L.qkv.data() + (b * len + s) * 3 * d + 2 * d + h * hd;
            for (std::size_t i = 0; i < hd; ++i) o[i] += p[s] * v[i];
          }
        }
  }

  void attention_backward(const typename ForwardCache<Real>::Layer& L,
                          const std::vector<Real>& datt, std::vector<Real>& dqkv,
                          std::size_t batch, std::size_t len) const {
    const std::size_t d = config_.d_model, H = config_.n_heads, hd = config_.head_dim();
    const Real scale = Real(1) / std::sqrt(Real(hd));
    std::vector<Real> dp(len);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t qrow = (b * len + t) * 3 * d + h * hd;
          const Real* p = L.att.data() + ((b * H + h) * len + t) * len;
          const Real* dout = datt.data() + (b * len + t) * d + h * hd;
          Real dot_pdp = 0;
          for (std::size_t s = 0; s <= t; ++s) {
            const std::size_t vrow = (b * len + s) * 3 * d + 2 * d + h * hd;
            Real acc = 0;
            for (std::size_t i = 0; i < hd; ++i) {
              acc += dout[i] * L.qkv[vrow + i];
              dqkv[vrow + i] += p[s] * dout[i];
            }
            dp[s] = acc;
            dot_pdp += p[s] * acc;
          }
          for (std::size_t s = 0; s <= t; ++s) {
            const Real ds = p[s] * (dp[s] - dot_pdp) * scale;
            const std::size_t krow = (b * len + s) * 3 * d + d + h * hd;
            for (std::size_t i = 0; i < hd; ++i) {
              dqkv[qrow + i] += ds * L.qkv[krow + i];
              dqkv[krow + i] += ds * L.qkv[qrow + i];
            }
          }
        }
  }

  ModelConfig config_;
  ParamLayout layout_;
  std::vector<Real> params_;
};

/// Adam with linear warmup to a constant learning rate and optional
/// global-norm gradient clipping.
struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::size_t warmup = 50;
  double clip = 1.0;  // <= 0 disables clipping
};

inline void to_json(nlohmann::json& j, const AdamConfig& a) {
  j = nlohmann::json{{"lr", a.lr},       {"beta1", a.beta1},   {"beta2", a.beta2},
                     {"eps", a.eps},     {"warmup", a.warmup}, {"clip", a.clip}};
}

inline void from_json(const nlohmann::json& j, AdamConfig& a) {
  AdamConfig d;
  a.lr = j.value("lr", d.lr);
  a.beta1 = j.value("beta1", d.beta1);
  a.beta2 = j.value("beta2", d.beta2);
  a.eps = j.value("eps", d.eps);
  a.warmup = j.value("warmup", d.warmup);
  a.clip = j.value("clip", d.clip);
}

template <typename Real>
class Adam {
 public:
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  std::uint64_t step_count() const { return step_; }

  double current_lr() const {
    if (cfg_.warmup == 0) return cfg_.lr;
    return cfg_.lr * std::min(1.0, double(step_ + 1) / double(cfg_.warmup));
  }

  /// Applies one update; returns the pre-clipping gradient norm.
  double step(std::span<Real> params, std::span<const Real> grads) {
    double norm2 = 0;
    for (auto g : grads) norm2 += double(g) * double(g);
    const double norm = std::sqrt(norm2);
    const double scale = (cfg_.clip > 0 && norm > cfg_.clip) ? cfg_.clip / norm : 1.0;
    const double lr = current_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = double(grads[i]) * scale;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m_[i] / bc1, vh = v_[i] / bc2;
      params[i] = static_cast<Real>(double(params[i]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
    return norm;
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  std::uint64_t step_ = 0;
};

}  // namespace knnlm
