#include "tracto/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "tracto/binio.hpp"
#include "tracto/errors.hpp"
#include "tracto/rng.hpp"

namespace tracto::model {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::baseline_mlp: return "baseline_mlp";
    case Variant::context_only: return "context_only";
    case Variant::full: return "full";
  }
  return "?";
}

Variant variant_from_name(std::string_view name) {
  if (name == "baseline_mlp" || name == "baseline") return Variant::baseline_mlp;
  if (name == "context_only" || name == "context") return Variant::context_only;
  if (name == "full") return Variant::full;
  throw std::invalid_argument("unknown model variant '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 0) throw std::invalid_argument("n_layers must be >= 0");
  if (n_heads < 1) throw std::invalid_argument("n_heads must be >= 1");
  if (d_model < 1) throw std::invalid_argument("d_model must be >= 1");
  if (block_size < 1) throw std::invalid_argument("block_size must be >= 1");
  if (in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("d_model must be divisible by n_heads");
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const auto u = [](int v) { return uint32_t(v); };
  const auto add = [&](std::string name, std::vector<uint32_t> dims) {
    TensorInfo info{std::move(name), total_, std::move(dims)};
    total_ += info.count();
    tensors_.push_back(std::move(info));
  };
  add("embed.weight", {u(cfg.d_model), u(cfg.embed_inputs())});
  add("embed.bias", {u(cfg.d_model)});
  add("pos.table", {u(cfg.block_size), u(cfg.d_model)});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    if (cfg.has_attention()) {
      add(p + "attn_norm.gain", {u(cfg.d_model)});
      add(p + "attn_norm.offset", {u(cfg.d_model)});
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        add(p + "attn." + w + ".weight", {u(cfg.d_model), u(cfg.d_model)});
        add(p + "attn." + w + ".bias", {u(cfg.d_model)});
      }
    }
    add(p + "ffn_norm.gain", {u(cfg.d_model)});
    add(p + "ffn_norm.offset", {u(cfg.d_model)});
    add(p + "ffn.w1.weight", {u(cfg.d_ff()), u(cfg.d_model)});
    add(p + "ffn.w1.bias", {u(cfg.d_ff())});
    add(p + "ffn.w2.weight", {u(cfg.d_model), u(cfg.d_ff())});
    add(p + "ffn.w2.bias", {u(cfg.d_model)});
  }
  add("final_norm.gain", {u(cfg.d_model)});
  add("final_norm.offset", {u(cfg.d_model)});
  add("head.weight", {3, u(cfg.d_model)});
  add("head.bias", {3});
}

const TensorInfo& ParamLayout::find(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw CheckpointError("unknown tensor '" + std::string(name) + "'");
}

const std::string& ParamLayout::owner(size_t i) const {
  for (const auto& t : tensors_)
    if (i >= t.offset && i < t.offset + t.count()) return t.name;
  throw std::invalid_argument("parameter index out of range");
}

template <class S>
Params<S> init_params(const ModelConfig& cfg, uint64_t rng_seed) {
  Params<S> p;
  p.config = cfg;
  p.layout = ParamLayout(cfg);
  p.values.assign(p.layout.total(), S(0));
  Rng rng(rng_seed);
  for (const auto& t : p.layout.tensors()) {
    S* dst = p.values.data() + t.offset;
    const bool is_gain = t.name.ends_with(".gain");
    const bool is_zero = t.name.ends_with(".bias") || t.name.ends_with(".offset");
    for (size_t i = 0; i < t.count(); ++i) {
      if (is_gain)
        dst[i] = S(1);
      else if (is_zero)
        dst[i] = S(0);
      else
        dst[i] = S(rng.normal(0.0, 0.02));
    }
  }
  return p;
}

template <class From, class To>
Params<To> params_cast(const Params<From>& p) {
  Params<To> out;
  out.config = p.config;
  out.layout = p.layout;
  out.values.resize(p.values.size());
  for (size_t i = 0; i < p.values.size(); ++i) out.values[i] = To(p.values[i]);
  out.version = p.version;
  return out;
}

namespace {

template <class S>
void matvec(const S* w, const S* bias, const S* x, S* out, int n_out, int n_in) {
  for (int o = 0; o < n_out; ++o) {
    S acc = bias[o];
    const S* row = w + size_t(o) * n_in;
    for (int i = 0; i < n_in; ++i) acc += row[i] * x[i];
    out[o] = acc;
  }
}

// out += W^T dy (gradient wrt the input of a linear map).
template <class S>
void matvec_t_acc(const S* w, const S* dy, S* out, int n_out, int n_in) {
  for (int o = 0; o < n_out; ++o) {
    const S g = dy[o];
    const S* row = w + size_t(o) * n_in;
    for (int i = 0; i < n_in; ++i) out[i] += row[i] * g;
  }
}

// dW += dy (x) x, db += dy.
template <class S>
void linear_grad_acc(S* dw, S* db, const S* dy, const S* x, int n_out, int n_in) {
  for (int o = 0; o < n_out; ++o) {
    const S g = dy[o];
    db[o] += g;
    S* row = dw + size_t(o) * n_in;
    for (int i = 0; i < n_in; ++i) row[i] += g * x[i];
  }
}

constexpr double kLnEps = 1e-5;

template <class S>
S layer_norm(const S* x, const S* gain, const S* offset, S* xhat, S* out, int d) {
  S mean = S(0);
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= S(d);
  S var = S(0);
  for (int i = 0; i < d; ++i) {
    const S c = x[i] - mean;
    var += c * c;
  }
  var /= S(d);
  const S rstd = S(1) / std::sqrt(var + S(kLnEps));
  for (int i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    out[i] = gain[i] * xhat[i] + offset[i];
  }
  return rstd;
}

// Given dy on the LN output, accumulates gain/offset grads and writes the
// gradient wrt the LN input into dx (added on top of what is there).
template <class S>
void layer_norm_backward(const S* dy, const S* xhat, S rstd, const S* gain, S* dgain,
                         S* doffset, S* dx_acc, int d) {
  S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
  for (int i = 0; i < d; ++i) {
    const S dxh = dy[i] * gain[i];
    sum_dxhat += dxh;
    sum_dxhat_xhat += dxh * xhat[i];
    dgain[i] += dy[i] * xhat[i];
    doffset[i] += dy[i];
  }
  const S m1 = sum_dxhat / S(d);
  const S m2 = sum_dxhat_xhat / S(d);
  for (int i = 0; i < d; ++i) {
    const S dxh = dy[i] * gain[i];
    dx_acc[i] += rstd * (dxh - m1 - xhat[i] * m2);
  }
}

constexpr double kSqrtHalf = 0.70710678118654752440;

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(kSqrtHalf)));
}

template <class S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(0.70710678118654752440)));
  const S pdf = S(0.39894228040143267794) * std::exp(S(-0.5) * x * x);
  return cdf + x * pdf;
}

}  // namespace

template <class S>
void attention_row(std::span<const S> query, const S* keys, const S* values, int n, int stride,
                   int head_dim, S* weights_out, S* context_out) {
  const S inv_sqrt_hd = S(1) / std::sqrt(S(head_dim));
  S max_logit = std::numeric_limits<S>::lowest();
  for (int j = 0; j < n; ++j) {
    const S* kj = keys + size_t(j) * stride;
    S logit = S(0);
    for (int i = 0; i < head_dim; ++i) logit += query[i] * kj[i];
    logit *= inv_sqrt_hd;
    weights_out[j] = logit;
    max_logit = std::max(max_logit, logit);
  }
  S sum = S(0);
  for (int j = 0; j < n; ++j) {
    weights_out[j] = std::exp(weights_out[j] - max_logit);
    sum += weights_out[j];
  }
  const S inv_sum = S(1) / sum;
  std::fill_n(context_out, head_dim, S(0));
  for (int j = 0; j < n; ++j) {
    weights_out[j] *= inv_sum;
    const S* vj = values + size_t(j) * stride;
    for (int i = 0; i < head_dim; ++i) context_out[i] += weights_out[j] * vj[i];
  }
}

template void attention_row<float>(std::span<const float>, const float*, const float*, int, int,
                                   int, float*, float*);
template void attention_row<double>(std::span<const double>, const double*, const double*, int,
                                    int, int, double*, double*);

namespace {

template <class S>
struct Scratch {
  std::vector<S> x, branch_in, branch_out, q, ctx, h1, h2, weights;

  void resize(const ModelConfig& cfg) {
    x.resize(cfg.d_model);
    branch_in.resize(cfg.d_model);
    branch_out.resize(cfg.d_model);
    q.resize(cfg.d_model);
    ctx.resize(cfg.d_model);
    h1.resize(cfg.d_ff());
    h2.resize(cfg.d_ff());
    weights.resize(cfg.block_size);
  }
};

// Processes one token through the whole stack. `z_row` is the embedded token
// (positional encoding not yet added). k_cache/v_cache hold keys/values of
// all earlier tokens, layer stride block_size*d_model; this token's entries
// are appended. The same kernel backs both batch forward and the tracker's
// incremental decoding, which is what makes them agree bit for bit.
template <class S>
void step_token(const Params<S>& p, int t, const S* z_row, S* k_cache, S* v_cache,
                ForwardTrace<S>* trace, S* pred, Scratch<S>& w) {
  const ModelConfig& cfg = p.config;
  const int d = cfg.d_model;
  const int dff = cfg.d_ff();
  const int hd = cfg.head_dim();
  const size_t kv_layer_stride = size_t(cfg.block_size) * d;

  const S* pos = p.tensor("pos.table") + size_t(t) * d;
  for (int i = 0; i < d; ++i) w.x[i] = z_row[i] + pos[i];

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    auto* layer = trace ? &trace->layers[l] : nullptr;

    if (cfg.has_attention()) {
      // Pre-norm masked multi-head self-attention with residual.
      const S rstd =
          layer_norm(w.x.data(), p.tensor(lp + "attn_norm.gain"),
                     p.tensor(lp + "attn_norm.offset"), w.branch_in.data(),
                     w.branch_out.data(), d);
      if (layer) {
        std::copy_n(w.branch_in.data(), d, layer->n1_xhat.data() + size_t(t) * d);
        std::copy_n(w.branch_out.data(), d, layer->n1_out.data() + size_t(t) * d);
        layer->n1_rstd[t] = rstd;
      }
      S* k_row = k_cache + l * kv_layer_stride + size_t(t) * d;
      S* v_row = v_cache + l * kv_layer_stride + size_t(t) * d;
      matvec(p.tensor(lp + "attn.wq.weight"), p.tensor(lp + "attn.wq.bias"),
             w.branch_out.data(), w.q.data(), d, d);
      matvec(p.tensor(lp + "attn.wk.weight"), p.tensor(lp + "attn.wk.bias"),
             w.branch_out.data(), k_row, d, d);
      matvec(p.tensor(lp + "attn.wv.weight"), p.tensor(lp + "attn.wv.bias"),
             w.branch_out.data(), v_row, d, d);
      if (layer) {
        std::copy_n(w.q.data(), d, layer->q.data() + size_t(t) * d);
        std::copy_n(k_row, d, layer->k.data() + size_t(t) * d);
        std::copy_n(v_row, d, layer->v.data() + size_t(t) * d);
      }

      // Only positions 0..t enter the softmax support, so post-softmax
      // weight on any future position is exactly zero, not merely small.
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int hoff = h * hd;
        attention_row<S>(std::span<const S>(w.q.data() + hoff, size_t(hd)),
                         k_cache + l * kv_layer_stride + hoff,
                         v_cache + l * kv_layer_stride + hoff, t + 1, d, hd, w.weights.data(),
                         w.ctx.data() + hoff);
        if (trace)
          for (int j = 0; j <= t; ++j)
            trace->attention[trace->att_index(l, h, t, j)] = w.weights[j];
      }
      if (layer) std::copy_n(w.ctx.data(), d, layer->att_ctx.data() + size_t(t) * d);
      matvec(p.tensor(lp + "attn.wo.weight"), p.tensor(lp + "attn.wo.bias"), w.ctx.data(),
             w.branch_out.data(), d, d);
      for (int i = 0; i < d; ++i) w.x[i] += w.branch_out[i];
    }

    // Pre-norm feed-forward with residual.
    const S rstd = layer_norm(w.x.data(), p.tensor(lp + "ffn_norm.gain"),
                              p.tensor(lp + "ffn_norm.offset"), w.branch_in.data(),
                              w.branch_out.data(), d);
    if (layer) {
      std::copy_n(w.branch_in.data(), d, layer->n2_xhat.data() + size_t(t) * d);
      std::copy_n(w.branch_out.data(), d, layer->n2_out.data() + size_t(t) * d);
      layer->n2_rstd[t] = rstd;
    }
    matvec(p.tensor(lp + "ffn.w1.weight"), p.tensor(lp + "ffn.w1.bias"), w.branch_out.data(),
           w.h1.data(), dff, d);
    for (int i = 0; i < dff; ++i) w.h2[i] = gelu(w.h1[i]);
    if (layer) {
      std::copy_n(w.h1.data(), dff, layer->ffn_pre.data() + size_t(t) * dff);
      std::copy_n(w.h2.data(), dff, layer->ffn_act.data() + size_t(t) * dff);
    }
    matvec(p.tensor(lp + "ffn.w2.weight"), p.tensor(lp + "ffn.w2.bias"), w.h2.data(),
           w.branch_out.data(), d, dff);
    for (int i = 0; i < d; ++i) w.x[i] += w.branch_out[i];
  }

  const S rstd = layer_norm(w.x.data(), p.tensor("final_norm.gain"),
                            p.tensor("final_norm.offset"), w.branch_in.data(),
                            w.branch_out.data(), d);
  if (trace) {
    std::copy_n(w.branch_in.data(), d, trace->final_xhat.data() + size_t(t) * d);
    std::copy_n(w.branch_out.data(), d, trace->final_out.data() + size_t(t) * d);
    trace->final_rstd[t] = rstd;
  }
  matvec(p.tensor("head.weight"), p.tensor("head.bias"), w.branch_out.data(), pred, 3, d);
}

template <class S>
void trace_alloc(ForwardTrace<S>& trace, const ModelConfig& cfg, int n_tokens) {
  trace.config = cfg;
  trace.n_tokens = n_tokens;
  trace.predictions.assign(size_t(n_tokens) * 3, S(0));
  if (cfg.has_attention())
    trace.attention.assign(size_t(cfg.n_layers) * cfg.n_heads * n_tokens * n_tokens, S(0));
  trace.layers.resize(cfg.n_layers);
  const size_t td = size_t(n_tokens) * cfg.d_model;
  const size_t tff = size_t(n_tokens) * cfg.d_ff();
  for (auto& l : trace.layers) {
    if (cfg.has_attention()) {
      l.n1_xhat.resize(td);
      l.n1_out.resize(td);
      l.n1_rstd.resize(n_tokens);
      l.q.resize(td);
      l.k.resize(td);
      l.v.resize(td);
      l.att_ctx.resize(td);
    }
    l.n2_xhat.resize(td);
    l.n2_out.resize(td);
    l.n2_rstd.resize(n_tokens);
    l.ffn_pre.resize(tff);
    l.ffn_act.resize(tff);
  }
  trace.final_xhat.resize(td);
  trace.final_out.resize(td);
  trace.final_rstd.resize(n_tokens);
}

}  // namespace

template <class S>
std::vector<S> embed(const Params<S>& params, std::span<const S> patches, int n_tokens) {
  const ModelConfig& cfg = params.config;
  const size_t patch = size_t(cfg.patch_size());
  if (n_tokens < 1) throw std::invalid_argument("embed: need at least one token");
  if (patches.size() != patch * size_t(n_tokens))
    throw std::invalid_argument("embed: feature shape mismatch");
  const size_t slice_off =
      cfg.variant == Variant::full ? 0 : sh::center_cell_offset(uint32_t(cfg.in_channels));
  const int n_in = cfg.embed_inputs();
  std::vector<S> out(size_t(n_tokens) * cfg.d_model);
  const S* w = params.tensor("embed.weight");
  const S* b = params.tensor("embed.bias");
  for (int t = 0; t < n_tokens; ++t)
    matvec(w, b, patches.data() + size_t(t) * patch + slice_off,
           out.data() + size_t(t) * cfg.d_model, cfg.d_model, n_in);
  return out;
}

template <class S>
ForwardTrace<S> forward(const Params<S>& params, std::span<const S> embedded, int n_tokens) {
  const ModelConfig& cfg = params.config;
  if (n_tokens < 1) throw std::invalid_argument("forward: need at least one token");
  if (n_tokens > cfg.block_size)
    throw ContextOverflowError("sequence of " + std::to_string(n_tokens) +
                               " tokens exceeds block size " + std::to_string(cfg.block_size));
  if (embedded.size() != size_t(n_tokens) * cfg.d_model)
    throw std::invalid_argument("forward: embedded shape mismatch");

  ForwardTrace<S> trace;
  trace_alloc(trace, cfg, n_tokens);
  trace.params_version = params.version;

  std::vector<S> k_cache(size_t(cfg.n_layers) * cfg.block_size * cfg.d_model);
  std::vector<S> v_cache(k_cache.size());
  Scratch<S> w;
  w.resize(cfg);
  for (int t = 0; t < n_tokens; ++t)
    step_token(params, t, embedded.data() + size_t(t) * cfg.d_model, k_cache.data(),
               v_cache.data(), &trace, trace.predictions.data() + size_t(t) * 3, w);
  return trace;
}

template <class S>
ForwardTrace<S> run(const Params<S>& params, std::span<const S> patches, int n_tokens) {
  const auto embedded = embed(params, patches, n_tokens);
  ForwardTrace<S> trace = forward(params, std::span<const S>(embedded), n_tokens);
  trace.inputs.assign(patches.begin(), patches.end());
  return trace;
}

template <class S>
void embed_backward(const Params<S>& params, std::span<const S> patches,
                    std::span<const S> d_embedded, int n_tokens, std::span<S> grads) {
  const ModelConfig& cfg = params.config;
  const size_t patch = size_t(cfg.patch_size());
  if (patches.size() != patch * size_t(n_tokens))
    throw std::invalid_argument("embed_backward: feature shape mismatch");
  if (grads.size() != params.layout.total())
    throw std::invalid_argument("embed_backward: gradient buffer size mismatch");
  const size_t slice_off =
      cfg.variant == Variant::full ? 0 : sh::center_cell_offset(uint32_t(cfg.in_channels));
  const int n_in = cfg.embed_inputs();
  S* dw = grads.data() + params.layout.find("embed.weight").offset;
  S* db = grads.data() + params.layout.find("embed.bias").offset;
  for (int t = 0; t < n_tokens; ++t)
    linear_grad_acc(dw, db, d_embedded.data() + size_t(t) * cfg.d_model,
                    patches.data() + size_t(t) * patch + slice_off, cfg.d_model, n_in);
}

template <class S>
BackwardResult<S> backward(const Params<S>& params, const ForwardTrace<S>& trace,
                           std::span<const S> d_predictions) {
  const ModelConfig& cfg = params.config;
  if (!(trace.config == cfg)) throw StaleTraceError("trace was built for a different config");
  if (trace.params_version != params.version)
    throw StaleTraceError("trace is stale: parameters changed since forward");
  const int T = trace.n_tokens;
  const int d = cfg.d_model;
  const int dff = cfg.d_ff();
  const int hd = cfg.head_dim();
  const S inv_sqrt_hd = S(1) / std::sqrt(S(hd));
  if (d_predictions.size() != size_t(T) * 3)
    throw std::invalid_argument("backward: d_predictions shape mismatch");

  BackwardResult<S> result;
  result.param_grads.assign(params.layout.total(), S(0));
  auto G = [&](const std::string& name) {
    return result.param_grads.data() + params.layout.find(name).offset;
  };

  // Residual-stream gradient, updated in place layer by layer.
  std::vector<S> dx(size_t(T) * d, S(0));

  // Head and final norm.
  {
    S* dw_head = G("head.weight");
    S* db_head = G("head.bias");
    S* dgain = G("final_norm.gain");
    S* doffset = G("final_norm.offset");
    const S* w_head = params.tensor("head.weight");
    std::vector<S> d_ln(d);
    for (int t = 0; t < T; ++t) {
      const S* dp = d_predictions.data() + size_t(t) * 3;
      const S* ln_out = trace.final_out.data() + size_t(t) * d;
      linear_grad_acc(dw_head, db_head, dp, ln_out, 3, d);
      std::fill(d_ln.begin(), d_ln.end(), S(0));
      matvec_t_acc(w_head, dp, d_ln.data(), 3, d);
      layer_norm_backward(d_ln.data(), trace.final_xhat.data() + size_t(t) * d,
                          trace.final_rstd[t], params.tensor("final_norm.gain"), dgain,
                          doffset, dx.data() + size_t(t) * d, d);
    }
  }

  std::vector<S> d_branch(d), d_h1(dff), d_hidden(dff);
  std::vector<S> dq(size_t(T) * d), dk(size_t(T) * d), dv(size_t(T) * d);
  std::vector<S> d_ctx(size_t(T) * d), d_norm_in(size_t(T) * d);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    const auto& layer = trace.layers[l];

    // Feed-forward block.
    {
      S* dw1 = G(lp + "ffn.w1.weight");
      S* db1 = G(lp + "ffn.w1.bias");
      S* dw2 = G(lp + "ffn.w2.weight");
      S* db2 = G(lp + "ffn.w2.bias");
      S* dgain = G(lp + "ffn_norm.gain");
      S* doffset = G(lp + "ffn_norm.offset");
      const S* w1 = params.tensor(lp + "ffn.w1.weight");
      const S* w2 = params.tensor(lp + "ffn.w2.weight");
      const S* gain = params.tensor(lp + "ffn_norm.gain");
      for (int t = 0; t < T; ++t) {
        const S* dxt = dx.data() + size_t(t) * d;  // residual gradient = branch gradient
        const S* act = layer.ffn_act.data() + size_t(t) * dff;
        const S* pre = layer.ffn_pre.data() + size_t(t) * dff;
        linear_grad_acc(dw2, db2, dxt, act, d, dff);
        std::fill(d_hidden.begin(), d_hidden.end(), S(0));
        matvec_t_acc(w2, dxt, d_hidden.data(), d, dff);
        for (int i = 0; i < dff; ++i) d_h1[i] = d_hidden[i] * gelu_grad(pre[i]);
        linear_grad_acc(dw1, db1, d_h1.data(), layer.n2_out.data() + size_t(t) * d, dff, d);
        std::fill(d_branch.begin(), d_branch.end(), S(0));
        matvec_t_acc(w1, d_h1.data(), d_branch.data(), dff, d);
        layer_norm_backward(d_branch.data(), layer.n2_xhat.data() + size_t(t) * d,
                            layer.n2_rstd[t], gain, dgain, doffset,
                            dx.data() + size_t(t) * d, d);
      }
    }

    if (!cfg.has_attention()) continue;

    // Attention block. dx currently holds the gradient on the post-attention
    // residual stream.
    {
      S* dwo = G(lp + "attn.wo.weight");
      S* dbo = G(lp + "attn.wo.bias");
      const S* wo = params.tensor(lp + "attn.wo.weight");
      std::fill(d_ctx.begin(), d_ctx.end(), S(0));
      for (int t = 0; t < T; ++t) {
        const S* dxt = dx.data() + size_t(t) * d;
        linear_grad_acc(dwo, dbo, dxt, layer.att_ctx.data() + size_t(t) * d, d, d);
        matvec_t_acc(wo, dxt, d_ctx.data() + size_t(t) * d, d, d);
      }

      std::fill(dq.begin(), dq.end(), S(0));
      std::fill(dk.begin(), dk.end(), S(0));
      std::fill(dv.begin(), dv.end(), S(0));
      std::vector<S> dw_row(T);
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int hoff = h * hd;
        for (int i = 0; i < T; ++i) {
          const S* d_ctx_h = d_ctx.data() + size_t(i) * d + hoff;
          // dL/dweight and value gradients.
          S dot_ww = S(0);
          for (int j = 0; j <= i; ++j) {
            const S weight = trace.attention[trace.att_index(l, h, i, j)];
            const S* vj = layer.v.data() + size_t(j) * d + hoff;
            S dwij = S(0);
            for (int c = 0; c < hd; ++c) dwij += d_ctx_h[c] * vj[c];
            dw_row[j] = dwij;
            dot_ww += weight * dwij;
            S* dvj = dv.data() + size_t(j) * d + hoff;
            for (int c = 0; c < hd; ++c) dvj[c] += weight * d_ctx_h[c];
          }
          // Softmax backward, then scores to q/k.
          const S* qi = layer.q.data() + size_t(i) * d + hoff;
          S* dqi = dq.data() + size_t(i) * d + hoff;
          for (int j = 0; j <= i; ++j) {
            const S weight = trace.attention[trace.att_index(l, h, i, j)];
            const S ds = weight * (dw_row[j] - dot_ww) * inv_sqrt_hd;
            const S* kj = layer.k.data() + size_t(j) * d + hoff;
            S* dkj = dk.data() + size_t(j) * d + hoff;
            for (int c = 0; c < hd; ++c) {
              dqi[c] += ds * kj[c];
              dkj[c] += ds * qi[c];
            }
          }
        }
      }

      S* dwq = G(lp + "attn.wq.weight");
      S* dbq = G(lp + "attn.wq.bias");
      S* dwk = G(lp + "attn.wk.weight");
      S* dbk = G(lp + "attn.wk.bias");
      S* dwv = G(lp + "attn.wv.weight");
      S* dbv = G(lp + "attn.wv.bias");
      S* dgain = G(lp + "attn_norm.gain");
      S* doffset = G(lp + "attn_norm.offset");
      const S* gain = params.tensor(lp + "attn_norm.gain");
      std::fill(d_norm_in.begin(), d_norm_in.end(), S(0));
      for (int t = 0; t < T; ++t) {
        const S* a = layer.n1_out.data() + size_t(t) * d;
        S* da = d_norm_in.data() + size_t(t) * d;
        linear_grad_acc(dwq, dbq, dq.data() + size_t(t) * d, a, d, d);
        linear_grad_acc(dwk, dbk, dk.data() + size_t(t) * d, a, d, d);
        linear_grad_acc(dwv, dbv, dv.data() + size_t(t) * d, a, d, d);
        matvec_t_acc(params.tensor(lp + "attn.wq.weight"), dq.data() + size_t(t) * d, da, d, d);
        matvec_t_acc(params.tensor(lp + "attn.wk.weight"), dk.data() + size_t(t) * d, da, d, d);
        matvec_t_acc(params.tensor(lp + "attn.wv.weight"), dv.data() + size_t(t) * d, da, d, d);
        layer_norm_backward(da, layer.n1_xhat.data() + size_t(t) * d, layer.n1_rstd[t], gain,
                            dgain, doffset, dx.data() + size_t(t) * d, d);
      }
    }
  }

  // Bottom of the stack: dx is the gradient on embedded + positional rows.
  {
    S* dpos = G("pos.table");
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < d; ++i) dpos[size_t(t) * d + i] += dx[size_t(t) * d + i];
  }
  if (!trace.inputs.empty())
    embed_backward(params, std::span<const S>(trace.inputs), std::span<const S>(dx), T,
                   std::span<S>(result.param_grads));
  result.d_embedded = std::move(dx);
  return result;
}

template <class S>
std::vector<S> dump_attention(const ForwardTrace<S>& trace, int layer, int head) {
  if (!trace.config.has_attention())
    throw std::invalid_argument("dump_attention: the baseline_mlp variant has no attention");
  if (layer < 0 || layer >= trace.config.n_layers)
    throw std::invalid_argument("dump_attention: layer index out of range");
  if (head < 0 || head >= trace.config.n_heads)
    throw std::invalid_argument("dump_attention: head index out of range");
  const int T = trace.n_tokens;
  std::vector<S> grid(size_t(T) * T);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < T; ++j) grid[size_t(i) * T + j] = trace.attention[trace.att_index(layer, head, i, j)];
  return grid;
}

void save_checkpoint(const std::string& path, const Params<float>& params) {
  BinWriter w(path);
  w.magic("CKP1");
  w.u32(1);
  const ModelConfig& cfg = params.config;
  w.u32(uint32_t(cfg.n_layers));
  w.u32(uint32_t(cfg.n_heads));
  w.u32(uint32_t(cfg.d_model));
  w.u32(uint32_t(cfg.block_size));
  w.u32(uint32_t(cfg.in_channels));
  w.u32(uint32_t(cfg.d_ff()));
  w.u8(uint8_t(cfg.variant));
  w.u32(uint32_t(params.layout.tensors().size()));
  for (const auto& t : params.layout.tensors()) {
    w.u16(uint16_t(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(uint8_t(t.dims.size()));
    for (uint32_t dim : t.dims) w.u32(dim);
    w.f32_array(params.values.data() + t.offset, t.count());
  }
  w.close();
}

Params<float> load_checkpoint(const std::string& path) {
  BinReader r(path);
  r.expect_magic("CKP1");
  const uint32_t version = r.u32();
  if (version != 1)
    throw CheckpointError("'" + path + "': unsupported checkpoint version " +
                          std::to_string(version));
  ModelConfig cfg;
  cfg.n_layers = int(r.u32());
  cfg.n_heads = int(r.u32());
  cfg.d_model = int(r.u32());
  cfg.block_size = int(r.u32());
  cfg.in_channels = int(r.u32());
  const uint32_t d_ff = r.u32();
  const uint8_t variant = r.u8();
  if (variant > uint8_t(Variant::full))
    throw CheckpointError("'" + path + "': unknown variant id " + std::to_string(variant));
  cfg.variant = Variant(variant);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError("'" + path + "': invalid stored config: " + e.what());
  }
  if (d_ff != uint32_t(cfg.d_ff()))
    throw CheckpointError("'" + path + "': stored d_ff disagrees with 4*d_model");

  Params<float> params;
  params.config = cfg;
  params.layout = ParamLayout(cfg);
  params.values.assign(params.layout.total(), 0.0f);

  const uint32_t count = r.u32();
  if (count != params.layout.tensors().size())
    throw CheckpointError("'" + path + "': tensor count " + std::to_string(count) +
                          " does not match config (expected " +
                          std::to_string(params.layout.tensors().size()) + ")");
  for (uint32_t i = 0; i < count; ++i) {
    const auto& expected = params.layout.tensors()[i];
    const uint16_t name_len = r.u16();
    const std::string name = r.str(name_len);
    if (name != expected.name)
      throw CheckpointError("'" + path + "': tensor '" + name + "' where '" + expected.name +
                            "' was expected");
    const uint8_t rank = r.u8();
    if (rank != expected.dims.size())
      throw CheckpointError("'" + path + "': tensor '" + name + "' has wrong rank");
    for (uint8_t dim = 0; dim < rank; ++dim)
      if (r.u32() != expected.dims[dim])
        throw CheckpointError("'" + path + "': tensor '" + name + "' has wrong shape");
    r.f32_array(params.values.data() + expected.offset, expected.count());
  }
  r.expect_eof();
  return params;
}

Params<float> load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Params<float> params = load_checkpoint(path);
  if (!(params.config == expected))
    throw CheckpointError("'" + path + "': checkpoint config (variant " +
                          variant_name(params.config.variant) +
                          ") does not match the requested config (variant " +
                          variant_name(expected.variant) + ")");
  return params;
}

template <class S>
Decoder<S>::Decoder(const Params<S>& params) : params_(&params) {
  const ModelConfig& cfg = params.config;
  k_cache_.assign(size_t(cfg.n_layers) * cfg.block_size * cfg.d_model, S(0));
  v_cache_.assign(k_cache_.size(), S(0));
}

template <class S>
void Decoder<S>::reset() {
  t_ = 0;
}

template <class S>
std::array<S, 3> Decoder<S>::push(std::span<const S> patch) {
  const ModelConfig& cfg = params_->config;
  if (t_ >= cfg.block_size)
    throw ContextOverflowError("decoder context is full (block size " +
                               std::to_string(cfg.block_size) + ")");
  const auto z = embed(*params_, patch, 1);
  thread_local Scratch<S> w;  // no state carried between calls
  w.resize(cfg);
  std::array<S, 3> pred{};
  step_token(*params_, t_, z.data(), k_cache_.data(), v_cache_.data(),
             static_cast<ForwardTrace<S>*>(nullptr), pred.data(), w);
  ++t_;
  return pred;
}

// Explicit instantiations: float for training/inference, double for the
// finite-difference gradient checks.
template Params<float> init_params<float>(const ModelConfig&, uint64_t);
template Params<double> init_params<double>(const ModelConfig&, uint64_t);
template Params<double> params_cast<float, double>(const Params<float>&);
template Params<float> params_cast<double, float>(const Params<double>&);
template std::vector<float> embed<float>(const Params<float>&, std::span<const float>, int);
template std::vector<double> embed<double>(const Params<double>&, std::span<const double>, int);
template ForwardTrace<float> forward<float>(const Params<float>&, std::span<const float>, int);
template ForwardTrace<double> forward<double>(const Params<double>&, std::span<const double>,
                                              int);
template ForwardTrace<float> run<float>(const Params<float>&, std::span<const float>, int);
template ForwardTrace<double> run<double>(const Params<double>&, std::span<const double>, int);
template void embed_backward<float>(const Params<float>&, std::span<const float>,
                                    std::span<const float>, int, std::span<float>);
template void embed_backward<double>(const Params<double>&, std::span<const double>,
                                     std::span<const double>, int, std::span<double>);
template BackwardResult<float> backward<float>(const Params<float>&, const ForwardTrace<float>&,
                                               std::span<const float>);
template BackwardResult<double> backward<double>(const Params<double>&,
                                                 const ForwardTrace<double>&,
                                                 std::span<const double>);
template std::vector<float> dump_attention<float>(const ForwardTrace<float>&, int, int);
template std::vector<double> dump_attention<double>(const ForwardTrace<double>&, int, int);
template class Decoder<float>;
template class Decoder<double>;

}  // namespace tracto::model
