#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tracto/sh.hpp"

namespace tracto::model {

enum class Variant : uint8_t { baseline_mlp = 0, context_only = 1, full = 2 };

const char* variant_name(Variant v);
Variant variant_from_name(std::string_view name);

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 6;
  int d_model = 192;
  int block_size = 96;
  int in_channels = 28;
  Variant variant = Variant::full;

  int d_ff() const { return 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }
  // Width of one embed input row. The full variant consumes the whole 3x3x3
  // patch; the ablation variants see only the center cell's channels.
  int embed_inputs() const {
    return variant == Variant::full ? sh::kNeighborhood * in_channels : in_channels;
  }
  // Rows handed to embed()/run() are always full patches.
  int patch_size() const { return sh::kNeighborhood * in_channels; }
  bool has_attention() const { return variant != Variant::baseline_mlp; }

  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  size_t offset = 0;
  std::vector<uint32_t> dims;

  size_t count() const {
    size_t n = 1;
    for (uint32_t d : dims) n *= d;
    return n;
  }
};

// Named-tensor layout over one flat parameter buffer, in checkpoint order.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& cfg);

  size_t total() const { return total_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& find(std::string_view name) const;  // throws CheckpointError
  // Name of the tensor owning flat index i (for diagnostics).
  const std::string& owner(size_t i) const;

 private:
  std::vector<TensorInfo> tensors_;
  size_t total_ = 0;
};

template <class S>
struct Params {
  ModelConfig config;
  ParamLayout layout;
  std::vector<S> values;
  uint64_t version = 0;  // bumped by every in-place update

  S* tensor(std::string_view name) { return values.data() + layout.find(name).offset; }
  const S* tensor(std::string_view name) const {
    return values.data() + layout.find(name).offset;
  }
};

template <class S>
Params<S> init_params(const ModelConfig& cfg, uint64_t rng_seed);

template <class From, class To>
Params<To> params_cast(const Params<From>& p);

// Everything forward caches so that backward is exact, plus the outputs.
template <class S>
struct ForwardTrace {
  ModelConfig config;
  uint64_t params_version = 0;
  int n_tokens = 0;

  std::vector<S> predictions;  // n_tokens x 3
  // Post-softmax attention weights, n_layers x n_heads x T x T row-major in
  // query-major order; entries above the diagonal are exactly zero. Empty for
  // the baseline_mlp variant.
  std::vector<S> attention;

  // Caches (internal to backward).
  std::vector<S> inputs;  // n_tokens x patch_size, only set by run()
  struct Layer {
    std::vector<S> n1_xhat, n1_out, n1_rstd;
    std::vector<S> q, k, v, att_ctx;
    std::vector<S> n2_xhat, n2_out, n2_rstd;
    std::vector<S> ffn_pre, ffn_act;
  };
  std::vector<Layer> layers;
  std::vector<S> final_xhat, final_out, final_rstd;

  size_t att_index(int layer, int head, int i, int j) const {
    return ((size_t(layer) * config.n_heads + head) * n_tokens + i) * n_tokens + j;
  }
};

// One masked softmax-attention row, the per-head kernel of the decoder:
// logits q.k_j / sqrt(head_dim) over keys j = 0..n-1 (the causal support of
// query position n-1), softmax over exactly those logits, context = weighted
// sum of values. keys/values row j starts at j*stride.
template <class S>
void attention_row(std::span<const S> query, const S* keys, const S* values, int n, int stride,
                   int head_dim, S* weights_out, S* context_out);

// Convolutional neighborhood embedding: one linear map per token over its
// own patch. Rows of `patches` are full 3x3x3 x in_channels slabs; variants
// that ignore the neighborhood read only the center cell.
template <class S>
std::vector<S> embed(const Params<S>& params, std::span<const S> patches, int n_tokens);

// Decoder stack over already-embedded tokens: adds the learned positional
// encodings, runs the pre-norm blocks with exclusion-masked multi-head
// attention, then the 3-d direction head. n_tokens > block_size throws
// ContextOverflowError.
template <class S>
ForwardTrace<S> forward(const Params<S>& params, std::span<const S> embedded, int n_tokens);

// embed + forward, keeping the patch rows so backward can reach the embed
// weights as well.
template <class S>
ForwardTrace<S> run(const Params<S>& params, std::span<const S> patches, int n_tokens);

template <class S>
struct BackwardResult {
  std::vector<S> param_grads;  // layout.total(), zero where a tensor is off-path
  std::vector<S> d_embedded;   // n_tokens x d_model
};

// Exact reverse-mode gradients of sum(predictions * d_predictions). Traces
// from run() also fill the embed gradients; traces from forward() leave them
// zero and callers can push d_embedded through embed_backward themselves.
// Throws StaleTraceError when params changed since the trace was made.
template <class S>
BackwardResult<S> backward(const Params<S>& params, const ForwardTrace<S>& trace,
                           std::span<const S> d_predictions);

// Accumulates embed weight/bias gradients for given patch rows into grads.
template <class S>
void embed_backward(const Params<S>& params, std::span<const S> patches,
                    std::span<const S> d_embedded, int n_tokens, std::span<S> grads);

// Post-softmax T x T score grid for one layer/head (rows = query positions).
template <class S>
std::vector<S> dump_attention(const ForwardTrace<S>& trace, int layer, int head);

// CKP1 checkpoint format, little-endian:
//   magic 'CKP1', u32 version=1,
//   u32 n_layers n_heads d_model block_size in_channels d_ff, u8 variant,
//   u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank,
//   rank x u32 dims, f32 payload row-major.
void save_checkpoint(const std::string& path, const Params<float>& params);
Params<float> load_checkpoint(const std::string& path);
// Throws CheckpointError when the stored config differs from `expected`.
Params<float> load_checkpoint(const std::string& path, const ModelConfig& expected);

// Incremental decoding session for the tracker: feeding patches one vertex at
// a time reproduces forward()'s predictions bit-exactly, because forward is
// itself evaluated token-major through the same kernel.
template <class S>
class Decoder {
 public:
  explicit Decoder(const Params<S>& params);

  void reset();
  int size() const { return t_; }
  int capacity() const { return params_->config.block_size; }

  // Feed the next vertex's patch; returns the prediction at that position.
  std::array<S, 3> push(std::span<const S> patch);

 private:
  const Params<S>* params_;
  int t_ = 0;
  std::vector<S> k_cache_, v_cache_;  // n_layers x block_size x d_model
};

}  // namespace tracto::model
