#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tracto/model.hpp"
#include "tracto/streamline.hpp"

namespace tracto::train {

enum class WeightingMode { uniform, softmax_fraction, inverse_frequency };

const char* weighting_name(WeightingMode m);
WeightingMode weighting_from_name(std::string_view name);

struct BundleWeights {
  std::vector<double> beta;  // one entry per bundle class, sums to 1

  size_t classes() const { return beta.size(); }
};

// Per-class loss weights from streamline counts.
//   softmax_fraction:  beta = softmax(counts / sum(counts)); the counts are
//     mapped to fractions first so the exponentials stay finite for datasets
//     of any size.
//   inverse_frequency: beta_j proportional to sum(counts)/counts_j.
//   uniform:           beta_j = 1/J.
BundleWeights bundle_weights(std::span<const size_t> counts, WeightingMode mode);

struct TrainConfig {
  int batch_size = 256;  // 2048 matches the reference setup; 256 is desk scale
  int epochs = 20;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  WeightingMode weighting_mode = WeightingMode::uniform;
  bool squared_error = true;  // false: unsquared L2-norm penalty
  uint64_t rng_seed = 0;

  void validate() const;
};

// Weighted masked regression loss over a batch:
//   loss = (1/N) * sum_i beta[label_i] * (1/valid_i) * sum_{t valid} e(t)
// with e(t) = |pred - target|^2 (squared_error) or |pred - target|.
// d_predictions gets the exact gradient; masked positions stay exactly zero.
template <class S>
struct LossResult {
  double loss = 0.0;
  std::vector<S> d_predictions;
};

template <class S>
LossResult<S> weighted_loss(std::span<const S> predictions, std::span<const S> targets,
                            std::span<const uint8_t> valid_mask,
                            std::span<const uint32_t> labels, const BundleWeights& weights,
                            int batch, int T, bool squared_error = true);

struct AdamState {
  std::vector<float> m, v;
  int64_t step = 0;

  static AdamState zeros(size_t n) { return {std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f), 0}; }
};

// One bias-corrected Adam update. Throws TrainingDivergedError naming the
// offending tensor when a gradient is not finite.
void adam_step(model::Params<float>& params, std::span<const float> gradients, AdamState& state,
               const TrainConfig& config);

struct FitResult {
  model::Params<float> params;       // final epoch
  model::Params<float> best_params;  // lowest-loss epoch
  std::vector<double> loss_curve;    // mean batch loss per epoch
  int best_epoch = 0;
};

// Shuffled mini-batch training of a model variant on padded sequences.
// Gradients fan out over `threads` workers and are reduced in sequence order,
// so a fixed (seed, threads) pair reproduces bit-identical parameters.
FitResult fit(const std::vector<TrainSequence>& dataset, const model::ModelConfig& model_config,
              const TrainConfig& config, int threads = 1);

void write_loss_curve(const std::string& path, const std::vector<double>& curve);

}  // namespace tracto::train
