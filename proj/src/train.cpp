#include "tracto/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "tracto/errors.hpp"
#include "tracto/parallel.hpp"
#include "tracto/rng.hpp"

namespace tracto::train {

const char* weighting_name(WeightingMode m) {
  switch (m) {
    case WeightingMode::uniform: return "uniform";
    case WeightingMode::softmax_fraction: return "softmax";
    case WeightingMode::inverse_frequency: return "invfreq";
  }
  return "?";
}

WeightingMode weighting_from_name(std::string_view name) {
  if (name == "uniform") return WeightingMode::uniform;
  if (name == "softmax" || name == "softmax_fraction") return WeightingMode::softmax_fraction;
  if (name == "invfreq" || name == "inverse_frequency") return WeightingMode::inverse_frequency;
  throw std::invalid_argument("unknown weighting mode '" + std::string(name) + "'");
}

BundleWeights bundle_weights(std::span<const size_t> counts, WeightingMode mode) {
  if (counts.empty()) throw std::invalid_argument("bundle_weights: no classes");
  size_t total = 0;
  for (size_t c : counts) total += c;
  if (total == 0) throw std::invalid_argument("bundle_weights: all counts are zero");

  BundleWeights w;
  w.beta.resize(counts.size());
  switch (mode) {
    case WeightingMode::uniform: {
      const double b = 1.0 / double(counts.size());
      std::fill(w.beta.begin(), w.beta.end(), b);
      break;
    }
    case WeightingMode::softmax_fraction: {
      double z = 0.0;
      for (size_t j = 0; j < counts.size(); ++j) {
        w.beta[j] = std::exp(double(counts[j]) / double(total));
        z += w.beta[j];
      }
      for (double& b : w.beta) b /= z;
      break;
    }
    case WeightingMode::inverse_frequency: {
      double z = 0.0;
      for (size_t j = 0; j < counts.size(); ++j) {
        if (counts[j] == 0)
          throw std::invalid_argument("bundle_weights: zero count under inverse_frequency");
        w.beta[j] = double(total) / double(counts[j]);
        z += w.beta[j];
      }
      for (double& b : w.beta) b /= z;
      break;
    }
  }
  return w;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be > 0");
}

template <class S>
LossResult<S> weighted_loss(std::span<const S> predictions, std::span<const S> targets,
                            std::span<const uint8_t> valid_mask,
                            std::span<const uint32_t> labels, const BundleWeights& weights,
                            int batch, int T, bool squared_error) {
  const size_t n = size_t(batch) * T * 3;
  if (predictions.size() != n || targets.size() != n)
    throw std::invalid_argument("weighted_loss: prediction/target shape mismatch");
  if (valid_mask.size() != size_t(batch) * T)
    throw std::invalid_argument("weighted_loss: mask shape mismatch");
  if (labels.size() != size_t(batch))
    throw std::invalid_argument("weighted_loss: label count mismatch");

  LossResult<S> result;
  result.d_predictions.assign(n, S(0));
  double loss = 0.0;
  for (int i = 0; i < batch; ++i) {
    if (labels[i] >= weights.beta.size())
      throw std::invalid_argument("weighted_loss: label " + std::to_string(labels[i]) +
                                  " out of range");
    int valid = 0;
    for (int t = 0; t < T; ++t) valid += (valid_mask[size_t(i) * T + t] != 0);
    if (valid == 0) continue;
    const double beta = weights.beta[labels[i]];
    const double scale = beta / (double(batch) * valid);
    for (int t = 0; t < T; ++t) {
      if (!valid_mask[size_t(i) * T + t]) continue;
      const size_t at = (size_t(i) * T + t) * 3;
      const double ex = double(predictions[at + 0]) - double(targets[at + 0]);
      const double ey = double(predictions[at + 1]) - double(targets[at + 1]);
      const double ez = double(predictions[at + 2]) - double(targets[at + 2]);
      const double sq = ex * ex + ey * ey + ez * ez;
      if (squared_error) {
        loss += scale * sq;
        result.d_predictions[at + 0] = S(scale * 2.0 * ex);
        result.d_predictions[at + 1] = S(scale * 2.0 * ey);
        result.d_predictions[at + 2] = S(scale * 2.0 * ez);
      } else {
        const double nrm = std::sqrt(sq);
        loss += scale * nrm;
        if (nrm > 0.0) {
          result.d_predictions[at + 0] = S(scale * ex / nrm);
          result.d_predictions[at + 1] = S(scale * ey / nrm);
          result.d_predictions[at + 2] = S(scale * ez / nrm);
        }
      }
    }
  }
  result.loss = loss;
  return result;
}

template LossResult<float> weighted_loss<float>(std::span<const float>, std::span<const float>,
                                                std::span<const uint8_t>,
                                                std::span<const uint32_t>, const BundleWeights&,
                                                int, int, bool);
template LossResult<double> weighted_loss<double>(std::span<const double>,
                                                  std::span<const double>,
                                                  std::span<const uint8_t>,
                                                  std::span<const uint32_t>,
                                                  const BundleWeights&, int, int, bool);

void adam_step(model::Params<float>& params, std::span<const float> gradients, AdamState& state,
               const TrainConfig& config) {
  if (gradients.size() != params.values.size() || state.m.size() != params.values.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  for (size_t i = 0; i < gradients.size(); ++i)
    if (!std::isfinite(gradients[i]))
      throw TrainingDivergedError("non-finite gradient in tensor '" + params.layout.owner(i) +
                                  "'");
  state.step += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double bias1 = 1.0 - std::pow(b1, double(state.step));
  const double bias2 = 1.0 - std::pow(b2, double(state.step));
  for (size_t i = 0; i < gradients.size(); ++i) {
    const double g = double(gradients[i]);
    const double m = b1 * double(state.m[i]) + (1.0 - b1) * g;
    const double v = b2 * double(state.v[i]) + (1.0 - b2) * g * g;
    state.m[i] = float(m);
    state.v[i] = float(v);
    const double mhat = m / bias1;
    const double vhat = v / bias2;
    params.values[i] -= float(config.learning_rate * mhat / (std::sqrt(vhat) + config.adam_eps));
  }
  params.version += 1;
}

FitResult fit(const std::vector<TrainSequence>& dataset, const model::ModelConfig& model_config,
              const TrainConfig& config, int threads) {
  config.validate();
  model_config.validate();
  if (dataset.empty()) throw std::invalid_argument("fit: empty dataset");
  const int T_limit = model_config.block_size;
  for (const auto& seq : dataset) {
    if (seq.feature_size != model_config.patch_size())
      throw std::invalid_argument("fit: sequence feature size does not match model");
    if (seq.T < 1) throw std::invalid_argument("fit: empty sequence");
  }

  // Class weights from dataset composition. Unlabeled sequences become class 0
  // so a single-bundle dataset trains with beta = 1.
  uint32_t n_classes = 1;
  for (const auto& seq : dataset)
    if (seq.bundle_label != kUnlabeled) n_classes = std::max(n_classes, seq.bundle_label + 1);
  std::vector<size_t> counts(n_classes, 0);
  for (const auto& seq : dataset)
    counts[seq.bundle_label == kUnlabeled ? 0 : seq.bundle_label] += 1;
  const BundleWeights weights = bundle_weights(counts, config.weighting_mode);

  model::Params<float> params = model::init_params<float>(model_config, config.rng_seed);
  AdamState state = AdamState::zeros(params.values.size());

  const int workers = std::max(1, threads);
  std::vector<std::vector<float>> worker_grads(workers);
  std::vector<double> worker_loss(workers);

  FitResult result;
  result.best_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();

  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = Rng::substream(config.rng_seed, 0x5u);

  std::vector<float> grads(params.values.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with the run's own RNG: identical seeds give identical
    // batch order everywhere.
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = shuffle_rng.below(i);
      std::swap(order[i - 1], order[j]);
    }

    double epoch_loss = 0.0;
    size_t n_batches = 0;
    for (size_t start = 0; start < order.size(); start += size_t(config.batch_size)) {
      const size_t end = std::min(order.size(), start + size_t(config.batch_size));
      const int batch = int(end - start);

      for (int w = 0; w < workers; ++w) {
        worker_grads[w].assign(params.values.size(), 0.0f);
        worker_loss[w] = 0.0;
      }

      // Each sequence contributes loss (1/batch) * beta * mean over its valid
      // positions; per-sequence terms are independent, so they fan out.
      parallel_for_indexed(size_t(batch), workers, [&](size_t widx, size_t b) {
        const TrainSequence& seq = dataset[order[start + b]];
        const int n_tokens = std::min(seq.valid_count(), T_limit);
        if (n_tokens == 0) return;
        const auto trace = model::run<float>(
            params,
            std::span<const float>(seq.features.data(), size_t(n_tokens) * seq.feature_size),
            n_tokens);
        const uint32_t label = seq.bundle_label == kUnlabeled ? 0 : seq.bundle_label;
        auto loss = weighted_loss<float>(
            std::span<const float>(trace.predictions),
            std::span<const float>(seq.targets.data(), size_t(n_tokens) * 3),
            std::span<const uint8_t>(seq.valid_mask.data(), size_t(n_tokens)),
            std::span<const uint32_t>(&label, 1), weights, 1, n_tokens, config.squared_error);
        // Rescale the one-sequence loss (1/N = 1) to its batch share.
        const float share = 1.0f / float(batch);
        for (auto& g : loss.d_predictions) g *= share;
        worker_loss[widx] += loss.loss / double(batch);
        const auto grad = model::backward<float>(params, trace,
                                                 std::span<const float>(loss.d_predictions));
        auto& acc = worker_grads[widx];
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += grad.param_grads[i];
      });

      std::fill(grads.begin(), grads.end(), 0.0f);
      double batch_loss = 0.0;
      for (int w = 0; w < workers; ++w) {
        batch_loss += worker_loss[w];
        for (size_t i = 0; i < grads.size(); ++i) grads[i] += worker_grads[w][i];
      }
      adam_step(params, grads, state, config);
      epoch_loss += batch_loss;
      n_batches += 1;
    }

    epoch_loss /= double(n_batches);
    result.loss_curve.push_back(epoch_loss);
    if (epoch_loss < best_loss) {
      best_loss = epoch_loss;
      result.best_epoch = epoch;
      result.best_params = params;
    }
  }
  result.params = std::move(params);
  return result;
}

void write_loss_curve(const std::string& path, const std::vector<double>& curve) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "epoch,loss\n";
  out.precision(12);
  for (size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << '\n';
  if (!out) throw Error("write to '" + path + "' failed");
}

}  // namespace tracto::train
