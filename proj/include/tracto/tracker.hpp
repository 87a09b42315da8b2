#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tracto/model.hpp"
#include "tracto/rng.hpp"
#include "tracto/streamline.hpp"
#include "tracto/volume.hpp"

namespace tracto::tracker {

struct TrackConfig {
  double step_size = 1.0;  // mm
  int seeds_per_voxel = 5;
  double min_length = 20.0;   // mm
  double max_length = 200.0;  // mm
  double stop_norm_tau = 0.1;
  bool bidirectional = true;
  uint64_t rng_seed = 0;

  void validate() const;
};

enum class StopReason : uint8_t { left_mask, out_of_bounds, low_norm, max_length };

const char* stop_reason_name(StopReason r);

using StopHistogram = std::map<StopReason, size_t>;

// seeds_per_voxel uniform points inside every set voxel's cube, in voxel
// scan order (x fastest), mapped to world mm. Deterministic per seed.
std::vector<Vec3> generate_seeds(const Volume& mask, int seeds_per_voxel, Rng& rng);

// Direction source for propagation. The production model feeds patches
// through the incremental decoder; tests can inject scripted oracles.
class StepPredictor {
 public:
  virtual ~StepPredictor() = default;
  virtual void reset() = 0;
  // Context capacity; the tracker slides a window of this many vertices.
  virtual int capacity() const = 0;
  // Vertices fed since the last reset.
  virtual int size() const = 0;
  // Feed the 3x3x3 patch at the newest context vertex, return the raw
  // (unnormalized) predicted direction at that position.
  virtual Vec3 push(std::span<const double> patch) = 0;
};

class ModelPredictor : public StepPredictor {
 public:
  explicit ModelPredictor(const model::Params<float>& params);
  void reset() override;
  int capacity() const override;
  int size() const override;
  Vec3 push(std::span<const double> patch) override;

 private:
  model::Decoder<float> decoder_;
  std::vector<float> patch_f_;
};

struct PropagateResult {
  Streamline streamline;
  StopReason reason = StopReason::low_norm;
  // Raw prediction norm at the very first step (diagnostic).
  double first_norm = 0.0;
};

// Grows one streamline from a seed: the window of the most recent capacity()
// vertices is encoded, the prediction at the last position is normalized and
// applied as s <- s + alpha * y. Stops on mask exit (exit vertex kept),
// grid exit, prediction norm below tau, or reaching max_length. When
// bidirectional, a second pass restarts from the reversed first pass.
PropagateResult propagate(StepPredictor& predictor, const Volume& sh_volume, const Vec3& seed,
                          const Volume& mask, const TrackConfig& config);

// Model-driven convenience wrapper.
PropagateResult propagate(const model::Params<float>& params, const Volume& sh_volume,
                          const Vec3& seed, const Volume& mask, const TrackConfig& config);

struct TrackResult {
  Tractogram tractogram;       // streamlines >= min_length, in seed order
  StopHistogram stop_reasons;  // over all seeds, including discarded ones
  size_t n_seeds = 0;
  size_t n_discarded = 0;
};

// Seeds come from seed_mask (or from `mask` when null); propagation is
// contained by `mask`. Separate masks support the usual seed-in-wm,
// track-in-margin setup.
TrackResult track(const model::Params<float>& params, const Volume& sh_volume,
                  const Volume& mask, const TrackConfig& config, int threads = 1,
                  const Volume* seed_mask = nullptr);

void write_stop_histogram(const std::string& path, const TrackResult& result);

}  // namespace tracto::tracker
