#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tracto/vec3.hpp"
#include "tracto/volume.hpp"

namespace tracto {

constexpr uint32_t kUnlabeled = 0xFFFFFFFFu;

struct Streamline {
  std::vector<Vec3> points;  // world mm, ordered
  uint32_t label = kUnlabeled;

  double length() const;
};

struct Tractogram {
  std::vector<Streamline> streamlines;

  size_t size() const { return streamlines.size(); }
  bool empty() const { return streamlines.empty(); }
};

// Fixed-step resampling: starting from the first vertex, each new vertex is
// placed on the input polyline at Euclidean distance exactly `alpha` from the
// previous output vertex (chord stepping). The unreachable tail shorter than
// one step is dropped, so consecutive output vertices are exactly alpha
// apart, which is what makes training targets unit vectors.
Streamline resample(const Streamline& s, double alpha);

// One padded training sequence. Positions 0..valid-1 carry features and unit
// targets; everything after is exactly zero with valid_mask false.
struct TrainSequence {
  int T = 0;                 // padded length (block size)
  int feature_size = 0;      // 27 * channels
  std::vector<float> features;  // T x feature_size
  std::vector<float> targets;   // T x 3
  std::vector<uint8_t> valid_mask;
  uint32_t bundle_label = kUnlabeled;

  int valid_count() const;
};

// Builds the sequence for one alpha-resampled streamline: features[t] is the
// 3x3x3 neighborhood at vertex t, targets[t] the unit step to vertex t+1.
// The final vertex has no successor and is left out of the mask; vertices
// beyond T+1 are truncated. Returns nullopt when any needed neighborhood is
// out of bounds (callers skip the streamline).
std::optional<TrainSequence> make_train_sequence(const Streamline& s, const Volume& volume,
                                                 int T, double alpha);

// TRX1 tract file, little-endian:
//   magic 'TRX1', u32 version=1, u64 streamline count, then per streamline
//   u32 bundle label (0xFFFFFFFF = unlabeled), u32 vertex count n,
//   3n f32 world-mm coordinates (x,y,z per vertex).
void write_tracts(const std::string& path, const Tractogram& tracts);
Tractogram read_tracts(const std::string& path);

}  // namespace tracto
