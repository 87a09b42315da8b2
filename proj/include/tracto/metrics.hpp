#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tracto/streamline.hpp"
#include "tracto/volume.hpp"

namespace tracto::metrics {

// Bitset over a reference grid; all masks in one scoring run share the grid.
class VoxelMask {
 public:
  VoxelMask() = default;
  VoxelMask(std::array<uint32_t, 3> dims, const Affine& affine);

  const std::array<uint32_t, 3>& dims() const { return dims_; }
  const Affine& affine() const { return affine_; }
  size_t voxel_count() const { return size_t(dims_[0]) * dims_[1] * dims_[2]; }

  void set(int x, int y, int z) { bits_[index(x, y, z)] = 1; }
  bool get(int x, int y, int z) const { return bits_[index(x, y, z)] != 0; }

  size_t count() const;
  size_t intersection_count(const VoxelMask& other) const;
  size_t difference_count(const VoxelMask& other) const;  // |this \ other|
  bool same_grid(const VoxelMask& other) const;

  static VoxelMask from_volume(const Volume& mask_volume);

 private:
  size_t index(int x, int y, int z) const {
    return size_t(x) + size_t(dims_[0]) * (size_t(y) + size_t(dims_[1]) * z);
  }
  std::array<uint32_t, 3> dims_{0, 0, 0};
  Affine affine_;
  Affine inv_affine_;
  std::vector<uint8_t> bits_;

  friend VoxelMask voxelize(const Tractogram&, const VoxelMask&, double);
  friend std::optional<VoxelIndex> mask_voxel_of(const VoxelMask&, const Vec3&);
};

std::optional<VoxelIndex> mask_voxel_of(const VoxelMask& grid, const Vec3& world);

// Marks every voxel visited by the tractogram: each segment is subdivided at
// spacing <= step (endpoints included) and each sample's containing voxel is
// set. Out-of-grid samples are skipped. `grid` supplies dims and affine.
VoxelMask voxelize(const Tractogram& tracts, const VoxelMask& grid, double step);

struct CoverageScores {
  double dice = 0.0;       // percent
  double overlap = 0.0;    // percent of |gt| covered
  double overreach = 0.0;  // percent: |rec \ gt| / |gt| (can exceed 100)
};

// Throws std::invalid_argument for mismatched grids or an empty ground truth.
CoverageScores coverage_scores(const VoxelMask& rec, const VoxelMask& gt);

// Endpoint regions of one ground-truth bundle.
struct RoiPair {
  uint32_t bundle = 0;
  VoxelMask head;
  VoxelMask tail;
};

enum class ConnectionClass : uint8_t { valid, invalid, none };

struct ConnectionReport {
  double vc = 0.0, ic = 0.0, nc = 0.0;  // percent of streamlines, sums to 100
  int vb = 0;                           // bundles with at least one valid connection
  int ib = 0;                           // distinct wrong ROI pairings observed
  size_t ambiguous = 0;                 // valid for >1 bundle; smallest index won
  std::vector<ConnectionClass> classes;          // per streamline
  std::vector<uint32_t> assigned_bundle;         // per streamline, kUnlabeled if not valid
  std::vector<size_t> valid_per_bundle;          // per bundle index
};

// Classifies every streamline by endpoint ROI membership: both endpoints in
// the two ROIs of one bundle -> valid; endpoints in ROIs that are not a
// ground-truth pair -> invalid; anything else -> no connection. Ambiguous
// valid matches resolve to the smallest bundle index.
ConnectionReport classify_connections(const Tractogram& tracts,
                                      const std::vector<RoiPair>& rois);

struct BundleScore {
  uint32_t bundle = 0;
  std::string name;
  CoverageScores coverage;
  size_t valid_streamlines = 0;
};

struct ScoreReport {
  CoverageScores whole;  // reconstructed tractogram vs whole ground truth
  double vc = 0.0, ic = 0.0, nc = 0.0;
  int vb = 0, ib = 0;
  size_t ambiguous = 0;
  size_t n_streamlines = 0;
  std::vector<BundleScore> bundles;
};

// Whole scoring pass: voxelized coverage plus connection classification.
// Per-bundle coverage voxelizes the streamlines assigned valid to the bundle
// against that bundle's ground-truth streamlines.
ScoreReport score_tractogram(const Tractogram& rec, const Tractogram& gt,
                             const std::vector<RoiPair>& rois,
                             const std::vector<std::string>& bundle_names,
                             const VoxelMask& grid, double voxelize_step);

void write_score_csv(const std::string& path, const ScoreReport& report);
std::string format_score_table(const ScoreReport& report);

}  // namespace tracto::metrics
