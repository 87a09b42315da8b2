#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tracto/kvfile.hpp"
#include "tracto/rng.hpp"
#include "tracto/sh.hpp"
#include "tracto/streamline.hpp"
#include "tracto/volume.hpp"

namespace tracto::phantom {

enum class CenterlineType { straight, arc, helix };

// Analytic bundle centerline. Arc/helix live in the plane spanned by axis_u
// and axis_v around `center`; the helix additionally climbs along
// axis_u x axis_v by `pitch` mm per turn.
struct Centerline {
  CenterlineType type = CenterlineType::straight;
  Vec3 start, end;          // straight
  Vec3 center;              // arc, helix
  Vec3 axis_u{1, 0, 0};
  Vec3 axis_v{0, 1, 0};
  double radius = 0.0;      // arc, helix (mm)
  double deg_from = 0.0;    // arc
  double deg_to = 90.0;     // arc
  double turns = 1.0;       // helix
  double pitch = 0.0;       // helix (mm per turn)

  Vec3 at(double s) const;  // s in [0, 1]
  double length() const;    // analytic arc length
};

struct BundleSpec {
  std::string name;
  Centerline centerline;
  double tube_radius = 1.0;    // mm
  int streamline_count = 1;
  uint32_t label = 0;

  void validate() const;  // throws InvalidSpecError
};

struct PhantomConfig {
  std::array<uint32_t, 3> dims{40, 40, 40};
  Vec3 voxel_size{1, 1, 1};
  std::vector<BundleSpec> bundles;
  // Tensor eigenvalues, mm^2/s, lambda1 >= lambda2 >= lambda3 > 0. The
  // simulator uses the axially symmetric tensor with radial diffusivity
  // (lambda2 + lambda3) / 2.
  std::array<double, 3> diffusivities{1.7e-3, 0.3e-3, 0.3e-3};
  double s0 = 1.0;
  std::optional<double> snr;  // Rician, sigma = s0 / snr; nullopt = noiseless
  sh::GradientScheme scheme;
  uint64_t rng_seed = 0;
  // Tracking-mask dilation in voxels. Propagation is allowed in this margin
  // around the fiber voxels, so off-bundle wandering shows up as overreach
  // instead of being clipped at the bundle boundary.
  int track_dilation = 3;

  Affine grid_affine() const;  // voxel centers at (i + 0.5) * voxel size
  void validate() const;

  static PhantomConfig from_kv(KvFile& kv);
};

// Default desk acquisition: n uniform directions at the given b-value plus
// one leading b0.
sh::GradientScheme default_scheme(int n_directions, double bvalue);

struct Phantom {
  PhantomConfig config;
  Tractogram gt_tractogram;          // labeled, 1 mm steps
  Volume dwi;                        // channels = scheme size
  Volume wm_mask;                    // voxels crossed by any ground-truth fiber
  Volume track_mask;                 // wm_mask dilated by config.track_dilation
  std::vector<Volume> bundle_masks;  // per bundle label
  std::vector<Volume> roi_heads;     // per bundle: dilated first-3mm region
  std::vector<Volume> roi_tails;     // per bundle: dilated last-3mm region
  Volume peaks;                      // 9 channels: up to 3 population axes
};

// Tube streamlines around the centerline: each streamline applies one
// uniform-disc lateral offset, constant along the curve, then is resampled
// to `step_mm` chords. Stored orientation is randomized per streamline, as
// in real reference tractograms. Curves shorter than 20 mm are rejected and
// redrawn; the centerline itself must be at least 20 mm or the spec is
// invalid. Curves longer than 200 mm are truncated.
std::vector<Streamline> generate_streamlines(const BundleSpec& spec, Rng& rng,
                                             double step_mm = 1.0);

// Full phantom build: ground-truth bundles, per-voxel multi-tensor DWI
// simulation with equal population fractions, masks, endpoint ROIs and the
// per-voxel population peak field.
Phantom build_phantom(const PhantomConfig& config, int threads = 1);

}  // namespace tracto::phantom
