#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tracto/vec3.hpp"
#include "tracto/volume.hpp"

namespace tracto::sh {

// Real, antipodally symmetric spherical harmonics, even orders only, ordered
// by (l, m) with l in {0, 2, ..., l_max} and m from -l to l. Negative m maps
// to the sin(|m| phi) harmonic, positive m to cos(m phi), both scaled by
// sqrt(2); the associated Legendre terms carry the Condon-Shortley phase.
// Y_00 is the constant 1/(2 sqrt(pi)).

constexpr int kDefaultLmax = 6;

inline int coef_count(int l_max) { return (l_max + 1) * (l_max + 2) / 2; }

// Basis row at one direction; length coef_count(l_max).
// Throws std::invalid_argument for odd/negative l_max or a zero direction.
std::vector<double> sh_basis(int l_max, const Vec3& direction);

struct GradientScheme {
  std::vector<Vec3> directions;  // unit vectors
  std::vector<double> bvalues;   // s/mm^2, same length; 0 marks b0 volumes

  size_t size() const { return directions.size(); }
  bool is_b0(size_t i) const { return bvalues[i] == 0.0; }
  size_t b0_count() const;

  // Throws std::invalid_argument when lengths mismatch, a direction is not
  // unit within 1e-6, or no b0 entry exists.
  void validate() const;
};

// Text scheme file: one "gx gy gz b" line per volume.
GradientScheme read_scheme(const std::string& path);
void write_scheme(const std::string& path, const GradientScheme& scheme);

// Deterministic near-uniform unit directions (spherical Fibonacci spiral).
std::vector<Vec3> fibonacci_directions(int n);

// Laplace-Beltrami regularized least squares fit of one voxel's signals.
// Signals are divided by the mean b0 before fitting; the returned
// coefficients minimize |B c - s|^2 + lambda |L c|^2 with L = diag(l(l+1)).
// Throws FitSingularError when the system is underdetermined or rank
// deficient with lambda = 0.
std::vector<double> fit_sh(std::span<const double> signals, const GradientScheme& scheme,
                           int l_max, double lambda_reg);

// Precomputed design for fitting many voxels against one scheme.
class ShFitter {
 public:
  ShFitter(const GradientScheme& scheme, int l_max, double lambda_reg);

  std::vector<double> fit(std::span<const double> signals) const;
  int l_max() const { return l_max_; }
  int coef_count() const { return n_coef_; }

  // Re-evaluate fitted coefficients at the scheme's non-b0 directions
  // (b0-normalized signal units); used for residual checks.
  std::vector<double> predict(std::span<const double> coefficients) const;

 private:
  int l_max_;
  int n_coef_;
  size_t n_signals_;
  std::vector<size_t> dwi_rows_;   // indices of non-b0 entries
  std::vector<size_t> b0_rows_;    // indices of b0 entries
  std::vector<double> basis_;      // n_dwi x n_coef, row-major
  std::vector<double> solve_mat_;  // n_coef x n_dwi, maps normalized signals to coefficients
};

// Fit every voxel of a raw DWI volume (channels = scheme entries) to SH
// coefficients; output volume has coef_count(l_max) channels.
Volume fit_sh_volume(const Volume& dwi, const GradientScheme& scheme, int l_max,
                     double lambda_reg, int threads = 1);

// Channel-wise trilinear sample at a world-mm point; nullopt when the point
// leaves the lattice hull (trackers treat that as a stop signal).
std::optional<std::vector<double>> sample_volume(const Volume& volume, const Vec3& point_world);

constexpr int kNeighborhood = 27;  // 3x3x3 cells

// 3x3x3 neighborhood of trilinear samples, offsets of one voxel size along
// each world axis. Layout: ((ix*3 + iy)*3 + iz)*channels + c with each index
// offset in {-1,0,+1} mapped to {0,1,2}; cell (1,1,1) equals sample_volume at
// the point itself. nullopt when any of the 27 samples is out of bounds.
std::optional<std::vector<double>> extract_neighborhood(const Volume& volume,
                                                        const Vec3& point_world);

inline size_t center_cell_offset(uint32_t channels) { return size_t(13) * channels; }

}  // namespace tracto::sh
