#include "tracto/sh.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "tracto/errors.hpp"
#include "tracto/parallel.hpp"

namespace tracto::sh {

namespace {

// Associated Legendre P_l^m(x) for m >= 0, Condon-Shortley phase included.
// Standard three-term recurrence; stable for the small l used here.
double assoc_legendre(int l, int m, double x) {
  double pmm = 1.0;
  if (m > 0) {
    const double somx2 = std::sqrt((1.0 - x) * (1.0 + x));
    double fact = 1.0;
    for (int i = 0; i < m; ++i) {
      pmm *= -fact * somx2;
      fact += 2.0;
    }
  }
  if (l == m) return pmm;
  double pmmp1 = x * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return pmmp1;
  double pll = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pll = ((2.0 * ll - 1.0) * x * pmmp1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = pmmp1;
    pmmp1 = pll;
  }
  return pll;
}

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

double normalization(int l, int m) {
  return std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi) *
                   factorial(l - m) / factorial(l + m));
}

// Cholesky factorization of a symmetric positive definite matrix (row-major
// n x n), in place into the lower triangle. Throws FitSingularError when a
// pivot degenerates.
void cholesky(std::vector<double>& a, int n) {
  double scale = 0.0;
  for (int i = 0; i < n; ++i) scale = std::max(scale, std::abs(a[size_t(i) * n + i]));
  const double tiny = std::max(scale, 1.0) * 1e-12;
  for (int j = 0; j < n; ++j) {
    double d = a[size_t(j) * n + j];
    for (int k = 0; k < j; ++k) d -= a[size_t(j) * n + k] * a[size_t(j) * n + k];
    if (!(d > tiny)) throw FitSingularError("SH fit is singular (rank-deficient system)");
    const double ljj = std::sqrt(d);
    a[size_t(j) * n + j] = ljj;
    for (int i = j + 1; i < n; ++i) {
      double s = a[size_t(i) * n + j];
      for (int k = 0; k < j; ++k) s -= a[size_t(i) * n + k] * a[size_t(j) * n + k];
      a[size_t(i) * n + j] = s / ljj;
    }
  }
}

void cholesky_solve(const std::vector<double>& l, int n, std::vector<double>& x) {
  for (int i = 0; i < n; ++i) {
    double s = x[i];
    for (int k = 0; k < i; ++k) s -= l[size_t(i) * n + k] * x[k];
    x[i] = s / l[size_t(i) * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = x[i];
    for (int k = i + 1; k < n; ++k) s -= l[size_t(k) * n + i] * x[k];
    x[i] = s / l[size_t(i) * n + i];
  }
}

}  // namespace

std::vector<double> sh_basis(int l_max, const Vec3& direction) {
  if (l_max < 0 || l_max % 2 != 0 || l_max > 8)
    throw std::invalid_argument("l_max must be even and in [0, 8]");
  const double n = norm(direction);
  if (n < 1e-12) throw std::invalid_argument("sh_basis: zero-norm direction");
  const Vec3 d = direction / n;

  const double cos_theta = std::clamp(d.z, -1.0, 1.0);
  const double phi = std::atan2(d.y, d.x);

  std::vector<double> row;
  row.reserve(coef_count(l_max));
  const double sqrt2 = std::numbers::sqrt2;
  for (int l = 0; l <= l_max; l += 2) {
    for (int m = -l; m <= l; ++m) {
      const int am = std::abs(m);
      const double p = assoc_legendre(l, am, cos_theta);
      const double nlm = normalization(l, am);
      if (m < 0)
        row.push_back(sqrt2 * nlm * p * std::sin(am * phi));
      else if (m == 0)
        row.push_back(nlm * p);
      else
        row.push_back(sqrt2 * nlm * p * std::cos(am * phi));
    }
  }
  return row;
}

size_t GradientScheme::b0_count() const {
  size_t n = 0;
  for (double b : bvalues) n += (b == 0.0);
  return n;
}

void GradientScheme::validate() const {
  if (directions.size() != bvalues.size())
    throw std::invalid_argument("gradient scheme: direction/bvalue length mismatch");
  if (directions.empty()) throw std::invalid_argument("gradient scheme is empty");
  for (size_t i = 0; i < directions.size(); ++i) {
    if (bvalues[i] < 0.0) throw std::invalid_argument("gradient scheme: negative b-value");
    if (is_b0(i)) continue;
    if (std::abs(norm(directions[i]) - 1.0) > 1e-6)
      throw std::invalid_argument("gradient scheme: direction " + std::to_string(i) +
                                  " is not unit length");
  }
  if (b0_count() == 0) throw std::invalid_argument("gradient scheme needs at least one b0");
}

GradientScheme read_scheme(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open scheme file '" + path + "'");
  GradientScheme scheme;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    double x, y, z, b;
    if (!(ls >> x)) continue;  // blank line
    if (!(ls >> y >> z >> b))
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'gx gy gz b'");
    scheme.directions.push_back({x, y, z});
    scheme.bvalues.push_back(b);
  }
  scheme.validate();
  return scheme;
}

void write_scheme(const std::string& path, const GradientScheme& scheme) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open scheme file '" + path + "' for writing");
  out.precision(17);
  for (size_t i = 0; i < scheme.size(); ++i) {
    const Vec3& d = scheme.directions[i];
    out << d.x << ' ' << d.y << ' ' << d.z << ' ' << scheme.bvalues[i] << '\n';
  }
  if (!out) throw Error("write to '" + path + "' failed");
}

std::vector<Vec3> fibonacci_directions(int n) {
  if (n < 1) throw std::invalid_argument("direction count must be positive");
  std::vector<Vec3> dirs;
  dirs.reserve(n);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * i;
    dirs.push_back(normalized(Vec3{r * std::cos(phi), r * std::sin(phi), z}));
  }
  return dirs;
}

ShFitter::ShFitter(const GradientScheme& scheme, int l_max, double lambda_reg)
    : l_max_(l_max), n_coef_(sh::coef_count(l_max)), n_signals_(scheme.size()) {
  scheme.validate();
  if (lambda_reg < 0.0) throw std::invalid_argument("lambda_reg must be >= 0");
  for (size_t i = 0; i < scheme.size(); ++i)
    (scheme.is_b0(i) ? b0_rows_ : dwi_rows_).push_back(i);
  const size_t n_dwi = dwi_rows_.size();
  if (lambda_reg == 0.0 && n_dwi < size_t(n_coef_))
    throw FitSingularError("SH fit is singular: " + std::to_string(n_dwi) +
                           " directions for " + std::to_string(n_coef_) +
                           " coefficients with lambda = 0");

  basis_.resize(n_dwi * n_coef_);
  for (size_t r = 0; r < n_dwi; ++r) {
    const auto row = sh_basis(l_max, scheme.directions[dwi_rows_[r]]);
    std::copy(row.begin(), row.end(), basis_.begin() + r * n_coef_);
  }

  // Normal equations: N = B^T B + lambda * L^2, L = diag(l(l+1)).
  const int n = n_coef_;
  std::vector<double> normal(size_t(n) * n, 0.0);
  for (size_t r = 0; r < n_dwi; ++r)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j)
        normal[size_t(i) * n + j] += basis_[r * n + i] * basis_[r * n + j];
  {
    int idx = 0;
    for (int l = 0; l <= l_max; l += 2)
      for (int m = -l; m <= l; ++m, ++idx) {
        const double lb = double(l) * (l + 1);
        normal[size_t(idx) * n + idx] += lambda_reg * lb * lb;
      }
  }
  cholesky(normal, n);

  // solve_mat = N^{-1} B^T, so fitting is one matrix-vector product per voxel.
  solve_mat_.resize(size_t(n) * n_dwi);
  std::vector<double> col(n);
  for (size_t r = 0; r < n_dwi; ++r) {
    for (int i = 0; i < n; ++i) col[i] = basis_[r * n + i];
    cholesky_solve(normal, n, col);
    for (int i = 0; i < n; ++i) solve_mat_[size_t(i) * n_dwi + r] = col[i];
  }
}

std::vector<double> ShFitter::fit(std::span<const double> signals) const {
  if (signals.size() != n_signals_)
    throw std::invalid_argument("fit_sh: signal count does not match scheme");
  double b0 = 0.0;
  for (size_t i : b0_rows_) b0 += signals[i];
  b0 /= double(b0_rows_.size());
  if (!(b0 > 0.0)) throw std::invalid_argument("fit_sh: non-positive mean b0 signal");

  const size_t n_dwi = dwi_rows_.size();
  std::vector<double> c(n_coef_, 0.0);
  for (int i = 0; i < n_coef_; ++i) {
    double acc = 0.0;
    const double* row = &solve_mat_[size_t(i) * n_dwi];
    for (size_t r = 0; r < n_dwi; ++r) acc += row[r] * (signals[dwi_rows_[r]] / b0);
    c[i] = acc;
  }
  return c;
}

std::vector<double> ShFitter::predict(std::span<const double> coefficients) const {
  if (coefficients.size() != size_t(n_coef_))
    throw std::invalid_argument("predict: coefficient count mismatch");
  const size_t n_dwi = dwi_rows_.size();
  std::vector<double> s(n_dwi, 0.0);
  for (size_t r = 0; r < n_dwi; ++r) {
    double acc = 0.0;
    for (int i = 0; i < n_coef_; ++i) acc += basis_[r * n_coef_ + i] * coefficients[i];
    s[r] = acc;
  }
  return s;
}

std::vector<double> fit_sh(std::span<const double> signals, const GradientScheme& scheme,
                           int l_max, double lambda_reg) {
  return ShFitter(scheme, l_max, lambda_reg).fit(signals);
}

Volume fit_sh_volume(const Volume& dwi, const GradientScheme& scheme, int l_max,
                     double lambda_reg, int threads) {
  if (dwi.channels() != scheme.size())
    throw std::invalid_argument("DWI channel count does not match gradient scheme");
  const ShFitter fitter(scheme, l_max, lambda_reg);
  Volume out(dwi.dims(), dwi.voxel_size(), dwi.affine(), uint32_t(fitter.coef_count()));
  const size_t nvox = dwi.voxel_count();
  const uint32_t nsig = dwi.channels();
  const int ncoef = fitter.coef_count();
  parallel_for(nvox, threads, [&](size_t v) {
    std::vector<double> signals(nsig);
    for (uint32_t c = 0; c < nsig; ++c) signals[c] = double(dwi.data()[v * nsig + c]);
    const auto coefs = fitter.fit(signals);
    for (int c = 0; c < ncoef; ++c) out.data()[v * ncoef + c] = float(coefs[c]);
  });
  return out;
}

std::optional<std::vector<double>> sample_volume(const Volume& volume, const Vec3& point_world) {
  const Vec3 p = volume.world_to_voxel(point_world);
  if (!volume.in_sampling_bounds(p)) return std::nullopt;

  const auto& dims = volume.dims();
  const auto cell = [&](double coord, uint32_t n) {
    int i0 = int(std::floor(coord));
    if (i0 > int(n) - 2) i0 = int(n) - 2;  // top edge: use the last cell with frac 1
    if (i0 < 0) i0 = 0;                    // n == 1 axes collapse to frac 0
    double f = coord - double(i0);
    if (n == 1) f = 0.0;
    return std::pair<int, double>{i0, f};
  };
  const auto [x0, fx] = cell(p.x, dims[0]);
  const auto [y0, fy] = cell(p.y, dims[1]);
  const auto [z0, fz] = cell(p.z, dims[2]);
  const int x1 = dims[0] == 1 ? x0 : x0 + 1;
  const int y1 = dims[1] == 1 ? y0 : y0 + 1;
  const int z1 = dims[2] == 1 ? z0 : z0 + 1;

  const double wx[2] = {1.0 - fx, fx};
  const double wy[2] = {1.0 - fy, fy};
  const double wz[2] = {1.0 - fz, fz};
  const int xs[2] = {x0, x1}, ys[2] = {y0, y1}, zs[2] = {z0, z1};

  const uint32_t nc = volume.channels();
  std::vector<double> out(nc, 0.0);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2; ++c) {
        const double w = wx[a] * wy[b] * wz[c];
        if (w == 0.0) continue;
        const size_t base = volume.index(xs[a], ys[b], zs[c]);
        for (uint32_t ch = 0; ch < nc; ++ch) out[ch] += w * double(volume.data()[base + ch]);
      }
  return out;
}

std::optional<std::vector<double>> extract_neighborhood(const Volume& volume,
                                                        const Vec3& point_world) {
  const uint32_t nc = volume.channels();
  const Vec3 vs = volume.voxel_size();
  std::vector<double> patch(size_t(kNeighborhood) * nc);
  for (int ix = 0; ix < 3; ++ix)
    for (int iy = 0; iy < 3; ++iy)
      for (int iz = 0; iz < 3; ++iz) {
        const Vec3 offset{(ix - 1) * vs.x, (iy - 1) * vs.y, (iz - 1) * vs.z};
        const auto sample = sample_volume(volume, point_world + offset);
        if (!sample) return std::nullopt;
        const size_t base = (size_t(ix) * 3 + iy) * 3 + iz;
        std::copy(sample->begin(), sample->end(), patch.begin() + base * nc);
      }
  return patch;
}

}  // namespace tracto::sh
