#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "tracto/errors.hpp"
#include "tracto/rng.hpp"
#include "tracto/sh.hpp"

using namespace tracto;

namespace {

Vec3 random_direction(Rng& rng) {
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), r * std::sin(phi), z};
}

sh::GradientScheme uniform_scheme(int n_dwi, double b = 1000.0) {
  sh::GradientScheme scheme;
  scheme.directions.push_back({0, 0, 1});
  scheme.bvalues.push_back(0.0);
  for (const Vec3& d : sh::fibonacci_directions(n_dwi)) {
    scheme.directions.push_back(d);
    scheme.bvalues.push_back(b);
  }
  return scheme;
}

// Identity-affine volume: world coordinates equal voxel coordinates.
Volume unit_volume(std::array<uint32_t, 3> dims, uint32_t channels) {
  return Volume(dims, {1, 1, 1}, Affine::scaling({1, 1, 1}, {0, 0, 0}), channels);
}

}  // namespace

TEST_CASE("basis length law over even orders") {
  Rng rng(7);
  for (int l_max = 0; l_max <= 8; l_max += 2) {
    const auto row = sh::sh_basis(l_max, random_direction(rng));
    CHECK(int(row.size()) == (l_max + 1) * (l_max + 2) / 2);
  }
  CHECK(sh::sh_basis(6, {0, 0, 1}).size() == 28);
}

TEST_CASE("Y00 is the constant 1/(2 sqrt(pi))") {
  const double expected = 1.0 / (2.0 * std::sqrt(std::numbers::pi));
  CHECK(sh::sh_basis(0, {0, 0, 1})[0] == doctest::Approx(expected).epsilon(1e-12));
  Rng rng(11);
  for (int i = 0; i < 20; ++i)
    CHECK(sh::sh_basis(6, random_direction(rng))[0] ==
          doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("antipodal symmetry of the even-order basis") {
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    const Vec3 d = random_direction(rng);
    const auto a = sh::sh_basis(6, d);
    const auto b = sh::sh_basis(6, -d);
    for (size_t k = 0; k < a.size(); ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-10));
  }
}

TEST_CASE("basis rejects odd orders and zero directions") {
  CHECK_THROWS_AS(sh::sh_basis(5, {0, 0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(sh::sh_basis(-2, {0, 0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(sh::sh_basis(4, {0, 0, 0}), std::invalid_argument);
}

TEST_CASE("basis is orthonormal under spherical quadrature") {
  // Gauss-like check on a dense Fibonacci grid: B^T B * (4 pi / n) ~ I.
  const int n = 20000;
  const auto dirs = sh::fibonacci_directions(n);
  const int nc = sh::coef_count(4);
  std::vector<double> gram(nc * nc, 0.0);
  for (const Vec3& d : dirs) {
    const auto row = sh::sh_basis(4, d);
    for (int i = 0; i < nc; ++i)
      for (int j = 0; j < nc; ++j) gram[i * nc + j] += row[i] * row[j];
  }
  const double scale = 4.0 * std::numbers::pi / n;
  for (int i = 0; i < nc; ++i)
    for (int j = 0; j < nc; ++j)
      CHECK(gram[i * nc + j] * scale == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(0.01));
}

TEST_CASE("constant signal fits to a pure c00 of 2 sqrt(pi)") {
  const auto scheme = uniform_scheme(64);
  std::vector<double> signals(scheme.size(), 1.0);
  const auto c = sh::fit_sh(signals, scheme, 6, 0.0);
  CHECK(c[0] == doctest::Approx(2.0 * std::sqrt(std::numbers::pi)).epsilon(1e-10));
  for (size_t i = 1; i < c.size(); ++i) CHECK(std::abs(c[i]) < 1e-8);
}

TEST_CASE("fit idempotence: coefficients round-trip through signals") {
  const auto scheme = uniform_scheme(64);
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> truth(28);
    for (double& v : truth) v = rng.normal(0.0, 0.5);
    std::vector<double> signals(scheme.size());
    signals[0] = 1.0;  // b0
    for (size_t i = 1; i < scheme.size(); ++i) {
      const auto row = sh::sh_basis(6, scheme.directions[i]);
      double s = 0.0;
      for (int k = 0; k < 28; ++k) s += row[k] * truth[k];
      signals[i] = s;
    }
    const auto fitted = sh::fit_sh(signals, scheme, 6, 0.0);
    for (int k = 0; k < 28; ++k)
      CHECK(std::abs(fitted[k] - truth[k]) < 1e-8);
  }
}

TEST_CASE("fit residual at input directions is tiny for band-limited signals") {
  const auto scheme = uniform_scheme(45);
  Rng rng(19);
  std::vector<double> truth(28);
  for (double& v : truth) v = rng.normal(0.0, 0.5);
  std::vector<double> signals(scheme.size());
  signals[0] = 1.0;
  for (size_t i = 1; i < scheme.size(); ++i) {
    const auto row = sh::sh_basis(6, scheme.directions[i]);
    double s = 0.0;
    for (int k = 0; k < 28; ++k) s += row[k] * truth[k];
    signals[i] = s;
  }
  const sh::ShFitter fitter(scheme, 6, 0.0);
  const auto fitted = fitter.fit(signals);
  const auto predicted = fitter.predict(fitted);
  double sum_sq = 0.0;
  for (size_t i = 0; i < predicted.size(); ++i) {
    const double r = predicted[i] - signals[i + 1];
    sum_sq += r * r;
  }
  CHECK(std::sqrt(sum_sq / double(predicted.size())) <= 1e-6);
}

TEST_CASE("underdetermined fit with lambda 0 is singular") {
  const auto scheme = uniform_scheme(10);
  std::vector<double> signals(scheme.size(), 1.0);
  CHECK_THROWS_AS(sh::fit_sh(signals, scheme, 6, 0.0), FitSingularError);
  // With regularization the same system is solvable.
  CHECK_NOTHROW(sh::fit_sh(signals, scheme, 6, 0.006));
}

TEST_CASE("duplicate directions with lambda 0 are rank deficient") {
  sh::GradientScheme scheme;
  scheme.directions.push_back({0, 0, 1});
  scheme.bvalues.push_back(0.0);
  const Vec3 d = normalized(Vec3{1, 2, 3});
  for (int i = 0; i < 40; ++i) {
    scheme.directions.push_back(d);
    scheme.bvalues.push_back(1000.0);
  }
  std::vector<double> signals(scheme.size(), 1.0);
  CHECK_THROWS_AS(sh::fit_sh(signals, scheme, 6, 0.0), FitSingularError);
}

TEST_CASE("scheme validation") {
  sh::GradientScheme scheme;
  scheme.directions = {{0, 0, 1}, {1, 0, 0}};
  scheme.bvalues = {0.0, 1000.0};
  CHECK_NOTHROW(scheme.validate());
  scheme.bvalues = {1000.0, 1000.0};  // no b0
  CHECK_THROWS_AS(scheme.validate(), std::invalid_argument);
  scheme.bvalues = {0.0, 1000.0};
  scheme.directions[1] = {2, 0, 0};  // not unit
  CHECK_THROWS_AS(scheme.validate(), std::invalid_argument);
  scheme.bvalues = {0.0};  // length mismatch
  CHECK_THROWS_AS(scheme.validate(), std::invalid_argument);
}

TEST_CASE("trilinear sampling identities") {
  Volume vol = unit_volume({3, 3, 3}, 2);
  Rng rng(23);
  for (float& v : vol.data()) v = float(rng.normal(0.0, 1.0));

  SUBCASE("voxel centers reproduce stored values bit-exactly") {
    for (int z = 0; z < 3; ++z)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          const auto s = sh::sample_volume(vol, {double(x), double(y), double(z)});
          REQUIRE(s.has_value());
          CHECK((*s)[0] == double(vol.at(x, y, z, 0)));
          CHECK((*s)[1] == double(vol.at(x, y, z, 1)));
        }
  }

  SUBCASE("midpoints give the arithmetic mean") {
    const auto s = sh::sample_volume(vol, {0.5, 0.0, 0.0});
    REQUIRE(s.has_value());
    const double mean = 0.5 * double(vol.at(0, 0, 0, 0)) + 0.5 * double(vol.at(1, 0, 0, 0));
    CHECK((*s)[0] == doctest::Approx(mean).epsilon(1e-12));
  }

  SUBCASE("outside the lattice hull is out of bounds") {
    CHECK_FALSE(sh::sample_volume(vol, {-0.01, 0, 0}).has_value());
    CHECK_FALSE(sh::sample_volume(vol, {2.01, 0, 0}).has_value());
    CHECK(sh::sample_volume(vol, {2.0, 2.0, 2.0}).has_value());
  }
}

TEST_CASE("fractional sample between 0 and 1 valued voxels") {
  Volume vol = unit_volume({2, 1, 1}, 1);
  vol.at(0, 0, 0) = 0.0f;
  vol.at(1, 0, 0) = 1.0f;
  const auto s = sh::sample_volume(vol, {0.25, 0.0, 0.0});
  REQUIRE(s.has_value());
  CHECK((*s)[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("interpolation stays within the surrounding voxel range") {
  Volume vol = unit_volume({4, 4, 4}, 3);
  Rng rng(29);
  for (float& v : vol.data()) v = float(rng.normal(0.0, 2.0));
  for (int trial = 0; trial < 200; ++trial) {
    const Vec3 p{rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0)};
    const auto s = sh::sample_volume(vol, p);
    REQUIRE(s.has_value());
    const int x0 = std::min(int(p.x), 2), y0 = std::min(int(p.y), 2), z0 = std::min(int(p.z), 2);
    for (uint32_t c = 0; c < 3; ++c) {
      double lo = 1e30, hi = -1e30;
      for (int dz = 0; dz <= 1; ++dz)
        for (int dy = 0; dy <= 1; ++dy)
          for (int dx = 0; dx <= 1; ++dx) {
            lo = std::min(lo, double(vol.at(x0 + dx, y0 + dy, z0 + dz, c)));
            hi = std::max(hi, double(vol.at(x0 + dx, y0 + dy, z0 + dz, c)));
          }
      CHECK((*s)[c] >= lo - 1e-9);
      CHECK((*s)[c] <= hi + 1e-9);
    }
  }
}

TEST_CASE("neighborhood extraction") {
  SUBCASE("constant volume fills all 27 cells with the constant") {
    Volume vol = unit_volume({5, 5, 5}, 2);
    for (size_t i = 0; i < vol.data().size(); ++i) vol.data()[i] = (i % 2 == 0) ? 3.5f : -1.0f;
    const auto patch = sh::extract_neighborhood(vol, {2, 2, 2});
    REQUIRE(patch.has_value());
    REQUIRE(patch->size() == 27 * 2);
    for (int cell = 0; cell < 27; ++cell) {
      CHECK((*patch)[cell * 2 + 0] == doctest::Approx(3.5).epsilon(1e-12));
      CHECK((*patch)[cell * 2 + 1] == doctest::Approx(-1.0).epsilon(1e-12));
    }
  }

  SUBCASE("center cell equals sample_volume at the point") {
    Volume vol = unit_volume({5, 5, 5}, 3);
    Rng rng(31);
    for (float& v : vol.data()) v = float(rng.normal(0.0, 1.0));
    const Vec3 p{2.3, 1.7, 2.9};
    const auto patch = sh::extract_neighborhood(vol, p);
    const auto center = sh::sample_volume(vol, p);
    REQUIRE(patch.has_value());
    const size_t off = sh::center_cell_offset(3);
    for (uint32_t c = 0; c < 3; ++c) CHECK((*patch)[off + c] == (*center)[c]);
  }

  SUBCASE("linear ramp along x steps by one voxel of slope per cell") {
    Volume vol = unit_volume({7, 5, 5}, 1);
    const double slope = 0.75;
    for (uint32_t z = 0; z < 5; ++z)
      for (uint32_t y = 0; y < 5; ++y)
        for (uint32_t x = 0; x < 7; ++x) vol.at(int(x), int(y), int(z)) = float(slope * x);
    const auto patch = sh::extract_neighborhood(vol, {3.0, 2.0, 2.0});
    REQUIRE(patch.has_value());
    for (int iy = 0; iy < 3; ++iy)
      for (int iz = 0; iz < 3; ++iz) {
        const auto cell = [&](int ix) { return (*patch)[size_t((ix * 3 + iy) * 3 + iz)]; };
        CHECK(cell(1) - cell(0) == doctest::Approx(slope).epsilon(1e-9));
        CHECK(cell(2) - cell(1) == doctest::Approx(slope).epsilon(1e-9));
      }
  }

  SUBCASE("any out-of-bounds offset voids the patch") {
    Volume vol = unit_volume({5, 5, 5}, 1);
    CHECK_FALSE(sh::extract_neighborhood(vol, {0.5, 2, 2}).has_value());
    CHECK(sh::extract_neighborhood(vol, {1.0, 2, 2}).has_value());
  }
}

TEST_CASE("volume fit matches the single-voxel path") {
  const auto scheme = uniform_scheme(32);
  Volume dwi(std::array<uint32_t, 3>{2, 2, 1}, {1, 1, 1}, Affine::scaling({1, 1, 1}, {0, 0, 0}),
             uint32_t(scheme.size()));
  Rng rng(37);
  for (float& v : dwi.data()) v = float(std::abs(rng.normal(1.0, 0.1)));
  const Volume shvol = sh::fit_sh_volume(dwi, scheme, 6, 0.006, 2);
  CHECK(shvol.channels() == 28);
  std::vector<double> signals(scheme.size());
  for (uint32_t c = 0; c < scheme.size(); ++c) signals[c] = double(dwi.at(1, 0, 0, c));
  const auto expected = sh::fit_sh(signals, scheme, 6, 0.006);
  for (int k = 0; k < 28; ++k)
    CHECK(double(shvol.at(1, 0, 0, uint32_t(k))) == doctest::Approx(expected[k]).epsilon(1e-6));
}
