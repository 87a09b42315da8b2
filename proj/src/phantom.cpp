#include "tracto/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

#include "tracto/errors.hpp"
#include "tracto/parallel.hpp"

namespace tracto::phantom {

namespace {

constexpr double kCurveSample = 0.25;   // mm, dense sampling of analytic curves
constexpr double kMinLength = 20.0;     // mm
constexpr double kMaxLength = 200.0;    // mm
constexpr double kRoiSpan = 3.0;        // mm of centerline per endpoint region
constexpr int kRoiDilation = 2;         // voxels
constexpr double kClusterCos = 0.866;   // ~30 deg population separation
constexpr int kMaxPeaks = 3;

}  // namespace

Vec3 Centerline::at(double s) const {
  switch (type) {
    case CenterlineType::straight:
      return start + (end - start) * s;
    case CenterlineType::arc: {
      const Vec3 u = normalized(axis_u);
      Vec3 v = axis_v - u * dot(axis_u, axis_v) / dot(axis_u, axis_u);
      v = normalized(v);
      const double rad = std::numbers::pi / 180.0;
      const double theta = (deg_from + s * (deg_to - deg_from)) * rad;
      return center + (u * std::cos(theta) + v * std::sin(theta)) * radius;
    }
    case CenterlineType::helix: {
      const Vec3 u = normalized(axis_u);
      Vec3 v = axis_v - u * dot(axis_u, axis_v) / dot(axis_u, axis_u);
      v = normalized(v);
      const Vec3 w = normalized(cross(u, v));
      const double phi = 2.0 * std::numbers::pi * turns * s;
      return center + (u * std::cos(phi) + v * std::sin(phi)) * radius + w * (s * turns * pitch);
    }
  }
  return {};
}

double Centerline::length() const {
  switch (type) {
    case CenterlineType::straight:
      return distance(start, end);
    case CenterlineType::arc:
      return radius * std::abs(deg_to - deg_from) * std::numbers::pi / 180.0;
    case CenterlineType::helix: {
      const double circumference = 2.0 * std::numbers::pi * radius;
      return turns * std::sqrt(circumference * circumference + pitch * pitch);
    }
  }
  return 0.0;
}

void BundleSpec::validate() const {
  if (name.empty()) throw InvalidSpecError("bundle has no name");
  if (tube_radius < 0.0) throw InvalidSpecError("bundle '" + name + "': negative tube radius");
  if (streamline_count < 1)
    throw InvalidSpecError("bundle '" + name + "': streamline_count must be >= 1");
  if (centerline.type != CenterlineType::straight && centerline.radius <= 0.0)
    throw InvalidSpecError("bundle '" + name + "': radius must be > 0");
  if (centerline.length() < kMinLength)
    throw InvalidSpecError("bundle '" + name + "': centerline is shorter than 20 mm");
}

Affine PhantomConfig::grid_affine() const {
  return Affine::scaling(voxel_size, voxel_size * 0.5);
}

void PhantomConfig::validate() const {
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0)
    throw std::invalid_argument("phantom dims must be positive");
  if (voxel_size.x <= 0 || voxel_size.y <= 0 || voxel_size.z <= 0)
    throw std::invalid_argument("voxel size must be positive");
  if (bundles.empty()) throw std::invalid_argument("phantom needs at least one bundle");
  for (const auto& b : bundles) b.validate();
  for (size_t i = 0; i < bundles.size(); ++i)
    if (bundles[i].label != uint32_t(i))
      throw InvalidSpecError("bundle labels must be consecutive from 0");
  const auto& d = diffusivities;
  if (!(d[0] >= d[1] && d[1] >= d[2] && d[2] > 0.0))
    throw std::invalid_argument("diffusivities must satisfy l1 >= l2 >= l3 > 0");
  if (!(s0 > 0.0)) throw std::invalid_argument("s0 must be > 0");
  if (snr && !(*snr > 0.0)) throw std::invalid_argument("snr must be > 0");
  if (track_dilation < 0) throw std::invalid_argument("track_mask_dilation must be >= 0");
  scheme.validate();
}

sh::GradientScheme default_scheme(int n_directions, double bvalue) {
  sh::GradientScheme scheme;
  scheme.directions.push_back({0, 0, 1});  // b0 reference
  scheme.bvalues.push_back(0.0);
  for (const Vec3& d : sh::fibonacci_directions(n_directions)) {
    scheme.directions.push_back(d);
    scheme.bvalues.push_back(bvalue);
  }
  return scheme;
}

PhantomConfig PhantomConfig::from_kv(KvFile& kv) {
  PhantomConfig cfg;
  {
    const auto dims = kv.get_doubles("dims");
    if (dims.size() != 3) throw Error("phantom config: dims needs 3 integers");
    for (int i = 0; i < 3; ++i) cfg.dims[i] = uint32_t(dims[i]);
  }
  cfg.voxel_size = kv.get_vec3("voxel_size");
  cfg.s0 = kv.get_double("s0", 1.0);
  const double snr = kv.get_double("snr", 0.0);
  if (snr > 0.0) cfg.snr = snr;
  cfg.rng_seed = uint64_t(kv.get_int("seed", 0));
  cfg.track_dilation = int(kv.get_int("track_mask_dilation", 3));
  if (kv.has("diffusivities")) {
    const auto d = kv.get_doubles("diffusivities");
    if (d.size() != 3) throw Error("phantom config: diffusivities needs 3 values");
    cfg.diffusivities = {d[0], d[1], d[2]};
  }
  if (kv.has("scheme_file")) {
    cfg.scheme = sh::read_scheme(kv.get_string("scheme_file"));
  } else {
    cfg.scheme = default_scheme(int(kv.get_int("scheme_directions", 64)),
                                kv.get_double("scheme_bvalue", 1000.0));
  }

  for (uint32_t b = 0;; ++b) {
    const std::string p = "bundle." + std::to_string(b) + ".";
    if (!kv.has(p + "type")) break;
    BundleSpec spec;
    spec.label = b;
    spec.name = kv.get_string(p + "name", "bundle" + std::to_string(b));
    spec.tube_radius = kv.get_double(p + "tube_radius", 1.0);
    spec.streamline_count = int(kv.get_int(p + "count", 100));
    const std::string type = kv.get_string(p + "type");
    if (type == "straight") {
      spec.centerline.type = CenterlineType::straight;
      spec.centerline.start = kv.get_vec3(p + "start");
      spec.centerline.end = kv.get_vec3(p + "end");
    } else if (type == "arc") {
      spec.centerline.type = CenterlineType::arc;
      spec.centerline.center = kv.get_vec3(p + "center");
      spec.centerline.axis_u = kv.get_vec3(p + "axis_u");
      spec.centerline.axis_v = kv.get_vec3(p + "axis_v");
      spec.centerline.radius = kv.get_double(p + "radius");
      spec.centerline.deg_from = kv.get_double(p + "deg_from", 0.0);
      spec.centerline.deg_to = kv.get_double(p + "deg_to", 90.0);
    } else if (type == "helix") {
      spec.centerline.type = CenterlineType::helix;
      spec.centerline.center = kv.get_vec3(p + "center");
      spec.centerline.axis_u = kv.get_vec3(p + "axis_u");
      spec.centerline.axis_v = kv.get_vec3(p + "axis_v");
      spec.centerline.radius = kv.get_double(p + "radius");
      spec.centerline.turns = kv.get_double(p + "turns", 1.0);
      spec.centerline.pitch = kv.get_double(p + "pitch", 0.0);
    } else {
      throw InvalidSpecError("unknown centerline type '" + type + "'");
    }
    cfg.bundles.push_back(std::move(spec));
  }
  if (cfg.bundles.empty()) throw Error("phantom config: no bundle.N.type entries");
  return cfg;
}

namespace {

// Dense centerline samples plus a rotation-minimizing lateral frame, so a
// constant disc offset follows the curve without twisting through it.
struct CurveFrame {
  std::vector<Vec3> points;
  std::vector<Vec3> n1, n2;
};

CurveFrame sample_centerline(const Centerline& curve) {
  const double len = curve.length();
  const int n = std::max(2, int(std::ceil(len / kCurveSample)) + 1);
  CurveFrame frame;
  frame.points.resize(n);
  frame.n1.resize(n);
  frame.n2.resize(n);
  for (int i = 0; i < n; ++i) frame.points[i] = curve.at(double(i) / (n - 1));

  Vec3 tangent = normalized(frame.points[1] - frame.points[0]);
  Vec3 n1 = any_perpendicular(tangent);
  for (int i = 0; i < n; ++i) {
    if (i > 0) {
      const Vec3 next = i + 1 < n ? frame.points[i + 1] : frame.points[i];
      const Vec3 prev = frame.points[i - 1];
      tangent = normalized(next - prev);
      n1 = n1 - tangent * dot(tangent, n1);
      const double nn = norm(n1);
      n1 = nn > 1e-9 ? n1 / nn : any_perpendicular(tangent);
    }
    frame.n1[i] = n1;
    frame.n2[i] = normalized(cross(tangent, n1));
  }
  return frame;
}

}  // namespace

std::vector<Streamline> generate_streamlines(const BundleSpec& spec, Rng& rng, double step_mm) {
  spec.validate();
  const CurveFrame frame = sample_centerline(spec.centerline);
  const size_t max_vertices = size_t(std::floor(kMaxLength / step_mm)) + 1;

  std::vector<Streamline> out;
  out.reserve(spec.streamline_count);
  for (int k = 0; k < spec.streamline_count; ++k) {
    Streamline final_line;
    for (int attempt = 0; attempt < 100; ++attempt) {
      // One uniform disc offset per streamline, constant along the curve.
      const double r = spec.tube_radius * std::sqrt(rng.uniform01());
      const double phi = rng.uniform01() * 2.0 * std::numbers::pi;
      const double a = r * std::cos(phi);
      const double b = r * std::sin(phi);

      Streamline raw;
      raw.points.reserve(frame.points.size());
      for (size_t i = 0; i < frame.points.size(); ++i)
        raw.points.push_back(frame.points[i] + frame.n1[i] * a + frame.n2[i] * b);
      Streamline line = resample(raw, step_mm);
      if (line.points.size() > max_vertices) line.points.resize(max_vertices);
      if (line.length() >= kMinLength) {
        final_line = std::move(line);
        break;
      }
    }
    if (final_line.points.empty())
      throw InvalidSpecError("bundle '" + spec.name + "': cannot draw a 20 mm streamline");
    // Reference tractograms carry no canonical orientation; store either.
    if (rng.coin()) std::reverse(final_line.points.begin(), final_line.points.end());
    final_line.label = spec.label;
    out.push_back(std::move(final_line));
  }
  return out;
}

namespace {

struct Population {
  Vec3 axis_sum;  // sign-aligned tangent accumulator
  size_t hits = 0;
};

// Greedy axis clustering of the tangents seen in one voxel.
void add_tangent(std::vector<Population>& pops, const Vec3& tangent) {
  for (auto& pop : pops) {
    const Vec3 mean = normalized(pop.axis_sum);
    const double c = dot(mean, tangent);
    if (std::abs(c) >= kClusterCos) {
      pop.axis_sum += (c >= 0.0 ? tangent : -tangent);
      pop.hits += 1;
      return;
    }
  }
  pops.push_back({tangent, 1});
}

void dilate(Volume& mask, int iterations) {
  const auto& dims = mask.dims();
  for (int it = 0; it < iterations; ++it) {
    Volume next = mask;
    for (uint32_t z = 0; z < dims[2]; ++z)
      for (uint32_t y = 0; y < dims[1]; ++y)
        for (uint32_t x = 0; x < dims[0]; ++x) {
          if (mask.at(int(x), int(y), int(z)) == 0.0f) continue;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const VoxelIndex v{int(x) + dx, int(y) + dy, int(z) + dz};
                if (mask.contains_voxel(v)) next.at(v.x, v.y, v.z) = 1.0f;
              }
        }
    mask = std::move(next);
  }
}

Volume roi_from_span(const Centerline& curve, double s_lo, double s_hi, const Volume& like) {
  Volume roi(like.dims(), like.voxel_size(), like.affine(), 1);
  const int n = std::max(2, int(std::ceil(curve.length() * std::abs(s_hi - s_lo) / 0.1)) + 1);
  for (int i = 0; i < n; ++i) {
    const double s = s_lo + (s_hi - s_lo) * double(i) / (n - 1);
    if (const auto v = roi.voxel_of(curve.at(s))) roi.at(v->x, v->y, v->z) = 1.0f;
  }
  dilate(roi, kRoiDilation);
  return roi;
}

}  // namespace

Phantom build_phantom(const PhantomConfig& config, int threads) {
  config.validate();
  Phantom phantom;
  phantom.config = config;

  const Affine affine = config.grid_affine();
  const Volume grid_like(config.dims, config.voxel_size, affine, 1);

  for (const auto& spec : config.bundles) {
    Rng bundle_rng = Rng::substream(config.rng_seed, 0x100u + spec.label);
    auto lines = generate_streamlines(spec, bundle_rng);
    for (auto& line : lines) phantom.gt_tractogram.streamlines.push_back(std::move(line));
  }

  // Tangent collection: walk every ground-truth segment at fine spacing and
  // cluster the axes seen per voxel into fiber populations.
  const size_t nvox = grid_like.voxel_count();
  std::vector<std::vector<Population>> populations(nvox);
  phantom.wm_mask = grid_like;
  phantom.bundle_masks.assign(config.bundles.size(), grid_like);

  const auto flat_index = [&](const VoxelIndex& v) {
    return size_t(v.x) + size_t(config.dims[0]) * (size_t(v.y) + size_t(config.dims[1]) * v.z);
  };
  for (const auto& line : phantom.gt_tractogram.streamlines) {
    for (size_t i = 1; i < line.points.size(); ++i) {
      const Vec3& a = line.points[i - 1];
      const Vec3& b = line.points[i];
      const double len = distance(a, b);
      if (len == 0.0) continue;
      const Vec3 tangent = (b - a) / len;
      const int n = std::max(1, int(std::ceil(len / kCurveSample)));
      for (int k = 0; k <= n; ++k) {
        const Vec3 p = a + (b - a) * (double(k) / n);
        const auto v = phantom.wm_mask.voxel_of(p);
        if (!v) continue;
        phantom.wm_mask.at(v->x, v->y, v->z) = 1.0f;
        phantom.bundle_masks[line.label].at(v->x, v->y, v->z) = 1.0f;
        add_tangent(populations[flat_index(*v)], tangent);
      }
    }
  }

  // Peak field: strongest population axes per voxel, most-visited first.
  phantom.peaks = Volume(config.dims, config.voxel_size, affine, 3 * kMaxPeaks);
  for (size_t v = 0; v < nvox; ++v) {
    auto pops = populations[v];
    std::stable_sort(pops.begin(), pops.end(),
                     [](const Population& a, const Population& b) { return a.hits > b.hits; });
    const int n = std::min<int>(kMaxPeaks, int(pops.size()));
    for (int k = 0; k < n; ++k) {
      const Vec3 axis = normalized(pops[k].axis_sum);
      phantom.peaks.data()[v * 3 * kMaxPeaks + 3 * k + 0] = float(axis.x);
      phantom.peaks.data()[v * 3 * kMaxPeaks + 3 * k + 1] = float(axis.y);
      phantom.peaks.data()[v * 3 * kMaxPeaks + 3 * k + 2] = float(axis.z);
    }
  }

  // Multi-tensor signal with equal volume fractions; fiber-free voxels decay
  // isotropically at the mean diffusivity.
  const auto& dv = config.diffusivities;
  const double lambda_par = dv[0];
  const double lambda_perp = (dv[1] + dv[2]) / 2.0;
  const double mean_diff = (dv[0] + dv[1] + dv[2]) / 3.0;
  const size_t nsig = config.scheme.size();
  phantom.dwi = Volume(config.dims, config.voxel_size, affine, uint32_t(nsig));
  const double sigma = config.snr ? config.s0 / *config.snr : 0.0;

  parallel_for(nvox, threads, [&](size_t v) {
    std::vector<Vec3> axes;
    for (const auto& pop : populations[v]) axes.push_back(normalized(pop.axis_sum));
    Rng noise = Rng::substream(config.rng_seed ^ 0x9031CE5EULL, v);
    for (size_t s = 0; s < nsig; ++s) {
      double signal;
      const double b = config.scheme.bvalues[s];
      if (b == 0.0) {
        signal = config.s0;
      } else if (axes.empty()) {
        signal = config.s0 * std::exp(-b * mean_diff);
      } else {
        double acc = 0.0;
        for (const Vec3& axis : axes) {
          const double c = dot(config.scheme.directions[s], axis);
          acc += std::exp(-b * (lambda_par * c * c + lambda_perp * (1.0 - c * c)));
        }
        signal = config.s0 * acc / double(axes.size());
      }
      if (sigma > 0.0) {
        const double re = signal + sigma * noise.normal();
        const double im = sigma * noise.normal();
        signal = std::sqrt(re * re + im * im);
      }
      phantom.dwi.data()[v * nsig + s] = float(signal);
    }
  });

  for (const auto& spec : config.bundles) {
    const double len = spec.centerline.length();
    const double span = std::min(1.0, kRoiSpan / len);
    phantom.roi_heads.push_back(roi_from_span(spec.centerline, 0.0, span, grid_like));
    phantom.roi_tails.push_back(roi_from_span(spec.centerline, 1.0 - span, 1.0, grid_like));
  }

  phantom.track_mask = phantom.wm_mask;
  dilate(phantom.track_mask, config.track_dilation);
  return phantom;
}

}  // namespace tracto::phantom
