#include "tracto/streamline.hpp"

#include <cmath>
#include <stdexcept>

#include "tracto/binio.hpp"
#include "tracto/sh.hpp"

namespace tracto {

double Streamline::length() const {
  double len = 0.0;
  for (size_t i = 1; i < points.size(); ++i) len += distance(points[i - 1], points[i]);
  return len;
}

namespace {

// First parameter s in (s_from, 1] with |a + s*(b-a) - p| = alpha, or nullopt.
std::optional<double> chord_hit(const Vec3& a, const Vec3& b, const Vec3& p, double alpha,
                                double s_from) {
  const Vec3 d = b - a;
  const Vec3 w = a - p;
  const double qa = dot(d, d);
  if (qa == 0.0) return std::nullopt;
  const double qb = 2.0 * dot(w, d);
  const double qc = dot(w, w) - alpha * alpha;
  const double disc = qb * qb - 4.0 * qa * qc;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  // Larger root: distance from p grows through it, so it is the exit point of
  // the alpha-sphere, which is the next resampled vertex along the walk.
  const double s = (-qb + sq) / (2.0 * qa);
  if (s <= s_from + 1e-12 || s > 1.0 + 1e-12) return std::nullopt;
  return std::min(s, 1.0);
}

}  // namespace

Streamline resample(const Streamline& s, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("resample: alpha must be positive");
  if (s.points.size() < 2) throw std::invalid_argument("resample: streamline needs >= 2 vertices");
  if (s.length() <= 0.0) throw std::invalid_argument("resample: zero-length streamline");

  Streamline out;
  out.label = s.label;
  out.points.push_back(s.points.front());

  size_t seg = 0;        // current segment index
  double seg_s = 0.0;    // parameter of the current point within segment `seg`
  Vec3 cur = s.points.front();
  while (true) {
    bool placed = false;
    for (size_t i = seg; i + 1 < s.points.size(); ++i) {
      const double s_from = (i == seg) ? seg_s : 0.0;
      const auto hit = chord_hit(s.points[i], s.points[i + 1], cur, alpha, s_from);
      if (hit) {
        cur = s.points[i] + (s.points[i + 1] - s.points[i]) * *hit;
        out.points.push_back(cur);
        seg = i;
        seg_s = *hit;
        placed = true;
        break;
      }
    }
    if (!placed) break;
  }
  return out;
}

int TrainSequence::valid_count() const {
  int n = 0;
  for (uint8_t v : valid_mask) n += (v != 0);
  return n;
}

std::optional<TrainSequence> make_train_sequence(const Streamline& s, const Volume& volume,
                                                 int T, double alpha) {
  if (T < 1) throw std::invalid_argument("make_train_sequence: T must be >= 1");
  if (alpha <= 0.0) throw std::invalid_argument("make_train_sequence: alpha must be positive");
  if (s.points.size() < 2)
    throw std::invalid_argument("make_train_sequence: streamline needs >= 2 vertices");

  const int feature_size = sh::kNeighborhood * int(volume.channels());
  TrainSequence seq;
  seq.T = T;
  seq.feature_size = feature_size;
  seq.features.assign(size_t(T) * feature_size, 0.0f);
  seq.targets.assign(size_t(T) * 3, 0.0f);
  seq.valid_mask.assign(T, 0);
  seq.bundle_label = s.label;

  const int valid = std::min<int>(int(s.points.size()) - 1, T);
  for (int t = 0; t < valid; ++t) {
    const auto patch = sh::extract_neighborhood(volume, s.points[t]);
    if (!patch) return std::nullopt;
    for (int k = 0; k < feature_size; ++k)
      seq.features[size_t(t) * feature_size + k] = float((*patch)[k]);
    const Vec3 step = (s.points[t + 1] - s.points[t]) / alpha;
    seq.targets[size_t(t) * 3 + 0] = float(step.x);
    seq.targets[size_t(t) * 3 + 1] = float(step.y);
    seq.targets[size_t(t) * 3 + 2] = float(step.z);
    seq.valid_mask[t] = 1;
  }
  return seq;
}

void write_tracts(const std::string& path, const Tractogram& tracts) {
  BinWriter w(path);
  w.magic("TRX1");
  w.u32(1);
  w.u64(tracts.streamlines.size());
  for (const auto& s : tracts.streamlines) {
    w.u32(s.label);
    w.u32(uint32_t(s.points.size()));
    for (const Vec3& p : s.points) {
      w.f32(float(p.x));
      w.f32(float(p.y));
      w.f32(float(p.z));
    }
  }
  w.close();
}

Tractogram read_tracts(const std::string& path) {
  BinReader r(path);
  r.expect_magic("TRX1");
  const uint32_t version = r.u32();
  if (version != 1) r.fail("unsupported TRX1 version " + std::to_string(version));
  const uint64_t count = r.u64();
  Tractogram tracts;
  tracts.streamlines.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Streamline s;
    s.label = r.u32();
    const uint32_t n = r.u32();
    s.points.reserve(n);
    for (uint32_t v = 0; v < n; ++v) {
      const double x = double(r.f32());
      const double y = double(r.f32());
      const double z = double(r.f32());
      s.points.push_back({x, y, z});
    }
    tracts.streamlines.push_back(std::move(s));
  }
  r.expect_eof();
  return tracts;
}

}  // namespace tracto
