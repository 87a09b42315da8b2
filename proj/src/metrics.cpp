#include "tracto/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tracto/errors.hpp"

namespace tracto::metrics {

VoxelMask::VoxelMask(std::array<uint32_t, 3> dims, const Affine& affine)
    : dims_(dims), affine_(affine), inv_affine_(affine.inverse()) {
  bits_.assign(voxel_count(), 0);
}

size_t VoxelMask::count() const {
  size_t n = 0;
  for (uint8_t b : bits_) n += b;
  return n;
}

size_t VoxelMask::intersection_count(const VoxelMask& other) const {
  size_t n = 0;
  for (size_t i = 0; i < bits_.size(); ++i) n += (bits_[i] & other.bits_[i]);
  return n;
}

size_t VoxelMask::difference_count(const VoxelMask& other) const {
  size_t n = 0;
  for (size_t i = 0; i < bits_.size(); ++i) n += (bits_[i] & ~other.bits_[i]) & 1;
  return n;
}

bool VoxelMask::same_grid(const VoxelMask& other) const {
  return dims_ == other.dims_ && affine_.m == other.affine_.m;
}

VoxelMask VoxelMask::from_volume(const Volume& mask_volume) {
  if (mask_volume.channels() != 1)
    throw std::invalid_argument("mask volume must have one channel");
  VoxelMask out(mask_volume.dims(), mask_volume.affine());
  const auto& dims = mask_volume.dims();
  for (uint32_t z = 0; z < dims[2]; ++z)
    for (uint32_t y = 0; y < dims[1]; ++y)
      for (uint32_t x = 0; x < dims[0]; ++x)
        if (mask_volume.at(int(x), int(y), int(z)) != 0.0f) out.set(int(x), int(y), int(z));
  return out;
}

std::optional<VoxelIndex> mask_voxel_of(const VoxelMask& grid, const Vec3& world) {
  const Vec3 p = grid.inv_affine_.apply(world);
  const VoxelIndex v{int(std::floor(p.x + 0.5)), int(std::floor(p.y + 0.5)),
                     int(std::floor(p.z + 0.5))};
  if (v.x < 0 || v.y < 0 || v.z < 0 || uint32_t(v.x) >= grid.dims()[0] ||
      uint32_t(v.y) >= grid.dims()[1] || uint32_t(v.z) >= grid.dims()[2])
    return std::nullopt;
  return v;
}

VoxelMask voxelize(const Tractogram& tracts, const VoxelMask& grid, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("voxelize: step must be > 0");
  VoxelMask out(grid.dims(), grid.affine());
  const auto mark = [&](const Vec3& p) {
    if (const auto v = mask_voxel_of(out, p)) out.set(v->x, v->y, v->z);
  };
  for (const auto& s : tracts.streamlines) {
    if (s.points.empty()) continue;
    mark(s.points.front());
    for (size_t i = 1; i < s.points.size(); ++i) {
      const Vec3& a = s.points[i - 1];
      const Vec3& b = s.points[i];
      const double len = distance(a, b);
      const int n = std::max(1, int(std::ceil(len / step)));
      for (int k = 1; k <= n; ++k) mark(a + (b - a) * (double(k) / n));
    }
  }
  return out;
}

CoverageScores coverage_scores(const VoxelMask& rec, const VoxelMask& gt) {
  if (!rec.same_grid(gt)) throw std::invalid_argument("coverage_scores: grid mismatch");
  const size_t gt_n = gt.count();
  if (gt_n == 0) throw std::invalid_argument("coverage_scores: empty ground truth");
  const size_t rec_n = rec.count();
  const size_t inter = rec.intersection_count(gt);
  const size_t spill = rec.difference_count(gt);
  CoverageScores s;
  s.overlap = 100.0 * double(inter) / double(gt_n);
  s.overreach = 100.0 * double(spill) / double(gt_n);
  s.dice = rec_n + gt_n == 0 ? 0.0 : 100.0 * 2.0 * double(inter) / double(rec_n + gt_n);
  return s;
}

namespace {

// All ROI indices (2 per bundle) containing the point.
std::vector<uint32_t> rois_containing(const std::vector<RoiPair>& rois, const Vec3& p) {
  std::vector<uint32_t> hits;
  for (size_t b = 0; b < rois.size(); ++b) {
    if (const auto v = mask_voxel_of(rois[b].head, p))
      if (rois[b].head.get(v->x, v->y, v->z)) hits.push_back(uint32_t(2 * b));
    if (const auto v = mask_voxel_of(rois[b].tail, p))
      if (rois[b].tail.get(v->x, v->y, v->z)) hits.push_back(uint32_t(2 * b + 1));
  }
  return hits;
}

}  // namespace

ConnectionReport classify_connections(const Tractogram& tracts,
                                      const std::vector<RoiPair>& rois) {
  if (rois.empty()) throw std::invalid_argument("classify_connections: no bundles defined");
  ConnectionReport report;
  report.classes.resize(tracts.size(), ConnectionClass::none);
  report.assigned_bundle.assign(tracts.size(), kUnlabeled);
  report.valid_per_bundle.assign(rois.size(), 0);

  std::set<std::pair<uint32_t, uint32_t>> wrong_pairs;
  size_t n_valid = 0, n_invalid = 0, n_none = 0;

  for (size_t i = 0; i < tracts.size(); ++i) {
    const auto& s = tracts.streamlines[i];
    if (s.points.empty()) {
      n_none += 1;
      continue;
    }
    const auto head_hits = rois_containing(rois, s.points.front());
    const auto tail_hits = rois_containing(rois, s.points.back());

    // Valid: endpoints in the two ROIs of one bundle, either orientation.
    // Ambiguity (overlapping ROIs) resolves to the smallest bundle index and
    // is counted in the report.
    uint32_t valid_bundle = kUnlabeled;
    size_t matches = 0;
    for (size_t b = 0; b < rois.size(); ++b) {
      const uint32_t h = uint32_t(2 * b), t = uint32_t(2 * b + 1);
      const bool h_first = std::count(head_hits.begin(), head_hits.end(), h) != 0;
      const bool t_first = std::count(head_hits.begin(), head_hits.end(), t) != 0;
      const bool h_last = std::count(tail_hits.begin(), tail_hits.end(), h) != 0;
      const bool t_last = std::count(tail_hits.begin(), tail_hits.end(), t) != 0;
      if ((h_first && t_last) || (t_first && h_last)) {
        if (valid_bundle == kUnlabeled) valid_bundle = uint32_t(b);
        matches += 1;
      }
    }
    if (matches > 1) report.ambiguous += 1;
    if (valid_bundle != kUnlabeled) {
      report.classes[i] = ConnectionClass::valid;
      report.assigned_bundle[i] = valid_bundle;
      report.valid_per_bundle[valid_bundle] += 1;
      n_valid += 1;
      continue;
    }
    if (!head_hits.empty() && !tail_hits.empty()) {
      // Both endpoints sit in ROIs but not a ground-truth pairing.
      const uint32_t a = std::min(head_hits.front(), tail_hits.front());
      const uint32_t b = std::max(head_hits.front(), tail_hits.front());
      wrong_pairs.insert({a, b});
      report.classes[i] = ConnectionClass::invalid;
      n_invalid += 1;
      continue;
    }
    n_none += 1;
  }

  const double total = double(tracts.size());
  if (total > 0) {
    report.vc = 100.0 * double(n_valid) / total;
    report.ic = 100.0 * double(n_invalid) / total;
    report.nc = 100.0 * double(n_none) / total;
  }
  for (size_t b = 0; b < rois.size(); ++b) report.vb += (report.valid_per_bundle[b] > 0);
  report.ib = int(wrong_pairs.size());
  return report;
}

ScoreReport score_tractogram(const Tractogram& rec, const Tractogram& gt,
                             const std::vector<RoiPair>& rois,
                             const std::vector<std::string>& bundle_names,
                             const VoxelMask& grid, double voxelize_step) {
  if (rec.empty()) throw std::invalid_argument("score_tractogram: empty reconstruction");
  if (gt.empty()) throw std::invalid_argument("score_tractogram: empty ground truth");

  ScoreReport report;
  report.n_streamlines = rec.size();
  const VoxelMask gt_mask = voxelize(gt, grid, voxelize_step);
  const VoxelMask rec_mask = voxelize(rec, grid, voxelize_step);
  report.whole = coverage_scores(rec_mask, gt_mask);

  const auto conn = classify_connections(rec, rois);
  report.vc = conn.vc;
  report.ic = conn.ic;
  report.nc = conn.nc;
  report.vb = conn.vb;
  report.ib = conn.ib;
  report.ambiguous = conn.ambiguous;

  for (size_t b = 0; b < rois.size(); ++b) {
    BundleScore bs;
    bs.bundle = uint32_t(b);
    bs.name = b < bundle_names.size() ? bundle_names[b] : "bundle" + std::to_string(b);
    bs.valid_streamlines = conn.valid_per_bundle[b];

    Tractogram gt_b, rec_b;
    for (const auto& s : gt.streamlines)
      if (s.label == uint32_t(b)) gt_b.streamlines.push_back(s);
    for (size_t i = 0; i < rec.size(); ++i)
      if (conn.assigned_bundle[i] == uint32_t(b)) rec_b.streamlines.push_back(rec.streamlines[i]);
    if (!gt_b.empty()) {
      const VoxelMask gt_bm = voxelize(gt_b, grid, voxelize_step);
      const VoxelMask rec_bm = voxelize(rec_b, grid, voxelize_step);
      bs.coverage = coverage_scores(rec_bm, gt_bm);
    }
    report.bundles.push_back(std::move(bs));
  }
  return report;
}

void write_score_csv(const std::string& path, const ScoreReport& report) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "scope,dice,overlap,overreach,vc,ic,nc,vb,ib,streamlines\n";
  out << std::fixed << std::setprecision(4);
  out << "whole," << report.whole.dice << ',' << report.whole.overlap << ','
      << report.whole.overreach << ',' << report.vc << ',' << report.ic << ',' << report.nc
      << ',' << report.vb << ',' << report.ib << ',' << report.n_streamlines << '\n';
  for (const auto& b : report.bundles)
    out << b.name << ',' << b.coverage.dice << ',' << b.coverage.overlap << ','
        << b.coverage.overreach << ",,,,,," << b.valid_streamlines << '\n';
  if (!out) throw Error("write to '" + path + "' failed");
}

std::string format_score_table(const ScoreReport& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "whole tractogram: Dice " << report.whole.dice << "  OL " << report.whole.overlap
     << "  OR " << report.whole.overreach << "\n";
  if (report.ambiguous > 0)
    os << "note: " << report.ambiguous
       << " streamline(s) matched several bundles; smallest index assigned\n";
  os << "connections:      VC " << report.vc << "%  IC " << report.ic << "%  NC " << report.nc
     << "%  VB " << report.vb << "  IB " << report.ib << "\n";
  for (const auto& b : report.bundles)
    os << "  " << b.name << ": Dice " << b.coverage.dice << "  OL " << b.coverage.overlap
       << "  OR " << b.coverage.overreach << "  valid " << b.valid_streamlines << "\n";
  return os.str();
}

}  // namespace tracto::metrics
