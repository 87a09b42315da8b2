#include "tracto/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "tracto/errors.hpp"
#include "tracto/parallel.hpp"
#include "tracto/rng.hpp"
#include "tracto/sh.hpp"

namespace tracto::tracker {

void TrackConfig::validate() const {
  if (!(step_size > 0.0)) throw std::invalid_argument("step_size must be > 0");
  if (seeds_per_voxel < 0) throw std::invalid_argument("seeds_per_voxel must be >= 0");
  if (!(min_length > 0.0 && min_length < max_length))
    throw std::invalid_argument("need 0 < min_length < max_length");
  if (!(stop_norm_tau >= 0.0 && stop_norm_tau < 1.0))
    throw std::invalid_argument("stop_norm_tau must lie in [0, 1)");
}

const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::left_mask: return "left_mask";
    case StopReason::out_of_bounds: return "out_of_bounds";
    case StopReason::low_norm: return "low_norm";
    case StopReason::max_length: return "max_length";
  }
  return "?";
}

std::vector<Vec3> generate_seeds(const Volume& mask, int seeds_per_voxel, Rng& rng) {
  if (mask.channels() != 1) throw std::invalid_argument("seed mask must have one channel");
  if (mask_count(mask) == 0) throw std::invalid_argument("seed mask is empty");
  std::vector<Vec3> seeds;
  const auto& dims = mask.dims();
  for (uint32_t z = 0; z < dims[2]; ++z)
    for (uint32_t y = 0; y < dims[1]; ++y)
      for (uint32_t x = 0; x < dims[0]; ++x) {
        if (mask.at(int(x), int(y), int(z)) == 0.0f) continue;
        for (int s = 0; s < seeds_per_voxel; ++s) {
          const Vec3 jitter{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                            rng.uniform(-0.5, 0.5)};
          seeds.push_back(mask.affine().apply(Vec3{double(x), double(y), double(z)} + jitter));
        }
      }
  return seeds;
}

ModelPredictor::ModelPredictor(const model::Params<float>& params) : decoder_(params) {
  patch_f_.resize(size_t(params.config.patch_size()));
}

void ModelPredictor::reset() { decoder_.reset(); }

int ModelPredictor::capacity() const { return decoder_.capacity(); }

int ModelPredictor::size() const { return decoder_.size(); }

Vec3 ModelPredictor::push(std::span<const double> patch) {
  if (patch.size() != patch_f_.size())
    throw std::invalid_argument("ModelPredictor: patch size mismatch");
  for (size_t i = 0; i < patch.size(); ++i) patch_f_[i] = float(patch[i]);
  const auto pred = decoder_.push(std::span<const float>(patch_f_));
  return {double(pred[0]), double(pred[1]), double(pred[2])};
}

namespace {

struct Walk {
  std::vector<Vec3> points;
  std::vector<std::vector<double>> patches;  // one per point, in step order
};

// Feeds the most recent window of patches so that the predictor's next
// prediction corresponds to the last vertex. Used to (re)prime the context
// after a direction flip or a window slide.
Vec3 prime(StepPredictor& predictor, const Walk& walk) {
  predictor.reset();
  const size_t cap = size_t(predictor.capacity());
  const size_t n = walk.points.size();
  const size_t first = n > cap ? n - cap : 0;
  Vec3 pred{};
  for (size_t i = first; i < n; ++i)
    pred = predictor.push(std::span<const double>(walk.patches[i]));
  return pred;
}

// Extends the walk until a stop fires. The walk's last patch must already be
// in place and `pred` must be the prediction at the last vertex.
StopReason extend(StepPredictor& predictor, Vec3 pred, Walk& walk, const Volume& sh_volume,
                  const Volume& mask, const TrackConfig& cfg, size_t max_vertices,
                  double* first_norm) {
  const double alpha = cfg.step_size;
  bool first = true;
  while (true) {
    const double nrm = norm(pred);
    if (first && first_norm) *first_norm = nrm;
    first = false;
    if (!(nrm >= cfg.stop_norm_tau) || nrm == 0.0) return StopReason::low_norm;
    const Vec3 next = walk.points.back() + pred * (alpha / nrm);

    const auto voxel = mask.voxel_of(next);
    if (!voxel) return StopReason::out_of_bounds;
    if (!mask_set(mask, *voxel)) return StopReason::left_mask;

    auto patch = sh::extract_neighborhood(sh_volume, next);
    walk.points.push_back(next);
    if (!patch) {
      walk.patches.push_back({});
      return StopReason::out_of_bounds;
    }
    walk.patches.push_back(std::move(*patch));
    if (walk.points.size() >= max_vertices) return StopReason::max_length;

    if (predictor.size() >= predictor.capacity())
      pred = prime(predictor, walk);  // window slid: re-encode the last block
    else
      pred = predictor.push(std::span<const double>(walk.patches.back()));
  }
}

}  // namespace

PropagateResult propagate(StepPredictor& predictor, const Volume& sh_volume, const Vec3& seed,
                          const Volume& mask, const TrackConfig& config) {
  config.validate();
  const auto seed_voxel = mask.voxel_of(seed);
  if (!seed_voxel || !mask_set(mask, *seed_voxel))
    throw std::invalid_argument("propagate: seed lies outside the tracking mask");

  // A polyline of n vertices spans (n-1) * alpha mm.
  const size_t max_vertices = size_t(std::floor(config.max_length / config.step_size)) + 1;

  PropagateResult result;
  Walk walk;
  walk.points.push_back(seed);
  auto seed_patch = sh::extract_neighborhood(sh_volume, seed);
  if (!seed_patch) {
    result.streamline.points = walk.points;
    result.reason = StopReason::out_of_bounds;
    return result;
  }
  walk.patches.push_back(std::move(*seed_patch));

  Vec3 pred = prime(predictor, walk);
  result.reason = extend(predictor, pred, walk, sh_volume, mask, config, max_vertices,
                         &result.first_norm);

  if (config.bidirectional && walk.points.size() < max_vertices &&
      !walk.patches.back().empty()) {
    std::reverse(walk.points.begin(), walk.points.end());
    std::reverse(walk.patches.begin(), walk.patches.end());
    pred = prime(predictor, walk);
    result.reason =
        extend(predictor, pred, walk, sh_volume, mask, config, max_vertices, nullptr);
  }

  result.streamline.points = std::move(walk.points);
  return result;
}

PropagateResult propagate(const model::Params<float>& params, const Volume& sh_volume,
                          const Vec3& seed, const Volume& mask, const TrackConfig& config) {
  ModelPredictor predictor(params);
  return propagate(predictor, sh_volume, seed, mask, config);
}

TrackResult track(const model::Params<float>& params, const Volume& sh_volume,
                  const Volume& mask, const TrackConfig& config, int threads,
                  const Volume* seed_mask) {
  config.validate();
  if (seed_mask && seed_mask->dims() != mask.dims())
    throw std::invalid_argument("track: seed mask grid does not match the tracking mask");
  TrackResult result;
  Rng rng = Rng::substream(config.rng_seed, 0x7EEDu);
  auto seeds = generate_seeds(seed_mask ? *seed_mask : mask, config.seeds_per_voxel, rng);
  if (seed_mask) {
    // Keep only seeds that also satisfy propagate's containment precondition.
    std::erase_if(seeds, [&](const Vec3& s) {
      const auto v = mask.voxel_of(s);
      return !v || !mask_set(mask, *v);
    });
  }
  result.n_seeds = seeds.size();

  std::vector<PropagateResult> per_seed(seeds.size());
  parallel_for(seeds.size(), threads, [&](size_t i) {
    ModelPredictor predictor(params);
    per_seed[i] = propagate(predictor, sh_volume, seeds[i], mask, config);
  });

  for (const auto& r : per_seed) {
    result.stop_reasons[r.reason] += 1;
    if (r.streamline.length() + 1e-9 >= config.min_length)
      result.tractogram.streamlines.push_back(r.streamline);
    else
      result.n_discarded += 1;
  }
  return result;
}

void write_stop_histogram(const std::string& path, const TrackResult& result) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "seeds " << result.n_seeds << "\n";
  out << "kept " << result.tractogram.size() << "\n";
  out << "discarded_short " << result.n_discarded << "\n";
  for (const auto& [reason, count] : result.stop_reasons)
    out << stop_reason_name(reason) << ' ' << count << '\n';
  if (!out) throw Error("write to '" + path + "' failed");
}

}  // namespace tracto::tracker
