#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tracto/metrics.hpp"
#include "tracto/model.hpp"
#include "tracto/phantom.hpp"
#include "tracto/tracker.hpp"
#include "tracto/train.hpp"

namespace tracto::pipeline {

// One manifest per pipeline invocation: command, resolved parameters, seeds,
// input/output digests and wall-clock duration, as JSON.
class RunManifest {
 public:
  RunManifest(std::string command, std::string config_path);

  void set_param(const std::string& key, const std::string& value);
  void set_param(const std::string& key, double value);
  void set_seed(const std::string& key, uint64_t seed);
  void add_input(const std::string& path);
  void add_output(const std::string& path);

  // Digests outputs and writes the manifest itself (not self-digested).
  void write(const std::string& path) const;

 private:
  std::string command_;
  std::string config_path_;
  std::map<std::string, std::string> params_;
  std::map<std::string, uint64_t> seeds_;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point started_;
};

// Fixed artifact names inside a phantom/run directory.
namespace files {
inline constexpr const char* dwi = "dwi.vol";
inline constexpr const char* scheme = "scheme.txt";
inline constexpr const char* wm_mask = "wm_mask.vol";
inline constexpr const char* track_mask = "track_mask.vol";
inline constexpr const char* gt_tracts = "gt.trx";
inline constexpr const char* peaks = "peaks.vol";
inline constexpr const char* bundles = "bundles.txt";
inline constexpr const char* sh_volume = "sh.vol";
std::string bundle_mask(uint32_t label);
std::string roi_head(uint32_t label);
std::string roi_tail(uint32_t label);
}  // namespace files

struct PhantomOutput {
  phantom::Phantom phantom;
  std::vector<std::string> written;
};

// Builds the phantom described by a key=value config file and writes every
// artifact (DWI, masks, ROIs, ground truth, peaks, scheme) plus a manifest
// into out_dir.
PhantomOutput run_phantom(const std::string& config_path, const std::string& out_dir,
                          int threads);

// DWI -> SH coefficient volume (VOL1), plus manifest.
void run_fit_sh(const std::string& dwi_path, const std::string& scheme_path, int l_max,
                double lambda, const std::string& out_path, int threads);

struct TrainSetup {
  model::ModelConfig model;
  train::TrainConfig train;
  double alpha = 1.0;  // resampling step for sequence construction
};

// Parses a train config file. in_channels comes from the SH volume later.
TrainSetup parse_train_config(const std::string& path);

// gt.trx + sh.vol -> padded training sequences (streamlines resampled at
// alpha; out-of-bounds streamlines skipped).
std::vector<TrainSequence> build_dataset(const Tractogram& gt, const Volume& sh_volume,
                                         int block_size, double alpha);

struct TrainOutput {
  train::FitResult fit;
  size_t n_sequences = 0;
  size_t n_skipped = 0;
};

TrainOutput run_train(const std::string& data_dir, model::Variant variant,
                      train::WeightingMode weighting, const std::string& config_path,
                      const std::string& out_ckpt, int threads);

tracker::TrackConfig parse_track_config(const std::string& path);

// seed_mask_path may be empty; then seeds come from the tracking mask.
tracker::TrackResult run_track(const std::string& ckpt_path, const std::string& sh_path,
                               const std::string& mask_path, const std::string& config_path,
                               const std::string& out_trx, int threads,
                               const std::string& seed_mask_path = "");

// Ground-truth directory contents needed for scoring.
struct GroundTruth {
  Tractogram tracts;
  std::vector<metrics::RoiPair> rois;
  std::vector<std::string> bundle_names;
  metrics::VoxelMask grid;
};

GroundTruth load_ground_truth(const std::string& gt_dir);

metrics::ScoreReport run_score(const std::string& rec_path, const std::string& gt_dir,
                               const std::string& out_csv, double voxelize_step);

// Attention grid of one streamline as CSV (rows = query positions).
void run_attn_dump(const std::string& ckpt_path, const std::string& sh_path,
                   const std::string& trx_path, size_t streamline_index, int layer, int head,
                   const std::string& out_csv);

struct AblationRow {
  std::string name;
  model::Variant variant;
  train::WeightingMode weighting;
  metrics::ScoreReport score;
};

// The four-variant ladder: baseline MLP, context only, full, full + weighted
// loss. Each row trains, tracks and scores on the same data with the same
// seeds; results land in out_dir/<row>/ and out_dir/ablation.csv.
std::vector<AblationRow> run_ablate(const std::string& data_dir, const std::string& out_dir,
                                    const std::string& train_config_path,
                                    const std::string& track_config_path, int threads);

}  // namespace tracto::pipeline
