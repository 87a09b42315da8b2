#include "tracto/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tracto/digest.hpp"
#include "tracto/errors.hpp"

namespace tracto::pipeline {

namespace fs = std::filesystem;

RunManifest::RunManifest(std::string command, std::string config_path)
    : command_(std::move(command)),
      config_path_(std::move(config_path)),
      started_(std::chrono::steady_clock::now()) {}

void RunManifest::set_param(const std::string& key, const std::string& value) {
  params_[key] = value;
}

void RunManifest::set_param(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  params_[key] = os.str();
}

void RunManifest::set_seed(const std::string& key, uint64_t seed) { seeds_[key] = seed; }

void RunManifest::add_input(const std::string& path) { inputs_.push_back(path); }

void RunManifest::add_output(const std::string& path) { outputs_.push_back(path); }

void RunManifest::write(const std::string& path) const {
  nlohmann::json j;
  j["command"] = command_;
  if (!config_path_.empty()) j["config_file"] = config_path_;
  j["parameters"] = params_;
  j["seeds"] = seeds_;
  nlohmann::json in = nlohmann::json::object();
  for (const auto& p : inputs_) in[p] = digest_hex(digest_file(p));
  j["inputs"] = in;
  nlohmann::json out = nlohmann::json::object();
  for (const auto& p : outputs_) out[p] = digest_hex(digest_file(p));
  j["outputs"] = out;
  j["duration_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  std::ofstream f(path);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
  if (!f) throw Error("write to '" + path + "' failed");
}

namespace files {
std::string bundle_mask(uint32_t label) {
  return "bundle_" + std::to_string(label) + "_mask.vol";
}
std::string roi_head(uint32_t label) { return "roi_" + std::to_string(label) + "_head.vol"; }
std::string roi_tail(uint32_t label) { return "roi_" + std::to_string(label) + "_tail.vol"; }
}  // namespace files

namespace {

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void write_bundles_txt(const std::string& path, const phantom::PhantomConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "# label name streamlines\n";
  for (const auto& b : cfg.bundles)
    out << b.label << ' ' << b.name << ' ' << b.streamline_count << '\n';
  if (!out) throw Error("write to '" + path + "' failed");
}

std::vector<std::pair<uint32_t, std::string>> read_bundles_txt(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<std::pair<uint32_t, std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    uint32_t label;
    std::string name;
    if (!(ls >> label >> name)) throw FormatError(path + ": expected 'label name count'");
    out.emplace_back(label, name);
  }
  if (out.empty()) throw FormatError(path + ": no bundles listed");
  return out;
}

}  // namespace

PhantomOutput run_phantom(const std::string& config_path, const std::string& out_dir,
                          int threads) {
  RunManifest manifest("phantom", config_path);
  manifest.add_input(config_path);

  KvFile kv = KvFile::parse_file(config_path);
  phantom::PhantomConfig config = phantom::PhantomConfig::from_kv(kv);
  kv.finish();
  manifest.set_seed("phantom", config.rng_seed);
  manifest.set_param("bundles", double(config.bundles.size()));
  manifest.set_param("snr", config.snr ? *config.snr : 0.0);

  PhantomOutput out;
  out.phantom = phantom::build_phantom(config, threads);

  fs::create_directories(out_dir);
  const auto save = [&](const std::string& name, const auto& writer) {
    const std::string path = join(out_dir, name);
    writer(path);
    manifest.add_output(path);
    out.written.push_back(path);
  };
  save(files::dwi, [&](const std::string& p) { write_volume(p, out.phantom.dwi); });
  save(files::scheme, [&](const std::string& p) { sh::write_scheme(p, config.scheme); });
  save(files::wm_mask, [&](const std::string& p) { write_volume(p, out.phantom.wm_mask); });
  save(files::track_mask,
       [&](const std::string& p) { write_volume(p, out.phantom.track_mask); });
  save(files::gt_tracts,
       [&](const std::string& p) { write_tracts(p, out.phantom.gt_tractogram); });
  save(files::peaks, [&](const std::string& p) { write_volume(p, out.phantom.peaks); });
  save(files::bundles, [&](const std::string& p) { write_bundles_txt(p, config); });
  for (uint32_t b = 0; b < config.bundles.size(); ++b) {
    save(files::bundle_mask(b),
         [&](const std::string& p) { write_volume(p, out.phantom.bundle_masks[b]); });
    save(files::roi_head(b),
         [&](const std::string& p) { write_volume(p, out.phantom.roi_heads[b]); });
    save(files::roi_tail(b),
         [&](const std::string& p) { write_volume(p, out.phantom.roi_tails[b]); });
  }
  manifest.write(join(out_dir, "phantom.manifest.json"));
  return out;
}

void run_fit_sh(const std::string& dwi_path, const std::string& scheme_path, int l_max,
                double lambda, const std::string& out_path, int threads) {
  RunManifest manifest("fit-sh", "");
  manifest.add_input(dwi_path);
  manifest.add_input(scheme_path);
  manifest.set_param("lmax", double(l_max));
  manifest.set_param("lambda", lambda);

  const Volume dwi = read_volume(dwi_path);
  const auto scheme = sh::read_scheme(scheme_path);
  const Volume shvol = sh::fit_sh_volume(dwi, scheme, l_max, lambda, threads);
  write_volume(out_path, shvol);
  manifest.add_output(out_path);
  manifest.write(out_path + ".manifest.json");
}

TrainSetup parse_train_config(const std::string& path) {
  KvFile kv = KvFile::parse_file(path);
  TrainSetup setup;
  setup.model.n_layers = int(kv.get_int("model_layers", 6));
  setup.model.n_heads = int(kv.get_int("model_heads", 6));
  setup.model.d_model = int(kv.get_int("model_dim", 192));
  setup.model.block_size = int(kv.get_int("model_block", 96));
  setup.train.batch_size = int(kv.get_int("batch_size", 256));
  setup.train.epochs = int(kv.get_int("epochs", 20));
  setup.train.learning_rate = kv.get_double("learning_rate", 1e-4);
  setup.train.adam_beta1 = kv.get_double("adam_beta1", 0.9);
  setup.train.adam_beta2 = kv.get_double("adam_beta2", 0.999);
  setup.train.adam_eps = kv.get_double("adam_eps", 1e-8);
  setup.train.squared_error = kv.get_bool("squared_error", true);
  setup.train.rng_seed = uint64_t(kv.get_int("seed", 0));
  setup.alpha = kv.get_double("step_size", 1.0);
  kv.finish();
  return setup;
}

std::vector<TrainSequence> build_dataset(const Tractogram& gt, const Volume& sh_volume,
                                         int block_size, double alpha) {
  std::vector<TrainSequence> dataset;
  dataset.reserve(gt.size());
  for (const auto& line : gt.streamlines) {
    if (line.points.size() < 2) continue;
    const Streamline stepped = resample(line, alpha);
    if (stepped.points.size() < 2) continue;
    auto seq = make_train_sequence(stepped, sh_volume, block_size, alpha);
    if (seq) dataset.push_back(std::move(*seq));
  }
  return dataset;
}

TrainOutput run_train(const std::string& data_dir, model::Variant variant,
                      train::WeightingMode weighting, const std::string& config_path,
                      const std::string& out_ckpt, int threads) {
  RunManifest manifest("train", config_path);
  const std::string sh_path = join(data_dir, files::sh_volume);
  const std::string gt_path = join(data_dir, files::gt_tracts);
  manifest.add_input(config_path);
  manifest.add_input(sh_path);
  manifest.add_input(gt_path);

  TrainSetup setup = parse_train_config(config_path);
  const Volume shvol = read_volume(sh_path);
  const Tractogram gt = read_tracts(gt_path);
  setup.model.in_channels = int(shvol.channels());
  setup.model.variant = variant;
  setup.train.weighting_mode = weighting;

  manifest.set_param("variant", model::variant_name(variant));
  manifest.set_param("weighting", train::weighting_name(weighting));
  manifest.set_param("epochs", double(setup.train.epochs));
  manifest.set_param("batch_size", double(setup.train.batch_size));
  manifest.set_param("learning_rate", setup.train.learning_rate);
  manifest.set_seed("train", setup.train.rng_seed);

  TrainOutput out;
  auto dataset = build_dataset(gt, shvol, setup.model.block_size, setup.alpha);
  out.n_sequences = dataset.size();
  out.n_skipped = gt.size() - dataset.size();
  out.fit = train::fit(dataset, setup.model, setup.train, threads);

  model::save_checkpoint(out_ckpt, out.fit.params);
  manifest.add_output(out_ckpt);
  const std::string best_path = out_ckpt + ".best";
  model::save_checkpoint(best_path, out.fit.best_params);
  manifest.add_output(best_path);
  const std::string curve_path = out_ckpt + ".loss.csv";
  train::write_loss_curve(curve_path, out.fit.loss_curve);
  manifest.add_output(curve_path);
  manifest.write(out_ckpt + ".manifest.json");
  return out;
}

tracker::TrackConfig parse_track_config(const std::string& path) {
  KvFile kv = KvFile::parse_file(path);
  tracker::TrackConfig cfg;
  cfg.step_size = kv.get_double("step_size", 1.0);
  cfg.seeds_per_voxel = int(kv.get_int("seeds_per_voxel", 5));
  cfg.min_length = kv.get_double("min_length", 20.0);
  cfg.max_length = kv.get_double("max_length", 200.0);
  cfg.stop_norm_tau = kv.get_double("stop_norm_tau", 0.1);
  cfg.bidirectional = kv.get_bool("bidirectional", true);
  cfg.rng_seed = uint64_t(kv.get_int("seed", 0));
  kv.finish();
  cfg.validate();
  return cfg;
}

tracker::TrackResult run_track(const std::string& ckpt_path, const std::string& sh_path,
                               const std::string& mask_path, const std::string& config_path,
                               const std::string& out_trx, int threads,
                               const std::string& seed_mask_path) {
  RunManifest manifest("track", config_path);
  manifest.add_input(ckpt_path);
  manifest.add_input(sh_path);
  manifest.add_input(mask_path);
  manifest.add_input(config_path);
  if (!seed_mask_path.empty()) manifest.add_input(seed_mask_path);

  const auto params = model::load_checkpoint(ckpt_path);
  const Volume shvol = read_volume(sh_path);
  const Volume mask = read_volume(mask_path);
  std::optional<Volume> seed_mask;
  if (!seed_mask_path.empty()) seed_mask = read_volume(seed_mask_path);
  const auto cfg = parse_track_config(config_path);
  manifest.set_seed("track", cfg.rng_seed);
  manifest.set_param("seeds_per_voxel", double(cfg.seeds_per_voxel));
  manifest.set_param("step_size", cfg.step_size);

  auto result = tracker::track(params, shvol, mask, cfg, threads,
                               seed_mask ? &*seed_mask : nullptr);
  write_tracts(out_trx, result.tractogram);
  manifest.add_output(out_trx);
  const std::string hist_path = out_trx + ".stops.txt";
  tracker::write_stop_histogram(hist_path, result);
  manifest.add_output(hist_path);
  manifest.write(out_trx + ".manifest.json");
  return result;
}

GroundTruth load_ground_truth(const std::string& gt_dir) {
  GroundTruth gt;
  gt.tracts = read_tracts(join(gt_dir, files::gt_tracts));
  const Volume wm = read_volume(join(gt_dir, files::wm_mask));
  gt.grid = metrics::VoxelMask(wm.dims(), wm.affine());
  for (const auto& [label, name] : read_bundles_txt(join(gt_dir, files::bundles))) {
    metrics::RoiPair pair;
    pair.bundle = label;
    pair.head = metrics::VoxelMask::from_volume(read_volume(join(gt_dir, files::roi_head(label))));
    pair.tail = metrics::VoxelMask::from_volume(read_volume(join(gt_dir, files::roi_tail(label))));
    gt.rois.push_back(std::move(pair));
    gt.bundle_names.push_back(name);
  }
  return gt;
}

metrics::ScoreReport run_score(const std::string& rec_path, const std::string& gt_dir,
                               const std::string& out_csv, double voxelize_step) {
  RunManifest manifest("score", "");
  manifest.add_input(rec_path);
  manifest.add_input(join(gt_dir, files::gt_tracts));
  manifest.add_input(join(gt_dir, files::bundles));
  manifest.set_param("voxelize_step", voxelize_step);

  const Tractogram rec = read_tracts(rec_path);
  const GroundTruth gt = load_ground_truth(gt_dir);
  const auto report = metrics::score_tractogram(rec, gt.tracts, gt.rois, gt.bundle_names,
                                                gt.grid, voxelize_step);
  metrics::write_score_csv(out_csv, report);
  manifest.add_output(out_csv);
  manifest.write(out_csv + ".manifest.json");
  return report;
}

void run_attn_dump(const std::string& ckpt_path, const std::string& sh_path,
                   const std::string& trx_path, size_t streamline_index, int layer, int head,
                   const std::string& out_csv) {
  RunManifest manifest("attn-dump", "");
  manifest.add_input(ckpt_path);
  manifest.add_input(sh_path);
  manifest.add_input(trx_path);
  manifest.set_param("streamline", double(streamline_index));
  manifest.set_param("layer", double(layer));
  manifest.set_param("head", double(head));

  const auto params = model::load_checkpoint(ckpt_path);
  const Volume shvol = read_volume(sh_path);
  const Tractogram tracts = read_tracts(trx_path);
  if (streamline_index >= tracts.size())
    throw std::invalid_argument("streamline index " + std::to_string(streamline_index) +
                                " out of range (" + std::to_string(tracts.size()) +
                                " streamlines)");
  if (int(shvol.channels()) != params.config.in_channels)
    throw std::invalid_argument("SH volume channels do not match the checkpoint");

  // Most recent block_size vertices, mirroring what the tracker would see.
  const auto& line = tracts.streamlines[streamline_index];
  const int n = std::min<int>(int(line.points.size()), params.config.block_size);
  const size_t first = line.points.size() - size_t(n);
  std::vector<float> patches;
  patches.reserve(size_t(n) * params.config.patch_size());
  for (int t = 0; t < n; ++t) {
    const auto patch = sh::extract_neighborhood(shvol, line.points[first + t]);
    if (!patch)
      throw Error("streamline vertex " + std::to_string(first + t) + " is out of bounds");
    for (double v : *patch) patches.push_back(float(v));
  }
  const auto trace = model::run<float>(params, std::span<const float>(patches), n);
  const auto grid = model::dump_attention<float>(trace, layer, head);

  std::ofstream out(out_csv);
  if (!out) throw Error("cannot open '" + out_csv + "' for writing");
  out.precision(8);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) out << grid[size_t(i) * n + j] << (j + 1 < n ? ',' : '\n');
  }
  if (!out) throw Error("write to '" + out_csv + "' failed");
  out.close();
  manifest.add_output(out_csv);
  manifest.write(out_csv + ".manifest.json");
}

std::vector<AblationRow> run_ablate(const std::string& data_dir, const std::string& out_dir,
                                    const std::string& train_config_path,
                                    const std::string& track_config_path, int threads) {
  const std::vector<std::tuple<std::string, model::Variant, train::WeightingMode>> rows = {
      {"baseline", model::Variant::baseline_mlp, train::WeightingMode::uniform},
      {"context", model::Variant::context_only, train::WeightingMode::uniform},
      {"full", model::Variant::full, train::WeightingMode::uniform},
      {"full_weighted", model::Variant::full, train::WeightingMode::inverse_frequency},
  };

  fs::create_directories(out_dir);
  // Seeds come from the fiber mask; containment uses the dilated tracking
  // mask when the phantom provides one, so off-bundle wandering costs
  // overreach instead of being clipped at the bundle boundary.
  const std::string wm_path = join(data_dir, files::wm_mask);
  std::string mask_path = join(data_dir, files::track_mask);
  std::string seed_path = wm_path;
  if (!fs::exists(mask_path)) {
    mask_path = wm_path;
    seed_path.clear();
  }

  const double voxelize_step = parse_track_config(track_config_path).step_size / 2.0;

  std::vector<AblationRow> results;
  for (const auto& [name, variant, weighting] : rows) {
    const std::string row_dir = join(out_dir, name);
    fs::create_directories(row_dir);
    const std::string ckpt = join(row_dir, "model.ckpt");
    run_train(data_dir, variant, weighting, train_config_path, ckpt, threads);
    const std::string trx = join(row_dir, "rec.trx");
    run_track(ckpt, join(data_dir, files::sh_volume), mask_path, track_config_path, trx,
              threads, seed_path);
    const auto report =
        run_score(trx, data_dir, join(row_dir, "score.csv"), voxelize_step);
    results.push_back({name, variant, weighting, report});
  }

  const std::string table_path = join(out_dir, "ablation.csv");
  std::ofstream out(table_path);
  if (!out) throw Error("cannot open '" + table_path + "' for writing");
  out << "row,variant,weighting,dice,overlap,overreach,vc,vb\n";
  out.precision(4);
  out << std::fixed;
  for (const auto& row : results)
    out << row.name << ',' << model::variant_name(row.variant) << ','
        << train::weighting_name(row.weighting) << ',' << row.score.whole.dice << ','
        << row.score.whole.overlap << ',' << row.score.whole.overreach << ',' << row.score.vc
        << ',' << row.score.vb << '\n';
  if (!out) throw Error("write to '" + table_path + "' failed");
  return results;
}

}  // namespace tracto::pipeline
