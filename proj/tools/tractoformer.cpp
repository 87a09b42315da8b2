// tractoformer: phantom synthesis, SH fitting, model training, streamline
// tracking, scoring and attention dumps from one binary.
//
// Exit codes: 0 success, 1 pipeline error, 2 usage/missing-file error.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "tracto/errors.hpp"
#include "tracto/parallel.hpp"
#include "tracto/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace tracto;

// Input files are checked up front so a typo'd path is a usage error, not a
// mid-pipeline failure.
void require_file(const std::string& path) {
  if (!fs::exists(path)) throw CLI::ValidationError("file not found: " + path);
}

struct SplitTrxRef {
  std::string path;
  size_t index = 0;
};

SplitTrxRef parse_trx_ref(const std::string& ref) {
  const auto colon = ref.rfind(':');
  if (colon == std::string::npos || colon + 1 == ref.size())
    throw CLI::ValidationError("streamline reference must look like file.trx:INDEX");
  SplitTrxRef out;
  out.path = ref.substr(0, colon);
  out.index = std::stoull(ref.substr(colon + 1));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tractoformer: attention-based streamline tractography on synthetic phantoms"};
  app.require_subcommand(1);
  app.fallthrough();  // allow --threads after the subcommand
  int threads = 0;
  app.add_option("--threads", threads,
                 "worker thread cap (default: TRACTOFORMER_THREADS or hardware)");

  // phantom
  auto* cmd_phantom = app.add_subcommand("phantom", "synthesize a ground-truth phantom + DWI");
  std::string ph_config, ph_out;
  cmd_phantom->add_option("--config", ph_config, "phantom key=value config")->required();
  cmd_phantom->add_option("--out", ph_out, "output directory")->required();

  // fit-sh
  auto* cmd_fit = app.add_subcommand("fit-sh", "fit DWI signals to SH coefficients");
  std::string fit_dwi, fit_scheme, fit_out;
  int fit_lmax = 6;
  double fit_lambda = 0.006;
  cmd_fit->add_option("--dwi", fit_dwi, "raw DWI volume (VOL1)")->required();
  cmd_fit->add_option("--scheme", fit_scheme, "gradient scheme text file")->required();
  cmd_fit->add_option("--lmax", fit_lmax, "even SH order (default 6)");
  cmd_fit->add_option("--lambda", fit_lambda, "Laplace-Beltrami regularization (default 0.006)");
  cmd_fit->add_option("--out", fit_out, "output SH volume (VOL1)")->required();

  // train
  auto* cmd_train = app.add_subcommand("train", "train a model variant on a phantom directory");
  std::string tr_data, tr_variant = "full", tr_weighting = "invfreq", tr_config, tr_out;
  cmd_train->add_option("--data", tr_data, "directory with sh.vol and gt.trx")->required();
  cmd_train->add_option("--variant", tr_variant, "baseline|context|full");
  cmd_train->add_option("--weighting", tr_weighting, "uniform|softmax|invfreq");
  cmd_train->add_option("--config", tr_config, "train key=value config")->required();
  cmd_train->add_option("--out", tr_out, "output checkpoint (CKP1)")->required();

  // track
  auto* cmd_track = app.add_subcommand("track", "propagate streamlines with a trained model");
  std::string tk_model, tk_sh, tk_mask, tk_seed_mask, tk_config, tk_out;
  cmd_track->add_option("--model", tk_model, "checkpoint (CKP1)")->required();
  cmd_track->add_option("--sh", tk_sh, "SH volume (VOL1)")->required();
  cmd_track->add_option("--mask", tk_mask, "tracking (containment) mask volume")->required();
  cmd_track->add_option("--seed-mask", tk_seed_mask,
                        "seed mask volume (default: the tracking mask)");
  cmd_track->add_option("--config", tk_config, "track key=value config")->required();
  cmd_track->add_option("--out", tk_out, "output tractogram (TRX1)")->required();

  // score
  auto* cmd_score = app.add_subcommand("score", "score a tractogram against phantom ground truth");
  std::string sc_rec, sc_gt, sc_out;
  double sc_step = 0.5;
  cmd_score->add_option("--rec", sc_rec, "reconstructed tractogram (TRX1)")->required();
  cmd_score->add_option("--gt", sc_gt, "phantom ground-truth directory")->required();
  cmd_score->add_option("--step", sc_step, "voxelization step in mm (default 0.5)");
  cmd_score->add_option("--out", sc_out, "output CSV")->required();

  // attn-dump
  auto* cmd_attn = app.add_subcommand("attn-dump", "dump attention scores along one streamline");
  std::string at_model, at_sh, at_ref, at_out;
  int at_layer = 0, at_head = 0;
  cmd_attn->add_option("--model", at_model, "checkpoint (CKP1)")->required();
  cmd_attn->add_option("--sh", at_sh, "SH volume the checkpoint was trained on")->required();
  cmd_attn->add_option("--streamline", at_ref, "tractogram reference file.trx:INDEX")->required();
  cmd_attn->add_option("--layer", at_layer, "layer index")->required();
  cmd_attn->add_option("--head", at_head, "head index")->required();
  cmd_attn->add_option("--out", at_out, "output CSV")->required();

  // ablate
  auto* cmd_ablate = app.add_subcommand("ablate", "run the four-variant ablation ladder");
  std::string ab_data, ab_out, ab_train_cfg, ab_track_cfg;
  cmd_ablate->add_option("--data", ab_data, "directory with sh.vol, gt.trx, wm_mask.vol")
      ->required();
  cmd_ablate->add_option("--train-config", ab_train_cfg, "train key=value config")->required();
  cmd_ablate->add_option("--track-config", ab_track_cfg, "track key=value config")->required();
  cmd_ablate->add_option("--out", ab_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints usage/help
    return code == 0 ? 0 : 2;      // --help and --version are successes
  }
  const int n_threads = resolve_threads(threads);

  try {
    try {
      if (*cmd_phantom) {
        require_file(ph_config);
        const auto out = pipeline::run_phantom(ph_config, ph_out, n_threads);
        std::cout << "phantom: " << out.phantom.gt_tractogram.size() << " streamlines, "
                  << mask_count(out.phantom.wm_mask) << " wm voxels -> " << ph_out << "\n";
      } else if (*cmd_fit) {
        require_file(fit_dwi);
        require_file(fit_scheme);
        if (fit_lmax % 2 != 0 || fit_lmax < 0 || fit_lmax > 8)
          throw CLI::ValidationError("--lmax must be even and in [0, 8]");
        pipeline::run_fit_sh(fit_dwi, fit_scheme, fit_lmax, fit_lambda, fit_out, n_threads);
        std::cout << "fit-sh: wrote " << fit_out << "\n";
      } else if (*cmd_train) {
        require_file(tr_config);
        require_file((fs::path(tr_data) / pipeline::files::sh_volume).string());
        require_file((fs::path(tr_data) / pipeline::files::gt_tracts).string());
        const auto out =
            pipeline::run_train(tr_data, model::variant_from_name(tr_variant),
                                train::weighting_from_name(tr_weighting), tr_config, tr_out,
                                n_threads);
        std::cout << "train: " << out.n_sequences << " sequences (" << out.n_skipped
                  << " skipped), final loss "
                  << (out.fit.loss_curve.empty() ? 0.0 : out.fit.loss_curve.back())
                  << ", best epoch " << out.fit.best_epoch << " -> " << tr_out << "\n";
      } else if (*cmd_track) {
        for (const auto& f : {tk_model, tk_sh, tk_mask, tk_config}) require_file(f);
        if (!tk_seed_mask.empty()) require_file(tk_seed_mask);
        const auto result = pipeline::run_track(tk_model, tk_sh, tk_mask, tk_config, tk_out,
                                                n_threads, tk_seed_mask);
        std::cout << "track: " << result.tractogram.size() << " streamlines from "
                  << result.n_seeds << " seeds -> " << tk_out << "\n";
        for (const auto& [reason, count] : result.stop_reasons)
          std::cout << "  " << tracker::stop_reason_name(reason) << " " << count << "\n";
      } else if (*cmd_score) {
        require_file(sc_rec);
        require_file((fs::path(sc_gt) / pipeline::files::gt_tracts).string());
        const auto report = pipeline::run_score(sc_rec, sc_gt, sc_out, sc_step);
        std::cout << metrics::format_score_table(report);
      } else if (*cmd_attn) {
        const auto ref = parse_trx_ref(at_ref);
        for (const auto& f : {at_model, at_sh, ref.path}) require_file(f);
        pipeline::run_attn_dump(at_model, at_sh, ref.path, ref.index, at_layer, at_head, at_out);
        std::cout << "attn-dump: wrote " << at_out << "\n";
      } else if (*cmd_ablate) {
        require_file(ab_train_cfg);
        require_file(ab_track_cfg);
        const auto rows =
            pipeline::run_ablate(ab_data, ab_out, ab_train_cfg, ab_track_cfg, n_threads);
        std::cout << "row,dice,overlap,overreach,vc,vb\n";
        for (const auto& row : rows)
          std::cout << row.name << ',' << row.score.whole.dice << ',' << row.score.whole.overlap
                    << ',' << row.score.whole.overreach << ',' << row.score.vc << ','
                    << row.score.vb << "\n";
      }
    } catch (const CLI::ValidationError& e) {
      std::cerr << e.what() << "\n";
      std::cerr << "run 'tractoformer --help' for usage\n";
      return 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
