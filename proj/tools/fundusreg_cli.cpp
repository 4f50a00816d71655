// fundusreg command-line driver: register single pairs, process manifest
// batches, run the simulated-montage validation, and inspect saved models.

#include "fundusreg/pipeline.hpp"
#include "fundusreg/synthetic.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace fundusreg;
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string mode = "auto";
  std::string modes = "blend";
};

void add_common_options(CLI::App* cmd, PipelineConfig& cfg, CommonFlags& fl) {
  cmd->add_option("--config", fl.config_path,
                  "key=value configuration file (applied before flags)");
  cmd->add_option("--mode", fl.mode, "distortion mode: one|two|auto")
      ->check(CLI::IsMember({"one", "two", "auto"}));
  cmd->add_option("--seed", cfg.fit.seed, "random seed for the fit");
  cmd->add_option("--ratio", cfg.lowe_ratio, "Lowe ratio threshold");
  cmd->add_option("--epsilon", cfg.fit.epsilon, "error tolerance (normalised)");
  cmd->add_option("--tol", cfg.fit.tol, "relative error-change tolerance");
  cmd->add_option("--max-iter", cfg.fit.max_iter, "iteration cap");
  cmd->add_option("--k-bound", cfg.fit.k_bound, "distortion coefficient bound");
  cmd->add_option("--ransac-samples", cfg.fit.ransac_samples,
                  "homography samples per attempt");
  cmd->add_option("--scale-gate", cfg.fit.scale_gate,
                  "max relative scale difference");
  cmd->add_option("--scale-retries", cfg.fit.scale_retries,
                  "homography re-estimation attempts");
  cmd->add_option("--max-keypoints", cfg.sift.max_keypoints,
                  "keypoint cap per image");
  cmd->add_option("--kernel-scale", cfg.stabilise_kernel_scale,
                  "stabilisation kernel width as a fraction of the FOV radius");
  cmd->add_option("--cache-dir", cfg.cache_dir, "keypoint cache directory");
  cmd->add_flag("--trace", cfg.write_trace, "write fit trace JSON");
  cmd->add_flag("--dump-preprocessed", cfg.dump_preprocessed,
                "write stabilised images");
  cmd->add_flag("--bicubic", cfg.bicubic, "bicubic instead of bilinear warping");
  cmd->add_option("--modes", fl.modes,
                  "composite modes, comma separated: blend,checker,diff");
  cmd->add_option("--success-threshold", cfg.success_threshold_px,
                  "residual mean (px) below which a pair counts as success");
}

void finalise_config(PipelineConfig& cfg, const CommonFlags& fl) {
  if (fl.mode == "one") cfg.fit.mode = FitMode::one_distortion;
  else if (fl.mode == "two") cfg.fit.mode = FitMode::two_distortions;
  else cfg.fit.mode = FitMode::auto_mode;

  cfg.composite_modes.clear();
  std::stringstream ss(fl.modes);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "blend") cfg.composite_modes.push_back(CompositeMode::blend);
    else if (item == "checker" || item == "checkerboard")
      cfg.composite_modes.push_back(CompositeMode::checkerboard);
    else if (item == "diff" || item == "difference")
      cfg.composite_modes.push_back(CompositeMode::difference);
    else if (!item.empty())
      throw CLI::ValidationError("--modes", "unknown composite mode: " + item);
  }
}

/// --config must take effect before flag overrides, so it is applied from a
/// pre-scan of argv before CLI11 assigns anything.
void preload_config(int argc, char** argv, PipelineConfig& cfg) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) {
      load_config_file(cfg, argv[i + 1]);
    } else if (arg.rfind("--config=", 0) == 0) {
      load_config_file(cfg, arg.substr(9));
    }
  }
}

bool parse_size(const std::string& text, int& w, int& h) {
  const auto x = text.find('x');
  if (x == std::string::npos) return false;
  try {
    w = std::stoi(text.substr(0, x));
    h = std::stoi(text.substr(x + 1));
  } catch (...) {
    return false;
  }
  return w > 0 && h > 0;
}

int cmd_register(const PairJob& job) {
  const RegistrationReport rep = run_pair(job);
  std::printf("status: %s\n", to_string(rep.status));
  if (!rep.message.empty()) std::printf("message: %s\n", rep.message.c_str());
  std::printf("keypoints: %d / %d, correspondences: %d\n", rep.keypoints1,
              rep.keypoints2, rep.final_correspondences);
  if (rep.residuals)
    std::printf("residual mean: %.3f px (std %.3f, max %.3f)\n",
                rep.residuals->mean_px, rep.residuals->std_px,
                rep.residuals->max_px);
  if (rep.model)
    std::printf("k1 = %.5f, k2 = %.5f, fit_error = %.4f px, mode = %s\n",
                rep.model->d1.k, rep.model->d2.k, rep.model->fit_error,
                to_string(rep.model->mode));
  std::printf("overlap: %.3f\n", rep.overlap_fraction);
  if (!job.output_dir.empty())
    std::printf("outputs in %s\n", job.output_dir.c_str());
  return (rep.status == PairStatus::ok ||
          rep.status == PairStatus::gate_failed_warning)
             ? 0
             : 1;
}

int cmd_batch(const std::string& manifest, int parallel, bool keep_going,
              const std::string& summary_path, const PipelineConfig& cfg) {
  BatchSummary summary;
  try {
    summary = run_batch(manifest, parallel, cfg, keep_going);
  } catch (const Error& e) {
    std::fprintf(stderr, "batch failed: %s\n", e.what());
    return 1;
  }
  const std::string csv = batch_summary_csv(summary);
  if (!summary_path.empty())
    detail::write_text_atomic(summary_path, csv);
  else
    std::fputs(csv.c_str(), stdout);
  std::printf("pairs: %d ok, %d failed, %d malformed, %d not run\n",
              summary.ok, summary.failed, summary.malformed,
              summary.unprocessed);
  std::printf("success fraction: %.3f\n", summary.success_fraction);
  if (summary.clean()) return 0;
  if (summary.aborted_early && !keep_going) return 1;
  return 2;
}

int cmd_montage(const std::string& input, const std::string& size_str,
                const std::string& target_str, int seeds, uint64_t base_seed,
                double overlap, const std::string& out_dir,
                PipelineConfig cfg) {
  int w = 1024, h = 1024;
  if (!size_str.empty() && !parse_size(size_str, w, h)) {
    std::fprintf(stderr, "bad --size, expected WxH\n");
    return 1;
  }
  int tw = 0, th = 0;
  if (!target_str.empty() && !parse_size(target_str, tw, th)) {
    std::fprintf(stderr, "bad --target-size, expected WxH\n");
    return 1;
  }
  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << "seed,mode,mean_px,std_px,rel_image_pct,rel_vessel_pct\n";
  int failures = 0;

  for (int s = 0; s < seeds; ++s) {
    const uint64_t seed = base_seed + s;
    try {
      const RasterImage img1 =
          input.empty() ? synthetic_fundus(w, h, static_cast<uint32_t>(seed))
                        : load_image(input);
      auto deform = GroundTruthDeformation::randomised(seed);
      deform.overlap_target = overlap;
      deform.target_width = tw;
      deform.target_height = th;
      const MontagePair mp = make_montage(img1, deform, seed);

      const fs::path dir = fs::path(out_dir) / ("seed_" + std::to_string(seed));
      fs::create_directories(dir);
      save_image(img1, (dir / "image1.png").string());
      save_image(mp.image2, (dir / "image2.png").string());
      nlohmann::json truth;
      truth["seed"] = seed;
      truth["model"] = model_to_json(mp.truth);
      truth["measured_overlap"] = mp.measured_overlap;
      truth["landmarks"] = nlohmann::json::array();
      for (const auto& [l1, l2] : mp.landmarks.pairs)
        truth["landmarks"].push_back({l1.x(), l1.y(), l2.x(), l2.y()});
      detail::write_text_atomic(dir / "truth.json", truth.dump(2) + "\n");

      // Fit through the full pipeline.
      const FovMask fov1 = detect_fov(img1);
      const FovMask fov2 = detect_fov(mp.image2);
      const RasterImage stab1 =
          stabilise_colour(img1, fov1, cfg.stabilise_kernel_scale);
      const RasterImage stab2 =
          stabilise_colour(mp.image2, fov2, cfg.stabilise_kernel_scale);
      cfg.fit.seed = seed;
      const auto matched = match_three_step(stab1, stab2, fov1, fov2,
                                            cfg.sift, cfg.lowe_ratio, cfg.fit);
      ImagePairMeta meta;
      meta.width1 = img1.width;
      meta.height1 = img1.height;
      meta.width2 = mp.image2.width;
      meta.height2 = mp.image2.height;
      const auto [model, trace] = fit(matched.corr, cfg.fit, meta);
      const MontageScore score =
          score_montage(mp.landmarks, model, mp.image2.width,
                        mp.image2.height, fov1.centre, fov1.radius,
                        cfg.vessel_calibre_px);
      detail::write_text_atomic(dir / "fitted_model.json",
                                model_to_json(model).dump(2) + "\n");
      csv << seed << ',' << to_string(model.mode) << ',' << score.mean_px
          << ',' << score.std_px << ',' << score.rel_image_pct << ','
          << score.rel_vessel_pct << '\n';
      std::printf("seed %llu: mean %.3f px, std %.3f px (overlap %.3f)\n",
                  static_cast<unsigned long long>(seed), score.mean_px,
                  score.std_px, mp.measured_overlap);
    } catch (const std::exception& e) {
      ++failures;
      csv << seed << ",error,,,,\n";
      std::fprintf(stderr, "seed %llu failed: %s\n",
                   static_cast<unsigned long long>(seed), e.what());
    }
  }
  detail::write_text_atomic(fs::path(out_dir) / "scores.csv", csv.str());
  return failures == 0 ? 0 : 1;
}

int cmd_inspect(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::fprintf(stderr, "cannot read %s\n", path.c_str());
    return 1;
  }
  nlohmann::json j;
  try {
    in >> j;
    if (j.contains("model")) j = j["model"];
    const RegistrationModel m = model_from_json(j);
    std::printf("%s\n", model_to_json(m).dump(2).c_str());
    const AffineDecomposition dec = decompose_affine(m.H);
    std::printf("decomposition: theta = %.4f deg, phi = %.4f deg, "
                "lambda = (%.6f, %.6f), scale ratio = %.6f\n",
                dec.theta * 180.0 / M_PI, dec.phi * 180.0 / M_PI, dec.lambda1,
                dec.lambda2, scale_ratio(m.H));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "invalid model file: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Longitudinal eye-fundus image registration"};
  app.require_subcommand(1);

  PipelineConfig cfg;
  try {
    preload_config(argc, argv, cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  }

  // register
  auto* reg = app.add_subcommand("register", "register one image pair");
  std::string moving, reference, out_dir = "fundusreg_out";
  CommonFlags reg_fl;
  reg->add_option("moving", moving, "moving image path")->required();
  reg->add_option("reference", reference, "reference image path")->required();
  reg->add_option("--out-dir", out_dir, "output directory");
  add_common_options(reg, cfg, reg_fl);

  // batch
  auto* batch = app.add_subcommand("batch", "run a manifest of pairs");
  std::string manifest, summary_path;
  int parallel = 1;
  bool keep_going = false;
  CommonFlags batch_fl;
  batch->add_option("manifest", manifest,
                    "CSV manifest: moving,reference,eye,field,outdir")
      ->required();
  batch->add_option("--parallel", parallel, "concurrent pairs")
      ->check(CLI::PositiveNumber);
  batch->add_flag("--keep-going", keep_going,
                  "continue after pair failures");
  batch->add_option("--summary", summary_path, "summary CSV path");
  add_common_options(batch, cfg, batch_fl);

  // montage
  auto* montage =
      app.add_subcommand("montage", "simulated-montage validation");
  std::string mt_input, mt_size = "1024x1024", mt_target, mt_out = "montage_out";
  int mt_seeds = 1;
  double mt_overlap = 0.8;
  CommonFlags mt_fl;
  montage->add_option("--input", mt_input,
                      "source fundus image (omit for synthetic)");
  montage->add_option("--size", mt_size, "synthetic source size WxH");
  montage->add_option("--target-size", mt_target,
                      "second-camera size WxH (defaults to the source size)");
  montage->add_option("--seeds", mt_seeds, "number of seeds to run")
      ->check(CLI::PositiveNumber);
  montage->add_option("--overlap", mt_overlap, "FOV overlap target");
  montage->add_option("--out-dir", mt_out, "output directory");
  add_common_options(montage, cfg, mt_fl);

  // inspect
  auto* inspect = app.add_subcommand("inspect", "print a saved model");
  std::string model_path;
  inspect->add_option("model", model_path, "model.json or report.json")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (reg->parsed()) {
      finalise_config(cfg, reg_fl);
      PairJob job;
      job.moving_path = moving;
      job.reference_path = reference;
      job.output_dir = out_dir;
      job.config = cfg;
      return cmd_register(job);
    }
    if (batch->parsed()) {
      finalise_config(cfg, batch_fl);
      return cmd_batch(manifest, parallel, keep_going, summary_path, cfg);
    }
    if (montage->parsed()) {
      finalise_config(cfg, mt_fl);
      return cmd_montage(mt_input, mt_size, mt_target, mt_seeds, cfg.fit.seed,
                         mt_overlap, mt_out, cfg);
    }
    if (inspect->parsed()) return cmd_inspect(model_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
