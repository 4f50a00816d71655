// fundusreg/pipeline.hpp
//
// Batch driver: run the preprocess -> features -> estimation -> warp chain
// on an image pair, emit machine-readable reports, and process manifest
// files with bounded parallelism. A single pair failure never aborts a
// batch; the status field carries it.

#pragma once

#include "fundusreg/estimation.hpp"
#include "fundusreg/fov.hpp"
#include "fundusreg/io.hpp"
#include "fundusreg/matching.hpp"
#include "fundusreg/montage.hpp"
#include "fundusreg/sift.hpp"
#include "fundusreg/stabilise.hpp"
#include "fundusreg/warp.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace fundusreg {

struct PipelineConfig {
  FitConfig fit;
  SiftParams sift;
  double lowe_ratio = 0.8;
  double stabilise_kernel_scale = 0.25;
  double success_threshold_px = 30.0;  // one vessel calibre
  double vessel_calibre_px = 30.0;
  bool dump_preprocessed = false;
  bool write_trace = false;
  bool bicubic = false;
  std::string cache_dir;
  std::vector<CompositeMode> composite_modes{CompositeMode::blend};
};

enum class PairStatus {
  ok,
  insufficient_features,
  insufficient_matches,
  degenerate,
  gate_failed_warning,
  io_error,
};

inline const char* to_string(PairStatus s) {
  switch (s) {
    case PairStatus::ok: return "ok";
    case PairStatus::insufficient_features: return "insufficient-features";
    case PairStatus::insufficient_matches: return "insufficient-matches";
    case PairStatus::degenerate: return "degenerate";
    case PairStatus::gate_failed_warning: return "gate-failed-warning";
    case PairStatus::io_error: return "io-error";
  }
  return "";
}

struct PairJob {
  std::string moving_path;
  std::string reference_path;
  std::string eye = "unknown";    // left | right | unknown
  std::string field = "unknown";  // nasal | macular | unknown
  std::string output_dir;         // empty: nothing is written
  PipelineConfig config;
};

struct StageTimings {
  double load_ms = 0.0;
  double preprocess_ms = 0.0;
  double features_ms = 0.0;
  double matching_ms = 0.0;
  double fit_ms = 0.0;
  double warp_ms = 0.0;
  double total_ms = 0.0;
};

struct RegistrationReport {
  static constexpr int kSchema = 1;
  PairStatus status = PairStatus::ok;
  std::string message;
  std::string moving_path, reference_path, eye, field;

  int keypoints1 = 0, keypoints2 = 0;
  int ratio_matches = 0;
  int filtered_matches = 0;       // after the first vector-filter pass
  int final_correspondences = 0;
  bool homography_fallback = false;

  std::optional<RegistrationModel> model;
  std::optional<ResidualStats> residuals;
  double overlap_fraction = 0.0;
  std::string termination;
  StageTimings timings;

  bool success(double threshold_px) const {
    return status == PairStatus::ok && residuals &&
           residuals->mean_px <= threshold_px;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = kSchema;
    j["status"] = to_string(status);
    if (!message.empty()) j["message"] = message;
    j["moving"] = moving_path;
    j["reference"] = reference_path;
    j["eye"] = eye;
    j["field"] = field;
    j["keypoints"] = {{"moving", keypoints1},
                      {"reference", keypoints2},
                      {"ratio_matches", ratio_matches},
                      {"after_vector_filter", filtered_matches},
                      {"final_correspondences", final_correspondences}};
    j["homography_fallback"] = homography_fallback;
    if (model) j["model"] = model_to_json(*model);
    if (residuals)
      j["residuals"] = {{"count", residuals->count},
                        {"mean_px", residuals->mean_px},
                        {"std_px", residuals->std_px},
                        {"max_px", residuals->max_px},
                        {"rel_image_pct", residuals->rel_image_pct},
                        {"rel_vessel_pct", residuals->rel_vessel_pct}};
    j["overlap_fraction"] = overlap_fraction;
    if (!termination.empty()) j["termination"] = termination;
    j["timings_ms"] = {{"load", timings.load_ms},
                       {"preprocess", timings.preprocess_ms},
                       {"features", timings.features_ms},
                       {"matching", timings.matching_ms},
                       {"fit", timings.fit_ms},
                       {"warp", timings.warp_ms},
                       {"total", timings.total_ms}};
    return j;
  }
};

namespace detail {

inline void write_text_atomic(const std::filesystem::path& path,
                              const std::string& content) {
  namespace fs = std::filesystem;
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out)
      fail(ErrorCode::io_error, "cannot write " + path.string());
    out << content;
  }
  fs::rename(tmp, path);
}

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

inline uint64_t path_hash(const std::string& s) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Keypoint detection with an optional text cache keyed by path and shape.
inline std::vector<Keypoint> keypoints_cached(const RasterImage& stabilised,
                                              const FovMask& fov,
                                              const std::string& source_path,
                                              const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.cache_dir.empty())
    return detect_keypoints(stabilised, fov, cfg.sift);
  char name[64];
  std::snprintf(name, sizeof(name), "%016llx_%dx%d.sift",
                static_cast<unsigned long long>(path_hash(source_path)),
                stabilised.width, stabilised.height);
  const fs::path cache = fs::path(cfg.cache_dir) / name;
  if (fs::exists(cache)) {
    auto kps = read_keypoints(cache.string());
    if (kps.size() >= 4) return kps;
  }
  auto kps = detect_keypoints(stabilised, fov, cfg.sift);
  fs::create_directories(cfg.cache_dir);
  write_keypoints(cache.string(), kps);
  return kps;
}

inline PairStatus status_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::insufficient_features:
      return PairStatus::insufficient_features;
    case ErrorCode::insufficient_matches:
    case ErrorCode::insufficient_correspondences:
      return PairStatus::insufficient_matches;
    case ErrorCode::io_error:
      return PairStatus::io_error;
    default:
      return PairStatus::degenerate;
  }
}

}  // namespace detail

/// Registers one pair end to end; all failures are reported in the status,
/// never thrown.
inline RegistrationReport run_pair(const PairJob& job) {
  namespace fs = std::filesystem;
  const auto& cfg = job.config;
  RegistrationReport rep;
  rep.moving_path = job.moving_path;
  rep.reference_path = job.reference_path;
  rep.eye = job.eye;
  rep.field = job.field;
  const auto t_start = std::chrono::steady_clock::now();

  try {
    auto t0 = std::chrono::steady_clock::now();
    const RasterImage img1 = load_image(job.moving_path);
    const RasterImage img2 = load_image(job.reference_path);
    rep.timings.load_ms = detail::ms_since(t0);

    t0 = std::chrono::steady_clock::now();
    const FovMask fov1 = detect_fov(img1);
    const FovMask fov2 = detect_fov(img2);
    const RasterImage stab1 =
        stabilise_colour(img1, fov1, cfg.stabilise_kernel_scale);
    const RasterImage stab2 =
        stabilise_colour(img2, fov2, cfg.stabilise_kernel_scale);
    rep.timings.preprocess_ms = detail::ms_since(t0);
    if (cfg.dump_preprocessed && !job.output_dir.empty()) {
      fs::create_directories(job.output_dir);
      save_image(stab1, (fs::path(job.output_dir) / "moving_pre.png").string());
      save_image(stab2,
                 (fs::path(job.output_dir) / "reference_pre.png").string());
    }

    t0 = std::chrono::steady_clock::now();
    const auto kp1 =
        detail::keypoints_cached(stab1, fov1, job.moving_path, cfg);
    const auto kp2 =
        detail::keypoints_cached(stab2, fov2, job.reference_path, cfg);
    rep.keypoints1 = static_cast<int>(kp1.size());
    rep.keypoints2 = static_cast<int>(kp2.size());
    rep.timings.features_ms = detail::ms_since(t0);

    t0 = std::chrono::steady_clock::now();
    const auto matched = match_three_step_points(
        kp1, kp2, img1.width, img1.height, img2.width, img2.height,
        cfg.lowe_ratio, cfg.fit);
    rep.ratio_matches = matched.ratio_matches;
    rep.filtered_matches = matched.after_first_filter;
    rep.final_correspondences = matched.corr.count();
    rep.homography_fallback = matched.homography_fallback;
    rep.timings.matching_ms = detail::ms_since(t0);

    t0 = std::chrono::steady_clock::now();
    ImagePairMeta meta;
    meta.width1 = img1.width;
    meta.height1 = img1.height;
    meta.width2 = img2.width;
    meta.height2 = img2.height;
    const auto [model, trace] = fit(matched.corr, cfg.fit, meta);
    rep.model = model;
    rep.termination = to_string(trace.termination);
    rep.timings.fit_ms = detail::ms_since(t0);
    rep.residuals =
        residual_stats(model, matched.corr, img2.width, img2.height,
                       cfg.vessel_calibre_px);

    t0 = std::chrono::steady_clock::now();
    const WarpResult warp = warp_image(img1, model, img2.width, img2.height,
                                       &fov1, &fov2, Vec2::Zero(),
                                       cfg.bicubic);
    rep.overlap_fraction = warp.overlap_fraction;
    if (!job.output_dir.empty()) {
      for (CompositeMode mode : cfg.composite_modes) {
        const RasterImage comp = composite(warp, img2, mode);
        save_image(comp, (fs::path(job.output_dir) /
                          (std::string(to_string(mode)) + ".png"))
                             .string());
      }
    }
    rep.timings.warp_ms = detail::ms_since(t0);

    rep.status = trace.gate_failed ? PairStatus::gate_failed_warning
                                   : PairStatus::ok;
    if (!job.output_dir.empty()) {
      detail::write_text_atomic(fs::path(job.output_dir) / "model.json",
                                model_to_json(model).dump(2) + "\n");
      if (cfg.write_trace)
        detail::write_text_atomic(fs::path(job.output_dir) / "trace.json",
                                  trace.to_json().dump(2) + "\n");
    }
  } catch (const Error& e) {
    rep.status = detail::status_for(e);
    rep.message = e.what();
  } catch (const std::exception& e) {
    rep.status = PairStatus::degenerate;
    rep.message = e.what();
  }

  rep.timings.total_ms = detail::ms_since(t_start);
  if (!job.output_dir.empty()) {
    try {
      detail::write_text_atomic(
          std::filesystem::path(job.output_dir) / "report.json",
          rep.to_json().dump(2) + "\n");
    } catch (const Error& e) {
      rep.status = PairStatus::io_error;
      rep.message = e.what();
    }
  }
  return rep;
}

// --- batch -------------------------------------------------------------------

struct ManifestRow {
  int line = 0;
  PairJob job;
  std::string parse_error;  // non-empty: row skipped
};

/// Manifest CSV: moving,reference,eye,field,outdir (a header row with these
/// names is allowed). No quoting; fields must not contain commas.
inline std::vector<ManifestRow> parse_manifest(const std::string& path,
                                               const PipelineConfig& base) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io_error, "cannot read manifest: " + path);
  std::vector<ManifestRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n'))
      line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) {
      const auto b = f.find_first_not_of(" \t");
      const auto e = f.find_last_not_of(" \t");
      fields.push_back(b == std::string::npos ? "" : f.substr(b, e - b + 1));
    }
    if (line_no == 1 && !fields.empty() && fields[0] == "moving") continue;
    ManifestRow row;
    row.line = line_no;
    if (fields.size() != 5) {
      row.parse_error = "expected 5 fields, got " +
                        std::to_string(fields.size());
    } else if (fields[0].empty() || fields[1].empty()) {
      row.parse_error = "empty image path";
    } else {
      row.job.moving_path = fields[0];
      row.job.reference_path = fields[1];
      row.job.eye = fields[2].empty() ? "unknown" : fields[2];
      row.job.field = fields[3].empty() ? "unknown" : fields[3];
      row.job.output_dir = fields[4];
      row.job.config = base;
    }
    rows.push_back(row);
  }
  return rows;
}

struct BatchSummary {
  std::vector<ManifestRow> rows;
  std::vector<std::optional<RegistrationReport>> reports;  // by row index
  int parsed = 0;
  int ok = 0;
  int failed = 0;
  int malformed = 0;
  int unprocessed = 0;  // early abort without keep_going
  double success_fraction = 0.0;
  bool aborted_early = false;

  bool clean() const { return malformed == 0 && failed == 0 && !aborted_early; }
};

/// Runs every manifest job with at most `parallelism` concurrent pairs.
/// Without keep_going the batch stops claiming jobs after the first
/// failure. Reports are deterministic for a fixed seed regardless of the
/// parallelism level (timing fields aside).
inline BatchSummary run_batch(const std::string& manifest_path,
                              int parallelism, const PipelineConfig& base,
                              bool keep_going = false) {
  BatchSummary summary;
  summary.rows = parse_manifest(manifest_path, base);
  const int n = static_cast<int>(summary.rows.size());
  summary.reports.resize(n);

  std::atomic<int> next{0};
  std::atomic<bool> stop{false};
  auto worker = [&]() {
    while (!stop.load(std::memory_order_relaxed)) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      auto& row = summary.rows[i];
      if (!row.parse_error.empty()) continue;
      RegistrationReport rep = run_pair(row.job);
      const bool success = rep.success(base.success_threshold_px);
      summary.reports[i] = std::move(rep);
      if (!success && !keep_going) stop.store(true, std::memory_order_relaxed);
    }
  };
  const int workers = std::max(1, std::min(parallelism, std::max(1, n)));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (int i = 0; i < n; ++i) {
    const auto& row = summary.rows[i];
    if (!row.parse_error.empty()) {
      ++summary.malformed;
      continue;
    }
    ++summary.parsed;
    if (!summary.reports[i]) {
      ++summary.unprocessed;
      summary.aborted_early = true;
      continue;
    }
    if (summary.reports[i]->success(base.success_threshold_px))
      ++summary.ok;
    else
      ++summary.failed;
  }
  summary.success_fraction =
      summary.parsed > 0 ? static_cast<double>(summary.ok) / summary.parsed
                         : 0.0;
  return summary;
}

/// Summary CSV: one row per manifest row plus a trailing aggregate comment.
inline std::string batch_summary_csv(const BatchSummary& summary) {
  std::ostringstream out;
  out << "moving,reference,eye,field,status,mean_px,overlap_fraction,"
         "termination,total_ms\n";
  for (size_t i = 0; i < summary.rows.size(); ++i) {
    const auto& row = summary.rows[i];
    if (!row.parse_error.empty()) {
      out << "line" << row.line << ",,,,malformed-row,,,,\n";
      continue;
    }
    const auto& rep = summary.reports[i];
    if (!rep) {
      out << row.job.moving_path << ',' << row.job.reference_path << ','
          << row.job.eye << ',' << row.job.field << ",not-run,,,,\n";
      continue;
    }
    out << rep->moving_path << ',' << rep->reference_path << ',' << rep->eye
        << ',' << rep->field << ',' << to_string(rep->status) << ',';
    if (rep->residuals) out << rep->residuals->mean_px;
    out << ',' << rep->overlap_fraction << ',' << rep->termination << ','
        << rep->timings.total_ms << '\n';
  }
  out << "# success_fraction=" << summary.success_fraction << '\n';
  return out.str();
}

// --- configuration file --------------------------------------------------------

/// Applies one `key=value` setting; unknown keys are an error so typos in
/// config files surface immediately.
inline void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                               const std::string& value) {
  auto as_double = [&](const std::string& v) {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size())
      fail(ErrorCode::invalid_argument, "bad numeric value for " + key);
    return d;
  };
  auto as_int = [&](const std::string& v) {
    return static_cast<int>(as_double(v));
  };
  if (key == "epsilon") cfg.fit.epsilon = as_double(value);
  else if (key == "tol") cfg.fit.tol = as_double(value);
  else if (key == "max_iter") cfg.fit.max_iter = as_int(value);
  else if (key == "k_bound") cfg.fit.k_bound = as_double(value);
  else if (key == "ransac_samples") cfg.fit.ransac_samples = as_int(value);
  else if (key == "scale_gate") cfg.fit.scale_gate = as_double(value);
  else if (key == "scale_retries") cfg.fit.scale_retries = as_int(value);
  else if (key == "seed") cfg.fit.seed = static_cast<uint64_t>(as_double(value));
  else if (key == "mode") {
    if (value == "one") cfg.fit.mode = FitMode::one_distortion;
    else if (value == "two") cfg.fit.mode = FitMode::two_distortions;
    else if (value == "auto") cfg.fit.mode = FitMode::auto_mode;
    else fail(ErrorCode::invalid_argument, "bad mode: " + value);
  }
  else if (key == "ratio") cfg.lowe_ratio = as_double(value);
  else if (key == "kernel_scale") cfg.stabilise_kernel_scale = as_double(value);
  else if (key == "max_keypoints") cfg.sift.max_keypoints = as_int(value);
  else if (key == "contrast_threshold")
    cfg.sift.contrast_threshold = as_double(value);
  else if (key == "edge_threshold") cfg.sift.edge_threshold = as_double(value);
  else if (key == "success_threshold_px")
    cfg.success_threshold_px = as_double(value);
  else if (key == "vessel_calibre_px")
    cfg.vessel_calibre_px = as_double(value);
  else
    fail(ErrorCode::invalid_argument, "unknown config key: " + key);
}

/// TOML-style `key = value` file; `#` comments and blank lines ignored.
inline void load_config_file(PipelineConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io_error, "cannot read config: " + path);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\"");
      const auto e = s.find_last_not_of(" \t\"\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) apply_config_entry(cfg, key, value);
  }
}

}  // namespace fundusreg
