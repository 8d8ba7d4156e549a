#pragma once

// Command-line front end. Lives in a header so the test suite can drive the
// same entry point in-process.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gsocc/gsocc.hpp"

namespace gsocc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Presets `mini`, `nuscenes`, `kitti`, or
/// `X,Y,Z,minx,miny,minz,maxx,maxy,maxz[,classes]` (classes default 6).
inline GridSpec parse_spec(const std::string& text) {
  if (text == "mini") return mini_street_spec();
  if (text == "nuscenes") return nuscenes_spec();
  if (text == "kitti") return kitti360_spec();
  std::vector<double> v;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw CLI::ValidationError("--spec", "bad number '" + tok + "'");
    }
  }
  if (v.size() != 9 && v.size() != 10) {
    throw CLI::ValidationError("--spec", "expected a preset or X,Y,Z,minx,miny,minz,maxx,maxy,maxz[,classes]");
  }
  GridSpec s;
  for (int k = 0; k < 3; ++k) {
    s.resolution[k] = static_cast<std::int64_t>(v[k]);
    s.min_corner[k] = v[3 + k];
    s.max_corner[k] = v[6 + k];
  }
  s.num_classes_total = v.size() == 10 ? static_cast<std::size_t>(v[9]) : scene_class::kTotal;
  try {
    s.validate();
  } catch (const InvalidParameter& e) {
    throw CLI::ValidationError("--spec", e.what());
  }
  return s;
}

/// `depth_min,depth_max,R`.
inline RaySampling parse_sampling(const std::string& text) {
  RaySampling s;
  char c1 = 0, c2 = 0;
  std::istringstream is(text);
  if (!(is >> s.depth_min >> c1 >> s.depth_max >> c2 >> s.num_refs) || c1 != ',' || c2 != ',') {
    throw CLI::ValidationError("--sampling", "expected depth_min,depth_max,R");
  }
  try {
    s.validate();
  } catch (const InvalidParameter& e) {
    throw CLI::ValidationError("--sampling", e.what());
  }
  return s;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
  return f;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  return f;
}

inline VoxelGrid load_grid(const std::string& path) {
  auto f = open_in(path);
  return read_grid(f);
}

inline GaussianSet load_gaussians(const std::string& path) {
  auto f = open_in(path);
  return read_gaussians(f);
}

/// Probabilistic sets carry one logit per semantic class, additive sets one more.
inline Model infer_model(const GaussianSet& gs, const GridSpec& spec, const std::string& requested) {
  if (requested != "auto") return parse_model(requested);
  if (gs.num_classes() + 1 == spec.num_classes_total) return Model::Probabilistic;
  if (gs.num_classes() == spec.num_classes_total) return Model::Additive;
  throw InvalidParameter("cannot infer model: set has " + std::to_string(gs.num_classes()) +
                         " logits but the grid has " + std::to_string(spec.num_classes_total) + " classes");
}

inline void write_report(const Report& r, const std::string& path, const std::string& format) {
  auto f = open_out(path);
  if (format == "json") {
    r.write_json(f);
  } else {
    r.write_kv(f);
  }
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Probabilistic Gaussian superposition toolkit for 3D semantic occupancy"};
  app.require_subcommand(1);
  unsigned threads = 0;
  bool deterministic = true;
  app.add_option("--threads", threads, "Worker cap (0 = all cores)");
  app.add_flag("--deterministic,!--fast", deterministic, "Compensated, order-insensitive reductions (default on)");

  // synth
  auto* synth = app.add_subcommand("synth", "Rasterize a synthetic scene to an OGRID file");
  std::string recipe = "mini-street", spec_text = "mini", synth_out, synth_meta;
  std::uint64_t synth_seed = 0;
  bool binary = false;
  synth->add_option("--recipe", recipe, "Scene recipe")->check(CLI::IsMember(recipe_names()));
  synth->add_option("--spec", spec_text, "Grid preset or X,Y,Z,minx,miny,minz,maxx,maxy,maxz[,classes]")
      ->check([](const std::string& s) {
        parse_spec(s);
        return std::string();
      });
  synth->add_option("--seed", synth_seed, "Placement seed");
  synth->add_option("--out", synth_out, "Output grid file")->required();
  synth->add_option("--meta", synth_meta, "Optional key=value metadata file");
  synth->add_flag("--binary", binary, "Write 16-bit binary labels");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Fit Gaussians to a reference grid");
  std::string fit_gt, fit_config, fit_model, fit_out, fit_trace;
  std::optional<std::uint64_t> fit_seed;
  std::optional<std::size_t> fit_count, fit_iters;
  fit_cmd->add_option("--gt", fit_gt, "Reference OGRID file")->required();
  fit_cmd->add_option("--config", fit_config, "key=value fit configuration");
  fit_cmd->add_option("--model", fit_model, "Override the configured model")
      ->check(CLI::IsMember({"probabilistic", "additive"}));
  fit_cmd->add_option("--seed", fit_seed, "Override the configured seed");
  fit_cmd->add_option("--num-gaussians", fit_count, "Override the configured number of Gaussians");
  fit_cmd->add_option("--iterations", fit_iters, "Override the configured iteration count");
  fit_cmd->add_option("--out", fit_out, "Output GSOCC file")->required();
  fit_cmd->add_option("--trace", fit_trace, "Output CSV trace");

  // voxelize
  auto* vox = app.add_subcommand("voxelize", "Label a grid from a Gaussian set");
  std::string vox_in, vox_like, vox_model = "auto", vox_out;
  vox->add_option("--gaussians", vox_in, "GSOCC file")->required();
  vox->add_option("--like", vox_like, "OGRID file whose spec is reused")->required();
  vox->add_option("--model", vox_model)->check(CLI::IsMember({"auto", "probabilistic", "additive"}));
  vox->add_option("--out", vox_out, "Output grid file")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "IoU / mIoU of a Gaussian set against a reference grid");
  std::string eval_pred, eval_gt, eval_report, eval_model = "auto", eval_format = "kv";
  eval->add_option("--pred-gaussians", eval_pred, "GSOCC file")->required();
  eval->add_option("--gt", eval_gt, "Reference OGRID file")->required();
  eval->add_option("--report", eval_report, "Output report")->required();
  eval->add_option("--model", eval_model)->check(CLI::IsMember({"auto", "probabilistic", "additive"}));
  eval->add_option("--format", eval_format)->check(CLI::IsMember({"kv", "json"}));

  // audit
  auto* audit_cmd = app.add_subcommand("audit", "Position and overlap utilization of a Gaussian set");
  std::string audit_in, audit_gt, audit_report, audit_format = "kv";
  std::uint64_t mc_samples = 100000, audit_seed = 0;
  audit_cmd->add_option("--gaussians", audit_in, "GSOCC file")->required();
  audit_cmd->add_option("--gt", audit_gt, "Reference OGRID file")->required();
  audit_cmd->add_option("--mc-samples", mc_samples, "Monte Carlo samples")->check(CLI::PositiveNumber);
  audit_cmd->add_option("--seed", audit_seed, "Monte Carlo seed");
  audit_cmd->add_option("--report", audit_report, "Output report")->required();
  audit_cmd->add_option("--format", audit_format)->check(CLI::IsMember({"kv", "json"}));

  // rays
  auto* rays = app.add_subcommand("rays", "Per-pixel occupancy labels along camera rays");
  std::string rays_camera, rays_gt, rays_sampling = "1,51.2,64", rays_out;
  rays->add_option("--camera", rays_camera, "Camera description file")->required();
  rays->add_option("--gt", rays_gt, "Reference OGRID file")->required();
  rays->add_option("--sampling", rays_sampling, "depth_min,depth_max,R")->check([](const std::string& s) {
    parse_sampling(s);
    return std::string();
  });
  rays->add_option("--out", rays_out, "Output label file")->required();

  // slice
  auto* slice = app.add_subcommand("slice", "Export one grid slice as a PPM image");
  std::string slice_grid, slice_axis = "z", slice_out;
  std::int64_t slice_index = 0;
  slice->add_option("--grid", slice_grid, "OGRID file")->required();
  slice->add_option("--axis", slice_axis)->check(CLI::IsMember({"x", "y", "z"}));
  slice->add_option("--index", slice_index, "Slice index along the axis")->required();
  slice->add_option("--out", slice_out, "Output PPM")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  set_thread_cap(threads);
  EvalOptions eval_opts;
  eval_opts.deterministic = deterministic;

  try {
    if (*synth) {
      const auto scene = synth_scene(synth_seed, recipe, parse_spec(spec_text));
      auto f = open_out(synth_out);
      write_grid(f, scene.grid, binary ? GridEncoding::Binary : GridEncoding::Text);
      if (!synth_meta.empty()) {
        Report r;
        r.set("recipe", scene.metadata.recipe);
        r.set("seed", static_cast<std::int64_t>(scene.metadata.seed));
        for (std::size_t k = 0; k < scene.metadata.class_counts.size(); ++k) {
          r.set("count_" + std::to_string(k), static_cast<std::int64_t>(scene.metadata.class_counts[k]));
        }
        write_report(r, synth_meta, "kv");
      }
    } else if (*fit_cmd) {
      const auto gt = load_grid(fit_gt);
      FitConfig cfg;
      if (!fit_config.empty()) {
        auto f = open_in(fit_config);
        apply_fit_config(f, cfg);
      }
      if (!fit_model.empty()) cfg.model = parse_model(fit_model);
      if (fit_seed) cfg.seed = *fit_seed;
      if (fit_count) cfg.num_gaussians = *fit_count;
      if (fit_iters) cfg.iterations = *fit_iters;
      const auto result = fit(gt, cfg);
      auto f = open_out(fit_out);
      write_gaussians(f, result.gaussians);
      if (!fit_trace.empty()) {
        auto t = open_out(fit_trace);
        write_trace_csv(t, result);
      }
    } else if (*vox) {
      const auto like = load_grid(vox_like);
      const auto gs = load_gaussians(vox_in);
      const auto grid = voxelize(gs, like.spec(), eval_opts, infer_model(gs, like.spec(), vox_model));
      auto f = open_out(vox_out);
      write_grid(f, grid);
    } else if (*eval) {
      const auto gt = load_grid(eval_gt);
      const auto gs = load_gaussians(eval_pred);
      const Model model = infer_model(gs, gt.spec(), eval_model);
      auto r = occupancy_report(voxelize(gs, gt.spec(), eval_opts, model), gt);
      r.set("model", model_name(model));
      write_report(r, eval_report, eval_format);
    } else if (*audit_cmd) {
      const auto gt = load_grid(audit_gt);
      const auto gs = load_gaussians(audit_in);
      auto r = audit(gs, gt, mc_samples, audit_seed).to_report();
      r.set("seed", static_cast<std::int64_t>(audit_seed));
      write_report(r, audit_report, audit_format);
    } else if (*rays) {
      auto cf = open_in(rays_camera);
      const auto cam = read_camera(cf);
      const auto gt = load_grid(rays_gt);
      const auto labels = pixel_occupancy_labels(cam, gt, parse_sampling(rays_sampling));
      auto f = open_out(rays_out);
      write_pixel_labels(f, labels);
    } else if (*slice) {
      const auto grid = load_grid(slice_grid);
      const int axis = slice_axis == "x" ? 0 : slice_axis == "y" ? 1 : 2;
      const auto img = slice_image(grid, axis, slice_index);
      auto f = open_out(slice_out);
      write_ppm(f, img);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace gsocc::cli
