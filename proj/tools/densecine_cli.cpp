// densecine: phantom dataset generation, joint training, evaluation against
// the feature-tracking baseline, strain-matrix plots, and 3D activation maps.
//
// One JSON config drives everything; flags layer overrides on top of it
// (--set edits any key, DENSECINE_OUT > --out > config.out_dir).  Commands
// write only under the resolved output directory and are deterministic for a
// fixed seed, so re-running a command reproduces its outputs byte for byte.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "densecine/config.hpp"
#include "densecine/evalsuite.hpp"
#include "densecine/io.hpp"
#include "densecine/jointmodel.hpp"
#include "densecine/phantom.hpp"
#include "densecine/recon3d.hpp"
#include "densecine/strain.hpp"
#include "densecine/viz.hpp"

namespace {

using namespace densecine;
namespace fs = io::fs;

struct GlobalArgs {
  std::string config_path;
  std::string out_dir;
  int64_t seed = -1;  // <0 = not given
  bool force = false;
  std::vector<std::string> sets;
};

// defaults -> --config file -> --set edits -> flag/env overrides
RunConfig resolve_config(const GlobalArgs& g) {
  io::json doc = g.config_path.empty() ? to_json(RunConfig{}) : io::load_json(g.config_path);
  for (const std::string& s : g.sets) apply_set_override(doc, s);
  RunConfig cfg = run_config_from_json(doc);
  if (!g.out_dir.empty()) cfg.out_dir = g.out_dir;
  if (const char* env = std::getenv("DENSECINE_OUT"); env && *env) cfg.out_dir = env;
  if (g.seed >= 0) cfg.train.seed = static_cast<uint64_t>(g.seed);
  cfg.validate();
  return cfg;
}

fs::path require_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty())
    throw std::runtime_error("no output directory (set out_dir, --out, or DENSECINE_OUT)");
  return fs::path(cfg.out_dir);
}

fs::path require_dataset_dir(const RunConfig& cfg) {
  if (cfg.dataset_dir.empty()) throw std::runtime_error("config has no dataset_dir");
  if (!fs::exists(fs::path(cfg.dataset_dir) / "manifest.json"))
    throw std::runtime_error("no dataset manifest under " + cfg.dataset_dir);
  return fs::path(cfg.dataset_dir);
}

std::string case_name(uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%06llu", static_cast<unsigned long long>(seed));
  return buf;
}

std::vector<std::string> split_names(const io::json& manifest, const std::string& split) {
  const io::json& splits = manifest.at("splits");
  if (!splits.contains(split))
    throw std::runtime_error("dataset has no split named '" + split + "'");
  return splits.at(split).get<std::vector<std::string>>();
}

std::vector<PhantomCase> load_split(const fs::path& dataset, const io::json& manifest,
                                    const std::string& split) {
  std::vector<PhantomCase> cases;
  for (const std::string& name : split_names(manifest, split))
    cases.push_back(load_case(dataset / name));
  if (cases.empty()) throw std::runtime_error("split '" + split + "' is empty");
  return cases;
}

// ---- phantom ----------------------------------------------------------------

int cmd_phantom(const RunConfig& cfg, int count, uint64_t base_seed, bool force) {
  if (count < 1) throw std::runtime_error("phantom: --count must be >= 1");
  const fs::path out = require_out_dir(cfg);

  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force)
      throw std::runtime_error("output directory " + out.string() +
                               " is not empty (pass --force to regenerate)");
    const fs::path manifest_path = out / "manifest.json";
    if (!fs::exists(manifest_path))
      throw std::runtime_error("refusing --force: " + out.string() +
                               " is not a phantom dataset (no manifest.json)");
    // drop only what this command manages: the manifest and its case dirs
    const io::json old = io::load_json(manifest_path);
    for (const auto& [split, names] : old.at("splits").items())
      for (const auto& name : names) fs::remove_all(out / name.get<std::string>());
    fs::remove(manifest_path);
  }
  io::ensure_dir(out);

  const int n_train = static_cast<int>(std::llround(0.56 * count));
  const int n_val = static_cast<int>(std::llround(0.22 * count));

  io::json splits;
  splits["train"] = io::json::array();
  splits["val"] = io::json::array();
  splits["test"] = io::json::array();
  for (int i = 0; i < count; ++i) {
    const uint64_t seed = base_seed + static_cast<uint64_t>(i);
    const std::string name = case_name(seed);
    serialize_case(out / name, make_randomized_case(cfg.phantom, seed));
    splits[i < n_train ? "train" : (i < n_train + n_val ? "val" : "test")].push_back(name);
  }

  io::json manifest;
  manifest["kind"] = "phantom_dataset";
  manifest["count"] = count;
  manifest["base_seed"] = base_seed;
  manifest["spec"] = spec_to_json(cfg.phantom);
  manifest["splits"] = splits;
  io::save_json(out / "manifest.json", manifest);

  std::cout << "wrote " << count << " cases to " << out.string() << " (train/val/test = "
            << splits["train"].size() << "/" << splits["val"].size() << "/"
            << splits["test"].size() << ")\n";
  return 0;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const RunConfig& cfg) {
  const fs::path out = require_out_dir(cfg);
  const fs::path dataset = require_dataset_dir(cfg);
  const io::json manifest = io::load_json(dataset / "manifest.json");
  const std::vector<PhantomCase> train_set = load_split(dataset, manifest, "train");
  const std::vector<PhantomCase> val_set = load_split(dataset, manifest, "val");

  TrainConfig tc = cfg.train;
  tc.checkpoint_dir = (out / "checkpoint").string();  // loss log lands next to weights
  std::cout << "training on " << train_set.size() << " cases (" << val_set.size()
            << " validation), " << tc.epochs << " epochs\n";
  const TrainResult res = train_joint(train_set, val_set, cfg.loss, tc, [](const EpochStats& st) {
    std::printf("epoch %3d  total %10.4f  data %9.4f  strain %8.4f  tos %8.4f  val_tos %9.2f\n",
                st.epoch, st.train.total, st.train.data, st.train.strain_sup, st.train.tos_mse,
                st.val_tos_mse);
    std::fflush(stdout);
  });
  save_checkpoint(tc.checkpoint_dir, res.best);

  io::json summary;
  summary["epochs"] = static_cast<int>(res.history.size());
  summary["n_train"] = train_set.size();
  summary["n_val"] = val_set.size();
  summary["best_epoch"] = res.best_epoch;
  summary["best_val_tos_mse"] = res.best_val_tos_mse;
  summary["final_train_total"] = res.history.back().train.total;
  summary["max_component_gap"] = res.max_component_gap;
  io::save_json(out / "train_summary.json", summary);

  std::cout << "best epoch " << res.best_epoch << " (val TOS MSE " << res.best_val_tos_mse
            << "); checkpoint in " << tc.checkpoint_dir << "\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

std::vector<TOSCurve> predict_arm(const std::string& method, const std::vector<PhantomCase>& cases,
                                  const RunConfig& cfg, const ModelParams* params) {
  std::vector<TOSCurve> preds;
  preds.reserve(cases.size());
  for (const PhantomCase& cs : cases) {
    if (method == "joint") {
      if (!params) throw std::runtime_error("method 'joint' needs --checkpoint");
      preds.push_back(predict_case(*params, cs, cfg.loss).tos);
    } else if (method == "ft") {
      preds.push_back(classical_ft_baseline(cs, cfg.train.reg_op));
    } else if (method == "oracle") {
      preds.push_back(extract_tos(cs.gt_strain));
    } else {
      throw std::runtime_error("unknown method '" + method + "' (joint, ft, oracle)");
    }
  }
  return preds;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
             std::vector<std::string> methods, const std::string& split) {
  const fs::path out = require_out_dir(cfg);
  const fs::path dataset = require_dataset_dir(cfg);
  const io::json manifest = io::load_json(dataset / "manifest.json");
  const std::vector<std::string> ids = split_names(manifest, split);
  const std::vector<PhantomCase> cases = load_split(dataset, manifest, split);

  ModelParams params;
  const bool have_model = !checkpoint.empty();
  if (have_model) params = load_checkpoint(checkpoint);
  if (methods.empty())
    methods = have_model ? std::vector<std::string>{"joint", "ft", "oracle"}
                         : std::vector<std::string>{"ft", "oracle"};

  std::vector<TOSCurve> gts;
  for (const PhantomCase& cs : cases) gts.push_back(cs.gt_tos);

  io::ensure_dir(out);
  std::vector<EvalReport> reports;
  for (const std::string& m : methods) {
    const std::vector<TOSCurve> preds =
        predict_arm(m, cases, cfg, have_model ? &params : nullptr);
    EvalReport rep = evaluate(m, preds, gts, kLmaThresholdMs, ids);
    save_report_json(out / ("report_" + m + ".json"), rep);
    save_report_csv(out / ("report_" + m + ".csv"), rep);
    reports.push_back(std::move(rep));
  }
  std::cout << format_comparison_table(reports);
  return 0;
}

// ---- render3d ---------------------------------------------------------------

int cmd_render3d(const RunConfig& cfg, const std::string& checkpoint,
                 std::vector<std::string> methods, int slices, double slice_gap_mm,
                 int angular_samples, int z_samples) {
  if (slices < 2) throw std::runtime_error("render3d: --slices must be >= 2");
  const fs::path out = require_out_dir(cfg);
  const fs::path dataset = require_dataset_dir(cfg);
  const io::json manifest = io::load_json(dataset / "manifest.json");
  std::vector<PhantomCase> cases = load_split(dataset, manifest, "test");
  if (static_cast<int>(cases.size()) < slices)
    throw std::runtime_error("render3d: test split has fewer cases than --slices");
  cases.resize(static_cast<size_t>(slices));  // one test case per short-axis slice

  ModelParams params;
  const bool have_model = !checkpoint.empty();
  if (have_model) params = load_checkpoint(checkpoint);
  if (methods.empty())
    methods = have_model ? std::vector<std::string>{"joint", "ft", "oracle"}
                         : std::vector<std::string>{"ft", "oracle"};

  if (angular_samples <= 0) angular_samples = 2 * cfg.phantom.n_sectors;
  if (z_samples <= 0) z_samples = std::max(4 * slices, 32);

  io::ensure_dir(out);
  for (const std::string& m : methods) {
    const std::vector<TOSCurve> preds =
        predict_arm(m, cases, cfg, have_model ? &params : nullptr);
    SlicedStudy study;
    study.n_sectors = cfg.phantom.n_sectors;
    for (int i = 0; i < slices; ++i)
      study.slices.push_back({slice_gap_mm * i, cases[static_cast<size_t>(i)].myocardium,
                              preds[static_cast<size_t>(i)]});
    const ActivationSurface surf = reconstruct_surface(study, angular_samples, z_samples);
    const fs::path ply = out / ("activation_" + m + ".ply");
    export_surface(surf, ply);
    std::cout << "wrote " << ply.string() << " (" << surf.points.size() << " vertices)\n";
  }
  return 0;
}

// ---- plot -------------------------------------------------------------------

int cmd_plot(const RunConfig& cfg, const std::string& case_id, const std::string& method,
             const std::string& checkpoint) {
  const fs::path out = require_out_dir(cfg);
  const fs::path dataset = require_dataset_dir(cfg);
  const PhantomCase cs = load_case(dataset / case_id);

  StrainMatrix strain;
  TOSCurve tos;
  if (method == "joint") {
    if (checkpoint.empty()) throw std::runtime_error("method 'joint' needs --checkpoint");
    CasePrediction pred = predict_case(load_checkpoint(checkpoint), cs, cfg.loss);
    strain = std::move(pred.strain);
    tos = std::move(pred.tos);
  } else if (method == "ft") {
    tos = classical_ft_baseline(cs, cfg.train.reg_op, kFtSigma, kFtIters, kFtStep, nullptr,
                                &strain);
  } else if (method == "oracle") {
    strain = cs.gt_strain;
    tos = extract_tos(cs.gt_strain);
  } else {
    throw std::runtime_error("unknown method '" + method + "' (joint, ft, oracle)");
  }

  const RgbImage img =
      render_strain_plot(strain, tos, &cs.gt_tos, cfg.plot.width, cfg.plot.height);
  io::ensure_dir(out);
  const fs::path path = out / ("strain_" + case_id + "_" + method + ".ppm");
  write_ppm(path.string(), img);
  std::cout << "wrote " << path.string() << " (" << img.width << "x" << img.height << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phantom-driven strain and activation-time pipeline"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON config file (defaults when omitted)");
  app.add_option("--out", g.out_dir, "output directory (overrides config out_dir)");
  app.add_option("--seed", g.seed, "seed override (dataset base seed / training seed)");
  app.add_flag("--force", g.force, "overwrite an existing non-empty dataset directory");
  app.add_option("--set", g.sets, "config override KEY=VALUE, e.g. train.epochs=12")
      ->take_all();

  int count = 0;
  CLI::App* phantom = app.add_subcommand("phantom", "generate a phantom dataset");
  phantom->add_option("--count", count, "number of cases")->required();
  phantom->fallthrough();

  CLI::App* train = app.add_subcommand("train", "train the joint model on dataset_dir");
  train->fallthrough();

  std::string checkpoint;
  std::vector<std::string> methods;
  std::string split = "test";
  CLI::App* eval = app.add_subcommand("eval", "score methods on a dataset split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory for the joint model");
  eval->add_option("--method", methods, "methods to score (default: all available)");
  eval->add_option("--split", split, "dataset split to score (default test)");
  eval->fallthrough();

  int slices = 4;
  double slice_gap_mm = 8.0;
  int angular_samples = 0, z_samples = 0;
  CLI::App* render3d = app.add_subcommand("render3d", "export 3D activation maps as PLY");
  render3d->add_option("--checkpoint", checkpoint, "checkpoint directory for the joint model");
  render3d->add_option("--method", methods, "methods to render (default: all available)");
  render3d->add_option("--slices", slices, "short-axis slices in the study (default 4)");
  render3d->add_option("--slice-gap-mm", slice_gap_mm, "spacing between slices (default 8)");
  render3d->add_option("--angular-samples", angular_samples, "mesh angular resolution");
  render3d->add_option("--z-samples", z_samples, "mesh axial resolution");
  render3d->fallthrough();

  std::string case_id, method = "oracle";
  CLI::App* plot = app.add_subcommand("plot", "strain matrix with overlaid activation curve");
  plot->add_option("--case", case_id, "case directory name, e.g. case_000100")->required();
  plot->add_option("--method", method, "joint, ft, or oracle (default oracle)");
  plot->add_option("--checkpoint", checkpoint, "checkpoint directory for the joint model");
  plot->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve_config(g);
    if (*phantom)
      return cmd_phantom(cfg, count, g.seed >= 0 ? static_cast<uint64_t>(g.seed) : cfg.train.seed,
                         g.force);
    if (*train) return cmd_train(cfg);
    if (*eval) return cmd_eval(cfg, checkpoint, methods, split);
    if (*render3d)
      return cmd_render3d(cfg, checkpoint, methods, slices, slice_gap_mm, angular_samples,
                          z_samples);
    if (*plot) return cmd_plot(cfg, case_id, method, checkpoint);
  } catch (const std::exception& e) {
    std::cerr << "densecine: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
