#pragma once

// One JSON document drives a run: phantom geometry, loss weights, training
// settings, the regularizer operator, figure size, and I/O paths.  Parsing is
// strict (unknown keys are errors) so --set typos fail loudly instead of
// silently training with defaults.
//
// Per-case fields (tos_pattern, texture_seed) never appear here: they are
// derived from case seeds by the phantom command.

#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "densecine/io.hpp"
#include "densecine/jointmodel.hpp"
#include "densecine/phantom.hpp"
#include "densecine/registration.hpp"

namespace densecine {

struct PlotConfig {
  int width = 960;
  int height = 640;

  void validate() const {
    if (width < 16 || height < 16)
      throw std::invalid_argument("plot: figure size must be at least 16x16");
  }
};

struct RunConfig {
  PhantomSpec phantom;  // scalar geometry/noise fields only
  LossWeights loss;
  TrainConfig train;
  PlotConfig plot;
  std::string dataset_dir;
  std::string out_dir;

  void validate() const {
    phantom.validate();
    loss.validate();
    train.validate();
    plot.validate();
    if (train.reg_op.a < 0 || train.reg_op.b < 0 || train.reg_op.a + train.reg_op.b <= 0)
      throw std::invalid_argument("reg_op: need a, b >= 0 and a + b > 0");
  }
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<const char*> known,
                       const std::string& scope) {
  if (!j.is_object()) throw std::invalid_argument("config: " + scope + " must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw std::invalid_argument("config: unknown key " + scope + "." + item.key());
  }
}

template <typename T>
void pick(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["phantom"] = {{"grid_size", c.phantom.grid_size},
                  {"n_sectors", c.phantom.n_sectors},
                  {"t_cine", c.phantom.t_cine},
                  {"t_dense", c.phantom.t_dense},
                  {"cine_dt_ms", c.phantom.cine_dt_ms},
                  {"dense_dt_ms", c.phantom.dense_dt_ms},
                  {"inner_radius", c.phantom.inner_radius},
                  {"outer_radius", c.phantom.outer_radius},
                  {"peak_contraction", c.phantom.peak_contraction},
                  {"noise_sigma", c.phantom.noise_sigma}};
  j["loss"] = {{"sigma", c.loss.sigma},       {"alpha", c.loss.alpha},
               {"lambda_r", c.loss.lambda_r}, {"mu", c.loss.mu},
               {"beta", c.loss.beta},         {"gamma", c.loss.gamma},
               {"svd_rank", c.loss.svd_rank}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"seed", c.train.seed}};
  j["reg_op"] = {{"a", c.train.reg_op.a}, {"b", c.train.reg_op.b}};
  j["plot"] = {{"width", c.plot.width}, {"height", c.plot.height}};
  j["dataset_dir"] = c.dataset_dir;
  j["out_dir"] = c.out_dir;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::pick;
  check_keys(j, {"phantom", "loss", "train", "reg_op", "plot", "dataset_dir", "out_dir"},
             "config");
  RunConfig c;
  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    check_keys(p,
               {"grid_size", "n_sectors", "t_cine", "t_dense", "cine_dt_ms", "dense_dt_ms",
                "inner_radius", "outer_radius", "peak_contraction", "noise_sigma"},
               "phantom");
    pick(p, "grid_size", c.phantom.grid_size);
    pick(p, "n_sectors", c.phantom.n_sectors);
    pick(p, "t_cine", c.phantom.t_cine);
    pick(p, "t_dense", c.phantom.t_dense);
    pick(p, "cine_dt_ms", c.phantom.cine_dt_ms);
    pick(p, "dense_dt_ms", c.phantom.dense_dt_ms);
    pick(p, "inner_radius", c.phantom.inner_radius);
    pick(p, "outer_radius", c.phantom.outer_radius);
    pick(p, "peak_contraction", c.phantom.peak_contraction);
    pick(p, "noise_sigma", c.phantom.noise_sigma);
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, {"sigma", "alpha", "lambda_r", "mu", "beta", "gamma", "svd_rank"}, "loss");
    pick(l, "sigma", c.loss.sigma);
    pick(l, "alpha", c.loss.alpha);
    pick(l, "lambda_r", c.loss.lambda_r);
    pick(l, "mu", c.loss.mu);
    pick(l, "beta", c.loss.beta);
    pick(l, "gamma", c.loss.gamma);
    pick(l, "svd_rank", c.loss.svd_rank);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, {"epochs", "batch_size", "learning_rate", "seed"}, "train");
    pick(t, "epochs", c.train.epochs);
    pick(t, "batch_size", c.train.batch_size);
    pick(t, "learning_rate", c.train.learning_rate);
    pick(t, "seed", c.train.seed);
  }
  if (j.contains("reg_op")) {
    const auto& r = j.at("reg_op");
    check_keys(r, {"a", "b"}, "reg_op");
    pick(r, "a", c.train.reg_op.a);
    pick(r, "b", c.train.reg_op.b);
  }
  if (j.contains("plot")) {
    const auto& p = j.at("plot");
    check_keys(p, {"width", "height"}, "plot");
    pick(p, "width", c.plot.width);
    pick(p, "height", c.plot.height);
  }
  pick(j, "dataset_dir", c.dataset_dir);
  pick(j, "out_dir", c.out_dir);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(io::load_json(path));
}

inline void save_run_config(const std::string& path, const RunConfig& c) {
  io::save_json(path, to_json(c));
}

// --set KEY=VALUE: KEY is a dotted path into the config document; the path
// must already exist (overrides change values, they never invent settings).
// VALUE is parsed as JSON when possible, else taken as a string.
inline void apply_set_override(nlohmann::json& j, const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("--set expects KEY=VALUE, got: " + spec);
  const std::string key = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(part))
      throw std::invalid_argument("--set: no such config key: " + key);
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;
  if (node->is_string() && !value.is_string())
    throw std::invalid_argument("--set: " + key + " expects a string value");
  if (!node->is_string() && value.is_string())
    throw std::invalid_argument("--set: " + key + " expects " + std::string(node->type_name()) +
                                ", got string: " + raw);
  *node = value;
}

}  // namespace densecine
