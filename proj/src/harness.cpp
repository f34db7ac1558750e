// SPDX-License-Identifier: Apache-2.0
#include "mote/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <Eigen/SVD>
#include <json.hpp>

#include "mote/linalg.hpp"
#include "mote/rng.hpp"

namespace mote {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string layer_dir_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layer_%03zu", index);
  return buf;
}

bool parse_flag(const std::string& s) {
  if (s == "on" || s == "true" || s == "1" || s == "yes") return true;
  if (s == "off" || s == "false" || s == "0" || s == "no") return false;
  fail(errc::parse_failure, "expected on/off flag, got: " + s);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \t");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& what) {
  std::vector<std::size_t> out;
  for (const std::string& item : split_commas(s)) {
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      fail(errc::parse_failure, "bad integer in " + what + ": " + item);
    }
  }
  require(!out.empty(), errc::parse_failure, what + " must not be empty");
  return out;
}

double rel_dev(double num, double denom) { return num / std::max(denom, 1e-300); }

void check_known_keys(const Manifest& kv, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : kv) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    require(known, errc::parse_failure, "unknown config key: " + key);
  }
}

std::string format_ranks(const Ranks& r) {
  return std::to_string(r.r_e) + "," + std::to_string(r.r_out) + "," + std::to_string(r.r_in);
}

json provenance_json(const SolveProvenance& p, std::size_t layer_index) {
  return json{{"record", "solve"},
              {"layer_index", layer_index},
              {"solver", p.solver},
              {"lambda", p.lambda},
              {"facts", p.facts},
              {"experts", p.experts},
              {"d_hidden", p.d_hidden},
              {"ranks", {p.ranks.r_e, p.ranks.r_out, p.ranks.r_in}},
              {"design_ns", p.timings.design_ns},
              {"kernel_ns", p.timings.kernel_ns},
              {"factor_ns", p.timings.factor_ns},
              {"assemble_ns", p.timings.assemble_ns},
              {"total_ns", p.timings.total_ns()}};
}

json check_json(const IdentityCheck& c) {
  return json{{"record", "identity_check"},
              {"name", c.name},
              {"deviation", c.deviation},
              {"tolerance", c.tolerance},
              {"pass", c.pass}};
}

}  // namespace

void GenerateConfig::validate() const {
  require(layers >= 1, errc::invalid_argument, "layers must be >= 1");
  require(experts >= 1, errc::invalid_argument, "experts must be >= 1");
  require(top_k >= 1 && top_k <= experts, errc::invalid_argument,
          "top_k must satisfy 1 <= K <= E");
  require(d_model >= 1 && d_hidden >= 1, errc::invalid_argument,
          "dimensions must be positive");
  require(facts >= 1, errc::invalid_argument, "facts must be >= 1");
  require(lambda > 0.0, errc::invalid_argument, "lambda must be positive");
  require(residual_scale >= 0.0, errc::invalid_argument, "residual_scale must be >= 0");
}

Manifest GenerateConfig::to_manifest() const {
  Manifest kv;
  kv["layers"] = std::to_string(layers);
  kv["experts"] = std::to_string(experts);
  kv["top_k"] = std::to_string(top_k);
  kv["d_model"] = std::to_string(d_model);
  kv["d_hidden"] = std::to_string(d_hidden);
  kv["facts"] = std::to_string(facts);
  kv["preservation_samples"] = std::to_string(preservation_samples);
  kv["seed"] = std::to_string(seed);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", residual_scale);
  kv["residual_scale"] = buf;
  std::snprintf(buf, sizeof(buf), "%.17g", lambda);
  kv["lambda"] = buf;
  kv["activation"] = to_string(activation);
  kv["layout"] = to_string(layout);
  return kv;
}

GenerateConfig GenerateConfig::from_manifest(const Manifest& kv) {
  check_known_keys(kv, {"layers", "experts", "top_k", "d_model", "d_hidden", "facts",
                        "preservation_samples", "seed", "residual_scale", "lambda",
                        "activation", "layout"});
  GenerateConfig c;
  auto opt_int = [&](const char* key, std::size_t& field) {
    if (kv.count(key)) field = static_cast<std::size_t>(manifest_get_int(kv, key));
  };
  opt_int("layers", c.layers);
  opt_int("experts", c.experts);
  opt_int("top_k", c.top_k);
  opt_int("d_model", c.d_model);
  opt_int("d_hidden", c.d_hidden);
  opt_int("facts", c.facts);
  opt_int("preservation_samples", c.preservation_samples);
  if (kv.count("seed")) c.seed = static_cast<std::uint64_t>(manifest_get_int(kv, "seed"));
  if (kv.count("residual_scale")) c.residual_scale = manifest_get_double(kv, "residual_scale");
  if (kv.count("lambda")) c.lambda = manifest_get_double(kv, "lambda");
  if (kv.count("activation")) c.activation = activation_from_string(manifest_get(kv, "activation"));
  if (kv.count("layout")) c.layout = layout_from_string(manifest_get(kv, "layout"));
  c.validate();
  return c;
}

void cmd_generate(const GenerateConfig& config, const std::string& out_dir) {
  config.validate();
  fs::create_directories(out_dir);

  Rng master(config.seed);
  std::vector<std::uint64_t> layer_seeds(config.layers);
  for (auto& s : layer_seeds) s = master.next_u64();
  const std::uint64_t batch_seed = master.next_u64();
  const std::uint64_t pres_seed = master.next_u64();

  std::vector<MoELayer> layers;
  layers.reserve(config.layers);
  for (std::size_t i = 0; i < config.layers; ++i) {
    layers.push_back(make_random_layer(config.experts, config.top_k, config.d_model,
                                       config.d_hidden, layer_seeds[i], config.activation,
                                       config.layout));
    save_layer(out_dir + "/" + layer_dir_name(i), layers.back(), layer_seeds[i]);
  }

  const EditBatch batch = synthesize_batch(layers.back(), config.facts, batch_seed,
                                           config.residual_scale, config.lambda);
  Matrix inputs(config.d_model, config.facts);
  Matrix targets(config.d_model, config.facts);
  for (std::size_t t = 0; t < config.facts; ++t)
    for (std::size_t i = 0; i < config.d_model; ++i) {
      inputs(i, t) = batch.facts[t].x[static_cast<Eigen::Index>(i)];
      targets(i, t) = batch.facts[t].target_v[static_cast<Eigen::Index>(i)];
    }
  fs::create_directories(out_dir + "/batch");
  save_matrix(out_dir + "/batch/inputs.mte1", inputs);
  save_matrix(out_dir + "/batch/targets.mte1", targets);

  Rng pres_rng(pres_seed);
  Matrix pres_inputs(config.d_model, config.preservation_samples);
  for (std::size_t m = 0; m < config.preservation_samples; ++m)
    for (std::size_t i = 0; i < config.d_model; ++i) pres_inputs(i, m) = pres_rng.normal();
  fs::create_directories(out_dir + "/preservation");
  save_matrix(out_dir + "/preservation/inputs.mte1", pres_inputs);

  write_manifest(out_dir + "/manifest.txt", config.to_manifest());
}

Workspace load_workspace(const std::string& dir) {
  Workspace ws;
  ws.config = GenerateConfig::from_manifest(read_manifest(dir + "/manifest.txt"));
  ws.layers.reserve(ws.config.layers);
  for (std::size_t i = 0; i < ws.config.layers; ++i)
    ws.layers.push_back(load_layer(dir + "/" + layer_dir_name(i)));
  ws.batch_inputs = load_matrix(dir + "/batch/inputs.mte1");
  ws.batch_targets = load_matrix(dir + "/batch/targets.mte1");
  ws.pres_inputs = load_matrix(dir + "/preservation/inputs.mte1");
  require(ws.batch_inputs.rows() == ws.config.d_model &&
              ws.batch_inputs.cols() == ws.config.facts,
          errc::parse_failure, "batch inputs shape does not match manifest");
  require(ws.batch_targets.rows() == ws.config.d_model &&
              ws.batch_targets.cols() == ws.config.facts,
          errc::parse_failure, "batch targets shape does not match manifest");
  return ws;
}

EditBatch Workspace::batch_at(std::size_t layer_index) const {
  require(layer_index < layers.size(), errc::invalid_argument, "layer index out of range");
  EditBatch batch;
  batch.lambda = config.lambda;
  batch.facts.reserve(config.facts);
  for (std::size_t t = 0; t < config.facts; ++t)
    batch.facts.push_back(
        make_fact(layers[layer_index], batch_inputs.col(t), batch_targets.col(t)));
  return batch;
}

EditPlan plan_from_manifest(const Manifest& kv) {
  check_known_keys(kv, {"layers", "solver", "spread_mode", "lambda", "null_space",
                        "null_space_threshold", "whitening", "whitening_epsilon", "ranks",
                        "recompute_design", "bcd_iterations", "hooi_sweeps"});
  EditPlan plan;
  require(kv.count("layers") > 0, errc::parse_failure, "plan must set layers");
  plan.layers = parse_size_list(manifest_get(kv, "layers"), "layers");
  if (kv.count("solver")) plan.solver = solver_from_string(manifest_get(kv, "solver"));
  if (kv.count("spread_mode"))
    plan.spread_mode = spread_mode_from_string(manifest_get(kv, "spread_mode"));
  if (kv.count("lambda")) plan.lambda = manifest_get_double(kv, "lambda");
  if (kv.count("null_space")) plan.null_space = parse_flag(manifest_get(kv, "null_space"));
  if (kv.count("null_space_threshold"))
    plan.null_space_threshold = manifest_get_double(kv, "null_space_threshold");
  if (kv.count("whitening"))
    plan.whitening.mode = whitening_mode_from_string(manifest_get(kv, "whitening"));
  if (kv.count("whitening_epsilon"))
    plan.whitening.epsilon = manifest_get_double(kv, "whitening_epsilon");
  if (kv.count("ranks")) {
    const std::string spec = manifest_get(kv, "ranks");
    if (spec == "full") {
      plan.full_ranks = true;
    } else if (spec != "default") {
      const auto vals = parse_size_list(spec, "ranks");
      require(vals.size() == 3, errc::parse_failure, "ranks must be rE,rOut,rIn");
      plan.ranks = {vals[0], vals[1], vals[2]};
    }
  }
  if (kv.count("recompute_design"))
    plan.recompute_design = parse_flag(manifest_get(kv, "recompute_design"));
  if (kv.count("bcd_iterations"))
    plan.bcd_iterations = static_cast<std::size_t>(manifest_get_int(kv, "bcd_iterations"));
  if (kv.count("hooi_sweeps"))
    plan.hooi_sweeps = static_cast<std::size_t>(manifest_get_int(kv, "hooi_sweeps"));
  plan.validate();
  return plan;
}

EditPlan load_plan(const std::string& path) { return plan_from_manifest(read_manifest(path)); }

Manifest plan_to_manifest(const EditPlan& plan) {
  Manifest kv;
  std::string layers;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    if (i) layers += ",";
    layers += std::to_string(plan.layers[i]);
  }
  kv["layers"] = layers;
  kv["solver"] = to_string(plan.solver);
  kv["spread_mode"] = to_string(plan.spread_mode);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", plan.lambda);
  kv["lambda"] = buf;
  kv["null_space"] = plan.null_space ? "on" : "off";
  std::snprintf(buf, sizeof(buf), "%.17g", plan.null_space_threshold);
  kv["null_space_threshold"] = buf;
  kv["whitening"] = to_string(plan.whitening.mode);
  std::snprintf(buf, sizeof(buf), "%.17g", plan.whitening.epsilon);
  kv["whitening_epsilon"] = buf;
  kv["ranks"] = plan.full_ranks ? std::string("full")
                                : (plan.ranks == Ranks{} ? std::string("default")
                                                         : format_ranks(plan.ranks));
  kv["recompute_design"] = plan.recompute_design ? "on" : "off";
  kv["bcd_iterations"] = std::to_string(plan.bcd_iterations);
  kv["hooi_sweeps"] = std::to_string(plan.hooi_sweeps);
  return kv;
}

namespace {

Ranks resolve_ranks(const EditPlan& plan, const MoELayer& layer) {
  if (plan.full_ranks) return {layer.experts, layer.d_model, layer.d_hidden};
  if (plan.ranks == Ranks{}) return default_ranks(layer.experts, layer.d_model, layer.d_hidden);
  return plan.ranks;
}

TuckerFactors extract_factors(const EditPlan& plan, const MoELayer& layer,
                              const PreservationSet& pres, const Matrix& pres_inputs) {
  WhiteningConfig cfg = plan.whitening;
  if (cfg.whitens_in() && !cfg.cov_in) cfg.cov_in = estimate_cov_in(pres);
  if (cfg.whitens_out() && !cfg.cov_out) cfg.cov_out = estimate_cov_out(layer, pres_inputs);
  const Tensor3 down = layer.down_tensor();
  TuckerFactors factors = hosvd(down, resolve_ranks(plan, layer), cfg);
  if (plan.hooi_sweeps > 0) factors = hooi_refine(down, factors, plan.hooi_sweeps, cfg);
  return factors;
}

double residual_norm_with_keys(const MoELayer& layer, const Fact& fact, const Matrix& keys) {
  EVector v = EVector::Zero(static_cast<Eigen::Index>(layer.d_model));
  for (std::size_t j : fact.gating.selected)
    v += fact.gating.weights[static_cast<Eigen::Index>(j)] * (layer.down(j).map() * keys.row(j));
  return (fact.target_v - v).norm();
}

}  // namespace

RunReport cmd_edit(const EditPlan& plan, Workspace& ws, const std::string& out_dir) {
  plan.validate();
  for (std::size_t l : plan.layers)
    require(l < ws.layers.size(), errc::invalid_argument,
            "plan layer index " + std::to_string(l) + " outside the generated stack");

  const std::size_t last_index = plan.layers.back();
  const EditBatch batch = ws.batch_at(last_index);

  // Pre-edit copies for drift and routing metrics.
  std::vector<MoELayer> before;
  before.reserve(plan.layers.size());
  for (std::size_t l : plan.layers) before.push_back(ws.layers[l]);

  std::vector<LayerContext> contexts(plan.layers.size());
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    MoELayer& layer = ws.layers[plan.layers[i]];
    contexts[i].layer = &layer;
    const PreservationSet pres = preservation_from_inputs(layer, ws.pres_inputs);
    contexts[i].projectors = plan.null_space
                                 ? build_projectors(pres, plan.null_space_threshold)
                                 : NullSpaceProjectorSet::identity(layer.experts, layer.d_hidden);
    if (plan.solver == SolverKind::tucker)
      contexts[i].factors = extract_factors(plan, layer, pres, ws.pres_inputs);
  }

  std::vector<double> pre_res(batch.facts.size());
  for (std::size_t t = 0; t < batch.facts.size(); ++t)
    pre_res[t] = compute_residual(ws.layers[last_index], batch.facts[t]).norm();

  const SpreadOutcome outcome = run_plan(plan, contexts, batch);

  RunReport report;
  report.config_echo = plan_to_manifest(plan);
  report.solver_calls = outcome.solver_calls;
  for (std::size_t i = 0; i < outcome.deltas.size(); ++i)
    report.per_layer.push_back(outcome.deltas[i].provenance);

  Metrics& m = report.metrics;
  const MoELayer& edited_last = ws.layers[last_index];
  std::size_t hits = 0;
  double pre_sum = 0.0, post_sum = 0.0;
  for (std::size_t t = 0; t < batch.facts.size(); ++t) {
    const double post = compute_residual(edited_last, batch.facts[t]).norm();
    pre_sum += pre_res[t];
    post_sum += post;
    const bool ok = pre_res[t] > 1e-300 ? post < 0.1 * pre_res[t] : post <= 1e-12;
    hits += ok ? 1 : 0;
  }
  m.efficacy = static_cast<double>(hits) / static_cast<double>(batch.facts.size());
  m.pre_residual_mean = pre_sum / static_cast<double>(batch.facts.size());
  m.post_residual_mean = post_sum / static_cast<double>(batch.facts.size());

  // Generalization analogue: the same success criterion on keys perturbed by
  // 5% relative Gaussian noise.
  Rng noise(ws.config.seed ^ 0x9e3779b97f4a7c15ull);
  std::size_t gen_hits = 0;
  for (const Fact& fact : batch.facts) {
    Matrix keys = fact.keys;
    for (std::size_t j : fact.gating.selected) {
      EVector k = keys.row(j);
      EVector dir = noise.normal_vector(ws.config.d_hidden);
      if (dir.norm() > 0) dir.normalize();
      k += 0.05 * k.norm() * dir;
      for (std::size_t c = 0; c < ws.config.d_hidden; ++c)
        keys(j, c) = k[static_cast<Eigen::Index>(c)];
    }
    const double pre = residual_norm_with_keys(before.back(), fact, keys);
    const double post = residual_norm_with_keys(edited_last, fact, keys);
    gen_hits += (pre > 1e-300 ? post < 0.1 * pre : post <= 1e-12) ? 1 : 0;
  }
  m.generalization = static_cast<double>(gen_hits) / static_cast<double>(batch.facts.size());

  double drift_sum = 0.0;
  std::size_t drift_count = 0;
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const MoELayer& post_layer = ws.layers[plan.layers[i]];
    for (std::size_t c = 0; c < ws.pres_inputs.cols(); ++c) {
      const EVector x = ws.pres_inputs.col(c);
      const EVector v0 = moe_forward(before[i], x);
      const EVector v1 = moe_forward(post_layer, x);
      drift_sum += (v1 - v0).norm() / std::max(v0.norm(), 1e-12);
      ++drift_count;
    }
  }
  m.specificity = drift_count ? drift_sum / static_cast<double>(drift_count) : 0.0;
  m.routing_similarity = routing_similarity(before.back(), edited_last, ws.pres_inputs);

  double delta_sq = 0.0;
  for (const LayerDelta& d : outcome.deltas) {
    const double n = d.delta.frobenius_norm();
    delta_sq += n * n;
  }
  m.delta_norm = std::sqrt(delta_sq);

  // Identity spot-checks on the instance that was actually solved.
  {
    const Matrix psi =
        design_matrix(before.back(), batch, &contexts.back().projectors);
    const PushThrough pt = push_through(psi, plan.lambda);
    IdentityCheck c;
    c.name = "push_through";
    c.deviation = rel_dev((pt.lhs.map() - pt.rhs.map()).norm(), psi.frobenius_norm());
    c.tolerance = 1e-9;
    c.pass = c.deviation < c.tolerance;
    report.identity_checks.push_back(c);
    if (plan.solver == SolverKind::tucker) {
      const Matrix r = residual_matrix(before.back(), batch);
      const CompressedBatch comp =
          compress_with(psi, r, *contexts.back().factors, before.back().experts);
      const CoreTensor a = solve_tucker_core(comp, plan.lambda, CoreSide::sample);
      const CoreTensor b = solve_tucker_core(comp, plan.lambda, CoreSide::feature);
      IdentityCheck tc;
      tc.name = "core_both_sides";
      tc.deviation =
          rel_dev((a.flat.map() - b.flat.map()).norm(), std::max(a.flat.frobenius_norm(), 1.0));
      tc.tolerance = 1e-10;
      tc.pass = tc.deviation < tc.tolerance;
      report.identity_checks.push_back(tc);
    }
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < plan.layers.size(); ++i)
      save_layer(out_dir + "/" + layer_dir_name(plan.layers[i]), ws.layers[plan.layers[i]],
                 ws.config.seed);
    std::ofstream os(out_dir + "/report.jsonl");
    require(os.good(), errc::io_failure, "cannot write report under " + out_dir);
    os << report.to_jsonl();
  }
  return report;
}

std::string RunReport::to_jsonl() const {
  std::ostringstream os;
  json cfg{{"record", "config"}};
  for (const auto& [k, v] : config_echo) cfg[k] = v;
  os << cfg.dump() << "\n";
  for (std::size_t i = 0; i < per_layer.size(); ++i)
    os << provenance_json(per_layer[i], i).dump() << "\n";
  for (const IdentityCheck& c : identity_checks) os << check_json(c).dump() << "\n";
  os << json{{"record", "summary"},
             {"solver_calls", solver_calls},
             {"efficacy", metrics.efficacy},
             {"generalization", metrics.generalization},
             {"specificity", metrics.specificity},
             {"routing_similarity", metrics.routing_similarity},
             {"pre_residual_mean", metrics.pre_residual_mean},
             {"post_residual_mean", metrics.post_residual_mean},
             {"delta_norm", metrics.delta_norm}}
            .dump()
     << "\n";
  return os.str();
}

std::string RunReport::to_table() const {
  std::ostringstream os;
  os << "edit run: " << solver_calls << " solver call(s), " << per_layer.size()
     << " layer(s)\n";
  char buf[256];
  for (std::size_t i = 0; i < per_layer.size(); ++i) {
    const auto& p = per_layer[i];
    std::snprintf(buf, sizeof(buf),
                  "  layer %-3zu %-13s design %10.3f ms  kernel %10.3f ms  factor %10.3f ms  "
                  "assemble %10.3f ms",
                  i, p.solver.c_str(), p.timings.design_ns / 1e6, p.timings.kernel_ns / 1e6,
                  p.timings.factor_ns / 1e6, p.timings.assemble_ns / 1e6);
    os << buf << "\n";
  }
  std::snprintf(buf, sizeof(buf),
                "  efficacy %.4f  generalization %.4f  specificity %.6g  routing_sim %.4f",
                metrics.efficacy, metrics.generalization, metrics.specificity,
                metrics.routing_similarity);
  os << buf << "\n";
  std::snprintf(buf, sizeof(buf), "  residual mean pre %.6g -> post %.6g  |delta| %.6g",
                metrics.pre_residual_mean, metrics.post_residual_mean, metrics.delta_norm);
  os << buf << "\n";
  for (const IdentityCheck& c : identity_checks) {
    std::snprintf(buf, sizeof(buf), "  check %-18s dev %.3e tol %.0e  %s", c.name.c_str(),
                  c.deviation, c.tolerance, c.pass ? "ok" : "BREACH");
    os << buf << "\n";
  }
  return os.str();
}

Manifest VerifyConfig::to_manifest() const {
  Manifest kv;
  kv["seed"] = std::to_string(seed);
  kv["push_through_instances"] = std::to_string(push_through_instances);
  kv["push_through_max_n"] = std::to_string(push_through_max_n);
  kv["push_through_max_t"] = std::to_string(push_through_max_t);
  kv["woodbury_instances"] = std::to_string(woodbury_instances);
  kv["woodbury_max_t"] = std::to_string(woodbury_max_t);
  kv["tucker_full_rank_instances"] = std::to_string(tucker_full_rank_instances);
  kv["core_side_instances"] = std::to_string(core_side_instances);
  kv["hosvd_instances"] = std::to_string(hosvd_instances);
  return kv;
}

VerifyConfig VerifyConfig::from_manifest(const Manifest& kv) {
  check_known_keys(kv, {"seed", "push_through_instances", "push_through_max_n",
                        "push_through_max_t", "woodbury_instances", "woodbury_max_t",
                        "tucker_full_rank_instances", "core_side_instances",
                        "hosvd_instances"});
  VerifyConfig c;
  auto opt = [&](const char* key, std::size_t& field) {
    if (kv.count(key)) field = static_cast<std::size_t>(manifest_get_int(kv, key));
  };
  if (kv.count("seed")) c.seed = static_cast<std::uint64_t>(manifest_get_int(kv, "seed"));
  opt("push_through_instances", c.push_through_instances);
  opt("push_through_max_n", c.push_through_max_n);
  opt("push_through_max_t", c.push_through_max_t);
  opt("woodbury_instances", c.woodbury_instances);
  opt("woodbury_max_t", c.woodbury_max_t);
  opt("tucker_full_rank_instances", c.tucker_full_rank_instances);
  opt("core_side_instances", c.core_side_instances);
  opt("hosvd_instances", c.hosvd_instances);
  require(c.push_through_max_n >= 2 && c.push_through_max_t >= 1, errc::invalid_argument,
          "verify sizes must be positive");
  return c;
}

double svd_reference_fit_error(const Tensor3& w, const Ranks& ranks) {
  TuckerFactors f;
  f.ranks = ranks;
  Matrix* targets[3] = {&f.u_e, &f.u_out, &f.u_in};
  const std::size_t rs[3] = {ranks.r_e, ranks.r_out, ranks.r_in};
  for (int mode = 1; mode <= 3; ++mode) {
    const Matrix unf = unfold(w, mode);
    Eigen::JacobiSVD<EMatrix> svd(unf.map(), Eigen::ComputeThinU);
    *targets[mode - 1] =
        Matrix::from(svd.matrixU().leftCols(static_cast<Eigen::Index>(rs[mode - 1])));
  }
  const CoreTensor core = compute_core(w, f);
  const Tensor3 recon = reconstruct_tensor(core, f);
  double err = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w.data()[i] - recon.data()[i];
    err += d * d;
  }
  return std::sqrt(err);
}

VerifyReport cmd_verify(const VerifyConfig& config) {
  const double lambdas[4] = {1e-3, 0.1, 1.0, 10.0};
  VerifyReport report;

  {
    Rng rng(config.seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < config.push_through_instances; ++i) {
      const std::size_t n =
          2 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(
                                                           config.push_through_max_n - 1));
      const std::size_t t =
          1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(
                                                           config.push_through_max_t));
      const double lambda = lambdas[i % 4];
      const Matrix psi = rng.normal_matrix(n, std::min(t, n + t));
      const PushThrough pt = push_through(psi, lambda);
      worst = std::max(worst,
                       rel_dev((pt.lhs.map() - pt.rhs.map()).norm(), psi.frobenius_norm()));
    }
    report.checks.push_back({"push_through", worst, 1e-9, worst < 1e-9});
  }

  {
    Rng rng(config.seed + 1);
    double worst = 0.0;
    for (std::size_t i = 0; i < config.woodbury_instances; ++i) {
      const std::size_t experts = std::size_t{1} << (i % 4);  // 1, 2, 4, 8
      const std::size_t d_hidden = 4 + static_cast<std::size_t>(rng.uniform() * 12);
      const std::size_t d_model = 4 + static_cast<std::size_t>(rng.uniform() * 12);
      const std::size_t top_k = 1 + (experts > 1 ? i % 2 : 0);
      const std::size_t facts =
          1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(
                                                           config.woodbury_max_t - 1));
      const double lambda = lambdas[i % 4];
      const MoELayer layer =
          make_random_layer(experts, top_k, d_model, d_hidden, rng.next_u64());
      const EditBatch batch = synthesize_batch(layer, facts, rng.next_u64(), 1.0);
      NullSpaceProjectorSet projectors;
      if (i % 2 == 0) {
        projectors = NullSpaceProjectorSet::identity(experts, d_hidden);
      } else {
        const PreservationSet pres =
            sample_preservation(layer, 4 * d_hidden, rng.next_u64());
        projectors = build_projectors(pres, 0.02);
      }
      const LayerDelta oracle = solve_global_oracle(batch, layer, projectors, lambda);
      const LayerDelta fast = solve_woodbury(batch, layer, projectors, lambda);
      double num = 0.0;
      for (std::size_t k = 0; k < oracle.delta.size(); ++k) {
        const double d = oracle.delta.data()[k] - fast.delta.data()[k];
        num += d * d;
      }
      worst = std::max(worst, rel_dev(std::sqrt(num), oracle.delta.frobenius_norm()));
    }
    report.checks.push_back({"woodbury_vs_oracle", worst, 1e-9, worst < 1e-9});
  }

  {
    Rng rng(config.seed + 2);
    double worst = 0.0;
    for (std::size_t i = 0; i < config.tucker_full_rank_instances; ++i) {
      const std::size_t experts = 2 + i % 4;
      const std::size_t d_model = 4 + static_cast<std::size_t>(rng.uniform() * 8);
      const std::size_t d_hidden = 4 + static_cast<std::size_t>(rng.uniform() * 6);
      const std::size_t facts = 1 + static_cast<std::size_t>(rng.uniform() * 12);
      const double lambda = lambdas[i % 4];
      const MoELayer layer =
          make_random_layer(experts, std::min<std::size_t>(2, experts), d_model, d_hidden,
                            rng.next_u64());
      const EditBatch batch = synthesize_batch(layer, facts, rng.next_u64(), 1.0);
      const auto projectors = NullSpaceProjectorSet::identity(experts, d_hidden);
      const TuckerFactors factors =
          hosvd(layer.down_tensor(), {experts, d_model, d_hidden}, WhiteningConfig{});
      const CompressedBatch comp = compress_batch(batch, layer, factors, projectors);
      const CoreTensor core = solve_tucker_core(comp, lambda);
      const LayerDelta tucker_delta = reconstruct_delta(core, factors, projectors);
      const LayerDelta wood = solve_woodbury(batch, layer, projectors, lambda);
      double num = 0.0;
      for (std::size_t k = 0; k < wood.delta.size(); ++k) {
        const double d = wood.delta.data()[k] - tucker_delta.delta.data()[k];
        num += d * d;
      }
      worst = std::max(worst, rel_dev(std::sqrt(num), wood.delta.frobenius_norm()));
    }
    report.checks.push_back({"tucker_full_rank_vs_woodbury", worst, 1e-8, worst < 1e-8});
  }

  {
    Rng rng(config.seed + 3);
    double worst = 0.0;
    for (std::size_t i = 0; i < config.core_side_instances; ++i) {
      // Alternate between T < r_e*r_in and T > r_e*r_in.
      const Ranks ranks{1 + i % 3, 2 + i % 4, 2 + i % 3};
      const std::size_t p = ranks.r_e * ranks.r_in;
      const std::size_t facts = (i % 2 == 0) ? std::max<std::size_t>(1, p / 2) : 2 * p + 1;
      CompressedBatch comp;
      comp.ranks = ranks;
      comp.phi = rng.normal_matrix(facts, p);
      comp.rtilde = rng.normal_matrix(facts, ranks.r_out);
      const double lambda = lambdas[i % 4];
      const CoreTensor a = solve_tucker_core(comp, lambda, CoreSide::sample);
      const CoreTensor b = solve_tucker_core(comp, lambda, CoreSide::feature);
      worst = std::max(worst, rel_dev((a.flat.map() - b.flat.map()).norm(),
                                      std::max(a.flat.frobenius_norm(), 1.0)));
    }
    report.checks.push_back({"core_both_sides", worst, 1e-10, worst < 1e-10});
  }

  {
    Rng rng(config.seed + 4);
    double worst = 0.0;
    for (std::size_t i = 0; i < config.hosvd_instances; ++i) {
      const std::size_t d1 = 2 + static_cast<std::size_t>(rng.uniform() * 6);
      const std::size_t d2 = 2 + static_cast<std::size_t>(rng.uniform() * 6);
      const std::size_t d3 = 2 + static_cast<std::size_t>(rng.uniform() * 6);
      const Tensor3 w = rng.normal_tensor(d1, d2, d3);
      const Ranks ranks{1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(d1)),
                        1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(d2)),
                        1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(d3))};
      const TuckerFactors f = hosvd(w, ranks, WhiteningConfig{});
      const CoreTensor core = compute_core(w, f);
      const Tensor3 recon = reconstruct_tensor(core, f);
      double err = 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double d = w.data()[k] - recon.data()[k];
        err += d * d;
      }
      const double gram_err = std::sqrt(err);
      const double svd_err = svd_reference_fit_error(w, ranks);
      worst = std::max(worst, rel_dev(std::abs(gram_err - svd_err), w.frobenius_norm()));
    }
    report.checks.push_back({"hosvd_vs_svd_reference", worst, 1e-9, worst < 1e-9});
  }

  report.all_pass = true;
  for (const IdentityCheck& c : report.checks) report.all_pass = report.all_pass && c.pass;
  return report;
}

std::string VerifyReport::to_jsonl() const {
  std::ostringstream os;
  for (const IdentityCheck& c : checks) os << check_json(c).dump() << "\n";
  os << json{{"record", "summary"}, {"all_pass", all_pass}}.dump() << "\n";
  return os.str();
}

std::string VerifyReport::to_table() const {
  std::ostringstream os;
  char buf[160];
  for (const IdentityCheck& c : checks) {
    std::snprintf(buf, sizeof(buf), "%-28s max deviation %.3e  tolerance %.0e  %s",
                  c.name.c_str(), c.deviation, c.tolerance, c.pass ? "ok" : "BREACH");
    os << buf << "\n";
  }
  os << (all_pass ? "verification passed" : "VERIFICATION BREACH") << "\n";
  return os.str();
}

void BenchmarkGrid::validate() const {
  require(!experts.empty() && !d_hidden.empty() && !facts.empty() && !layer_counts.empty(),
          errc::invalid_argument, "bench grid axes must be non-empty");
  require(!solvers.empty() && !modes.empty(), errc::invalid_argument,
          "bench grid needs solvers and modes");
  require(repetitions >= 3, errc::invalid_argument, "bench repetitions must be >= 3");
  for (std::size_t v : experts)
    require(v >= 1, errc::invalid_argument, "grid experts must be positive");
  for (std::size_t v : d_hidden)
    require(v >= 1, errc::invalid_argument, "grid d_hidden must be positive");
  for (std::size_t v : facts)
    require(v >= 1, errc::invalid_argument, "grid facts must be positive");
  for (std::size_t v : layer_counts)
    require(v >= 1, errc::invalid_argument, "grid layer counts must be positive");
}

Manifest BenchmarkGrid::to_manifest() const {
  auto join = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(v[i]);
    }
    return s;
  };
  Manifest kv;
  kv["experts"] = join(experts);
  kv["d_hidden"] = join(d_hidden);
  kv["facts"] = join(facts);
  kv["layer_counts"] = join(layer_counts);
  std::string s;
  for (std::size_t i = 0; i < solvers.size(); ++i)
    s += (i ? "," : "") + to_string(solvers[i]);
  kv["solvers"] = s;
  s.clear();
  for (std::size_t i = 0; i < modes.size(); ++i) s += (i ? "," : "") + to_string(modes[i]);
  kv["modes"] = s;
  kv["d_model"] = std::to_string(d_model);
  kv["top_k"] = std::to_string(top_k);
  kv["repetitions"] = std::to_string(repetitions);
  kv["seed"] = std::to_string(seed);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", lambda);
  kv["lambda"] = buf;
  kv["null_space"] = null_space ? "on" : "off";
  return kv;
}

BenchmarkGrid BenchmarkGrid::from_manifest(const Manifest& kv) {
  check_known_keys(kv, {"experts", "d_hidden", "facts", "layer_counts", "solvers", "modes",
                        "d_model", "top_k", "repetitions", "seed", "lambda", "null_space"});
  BenchmarkGrid g;
  if (kv.count("experts")) g.experts = parse_size_list(manifest_get(kv, "experts"), "experts");
  if (kv.count("d_hidden"))
    g.d_hidden = parse_size_list(manifest_get(kv, "d_hidden"), "d_hidden");
  if (kv.count("facts")) g.facts = parse_size_list(manifest_get(kv, "facts"), "facts");
  if (kv.count("layer_counts"))
    g.layer_counts = parse_size_list(manifest_get(kv, "layer_counts"), "layer_counts");
  if (kv.count("solvers")) {
    g.solvers.clear();
    for (const std::string& s : split_commas(manifest_get(kv, "solvers")))
      g.solvers.push_back(solver_from_string(s));
  }
  if (kv.count("modes")) {
    g.modes.clear();
    for (const std::string& s : split_commas(manifest_get(kv, "modes")))
      g.modes.push_back(spread_mode_from_string(s));
  }
  if (kv.count("d_model")) g.d_model = static_cast<std::size_t>(manifest_get_int(kv, "d_model"));
  if (kv.count("top_k")) g.top_k = static_cast<std::size_t>(manifest_get_int(kv, "top_k"));
  if (kv.count("repetitions"))
    g.repetitions = static_cast<std::size_t>(manifest_get_int(kv, "repetitions"));
  if (kv.count("seed")) g.seed = static_cast<std::uint64_t>(manifest_get_int(kv, "seed"));
  if (kv.count("lambda")) g.lambda = manifest_get_double(kv, "lambda");
  if (kv.count("null_space")) g.null_space = parse_flag(manifest_get(kv, "null_space"));
  g.validate();
  return g;
}

BenchReport cmd_bench(const BenchmarkGrid& grid) {
  grid.validate();
  BenchReport report;
  Rng seeder(grid.seed);

  for (std::size_t e : grid.experts)
    for (std::size_t dh : grid.d_hidden)
      for (std::size_t t : grid.facts)
        for (std::size_t nl : grid.layer_counts)
          for (SolverKind solver : grid.solvers)
            for (SpreadMode mode : grid.modes) {
              if (mode == SpreadMode::update_spread && solver != SolverKind::tucker &&
                  solver != SolverKind::woodbury)
                continue;
              if (solver == SolverKind::global_oracle && e * dh > 512) continue;

              EditPlan plan;
              plan.layers.resize(nl);
              for (std::size_t i = 0; i < nl; ++i) plan.layers[i] = i;
              plan.solver = solver;
              plan.spread_mode = mode;
              plan.lambda = grid.lambda;
              plan.null_space = grid.null_space;

              const std::uint64_t stack_seed = seeder.next_u64();
              std::vector<MoELayer> base;
              base.reserve(nl);
              Rng stack_rng(stack_seed);
              for (std::size_t i = 0; i < nl; ++i)
                base.push_back(make_random_layer(e, std::min(grid.top_k, e), grid.d_model, dh,
                                                 stack_rng.next_u64()));
              const EditBatch batch =
                  synthesize_batch(base.back(), t, stack_rng.next_u64(), 1.0);
              const Matrix pres_inputs = [&] {
                Rng r(stack_rng.next_u64());
                return r.normal_matrix(grid.d_model, 4 * dh);
              }();

              std::vector<std::uint64_t> design, kernel, factor, assemble;
              std::size_t solver_calls = 0;
              for (std::size_t rep = 0; rep < grid.repetitions; ++rep) {
                std::vector<MoELayer> layers = base;
                std::vector<LayerContext> contexts(nl);
                for (std::size_t i = 0; i < nl; ++i) {
                  contexts[i].layer = &layers[i];
                  contexts[i].projectors =
                      grid.null_space
                          ? build_projectors(preservation_from_inputs(layers[i], pres_inputs),
                                             0.02)
                          : NullSpaceProjectorSet::identity(e, dh);
                  if (solver == SolverKind::tucker)
                    contexts[i].factors = hosvd(layers[i].down_tensor(),
                                                default_ranks(e, grid.d_model, dh),
                                                WhiteningConfig{});
                }
                const SpreadOutcome outcome = run_plan(plan, contexts, batch);
                solver_calls = outcome.solver_calls;
                std::uint64_t d = 0, k = 0, f = 0, a = 0;
                for (const LayerDelta& delta : outcome.deltas) {
                  d += delta.provenance.timings.design_ns;
                  k += delta.provenance.timings.kernel_ns;
                  f += delta.provenance.timings.factor_ns;
                  a += delta.provenance.timings.assemble_ns;
                }
                design.push_back(d);
                kernel.push_back(k);
                factor.push_back(f);
                assemble.push_back(a);
              }

              auto median = [](std::vector<std::uint64_t>& v) {
                std::sort(v.begin(), v.end());
                return v[v.size() / 2];
              };
              BenchRow row;
              row.solver = to_string(solver);
              row.mode = to_string(mode);
              row.experts = e;
              row.d_hidden = dh;
              row.facts = t;
              row.layer_count = nl;
              row.solver_calls = solver_calls;
              row.design_ns = median(design);
              row.kernel_ns = median(kernel);
              row.factor_ns = median(factor);
              row.assemble_ns = median(assemble);
              report.rows.push_back(row);
            }
  return report;
}

std::string BenchReport::to_jsonl() const {
  std::ostringstream os;
  for (const BenchRow& r : rows)
    os << json{{"record", "bench"},
               {"solver", r.solver},
               {"mode", r.mode},
               {"experts", r.experts},
               {"d_hidden", r.d_hidden},
               {"facts", r.facts},
               {"layers", r.layer_count},
               {"solver_calls", r.solver_calls},
               {"design_ns", r.design_ns},
               {"kernel_ns", r.kernel_ns},
               {"factor_ns", r.factor_ns},
               {"assemble_ns", r.assemble_ns},
               {"solve_ns", r.solve_ns()}}
              .dump()
       << "\n";
  return os.str();
}

std::string BenchReport::to_table() const {
  std::ostringstream os;
  os << "solver         mode             E    d_hid    T  layers  calls   solve(ms)  "
        "assemble(ms)\n";
  char buf[200];
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-14s %-15s %4zu %7zu %4zu %7zu %6zu %11.3f %13.3f",
                  r.solver.c_str(), r.mode.c_str(), r.experts, r.d_hidden, r.facts,
                  r.layer_count, r.solver_calls, r.solve_ns() / 1e6, r.assemble_ns / 1e6);
    os << buf << "\n";
  }
  return os.str();
}

double routing_similarity(const MoELayer& before, const MoELayer& after, const Matrix& inputs) {
  require(before.d_model == after.d_model && before.top_k == after.top_k &&
              before.experts == after.experts,
          errc::dimension_mismatch, "routing_similarity: layer shapes differ");
  require(inputs.rows() == before.d_model, errc::dimension_mismatch,
          "routing_similarity: inputs must be d_model x N");
  require(inputs.cols() > 0, errc::invalid_argument, "routing_similarity: no inputs");
  double total = 0.0;
  for (std::size_t c = 0; c < inputs.cols(); ++c) {
    const EVector x = inputs.col(c);
    const GatingResult a = route(before, x);
    const GatingResult b = route(after, x);
    std::size_t overlap = 0;
    // Both selections are sorted ascending.
    std::size_t i = 0, j = 0;
    while (i < a.selected.size() && j < b.selected.size()) {
      if (a.selected[i] == b.selected[j]) {
        ++overlap;
        ++i;
        ++j;
      } else if (a.selected[i] < b.selected[j]) {
        ++i;
      } else {
        ++j;
      }
    }
    total += static_cast<double>(overlap) / static_cast<double>(before.top_k);
  }
  return total / static_cast<double>(inputs.cols());
}

}  // namespace mote
