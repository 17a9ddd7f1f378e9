// Command-line front end: demos, datasets, training, single episodes, benchmarks and verification.

#include "sfmpc/bench.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace sfmpc;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals
{
  std::uint64_t seed{0};
  std::string config;
  std::string out;
  int jobs{1};
  json cfg = json::object();

  const json & section(const std::string & name) const
  {
    static const json empty = json::object();
    return cfg.contains(name) ? cfg.at(name) : empty;
  }
};

template <class T>
void take(const json & j, const char * key, T & dst)
{
  if (j.contains(key)) { dst = j.at(key).get<T>(); }
}

DemoGenConfig demo_config(const json & j)
{
  DemoGenConfig c;
  take(j, "candidates", c.candidates);
  take(j, "rounds", c.rounds);
  take(j, "T_min", c.T_min);
  take(j, "T_max", c.T_max);
  take(j, "T_step", c.T_step);
  take(j, "via_sigma", c.via_sigma);
  take(j, "approach_prob", c.approach_prob);
  take(j, "explore_prob", c.explore_prob);
  take(j, "polish_scale", c.polish_scale);
  take(j, "timeout", c.family.timeout);
  return c;
}

SafeDatasetConfig safe_config(const json & j)
{
  SafeDatasetConfig c;
  take(j, "s_grid", c.s_grid);
  take(j, "ds_fd", c.ds_fd);
  take(j, "source_sigma_factor", c.source_sigma_factor);
  take(j, "window_stride", c.window_stride);
  return c;
}

FlowConfig flow_config(const json & j)
{
  FlowConfig c;
  take(j, "c1", c.c1);
  take(j, "c2", c.c2);
  take(j, "emb", c.emb);
  take(j, "obs_hidden", c.obs_hidden);
  take(j, "s_freqs", c.s_freqs);
  take(j, "history", c.history);
  return c;
}

TrainConfig train_config(const json & j, std::uint64_t seed)
{
  TrainConfig c;
  c.seed = seed;
  take(j, "steps", c.steps);
  take(j, "batch", c.batch);
  take(j, "lr", c.lr);
  take(j, "clip_norm", c.clip_norm);
  take(j, "final_lr_fraction", c.final_lr_fraction);
  return c;
}

PlannerConfig planner_config(const json & j)
{
  PlannerConfig c;
  take(j, "N_s", c.N_s);
  take(j, "alpha", c.alpha);
  take(j, "beta", c.beta);
  take(j, "guidance", c.guidance);
  take(j, "mirrored_guidance", c.mirrored_guidance);
  take(j, "guide_gain", c.guide_gain);
  take(j, "guide_smoothing", c.guide_smoothing);
  take(j, "fault_probability", c.fault_probability);
  take(j, "budget", c.budget);
  if (j.contains("mode")) {
    const std::string m = j.at("mode");
    if (m != "rti" && m != "full") { throw ValidationError("config", "planner.mode", "expected rti or full"); }
    c.mode = m == "rti" ? ProjectionMode::Rti : ProjectionMode::Full;
  }
  if (j.contains("full_max_iter")) { c.full_max_iter = j.at("full_max_iter").get<int>(); }
  c.validate();
  return c;
}

std::string require_out(const Globals & g)
{
  if (g.out.empty()) { throw ValidationError("cli", "--out", "an output path is required"); }
  return g.out;
}

DemoDataset merge_demos(const std::vector<std::string> & dirs)
{
  DemoDataset all;
  for (const auto & d : dirs) {
    DemoDataset x = load_demos(d);
    all.family    = all.family.empty() ? x.family : all.family + "+" + x.family;
    for (auto & demo : x.demos) { all.demos.push_back(std::move(demo)); }
  }
  if (all.demos.empty()) { throw ValidationError("dataset", "--demos", "no demonstrations found"); }
  return all;
}

ObservationCodec codec_for(const DemoDataset & ds, int history)
{
  const Scenario & s = ds.demos.front().scenario;
  return default_codec(s.robot, s.safety.limits, history);
}

/// "finetuned=a.sfm,stage1=b.sfm,bc=c.sfm[,seed=3]"
ModelBundle parse_bundle(const std::string & spec, std::uint64_t index)
{
  ModelBundle b;
  b.train_seed = index;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) { throw ValidationError("cli", "--models", "expected key=path, got '" + item + "'"); }
    const std::string k = item.substr(0, eq), v = item.substr(eq + 1);
    if (k == "finetuned") {
      b.finetuned = load_flow_model(v);
    } else if (k == "stage1") {
      b.stage1 = load_flow_model(v);
    } else if (k == "bc") {
      b.bc = load_bc_model(v);
    } else if (k == "seed") {
      b.train_seed = std::stoull(v);
    } else {
      throw ValidationError("cli", "--models", "unknown key '" + k + "'");
    }
  }
  return b;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"SafeFlowMPC: safe flow-matching trajectory planning for a planar arm"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--config", g.config, "JSON configuration file");
  app.add_option("--out", g.out, "output directory or file");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  // gen-demos
  auto * gen = app.add_subcommand("gen-demos", "generate demonstrations for one scenario family");
  std::string gen_family = "narrow_passage";
  int gen_count          = 50;
  std::string gen_split  = "train";
  gen->add_option("--family", gen_family, "scenario family")->capture_default_str();
  gen->add_option("--count", gen_count, "number of scenarios")->check(CLI::NonNegativeNumber)->capture_default_str();
  gen->add_option("--split", gen_split, "train or eval")->check(CLI::IsMember({"train", "eval"}))->capture_default_str();

  // build-safe-dataset
  auto * bsd = app.add_subcommand("build-safe-dataset", "project demonstrations and sources, compute target flows");
  std::vector<std::string> bsd_demos;
  bsd->add_option("--demos", bsd_demos, "demo directories")->required();

  // train
  auto * train = app.add_subcommand("train", "train a flow model (stage 1 or 2) or a baseline");
  int stage = 1;
  std::string baseline, init_model;
  std::vector<std::string> tr_demos;
  std::vector<std::string> tr_dataset;
  train->add_option("--stage", stage, "1 or 2")->check(CLI::IsMember({1, 2}))->capture_default_str();
  train->add_option("--baseline", baseline, "bc or fm")->check(CLI::IsMember({"bc", "fm"}));
  train->add_option("--demos", tr_demos, "demo directories (stage 1, baselines)");
  train->add_option("--dataset", tr_dataset, "safety dataset directories (stage 2)");
  train->add_option("--init", init_model, "stage-1 model to finetune (stage 2)");

  // plan
  auto * plan = app.add_subcommand("plan", "run one closed-loop episode and write its trace");
  std::string scen_path, model_path, plan_method = "safeflow", plan_family;
  std::uint64_t scen_seed = 0;
  plan->add_option("--scenario", scen_path, "scenario JSON");
  plan->add_option("--family", plan_family, "generate the scenario from a family instead");
  plan->add_option("--scenario-seed", scen_seed, "seed for --family")->capture_default_str();
  plan->add_option("--model", model_path, "flow or behavior-cloning model file");
  plan->add_option("--method", plan_method, "method name")->capture_default_str();

  // bench
  auto * bench = app.add_subcommand("bench", "run the experiment matrix");
  std::vector<std::string> b_methods, b_models, b_families, b_eval_demos;
  int b_scen = -1;
  bench->add_option("--methods", b_methods, "methods to run");
  bench->add_option("--models", b_models, "one bundle per training seed: finetuned=..,stage1=..,bc=..");
  bench->add_option("--families", b_families, "scenario families");
  bench->add_option("--scenarios", b_scen, "scenarios per family");
  bench->add_option("--eval-demos", b_eval_demos, "held-out demo directories for d_demo");

  // verify
  auto * ver = app.add_subcommand("verify", "recompute metrics from traces and check the invariants");
  std::string v_bench, v_dataset;
  ver->add_option("--bench", v_bench, "bench output directory");
  ver->add_option("--dataset", v_dataset, "safety dataset directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError & e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (!g.config.empty()) { g.cfg = json::parse(detail::read_file(g.config)); }

    if (*gen) {
      const DemoGenConfig dc = demo_config(g.section("demos"));
      const DemoDataset ds   = generate_demos(gen_family, gen_count, g.seed, gen_split == "eval", dc, g.jobs);
      save_demos(require_out(g), ds);
      std::cout << "demos: " << ds.demos.size() << " written, " << ds.skipped.size() << " scenarios without a demo\n";
      return 0;
    }

    if (*bsd) {
      const DemoDataset ds = merge_demos(bsd_demos);
      const json & fj      = g.section("flow");
      const SafeDataset sd = build_safe_dataset(ds, codec_for(ds, fj.value("history", 10)), safe_config(g.section("safe_dataset")), g.seed, g.jobs);
      save_safe_dataset(require_out(g), sd, {{"demos", bsd_demos}, {"seed", g.seed}});
      for (const auto & w : sd.warnings) { std::cerr << "warning: " << w << "\n"; }
      std::cout << "samples: " << sd.samples.size() << " of " << sd.attempted << " attempted\n";
      return 0;
    }

    if (*train) {
      const std::string out = require_out(g);
      if (baseline == "bc") {
        const DemoDataset ds = merge_demos(tr_demos);
        const json & bj      = g.section("bc");
        BCConfig bcfg;
        take(bj, "hidden", bcfg.hidden);
        const auto codec = codec_for(ds, g.section("flow").value("history", 10));
        BCModel m        = BCModel::create(bcfg, codec, ds.demos.front().scenario.safety.limits, g.seed);
        const auto log   = train_bc(m, make_windows(ds, codec, bcfg.N), train_config(bj, g.seed));
        save_bc_model(out, m, {{"seed", g.seed}, {"final_loss", log.loss.back()}});
        std::cout << "bc loss " << log.loss.front() << " -> " << log.loss.back() << "\n";
        return 0;
      }
      if (stage == 1 || baseline == "fm") {
        const DemoDataset ds = merge_demos(tr_demos);
        const FlowConfig fc  = flow_config(g.section("flow"));
        const auto codec     = codec_for(ds, fc.history);
        FlowModel m          = FlowModel::create(fc, codec, g.seed);
        const auto & L       = ds.demos.front().scenario.safety.limits;
        const SourceSampler src(fc.N, 0.1, fc.dof, safe_config(g.section("safe_dataset")).source_sigma_factor * L.dddq_max);
        const auto log = train_stage1(m, make_windows(ds, codec, fc.N), src, train_config(g.section("train"), g.seed));
        save_flow_model(out, m, {{"stage", 1}, {"baseline", baseline}, {"seed", g.seed}, {"final_loss", log.loss.back()}});
        std::cout << "stage-1 loss " << log.loss.front() << " -> " << log.loss.back() << "\n";
        return 0;
      }
      if (init_model.empty() || tr_dataset.empty()) {
        throw ValidationError("cli", "train --stage 2", "needs --init and --dataset");
      }
      FlowModel m = load_flow_model(init_model);
      std::vector<FlowSample> samples;
      for (const auto & d : tr_dataset) {
        for (auto & s : load_safe_dataset(d).flow_samples()) { samples.push_back(std::move(s)); }
      }
      const json & sj = g.section("stage2");
      const auto log  = finetune_stage2(m, samples, train_config(sj, g.seed), sj.value("lr_factor", 0.1));
      save_flow_model(out, m, {{"stage", 2}, {"init", init_model}, {"seed", g.seed}, {"final_loss", log.loss.back()}});
      std::cout << "stage-2 loss " << log.loss.front() << " -> " << log.loss.back() << "\n";
      return 0;
    }

    if (*plan) {
      Scenario sc;
      if (!scen_path.empty()) {
        sc = load_scenario(scen_path);
      } else if (!plan_family.empty()) {
        sc = make_scenario(plan_family, scen_seed);
      } else {
        throw ValidationError("cli", "plan", "needs --scenario or --family");
      }
      const MethodSpec m = method_by_name(plan_method);
      ModelBundle b;
      if (m.model == "bc") {
        b.bc = load_bc_model(model_path);
      } else if (m.model != "none") {
        if (model_path.empty()) { throw ValidationError("cli", "plan", "method " + m.name + " needs --model"); }
        (m.model == "finetuned" ? b.finetuned : b.stage1) = load_flow_model(model_path);
      }
      const PlannerConfig pc = method_config(planner_config(g.section("planner")), m);
      const EpisodeTrace tr  = run_closed_loop(sc, b.for_method(m), pc, g.seed, m.name);
      const fs::path out     = require_out(g);
      fs::create_directories(out);
      detail::write_file(out / "trace.json", trace_to_json(tr).dump(1));
      write_csv((out / "executed.csv").string(), tr.executed);
      const EpisodeMetrics e = episode_metrics(tr, sc.family, 0, g.seed);
      std::cout << "episode: " << tr.end_reason << " at t=" << tr.final_time << " s, c_obs=" << e.c_obs
                << ", max_h=" << e.max_h << ", fallbacks=" << e.fallbacks << "\n";
      return 0;
    }

    if (*bench) {
      const json & bj = g.section("bench");
      ExperimentSpec spec;
      spec.planner = planner_config(g.section("planner"));
      if (b_methods.empty() && bj.contains("methods")) { b_methods = bj.at("methods").get<std::vector<std::string>>(); }
      if (b_methods.empty()) {
        std::cerr << "bench: empty method list\n\n" << bench->help();
        return 1;
      }
      for (const auto & n : b_methods) { spec.methods.push_back(method_by_name(n)); }
      if (!b_families.empty()) {
        spec.families = b_families;
      } else {
        take(bj, "families", spec.families);
      }
      spec.scenarios_per_family = b_scen > 0 ? b_scen : bj.value("scenarios_per_family", spec.scenarios_per_family);
      spec.scenario_seed        = bj.value("scenario_seed", g.seed);
      if (bj.contains("timeout")) { spec.timeout = bj.at("timeout").get<double>(); }
      if (b_models.empty() && bj.contains("models")) { b_models = bj.at("models").get<std::vector<std::string>>(); }
      std::vector<ModelBundle> bundles;
      for (std::size_t i = 0; i < b_models.size(); ++i) { bundles.push_back(parse_bundle(b_models[i], i)); }
      if (bundles.empty()) { bundles.emplace_back(); }
      std::map<std::string, DemoDataset> eval;
      for (const auto & d : b_eval_demos) {
        DemoDataset x = load_demos(d);
        eval[x.family] = std::move(x);
      }
      const auto res = run_experiment(spec, bundles, fs::path(require_out(g)), g.jobs, eval.empty() ? nullptr : &eval);
      std::cout << metrics_csv(res.rows) << "\n" << timing_csv(res.rows);
      return 0;
    }

    if (*ver) {
      if (v_bench.empty() && v_dataset.empty()) { throw ValidationError("cli", "verify", "needs --bench or --dataset"); }
      bool ok = true;
      if (!v_bench.empty()) {
        const VerifyReport r = verify_bench_dir(v_bench);
        for (const auto & p : r.problems) { std::cerr << "verify: " << p << "\n"; }
        std::cout << "bench: " << r.episodes << " episodes, " << (r.ok ? "all checks passed" : "FAILED") << "\n";
        ok = ok && r.ok;
      }
      if (!v_dataset.empty()) {
        const SafeDataset sd = load_safe_dataset(v_dataset);
        int bad              = 0;
        for (const auto & s : sd.samples) {
          bad += (s.sample.q_s.allFinite() && s.sample.target.allFinite() && s.sample.obs.allFinite()) ? 0 : 1;
        }
        std::cout << "dataset: " << sd.samples.size() << " samples, checksum ok, " << bad << " non-finite\n";
        ok = ok && bad == 0;
      }
      return ok ? 0 : 1;
    }
  } catch (const ValidationError & e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception & e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
