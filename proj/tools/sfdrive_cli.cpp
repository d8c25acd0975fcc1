// Command-line front door: route generation, dataset building, training,
// closed-loop evaluation under pluggable gate policies, policy sweeps,
// activation analysis, and ablation suites. Every subcommand exits nonzero
// on error and leaves its artifacts exactly where the flags say.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sfdrive/eval.hpp"

using namespace sfd;
namespace fs = std::filesystem;

namespace {

// ---- shared option bundles ---------------------------------------------------------

// Model-shape knobs shared by train and ablate. Zero / empty / negative means
// "keep the preset's value" so flag handling stays order-independent.
struct ModelOpts {
  std::string preset = "full";
  std::size_t k = 0;
  std::string buffer_policy;
  double margin = -1.0;
  std::size_t bptt = 0;
  bool no_slow_path = false;
  bool no_gate = false;
  bool no_theta_fusion = false;
  bool vanilla_qformer = false;
};

void add_model_flags(CLI::App* sub, ModelOpts& m) {
  sub->add_option("--preset", m.preset, "Model size: full or small")
      ->capture_default_str();
  sub->add_option("--k", m.k,
                  "Stream buffer capacity (0 keeps the preset value)");
  sub->add_option("--buffer-policy", m.buffer_policy,
                  "Buffer eviction: pmf, fifo, or hard_reset");
  sub->add_option("--margin", m.margin,
                  "Activation-loss margin d (negative keeps the preset value)");
  sub->add_option("--bptt", m.bptt,
                  "Frames per truncation window (0 keeps the preset value)");
  sub->add_flag("--no-slow-path", m.no_slow_path,
                "Build without the slow model or gate (fast path only)");
  sub->add_flag("--no-gate", m.no_gate,
                "Keep the slow path but drop the learned gate (always on)");
  sub->add_flag("--no-theta-fusion", m.no_theta_fusion,
                "Fuse with weight 1 instead of the learned confidence");
  sub->add_flag("--vanilla-qformer", m.vanilla_qformer,
                "Drop the recurrent memory queries (local group only)");
}

pipe::PipelineConfig preset_config(const std::string& preset) {
  pipe::PipelineConfig c;  // struct defaults are the full desk-scale model
  c.encoder.obs_dim = sim::observation_dim();
  c.n_instructions = sim::kNumInstructions;
  if (preset == "full") return c;
  if (preset == "small") {
    c.encoder.tokens = 8;
    c.encoder.inner = 8;
    c.encoder.dim = 32;
    c.qformer.dim = 32;
    c.qformer.n_local = 8;
    c.qformer.n_memory = 8;
    c.slow.dim = 32;
    c.slow.layers = 4;
    c.slow.slot_tokens = 2;
    c.slow.n_out = 16;
    c.slow.max_slots = 8;
    c.planner.in_dim = 32;
    c.planner.width = 8;
    c.planner.layers = 2;
    c.planner.n_tokens = 16;
    c.gate.dim = 32;
    c.gate.hidden = 32;
    c.buffer_capacity = 8;
    return c;
  }
  SFD_FAIL("unknown preset '" << preset << "' (expected full or small)");
}

pipe::PipelineConfig build_config(const ModelOpts& m) {
  pipe::PipelineConfig c = preset_config(m.preset);
  if (m.k > 0) {
    c.buffer_capacity = m.k;
    c.slow.max_slots = m.k;
  }
  if (!m.buffer_policy.empty())
    c.buffer_policy = buf::policy_from_name(m.buffer_policy);
  if (m.margin >= 0.0) c.margin = m.margin;
  if (m.bptt > 0) c.bptt_window = m.bptt;
  if (m.no_slow_path) {
    c.with_slow_path = false;
    c.use_gate = false;
  }
  if (m.no_gate) c.use_gate = false;
  if (m.no_theta_fusion) c.use_theta_fusion = false;
  if (m.vanilla_qformer) {
    c.qformer.n_memory = 0;
    c.planner.n_tokens = c.qformer.n_local;
    c.slow.n_out = c.planner.n_tokens;
  }
  return c;
}

// Training-schedule knobs shared by train and ablate.
struct ScheduleOpts {
  std::uint64_t seed = 1;
  std::size_t epochs = 15;
  std::size_t batch = 4;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double warmup = 0.3;
  double lambda = 0.1;
};

void add_schedule_flags(CLI::App* sub, ScheduleOpts& s) {
  sub->add_option("--seed", s.seed, "Training seed (init, gumbel, batching)")
      ->capture_default_str();
  sub->add_option("--epochs", s.epochs, "Passes over the dataset")
      ->capture_default_str();
  sub->add_option("--batch", s.batch, "Episodes advanced in lockstep")
      ->capture_default_str();
  sub->add_option("--lr", s.lr, "Peak AdamW learning rate")
      ->capture_default_str();
  sub->add_option("--weight-decay", s.weight_decay, "AdamW decoupled decay")
      ->capture_default_str();
  sub->add_option("--warmup", s.warmup,
                  "Fraction of optimizer steps with the slow path pinned on")
      ->capture_default_str();
  sub->add_option("--lambda", s.lambda,
                  "Post-warmup weight on the plain branch losses")
      ->capture_default_str();
}

// Dataset knobs shared by train and ablate.
struct DataOpts {
  std::uint64_t seed = 1;
  std::size_t easy = 24;
  std::size_t hard = 24;
  double min_expert_ds = 0.95;
};

void add_data_flags(CLI::App* sub, DataOpts& d) {
  sub->add_option("--data-seed", d.seed, "First route seed for the dataset")
      ->capture_default_str();
  sub->add_option("--easy", d.easy, "Easy training routes")
      ->capture_default_str();
  sub->add_option("--hard", d.hard, "Hard training routes")
      ->capture_default_str();
  sub->add_option("--min-expert-ds", d.min_expert_ds,
                  "Reject routes the expert itself cannot drive this well")
      ->capture_default_str();
}

// Route-set knobs shared by the evaluation subcommands. A route file wins
// over generation; the suite pins the step cap (and the 10+10 split when
// generating), echoing a tiny/short benchmark pair.
struct RouteOpts {
  std::string file;
  std::uint64_t seed_base = 1000;
  std::size_t easy = 10;
  std::size_t hard = 10;
  double screen = 0.0;
  std::string suite = "custom";
  std::size_t step_cap = 0;
};

void add_route_flags(CLI::App* sub, RouteOpts& r) {
  sub->add_option("--routes", r.file,
                  "Route file to evaluate on (overrides generation)");
  sub->add_option("--route-seed-base", r.seed_base,
                  "First seed when generating routes")
      ->capture_default_str();
  sub->add_option("--eval-easy", r.easy, "Easy routes when generating")
      ->capture_default_str();
  sub->add_option("--eval-hard", r.hard, "Hard routes when generating")
      ->capture_default_str();
  sub->add_option("--screen", r.screen,
                  "Generation-time minimum expert DS (0 disables)")
      ->capture_default_str();
  sub->add_option("--suite", r.suite,
                  "custom, tiny (20 routes, 200-step cap), or short (20 "
                  "routes, 600-step cap)")
      ->capture_default_str();
  sub->add_option("--step-cap", r.step_cap,
                  "Per-episode step cap for suite=custom (0 = simulator "
                  "default)");
}

std::vector<sim::Route> resolve_routes(RouteOpts& r) {
  if (r.suite == "tiny" || r.suite == "short") {
    r.step_cap = r.suite == "tiny" ? 200 : 600;
    r.easy = 10;
    r.hard = 10;
  } else {
    SFD_CHECK(r.suite == "custom", "unknown suite '" << r.suite
                                                     << "' (expected custom, "
                                                        "tiny, or short)");
  }
  if (!r.file.empty()) return sim::load_routes(r.file);
  return eval::make_eval_routes(r.seed_base, r.easy, r.hard, r.screen);
}

std::string route_source(const RouteOpts& r) {
  if (!r.file.empty()) return "file:" + r.file;
  return "generated:seed_base=" + std::to_string(r.seed_base) +
         ",easy=" + std::to_string(r.easy) + ",hard=" + std::to_string(r.hard);
}

// ---- checkpoint loading ------------------------------------------------------------

// Checkpoints carry their full pipeline configuration, so evaluation needs
// nothing but the file: rebuild the exact architecture, then fill in the
// trained parameters.
std::unique_ptr<pipe::DrivePipeline> load_pipeline(const std::string& path) {
  const auto meta = nn::read_checkpoint_meta(path);
  const auto it = meta.find("pipeline_config");
  SFD_CHECK(it != meta.end(),
            "checkpoint carries no pipeline_config metadata: " << path);
  const pipe::PipelineConfig cfg =
      pipe::config_from_json(nlohmann::json::parse(it->second));
  Rng rng(0);  // init values are overwritten by the load
  auto p = std::make_unique<pipe::DrivePipeline>(cfg, rng);
  nn::load_checkpoint(path, p->params(), nullptr, nullptr);
  const auto hash = meta.find("config_hash");
  SFD_CHECK(hash == meta.end() || hash->second == hex_u64(cfg.hash()),
            "checkpoint config hash disagrees with its pipeline_config: "
                << path);
  return p;
}

// ---- small output helpers ----------------------------------------------------------

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  SFD_CHECK(!out.empty(), "empty list: '" << s << "'");
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (const fs::path dir = fs::path(path).parent_path(); !dir.empty())
    fs::create_directories(dir);
  std::ofstream f(path, std::ios::trunc);
  SFD_CHECK(f.good(), "cannot open for writing: " << path);
  f << text;
  SFD_CHECK(f.good(), "write failed: " << path);
}

void write_manifest(const std::string& dir, nlohmann::json extra) {
  extra["version"] = kVersion;
  write_text(dir + "/manifest.json", extra.dump(2) + "\n");
}

std::size_t count_difficulty(const std::vector<sim::Route>& routes,
                             sim::Difficulty d) {
  std::size_t n = 0;
  for (const auto& r : routes) n += r.difficulty == d;
  return n;
}

void print_report(const eval::EvalReport& rep) {
  std::cout << std::fixed << std::setprecision(4);
  std::cout << "policy              " << rep.policy << "\n"
            << "routes              " << rep.n_routes << "\n"
            << "mean DS / RC / IS   " << rep.mean_ds << " / " << rep.mean_rc
            << " / " << rep.mean_is << "\n"
            << "activation rate     " << rep.mean_activation_rate
            << " per-route mean, " << rep.frame_activation_rate << " pooled ("
            << rep.activations << "/" << rep.frames << " frames)\n"
            << "FLOPs               " << rep.flops.total()
            << "  (encoder " << rep.flops.encoder << ", qformer "
            << rep.flops.qformer << ", gate " << rep.flops.gate << ", fast "
            << rep.flops.fast << ", slow " << rep.flops.slow << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slow/fast adaptive-compute driving stack"};
  app.set_version_flag("--version", std::string(kVersion));
  // Flag values can come from an INI file with one section per subcommand,
  // e.g. `sfdrive_cli --config exp.ini train`.
  app.set_config("--config", "",
                 "Read option values from an INI file ([subcommand] sections)");
  app.require_subcommand(1);

  // ---- gen-routes ------------------------------------------------------------------
  struct {
    std::string out;
    std::uint64_t seed_base = 1000;
    std::size_t easy = 10, hard = 10;
    double screen = 0.0;
  } gen;
  auto* gen_cmd = app.add_subcommand(
      "gen-routes", "Generate a benchmark route file (deterministic by seed)");
  gen_cmd->add_option("--out", gen.out, "Route file to write")->required();
  gen_cmd->add_option("--seed-base", gen.seed_base, "First route seed")
      ->capture_default_str();
  gen_cmd->add_option("--easy", gen.easy, "Easy routes")->capture_default_str();
  gen_cmd->add_option("--hard", gen.hard, "Hard routes")->capture_default_str();
  gen_cmd->add_option("--screen", gen.screen,
                      "Minimum expert DS per kept route (0 disables)")
      ->capture_default_str();
  gen_cmd->callback([&] {
    const auto routes =
        eval::make_eval_routes(gen.seed_base, gen.easy, gen.hard, gen.screen);
    if (const fs::path dir = fs::path(gen.out).parent_path(); !dir.empty())
      fs::create_directories(dir);
    sim::save_routes(gen.out, routes);
    std::cout << "wrote " << routes.size() << " routes (" << gen.easy
              << " easy, " << gen.hard << " hard) to " << gen.out << "\n";
  });

  // ---- build-dataset ---------------------------------------------------------------
  struct {
    std::string out;
    DataOpts data;
  } bld;
  auto* bld_cmd = app.add_subcommand(
      "build-dataset",
      "Roll the expert over screened routes; write routes, per-route expert "
      "logs, and a manifest");
  bld_cmd->add_option("--out", bld.out, "Output directory")->required();
  add_data_flags(bld_cmd, bld.data);
  bld_cmd->callback([&] {
    const auto ds = train::build_dataset(bld.data.seed, bld.data.easy,
                                         bld.data.hard, bld.data.min_expert_ds);
    std::vector<sim::Route> routes;
    routes.reserve(ds.episodes.size());
    for (const auto& ep : ds.episodes)
      routes.push_back(sim::generate_route(ep.route_seed, ep.difficulty));
    fs::create_directories(bld.out + "/expert_logs");
    sim::save_routes(bld.out + "/routes.json", routes);
    for (const auto& r : routes) {
      // Easy and hard seed ranges overlap, so the difficulty is part of the
      // file name.
      const auto res = sim::run_expert_episode(r);
      std::string blob;
      for (const auto& line : sim::episode_log_lines(r, res))
        blob += line + "\n";
      write_text(bld.out + "/expert_logs/route_" +
                     std::string(sim::difficulty_name(r.difficulty)) + "_" +
                     std::to_string(r.seed) + ".jsonl",
                 blob);
    }
    write_manifest(bld.out, {{"dataset_digest", hex_u64(ds.digest)},
                             {"seed_base", bld.data.seed},
                             {"easy", bld.data.easy},
                             {"hard", bld.data.hard},
                             {"min_expert_ds", bld.data.min_expert_ds},
                             {"episodes", ds.episodes.size()},
                             {"frames", ds.total_frames()}});
    std::cout << "dataset: " << ds.episodes.size() << " episodes, "
              << ds.total_frames() << " frames, digest " << hex_u64(ds.digest)
              << "\nartifacts under " << bld.out << "\n";
  });

  // ---- train -----------------------------------------------------------------------
  struct {
    std::string run_dir;
    ModelOpts model;
    ScheduleOpts sched;
    DataOpts data;
    bool resume = false;
    std::size_t stop_after = 0;
  } tr;
  auto* tr_cmd = app.add_subcommand(
      "train", "Train the pipeline; checkpoints, metrics, and a manifest land "
               "in the run directory");
  tr_cmd->add_option("--run-dir", tr.run_dir, "Run directory")->required();
  add_model_flags(tr_cmd, tr.model);
  add_schedule_flags(tr_cmd, tr.sched);
  add_data_flags(tr_cmd, tr.data);
  tr_cmd->add_flag("--resume", tr.resume,
                   "Continue from the newest checkpoint in the run directory");
  tr_cmd->add_option("--stop-after", tr.stop_after,
                     "Stop after this many epochs this invocation (0 = all)");
  tr_cmd->callback([&] {
    train::TrainConfig cfg;
    cfg.pipe = build_config(tr.model);
    cfg.seed = tr.sched.seed;
    cfg.epochs = tr.sched.epochs;
    cfg.batch = tr.sched.batch;
    cfg.lr = tr.sched.lr;
    cfg.weight_decay = tr.sched.weight_decay;
    cfg.warmup_frac = tr.sched.warmup;
    cfg.lambda = tr.sched.lambda;
    cfg.run_dir = tr.run_dir;
    cfg.resume = tr.resume;
    cfg.stop_after_epochs = tr.stop_after;

    const auto data = train::build_dataset(tr.data.seed, tr.data.easy,
                                           tr.data.hard, tr.data.min_expert_ds);
    std::cout << "dataset: " << data.episodes.size() << " episodes, "
              << data.total_frames() << " frames (digest "
              << hex_u64(data.digest) << ")\n"
              << "config hash: " << hex_u64(cfg.pipe.hash()) << "\n";

    Rng rng(cfg.seed);
    pipe::DrivePipeline pipeline(cfg.pipe, rng);
    std::cout << "parameters: " << pipeline.params().scalar_count() << "\n";
    const auto res = train::train(cfg, data, pipeline);

    std::cout << std::fixed << std::setprecision(4);
    for (const auto& ep : res.epochs)
      std::cout << "epoch " << std::setw(3) << ep.epoch << "  fast "
                << ep.loss_fast << "  llm " << ep.loss_llm << "  fuse "
                << ep.loss_fuse << "  ada " << ep.loss_ada << "  act "
                << ep.activation_rate << (ep.any_warmup ? "  [warmup]" : "")
                << "\n";
    std::cout << "optimizer steps: " << res.optimizer_steps << " ("
              << res.warmup_steps << " warmup)\nfinal checkpoint: "
              << res.final_checkpoint << "\n";
  });

  // ---- eval ------------------------------------------------------------------------
  struct {
    std::string checkpoint, policy = "adaptive", out;
    RouteOpts routes;
  } ev;
  auto* ev_cmd = app.add_subcommand(
      "eval", "Closed-loop evaluation of a checkpoint under one gate policy");
  ev_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")
      ->required();
  ev_cmd->add_option("--policy", ev.policy,
                     "adaptive, always, never, or fixed_<rate>")
      ->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "Optional CSV report path");
  add_route_flags(ev_cmd, ev.routes);
  ev_cmd->callback([&] {
    auto pipeline = load_pipeline(ev.checkpoint);
    const auto routes = resolve_routes(ev.routes);
    const auto rep =
        eval::evaluate(*pipeline, routes, eval::GatePolicy::from_name(ev.policy),
                       false, ev.routes.step_cap);
    print_report(rep);
    if (!ev.out.empty()) {
      eval::write_reports_csv(ev.out, {rep});
      std::cout << "report: " << ev.out << "\n";
    }
  });

  // ---- sweep -----------------------------------------------------------------------
  struct {
    std::string checkpoint, out;
    std::string policies = "never,fixed_0.1,fixed_0.25,fixed_0.5,always,adaptive";
    RouteOpts routes;
  } sw;
  auto* sw_cmd = app.add_subcommand(
      "sweep", "Evaluate one checkpoint under several gate policies on "
               "identical routes");
  sw_cmd->add_option("--checkpoint", sw.checkpoint, "Checkpoint file")
      ->required();
  sw_cmd->add_option("--policies", sw.policies, "Comma-separated policy names")
      ->capture_default_str();
  sw_cmd->add_option("--out", sw.out, "CSV table path")->required();
  add_route_flags(sw_cmd, sw.routes);
  sw_cmd->callback([&] {
    auto pipeline = load_pipeline(sw.checkpoint);
    const auto routes = resolve_routes(sw.routes);
    std::vector<eval::GatePolicy> policies;
    for (const auto& name : split_list(sw.policies))
      policies.push_back(eval::GatePolicy::from_name(name));
    const auto reports =
        eval::sweep(*pipeline, routes, policies, sw.routes.step_cap);
    eval::write_reports_csv(sw.out, reports);
    std::cout << std::fixed << std::setprecision(4) << std::left
              << std::setw(14) << "policy" << std::right << std::setw(9)
              << "mean_ds" << std::setw(10) << "act_rate" << std::setw(14)
              << "mflops" << "\n";
    for (const auto& r : reports)
      std::cout << std::left << std::setw(14) << r.policy << std::right
                << std::setw(9) << r.mean_ds << std::setw(10)
                << r.frame_activation_rate << std::setw(14)
                << double(r.flops.total()) / 1e6 << "\n";
    std::cout << "table: " << sw.out << "\n";
  });

  // ---- analyze ---------------------------------------------------------------------
  struct {
    std::string checkpoint, out_dir;
    RouteOpts routes;
  } an;
  auto* an_cmd = app.add_subcommand(
      "analyze", "Where the learned gate spends slow-path calls: rate "
                 "histogram and per-route activation timelines");
  an_cmd->add_option("--checkpoint", an.checkpoint, "Checkpoint file")
      ->required();
  an_cmd->add_option("--out-dir", an.out_dir, "Output directory")->required();
  add_route_flags(an_cmd, an.routes);
  an_cmd->callback([&] {
    auto pipeline = load_pipeline(an.checkpoint);
    const auto routes = resolve_routes(an.routes);
    const auto res =
        eval::analyze_activations(*pipeline, routes, an.routes.step_cap);
    write_text(an.out_dir + "/histogram.csv", res.histogram_csv);
    write_text(an.out_dir + "/timelines.csv", res.timelines_csv);
    write_text(an.out_dir + "/timelines.json", res.timelines.dump(2) + "\n");
    write_manifest(
        an.out_dir,
        {{"checkpoint", an.checkpoint},
         {"config_hash", hex_u64(pipeline->config().hash())},
         {"routes", route_source(an.routes)},
         {"n_routes", routes.size()},
         {"easy", count_difficulty(routes, sim::Difficulty::Easy)},
         {"hard", count_difficulty(routes, sim::Difficulty::Hard)}});
    std::cout << std::fixed << std::setprecision(4)
              << "activation rate, easy routes: " << res.easy_rate << "\n"
              << "activation rate, hard routes: " << res.hard_rate << "\n"
              << "near decision events:         " << res.near_event_rate << "\n"
              << "background:                   " << res.far_event_rate << "\n"
              << "artifacts under " << an.out_dir << "\n";
  });

  // ---- ablate ----------------------------------------------------------------------
  struct {
    std::string run_dir, out;
    std::string variants = "full,no_connectors,w_only,vanilla_qformer,fifo,"
                           "hard_reset,k5,k20";
    ModelOpts model;
    ScheduleOpts sched;
    DataOpts data;
    RouteOpts routes;
  } ab;
  auto* ab_cmd = app.add_subcommand(
      "ablate", "Train and score named pipeline variants under a shared "
                "schedule (completed variants are reused)");
  ab_cmd->add_option("--run-dir", ab.run_dir, "Run directory (one "
                                              "subdirectory per variant)")
      ->required();
  ab_cmd->add_option("--out", ab.out, "CSV table path")->required();
  ab_cmd->add_option("--variants", ab.variants,
                     "Comma-separated variant names; '+' composes edits "
                     "(e.g. w_only+fifo+k5)")
      ->capture_default_str();
  add_model_flags(ab_cmd, ab.model);
  add_schedule_flags(ab_cmd, ab.sched);
  add_data_flags(ab_cmd, ab.data);
  add_route_flags(ab_cmd, ab.routes);
  ab_cmd->callback([&] {
    train::TrainConfig cfg;
    cfg.pipe = build_config(ab.model);
    cfg.seed = ab.sched.seed;
    cfg.epochs = ab.sched.epochs;
    cfg.batch = ab.sched.batch;
    cfg.lr = ab.sched.lr;
    cfg.weight_decay = ab.sched.weight_decay;
    cfg.warmup_frac = ab.sched.warmup;
    cfg.lambda = ab.sched.lambda;
    cfg.run_dir = ab.run_dir;
    cfg.resume = true;  // finished variants are picked up, not retrained

    const auto data = train::build_dataset(ab.data.seed, ab.data.easy,
                                           ab.data.hard, ab.data.min_expert_ds);
    const auto routes = resolve_routes(ab.routes);
    std::vector<eval::AblationSpec> specs;
    for (const auto& name : split_list(ab.variants))
      specs.push_back(eval::ablation_variant(name, cfg.pipe));

    std::cout << "dataset: " << data.episodes.size() << " episodes, "
              << data.total_frames() << " frames; " << routes.size()
              << " eval routes; " << specs.size() << " variants\n";
    const auto rows =
        eval::ablate(specs, cfg, data, routes, ab.routes.step_cap);

    std::string csv = eval::ablation_csv_header() + "\n";
    std::cout << std::fixed << std::setprecision(4) << std::left
              << std::setw(26) << "variant" << std::setw(12) << "policy"
              << std::right << std::setw(9) << "mean_ds" << std::setw(10)
              << "act_rate" << std::setw(12) << "params" << "\n";
    for (const auto& r : rows) {
      csv += eval::ablation_csv_row(r) + "\n";
      std::cout << std::left << std::setw(26) << r.name << std::setw(12)
                << r.policy << std::right << std::setw(9) << r.mean_ds
                << std::setw(10) << r.activation_rate << std::setw(12)
                << r.param_count << "\n";
    }
    write_text(ab.out, csv);
    std::cout << "table: " << ab.out << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
