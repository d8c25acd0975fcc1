#include "sfdrive/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sfd::eval {

namespace fs = std::filesystem;

// ---- policies --------------------------------------------------------------------------

GatePolicy GatePolicy::fixed(double f) {
  SFD_CHECK(f >= 0.0 && f <= 1.0, "fixed activation rate must be in [0, 1], got " << f);
  return {Kind::Fixed, f};
}

std::string GatePolicy::name() const {
  switch (kind) {
    case Kind::Adaptive: return "adaptive";
    case Kind::Always: return "always";
    case Kind::Never: return "never";
    case Kind::Fixed: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "fixed_%g", rate);
      return buf;
    }
  }
  SFD_FAIL("unknown policy kind");
}

GatePolicy GatePolicy::from_name(const std::string& name) {
  if (name == "adaptive") return adaptive();
  if (name == "always") return always();
  if (name == "never") return never();
  double f = 0.0;
  if (std::sscanf(name.c_str(), "fixed_%lf", &f) == 1) return fixed(f);
  SFD_FAIL("unknown gate policy: " << name
                                   << " (want adaptive|always|never|fixed_<rate>)");
}

pipe::Activation GatePolicy::directive(std::size_t step) const {
  switch (kind) {
    case Kind::Adaptive: return pipe::Activation::Gate;
    case Kind::Always: return pipe::Activation::Force;
    case Kind::Never: return pipe::Activation::Skip;
    case Kind::Fixed: {
      const double lo = std::floor(double(step) * rate);
      const double hi = std::floor(double(step + 1) * rate);
      return hi > lo ? pipe::Activation::Force : pipe::Activation::Skip;
    }
  }
  SFD_FAIL("unknown policy kind");
}

// ---- evaluation ------------------------------------------------------------------------

EvalReport evaluate(pipe::DrivePipeline& pipeline,
                    const std::vector<sim::Route>& routes,
                    const GatePolicy& policy, bool keep_traces,
                    std::size_t step_cap) {
  SFD_CHECK(!routes.empty(), "cannot evaluate on an empty route set");
  SFD_CHECK(ad::Tape::current() == nullptr,
            "evaluate() must run without a live tape");
  pipeline.ledger().reset();

  EvalReport rep;
  rep.policy = policy.name();
  rep.n_routes = routes.size();
  rep.routes.reserve(routes.size());

  for (const sim::Route& route : routes) {
    pipe::EpisodeState st;
    pipeline.reset_episode(st);
    const sim::EpisodeResult res = sim::run_episode(
        route, [&](const sim::StepInputs& in) {
          const pipe::InferStep step = pipeline.infer_step(
              st, in.obs, std::size_t(in.instr), policy.directive(in.step));
          sim::ControlOut out;
          out.wp = step.wp;
          out.activated = step.activated;
          out.theta = step.theta;
          return out;
        },
        step_cap);

    RouteEval re;
    re.route_seed = route.seed;
    re.difficulty = route.difficulty;
    re.metrics = res.metrics;
    re.end = res.end;
    re.steps = res.steps;
    for (const sim::StepRecord& s : res.trace)
      re.activations += s.activated ? 1 : 0;
    re.activation_rate =
        re.steps ? double(re.activations) / double(re.steps) : 0.0;
    if (keep_traces) re.trace = res.trace;

    rep.mean_ds += res.metrics.ds;
    rep.mean_rc += res.metrics.rc;
    rep.mean_is += res.metrics.is_score;
    rep.mean_activation_rate += re.activation_rate;
    rep.frames += re.steps;
    rep.activations += re.activations;
    rep.routes.push_back(std::move(re));
  }

  const double inv = 1.0 / double(routes.size());
  rep.mean_ds *= inv;
  rep.mean_rc *= inv;
  rep.mean_is *= inv;
  rep.mean_activation_rate *= inv;
  rep.frame_activation_rate =
      rep.frames ? double(rep.activations) / double(rep.frames) : 0.0;
  rep.flops = pipeline.ledger();
  check_flop_conservation(rep.flops, pipeline);
  return rep;
}

std::vector<sim::Route> make_eval_routes(std::uint64_t seed_base,
                                         std::size_t n_easy,
                                         std::size_t n_hard,
                                         double min_expert_ds) {
  std::vector<sim::Route> out;
  auto collect = [&](sim::Difficulty d, std::size_t want) {
    std::uint64_t seed = seed_base;
    std::size_t got = 0, tried = 0;
    while (got < want) {
      SFD_CHECK(++tried <= want * 20 + 50,
                "route generation keeps failing the expert screen ("
                    << sim::difficulty_name(d) << ", seed base " << seed_base
                    << ")");
      sim::Route r = sim::generate_route(seed++, d);
      if (min_expert_ds > 0.0 &&
          sim::run_expert_episode(r).metrics.ds < min_expert_ds)
        continue;
      out.push_back(std::move(r));
      ++got;
    }
  };
  collect(sim::Difficulty::Easy, n_easy);
  collect(sim::Difficulty::Hard, n_hard);
  return out;
}

void check_flop_conservation(const pipe::FlopLedger& ledger,
                             const pipe::DrivePipeline& pipeline) {
  SFD_CHECK(ledger.encoder == ledger.steps * pipeline.encoder_flops(),
            "encoder tally " << ledger.encoder << " != steps "
                             << ledger.steps << " x unit cost");
  SFD_CHECK(ledger.qformer == ledger.steps * pipeline.qformer_flops(),
            "perception tally " << ledger.qformer << " != steps "
                                << ledger.steps << " x unit cost");
  SFD_CHECK(ledger.gate == ledger.gate_calls * pipeline.gate_flops(),
            "gate tally " << ledger.gate << " != calls " << ledger.gate_calls
                          << " x unit cost");
  SFD_CHECK(ledger.fast == ledger.fast_calls * pipeline.planner_flops(),
            "planner tally " << ledger.fast << " != calls "
                             << ledger.fast_calls << " x unit cost");
  std::uint64_t slow_sum = 0, slow_calls = 0;
  for (std::size_t k = 0; k < ledger.slow_calls_by_len.size(); ++k) {
    const std::uint64_t c = ledger.slow_calls_by_len[k];
    if (c == 0) continue;
    slow_sum += c * pipeline.slow_flops(k);
    slow_calls += c;
  }
  SFD_CHECK(slow_calls == ledger.slow_calls,
            "slow-path call histogram sums to " << slow_calls
                                                << ", counter says "
                                                << ledger.slow_calls);
  SFD_CHECK(slow_sum == ledger.slow,
            "slow-path tally " << ledger.slow
                               << " != histogram-weighted unit costs "
                               << slow_sum);
  SFD_CHECK(ledger.total() == ledger.encoder + ledger.qformer + ledger.gate +
                                  ledger.fast + ledger.slow,
            "ledger total is not the component sum");
}

// ---- CSV -------------------------------------------------------------------------------

std::string report_csv_header() {
  return "policy,n_routes,mean_ds,mean_rc,mean_is,mean_act_rate,"
         "frame_act_rate,frames,activations,flops_total,flops_encoder,"
         "flops_qformer,flops_gate,flops_fast,flops_slow,slow_calls";
}

std::string report_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << r.policy << ',' << r.n_routes << ',' << r.mean_ds << ',' << r.mean_rc
     << ',' << r.mean_is << ',' << r.mean_activation_rate << ','
     << r.frame_activation_rate << ',' << r.frames << ',' << r.activations
     << ',' << r.flops.total() << ',' << r.flops.encoder << ','
     << r.flops.qformer << ',' << r.flops.gate << ',' << r.flops.fast << ','
     << r.flops.slow << ',' << r.flops.slow_calls;
  return os.str();
}

std::vector<EvalReport> sweep(pipe::DrivePipeline& pipeline,
                              const std::vector<sim::Route>& routes,
                              const std::vector<GatePolicy>& policies,
                              std::size_t step_cap) {
  SFD_CHECK(policies.size() >= 2,
            "a sweep compares policies; give at least two");
  std::vector<EvalReport> out;
  out.reserve(policies.size());
  for (const GatePolicy& p : policies)
    out.push_back(evaluate(pipeline, routes, p, /*keep_traces=*/false,
                           step_cap));
  return out;
}

void write_reports_csv(const std::string& path,
                       const std::vector<EvalReport>& reports) {
  std::ofstream os(path, std::ios::trunc);
  SFD_CHECK(os.good(), "cannot open report CSV for writing: " << path);
  os << report_csv_header() << '\n';
  for (const EvalReport& r : reports) os << report_csv_row(r) << '\n';
  SFD_CHECK(os.good(), "write failure on report CSV: " << path);
}

// ---- activation analysis ---------------------------------------------------------------

namespace {

// "Near an event" marks the frames where remembering or counting should pay
// off: approaching or crossing a junction, or an occluded obstacle present
// and close ahead.
bool near_junction(const sim::Route& route, const sim::StepRecord& s) {
  for (const sim::Junction& j : route.junctions)
    if (s.progress >= j.arc - 10.0 && s.progress <= j.arc + 4.0) return true;
  return false;
}

bool near_occlusion(const sim::Route& route, const sim::StepRecord& s) {
  for (const sim::Obstacle& o : route.obstacles)
    if (o.occluded && o.present_at(s.step) && s.progress >= o.arc - 15.0 &&
        s.progress <= o.arc + 2.0)
      return true;
  return false;
}

}  // namespace

ActivationAnalysis analyze_activations(pipe::DrivePipeline& pipeline,
                                       const std::vector<sim::Route>& routes,
                                       std::size_t step_cap) {
  const EvalReport rep = evaluate(pipeline, routes, GatePolicy::adaptive(),
                                  /*keep_traces=*/true, step_cap);

  ActivationAnalysis out;
  out.rate_histogram.assign(10, 0);
  out.timelines = nlohmann::json::array();
  std::ostringstream tl_csv;
  tl_csv << "route_seed,difficulty,step,progress,activated,theta,"
            "near_junction,near_occlusion\n";
  std::size_t easy_act = 0, easy_frames = 0, hard_act = 0, hard_frames = 0;
  std::size_t near_act = 0, near_frames = 0, far_act = 0, far_frames = 0;

  for (std::size_t i = 0; i < routes.size(); ++i) {
    const sim::Route& route = routes[i];
    const RouteEval& re = rep.routes[i];
    const std::size_t bin =
        std::min<std::size_t>(9, std::size_t(re.activation_rate * 10.0));
    out.rate_histogram[bin] += 1;

    nlohmann::json tl;
    tl["route_seed"] = route.seed;
    tl["difficulty"] = sim::difficulty_name(route.difficulty);
    tl["steps"] = re.steps;
    tl["ds"] = re.metrics.ds;
    tl["activation_rate"] = re.activation_rate;
    nlohmann::json acts = nlohmann::json::array();
    for (const sim::StepRecord& s : re.trace) {
      const bool nj = near_junction(route, s);
      const bool no = near_occlusion(route, s);
      const bool near = nj || no;
      if (route.difficulty == sim::Difficulty::Easy) {
        ++easy_frames;
        easy_act += s.activated ? 1 : 0;
      } else {
        ++hard_frames;
        hard_act += s.activated ? 1 : 0;
      }
      if (near) {
        ++near_frames;
        near_act += s.activated ? 1 : 0;
      } else {
        ++far_frames;
        far_act += s.activated ? 1 : 0;
      }
      tl_csv << route.seed << ',' << sim::difficulty_name(route.difficulty)
             << ',' << s.step << ',' << s.progress << ','
             << (s.activated ? 1 : 0) << ',' << s.theta << ',' << (nj ? 1 : 0)
             << ',' << (no ? 1 : 0) << '\n';
      if (s.activated)
        acts.push_back({{"t", s.step},
                        {"progress", s.progress},
                        {"theta", s.theta},
                        {"near_event", near}});
    }
    tl["activations"] = std::move(acts);
    nlohmann::json events;
    events["junctions"] = nlohmann::json::array();
    for (const sim::Junction& j : route.junctions)
      events["junctions"].push_back(
          {{"arc", j.arc}, {"branch", j.instructed_branch}});
    events["obstacles"] = nlohmann::json::array();
    for (const sim::Obstacle& o : route.obstacles)
      events["obstacles"].push_back({{"arc", o.arc},
                                     {"occluded", o.occluded},
                                     {"reveal", o.reveal_step},
                                     {"clear", o.clear_step}});
    tl["events"] = std::move(events);
    out.timelines.push_back(std::move(tl));
  }

  out.easy_rate = easy_frames ? double(easy_act) / double(easy_frames) : 0.0;
  out.hard_rate = hard_frames ? double(hard_act) / double(hard_frames) : 0.0;
  out.near_event_rate =
      near_frames ? double(near_act) / double(near_frames) : 0.0;
  out.far_event_rate = far_frames ? double(far_act) / double(far_frames) : 0.0;

  std::ostringstream hist;
  hist << "bin_lo,bin_hi,routes\n";
  for (std::size_t b = 0; b < out.rate_histogram.size(); ++b)
    hist << 0.1 * double(b) << ',' << 0.1 * double(b + 1) << ','
         << out.rate_histogram[b] << '\n';
  out.histogram_csv = hist.str();
  out.timelines_csv = tl_csv.str();
  return out;
}

// ---- ablations -------------------------------------------------------------------------

AblationSpec ablation_variant(const std::string& name,
                              const pipe::PipelineConfig& base) {
  AblationSpec spec;
  spec.name = name;
  spec.pipe = base;
  spec.policy = GatePolicy::always();

  std::size_t pos = 0;
  while (pos <= name.size()) {
    const std::size_t next = name.find('+', pos);
    const std::string tok = name.substr(
        pos, next == std::string::npos ? std::string::npos : next - pos);
    if (tok == "full") {
      // base as-is
    } else if (tok == "no_connectors") {
      spec.pipe.with_slow_path = false;
      spec.policy = GatePolicy::never();
    } else if (tok == "w_only") {
      spec.pipe.use_theta_fusion = false;
    } else if (tok == "vanilla_qformer") {
      spec.pipe.qformer.n_memory = 0;
    } else if (tok == "fifo") {
      spec.pipe.buffer_policy = buf::EvictionPolicy::FIFO;
    } else if (tok == "hard_reset") {
      spec.pipe.buffer_policy = buf::EvictionPolicy::HardReset;
    } else {
      unsigned k = 0;
      char trail = '\0';
      SFD_CHECK(std::sscanf(tok.c_str(), "k%u%c", &k, &trail) == 1 && k >= 1,
                "unknown ablation variant token: '" << tok << "' in '" << name
                                                    << "'");
      spec.pipe.buffer_capacity = k;
      spec.pipe.slow.max_slots = k;
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  // Keep downstream token counts consistent with the aggregator output
  // (dropping the memory queries shrinks the planner's input set).
  spec.pipe.planner.n_tokens =
      spec.pipe.qformer.n_local + spec.pipe.qformer.n_memory;
  spec.pipe.slow.n_out = spec.pipe.planner.n_tokens;
  return spec;
}

std::vector<AblationRow> ablate(const std::vector<AblationSpec>& specs,
                                const train::TrainConfig& base_cfg,
                                const train::Dataset& data,
                                const std::vector<sim::Route>& eval_routes,
                                std::size_t step_cap) {
  std::vector<AblationRow> rows;
  rows.reserve(specs.size());
  for (const AblationSpec& spec : specs) {
    train::TrainConfig cfg = base_cfg;
    cfg.pipe = spec.pipe;
    if (!base_cfg.run_dir.empty()) {
      cfg.run_dir = (fs::path(base_cfg.run_dir) / spec.name).string();
      cfg.resume = true;  // reuse a finished run for this variant
    }
    Rng rng(cfg.seed);
    pipe::DrivePipeline pipeline(cfg.pipe, rng);
    const train::TrainResult tr = train::train(cfg, data, pipeline);
    const EvalReport rep = evaluate(pipeline, eval_routes, spec.policy,
                                    /*keep_traces=*/false, step_cap);

    AblationRow row;
    row.name = spec.name;
    row.policy = rep.policy;
    row.mean_ds = rep.mean_ds;
    row.activation_rate = rep.frame_activation_rate;
    row.flops_total = rep.flops.total();
    row.param_count = pipeline.params().scalar_count();
    row.checkpoint = tr.final_checkpoint;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv_header() {
  return "variant,policy,mean_ds,act_rate,flops_total,params,checkpoint";
}

std::string ablation_csv_row(const AblationRow& r) {
  std::ostringstream os;
  os << r.name << ',' << r.policy << ',' << r.mean_ds << ','
     << r.activation_rate << ',' << r.flops_total << ',' << r.param_count
     << ',' << r.checkpoint;
  return os.str();
}

}  // namespace sfd::eval
