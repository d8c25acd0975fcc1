#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfdrive/pipeline.hpp"
#include "sfdrive/sim.hpp"
#include "sfdrive/trainer.hpp"

namespace sfd::eval {

// When to invoke the slow path during closed-loop evaluation.
struct GatePolicy {
  enum class Kind { Adaptive, Fixed, Always, Never };
  Kind kind = Kind::Adaptive;
  double rate = 0.0;  // Fixed only: target activation fraction in [0, 1]

  static GatePolicy adaptive() { return {Kind::Adaptive, 0.0}; }
  static GatePolicy fixed(double f);
  static GatePolicy always() { return {Kind::Always, 0.0}; }
  static GatePolicy never() { return {Kind::Never, 0.0}; }
  static GatePolicy from_name(const std::string& name);

  std::string name() const;  // adaptive | fixed_<rate> | always | never
  // Fixed activates at step i exactly when floor((i+1)*rate) ticks past
  // floor(i*rate), spreading activations evenly; Never skips the gate head
  // entirely so a gateless build behaves identically.
  pipe::Activation directive(std::size_t step) const;
};

struct RouteEval {
  std::uint64_t route_seed = 0;
  sim::Difficulty difficulty = sim::Difficulty::Easy;
  sim::RouteMetrics metrics;
  sim::EpisodeEnd end = sim::EpisodeEnd::Timeout;
  std::size_t steps = 0;
  std::size_t activations = 0;
  double activation_rate = 0.0;
  std::vector<sim::StepRecord> trace;  // filled only when traces are kept
};

struct EvalReport {
  std::string policy;
  std::size_t n_routes = 0;
  double mean_ds = 0.0, mean_rc = 0.0, mean_is = 0.0;
  double mean_activation_rate = 0.0;   // mean of per-route rates
  double frame_activation_rate = 0.0;  // pooled activations / frames
  std::size_t frames = 0, activations = 0;
  pipe::FlopLedger flops;  // exact integer tallies for this evaluation
  std::vector<RouteEval> routes;
};

// Closed-loop evaluation over the route set. The pipeline's FLOP ledger is
// reset first, so report.flops covers exactly this run. step_cap 0 uses the
// simulator default; suites with shorter horizons pass their own cap.
EvalReport evaluate(pipe::DrivePipeline& pipeline,
                    const std::vector<sim::Route>& routes,
                    const GatePolicy& policy, bool keep_traces = false,
                    std::size_t step_cap = 0);

// Generated eval routes, optionally screened so the expert itself scores at
// least min_expert_ds (0 disables the screen). Seeds start at seed_base.
std::vector<sim::Route> make_eval_routes(std::uint64_t seed_base,
                                         std::size_t n_easy,
                                         std::size_t n_hard,
                                         double min_expert_ds = 0.0);

// Every component tally must equal its call count times its unit cost, and
// the total must equal the component sum. Throws on any violation.
void check_flop_conservation(const pipe::FlopLedger& ledger,
                             const pipe::DrivePipeline& pipeline);

// Schema-stable CSV (one row per report).
std::string report_csv_header();
std::string report_csv_row(const EvalReport& r);
// One evaluate per policy over the identical route set (needs >= 2 policies).
std::vector<EvalReport> sweep(pipe::DrivePipeline& pipeline,
                              const std::vector<sim::Route>& routes,
                              const std::vector<GatePolicy>& policies,
                              std::size_t step_cap = 0);
void write_reports_csv(const std::string& path,
                       const std::vector<EvalReport>& reports);

// Where the learned gate chooses to spend slow-path calls: rates split by
// difficulty, by proximity to decision-relevant events (junction zones and
// hidden-obstacle windows), per-route annotated timelines, and ready-to-write
// CSV blobs (rate histogram; step-indexed binary activation timelines).
struct ActivationAnalysis {
  double easy_rate = 0.0, hard_rate = 0.0;
  double near_event_rate = 0.0, far_event_rate = 0.0;
  std::vector<std::size_t> rate_histogram;  // per-route rates, 10 bins
  nlohmann::json timelines;
  std::string histogram_csv;  // bin_lo,bin_hi,routes
  std::string timelines_csv;  // route_seed,difficulty,step,... one row/step
};
ActivationAnalysis analyze_activations(pipe::DrivePipeline& pipeline,
                                       const std::vector<sim::Route>& routes,
                                       std::size_t step_cap = 0);

// ---- ablations ---------------------------------------------------------------------

// A named pipeline variant plus the policy it is scored under (builds
// without a slow path are scored with Never; everything else with Always so
// the connector contribution is isolated from gating behavior).
struct AblationSpec {
  std::string name;
  pipe::PipelineConfig pipe;
  GatePolicy policy;
};

// Derives a variant from a base config. Single edits:
//   full            the base itself
//   no_connectors   fast path only
//   w_only          learned fusion, confidence weight pinned to 1
//   vanilla_qformer no recurrent memory queries
//   fifo            buffer evicts oldest instead of merging
//   hard_reset      buffer clears when full
//   k<N>            buffer capacity N (e.g. k5, k20)
// Edits compose with '+' ("w_only+fifo+k5"), spanning the full ablation grid.
AblationSpec ablation_variant(const std::string& name,
                              const pipe::PipelineConfig& base);

struct AblationRow {
  std::string name;
  std::string policy;
  double mean_ds = 0.0;
  double activation_rate = 0.0;
  std::uint64_t flops_total = 0;
  std::size_t param_count = 0;
  std::string checkpoint;
};

// Trains each variant under the shared schedule (base_cfg.pipe is replaced
// per variant; run_dir gains a per-variant subdirectory and completed runs
// are reused) and scores it on the eval routes.
std::vector<AblationRow> ablate(const std::vector<AblationSpec>& specs,
                                const train::TrainConfig& base_cfg,
                                const train::Dataset& data,
                                const std::vector<sim::Route>& eval_routes,
                                std::size_t step_cap = 0);

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& r);

}  // namespace sfd::eval
