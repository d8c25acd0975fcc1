#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfdrive/connectors.hpp"
#include "sfdrive/fast_path.hpp"
#include "sfdrive/slow_path.hpp"
#include "sfdrive/stream_buffer.hpp"

// End-to-end wiring of one control step: observation encoder -> token
// aggregator -> stream buffer -> (gated slow path, fused) -> waypoint
// planner, with per-component integer FLOP accounting.
namespace sfd::pipe {

using ad::Tensor;

struct EncoderConfig {
  std::size_t obs_dim = 0;  // flat observation length (set from the simulator)
  std::size_t tokens = 16;  // frame tokens produced
  std::size_t inner = 16;   // per-token width before channel projection
  std::size_t dim = 64;     // channel width C
};

// Flat observation vector -> (tokens x dim) frame features.
class ObservationEncoder {
 public:
  ObservationEncoder() = default;
  ObservationEncoder(nn::ParamStore& ps, const std::string& name,
                     EncoderConfig cfg, Rng& rng);

  qf::FeatureTokens encode(const Tensor& obs, std::size_t frame_index) const;
  std::uint64_t flops() const;
  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  nn::Linear l1_;  // obs_dim -> tokens*inner
  nn::Linear l2_;  // inner -> dim, shared across tokens
  nn::LayerNorm ln_;
};

struct PipelineConfig {
  EncoderConfig encoder;
  qf::QFormerConfig qformer;
  slow::SlowConfig slow;
  fast::PlannerConfig planner;
  conn::GateConfig gate;
  std::size_t n_instructions = 8;
  std::size_t instr_tokens = 2;
  std::size_t buffer_capacity = 10;
  buf::EvictionPolicy buffer_policy = buf::EvictionPolicy::PMF;
  std::size_t bptt_window = 8;   // frames between graph truncations
  double margin = 0.3;           // activation-loss margin d
  bool with_slow_path = true;    // false: slow model + gate never constructed
  bool use_gate = true;          // learned activation (skipped: always-on)
  bool use_theta_fusion = true;  // confidence-scaled fusion (skipped: weight 1)

  // Stable string form, hashed into checkpoints/manifests so stale artifacts
  // are rejected instead of silently mixed.
  std::string describe() const;
  std::uint64_t hash() const;
};

// Full-fidelity JSON round-trip so a checkpoint can carry the exact
// configuration that produced it.
nlohmann::json config_to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::json& j);

// Integer 2xMAC tallies per component. total() is definitionally the sum;
// reports re-derive each component from call counts and unit costs to prove
// conservation.
struct FlopLedger {
  std::uint64_t encoder = 0, qformer = 0, gate = 0, fast = 0, slow = 0;
  std::uint64_t steps = 0, fast_calls = 0, gate_calls = 0, slow_calls = 0;
  std::vector<std::uint64_t> slow_calls_by_len;  // index = snapshot length
  std::uint64_t total() const { return encoder + qformer + gate + fast + slow; }
  void reset();
};

// Mutable per-episode state; the pipeline itself stays const across episodes.
struct EpisodeState {
  qf::QueryBank bank;
  buf::StreamBuffer buffer;
  std::size_t frame = 0;
  std::uint64_t slow_calls = 0;
};

// One training step: the three branch predictions and their losses.
struct TrainStep {
  conn::GateDecision gate;
  conn::StepLosses losses;
  fast::Waypoints wp_fast, wp_llm, wp_fuse;
  std::size_t snapshot_len = 0;
};

// One control step at inference.
struct InferStep {
  fast::Waypoints wp;
  bool activated = false;
  double theta = -1.0;  // -1 when the gate head was not consulted
};

// Per-step activation directive chosen by the evaluation policy.
enum class Activation {
  Gate,   // consult the learned gate
  Force,  // invoke the slow path unconditionally
  Skip,   // fast path only; the gate head is not even consulted
};

class DrivePipeline {
 public:
  DrivePipeline(PipelineConfig cfg, Rng& rng);

  void reset_episode(EpisodeState& st) const;
  // BPTT window boundary: keep values, cut graphs (memory + buffer slots).
  void truncate_bptt(EpisodeState& st) const;

  // Training: one aggregation, exactly one slow-path call, three plans
  // (fast alone, full-weight fusion, confidence-scaled fusion) and their
  // losses. force_activate pins pi = 1 (warmup) with theta detached.
  TrainStep train_step(EpisodeState& st, const Tensor& obs,
                       std::size_t instruction_id,
                       const fast::Waypoints& expert, Rng& rng,
                       bool force_activate);

  // Inference: at most one slow-path call, no RNG, no graph recording
  // expected (run without a live Tape).
  InferStep infer_step(EpisodeState& st, const Tensor& obs,
                       std::size_t instruction_id, Activation directive);

  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  const PipelineConfig& config() const { return cfg_; }
  FlopLedger& ledger() { return ledger_; }
  const FlopLedger& ledger() const { return ledger_; }

  // Per-step / per-call unit costs (for conservation cross-checks).
  std::uint64_t encoder_flops() const;
  std::uint64_t qformer_flops() const;
  std::uint64_t gate_flops() const;
  std::uint64_t planner_flops() const;
  std::uint64_t slow_flops(std::size_t snapshot_len) const;

  const slow::SlowModel* slow_model() const { return slow_.get(); }
  const fast::Planner& planner() const { return planner_; }
  const conn::GateHead* gate_head() const { return gate_.get(); }
  const qf::InstructionEmbedder& instructions() const { return instr_; }

 private:
  qf::FeatureTokens perceive(EpisodeState& st, const Tensor& obs,
                             std::size_t instruction_id);

  PipelineConfig cfg_;
  nn::ParamStore ps_;
  ObservationEncoder enc_;
  qf::InstructionEmbedder instr_;
  qf::QFormer qf_;
  std::unique_ptr<slow::SlowModel> slow_;
  fast::Planner planner_;
  std::unique_ptr<conn::GateHead> gate_;
  FlopLedger ledger_;
};

}  // namespace sfd::pipe
