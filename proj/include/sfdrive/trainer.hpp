#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfdrive/pipeline.hpp"
#include "sfdrive/sim.hpp"

namespace sfd::train {

using ad::Tensor;

// One expert rollout unrolled into supervised frames: the observation the
// policy would have seen and the waypoints the expert chose there.
struct EpisodeData {
  std::uint64_t route_seed = 0;
  sim::Difficulty difficulty = sim::Difficulty::Easy;
  std::vector<Tensor> obs;
  std::vector<std::size_t> instr;
  std::vector<fast::Waypoints> expert;
  std::size_t length() const { return obs.size(); }
};

struct Dataset {
  std::vector<EpisodeData> episodes;
  std::uint64_t digest = 0;  // deterministic content fingerprint
  std::size_t total_frames() const;
};

// Rolls the expert through freshly generated routes and keeps a route only
// when the expert itself completes it with DS >= min_expert_ds. Seeds are
// consumed in order starting at seed_base, so the result is a pure function
// of the arguments.
Dataset build_dataset(std::uint64_t seed_base, std::size_t n_easy,
                      std::size_t n_hard, double min_expert_ds = 0.95);

struct TrainConfig {
  pipe::PipelineConfig pipe;
  std::uint64_t seed = 1;
  std::size_t epochs = 15;
  std::size_t batch = 4;
  double lr = 3e-3;
  double weight_decay = 0.01;
  // Share of optimizer steps with the slow path pinned on and the gate
  // untrained; afterwards the gate trains through the adaptive loss.
  double warmup_frac = 0.3;
  double lambda = 0.1;  // post-warmup weight on the plain branch losses
  // "" disables checkpoints, metrics, and the manifest.
  std::string run_dir;
  // Continue from the newest epoch checkpoint in run_dir (bit-exact with an
  // uninterrupted run of the same config).
  bool resume = false;
  // Stop after this many epochs have been completed in THIS call (0 = run to
  // cfg.epochs). The schedule still derives from cfg.epochs, so a stopped
  // run plus a resumed run replays one uninterrupted run exactly.
  std::size_t stop_after_epochs = 0;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based, the epoch just completed
  double loss_fast = 0.0;
  double loss_llm = 0.0;
  double loss_fuse = 0.0;
  double loss_ada = 0.0;
  double gamma_mean = 0.0;
  double activation_rate = 0.0;  // mean pi over the epoch's frames
  bool any_warmup = false;       // true if any step in the epoch was warmup
};

struct TrainResult {
  std::size_t optimizer_steps = 0;  // cumulative, including resumed-over steps
  std::size_t frames = 0;
  std::size_t warmup_steps = 0;  // where the schedule switches objectives
  std::vector<EpochStats> epochs;  // epochs completed in this call
  std::string final_checkpoint;    // "" when run_dir is empty
};

// Supervised closed-loop distillation: batches of episodes advance in
// lockstep, one tape per truncation window, one optimizer step per window.
// The pipeline must have been built with cfg.pipe.
TrainResult train(const TrainConfig& cfg, const Dataset& data,
                  pipe::DrivePipeline& pipeline);

}  // namespace sfd::train
