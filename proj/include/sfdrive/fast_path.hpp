#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfdrive/qformer.hpp"

// The lightweight high-frequency planner: a narrow 4-layer transformer over
// the aggregated frame tokens plus M learned waypoint queries, decoding M
// future 2D waypoints as cumulative offsets from the ego origin.
namespace sfd::fast {

using ad::Tensor;

// M ordered 2D points in the ego frame (meters, x forward, y left).
struct Waypoints {
  Tensor pts;  // (M x 2)
  std::size_t count() const { return pts.rows(); }
  double x(std::size_t i) const { return pts.at(i, 0); }
  double y(std::size_t i) const { return pts.at(i, 1); }
};

struct PlannerConfig {
  std::size_t in_dim = 64;    // channel width of incoming tokens
  std::size_t width = 20;     // internal width (kept well under the slow path)
  std::size_t layers = 4;
  std::size_t heads = 2;
  std::size_t ffn_mult = 2;
  std::size_t n_tokens = 40;  // expected token count of f'
  std::size_t waypoints = 5;  // M
  double clamp = 100.0;       // |x|,|y| sanity bound in meters
};

class Planner {
 public:
  Planner() = default;
  Planner(nn::ParamStore& ps, const std::string& name, PlannerConfig cfg,
          Rng& rng);

  // f' (or the fused f' + theta*f'') -> M waypoints. Deterministic.
  Waypoints plan(const qf::FeatureTokens& features) const;

  std::uint64_t flops() const;
  const PlannerConfig& config() const { return cfg_; }

 private:
  PlannerConfig cfg_;
  nn::Linear proj_;    // in_dim -> width
  Tensor token_pos_;   // (n_tokens x width) learned positions
  Tensor wp_queries_;  // (M x width)
  std::vector<nn::AttentionBlock> blocks_;
  nn::Linear head_;    // width -> 2D offset
};

// Mean absolute error over all 2M coordinates; zero iff equal.
Tensor trajectory_loss(const Waypoints& pred, const Waypoints& gt);

}  // namespace sfd::fast
