#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sfdrive/qformer.hpp"

// The heavyweight low-frequency reasoner: pools each buffered frame into a few
// tokens, tags them with learned recency embeddings and a broadcast
// instruction conditioning, runs a deep trunk over all slot tokens, and
// cross-attends N learned output queries to produce integrated features f''
// shaped exactly like the aggregator output f'.
namespace sfd::slow {

using ad::Tensor;

struct SlowConfig {
  std::size_t dim = 64;         // channel width C
  std::size_t layers = 6;       // trunk depth
  std::size_t heads = 2;
  std::size_t ffn_mult = 2;
  std::size_t slot_tokens = 4;  // pooled tokens per buffered frame
  std::size_t n_out = 40;       // output tokens; must equal f' token count
  std::size_t max_slots = 10;   // buffer capacity k
};

class SlowModel {
 public:
  SlowModel() = default;
  SlowModel(nn::ParamStore& ps, const std::string& name, SlowConfig cfg,
            Rng& rng);

  // (instruction tokens, buffer snapshot oldest-first) -> f'' (n_out x dim).
  // Deterministic given parameters and inputs; snapshot must be non-empty.
  qf::FeatureTokens reason(const Tensor& instr_tokens,
                           const std::vector<qf::FeatureTokens>& snapshot) const;

  // Analytic cost: 2 x multiply-accumulate count over every matmul for a call
  // with `n_slots` buffered frames. Monotone in n_slots and layer count.
  std::uint64_t flops(std::size_t n_slots) const;

  // The slow/fast premise: this model must cost at least `min_ratio` times the
  // fast path per call at a full buffer.
  void assert_cost_dominates(std::uint64_t fast_flops,
                             double min_ratio = 10.0) const;

  const SlowConfig& config() const { return cfg_; }

 private:
  SlowConfig cfg_;
  Tensor pool_;         // (slot_tokens x n_out): frame tokens -> slot tokens
  Tensor slot_pos_;     // (max_slots x dim) learned recency embeddings
  Tensor out_queries_;  // (n_out x dim) readout queries
  nn::Linear instr_proj_;
  std::vector<nn::AttentionBlock> trunk_;
  nn::AttentionBlock readout_;
};

}  // namespace sfd::slow
