#pragma once

#include <cstdint>
#include <string>

#include "sfdrive/qformer.hpp"

// The two learned connectors around the slow path: a confidence gate deciding
// WHEN to invoke it (theta -> sampled/thresholded binary pi, plus the adaptive
// activation loss with margin penalty) and confidence-scaled fusion deciding
// HOW MUCH its output contributes (f' + theta * f'').
namespace sfd::conn {

using ad::Tensor;

struct GateConfig {
  std::size_t dim = 64;     // channel width of f'
  std::size_t hidden = 64;  // gate MLP hidden width
  double temperature = 1.0; // Gumbel relaxation temperature (no annealing)
};

struct GateDecision {
  Tensor theta;        // scalar in (0,1), graph-connected
  Tensor pi;           // scalar, forward value in {0,1}
  double soft_pi = 0;  // relaxed sample (training); equals pi at inference
  bool sampled = false;
};

class GateHead {
 public:
  GateHead() = default;
  GateHead(nn::ParamStore& ps, const std::string& name, GateConfig cfg,
           Rng& rng);

  // sigmoid(MLP(mean-pooled tokens)) -> confidence scalar
  Tensor confidence(const qf::FeatureTokens& f_prime) const;
  // training: Gumbel-binary straight-through sample of theta
  GateDecision decide_train(const qf::FeatureTokens& f_prime, Rng& rng) const;
  // inference: deterministic threshold pi = [theta >= 0.5]
  GateDecision decide_infer(const qf::FeatureTokens& f_prime) const;

  std::uint64_t flops(std::size_t n_tokens) const;
  const GateConfig& config() const { return cfg_; }

 private:
  GateConfig cfg_;
  nn::Linear l1_, l2_;
};

// Per-step losses around one gate decision. The margin penalty and blended
// loss satisfy, exactly:
//   gamma    == max(margin - (loss_fast - loss_llm), 0)
//   loss_ada == pi*(loss_llm + gamma) + (1-pi)*loss_fast
struct StepLosses {
  Tensor loss_fast;  // L: fast path alone
  Tensor loss_llm;   // L^LLM: full-weight fusion branch
  Tensor loss_fuse;  // confidence-scaled fusion branch (filled by the caller)
  double gamma = 0.0;
  double margin = 0.0;
  Tensor loss_ada;
};

// Builds gamma and loss_ada from the branch losses. The branch losses enter
// as detached scalars: the gate learns from the comparison via pi's
// straight-through gradient, and must not reshape the branches themselves.
StepLosses adaptive_activation_loss(const Tensor& pi, const Tensor& loss_fast,
                                    const Tensor& loss_llm, double margin);

// Eq.-style weighted integration: f' + theta * f''. Gradient flows into
// theta, letting the fused trajectory loss tune the contribution scale.
qf::FeatureTokens fuse(const qf::FeatureTokens& f_prime,
                       const qf::FeatureTokens& f_doubleprime,
                       const Tensor& theta);

// One JSON line per step for timeline analysis: t, theta, pi, branch losses,
// gamma. losses may be null (inference has no losses).
std::string trace_json(std::size_t t, const GateDecision& gate,
                       const StepLosses* losses);

}  // namespace sfd::conn
