#include "sfdrive/connectors.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace sfd::conn {

GateHead::GateHead(nn::ParamStore& ps, const std::string& name, GateConfig cfg,
                   Rng& rng)
    : cfg_(cfg),
      l1_(ps, name + ".l1", cfg.dim, cfg.hidden, rng),
      l2_(ps, name + ".l2", cfg.hidden, 1, rng) {
  SFD_CHECK(cfg.dim > 0 && cfg.hidden > 0, "gate dims must be positive");
  SFD_CHECK(cfg.temperature > 0, "gate temperature must be positive, got "
                                     << cfg.temperature);
}

Tensor GateHead::confidence(const qf::FeatureTokens& f_prime) const {
  SFD_CHECK(f_prime.tokens.defined() && f_prime.tokens.cols() == cfg_.dim,
            "gate expects (*, " << cfg_.dim << ") tokens, got "
                                << f_prime.tokens.shape_str());
  Tensor pooled = ad::mean_rows(f_prime.tokens);          // (1, dim)
  Tensor h = ad::gelu(l1_(pooled));               // (1, hidden)
  Tensor logit = ad::reshape(l2_(h), {});         // scalar
  return ad::sigmoid(logit);
}

GateDecision GateHead::decide_train(const qf::FeatureTokens& f_prime,
                                    Rng& rng) const {
  GateDecision d;
  d.theta = confidence(f_prime);
  nn::GumbelSample s = nn::gumbel_binary(d.theta, cfg_.temperature, rng);
  d.pi = s.pi;
  d.soft_pi = s.soft;
  d.sampled = true;
  return d;
}

GateDecision GateHead::decide_infer(const qf::FeatureTokens& f_prime) const {
  GateDecision d;
  d.theta = confidence(f_prime);
  double hard = d.theta.value() >= 0.5 ? 1.0 : 0.0;
  d.pi = Tensor::scalar(hard);
  d.soft_pi = hard;
  d.sampled = false;
  return d;
}

std::uint64_t GateHead::flops(std::size_t n_tokens) const {
  (void)n_tokens;  // pooling is not a MAC; only the MLP counts
  return l1_.flops(1) + l2_.flops(1);
}

StepLosses adaptive_activation_loss(const Tensor& pi, const Tensor& loss_fast,
                                    const Tensor& loss_llm, double margin) {
  SFD_CHECK(margin >= 0, "margin must be non-negative, got " << margin);
  SFD_CHECK(pi.defined() && pi.is_scalar(),
            "pi must be a defined scalar tensor");
  SFD_CHECK(loss_fast.defined() && loss_fast.is_scalar() &&
                loss_llm.defined() && loss_llm.is_scalar(),
            "branch losses must be scalar tensors");
  double lf = loss_fast.value();
  double ll = loss_llm.value();
  double p = pi.value();
  SFD_CHECK(std::isfinite(lf) && lf >= 0,
            "fast-branch loss must be finite and >= 0, got " << lf);
  SFD_CHECK(std::isfinite(ll) && ll >= 0,
            "slow-branch loss must be finite and >= 0, got " << ll);
  SFD_CHECK(p == 0.0 || p == 1.0, "pi must be exactly 0 or 1, got " << p);

  StepLosses out;
  out.loss_fast = loss_fast;
  out.loss_llm = loss_llm;
  out.margin = margin;
  // gamma penalizes activations whose improvement falls short of the margin.
  out.gamma = std::max(margin - (lf - ll), 0.0);
  // Branch losses enter detached: the comparison trains the gate through
  // pi's straight-through path, not the branches through the comparison.
  out.loss_ada = ad::gate_blend(pi, ll + out.gamma, lf);
  return out;
}

qf::FeatureTokens fuse(const qf::FeatureTokens& f_prime,
                       const qf::FeatureTokens& f_doubleprime,
                       const Tensor& theta) {
  SFD_CHECK(f_prime.tokens.defined() && f_doubleprime.tokens.defined(),
            "fuse requires defined token sets");
  SFD_CHECK(f_prime.tokens.shape() == f_doubleprime.tokens.shape(),
            "fuse shape mismatch: " << f_prime.tokens.shape_str() << " vs "
                                    << f_doubleprime.tokens.shape_str());
  SFD_CHECK(theta.defined() && theta.is_scalar(),
            "fusion weight must be a scalar tensor");
  double th = theta.value();
  SFD_CHECK(std::isfinite(th) && th >= 0.0 && th <= 1.0,
            "fusion weight must lie in [0, 1], got " << th);
  qf::FeatureTokens out;
  out.frame_index = f_prime.frame_index;
  out.tokens =
      ad::add(f_prime.tokens, ad::scale_by(f_doubleprime.tokens, theta));
  return out;
}

std::string trace_json(std::size_t t, const GateDecision& gate,
                       const StepLosses* losses) {
  nlohmann::json j;
  j["t"] = t;
  j["theta"] = gate.theta.defined() ? gate.theta.value() : -1.0;
  j["pi"] = gate.pi.defined() ? gate.pi.value() : 0.0;
  if (losses != nullptr) {
    j["loss_fast"] = losses->loss_fast.value();
    j["loss_llm"] = losses->loss_llm.value();
    j["gamma"] = losses->gamma;
    if (losses->loss_fuse.defined()) j["loss_fuse"] = losses->loss_fuse.value();
  }
  return j.dump();
}

}  // namespace sfd::conn
