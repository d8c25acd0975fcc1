#include "sfdrive/pipeline.hpp"

#include <sstream>

namespace sfd::pipe {

// ---- observation encoder -------------------------------------------------------------

ObservationEncoder::ObservationEncoder(nn::ParamStore& ps,
                                       const std::string& name,
                                       EncoderConfig cfg, Rng& rng)
    : cfg_(cfg),
      l1_(ps, name + ".l1", cfg.obs_dim, cfg.tokens * cfg.inner, rng),
      l2_(ps, name + ".l2", cfg.inner, cfg.dim, rng),
      ln_(ps, name + ".ln", cfg.dim) {
  SFD_CHECK(cfg.obs_dim > 0, "encoder obs_dim must be set before construction");
  SFD_CHECK(cfg.tokens > 0 && cfg.inner > 0 && cfg.dim > 0,
            "encoder dims must be positive");
}

qf::FeatureTokens ObservationEncoder::encode(const Tensor& obs,
                                             std::size_t frame_index) const {
  SFD_CHECK(obs.defined() && obs.size() == cfg_.obs_dim,
            "encoder expects a " << cfg_.obs_dim
                                 << "-element observation, got shape "
                                 << obs.shape_str());
  Tensor row = ad::reshape(obs, {1, cfg_.obs_dim});
  Tensor h = ad::gelu(l1_(row));                    // (1, T*inner)
  Tensor grid = ad::reshape(h, {cfg_.tokens, cfg_.inner});  // (T, inner)
  qf::FeatureTokens out;
  out.frame_index = frame_index;
  out.tokens = ln_(l2_(grid));  // (T, dim)
  return out;
}

std::uint64_t ObservationEncoder::flops() const {
  return l1_.flops(1) + l2_.flops(cfg_.tokens);
}

// ---- config ---------------------------------------------------------------------------

std::string PipelineConfig::describe() const {
  std::ostringstream os;
  os << "enc(obs=" << encoder.obs_dim << ",tok=" << encoder.tokens
     << ",inner=" << encoder.inner << ",dim=" << encoder.dim << ")"
     << ";qf(dim=" << qformer.dim << ",local=" << qformer.n_local
     << ",mem=" << qformer.n_memory << ",heads=" << qformer.heads
     << ",ffn=" << qformer.ffn_mult << ")"
     << ";slow(dim=" << slow.dim << ",layers=" << slow.layers
     << ",heads=" << slow.heads << ",ffn=" << slow.ffn_mult
     << ",slot=" << slow.slot_tokens << ",out=" << slow.n_out
     << ",k=" << slow.max_slots << ")"
     << ";fast(in=" << planner.in_dim << ",w=" << planner.width
     << ",layers=" << planner.layers << ",heads=" << planner.heads
     << ",ffn=" << planner.ffn_mult << ",tok=" << planner.n_tokens
     << ",M=" << planner.waypoints << ",clamp=" << planner.clamp << ")"
     << ";gate(dim=" << gate.dim << ",hidden=" << gate.hidden
     << ",temp=" << gate.temperature << ")"
     << ";instr=" << n_instructions << "x" << instr_tokens
     << ";buf=" << buffer_capacity << "/" << buf::policy_name(buffer_policy)
     << ";bptt=" << bptt_window << ";margin=" << margin
     << ";slow_path=" << (with_slow_path ? 1 : 0)
     << ";gate_on=" << (use_gate ? 1 : 0)
     << ";theta_on=" << (use_theta_fusion ? 1 : 0);
  return os.str();
}

std::uint64_t PipelineConfig::hash() const { return fnv1a(describe()); }

nlohmann::json config_to_json(const PipelineConfig& cfg) {
  nlohmann::json j;
  j["encoder"] = {{"obs_dim", cfg.encoder.obs_dim},
                  {"tokens", cfg.encoder.tokens},
                  {"inner", cfg.encoder.inner},
                  {"dim", cfg.encoder.dim}};
  j["qformer"] = {{"dim", cfg.qformer.dim},
                  {"n_local", cfg.qformer.n_local},
                  {"n_memory", cfg.qformer.n_memory},
                  {"heads", cfg.qformer.heads},
                  {"ffn_mult", cfg.qformer.ffn_mult}};
  j["slow"] = {{"dim", cfg.slow.dim},
               {"layers", cfg.slow.layers},
               {"heads", cfg.slow.heads},
               {"ffn_mult", cfg.slow.ffn_mult},
               {"slot_tokens", cfg.slow.slot_tokens},
               {"n_out", cfg.slow.n_out},
               {"max_slots", cfg.slow.max_slots}};
  j["planner"] = {{"in_dim", cfg.planner.in_dim},
                  {"width", cfg.planner.width},
                  {"layers", cfg.planner.layers},
                  {"heads", cfg.planner.heads},
                  {"ffn_mult", cfg.planner.ffn_mult},
                  {"n_tokens", cfg.planner.n_tokens},
                  {"waypoints", cfg.planner.waypoints},
                  {"clamp", cfg.planner.clamp}};
  j["gate"] = {{"dim", cfg.gate.dim},
               {"hidden", cfg.gate.hidden},
               {"temperature", cfg.gate.temperature}};
  j["n_instructions"] = cfg.n_instructions;
  j["instr_tokens"] = cfg.instr_tokens;
  j["buffer_capacity"] = cfg.buffer_capacity;
  j["buffer_policy"] = buf::policy_name(cfg.buffer_policy);
  j["bptt_window"] = cfg.bptt_window;
  j["margin"] = cfg.margin;
  j["with_slow_path"] = cfg.with_slow_path;
  j["use_gate"] = cfg.use_gate;
  j["use_theta_fusion"] = cfg.use_theta_fusion;
  return j;
}

PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig cfg;
  const auto& e = j.at("encoder");
  cfg.encoder.obs_dim = e.at("obs_dim").get<std::size_t>();
  cfg.encoder.tokens = e.at("tokens").get<std::size_t>();
  cfg.encoder.inner = e.at("inner").get<std::size_t>();
  cfg.encoder.dim = e.at("dim").get<std::size_t>();
  const auto& q = j.at("qformer");
  cfg.qformer.dim = q.at("dim").get<std::size_t>();
  cfg.qformer.n_local = q.at("n_local").get<std::size_t>();
  cfg.qformer.n_memory = q.at("n_memory").get<std::size_t>();
  cfg.qformer.heads = q.at("heads").get<std::size_t>();
  cfg.qformer.ffn_mult = q.at("ffn_mult").get<std::size_t>();
  const auto& s = j.at("slow");
  cfg.slow.dim = s.at("dim").get<std::size_t>();
  cfg.slow.layers = s.at("layers").get<std::size_t>();
  cfg.slow.heads = s.at("heads").get<std::size_t>();
  cfg.slow.ffn_mult = s.at("ffn_mult").get<std::size_t>();
  cfg.slow.slot_tokens = s.at("slot_tokens").get<std::size_t>();
  cfg.slow.n_out = s.at("n_out").get<std::size_t>();
  cfg.slow.max_slots = s.at("max_slots").get<std::size_t>();
  const auto& p = j.at("planner");
  cfg.planner.in_dim = p.at("in_dim").get<std::size_t>();
  cfg.planner.width = p.at("width").get<std::size_t>();
  cfg.planner.layers = p.at("layers").get<std::size_t>();
  cfg.planner.heads = p.at("heads").get<std::size_t>();
  cfg.planner.ffn_mult = p.at("ffn_mult").get<std::size_t>();
  cfg.planner.n_tokens = p.at("n_tokens").get<std::size_t>();
  cfg.planner.waypoints = p.at("waypoints").get<std::size_t>();
  cfg.planner.clamp = p.at("clamp").get<double>();
  const auto& g = j.at("gate");
  cfg.gate.dim = g.at("dim").get<std::size_t>();
  cfg.gate.hidden = g.at("hidden").get<std::size_t>();
  cfg.gate.temperature = g.at("temperature").get<double>();
  cfg.n_instructions = j.at("n_instructions").get<std::size_t>();
  cfg.instr_tokens = j.at("instr_tokens").get<std::size_t>();
  cfg.buffer_capacity = j.at("buffer_capacity").get<std::size_t>();
  cfg.buffer_policy =
      buf::policy_from_name(j.at("buffer_policy").get<std::string>());
  cfg.bptt_window = j.at("bptt_window").get<std::size_t>();
  cfg.margin = j.at("margin").get<double>();
  cfg.with_slow_path = j.at("with_slow_path").get<bool>();
  cfg.use_gate = j.at("use_gate").get<bool>();
  cfg.use_theta_fusion = j.at("use_theta_fusion").get<bool>();
  return cfg;
}

void FlopLedger::reset() {
  encoder = qformer = gate = fast = slow = 0;
  steps = fast_calls = gate_calls = slow_calls = 0;
  std::fill(slow_calls_by_len.begin(), slow_calls_by_len.end(), 0);
}

// ---- pipeline --------------------------------------------------------------------------

DrivePipeline::DrivePipeline(PipelineConfig cfg, Rng& rng) : cfg_(cfg) {
  SFD_CHECK(cfg_.encoder.dim == cfg_.qformer.dim &&
                cfg_.qformer.dim == cfg_.planner.in_dim,
            "channel width mismatch across pipeline stages");
  SFD_CHECK(cfg_.qformer.n_local + cfg_.qformer.n_memory ==
                cfg_.planner.n_tokens,
            "planner expects " << cfg_.planner.n_tokens
                               << " tokens but the aggregator produces "
                               << cfg_.qformer.n_local + cfg_.qformer.n_memory);
  SFD_CHECK(cfg_.n_instructions > 0 && cfg_.instr_tokens > 0,
            "instruction vocabulary must be non-empty");
  SFD_CHECK(cfg_.bptt_window >= 1, "bptt_window must be >= 1");
  SFD_CHECK(cfg_.buffer_capacity >= 1, "buffer capacity must be >= 1");

  enc_ = ObservationEncoder(ps_, "enc", cfg_.encoder, rng);
  instr_ = qf::InstructionEmbedder(ps_, "instr", cfg_.n_instructions,
                                   cfg_.instr_tokens, cfg_.qformer.dim, rng);
  qf_ = qf::QFormer(ps_, "qf", cfg_.qformer, rng);
  if (cfg_.with_slow_path) {
    SFD_CHECK(cfg_.slow.dim == cfg_.qformer.dim &&
                  cfg_.slow.n_out == cfg_.planner.n_tokens &&
                  cfg_.slow.max_slots == cfg_.buffer_capacity,
              "slow-path config out of step with the rest of the pipeline");
    slow_ = std::make_unique<slow::SlowModel>(ps_, "slow", cfg_.slow, rng);
  }
  planner_ = fast::Planner(ps_, "planner", cfg_.planner, rng);
  if (cfg_.with_slow_path) {
    SFD_CHECK(cfg_.gate.dim == cfg_.qformer.dim,
              "gate width must match token channel width");
    gate_ = std::make_unique<conn::GateHead>(ps_, "gate", cfg_.gate, rng);

    // The architectural premise, enforced at construction: the planner must
    // be much cheaper per call and much smaller than the slow model.
    slow_->assert_cost_dominates(planner_.flops(), 10.0);
    const std::size_t fast_params = ps_.scalar_count_prefix("planner.");
    const std::size_t slow_params = ps_.scalar_count_prefix("slow.");
    SFD_CHECK(fast_params * 5 <= slow_params,
              "planner parameter budget violated: " << fast_params << " * 5 > "
                                                    << slow_params);
  }
  ledger_.slow_calls_by_len.assign(cfg_.buffer_capacity + 1, 0);
}

void DrivePipeline::reset_episode(EpisodeState& st) const {
  st.bank = qf::QueryBank{};
  if (cfg_.qformer.n_memory > 0) qf_.reset(st.bank);
  st.buffer = buf::StreamBuffer(cfg_.buffer_capacity, cfg_.buffer_policy);
  st.frame = 0;
  st.slow_calls = 0;
}

void DrivePipeline::truncate_bptt(EpisodeState& st) const {
  if (cfg_.qformer.n_memory > 0) qf_.truncate(st.bank);
  st.buffer.detach_all();
}

qf::FeatureTokens DrivePipeline::perceive(EpisodeState& st, const Tensor& obs,
                                          std::size_t instruction_id) {
  qf::FeatureTokens f = enc_.encode(obs, st.frame);
  Tensor it = instr_.tokens(instruction_id);
  ledger_.encoder += encoder_flops();
  ledger_.qformer += qformer_flops();
  if (cfg_.qformer.n_memory > 0) return qf_.step(f, it, st.bank);
  return qf_.forward_stateless(f, it);
}

TrainStep DrivePipeline::train_step(EpisodeState& st, const Tensor& obs,
                                    std::size_t instruction_id,
                                    const fast::Waypoints& expert, Rng& rng,
                                    bool force_activate) {
  SFD_CHECK(ad::Tape::current() != nullptr,
            "train_step requires a live autodiff tape");
  TrainStep out;
  qf::FeatureTokens fp = perceive(st, obs, instruction_id);
  st.buffer.push(fp);
  out.snapshot_len = st.buffer.size();

  out.wp_fast = planner_.plan(fp);
  ledger_.fast += planner_flops();
  ledger_.fast_calls += 1;
  Tensor loss_fast = fast::trajectory_loss(out.wp_fast, expert);

  if (!cfg_.with_slow_path) {
    // Fast-only variant: a single branch, no gate, no slow call.
    out.gate.theta = Tensor::scalar(0.0);
    out.gate.pi = Tensor::scalar(0.0);
    out.losses.loss_fast = loss_fast;
    out.losses.margin = cfg_.margin;
    st.frame += 1;
    ledger_.steps += 1;
    return out;
  }

  // Gate decision. During warmup (and in the gate-less always-on variant)
  // pi is pinned to 1; theta stays detached so the gate head only starts
  // learning once the adaptive objective is live.
  if (!cfg_.use_gate) {
    out.gate.theta = Tensor::scalar(1.0);
    out.gate.pi = Tensor::scalar(1.0);
    out.gate.soft_pi = 1.0;
  } else if (force_activate) {
    ledger_.gate += gate_flops();
    ledger_.gate_calls += 1;
    out.gate.theta = gate_->confidence(fp).detached();
    out.gate.pi = Tensor::scalar(1.0);
    out.gate.soft_pi = 1.0;
  } else {
    ledger_.gate += gate_flops();
    ledger_.gate_calls += 1;
    out.gate = gate_->decide_train(fp, rng);
  }

  // Exactly one slow-path call per training step, shared by both fused
  // branches.
  Tensor it = instr_.tokens(instruction_id);
  const std::vector<qf::FeatureTokens> snapshot = st.buffer.snapshot();
  qf::FeatureTokens fpp = slow_->reason(it, snapshot);
  ledger_.slow += slow_flops(snapshot.size());
  ledger_.slow_calls += 1;
  ledger_.slow_calls_by_len[snapshot.size()] += 1;
  st.slow_calls += 1;

  out.wp_llm = planner_.plan(conn::fuse(fp, fpp, Tensor::scalar(1.0)));
  ledger_.fast += planner_flops();
  ledger_.fast_calls += 1;
  Tensor loss_llm = fast::trajectory_loss(out.wp_llm, expert);

  Tensor theta_fuse =
      cfg_.use_theta_fusion ? out.gate.theta : Tensor::scalar(1.0);
  out.wp_fuse = planner_.plan(conn::fuse(fp, fpp, theta_fuse));
  ledger_.fast += planner_flops();
  ledger_.fast_calls += 1;

  out.losses =
      conn::adaptive_activation_loss(out.gate.pi, loss_fast, loss_llm,
                                     cfg_.margin);
  out.losses.loss_fuse = fast::trajectory_loss(out.wp_fuse, expert);

  st.frame += 1;
  ledger_.steps += 1;
  return out;
}

InferStep DrivePipeline::infer_step(EpisodeState& st, const Tensor& obs,
                                    std::size_t instruction_id,
                                    Activation directive) {
  SFD_CHECK(ad::Tape::current() == nullptr,
            "inference must run without a live autodiff tape");
  InferStep out;
  qf::FeatureTokens fp = perceive(st, obs, instruction_id);
  st.buffer.push(fp);

  double fuse_weight = 1.0;
  switch (directive) {
    case Activation::Skip:
      out.activated = false;
      break;
    case Activation::Gate: {
      SFD_CHECK(cfg_.with_slow_path && gate_,
                "adaptive gating requires the slow path and gate head");
      conn::GateDecision d = gate_->decide_infer(fp);
      ledger_.gate += gate_flops();
      ledger_.gate_calls += 1;
      out.activated = d.pi.value() == 1.0;
      out.theta = d.theta.value();
      fuse_weight = cfg_.use_theta_fusion ? d.theta.value() : 1.0;
      break;
    }
    case Activation::Force: {
      SFD_CHECK(cfg_.with_slow_path,
                "cannot force the slow path in a slow-path-free build");
      out.activated = true;
      if (cfg_.use_theta_fusion) {
        SFD_CHECK(gate_, "theta fusion requires the gate head");
        Tensor th = gate_->confidence(fp);
        ledger_.gate += gate_flops();
        ledger_.gate_calls += 1;
        fuse_weight = th.value();
        out.theta = fuse_weight;
      } else {
        fuse_weight = 1.0;
        out.theta = 1.0;
      }
      break;
    }
  }

  if (out.activated) {
    Tensor it = instr_.tokens(instruction_id);
    const std::vector<qf::FeatureTokens> snapshot = st.buffer.snapshot();
    qf::FeatureTokens fpp = slow_->reason(it, snapshot);
    ledger_.slow += slow_flops(snapshot.size());
    ledger_.slow_calls += 1;
    ledger_.slow_calls_by_len[snapshot.size()] += 1;
    st.slow_calls += 1;
    qf::FeatureTokens fused = conn::fuse(fp, fpp, Tensor::scalar(fuse_weight));
    out.wp = planner_.plan(fused);
  } else {
    out.wp = planner_.plan(fp);
  }
  ledger_.fast += planner_flops();
  ledger_.fast_calls += 1;

  st.frame += 1;
  ledger_.steps += 1;
  return out;
}

std::uint64_t DrivePipeline::encoder_flops() const { return enc_.flops(); }

std::uint64_t DrivePipeline::qformer_flops() const {
  return qf_.flops(cfg_.encoder.tokens, cfg_.instr_tokens);
}

std::uint64_t DrivePipeline::gate_flops() const {
  return gate_ ? gate_->flops(cfg_.planner.n_tokens) : 0;
}

std::uint64_t DrivePipeline::planner_flops() const { return planner_.flops(); }

std::uint64_t DrivePipeline::slow_flops(std::size_t snapshot_len) const {
  SFD_CHECK(slow_, "no slow model in this build");
  return slow_->flops(snapshot_len);
}

}  // namespace sfd::pipe
