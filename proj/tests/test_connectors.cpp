#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include <json.hpp>

#include "sfdrive/pipeline.hpp"

using namespace sfd;
using ad::Tensor;

namespace {

qf::FeatureTokens random_tokens(Rng& rng, std::size_t n, std::size_t dim,
                                std::size_t frame = 0) {
  std::vector<double> v(n * dim);
  for (auto& x : v) x = rng.normal();
  qf::FeatureTokens f;
  f.tokens = Tensor::from({n, dim}, v);
  f.frame_index = frame;
  return f;
}

void fill_param(nn::ParamStore& ps, const std::string& name, double v) {
  Tensor t = ps.get(name);
  std::fill(t.data(), t.data() + t.size(), v);
}

// Rig the gate MLP so confidence() returns sigmoid(bias) regardless of input.
void rig_gate(nn::ParamStore& ps, const std::string& prefix, double logit) {
  fill_param(ps, prefix + ".l1.w", 0.0);
  fill_param(ps, prefix + ".l1.b", 0.0);
  fill_param(ps, prefix + ".l2.w", 0.0);
  fill_param(ps, prefix + ".l2.b", logit);
}

double brute_force_best_pi(double lf, double ll, double d) {
  const double gamma = std::max(d - (lf - ll), 0.0);
  const double on = ll + gamma;
  const double off = lf;
  return on < off ? 1.0 : 0.0;  // ties resolve to the cheap branch
}

pipe::PipelineConfig small_cfg() {
  pipe::PipelineConfig c;
  c.encoder.obs_dim = 40;
  c.encoder.tokens = 8;
  c.encoder.inner = 8;
  c.encoder.dim = 32;
  c.qformer.dim = 32;
  c.qformer.n_local = 6;
  c.qformer.n_memory = 6;
  c.qformer.heads = 2;
  c.qformer.ffn_mult = 2;
  c.slow.dim = 32;
  c.slow.layers = 3;
  c.slow.heads = 2;
  c.slow.ffn_mult = 2;
  c.slow.slot_tokens = 2;
  c.slow.n_out = 12;
  c.slow.max_slots = 5;
  c.planner.in_dim = 32;
  c.planner.width = 8;
  c.planner.layers = 2;
  c.planner.heads = 2;
  c.planner.ffn_mult = 2;
  c.planner.n_tokens = 12;
  c.planner.waypoints = 5;
  c.gate.dim = 32;
  c.gate.hidden = 16;
  c.n_instructions = 4;
  c.instr_tokens = 2;
  c.buffer_capacity = 5;
  c.bptt_window = 4;
  c.margin = 0.3;
  return c;
}

Tensor random_obs(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return Tensor::from({n}, v);
}

fast::Waypoints straight_expert(std::size_t m) {
  std::vector<double> v;
  for (std::size_t i = 0; i < m; ++i) {
    v.push_back(0.5 * double(i + 1));
    v.push_back(0.0);
  }
  fast::Waypoints w;
  w.pts = Tensor::from({m, 2}, v);
  return w;
}

}  // namespace

// ---- adaptive activation loss --------------------------------------------------------

TEST_CASE("adaptive loss: frozen arithmetic examples") {
  // Improvement larger than the margin: no penalty, blended loss is the
  // slow-branch loss itself.
  auto a = conn::adaptive_activation_loss(Tensor::scalar(1.0),
                                          Tensor::scalar(1.0),
                                          Tensor::scalar(0.5), 0.3);
  CHECK(a.gamma == 0.0);
  CHECK(a.loss_ada.value() == 0.5);

  // Improvement 0.1 < margin 0.3: penalty 0.2 makes activation cost 1.1,
  // worse than the 1.0 fast branch.
  auto b = conn::adaptive_activation_loss(Tensor::scalar(1.0),
                                          Tensor::scalar(1.0),
                                          Tensor::scalar(0.9), 0.3);
  CHECK(b.gamma == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(b.loss_ada.value() == doctest::Approx(1.1).epsilon(1e-15));

  // Gate closed: the fast branch passes through untouched.
  auto c = conn::adaptive_activation_loss(Tensor::scalar(0.0),
                                          Tensor::scalar(1.0),
                                          Tensor::scalar(0.9), 0.3);
  CHECK(c.loss_ada.value() == 1.0);
  CHECK(c.gamma == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("adaptive loss: exact formula on random triples") {
  Rng rng(101);
  for (int i = 0; i < 20000; ++i) {
    const double lf = rng.uniform(0.0, 3.0);
    const double ll = rng.uniform(0.0, 3.0);
    const double d = rng.uniform(0.0, 1.0);
    const double p = rng.uniform() < 0.5 ? 0.0 : 1.0;
    auto s = conn::adaptive_activation_loss(
        Tensor::scalar(p), Tensor::scalar(lf), Tensor::scalar(ll), d);
    const double gamma = std::max(d - (lf - ll), 0.0);
    CHECK(s.gamma == gamma);
    const double want = p * (ll + gamma) + (1.0 - p) * lf;
    CHECK(s.loss_ada.value() == want);
    CHECK(s.gamma >= 0.0);
    // gamma vanishes exactly when the improvement clears the margin
    CHECK((s.gamma == 0.0) == (lf - ll >= d));
  }
}

TEST_CASE("adaptive loss: gate-open branch is cheaper exactly when the gain beats half the margin") {
  // With the penalty inside the activated branch, the two-case minimum sits
  // at gain d/2: for gain in (d/2, d) the penalty gamma = d - gain still
  // leaves ll + gamma = lf + d - 2*gain < lf.
  Rng rng(202);
  for (int i = 0; i < 20000; ++i) {
    const double lf = rng.uniform(0.0, 3.0);
    const double ll = rng.uniform(0.0, 3.0);
    const double d = rng.uniform(0.0, 1.0);
    const double best = brute_force_best_pi(lf, ll, d);
    const double rule = (lf - ll > d / 2.0) ? 1.0 : 0.0;
    CHECK(best == rule);
  }
  // Pinned interior case: gain 0.2 with margin 0.3 -> activation wins.
  CHECK(brute_force_best_pi(1.0, 0.8, 0.3) == 1.0);
  // At or below half the margin the fast branch wins.
  CHECK(brute_force_best_pi(1.0, 0.85, 0.3) == 0.0);
  CHECK(brute_force_best_pi(1.0, 0.9, 0.3) == 0.0);
}

TEST_CASE("adaptive loss: input validation") {
  CHECK_THROWS_AS(conn::adaptive_activation_loss(Tensor::scalar(0.5),
                                                 Tensor::scalar(1.0),
                                                 Tensor::scalar(1.0), 0.3),
                  sfd::Error);
  CHECK_THROWS_AS(conn::adaptive_activation_loss(Tensor::scalar(1.0),
                                                 Tensor::scalar(-0.1),
                                                 Tensor::scalar(1.0), 0.3),
                  sfd::Error);
  CHECK_THROWS_AS(conn::adaptive_activation_loss(Tensor::scalar(1.0),
                                                 Tensor::scalar(1.0),
                                                 Tensor::scalar(1.0), -0.5),
                  sfd::Error);
  const double bad = std::nan("");
  CHECK_THROWS_AS(conn::adaptive_activation_loss(Tensor::scalar(1.0),
                                                 Tensor::scalar(bad),
                                                 Tensor::scalar(1.0), 0.3),
                  sfd::Error);
}

TEST_CASE("adaptive loss: branch losses stay detached, theta learns via straight-through") {
  Rng rng(7);
  ad::Tape tape;
  // Graph-connected branch losses derived from a parameter.
  Tensor w = Tensor::from({2, 2}, {0.4, -0.6, 0.5, 0.7});
  w.set_requires_grad(true);
  Tensor lf = ad::mean_all(ad::abs(w));              // 0.55
  Tensor ll = ad::mul_scalar(lf, 0.5);               // 0.275
  Tensor theta = Tensor::scalar(0.6);
  theta.set_requires_grad(true);
  nn::GumbelSample s = nn::gumbel_binary(theta, 1.0, rng);
  auto losses = conn::adaptive_activation_loss(s.pi, lf, ll, 0.3);
  ad::backward(losses.loss_ada);

  // The comparison must not reshape the branches themselves.
  for (std::size_t i = 0; i < 4; ++i) CHECK(w.grad()[i] == 0.0);

  // theta receives exactly (on - off) * dsoft/dtheta.
  const double gain = lf.value() - ll.value();
  const double gamma = std::max(0.3 - gain, 0.0);
  const double on = ll.value() + gamma;
  const double off = lf.value();
  const double p = 0.6;
  const double dsoft = s.soft * (1.0 - s.soft) / (1.0 * p * (1.0 - p));
  CHECK(theta.grad()[0] == doctest::Approx((on - off) * dsoft).epsilon(1e-12));
  CHECK(theta.grad()[0] != 0.0);
}

// ---- fusion ---------------------------------------------------------------------------

TEST_CASE("fuse: weighted integration oracles") {
  qf::FeatureTokens a, b;
  a.tokens = Tensor::from({1, 2}, {2.0, 4.0});
  a.frame_index = 17;
  b.tokens = Tensor::from({1, 2}, {2.0, 0.0});
  b.frame_index = 3;

  auto half = conn::fuse(a, b, Tensor::scalar(0.5));
  CHECK(half.tokens.at(0, 0) == 3.0);
  CHECK(half.tokens.at(0, 1) == 4.0);
  CHECK(half.frame_index == 17);

  auto zero = conn::fuse(a, b, Tensor::scalar(0.0));
  CHECK(zero.tokens.at(0, 0) == 2.0);
  CHECK(zero.tokens.at(0, 1) == 4.0);

  auto one = conn::fuse(a, b, Tensor::scalar(1.0));
  CHECK(one.tokens.at(0, 0) == 4.0);
  CHECK(one.tokens.at(0, 1) == 4.0);
}

TEST_CASE("fuse: validation") {
  qf::FeatureTokens a, b;
  a.tokens = Tensor::from({1, 2}, {1.0, 2.0});
  b.tokens = Tensor::from({2, 1}, {1.0, 2.0});
  CHECK_THROWS_AS(conn::fuse(a, b, Tensor::scalar(0.5)), sfd::Error);
  b.tokens = Tensor::from({1, 2}, {1.0, 2.0});
  CHECK_THROWS_AS(conn::fuse(a, b, Tensor::scalar(1.5)), sfd::Error);
  CHECK_THROWS_AS(conn::fuse(a, b, Tensor::scalar(-0.1)), sfd::Error);
}

TEST_CASE("fuse: gradients reach both token sets and the weight") {
  ad::Tape tape;
  qf::FeatureTokens a, b;
  a.tokens = Tensor::from({1, 2}, {2.0, 4.0});
  a.tokens.set_requires_grad(true);
  b.tokens = Tensor::from({1, 2}, {3.0, -1.0});
  b.tokens.set_requires_grad(true);
  Tensor theta = Tensor::scalar(0.25);
  theta.set_requires_grad(true);

  auto fused = conn::fuse(a, b, theta);
  ad::backward(ad::sum_all(fused.tokens));
  CHECK(a.tokens.grad()[0] == 1.0);
  CHECK(a.tokens.grad()[1] == 1.0);
  CHECK(b.tokens.grad()[0] == 0.25);
  CHECK(b.tokens.grad()[1] == 0.25);
  // d(sum)/dtheta = sum of f'' entries = 3 + (-1) = 2
  CHECK(theta.grad()[0] == 2.0);
}

// ---- gate head ------------------------------------------------------------------------

TEST_CASE("gate: confidence lies in (0,1) and thresholds at 0.5") {
  Rng rng(11);
  nn::ParamStore ps;
  conn::GateConfig gc;
  gc.dim = 32;
  gc.hidden = 16;
  conn::GateHead gate(ps, "gate", gc, rng);

  for (int i = 0; i < 50; ++i) {
    auto f = random_tokens(rng, 10, 32);
    Tensor th = gate.confidence(f);
    CHECK(th.value() > 0.0);
    CHECK(th.value() < 1.0);
  }

  rig_gate(ps, "gate", std::log(0.7 / 0.3));
  auto f = random_tokens(rng, 10, 32);
  auto hi = gate.decide_infer(f);
  CHECK(hi.theta.value() == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(hi.pi.value() == 1.0);
  CHECK(hi.sampled == false);

  rig_gate(ps, "gate", std::log(0.3 / 0.7));
  auto lo = gate.decide_infer(f);
  CHECK(lo.theta.value() == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(lo.pi.value() == 0.0);
}

TEST_CASE("gate: training-time sampling matches the confidence") {
  Rng rng(13);
  nn::ParamStore ps;
  conn::GateConfig gc;
  gc.dim = 32;
  gc.hidden = 16;
  conn::GateHead gate(ps, "gate", gc, rng);
  rig_gate(ps, "gate", 0.0);  // theta = 0.5 exactly

  auto f = random_tokens(rng, 10, 32);
  int ones = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto d = gate.decide_train(f, rng);
    CHECK((d.pi.value() == 0.0 || d.pi.value() == 1.0));
    ones += d.pi.value() == 1.0 ? 1 : 0;
  }
  const double rate = double(ones) / n;
  CHECK(rate > 0.47);
  CHECK(rate < 0.53);
}

TEST_CASE("gate: flops formula") {
  Rng rng(17);
  nn::ParamStore ps;
  conn::GateConfig gc;
  gc.dim = 64;
  gc.hidden = 64;
  conn::GateHead gate(ps, "gate", gc, rng);
  // one-row MLP: 2*(64*64) + 2*(64*1)
  CHECK(gate.flops(40) == 2 * 64 * 64 + 2 * 64);
}

TEST_CASE("gate: learns a separable hard/easy split") {
  // Synthetic gate task: "hard" inputs shift the first channels, and only
  // hard inputs gain from activating (improvement 2d > d). The gate must
  // learn to open on hard and stay closed on easy inputs.
  Rng rng(23);
  nn::ParamStore ps;
  conn::GateConfig gc;
  gc.dim = 32;
  gc.hidden = 16;
  conn::GateHead gate(ps, "gate", gc, rng);
  const double d = 0.3;

  auto make_item = [&](bool hard) {
    auto f = random_tokens(rng, 10, 32);
    if (hard)
      for (std::size_t r = 0; r < 10; ++r)
        for (std::size_t c = 0; c < 8; ++c)
          f.tokens.data()[r * 32 + c] += 1.0;
    return f;
  };

  nn::AdamWConfig oc;
  oc.lr = 3e-3;
  nn::AdamW opt(oc);
  for (int step = 0; step < 500; ++step) {
    const bool hard = rng.uniform() < 0.5;
    auto f = make_item(hard);
    const double lf = 1.0 + 0.05 * rng.normal();
    const double ll = hard ? lf - 2.0 * d : lf;
    ad::Tape tape;
    auto dec = gate.decide_train(f, rng);
    auto losses = conn::adaptive_activation_loss(
        dec.pi, Tensor::scalar(std::max(lf, 0.0)),
        Tensor::scalar(std::max(ll, 0.0)), d);
    ad::backward(losses.loss_ada);
    ps.ensure_grads();
    opt.step(ps);
  }

  int hard_open = 0, easy_open = 0;
  const int n_eval = 300;
  for (int i = 0; i < n_eval; ++i) {
    if (gate.decide_infer(make_item(true)).pi.value() == 1.0) ++hard_open;
    if (gate.decide_infer(make_item(false)).pi.value() == 1.0) ++easy_open;
  }
  CHECK(double(hard_open) / n_eval >= 0.75);
  CHECK(double(easy_open) / n_eval <= 0.25);
}

TEST_CASE("trace json carries the step fields") {
  conn::GateDecision d;
  d.theta = Tensor::scalar(0.75);
  d.pi = Tensor::scalar(1.0);
  auto losses = conn::adaptive_activation_loss(
      d.pi, Tensor::scalar(1.0), Tensor::scalar(0.9), 0.3);
  auto j = nlohmann::json::parse(conn::trace_json(42, &d != nullptr ? d : d,
                                                  &losses));
  CHECK(j["t"] == 42);
  CHECK(j["theta"] == doctest::Approx(0.75));
  CHECK(j["pi"] == 1.0);
  CHECK(j["loss_fast"] == 1.0);
  CHECK(j["loss_llm"] == doctest::Approx(0.9));
  CHECK(j["gamma"] == doctest::Approx(0.2));
}

// ---- pipeline -------------------------------------------------------------------------

TEST_CASE("pipeline: train step runs all three branches with one slow call") {
  Rng rng(31);
  pipe::DrivePipeline pl(small_cfg(), rng);
  pipe::EpisodeState st;
  pl.reset_episode(st);
  auto expert = straight_expert(5);

  ad::Tape tape;
  for (int t = 0; t < 3; ++t) {
    auto obs = random_obs(rng, 40);
    auto r = pl.train_step(st, obs, 1, expert, rng, /*force_activate=*/false);
    CHECK(r.losses.loss_fast.defined());
    CHECK(r.losses.loss_llm.defined());
    CHECK(r.losses.loss_fuse.defined());
    CHECK(r.losses.loss_ada.defined());
    CHECK(r.snapshot_len == std::size_t(t + 1));
    CHECK(st.slow_calls == std::uint64_t(t + 1));
    CHECK(r.wp_fast.count() == 5);
    CHECK(r.wp_llm.count() == 5);
    CHECK(r.wp_fuse.count() == 5);
  }
  CHECK(st.frame == 3);
}

TEST_CASE("pipeline: warmup pins the gate open and leaves it untrained") {
  Rng rng(37);
  pipe::DrivePipeline pl(small_cfg(), rng);
  pipe::EpisodeState st;
  pl.reset_episode(st);
  auto expert = straight_expert(5);

  ad::Tape tape;
  auto obs = random_obs(rng, 40);
  auto r = pl.train_step(st, obs, 0, expert, rng, /*force_activate=*/true);
  CHECK(r.gate.pi.value() == 1.0);
  // warmup objective: all three branch losses
  Tensor total = ad::add(ad::add(r.losses.loss_fast, r.losses.loss_llm),
                         r.losses.loss_fuse);
  ad::backward(total);
  for (const auto& [name, t] : pl.params().items()) {
    if (name.rfind("gate.", 0) == 0 && t.has_grad()) {
      Tensor tt = t;
      for (std::size_t i = 0; i < tt.size(); ++i) CHECK(tt.grad()[i] == 0.0);
    }
  }
}

TEST_CASE("pipeline: after warmup the gate gets gradient signal") {
  Rng rng(41);
  pipe::DrivePipeline pl(small_cfg(), rng);
  pipe::EpisodeState st;
  pl.reset_episode(st);
  auto expert = straight_expert(5);

  ad::Tape tape;
  auto obs = random_obs(rng, 40);
  auto r = pl.train_step(st, obs, 0, expert, rng, /*force_activate=*/false);
  Tensor total = ad::add(r.losses.loss_ada, r.losses.loss_fuse);
  ad::backward(total);
  double gate_grad_norm = 0.0;
  for (const auto& [name, t] : pl.params().items()) {
    if (name.rfind("gate.", 0) == 0 && t.has_grad()) {
      Tensor tt = t;
      for (std::size_t i = 0; i < tt.size(); ++i)
        gate_grad_norm += std::abs(tt.grad()[i]);
    }
  }
  CHECK(gate_grad_norm > 0.0);
}

TEST_CASE("pipeline: flop ledger conserves exactly") {
  Rng rng(43);
  pipe::DrivePipeline pl(small_cfg(), rng);
  pipe::EpisodeState st;
  pl.reset_episode(st);

  // inference episode with a mix of directives
  for (int t = 0; t < 9; ++t) {
    auto obs = random_obs(rng, 40);
    pipe::Activation a = t % 3 == 0 ? pipe::Activation::Force
                        : t % 3 == 1 ? pipe::Activation::Gate
                                     : pipe::Activation::Skip;
    pl.infer_step(st, obs, 2, a);
  }

  const auto& led = pl.ledger();
  CHECK(led.steps == 9);
  CHECK(led.total() ==
        led.encoder + led.qformer + led.gate + led.fast + led.slow);
  CHECK(led.encoder == led.steps * pl.encoder_flops());
  CHECK(led.qformer == led.steps * pl.qformer_flops());
  CHECK(led.fast == led.fast_calls * pl.planner_flops());
  CHECK(led.gate == led.gate_calls * pl.gate_flops());
  std::uint64_t slow_expected = 0, slow_calls = 0;
  for (std::size_t len = 0; len < led.slow_calls_by_len.size(); ++len) {
    slow_calls += led.slow_calls_by_len[len];
    if (led.slow_calls_by_len[len] > 0)
      slow_expected += led.slow_calls_by_len[len] * pl.slow_flops(len);
  }
  CHECK(led.slow == slow_expected);
  CHECK(led.slow_calls == slow_calls);
  CHECK(led.slow_calls >= 3);  // the Force steps at least
}

TEST_CASE("pipeline: skip directive is bitwise identical to a slow-path-free build") {
  Rng rng_a(47);
  auto cfg = small_cfg();
  pipe::DrivePipeline full(cfg, rng_a);
  nn::save_checkpoint("/tmp/sfd_pipe_full.ckpt", full.params(), nullptr,
                      nullptr, {});

  auto cfg_b = cfg;
  cfg_b.with_slow_path = false;
  Rng rng_b(999);  // different init; weights come from the checkpoint
  pipe::DrivePipeline bare(cfg_b, rng_b);
  nn::load_checkpoint_subset("/tmp/sfd_pipe_full.ckpt", bare.params());

  pipe::EpisodeState sa, sb;
  full.reset_episode(sa);
  bare.reset_episode(sb);
  Rng obs_rng(53);
  for (int t = 0; t < 12; ++t) {
    auto obs = random_obs(obs_rng, 40);
    auto ra = full.infer_step(sa, obs, 3, pipe::Activation::Skip);
    auto rb = bare.infer_step(sb, obs, 3, pipe::Activation::Skip);
    CHECK(ra.activated == false);
    CHECK(rb.activated == false);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(std::memcmp(&ra.wp.pts.data()[2 * i], &rb.wp.pts.data()[2 * i],
                        2 * sizeof(double)) == 0);
    }
  }
  // the bare build has no slow path to force
  auto obs = random_obs(obs_rng, 40);
  CHECK_THROWS_AS(bare.infer_step(sb, obs, 3, pipe::Activation::Force),
                  sfd::Error);
  CHECK(bare.ledger().slow == 0);
  CHECK(bare.ledger().slow_calls == 0);
}

TEST_CASE("pipeline: adaptive inference activates iff theta >= 0.5") {
  Rng rng(59);
  pipe::DrivePipeline pl(small_cfg(), rng);
  pipe::EpisodeState st;
  pl.reset_episode(st);

  rig_gate(pl.params(), "gate", std::log(0.7 / 0.3));
  auto r1 = pl.infer_step(st, random_obs(rng, 40), 0, pipe::Activation::Gate);
  CHECK(r1.activated == true);
  CHECK(r1.theta == doctest::Approx(0.7).epsilon(1e-12));

  rig_gate(pl.params(), "gate", std::log(0.2 / 0.8));
  auto r2 = pl.infer_step(st, random_obs(rng, 40), 0, pipe::Activation::Gate);
  CHECK(r2.activated == false);
  CHECK(r2.theta == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("pipeline: inference refuses a live tape, training requires one") {
  Rng rng(61);
  pipe::DrivePipeline pl(small_cfg(), rng);
  pipe::EpisodeState st;
  pl.reset_episode(st);
  auto expert = straight_expert(5);

  {
    ad::Tape tape;
    CHECK_THROWS_AS(
        pl.infer_step(st, random_obs(rng, 40), 0, pipe::Activation::Skip),
        sfd::Error);
  }
  CHECK_THROWS_AS(pl.train_step(st, random_obs(rng, 40), 0, expert, rng, false),
                  sfd::Error);
}

TEST_CASE("pipeline: bptt truncation keeps values and cuts history") {
  Rng rng(67);
  pipe::DrivePipeline pl(small_cfg(), rng);
  pipe::EpisodeState st;
  pl.reset_episode(st);
  auto expert = straight_expert(5);

  ad::Tape tape;
  Rng obs_rng(71);
  for (int t = 0; t < 4; ++t)
    pl.train_step(st, random_obs(obs_rng, 40), 1, expert, rng, true);
  pl.truncate_bptt(st);
  auto r = pl.train_step(st, random_obs(obs_rng, 40), 1, expert, rng, true);
  ad::backward(r.losses.loss_fuse);  // must not touch pre-truncation graph
  CHECK(r.losses.loss_fuse.value() >= 0.0);
}

TEST_CASE("pipeline: config hash is stable and sensitive") {
  auto a = small_cfg();
  auto b = small_cfg();
  CHECK(a.hash() == b.hash());
  b.margin = 0.4;
  CHECK(a.hash() != b.hash());
  auto c = small_cfg();
  c.buffer_policy = buf::EvictionPolicy::FIFO;
  CHECK(a.hash() != c.hash());
}
