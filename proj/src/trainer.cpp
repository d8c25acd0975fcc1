#include "sfdrive/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "sfdrive/nn.hpp"

namespace sfd::train {

namespace fs = std::filesystem;

std::size_t Dataset::total_frames() const {
  std::size_t n = 0;
  for (const EpisodeData& e : episodes) n += e.length();
  return n;
}

Dataset build_dataset(std::uint64_t seed_base, std::size_t n_easy,
                      std::size_t n_hard, double min_expert_ds) {
  SFD_CHECK(n_easy + n_hard > 0, "dataset needs at least one route");
  Dataset out;
  std::string digest_src;

  auto collect = [&](sim::Difficulty d, std::size_t want) {
    std::uint64_t seed = seed_base;
    std::size_t got = 0, tried = 0;
    while (got < want) {
      SFD_CHECK(++tried <= want * 20 + 50,
                "route generation keeps failing the expert screen ("
                    << sim::difficulty_name(d) << ", seed base " << seed_base
                    << ")");
      const sim::Route route = sim::generate_route(seed, d);
      EpisodeData ep;
      ep.route_seed = seed;
      ep.difficulty = d;
      const sim::EpisodeResult res = sim::run_episode(
          route, [&](const sim::StepInputs& in) {
            sim::ControlOut ctl;
            ctl.wp = sim::expert_waypoints(route, in.ego, in.progress);
            ep.obs.push_back(in.obs);
            ep.instr.push_back(std::size_t(in.instr));
            ep.expert.push_back(ctl.wp);
            return ctl;
          });
      ++seed;
      if (res.metrics.ds < min_expert_ds) continue;  // screen out bad draws
      digest_src += sim::route_to_json(route).dump();
      digest_src += ":" + std::to_string(ep.length()) + ";";
      out.episodes.push_back(std::move(ep));
      ++got;
    }
  };
  collect(sim::Difficulty::Easy, n_easy);
  collect(sim::Difficulty::Hard, n_hard);
  out.digest = fnv1a(digest_src);
  return out;
}

namespace {

// Deterministic per-epoch episode order, independent of the training RNG so
// a resumed run replays the identical schedule.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch,
                                     std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
  for (std::size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[rng.randint(i)]);
  return idx;
}

std::size_t group_windows(const Dataset& data,
                          const std::vector<std::size_t>& group,
                          std::size_t bptt) {
  std::size_t max_len = 0;
  for (std::size_t e : group)
    max_len = std::max(max_len, data.episodes[e].length());
  return (max_len + bptt - 1) / bptt;
}

// Total optimizer steps over the full run: the warmup boundary and the LR
// horizon both hang off this, so it is computed once, up front, from the
// schedule alone.
std::size_t total_optimizer_steps(const TrainConfig& cfg,
                                  const Dataset& data) {
  std::size_t steps = 0;
  const std::size_t n = data.episodes.size();
  for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
    const std::vector<std::size_t> order = epoch_order(cfg.seed, ep, n);
    for (std::size_t g0 = 0; g0 < n; g0 += cfg.batch) {
      const std::vector<std::size_t> group(
          order.begin() + std::ptrdiff_t(g0),
          order.begin() + std::ptrdiff_t(std::min(g0 + cfg.batch, n)));
      steps += group_windows(data, group, cfg.pipe.bptt_window);
    }
  }
  return steps;
}

std::string checkpoint_path(const std::string& run_dir, std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03zu.ckpt", epoch);
  return (fs::path(run_dir) / buf).string();
}

// Newest "epoch_NNN.ckpt" in run_dir, or 0 when there is none.
std::size_t newest_epoch(const std::string& run_dir) {
  std::size_t best = 0;
  if (!fs::exists(run_dir)) return 0;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const std::string name = entry.path().filename().string();
    unsigned n = 0;
    if (std::sscanf(name.c_str(), "epoch_%u.ckpt", &n) == 1)
      best = std::max(best, std::size_t(n));
  }
  return best;
}

void require_finite(double v, const char* what, std::size_t step,
                    std::size_t epoch, std::size_t frame,
                    std::uint64_t route_seed) {
  if (std::isfinite(v)) return;
  SFD_FAIL("training diverged: " << what << " is not finite at optimizer step "
                                 << step << " (epoch " << epoch + 1
                                 << ", frame " << frame << ", route seed "
                                 << route_seed << ")");
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& data,
                  pipe::DrivePipeline& pipeline) {
  SFD_CHECK(!data.episodes.empty(), "cannot train on an empty dataset");
  SFD_CHECK(cfg.epochs >= 1 && cfg.batch >= 1, "epochs and batch must be >= 1");
  SFD_CHECK(cfg.warmup_frac >= 0.0 && cfg.warmup_frac < 1.0,
            "warmup fraction must be in [0, 1)");
  SFD_CHECK(cfg.lambda >= 0.0, "lambda must be non-negative");
  SFD_CHECK(pipeline.config().hash() == cfg.pipe.hash(),
            "pipeline was built with a different config than cfg.pipe");
  SFD_CHECK(ad::Tape::current() == nullptr,
            "train() manages its own tapes; call it without a live tape");

  const bool with_slow = cfg.pipe.with_slow_path;
  const std::size_t bptt = cfg.pipe.bptt_window;
  const std::size_t n_eps = data.episodes.size();

  TrainResult out;
  const std::size_t total_steps = total_optimizer_steps(cfg, data);
  out.warmup_steps = std::size_t(cfg.warmup_frac * double(total_steps));

  nn::AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.horizon = total_steps;
  nn::AdamW opt(ocfg);
  Rng rng(cfg.seed);

  std::size_t step = 0, frames = 0, start_epoch = 0;
  const bool persist = !cfg.run_dir.empty();
  std::ofstream metrics;

  if (persist) {
    fs::create_directories(cfg.run_dir);
    if (cfg.resume) {
      const std::size_t done = newest_epoch(cfg.run_dir);
      if (done > 0) {
        const auto meta = nn::load_checkpoint(
            checkpoint_path(cfg.run_dir, done), pipeline.params(), &opt, &rng);
        SFD_CHECK(meta.at("config_hash") == hex_u64(cfg.pipe.hash()),
                  "resume checkpoint was trained under a different config");
        SFD_CHECK(meta.at("dataset_digest") == hex_u64(data.digest),
                  "resume checkpoint was trained on a different dataset");
        start_epoch = done;
        step = std::stoull(meta.at("optimizer_steps"));
        frames = std::stoull(meta.at("frames"));
      }
    }
    metrics.open((fs::path(cfg.run_dir) / "metrics.csv").string(),
                 start_epoch > 0 ? std::ios::app : std::ios::trunc);
    SFD_CHECK(metrics.good(), "cannot open metrics.csv under " << cfg.run_dir);
    if (start_epoch == 0) {
      metrics << "step,epoch,warmup,window_frames,loss_fast,loss_llm,"
                 "loss_fuse,loss_ada,gamma,act_rate,lr_mult\n";
      nlohmann::json manifest;
      manifest["version"] = kVersion;
      manifest["config"] = cfg.pipe.describe();
      manifest["config_hash"] = hex_u64(cfg.pipe.hash());
      manifest["dataset_digest"] = hex_u64(data.digest);
      manifest["dataset_episodes"] = n_eps;
      manifest["dataset_frames"] = data.total_frames();
      manifest["seed"] = cfg.seed;
      manifest["epochs"] = cfg.epochs;
      manifest["batch"] = cfg.batch;
      manifest["lr"] = cfg.lr;
      manifest["warmup_frac"] = cfg.warmup_frac;
      manifest["lambda"] = cfg.lambda;
      manifest["total_steps"] = total_steps;
      manifest["warmup_steps"] = out.warmup_steps;
      std::ofstream mf((fs::path(cfg.run_dir) / "manifest.json").string(),
                       std::ios::trunc);
      mf << manifest.dump(1) << "\n";
      SFD_CHECK(mf.good(), "cannot write manifest under " << cfg.run_dir);
    }
    if (start_epoch > 0)
      out.final_checkpoint = checkpoint_path(cfg.run_dir, start_epoch);
  }

  std::size_t completed_this_call = 0;
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    EpochStats es;
    es.epoch = epoch + 1;
    std::size_t epoch_frames = 0;

    const std::vector<std::size_t> order = epoch_order(cfg.seed, epoch, n_eps);
    for (std::size_t g0 = 0; g0 < n_eps; g0 += cfg.batch) {
      const std::vector<std::size_t> group(
          order.begin() + std::ptrdiff_t(g0),
          order.begin() + std::ptrdiff_t(std::min(g0 + cfg.batch, n_eps)));
      std::vector<pipe::EpisodeState> st(group.size());
      for (auto& s : st) pipeline.reset_episode(s);
      std::size_t max_len = 0;
      for (std::size_t e : group)
        max_len = std::max(max_len, data.episodes[e].length());

      for (std::size_t w0 = 0; w0 < max_len; w0 += bptt) {
        const bool warmup = step < out.warmup_steps;
        const std::uint64_t slow_before = pipeline.ledger().slow_calls;

        ad::Tape tape;
        Tensor objective;
        double check_sum = 0.0;
        std::size_t terms = 0;
        double w_fast = 0, w_llm = 0, w_fuse = 0, w_ada = 0, w_gamma = 0,
               w_pi = 0;

        const std::size_t w_end = std::min(w0 + bptt, max_len);
        for (std::size_t f = w0; f < w_end; ++f) {
          for (std::size_t gi = 0; gi < group.size(); ++gi) {
            const EpisodeData& ep = data.episodes[group[gi]];
            if (f >= ep.length()) continue;
            const pipe::TrainStep ts = pipeline.train_step(
                st[gi], ep.obs[f], ep.instr[f], ep.expert[f], rng, warmup);

            const double lf = ts.losses.loss_fast.value();
            require_finite(lf, "the fast-branch loss", step, epoch, f,
                           ep.route_seed);
            Tensor contrib;
            double dcontrib = 0.0;
            if (!with_slow) {
              contrib = ts.losses.loss_fast;
              dcontrib = lf;
            } else {
              const double ll = ts.losses.loss_llm.value();
              const double lz = ts.losses.loss_fuse.value();
              const double la = ts.losses.loss_ada.value();
              require_finite(ll, "the slow-branch loss", step, epoch, f,
                             ep.route_seed);
              require_finite(lz, "the fusion loss", step, epoch, f,
                             ep.route_seed);
              require_finite(la, "the adaptive activation loss", step, epoch,
                             f, ep.route_seed);
              if (warmup) {
                contrib = ad::add(
                    ad::add(ts.losses.loss_fast, ts.losses.loss_llm),
                    ts.losses.loss_fuse);
                dcontrib = lf + ll + lz;
              } else {
                contrib = ad::add(
                    ad::add(ts.losses.loss_ada, ts.losses.loss_fuse),
                    ad::mul_scalar(
                        ad::add(ts.losses.loss_fast, ts.losses.loss_llm),
                        cfg.lambda));
                dcontrib = la + lz + cfg.lambda * (lf + ll);
              }
              w_llm += ll;
              w_fuse += lz;
              w_ada += la;
              w_gamma += ts.losses.gamma;
              w_pi += ts.gate.pi.value();
            }
            w_fast += lf;
            objective = objective.defined() ? ad::add(objective, contrib)
                                            : contrib;
            check_sum += dcontrib;
            ++terms;
          }
        }
        SFD_CHECK(terms > 0, "empty training window");
        objective = ad::mul_scalar(objective, 1.0 / double(terms));

        // The graph must total exactly what the running tally says it does;
        // anything else means a loss term was dropped or double-counted.
        const double want = check_sum / double(terms);
        SFD_CHECK(std::abs(objective.value() - want) <=
                      1e-12 * (1.0 + std::abs(want)),
                  "objective/ledger mismatch at step "
                      << step << ": graph " << objective.value() << " vs tally "
                      << want);
        if (with_slow)
          SFD_CHECK(pipeline.ledger().slow_calls - slow_before == terms,
                    "expected exactly one slow-path call per frame, got "
                        << (pipeline.ledger().slow_calls - slow_before)
                        << " over " << terms << " frames");

        const double lr_mult = opt.lr_multiplier();
        ad::backward(objective);
        // Parameters outside this window's graph (e.g. the gate during
        // warmup) still need zeroed grad buffers for the optimizer pass.
        pipeline.params().ensure_grads();
        opt.step(pipeline.params());
        ++step;
        frames += terms;
        epoch_frames += terms;
        for (auto& s : st) pipeline.truncate_bptt(s);

        const double inv = 1.0 / double(terms);
        es.loss_fast += w_fast;
        es.loss_llm += w_llm;
        es.loss_fuse += w_fuse;
        es.loss_ada += w_ada;
        es.gamma_mean += w_gamma;
        es.activation_rate += w_pi;
        es.any_warmup = es.any_warmup || warmup;
        if (persist) {
          metrics << step << ',' << epoch + 1 << ',' << (warmup ? 1 : 0) << ','
                  << terms << ',' << w_fast * inv << ',' << w_llm * inv << ','
                  << w_fuse * inv << ',' << w_ada * inv << ',' << w_gamma * inv
                  << ',' << w_pi * inv << ',' << lr_mult << '\n';
        }
      }
    }

    const double inv_frames = epoch_frames ? 1.0 / double(epoch_frames) : 0.0;
    es.loss_fast *= inv_frames;
    es.loss_llm *= inv_frames;
    es.loss_fuse *= inv_frames;
    es.loss_ada *= inv_frames;
    es.gamma_mean *= inv_frames;
    es.activation_rate *= inv_frames;
    out.epochs.push_back(es);

    if (persist) {
      metrics.flush();
      std::map<std::string, std::string> meta;
      meta["config_hash"] = hex_u64(cfg.pipe.hash());
      meta["pipeline_config"] = pipe::config_to_json(cfg.pipe).dump();
      meta["dataset_digest"] = hex_u64(data.digest);
      meta["epoch"] = std::to_string(epoch + 1);
      meta["optimizer_steps"] = std::to_string(step);
      meta["frames"] = std::to_string(frames);
      const std::string path = checkpoint_path(cfg.run_dir, epoch + 1);
      nn::save_checkpoint(path, pipeline.params(), &opt, &rng, meta);
      out.final_checkpoint = path;
    }

    ++completed_this_call;
    if (cfg.stop_after_epochs && completed_this_call >= cfg.stop_after_epochs)
      break;
  }

  out.optimizer_steps = step;
  out.frames = frames;
  return out;
}

}  // namespace sfd::train
