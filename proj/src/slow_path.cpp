#include "sfdrive/slow_path.hpp"

#include <cmath>

namespace sfd::slow {

SlowModel::SlowModel(nn::ParamStore& ps, const std::string& name,
                     SlowConfig cfg, Rng& rng)
    : cfg_(cfg) {
  SFD_CHECK(cfg.layers > 0 && cfg.slot_tokens > 0 && cfg.max_slots > 0,
            "slow model: degenerate config");
  auto init = [&](std::size_t r, std::size_t c, double bound) {
    Tensor t = Tensor::zeros({r, c}, true);
    for (std::size_t i = 0; i < t.size(); ++i)
      t.data()[i] = rng.uniform(-bound, bound);
    return t;
  };
  pool_ = ps.add(name + ".pool",
                 init(cfg.slot_tokens, cfg.n_out,
                      1.0 / std::sqrt(double(cfg.n_out))));
  slot_pos_ = ps.add(name + ".slot_pos",
                     init(cfg.max_slots, cfg.dim,
                          1.0 / std::sqrt(double(cfg.dim))));
  out_queries_ = ps.add(name + ".out_queries",
                        init(cfg.n_out, cfg.dim,
                             1.0 / std::sqrt(double(cfg.dim))));
  instr_proj_ = nn::Linear(ps, name + ".instr_proj", cfg.dim, cfg.dim, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l)
    trunk_.emplace_back(ps, name + ".trunk" + std::to_string(l), cfg.dim,
                        cfg.heads, cfg.ffn_mult, /*cross=*/false, rng);
  readout_ = nn::AttentionBlock(ps, name + ".readout", cfg.dim, cfg.heads,
                                cfg.ffn_mult, /*cross=*/true, rng);
}

qf::FeatureTokens SlowModel::reason(
    const Tensor& instr_tokens,
    const std::vector<qf::FeatureTokens>& snapshot) const {
  SFD_CHECK(!snapshot.empty(), "slow path: empty buffer snapshot");
  SFD_CHECK(snapshot.size() <= cfg_.max_slots,
            "slow path: snapshot of " << snapshot.size()
                                      << " slots exceeds max " << cfg_.max_slots);
  SFD_CHECK(instr_tokens.ndim() == 2 && instr_tokens.cols() == cfg_.dim,
            "slow path: instruction tokens " << instr_tokens.shape_str());
  const std::size_t len = snapshot.size();

  // broadcast conditioning shared by every slot token
  Tensor cond = instr_proj_(ad::mean_rows(instr_tokens));  // (1 x dim)

  std::vector<Tensor> groups;
  groups.reserve(len);
  for (std::size_t i = 0; i < len; ++i) {
    const Tensor& slot = snapshot[i].tokens;
    SFD_CHECK(slot.ndim() == 2 && slot.rows() == cfg_.n_out &&
                  slot.cols() == cfg_.dim,
              "slow path: slot " << i << " shape " << slot.shape_str()
                                 << " vs expected (" << cfg_.n_out << ", "
                                 << cfg_.dim << ")");
    Tensor pooled = ad::matmul(pool_, slot);  // (slot_tokens x dim)
    const std::size_t recency = len - 1 - i;  // newest slot -> embedding 0
    Tensor pos = ad::slice_rows(slot_pos_, recency, recency + 1);
    groups.push_back(ad::add_rowvec(ad::add_rowvec(pooled, pos), cond));
  }
  Tensor x = ad::concat_rows(groups);  // (slot_tokens*len x dim)
  for (const auto& blk : trunk_) x = blk.forward(x);
  Tensor out = readout_.forward_cross(out_queries_, x);
  SFD_CHECK(out.rows() == cfg_.n_out && out.cols() == cfg_.dim,
            "slow path: output shape drifted to " << out.shape_str());
  return {out, snapshot.back().frame_index};
}

std::uint64_t SlowModel::flops(std::size_t n_slots) const {
  SFD_CHECK(n_slots > 0 && n_slots <= cfg_.max_slots,
            "slow path: flops for illegal slot count " << n_slots);
  const std::size_t st = cfg_.slot_tokens * n_slots;
  std::uint64_t total = 0;
  total += std::uint64_t(n_slots) * 2 * cfg_.slot_tokens * cfg_.n_out * cfg_.dim;
  total += instr_proj_.flops(1);
  for (const auto& blk : trunk_) total += blk.flops(st, st);
  total += readout_.flops(cfg_.n_out, st);
  return total;
}

void SlowModel::assert_cost_dominates(std::uint64_t fast_flops,
                                      double min_ratio) const {
  const std::uint64_t own = flops(cfg_.max_slots);
  SFD_CHECK(double(own) >= min_ratio * double(fast_flops),
            "slow/fast cost asymmetry violated: slow " << own << " < "
                                                       << min_ratio << " x fast "
                                                       << fast_flops);
}

}  // namespace sfd::slow
