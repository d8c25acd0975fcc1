#include "sfdrive/fast_path.hpp"

#include <cmath>

namespace sfd::fast {

Planner::Planner(nn::ParamStore& ps, const std::string& name, PlannerConfig cfg,
                 Rng& rng)
    : cfg_(cfg) {
  SFD_CHECK(cfg.layers > 0 && cfg.waypoints > 0 && cfg.clamp > 0,
            "planner: degenerate config");
  auto init = [&](std::size_t r, std::size_t c) {
    Tensor t = Tensor::zeros({r, c}, true);
    const double bound = 1.0 / std::sqrt(double(c));
    for (std::size_t i = 0; i < t.size(); ++i)
      t.data()[i] = rng.uniform(-bound, bound);
    return t;
  };
  proj_ = nn::Linear(ps, name + ".proj", cfg.in_dim, cfg.width, rng);
  token_pos_ = ps.add(name + ".token_pos", init(cfg.n_tokens, cfg.width));
  wp_queries_ = ps.add(name + ".wp_queries", init(cfg.waypoints, cfg.width));
  for (std::size_t l = 0; l < cfg.layers; ++l)
    blocks_.emplace_back(ps, name + ".blk" + std::to_string(l), cfg.width,
                         cfg.heads, cfg.ffn_mult, /*cross=*/false, rng);
  head_ = nn::Linear(ps, name + ".head", cfg.width, 2, rng);
}

Waypoints Planner::plan(const qf::FeatureTokens& features) const {
  const Tensor& f = features.tokens;
  SFD_CHECK(f.ndim() == 2 && f.rows() == cfg_.n_tokens && f.cols() == cfg_.in_dim,
            "planner: features " << f.shape_str() << " vs expected ("
                                 << cfg_.n_tokens << ", " << cfg_.in_dim << ")");
  Tensor x = ad::add(proj_(f), token_pos_);
  Tensor seq = ad::concat_rows({x, wp_queries_});
  for (const auto& blk : blocks_) seq = blk.forward(seq);
  Tensor tail =
      ad::slice_rows(seq, cfg_.n_tokens, cfg_.n_tokens + cfg_.waypoints);
  Tensor offsets = head_(tail);  // (M x 2) per-step displacements

  // cumulative offsets anchor the trajectory at the ego origin and keep the
  // points ordered along the predicted path
  std::vector<Tensor> rows;
  rows.push_back(ad::slice_rows(offsets, 0, 1));
  for (std::size_t i = 1; i < cfg_.waypoints; ++i)
    rows.push_back(ad::add(rows.back(), ad::slice_rows(offsets, i, i + 1)));
  Tensor wp = ad::concat_rows(rows);
  wp = ad::min_scalar(ad::max_scalar(wp, -cfg_.clamp), cfg_.clamp);
  SFD_CHECK(wp.all_finite(), "planner: non-finite waypoints");
  return {wp};
}

std::uint64_t Planner::flops() const {
  const std::size_t n = cfg_.n_tokens + cfg_.waypoints;
  std::uint64_t total = proj_.flops(cfg_.n_tokens);
  for (const auto& blk : blocks_) total += blk.flops(n, n);
  total += head_.flops(cfg_.waypoints);
  return total;
}

Tensor trajectory_loss(const Waypoints& pred, const Waypoints& gt) {
  SFD_CHECK(pred.pts.defined() && gt.pts.defined() &&
                pred.count() == gt.count(),
            "trajectory loss: waypoint count mismatch");
  return ad::mean_all(ad::abs(ad::sub(pred.pts, gt.pts)));
}

}  // namespace sfd::fast
