#include "sfdrive/qformer.hpp"

namespace sfd::qf {

InstructionEmbedder::InstructionEmbedder(nn::ParamStore& ps,
                                         const std::string& name,
                                         std::size_t n_instr,
                                         std::size_t tokens_per,
                                         std::size_t dim, Rng& rng)
    : n_instr_(n_instr), tokens_per_(tokens_per) {
  SFD_CHECK(n_instr > 0 && tokens_per > 0, "instruction embedder: empty table");
  emb_ = nn::Embedding(ps, name, n_instr * tokens_per, dim, rng);
}

Tensor InstructionEmbedder::tokens(std::size_t instruction_id) const {
  SFD_CHECK(instruction_id < n_instr_, "instruction id " << instruction_id
                                                         << " out of range "
                                                         << n_instr_);
  return emb_.rows(instruction_id * tokens_per_, tokens_per_);
}

QFormer::QFormer(nn::ParamStore& ps, const std::string& name, QFormerConfig cfg,
                 Rng& rng)
    : cfg_(cfg) {
  SFD_CHECK(cfg.n_local > 0, "qformer: need at least one local query");
  const double bound = 1.0 / std::sqrt(double(cfg.dim));
  auto init_tokens = [&](std::size_t n) {
    Tensor t = Tensor::zeros({n, cfg.dim}, true);
    for (std::size_t i = 0; i < t.size(); ++i)
      t.data()[i] = rng.uniform(-bound, bound);
    return t;
  };
  local_ = ps.add(name + ".local", init_tokens(cfg.n_local));
  if (cfg.n_memory > 0)
    mem0_ = ps.add(name + ".mem0", init_tokens(cfg.n_memory));
  cross_ = nn::AttentionBlock(ps, name + ".cross", cfg.dim, cfg.heads,
                              cfg.ffn_mult, /*cross=*/true, rng);
  self_ = nn::AttentionBlock(ps, name + ".self", cfg.dim, cfg.heads,
                             cfg.ffn_mult, /*cross=*/false, rng);
}

void QFormer::reset(QueryBank& bank) const {
  bank.memory = cfg_.n_memory ? mem0_ : Tensor();
  bank.initialized = true;
}

void QFormer::truncate(QueryBank& bank) const {
  SFD_CHECK(bank.initialized, "qformer: truncate on uninitialized bank");
  if (cfg_.n_memory) bank.memory = bank.memory.detached();
}

FeatureTokens QFormer::step(const FeatureTokens& frame,
                            const Tensor& instr_tokens, QueryBank& bank) const {
  SFD_CHECK(bank.initialized, "qformer: uninitialized memory state");
  SFD_CHECK(frame.tokens.ndim() == 2 && frame.tokens.cols() == cfg_.dim,
            "qformer: frame tokens " << frame.tokens.shape_str()
                                     << " vs channel dim " << cfg_.dim);
  SFD_CHECK(instr_tokens.ndim() == 2 && instr_tokens.cols() == cfg_.dim,
            "qformer: instruction tokens " << instr_tokens.shape_str()
                                           << " vs channel dim " << cfg_.dim);
  Tensor queries = local_;
  if (cfg_.n_memory) {
    SFD_CHECK(bank.memory.defined() && bank.memory.rows() == cfg_.n_memory,
              "qformer: bank memory has wrong shape");
    queries = ad::concat_rows({local_, bank.memory});
  }
  Tensor kv = ad::concat_rows({frame.tokens, instr_tokens});
  Tensor x = cross_.forward_cross(queries, kv);
  Tensor y = self_.forward(x);
  SFD_CHECK(y.rows() == out_tokens() && y.cols() == cfg_.dim,
            "qformer: output shape drifted to " << y.shape_str());
  if (cfg_.n_memory)
    bank.memory = ad::slice_rows(y, cfg_.n_local, out_tokens());
  return {y, frame.frame_index};
}

FeatureTokens QFormer::forward_stateless(const FeatureTokens& frame,
                                         const Tensor& instr_tokens) const {
  SFD_CHECK(cfg_.n_memory == 0,
            "stateless forward requires an empty memory group");
  QueryBank bank;
  reset(bank);
  return step(frame, instr_tokens, bank);
}

std::uint64_t QFormer::flops(std::size_t n_frame_tokens,
                             std::size_t n_instr_tokens) const {
  const std::size_t nq = out_tokens();
  return cross_.flops(nq, n_frame_tokens + n_instr_tokens) +
         self_.flops(nq, nq);
}

}  // namespace sfd::qf
