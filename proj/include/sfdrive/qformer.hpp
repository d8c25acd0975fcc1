#pragma once

#include <cstdint>
#include <string>

#include "sfdrive/nn.hpp"

// Token aggregation between the frame encoder and both compute paths: a
// query-token transformer ("Q-former") whose learnable queries are split into
// a stateless local group and a memory group carried across frames. With an
// empty memory group it degenerates to the stateless vanilla variant.
namespace sfd::qf {

using ad::Tensor;

// The common currency between pipeline stages: a (N tokens x C channels)
// matrix tagged with the frame it belongs to.
struct FeatureTokens {
  Tensor tokens;
  std::size_t frame_index = 0;
};

struct QFormerConfig {
  std::size_t dim = 64;
  std::size_t n_local = 20;
  std::size_t n_memory = 20;
  std::size_t heads = 2;
  std::size_t ffn_mult = 2;
};

// Per-episode mutable state: the memory-group query tokens for the next frame.
struct QueryBank {
  Tensor memory;  // (n_memory x dim); graph-connected within a BPTT window
  bool initialized = false;
};

// Maps instruction ids to a fixed number of key/value tokens fed to the
// aggregator alongside frame tokens.
class InstructionEmbedder {
 public:
  InstructionEmbedder() = default;
  InstructionEmbedder(nn::ParamStore& ps, const std::string& name,
                      std::size_t n_instr, std::size_t tokens_per,
                      std::size_t dim, Rng& rng);

  Tensor tokens(std::size_t instruction_id) const;  // (tokens_per x dim)
  std::size_t instruction_count() const { return n_instr_; }
  std::size_t tokens_per() const { return tokens_per_; }

 private:
  nn::Embedding emb_;
  std::size_t n_instr_ = 0, tokens_per_ = 0;
};

class QFormer {
 public:
  QFormer() = default;
  QFormer(nn::ParamStore& ps, const std::string& name, QFormerConfig cfg,
          Rng& rng);

  // Episode start: memory <- learned initial state (graph-connected so the
  // initial state itself trains).
  void reset(QueryBank& bank) const;
  // BPTT window boundary: cut the graph, keep the values.
  void truncate(QueryBank& bank) const;

  // One frame: cross-attend [local ; memory] queries over [frame ; instruction]
  // tokens, then self-attend. Returns all n_local+n_memory tokens as f' and
  // stores the memory half back into the bank.
  FeatureTokens step(const FeatureTokens& frame, const Tensor& instr_tokens,
                     QueryBank& bank) const;

  // Stateless evaluation; only legal when n_memory == 0.
  FeatureTokens forward_stateless(const FeatureTokens& frame,
                                  const Tensor& instr_tokens) const;

  std::size_t out_tokens() const { return cfg_.n_local + cfg_.n_memory; }
  const QFormerConfig& config() const { return cfg_; }
  std::uint64_t flops(std::size_t n_frame_tokens,
                      std::size_t n_instr_tokens) const;

 private:
  QFormerConfig cfg_;
  Tensor local_;  // (n_local x dim) learned queries, re-read every frame
  Tensor mem0_;   // (n_memory x dim) learned initial memory state
  nn::AttentionBlock cross_, self_;
};

}  // namespace sfd::qf
