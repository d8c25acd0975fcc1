#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sfdrive/autodiff.hpp"
#include "sfdrive/common.hpp"

// Neural building blocks: parameter registry, linear / layer-norm / attention
// layers, embeddings, AdamW with a cosine schedule, the straight-through
// Gumbel binary sampler, and bit-exact binary checkpoints.
namespace sfd::nn {

using ad::Shape;
using ad::Tensor;

// ---- parameters --------------------------------------------------------------

class ParamStore {
 public:
  // Registers a fresh parameter; duplicate names are an error.
  Tensor add(const std::string& name, Tensor t);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) != 0; }

  // Sorted by name (std::map order) — deterministic iteration everywhere.
  const std::map<std::string, Tensor>& items() const { return params_; }

  std::size_t scalar_count() const;
  std::size_t scalar_count_prefix(const std::string& prefix) const;
  void zero_grads();
  // Allocates zero grad buffers for every parameter so an optimizer step after
  // a partial backward pass sees "zero gradient", not "missing gradient".
  void ensure_grads();
  bool all_finite() const;

  // Copies values from another store's map; shapes and the full name set must
  // match exactly.
  void load_values(const std::map<std::string, Tensor>& src);

 private:
  std::map<std::string, Tensor> params_;
};

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weight matrices
Tensor init_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out);

// ---- layers --------------------------------------------------------------------

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in,
         std::size_t out, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  // 2 x MAC count for a (rows x in)(in x out) product
  std::uint64_t flops(std::size_t rows) const {
    return std::uint64_t(2) * rows * in_ * out_;
  }

 private:
  Tensor w_, b_;
  std::size_t in_ = 0, out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, g_, b_); }

 private:
  Tensor g_, b_;
};

// Multi-head scaled dot-product attention (self or cross depending on the
// key/value operand). Optional row-major (n_q x n_kv) visibility mask; masked
// positions receive exactly zero attention weight.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, std::size_t dim,
                     std::size_t heads, Rng& rng);

  Tensor operator()(const Tensor& q_in, const Tensor& kv_in,
                    const std::vector<std::uint8_t>* mask = nullptr) const;
  std::uint64_t flops(std::size_t n_q, std::size_t n_kv) const;

 private:
  Linear wq_, wk_, wv_, wo_;
  std::size_t dim_ = 0, heads_ = 0;
};

// Pre-LN transformer block: attention residual then feed-forward residual.
// Constructed as self-attention (queries == keys/values) or cross-attention
// (external key/value stream with its own input norm).
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(ParamStore& ps, const std::string& name, std::size_t dim,
                 std::size_t heads, std::size_t ffn_mult, bool cross, Rng& rng);

  Tensor forward(const Tensor& x,
                 const std::vector<std::uint8_t>* mask = nullptr) const;
  Tensor forward_cross(const Tensor& x, const Tensor& kv,
                       const std::vector<std::uint8_t>* mask = nullptr) const;
  std::uint64_t flops(std::size_t n_q, std::size_t n_kv) const;

 private:
  MultiHeadAttention attn_;
  LayerNorm ln1_, ln_kv_, ln2_;
  Linear ff1_, ff2_;
  std::size_t dim_ = 0;
  bool cross_ = false;
};

// Learned lookup table (n_ids x dim); lookups keep the graph connection so the
// selected rows train.
class Embedding {
 public:
  Embedding() = default;
  Embedding(ParamStore& ps, const std::string& name, std::size_t n_ids,
            std::size_t dim, Rng& rng);

  Tensor row(std::size_t id) const;             // (1 x dim)
  Tensor rows(std::size_t id0, std::size_t n) const;  // (n x dim), contiguous ids
  std::size_t count() const { return n_; }

 private:
  Tensor table_;
  std::size_t n_ = 0, dim_ = 0;
};

// ---- optimizer --------------------------------------------------------------------

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  // Cosine decay from 1.0 to `floor` over `horizon` optimizer steps; 0 means a
  // constant multiplier of 1.
  std::size_t horizon = 0;
  double floor = 0.005;
};

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }
  double lr_multiplier() const;  // for the step about to be taken

  // One decoupled-weight-decay update over every parameter in the store.
  // Errors on a missing grad buffer or a non-finite grad, naming the
  // parameter; grads are cleared afterwards.
  void step(ParamStore& ps);

  friend struct CheckpointCodec;

 private:
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> m_;
};

// ---- gumbel ------------------------------------------------------------------------

// Two-class Gumbel-Softmax sample of a Bernoulli(theta) gate. Forward value is
// hard {0,1} with P(pi=1) = theta exactly; backward carries the gradient of
// the relaxed class-1 probability via the straight-through estimator.
struct GumbelSample {
  Tensor pi;    // scalar tensor, forward in {0,1}
  double soft;  // relaxed class-1 probability at the drawn noise
  double hard;  // pi's forward value
};
GumbelSample gumbel_binary(const Tensor& theta, double temperature, Rng& rng);

// ---- checkpoints -------------------------------------------------------------------

// Versioned binary file: parameter name/shape/values (raw 64-bit doubles, so
// round-trips are bit-exact), optional optimizer moments, optional RNG state,
// and a small string-to-string metadata map.
void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const AdamW* opt, const Rng* rng,
                     const std::map<std::string, std::string>& meta);

// Reads only the metadata map (cheap; no parameters are touched). Lets a
// caller reconstruct the producing configuration before allocating anything.
std::map<std::string, std::string> read_checkpoint_meta(
    const std::string& path);

// Loads into an already-constructed store (names and shapes must match).
// Returns the metadata map. opt/rng may be null to skip those sections.
std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                   ParamStore& ps, AdamW* opt,
                                                   Rng* rng);

// Loads only the parameters the store declares; the file may hold more (e.g.
// a full checkpoint feeding a build without the slow path). Every store
// parameter must be present. Optimizer/RNG sections are ignored.
std::map<std::string, std::string> load_checkpoint_subset(
    const std::string& path, ParamStore& ps);

}  // namespace sfd::nn
