#include "sfdrive/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace sfd::nn {

// ---- ParamStore ----------------------------------------------------------------

Tensor ParamStore::add(const std::string& name, Tensor t) {
  SFD_CHECK(t.defined(), "param " << name << ": undefined tensor");
  SFD_CHECK(!has(name), "duplicate parameter name: " << name);
  t.set_requires_grad(true);
  params_.emplace(name, t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  SFD_CHECK(it != params_.end(), "unknown parameter: " << name);
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [k, t] : params_) n += t.size();
  return n;
}

std::size_t ParamStore::scalar_count_prefix(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [k, t] : params_)
    if (k.rfind(prefix, 0) == 0) n += t.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [k, t] : params_) {
    Tensor h = t;
    h.zero_grad();
  }
}

void ParamStore::ensure_grads() {
  for (auto& [k, t] : params_) {
    Tensor h = t;
    (void)h.grad();  // allocates zeros on first use
  }
}

bool ParamStore::all_finite() const {
  for (const auto& [k, t] : params_)
    if (!t.all_finite()) return false;
  return true;
}

void ParamStore::load_values(const std::map<std::string, Tensor>& src) {
  SFD_CHECK(src.size() == params_.size(),
            "checkpoint parameter count " << src.size() << " != model's "
                                          << params_.size());
  for (auto& [name, t] : params_) {
    auto it = src.find(name);
    SFD_CHECK(it != src.end(), "checkpoint missing parameter: " << name);
    SFD_CHECK(it->second.shape() == t.shape(),
              "checkpoint shape mismatch for " << name << ": "
                                               << it->second.shape_str()
                                               << " vs " << t.shape_str());
    Tensor h = t;
    std::copy(it->second.data(), it->second.data() + t.size(), h.data());
  }
}

Tensor init_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  Tensor w = Tensor::zeros({fan_in, fan_out}, true);
  for (std::size_t i = 0; i < w.size(); ++i)
    w.data()[i] = rng.uniform(-bound, bound);
  return w;
}

// ---- layers ------------------------------------------------------------------------

Linear::Linear(ParamStore& ps, const std::string& name, std::size_t in,
               std::size_t out, Rng& rng)
    : in_(in), out_(out) {
  w_ = ps.add(name + ".w", init_weight(rng, in, out));
  b_ = ps.add(name + ".b", Tensor::zeros({1, out}, true));
}

Tensor Linear::operator()(const Tensor& x) const {
  SFD_CHECK(x.ndim() == 2 && x.cols() == in_,
            "linear: expected (*, " << in_ << "), got " << x.shape_str());
  return ad::add_rowvec(ad::matmul(x, w_), b_);
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim) {
  g_ = ps.add(name + ".g", Tensor::full({1, dim}, 1.0, true));
  b_ = ps.add(name + ".b", Tensor::zeros({1, dim}, true));
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name,
                                       std::size_t dim, std::size_t heads,
                                       Rng& rng)
    : dim_(dim), heads_(heads) {
  SFD_CHECK(heads > 0 && dim % heads == 0,
            "attention: dim " << dim << " not divisible by heads " << heads);
  wq_ = Linear(ps, name + ".q", dim, dim, rng);
  wk_ = Linear(ps, name + ".k", dim, dim, rng);
  wv_ = Linear(ps, name + ".v", dim, dim, rng);
  wo_ = Linear(ps, name + ".o", dim, dim, rng);
}

Tensor MultiHeadAttention::operator()(
    const Tensor& q_in, const Tensor& kv_in,
    const std::vector<std::uint8_t>* mask) const {
  SFD_CHECK(q_in.ndim() == 2 && kv_in.ndim() == 2 && q_in.cols() == dim_ &&
                kv_in.cols() == dim_,
            "attention: operands " << q_in.shape_str() << ", "
                                   << kv_in.shape_str() << " vs dim " << dim_);
  const std::size_t nq = q_in.rows(), nkv = kv_in.rows();
  if (mask)
    SFD_CHECK(mask->size() == nq * nkv, "attention: mask size "
                                            << mask->size() << " != " << nq
                                            << "x" << nkv);
  Tensor q = wq_(q_in), k = wk_(kv_in), v = wv_(kv_in);
  const std::size_t dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(double(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    Tensor qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
    Tensor logits = ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), scale);
    if (mask) logits = ad::apply_attention_mask(logits, *mask);
    Tensor attn = ad::softmax(logits, 1);
    outs.push_back(ad::matmul(attn, vh));
  }
  Tensor out = wo_(ad::concat_cols(outs));
  SFD_CHECK(out.rows() == nq && out.cols() == dim_,
            "attention: output shape drifted to " << out.shape_str());
  return out;
}

std::uint64_t MultiHeadAttention::flops(std::size_t n_q,
                                        std::size_t n_kv) const {
  // four projections plus QK^T and AV across all heads
  return wq_.flops(n_q) + wk_.flops(n_kv) + wv_.flops(n_kv) + wo_.flops(n_q) +
         2 * std::uint64_t(n_q) * n_kv * dim_ * 2;
}

AttentionBlock::AttentionBlock(ParamStore& ps, const std::string& name,
                               std::size_t dim, std::size_t heads,
                               std::size_t ffn_mult, bool cross, Rng& rng)
    : dim_(dim), cross_(cross) {
  attn_ = MultiHeadAttention(ps, name + ".attn", dim, heads, rng);
  ln1_ = LayerNorm(ps, name + ".ln1", dim);
  if (cross) ln_kv_ = LayerNorm(ps, name + ".lnkv", dim);
  ln2_ = LayerNorm(ps, name + ".ln2", dim);
  ff1_ = Linear(ps, name + ".ff1", dim, dim * ffn_mult, rng);
  ff2_ = Linear(ps, name + ".ff2", dim * ffn_mult, dim, rng);
}

Tensor AttentionBlock::forward(const Tensor& x,
                               const std::vector<std::uint8_t>* mask) const {
  SFD_CHECK(!cross_, "self forward on a cross-attention block");
  Tensor h = ln1_(x);
  Tensor x1 = ad::add(x, attn_(h, h, mask));
  Tensor x2 = ad::add(x1, ff2_(ad::gelu(ff1_(ln2_(x1)))));
  SFD_CHECK(x2.rows() == x.rows() && x2.cols() == x.cols(),
            "block: token/channel shape changed: " << x2.shape_str());
  return x2;
}

Tensor AttentionBlock::forward_cross(
    const Tensor& x, const Tensor& kv,
    const std::vector<std::uint8_t>* mask) const {
  SFD_CHECK(cross_, "cross forward on a self-attention block");
  Tensor x1 = ad::add(x, attn_(ln1_(x), ln_kv_(kv), mask));
  Tensor x2 = ad::add(x1, ff2_(ad::gelu(ff1_(ln2_(x1)))));
  SFD_CHECK(x2.rows() == x.rows() && x2.cols() == x.cols(),
            "block: token/channel shape changed: " << x2.shape_str());
  return x2;
}

std::uint64_t AttentionBlock::flops(std::size_t n_q, std::size_t n_kv) const {
  return attn_.flops(n_q, n_kv) + ff1_.flops(n_q) + ff2_.flops(n_q);
}

Embedding::Embedding(ParamStore& ps, const std::string& name, std::size_t n_ids,
                     std::size_t dim, Rng& rng)
    : n_(n_ids), dim_(dim) {
  Tensor t = Tensor::zeros({n_ids, dim}, true);
  const double bound = 1.0 / std::sqrt(double(dim));
  for (std::size_t i = 0; i < t.size(); ++i)
    t.data()[i] = rng.uniform(-bound, bound);
  table_ = ps.add(name + ".table", t);
}

Tensor Embedding::row(std::size_t id) const {
  SFD_CHECK(id < n_, "embedding id " << id << " out of range " << n_);
  return ad::slice_rows(table_, id, id + 1);
}

Tensor Embedding::rows(std::size_t id0, std::size_t n) const {
  SFD_CHECK(id0 + n <= n_, "embedding range [" << id0 << ", " << (id0 + n)
                                               << ") out of range " << n_);
  return ad::slice_rows(table_, id0, id0 + n);
}

// ---- AdamW -----------------------------------------------------------------------

namespace {
double cosine_mult(const AdamWConfig& cfg, std::size_t step) {
  if (cfg.horizon == 0) return 1.0;
  const double progress =
      std::min(1.0, double(step) / double(cfg.horizon));
  return cfg.floor +
         (1.0 - cfg.floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}
}  // namespace

double AdamW::lr_multiplier() const { return cosine_mult(cfg_, step_ + 1); }

void AdamW::step(ParamStore& ps) {
  ++step_;
  const double mult = cosine_mult(cfg_, step_);
  const double lr = cfg_.lr * mult;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
  for (const auto& [name, param] : ps.items()) {
    Tensor t = param;
    SFD_CHECK(t.has_grad(), "optimizer: missing gradient for " << name);
    auto& [mv, vv] = m_[name];
    if (mv.empty()) {
      mv.assign(t.size(), 0.0);
      vv.assign(t.size(), 0.0);
    }
    const double* g = t.grad_vec().data();
    double* w = t.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      SFD_CHECK(std::isfinite(g[i]), "optimizer: non-finite gradient in " << name);
      mv[i] = cfg_.beta1 * mv[i] + (1.0 - cfg_.beta1) * g[i];
      vv[i] = cfg_.beta2 * vv[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = mv[i] / bc1;
      const double vhat = vv[i] / bc2;
      // decoupled decay computed from the pre-update weight
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
    }
    SFD_CHECK(t.all_finite(), "optimizer: non-finite parameter after update: " << name);
  }
  ps.zero_grads();
}

// ---- gumbel ------------------------------------------------------------------------

GumbelSample gumbel_binary(const Tensor& theta, double temperature, Rng& rng) {
  SFD_CHECK(theta.is_scalar(), "gumbel_binary: theta must be scalar");
  const double tv = theta.value();
  SFD_CHECK(std::isfinite(tv) && tv >= 0.0 && tv <= 1.0,
            "gumbel_binary: theta " << tv << " outside [0, 1]");
  SFD_CHECK(std::isfinite(temperature) && temperature > 0.0,
            "gumbel_binary: temperature must be positive");

  const double p = std::clamp(tv, 1e-6, 1.0 - 1e-6);
  const double l1 = std::log(p);
  const double l0 = std::log1p(-p);
  const double g1 = rng.gumbel();
  const double g0 = rng.gumbel();
  const double z = (l1 + g1 - l0 - g0) / temperature;
  const double soft = 1.0 / (1.0 + std::exp(-z));
  const double hard = z > 0.0 ? 1.0 : 0.0;
  // d(soft)/d(theta) through the two-class relaxation; zero in the clamp zone
  const double dsoft = (tv < 1e-6 || tv > 1.0 - 1e-6)
                           ? 0.0
                           : soft * (1.0 - soft) / (temperature * p * (1.0 - p));
  return {ad::straight_through_binary(theta, hard, dsoft), soft, hard};
}

// ---- checkpoints ----------------------------------------------------------------

struct CheckpointCodec {
  static std::size_t& step(AdamW& o) { return o.step_; }
  static std::size_t step(const AdamW& o) { return o.step_; }
  static auto& moments(AdamW& o) { return o.m_; }
  static const auto& moments(const AdamW& o) { return o.m_; }
};

namespace {

constexpr char kMagic[8] = {'S', 'F', 'D', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}
void put_doubles(std::ostream& os, const double* d, std::size_t n) {
  os.write(reinterpret_cast<const char*>(d), std::streamsize(n * sizeof(double)));
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  SFD_CHECK(bool(is), "truncated checkpoint (u32)");
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  SFD_CHECK(bool(is), "truncated checkpoint (u64)");
  return v;
}
std::string get_str(std::istream& is) {
  std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  SFD_CHECK(bool(is), "truncated checkpoint (string)");
  return s;
}
std::vector<double> get_doubles(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(double)));
  SFD_CHECK(bool(is), "truncated checkpoint (value block)");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& ps,
                     const AdamW* opt, const Rng* rng,
                     const std::map<std::string, std::string>& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  SFD_CHECK(os.good(), "cannot open checkpoint for writing: " << path);
  os.write(kMagic, sizeof kMagic);

  put_u32(os, std::uint32_t(meta.size()));
  for (const auto& [k, v] : meta) {
    put_str(os, k);
    put_str(os, v);
  }

  put_u64(os, ps.items().size());
  for (const auto& [name, t] : ps.items()) {
    put_str(os, name);
    put_u32(os, std::uint32_t(t.ndim()));
    for (auto d : t.shape()) put_u64(os, d);
    put_doubles(os, t.data(), t.size());
  }

  os.put(opt ? 1 : 0);
  if (opt) {
    put_u64(os, CheckpointCodec::step(*opt));
    const auto& moments = CheckpointCodec::moments(*opt);
    put_u64(os, moments.size());
    for (const auto& [name, mv] : moments) {
      put_str(os, name);
      put_u64(os, mv.first.size());
      put_doubles(os, mv.first.data(), mv.first.size());
      put_doubles(os, mv.second.data(), mv.second.size());
    }
  }

  os.put(rng ? 1 : 0);
  if (rng) {
    std::uint64_t st[4];
    rng->save_state(st);
    for (auto s : st) put_u64(os, s);
  }
  SFD_CHECK(os.good(), "write failure on checkpoint: " << path);
}

std::map<std::string, std::string> read_checkpoint_meta(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  SFD_CHECK(is.good(), "cannot open checkpoint: " << path);
  char magic[8];
  is.read(magic, sizeof magic);
  SFD_CHECK(bool(is) && std::memcmp(magic, kMagic, sizeof kMagic) == 0,
            "not a checkpoint file (bad magic): " << path);
  std::map<std::string, std::string> meta;
  const std::uint32_t n_meta = get_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_str(is);
    meta[k] = get_str(is);
  }
  return meta;
}

std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                   ParamStore& ps, AdamW* opt,
                                                   Rng* rng) {
  std::ifstream is(path, std::ios::binary);
  SFD_CHECK(is.good(), "cannot open checkpoint: " << path);
  char magic[8];
  is.read(magic, sizeof magic);
  SFD_CHECK(bool(is) && std::memcmp(magic, kMagic, sizeof kMagic) == 0,
            "not a checkpoint file (bad magic): " << path);

  std::map<std::string, std::string> meta;
  const std::uint32_t n_meta = get_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_str(is);
    meta[k] = get_str(is);
  }

  std::map<std::string, Tensor> loaded;
  const std::uint64_t n_params = get_u64(is);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = get_str(is);
    const std::uint32_t nd = get_u32(is);
    Shape shape(nd);
    std::size_t total = 1;
    for (auto& d : shape) {
      d = get_u64(is);
      total *= d;
    }
    loaded[name] = Tensor::from(shape, get_doubles(is, total));
  }
  ps.load_values(loaded);

  const int has_opt = is.get();
  SFD_CHECK(has_opt == 0 || has_opt == 1, "corrupt checkpoint (opt flag)");
  if (has_opt) {
    const std::uint64_t step = get_u64(is);
    const std::uint64_t n = get_u64(is);
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> mo;
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = get_str(is);
      const std::uint64_t sz = get_u64(is);
      auto mv = get_doubles(is, sz);
      auto vv = get_doubles(is, sz);
      mo[name] = {std::move(mv), std::move(vv)};
    }
    if (opt) {
      for (const auto& [name, mv] : mo)
        SFD_CHECK(ps.has(name), "checkpoint optimizer state for unknown parameter: " << name);
      CheckpointCodec::step(*opt) = step;
      CheckpointCodec::moments(*opt) = std::move(mo);
    }
  }

  const int has_rng = is.get();
  SFD_CHECK(has_rng == 0 || has_rng == 1, "corrupt checkpoint (rng flag)");
  if (has_rng) {
    std::uint64_t st[4];
    for (auto& s : st) s = get_u64(is);
    if (rng) rng->load_state(st);
  }
  return meta;
}

std::map<std::string, std::string> load_checkpoint_subset(
    const std::string& path, ParamStore& ps) {
  std::ifstream is(path, std::ios::binary);
  SFD_CHECK(is.good(), "cannot open checkpoint: " << path);
  char magic[8];
  is.read(magic, sizeof magic);
  SFD_CHECK(bool(is) && std::memcmp(magic, kMagic, sizeof kMagic) == 0,
            "not a checkpoint file (bad magic): " << path);

  std::map<std::string, std::string> meta;
  const std::uint32_t n_meta = get_u32(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_str(is);
    meta[k] = get_str(is);
  }

  std::map<std::string, Tensor> loaded;
  const std::uint64_t n_params = get_u64(is);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = get_str(is);
    const std::uint32_t nd = get_u32(is);
    Shape shape(nd);
    std::size_t total = 1;
    for (auto& d : shape) {
      d = get_u64(is);
      total *= d;
    }
    loaded[name] = Tensor::from(shape, get_doubles(is, total));
  }

  std::map<std::string, Tensor> filtered;
  for (const auto& [name, t] : ps.items()) {
    auto it = loaded.find(name);
    SFD_CHECK(it != loaded.end(),
              "checkpoint " << path << " is missing parameter: " << name);
    filtered[name] = it->second;
    (void)t;
  }
  ps.load_values(filtered);
  return meta;
}

}  // namespace sfd::nn
