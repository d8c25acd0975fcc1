#include "sfdrive/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sfd::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

thread_local Tape* g_tape = nullptr;

std::size_t shape_product(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

bool tracking(std::initializer_list<const Tensor*> ins) {
  if (!g_tape || g_tape->consumed()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

#ifndef NDEBUG
void debug_finite(const Tensor& t, const char* op) {
  SFD_CHECK(t.all_finite(), "non-finite value produced by op " << op);
}
#define SFD_AD_FINITE(t, op) debug_finite((t), (op))
#else
#define SFD_AD_FINITE(t, op) ((void)0)
#endif

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  SFD_CHECK(a.shape() == b.shape(), "shape mismatch in " << op << ": "
                                        << a.shape_str() << " vs "
                                        << b.shape_str());
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value.assign(shape_product(t.d_->shape), v);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  SFD_CHECK(shape_product(shape) == data.size(),
            "tensor init: shape product " << shape_product(shape)
                                          << " != data length " << data.size());
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value = std::move(data);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

std::size_t Tensor::rows() const {
  SFD_CHECK(ndim() == 2, "rows() on non-2D tensor " << shape_str());
  return d_->shape[0];
}

std::size_t Tensor::cols() const {
  SFD_CHECK(ndim() == 2, "cols() on non-2D tensor " << shape_str());
  return d_->shape[1];
}

double Tensor::value() const {
  SFD_CHECK(is_scalar(), "value() on non-scalar tensor " << shape_str());
  return d_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return d_->value[r * cols() + c];
}

double* Tensor::grad() {
  if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
  return d_->grad.data();
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::detached() const {
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = d_->shape;
  t.d_->value = d_->value;
  t.d_->requires_grad = false;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : d_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Tensor::shape_str() const {
  std::string s = "(";
  for (std::size_t i = 0; i < d_->shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(d_->shape[i]);
  }
  return s + ")";
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_tape;
  g_tape = this;
}

Tape::~Tape() { g_tape = prev_; }

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

Tape* Tape::current() { return g_tape; }

void backward(const Tensor& loss) {
  SFD_CHECK(loss.defined() && loss.is_scalar(),
            "backward: loss must be a scalar tensor");
  Tape* tape = Tape::current();
  SFD_CHECK(tape != nullptr, "backward: no active tape");
  SFD_CHECK(!tape->consumed_,
            "backward: tape already consumed; re-record before calling again");
  tape->consumed_ = true;
  const_cast<Tensor&>(loss).grad()[0] += 1.0;
  for (auto it = tape->nodes_.rbegin(); it != tape->nodes_.rend(); ++it) (*it)();
}

// ---- elementwise ------------------------------------------------------------

namespace {

// Shared plumbing for unary ops with pointwise derivative computed from the
// input value.
Tensor unary_op(const Tensor& a, const char* name,
                const std::function<double(double)>& fwd,
                const std::function<double(double)>& dfdx) {
  Tensor out = Tensor::zeros(a.shape());
  const double* av = a.data();
  double* ov = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) ov[i] = fwd(av[i]);
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out, dfdx]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      const double* av = ac.data();
      double* ag = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) ag[i] += og[i] * dfdx(av[i]);
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] + b.data()[i];
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b;
    g_tape->record([ac, bc, out]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      if (ac.requires_grad()) {
        double* g = ac.grad();
        for (std::size_t i = 0; i < ac.size(); ++i) g[i] += og[i];
      }
      if (bc.requires_grad()) {
        double* g = bc.grad();
        for (std::size_t i = 0; i < bc.size(); ++i) g[i] += og[i];
      }
    });
  }
  SFD_AD_FINITE(out, "add");
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b;
    g_tape->record([ac, bc, out]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      if (ac.requires_grad()) {
        double* g = ac.grad();
        for (std::size_t i = 0; i < ac.size(); ++i) g[i] += og[i];
      }
      if (bc.requires_grad()) {
        double* g = bc.grad();
        for (std::size_t i = 0; i < bc.size(); ++i) g[i] -= og[i];
      }
    });
  }
  SFD_AD_FINITE(out, "sub");
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b;
    g_tape->record([ac, bc, out]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      if (ac.requires_grad()) {
        double* g = ac.grad();
        for (std::size_t i = 0; i < ac.size(); ++i) g[i] += og[i] * bc.data()[i];
      }
      if (bc.requires_grad()) {
        double* g = bc.grad();
        for (std::size_t i = 0; i < bc.size(); ++i) g[i] += og[i] * ac.data()[i];
      }
    });
  }
  SFD_AD_FINITE(out, "mul");
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, "add_scalar", [s](double x) { return x + s; },
                  [](double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, "mul_scalar", [s](double x) { return x * s; },
                  [s](double) { return s; });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  SFD_CHECK(a.ndim() == 2, "add_rowvec: lhs must be 2D, got " << a.shape_str());
  const std::size_t c = a.cols();
  SFD_CHECK(v.size() == c, "add_rowvec: vector length " << v.size()
                               << " != cols " << c << " of " << a.shape_str());
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.rows();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j)
      out.data()[r * c + j] = a.data()[r * c + j] + v.data()[j];
  if (tracking({&a, &v})) {
    out.set_requires_grad(true);
    Tensor ac = a, vc = v;
    g_tape->record([ac, vc, out, n, c]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      if (ac.requires_grad()) {
        double* g = ac.grad();
        for (std::size_t i = 0; i < n * c; ++i) g[i] += og[i];
      }
      if (vc.requires_grad()) {
        double* g = vc.grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) g[j] += og[r * c + j];
      }
    });
  }
  SFD_AD_FINITE(out, "add_rowvec");
  return out;
}

Tensor scale_by(const Tensor& t, const Tensor& s) {
  SFD_CHECK(s.is_scalar(), "scale_by: scale must be scalar, got " << s.shape_str());
  const double sv = s.value();
  Tensor out = Tensor::zeros(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out.data()[i] = t.data()[i] * sv;
  if (tracking({&t, &s})) {
    out.set_requires_grad(true);
    Tensor tc = t, sc = s;
    g_tape->record([tc, sc, out, sv]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      if (tc.requires_grad()) {
        double* g = tc.grad();
        for (std::size_t i = 0; i < tc.size(); ++i) g[i] += og[i] * sv;
      }
      if (sc.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < tc.size(); ++i) acc += og[i] * tc.data()[i];
        sc.grad()[0] += acc;
      }
    });
  }
  SFD_AD_FINITE(out, "scale_by");
  return out;
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  SFD_CHECK(a.ndim() == 2 && b.ndim() == 2,
            "matmul: expects 2D operands, got " << a.shape_str() << " and "
                                                << b.shape_str());
  SFD_CHECK(a.cols() == b.rows(), "matmul: inner dims differ, "
                                      << a.shape_str() << " x " << b.shape_str());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = Tensor::zeros({n, m});
  {
    MapC am(a.data(), n, k), bm(b.data(), k, m);
    MapM om(out.data(), n, m);
    om.noalias() = am * bm;
  }
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b;
    g_tape->record([ac, bc, out, n, k, m]() mutable {
      if (!out.has_grad()) return;
      MapC og(out.grad_vec().data(), n, m);
      if (ac.requires_grad()) {
        MapC bm(bc.data(), k, m);
        MapM ag(ac.grad(), n, k);
        ag.noalias() += og * bm.transpose();
      }
      if (bc.requires_grad()) {
        MapC am(ac.data(), n, k);
        MapM bg(bc.grad(), k, m);
        bg.noalias() += am.transpose() * og;
      }
    });
  }
  SFD_AD_FINITE(out, "matmul");
  return out;
}

Tensor transpose(const Tensor& a) {
  SFD_CHECK(a.ndim() == 2, "transpose: expects 2D, got " << a.shape_str());
  const std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c)
      out.data()[c * n + r] = a.data()[r * m + c];
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out, n, m]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      double* ag = ac.grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) ag[r * m + c] += og[c * n + r];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  SFD_CHECK(shape_product(shape) == a.size(),
            "reshape: size " << a.size() << " incompatible with new shape");
  Tensor out = Tensor::from(std::move(shape),
                            std::vector<double>(a.data(), a.data() + a.size()));
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      double* ag = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) ag[i] += og[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  SFD_CHECK(!parts.empty(), "concat_rows: empty input list");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    SFD_CHECK(p.ndim() == 2 && p.cols() == c,
              "concat_rows: column mismatch, expected " << c << " got "
                                                        << p.shape_str());
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, c});
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.size(), out.data() + r * c);
    r += p.rows();
  }
  bool track = false;
  for (const auto& p : parts)
    if (tracking({&p})) track = true;
  if (track) {
    out.set_requires_grad(true);
    std::vector<Tensor> ps = parts;
    g_tape->record([ps, out, c]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      std::size_t r = 0;
      for (auto& p : ps) {
        if (p.requires_grad()) {
          double* g = p.grad();
          for (std::size_t i = 0; i < p.size(); ++i) g[i] += og[r * c + i];
        }
        r += p.rows();
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  SFD_CHECK(a.ndim() == 2 && r0 <= r1 && r1 <= a.rows(),
            "slice_rows: invalid range [" << r0 << ", " << r1 << ") for "
                                          << a.shape_str());
  const std::size_t c = a.cols();
  Tensor out = Tensor::zeros({r1 - r0, c});
  std::copy(a.data() + r0 * c, a.data() + r1 * c, out.data());
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out, r0, c]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      double* ag = ac.grad();
      for (std::size_t i = 0; i < out.size(); ++i) ag[r0 * c + i] += og[i];
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  SFD_CHECK(!parts.empty(), "concat_cols: empty input list");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    SFD_CHECK(p.ndim() == 2 && p.rows() == n,
              "concat_cols: row mismatch, expected " << n << " got "
                                                     << p.shape_str());
    total += p.cols();
  }
  Tensor out = Tensor::zeros({n, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < n; ++r)
      std::copy(p.data() + r * pc, p.data() + (r + 1) * pc,
                out.data() + r * total + off);
    off += pc;
  }
  bool track = false;
  for (const auto& p : parts)
    if (tracking({&p})) track = true;
  if (track) {
    out.set_requires_grad(true);
    std::vector<Tensor> ps = parts;
    g_tape->record([ps, out, n, total]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      std::size_t off = 0;
      for (auto& p : ps) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          double* g = p.grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < pc; ++j)
              g[r * pc + j] += og[r * total + off + j];
        }
        off += pc;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  SFD_CHECK(a.ndim() == 2 && c0 <= c1 && c1 <= a.cols(),
            "slice_cols: invalid range [" << c0 << ", " << c1 << ") for "
                                          << a.shape_str());
  const std::size_t n = a.rows(), c = a.cols(), w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  for (std::size_t r = 0; r < n; ++r)
    std::copy(a.data() + r * c + c0, a.data() + r * c + c1, out.data() + r * w);
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out, n, c, c0, w]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      double* ag = ac.grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < w; ++j)
          ag[r * c + c0 + j] += og[r * w + j];
    });
  }
  return out;
}

// ---- reductions ---------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  Tensor out = Tensor::scalar(s);
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad_vec()[0];
      double* ag = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) ag[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / double(a.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  Tensor out = Tensor::scalar(s * inv);
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out, inv]() mutable {
      if (!out.has_grad()) return;
      const double g = out.grad_vec()[0] * inv;
      double* ag = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) ag[i] += g;
    });
  }
  return out;
}

Tensor mean_rows(const Tensor& a) {
  SFD_CHECK(a.ndim() == 2, "mean_rows: expects 2D, got " << a.shape_str());
  const std::size_t n = a.rows(), c = a.cols();
  const double inv = 1.0 / double(n);
  Tensor out = Tensor::zeros({1, c});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) out.data()[j] += a.data()[r * c + j];
  for (std::size_t j = 0; j < c; ++j) out.data()[j] *= inv;
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out, n, c, inv]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      double* ag = ac.grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) ag[r * c + j] += og[j] * inv;
    });
  }
  return out;
}

// ---- nonlinearities ------------------------------------------------------------

Tensor relu(const Tensor& a) {
  return unary_op(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                  [](double x) { return x > 0 ? 1.0 : 0.0; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a, "gelu",
      [](double x) {
        return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
      },
      [](double x) {
        const double u = kGeluC * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, "sigmoid",
                  [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double x) {
                    const double s = 1.0 / (1.0 + std::exp(-x));
                    return s * (1.0 - s);
                  });
}

Tensor abs(const Tensor& a) {
  return unary_op(a, "abs", [](double x) { return std::fabs(x); },
                  [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor max_scalar(const Tensor& a, double s) {
  return unary_op(a, "max_scalar", [s](double x) { return x > s ? x : s; },
                  [s](double x) { return x > s ? 1.0 : 0.0; });
}

Tensor min_scalar(const Tensor& a, double s) {
  return unary_op(a, "min_scalar", [s](double x) { return x < s ? x : s; },
                  [s](double x) { return x < s ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); },
                  [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary_op(a, "log", [](double x) { return std::log(x); },
                  [](double x) { return 1.0 / x; });
}

// ---- softmax / layer norm -------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  SFD_CHECK(a.ndim() == 1 || a.ndim() == 2,
            "softmax: expects 1D or 2D, got " << a.shape_str());
  if (a.ndim() == 1) {
    SFD_CHECK(axis == 0, "softmax: axis " << axis << " out of range for 1D");
    Tensor a2 = reshape(a, {1, a.size()});
    return reshape(softmax(a2, 1), {a.size()});
  }
  SFD_CHECK(axis == 0 || axis == 1,
            "softmax: axis " << axis << " out of range for 2D");
  if (axis == 0) return transpose(softmax(transpose(a), 1));

  const std::size_t n = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = a.data() + r * c;
    double* orow = out.data() + r * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < c; ++j) orow[j] *= inv;
  }
  if (tracking({&a})) {
    out.set_requires_grad(true);
    Tensor ac = a;
    g_tape->record([ac, out, n, c]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      const double* ov = out.data();
      double* ag = ac.grad();
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += og[r * c + j] * ov[r * c + j];
        for (std::size_t j = 0; j < c; ++j)
          ag[r * c + j] += ov[r * c + j] * (og[r * c + j] - dot);
      }
    });
  }
  SFD_AD_FINITE(out, "softmax");
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  SFD_CHECK(x.ndim() == 2, "layer_norm: expects 2D, got " << x.shape_str());
  const std::size_t n = x.rows(), c = x.cols();
  SFD_CHECK(gain.size() == c && bias.size() == c,
            "layer_norm: gain/bias length must equal cols " << c);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> mu(n), istd(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = x.data() + r * c;
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j) m += row[j];
    m /= double(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= double(c);
    mu[r] = m;
    istd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      out.data()[r * c + j] = (row[j] - m) * istd[r] * gain.data()[j] + bias.data()[j];
  }
  if (tracking({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gain, bc = bias;
    g_tape->record([xc, gc, bc, out, mu, istd, n, c]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      for (std::size_t r = 0; r < n; ++r) {
        const double* xrow = xc.data() + r * c;
        const double is = istd[r];
        const double m = mu[r];
        if (gc.requires_grad()) {
          double* gg = gc.grad();
          for (std::size_t j = 0; j < c; ++j)
            gg[j] += og[r * c + j] * (xrow[j] - m) * is;
        }
        if (bc.requires_grad()) {
          double* bg = bc.grad();
          for (std::size_t j = 0; j < c; ++j) bg[j] += og[r * c + j];
        }
        if (xc.requires_grad()) {
          // dxhat = dy * g; dx = istd * (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double xhat = (xrow[j] - m) * is;
            const double dxh = og[r * c + j] * gc.data()[j];
            s1 += dxh;
            s2 += dxh * xhat;
          }
          s1 /= double(c);
          s2 /= double(c);
          double* xg = xc.grad();
          for (std::size_t j = 0; j < c; ++j) {
            const double xhat = (xrow[j] - m) * is;
            const double dxh = og[r * c + j] * gc.data()[j];
            xg[r * c + j] += is * (dxh - s1 - xhat * s2);
          }
        }
      }
    });
  }
  SFD_AD_FINITE(out, "layer_norm");
  return out;
}

Tensor apply_attention_mask(const Tensor& logits,
                            const std::vector<std::uint8_t>& visible) {
  SFD_CHECK(logits.ndim() == 2, "attention mask: logits must be 2D");
  SFD_CHECK(visible.size() == logits.size(),
            "attention mask: mask size " << visible.size()
                                         << " != logits size " << logits.size());
  const std::size_t n = logits.rows(), c = logits.cols();
  for (std::size_t r = 0; r < n; ++r) {
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) any |= (visible[r * c + j] != 0);
    SFD_CHECK(any, "attention mask: query row " << r << " has no visible keys");
  }
  Tensor out = Tensor::zeros(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out.data()[i] = visible[i] ? logits.data()[i] : -1e30;
  if (tracking({&logits})) {
    out.set_requires_grad(true);
    Tensor lc = logits;
    auto vis = visible;
    g_tape->record([lc, out, vis]() mutable {
      if (!out.has_grad()) return;
      const double* og = out.grad_vec().data();
      double* lg = lc.grad();
      for (std::size_t i = 0; i < lc.size(); ++i)
        if (vis[i]) lg[i] += og[i];
    });
  }
  return out;
}

Tensor straight_through_binary(const Tensor& theta, double hard,
                               double dsoft_dtheta) {
  SFD_CHECK(theta.is_scalar(), "straight_through_binary: theta must be scalar");
  Tensor out = Tensor::scalar(hard);
  if (tracking({&theta})) {
    out.set_requires_grad(true);
    Tensor tc = theta;
    g_tape->record([tc, out, dsoft_dtheta]() mutable {
      if (!out.has_grad()) return;
      tc.grad()[0] += out.grad_vec()[0] * dsoft_dtheta;
    });
  }
  return out;
}

Tensor gate_blend(const Tensor& pi, double on_value, double off_value) {
  SFD_CHECK(pi.is_scalar(), "gate_blend: pi must be scalar");
  const double p = pi.value();
  SFD_CHECK(p == 0.0 || p == 1.0, "gate_blend: pi forward value must be 0 or 1");
  Tensor out = Tensor::scalar(p == 1.0 ? on_value : off_value);
  if (tracking({&pi})) {
    out.set_requires_grad(true);
    Tensor pc = pi;
    g_tape->record([pc, out, on_value, off_value]() mutable {
      if (!out.has_grad()) return;
      pc.grad()[0] += out.grad_vec()[0] * (on_value - off_value);
    });
  }
  return out;
}

// ---- gradient checking ------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h) {
  SFD_CHECK(h > 0 && h <= 1e-2, "grad_check: h must be in (0, 1e-2]");
  std::vector<double> base(x.data(), x.data() + x.size());

  std::vector<double> analytic(x.size(), 0.0);
  {
    Tensor xw = Tensor::from(x.shape(), base, true);
    Tape tape;
    Tensor y = f(xw);
    SFD_CHECK(y.is_scalar(), "grad_check: f must be scalar-valued");
    SFD_CHECK(std::isfinite(y.value()), "grad_check: f(x) is non-finite");
    backward(y);
    if (xw.has_grad())
      analytic.assign(xw.grad_vec().begin(), xw.grad_vec().end());
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](double delta) {
      std::vector<double> v = base;
      v[i] += delta;
      Tensor xi = Tensor::from(x.shape(), std::move(v), false);
      Tape scratch;  // isolates the value-only pass from any outer tape
      Tensor y = f(xi);
      SFD_CHECK(y.is_scalar() && std::isfinite(y.value()),
                "grad_check: non-finite perturbed evaluation");
      return y.value();
    };
    const double num = (eval(h) - eval(-h)) / (2.0 * h);
    const double rel = std::fabs(analytic[i] - num) /
                       (std::fabs(analytic[i]) + std::fabs(num) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace sfd::ad
