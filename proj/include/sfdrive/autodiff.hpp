#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sfdrive/common.hpp"

// Reverse-mode autodiff over dense 64-bit tensors. Define-by-run: ops record
// backward closures on the thread-local active tape whenever an input carries
// gradient. No tape active means plain evaluation (inference path).
namespace sfd::ad {

using Shape = std::vector<std::size_t>;

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->value.size(); }
  std::size_t ndim() const { return d_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return size() == 1; }

  double* data() { return d_->value.data(); }
  const double* data() const { return d_->value.data(); }
  double value() const;           // scalar tensors only
  double at(std::size_t i) const { return d_->value[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  double* grad();                 // allocates zeros on first use
  const std::vector<double>& grad_vec() const { return d_->grad; }
  void zero_grad();
  void drop_grad() { d_->grad.clear(); }

  // Value copy with no graph history (used at BPTT truncation points).
  Tensor detached() const;

  bool all_finite() const;
  std::string shape_str() const;

  TensorData* raw() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData> d_;
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn);
  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* current();

  friend void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Runs reverse pass from a scalar loss on the active tape; each recorded node
// visited exactly once in reverse order. The tape is consumed afterwards.
void backward(const Tensor& loss);

// ---- op family -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
// out = a + v broadcast over rows; v is 1 x C (or flat C)
Tensor add_rowvec(const Tensor& a, const Tensor& v);
// out = t * s where s is a scalar tensor (gradient flows into both)
Tensor scale_by(const Tensor& t, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // (n x c) -> (1 x c)

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);   // subgradient 0 at 0
Tensor max_scalar(const Tensor& a, double s);
Tensor min_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// softmax over the given axis of a 1-D or 2-D tensor
Tensor softmax(const Tensor& a, int axis);

// Row-wise layer norm with learned gain/bias (both 1 x C or flat C).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Adds -1e30 to positions where visible == 0. mask is row-major nq x nkv,
// matching the logits shape. No gradient flows to masked positions.
Tensor apply_attention_mask(const Tensor& logits,
                            const std::vector<std::uint8_t>& visible);

// Binary straight-through sample: forward value is exactly `hard`; backward
// multiplies incoming gradient by d(soft)/d(theta) evaluated at the draw.
Tensor straight_through_binary(const Tensor& theta, double hard,
                               double dsoft_dtheta);

// Forward picks branch by pi's hard value {0,1}: value = pi ? on_value :
// off_value (exact). Backward: pi.grad += (on_value - off_value) * dout.
Tensor gate_blend(const Tensor& pi, double on_value, double off_value);

// ---- checking utilities ----------------------------------------------------

// Max over coordinates of |analytic - central| / (|analytic| + |central| +
// 1e-12) comparing reverse-mode gradients against central differences.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h);

}  // namespace sfd::ad
