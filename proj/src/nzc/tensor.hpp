#pragma once

// Dense NCHW tensor engine with reverse-mode automatic differentiation.
// Single-threaded graph construction and backward; float is the production
// scalar type, double instantiations exist for the finite-difference
// verification harness.

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "nzc/common.hpp"

namespace nzc {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
bool& grad_mode();
}

// RAII guard disabling graph recording (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorImplT {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // allocated lazily, same length as data
  // graph edges (populated only while grad mode is on)
  std::vector<std::shared_ptr<TensorImplT<T>>> parents;
  std::function<void()> grad_fn;
  const char* op_name = "leaf";

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class TensorT {
 public:
  using Impl = TensorImplT<T>;

  TensorT() = default;
  explicit TensorT(Shape shape, T fill = T(0));
  TensorT(Shape shape, std::vector<T> data);

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
  static TensorT full(Shape shape, T value) { return TensorT(std::move(shape), value); }
  static TensorT from_data(Shape shape, std::vector<T> data) {
    return TensorT(std::move(shape), std::move(data));
  }
  // i.i.d. values drawn from rng.normal() * stddev
  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1));
  static TensorT uniform(Shape shape, Rng& rng, T lo, T hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  TensorT& set_requires_grad(bool value) {
    impl_->requires_grad = value;
    if (value) impl_->ensure_grad();
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  T* grad() { return impl_->grad.data(); }
  const T* grad() const { return impl_->grad.data(); }
  std::vector<T>& grad_vec() { return impl_->grad; }
  const std::vector<T>& grad_vec() const { return impl_->grad; }
  void zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  // value of a one-element tensor
  T item() const;

  // deep copy with no graph history
  TensorT clone() const;
  // shares nothing; same data, requires_grad off, no parents
  TensorT detached() const;
  // copy to the other scalar type (no graph history)
  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(impl_->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(impl_->data[i]);
    return TensorT<U>::from_data(impl_->shape, std::move(out));
  }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// --- graph-recorded operations -------------------------------------------

template <typename T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T> TensorT<T> add_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> mul_scalar(const TensorT<T>& a, T s);
template <typename T> TensorT<T> relu(const TensorT<T>& a);
template <typename T> TensorT<T> abs_op(const TensorT<T>& a);
template <typename T> TensorT<T> tanh_op(const TensorT<T>& a);
template <typename T> TensorT<T> sigmoid(const TensorT<T>& a);
template <typename T> TensorT<T> softplus(const TensorT<T>& a);
template <typename T> TensorT<T> log_op(const TensorT<T>& a);
template <typename T> TensorT<T> pow_scalar(const TensorT<T>& a, T exponent);
template <typename T> TensorT<T> sum(const TensorT<T>& a);
template <typename T> TensorT<T> mean(const TensorT<T>& a);

// max(x, bound) with a one-sided gradient: upstream gradient passes where
// x >= bound or where it pushes x upward (grad < 0). Keeps clamped
// likelihoods trainable.
template <typename T> TensorT<T> lower_bound(const TensorT<T>& a, T bound);

// x + u with u ~ Uniform(-0.5, 0.5) i.i.d.; backward is identity.
template <typename T> TensorT<T> add_uniform_noise(const TensorT<T>& a, Rng& rng);

// batched per-channel matmul: (C,m,k) x (C,k,n) -> (C,m,n)
template <typename T> TensorT<T> matmul_bc(const TensorT<T>& a, const TensorT<T>& b);
// (C,m,n) + (C,m,1), broadcast over the last axis
template <typename T> TensorT<T> add_col(const TensorT<T>& a, const TensorT<T>& b);
// (C,m,n) * (C,m,1)
template <typename T> TensorT<T> mul_col(const TensorT<T>& a, const TensorT<T>& b);

// (N,C,H,W) -> (C,1,N*H*W) and back; used to feed per-channel density models
template <typename T> TensorT<T> channels_to_rows(const TensorT<T>& x);
template <typename T> TensorT<T> rows_to_channels(const TensorT<T>& x, int n, int h, int w);

// channel slice [begin, end) of an NCHW tensor
template <typename T> TensorT<T> slice_channels(const TensorT<T>& x, int begin, int end);

// zero-padded cross-correlation; bias may be undefined
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                  int stride, int pad);
// adjoint of conv2d's data path; w keeps conv2d's (Cout,Cin,k,k) layout and
// maps a Cout-channel input to a Cin-channel output
template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                            int stride, int pad, int out_pad);

// generalized divisive normalization on raw (reparameterized) parameters:
// effective beta = beta_raw^2 + 1e-6, effective gamma = gamma_raw^2
template <typename T>
TensorT<T> gdn(const TensorT<T>& x, const TensorT<T>& beta_raw, const TensorT<T>& gamma_raw,
               bool inverse);

// 2x2 mean pooling, stride 2 (floor semantics)
template <typename T> TensorT<T> avg_pool2(const TensorT<T>& x);

// discretized Gaussian bin probability Phi((v-mu+.5)/s) - Phi((v-mu-.5)/s);
// means may be undefined (treated as zero)
template <typename T>
TensorT<T> gauss_bin_prob(const TensorT<T>& v, const TensorT<T>& scales, const TensorT<T>& means);

// --- backward ---------------------------------------------------------------

// Populates .grad on every reachable tensor that requires grad. Repeated
// calls accumulate. `loss` must be scalar.
template <typename T> void backward(const TensorT<T>& loss);

template <typename T> bool all_finite(const TensorT<T>& t);
// Walks the graph below `root` in topological order and returns the op name
// of the first node holding a non-finite value, or nullptr.
template <typename T> const char* first_nonfinite_op(const TensorT<T>& root);

// --- Adam -------------------------------------------------------------------

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  int64_t step = 0;
  std::vector<float> m;
  std::vector<float> v;
};

// One Adam update with bias correction over a parameter set. States are
// created on first use and must stay aligned with `params`.
void adam_step(std::vector<Tensor>& params, std::vector<AdamState>& states, float lr,
               const AdamConfig& cfg = {});

// Scales all gradients so the global L2 norm is at most `max_norm`.
// Returns the pre-clip norm.
float clip_grad_norm(std::vector<Tensor>& params, float max_norm);

// --- scalar helpers ----------------------------------------------------------

double norm_cdf(double x);   // standard normal CDF
double norm_pdf(double x);
double norm_quantile(double p);  // inverse CDF, Acklam's rational approximation + refinement

}  // namespace nzc
