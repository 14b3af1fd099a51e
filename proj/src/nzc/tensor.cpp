#include "nzc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace nzc {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {
bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

template <typename T>
TensorT<T>::TensorT(Shape shape, T fill) : impl_(std::make_shared<Impl>()) {
  for (int d : shape)
    if (d <= 0) fail(ErrorCode::Dimension, "tensor extent must be positive, got shape " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
}

template <typename T>
TensorT<T>::TensorT(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    fail(ErrorCode::Dimension,
         "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename T>
TensorT<T> TensorT<T>::randn(Shape shape, Rng& rng, T stddev) {
  TensorT out(std::move(shape));
  for (auto& v : out.vec()) v = static_cast<T>(rng.normal()) * stddev;
  return out;
}

template <typename T>
TensorT<T> TensorT<T>::uniform(Shape shape, Rng& rng, T lo, T hi) {
  TensorT out(std::move(shape));
  for (auto& v : out.vec()) v = static_cast<T>(rng.uniform(double(lo), double(hi)));
  return out;
}

template <typename T>
T TensorT<T>::item() const {
  if (!impl_ || impl_->data.size() != 1)
    fail(ErrorCode::Contract, "item() requires a one-element tensor");
  return impl_->data[0];
}

template <typename T>
TensorT<T> TensorT<T>::clone() const {
  TensorT out;
  out.impl_ = std::make_shared<Impl>();
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  return out;
}

template <typename T>
TensorT<T> TensorT<T>::detached() const {
  return clone();
}

// --- autograd plumbing -------------------------------------------------------

namespace {

template <typename T>
bool recording(std::initializer_list<const TensorT<T>*> inputs) {
  if (!detail::grad_mode()) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void attach(TensorT<T>& out, const char* name,
            std::vector<std::shared_ptr<TensorImplT<T>>> parents, std::function<void()> fn) {
  auto impl = out.impl();
  impl->op_name = name;
  impl->parents = std::move(parents);
  impl->grad_fn = std::move(fn);
  impl->requires_grad = true;
  impl->ensure_grad();
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    fail(ErrorCode::Dimension, std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
}

// y = f(x) elementwise with dy/dx supplied as a second lambda over (x, y)
template <typename T, typename F, typename G>
TensorT<T> unary_op(const TensorT<T>& a, const char* name, F f, G dfdx) {
  TensorT<T> out(a.shape());
  const T* x = a.data();
  T* y = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
  if (recording<T>({&a})) {
    auto ai = a.impl();
    auto* oi = out.impl().get();
    attach(out, name, {ai}, [ai, oi, dfdx]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T* g = oi->grad.data();
      const T* x = ai->data.data();
      const T* y = oi->data.data();
      T* ga = ai->grad.data();
      const size_t n = ai->data.size();
      for (size_t i = 0; i < n; ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
    });
  }
  return out;
}

}  // namespace

// --- elementwise -------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (recording<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    auto* oi = out.impl().get();
    attach(out, "add", {ai, bi}, [ai, bi, oi]() {
      const T* g = oi->grad.data();
      const size_t n = oi->data.size();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < n; ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < n; ++i) bi->grad[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "sub");
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (recording<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    auto* oi = out.impl().get();
    attach(out, "sub", {ai, bi}, [ai, bi, oi]() {
      const T* g = oi->grad.data();
      const size_t n = oi->data.size();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < n; ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < n; ++i) bi->grad[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (recording<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    auto* oi = out.impl().get();
    attach(out, "mul", {ai, bi}, [ai, bi, oi]() {
      const T* g = oi->grad.data();
      const size_t n = oi->data.size();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->data[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "div");
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
  if (recording<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    auto* oi = out.impl().get();
    attach(out, "div", {ai, bi}, [ai, bi, oi]() {
      const T* g = oi->grad.data();
      const size_t n = oi->data.size();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < n; ++i) ai->grad[i] += g[i] / bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
          const T bb = bi->data[i];
          bi->grad[i] -= g[i] * ai->data[i] / (bb * bb);
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
  return unary_op(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  return unary_op(a, "mul_scalar", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  return unary_op(a, "relu", [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> abs_op(const TensorT<T>& a) {
  return unary_op(a, "abs", [](T x) { return x < T(0) ? -x : x; },
                  [](T x, T) { return x < T(0) ? T(-1) : (x > T(0) ? T(1) : T(0)); });
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& a) {
  return unary_op(a, "tanh", [](T x) { return std::tanh(x); },
                  [](T, T y) { return T(1) - y * y; });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
  return unary_op(a, "sigmoid",
                  [](T x) { return static_cast<T>(1.0 / (1.0 + std::exp(-double(x)))); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> softplus(const TensorT<T>& a) {
  // log1p(exp(x)) with saturation guards
  return unary_op(a, "softplus",
                  [](T x) {
                    if (x > T(30)) return x;
                    if (x < T(-30)) return static_cast<T>(std::exp(double(x)));
                    return static_cast<T>(std::log1p(std::exp(double(x))));
                  },
                  [](T x, T) { return static_cast<T>(1.0 / (1.0 + std::exp(-double(x)))); });
}

template <typename T>
TensorT<T> log_op(const TensorT<T>& a) {
  for (int64_t i = 0; i < a.numel(); ++i)
    if (!(a.data()[i] > T(0))) fail(ErrorCode::Numeric, "log of non-positive value");
  return unary_op(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
TensorT<T> pow_scalar(const TensorT<T>& a, T exponent) {
  return unary_op(a, "pow_scalar",
                  [exponent](T x) { return static_cast<T>(std::pow(double(x), double(exponent))); },
                  [exponent](T x, T y) {
                    if (x == T(0)) return T(0);
                    return exponent * y / x;
                  });
}

template <typename T>
TensorT<T> lower_bound(const TensorT<T>& a, T bound) {
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = std::max(a.data()[i], bound);
  if (recording<T>({&a})) {
    auto ai = a.impl();
    auto* oi = out.impl().get();
    attach(out, "lower_bound", {ai}, [ai, oi, bound]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T* g = oi->grad.data();
      const T* x = ai->data.data();
      T* ga = ai->grad.data();
      const size_t n = ai->data.size();
      for (size_t i = 0; i < n; ++i)
        if (x[i] >= bound || g[i] < T(0)) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> add_uniform_noise(const TensorT<T>& a, Rng& rng) {
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i)
    out.data()[i] = a.data()[i] + static_cast<T>(rng.uniform(-0.5, 0.5));
  if (recording<T>({&a})) {
    auto ai = a.impl();
    auto* oi = out.impl().get();
    attach(out, "add_uniform_noise", {ai}, [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const size_t n = ai->data.size();
      for (size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

// --- reductions ---------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += double(a.data()[i]);
  TensorT<T> out(Shape{1}, static_cast<T>(acc));
  if (recording<T>({&a})) {
    auto ai = a.impl();
    auto* oi = out.impl().get();
    attach(out, "sum", {ai}, [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T g = oi->grad[0];
      for (auto& v : ai->grad) v += g;
    });
  }
  return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
  const T inv = static_cast<T>(1.0 / double(a.numel()));
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += double(a.data()[i]);
  TensorT<T> out(Shape{1}, static_cast<T>(acc / double(a.numel())));
  if (recording<T>({&a})) {
    auto ai = a.impl();
    auto* oi = out.impl().get();
    attach(out, "mean", {ai}, [ai, oi, inv]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const T g = oi->grad[0] * inv;
      for (auto& v : ai->grad) v += g;
    });
  }
  return out;
}

// --- batched per-channel linear algebra ---------------------------------------

template <typename T>
TensorT<T> matmul_bc(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    fail(ErrorCode::Dimension,
         "matmul_bc: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int C = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  TensorT<T> out(Shape{C, m, n});
  for (int c = 0; c < C; ++c) {
    const T* A = a.data() + int64_t(c) * m * k;
    const T* B = b.data() + int64_t(c) * k * n;
    T* O = out.data() + int64_t(c) * m * n;
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const T av = A[i * k + kk];
        const T* brow = B + kk * n;
        T* orow = O + i * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  if (recording<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    auto* oi = out.impl().get();
    attach(out, "matmul_bc", {ai, bi}, [ai, bi, oi, C, m, k, n]() {
      for (int c = 0; c < C; ++c) {
        const T* G = oi->grad.data() + int64_t(c) * m * n;
        if (ai->requires_grad) {
          ai->ensure_grad();
          const T* B = bi->data.data() + int64_t(c) * k * n;
          T* GA = ai->grad.data() + int64_t(c) * m * k;
          // dA = G * B^T
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              T acc = T(0);
              const T* grow = G + i * n;
              const T* brow = B + kk * n;
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              GA[i * k + kk] += acc;
            }
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          const T* A = ai->data.data() + int64_t(c) * m * k;
          T* GB = bi->grad.data() + int64_t(c) * k * n;
          // dB = A^T * G
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              const T av = A[i * k + kk];
              const T* grow = G + i * n;
              T* gbrow = GB + kk * n;
              for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> add_col(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || b.dim(2) != 1)
    fail(ErrorCode::Dimension,
         "add_col: incompatible shapes " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  const int C = a.dim(0), m = a.dim(1), n = a.dim(2);
  TensorT<T> out(a.shape());
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < m; ++i) {
      const T bv = b.data()[c * m + i];
      const T* arow = a.data() + (int64_t(c) * m + i) * n;
      T* orow = out.data() + (int64_t(c) * m + i) * n;
      for (int j = 0; j < n; ++j) orow[j] = arow[j] + bv;
    }
  if (recording<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    auto* oi = out.impl().get();
    attach(out, "add_col", {ai, bi}, [ai, bi, oi, C, m, n]() {
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < m; ++i) {
            T acc = T(0);
            const T* grow = oi->grad.data() + (int64_t(c) * m + i) * n;
            for (int j = 0; j < n; ++j) acc += grow[j];
            bi->grad[c * m + i] += acc;
          }
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mul_col(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || b.dim(2) != 1)
    fail(ErrorCode::Dimension,
         "mul_col: incompatible shapes " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const int C = a.dim(0), m = a.dim(1), n = a.dim(2);
  TensorT<T> out(a.shape());
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < m; ++i) {
      const T bv = b.data()[c * m + i];
      const T* arow = a.data() + (int64_t(c) * m + i) * n;
      T* orow = out.data() + (int64_t(c) * m + i) * n;
      for (int j = 0; j < n; ++j) orow[j] = arow[j] * bv;
    }
  if (recording<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    auto* oi = out.impl().get();
    attach(out, "mul_col", {ai, bi}, [ai, bi, oi, C, m, n]() {
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < m; ++i) {
          const int64_t base = (int64_t(c) * m + i) * n;
          const T* grow = oi->grad.data() + base;
          if (ai->requires_grad) {
            ai->ensure_grad();
            const T bv = bi->data[c * m + i];
            T* garow = ai->grad.data() + base;
            for (int j = 0; j < n; ++j) garow[j] += grow[j] * bv;
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            T acc = T(0);
            const T* arow = ai->data.data() + base;
            for (int j = 0; j < n; ++j) acc += grow[j] * arow[j];
            bi->grad[c * m + i] += acc;
          }
        }
    });
  }
  return out;
}

// --- layout -------------------------------------------------------------------

template <typename T>
TensorT<T> channels_to_rows(const TensorT<T>& x) {
  if (x.ndim() != 4) fail(ErrorCode::Dimension, "channels_to_rows expects an NCHW tensor");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t hw = int64_t(H) * W;
  TensorT<T> out(Shape{C, 1, int(N * hw)});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      std::memcpy(out.data() + (int64_t(c) * N + n) * hw, x.data() + (int64_t(n) * C + c) * hw,
                  sizeof(T) * hw);
  if (recording<T>({&x})) {
    auto xi = x.impl();
    auto* oi = out.impl().get();
    attach(out, "channels_to_rows", {xi}, [xi, oi, N, C, hw]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T* g = oi->grad.data() + (int64_t(c) * N + n) * hw;
          T* gx = xi->grad.data() + (int64_t(n) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) gx[i] += g[i];
        }
    });
  }
  return out;
}

template <typename T>
TensorT<T> rows_to_channels(const TensorT<T>& x, int n, int h, int w) {
  if (x.ndim() != 3 || x.dim(1) != 1 || x.dim(2) != int64_t(n) * h * w)
    fail(ErrorCode::Dimension, "rows_to_channels: shape " + shape_str(x.shape()) +
                                   " incompatible with n=" + std::to_string(n));
  const int C = x.dim(0);
  const int64_t hw = int64_t(h) * w;
  TensorT<T> out(Shape{n, C, h, w});
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < C; ++c)
      std::memcpy(out.data() + (int64_t(b) * C + c) * hw, x.data() + (int64_t(c) * n + b) * hw,
                  sizeof(T) * hw);
  if (recording<T>({&x})) {
    auto xi = x.impl();
    auto* oi = out.impl().get();
    attach(out, "rows_to_channels", {xi}, [xi, oi, n, C, hw]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < C; ++c) {
          const T* g = oi->grad.data() + (int64_t(b) * C + c) * hw;
          T* gx = xi->grad.data() + (int64_t(c) * n + b) * hw;
          for (int64_t i = 0; i < hw; ++i) gx[i] += g[i];
        }
    });
  }
  return out;
}

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& x, int begin, int end) {
  if (x.ndim() != 4) fail(ErrorCode::Dimension, "slice_channels expects an NCHW tensor");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (begin < 0 || end > C || begin >= end)
    fail(ErrorCode::Dimension, "slice_channels: bad channel range [" + std::to_string(begin) +
                                   "," + std::to_string(end) + ") for C=" + std::to_string(C));
  const int Cs = end - begin;
  const int64_t hw = int64_t(H) * W;
  TensorT<T> out(Shape{N, Cs, H, W});
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + int64_t(n) * Cs * hw, x.data() + (int64_t(n) * C + begin) * hw,
                sizeof(T) * Cs * hw);
  if (recording<T>({&x})) {
    auto xi = x.impl();
    auto* oi = out.impl().get();
    attach(out, "slice_channels", {xi}, [xi, oi, N, C, Cs, begin, hw]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int n = 0; n < N; ++n) {
        const T* g = oi->grad.data() + int64_t(n) * Cs * hw;
        T* gx = xi->grad.data() + (int64_t(n) * C + begin) * hw;
        for (int64_t i = 0; i < Cs * hw; ++i) gx[i] += g[i];
      }
    });
  }
  return out;
}

// --- convolution ----------------------------------------------------------------

namespace {

// col has (C*k*k) rows of length Ho*Wo
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* col) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        T* dst = col + (int64_t((c * k + u) * k + v)) * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
          const int hi = i * s - p + u;
          T* drow = dst + int64_t(i) * Wo;
          if (hi < 0 || hi >= H) {
            std::fill(drow, drow + Wo, T(0));
            continue;
          }
          const T* src = x + (int64_t(c) * H + hi) * W;
          for (int j = 0; j < Wo; ++j) {
            const int wj = j * s - p + v;
            drow[j] = (wj >= 0 && wj < W) ? src[wj] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int s, int p, int Ho, int Wo, T* x) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < k; ++u)
      for (int v = 0; v < k; ++v) {
        const T* src = col + (int64_t((c * k + u) * k + v)) * Ho * Wo;
        for (int i = 0; i < Ho; ++i) {
          const int hi = i * s - p + u;
          if (hi < 0 || hi >= H) continue;
          T* dst = x + (int64_t(c) * H + hi) * W;
          const T* srow = src + int64_t(i) * Wo;
          for (int j = 0; j < Wo; ++j) {
            const int wj = j * s - p + v;
            if (wj >= 0 && wj < W) dst[wj] += srow[j];
          }
        }
      }
}

// C(MxN) += A(MxK) * B(KxN); axpy ordering, unrolled by 4 on K
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + int64_t(M) * N, T(0));
  for (int i = 0; i < M; ++i) {
    const T* a = A + int64_t(i) * K;
    T* c = C + int64_t(i) * N;
    int kk = 0;
    for (; kk + 4 <= K; kk += 4) {
      const T a0 = a[kk], a1 = a[kk + 1], a2 = a[kk + 2], a3 = a[kk + 3];
      const T* b0 = B + int64_t(kk) * N;
      const T* b1 = b0 + N;
      const T* b2 = b1 + N;
      const T* b3 = b2 + N;
      for (int j = 0; j < N; ++j) c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; kk < K; ++kk) {
      const T av = a[kk];
      const T* b = B + int64_t(kk) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C(MxN) += A^T where A is (KxM); B is (KxN)
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + int64_t(M) * N, T(0));
  for (int kk = 0; kk < K; ++kk) {
    const T* a = A + int64_t(kk) * M;
    const T* b = B + int64_t(kk) * N;
    for (int i = 0; i < M; ++i) {
      const T av = a[i];
      T* c = C + int64_t(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C(MxN) += A(MxK) * B^T where B is (NxK); dot-product ordering
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate) {
  for (int i = 0; i < M; ++i) {
    const T* a = A + int64_t(i) * K;
    T* c = C + int64_t(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* b = B + int64_t(j) * K;
      T acc = T(0);
      for (int kk = 0; kk < K; ++kk) acc += a[kk] * b[kk];
      if (accumulate)
        c[j] += acc;
      else
        c[j] = acc;
    }
  }
}

void check_conv_args(int k, int stride, int H, int pad, const char* op) {
  if (k % 2 == 0) fail(ErrorCode::Contract, std::string(op) + ": kernel size must be odd");
  if (stride != 1 && stride != 2) fail(ErrorCode::Contract, std::string(op) + ": stride must be 1 or 2");
  if (H + 2 * pad < k)
    fail(ErrorCode::Dimension, std::string(op) + ": spatial extent " + std::to_string(H) +
                                   " too small for kernel " + std::to_string(k));
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad) {
  if (x.ndim() != 4) fail(ErrorCode::Dimension, "conv2d: input axis count must be 4 (NCHW)");
  if (w.ndim() != 4) fail(ErrorCode::Dimension, "conv2d: weight axis count must be 4");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    fail(ErrorCode::Dimension, "conv2d: channel axis mismatch, input has " + std::to_string(Cin) +
                                   " channels but weight expects " + std::to_string(w.dim(1)));
  if (w.dim(3) != k) fail(ErrorCode::Dimension, "conv2d: kernel must be square");
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != Cout))
    fail(ErrorCode::Dimension, "conv2d: bias axis must have " + std::to_string(Cout) + " entries");
  check_conv_args(k, stride, std::min(H, W), pad, "conv2d");

  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  const int ckk = Cin * k * k;
  const int64_t hw_in = int64_t(H) * W;
  const int64_t hw_out = int64_t(Ho) * Wo;

  TensorT<T> out(Shape{N, Cout, Ho, Wo});
  std::vector<T> col(size_t(ckk) * hw_out);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + int64_t(n) * Cin * hw_in, Cin, H, W, k, stride, pad, Ho, Wo, col.data());
    T* on = out.data() + int64_t(n) * Cout * hw_out;
    gemm_nn(Cout, int(hw_out), ckk, w.data(), col.data(), on, false);
    if (b.defined())
      for (int c = 0; c < Cout; ++c) {
        const T bv = b.data()[c];
        T* row = on + int64_t(c) * hw_out;
        for (int64_t j = 0; j < hw_out; ++j) row[j] += bv;
      }
  }

  if (recording<T>({&x, &w, &b})) {
    auto xi = x.impl(), wi = w.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    auto* oi = out.impl().get();
    std::vector<std::shared_ptr<TensorImplT<T>>> parents{xi, wi};
    if (bi) parents.push_back(bi);
    attach(out, "conv2d", std::move(parents),
           [xi, wi, bi, oi, N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, ckk, hw_in, hw_out]() {
             std::vector<T> col(size_t(ckk) * hw_out);
             std::vector<T> colg;
             if (xi->requires_grad) {
               xi->ensure_grad();
               colg.resize(size_t(ckk) * hw_out);
             }
             if (wi->requires_grad) wi->ensure_grad();
             for (int n = 0; n < N; ++n) {
               const T* g = oi->grad.data() + int64_t(n) * Cout * hw_out;
               if (wi->requires_grad || xi->requires_grad)
                 im2col(xi->data.data() + int64_t(n) * Cin * hw_in, Cin, H, W, k, stride, pad, Ho,
                        Wo, col.data());
               if (wi->requires_grad)
                 gemm_nt(Cout, ckk, int(hw_out), g, col.data(), wi->grad.data(), true);
               if (xi->requires_grad) {
                 gemm_tn(ckk, int(hw_out), Cout, wi->data.data(), g, colg.data(), false);
                 col2im_add(colg.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                            xi->grad.data() + int64_t(n) * Cin * hw_in);
               }
             }
             if (bi && bi->requires_grad) {
               bi->ensure_grad();
               for (int n = 0; n < N; ++n)
                 for (int c = 0; c < Cout; ++c) {
                   const T* g = oi->grad.data() + (int64_t(n) * Cout + c) * hw_out;
                   T acc = T(0);
                   for (int64_t j = 0; j < hw_out; ++j) acc += g[j];
                   bi->grad[c] += acc;
                 }
             }
           });
  }
  return out;
}

template <typename T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                            int stride, int pad, int out_pad) {
  if (x.ndim() != 4) fail(ErrorCode::Dimension, "conv_transpose2d: input axis count must be 4");
  if (w.ndim() != 4) fail(ErrorCode::Dimension, "conv_transpose2d: weight axis count must be 4");
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(1), k = w.dim(2);
  if (w.dim(0) != Ci)
    fail(ErrorCode::Dimension, "conv_transpose2d: channel axis mismatch, input has " +
                                   std::to_string(Ci) + " channels but weight expects " +
                                   std::to_string(w.dim(0)));
  if (out_pad < 0 || out_pad >= stride)
    fail(ErrorCode::Contract, "conv_transpose2d: out_pad must be below stride");
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != Co))
    fail(ErrorCode::Dimension, "conv_transpose2d: bias axis must have " + std::to_string(Co) + " entries");
  if (k % 2 == 0) fail(ErrorCode::Contract, "conv_transpose2d: kernel size must be odd");
  if (stride != 1 && stride != 2) fail(ErrorCode::Contract, "conv_transpose2d: stride must be 1 or 2");

  const int Ho = (H - 1) * stride - 2 * pad + k + out_pad;
  const int Wo = (W - 1) * stride - 2 * pad + k + out_pad;
  if (Ho <= 0 || Wo <= 0) fail(ErrorCode::Dimension, "conv_transpose2d: empty output");
  const int ckk = Co * k * k;
  const int64_t hw_in = int64_t(H) * W;
  const int64_t hw_out = int64_t(Ho) * Wo;

  TensorT<T> out(Shape{N, Co, Ho, Wo});
  std::vector<T> col(size_t(ckk) * hw_in);
  for (int n = 0; n < N; ++n) {
    // scatter: out = col2im(W^T x)
    gemm_tn(ckk, int(hw_in), Ci, w.data(), x.data() + int64_t(n) * Ci * hw_in, col.data(), false);
    T* on = out.data() + int64_t(n) * Co * hw_out;
    col2im_add(col.data(), Co, Ho, Wo, k, stride, pad, H, W, on);
    if (b.defined())
      for (int c = 0; c < Co; ++c) {
        const T bv = b.data()[c];
        T* row = on + int64_t(c) * hw_out;
        for (int64_t j = 0; j < hw_out; ++j) row[j] += bv;
      }
  }

  if (recording<T>({&x, &w, &b})) {
    auto xi = x.impl(), wi = w.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    auto* oi = out.impl().get();
    std::vector<std::shared_ptr<TensorImplT<T>>> parents{xi, wi};
    if (bi) parents.push_back(bi);
    attach(out, "conv_transpose2d", std::move(parents),
           [xi, wi, bi, oi, N, Ci, H, W, Co, k, stride, pad, Ho, Wo, ckk, hw_in, hw_out]() {
             std::vector<T> colg(size_t(ckk) * hw_in);
             if (xi->requires_grad) xi->ensure_grad();
             if (wi->requires_grad) wi->ensure_grad();
             for (int n = 0; n < N; ++n) {
               const T* g = oi->grad.data() + int64_t(n) * Co * hw_out;
               // dX = conv2d(g, w): im2col over the gradient image
               im2col(g, Co, Ho, Wo, k, stride, pad, H, W, colg.data());
               if (xi->requires_grad)
                 gemm_nn(Ci, int(hw_in), ckk, wi->data.data(), colg.data(),
                         xi->grad.data() + int64_t(n) * Ci * hw_in, true);
               if (wi->requires_grad)
                 gemm_nt(Ci, ckk, int(hw_in), xi->data.data() + int64_t(n) * Ci * hw_in,
                         colg.data(), wi->grad.data(), true);
             }
             if (bi && bi->requires_grad) {
               bi->ensure_grad();
               for (int n = 0; n < N; ++n)
                 for (int c = 0; c < Co; ++c) {
                   const T* g = oi->grad.data() + (int64_t(n) * Co + c) * hw_out;
                   T acc = T(0);
                   for (int64_t j = 0; j < hw_out; ++j) acc += g[j];
                   bi->grad[c] += acc;
                 }
             }
           });
  }
  return out;
}

// --- GDN --------------------------------------------------------------------------

template <typename T>
TensorT<T> gdn(const TensorT<T>& x, const TensorT<T>& beta_raw, const TensorT<T>& gamma_raw,
               bool inverse) {
  if (x.ndim() != 4) fail(ErrorCode::Dimension, "gdn: input axis count must be 4");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (beta_raw.ndim() != 1 || beta_raw.dim(0) != C)
    fail(ErrorCode::Dimension, "gdn: beta must have one entry per channel");
  if (gamma_raw.ndim() != 2 || gamma_raw.dim(0) != C || gamma_raw.dim(1) != C)
    fail(ErrorCode::Dimension, "gdn: gamma must be CxC");
  constexpr T kBetaMin = T(1e-6);
  const int64_t hw = int64_t(H) * W;

  std::vector<T> beta(C), gamma(size_t(C) * C);
  for (int i = 0; i < C; ++i) {
    beta[i] = beta_raw.data()[i] * beta_raw.data()[i] + kBetaMin;
    if (!(beta[i] > T(0)))
      fail(ErrorCode::Parameterization, "gdn: effective beta must be positive");
  }
  for (size_t i = 0; i < gamma.size(); ++i) gamma[i] = gamma_raw.data()[i] * gamma_raw.data()[i];

  TensorT<T> out(x.shape());
  // norm = beta + gamma * x^2, cached for backward
  auto norm = std::make_shared<std::vector<T>>(size_t(N) * C * hw);
  std::vector<T> x2(size_t(C) * hw);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.data() + int64_t(n) * C * hw;
    T* nn = norm->data() + int64_t(n) * C * hw;
    for (int64_t i = 0; i < int64_t(C) * hw; ++i) x2[i] = xn[i] * xn[i];
    gemm_nn(C, int(hw), C, gamma.data(), x2.data(), nn, false);
    for (int c = 0; c < C; ++c) {
      const T bv = beta[c];
      T* row = nn + int64_t(c) * hw;
      for (int64_t j = 0; j < hw; ++j) row[j] += bv;
    }
    T* on = out.data() + int64_t(n) * C * hw;
    if (inverse)
      for (int64_t i = 0; i < int64_t(C) * hw; ++i) on[i] = xn[i] * std::sqrt(nn[i]);
    else
      for (int64_t i = 0; i < int64_t(C) * hw; ++i) on[i] = xn[i] / std::sqrt(nn[i]);
  }

  if (recording<T>({&x, &beta_raw, &gamma_raw})) {
    auto xi = x.impl(), bi = beta_raw.impl(), gi = gamma_raw.impl();
    auto* oi = out.impl().get();
    attach(out, "gdn", {xi, bi, gi}, [xi, bi, gi, oi, norm, N, C, hw, inverse]() {
      std::vector<T> gamma(size_t(C) * C), dnorm(size_t(C) * hw), x2(size_t(C) * hw);
      std::vector<T> dgamma(size_t(C) * C, T(0));
      std::vector<T> dbeta(C, T(0));
      for (size_t i = 0; i < gamma.size(); ++i) gamma[i] = gi->data[i] * gi->data[i];
      const bool need_x = xi->requires_grad;
      if (need_x) xi->ensure_grad();
      std::vector<T> tmp(need_x ? size_t(C) * hw : 0);
      for (int n = 0; n < N; ++n) {
        const T* xn = xi->data.data() + int64_t(n) * C * hw;
        const T* nn = norm->data() + int64_t(n) * C * hw;
        const T* g = oi->grad.data() + int64_t(n) * C * hw;
        // dL/dnorm
        for (int64_t i = 0; i < int64_t(C) * hw; ++i) {
          const T nv = nn[i];
          if (inverse)
            dnorm[i] = g[i] * xn[i] * T(0.5) / std::sqrt(nv);
          else
            dnorm[i] = g[i] * xn[i] * T(-0.5) / (nv * std::sqrt(nv));
          x2[i] = xn[i] * xn[i];
        }
        for (int c = 0; c < C; ++c) {
          const T* row = dnorm.data() + int64_t(c) * hw;
          T acc = T(0);
          for (int64_t j = 0; j < hw; ++j) acc += row[j];
          dbeta[c] += acc;
        }
        gemm_nt(C, C, int(hw), dnorm.data(), x2.data(), dgamma.data(), true);
        if (need_x) {
          gemm_tn(C, int(hw), C, gamma.data(), dnorm.data(), tmp.data(), false);
          T* gx = xi->grad.data() + int64_t(n) * C * hw;
          if (inverse)
            for (int64_t i = 0; i < int64_t(C) * hw; ++i)
              gx[i] += g[i] * std::sqrt(nn[i]) + T(2) * xn[i] * tmp[i];
          else
            for (int64_t i = 0; i < int64_t(C) * hw; ++i)
              gx[i] += g[i] / std::sqrt(nn[i]) + T(2) * xn[i] * tmp[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int c = 0; c < C; ++c) bi->grad[c] += dbeta[c] * T(2) * bi->data[c];
      }
      if (gi->requires_grad) {
        gi->ensure_grad();
        for (size_t i = 0; i < gamma.size(); ++i) gi->grad[i] += dgamma[i] * T(2) * gi->data[i];
      }
    });
  }
  return out;
}

// --- pooling ----------------------------------------------------------------------

template <typename T>
TensorT<T> avg_pool2(const TensorT<T>& x) {
  if (x.ndim() != 4) fail(ErrorCode::Dimension, "avg_pool2 expects an NCHW tensor");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / 2, Wo = W / 2;
  if (Ho == 0 || Wo == 0) fail(ErrorCode::Dimension, "avg_pool2: input too small");
  TensorT<T> out(Shape{N, C, Ho, Wo});
  for (int nc = 0; nc < N * C; ++nc) {
    const T* in = x.data() + int64_t(nc) * H * W;
    T* o = out.data() + int64_t(nc) * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        const T* p = in + (2 * i) * W + 2 * j;
        o[i * Wo + j] = (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
      }
  }
  if (recording<T>({&x})) {
    auto xi = x.impl();
    auto* oi = out.impl().get();
    attach(out, "avg_pool2", {xi}, [xi, oi, N, C, H, W, Ho, Wo]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (int nc = 0; nc < N * C; ++nc) {
        const T* g = oi->grad.data() + int64_t(nc) * Ho * Wo;
        T* gx = xi->grad.data() + int64_t(nc) * H * W;
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            const T gv = g[i * Wo + j] * T(0.25);
            T* p = gx + (2 * i) * W + 2 * j;
            p[0] += gv;
            p[1] += gv;
            p[W] += gv;
            p[W + 1] += gv;
          }
      }
    });
  }
  return out;
}

// --- Gaussian bin probability --------------------------------------------------------

double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865476); }
double norm_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014327; }

double norm_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorCode::Numeric, "norm_quantile: p must be in (0,1)");
  // Acklam's rational approximation
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01, -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  // one Newton refinement
  const double err = norm_cdf(x) - p;
  const double pdf = norm_pdf(x);
  if (pdf > 0.0) x -= err / pdf;
  return x;
}

template <typename T>
TensorT<T> gauss_bin_prob(const TensorT<T>& v, const TensorT<T>& scales, const TensorT<T>& means) {
  check_same_shape(v, scales, "gauss_bin_prob");
  if (means.defined()) check_same_shape(v, means, "gauss_bin_prob");
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i)
    if (!(scales.data()[i] > T(0)))
      fail(ErrorCode::Numeric, "gauss_bin_prob: scales must be positive");
  TensorT<T> out(v.shape());
  for (int64_t i = 0; i < n; ++i) {
    const double mu = means.defined() ? double(means.data()[i]) : 0.0;
    const double s = double(scales.data()[i]);
    const double z = double(v.data()[i]) - mu;
    out.data()[i] = static_cast<T>(norm_cdf((z + 0.5) / s) - norm_cdf((z - 0.5) / s));
  }
  if (recording<T>({&v, &scales, &means})) {
    auto vi = v.impl(), si = scales.impl();
    auto mi = means.defined() ? means.impl() : nullptr;
    auto* oi = out.impl().get();
    std::vector<std::shared_ptr<TensorImplT<T>>> parents{vi, si};
    if (mi) parents.push_back(mi);
    attach(out, "gauss_bin_prob", std::move(parents), [vi, si, mi, oi]() {
      const size_t n = vi->data.size();
      const bool need_v = vi->requires_grad, need_s = si->requires_grad,
                 need_m = mi && mi->requires_grad;
      if (need_v) vi->ensure_grad();
      if (need_s) si->ensure_grad();
      if (need_m) mi->ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const double g = double(oi->grad[i]);
        if (g == 0.0) continue;
        const double mu = mi ? double(mi->data[i]) : 0.0;
        const double s = double(si->data[i]);
        const double z = double(vi->data[i]) - mu;
        const double hi = (z + 0.5) / s, lo = (z - 0.5) / s;
        const double phi_hi = norm_pdf(hi), phi_lo = norm_pdf(lo);
        const double dv = (phi_hi - phi_lo) / s;
        if (need_v) vi->grad[i] += static_cast<T>(g * dv);
        if (need_m) mi->grad[i] -= static_cast<T>(g * dv);
        if (need_s) si->grad[i] -= static_cast<T>(g * (phi_hi * hi - phi_lo * lo) / s);
      }
    });
  }
  return out;
}

// --- backward -----------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail(ErrorCode::Contract, "backward requires a scalar loss tensor");
  using ImplPtr = TensorImplT<T>*;
  std::vector<ImplPtr> order;
  std::unordered_set<ImplPtr> seen;
  // iterative postorder DFS: parents first
  std::vector<std::pair<ImplPtr, size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      ImplPtr parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto* root = loss.impl().get();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->grad_fn) (*it)->grad_fn();
}

template <typename T>
bool all_finite(const TensorT<T>& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(double(t.data()[i]))) return false;
  return true;
}

template <typename T>
const char* first_nonfinite_op(const TensorT<T>& root) {
  using ImplPtr = TensorImplT<T>*;
  std::vector<ImplPtr> order;
  std::unordered_set<ImplPtr> seen;
  std::vector<std::pair<ImplPtr, size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  seen.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      ImplPtr parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (ImplPtr node : order) {
    for (const T v : node->data)
      if (!std::isfinite(double(v))) return node->op_name;
  }
  return nullptr;
}

// --- Adam -------------------------------------------------------------------------

void adam_step(std::vector<Tensor>& params, std::vector<AdamState>& states, float lr,
               const AdamConfig& cfg) {
  if (states.size() != params.size()) states.resize(params.size());
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p];
    AdamState& st = states[p];
    if (!t.has_grad() || t.grad_vec().size() != t.vec().size())
      fail(ErrorCode::Contract, "adam_step: parameter is missing its gradient");
    const size_t n = t.vec().size();
    if (st.m.size() != n) {
      st.m.assign(n, 0.0f);
      st.v.assign(n, 0.0f);
      st.step = 0;
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(double(cfg.beta1), double(st.step));
    const double bc2 = 1.0 - std::pow(double(cfg.beta2), double(st.step));
    float* x = t.data();
    const float* g = t.grad();
    for (size_t i = 0; i < n; ++i) {
      st.m[i] = cfg.beta1 * st.m[i] + (1.0f - cfg.beta1) * g[i];
      st.v[i] = cfg.beta2 * st.v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      const double mhat = double(st.m[i]) / bc1;
      const double vhat = double(st.v[i]) / bc2;
      x[i] -= static_cast<float>(double(lr) * mhat / (std::sqrt(vhat) + double(cfg.eps)));
    }
  }
}

float clip_grad_norm(std::vector<Tensor>& params, float max_norm) {
  double sq = 0.0;
  for (auto& t : params) {
    if (!t.has_grad()) continue;
    for (const float g : t.grad_vec()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > double(max_norm) && norm > 0.0) {
    const float scale = static_cast<float>(double(max_norm) / norm);
    for (auto& t : params)
      for (auto& g : t.grad_vec()) g *= scale;
  }
  return static_cast<float>(norm);
}

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::Dimension: return "dimension";
    case ErrorCode::Contract: return "contract";
    case ErrorCode::Parameterization: return "parameterization";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Format: return "format";
    case ErrorCode::ModelMismatch: return "model_mismatch";
    case ErrorCode::CorruptStream: return "corrupt_stream";
    case ErrorCode::Capacity: return "capacity";
    case ErrorCode::Io: return "io";
    case ErrorCode::Dataset: return "dataset";
    case ErrorCode::MissingExecutable: return "missing_executable";
    case ErrorCode::CodecRun: return "codec_run";
    case ErrorCode::Timeout: return "timeout";
    case ErrorCode::Internal: return "internal";
  }
  return "unknown";
}

// --- explicit instantiations ---------------------------------------------------------

#define NZC_INSTANTIATE(T)                                                                   \
  template class TensorT<T>;                                                                 \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                             \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                             \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                             \
  template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);                             \
  template TensorT<T> add_scalar(const TensorT<T>&, T);                                      \
  template TensorT<T> mul_scalar(const TensorT<T>&, T);                                      \
  template TensorT<T> relu(const TensorT<T>&);                                               \
  template TensorT<T> abs_op(const TensorT<T>&);                                             \
  template TensorT<T> tanh_op(const TensorT<T>&);                                            \
  template TensorT<T> sigmoid(const TensorT<T>&);                                            \
  template TensorT<T> softplus(const TensorT<T>&);                                           \
  template TensorT<T> log_op(const TensorT<T>&);                                             \
  template TensorT<T> pow_scalar(const TensorT<T>&, T);                                      \
  template TensorT<T> sum(const TensorT<T>&);                                                \
  template TensorT<T> mean(const TensorT<T>&);                                               \
  template TensorT<T> lower_bound(const TensorT<T>&, T);                                     \
  template TensorT<T> add_uniform_noise(const TensorT<T>&, Rng&);                            \
  template TensorT<T> matmul_bc(const TensorT<T>&, const TensorT<T>&);                       \
  template TensorT<T> add_col(const TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> mul_col(const TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> channels_to_rows(const TensorT<T>&);                                   \
  template TensorT<T> rows_to_channels(const TensorT<T>&, int, int, int);                    \
  template TensorT<T> slice_channels(const TensorT<T>&, int, int);                           \
  template TensorT<T> conv2d(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, int,   \
                             int);                                                           \
  template TensorT<T> conv_transpose2d(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, \
                                       int, int, int);                                       \
  template TensorT<T> gdn(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, bool);    \
  template TensorT<T> avg_pool2(const TensorT<T>&);                                          \
  template TensorT<T> gauss_bin_prob(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&); \
  template void backward(const TensorT<T>&);                                                 \
  template bool all_finite(const TensorT<T>&);                                               \
  template const char* first_nonfinite_op(const TensorT<T>&);

NZC_INSTANTIATE(float)
NZC_INSTANTIATE(double)

#undef NZC_INSTANTIATE

}  // namespace nzc
