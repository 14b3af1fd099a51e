#include "nzc/metrics.hpp"

#include <cmath>
#include <limits>

namespace nzc {

namespace {

constexpr double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

template <typename T>
TensorT<T> gaussian_window(int channels) {
  constexpr int kTaps = 11;
  constexpr double kSigma = 1.5;
  double g[kTaps];
  double total = 0.0;
  for (int i = 0; i < kTaps; ++i) {
    const double d = i - (kTaps - 1) / 2.0;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    total += g[i];
  }
  for (double& v : g) v /= total;
  // depthwise blur expressed as a dense conv with zero cross-channel taps
  TensorT<T> w(Shape{channels, channels, kTaps, kTaps});
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < kTaps; ++i)
      for (int j = 0; j < kTaps; ++j)
        w.data()[((int64_t(c) * channels + c) * kTaps + i) * kTaps + j] =
            static_cast<T>(g[i] * g[j]);
  return w;
}

template <typename T>
TensorT<T> ms_ssim_value(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::Dimension, "ms_ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                                   shape_str(b.shape()));
  if (a.ndim() != 4) fail(ErrorCode::Dimension, "ms_ssim expects NCHW tensors");
  if (std::min(a.dim(2), a.dim(3)) < kMsSsimMinSide)
    fail(ErrorCode::InvalidArgument,
         "ms_ssim needs images of at least " + std::to_string(kMsSsimMinSide) +
             " pixels on the short side, got " + std::to_string(a.dim(2)) + "x" +
             std::to_string(a.dim(3)));
  const TensorT<T> window = gaussian_window<T>(a.dim(1));
  const TensorT<T> none;
  constexpr T kFloor = T(1e-6);

  TensorT<T> img1 = a, img2 = b, result;
  for (int scale = 0; scale < 5; ++scale) {
    TensorT<T> mu1 = conv2d(img1, window, none, 1, 0);
    TensorT<T> mu2 = conv2d(img2, window, none, 1, 0);
    TensorT<T> mu1_sq = mul(mu1, mu1);
    TensorT<T> mu2_sq = mul(mu2, mu2);
    TensorT<T> mu12 = mul(mu1, mu2);
    TensorT<T> sigma1 = sub(conv2d(mul(img1, img1), window, none, 1, 0), mu1_sq);
    TensorT<T> sigma2 = sub(conv2d(mul(img2, img2), window, none, 1, 0), mu2_sq);
    TensorT<T> sigma12 = sub(conv2d(mul(img1, img2), window, none, 1, 0), mu12);
    TensorT<T> cs = div(add_scalar(mul_scalar(sigma12, T(2)), T(kC2)),
                        add_scalar(add(sigma1, sigma2), T(kC2)));
    if (scale < 4) {
      TensorT<T> term = pow_scalar(lower_bound(mean(cs), kFloor), T(kWeights[scale]));
      result = result.defined() ? mul(result, term) : term;
      img1 = avg_pool2(img1);
      img2 = avg_pool2(img2);
    } else {
      TensorT<T> lum = div(add_scalar(mul_scalar(mu12, T(2)), T(kC1)),
                           add_scalar(add(mu1_sq, mu2_sq), T(kC1)));
      TensorT<T> term = pow_scalar(lower_bound(mean(mul(lum, cs)), kFloor), T(kWeights[4]));
      result = mul(result, term);
    }
  }
  return result;
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::Dimension,
         "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.data()[i]) - double(b.data()[i]);
    acc += d * d;
  }
  return acc / double(a.numel());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

double ms_ssim(const Tensor& a, const Tensor& b) {
  NoGradGuard ng;
  return ms_ssim_value<double>(a.cast<double>(), b.cast<double>()).item();
}

double bpp(double total_bits, int h, int w) {
  if (h <= 0 || w <= 0) fail(ErrorCode::InvalidArgument, "bpp: dimensions must be positive");
  return total_bits / (double(h) * double(w));
}

Tensor ms_ssim_graph(const Tensor& a, const Tensor& ref) {
  return ms_ssim_value<float>(a, ref.detached());
}

}  // namespace nzc
