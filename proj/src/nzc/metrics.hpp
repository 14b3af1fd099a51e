#pragma once

// Image quality and rate metrics: MSE, PSNR over RGB, 5-scale MS-SSIM and
// bits per pixel.

#include "nzc/tensor.hpp"

namespace nzc {

// five dyadic scales with an 11-tap window must fit
constexpr int kMsSsimMinSide = 176;

double mse(const Tensor& a, const Tensor& b);
// 10*log10(1/mse) with peak 1.0 over the joint RGB channels; identical
// inputs give +infinity
double psnr(const Tensor& a, const Tensor& b);
// canonical 5-scale MS-SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01,
// K2=0.03, weights 0.0448/0.2856/0.3001/0.2363/0.1333), averaged over RGB;
// evaluated at 64-bit precision
double ms_ssim(const Tensor& a, const Tensor& b);
double bpp(double total_bits, int h, int w);

// Differentiable MS-SSIM used by the training objective (same constants as
// the metric, recorded on the float graph). `ref` is treated as constant.
Tensor ms_ssim_graph(const Tensor& a, const Tensor& ref);

}  // namespace nzc
