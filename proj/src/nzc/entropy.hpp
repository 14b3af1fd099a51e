#pragma once

// Learned probability models over quantized latents: the fully factorized
// entropy bottleneck, the (mean-)scale Gaussian conditional, quantization
// helpers, rate estimation, and the integer CDF tables consumed by the
// range coder.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nzc/nn.hpp"
#include "nzc/tensor.hpp"

namespace nzc {

constexpr int kCdfPrecision = 16;
constexpr double kTailMass = 1e-9;
constexpr float kLikelihoodFloor = 1e-9f;

struct CdfRow {
  int32_t offset = 0;              // smallest in-support symbol value
  std::vector<uint32_t> cdf;       // cdf[0]=0 .. cdf[last]=2^precision; last slot is the escape
  int support() const { return static_cast<int>(cdf.size()) - 2; }
};

struct QuantizedCdfTable {
  int precision = kCdfPrecision;
  std::vector<CdfRow> rows;

  void validate() const;

  // Scales pmf (+ escape mass as the final slot) to 2^precision integer
  // counts: floor, largest-remainder distribution of the deficit (ties to
  // the lower index), zero slots raised to one with the surplus absorbed by
  // the most probable slot.
  static CdfRow make_row(const std::vector<double>& pmf, double escape_mass, int32_t offset,
                         int precision = kCdfPrecision);

  void serialize(std::vector<uint8_t>& out) const;
  static QuantizedCdfTable deserialize(const uint8_t* data, size_t size, size_t& cursor);
};

// Cumulative-density network: K composed monotone per-channel layers.
// Matrices pass through softplus, gains through tanh; layer widths follow
// the `filters` configuration.
template <typename T>
TensorT<T> density_logits(const std::vector<TensorT<T>>& mats,
                          const std::vector<TensorT<T>>& biases,
                          const std::vector<TensorT<T>>& gains, const TensorT<T>& x);

class EntropyBottleneck {
 public:
  EntropyBottleneck() = default;
  EntropyBottleneck(ParamStore& store, const std::string& prefix, int channels, Rng& rng);

  int channels() const { return channels_; }

  // per-element bin probability c(v+.5)-c(v-.5), floored; input NCHW
  Tensor likelihood(const Tensor& y) const;

  // c(t) evaluated in double for each channel at `count` samples per channel
  // (row-major C x count), no graph
  std::vector<double> cumulative(const std::vector<double>& samples, int count) const;

  // |c(q_lo)-tail| + |c(q_med)-1/2| + |c(q_hi)-(1-tail)| summed over channels;
  // differentiable w.r.t. the quantiles only
  Tensor aux_loss() const;

  // standalone quantile fit with a private Adam; returns the final loss
  float fit_quantiles(int steps, float lr);

  std::vector<float> medians() const;
  Tensor quantiles() const { return quantiles_; }

  QuantizedCdfTable build_tables() const;

 private:
  template <typename T>
  void detached_params(std::vector<TensorT<T>>& mats, std::vector<TensorT<T>>& biases,
                       std::vector<TensorT<T>>& gains) const;

  int channels_ = 0;
  std::vector<Tensor> mats_, biases_, gains_;
  Tensor quantiles_;  // (C,1,3): lower tail point, median, upper tail point
};

class GaussianConditional {
 public:
  // 64 log-spaced scales on [0.11, 256]
  static std::vector<float> default_scale_table();

  GaussianConditional() : GaussianConditional(default_scale_table()) {}
  explicit GaussianConditional(std::vector<float> scale_table);

  const std::vector<float>& scale_table() const { return table_; }
  float scale_min() const { return table_.front(); }

  // bin probability at v under N(means, scales^2), scales clamped to the
  // table minimum, result floored; means may be undefined
  Tensor likelihood(const Tensor& v, const Tensor& scales, const Tensor& means) const;

  // per-element row: smallest table entry >= scale (round-up; values above
  // the table maximum use the last row)
  std::vector<int32_t> scale_rows(const Tensor& scales) const;
  // the scale actually coded with for each element (table value of its row)
  Tensor quantized_scales(const Tensor& scales) const;

  QuantizedCdfTable build_tables() const;

 private:
  std::vector<float> table_;
};

// --- quantization ------------------------------------------------------------

// y + Uniform(-0.5, 0.5); training relaxation of rounding. rng == nullptr is
// a contract error (evaluation paths own no noise source).
Tensor quantize_noise(const Tensor& y, Rng* rng);
// round(y - means) as integer symbols; means may be undefined
std::vector<int32_t> quantize_symbols(const Tensor& y, const Tensor& means);
// round(y - means) + means as floats
Tensor quantize_dequantize(const Tensor& y, const Tensor& means);
// symbols + means back to floats
Tensor dequantize_symbols(const std::vector<int32_t>& symbols, const Shape& shape,
                          const Tensor& means);

// --- rate ---------------------------------------------------------------------

// sum of -log2(p) over all elements of all tensors, 64-bit accumulation
double estimate_bits(const std::vector<Tensor>& likelihoods);
// graph-recorded version used by the training loss
Tensor rate_bits_graph(const std::vector<Tensor>& likelihoods);

}  // namespace nzc
