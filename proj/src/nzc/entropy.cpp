#include "nzc/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nzc {

// --- QuantizedCdfTable ---------------------------------------------------------

void QuantizedCdfTable::validate() const {
  const uint32_t total = 1u << precision;
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.cdf.size() < 3)
      fail(ErrorCode::Contract, "cdf row " + std::to_string(r) + " too short");
    if (row.cdf.front() != 0 || row.cdf.back() != total)
      fail(ErrorCode::Contract, "cdf row " + std::to_string(r) + " must span [0, 2^precision]");
    for (size_t i = 0; i + 1 < row.cdf.size(); ++i) {
      if (row.cdf[i + 1] < row.cdf[i])
        fail(ErrorCode::Contract, "cdf row " + std::to_string(r) + " is decreasing");
      if (i + 1 < row.cdf.size() - 1 && row.cdf[i + 1] == row.cdf[i])
        fail(ErrorCode::Contract,
             "cdf row " + std::to_string(r) + " has a zero-frequency in-support symbol");
    }
  }
}

CdfRow QuantizedCdfTable::make_row(const std::vector<double>& pmf, double escape_mass,
                                   int32_t offset, int precision) {
  const int64_t total = int64_t(1) << precision;
  const size_t slots = pmf.size() + 1;  // + escape
  if (static_cast<int64_t>(slots) > total)
    fail(ErrorCode::Capacity, "cdf row support of " + std::to_string(pmf.size()) +
                                  " symbols exceeds 2^" + std::to_string(precision) + " capacity");
  std::vector<double> scaled(slots);
  for (size_t i = 0; i < pmf.size(); ++i) scaled[i] = std::max(0.0, pmf[i]) * double(total);
  scaled[slots - 1] = std::max(0.0, escape_mass) * double(total);

  std::vector<int64_t> counts(slots);
  std::vector<double> rem(slots);
  int64_t used = 0;
  for (size_t i = 0; i < slots; ++i) {
    counts[i] = static_cast<int64_t>(std::floor(scaled[i]));
    rem[i] = scaled[i] - double(counts[i]);
    used += counts[i];
  }
  int64_t deficit = total - used;
  if (deficit > 0) {
    std::vector<size_t> idx(slots);
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return rem[a] > rem[b]; });
    for (size_t k = 0; k < idx.size() && deficit > 0; ++k, --deficit) counts[idx[k]] += 1;
    // pathological pmfs (all remainders consumed) dump the rest on slot 0
    if (deficit > 0) counts[0] += deficit;
  }
  // floor-of-one, surplus taken from the most probable slot
  int64_t raised = 0;
  for (auto& c : counts)
    if (c == 0) {
      c = 1;
      ++raised;
    }
  if (deficit < 0) raised += -deficit;
  if (raised > 0) {
    const size_t top = static_cast<size_t>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
    counts[top] -= raised;
    if (counts[top] < 1)
      fail(ErrorCode::Capacity, "cdf row cannot absorb floor-of-one adjustments");
  }

  CdfRow row;
  row.offset = offset;
  row.cdf.resize(slots + 1);
  row.cdf[0] = 0;
  uint32_t acc = 0;
  for (size_t i = 0; i < slots; ++i) {
    acc += static_cast<uint32_t>(counts[i]);
    row.cdf[i + 1] = acc;
  }
  if (row.cdf.back() != (1u << precision))
    fail(ErrorCode::Internal, "cdf row total mismatch after renormalization");
  return row;
}

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t(v >> 8));
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}
uint16_t get_u16(const uint8_t* p) { return uint16_t(p[0]) | (uint16_t(p[1]) << 8); }
uint32_t get_u32(const uint8_t* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

}  // namespace

void QuantizedCdfTable::serialize(std::vector<uint8_t>& out) const {
  put_u32(out, static_cast<uint32_t>(rows.size()));
  for (const auto& row : rows) {
    put_u32(out, static_cast<uint32_t>(row.offset));
    if (row.cdf.size() > 0xffff) fail(ErrorCode::Capacity, "cdf row too long to serialize");
    put_u16(out, static_cast<uint16_t>(row.cdf.size()));
    for (uint32_t v : row.cdf) put_u32(out, v);
  }
}

QuantizedCdfTable QuantizedCdfTable::deserialize(const uint8_t* data, size_t size,
                                                 size_t& cursor) {
  auto need = [&](size_t n) {
    if (cursor + n > size) fail(ErrorCode::CorruptStream, "cdf table truncated");
  };
  QuantizedCdfTable table;
  need(4);
  const uint32_t count = get_u32(data + cursor);
  cursor += 4;
  table.rows.resize(count);
  for (auto& row : table.rows) {
    need(6);
    row.offset = static_cast<int32_t>(get_u32(data + cursor));
    cursor += 4;
    const uint16_t len = get_u16(data + cursor);
    cursor += 2;
    need(size_t(len) * 4);
    row.cdf.resize(len);
    for (auto& v : row.cdf) {
      v = get_u32(data + cursor);
      cursor += 4;
    }
  }
  table.validate();
  return table;
}

// --- density network ------------------------------------------------------------

template <typename T>
TensorT<T> density_logits(const std::vector<TensorT<T>>& mats,
                          const std::vector<TensorT<T>>& biases,
                          const std::vector<TensorT<T>>& gains, const TensorT<T>& x) {
  TensorT<T> h = x;
  const size_t layers = mats.size();
  for (size_t k = 0; k < layers; ++k) {
    h = matmul_bc(softplus(mats[k]), h);
    h = add_col(h, biases[k]);
    if (k + 1 < layers) h = add(h, mul_col(tanh_op(h), tanh_op(gains[k])));
  }
  return h;
}

template TensorT<float> density_logits(const std::vector<TensorT<float>>&,
                                       const std::vector<TensorT<float>>&,
                                       const std::vector<TensorT<float>>&,
                                       const TensorT<float>&);
template TensorT<double> density_logits(const std::vector<TensorT<double>>&,
                                        const std::vector<TensorT<double>>&,
                                        const std::vector<TensorT<double>>&,
                                        const TensorT<double>&);

// --- EntropyBottleneck ------------------------------------------------------------

namespace {
constexpr int kDensityFilters[] = {3, 3, 3};
constexpr double kInitScale = 10.0;
}  // namespace

EntropyBottleneck::EntropyBottleneck(ParamStore& store, const std::string& prefix, int channels,
                                     Rng& rng)
    : channels_(channels) {
  const int K = static_cast<int>(std::size(kDensityFilters)) + 1;
  std::vector<int> widths;
  widths.push_back(1);
  for (int f : kDensityFilters) widths.push_back(f);
  widths.push_back(1);
  const double scale = std::pow(kInitScale, 1.0 / double(K));
  for (int k = 0; k < K; ++k) {
    const int d = widths[k + 1], r = widths[k];
    const float init = static_cast<float>(std::log(std::expm1(1.0 / scale / double(d))));
    Tensor m = Tensor::full(Shape{channels, d, r}, init);
    Tensor b = Tensor::uniform(Shape{channels, d, 1}, rng, -0.5f, 0.5f);
    mats_.push_back(store.add(prefix + ".matrix" + std::to_string(k), m));
    biases_.push_back(store.add(prefix + ".bias" + std::to_string(k), b));
    if (k + 1 < K)
      gains_.push_back(
          store.add(prefix + ".gain" + std::to_string(k), Tensor::zeros(Shape{channels, d, 1})));
  }
  Tensor q = Tensor::zeros(Shape{channels, 1, 3});
  for (int c = 0; c < channels; ++c) {
    q.data()[c * 3 + 0] = -static_cast<float>(kInitScale);
    q.data()[c * 3 + 1] = 0.0f;
    q.data()[c * 3 + 2] = static_cast<float>(kInitScale);
  }
  quantiles_ = store.add(prefix + ".quantiles", q);
}

template <typename T>
void EntropyBottleneck::detached_params(std::vector<TensorT<T>>& mats,
                                        std::vector<TensorT<T>>& biases,
                                        std::vector<TensorT<T>>& gains) const {
  for (const auto& m : mats_) mats.push_back(m.template cast<T>());
  for (const auto& b : biases_) biases.push_back(b.template cast<T>());
  for (const auto& g : gains_) gains.push_back(g.template cast<T>());
}

Tensor EntropyBottleneck::likelihood(const Tensor& y) const {
  if (y.ndim() != 4 || y.dim(1) != channels_)
    fail(ErrorCode::Dimension, "entropy bottleneck expects " + std::to_string(channels_) +
                                   " channels, got " + shape_str(y.shape()));
  const int N = y.dim(0), H = y.dim(2), W = y.dim(3);
  Tensor v = channels_to_rows(y);
  Tensor upper = density_logits(mats_, biases_, gains_, add_scalar(v, 0.5f));
  Tensor lower = density_logits(mats_, biases_, gains_, add_scalar(v, -0.5f));
  // evaluate the sigmoid difference on the saturating side for stability;
  // the sign factor is a constant
  Tensor sign(upper.shape());
  for (int64_t i = 0; i < sign.numel(); ++i)
    sign.data()[i] = (lower.data()[i] + upper.data()[i] > 0.0f) ? -1.0f : 1.0f;
  Tensor p = abs_op(sub(sigmoid(mul(upper, sign)), sigmoid(mul(lower, sign))));
  p = lower_bound(p, kLikelihoodFloor);
  return rows_to_channels(p, N, H, W);
}

std::vector<double> EntropyBottleneck::cumulative(const std::vector<double>& samples,
                                                  int count) const {
  if (samples.size() != size_t(channels_) * count)
    fail(ErrorCode::Dimension, "cumulative: sample matrix must be channels x count");
  NoGradGuard ng;
  std::vector<TensorD> mats, biases, gains;
  detached_params<double>(mats, biases, gains);
  TensorD x = TensorD::from_data(Shape{channels_, 1, count}, samples);
  TensorD logits = density_logits(mats, biases, gains, x);
  std::vector<double> out(logits.numel());
  for (int64_t i = 0; i < logits.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-logits.data()[i]));
  return out;
}

Tensor EntropyBottleneck::aux_loss() const {
  std::vector<Tensor> mats, biases, gains;
  detached_params<float>(mats, biases, gains);
  Tensor c = sigmoid(density_logits(mats, biases, gains, quantiles_));
  Tensor target(Shape{channels_, 1, 3});
  for (int ch = 0; ch < channels_; ++ch) {
    target.data()[ch * 3 + 0] = static_cast<float>(kTailMass);
    target.data()[ch * 3 + 1] = 0.5f;
    target.data()[ch * 3 + 2] = static_cast<float>(1.0 - kTailMass);
  }
  return sum(abs_op(sub(c, target)));
}

float EntropyBottleneck::fit_quantiles(int steps, float lr) {
  std::vector<Tensor> params{quantiles_};
  std::vector<AdamState> states;
  float last = 0.0f;
  for (int i = 0; i < steps; ++i) {
    quantiles_.zero_grad();
    Tensor loss = aux_loss();
    backward(loss);
    adam_step(params, states, lr);
    last = loss.item();
  }
  return last;
}

std::vector<float> EntropyBottleneck::medians() const {
  std::vector<float> out(channels_);
  for (int c = 0; c < channels_; ++c) out[c] = quantiles_.data()[c * 3 + 1];
  return out;
}

QuantizedCdfTable EntropyBottleneck::build_tables() const {
  std::vector<int> minima(channels_), maxima(channels_);
  int max_edges = 0;
  for (int c = 0; c < channels_; ++c) {
    const float lo = quantiles_.data()[c * 3 + 0];
    const float med = quantiles_.data()[c * 3 + 1];
    const float hi = quantiles_.data()[c * 3 + 2];
    minima[c] = std::max(0, static_cast<int>(std::ceil(double(med) - double(lo))));
    maxima[c] = std::max(0, static_cast<int>(std::ceil(double(hi) - double(med))));
    max_edges = std::max(max_edges, minima[c] + maxima[c] + 2);
  }
  // bin edges per channel: median - minima - 0.5 + j
  std::vector<double> samples(size_t(channels_) * max_edges, 0.0);
  for (int c = 0; c < channels_; ++c) {
    const double med = quantiles_.data()[c * 3 + 1];
    for (int j = 0; j < max_edges; ++j)
      samples[size_t(c) * max_edges + j] = med - minima[c] - 0.5 + j;
  }
  const std::vector<double> cum = cumulative(samples, max_edges);

  QuantizedCdfTable table;
  table.rows.reserve(channels_);
  for (int c = 0; c < channels_; ++c) {
    const int L = minima[c] + maxima[c] + 1;
    const double* e = cum.data() + size_t(c) * max_edges;
    std::vector<double> pmf(L);
    for (int j = 0; j < L; ++j) pmf[j] = std::max(0.0, e[j + 1] - e[j]);
    const double escape = std::max(0.0, e[0]) + std::max(0.0, 1.0 - e[L]);
    table.rows.push_back(QuantizedCdfTable::make_row(pmf, escape, -minima[c]));
  }
  table.validate();
  return table;
}

// --- GaussianConditional -----------------------------------------------------------

std::vector<float> GaussianConditional::default_scale_table() {
  constexpr int kLevels = 64;
  constexpr double kMin = 0.11, kMax = 256.0;
  std::vector<float> table(kLevels);
  const double step = (std::log(kMax) - std::log(kMin)) / double(kLevels - 1);
  for (int i = 0; i < kLevels; ++i)
    table[i] = static_cast<float>(std::exp(std::log(kMin) + step * i));
  return table;
}

GaussianConditional::GaussianConditional(std::vector<float> scale_table)
    : table_(std::move(scale_table)) {
  if (table_.empty()) fail(ErrorCode::Contract, "scale table must be nonempty");
  for (size_t i = 0; i < table_.size(); ++i) {
    if (!(table_[i] > 0.0f)) fail(ErrorCode::Contract, "scale table entries must be positive");
    if (i > 0 && !(table_[i] > table_[i - 1]))
      fail(ErrorCode::Contract, "scale table must be strictly increasing");
  }
}

Tensor GaussianConditional::likelihood(const Tensor& v, const Tensor& scales,
                                       const Tensor& means) const {
  Tensor clamped = lower_bound(scales, table_.front());
  Tensor p = gauss_bin_prob(v, clamped, means);
  return lower_bound(p, kLikelihoodFloor);
}

std::vector<int32_t> GaussianConditional::scale_rows(const Tensor& scales) const {
  std::vector<int32_t> rows(scales.numel());
  for (int64_t i = 0; i < scales.numel(); ++i) {
    const float s = scales.data()[i];
    auto it = std::lower_bound(table_.begin(), table_.end(), s);
    rows[i] = (it == table_.end()) ? int32_t(table_.size()) - 1
                                   : int32_t(it - table_.begin());
  }
  return rows;
}

Tensor GaussianConditional::quantized_scales(const Tensor& scales) const {
  const auto rows = scale_rows(scales);
  Tensor out(scales.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = table_[rows[i]];
  return out;
}

QuantizedCdfTable GaussianConditional::build_tables() const {
  const double z_tail = -norm_quantile(kTailMass);
  QuantizedCdfTable table;
  table.rows.reserve(table_.size());
  for (const float sf : table_) {
    const double s = double(sf);
    const int radius = static_cast<int>(std::ceil(s * z_tail));
    const int L = 2 * radius + 1;
    std::vector<double> pmf(L);
    for (int k = -radius; k <= radius; ++k)
      pmf[k + radius] = norm_cdf((k + 0.5) / s) - norm_cdf((k - 0.5) / s);
    const double escape = 2.0 * norm_cdf((-radius - 0.5) / s);
    table.rows.push_back(QuantizedCdfTable::make_row(pmf, escape, -radius));
  }
  table.validate();
  return table;
}

// --- quantization --------------------------------------------------------------------

namespace {
inline int32_t round_half_even(float v) { return static_cast<int32_t>(std::lrintf(v)); }
}  // namespace

Tensor quantize_noise(const Tensor& y, Rng* rng) {
  if (!rng)
    fail(ErrorCode::Contract, "noise quantization requested without a training noise source");
  return add_uniform_noise(y, *rng);
}

std::vector<int32_t> quantize_symbols(const Tensor& y, const Tensor& means) {
  if (means.defined() && means.shape() != y.shape())
    fail(ErrorCode::Dimension, "quantize: means shape must match input");
  std::vector<int32_t> out(y.numel());
  for (int64_t i = 0; i < y.numel(); ++i) {
    const float m = means.defined() ? means.data()[i] : 0.0f;
    out[i] = round_half_even(y.data()[i] - m);
  }
  return out;
}

Tensor quantize_dequantize(const Tensor& y, const Tensor& means) {
  if (means.defined() && means.shape() != y.shape())
    fail(ErrorCode::Dimension, "quantize: means shape must match input");
  Tensor out(y.shape());
  for (int64_t i = 0; i < y.numel(); ++i) {
    const float m = means.defined() ? means.data()[i] : 0.0f;
    out.data()[i] = static_cast<float>(round_half_even(y.data()[i] - m)) + m;
  }
  return out;
}

Tensor dequantize_symbols(const std::vector<int32_t>& symbols, const Shape& shape,
                          const Tensor& means) {
  if (shape_numel(shape) != static_cast<int64_t>(symbols.size()))
    fail(ErrorCode::Dimension, "dequantize: symbol count does not match shape");
  Tensor out(shape);
  for (size_t i = 0; i < symbols.size(); ++i) {
    const float m = means.defined() ? means.data()[i] : 0.0f;
    out.data()[i] = static_cast<float>(symbols[i]) + m;
  }
  return out;
}

// --- rate ------------------------------------------------------------------------------

double estimate_bits(const std::vector<Tensor>& likelihoods) {
  constexpr double kInvLn2 = 1.4426950408889634;
  double bits = 0.0;
  for (const auto& p : likelihoods)
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double v = double(p.data()[i]);
      if (!(v > 0.0)) fail(ErrorCode::Numeric, "estimate_bits: non-positive likelihood");
      bits -= std::log(v) * kInvLn2;
    }
  return bits;
}

Tensor rate_bits_graph(const std::vector<Tensor>& likelihoods) {
  if (likelihoods.empty()) fail(ErrorCode::Contract, "rate_bits_graph: empty likelihood set");
  Tensor acc;
  for (const auto& p : likelihoods) {
    Tensor s = sum(log_op(p));
    acc = acc.defined() ? add(acc, s) : s;
  }
  return mul_scalar(acc, -1.4426950408889634f);
}

}  // namespace nzc
