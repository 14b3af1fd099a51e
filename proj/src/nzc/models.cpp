#include "nzc/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "nzc/range_coder.hpp"

namespace nzc {

const char* model_id_name(ModelId id) {
  switch (id) {
    case ModelId::Factorized: return "factorized";
    case ModelId::ScaleHyperprior: return "scale_hyperprior";
    case ModelId::MeanScaleHyperprior: return "mean_scale_hyperprior";
  }
  return "unknown";
}

ModelId model_id_from_name(const std::string& name) {
  if (name == "factorized") return ModelId::Factorized;
  if (name == "scale_hyperprior") return ModelId::ScaleHyperprior;
  if (name == "mean_scale_hyperprior") return ModelId::MeanScaleHyperprior;
  fail(ErrorCode::InvalidArgument,
       "unknown model '" + name +
           "' (expected factorized, scale_hyperprior or mean_scale_hyperprior)");
}

const char* metric_name(Metric metric) {
  return metric == Metric::Mse ? "mse" : "ms-ssim";
}

Metric metric_from_name(const std::string& name) {
  if (name == "mse") return Metric::Mse;
  if (name == "ms-ssim") return Metric::MsSsim;
  fail(ErrorCode::InvalidArgument, "unknown metric '" + name + "' (expected mse or ms-ssim)");
}

ArchitectureConfig make_architecture(ModelId id, int quality, Metric metric) {
  if (quality < 1 || quality > 8)
    fail(ErrorCode::InvalidArgument, "quality must be in 1..8, got " + std::to_string(quality));
  ArchitectureConfig cfg;
  cfg.model_id = id;
  cfg.quality = quality;
  cfg.metric = metric;
  if (quality <= 5) {
    cfg.N = 128;
    cfg.M = 192;
  } else {
    cfg.N = 192;
    cfg.M = 320;
  }
  return cfg;
}

CodecModel CodecModel::create(const ArchitectureConfig& cfg, uint64_t seed) {
  if (cfg.N <= 0 || cfg.M <= 0) fail(ErrorCode::InvalidArgument, "channel counts must be positive");
  CodecModel model;
  model.cfg_ = cfg;
  Rng rng(seed);
  model.noise_rng_.reseed(seed ^ 0x9e3779b97f4a7c15ull);
  const int N = cfg.N, M = cfg.M;
  ParamStore& ps = model.params_;

  const int ga_out[4] = {N, N, N, M};
  int in_ch = 3;
  for (int i = 0; i < 4; ++i) {
    model.ga_conv_.emplace_back(ps, "g_a.conv" + std::to_string(i), in_ch, ga_out[i], 5, 2, 2, rng);
    if (i < 3) model.ga_gdn_.emplace_back(ps, "g_a.gdn" + std::to_string(i), ga_out[i], false, rng);
    in_ch = ga_out[i];
  }
  const int gs_out[4] = {N, N, N, 3};
  in_ch = M;
  for (int i = 0; i < 4; ++i) {
    model.gs_deconv_.emplace_back(ps, "g_s.deconv" + std::to_string(i), in_ch, gs_out[i], 5, 2, 2,
                                  1, rng);
    if (i < 3) model.gs_gdn_.emplace_back(ps, "g_s.igdn" + std::to_string(i), gs_out[i], true, rng);
    in_ch = gs_out[i];
  }

  if (cfg.model_id != ModelId::Factorized) {
    model.ha_conv_.emplace_back(ps, "h_a.conv0", M, N, 3, 1, 1, rng);
    model.ha_conv_.emplace_back(ps, "h_a.conv1", N, N, 5, 2, 2, rng);
    model.ha_conv_.emplace_back(ps, "h_a.conv2", N, M, 5, 2, 2, rng);
    model.hs_deconv_.emplace_back(ps, "h_s.deconv0", M, N, 5, 2, 2, 1, rng);
    model.hs_deconv_.emplace_back(ps, "h_s.deconv1", N, N, 5, 2, 2, 1, rng);
    const int hs_out_ch = cfg.model_id == ModelId::MeanScaleHyperprior ? 2 * M : M;
    model.hs_out_ = Conv2d(ps, "h_s.conv_out", N, hs_out_ch, 3, 1, 1, rng);
    model.conditional_.emplace();
  }
  // the bottleneck codes y for the factorized model and z for hyper variants
  model.bottleneck_ = EntropyBottleneck(ps, "bottleneck", M, rng);
  return model;
}

Tensor CodecModel::run_analysis(const Tensor& x) const {
  Tensor h = x;
  for (size_t i = 0; i < ga_conv_.size(); ++i) {
    h = ga_conv_[i](h);
    if (i < ga_gdn_.size()) h = ga_gdn_[i](h);
  }
  return h;
}

Tensor CodecModel::run_synthesis(const Tensor& y) const {
  Tensor h = y;
  for (size_t i = 0; i < gs_deconv_.size(); ++i) {
    h = gs_deconv_[i](h);
    if (i < gs_gdn_.size()) h = gs_gdn_[i](h);
  }
  return h;
}

Tensor CodecModel::run_hyper_analysis(const Tensor& y) const {
  Tensor h = cfg_.model_id == ModelId::ScaleHyperprior ? abs_op(y) : y;
  h = ha_conv_[0](h);
  h = relu(h);
  h = ha_conv_[1](h);
  h = relu(h);
  return ha_conv_[2](h);
}

Tensor CodecModel::run_hyper_synthesis(const Tensor& z) const {
  Tensor h = hs_deconv_[0](z);
  h = relu(h);
  h = hs_deconv_[1](h);
  h = relu(h);
  return hs_out_(h);
}

Tensor CodecModel::median_tensor(const Shape& latent_shape) const {
  const std::vector<float> med = bottleneck_.medians();
  Tensor out(latent_shape);
  const int N = latent_shape[0], C = latent_shape[1];
  const int64_t hw = int64_t(latent_shape[2]) * latent_shape[3];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float* plane = out.data() + (int64_t(n) * C + c) * hw;
      std::fill(plane, plane + hw, med[size_t(c)]);
    }
  return out;
}

namespace {

void check_train_input(const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) != 3)
    fail(ErrorCode::Dimension, "forward expects an (N,3,H,W) batch");
  const int h = x.dim(2), w = x.dim(3);
  if (h < kMinInputSide || w < kMinInputSide)
    fail(ErrorCode::Contract, "training inputs must be at least 64x64 pixels");
  if (h % kStrideMultiple || w % kStrideMultiple)
    fail(ErrorCode::Contract, "training inputs must have sides that are multiples of 16");
  for (int64_t i = 0; i < x.numel(); ++i) {
    const float v = x.data()[i];
    if (!(v >= 0.0f && v <= 1.0f))
      fail(ErrorCode::Contract, "image values must lie in [0,1]");
  }
}

}  // namespace

ForwardResult CodecModel::forward_train(const Tensor& x) {
  if (!training_)
    fail(ErrorCode::Contract, "forward_train called on a model in eval mode");
  check_train_input(x);
  ForwardResult out;
  Tensor y = run_analysis(x);
  if (!has_hyperprior()) {
    Tensor y_noisy = quantize_noise(y, &noise_rng_);
    out.likelihoods.push_back(bottleneck_.likelihood(y_noisy));
    out.x_hat = run_synthesis(y_noisy);
    return out;
  }
  Tensor z = run_hyper_analysis(y);
  Tensor z_noisy = quantize_noise(z, &noise_rng_);
  Tensor p_z = bottleneck_.likelihood(z_noisy);
  Tensor params = run_hyper_synthesis(z_noisy);
  Tensor y_noisy = quantize_noise(y, &noise_rng_);
  Tensor p_y;
  if (cfg_.model_id == ModelId::ScaleHyperprior) {
    p_y = conditional_->likelihood(y_noisy, params, Tensor());
  } else {
    Tensor scales = slice_channels(params, 0, cfg_.M);
    Tensor means = slice_channels(params, cfg_.M, 2 * cfg_.M);
    p_y = conditional_->likelihood(y_noisy, scales, means);
  }
  out.likelihoods.push_back(p_y);
  out.likelihoods.push_back(p_z);
  out.x_hat = run_synthesis(y_noisy);
  return out;
}

ForwardResult CodecModel::forward_eval(const Tensor& x) const {
  check_train_input(x);
  NoGradGuard ng;
  ForwardResult out;
  Tensor y = run_analysis(x);
  if (!has_hyperprior()) {
    Tensor medians = median_tensor(y.shape());
    Tensor y_hat = quantize_dequantize(y, medians);
    out.likelihoods.push_back(bottleneck_.likelihood(y_hat));
    out.x_hat = run_synthesis(y_hat);
    return out;
  }
  Tensor z = run_hyper_analysis(y);
  Tensor z_medians = median_tensor(z.shape());
  Tensor z_hat = quantize_dequantize(z, z_medians);
  out.likelihoods.push_back(Tensor());  // placeholder, filled below to keep y-first order
  out.likelihoods.push_back(bottleneck_.likelihood(z_hat));
  Tensor params = run_hyper_synthesis(z_hat);
  Tensor y_hat;
  if (cfg_.model_id == ModelId::ScaleHyperprior) {
    y_hat = quantize_dequantize(y, Tensor());
    out.likelihoods[0] = conditional_->likelihood(y_hat, params, Tensor());
  } else {
    Tensor scales = slice_channels(params, 0, cfg_.M);
    Tensor means = slice_channels(params, cfg_.M, 2 * cfg_.M);
    y_hat = quantize_dequantize(y, means);
    out.likelihoods[0] = conditional_->likelihood(y_hat, scales, means);
  }
  out.x_hat = run_synthesis(y_hat);
  return out;
}

void CodecModel::update_tables() {
  bottleneck_tables_ = bottleneck_.build_tables();
  if (has_hyperprior()) gaussian_tables_ = conditional_->build_tables();
}

const QuantizedCdfTable& CodecModel::bottleneck_tables() const {
  if (!bottleneck_tables_) fail(ErrorCode::Contract, "CDF tables have not been built");
  return *bottleneck_tables_;
}

const QuantizedCdfTable* CodecModel::gaussian_tables() const {
  return gaussian_tables_ ? &*gaussian_tables_ : nullptr;
}

void CodecModel::set_tables(QuantizedCdfTable bottleneck, std::optional<QuantizedCdfTable> gaussian) {
  bottleneck.validate();
  if (gaussian) gaussian->validate();
  bottleneck_tables_ = std::move(bottleneck);
  gaussian_tables_ = std::move(gaussian);
}

void CodecModel::check_eval_ready(const char* who) const {
  if (training_) fail(ErrorCode::Contract, std::string(who) + " requires eval mode");
  if (!bottleneck_tables_)
    fail(ErrorCode::Contract, std::string(who) + " requires CDF tables (call update_tables)");
  if (has_hyperprior() && !gaussian_tables_)
    fail(ErrorCode::Contract, std::string(who) + " requires Gaussian CDF tables");
}

CodecModel::EvalLatents CodecModel::eval_latents(const Tensor& padded) const {
  NoGradGuard ng;
  EvalLatents out;
  out.y = run_analysis(padded);
  if (!has_hyperprior()) {
    Tensor medians = median_tensor(out.y.shape());
    out.y_syms = quantize_symbols(out.y, medians);
    out.y_hat = dequantize_symbols(out.y_syms, out.y.shape(), medians);
    return out;
  }
  out.z = run_hyper_analysis(out.y);
  Tensor z_medians = median_tensor(out.z.shape());
  out.z_syms = quantize_symbols(out.z, z_medians);
  out.z_hat = dequantize_symbols(out.z_syms, out.z.shape(), z_medians);
  Tensor params = run_hyper_synthesis(out.z_hat);
  if (cfg_.model_id == ModelId::ScaleHyperprior) {
    out.scales = params;
    out.y_syms = quantize_symbols(out.y, Tensor());
    out.y_hat = dequantize_symbols(out.y_syms, out.y.shape(), Tensor());
  } else {
    out.scales = slice_channels(params, 0, cfg_.M);
    out.y_means = slice_channels(params, cfg_.M, 2 * cfg_.M);
    out.y_syms = quantize_symbols(out.y, out.y_means);
    out.y_hat = dequantize_symbols(out.y_syms, out.y.shape(), out.y_means);
  }
  return out;
}

namespace {

void put_u16le(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v & 0xff));
  out.push_back(uint8_t(v >> 8));
}
void put_u32le(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t((v >> (8 * i)) & 0xff));
}

std::vector<int32_t> channel_rows(const Shape& latent) {
  const int C = latent[1];
  const int64_t hw = int64_t(latent[2]) * latent[3];
  std::vector<int32_t> rows(size_t(C) * hw);
  for (int c = 0; c < C; ++c)
    std::fill(rows.begin() + size_t(c) * hw, rows.begin() + size_t(c + 1) * hw, c);
  return rows;
}

}  // namespace

std::vector<uint8_t> CodecModel::compress(const Tensor& x) const {
  check_eval_ready("compress");
  if (x.ndim() != 4 || x.dim(0) != 1 || x.dim(1) != 3)
    fail(ErrorCode::Dimension, "compress expects a single (1,3,H,W) image");
  const int h = x.dim(2), w = x.dim(3);
  if (h < kMinInputSide || w < kMinInputSide)
    fail(ErrorCode::InvalidArgument,
         "inputs must be at least 64x64 pixels (got " + std::to_string(h) + "x" +
             std::to_string(w) + ")");
  if (h > 0xffff || w > 0xffff) fail(ErrorCode::Capacity, "image dimensions exceed 65535");

  const PaddedImage padded = pad_reflect(x, kStrideMultiple);
  const EvalLatents lat = eval_latents(padded.padded);

  std::vector<EncodedChunk> streams;
  if (has_hyperprior()) {
    streams.push_back(rc_encode(lat.z_syms, channel_rows(lat.z.shape()), *bottleneck_tables_));
    streams.push_back(
        rc_encode(lat.y_syms, conditional_->scale_rows(lat.scales), *gaussian_tables_));
  } else {
    streams.push_back(rc_encode(lat.y_syms, channel_rows(lat.y.shape()), *bottleneck_tables_));
  }

  std::vector<uint8_t> out;
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  out.push_back(kContainerVersion);
  out.push_back(static_cast<uint8_t>(cfg_.model_id));
  out.push_back(static_cast<uint8_t>(cfg_.quality));
  out.push_back(static_cast<uint8_t>(cfg_.metric));
  put_u16le(out, static_cast<uint16_t>(h));
  put_u16le(out, static_cast<uint16_t>(w));
  out.push_back(static_cast<uint8_t>(streams.size()));
  for (const auto& s : streams) {
    put_u32le(out, static_cast<uint32_t>(s.bytes.size()));
    out.insert(out.end(), s.bytes.begin(), s.bytes.end());
  }
  return out;
}

Tensor CodecModel::decompress(const std::vector<uint8_t>& container) const {
  check_eval_ready("decompress");
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > container.size())
      fail(ErrorCode::CorruptStream, "container truncated");
  };
  need(4);
  if (std::memcmp(container.data(), kContainerMagic, 4) != 0)
    fail(ErrorCode::Format, "bad container magic (not an nzb stream)");
  pos = 4;
  need(1);
  const uint8_t version = container[pos++];
  if (version != kContainerVersion)
    fail(ErrorCode::Format, "unsupported container version " + std::to_string(version));
  need(3);
  const uint8_t model_id = container[pos], quality = container[pos + 1], metric = container[pos + 2];
  pos += 3;
  if (model_id != static_cast<uint8_t>(cfg_.model_id) ||
      quality != static_cast<uint8_t>(cfg_.quality) || metric != static_cast<uint8_t>(cfg_.metric))
    fail(ErrorCode::ModelMismatch,
         "container was produced by a different model (model/quality/metric " +
             std::to_string(model_id) + "/" + std::to_string(quality) + "/" +
             std::to_string(metric) + ")");
  need(5);
  const int h = container[pos] | (container[pos + 1] << 8);
  const int w = container[pos + 2] | (container[pos + 3] << 8);
  const int stream_count = container[pos + 4];
  pos += 5;
  const int expected_streams = has_hyperprior() ? 2 : 1;
  if (stream_count != expected_streams)
    fail(ErrorCode::Format, "unexpected stream count " + std::to_string(stream_count));
  std::vector<EncodedChunk> streams(size_t(stream_count));
  for (auto& s : streams) {
    need(4);
    const uint32_t len = uint32_t(container[pos]) | (uint32_t(container[pos + 1]) << 8) |
                         (uint32_t(container[pos + 2]) << 16) |
                         (uint32_t(container[pos + 3]) << 24);
    pos += 4;
    need(len);
    s.bytes.assign(container.begin() + pos, container.begin() + pos + len);
    pos += len;
  }
  if (h < kMinInputSide || w < kMinInputSide)
    fail(ErrorCode::CorruptStream, "container carries impossible dimensions");

  const int hp = (h + kStrideMultiple - 1) / kStrideMultiple * kStrideMultiple;
  const int wp = (w + kStrideMultiple - 1) / kStrideMultiple * kStrideMultiple;
  const int yh = hp / kStrideMultiple, yw = wp / kStrideMultiple;
  const Shape y_shape{1, cfg_.M, yh, yw};

  NoGradGuard ng;
  Tensor y_hat;
  if (!has_hyperprior()) {
    auto rows = channel_rows(y_shape);
    streams[0].symbol_count = static_cast<int64_t>(rows.size());
    const auto syms = rc_decode(streams[0], rows, *bottleneck_tables_);
    y_hat = dequantize_symbols(syms, y_shape, median_tensor(y_shape));
  } else {
    if (yh % 4 || yw % 4)
      fail(ErrorCode::CorruptStream, "latent dimensions incompatible with the hyper transform");
    const Shape z_shape{1, cfg_.M, yh / 4, yw / 4};
    auto z_rows = channel_rows(z_shape);
    streams[0].symbol_count = static_cast<int64_t>(z_rows.size());
    const auto z_syms = rc_decode(streams[0], z_rows, *bottleneck_tables_);
    Tensor z_hat = dequantize_symbols(z_syms, z_shape, median_tensor(z_shape));
    Tensor params = run_hyper_synthesis(z_hat);
    Tensor scales, means;
    if (cfg_.model_id == ModelId::ScaleHyperprior) {
      scales = params;
    } else {
      scales = slice_channels(params, 0, cfg_.M);
      means = slice_channels(params, cfg_.M, 2 * cfg_.M);
    }
    auto y_rows = conditional_->scale_rows(scales);
    streams[1].symbol_count = static_cast<int64_t>(y_rows.size());
    const auto y_syms = rc_decode(streams[1], y_rows, *gaussian_tables_);
    y_hat = dequantize_symbols(y_syms, y_shape, means);
  }
  Tensor recon = clamp01(run_synthesis(y_hat));
  return crop_image(recon, h, w);
}

Tensor CodecModel::reconstruct_direct(const Tensor& x) const {
  check_eval_ready("reconstruct_direct");
  const PaddedImage padded = pad_reflect(x, kStrideMultiple);
  const EvalLatents lat = eval_latents(padded.padded);
  NoGradGuard ng;
  Tensor recon = clamp01(run_synthesis(lat.y_hat));
  return crop_image(recon, padded.orig_h, padded.orig_w);
}

std::vector<int32_t> CodecModel::latent_symbols(const Tensor& x) const {
  check_eval_ready("latent_symbols");
  const PaddedImage padded = pad_reflect(x, kStrideMultiple);
  return eval_latents(padded.padded).y_syms;
}

double CodecModel::estimate_compressed_bits(const Tensor& x) const {
  check_eval_ready("estimate_compressed_bits");
  const PaddedImage padded = pad_reflect(x, kStrideMultiple);
  const EvalLatents lat = eval_latents(padded.padded);
  NoGradGuard ng;
  std::vector<Tensor> likelihoods;
  if (!has_hyperprior()) {
    likelihoods.push_back(bottleneck_.likelihood(lat.y_hat));
  } else {
    likelihoods.push_back(
        conditional_->likelihood(lat.y_hat, conditional_->quantized_scales(lat.scales), lat.y_means));
    likelihoods.push_back(bottleneck_.likelihood(lat.z_hat));
  }
  return estimate_bits(likelihoods);
}

}  // namespace nzc
