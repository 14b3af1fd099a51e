#pragma once

// End-to-end compression models: fully factorized, scale hyperprior and
// mean+scale hyperprior, with a train-mode forward pass and real
// compress/decompress paths over the range coder.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nzc/entropy.hpp"
#include "nzc/image_io.hpp"
#include "nzc/nn.hpp"

namespace nzc {

enum class ModelId : uint8_t {
  Factorized = 0,
  ScaleHyperprior = 1,
  MeanScaleHyperprior = 2,
};

enum class Metric : uint8_t {
  Mse = 0,
  MsSsim = 1,
};

const char* model_id_name(ModelId id);
ModelId model_id_from_name(const std::string& name);
const char* metric_name(Metric metric);
Metric metric_from_name(const std::string& name);

struct ArchitectureConfig {
  ModelId model_id = ModelId::Factorized;
  int N = 128;  // internal transform channels
  int M = 192;  // bottleneck / latent channels
  int quality = 1;
  Metric metric = Metric::Mse;
};

// Applies the quality -> channel-width rule: qualities 1..5 use (N=128,
// M=192), 6..8 use (N=192, M=320).
ArchitectureConfig make_architecture(ModelId id, int quality, Metric metric);

struct ForwardResult {
  Tensor x_hat;
  std::vector<Tensor> likelihoods;  // y first, then z for hyperprior variants
};

constexpr char kContainerMagic[4] = {'N', 'Z', '0', '1'};
constexpr uint8_t kContainerVersion = 1;
constexpr int kStrideMultiple = 16;
constexpr int kMinInputSide = 64;

class CodecModel {
 public:
  CodecModel() = default;
  static CodecModel create(const ArchitectureConfig& cfg, uint64_t seed);

  const ArchitectureConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  EntropyBottleneck& bottleneck() { return bottleneck_; }
  const EntropyBottleneck& bottleneck() const { return bottleneck_; }
  bool has_hyperprior() const { return cfg_.model_id != ModelId::Factorized; }

  void set_train(bool training) { training_ = training; }
  bool training() const { return training_; }
  Rng& noise_rng() { return noise_rng_; }

  // Differentiable forward with additive-noise quantization (train mode only).
  ForwardResult forward_train(const Tensor& x);
  // Rounding-based forward used for deterministic evaluation losses.
  ForwardResult forward_eval(const Tensor& x) const;

  // Builds the range-coder CDF tables from the current densities.
  void update_tables();
  bool tables_built() const { return bottleneck_tables_.has_value(); }
  const QuantizedCdfTable& bottleneck_tables() const;
  const QuantizedCdfTable* gaussian_tables() const;
  void set_tables(QuantizedCdfTable bottleneck, std::optional<QuantizedCdfTable> gaussian);

  // Serialized container for a single (1,3,H,W) image; eval mode with tables
  // built. Inputs below 64x64 are rejected.
  std::vector<uint8_t> compress(const Tensor& x) const;
  Tensor decompress(const std::vector<uint8_t>& container) const;

  // The reconstruction the decoder will produce, computed without the
  // entropy coder (pad -> analysis -> round -> synthesis -> clamp -> crop).
  Tensor reconstruct_direct(const Tensor& x) const;
  // Decoder-side quantized latent symbols for x (the y stream).
  std::vector<int32_t> latent_symbols(const Tensor& x) const;

  // Entropy estimate (in bits) of the quantized latents of x, using the
  // densities the coder tables were built from (hyper variants use the
  // coded table row's scale).
  double estimate_compressed_bits(const Tensor& x) const;

 private:
  Tensor run_analysis(const Tensor& x) const;
  Tensor run_synthesis(const Tensor& y) const;
  Tensor run_hyper_analysis(const Tensor& y) const;
  Tensor run_hyper_synthesis(const Tensor& z) const;
  Tensor median_tensor(const Shape& latent_shape) const;
  // quantized y/z plus side info shared by compress/estimate/direct paths
  struct EvalLatents {
    Tensor y, z;                 // raw analysis outputs
    std::vector<int32_t> y_syms, z_syms;
    Tensor y_hat, z_hat;         // dequantized
    Tensor y_means;              // undefined unless mean-scale
    Tensor scales;               // undefined for factorized (continuous, unclamped)
  };
  EvalLatents eval_latents(const Tensor& padded) const;
  void check_eval_ready(const char* who) const;

  ArchitectureConfig cfg_;
  ParamStore params_;
  Rng noise_rng_;
  bool training_ = true;

  std::vector<Conv2d> ga_conv_;
  std::vector<Gdn> ga_gdn_;
  std::vector<ConvTranspose2d> gs_deconv_;
  std::vector<Gdn> gs_gdn_;
  std::vector<Conv2d> ha_conv_;
  std::vector<ConvTranspose2d> hs_deconv_;
  Conv2d hs_out_;
  EntropyBottleneck bottleneck_;
  std::optional<GaussianConditional> conditional_;
  std::optional<QuantizedCdfTable> bottleneck_tables_;
  std::optional<QuantizedCdfTable> gaussian_tables_;
};

}  // namespace nzc
