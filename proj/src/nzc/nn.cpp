#include "nzc/nn.hpp"

#include <cmath>

namespace nzc {

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (find(name)) fail(ErrorCode::Contract, "duplicate parameter name: " + name);
  t.set_requires_grad(true);
  params_.push_back({name, t});
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

const Tensor* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::vector<Tensor> ParamStore::tensors_matching(const std::string& prefix, bool invert) const {
  std::vector<Tensor> out;
  for (const auto& p : params_) {
    const bool match = prefix.empty() || p.name.rfind(prefix, 0) == 0;
    if (match != invert) out.push_back(p.tensor);
  }
  return out;
}

Conv2d::Conv2d(ParamStore& store, const std::string& prefix, int in_ch, int out_ch, int kernel,
               int stride, int pad, Rng& rng)
    : stride_(stride), pad_(pad) {
  const float stddev = std::sqrt(1.0f / float(in_ch * kernel * kernel));
  w_ = store.add(prefix + ".weight",
                 Tensor::randn(Shape{out_ch, in_ch, kernel, kernel}, rng, stddev));
  b_ = store.add(prefix + ".bias", Tensor::zeros(Shape{out_ch}));
}

ConvTranspose2d::ConvTranspose2d(ParamStore& store, const std::string& prefix, int in_ch,
                                 int out_ch, int kernel, int stride, int pad, int out_pad,
                                 Rng& rng)
    : stride_(stride), pad_(pad), out_pad_(out_pad) {
  const float stddev = std::sqrt(1.0f / float(in_ch * kernel * kernel));
  w_ = store.add(prefix + ".weight",
                 Tensor::randn(Shape{in_ch, out_ch, kernel, kernel}, rng, stddev));
  b_ = store.add(prefix + ".bias", Tensor::zeros(Shape{out_ch}));
}

Gdn::Gdn(ParamStore& store, const std::string& prefix, int channels, bool inverse, Rng& rng)
    : inverse_(inverse) {
  (void)rng;
  // effective beta = raw^2 + 1e-6 starts at 1, effective gamma at 0.1 * I
  Tensor beta = Tensor::full(Shape{channels}, std::sqrt(1.0f - 1e-6f));
  Tensor gamma = Tensor::zeros(Shape{channels, channels});
  const float diag = std::sqrt(0.1f);
  for (int i = 0; i < channels; ++i) gamma.data()[i * channels + i] = diag;
  beta_raw_ = store.add(prefix + ".beta", beta);
  gamma_raw_ = store.add(prefix + ".gamma", gamma);
}

}  // namespace nzc
