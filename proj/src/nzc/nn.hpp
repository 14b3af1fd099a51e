#pragma once

// Layers over the tensor engine and the named-parameter registry that
// optimizers and checkpoints operate on.

#include <string>
#include <vector>

#include "nzc/tensor.hpp"

namespace nzc {

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Owns the canonical list of named parameters for one model. Layer objects
// hold handles to the same tensors, so optimizer updates are visible
// everywhere.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  size_t size() const { return params_.size(); }

  void zero_grads();
  // tensors whose names pass the filter (empty prefix = all)
  std::vector<Tensor> tensors_matching(const std::string& prefix, bool invert = false) const;

 private:
  std::vector<Parameter> params_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& prefix, int in_ch, int out_ch, int kernel,
         int stride, int pad, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w_, b_, stride_, pad_); }

 private:
  Tensor w_, b_;
  int stride_ = 1, pad_ = 0;
};

class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore& store, const std::string& prefix, int in_ch, int out_ch, int kernel,
                  int stride, int pad, int out_pad, Rng& rng);
  Tensor operator()(const Tensor& x) const {
    return conv_transpose2d(x, w_, b_, stride_, pad_, out_pad_);
  }

 private:
  Tensor w_, b_;
  int stride_ = 1, pad_ = 0, out_pad_ = 0;
};

class Gdn {
 public:
  Gdn() = default;
  Gdn(ParamStore& store, const std::string& prefix, int channels, bool inverse, Rng& rng);
  Tensor operator()(const Tensor& x) const { return gdn(x, beta_raw_, gamma_raw_, inverse_); }

 private:
  Tensor beta_raw_, gamma_raw_;
  bool inverse_ = false;
};

}  // namespace nzc
