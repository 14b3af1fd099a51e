#pragma once

// Rate-distortion training: the Lagrangian losses, the quality -> lambda
// grid, plateau-based learning-rate decay, patch sampling and single-file
// checkpoints.

#include <string>
#include <vector>

#include "nzc/models.hpp"

namespace nzc {

struct TrainingConfig {
  double lambda = 0.01;
  Metric metric = Metric::Mse;
  int batch_size = 8;
  int patch_size = 256;
  float initial_lr = 1e-4f;
  int patience = 20;          // evaluations without improvement before lr /= 2
  int64_t max_steps = 10000;
  uint64_t seed = 0;
  int eval_interval = 500;    // steps between evaluation passes
  float aux_lr = 1e-3f;
  float clip_norm = 1.0f;

  void validate() const;
  // flat key=value text (one pair per line, '#' comments)
  static TrainingConfig parse(const std::string& text);
  std::string serialize() const;
};

// Exact Table-style lambda grid for qualities 1..8 per metric.
double lambda_for_quality(Metric metric, int quality);

struct RdLossBreakdown {
  double total = 0.0;
  double distortion = 0.0;  // MSE in [0,1]^2 units, or the MS-SSIM value
  double rate_bpp = 0.0;
  double aux = 0.0;
};

struct RdLoss {
  Tensor total;  // differentiable scalar
  RdLossBreakdown breakdown;
};

// L = lambda * 255^2 * MSE + R   (mse metric)
// L = lambda * (1 - MS-SSIM) + R (ms-ssim metric)
// with R in bits per pixel of the input batch.
RdLoss rd_loss(const Tensor& x, const Tensor& x_hat, const std::vector<Tensor>& likelihoods,
               double lambda, Metric metric);

class PlateauScheduler {
 public:
  PlateauScheduler(float initial_lr, int patience, float factor = 0.5f)
      : lr_(initial_lr), patience_(patience), factor_(factor) {}

  // feeds one evaluation loss; halves the lr after `patience` consecutive
  // evaluations without a relative improvement above 1e-4
  float observe(double eval_loss);
  float lr() const { return lr_; }

  double best() const { return best_; }
  int bad_count() const { return bad_; }
  void restore(float lr, double best, int bad) {
    lr_ = lr;
    best_ = best;
    bad_ = bad;
  }

 private:
  float lr_;
  int patience_;
  float factor_;
  double best_ = 0.0;
  bool has_best_ = false;
  int bad_ = 0;
};

// sorted list of .png/.ppm files in a directory
std::vector<std::string> list_images(const std::string& dir);

// `count` patches of patch_size^2 pixels drawn uniformly from the eligible
// images (smaller sources are skipped with a warning on stderr). Fixed seed,
// fixed coordinates.
Tensor extract_random_patches(const std::vector<std::string>& image_paths, int patch_size,
                              int count, uint64_t seed);

// Deterministic patch source backed by a cached image list.
class PatchSampler {
 public:
  PatchSampler(const std::string& dir, int patch_size, uint64_t seed);
  Tensor next_batch(int n);
  Rng& rng() { return rng_; }
  size_t image_count() const { return images_.size(); }

 private:
  std::vector<Tensor> images_;
  int patch_size_;
  Rng rng_;
};

struct TrainerState {
  int64_t step = 0;
  std::vector<AdamState> main_states;
  std::vector<AdamState> aux_states;
  float lr = 1e-4f;
  double best_eval = 0.0;
  bool has_best = false;
  int bad_count = 0;
  uint64_t data_rng[4] = {0, 0, 0, 0};
  TrainingConfig config;
};

struct TrainResult {
  int64_t steps = 0;
  RdLossBreakdown first_eval;
  RdLossBreakdown final_eval;
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string metrics_log;
};

// Runs the optimization loop: main rate-distortion steps alternating with
// auxiliary quantile steps, periodic evaluation passes driving the plateau
// scheduler, checkpoint written on every improvement. Pass `resume` to
// continue a run bit-exactly.
TrainResult train(CodecModel& model, const TrainingConfig& config, const std::string& train_dir,
                  const std::string& eval_dir, const std::string& out_dir,
                  TrainerState* resume = nullptr);

// Single-file little-endian checkpoint: architecture, named parameter blobs,
// CDF tables when built, noise RNG state and (optionally) the full trainer
// state.
void save_checkpoint(const std::string& path, const CodecModel& model,
                     const TrainerState* state = nullptr);
CodecModel load_checkpoint(const std::string& path, TrainerState* state_out = nullptr);

}  // namespace nzc
