#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tttseg/dataio.hpp"
#include "tttseg/unet.hpp"

namespace tttseg {

struct LossConfig {
  double dice_smooth = 1e-5;
  bool include_background_in_dice = false;  // foreground-organ convention

  void validate() const;
};

struct LossParts {
  Value total;       // dice + ce, equally weighted (sum)
  double dice_part;  // scalar values for logging
  double ce_part;
};

// probs: post-softmax [N x C x H x W]; labels: [N x H x W] integer classes.
// Soft Dice per class c: 1 - (2 sum p y + s) / (sum p + sum y + s), averaged
// over the configured classes; CE: mean over pixels of -log p_true with the
// log clamped at 1e-12.
LossParts dice_ce_loss_parts(const Value& probs, const Tensor& labels, const LossConfig& cfg);
Value dice_ce_loss(const Value& probs, const Tensor& labels, const LossConfig& cfg);

enum class LrSchedule { Constant, Poly };

struct OptimizerConfig {
  double lr = 1e-2;
  double momentum = 0.9;
  LrSchedule schedule = LrSchedule::Constant;
  double poly_exponent = 0.9;
};

// v <- momentum v + g; p <- p - lr v.
void sgd_step_single(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum);

class SgdOptimizer {
 public:
  SgdOptimizer(ModelVars& model, OptimizerConfig cfg);

  // lr_e = lr0 (1 - e/E)^exponent under the poly schedule.
  double lr_at(std::size_t epoch, std::size_t total_epochs) const;
  void step(ModelVars& model, double lr);
  static void zero_grad(ModelVars& model);

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> velocity_;
};

struct TrainRunConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 2;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // epochs between checkpoints; 0 = final only
  std::string preset = "synthetic64";
  NetworkVariant variant = NetworkVariant::Bot;
  OptimizerConfig optimizer;
  LossConfig loss;
  double inner_lr = 0.1;
  InnerModelKind inner_kind = InnerModelKind::Linear;
  bool use_validation_split = false;  // 80/20 by sample-id hash
  ScanMode scan_mode = ScanMode::Differentiable;
  std::string out_dir;  // when set: log.jsonl + checkpoints

  void validate() const;
};

// One line-delimited JSON record per epoch.
struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dice_part = 0.0;
  double ce_part = 0.0;
  std::optional<double> val_dsc;
  double lr = 0.0;
  double wall_ms = 0.0;

  std::string to_json() const;
};

struct TrainResult {
  ModelVars model;
  std::vector<EpochRecord> log;
  std::size_t epochs_run = 0;
};

// Called after each epoch; return false to stop early (used by verification
// harnesses that watch training DSC).
using EpochCallback = std::function<bool(std::size_t epoch, ModelVars& model)>;

// Deterministic given (config, dataset): init, per-epoch sample order and the
// loss curve depend only on the seed. Throws NumericError naming the epoch
// and step if the loss stops being finite.
TrainResult train(const TrainRunConfig& run, const Dataset& data, const EpochCallback& callback = {});

// Argmax over the class axis of a no-grad forward pass.
LabelMask predict_mask(const ModelVars& m, const Tensor& image);

// Mean over samples of the per-sample mean foreground DSC.
double mean_foreground_dsc(const ModelVars& m, const std::vector<SegmentationSample>& samples);

}  // namespace tttseg
