#include "tttseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace tttseg {

void LossConfig::validate() const {
  if (dice_smooth <= 0.0) throw ConfigError("dice_smooth must be positive");
}

LossParts dice_ce_loss_parts(const Value& probs, const Tensor& labels, const LossConfig& cfg) {
  cfg.validate();
  const Tensor& pv = probs.val();
  if (pv.rank() != 4) throw ShapeError("dice_ce_loss expects probs [N x C x H x W]");
  const std::size_t n = pv.extent(0), c = pv.extent(1), h = pv.extent(2), w = pv.extent(3);
  if (labels.shape() != Shape{n, h, w}) {
    throw ShapeError("labels must be [N x H x W] matching probs, got " + shape_str(labels.shape()));
  }
  Tensor one_hot({n, c, h, w});
  const std::size_t plane = h * w;
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double lv = labels[ni * plane + i];
      if (lv < 0.0 || lv != std::floor(lv) || lv >= static_cast<double>(c)) {
        throw ValueError("label " + std::to_string(lv) + " outside [0, " + std::to_string(c) + ")");
      }
      one_hot[(ni * c + static_cast<std::size_t>(lv)) * plane + i] = 1.0;
    }
  }
  Value targets = Value::constant(one_hot);

  // Cross-entropy: mean over pixels of -log p at the true class.
  const double inv_pixels = 1.0 / static_cast<double>(n * plane);
  Value ce = scale(sum_all(mul(targets, log_clamped(probs))), -inv_pixels);

  // Soft Dice averaged over the configured classes.
  const std::size_t first_cls = cfg.include_background_in_dice ? 0 : 1;
  if (first_cls >= c) throw ShapeError("dice loss needs at least one scored class");
  std::vector<Value> dice_terms;
  for (std::size_t cls = first_cls; cls < c; ++cls) {
    Value p_c = narrow(probs, 1, cls, 1);
    Value y_c = narrow(targets, 1, cls, 1);
    Value inter = sum_all(mul(p_c, y_c));
    Value denom = add(sum_all(p_c), sum_all(y_c));
    Value ratio = div(add_scalar(scale(inter, 2.0), cfg.dice_smooth), add_scalar(denom, cfg.dice_smooth));
    dice_terms.push_back(add_scalar(neg(ratio), 1.0));
  }
  Value dice = dice_terms.front();
  for (std::size_t i = 1; i < dice_terms.size(); ++i) dice = add(dice, dice_terms[i]);
  dice = scale(dice, 1.0 / static_cast<double>(dice_terms.size()));

  LossParts parts{add(dice, ce), dice.val().item(), ce.val().item()};
  return parts;
}

Value dice_ce_loss(const Value& probs, const Tensor& labels, const LossConfig& cfg) {
  return dice_ce_loss_parts(probs, labels, cfg).total;
}

// --- optimizer -----------------------------------------------------------------

void sgd_step_single(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum) {
  if (!param.same_shape(grad) || !param.same_shape(velocity)) {
    throw ShapeError("sgd_step shape mismatch: param " + shape_str(param.shape()) + ", grad " +
                     shape_str(grad.shape()) + ", velocity " + shape_str(velocity.shape()));
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

SgdOptimizer::SgdOptimizer(ModelVars& model, OptimizerConfig cfg) : cfg_(cfg) {
  for_each_param(model, [this](const std::string&, Value& v) {
    velocity_.push_back(Tensor::zeros(v.val().shape()));
  });
}

double SgdOptimizer::lr_at(std::size_t epoch, std::size_t total_epochs) const {
  if (cfg_.schedule == LrSchedule::Constant) return cfg_.lr;
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return cfg_.lr * std::pow(std::max(frac, 0.0), cfg_.poly_exponent);
}

void SgdOptimizer::step(ModelVars& model, double lr) {
  std::size_t i = 0;
  for_each_param(model, [&](const std::string&, Value& v) {
    Tensor p = v.val();
    sgd_step_single(p, v.grad(), velocity_[i], lr, cfg_.momentum);
    v.set_value(std::move(p));
    ++i;
  });
  if (i != velocity_.size()) throw ShapeError("optimizer state does not match the model");
}

void SgdOptimizer::zero_grad(ModelVars& model) {
  for_each_param(model, [](const std::string&, Value& v) { v.zero_grad(); });
}

// --- evaluation helpers -----------------------------------------------------------

LabelMask predict_mask(const ModelVars& m, const Tensor& image) {
  NoGradGuard guard;
  Tensor batched = reshape(image, {1, image.extent(0), image.extent(1), image.extent(2)});
  Tensor probs = forward(m, Value::constant(batched)).val();
  const std::size_t c = probs.extent(1), plane = probs.extent(2) * probs.extent(3);
  Tensor labels({probs.extent(2), probs.extent(3)});
  for (std::size_t i = 0; i < plane; ++i) {
    std::size_t best = 0;
    double best_p = probs[i];
    for (std::size_t cls = 1; cls < c; ++cls) {
      const double p = probs[cls * plane + i];
      if (p > best_p) {
        best_p = p;
        best = cls;
      }
    }
    labels[i] = static_cast<double>(best);
  }
  return LabelMask{std::move(labels), c};
}

double mean_foreground_dsc(const ModelVars& m, const std::vector<SegmentationSample>& samples) {
  if (samples.empty()) throw ValueError("mean_foreground_dsc needs at least one sample");
  const std::size_t classes = m.cfg.num_classes;
  double acc = 0.0;
  for (const SegmentationSample& s : samples) {
    LabelMask pred = predict_mask(m, s.image);
    LabelMask gt{s.labels, classes};
    double sample_acc = 0.0;
    for (std::size_t cls = 1; cls < classes; ++cls) {
      sample_acc += dsc(pred, gt, static_cast<int>(cls));
    }
    acc += sample_acc / static_cast<double>(classes - 1);
  }
  return acc / static_cast<double>(samples.size());
}

// --- training loop ------------------------------------------------------------------

void TrainRunConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (optimizer.lr < 0.0) throw ConfigError("lr must be >= 0");
  if (optimizer.momentum < 0.0 || optimizer.momentum >= 1.0) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  loss.validate();
}

std::string EpochRecord::to_json() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["train_loss"] = train_loss;
  j["dice_part"] = dice_part;
  j["ce_part"] = ce_part;
  if (val_dsc) j["val_dsc"] = *val_dsc;
  j["lr"] = lr;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

TrainResult train(const TrainRunConfig& run, const Dataset& data, const EpochCallback& callback) {
  run.validate();
  if (data.samples.empty()) throw ValueError("training data is empty");

  NetworkConfig cfg = preset_config(run.preset, run.variant);
  cfg.inner_lr = run.inner_lr;
  cfg.inner_kind = run.inner_kind;
  if (data.spec.height != cfg.patch_size[0] || data.spec.width != cfg.patch_size[1]) {
    throw ConfigError("dataset " + std::to_string(data.spec.height) + "x" + std::to_string(data.spec.width) +
                      " does not match preset patch " + std::to_string(cfg.patch_size[0]) + "x" +
                      std::to_string(cfg.patch_size[1]));
  }
  if (data.spec.num_classes != cfg.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.spec.num_classes) + " classes, preset expects " +
                      std::to_string(cfg.num_classes));
  }

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    if (run.use_validation_split && is_validation_sample(data.samples[i].id)) {
      val_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  if (train_idx.empty()) throw ValueError("training split is empty");

  Rng init_rng(run.seed);
  TrainResult result{build_model(cfg, init_rng), {}, 0};
  ModelVars& model = result.model;
  SgdOptimizer opt(model, run.optimizer);

  std::ofstream log_stream;
  if (!run.out_dir.empty()) {
    fs::create_directories(run.out_dir);
    log_stream.open(fs::path(run.out_dir) / "log.jsonl", std::ios::binary | std::ios::trunc);
    if (!log_stream) throw IoError("cannot open training log in " + run.out_dir);
  }

  const std::size_t batches = (train_idx.size() + run.batch_size - 1) / run.batch_size;
  for (std::size_t epoch = 0; epoch < run.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = opt.lr_at(epoch, run.epochs);

    std::vector<std::size_t> order = train_idx;
    Rng shuffle_rng = Rng(run.seed).fork(0xE0C0u + epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
    }

    double loss_acc = 0.0, dice_acc = 0.0, ce_acc = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * run.batch_size;
      const std::size_t hi = std::min(order.size(), lo + run.batch_size);
      if (lo >= hi) break;
      SgdOptimizer::zero_grad(model);
      const double inv_batch = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const SegmentationSample& s = data.samples[order[i]];
        try {
          Value x = Value::constant(
              reshape(s.image, {1, s.image.extent(0), s.image.extent(1), s.image.extent(2)}));
          Value probs = forward(model, x, run.scan_mode);
          Tensor labels = reshape(s.labels, {1, s.labels.extent(0), s.labels.extent(1)});
          LossParts parts = dice_ce_loss_parts(probs, labels, run.loss);
          const double sample_loss = parts.total.val().item();
          if (!std::isfinite(sample_loss)) {
            throw NumericError("non-finite loss");
          }
          loss_acc += sample_loss;
          dice_acc += parts.dice_part;
          ce_acc += parts.ce_part;
          backward(scale(parts.total, inv_batch));
        } catch (const NumericError& e) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " +
                             std::to_string(b) + ": " + e.what());
        }
      }
      opt.step(model, lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_acc / static_cast<double>(train_idx.size());
    rec.dice_part = dice_acc / static_cast<double>(train_idx.size());
    rec.ce_part = ce_acc / static_cast<double>(train_idx.size());
    rec.lr = lr;
    if (!val_idx.empty()) {
      std::vector<SegmentationSample> val_samples;
      val_samples.reserve(val_idx.size());
      for (std::size_t i : val_idx) val_samples.push_back(data.samples[i]);
      rec.val_dsc = mean_foreground_dsc(model, val_samples);
    }
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(rec);
    result.epochs_run = epoch + 1;
    if (log_stream) {
      log_stream << rec.to_json() << "\n";
      log_stream.flush();
    }

    if (!run.out_dir.empty() && run.checkpoint_interval > 0 && (epoch + 1) % run.checkpoint_interval == 0) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "checkpoint_epoch_%04zu", epoch + 1);
      save_checkpoint(model, (fs::path(run.out_dir) / buf).string());
    }
    if (callback && !callback(epoch, model)) break;
  }

  if (!run.out_dir.empty()) {
    save_checkpoint(model, (fs::path(run.out_dir) / "checkpoint_final").string());
  }
  return result;
}

}  // namespace tttseg
