// tttseg: synthetic-data generation, training, evaluation, prediction and
// gradient verification for the TTT-UNet segmentation stack.
//
// Exit codes: 0 success, 1 verification failure, 2 invalid input/config,
// 3 runtime divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "tttseg/cli_config.hpp"
#include "tttseg/dataio.hpp"
#include "tttseg/gradcheck_suite.hpp"
#include "tttseg/training.hpp"

namespace fs = std::filesystem;
using namespace tttseg;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--set", args.overrides, "dotted-path override key=value (repeatable)");
}

nlohmann::json resolve_config(const CommonArgs& args) {
  nlohmann::json config = cli::load_config(args.config_path);
  for (const std::string& o : args.overrides) cli::apply_override(config, o);
  return config;
}

int cmd_gen_data(const nlohmann::json& config) {
  cli::require_known_keys(config,
                          {"out", "height", "width", "num_classes", "min_shapes", "max_shapes",
                           "noise_std", "seed", "count"},
                          "gen-data");
  SyntheticSpec spec;
  spec.height = static_cast<std::size_t>(cli::get_int(config, "height", 64));
  spec.width = static_cast<std::size_t>(cli::get_int(config, "width", 64));
  spec.num_classes = static_cast<std::size_t>(cli::get_int(config, "num_classes", 3));
  spec.min_shapes = static_cast<std::size_t>(cli::get_int(config, "min_shapes", 1));
  spec.max_shapes = static_cast<std::size_t>(cli::get_int(config, "max_shapes", 3));
  spec.noise_std = cli::get_num(config, "noise_std", 0.05);
  spec.seed = static_cast<std::uint64_t>(cli::get_int(config, "seed", 0));
  spec.count = static_cast<std::size_t>(cli::get_int(config, "count", 1000));
  const std::string out = cli::require_str(config, "out", "gen-data");
  Dataset d = generate(spec);
  save_dataset(d, out);
  std::cout << "wrote " << d.samples.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const nlohmann::json& config) {
  cli::require_known_keys(config,
                          {"data", "out", "preset", "variant", "epochs", "batch_size", "seed", "lr",
                           "momentum", "schedule", "poly_exponent", "eta", "inner_model",
                           "checkpoint_interval", "val_split", "scan_mode", "stop_train_dsc",
                           "dsc_check_interval"},
                          "train");
  const std::string data_dir = cli::require_str(config, "data", "train");
  TrainRunConfig run;
  run.out_dir = cli::require_str(config, "out", "train");
  run.preset = cli::get_str(config, "preset", "synthetic64");
  run.variant = variant_from_name(cli::get_str(config, "variant", "bot"));
  run.epochs = static_cast<std::size_t>(cli::get_int(config, "epochs", 50));
  run.batch_size = static_cast<std::size_t>(cli::get_int(config, "batch_size", 2));
  run.seed = static_cast<std::uint64_t>(cli::get_int(config, "seed", 0));
  run.optimizer.lr = cli::get_num(config, "lr", 1e-2);
  run.optimizer.momentum = cli::get_num(config, "momentum", 0.9);
  const std::string schedule = cli::get_str(config, "schedule", "constant");
  if (schedule == "constant") {
    run.optimizer.schedule = LrSchedule::Constant;
  } else if (schedule == "poly") {
    run.optimizer.schedule = LrSchedule::Poly;
  } else {
    throw ConfigError("train: schedule must be 'constant' or 'poly', got '" + schedule + "'");
  }
  run.optimizer.poly_exponent = cli::get_num(config, "poly_exponent", 0.9);
  run.inner_lr = cli::get_num(config, "eta", 0.1);
  const std::string inner = cli::get_str(config, "inner_model", "linear");
  if (inner == "linear") {
    run.inner_kind = InnerModelKind::Linear;
  } else if (inner == "mlp") {
    run.inner_kind = InnerModelKind::Mlp;
  } else {
    throw ConfigError("train: inner_model must be 'linear' or 'mlp', got '" + inner + "'");
  }
  run.checkpoint_interval = static_cast<std::size_t>(cli::get_int(config, "checkpoint_interval", 0));
  run.use_validation_split = cli::get_bool(config, "val_split", false);
  const std::string scan_mode = cli::get_str(config, "scan_mode", "differentiable");
  if (scan_mode == "differentiable") {
    run.scan_mode = ScanMode::Differentiable;
  } else if (scan_mode == "stop_gradient") {
    run.scan_mode = ScanMode::StopGradient;
  } else {
    throw ConfigError("train: scan_mode must be 'differentiable' or 'stop_gradient'");
  }
  const double stop_dsc = cli::get_num(config, "stop_train_dsc", -1.0);
  const std::size_t check_every = static_cast<std::size_t>(cli::get_int(config, "dsc_check_interval", 5));

  Dataset data = load_dataset(data_dir);
  EpochCallback callback;
  if (stop_dsc > 0.0) {
    callback = [&](std::size_t epoch, ModelVars& model) {
      if ((epoch + 1) % check_every != 0) return true;
      const double dsc_now = mean_foreground_dsc(model, data.samples);
      std::cerr << "epoch " << epoch << ": train mean foreground DSC " << dsc_now << "\n";
      return dsc_now < stop_dsc;
    };
  }
  TrainResult result = train(run, data, callback);
  std::cout << "trained " << result.epochs_run << " epochs; final loss "
            << result.log.back().train_loss << "; checkpoint at " << run.out_dir
            << "/checkpoint_final\n";
  return 0;
}

std::vector<SegmentationSample> split_samples(const Dataset& data, const std::string& split) {
  if (split != "all" && split != "train" && split != "val") {
    throw ConfigError("split must be one of all, train, val; got '" + split + "'");
  }
  std::vector<SegmentationSample> out;
  for (const SegmentationSample& s : data.samples) {
    const bool is_val = is_validation_sample(s.id);
    if (split == "all" || (split == "val" && is_val) || (split == "train" && !is_val)) {
      out.push_back(s);
    }
  }
  if (out.empty()) throw ValueError("split '" + split + "' selected no samples");
  return out;
}

int cmd_eval(const nlohmann::json& config) {
  cli::require_known_keys(
      config, {"checkpoint", "data", "split", "tau", "iou_threshold", "out", "predictions_out", "export_pgm"},
      "eval");
  const std::string ckpt = cli::require_str(config, "checkpoint", "eval");
  const std::string data_dir = cli::require_str(config, "data", "eval");
  const std::string split = cli::get_str(config, "split", "all");
  const double tau = cli::get_num(config, "tau", 1.0);
  const double iou = cli::get_num(config, "iou_threshold", 0.5);
  const std::string out = cli::get_str(config, "out", "");
  const std::string preds_out = cli::get_str(config, "predictions_out", "");
  const bool with_pgm = cli::get_bool(config, "export_pgm", false);

  ModelVars model = load_checkpoint(ckpt);
  Dataset data = load_dataset(data_dir);
  if (data.spec.num_classes != model.cfg.num_classes || data.spec.height != model.cfg.patch_size[0] ||
      data.spec.width != model.cfg.patch_size[1]) {
    throw ConfigError("checkpoint and dataset shapes are incompatible");
  }
  const auto samples = split_samples(data, split);

  MetricsAccumulator acc(model.cfg.num_classes, tau, model.cfg.num_classes == 2, iou);
  std::vector<std::pair<std::string, LabelMask>> preds;
  for (const SegmentationSample& s : samples) {
    LabelMask pred = predict_mask(model, s.image);
    acc.add(pred, LabelMask{s.labels, model.cfg.num_classes});
    if (!preds_out.empty()) preds.emplace_back(s.id, std::move(pred));
  }
  if (!preds_out.empty()) save_predictions(preds, preds_out, with_pgm);
  const std::string report = acc.finalize().to_json();
  if (out.empty()) {
    std::cout << report << "\n";
  } else {
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write report to " + out);
    f << report << "\n";
    std::cout << "wrote metrics report to " << out << "\n";
  }
  return 0;
}

int cmd_predict(const nlohmann::json& config) {
  cli::require_known_keys(config, {"checkpoint", "data", "split", "out", "export_pgm"}, "predict");
  const std::string ckpt = cli::require_str(config, "checkpoint", "predict");
  const std::string data_dir = cli::require_str(config, "data", "predict");
  const std::string out = cli::require_str(config, "out", "predict");
  const std::string split = cli::get_str(config, "split", "all");
  const bool with_pgm = cli::get_bool(config, "export_pgm", true);

  ModelVars model = load_checkpoint(ckpt);
  Dataset data = load_dataset(data_dir);
  if (data.spec.height != model.cfg.patch_size[0] || data.spec.width != model.cfg.patch_size[1]) {
    throw ConfigError("checkpoint and dataset shapes are incompatible");
  }
  const auto samples = split_samples(data, split);
  std::vector<std::pair<std::string, LabelMask>> preds;
  preds.reserve(samples.size());
  for (const SegmentationSample& s : samples) preds.emplace_back(s.id, predict_mask(model, s.image));
  save_predictions(preds, out, with_pgm);
  std::cout << "wrote " << preds.size() << " predictions to " << out << "\n";
  return 0;
}

int cmd_gradcheck(const nlohmann::json& config) {
  cli::require_known_keys(config, {"only", "perturb", "seed", "micro_model_coords", "out"}, "gradcheck");
  SuiteOptions opts;
  opts.only = cli::get_str(config, "only", "");
  opts.perturb = cli::get_str(config, "perturb", "");
  opts.seed = static_cast<std::uint64_t>(cli::get_int(config, "seed", 3));
  opts.micro_model_coords =
      static_cast<std::size_t>(cli::get_int(config, "micro_model_coords", 1000));
  const std::string out = cli::get_str(config, "out", "");
  const auto checks = run_gradcheck_suite(opts);
  if (checks.empty()) throw ConfigError("gradcheck: filter '" + opts.only + "' matched no checks");
  std::size_t passed = 0;
  const SuiteCheck* worst = nullptr;
  for (const SuiteCheck& c : checks) {
    std::printf("%-4s %-18s max_rel=%.3e (threshold %.0e, %zu coords)\n", c.passed ? "ok" : "FAIL",
                c.name.c_str(), c.max_rel_error, c.threshold, c.coords_checked);
    passed += c.passed;
    if (worst == nullptr || c.max_rel_error / c.threshold > worst->max_rel_error / worst->threshold) {
      worst = &c;
    }
  }
  std::printf("gradcheck: %zu/%zu passed; worst offender: %s (max_rel=%.3e)\n", passed, checks.size(),
              worst->name.c_str(), worst->max_rel_error);
  if (!out.empty()) {
    nlohmann::json report = nlohmann::json::array();
    for (const SuiteCheck& c : checks) {
      report.push_back({{"name", c.name},
                        {"max_rel_error", c.max_rel_error},
                        {"threshold", c.threshold},
                        {"coords_checked", c.coords_checked},
                        {"passed", c.passed}});
    }
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write gradcheck report to " + out);
    f << report.dump(2) << "\n";
  }
  return passed == checks.size() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TTT-UNet segmentation toolkit"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, predict_args, grad_args;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_args);
  std::string gen_out, gen_seed, gen_count;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--count", gen_count, "sample count");

  CLI::App* tr = app.add_subcommand("train", "train a model");
  add_common(tr, train_args);
  std::string tr_data, tr_out, tr_preset, tr_variant, tr_epochs, tr_seed, tr_stop, tr_batch;
  tr->add_option("--data", tr_data, "dataset directory");
  tr->add_option("--out", tr_out, "run output directory");
  tr->add_option("--preset", tr_preset, "network preset name");
  tr->add_option("--variant", tr_variant, "bot, enc or none");
  tr->add_option("--epochs", tr_epochs, "epoch count");
  tr->add_option("--batch-size", tr_batch, "batch size");
  tr->add_option("--seed", tr_seed, "rng seed");
  tr->add_option("--stop-train-dsc", tr_stop, "stop once training DSC reaches this value");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_args);
  std::string ev_ckpt, ev_data, ev_split, ev_tau, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory");
  ev->add_option("--data", ev_data, "dataset directory");
  ev->add_option("--split", ev_split, "all, train or val");
  ev->add_option("--tau", ev_tau, "NSD tolerance in pixels");
  ev->add_option("--out", ev_out, "report output file (default stdout)");

  CLI::App* pr = app.add_subcommand("predict", "write predicted masks");
  add_common(pr, predict_args);
  std::string pr_ckpt, pr_data, pr_out;
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint directory");
  pr->add_option("--data", pr_data, "dataset directory");
  pr->add_option("--out", pr_out, "predictions output directory");

  CLI::App* gc = app.add_subcommand("gradcheck", "run the gradient verification suite");
  add_common(gc, grad_args);
  std::string gc_only, gc_perturb, gc_seed;
  gc->add_option("--only", gc_only, "run only checks containing this substring");
  gc->add_option("--perturb", gc_perturb, "inject a broken backward into the named check");
  gc->add_option("--seed", gc_seed, "rng seed");

  CLI11_PARSE(app, argc, argv);

  auto with_flag = [](nlohmann::json& config, const std::string& key, const std::string& value) {
    if (!value.empty()) cli::apply_override(config, key + "=" + value);
  };

  try {
    if (gen->parsed()) {
      nlohmann::json config = resolve_config(gen_args);
      with_flag(config, "out", gen_out);
      with_flag(config, "seed", gen_seed);
      with_flag(config, "count", gen_count);
      return cmd_gen_data(config);
    }
    if (tr->parsed()) {
      nlohmann::json config = resolve_config(train_args);
      with_flag(config, "data", tr_data);
      with_flag(config, "out", tr_out);
      with_flag(config, "preset", tr_preset);
      with_flag(config, "variant", tr_variant);
      with_flag(config, "epochs", tr_epochs);
      with_flag(config, "batch_size", tr_batch);
      with_flag(config, "seed", tr_seed);
      with_flag(config, "stop_train_dsc", tr_stop);
      return cmd_train(config);
    }
    if (ev->parsed()) {
      nlohmann::json config = resolve_config(eval_args);
      with_flag(config, "checkpoint", ev_ckpt);
      with_flag(config, "data", ev_data);
      with_flag(config, "split", ev_split);
      with_flag(config, "tau", ev_tau);
      with_flag(config, "out", ev_out);
      return cmd_eval(config);
    }
    if (pr->parsed()) {
      nlohmann::json config = resolve_config(predict_args);
      with_flag(config, "checkpoint", pr_ckpt);
      with_flag(config, "data", pr_data);
      with_flag(config, "out", pr_out);
      return cmd_predict(config);
    }
    if (gc->parsed()) {
      nlohmann::json config = resolve_config(grad_args);
      with_flag(config, "only", gc_only);
      with_flag(config, "perturb", gc_perturb);
      with_flag(config, "seed", gc_seed);
      return cmd_gradcheck(config);
    }
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
