// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Runs with TTT_SEG_THREADS=1 so outputs are bit-reproducible.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tttseg/gradcheck_suite.hpp"
#include "tttseg/training.hpp"

using namespace tttseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_workdir;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string check_runtime(double elapsed, double budget) {
  if (elapsed < budget) return "";
  std::ostringstream os;
  os << "runtime " << elapsed << " s exceeds the " << budget << " s budget";
  return os.str();
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// --- criterion 1: closed-form inner-gradient oracle ---------------------------

std::string criterion_closed_form() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  for (std::size_t d : {1, 2, 4, 8}) {
    for (int trial = 0; trial < 25; ++trial) {
      Tensor w0 = rng.normal_tensor({d, d}, 0, 1);
      Tensor k = rng.normal_tensor({d, 1}, 0, 1);
      Tensor v = rng.normal_tensor({d, 1}, 0, 1);
      InnerModelVars w;
      w.kind = InnerModelKind::Linear;
      w.w = Value::leaf(w0);
      backward(ttt_loss_views(w, Value::constant(k), Value::constant(v)));
      Tensor autodiff_grad = w.w.grad();
      Tensor formula = scale(matmul(sub(matmul(w0, k), v), transpose(k)), 2.0);
      for (std::size_t i = 0; i < formula.size(); ++i) {
        const double rel = std::abs(formula[i] - autodiff_grad[i]) /
                           std::max({std::abs(formula[i]), std::abs(autodiff_grad[i]), 1e-8});
        worst = std::max(worst, rel);
      }
    }
  }
  if (worst >= 1e-10) {
    return "autodiff gradient deviates from 2(Wk-v)k^T by " + std::to_string(worst);
  }
  return check_runtime(seconds_since(t0), 1.0);
}

// --- criterion 2: gradcheck suite ----------------------------------------------

std::string criterion_gradcheck_suite() {
  const auto t0 = Clock::now();
  const auto checks = run_gradcheck_suite(SuiteOptions{});
  for (const SuiteCheck& c : checks) {
    if (!c.passed) {
      std::ostringstream os;
      os << c.name << " max_rel=" << c.max_rel_error << " over threshold " << c.threshold;
      return os.str();
    }
  }
  return check_runtime(seconds_since(t0), 120.0);
}

// --- criterion 3: per-token descent ---------------------------------------------

std::string criterion_descent() {
  const auto t0 = Clock::now();
  Rng rng(77);
  for (int scan = 0; scan < 100; ++scan) {
    const std::size_t d = 1 + rng.uniform_int(4);
    const std::size_t t_len = 2 + rng.uniform_int(7);
    TTTLayerParams p = TTTLayerParams::init(d, InnerModelKind::Linear, rng);
    Tensor x = rng.normal_tensor({t_len, d}, 0, 1);
    double max_k2 = 0.0;
    {
      NoGradGuard guard;
      Tensor k_rows = linear_tokens(Value::constant(x), Value::constant(p.train_proj), Value()).val();
      for (std::size_t t = 0; t < t_len; ++t) {
        double k2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) k2 += k_rows[t * d + j] * k_rows[t * d + j];
        max_k2 = std::max(max_k2, k2);
      }
    }
    if (max_k2 == 0.0) continue;
    p.inner_lr = 0.5 / max_k2;
    TTTLayerVars v = TTTLayerVars::from(p, false);
    TTTScanState state{v.inner_init, 0};
    NoGradGuard guard;
    for (std::size_t t = 0; t < t_len; ++t) {
      Value xt = Value::constant(reshape(narrow(x, 0, t, 1), {d, 1}));
      const double before = ttt_loss(state.weights, xt, v, t).val().item();
      auto [z, next] = ttt_step(state, xt, v);
      const double after = ttt_loss(next.weights, xt, v, t).val().item();
      // Zero loss means zero gradient for the quadratic objective.
      if (before > 1e-20 && after >= before) {
        std::ostringstream os;
        os << "scan " << scan << " token " << t << ": loss " << before << " -> " << after;
        return os.str();
      }
      state = next;
    }
  }
  return check_runtime(seconds_since(t0), 10.0);
}

// --- criterion 4: stop-gradient ablation ----------------------------------------

std::string criterion_stop_gradient() {
  const auto t0 = Clock::now();
  Rng rng(99);
  TTTLayerParams p = TTTLayerParams::init(3, InnerModelKind::Linear, rng);
  Tensor x = rng.normal_tensor({5, 3}, 0, 1);
  auto label_grad = [&](ScanMode mode) {
    TTTLayerVars v;
    v.train_proj = Value::leaf(p.train_proj);
    v.label_proj = Value::leaf(p.label_proj);
    v.test_proj = Value::leaf(p.test_proj);
    v.inner_init.kind = InnerModelKind::Linear;
    v.inner_init.w = Value::leaf(p.inner_init.w);
    v.inner_lr = p.inner_lr;
    backward(sum_all(ttt_scan(Value::constant(x), v, mode)));
    return v.label_proj.grad();
  };
  Tensor sg = label_grad(ScanMode::StopGradient);
  for (std::size_t i = 0; i < sg.size(); ++i) {
    if (sg[i] != 0.0) return "stop_gradient mode leaked gradient into the label projection";
  }
  Tensor live = label_grad(ScanMode::Differentiable);
  double norm = 0.0;
  for (std::size_t i = 0; i < live.size(); ++i) norm += std::abs(live[i]);
  if (norm == 0.0) return "differentiable mode produced a zero label-projection gradient";
  return check_runtime(seconds_since(t0), 5.0);
}

// --- criterion 5: preset forward contracts ---------------------------------------

struct ForwardCapture {
  std::string preset;
  std::vector<double> output;
};

std::vector<ForwardCapture> run_preset_forwards() {
  std::vector<ForwardCapture> captures;
  for (const char* name : {"synthetic64", "2d_abdomen_mr", "endoscopy"}) {
    NetworkConfig cfg = preset_config(name, NetworkVariant::Bot);
    Rng rng(11);
    ModelVars m = build_model(cfg, rng);
    NoGradGuard guard;
    Rng xr(5);
    Tensor x = xr.normal_tensor({1, cfg.input_channels, cfg.patch_size[0], cfg.patch_size[1]}, 0, 1);
    Tensor probs = forward(m, Value::constant(x)).val();
    if (probs.shape() != Shape{1, cfg.num_classes, cfg.patch_size[0], cfg.patch_size[1]}) {
      throw NumericError(std::string(name) + ": wrong output shape " + shape_str(probs.shape()));
    }
    const std::size_t plane = cfg.patch_size[0] * cfg.patch_size[1];
    for (std::size_t i = 0; i < plane; ++i) {
      double sum = 0.0;
      for (std::size_t c = 0; c < cfg.num_classes; ++c) sum += probs[c * plane + i];
      if (std::abs(sum - 1.0) >= 1e-12) {
        throw NumericError(std::string(name) + ": pixel probability sum off by " + std::to_string(sum - 1.0));
      }
    }
    captures.push_back({name, probs.vec()});
  }
  return captures;
}

std::vector<ForwardCapture> g_forward_captures;

std::string criterion_forward_contracts() {
  const auto t0 = Clock::now();
  try {
    g_forward_captures = run_preset_forwards();
  } catch (const std::exception& e) {
    return e.what();
  }
  return check_runtime(seconds_since(t0), 60.0);
}

// --- criterion 6: metric oracles ---------------------------------------------------

std::string criterion_metric_oracles() {
  const auto t0 = Clock::now();
  Rng rng(31337);
  auto random_mask = [&](std::size_t h, std::size_t w, std::size_t classes, bool blobby) {
    Tensor t({h, w});
    if (blobby) {
      const std::size_t blobs = 1 + rng.uniform_int(4);
      for (std::size_t b = 0; b < blobs; ++b) {
        const std::size_t cls = 1 + rng.uniform_int(classes - 1);
        const std::size_t r0 = rng.uniform_int(h), c0 = rng.uniform_int(w);
        const std::size_t rh = 1 + rng.uniform_int(h / 2), cw = 1 + rng.uniform_int(w / 2);
        for (std::size_t r = r0; r < std::min(h, r0 + rh); ++r) {
          for (std::size_t c = c0; c < std::min(w, c0 + cw); ++c) t[r * w + c] = static_cast<double>(cls);
        }
      }
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(rng.uniform_int(classes));
    }
    return LabelMask{t, classes};
  };

  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 2 + rng.uniform_int(31);
    const std::size_t w = 2 + rng.uniform_int(31);
    const std::size_t classes = 2 + rng.uniform_int(3);
    const bool blobby = trial % 2 == 0;
    LabelMask p = random_mask(h, w, classes, blobby);
    LabelMask g = random_mask(h, w, classes, blobby);
    const double tau = rng.uniform() * 3.0;
    for (std::size_t cls = 1; cls < classes; ++cls) {
      const double got_dsc = dsc(p, g, static_cast<int>(cls));
      const double want_dsc = oracles::naive_dsc(p.labels, g.labels, static_cast<int>(cls));
      if (got_dsc != want_dsc) return "dsc mismatch vs brute force on trial " + std::to_string(trial);
      const double got_nsd = nsd(p, g, static_cast<int>(cls), tau);
      const double want_nsd = oracles::naive_nsd(p.labels, g.labels, static_cast<int>(cls), tau);
      if (got_nsd != want_nsd) return "nsd mismatch vs brute force on trial " + std::to_string(trial);
      if (got_dsc < 0.0 || got_dsc > 1.0 || got_nsd < 0.0 || got_nsd > 1.0) {
        return "metric outside [0,1] on trial " + std::to_string(trial);
      }
    }
    auto binarize = [](const LabelMask& m) {
      Tensor b(m.labels.shape());
      for (std::size_t i = 0; i < b.size(); ++i) b[i] = static_cast<int>(m.labels[i]) == 1 ? 1.0 : 0.0;
      return LabelMask{b, 2};
    };
    LabelMask pb = binarize(p), gb = binarize(g);
    const double got_f1 = instance_f1(pb, gb, 0.5);
    if (got_f1 != oracles::naive_instance_f1(pb.labels, gb.labels, 0.5)) {
      return "instance_f1 mismatch vs brute force on trial " + std::to_string(trial);
    }
    if (got_f1 < 0.0 || got_f1 > 1.0) return "instance_f1 outside [0,1]";
    double prev = -1.0;
    for (double tt : {0.0, 0.7, 1.4, 2.8}) {
      const double v = nsd(p, g, 1, tt);
      if (v < prev) return "nsd not monotone in tau on trial " + std::to_string(trial);
      prev = v;
    }
  }
  return check_runtime(seconds_since(t0), 30.0);
}

// --- criterion 7: desk-scale overfit ------------------------------------------------

Dataset overfit_dataset() {
  SyntheticSpec spec;
  spec.height = 64;
  spec.width = 64;
  spec.num_classes = 3;
  spec.min_shapes = 1;
  spec.max_shapes = 3;
  spec.noise_std = 0.05;
  spec.seed = 42;
  spec.count = 8;
  return generate(spec);
}

TrainRunConfig overfit_config(NetworkVariant variant, const std::string& out_dir) {
  TrainRunConfig run;
  run.preset = "synthetic64";
  run.variant = variant;
  run.epochs = 200;
  run.batch_size = 1;
  run.seed = 7;
  run.optimizer.lr = 1e-2;
  run.optimizer.momentum = 0.9;
  run.out_dir = out_dir;
  return run;
}

struct OverfitResult {
  double dsc = 0.0;
  std::size_t epochs = 0;
};

OverfitResult run_overfit(NetworkVariant variant, const std::string& out_dir, const Dataset& data) {
  TrainRunConfig run = overfit_config(variant, out_dir);
  double last_dsc = 0.0;
  auto callback = [&](std::size_t epoch, ModelVars& model) {
    if ((epoch + 1) % 5 != 0) return true;
    last_dsc = mean_foreground_dsc(model, data.samples);
    return last_dsc < 0.95;
  };
  TrainResult result = train(run, data, callback);
  if (last_dsc < 0.95) last_dsc = mean_foreground_dsc(result.model, data.samples);
  return {last_dsc, result.epochs_run};
}

std::string criterion_overfit() {
  const auto t0 = Clock::now();
  Dataset data = overfit_dataset();
  const OverfitResult bot = run_overfit(NetworkVariant::Bot, (g_workdir / "overfit_bot_a").string(), data);
  if (bot.dsc < 0.95) {
    return "bot variant reached DSC " + std::to_string(bot.dsc) + " after " + std::to_string(bot.epochs) +
           " epochs";
  }
  const OverfitResult none =
      run_overfit(NetworkVariant::None, (g_workdir / "overfit_none_a").string(), data);
  if (none.dsc < 0.95) {
    return "none ablation reached DSC " + std::to_string(none.dsc) + " after " +
           std::to_string(none.epochs) + " epochs";
  }
  return check_runtime(seconds_since(t0), 1200.0);
}

// --- criterion 8: determinism --------------------------------------------------------

std::string compare_dirs(const fs::path& a, const fs::path& b, bool ignore_wall_ms) {
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    const fs::path other = b / rel;
    if (!fs::exists(other)) return "missing file " + rel.string() + " in rerun";
    if (ignore_wall_ms && rel.filename() == "log.jsonl") continue;
    if (slurp(entry.path()) != slurp(other)) return "file " + rel.string() + " differs between runs";
  }
  return "";
}

std::string compare_logs_excluding_wall(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a), fb(b);
  if (!fa || !fb) return "missing training log";
  std::string la, lb;
  std::size_t line = 0;
  while (true) {
    const bool ga = static_cast<bool>(std::getline(fa, la));
    const bool gb = static_cast<bool>(std::getline(fb, lb));
    if (ga != gb) return "training logs differ in length";
    if (!ga) return "";
    ++line;
    // wall_ms is wall-clock measurement and may differ between reruns; every
    // other field must match bitwise.
    auto strip = [](const std::string& s) {
      const auto pos = s.find(",\"wall_ms\":");
      return pos == std::string::npos ? s : s.substr(0, pos);
    };
    if (strip(la) != strip(lb)) {
      return "training logs differ at line " + std::to_string(line);
    }
  }
}

std::string criterion_determinism() {
  // Criterion 5 rerun: bit-identical forward outputs.
  std::vector<ForwardCapture> again;
  try {
    again = run_preset_forwards();
  } catch (const std::exception& e) {
    return e.what();
  }
  if (again.size() != g_forward_captures.size()) return "forward rerun produced a different preset count";
  for (std::size_t i = 0; i < again.size(); ++i) {
    if (again[i].output != g_forward_captures[i].output) {
      return again[i].preset + ": forward outputs are not bit-identical across reruns";
    }
  }

  // Criterion 7 rerun: bit-identical loss logs (wall_ms excluded) and
  // checkpoint bytes.
  Dataset data = overfit_dataset();
  run_overfit(NetworkVariant::Bot, (g_workdir / "overfit_bot_b").string(), data);
  run_overfit(NetworkVariant::None, (g_workdir / "overfit_none_b").string(), data);
  for (const char* variant : {"bot", "none"}) {
    const fs::path a = g_workdir / (std::string("overfit_") + variant + "_a");
    const fs::path b = g_workdir / (std::string("overfit_") + variant + "_b");
    std::string err = compare_logs_excluding_wall(a / "log.jsonl", b / "log.jsonl");
    if (!err.empty()) return std::string(variant) + ": " + err;
    err = compare_dirs(a, b, true);
    if (!err.empty()) return std::string(variant) + ": " + err;
  }
  return "";
}

// --- criterion 9: serialization round trips --------------------------------------------

std::string criterion_round_trips() {
  // Dataset: save -> load -> save must reproduce bytes.
  SyntheticSpec spec;
  spec.count = 6;
  spec.seed = 9;
  Dataset d = generate(spec);
  const fs::path d1 = g_workdir / "ds_a";
  const fs::path d2 = g_workdir / "ds_b";
  save_dataset(d, d1.string());
  save_dataset(load_dataset(d1.string()), d2.string());
  std::string err = compare_dirs(d1, d2, false);
  if (!err.empty()) return "dataset: " + err;
  err = compare_dirs(d2, d1, false);
  if (!err.empty()) return "dataset: " + err;

  // Checkpoint: save -> load -> save must reproduce bytes.
  Rng rng(5);
  ModelVars m = build_model(preset_config("micro16", NetworkVariant::Bot), rng);
  const fs::path c1 = g_workdir / "ckpt_a";
  const fs::path c2 = g_workdir / "ckpt_b";
  save_checkpoint(m, c1.string());
  ModelVars loaded = load_checkpoint(c1.string());
  save_checkpoint(loaded, c2.string());
  err = compare_dirs(c1, c2, false);
  if (!err.empty()) return "checkpoint: " + err;
  err = compare_dirs(c2, c1, false);
  if (!err.empty()) return "checkpoint: " + err;
  return "";
}

}  // namespace

int main() {
  // Bit-reproducibility contract for this suite.
  setenv("TTT_SEG_THREADS", "1", 1);
  g_workdir = fs::temp_directory_path() / "tttseg_acceptance";
  fs::remove_all(g_workdir);
  fs::create_directories(g_workdir);

  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "closed-form inner-gradient oracle (1e-10, 100 seeded triples)", criterion_closed_form},
      {2, "gradcheck suite (1e-5 ops, 1e-4 micro model)", criterion_gradcheck_suite},
      {3, "per-token inner-loop descent (100 seeded scans)", criterion_descent},
      {4, "stop-gradient ablation (exact zero vs nonzero)", criterion_stop_gradient},
      {5, "preset forward shapes and softmax normalization (1e-12)", criterion_forward_contracts},
      {6, "metric brute-force oracles (200 seeded masks)", criterion_metric_oracles},
      {7, "desk-scale overfit to DSC >= 0.95 (bot and none)", criterion_overfit},
      {8, "determinism of forwards and training reruns", criterion_determinism},
      {9, "dataset and checkpoint byte round-trips", criterion_round_trips},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    const auto t0 = Clock::now();
    std::string err;
    try {
      err = c.run();
    } catch (const std::exception& e) {
      err = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (err.empty()) {
      std::printf("PASS criterion %d: %s (%.1f s)\n", c.id, c.name, secs);
    } else {
      std::printf("FAIL criterion %d: %s (%.1f s) -- %s\n", c.id, c.name, secs, err.c_str());
      ++failures;
    }
    std::fflush(stdout);
  }
  if (failures == 0) {
    std::printf("acceptance: all %zu criteria passed\n", criteria.size());
  } else {
    std::printf("acceptance: %d criteria FAILED\n", failures);
  }
  return failures == 0 ? 0 : 1;
}
