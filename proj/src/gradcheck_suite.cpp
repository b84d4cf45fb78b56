#include "tttseg/gradcheck_suite.hpp"

#include <functional>

#include "tttseg/training.hpp"

namespace tttseg {

namespace {

using CheckFn = std::function<Value(const std::vector<Value>&)>;

struct CheckDef {
  std::string name;
  double threshold;
  std::vector<std::pair<std::string, Tensor>> params;
  CheckFn fn;
  std::size_t max_coords = 1000;
};

Tensor nudged(Rng& rng, Shape shape) {
  Tensor t = rng.normal_tensor(std::move(shape), 0.0, 1.0);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (std::abs(t[i]) < 1e-3) t[i] = t[i] < 0.0 ? t[i] - 1e-3 : t[i] + 1e-3;
  }
  return t;
}

std::vector<CheckDef> build_checks(std::uint64_t seed, std::size_t micro_coords) {
  std::vector<CheckDef> defs;
  Rng rng(seed);

  {
    Tensor a = rng.normal_tensor({4, 3}, 0, 1);
    Tensor b = rng.normal_tensor({4, 3}, 0.5, 1);
    Tensor probe = rng.normal_tensor({4, 3}, 0, 1);
    defs.push_back(
        {"elementwise", 1e-5, {{"a", a}, {"b", b}}, [probe](const std::vector<Value>& p) {
           Value mixed = add(mul(p[0], p[1]), div(p[0], add_scalar(mul(p[1], p[1]), 1.0)));
           return sum_all(mul(sub(mixed, scale(neg(p[1]), 0.25)), Value::constant(probe)));
         }});
  }
  {
    Tensor a = rng.normal_tensor({3, 5}, 0, 1);
    Tensor b = rng.normal_tensor({5, 2}, 0, 1);
    Tensor probe = rng.normal_tensor({3, 2}, 0, 1);
    defs.push_back({"matmul", 1e-5, {{"a", a}, {"b", b}}, [probe](const std::vector<Value>& p) {
                      return sum_all(mul(matmul(p[0], p[1]), Value::constant(probe)));
                    }});
  }
  {
    Tensor a = rng.normal_tensor({3, 4}, 0, 1);
    defs.push_back({"reductions", 1e-5, {{"a", a}}, [](const std::vector<Value>& p) {
                      return add(mean_all(mul(p[0], p[0])), scale(sum_all(p[0]), 0.25));
                    }});
  }
  {
    Tensor a = rng.normal_tensor({2, 3, 4}, 0, 1);
    Tensor probe = rng.normal_tensor({4, 6}, 0, 1);
    defs.push_back({"layout", 1e-5, {{"a", a}}, [probe](const std::vector<Value>& p) {
                      Value r = reshape(transpose(p[0], {2, 0, 1}), {4, 6});
                      Value left = narrow(r, 1, 0, 2);
                      Value right = narrow(r, 1, 2, 4);
                      return sum_all(mul(concat({left, right}, 1), Value::constant(probe)));
                    }});
  }
  {
    Tensor a = rng.normal_tensor({6}, 0.0, 1.0);
    defs.push_back({"pointwise", 1e-5, {{"a", a}}, [](const std::vector<Value>& p) {
                      return sum_all(mul(tanh(p[0]), log_clamped(add_scalar(mul(p[0], p[0]), 0.3))));
                    }});
  }
  {
    Tensor x = rng.normal_tensor({2, 2, 4, 4}, 0, 1);
    Tensor w = rng.normal_tensor({3, 2, 3, 3}, 0, 0.5);
    Tensor b = rng.normal_tensor({3}, 0, 0.5);
    Tensor probe = rng.normal_tensor({2, 3, 4, 4}, 0, 1);
    defs.push_back(
        {"conv2d", 1e-5, {{"x", x}, {"w", w}, {"b", b}}, [probe](const std::vector<Value>& p) {
           return sum_all(mul(conv2d(p[0], p[1], p[2], 1, 1, 1, 1), Value::constant(probe)));
         }});
  }
  {
    Tensor x = rng.normal_tensor({1, 2, 5, 5}, 0, 1);
    Tensor w = rng.normal_tensor({2, 2, 2, 2}, 0, 0.5);
    Tensor probe = rng.normal_tensor({1, 2, 3, 3}, 0, 1);
    defs.push_back({"conv2d_strided", 1e-5, {{"x", x}, {"w", w}}, [probe](const std::vector<Value>& p) {
                      return sum_all(mul(conv2d(p[0], p[1], Value(), 2, 2, 1, 1), Value::constant(probe)));
                    }});
  }
  {
    Tensor x = rng.normal_tensor({1, 3, 3, 3}, 0, 1);
    Tensor w = rng.normal_tensor({3, 2, 2, 2}, 0, 0.5);
    Tensor b = rng.normal_tensor({2}, 0, 0.5);
    Tensor probe = rng.normal_tensor({1, 2, 6, 6}, 0, 1);
    defs.push_back(
        {"conv_transpose2d", 1e-5, {{"x", x}, {"w", w}, {"b", b}}, [probe](const std::vector<Value>& p) {
           return sum_all(mul(conv_transpose2d(p[0], p[1], p[2], 2, 2, 0, 0), Value::constant(probe)));
         }});
  }
  {
    Tensor x = rng.normal_tensor({2, 2, 3, 3}, 0.4, 1.0);
    Tensor gain = rng.normal_tensor({2}, 1.0, 0.2);
    Tensor offset = rng.normal_tensor({2}, 0.0, 0.2);
    Tensor probe = rng.normal_tensor({2, 2, 3, 3}, 0, 1);
    defs.push_back({"instance_norm", 1e-5, {{"x", x}, {"gain", gain}, {"offset", offset}},
                    [probe](const std::vector<Value>& p) {
                      return sum_all(mul(instance_norm(p[0], p[1], p[2]), Value::constant(probe)));
                    }});
  }
  {
    Tensor x = rng.normal_tensor({5, 4}, 0, 1);
    Tensor gain = rng.normal_tensor({4}, 1.0, 0.2);
    Tensor offset = rng.normal_tensor({4}, 0.0, 0.2);
    Tensor probe = rng.normal_tensor({5, 4}, 0, 1);
    defs.push_back({"layer_norm", 1e-5, {{"x", x}, {"gain", gain}, {"offset", offset}},
                    [probe](const std::vector<Value>& p) {
                      return sum_all(mul(layer_norm(p[0], p[1], p[2]), Value::constant(probe)));
                    }});
  }
  {
    Tensor x = nudged(rng, {4, 4});
    Tensor probe = rng.normal_tensor({4, 4}, 0, 1);
    defs.push_back({"leaky_relu", 1e-5, {{"x", x}}, [probe](const std::vector<Value>& p) {
                      return sum_all(mul(leaky_relu(p[0]), Value::constant(probe)));
                    }});
    defs.push_back({"silu", 1e-5, {{"x", x}}, [probe](const std::vector<Value>& p) {
                      return sum_all(mul(silu(p[0]), Value::constant(probe)));
                    }});
    defs.push_back({"gelu", 1e-5, {{"x", x}}, [probe](const std::vector<Value>& p) {
                      return sum_all(mul(gelu(p[0]), Value::constant(probe)));
                    }});
    defs.push_back({"softmax", 1e-5, {{"x", x}}, [probe](const std::vector<Value>& p) {
                      return sum_all(mul(softmax(p[0], 1), Value::constant(probe)));
                    }});
  }
  {
    Tensor x = rng.normal_tensor({5, 3}, 0, 1);
    Tensor w = rng.normal_tensor({3, 3}, 0, 0.5);
    Tensor b = rng.normal_tensor({3}, 0, 0.5);
    Tensor probe = rng.normal_tensor({5, 3}, 0, 1);
    defs.push_back(
        {"linear_tokens", 1e-5, {{"x", x}, {"w", w}, {"b", b}}, [probe](const std::vector<Value>& p) {
          return sum_all(mul(linear_tokens(p[0], p[1], p[2]), Value::constant(probe)));
        }});
    Tensor kw = rng.normal_tensor({3, 3}, 0, 0.5);
    defs.push_back({"causal_dwconv", 1e-5, {{"x", x}, {"kw", kw}}, [probe](const std::vector<Value>& p) {
                      return sum_all(mul(causal_dwconv(p[0], p[1]), Value::constant(probe)));
                    }});
  }
  {
    // Single inner step, linear model: output depends on every projection.
    TTTLayerParams layer = TTTLayerParams::init(3, InnerModelKind::Linear, rng);
    Tensor x = rng.normal_tensor({3, 1}, 0, 1);
    Tensor probe = rng.normal_tensor({3, 1}, 0, 1);
    const double eta = layer.inner_lr;
    defs.push_back({"ttt_step",
                    1e-5,
                    {{"train_proj", layer.train_proj},
                     {"label_proj", layer.label_proj},
                     {"test_proj", layer.test_proj},
                     {"inner_w", layer.inner_init.w},
                     {"x", x}},
                    [probe, eta](const std::vector<Value>& p) {
                      TTTLayerVars v;
                      v.train_proj = p[0];
                      v.label_proj = p[1];
                      v.test_proj = p[2];
                      v.inner_init.kind = InnerModelKind::Linear;
                      v.inner_init.w = p[3];
                      v.inner_lr = eta;
                      TTTScanState state{v.inner_init, 0};
                      auto [z, next] = ttt_step(state, p[4], v);
                      return sum_all(mul(z, Value::constant(probe)));
                    }});
  }
  {
    TTTLayerParams layer = TTTLayerParams::init(2, InnerModelKind::Mlp, rng);
    Tensor x = rng.normal_tensor({2, 1}, 0, 1);
    Tensor probe = rng.normal_tensor({2, 1}, 0, 1);
    const double eta = 0.05;
    defs.push_back({"ttt_step_mlp",
                    1e-5,
                    {{"w1", layer.inner_init.w1},
                     {"b1", layer.inner_init.b1},
                     {"w2", layer.inner_init.w2},
                     {"b2", layer.inner_init.b2},
                     {"x", x}},
                    [probe, eta, layer](const std::vector<Value>& p) {
                      TTTLayerVars v;
                      v.train_proj = Value::constant(layer.train_proj);
                      v.label_proj = Value::constant(layer.label_proj);
                      v.test_proj = Value::constant(layer.test_proj);
                      v.inner_init.kind = InnerModelKind::Mlp;
                      v.inner_init.w1 = p[0];
                      v.inner_init.b1 = p[1];
                      v.inner_init.w2 = p[2];
                      v.inner_init.b2 = p[3];
                      v.inner_lr = eta;
                      TTTScanState state{v.inner_init, 0};
                      auto [z, next] = ttt_step(state, p[4], v);
                      return sum_all(mul(z, Value::constant(probe)));
                    }});
  }
  {
    // Unrolled scan, T=4 tokens of dimension 3.
    TTTLayerParams layer = TTTLayerParams::init(3, InnerModelKind::Linear, rng);
    Tensor x = rng.normal_tensor({4, 3}, 0, 1);
    Tensor probe = rng.normal_tensor({4, 3}, 0, 1);
    const double eta = layer.inner_lr;
    defs.push_back({"ttt_scan",
                    1e-5,
                    {{"train_proj", layer.train_proj},
                     {"label_proj", layer.label_proj},
                     {"test_proj", layer.test_proj},
                     {"inner_w", layer.inner_init.w},
                     {"x", x}},
                    [probe, eta](const std::vector<Value>& p) {
                      TTTLayerVars v;
                      v.train_proj = p[0];
                      v.label_proj = p[1];
                      v.test_proj = p[2];
                      v.inner_init.kind = InnerModelKind::Linear;
                      v.inner_init.w = p[3];
                      v.inner_lr = eta;
                      return sum_all(mul(ttt_scan(p[4], v), Value::constant(probe)));
                    }});
  }
  {
    Rng lr(seed ^ 0xD1CE);
    NoGradGuard guard;
    Tensor logits = lr.normal_tensor({1, 2, 4, 4}, 0.0, 0.7);
    Tensor probs = softmax(Value::constant(logits), 1).val();
    Tensor labels({1, 4, 4});
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<double>(lr.uniform_int(2));
    defs.push_back({"dice_ce_loss", 1e-5, {{"probs", probs}}, [labels](const std::vector<Value>& p) {
                      return dice_ce_loss(p[0], labels, LossConfig{});
                    }});
  }
  {
    // Full micro TTT-UNet: 16x16 input, 3 stages, TTT mixer at the bottleneck.
    NetworkConfig cfg = preset_config("micro16", NetworkVariant::Bot);
    Rng mr(seed ^ 0xA11CE);
    ModelVars model = build_model(cfg, mr);
    Tensor x = mr.normal_tensor({1, 1, 16, 16}, 0, 1);
    Tensor probe = mr.normal_tensor({1, cfg.num_classes, 16, 16}, 0, 1);
    std::vector<std::pair<std::string, Tensor>> params;
    for_each_param(model, [&](const std::string& n, Value& v) { params.emplace_back(n, v.val()); });
    auto model_copy = std::make_shared<ModelVars>(model);
    CheckDef def;
    def.name = "micro_model";
    def.threshold = 1e-4;  // looser than unit level due to depth
    def.params = std::move(params);
    def.max_coords = micro_coords;
    def.fn = [model_copy, x, probe](const std::vector<Value>& leaves) {
      ModelVars shadow = *model_copy;
      std::size_t i = 0;
      for_each_param(shadow, [&](const std::string&, Value& v) { v = leaves[i++]; });
      return sum_all(mul(forward(shadow, Value::constant(x)), Value::constant(probe)));
    };
    defs.push_back(std::move(def));
  }
  return defs;
}

}  // namespace

std::vector<SuiteCheck> run_gradcheck_suite(const SuiteOptions& opts) {
  std::vector<SuiteCheck> results;
  for (CheckDef& def : build_checks(opts.seed, opts.micro_model_coords)) {
    if (!opts.only.empty() && def.name.find(opts.only) == std::string::npos) continue;
    CheckFn fn = def.fn;
    if (opts.perturb == def.name) {
      CheckFn inner = def.fn;
      fn = [inner](const std::vector<Value>& p) { return grad_scale(inner(p), 1.001); };
    }
    GradCheckOpts gopts;
    gopts.seed = opts.seed;
    gopts.max_coords_per_param = def.max_coords;
    GradReport rep = gradcheck(fn, def.params, gopts);
    SuiteCheck out;
    out.name = def.name;
    out.threshold = def.threshold;
    out.max_rel_error = rep.max_rel_error;
    for (const auto& p : rep.params) out.coords_checked += p.coords_checked;
    out.passed = rep.max_rel_error < def.threshold;
    results.push_back(std::move(out));
  }
  return results;
}

}  // namespace tttseg
