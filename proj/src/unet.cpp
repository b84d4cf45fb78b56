#include "tttseg/unet.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "tttseg/tensor_io.hpp"

namespace fs = std::filesystem;

namespace tttseg {

std::string variant_name(NetworkVariant v) {
  switch (v) {
    case NetworkVariant::Bot:
      return "bot";
    case NetworkVariant::Enc:
      return "enc";
    case NetworkVariant::None:
      return "none";
  }
  throw ValueError("unknown variant");
}

NetworkVariant variant_from_name(const std::string& name) {
  if (name == "bot") return NetworkVariant::Bot;
  if (name == "enc") return NetworkVariant::Enc;
  if (name == "none") return NetworkVariant::None;
  throw ConfigError("unknown variant '" + name + "' (expected bot, enc or none)");
}

void NetworkConfig::validate() const {
  if (stages < 2) throw ConfigError("config: stages must be >= 2");
  if (base_channels < 1 || channel_cap < base_channels) {
    throw ConfigError("config: need 1 <= base_channels <= channel_cap");
  }
  if (num_classes < 2) throw ConfigError("config: num_classes must be >= 2");
  if (input_channels < 1) throw ConfigError("config: input_channels must be >= 1");
  if (inner_lr < 0.0) throw ConfigError("config: inner_lr must be >= 0");
  if (patch_size.size() != pooling_per_axis.size() || patch_size.empty()) {
    throw ConfigError("config: patch_size and pooling_per_axis must have the same rank");
  }
  std::size_t max_pool = 0;
  for (std::size_t a = 0; a < patch_size.size(); ++a) {
    max_pool = std::max(max_pool, pooling_per_axis[a]);
    const std::size_t div = std::size_t{1} << pooling_per_axis[a];
    if (patch_size[a] % div != 0) {
      throw ConfigError("config: patch axis " + std::to_string(a) + " extent " +
                        std::to_string(patch_size[a]) + " is not divisible by 2^" +
                        std::to_string(pooling_per_axis[a]));
    }
  }
  if (stages != max_pool + 1) {
    throw ConfigError("config: stages must equal max pooling count + 1, got " + std::to_string(stages) +
                      " vs " + std::to_string(max_pool + 1));
  }
}

std::size_t NetworkConfig::stage_channels(std::size_t s) const {
  std::size_t ch = base_channels;
  for (std::size_t i = 0; i < s; ++i) {
    if (ch >= channel_cap) break;
    ch = std::min(ch * 2, channel_cap);
  }
  return std::min(ch, channel_cap);
}

bool NetworkConfig::pools_axis(std::size_t transition, std::size_t axis) const {
  return transition < pooling_per_axis.at(axis);
}

const std::vector<PresetInfo>& presets() {
  static const std::vector<PresetInfo> table = [] {
    std::vector<PresetInfo> t;
    auto cfg = [](std::vector<std::size_t> patch, std::size_t stages, std::vector<std::size_t> pooling,
                  std::size_t base, std::size_t cap, std::size_t classes, std::size_t in_ch) {
      NetworkConfig c;
      c.patch_size = std::move(patch);
      c.stages = stages;
      c.pooling_per_axis = std::move(pooling);
      c.base_channels = base;
      c.channel_cap = cap;
      c.num_classes = classes;
      c.input_channels = in_ch;
      return c;
    };
    // Desk-scale presets.
    t.push_back({"synthetic64", cfg({64, 64}, 5, {4, 4}, 16, 128, 3, 1), 2});
    t.push_back({"micro16", cfg({16, 16}, 3, {2, 2}, 4, 16, 2, 1), 2});
    // Standard 2D recipes: (patch)/(stages)/(pooling), batch from the
    // configuration table; 13 organs / 7 instruments / cell interior+boundary
    // plus background.
    t.push_back({"2d_abdomen_mr", cfg({320, 320}, 7, {6, 6}, 32, 512, 14, 1), 30});
    t.push_back({"endoscopy", cfg({384, 640}, 7, {6, 6}, 32, 512, 8, 3), 13});
    t.push_back({"microscopy", cfg({512, 512}, 8, {7, 7}, 32, 512, 3, 3), 12});
    // 3D rows, stored as configuration data only (2D kernels cannot run them).
    t.push_back({"abdomen_ct", cfg({40, 224, 192}, 6, {3, 3, 5}, 32, 320, 14, 1), 2});
    t.push_back({"3d_abdomen_mr", cfg({48, 160, 224}, 6, {3, 5, 5}, 32, 320, 14, 1), 2});
    return t;
  }();
  return table;
}

NetworkConfig preset_config(const std::string& name, NetworkVariant variant) {
  for (const PresetInfo& p : presets()) {
    if (p.name == name) {
      NetworkConfig c = p.config;
      c.variant = variant;
      return c;
    }
  }
  std::string known;
  for (const PresetInfo& p : presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

// --- construction -----------------------------------------------------------------

namespace {

Value conv_weight(Rng& rng, std::size_t oc, std::size_t ic, std::size_t kh, std::size_t kw) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(ic * kh * kw));
  return Value::leaf(rng.normal_tensor({oc, ic, kh, kw}, 0.0, std_dev));
}

NormVars make_norm(std::size_t c) {
  return NormVars{Value::leaf(Tensor::ones({c})), Value::leaf(Tensor::zeros({c})), kNormEps};
}

LinearVars make_linear(Rng& rng, std::size_t d) {
  const double std_dev = std::sqrt(1.0 / static_cast<double>(d));
  return LinearVars{Value::leaf(rng.normal_tensor({d, d}, 0.0, std_dev)), Value::leaf(Tensor::zeros({d}))};
}

// Convs followed by instance norm carry no bias: the norm offset plays that
// role, and a bias there would have an exactly-zero gradient.
ResBlockVars make_res_block(Rng& rng, std::size_t cin, std::size_t cout) {
  ResBlockVars r;
  r.conv1 = ConvVars{conv_weight(rng, cout, cin, 3, 3), Value(), 1, 1, 1, 1};
  r.norm1 = make_norm(cout);
  r.conv2 = ConvVars{conv_weight(rng, cout, cout, 3, 3), Value(), 1, 1, 1, 1};
  r.norm2 = make_norm(cout);
  if (cin != cout) {
    r.proj = ConvVars{conv_weight(rng, cout, cin, 1, 1), Value(), 1, 1, 0, 0};
  }
  return r;
}

Value near_identity_tap(Rng& rng, std::size_t d, std::size_t k) {
  // Causal kernel initialized near pass-through (all mass on the newest tap).
  Tensor t = rng.normal_tensor({d, k}, 0.0, 0.02);
  for (std::size_t j = 0; j < d; ++j) t[j * k + (k - 1)] += 1.0;
  return Value::leaf(t);
}

TTTMixerVars make_mixer(Rng& rng, std::size_t d, double inner_lr, InnerModelKind kind) {
  TTTMixerVars m;
  m.pre_norm = make_norm(d);
  m.lin_v = make_linear(rng, d);
  m.lin_k = make_linear(rng, d);
  m.lin_q = make_linear(rng, d);
  m.conv_k_w = near_identity_tap(rng, d, 3);
  m.conv_q_w = near_identity_tap(rng, d, 3);
  m.gate = make_linear(rng, d);
  const InnerModel w0 = kind == InnerModelKind::Linear ? InnerModel::linear_init(d, rng)
                                                       : InnerModel::mlp_init(d, rng);
  m.inner_init = InnerModelVars::from(w0, true);
  m.inner_lr = inner_lr;
  m.post_norm = make_norm(d);
  m.out = make_linear(rng, d);
  return m;
}

}  // namespace

ModelVars build_model(const NetworkConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.patch_size.size() != 2) {
    throw ConfigError("build_model supports 2D patches only; " + std::to_string(cfg.patch_size.size()) +
                      "D presets are configuration data");
  }
  ModelVars m;
  m.cfg = cfg;
  for (std::size_t s = 0; s < cfg.stages; ++s) {
    EncoderStageVars stage;
    const std::size_t ch = cfg.stage_channels(s);
    if (s > 0) {
      const std::size_t prev = cfg.stage_channels(s - 1);
      const int sh = cfg.pools_axis(s - 1, 0) ? 2 : 1;
      const int sw = cfg.pools_axis(s - 1, 1) ? 2 : 1;
      stage.downsample = ConvVars{conv_weight(rng, ch, prev, 3, 3),
                                  Value::leaf(Tensor::zeros({ch})), sh, sw, 1, 1};
      stage.res1 = make_res_block(rng, ch, ch);
    } else {
      stage.res1 = make_res_block(rng, cfg.input_channels, ch);
    }
    stage.res2 = make_res_block(rng, ch, ch);
    const bool ttt_stage = cfg.variant == NetworkVariant::Enc ||
                           (cfg.variant == NetworkVariant::Bot && s == cfg.stages - 1);
    if (ttt_stage) stage.mixer = make_mixer(rng, ch, cfg.inner_lr, cfg.inner_kind);
    m.encoder.push_back(std::move(stage));
  }
  for (std::size_t s = 0; s + 1 < cfg.stages; ++s) {
    DecoderStageVars dec;
    const std::size_t ch = cfg.stage_channels(s);
    const std::size_t deep = cfg.stage_channels(s + 1);
    const int kh = cfg.pools_axis(s, 0) ? 2 : 1;
    const int kw = cfg.pools_axis(s, 1) ? 2 : 1;
    const double std_dev = std::sqrt(2.0 / static_cast<double>(deep * kh * kw));
    dec.up = ConvVars{Value::leaf(rng.normal_tensor({deep, ch, static_cast<std::size_t>(kh),
                                                     static_cast<std::size_t>(kw)},
                                                    0.0, std_dev)),
                      Value::leaf(Tensor::zeros({ch})), kh, kw, 0, 0};
    dec.block = make_res_block(rng, 2 * ch, ch);
    m.decoder.push_back(std::move(dec));
  }
  const std::size_t c0 = cfg.stage_channels(0);
  m.head = ConvVars{conv_weight(rng, cfg.num_classes, c0, 1, 1),
                    Value::leaf(Tensor::zeros({cfg.num_classes})), 1, 1, 0, 0};
  return m;
}

// --- forward ---------------------------------------------------------------------

Value residual_block(const Value& x, const ResBlockVars& p) {
  Value h = conv2d(x, p.conv1.w, p.conv1.b, p.conv1.sh, p.conv1.sw, p.conv1.ph, p.conv1.pw);
  h = leaky_relu(instance_norm(h, p.norm1.gain, p.norm1.offset, p.norm1.eps));
  h = conv2d(h, p.conv2.w, p.conv2.b, p.conv2.sh, p.conv2.sw, p.conv2.ph, p.conv2.pw);
  h = leaky_relu(instance_norm(h, p.norm2.gain, p.norm2.offset, p.norm2.eps));
  Value shortcut = x;
  if (p.proj) {
    shortcut = conv2d(x, p.proj->w, p.proj->b, p.proj->sh, p.proj->sw, p.proj->ph, p.proj->pw);
  }
  return add(h, shortcut);
}

namespace {

Value apply_mixer(const Value& features, const TTTMixerVars& p, ScanMode mode) {
  // features: [N x C x H x W]; tokens are raster order over (H, W).
  const std::size_t n = features.val().extent(0), c = features.val().extent(1);
  const std::size_t h = features.val().extent(2), w = features.val().extent(3);
  std::vector<Value> per_sample;
  per_sample.reserve(n);
  for (std::size_t ni = 0; ni < n; ++ni) {
    Value tokens = transpose(reshape(narrow(features, 0, ni, 1), {c, h * w}));  // [T x C]
    Value s = layer_norm(tokens, p.pre_norm.gain, p.pre_norm.offset, p.pre_norm.eps);
    Value v_rows = linear_tokens(s, p.lin_v.w, p.lin_v.b);
    Value k_rows = causal_dwconv(linear_tokens(s, p.lin_k.w, p.lin_k.b), p.conv_k_w);
    Value q_rows = causal_dwconv(linear_tokens(s, p.lin_q.w, p.lin_q.b), p.conv_q_w);
    Value gate = silu(linear_tokens(s, p.gate.w, p.gate.b));
    Value y = ttt_scan_views(k_rows, v_rows, q_rows, p.inner_init, p.inner_lr, mode);
    y = layer_norm(y, p.post_norm.gain, p.post_norm.offset, p.post_norm.eps);
    Value out = linear_tokens(mul(y, gate), p.out.w, p.out.b);
    per_sample.push_back(reshape(transpose(out), {1, c, h, w}));
  }
  return per_sample.size() == 1 ? per_sample.front() : concat(per_sample, 0);
}

}  // namespace

Value ttt_block(const Value& x, const EncoderStageVars& stage, ScanMode mode) {
  Value r = residual_block(residual_block(x, stage.res1), stage.res2);
  if (!stage.mixer) return r;
  return apply_mixer(r, *stage.mixer, mode);
}

Value forward(const ModelVars& m, const Value& x, ScanMode mode) {
  const Tensor& xv = x.val();
  if (xv.rank() != 4 || xv.extent(1) != m.cfg.input_channels || xv.extent(2) != m.cfg.patch_size[0] ||
      xv.extent(3) != m.cfg.patch_size[1]) {
    throw ShapeError("forward expects [Nx" + std::to_string(m.cfg.input_channels) + "x" +
                     std::to_string(m.cfg.patch_size[0]) + "x" + std::to_string(m.cfg.patch_size[1]) +
                     "], got " + shape_str(xv.shape()));
  }
  std::vector<Value> skips;
  Value cur = x;
  for (std::size_t s = 0; s < m.cfg.stages; ++s) {
    const EncoderStageVars& stage = m.encoder[s];
    if (stage.downsample) {
      const ConvVars& d = *stage.downsample;
      cur = conv2d(cur, d.w, d.b, d.sh, d.sw, d.ph, d.pw);
    }
    cur = ttt_block(cur, stage, mode);
    if (s + 1 < m.cfg.stages) skips.push_back(cur);
  }
  for (std::size_t s = m.cfg.stages - 1; s-- > 0;) {
    const DecoderStageVars& dec = m.decoder[s];
    cur = conv_transpose2d(cur, dec.up.w, dec.up.b, dec.up.sh, dec.up.sw, dec.up.ph, dec.up.pw);
    cur = concat({skips[s], cur}, 1);
    cur = residual_block(cur, dec.block);
  }
  cur = conv2d(cur, m.head.w, m.head.b, 1, 1, 0, 0);
  return softmax(cur, 1);
}

// --- parameter traversal -----------------------------------------------------------

namespace {

void visit_conv(const std::string& prefix, ConvVars& c,
                const std::function<void(const std::string&, Value&)>& fn) {
  fn(prefix + ".w", c.w);
  if (c.b.defined()) fn(prefix + ".b", c.b);
}

void visit_norm(const std::string& prefix, NormVars& n,
                const std::function<void(const std::string&, Value&)>& fn) {
  fn(prefix + ".gain", n.gain);
  fn(prefix + ".offset", n.offset);
}

void visit_linear(const std::string& prefix, LinearVars& l,
                  const std::function<void(const std::string&, Value&)>& fn) {
  fn(prefix + ".w", l.w);
  fn(prefix + ".b", l.b);
}

void visit_res(const std::string& prefix, ResBlockVars& r,
               const std::function<void(const std::string&, Value&)>& fn) {
  visit_conv(prefix + ".conv1", r.conv1, fn);
  visit_norm(prefix + ".norm1", r.norm1, fn);
  visit_conv(prefix + ".conv2", r.conv2, fn);
  visit_norm(prefix + ".norm2", r.norm2, fn);
  if (r.proj) visit_conv(prefix + ".proj", *r.proj, fn);
}

void visit_inner(const std::string& prefix, InnerModelVars& w,
                 const std::function<void(const std::string&, Value&)>& fn) {
  if (w.kind == InnerModelKind::Linear) {
    fn(prefix + ".w", w.w);
  } else {
    fn(prefix + ".w1", w.w1);
    fn(prefix + ".b1", w.b1);
    fn(prefix + ".w2", w.w2);
    fn(prefix + ".b2", w.b2);
  }
}

void visit_mixer(const std::string& prefix, TTTMixerVars& m,
                 const std::function<void(const std::string&, Value&)>& fn) {
  visit_norm(prefix + ".pre_norm", m.pre_norm, fn);
  visit_linear(prefix + ".lin_v", m.lin_v, fn);
  visit_linear(prefix + ".lin_k", m.lin_k, fn);
  visit_linear(prefix + ".lin_q", m.lin_q, fn);
  fn(prefix + ".conv_k.w", m.conv_k_w);
  fn(prefix + ".conv_q.w", m.conv_q_w);
  visit_linear(prefix + ".gate", m.gate, fn);
  visit_inner(prefix + ".inner", m.inner_init, fn);
  visit_norm(prefix + ".post_norm", m.post_norm, fn);
  visit_linear(prefix + ".out", m.out, fn);
}

}  // namespace

void for_each_param(ModelVars& m, const std::function<void(const std::string&, Value&)>& fn) {
  for (std::size_t s = 0; s < m.encoder.size(); ++s) {
    const std::string prefix = "enc" + std::to_string(s);
    EncoderStageVars& stage = m.encoder[s];
    if (stage.downsample) visit_conv(prefix + ".down", *stage.downsample, fn);
    visit_res(prefix + ".res1", stage.res1, fn);
    visit_res(prefix + ".res2", stage.res2, fn);
    if (stage.mixer) visit_mixer(prefix + ".mixer", *stage.mixer, fn);
  }
  for (std::size_t s = 0; s < m.decoder.size(); ++s) {
    const std::string prefix = "dec" + std::to_string(s);
    visit_conv(prefix + ".up", m.decoder[s].up, fn);
    visit_res(prefix + ".block", m.decoder[s].block, fn);
  }
  visit_conv("head", m.head, fn);
}

std::size_t param_count(ModelVars& m) {
  std::size_t n = 0;
  for_each_param(m, [&n](const std::string&, Value& v) { n += v.val().size(); });
  return n;
}

// --- config and checkpoint io ---------------------------------------------------------

std::string config_to_json(const NetworkConfig& cfg) {
  nlohmann::json j;
  j["variant"] = variant_name(cfg.variant);
  j["stages"] = cfg.stages;
  j["base_channels"] = cfg.base_channels;
  j["channel_cap"] = cfg.channel_cap;
  j["pooling_per_axis"] = cfg.pooling_per_axis;
  j["patch_size"] = cfg.patch_size;
  j["num_classes"] = cfg.num_classes;
  j["input_channels"] = cfg.input_channels;
  j["inner_lr"] = cfg.inner_lr;
  j["inner_kind"] = cfg.inner_kind == InnerModelKind::Linear ? "linear" : "mlp";
  return j.dump(2);
}

namespace {

NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  cfg.variant = variant_from_name(j.at("variant").get<std::string>());
  cfg.stages = j.at("stages").get<std::size_t>();
  cfg.base_channels = j.at("base_channels").get<std::size_t>();
  cfg.channel_cap = j.at("channel_cap").get<std::size_t>();
  cfg.pooling_per_axis = j.at("pooling_per_axis").get<std::vector<std::size_t>>();
  cfg.patch_size = j.at("patch_size").get<std::vector<std::size_t>>();
  cfg.num_classes = j.at("num_classes").get<std::size_t>();
  cfg.input_channels = j.at("input_channels").get<std::size_t>();
  cfg.inner_lr = j.at("inner_lr").get<double>();
  const std::string kind = j.at("inner_kind").get<std::string>();
  if (kind != "linear" && kind != "mlp") throw ConfigError("unknown inner_kind '" + kind + "'");
  cfg.inner_kind = kind == "linear" ? InnerModelKind::Linear : InnerModelKind::Mlp;
  return cfg;
}

}  // namespace

NetworkConfig config_from_json_text(const std::string& text) {
  try {
    return config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config JSON: ") + e.what());
  }
}

void save_checkpoint(ModelVars& m, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "tttseg-checkpoint-v1";
  manifest["config"] = nlohmann::json::parse(config_to_json(m.cfg));
  nlohmann::json params = nlohmann::json::array();
  for_each_param(m, [&](const std::string& name, Value& v) {
    const std::string file = name + ".tsr";
    save_tsr(v.val(), Dtype::F64, (fs::path(dir) / file).string());
    params.push_back({{"name", name}, {"file", file}, {"shape", v.val().shape()}});
  });
  manifest["params"] = params;
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

ModelVars load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint manifest in " + dir);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(dir + "/manifest.json: " + e.what());
  }
  if (manifest.value("format", "") != "tttseg-checkpoint-v1") {
    throw IoError(dir + ": not a checkpoint manifest");
  }
  const NetworkConfig cfg = config_from_json(manifest.at("config"));
  Rng rng(0);  // skeleton only; every parameter is overwritten below
  ModelVars m = build_model(cfg, rng);

  std::map<std::string, std::string> files;
  for (const auto& entry : manifest.at("params")) {
    files[entry.at("name").get<std::string>()] = entry.at("file").get<std::string>();
  }
  std::size_t used = 0;
  for_each_param(m, [&](const std::string& name, Value& v) {
    auto it = files.find(name);
    if (it == files.end()) throw IoError("checkpoint is missing parameter '" + name + "'");
    const fs::path path = fs::path(dir) / it->second;
    if (!fs::exists(path)) throw IoError("manifest lists missing file: " + it->second);
    LoadedTensor t = load_tsr(path.string());
    if (t.tensor.shape() != v.val().shape()) {
      throw IoError("parameter '" + name + "' has shape " + shape_str(t.tensor.shape()) +
                    ", expected " + shape_str(v.val().shape()));
    }
    v.set_value(std::move(t.tensor));
    ++used;
  });
  if (used != files.size()) {
    throw IoError("checkpoint has " + std::to_string(files.size() - used) + " unknown parameter(s)");
  }
  return m;
}

}  // namespace tttseg
