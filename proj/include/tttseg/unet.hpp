#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tttseg/ttt.hpp"

namespace tttseg {

enum class NetworkVariant { Bot, Enc, None };

std::string variant_name(NetworkVariant v);
NetworkVariant variant_from_name(const std::string& name);

// Encoder-decoder configuration. Stage s runs at channel width
// min(base_channels * 2^s, channel_cap); spatial axis a is halved on the
// first pooling_per_axis[a] stage transitions.
struct NetworkConfig {
  NetworkVariant variant = NetworkVariant::Bot;
  std::size_t stages = 5;
  std::size_t base_channels = 16;
  std::size_t channel_cap = 128;
  std::vector<std::size_t> pooling_per_axis = {4, 4};
  std::vector<std::size_t> patch_size = {64, 64};
  std::size_t num_classes = 3;
  std::size_t input_channels = 1;
  double inner_lr = 0.1;
  InnerModelKind inner_kind = InnerModelKind::Linear;

  void validate() const;
  std::size_t stage_channels(std::size_t s) const;
  // Whether transition s -> s+1 halves the given axis.
  bool pools_axis(std::size_t transition, std::size_t axis) const;
};

// Named configurations: the desk-scale presets plus the standard 2D recipes.
// 3D rows are kept as configuration data; build_model rejects non-2D patches.
struct PresetInfo {
  std::string name;
  NetworkConfig config;
  std::size_t default_batch;
};

const std::vector<PresetInfo>& presets();
NetworkConfig preset_config(const std::string& name, NetworkVariant variant);

// --- parameter containers (autodiff leaves) -----------------------------------

struct ConvVars {
  Value w;  // [outC x inC x kh x kw]
  Value b;  // optional (undefined Value = no bias)
  int sh = 1, sw = 1, ph = 0, pw = 0;
};

struct NormVars {
  Value gain, offset;
  double eps = kNormEps;
};

struct LinearVars {
  Value w, b;  // [D x D], [D]
};

struct ResBlockVars {
  ConvVars conv1;
  NormVars norm1;
  ConvVars conv2;
  NormVars norm2;
  std::optional<ConvVars> proj;  // 1x1 shortcut when channel counts differ
};

// Token-mixing tail of a TTT building block (after its two residual blocks):
// layer norm, V/K/Q branches with causal convs on K and Q, SiLU gate branch,
// the TTT scan, post layer norm, Hadamard gate, output linear.
struct TTTMixerVars {
  NormVars pre_norm;
  LinearVars lin_v, lin_k, lin_q;
  Value conv_k_w, conv_q_w;  // depthwise causal kernels [D x 3]
  LinearVars gate;
  InnerModelVars inner_init;
  double inner_lr = 0.1;
  NormVars post_norm;
  LinearVars out;
};

struct EncoderStageVars {
  std::optional<ConvVars> downsample;  // stride-2 conv entering this stage
  ResBlockVars res1, res2;
  std::optional<TTTMixerVars> mixer;  // present on TTT stages
};

struct DecoderStageVars {
  ConvVars up;  // transposed conv from stage s+1 to s
  ResBlockVars block;  // consumes the skip concatenation (2 ch[s] -> ch[s])
};

struct ModelVars {
  NetworkConfig cfg;
  std::vector<EncoderStageVars> encoder;
  std::vector<DecoderStageVars> decoder;  // index 0 = full resolution
  ConvVars head;
};

// --- construction and forward ---------------------------------------------------

ModelVars build_model(const NetworkConfig& cfg, Rng& rng);

Value residual_block(const Value& x, const ResBlockVars& p);

// Full TTT building block: two residual blocks then the token mixer.
Value ttt_block(const Value& x, const EncoderStageVars& stage, ScanMode mode);

// Per-pixel class probabilities [N x numClasses x H x W]; softmax over axis 1.
Value forward(const ModelVars& m, const Value& x, ScanMode mode = ScanMode::Differentiable);

// Deterministic traversal of every parameter (same order on every build).
void for_each_param(ModelVars& m, const std::function<void(const std::string&, Value&)>& fn);
std::size_t param_count(ModelVars& m);

// Checkpoint directory: one TSR1 file per named parameter plus manifest.json
// carrying the NetworkConfig and the name -> file/shape map.
void save_checkpoint(ModelVars& m, const std::string& dir);
ModelVars load_checkpoint(const std::string& dir);

std::string config_to_json(const NetworkConfig& cfg);
NetworkConfig config_from_json_text(const std::string& text);

}  // namespace tttseg
