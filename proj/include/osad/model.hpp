#pragma once

// Trainable components: convolutional backbone, foreground attention,
// proposal heads, the two motion predictors, and the EMA shadow.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "osad/autograd.hpp"
#include "osad/corpus.hpp"

namespace osad {

enum class AttentionMode { None, Gaussian, Ufa };
enum class MotionMode { Flow, Rgb };

std::string to_string(AttentionMode m);
AttentionMode attention_mode_from_string(const std::string& s);
std::string to_string(MotionMode m);
MotionMode motion_mode_from_string(const std::string& s);

struct ModelConfig {
  int num_classes = 4;
  int in_channels = 3;
  int height = 16;
  int width = 16;
  std::vector<int> conv_channels{16, 32, 32};
  std::vector<int> conv_strides{2, 2, 1};
  int kernel = 3;
  bool conv_bias = true;
  AttentionMode attention = AttentionMode::None;
  double gaussian_sigma = 0.0;  // <= 0 picks max(h, w) / 4
  int predictor_hidden = 64;
  std::uint64_t seed = 0;

  int feature_dim() const { return conv_channels.back(); }
  /// Spatial size of the feature map fed to attention and pooling.
  std::pair<int, int> feature_grid() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { Backbone, Attention, Head, PredictorPsi, PredictorZeta };

struct NamedParam {
  std::string name;
  ParamGroup group;
  ad::Var var;
};

/// Handles for one forward pass; either trainable leaves or constants.
struct Weights {
  std::vector<ad::Var> conv_w, conv_b;  // conv_b entries are null without bias
  ad::Var att_w, att_b;                 // null unless attention == Ufa
  ad::Var cls_w, cls_b, comp_w, comp_b, reg_w, reg_b;
};

struct PredictorWeights {
  ad::Var psi_w1, psi_b1, psi_w2, psi_b2;
  ad::Var zeta_w1, zeta_b1, zeta_w2, zeta_b2;
};

struct FrameFeatures {
  ad::Var zhat;       // [T, c, h, w]
  ad::Var attention;  // [T, 1, h, w], null when attention is disabled
  ad::Var z;          // [T, c]
};

/// Foreground/background motion features, one row per time step.
struct MotionPair {
  ad::Var f;  // [N, c]
  ad::Var b;  // [N, c]
};

/// Aligned (f_t, b_t, f_{t+1}) rows over a clip.
struct MotionSequence {
  ad::Var f;
  ad::Var b;
  ad::Var f_next;
  std::size_t pairs() const { return f ? f->value.dim(0) : 0; }
};

struct PredictorOutputs {
  ad::Var with_background;     // u_psi(f_t, b_t)
  ad::Var foreground_only;     // u_zeta(f_t)
};

struct HeadOutputs {
  ad::Var cls_logits;   // [N, C+1]
  ad::Var cls_prob;     // [N, C+1]
  ad::Var cls_logprob;  // [N, C+1]
  ad::Var comp_logits;  // [N, C]
  ad::Var comp_prob;    // [N, C]
  ad::Var reg;          // [N, 2C]: (dcenter, dloglen) per class
  std::size_t size() const { return cls_logits ? cls_logits->value.dim(0) : 0; }
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  const NamedParam& parameter(const std::string& name) const;

  Weights live() const;
  /// Constants holding the current live values; no gradient reaches the model.
  Weights frozen() const;
  /// Constants holding the EMA shadow values.
  Weights teacher() const;
  PredictorWeights predictors(bool trainable) const;

  /// shadow <- decay * shadow + (1 - decay) * live, for backbone, attention, heads.
  void ema_update(double decay);
  void reset_ema();
  const std::vector<Tensor>& ema_shadow() const { return ema_; }
  std::vector<Tensor>& ema_shadow() { return ema_; }
  /// Indices into parameters() covered by the shadow, aligned with ema_shadow().
  const std::vector<std::size_t>& ema_indices() const { return ema_index_; }

  void zero_grad();

  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);

 private:
  Weights make_weights(const std::vector<ad::Var>& vars) const;

  ModelConfig config_;
  std::vector<NamedParam> params_;
  std::vector<Tensor> ema_;
  std::vector<std::size_t> ema_index_;
};

/// [T, H, W, Cin] float frames to a [T, Cin, H, W] double tensor.
Tensor frames_to_tensor(const VideoSample& video);

/// Backbone, attention, and pooling over every frame of a clip.
FrameFeatures extract_features(const ModelConfig& config, const Weights& weights, const ad::Var& frames);

/// Attention map from feature maps: sigmoid of a 1x1 convolution.
ad::Var attention_map(const Weights& weights, const ad::Var& zhat);

/// Fixed map peaked at the grid centre, values in (0, 1].
Tensor gaussian_attention(int h, int w, double sigma = 0.0);

/// Motion features for aligned frames: zhat_t, zhat_next [N, c, h, w], a_t [N, 1, h, w].
MotionPair motion_features(const ad::Var& zhat_t, const ad::Var& zhat_next, const ad::Var& a_t, MotionMode mode);

/// All consecutive (f_t, b_t, f_{t+1}) triples of one clip.
MotionSequence motion_sequence(const ad::Var& zhat, const ad::Var& attention, MotionMode mode);

PredictorOutputs predict_next(const PredictorWeights& weights, const ad::Var& f, const ad::Var& b);

/// Heads over pooled proposal features p [N, c] and context features [N, 3c].
HeadOutputs apply_heads(const Weights& weights, const ad::Var& p, const ad::Var& context);

}  // namespace osad
