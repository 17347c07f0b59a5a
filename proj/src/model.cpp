#include "osad/model.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "osad/random.hpp"

namespace osad {

using nlohmann::json;

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::None: return "none";
    case AttentionMode::Gaussian: return "gaussian";
    case AttentionMode::Ufa: return "ufa";
  }
  return "?";
}

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "none") return AttentionMode::None;
  if (s == "gaussian") return AttentionMode::Gaussian;
  if (s == "ufa") return AttentionMode::Ufa;
  throw std::invalid_argument("unknown attention mode: " + s);
}

std::string to_string(MotionMode m) { return m == MotionMode::Flow ? "flow" : "rgb"; }

MotionMode motion_mode_from_string(const std::string& s) {
  if (s == "flow") return MotionMode::Flow;
  if (s == "rgb") return MotionMode::Rgb;
  throw std::invalid_argument("unknown motion mode: " + s);
}

std::pair<int, int> ModelConfig::feature_grid() const {
  int h = height, w = width;
  const int pad = kernel / 2;
  for (int s : conv_strides) {
    h = (h + 2 * pad - kernel) / s + 1;
    w = (w + 2 * pad - kernel) / s + 1;
  }
  return {h, w};
}

void ModelConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (in_channels < 1 || height < 1 || width < 1) throw std::invalid_argument("bad input shape");
  if (conv_channels.empty() || conv_channels.size() != conv_strides.size())
    throw std::invalid_argument("conv_channels and conv_strides must be nonempty and aligned");
  for (int c : conv_channels)
    if (c < 1) throw std::invalid_argument("conv channel count must be >= 1");
  for (int s : conv_strides)
    if (s < 1) throw std::invalid_argument("conv stride must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("kernel must be odd");
  if (predictor_hidden < 1) throw std::invalid_argument("predictor_hidden must be >= 1");
  auto [h, w] = feature_grid();
  if (h < 1 || w < 1) throw std::invalid_argument("input too small for backbone");
}

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"num_classes", c.num_classes},
              {"in_channels", c.in_channels},
              {"height", c.height},
              {"width", c.width},
              {"conv_channels", c.conv_channels},
              {"conv_strides", c.conv_strides},
              {"kernel", c.kernel},
              {"conv_bias", c.conv_bias},
              {"attention", to_string(c.attention)},
              {"gaussian_sigma", c.gaussian_sigma},
              {"predictor_hidden", c.predictor_hidden},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  c.conv_strides = j.at("conv_strides").get<std::vector<int>>();
  c.kernel = j.at("kernel").get<int>();
  c.conv_bias = j.at("conv_bias").get<bool>();
  c.attention = attention_mode_from_string(j.at("attention").get<std::string>());
  c.gaussian_sigma = j.at("gaussian_sigma").get<double>();
  c.predictor_hidden = j.at("predictor_hidden").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Tensor random_normal(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = normal(rng, 0.0, stddev);
  return t;
}

std::uint32_t checksum(const std::vector<double>& data) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data.data()),
                                          static_cast<uInt>(data.size() * sizeof(double))));
}

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out.empty() ? "scalar" : out;
}

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kAttentionInitStream = 0x1418;

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng = make_rng(config_.seed, {kInitStream});
  auto add = [&](std::string name, ParamGroup g, Tensor value) {
    params_.push_back({std::move(name), g, ad::parameter(std::move(value))});
  };
  const std::size_t k = config_.kernel;
  std::size_t cin = config_.in_channels;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
    const std::size_t cout = config_.conv_channels[i];
    const double fan_in = static_cast<double>(cin * k * k);
    add("backbone.conv" + std::to_string(i) + ".weight", ParamGroup::Backbone,
        random_normal({cout, cin, k, k}, rng, std::sqrt(2.0 / fan_in)));
    if (config_.conv_bias) add("backbone.conv" + std::to_string(i) + ".bias", ParamGroup::Backbone, Tensor({cout}));
    cin = cout;
  }
  const std::size_t c = config_.feature_dim();
  const std::size_t n_cls = config_.num_classes;
  if (config_.attention == AttentionMode::Ufa) {
    // Own stream: every other parameter starts the same with or without attention.
    Rng att_rng = make_rng(config_.seed, {kAttentionInitStream});
    add("attention.weight", ParamGroup::Attention, random_normal({1, c, 1, 1}, att_rng, std::sqrt(1.0 / c)));
    add("attention.bias", ParamGroup::Attention, Tensor({1}, 2.0));
  }
  add("head.cls.weight", ParamGroup::Head, random_normal({c, n_cls + 1}, rng, std::sqrt(1.0 / c)));
  add("head.cls.bias", ParamGroup::Head, Tensor({n_cls + 1}));
  add("head.comp.weight", ParamGroup::Head, random_normal({3 * c, n_cls}, rng, std::sqrt(1.0 / (3 * c))));
  add("head.comp.bias", ParamGroup::Head, Tensor({n_cls}));
  add("head.reg.weight", ParamGroup::Head, random_normal({3 * c, 2 * n_cls}, rng, 0.1 * std::sqrt(1.0 / (3 * c))));
  add("head.reg.bias", ParamGroup::Head, Tensor({2 * n_cls}));

  const std::size_t hid = config_.predictor_hidden;
  add("predictor.psi.fc1.weight", ParamGroup::PredictorPsi, random_normal({2 * c, hid}, rng, std::sqrt(2.0 / (2 * c))));
  add("predictor.psi.fc1.bias", ParamGroup::PredictorPsi, Tensor({hid}));
  add("predictor.psi.fc2.weight", ParamGroup::PredictorPsi, random_normal({hid, c}, rng, std::sqrt(1.0 / hid)));
  add("predictor.psi.fc2.bias", ParamGroup::PredictorPsi, Tensor({c}));
  add("predictor.zeta.fc1.weight", ParamGroup::PredictorZeta, random_normal({c, hid}, rng, std::sqrt(2.0 / c)));
  add("predictor.zeta.fc1.bias", ParamGroup::PredictorZeta, Tensor({hid}));
  add("predictor.zeta.fc2.weight", ParamGroup::PredictorZeta, random_normal({hid, c}, rng, std::sqrt(1.0 / hid)));
  add("predictor.zeta.fc2.bias", ParamGroup::PredictorZeta, Tensor({c}));

  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto g = params_[i].group;
    if (g == ParamGroup::Backbone || g == ParamGroup::Attention || g == ParamGroup::Head) ema_index_.push_back(i);
  }
  reset_ema();
}

const NamedParam& Model::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("no parameter named " + name);
}

Weights Model::make_weights(const std::vector<ad::Var>& vars) const {
  std::map<std::string, ad::Var> by_name;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (vars[i]) by_name[params_[i].name] = vars[i];
  auto get = [&](const std::string& n) -> ad::Var {
    auto it = by_name.find(n);
    return it == by_name.end() ? nullptr : it->second;
  };
  Weights w;
  for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
    w.conv_w.push_back(get("backbone.conv" + std::to_string(i) + ".weight"));
    w.conv_b.push_back(get("backbone.conv" + std::to_string(i) + ".bias"));
  }
  w.att_w = get("attention.weight");
  w.att_b = get("attention.bias");
  w.cls_w = get("head.cls.weight");
  w.cls_b = get("head.cls.bias");
  w.comp_w = get("head.comp.weight");
  w.comp_b = get("head.comp.bias");
  w.reg_w = get("head.reg.weight");
  w.reg_b = get("head.reg.bias");
  return w;
}

Weights Model::live() const {
  std::vector<ad::Var> vars;
  for (const auto& p : params_) vars.push_back(p.var);
  return make_weights(vars);
}

Weights Model::frozen() const {
  std::vector<ad::Var> vars;
  for (const auto& p : params_) vars.push_back(ad::constant(p.var->value));
  return make_weights(vars);
}

Weights Model::teacher() const {
  std::vector<ad::Var> vars(params_.size());
  for (std::size_t j = 0; j < ema_index_.size(); ++j) vars[ema_index_[j]] = ad::constant(ema_[j]);
  return make_weights(vars);
}

PredictorWeights Model::predictors(bool trainable) const {
  auto get = [&](const std::string& n) {
    const auto& v = parameter(n).var;
    return trainable ? v : ad::constant(v->value);
  };
  PredictorWeights p;
  p.psi_w1 = get("predictor.psi.fc1.weight");
  p.psi_b1 = get("predictor.psi.fc1.bias");
  p.psi_w2 = get("predictor.psi.fc2.weight");
  p.psi_b2 = get("predictor.psi.fc2.bias");
  p.zeta_w1 = get("predictor.zeta.fc1.weight");
  p.zeta_b1 = get("predictor.zeta.fc1.bias");
  p.zeta_w2 = get("predictor.zeta.fc2.weight");
  p.zeta_b2 = get("predictor.zeta.fc2.bias");
  return p;
}

void Model::ema_update(double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("ema decay must be in [0, 1]");
  for (std::size_t j = 0; j < ema_index_.size(); ++j) {
    const auto& live = params_[ema_index_[j]].var->value.data;
    auto& shadow = ema_[j].data;
    for (std::size_t i = 0; i < shadow.size(); ++i) shadow[i] = decay * shadow[i] + (1.0 - decay) * live[i];
  }
}

void Model::reset_ema() {
  ema_.clear();
  for (auto i : ema_index_) ema_.push_back(params_[i].var->value);
}

void Model::zero_grad() {
  for (auto& p : params_) ad::zero_grad(p.var);
}

void Model::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  std::ofstream index(dir / "index.txt");
  if (!bin || !index) throw std::runtime_error("cannot write checkpoint to " + dir.string());
  std::size_t offset = 0;
  auto write = [&](const std::string& name, const Tensor& t) {
    bin.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    index << name << ' ' << shape_token(t.shape) << ' ' << offset << ' ' << std::hex << checksum(t.data) << std::dec
          << '\n';
    offset += t.data.size() * sizeof(double);
  };
  for (const auto& p : params_) write(p.name, p.var->value);
  for (std::size_t j = 0; j < ema_index_.size(); ++j) write("ema." + params_[ema_index_[j]].name, ema_[j]);
  std::ofstream(dir / "config.json") << config_to_json(config_).dump(2) << '\n';
}

Model Model::load(const std::filesystem::path& dir) {
  std::ifstream cfg_in(dir / "config.json");
  if (!cfg_in) throw std::runtime_error("missing checkpoint config in " + dir.string());
  ModelConfig cfg;
  try {
    cfg = config_from_json(json::parse(cfg_in));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("bad checkpoint config: ") + e.what());
  }
  Model model(cfg);

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  std::ifstream index(dir / "index.txt");
  if (!bin || !index) throw std::runtime_error("missing checkpoint files in " + dir.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  std::map<std::string, Tensor*> targets;
  for (auto& p : model.params_) targets[p.name] = &p.var->value;
  for (std::size_t j = 0; j < model.ema_index_.size(); ++j)
    targets["ema." + model.params_[model.ema_index_[j]].name] = &model.ema_[j];

  std::string line;
  std::size_t seen = 0;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape;
    std::size_t offset = 0;
    std::uint32_t crc = 0;
    ls >> name >> shape >> offset >> std::hex >> crc;
    if (!ls) throw CorruptionError("malformed checkpoint index line: " + line);
    auto it = targets.find(name);
    if (it == targets.end()) throw CorruptionError("unexpected checkpoint entry " + name);
    Tensor& t = *it->second;
    if (shape != shape_token(t.shape)) throw CorruptionError("shape mismatch for " + name);
    const std::size_t bytes = t.data.size() * sizeof(double);
    if (offset + bytes > blob.size()) throw CorruptionError("checkpoint truncated at " + name);
    std::memcpy(t.data.data(), blob.data() + offset, bytes);
    if (checksum(t.data) != crc) throw CorruptionError("checksum mismatch for " + name);
    ++seen;
  }
  if (seen != targets.size()) throw CorruptionError("checkpoint is missing entries");
  return model;
}

Tensor frames_to_tensor(const VideoSample& video) {
  const auto& s = video.shape;
  Tensor t({static_cast<std::size_t>(s.frames), static_cast<std::size_t>(s.channels),
            static_cast<std::size_t>(s.height), static_cast<std::size_t>(s.width)});
  std::size_t o = 0;
  for (int f = 0; f < s.frames; ++f)
    for (int c = 0; c < s.channels; ++c)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) t.data[o++] = video.pixel(f, y, x, c);
  return t;
}

ad::Var attention_map(const Weights& weights, const ad::Var& zhat) {
  if (!weights.att_w) throw std::logic_error("attention head has no parameters");
  return ad::sigmoid(ad::conv2d(zhat, weights.att_w, weights.att_b, 1, 0));
}

Tensor gaussian_attention(int h, int w, double sigma) {
  if (h < 1 || w < 1) throw std::invalid_argument("gaussian_attention needs h, w >= 1");
  if (sigma <= 0.0) sigma = std::max(h, w) / 4.0;
  Tensor a({1, 1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      a.data[static_cast<std::size_t>(y) * w + x] = std::exp(-d2 / (2.0 * sigma * sigma));
    }
  return a;
}

FrameFeatures extract_features(const ModelConfig& config, const Weights& weights, const ad::Var& frames) {
  const Shape& s = frames->value.shape;
  if (s.size() != 4 || s[1] != static_cast<std::size_t>(config.in_channels) ||
      s[2] != static_cast<std::size_t>(config.height) || s[3] != static_cast<std::size_t>(config.width))
    throw std::invalid_argument("extract_features: expected [T, " + std::to_string(config.in_channels) + ", " +
                                std::to_string(config.height) + ", " + std::to_string(config.width) + "], got " +
                                shape_string(s));
  ad::Var x = frames;
  const std::size_t pad = config.kernel / 2;
  for (std::size_t i = 0; i < weights.conv_w.size(); ++i)
    x = ad::silu(ad::conv2d(x, weights.conv_w[i], weights.conv_b[i], config.conv_strides[i], pad));

  FrameFeatures out;
  out.zhat = x;
  const std::size_t T = s[0];
  const std::size_t h = x->value.dim(2), w = x->value.dim(3);
  switch (config.attention) {
    case AttentionMode::None:
      out.z = ad::spatial_mean(x);
      break;
    case AttentionMode::Gaussian: {
      const Tensor g = gaussian_attention(static_cast<int>(h), static_cast<int>(w), config.gaussian_sigma);
      Tensor a({T, 1, h, w});
      for (std::size_t t = 0; t < T; ++t) std::copy(g.data.begin(), g.data.end(), a.data.begin() + t * h * w);
      out.attention = ad::constant(std::move(a));
      out.z = ad::spatial_mean(ad::mul_channel_broadcast(out.attention, x));
      break;
    }
    case AttentionMode::Ufa:
      out.attention = attention_map(weights, x);
      out.z = ad::spatial_mean(ad::mul_channel_broadcast(out.attention, x));
      break;
  }
  return out;
}

MotionPair motion_features(const ad::Var& zhat_t, const ad::Var& zhat_next, const ad::Var& a_t, MotionMode mode) {
  ad::Var source = zhat_t;
  if (mode == MotionMode::Rgb) {
    if (zhat_next->value.shape != zhat_t->value.shape) throw std::invalid_argument("motion_features: shape mismatch");
    source = ad::sub(zhat_next, zhat_t);
  }
  MotionPair m;
  m.f = ad::spatial_mean(ad::mul_channel_broadcast(a_t, source));
  m.b = ad::spatial_mean(ad::mul_channel_broadcast(ad::one_minus(a_t), source));
  return m;
}

MotionSequence motion_sequence(const ad::Var& zhat, const ad::Var& attention, MotionMode mode) {
  const std::size_t T = zhat->value.dim(0);
  MotionSequence seq;
  MotionPair m;
  if (mode == MotionMode::Flow) {
    if (T < 2) return seq;
    m = motion_features(zhat, zhat, attention, mode);
  } else {
    if (T < 3) return seq;
    m = motion_features(ad::slice_rows(zhat, 0, T - 1), ad::slice_rows(zhat, 1, T - 1),
                        ad::slice_rows(attention, 0, T - 1), mode);
  }
  const std::size_t n = m.f->value.dim(0);
  seq.f = ad::slice_rows(m.f, 0, n - 1);
  seq.b = ad::slice_rows(m.b, 0, n - 1);
  seq.f_next = ad::slice_rows(m.f, 1, n - 1);
  return seq;
}

PredictorOutputs predict_next(const PredictorWeights& w, const ad::Var& f, const ad::Var& b) {
  PredictorOutputs out;
  const ad::Var fb[] = {f, b};
  const auto hidden_psi = ad::silu(ad::linear(ad::concat_cols(fb), w.psi_w1, w.psi_b1));
  out.with_background = ad::linear(hidden_psi, w.psi_w2, w.psi_b2);
  const auto hidden_zeta = ad::silu(ad::linear(f, w.zeta_w1, w.zeta_b1));
  out.foreground_only = ad::linear(hidden_zeta, w.zeta_w2, w.zeta_b2);
  return out;
}

HeadOutputs apply_heads(const Weights& w, const ad::Var& p, const ad::Var& context) {
  HeadOutputs h;
  h.cls_logits = ad::linear(p, w.cls_w, w.cls_b);
  h.cls_prob = ad::softmax_rows(h.cls_logits);
  h.cls_logprob = ad::log_softmax_rows(h.cls_logits);
  h.comp_logits = ad::linear(context, w.comp_w, w.comp_b);
  h.comp_prob = ad::sigmoid(h.comp_logits);
  h.reg = ad::linear(context, w.reg_w, w.reg_b);
  return h;
}

}  // namespace osad
