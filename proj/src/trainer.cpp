#include "osad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace osad {

namespace fs = std::filesystem;

DivergenceError::DivergenceError(long s, std::string report)
    : std::runtime_error("loss diverged at step " + std::to_string(s) + ": " + report),
      step(s),
      last_report(std::move(report)) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::vector<int> to_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(to_int(key, trim(item))));
  return out;
}

std::string join(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Access>
Field num(std::string key, Access access) {
  return {key,
          [key, access](ExperimentConfig& c, const std::string& v) {
            auto& ref = access(c);
            using T = std::remove_reference_t<decltype(ref)>;
            if constexpr (std::is_same_v<T, bool>) {
              ref = to_bool(key, v);
            } else if constexpr (std::is_floating_point_v<T>) {
              ref = to_double(key, v);
            } else {
              const long long x = to_int(key, v);
              if constexpr (std::is_unsigned_v<T>) {
                if (x < 0) throw ConfigError("negative value for " + key);
              }
              ref = static_cast<T>(x);
            }
          },
          [access](const ExperimentConfig& c) {
            auto& ref = access(const_cast<ExperimentConfig&>(c));
            using T = std::remove_reference_t<decltype(ref)>;
            if constexpr (std::is_same_v<T, bool>) return std::string(ref ? "true" : "false");
            else if constexpr (std::is_floating_point_v<T>) return fmt(ref);
            else return std::to_string(ref);
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    using C = ExperimentConfig;
    std::vector<Field> v;
    v.push_back({"corpus", [](C& c, const std::string& s) { c.corpus_path = s; },
                 [](const C& c) { return c.corpus_path; }});
    v.push_back(num("videos", [](C& c) -> int& { return c.videos; }));
    v.push_back({"test_corpus", [](C& c, const std::string& s) { c.test_corpus_path = s; },
                 [](const C& c) { return c.test_corpus_path; }});
    v.push_back(num("test_videos", [](C& c) -> int& { return c.test_videos; }));
    v.push_back(num("data.classes", [](C& c) -> int& { return c.data.num_classes; }));
    v.push_back(num("data.frames", [](C& c) -> int& { return c.data.frames; }));
    v.push_back(num("data.height", [](C& c) -> int& { return c.data.height; }));
    v.push_back(num("data.width", [](C& c) -> int& { return c.data.width; }));
    v.push_back(num("data.channels", [](C& c) -> int& { return c.data.channels; }));
    v.push_back(num("data.sprite_size", [](C& c) -> int& { return c.data.sprite_size; }));
    v.push_back(num("data.camera_gain", [](C& c) -> double& { return c.data.camera_gain; }));
    v.push_back(num("data.noise_std", [](C& c) -> double& { return c.data.noise_std; }));
    v.push_back(num("data.seed", [](C& c) -> std::uint64_t& { return c.data.seed; }));
    v.push_back(num("data.scene_bias", [](C& c) -> bool& { return c.data.scene_bias; }));
    v.push_back(num("data.scene_strength", [](C& c) -> double& { return c.data.scene_strength; }));
    v.push_back(num("split.full", [](C& c) -> double& { return c.split[0]; }));
    v.push_back(num("split.weak", [](C& c) -> double& { return c.split[1]; }));
    v.push_back(num("split.unlabeled", [](C& c) -> double& { return c.split[2]; }));
    v.push_back(num("split.seed", [](C& c) -> std::uint64_t& { return c.split_seed; }));
    v.push_back({"ssl.method",
                 [](C& c, const std::string& s) {
                   try {
                     c.ssl.method = ssl_method_from_string(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const C& c) { return to_string(c.ssl.method); }});
    v.push_back(num("ssl.k", [](C& c) -> int& { return c.ssl.mixmatch_k; }));
    v.push_back(num("ssl.temperature", [](C& c) -> double& { return c.ssl.sharpen_temperature; }));
    v.push_back(num("ssl.beta_alpha", [](C& c) -> double& { return c.ssl.beta_alpha; }));
    v.push_back(num("ssl.tau", [](C& c) -> double& { return c.ssl.tau; }));
    v.push_back(num("ssl.noise_std", [](C& c) -> double& { return c.ssl.noise_std; }));
    v.push_back(num("ssl.ema_decay", [](C& c) -> double& { return c.ssl.ema_decay; }));
    v.push_back(num("loss.comp_s", [](C& c) -> double& { return c.weights.comp_s; }));
    v.push_back(num("loss.reg_s", [](C& c) -> double& { return c.weights.reg_s; }));
    v.push_back(num("loss.comp_u", [](C& c) -> double& { return c.weights.comp_u; }));
    v.push_back(num("loss.reg_u", [](C& c) -> double& { return c.weights.reg_u; }));
    v.push_back(num("loss.unlabeled", [](C& c) -> double& { return c.weights.unlabeled; }));
    v.push_back(num("loss.weak", [](C& c) -> double& { return c.weights.weak; }));
    v.push_back(num("loss.ib", [](C& c) -> double& { return c.weights.ib; }));
    v.push_back(num("loss.ufa", [](C& c) -> double& { return c.weights.ufa; }));
    v.push_back({"model.attention",
                 [](C& c, const std::string& s) {
                   try {
                     c.attention = attention_mode_from_string(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const C& c) { return to_string(c.attention); }});
    v.push_back({"model.motion",
                 [](C& c, const std::string& s) {
                   try {
                     c.motion = motion_mode_from_string(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 },
                 [](const C& c) { return to_string(c.motion); }});
    v.push_back({"model.channels", [](C& c, const std::string& s) { c.conv_channels = to_ints("model.channels", s); },
                 [](const C& c) { return join(c.conv_channels); }});
    v.push_back({"model.strides", [](C& c, const std::string& s) { c.conv_strides = to_ints("model.strides", s); },
                 [](const C& c) { return join(c.conv_strides); }});
    v.push_back(num("model.predictor_hidden", [](C& c) -> int& { return c.predictor_hidden; }));
    v.push_back(num("model.gaussian_sigma", [](C& c) -> double& { return c.gaussian_sigma; }));
    v.push_back(num("ib.enabled", [](C& c) -> bool& { return c.ib_enabled; }));
    v.push_back(num("ufa.all_videos", [](C& c) -> bool& { return c.ufa_all_videos; }));
    v.push_back(num("train.lr", [](C& c) -> double& { return c.lr; }));
    v.push_back(num("train.momentum", [](C& c) -> double& { return c.momentum; }));
    v.push_back(num("train.steps", [](C& c) -> int& { return c.steps; }));
    v.push_back(num("train.batch_full", [](C& c) -> int& { return c.batch_full; }));
    v.push_back(num("train.batch_unlabeled", [](C& c) -> int& { return c.batch_unlabeled; }));
    v.push_back(num("train.batch_weak", [](C& c) -> int& { return c.batch_weak; }));
    v.push_back(num("train.grad_clip", [](C& c) -> double& { return c.grad_clip; }));
    v.push_back(num("train.ramp_fraction", [](C& c) -> double& { return c.ramp_fraction; }));
    v.push_back({"proposals.scales", [](C& c, const std::string& s) { c.scales = to_ints("proposals.scales", s); },
                 [](const C& c) { return join(c.scales); }});
    v.push_back(num("proposals.stride_ratio", [](C& c) -> double& { return c.stride_ratio; }));
    v.push_back(num("proposals.samples", [](C& c) -> int& { return c.samples; }));
    v.push_back(num("proposals.context", [](C& c) -> int& { return c.context; }));
    v.push_back(num("proposals.foreground", [](C& c) -> int& { return c.balance.foreground; }));
    v.push_back(num("proposals.incomplete", [](C& c) -> int& { return c.balance.incomplete; }));
    v.push_back(num("proposals.background", [](C& c) -> int& { return c.balance.background; }));
    v.push_back(num("proposals.unlabeled", [](C& c) -> int& { return c.unlabeled_windows; }));
    v.push_back(num("proposals.weak", [](C& c) -> int& { return c.weak_windows; }));
    v.push_back(num("eval.nms", [](C& c) -> double& { return c.nms_threshold; }));
    v.push_back(num("eval.error_min_score", [](C& c) -> double& { return c.error_min_score; }));
    v.push_back(num("eval.error_tiou", [](C& c) -> double& { return c.error_tiou; }));
    v.push_back({"output", [](C& c, const std::string& s) { c.output_dir = s; },
                 [](const C& c) { return c.output_dir; }});
    v.push_back(num("checkpoint_every", [](C& c) -> int& { return c.checkpoint_every; }));
    v.push_back(num("seed", [](C& c) -> std::uint64_t& { return c.seed; }));
    return v;
  }();
  return f;
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (f.key == key) return f.set(*this, value);
  throw ConfigError("unknown config key: " + key);
}

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.key);
  return k;
}

std::string ExperimentConfig::to_text() const {
  std::string s;
  for (const auto& f : fields()) s += f.key + " = " + f.get(*this) + "\n";
  return s;
}

std::string ExperimentConfig::hash() const {
  // FNV-1a over the canonical text without the output location.
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& f : fields()) {
    if (f.key == "output") continue;
    for (char ch : f.key + "=" + f.get(*this) + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  c.apply(text);
  return c;
}

void ExperimentConfig::apply(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

ExperimentConfig ExperimentConfig::load(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (!corpus_path.empty() && !fs::exists(corpus_path)) fail("corpus path does not exist: " + corpus_path);
  if (!test_corpus_path.empty() && !fs::exists(test_corpus_path))
    fail("test corpus path does not exist: " + test_corpus_path);
  if (corpus_path.empty() && videos < 1) fail("videos must be >= 1");
  if (test_corpus_path.empty() && test_videos < 0) fail("test_videos must be >= 0");
  double sum = 0;
  for (double r : split) {
    if (!(r >= 0.0 && r <= 1.0)) fail("split ratios must lie in [0, 1]");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail("split ratios must sum to 1");
  if (split[0] <= 0.0) fail("split.full must be > 0");
  if (steps <= 0) fail("train.steps must be > 0");
  if (!(lr > 0.0)) fail("train.lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("train.momentum must be in [0, 1)");
  if (batch_full < 1 || batch_unlabeled < 0 || batch_weak < 0) fail("batch sizes must be >= 0 (full >= 1)");
  if (grad_clip < 0.0) fail("train.grad_clip must be >= 0");
  if (!(ramp_fraction >= 0.0 && ramp_fraction <= 1.0)) fail("train.ramp_fraction must be in [0, 1]");
  if (samples < 1 || context < 1) fail("proposals.samples and proposals.context must be >= 1");
  if (unlabeled_windows < 1 || weak_windows < 1) fail("proposal counts must be >= 1");
  if (scales.empty() || !(stride_ratio > 0.0)) fail("proposal scales and stride ratio must be positive");
  if (!(nms_threshold >= 0.0 && nms_threshold < 1.0)) fail("eval.nms must be in [0, 1)");
  if (checkpoint_every < 1) fail("checkpoint_every must be >= 1");
  if (ssl.mixmatch_k < 1) fail("ssl.k must be >= 1");
  if (!(ssl.sharpen_temperature > 0.0)) fail("ssl.temperature must be > 0");
  if (!(ssl.tau > 0.0 && ssl.tau <= 1.0)) fail("ssl.tau must be in (0, 1]");
  if (!(ssl.ema_decay >= 0.0 && ssl.ema_decay <= 1.0)) fail("ssl.ema_decay must be in [0, 1]");
  if (!(ssl.beta_alpha > 0.0)) fail("ssl.beta_alpha must be > 0");
  try {
    weights.validate();
    if (corpus_path.empty()) data.validate();
    model_config(data).validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

ModelConfig ExperimentConfig::model_config(const GeneratorSpec& d) const {
  ModelConfig m;
  m.num_classes = d.num_classes;
  m.in_channels = d.channels;
  m.height = d.height;
  m.width = d.width;
  m.conv_channels = conv_channels;
  m.conv_strides = conv_strides;
  m.attention = attention;
  m.gaussian_sigma = gaussian_sigma;
  m.predictor_hidden = predictor_hidden;
  m.seed = seed;
  return m;
}

Dataset prepare_data(const ExperimentConfig& c) {
  c.validate();
  Dataset d;
  d.train = c.corpus_path.empty() ? generate_corpus(c.data, c.videos) : load_corpus(c.corpus_path);
  if (!c.test_corpus_path.empty()) {
    d.test = load_corpus(c.test_corpus_path);
  } else if (c.test_videos > 0) {
    GeneratorSpec ts = d.train.spec;
    ts.seed = d.train.spec.seed ^ 0x7e57c0de5eedull;
    d.test = generate_corpus(ts, c.test_videos);
  } else {
    d.test.spec = d.train.spec;
  }
  // A stored split is kept when the config leaves the split at its default.
  const bool keep_stored = d.train.split && c.split == ExperimentConfig{}.split;
  if (!keep_stored) apply_split(d.train, make_split(d.train, c.split, c.split_seed));
  return d;
}

// ---------------------------------------------------------------------------

namespace {

enum Stream : std::uint64_t { kFull = 1, kUnlabeled, kWeak, kAdapter, kProposal };

void concat_sequences(std::vector<MotionSequence>& parts, MotionSequence& out) {
  std::vector<ad::Var> f, b, n;
  for (const auto& s : parts) {
    f.push_back(s.f);
    b.push_back(s.b);
    n.push_back(s.f_next);
  }
  out.f = ad::concat_rows(f);
  out.b = ad::concat_rows(b);
  out.f_next = ad::concat_rows(n);
}

}  // namespace

Trainer::Trainer(ExperimentConfig config, const Corpus& corpus)
    : config_(std::move(config)), model_config_(config_.model_config(corpus.spec)), model_(model_config_) {
  config_.validate();
  if (corpus.videos.empty()) throw ConfigError("training corpus is empty");
  for (std::size_t i = 0; i < corpus.videos.size(); ++i) {
    const auto& v = corpus.videos[i];
    Prepared p{&v, frames_to_tensor(v), generate_windows(v.shape.frames, config_.scales, config_.stride_ratio), {}, {}};
    switch (v.supervision) {
      case Supervision::Full:
        for (const auto& w : p.windows) p.targets.push_back(assign_targets(w, v.training_segments()));
        full_.push_back(i);
        break;
      case Supervision::Weak:
        p.labels = v.training_weak_labels();
        weak_.push_back(i);
        break;
      case Supervision::Unlabeled: unlabeled_.push_back(i); break;
    }
    videos_.push_back(std::move(p));
  }
  if (full_.empty()) throw ConfigError("training corpus has no fully labeled videos");
  for (const auto& p : model_.parameters()) velocity_.emplace_back(p.var->value.shape, 0.0);
}

double Trainer::learning_rate(long s) const {
  return config_.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(s) / config_.steps));
}

double Trainer::unlabeled_weight(long s) const {
  const double ramp_steps = config_.ramp_fraction * config_.steps;
  const double r = ramp_steps > 0.0 ? std::min(1.0, static_cast<double>(s + 1) / ramp_steps) : 1.0;
  return config_.weights.unlabeled * r;
}

std::vector<std::size_t> Trainer::draw(const std::vector<std::size_t>& pool, int count, Rng& rng) const {
  std::vector<std::size_t> p = pool;
  std::shuffle(p.begin(), p.end(), rng);
  p.resize(std::min<std::size_t>(p.size(), static_cast<std::size_t>(count)));
  return p;
}

std::vector<Window> Trainer::subset(const std::vector<Window>& windows, int count, Rng& rng) const {
  std::vector<std::size_t> idx(windows.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(count)));
  std::sort(idx.begin(), idx.end());
  std::vector<Window> out;
  for (auto i : idx) out.push_back(windows[i]);
  return out;
}

LossReport Trainer::forward(long s) {
  const auto& c = config_;
  const std::uint64_t step = static_cast<std::uint64_t>(s);
  const Weights live = model_.live();
  std::vector<FrameFeatures> ufa_feats;

  // Labeled videos.
  std::vector<LossReport> sup;
  {
    Rng rng = make_rng(c.seed, {kFull, step});
    for (auto vi : draw(full_, c.batch_full, rng)) {
      const auto& v = videos_[vi];
      auto feats = extract_features(model_config_, live, ad::constant(v.frames));
      const auto chosen = balance_proposals(v.targets, c.balance, rng);
      std::vector<FrameSample> samples;
      std::vector<ProposalTargets> targets;
      for (auto i : chosen) {
        samples.push_back(sample_frames(v.windows[i], v.video->shape.frames, rng, c.samples, c.context));
        targets.push_back(v.targets[i]);
      }
      if (samples.empty()) continue;
      const auto pooled = pool_proposals(feats.z, samples);
      sup.push_back(supervised_loss(apply_heads(live, pooled.p, pooled.context), targets, c.weights.comp_s,
                                    c.weights.reg_s));
      ufa_feats.push_back(feats);
    }
  }

  // Unlabeled videos through the adapter.
  LossWeights w = c.weights;
  w.unlabeled = c.ssl.method == SslMethod::None ? 0.0 : unlabeled_weight(s);
  std::vector<LossReport> unl;
  if (w.unlabeled > 0.0 && !unlabeled_.empty() && c.batch_unlabeled > 0) {
    Rng rng = make_rng(c.seed, {kUnlabeled, step});
    std::vector<UnlabeledInput> batch;
    for (auto vi : draw(unlabeled_, c.batch_unlabeled, rng))
      batch.push_back({&videos_[vi].frames, subset(videos_[vi].windows, c.unlabeled_windows, rng)});
    Rng arng = make_rng(c.seed, {kAdapter, step});
    SslConfig sc = c.ssl;
    sc.samples_per_proposal = c.samples;
    sc.context_frames = c.context;
    auto out = run_adapter(sc, batch, model_config_, live, model_.teacher(), model_.frozen(), c.weights, arng);
    unl.push_back(std::move(out.report));
    if (c.ufa_all_videos)
      for (auto& f : out.student_features) ufa_feats.push_back(f);
  }

  // Weakly labeled videos.
  std::vector<LossReport> weak;
  if (w.weak > 0.0 && !weak_.empty() && c.batch_weak > 0) {
    Rng rng = make_rng(c.seed, {kWeak, step});
    for (auto vi : draw(weak_, c.batch_weak, rng)) {
      const auto& v = videos_[vi];
      auto feats = extract_features(model_config_, live, ad::constant(v.frames));
      std::vector<FrameSample> samples;
      for (const auto& win : subset(v.windows, c.weak_windows, rng))
        samples.push_back(sample_frames(win, v.video->shape.frames, rng, c.samples, c.context));
      const auto pooled = pool_proposals(feats.z, samples);
      weak.push_back(weak_loss(apply_heads(live, pooled.p, pooled.context), pooled.p, v.labels,
                               c.ib_enabled ? c.weights.ib : 0.0));
      if (c.ufa_all_videos) ufa_feats.push_back(feats);
    }
  }

  LossReport report = total_loss(sup, unl, weak, w);

  if (c.attention == AttentionMode::Ufa && !ufa_feats.empty()) {
    std::vector<MotionSequence> seqs;
    for (const auto& f : ufa_feats) {
      auto zhat = ad::detach(f.zhat);
      seqs.push_back(motion_sequence(zhat, attention_map(live, zhat), c.motion));
    }
    MotionSequence all;
    concat_sequences(seqs, all);
    auto ufa = ufa_loss(all, model_.predictors(true), model_.predictors(false));
    report.add("ufa", ufa.objective, c.weights.ufa);
    // Predictor fits are weighted by the inverse energy of their target so
    // their gradients keep a fixed scale while the backbone features grow.
    double energy = 0;
    for (double v : all.f_next->value.data) energy += v * v;
    const double rows = static_cast<double>(all.f_next->value.dim(0));
    const double fit_w = 1.0 / std::max(1e-8, energy / rows);
    report.add("ufa.psi_mse", ufa.mse_psi, fit_w);
    report.add("ufa.zeta_mse", ufa.mse_zeta, fit_w);
    if (ufa.clamped) report.flag("ufa_clamped");
  }
  return report;
}

LossReport Trainer::step() {
  const long s = step_;
  LossReport report = forward(s);
  auto total = report.total();
  const double lr = learning_rate(s);
  if (!std::isfinite(total->value[0])) throw DivergenceError(s, report.to_json_line(s, lr));

  model_.zero_grad();
  ad::backward(total);
  // Clipping is per parameter group: the predictors fit their own regression
  // problem and the attention sees the large log-ratio gradient, neither may
  // scale down the detection gradients of the other groups.
  const auto& params = model_.parameters();
  constexpr int kGroups = 5;
  double norm2[kGroups] = {0, 0, 0, 0, 0};
  for (const auto& p : params)
    for (double g : p.var->grad.data) norm2[static_cast<int>(p.group)] += g * g;
  double clip[kGroups];
  for (int k = 0; k < kGroups; ++k) {
    if (!std::isfinite(norm2[k])) throw DivergenceError(s, report.to_json_line(s, lr));
    const double norm = std::sqrt(norm2[k]);
    clip[k] = config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& var = *params[k].var;
    if (var.grad.numel() == 0) continue;
    auto& vel = velocity_[k];
    const double c = clip[static_cast<int>(params[k].group)];
    for (std::size_t i = 0; i < vel.numel(); ++i) {
      vel[i] = config_.momentum * vel[i] + c * var.grad[i];
      var.value[i] -= lr * vel[i];
    }
  }
  model_.zero_grad();
  if (config_.ssl.method == SslMethod::MeanTeacher) model_.ema_update(config_.ssl.ema_decay);
  ++step_;
  return report;
}

TrainResult train(const ExperimentConfig& config, const Corpus& corpus) {
  Trainer trainer(config, corpus);
  const bool write = !config.output_dir.empty();
  const fs::path out = config.output_dir;
  std::ofstream log;
  if (write) {
    fs::create_directories(out);
    std::ofstream(out / "config.txt") << config.to_text();
    log.open(out / "train_log.jsonl");
  }
  TrainResult res{trainer.model(), {}, {}, {}, INFINITY};
  std::deque<double> recent;
  double recent_sum = 0;
  const std::size_t window = 20;
  for (long s = 0; s < config.steps; ++s) {
    const double lr = trainer.learning_rate(s);
    const LossReport rep = trainer.step();
    const std::string line = rep.to_json_line(s, lr);
    res.log.push_back(line);
    if (write) log << line << '\n' << std::flush;

    recent.push_back(rep.total()->value[0]);
    recent_sum += recent.back();
    if (recent.size() > window) {
      recent_sum -= recent.front();
      recent.pop_front();
    }
    const bool check = (s + 1) % config.checkpoint_every == 0 || s + 1 == config.steps;
    if (check && recent.size() == std::min<std::size_t>(window, static_cast<std::size_t>(s + 1))) {
      const double mean = recent_sum / static_cast<double>(recent.size());
      if (mean < res.best_loss) {
        res.best_loss = mean;
        if (write) {
          res.best_checkpoint = out / "best";
          trainer.model().save(res.best_checkpoint);
        }
      }
    }
  }
  if (write) {
    res.final_checkpoint = out / "final";
    trainer.model().save(res.final_checkpoint);
  }
  res.model = trainer.model();
  return res;
}

TrainResult train(const ExperimentConfig& config) {
  const Dataset d = prepare_data(config);
  return train(config, d.train);
}

// ---------------------------------------------------------------------------

EvalOptions EvalOptions::from(const ExperimentConfig& c) {
  return {c.scales, c.stride_ratio, c.samples, c.context, c.nms_threshold};
}

std::vector<Detection> detect(const Model& model, const std::vector<const VideoSample*>& videos,
                              const EvalOptions& o) {
  const auto& mc = model.config();
  const Weights w = model.frozen();
  const int C = mc.num_classes;
  std::vector<Detection> dets;
  for (const auto* v : videos) {
    const int T = v->shape.frames;
    const auto windows = generate_windows(T, o.scales, o.stride_ratio);
    if (windows.empty()) continue;
    auto feats = extract_features(mc, w, ad::constant(frames_to_tensor(*v)));
    std::vector<FrameSample> samples;
    for (const auto& win : windows) samples.push_back(center_frames(win, T, o.samples, o.context));
    const auto pooled = pool_proposals(feats.z, samples);
    const auto heads = apply_heads(w, pooled.p, pooled.context);
    const auto& cls = heads.cls_prob->value;
    const auto& comp = heads.comp_prob->value;
    const auto& reg = heads.reg->value;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      int k = 1;
      for (int j = 2; j <= C; ++j)
        if (cls.at(i, j) > cls.at(i, k)) k = j;
      const auto kk = static_cast<std::size_t>(k);
      const auto seg = apply_regression(windows[i], {reg.at(i, 2 * (kk - 1)), reg.at(i, 2 * (kk - 1) + 1)});
      dets.push_back({v->id, seg.start - 1.0, seg.end, k, cls.at(i, kk) * comp.at(i, kk - 1)});
    }
  }
  return nms(std::move(dets), o.nms_threshold);
}

std::vector<Detection> detect(const Model& model, const Corpus& corpus, const EvalOptions& o) {
  std::vector<const VideoSample*> vs;
  for (const auto& v : corpus.videos) vs.push_back(&v);
  return detect(model, vs, o);
}

std::vector<Detection> evaluate_checkpoint(const fs::path& checkpoint, const Corpus& corpus, const EvalOptions& o) {
  return detect(Model::load(checkpoint), corpus, o);
}

std::vector<GroundTruth> ground_truth(const Corpus& corpus) {
  std::vector<GroundTruth> gt;
  for (const auto& v : corpus.videos)
    for (const auto& s : v.evaluation_segments())
      gt.push_back({v.id, static_cast<double>(s.start - 1), static_cast<double>(s.end), s.label});
  return gt;
}

EvalSummary summarize(const std::vector<Detection>& dets, const Corpus& corpus, const ErrorOptions& eo) {
  const auto gt = ground_truth(corpus);
  return {mean_ap(dets, gt, avg_thresholds()), error_decomposition(dets, gt, eo), dets.size()};
}

MaskIou attention_mask_iou(const Model& model, const Corpus& corpus) {
  const auto& mc = model.config();
  const Weights w = model.frozen();
  double iou_sum = 0, base_sum = 0;
  std::size_t n = 0;
  for (const auto& v : corpus.videos) {
    auto feats = extract_features(mc, w, ad::constant(frames_to_tensor(v)));
    if (!feats.attention) throw std::invalid_argument("model has no attention map");
    const auto& a = feats.attention->value;  // [T, 1, h, w]
    const std::size_t gh = a.dim(2), gw = a.dim(3);
    const int H = v.shape.height, W = v.shape.width;
    for (int t = 0; t < v.shape.frames; ++t) {
      std::size_t inter = 0, uni = 0, area = 0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t cy = static_cast<std::size_t>(y) * gh / H, cx = static_cast<std::size_t>(x) * gw / W;
          const bool pred = a[(static_cast<std::size_t>(t) * gh + cy) * gw + cx] > 0.5;
          const bool m = v.mask(t, y, x);
          inter += pred && m;
          uni += pred || m;
          area += m;
        }
      if (area == 0) continue;
      iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
      base_sum += static_cast<double>(area) / (static_cast<double>(H) * W);
      ++n;
    }
  }
  if (n == 0) return {};
  return {iou_sum / n, base_sum / n};
}

}  // namespace osad
