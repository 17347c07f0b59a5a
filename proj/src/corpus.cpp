#include "osad/corpus.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "osad/random.hpp"

namespace osad {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

std::string to_string(Supervision s) {
  switch (s) {
    case Supervision::Full: return "full";
    case Supervision::Weak: return "weak";
    case Supervision::Unlabeled: return "unlabeled";
  }
  return "?";
}

Supervision supervision_from_string(const std::string& s) {
  if (s == "full") return Supervision::Full;
  if (s == "weak") return Supervision::Weak;
  if (s == "unlabeled") return Supervision::Unlabeled;
  throw SchemaError("unknown supervision level '" + s + "'");
}

void GeneratorSpec::validate() const {
  if (num_classes < 1 || frames < 1 || height < 1 || width < 1 || channels < 1 || sprite_size < 1) {
    throw std::invalid_argument("generator: all dimensions must be positive");
  }
  if (sprite_size >= std::min(height, width)) {
    throw std::invalid_argument("generator: sprite_size " + std::to_string(sprite_size) +
                                " must be smaller than min(H, W) = " + std::to_string(std::min(height, width)));
  }
  if (frames < 4) throw std::invalid_argument("generator: need at least 4 frames per video");
  if (camera_gain < 0 || noise_std < 0 || innovation_std < 0 || idle_jitter < 0) {
    throw std::invalid_argument("generator: gains and noise levels must be non-negative");
  }
  if (min_segments < 1 || max_segments < min_segments) throw std::invalid_argument("generator: bad segment count range");
  if (min_action_length < 1 || max_action_length < min_action_length) {
    throw std::invalid_argument("generator: bad action length range");
  }
}

// ---------------------------------------------------------------------------
// VideoSample

void VideoSample::set_ground_truth(std::vector<Segment> segments) {
  std::sort(segments.begin(), segments.end(), [](const Segment& a, const Segment& b) { return a.start < b.start; });
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i];
    if (s.start < 1 || s.start > s.end || s.end > shape.frames) {
      throw std::invalid_argument("segment [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                                  "] outside 1.." + std::to_string(shape.frames));
    }
    if (i && segments[i - 1].end >= s.start) throw std::invalid_argument("segments overlap in video " + id);
  }
  segments_ = std::move(segments);
}

const std::vector<Segment>& VideoSample::training_segments() const {
  if (supervision != Supervision::Full) {
    throw SupervisionError("video " + id + " is " + to_string(supervision) + "; temporal labels are hidden");
  }
  return segments_;
}

std::vector<int> VideoSample::training_weak_labels() const {
  if (supervision == Supervision::Unlabeled) {
    throw SupervisionError("video " + id + " is unlabeled; class labels are hidden");
  }
  std::set<int> labels;
  for (const auto& s : segments_) labels.insert(s.label);
  return {labels.begin(), labels.end()};
}

int VideoSample::primary_class() const { return segments_.empty() ? 0 : segments_.front().label; }

// ---------------------------------------------------------------------------
// Generation

namespace {

struct Wave {
  int kx, ky;
  double phase, amplitude;
};

// Periodic on the W x H torus so the texture wraps under any shift.
double eval_texture(const std::vector<Wave>& waves, double x, double y, int w, int h) {
  double v = 0.0;
  for (const auto& wv : waves) {
    v += wv.amplitude *
         std::sin(2.0 * std::numbers::pi * (wv.kx * x / w + wv.ky * y / h) + wv.phase);
  }
  return v;
}

std::vector<Wave> random_waves(Rng& rng, int count, double amplitude) {
  std::vector<Wave> waves;
  for (int i = 0; i < count; ++i) {
    int kx = uniform_int(rng, -3, 3), ky = uniform_int(rng, 0, 3);
    if (kx == 0 && ky == 0) ky = 1;
    waves.push_back({kx, ky, 2.0 * std::numbers::pi * uniform01(rng), amplitude});
  }
  return waves;
}

std::vector<Segment> place_segments(const GeneratorSpec& spec, int label, Rng& rng) {
  const int T = spec.frames;
  const int wanted = uniform_int(rng, spec.min_segments, spec.max_segments);
  std::vector<Segment> segs;
  for (int attempt = 0; attempt < 200 && static_cast<int>(segs.size()) < wanted; ++attempt) {
    const int len = std::min(T, uniform_int(rng, spec.min_action_length, spec.max_action_length));
    const int start = uniform_int(rng, 1, T - len + 1);
    const Segment cand{start, start + len - 1, label};
    const bool clash = std::any_of(segs.begin(), segs.end(), [&](const Segment& s) {
      return cand.start <= s.end + 2 && s.start <= cand.end + 2;
    });
    if (!clash) segs.push_back(cand);
  }
  if (segs.empty()) {
    const int len = std::min(T, spec.min_action_length);
    segs.push_back({1, len, label});
  }
  std::sort(segs.begin(), segs.end(), [](const Segment& a, const Segment& b) { return a.start < b.start; });
  return segs;
}

double wrap(double v, double period) {
  v = std::fmod(v, period);
  return v < 0 ? v + period : v;
}

}  // namespace

VideoSample generate_video(const GeneratorSpec& spec, int index) {
  spec.validate();
  const int T = spec.frames, H = spec.height, W = spec.width, C = spec.channels;
  Rng rng = make_rng(spec.seed, {0x766964656fULL, static_cast<std::uint64_t>(index)});

  VideoSample v;
  std::ostringstream name;
  name << "v" << std::setw(5) << std::setfill('0') << index;
  v.id = name.str();
  v.shape = {T, H, W, C};

  const int label = 1 + index % spec.num_classes;
  auto segments = place_segments(spec, label, rng);
  std::vector<bool> in_action(static_cast<std::size_t>(T), false);
  for (const auto& s : segments)
    for (int t = s.start; t <= s.end; ++t) in_action[static_cast<std::size_t>(t - 1)] = true;

  // Foreground chain and background response.
  const double angle = 2.0 * std::numbers::pi * (label - 1) / spec.num_classes;
  const Motion class_velocity{spec.speed * std::cos(angle), spec.speed * std::sin(angle)};
  v.fg_motion.resize(static_cast<std::size_t>(T));
  v.bg_motion.resize(static_cast<std::size_t>(T));
  Motion prev{0.0, 0.0};
  for (int t = 0; t < T; ++t) {
    Motion f;
    if (in_action[static_cast<std::size_t>(t)]) {
      for (int k = 0; k < 2; ++k) {
        f[k] = class_velocity[k] + spec.persistence * (prev[k] - class_velocity[k]) +
               normal(rng, 0.0, spec.innovation_std);
      }
    } else {
      f = {normal(rng, 0.0, spec.idle_jitter), normal(rng, 0.0, spec.idle_jitter)};
    }
    Motion b;
    for (int k = 0; k < 2; ++k) b[k] = spec.camera_gain * f[k] + normal(rng, 0.0, spec.noise_std);
    v.fg_motion[static_cast<std::size_t>(t)] = f;
    v.bg_motion[static_cast<std::size_t>(t)] = b;
    prev = f;
  }

  auto texture = random_waves(rng, 3, 0.25);
  if (spec.scene_bias) {
    Rng scene_rng = make_rng(spec.seed, {0x7363656e65ULL, static_cast<std::uint64_t>(label)});
    auto scene = random_waves(scene_rng, 2, spec.scene_strength / 2.0);
    texture.insert(texture.end(), scene.begin(), scene.end());
  }
  auto detail = random_waves(rng, 2, 0.2);

  double px = uniform01(rng) * W, py = uniform01(rng) * H;
  double ox = 0.0, oy = 0.0;
  v.frames.assign(v.shape.numel(), 0.0f);
  v.fg_masks.assign(static_cast<std::size_t>(T) * H * W, 0);
  for (int t = 0; t < T; ++t) {
    const auto& f = v.fg_motion[static_cast<std::size_t>(t)];
    const auto& b = v.bg_motion[static_cast<std::size_t>(t)];
    const int sx = static_cast<int>(std::floor(px + 0.5)) % W;
    const int sy = static_cast<int>(std::floor(py + 0.5)) % H;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const bool fg = ((x - sx + W) % W) < spec.sprite_size && ((y - sy + H) % H) < spec.sprite_size;
        const std::size_t base = ((static_cast<std::size_t>(t) * H + y) * W + x) * C;
        float* px_out = v.frames.data() + base;
        if (fg) {
          v.fg_masks[(static_cast<std::size_t>(t) * H + y) * W + x] = 1;
          px_out[0] = static_cast<float>(spec.sprite_intensity);
          if (C > 1) px_out[1] = static_cast<float>(f[0]);
          if (C > 2) px_out[2] = static_cast<float>(f[1]);
          for (int c = 3; c < C; ++c) px_out[c] = static_cast<float>(0.5 * spec.sprite_intensity);
        } else {
          px_out[0] = static_cast<float>(eval_texture(texture, x - ox, y - oy, W, H));
          if (C > 1) px_out[1] = static_cast<float>(b[0]);
          if (C > 2) px_out[2] = static_cast<float>(b[1]);
          for (int c = 3; c < C; ++c) px_out[c] = static_cast<float>(eval_texture(detail, x - ox, y - oy, W, H));
        }
      }
    px = wrap(px + f[0], W);
    py = wrap(py + f[1], H);
    ox += b[0];
    oy += b[1];
  }

  v.set_ground_truth(std::move(segments));
  return v;
}

Corpus generate_corpus(const GeneratorSpec& spec, int n_videos) {
  spec.validate();
  if (n_videos < 1) throw std::invalid_argument("generate_corpus: need at least one video");
  Corpus corpus;
  corpus.spec = spec;
  corpus.videos.reserve(static_cast<std::size_t>(n_videos));
  for (int i = 0; i < n_videos; ++i) corpus.videos.push_back(generate_video(spec, i));
  return corpus;
}

// ---------------------------------------------------------------------------
// Splits

namespace {

// Largest-remainder apportionment of `total` over groups with quotas
// proportional to `weights`, capped by `capacity`.
std::vector<int> apportion(const std::vector<int>& weights, const std::vector<int>& capacity, int total, Rng& rng) {
  const int n = std::accumulate(weights.begin(), weights.end(), 0);
  std::vector<int> out(weights.size(), 0);
  if (total == 0 || n == 0) return out;
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t g = 0; g < weights.size(); ++g) {
    const double quota = static_cast<double>(weights[g]) * total / n;
    out[g] = std::min(capacity[g], static_cast<int>(std::floor(quota)));
    assigned += out[g];
    remainders.emplace_back(quota - std::floor(quota), g);
  }
  // Random tie-breaking, then by remainder.
  std::shuffle(remainders.begin(), remainders.end(), rng);
  std::stable_sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) { return a.first > b.first; });
  while (assigned < total) {
    bool progress = false;
    for (auto& [rem, g] : remainders) {
      if (assigned == total) break;
      if (out[g] < capacity[g]) {
        ++out[g];
        ++assigned;
        progress = true;
      }
    }
    if (!progress) throw std::logic_error("apportion: capacity exhausted");
  }
  return out;
}

}  // namespace

SplitManifest make_split(const Corpus& corpus, std::array<double, 3> ratios, std::uint64_t seed) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("split ratios must lie in [0, 1]");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
  const int n = static_cast<int>(corpus.size());
  const int n_full = static_cast<int>(std::lround(ratios[0] * n));
  const int n_weak = std::min(n - n_full, static_cast<int>(std::lround(ratios[1] * n)));
  const int n_unl = n - n_full - n_weak;
  const std::array<int, 3> counts{n_full, n_weak, n_unl};
  const char* names[] = {"full", "weak", "unlabeled"};
  for (int k = 0; k < 3; ++k) {
    if (ratios[static_cast<std::size_t>(k)] > 0.0 && counts[static_cast<std::size_t>(k)] == 0) {
      throw std::invalid_argument(std::string("split: ratio for ") + names[k] + " rounds to zero videos out of " +
                                  std::to_string(n));
    }
  }

  Rng rng = make_rng(seed, {0x73706c6974ULL});
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < corpus.videos.size(); ++i) by_class[corpus.videos[i].primary_class()].push_back(i);
  std::vector<int> sizes;
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    sizes.push_back(static_cast<int>(members.size()));
  }
  const auto full_per_class = apportion(sizes, sizes, n_full, rng);
  std::vector<int> remaining(sizes.size());
  for (std::size_t g = 0; g < sizes.size(); ++g) remaining[g] = sizes[g] - full_per_class[g];
  const auto weak_per_class = apportion(sizes, remaining, n_weak, rng);

  SplitManifest split;
  split.ratios = ratios;
  split.seed = seed;
  std::size_t g = 0;
  for (const auto& [label, members] : by_class) {
    for (std::size_t k = 0; k < members.size(); ++k) {
      Supervision s = Supervision::Unlabeled;
      if (static_cast<int>(k) < full_per_class[g]) {
        s = Supervision::Full;
      } else if (static_cast<int>(k) < full_per_class[g] + weak_per_class[g]) {
        s = Supervision::Weak;
      }
      split.assignment[corpus.videos[members[k]].id] = s;
    }
    ++g;
  }
  return split;
}

void apply_split(Corpus& corpus, const SplitManifest& split) {
  for (auto& v : corpus.videos) {
    auto it = split.assignment.find(v.id);
    if (it == split.assignment.end()) throw std::invalid_argument("split does not assign video " + v.id);
    v.supervision = it->second;
  }
  if (split.assignment.size() != corpus.videos.size()) {
    throw std::invalid_argument("split assigns ids that are not in the corpus");
  }
  corpus.split = split;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

using nlohmann::json;

std::string crc_hex(const std::string& bytes) {
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc;
  return os.str();
}

template <typename T>
std::string to_bytes(const std::vector<T>& v) {
  return {reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T)};
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CorpusError("short write on " + p.string());
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CorpusError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string labels_text(const std::vector<Segment>& segs) {
  std::ostringstream os;
  for (const auto& s : segs) os << s.start << ' ' << s.end << ' ' << s.label << '\n';
  return os.str();
}

std::vector<Segment> parse_labels(const std::string& text, const std::string& id) {
  std::vector<Segment> segs;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Segment s;
    if (!(ls >> s.start >> s.end >> s.label)) throw CorruptionError("bad label line for video " + id + ": " + line);
    segs.push_back(s);
  }
  return segs;
}

std::string motion_bytes(const VideoSample& v) {
  std::vector<double> flat;
  flat.reserve(v.fg_motion.size() * 4);
  for (std::size_t t = 0; t < v.fg_motion.size(); ++t) {
    flat.insert(flat.end(), {v.fg_motion[t][0], v.fg_motion[t][1], v.bg_motion[t][0], v.bg_motion[t][1]});
  }
  return to_bytes(flat);
}

json spec_to_json(const GeneratorSpec& s) {
  return {{"num_classes", s.num_classes},
          {"frames", s.frames},
          {"height", s.height},
          {"width", s.width},
          {"channels", s.channels},
          {"sprite_size", s.sprite_size},
          {"camera_gain", s.camera_gain},
          {"noise_std", s.noise_std},
          {"seed", s.seed},
          {"scene_bias", s.scene_bias},
          {"speed", s.speed},
          {"persistence", s.persistence},
          {"innovation_std", s.innovation_std},
          {"idle_jitter", s.idle_jitter},
          {"scene_strength", s.scene_strength},
          {"sprite_intensity", s.sprite_intensity},
          {"min_segments", s.min_segments},
          {"max_segments", s.max_segments},
          {"min_action_length", s.min_action_length},
          {"max_action_length", s.max_action_length}};
}

GeneratorSpec spec_from_json(const json& j) {
  GeneratorSpec s;
  s.num_classes = j.at("num_classes");
  s.frames = j.at("frames");
  s.height = j.at("height");
  s.width = j.at("width");
  s.channels = j.at("channels");
  s.sprite_size = j.at("sprite_size");
  s.camera_gain = j.at("camera_gain");
  s.noise_std = j.at("noise_std");
  s.seed = j.at("seed");
  s.scene_bias = j.at("scene_bias");
  s.speed = j.at("speed");
  s.persistence = j.at("persistence");
  s.innovation_std = j.at("innovation_std");
  s.idle_jitter = j.at("idle_jitter");
  s.scene_strength = j.at("scene_strength");
  s.sprite_intensity = j.at("sprite_intensity");
  s.min_segments = j.at("min_segments");
  s.max_segments = j.at("max_segments");
  s.min_action_length = j.at("min_action_length");
  s.max_action_length = j.at("max_action_length");
  return s;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "videos");
  fs::create_directories(dir / "labels");
  fs::create_directories(dir / "masks");
  fs::create_directories(dir / "motion");

  json manifest;
  manifest["format"] = "osad-corpus";
  manifest["schema_version"] = kCorpusSchemaVersion;
  manifest["dtype"] = "float32";
  manifest["layout"] = "T,H,W,C row-major little-endian";
  manifest["generator"] = spec_to_json(corpus.spec);
  if (corpus.split) {
    json split;
    split["ratios"] = corpus.split->ratios;
    split["seed"] = corpus.split->seed;
    json assignment = json::object();
    for (const auto& [id, s] : corpus.split->assignment) assignment[id] = to_string(s);
    split["assignment"] = assignment;
    manifest["split"] = split;
  } else {
    manifest["split"] = nullptr;
  }
  json videos = json::array();
  for (const auto& v : corpus.videos) {
    const auto frames = to_bytes(v.frames);
    const auto masks = to_bytes(v.fg_masks);
    const auto labels = labels_text(v.evaluation_segments());
    const auto motion = motion_bytes(v);
    write_file(dir / "videos" / (v.id + ".bin"), frames);
    write_file(dir / "masks" / (v.id + ".bin"), masks);
    write_file(dir / "labels" / (v.id + ".txt"), labels);
    write_file(dir / "motion" / (v.id + ".bin"), motion);
    videos.push_back({{"id", v.id},
                      {"shape", {v.shape.frames, v.shape.height, v.shape.width, v.shape.channels}},
                      {"supervision", to_string(v.supervision)},
                      {"checksums",
                       {{"video", crc_hex(frames)},
                        {"mask", crc_hex(masks)},
                        {"labels", crc_hex(labels)},
                        {"motion", crc_hex(motion)}}}});
  }
  manifest["videos"] = videos;
  write_file(dir / "manifest.txt", manifest.dump(2) + "\n");
}

Corpus load_corpus(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.txt"));
  } catch (const json::parse_error& e) {
    throw CorruptionError("manifest.txt is not valid: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "osad-corpus") throw SchemaError("not an osad corpus manifest");
  const int version = manifest.value("schema_version", -1);
  if (version != kCorpusSchemaVersion) {
    throw SchemaError("corpus schema version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCorpusSchemaVersion) + ")");
  }
  if (manifest.value("dtype", "") != "float32") throw SchemaError("unsupported dtype");

  Corpus corpus;
  try {
    corpus.spec = spec_from_json(manifest.at("generator"));
    for (const auto& jv : manifest.at("videos")) {
      VideoSample v;
      v.id = jv.at("id");
      const auto& sh = jv.at("shape");
      v.shape = {sh.at(0), sh.at(1), sh.at(2), sh.at(3)};
      v.supervision = supervision_from_string(jv.at("supervision"));
      const auto& sums = jv.at("checksums");

      auto checked = [&](const std::filesystem::path& p, const char* key, std::size_t expected_size) {
        auto bytes = read_file(p);
        if (expected_size != std::string::npos && bytes.size() != expected_size) {
          throw CorruptionError("video " + v.id + ": " + p.filename().string() + " has " +
                                std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected_size));
        }
        if (crc_hex(bytes) != sums.at(key).get<std::string>()) {
          throw CorruptionError("video " + v.id + ": checksum mismatch on " + key);
        }
        return bytes;
      };

      const auto T = static_cast<std::size_t>(v.shape.frames);
      const auto frames = checked(dir / "videos" / (v.id + ".bin"), "video", v.shape.numel() * sizeof(float));
      const auto masks = checked(dir / "masks" / (v.id + ".bin"), "mask",
                                 T * static_cast<std::size_t>(v.shape.height * v.shape.width));
      const auto labels = checked(dir / "labels" / (v.id + ".txt"), "labels", std::string::npos);
      const auto motion = checked(dir / "motion" / (v.id + ".bin"), "motion", T * 4 * sizeof(double));

      v.frames.resize(v.shape.numel());
      std::memcpy(v.frames.data(), frames.data(), frames.size());
      v.fg_masks.assign(masks.begin(), masks.end());
      std::vector<double> flat(T * 4);
      std::memcpy(flat.data(), motion.data(), motion.size());
      v.fg_motion.resize(T);
      v.bg_motion.resize(T);
      for (std::size_t t = 0; t < T; ++t) {
        v.fg_motion[t] = {flat[4 * t], flat[4 * t + 1]};
        v.bg_motion[t] = {flat[4 * t + 2], flat[4 * t + 3]};
      }
      v.set_ground_truth(parse_labels(labels, v.id));
      corpus.videos.push_back(std::move(v));
    }
    if (!manifest.at("split").is_null()) {
      const auto& js = manifest.at("split");
      SplitManifest split;
      split.ratios = js.at("ratios").get<std::array<double, 3>>();
      split.seed = js.at("seed");
      for (const auto& [id, s] : js.at("assignment").items()) split.assignment[id] = supervision_from_string(s);
      corpus.split = split;
    }
  } catch (const json::exception& e) {
    throw SchemaError("manifest.txt missing or mistyped field: " + std::string(e.what()));
  }
  return corpus;
}

}  // namespace osad
