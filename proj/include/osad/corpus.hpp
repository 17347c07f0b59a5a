#pragma once

// Synthetic video corpus.
//
// Each video shows one sprite moving over a wrapping background texture.
// Frames are T x H x W x Cin float grids. Channel 0 carries luminance
// (texture plus sprite); channels 1 and 2, when present, carry the per-pixel
// displacement to the next frame (a stand-in for optical flow). The sprite's
// displacement f_t follows a class-conditional Markov chain inside action
// segments and an idle jitter elsewhere; the background displacement is
// b_t = camera_gain * f_t + e_t with e_t ~ N(0, noise_std^2), so b_t is
// independent of f_{t+1} given f_t.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace osad {

enum class Supervision { Full, Weak, Unlabeled };

std::string to_string(Supervision s);
Supervision supervision_from_string(const std::string& s);

/// Action instance on inclusive 1-based frame indices.
struct Segment {
  int start = 1;
  int end = 1;
  int label = 1;
  bool operator==(const Segment&) const = default;
};

struct CorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Checksum or size mismatch while loading.
struct CorruptionError : CorpusError {
  using CorpusError::CorpusError;
};
struct SchemaError : CorpusError {
  using CorpusError::CorpusError;
};
/// Training code asked for labels its supervision level does not carry.
struct SupervisionError : std::logic_error {
  using std::logic_error::logic_error;
};

struct GeneratorSpec {
  int num_classes = 4;
  int frames = 60;
  int height = 16;
  int width = 16;
  int channels = 3;
  int sprite_size = 4;
  double camera_gain = 0.0;  // kappa
  double noise_std = 0.05;   // std of e_t
  std::uint64_t seed = 0;
  bool scene_bias = false;

  // Shape of the foreground process.
  double speed = 1.0;             // |class mean velocity| in pixels/frame
  double persistence = 0.8;       // AR(1) coefficient around the class velocity
  double innovation_std = 0.05;   // AR(1) innovation
  double idle_jitter = 0.15;      // std of idle displacement outside actions
  double scene_strength = 0.6;    // amplitude of the class-correlated texture
  double sprite_intensity = 1.0;
  int min_segments = 1;
  int max_segments = 2;
  int min_action_length = 8;
  int max_action_length = 20;

  void validate() const;
  bool operator==(const GeneratorSpec&) const = default;
};

struct FrameShape {
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::size_t frame_size() const { return static_cast<std::size_t>(height) * width * channels; }
  std::size_t numel() const { return frame_size() * frames; }
  bool operator==(const FrameShape&) const = default;
};

using Motion = std::array<double, 2>;

class VideoSample {
 public:
  std::string id;
  FrameShape shape;
  std::vector<float> frames;           // row-major T x H x W x Cin
  std::vector<std::uint8_t> fg_masks;  // row-major T x H x W, test-only ground truth
  std::vector<Motion> fg_motion;       // f_t, sprite displacement t -> t+1
  std::vector<Motion> bg_motion;       // b_t, background displacement t -> t+1
  Supervision supervision = Supervision::Full;

  void set_ground_truth(std::vector<Segment> segments);

  /// Segments usable by training code. Throws SupervisionError unless FULL.
  const std::vector<Segment>& training_segments() const;
  /// Video-level class set. Throws SupervisionError for UNLABELED.
  std::vector<int> training_weak_labels() const;
  /// Ground truth for evaluation and analysis; ignores supervision.
  const std::vector<Segment>& evaluation_segments() const { return segments_; }
  /// Class of the video's action instances (the generator uses one per video).
  int primary_class() const;

  float pixel(int t, int y, int x, int c) const {
    return frames[((static_cast<std::size_t>(t) * shape.height + y) * shape.width + x) * shape.channels + c];
  }
  bool mask(int t, int y, int x) const {
    return fg_masks[(static_cast<std::size_t>(t) * shape.height + y) * shape.width + x] != 0;
  }

  bool operator==(const VideoSample&) const = default;

 private:
  std::vector<Segment> segments_;
};

struct SplitManifest {
  std::array<double, 3> ratios{1.0, 0.0, 0.0};  // full, weak, unlabeled
  std::map<std::string, Supervision> assignment;
  std::uint64_t seed = 0;
  bool operator==(const SplitManifest&) const = default;
};

struct Corpus {
  GeneratorSpec spec;
  std::vector<VideoSample> videos;
  std::optional<SplitManifest> split;

  std::size_t size() const { return videos.size(); }
  bool operator==(const Corpus&) const = default;
};

/// One video; pure in (spec, index).
VideoSample generate_video(const GeneratorSpec& spec, int index);
Corpus generate_corpus(const GeneratorSpec& spec, int n_videos);

/// Stratified by primary class; deterministic in seed.
SplitManifest make_split(const Corpus& corpus, std::array<double, 3> ratios, std::uint64_t seed);
void apply_split(Corpus& corpus, const SplitManifest& split);

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

inline constexpr int kCorpusSchemaVersion = 1;

}  // namespace osad
