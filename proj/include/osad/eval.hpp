#pragma once

// Temporal detection metrics: tIoU, NMS, interpolated AP / mAP, and a
// duration-based error breakdown.
//
// Segments are real intervals [start, end]. A frame window (s, e) with
// inclusive 1-based frames covers [s - 1, e].

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace osad {

struct Detection {
  std::string video_id;
  double start = 0.0;
  double end = 0.0;
  int label = 1;
  double score = 0.0;
  bool operator==(const Detection&) const = default;
};

struct GroundTruth {
  std::string video_id;
  double start = 0.0;
  double end = 0.0;
  int label = 1;
};

double tiou(double a_start, double a_end, double b_start, double b_end);

/// Greedy per (video, class) by descending score; drops detections with tIoU > threshold to a kept one.
std::vector<Detection> nms(std::vector<Detection> detections, double threshold = 0.4);

/// 0.5, 0.55, ..., 0.95
std::vector<double> avg_thresholds();
/// 0.3, 0.4, ..., 0.7
std::vector<double> thumos_thresholds();

struct MapResult {
  std::vector<double> thresholds;
  std::vector<double> map;                     // aligned with thresholds
  double map_avg = 0.0;                        // over avg_thresholds()
  std::map<int, std::vector<double>> class_ap;  // per class, aligned with thresholds
  std::vector<int> excluded_classes;           // detected but without ground truth
  double at(double threshold) const;
};

/// All-point interpolated AP for one class at one threshold.
double average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gt,
                         double threshold);

MapResult mean_ap(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gt,
                  const std::vector<double>& thresholds);

struct ErrorBreakdown {
  double miss = 1.0;     // share of GT duration not covered by a same-class detection
  double cls = 0.0;      // share of detection duration on a tIoU-matched GT of another class
  double bkgd = 0.0;     // share of detection duration outside every GT
  double correct = 0.0;  // share of detection duration inside a same-class GT
};

struct ErrorOptions {
  double tiou_threshold = 0.5;
  double min_score = 0.0;  // detections scoring below are ignored
};

ErrorBreakdown error_decomposition(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gt,
                                   const ErrorOptions& options = {});

// Exchange formats.
void write_detections(const std::vector<Detection>& detections, const std::filesystem::path& path);
std::vector<Detection> read_detections(const std::filesystem::path& path);
void write_map_csv(const MapResult& result, const std::filesystem::path& path);
std::string map_summary_json(const MapResult& result, const ErrorBreakdown* errors = nullptr);

}  // namespace osad
