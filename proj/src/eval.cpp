#include "osad/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace osad {

double tiou(double a_start, double a_end, double b_start, double b_end) {
  const double inter = std::max(0.0, std::min(a_end, b_end) - std::max(a_start, b_start));
  const double uni = std::max(a_end, b_end) - std::min(a_start, b_start);
  if (uni <= 0.0) return (a_start == b_start && a_end == b_end) ? 1.0 : 0.0;
  return inter / uni;
}

std::vector<Detection> nms(std::vector<Detection> detections, double threshold) {
  if (!(threshold >= 0.0 && threshold < 1.0)) throw std::invalid_argument("nms threshold must be in [0, 1)");
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.video_id == d.video_id && k.label == d.label && tiou(k.start, k.end, d.start, d.end) > threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<double> avg_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

std::vector<double> thumos_thresholds() { return {0.3, 0.4, 0.5, 0.6, 0.7}; }

double MapResult::at(double threshold) const {
  for (std::size_t i = 0; i < thresholds.size(); ++i)
    if (std::abs(thresholds[i] - threshold) < 1e-9) return map[i];
  throw std::out_of_range("threshold not evaluated");
}

double average_precision(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gt,
                         double threshold) {
  if (gt.empty()) return 0.0;
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
  std::vector<bool> used(gt.size(), false);
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (auto i : order) {
    const auto& d = detections[i];
    double best = -1.0;
    std::size_t best_j = gt.size();
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (used[j] || gt[j].video_id != d.video_id) continue;
      const double o = tiou(d.start, d.end, gt[j].start, gt[j].end);
      if (o >= threshold && o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best_j < gt.size()) {
      used[best_j] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(gt.size()));
  }
  // Interpolate: precision at each rank becomes the max precision at any later rank.
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  return ap;
}

MapResult mean_ap(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gt,
                  const std::vector<double>& thresholds) {
  std::map<int, std::vector<GroundTruth>> gt_by_class;
  for (const auto& g : gt) gt_by_class[g.label].push_back(g);
  std::map<int, std::vector<Detection>> det_by_class;
  for (const auto& d : detections) det_by_class[d.label].push_back(d);

  MapResult r;
  r.thresholds = thresholds;
  for (const auto& [label, _] : det_by_class)
    if (!gt_by_class.count(label)) r.excluded_classes.push_back(label);

  auto class_map = [&](double thr) {
    if (gt_by_class.empty()) return 0.0;
    double sum = 0;
    for (const auto& [label, g] : gt_by_class) sum += average_precision(det_by_class[label], g, thr);
    return sum / static_cast<double>(gt_by_class.size());
  };
  for (double thr : thresholds) {
    r.map.push_back(class_map(thr));
    for (const auto& [label, g] : gt_by_class)
      r.class_ap[label].push_back(average_precision(det_by_class[label], g, thr));
  }
  double avg = 0;
  const auto at = avg_thresholds();
  for (double thr : at) avg += class_map(thr);
  r.map_avg = avg / static_cast<double>(at.size());
  return r;
}

namespace {

using Interval = std::pair<double, double>;

double union_length(std::vector<Interval> iv) {
  std::sort(iv.begin(), iv.end());
  double total = 0, cur_s = 0, cur_e = 0;
  bool open = false;
  for (const auto& [s, e] : iv) {
    if (e <= s) continue;
    if (!open || s > cur_e) {
      if (open) total += cur_e - cur_s;
      cur_s = s;
      cur_e = e;
      open = true;
    } else {
      cur_e = std::max(cur_e, e);
    }
  }
  if (open) total += cur_e - cur_s;
  return total;
}

// Length of [s, e] covered by the union of `iv`.
double covered(double s, double e, const std::vector<Interval>& iv) {
  std::vector<Interval> clipped;
  for (const auto& [a, b] : iv) {
    const double lo = std::max(a, s), hi = std::min(b, e);
    if (hi > lo) clipped.emplace_back(lo, hi);
  }
  return union_length(std::move(clipped));
}

}  // namespace

ErrorBreakdown error_decomposition(const std::vector<Detection>& detections, const std::vector<GroundTruth>& gt,
                                   const ErrorOptions& options) {
  std::vector<const Detection*> dets;
  for (const auto& d : detections)
    if (d.score >= options.min_score && d.end > d.start) dets.push_back(&d);

  ErrorBreakdown out;
  double gt_total = 0, gt_missed = 0;
  for (const auto& g : gt) {
    const double len = g.end - g.start;
    if (len <= 0) continue;
    std::vector<Interval> same;
    for (const auto* d : dets)
      if (d->video_id == g.video_id && d->label == g.label) same.emplace_back(d->start, d->end);
    gt_total += len;
    gt_missed += len - covered(g.start, g.end, same);
  }
  out.miss = gt_total > 0 ? gt_missed / gt_total : 0.0;
  if (dets.empty()) {
    out.miss = gt_total > 0 ? 1.0 : 0.0;
    return out;
  }

  double det_total = 0, cls = 0, bkgd = 0, correct = 0;
  for (const auto* d : dets) {
    const double len = d->end - d->start;
    det_total += len;
    std::vector<Interval> all_gt, same_gt;
    const GroundTruth* best = nullptr;
    double best_iou = -1.0;
    for (const auto& g : gt) {
      if (g.video_id != d->video_id) continue;
      all_gt.emplace_back(g.start, g.end);
      if (g.label == d->label) same_gt.emplace_back(g.start, g.end);
      const double o = tiou(d->start, d->end, g.start, g.end);
      if (o > best_iou) {
        best_iou = o;
        best = &g;
      }
    }
    bkgd += len - covered(d->start, d->end, all_gt);
    correct += covered(d->start, d->end, same_gt);
    if (best && best_iou >= options.tiou_threshold && best->label != d->label)
      cls += std::max(0.0, std::min(d->end, best->end) - std::max(d->start, best->start));
  }
  out.cls = cls / det_total;
  out.bkgd = bkgd / det_total;
  out.correct = correct / det_total;
  return out;
}

void write_detections(const std::vector<Detection>& detections, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  for (const auto& d : detections)
    out << d.video_id << ' ' << d.start << ' ' << d.end << ' ' << d.label << ' ' << d.score << '\n';
}

std::vector<Detection> read_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<Detection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Detection d;
    if (!(ls >> d.video_id >> d.start >> d.end >> d.label >> d.score) || d.end < d.start || !std::isfinite(d.score))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed detection");
    out.push_back(std::move(d));
  }
  return out;
}

void write_map_csv(const MapResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "threshold,map\n" << std::setprecision(10);
  for (std::size_t i = 0; i < result.thresholds.size(); ++i)
    out << result.thresholds[i] << ',' << result.map[i] << '\n';
  out << "avg," << result.map_avg << '\n';
}

std::string map_summary_json(const MapResult& result, const ErrorBreakdown* errors) {
  nlohmann::json j;
  j["thresholds"] = result.thresholds;
  j["map"] = result.map;
  j["map_avg"] = result.map_avg;
  j["excluded_classes"] = result.excluded_classes;
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [label, ap] : result.class_ap) per_class[std::to_string(label)] = ap;
  j["class_ap"] = per_class;
  if (errors)
    j["errors"] = {{"miss", errors->miss}, {"cls", errors->cls}, {"bkgd", errors->bkgd}, {"correct", errors->correct}};
  return j.dump(2);
}

}  // namespace osad
