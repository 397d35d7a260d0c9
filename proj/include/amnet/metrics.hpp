#pragma once

// Evaluation: rank-based AUC over object-frame samples, frame-level AUC over
// per-frame max scores, time-to-accident at a threshold, its mean over a
// 99-point threshold sweep, and reports stratified by categorical tags.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "amnet/errors.hpp"
#include "amnet/model.hpp"
#include "amnet/synthdata.hpp"

namespace amnet {

struct ScoredSample {
  double score = 0.0;
  int label = 0;
  std::string video_id;
  long track_id = -1;
  long frame_index = -1;
};

// Which objects may trigger a TTA crossing.
enum class TtaMode {
  all_objects,  // per-frame max over every scored object
  risky_only    // max restricted to ground-truth risky objects
};

// Sample granularity for the object-level AUC.
enum class AucGranularity {
  object_frame,  // one sample per (object, frame) appearance
  per_track      // one sample per track, mean score over its appearances
};

struct MetricsReport {
  std::optional<double> object_auc;
  std::optional<double> frame_auc;
  double mtta_seconds = 0.0;
  std::map<std::string, double> per_threshold_tta;  // "0.01".."0.99"
  long positives = 0;
  long negatives = 0;
  long videos = 0;
  std::map<std::string, MetricsReport> groups;
};

// Rank-based AUC with ties counted as half, equal to exhaustive pair
// counting. Undefined when either class is absent.
inline std::optional<double> object_auc(const std::vector<ScoredSample>& samples) {
  std::size_t P = 0, N = 0;
  for (const ScoredSample& s : samples) {
    if (s.label != 0 && s.label != 1)
      throw ValidationError("object_auc: label outside {0,1}");
    (s.label == 1 ? P : N) += 1;
  }
  if (P == 0 || N == 0) return std::nullopt;

  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return samples[a].score < samples[b].score;
  });

  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && samples[idx[j]].score == samples[idx[i]].score) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (samples[idx[k]].label == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(P);
  return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(N));
}

namespace detail {

inline std::vector<ScoredSample> object_frame_samples(
    const std::vector<RiskinessTimeline>& timelines, AucGranularity gran) {
  std::vector<ScoredSample> samples;
  if (gran == AucGranularity::object_frame) {
    for (const RiskinessTimeline& tl : timelines)
      for (const ScoreEntry& e : tl.entries)
        samples.push_back(
            ScoredSample{e.score, e.label, tl.video_id, e.track_id, e.frame_index});
    return samples;
  }
  for (const RiskinessTimeline& tl : timelines) {
    std::map<long, std::pair<double, long>> sums;  // track -> (sum, count)
    std::map<long, int> labels;
    for (const ScoreEntry& e : tl.entries) {
      auto& acc = sums[e.track_id];
      acc.first += e.score;
      acc.second += 1;
      labels[e.track_id] = std::max(labels[e.track_id], e.label);
    }
    for (const auto& [track, acc] : sums)
      samples.push_back(ScoredSample{acc.first / static_cast<double>(acc.second),
                                     labels[track], tl.video_id, track, -1});
  }
  return samples;
}

}  // namespace detail

// Frame-level AUC: one sample per frame whose score is the max over its
// objects (0 for empty frames) and whose label marks the presence of any
// risky object. Pooled across all videos.
inline std::optional<double> frame_auc(
    const std::vector<VideoSample>& videos,
    const std::vector<RiskinessTimeline>& timelines) {
  if (videos.size() != timelines.size())
    throw ValidationError("frame_auc: videos and timelines must pair up");
  std::vector<ScoredSample> samples;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    std::map<long, double> frame_score;
    for (const ScoreEntry& e : timelines[v].entries) {
      auto [it, fresh] = frame_score.emplace(e.frame_index, e.score);
      if (!fresh) it->second = std::max(it->second, e.score);
    }
    for (const FrameObservation& obs : videos[v].frames) {
      int label = 0;
      for (const TrackedObject& o : obs.objects)
        if (o.label == 1) label = 1;
      const auto it = frame_score.find(obs.frame_index);
      samples.push_back(ScoredSample{it == frame_score.end() ? 0.0 : it->second,
                                     label, videos[v].video_id, -1,
                                     obs.frame_index});
    }
  }
  return object_auc(samples);
}

namespace detail {

inline std::map<long, double> frame_max_scores(const RiskinessTimeline& timeline,
                                               TtaMode mode) {
  std::map<long, double> q;
  for (const ScoreEntry& e : timeline.entries) {
    if (mode == TtaMode::risky_only && e.label != 1) continue;
    auto [it, fresh] = q.emplace(e.frame_index, e.score);
    if (!fresh) it->second = std::max(it->second, e.score);
  }
  return q;
}

}  // namespace detail

// Seconds between the first frame (at or before the accident frame) whose
// frame score reaches the threshold and the accident frame itself; 0 when no
// crossing happens.
inline double tta(const RiskinessTimeline& timeline, long accident_frame,
                  double threshold, double fps,
                  TtaMode mode = TtaMode::all_objects) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw DomainError("tta: threshold must lie in (0,1), got " +
                      std::to_string(threshold));
  if (fps <= 0.0) throw DomainError("tta: fps must be > 0");
  if (accident_frame < 0)
    throw DomainError("tta: accident frame must be >= 0");
  const auto q = detail::frame_max_scores(timeline, mode);
  for (const auto& [frame, score] : q) {
    if (frame > accident_frame) break;
    if (score >= threshold)
      return static_cast<double>(accident_frame - frame) / fps;
  }
  return 0.0;
}

// Mean TTA over thresholds k/100, k = 1..99.
inline double mtta(const RiskinessTimeline& timeline, long accident_frame,
                   double fps, TtaMode mode = TtaMode::all_objects) {
  double sum = 0.0;
  for (int k = 1; k <= 99; ++k)
    sum += tta(timeline, accident_frame, k / 100.0, fps, mode);
  return sum / 99.0;
}

namespace detail {

inline std::string threshold_key(int k) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%.2f", k / 100.0);
  return buf;
}

}  // namespace detail

// Global report over paired videos/timelines. TTA aggregates average over
// the videos that carry an accident frame.
inline MetricsReport compute_report(const std::vector<VideoSample>& videos,
                                    const std::vector<RiskinessTimeline>& timelines,
                                    TtaMode tta_mode = TtaMode::all_objects,
                                    AucGranularity granularity =
                                        AucGranularity::object_frame) {
  if (videos.size() != timelines.size())
    throw ValidationError("compute_report: videos and timelines must pair up");
  MetricsReport report;
  report.videos = static_cast<long>(videos.size());

  const auto samples = detail::object_frame_samples(timelines, AucGranularity::object_frame);
  for (const ScoredSample& s : samples)
    (s.label == 1 ? report.positives : report.negatives) += 1;
  report.object_auc =
      granularity == AucGranularity::object_frame
          ? object_auc(samples)
          : object_auc(detail::object_frame_samples(timelines, granularity));
  report.frame_auc = frame_auc(videos, timelines);

  std::vector<std::size_t> accident_videos;
  for (std::size_t v = 0; v < videos.size(); ++v)
    if (videos[v].accident_frame) accident_videos.push_back(v);
  for (int k = 1; k <= 99; ++k) {
    double sum = 0.0;
    for (std::size_t v : accident_videos)
      sum += tta(timelines[v], *videos[v].accident_frame, k / 100.0,
                 videos[v].fps, tta_mode);
    report.per_threshold_tta[detail::threshold_key(k)] =
        accident_videos.empty() ? 0.0 : sum / static_cast<double>(accident_videos.size());
  }
  double mean = 0.0;
  for (const auto& [key, value] : report.per_threshold_tta) mean += value;
  report.mtta_seconds = mean / 99.0;
  return report;
}

// Global report plus one sub-report per value of the grouping tag. Videos
// without the tag fall into an "untagged" group; a tag no video carries is
// an error.
inline MetricsReport stratified_report(const std::vector<VideoSample>& videos,
                                       const std::vector<RiskinessTimeline>& timelines,
                                       const std::string& group_key,
                                       TtaMode tta_mode = TtaMode::all_objects,
                                       AucGranularity granularity =
                                           AucGranularity::object_frame) {
  if (videos.size() != timelines.size())
    throw ValidationError("stratified_report: videos and timelines must pair up");
  bool known = false;
  for (const VideoSample& v : videos)
    if (v.tags.count(group_key)) known = true;
  if (!known)
    throw ValidationError("stratified_report: unknown grouping key '" +
                          group_key + "'");

  MetricsReport report = compute_report(videos, timelines, tta_mode, granularity);
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const auto it = videos[v].tags.find(group_key);
    members[it == videos[v].tags.end() ? "untagged" : it->second].push_back(v);
  }
  for (const auto& [value, indices] : members) {
    std::vector<VideoSample> vs;
    std::vector<RiskinessTimeline> ts;
    for (std::size_t v : indices) {
      vs.push_back(videos[v]);
      ts.push_back(timelines[v]);
    }
    report.groups[value] = compute_report(vs, ts, tta_mode, granularity);
  }
  return report;
}

inline nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["object_auc"] = report.object_auc ? nlohmann::json(*report.object_auc)
                                      : nlohmann::json(nullptr);
  j["frame_auc"] = report.frame_auc ? nlohmann::json(*report.frame_auc)
                                    : nlohmann::json(nullptr);
  j["mtta_seconds"] = report.mtta_seconds;
  j["per_threshold_tta"] = report.per_threshold_tta;
  j["counts"] = {{"positives", report.positives},
                 {"negatives", report.negatives},
                 {"videos", report.videos}};
  if (!report.groups.empty()) {
    nlohmann::json groups;
    for (const auto& [value, sub] : report.groups)
      groups[value] = report_to_json(sub);
    j["groups"] = std::move(groups);
  }
  return j;
}

}  // namespace amnet
