#pragma once

// Deterministic synthetic scenario generation and the on-disk dataset
// format. A generated video contains a pair of risky tracks that converge
// toward a shared collision point reached at the accident frame, plus
// background tracks with independent windows. Object flow vectors are drawn
// from class-conditional spherical Gaussians so task difficulty is
// controlled by the mean separation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "amnet/errors.hpp"
#include "amnet/model.hpp"
#include "amnet/parallel.hpp"
#include "amnet/random.hpp"

namespace amnet {

struct ScenarioConfig {
  long num_frames = 100;  // T
  double fps = 20.0;
  long max_objects = 6;
  double positive_ratio = 0.27 / 1.27;  // pooled object-frame target
  std::size_t feature_dim = 16;         // D of generated flow vectors
  double separation_delta = 4.0;        // distance between class flow means
  double noise_sigma = 1.0;
  double ego_motion_amplitude = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_frames < 1) throw ValidationError("ScenarioConfig: num_frames must be >= 1");
    if (fps <= 0) throw ValidationError("ScenarioConfig: fps must be > 0");
    if (max_objects < 2)
      throw ValidationError("ScenarioConfig: max_objects must be >= 2 (risky pair)");
    if (positive_ratio < 0 || positive_ratio >= 1)
      throw ValidationError("ScenarioConfig: positive_ratio must be in [0,1)");
    if (feature_dim < 1) throw ValidationError("ScenarioConfig: feature_dim must be >= 1");
    if (separation_delta < 0 || noise_sigma < 0)
      throw ValidationError("ScenarioConfig: delta and noise_sigma must be >= 0");
  }
};

// One labeled video: frame observations, the accident beginning frame (when
// any object is labeled risky), and free-form categorical tags.
struct VideoSample {
  std::string video_id;
  double fps = 20.0;
  std::vector<FrameObservation> frames;
  std::optional<long> accident_frame;
  std::map<std::string, std::string> tags;
};

struct ManifestEntry {
  std::string video_id;
  std::string path;  // relative to the manifest file
  std::string split; // "train" or "test"
};

struct DatasetManifest {
  ScenarioConfig generator;
  long video_count = 0;
  double split_fraction = 0.8;
  std::vector<ManifestEntry> entries;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

struct TrackPlan {
  long id = 0;
  long spawn = 0, last = 0;
  bool risky = false;
  double x0 = 0, y0 = 0;    // start center
  double vx = 0, vy = 0;    // per-frame velocity (background tracks)
  double w = 0.1, h = 0.1;  // base size
};

inline std::string pick_category(Rng& rng,
                                 const std::vector<std::pair<std::string, double>>& dist) {
  double u = rng.uniform();
  for (const auto& [name, p] : dist) {
    if (u < p) return name;
    u -= p;
  }
  return dist.back().first;
}

}  // namespace detail

// Deterministic given (config, seed); the config's own seed field is ignored
// here so datasets can reuse one config with per-video seeds.
inline VideoSample generate_video(const ScenarioConfig& cfg,
                                  std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const long T = cfg.num_frames;
  const double r = cfg.positive_ratio;
  const std::size_t D = cfg.feature_dim;

  VideoSample video;
  video.fps = cfg.fps;

  // Accident frame in [0.5 T, 0.9 T].
  const long tau = std::clamp<long>(
      rng.uniform_int(std::llround(0.5 * T), std::llround(0.9 * T)), 0, T - 1);

  // Risky pair presence. The window always covers the convergence stretch
  // before tau; its total length is budgeted so the pooled positive fraction
  // lands near the configured ratio given the background capacity.
  const long neg_slots = cfg.max_objects - 2;
  const long post = std::min<long>(T - 1 - tau, std::max<long>(1, std::llround(0.1 * T)));
  const long risky_end = tau + post;
  const long min_len =
      (risky_end - tau) + static_cast<long>(std::ceil(0.3 * T)) + 1;
  long len_target = min_len;
  if (r > 0 && neg_slots > 0)
    len_target = std::llround(r * static_cast<double>(neg_slots) * T * 0.85 /
                              (2.0 * (1.0 - r)));
  const long risky_len =
      std::clamp<long>(len_target, std::min(min_len, risky_end + 1), risky_end + 1);
  const long risky_spawn = risky_end - risky_len + 1;

  // Background coverage needed for the ratio, realized by window/gap draws.
  double coverage = 0.0;
  if (neg_slots > 0 && r > 0) {
    const double needed = 2.0 * risky_len * (1.0 - r) / r;
    coverage = std::clamp(needed / (static_cast<double>(neg_slots) * T), 0.05, 1.0);
  } else if (neg_slots > 0) {
    coverage = 0.5;
  }
  const double mean_window = 10.0;
  const long gap_max =
      coverage >= 1.0 || coverage <= 0.0
          ? 0
          : std::llround(2.0 * mean_window * (1.0 - coverage) / coverage);

  // Geometry draws, fixed order.
  const double cx = rng.uniform(0.3, 0.7), cy = rng.uniform(0.3, 0.7);
  std::vector<detail::TrackPlan> tracks;
  for (long k = 0; k < 2; ++k) {
    detail::TrackPlan t;
    t.id = k;
    t.spawn = risky_spawn;
    t.last = risky_end;
    t.risky = true;
    t.x0 = rng.uniform(0.1, 0.9);
    t.y0 = rng.uniform(0.1, 0.9);
    t.w = rng.uniform(0.05, 0.12);
    t.h = rng.uniform(0.05, 0.12);
    tracks.push_back(t);
  }
  long next_id = 2;
  for (long slot = 0; slot < neg_slots; ++slot) {
    if (coverage <= 0.0) break;
    long cursor = rng.uniform_int(0, gap_max);
    while (cursor < T) {
      const long len = std::min<long>(rng.uniform_int(4, 16), T - cursor);
      if (len < 1) break;
      detail::TrackPlan t;
      t.id = next_id++;
      t.spawn = cursor;
      t.last = cursor + len - 1;
      t.x0 = rng.uniform(0.1, 0.9);
      t.y0 = rng.uniform(0.1, 0.9);
      t.vx = rng.uniform(-0.005, 0.005);
      t.vy = rng.uniform(-0.005, 0.005);
      t.w = rng.uniform(0.04, 0.15);
      t.h = rng.uniform(0.04, 0.15);
      tracks.push_back(t);
      cursor += len + 1 + rng.uniform_int(0, gap_max);
    }
  }

  video.tags["manner_of_collision"] = detail::pick_category(
      rng, {{"angle", 0.364},
            {"sideswipe", 0.116},
            {"rear-end", 0.192},
            {"head-on", 0.060},
            {"others", 0.268}});
  video.tags["ego_involved"] =
      rng.uniform() < 0.454 ? "ego involved" : "ego non-involved";

  // Class-conditional flow means: non-risky at the origin, risky at distance
  // delta along the normalized all-ones direction.
  const double mean_step = cfg.separation_delta / std::sqrt(static_cast<double>(D));
  const double ego_phase = rng.uniform(0.0, 2.0 * 3.141592653589793);
  std::vector<double> ego_dir(D);
  {
    double norm = 0.0;
    for (double& x : ego_dir) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    for (double& x : ego_dir) x /= norm;
  }

  video.frames.resize(T);
  for (long t = 0; t < T; ++t) {
    FrameObservation& obs = video.frames[t];
    obs.frame_index = t;
    std::vector<double> flow_sum(D, 0.0);
    for (const detail::TrackPlan& track : tracks) {
      if (t < track.spawn || t > track.last) continue;
      TrackedObject obj;
      obj.track_id = track.id;
      obj.label = track.risky ? 1 : 0;
      double x, y, w = track.w, h = track.h;
      if (track.risky) {
        const double denom = std::max<long>(1, tau - risky_spawn);
        const double toward = std::max(0.0, static_cast<double>(tau - t) / denom);
        x = cx + (track.x0 - cx) * toward;
        y = cy + (track.y0 - cy) * toward;
        const double grow =
            1.0 + 0.9 * std::clamp(static_cast<double>(t - risky_spawn) / denom, 0.0, 1.0);
        w = std::min(1.0, track.w * grow);
        h = std::min(1.0, track.h * grow);
      } else {
        x = std::clamp(track.x0 + track.vx * (t - track.spawn), 0.02, 0.98);
        y = std::clamp(track.y0 + track.vy * (t - track.spawn), 0.02, 0.98);
      }
      obj.bbox = {x, y, w, h};
      obj.obj_flow.resize(D);
      for (std::size_t j = 0; j < D; ++j) {
        const double mean = track.risky ? mean_step : 0.0;
        obj.obj_flow[j] = mean + cfg.noise_sigma * rng.normal();
        flow_sum[j] += obj.obj_flow[j];
      }
      obs.objects.push_back(std::move(obj));
    }
    obs.frame_flow.resize(D);
    const double m = obs.objects.empty() ? 0.0 : static_cast<double>(obs.objects.size());
    const double drift =
        cfg.ego_motion_amplitude *
        std::sin(2.0 * 3.141592653589793 * t / std::max<long>(1, T) + ego_phase);
    for (std::size_t j = 0; j < D; ++j)
      obs.frame_flow[j] = (m > 0 ? flow_sum[j] / m : 0.0) + drift * ego_dir[j];
  }

  video.accident_frame = tau;
  return video;
}

// ---------------------------------------------------------------------------
// Validation and serialization
// ---------------------------------------------------------------------------

// Enforces the documented sample invariants; every violation names its rule.
inline void validate_sample(const VideoSample& sample) {
  bool any_positive = false;
  long expect = 0;
  for (const FrameObservation& obs : sample.frames) {
    if (obs.frame_index != expect)
      throw ValidationError("video " + sample.video_id +
                            ": frame indices must be contiguous from 0, got " +
                            std::to_string(obs.frame_index) + " where " +
                            std::to_string(expect) + " was expected");
    ++expect;
    std::map<long, bool> seen;
    for (const TrackedObject& obj : obs.objects) {
      if (seen.count(obj.track_id))
        throw ValidationError("video " + sample.video_id + " frame " +
                              std::to_string(obs.frame_index) +
                              ": duplicate track_id " +
                              std::to_string(obj.track_id));
      seen[obj.track_id] = true;
      if (obj.label != 0 && obj.label != 1)
        throw ValidationError("video " + sample.video_id +
                              ": label must be 0 or 1, got " +
                              std::to_string(obj.label));
      any_positive = any_positive || obj.label == 1;
      for (double v : obj.bbox)
        if (!(v >= 0.0 && v <= 1.0))
          throw ValidationError("video " + sample.video_id + " frame " +
                                std::to_string(obs.frame_index) + " track " +
                                std::to_string(obj.track_id) +
                                ": bbox entries must lie in [0,1]");
      for (double v : obj.obj_flow)
        if (!std::isfinite(v))
          throw ValidationError("video " + sample.video_id +
                                ": non-finite obj_flow entry");
    }
    for (double v : obs.frame_flow)
      if (!std::isfinite(v))
        throw ValidationError("video " + sample.video_id +
                              ": non-finite frame_flow entry");
  }
  if (any_positive && !sample.accident_frame.has_value())
    throw ValidationError("video " + sample.video_id +
                          ": accident_frame is required when any label is 1");
  if (sample.accident_frame &&
      (*sample.accident_frame < 0 ||
       *sample.accident_frame >= static_cast<long>(sample.frames.size())))
    throw ValidationError("video " + sample.video_id +
                          ": accident_frame outside the frame range");
}

inline nlohmann::json video_to_json(const VideoSample& sample) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["video_id"] = sample.video_id;
  j["fps"] = sample.fps;
  if (sample.accident_frame) j["accident_frame"] = *sample.accident_frame;
  j["tags"] = sample.tags.empty()
                  ? nlohmann::json::object()
                  : nlohmann::json(sample.tags);
  nlohmann::json frames = nlohmann::json::array();
  for (const FrameObservation& obs : sample.frames) {
    nlohmann::json f;
    f["t"] = obs.frame_index;
    f["frame_flow"] = obs.frame_flow;
    nlohmann::json objects = nlohmann::json::array();
    for (const TrackedObject& obj : obs.objects) {
      nlohmann::json o;
      o["track_id"] = obj.track_id;
      o["bbox"] = obj.bbox;
      o["obj_flow"] = obj.obj_flow;
      o["label"] = obj.label;
      objects.push_back(std::move(o));
    }
    f["objects"] = std::move(objects);
    frames.push_back(std::move(f));
  }
  j["frames"] = std::move(frames);
  return j;
}

namespace detail {

template <class T>
T require_field(const nlohmann::json& j, const std::string& key,
                const std::string& where) {
  if (!j.contains(key))
    throw SchemaError(where + ": missing required key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(where + ": key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline VideoSample video_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("video file: root must be an object");
  const int version = detail::require_field<int>(j, "format_version", "video file");
  if (version != 1)
    throw VersionError("video file: unsupported format_version " +
                       std::to_string(version));
  VideoSample sample;
  sample.video_id = detail::require_field<std::string>(j, "video_id", "video file");
  sample.fps = detail::require_field<double>(j, "fps", "video file");
  if (j.contains("accident_frame")) {
    if (!j.at("accident_frame").is_number_integer())
      throw SchemaError("video file: accident_frame must be an integer");
    sample.accident_frame = j.at("accident_frame").get<long>();
  }
  if (j.contains("tags")) {
    if (!j.at("tags").is_object())
      throw SchemaError("video file: tags must be an object");
    for (const auto& [k, v] : j.at("tags").items()) {
      if (!v.is_string())
        throw SchemaError("video file: tag '" + k + "' must be a string");
      sample.tags[k] = v.get<std::string>();
    }
  }
  if (!j.contains("frames") || !j.at("frames").is_array())
    throw SchemaError("video file: frames must be an array");
  for (const auto& fj : j.at("frames")) {
    FrameObservation obs;
    obs.frame_index = detail::require_field<long>(fj, "t", "frame");
    obs.frame_flow =
        detail::require_field<std::vector<double>>(fj, "frame_flow", "frame");
    if (!fj.contains("objects") || !fj.at("objects").is_array())
      throw SchemaError("frame " + std::to_string(obs.frame_index) +
                        ": objects must be an array");
    for (const auto& oj : fj.at("objects")) {
      TrackedObject obj;
      obj.track_id = detail::require_field<long>(oj, "track_id", "object");
      const auto bbox =
          detail::require_field<std::vector<double>>(oj, "bbox", "object");
      if (bbox.size() != 4)
        throw SchemaError("object " + std::to_string(obj.track_id) +
                          ": bbox must have 4 entries");
      std::copy(bbox.begin(), bbox.end(), obj.bbox.begin());
      obj.obj_flow =
          detail::require_field<std::vector<double>>(oj, "obj_flow", "object");
      obj.label = detail::require_field<int>(oj, "label", "object");
      obs.objects.push_back(std::move(obj));
    }
    sample.frames.push_back(std::move(obs));
  }
  validate_sample(sample);
  return sample;
}

// Canonical text form: sorted keys, two-space indent, round-trip numbers.
inline std::string video_to_text(const VideoSample& sample) {
  return video_to_json(sample).dump(2) + "\n";
}

inline void write_video_file(const VideoSample& sample,
                             const std::filesystem::path& path) {
  validate_sample(sample);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << video_to_text(sample);
  if (!out) throw IoError("write failed: " + path.string());
}

inline VideoSample read_video_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("not valid JSON: " + path.string() + " (" + e.what() + ")");
  }
  return video_from_json(j);
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

inline nlohmann::json scenario_to_json(const ScenarioConfig& cfg) {
  nlohmann::json j;
  j["num_frames"] = cfg.num_frames;
  j["fps"] = cfg.fps;
  j["max_objects"] = cfg.max_objects;
  j["positive_ratio"] = cfg.positive_ratio;
  j["feature_dim"] = cfg.feature_dim;
  j["separation_delta"] = cfg.separation_delta;
  j["noise_sigma"] = cfg.noise_sigma;
  j["ego_motion_amplitude"] = cfg.ego_motion_amplitude;
  j["seed"] = cfg.seed;
  return j;
}

inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  ScenarioConfig cfg;
  cfg.num_frames = detail::require_field<long>(j, "num_frames", "generator config");
  cfg.fps = detail::require_field<double>(j, "fps", "generator config");
  cfg.max_objects = detail::require_field<long>(j, "max_objects", "generator config");
  cfg.positive_ratio =
      detail::require_field<double>(j, "positive_ratio", "generator config");
  cfg.feature_dim =
      detail::require_field<std::size_t>(j, "feature_dim", "generator config");
  cfg.separation_delta =
      detail::require_field<double>(j, "separation_delta", "generator config");
  cfg.noise_sigma = detail::require_field<double>(j, "noise_sigma", "generator config");
  cfg.ego_motion_amplitude =
      detail::require_field<double>(j, "ego_motion_amplitude", "generator config");
  cfg.seed = detail::require_field<std::uint64_t>(j, "seed", "generator config");
  return cfg;
}

inline void write_manifest(const DatasetManifest& manifest,
                           const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["generator"] = scenario_to_json(manifest.generator);
  j["video_count"] = manifest.video_count;
  j["split_fraction"] = manifest.split_fraction;
  nlohmann::json entries = nlohmann::json::array();
  for (const ManifestEntry& e : manifest.entries) {
    nlohmann::json ej;
    ej["video_id"] = e.video_id;
    ej["path"] = e.path;
    ej["split"] = e.split;
    entries.push_back(std::move(ej));
  }
  j["entries"] = std::move(entries);
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

// Reads a manifest and checks that every referenced file exists.
inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("not valid JSON: " + path.string() + " (" + e.what() + ")");
  }
  const int version = detail::require_field<int>(j, "format_version", "manifest");
  if (version != 1)
    throw VersionError("manifest: unsupported format_version " +
                       std::to_string(version));
  DatasetManifest manifest;
  manifest.generator =
      scenario_from_json(detail::require_field<nlohmann::json>(j, "generator", "manifest"));
  manifest.video_count = detail::require_field<long>(j, "video_count", "manifest");
  manifest.split_fraction =
      detail::require_field<double>(j, "split_fraction", "manifest");
  if (!j.contains("entries") || !j.at("entries").is_array())
    throw SchemaError("manifest: entries must be an array");
  std::map<std::string, bool> ids;
  for (const auto& ej : j.at("entries")) {
    ManifestEntry e;
    e.video_id = detail::require_field<std::string>(ej, "video_id", "manifest entry");
    e.path = detail::require_field<std::string>(ej, "path", "manifest entry");
    e.split = detail::require_field<std::string>(ej, "split", "manifest entry");
    if (e.split != "train" && e.split != "test")
      throw SchemaError("manifest entry " + e.video_id +
                        ": split must be 'train' or 'test'");
    if (ids.count(e.video_id))
      throw ValidationError("manifest: duplicate video_id " + e.video_id);
    ids[e.video_id] = true;
    if (!std::filesystem::exists(path.parent_path() / e.path))
      throw ValidationError("manifest: referenced file does not exist: " + e.path);
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

// Writes `count` videos with seeds seed+index plus a manifest. The split
// assignment comes from a seeded shuffle of the video indices. Output is
// independent of the worker count because every video derives only from its
// own seed.
inline DatasetManifest generate_dataset(const ScenarioConfig& cfg, long count,
                                        double split_fraction,
                                        const std::filesystem::path& out_dir,
                                        unsigned threads = 1) {
  cfg.validate();
  if (count < 1) throw ValidationError("generate_dataset: count must be >= 1");
  if (split_fraction <= 0 || split_fraction >= 1)
    throw ValidationError("generate_dataset: split_fraction must be in (0,1)");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec && !std::filesystem::is_directory(out_dir))
    throw IoError("cannot create output directory: " + out_dir.string());

  DatasetManifest manifest;
  manifest.generator = cfg;
  manifest.video_count = count;
  manifest.split_fraction = split_fraction;

  std::vector<long> order(count);
  for (long i = 0; i < count; ++i) order[i] = i;
  Rng split_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  for (long i = count - 1; i > 0; --i) {
    const long k = split_rng.uniform_int(0, i);
    std::swap(order[i], order[k]);
  }
  long n_train = std::llround(split_fraction * count);
  n_train = std::clamp<long>(n_train, 1, count);
  std::vector<std::string> split_of(count, "test");
  for (long i = 0; i < n_train; ++i) split_of[order[i]] = "train";

  std::vector<std::string> names(count);
  for (long i = 0; i < count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "video_%05ld", i);
    names[i] = buf;
  }
  parallel_for(static_cast<std::size_t>(count), threads, [&](std::size_t i) {
    VideoSample sample =
        generate_video(cfg, cfg.seed + static_cast<std::uint64_t>(i));
    sample.video_id = names[i];
    write_video_file(sample, out_dir / (names[i] + ".json"));
  });
  for (long i = 0; i < count; ++i)
    manifest.entries.push_back(
        ManifestEntry{names[i], names[i] + ".json", split_of[i]});
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

// Loads all videos of a split ("train", "test", or "all"), in manifest order.
inline std::vector<VideoSample> load_split(const DatasetManifest& manifest,
                                           const std::filesystem::path& manifest_path,
                                           const std::string& split) {
  if (split != "train" && split != "test" && split != "all")
    throw ValidationError("split must be 'train', 'test' or 'all', got '" +
                          split + "'");
  std::vector<VideoSample> out;
  for (const ManifestEntry& e : manifest.entries) {
    if (split != "all" && e.split != split) continue;
    out.push_back(read_video_file(manifest_path.parent_path() / e.path));
  }
  return out;
}

}  // namespace amnet
