#pragma once

// Class-weighted cross-entropy objective, Adam, plateau LR scheduling, the
// epoch loop with best-checkpoint selection, and checkpoint persistence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "amnet/errors.hpp"
#include "amnet/metrics.hpp"
#include "amnet/model.hpp"
#include "amnet/synthdata.hpp"

namespace amnet {

struct LossWeights {
  double w_p = 1.0;
  double w_n = 0.27;

  void validate() const {
    if (w_p < 0 || w_n < 0)
      throw ValidationError("LossWeights: weights must be >= 0");
    if (w_p == 0 && w_n == 0)
      throw ValidationError("LossWeights: weights must not both be zero");
  }
};

// Sum of -[w_p l log s + w_n (1-l) log(1-s)] over every scored object-frame
// sample of the timeline, scores clamped away from 0 and 1.
inline double weighted_ce_loss(const RiskinessTimeline& timeline,
                               const LossWeights& weights) {
  weights.validate();
  double loss = 0.0;
  for (const ScoreEntry& e : timeline.entries)
    loss += weighted_ce_term(e.score, e.label, weights.w_p, weights.w_n);
  return loss;
}

template <class C>
struct AdamStateT {
  C m;
  C v;
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamStateT init(const C& like) {
    AdamStateT s;
    s.m = make_gradient_bundle(like);
    s.v = make_gradient_bundle(like);
    return s;
  }
};
using AdamState = AdamStateT<ModelParams>;

// One Adam update, in place. Moment estimates are bias-corrected by the
// incremented step count.
template <class C>
void adam_step(C& params, const C& grads, AdamStateT<C>& state, double lr) {
  if (!(lr > 0)) throw DomainError("adam_step: lr must be > 0");
  auto xp = collect_params(params);
  auto xg = collect_params(const_cast<C&>(grads));
  auto xm = collect_params(state.m);
  auto xv = collect_params(state.v);
  if (xp.size() != xg.size() || xp.size() != xm.size() || xp.size() != xv.size())
    throw ShapeError("adam_step: parameter/gradient/state shapes disagree");
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const double g = *xg[i];
    *xm[i] = state.beta1 * *xm[i] + (1.0 - state.beta1) * g;
    *xv[i] = state.beta2 * *xv[i] + (1.0 - state.beta2) * g * g;
    const double mhat = *xm[i] / c1;
    const double vhat = *xv[i] / c2;
    *xp[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
  }
}

struct PlateauState {
  double best_metric = -std::numeric_limits<double>::infinity();
  int epochs_since_improve = 0;
  double current_lr = 1e-3;
  double factor = 0.1;
  int patience = 3;
  double min_lr = 0.0;
};

// Maximize mode: an improvement beyond 1e-8 resets the stall counter; once
// the counter exceeds the patience the learning rate is cut by `factor`
// (never below min_lr) and the counter resets.
inline void plateau_step(PlateauState& state, double epoch_metric) {
  if (!std::isfinite(epoch_metric))
    throw DomainError("plateau_step: non-finite metric");
  if (epoch_metric > state.best_metric + 1e-8) {
    state.best_metric = epoch_metric;
    state.epochs_since_improve = 0;
    return;
  }
  state.epochs_since_improve += 1;
  if (state.epochs_since_improve > state.patience) {
    state.current_lr = std::max(state.current_lr * state.factor, state.min_lr);
    state.epochs_since_improve = 0;
  }
}

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 30;
  LossWeights loss_weights{};
  std::uint64_t seed = 0;
  double validation_fraction = 0.2;
  std::optional<double> gradient_clip_norm;

  void validate() const {
    if (learning_rate <= 0)
      throw ValidationError("TrainConfig: learning_rate must be > 0");
    if (epochs < 0) throw ValidationError("TrainConfig: epochs must be >= 0");
    if (validation_fraction < 0 || validation_fraction >= 1)
      throw ValidationError("TrainConfig: validation_fraction must be in [0,1)");
    if (gradient_clip_norm && *gradient_clip_norm <= 0)
      throw ValidationError("TrainConfig: gradient_clip_norm must be > 0");
    loss_weights.validate();
  }
};

struct Checkpoint {
  int format_version = 1;
  ModelConfig model_config;
  TrainConfig train_config;
  int epoch = 0;
  double val_auc = 0.0;
  ModelParams params;
};

struct EpochStats {
  int epoch = 0;
  double mean_train_loss = 0.0;
  double val_auc = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochStats> history;
};

namespace detail {

inline void clip_gradients(ModelParams& grads, double max_norm) {
  auto xs = collect_params(grads);
  double sq = 0.0;
  for (double* x : xs) sq += *x * *x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (double* x : xs) *x *= scale;
  }
}

inline double pooled_object_auc(const ModelParams& params,
                                const ModelConfig& cfg,
                                const std::vector<const VideoSample*>& videos) {
  std::vector<RiskinessTimeline> timelines;
  timelines.reserve(videos.size());
  for (const VideoSample* v : videos)
    timelines.push_back(forward_video(params, cfg, v->frames, v->video_id));
  const auto samples =
      object_frame_samples(timelines, AucGranularity::object_frame);
  // Undefined AUC (a single-class validation set) scores as 0 so it can
  // never be selected as the best epoch.
  return object_auc(samples).value_or(0.0);
}

}  // namespace detail

// Per-video optimization: one Adam step per video per epoch, in a seeded
// shuffled order. Validation is split off the dataset by fraction; when the
// fraction rounds to zero videos the training set doubles as validation.
// Returns the checkpoint of the epoch with the highest validation AUC.
inline TrainResult train(const std::vector<VideoSample>& dataset,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config) {
  model_config.validate();
  train_config.validate();
  if (dataset.empty()) throw ValidationError("train: dataset is empty");

  Rng rng(train_config.seed);
  const long n = static_cast<long>(dataset.size());
  std::vector<long> order(n);
  for (long i = 0; i < n; ++i) order[i] = i;
  for (long i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(0, i)]);
  long n_val = std::llround(train_config.validation_fraction * n);
  n_val = std::clamp<long>(n_val, 0, n - 1);
  std::vector<const VideoSample*> val_videos, train_videos;
  for (long i = 0; i < n_val; ++i) val_videos.push_back(&dataset[order[i]]);
  for (long i = n_val; i < n; ++i) train_videos.push_back(&dataset[order[i]]);
  if (val_videos.empty()) val_videos = train_videos;

  ModelParams params = init_params(model_config, train_config.seed);
  AdamState adam = AdamState::init(params);
  PlateauState plateau;
  plateau.current_lr = train_config.learning_rate;

  TrainResult result;
  result.checkpoint.model_config = model_config;
  result.checkpoint.train_config = train_config;

  if (train_config.epochs == 0) {
    result.checkpoint.params = params;
    result.checkpoint.epoch = 0;
    result.checkpoint.val_auc =
        detail::pooled_object_auc(params, model_config, val_videos);
    return result;
  }

  double best_auc = -std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= train_config.epochs; ++epoch) {
    std::vector<std::size_t> perm(train_videos.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1],
                perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    const double lr = plateau.current_lr;
    double loss_sum = 0.0;
    for (std::size_t i : perm) {
      const VideoSample& video = *train_videos[i];
      BackwardResult back =
          backward_video(params, model_config, video.frames,
                         train_config.loss_weights.w_p,
                         train_config.loss_weights.w_n);
      if (!std::isfinite(back.loss))
        throw NumericError("train: non-finite loss on video " + video.video_id);
      if (train_config.gradient_clip_norm)
        detail::clip_gradients(back.grads, *train_config.gradient_clip_norm);
      adam_step(params, back.grads, adam, lr);
      loss_sum += back.loss;
    }
    const double mean_loss =
        train_videos.empty() ? 0.0 : loss_sum / static_cast<double>(train_videos.size());
    const double val_auc =
        detail::pooled_object_auc(params, model_config, val_videos);
    plateau_step(plateau, val_auc);
    result.history.push_back(EpochStats{epoch, mean_loss, val_auc, lr});
    if (val_auc > best_auc) {
      best_auc = val_auc;
      result.checkpoint.params = params;
      result.checkpoint.epoch = epoch;
      result.checkpoint.val_auc = val_auc;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json tensor_to_json(const Matrix& m) {
  nlohmann::json j;
  j["shape"] = {m.rows, m.cols};
  j["data"] = m.d;
  return j;
}

inline nlohmann::json tensor_to_json(const Vector& v) {
  nlohmann::json j;
  j["shape"] = {v.size()};
  j["data"] = v;
  return j;
}

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& name,
                               std::size_t rows, std::size_t cols) {
  const auto shape = require_field<std::vector<std::size_t>>(j, "shape", name);
  if (shape.size() != 2)
    throw SchemaError(name + ": matrix shape must have 2 entries");
  if (shape[0] != rows || shape[1] != cols)
    throw ShapeError(name + ": stored shape [" + std::to_string(shape[0]) + "," +
                     std::to_string(shape[1]) + "] disagrees with config [" +
                     std::to_string(rows) + "," + std::to_string(cols) + "]");
  Matrix m(rows, cols);
  const auto data = require_field<std::vector<double>>(j, "data", name);
  if (data.size() != rows * cols)
    throw SchemaError(name + ": data length does not match shape");
  m.d = data;
  for (double x : m.d)
    if (!std::isfinite(x)) throw NumericError(name + ": non-finite entry");
  return m;
}

inline Vector vector_from_json(const nlohmann::json& j, const std::string& name,
                               std::size_t len) {
  const auto shape = require_field<std::vector<std::size_t>>(j, "shape", name);
  if (shape.size() != 1)
    throw SchemaError(name + ": vector shape must have 1 entry");
  if (shape[0] != len)
    throw ShapeError(name + ": stored length " + std::to_string(shape[0]) +
                     " disagrees with config " + std::to_string(len));
  const auto data = require_field<std::vector<double>>(j, "data", name);
  if (data.size() != len)
    throw SchemaError(name + ": data length does not match shape");
  for (double x : data)
    if (!std::isfinite(x)) throw NumericError(name + ": non-finite entry");
  return data;
}

inline nlohmann::json affine_to_json(const AffineParams& p) {
  return {{"W", tensor_to_json(p.W)}, {"b", tensor_to_json(p.b)}};
}

inline nlohmann::json gru_to_json(const GruParams& g) {
  return {{"W_z", tensor_to_json(g.W_z)}, {"W_r", tensor_to_json(g.W_r)},
          {"W_h", tensor_to_json(g.W_h)}, {"U_z", tensor_to_json(g.U_z)},
          {"U_r", tensor_to_json(g.U_r)}, {"U_h", tensor_to_json(g.U_h)},
          {"b_z", tensor_to_json(g.b_z)}, {"b_r", tensor_to_json(g.b_r)},
          {"b_h", tensor_to_json(g.b_h)}};
}

inline AffineParams affine_from_json(const nlohmann::json& j,
                                     const std::string& name, std::size_t out,
                                     std::size_t in) {
  AffineParams p;
  p.W = matrix_from_json(require_field<nlohmann::json>(j, "W", name), name + ".W",
                         out, in);
  p.b = vector_from_json(require_field<nlohmann::json>(j, "b", name), name + ".b",
                         out);
  return p;
}

inline GruParams gru_from_json(const nlohmann::json& j, const std::string& name,
                               std::size_t input, std::size_t hidden) {
  GruParams g;
  auto mat = [&](const char* key, std::size_t r, std::size_t c) {
    return matrix_from_json(require_field<nlohmann::json>(j, key, name),
                            name + "." + key, r, c);
  };
  auto vec = [&](const char* key) {
    return vector_from_json(require_field<nlohmann::json>(j, key, name),
                            name + "." + key, hidden);
  };
  g.W_z = mat("W_z", hidden, input);
  g.W_r = mat("W_r", hidden, input);
  g.W_h = mat("W_h", hidden, input);
  g.U_z = mat("U_z", hidden, hidden);
  g.U_r = mat("U_r", hidden, hidden);
  g.U_h = mat("U_h", hidden, hidden);
  g.b_z = vec("b_z");
  g.b_r = vec("b_r");
  g.b_h = vec("b_h");
  return g;
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["flow_obj_dim"] = cfg.flow_obj_dim;
  j["flow_reduced_dim"] = cfg.flow_reduced_dim;
  j["bbox_hidden"] = cfg.bbox_hidden;
  j["flow_hidden"] = cfg.flow_hidden;
  j["head_hidden"] = cfg.head_hidden;
  j["use_bbox"] = cfg.use_bbox;
  j["use_obj_flow"] = cfg.use_obj_flow;
  j["use_frame_flow"] = cfg.use_frame_flow;
  j["use_attention"] = cfg.use_attention;
  j["track_eviction_age"] = cfg.track_eviction_age;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.flow_obj_dim = detail::require_field<std::size_t>(j, "flow_obj_dim", "model_config");
  cfg.flow_reduced_dim =
      detail::require_field<std::size_t>(j, "flow_reduced_dim", "model_config");
  cfg.bbox_hidden = detail::require_field<std::size_t>(j, "bbox_hidden", "model_config");
  cfg.flow_hidden = detail::require_field<std::size_t>(j, "flow_hidden", "model_config");
  cfg.head_hidden = detail::require_field<std::size_t>(j, "head_hidden", "model_config");
  cfg.use_bbox = detail::require_field<bool>(j, "use_bbox", "model_config");
  cfg.use_obj_flow = detail::require_field<bool>(j, "use_obj_flow", "model_config");
  cfg.use_frame_flow = detail::require_field<bool>(j, "use_frame_flow", "model_config");
  cfg.use_attention = detail::require_field<bool>(j, "use_attention", "model_config");
  cfg.track_eviction_age =
      detail::require_field<long>(j, "track_eviction_age", "model_config");
  cfg.validate();
  return cfg;
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["learning_rate"] = cfg.learning_rate;
  j["epochs"] = cfg.epochs;
  j["loss_weights"] = {{"w_p", cfg.loss_weights.w_p}, {"w_n", cfg.loss_weights.w_n}};
  j["seed"] = cfg.seed;
  j["validation_fraction"] = cfg.validation_fraction;
  j["gradient_clip_norm"] = cfg.gradient_clip_norm
                                ? nlohmann::json(*cfg.gradient_clip_norm)
                                : nlohmann::json(nullptr);
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.learning_rate = detail::require_field<double>(j, "learning_rate", "train_config");
  cfg.epochs = detail::require_field<int>(j, "epochs", "train_config");
  const auto lw = detail::require_field<nlohmann::json>(j, "loss_weights", "train_config");
  cfg.loss_weights.w_p = detail::require_field<double>(lw, "w_p", "loss_weights");
  cfg.loss_weights.w_n = detail::require_field<double>(lw, "w_n", "loss_weights");
  cfg.seed = detail::require_field<std::uint64_t>(j, "seed", "train_config");
  cfg.validation_fraction =
      detail::require_field<double>(j, "validation_fraction", "train_config");
  if (j.contains("gradient_clip_norm") && !j.at("gradient_clip_norm").is_null())
    cfg.gradient_clip_norm = j.at("gradient_clip_norm").get<double>();
  cfg.validate();
  return cfg;
}

inline nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format_version"] = ckpt.format_version;
  j["model_config"] = model_config_to_json(ckpt.model_config);
  j["train_config"] = train_config_to_json(ckpt.train_config);
  j["epoch"] = ckpt.epoch;
  j["val_auc"] = ckpt.val_auc;
  nlohmann::json params;
  params["theta0"] = detail::affine_to_json(ckpt.params.theta0);
  params["gru_bbox"] = detail::gru_to_json(ckpt.params.gru_bbox);
  params["gru_flow"] = detail::gru_to_json(ckpt.params.gru_flow);
  params["w_b"] = detail::tensor_to_json(ckpt.params.w_b);
  params["w_f"] = detail::tensor_to_json(ckpt.params.w_f);
  params["theta3"] = detail::affine_to_json(ckpt.params.theta3);
  params["theta4"] = detail::affine_to_json(ckpt.params.theta4);
  j["params"] = std::move(params);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("checkpoint: root must be an object");
  const int version = detail::require_field<int>(j, "format_version", "checkpoint");
  if (version != 1)
    throw VersionError("checkpoint: unsupported format_version " +
                       std::to_string(version));
  Checkpoint ckpt;
  ckpt.model_config = model_config_from_json(
      detail::require_field<nlohmann::json>(j, "model_config", "checkpoint"));
  ckpt.train_config = train_config_from_json(
      detail::require_field<nlohmann::json>(j, "train_config", "checkpoint"));
  ckpt.epoch = detail::require_field<int>(j, "epoch", "checkpoint");
  ckpt.val_auc = detail::require_field<double>(j, "val_auc", "checkpoint");
  const auto pj = detail::require_field<nlohmann::json>(j, "params", "checkpoint");
  const ModelConfig& cfg = ckpt.model_config;
  auto sub = [&](const char* key) {
    return detail::require_field<nlohmann::json>(pj, key, "params");
  };
  ckpt.params.theta0 = detail::affine_from_json(sub("theta0"), "params.theta0",
                                                cfg.flow_reduced_dim,
                                                2 * cfg.flow_obj_dim);
  ckpt.params.gru_bbox = detail::gru_from_json(sub("gru_bbox"), "params.gru_bbox",
                                               kBboxFeatureDim, cfg.bbox_hidden);
  ckpt.params.gru_flow = detail::gru_from_json(sub("gru_flow"), "params.gru_flow",
                                               cfg.flow_reduced_dim, cfg.flow_hidden);
  ckpt.params.w_b =
      detail::vector_from_json(sub("w_b"), "params.w_b", cfg.bbox_hidden);
  ckpt.params.w_f =
      detail::vector_from_json(sub("w_f"), "params.w_f", cfg.flow_hidden);
  ckpt.params.theta3 = detail::affine_from_json(sub("theta3"), "params.theta3",
                                                cfg.head_hidden,
                                                cfg.bbox_hidden + cfg.flow_hidden);
  ckpt.params.theta4 = detail::affine_from_json(sub("theta4"), "params.theta4",
                                                kHeadClasses, cfg.head_hidden);
  return ckpt;
}

inline void checkpoint_save(const Checkpoint& ckpt,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << checkpoint_to_json(ckpt).dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("not valid JSON: " + path.string() + " (" + e.what() + ")");
  }
  return checkpoint_from_json(j);
}

}  // namespace amnet
