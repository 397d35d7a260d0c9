#pragma once

// Risk-scoring network over tracked objects: per-object bounding-box and
// flow GRU streams, softmax attention that reweights hidden states before
// they are fed back into the recurrence, and a two-layer fused score head.
// The backward pass is hand-written reverse-mode through the unrolled video
// graph, including the paths through attention and through the weighted
// hidden states carried between frames.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "amnet/diffmath.hpp"
#include "amnet/errors.hpp"
#include "amnet/random.hpp"

namespace amnet {

struct ModelConfig {
  std::size_t flow_obj_dim = 2048;    // D, per-object and frame flow length
  std::size_t flow_reduced_dim = 512; // 2d, flow embedding after theta0
  std::size_t bbox_hidden = 32;       // n
  std::size_t flow_hidden = 256;      // N
  std::size_t head_hidden = 64;       // k
  bool use_bbox = true;
  bool use_obj_flow = true;
  bool use_frame_flow = true;
  bool use_attention = true;
  long track_eviction_age = 10;       // frames a track may stay unseen

  void validate() const {
    if (flow_obj_dim < 1 || flow_reduced_dim < 1 || bbox_hidden < 1 ||
        flow_hidden < 1 || head_hidden < 1)
      throw ValidationError("ModelConfig: all dimensions must be >= 1");
    if (flow_reduced_dim % 2 != 0)
      throw ValidationError("ModelConfig: flow_reduced_dim must be even");
    if (!use_bbox && !use_obj_flow)
      throw ValidationError(
          "ModelConfig: at least one of use_bbox/use_obj_flow must be enabled");
    if (track_eviction_age < 0)
      throw ValidationError("ModelConfig: track_eviction_age must be >= 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

constexpr std::size_t kBboxFeatureDim = 4;  // x, y, w, h
constexpr std::size_t kHeadClasses = 2;

template <class Real>
struct ModelParamsT {
  using scalar_type = Real;
  AffineParamsT<Real> theta0;  // flow reduction, 2d x 2D
  GruParamsT<Real> gru_bbox;   // input 4, hidden n
  GruParamsT<Real> gru_flow;   // input 2d, hidden N
  Vec<Real> w_b;               // bbox attention vector, length n
  Vec<Real> w_f;               // flow attention vector, length N
  AffineParamsT<Real> theta3;  // head, k x (n+N)
  AffineParamsT<Real> theta4;  // logits, 2 x k
};
using ModelParams = ModelParamsT<double>;

template <class Real, class Fn>
void for_each_param(ModelParamsT<Real>& p, Fn&& fn) {
  for_each_param(p.theta0, fn);
  for_each_param(p.gru_bbox, fn);
  for_each_param(p.gru_flow, fn);
  for_each_param(p.w_b, fn);
  for_each_param(p.w_f, fn);
  for_each_param(p.theta3, fn);
  for_each_param(p.theta4, fn);
}

// Named parameter groups, used by gradient audits and checkpoint files.
template <class Real>
std::vector<std::pair<std::string, std::vector<Real*>>> param_groups(
    ModelParamsT<Real>& p) {
  std::vector<std::pair<std::string, std::vector<Real*>>> groups;
  auto collect = [](auto& container) {
    std::vector<Real*> out;
    for_each_param(container, [&](Real& x) { out.push_back(&x); });
    return out;
  };
  groups.emplace_back("theta0", collect(p.theta0));
  groups.emplace_back("gru_bbox", collect(p.gru_bbox));
  groups.emplace_back("gru_flow", collect(p.gru_flow));
  groups.emplace_back("w_b", collect(p.w_b));
  groups.emplace_back("w_f", collect(p.w_f));
  groups.emplace_back("theta3", collect(p.theta3));
  groups.emplace_back("theta4", collect(p.theta4));
  return groups;
}

// One tracked object in one frame. bbox is (x, y, w, h) normalized to [0,1]
// by image width/height.
struct TrackedObject {
  long track_id = 0;
  std::array<double, 4> bbox{};
  std::vector<double> obj_flow;
  int label = 0;  // 1 = involved in the upcoming accident
};

struct FrameObservation {
  long frame_index = 0;
  std::vector<double> frame_flow;
  std::vector<TrackedObject> objects;
};

// Weighted hidden states carried across frames, keyed by track id.
template <class Real>
struct TrackStateT {
  Vec<Real> h_b;
  Vec<Real> h_f;
  long last_seen = 0;
};
template <class Real>
using TrackStoreT = std::map<long, TrackStateT<Real>>;
using TrackStore = TrackStoreT<double>;

struct ScoreEntry {
  long frame_index = 0;
  long track_id = 0;
  double score = 0.0;
  int label = 0;
};

struct FrameAttentionRecord {
  long frame_index = 0;
  std::map<long, double> bbox_alpha;
  std::map<long, double> flow_alpha;
};

// Per-video output: one score per (track, frame) appearance, in frame order
// with ascending track ids inside a frame, plus attention records when the
// attention module is enabled.
struct RiskinessTimeline {
  std::string video_id;
  std::vector<ScoreEntry> entries;
  std::vector<FrameAttentionRecord> attention;
};

// Loss-side score clamp shared by the loss and the analytic backward pass.
constexpr double kScoreClampLo = 1e-7;

template <class Real>
Real clamp_probability(Real s) {
  const Real lo = Real(kScoreClampLo);
  const Real hi = Real(1) - Real(kScoreClampLo);
  return std::min(std::max(s, lo), hi);
}

// One summand of the class-weighted cross entropy.
template <class Real>
Real weighted_ce_term(Real score, int label, Real w_p, Real w_n) {
  if (label != 0 && label != 1)
    throw ValidationError("label outside {0,1}: " + std::to_string(label));
  const Real s = clamp_probability(score);
  return label == 1 ? -(w_p * std::log(s)) : -(w_n * std::log(Real(1) - s));
}

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
GruParamsT<Real> gru_shape(std::size_t input, std::size_t hidden) {
  GruParamsT<Real> g;
  g.W_z = Mat<Real>(hidden, input);
  g.W_r = Mat<Real>(hidden, input);
  g.W_h = Mat<Real>(hidden, input);
  g.U_z = Mat<Real>(hidden, hidden);
  g.U_r = Mat<Real>(hidden, hidden);
  g.U_h = Mat<Real>(hidden, hidden);
  g.b_z = Vec<Real>(hidden, Real(0));
  g.b_r = Vec<Real>(hidden, Real(0));
  g.b_h = Vec<Real>(hidden, Real(0));
  return g;
}

inline void fill_glorot(Matrix& m, Rng& rng) {
  const double bound =
      std::sqrt(6.0 / static_cast<double>(m.rows + m.cols));
  for (double& x : m.d) x = rng.uniform(-bound, bound);
}

}  // namespace detail

// Zero parameters with the shapes implied by the config.
inline ModelParams make_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.theta0.W = Matrix(cfg.flow_reduced_dim, 2 * cfg.flow_obj_dim);
  p.theta0.b = Vector(cfg.flow_reduced_dim, 0.0);
  p.gru_bbox = detail::gru_shape<double>(kBboxFeatureDim, cfg.bbox_hidden);
  p.gru_flow = detail::gru_shape<double>(cfg.flow_reduced_dim, cfg.flow_hidden);
  p.w_b = Vector(cfg.bbox_hidden, 0.0);
  p.w_f = Vector(cfg.flow_hidden, 0.0);
  p.theta3.W = Matrix(cfg.head_hidden, cfg.bbox_hidden + cfg.flow_hidden);
  p.theta3.b = Vector(cfg.head_hidden, 0.0);
  p.theta4.W = Matrix(kHeadClasses, cfg.head_hidden);
  p.theta4.b = Vector(kHeadClasses, 0.0);
  return p;
}

// Glorot-uniform weights, zero biases, attention vectors uniform in
// +-sqrt(3/hidden). Draw order is fixed: theta0, gru_bbox, gru_flow, w_b,
// w_f, theta3, theta4.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = make_params(cfg);
  Rng rng(seed);
  detail::fill_glorot(p.theta0.W, rng);
  for (Matrix* m : {&p.gru_bbox.W_z, &p.gru_bbox.W_r, &p.gru_bbox.W_h,
                    &p.gru_bbox.U_z, &p.gru_bbox.U_r, &p.gru_bbox.U_h})
    detail::fill_glorot(*m, rng);
  for (Matrix* m : {&p.gru_flow.W_z, &p.gru_flow.W_r, &p.gru_flow.W_h,
                    &p.gru_flow.U_z, &p.gru_flow.U_r, &p.gru_flow.U_h})
    detail::fill_glorot(*m, rng);
  const double bb = std::sqrt(3.0 / static_cast<double>(cfg.bbox_hidden));
  for (double& x : p.w_b) x = rng.uniform(-bb, bb);
  const double bf = std::sqrt(3.0 / static_cast<double>(cfg.flow_hidden));
  for (double& x : p.w_f) x = rng.uniform(-bf, bf);
  detail::fill_glorot(p.theta3.W, rng);
  detail::fill_glorot(p.theta4.W, rng);
  return p;
}

template <class Real>
ModelParamsT<Real> params_cast(const ModelParams& p) {
  ModelParamsT<Real> out;
  auto conv_m = [](const Matrix& m) {
    Mat<Real> r(m.rows, m.cols);
    for (std::size_t i = 0; i < m.d.size(); ++i) r.d[i] = Real(m.d[i]);
    return r;
  };
  auto conv_v = [](const Vector& v) {
    Vec<Real> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) r[i] = Real(v[i]);
    return r;
  };
  out.theta0 = {conv_m(p.theta0.W), conv_v(p.theta0.b)};
  auto conv_g = [&](const GruParams& g) {
    GruParamsT<Real> r;
    r.W_z = conv_m(g.W_z); r.W_r = conv_m(g.W_r); r.W_h = conv_m(g.W_h);
    r.U_z = conv_m(g.U_z); r.U_r = conv_m(g.U_r); r.U_h = conv_m(g.U_h);
    r.b_z = conv_v(g.b_z); r.b_r = conv_v(g.b_r); r.b_h = conv_v(g.b_h);
    return r;
  };
  out.gru_bbox = conv_g(p.gru_bbox);
  out.gru_flow = conv_g(p.gru_flow);
  out.w_b = conv_v(p.w_b);
  out.w_f = conv_v(p.w_f);
  out.theta3 = {conv_m(p.theta3.W), conv_v(p.theta3.b)};
  out.theta4 = {conv_m(p.theta4.W), conv_v(p.theta4.b)};
  return out;
}

// ---------------------------------------------------------------------------
// Forward building blocks
// ---------------------------------------------------------------------------

// f = ReLU(theta0 [obj_flow; frame_flow] + b). A stream disabled by the
// ablation toggles enters as zeros of the same length.
template <class Real>
Vec<Real> reduce_flow(const Vec<Real>& obj_flow, const Vec<Real>& frame_flow,
                      const ModelParamsT<Real>& params,
                      const ModelConfig& cfg) {
  const std::size_t D = cfg.flow_obj_dim;
  if (cfg.use_obj_flow && obj_flow.size() != D)
    throw ShapeError("reduce_flow: obj_flow length " +
                     std::to_string(obj_flow.size()) + " does not match D " +
                     std::to_string(D));
  if (cfg.use_frame_flow && frame_flow.size() != D)
    throw ShapeError("reduce_flow: frame_flow length " +
                     std::to_string(frame_flow.size()) +
                     " does not match D " + std::to_string(D));
  Vec<Real> p(2 * D, Real(0));
  if (cfg.use_obj_flow)
    for (std::size_t i = 0; i < D; ++i) p[i] = obj_flow[i];
  if (cfg.use_frame_flow)
    for (std::size_t i = 0; i < D; ++i) p[D + i] = frame_flow[i];
  return relu(affine(p, params.theta0));
}

// alpha = softmax(tanh(H^T) w) over the M columns of H.
template <class Real>
Vec<Real> attention_weights(const Mat<Real>& H, const Vec<Real>& w) {
  if (H.cols == 0)
    throw DomainError("attention_weights: no objects (M = 0)");
  detail::check(w.size() == H.rows,
                "attention_weights: w length " + std::to_string(w.size()) +
                    " does not match hidden size " + std::to_string(H.rows));
  Vec<Real> e(H.cols, Real(0));
  for (std::size_t i = 0; i < H.cols; ++i) {
    Real acc = Real(0);
    for (std::size_t j = 0; j < H.rows; ++j) acc += std::tanh(H(j, i)) * w[j];
    e[i] = acc;
  }
  return softmax(e);
}

// Column i of the result is alpha_i times column i of H.
template <class Real>
Mat<Real> apply_attention(const Mat<Real>& H, const Vec<Real>& alpha) {
  detail::check(alpha.size() == H.cols,
                "apply_attention: alpha length " +
                    std::to_string(alpha.size()) +
                    " does not match object count " + std::to_string(H.cols));
  Mat<Real> out(H.rows, H.cols);
  for (std::size_t j = 0; j < H.rows; ++j)
    for (std::size_t i = 0; i < H.cols; ++i) out(j, i) = alpha[i] * H(j, i);
  return out;
}

// s = softmax(theta4 ReLU(theta3 h_hat + b3) + b4)[1], the positive-class
// probability.
template <class Real>
Real score_head(const Vec<Real>& h_hat, const ModelParamsT<Real>& params) {
  const Vec<Real> u = relu(affine(h_hat, params.theta3));
  const Vec<Real> logits = affine(u, params.theta4);
  return softmax(logits)[1];
}

// ---------------------------------------------------------------------------
// Frame and video evaluation
// ---------------------------------------------------------------------------

namespace detail {

// Everything the backward pass needs about one object occurrence.
template <class Real>
struct OccTape {
  long track_id = 0;
  int prev_occ = -1;  // occurrence whose stored state fed this one
  int label = 0;
  Vec<Real> bbox_x;             // GRU input, bbox stream
  Vec<Real> concat_p;           // [obj_flow; frame_flow] after toggles
  Vec<Real> a0, f;              // theta0 pre-activation and ReLU output
  Vec<Real> hprev_b, hprev_f;   // states consumed by the GRUs
  GruCache<Real> gb, gf;        // gb left empty when use_bbox is off
  Vec<Real> hhat_b, hhat_f;     // weighted states written to the store
  Vec<Real> a3, u;              // head pre-activation and ReLU output
  Real score = Real(0);
};

template <class Real>
struct FrameTape {
  long frame_index = 0;
  std::vector<int> occ;  // ascending track order, matches alpha indexing
  Vec<Real> alpha_b, alpha_f;
};

template <class Real>
struct VideoTape {
  std::vector<OccTape<Real>> occs;
  std::vector<FrameTape<Real>> frames;
  std::map<long, int> last_writer;  // track id -> occurrence index
};

template <class Real>
struct FrameScores {
  std::map<long, Real> scores;
  FrameAttentionRecord attention;
};

// Shared forward step. When `tape` is non-null all intermediates are
// recorded for the backward pass.
template <class Real>
FrameScores<Real> forward_frame_impl(const ModelParamsT<Real>& params,
                                     const ModelConfig& cfg,
                                     const FrameObservation& obs,
                                     TrackStoreT<Real>& store,
                                     VideoTape<Real>* tape) {
  const std::size_t n = cfg.bbox_hidden;
  const std::size_t N = cfg.flow_hidden;

  // Ascending track order; duplicate ids are malformed tracker output.
  std::map<long, const TrackedObject*> ordered;
  for (const TrackedObject& obj : obs.objects) {
    if (!ordered.emplace(obj.track_id, &obj).second)
      throw ValidationError("duplicate track_id " +
                            std::to_string(obj.track_id) + " in frame " +
                            std::to_string(obs.frame_index));
  }
  const std::size_t M = ordered.size();

  FrameScores<Real> result;
  result.attention.frame_index = obs.frame_index;
  FrameTape<Real>* ft = nullptr;
  if (tape) {
    tape->frames.emplace_back();
    ft = &tape->frames.back();
    ft->frame_index = obs.frame_index;
  }

  Mat<Real> H_b(n, M), H_f(N, M);
  std::vector<long> track_of(M);
  std::vector<GruCache<Real>> gb(M), gf(M);
  std::vector<Vec<Real>> taped_f(M), taped_a0(M), taped_p(M);
  std::vector<Vec<Real>> hprev_b(M), hprev_f(M);
  std::vector<int> prev_occ(M, -1);

  std::size_t col = 0;
  for (const auto& [track_id, obj] : ordered) {
    track_of[col] = track_id;
    Vec<Real> hb_prev(n, Real(0)), hf_prev(N, Real(0));
    auto it = store.find(track_id);
    if (it != store.end()) {
      hb_prev = it->second.h_b;
      hf_prev = it->second.h_f;
      if (tape) {
        auto w = tape->last_writer.find(track_id);
        if (w != tape->last_writer.end()) prev_occ[col] = w->second;
      }
    }

    // Flow stream: always runs; disabled inputs enter as zeros.
    Vec<Real> obj_flow(obj->obj_flow.begin(), obj->obj_flow.end());
    Vec<Real> frame_flow(obs.frame_flow.begin(), obs.frame_flow.end());
    const std::size_t D = cfg.flow_obj_dim;
    if (cfg.use_obj_flow && obj_flow.size() != D)
      throw ShapeError("track " + std::to_string(track_id) +
                       ": obj_flow length " + std::to_string(obj_flow.size()) +
                       " does not match D " + std::to_string(D));
    if (cfg.use_frame_flow && frame_flow.size() != D)
      throw ShapeError("frame " + std::to_string(obs.frame_index) +
                       ": frame_flow length " +
                       std::to_string(frame_flow.size()) +
                       " does not match D " + std::to_string(D));
    Vec<Real> p(2 * D, Real(0));
    if (cfg.use_obj_flow)
      for (std::size_t i = 0; i < D; ++i) p[i] = obj_flow[i];
    if (cfg.use_frame_flow)
      for (std::size_t i = 0; i < D; ++i) p[D + i] = frame_flow[i];
    Vec<Real> a0 = affine(p, params.theta0);
    Vec<Real> f = relu(a0);
    gf[col] = gru_forward(f, hf_prev, params.gru_flow);
    for (std::size_t j = 0; j < N; ++j) H_f(j, col) = gf[col].h[j];

    // Bbox stream: a disabled stream contributes a zero hidden state.
    if (cfg.use_bbox) {
      Vec<Real> bx = {Real(obj->bbox[0]), Real(obj->bbox[1]),
                      Real(obj->bbox[2]), Real(obj->bbox[3])};
      gb[col] = gru_forward(bx, hb_prev, params.gru_bbox);
      for (std::size_t j = 0; j < n; ++j) H_b(j, col) = gb[col].h[j];
    }

    if (tape) {
      taped_p[col] = std::move(p);
      taped_a0[col] = std::move(a0);
      taped_f[col] = std::move(f);
      hprev_b[col] = std::move(hb_prev);
      hprev_f[col] = std::move(hf_prev);
    }
    ++col;
  }

  Vec<Real> alpha_b, alpha_f;
  Mat<Real> Hhat_b = H_b, Hhat_f = H_f;
  if (cfg.use_attention && M >= 1) {
    alpha_b = attention_weights(H_b, params.w_b);
    alpha_f = attention_weights(H_f, params.w_f);
    Hhat_b = apply_attention(H_b, alpha_b);
    Hhat_f = apply_attention(H_f, alpha_f);
    for (std::size_t i = 0; i < M; ++i) {
      result.attention.bbox_alpha[track_of[i]] =
          static_cast<double>(alpha_b[i]);
      result.attention.flow_alpha[track_of[i]] =
          static_cast<double>(alpha_f[i]);
    }
  }
  if (ft) {
    ft->alpha_b = alpha_b;
    ft->alpha_f = alpha_f;
  }

  for (std::size_t i = 0; i < M; ++i) {
    Vec<Real> hhat_b(n), hhat_f(N);
    for (std::size_t j = 0; j < n; ++j) hhat_b[j] = Hhat_b(j, i);
    for (std::size_t j = 0; j < N; ++j) hhat_f[j] = Hhat_f(j, i);

    Vec<Real> joint(n + N);
    for (std::size_t j = 0; j < n; ++j) joint[j] = hhat_b[j];
    for (std::size_t j = 0; j < N; ++j) joint[n + j] = hhat_f[j];
    Vec<Real> a3 = affine(joint, params.theta3);
    Vec<Real> u = relu(a3);
    Vec<Real> logits = affine(u, params.theta4);
    const Real s = softmax(logits)[1];
    result.scores[track_of[i]] = s;

    auto& state = store[track_of[i]];
    state.h_b = hhat_b;
    state.h_f = hhat_f;
    state.last_seen = obs.frame_index;

    if (tape) {
      OccTape<Real> occ;
      occ.track_id = track_of[i];
      occ.prev_occ = prev_occ[i];
      occ.label = ordered.at(track_of[i])->label;
      if (cfg.use_bbox) {
        const auto& bb = ordered.at(track_of[i])->bbox;
        occ.bbox_x = {Real(bb[0]), Real(bb[1]), Real(bb[2]), Real(bb[3])};
        occ.gb = gb[i];
      }
      occ.concat_p = std::move(taped_p[i]);
      occ.a0 = std::move(taped_a0[i]);
      occ.f = std::move(taped_f[i]);
      occ.hprev_b = std::move(hprev_b[i]);
      occ.hprev_f = std::move(hprev_f[i]);
      occ.gf = gf[i];
      occ.hhat_b = std::move(hhat_b);
      occ.hhat_f = std::move(hhat_f);
      occ.a3 = std::move(a3);
      occ.u = std::move(u);
      occ.score = s;
      const int occ_index = static_cast<int>(tape->occs.size());
      tape->occs.push_back(std::move(occ));
      tape->last_writer[track_of[i]] = occ_index;
      ft->occ.push_back(occ_index);
    }
  }

  // Evict tracks unseen for more than the configured number of frames.
  for (auto it = store.begin(); it != store.end();) {
    if (obs.frame_index - it->second.last_seen > cfg.track_eviction_age)
      it = store.erase(it);
    else
      ++it;
  }
  return result;
}

}  // namespace detail

struct FrameResult {
  std::map<long, double> scores;
  FrameAttentionRecord attention;
};

inline FrameResult forward_frame(const ModelParams& params,
                                 const ModelConfig& cfg,
                                 const FrameObservation& obs,
                                 TrackStore& store) {
  cfg.validate();
  detail::FrameScores<double> fs =
      detail::forward_frame_impl<double>(params, cfg, obs, store, nullptr);
  return FrameResult{std::move(fs.scores), std::move(fs.attention)};
}

namespace detail {

inline void check_frame_order(const std::vector<FrameObservation>& video) {
  for (std::size_t t = 1; t < video.size(); ++t)
    if (video[t].frame_index <= video[t - 1].frame_index)
      throw ValidationError(
          "frames out of order: frame_index " +
          std::to_string(video[t].frame_index) + " follows " +
          std::to_string(video[t - 1].frame_index));
}

}  // namespace detail

inline RiskinessTimeline forward_video(const ModelParams& params,
                                       const ModelConfig& cfg,
                                       const std::vector<FrameObservation>& video,
                                       std::string video_id = {}) {
  cfg.validate();
  detail::check_frame_order(video);
  RiskinessTimeline timeline;
  timeline.video_id = std::move(video_id);
  TrackStore store;
  for (const FrameObservation& obs : video) {
    detail::FrameScores<double> fs =
        detail::forward_frame_impl<double>(params, cfg, obs, store, nullptr);
    for (const auto& [track_id, score] : fs.scores) {
      const TrackedObject* src = nullptr;
      for (const TrackedObject& o : obs.objects)
        if (o.track_id == track_id) src = &o;
      timeline.entries.push_back(
          ScoreEntry{obs.frame_index, track_id, score, src ? src->label : 0});
    }
    if (cfg.use_attention && !fs.scores.empty())
      timeline.attention.push_back(std::move(fs.attention));
  }
  return timeline;
}

// Loss-only forward, used by the finite-difference oracle. Sums the weighted
// cross entropy over all object-frame samples in frame-then-track order.
template <class Real>
Real video_loss(const ModelParamsT<Real>& params, const ModelConfig& cfg,
                const std::vector<FrameObservation>& video, Real w_p,
                Real w_n) {
  cfg.validate();
  detail::check_frame_order(video);
  TrackStoreT<Real> store;
  Real loss = Real(0);
  for (const FrameObservation& obs : video) {
    detail::FrameScores<Real> fs =
        detail::forward_frame_impl<Real>(params, cfg, obs, store, nullptr);
    std::map<long, int> labels;
    for (const TrackedObject& o : obs.objects) labels[o.track_id] = o.label;
    for (const auto& [track_id, score] : fs.scores)
      loss += weighted_ce_term(score, labels.at(track_id), w_p, w_n);
  }
  return loss;
}

struct BackwardResult {
  double loss = 0.0;
  ModelParams grads;
};

// Reverse-mode gradients of the weighted cross-entropy video loss. The
// returned loss is bitwise identical to summing weighted_ce_term over the
// forward_video timeline in its stored order.
inline BackwardResult backward_video(const ModelParams& params,
                                     const ModelConfig& cfg,
                                     const std::vector<FrameObservation>& video,
                                     double w_p, double w_n) {
  cfg.validate();
  detail::check_frame_order(video);
  const std::size_t n = cfg.bbox_hidden;
  const std::size_t N = cfg.flow_hidden;

  BackwardResult out;
  out.grads = make_gradient_bundle(params);
  if (video.empty()) return out;

  // Forward with tape.
  detail::VideoTape<double> tape;
  TrackStore store;
  for (const FrameObservation& obs : video) {
    for (const TrackedObject& o : obs.objects)
      if (o.label != 0 && o.label != 1)
        throw ValidationError("label outside {0,1} for track " +
                              std::to_string(o.track_id) + " in frame " +
                              std::to_string(obs.frame_index));
    detail::forward_frame_impl<double>(params, cfg, obs, store, &tape);
  }
  for (const auto& frame : tape.frames)
    for (int oi : frame.occ)
      out.loss += weighted_ce_term(tape.occs[oi].score, tape.occs[oi].label,
                                   w_p, w_n);

  // Gradient of the stored weighted state, deposited by the next occurrence
  // of the same track when it consumed this one's state.
  std::vector<Vector> carry_b(tape.occs.size());
  std::vector<Vector> carry_f(tape.occs.size());

  for (auto fit = tape.frames.rbegin(); fit != tape.frames.rend(); ++fit) {
    const std::size_t M = fit->occ.size();
    if (M == 0) continue;

    // d(loss)/d(hhat) per object: score head plus the recurrent carry.
    Matrix dHhat_b(n, M), dHhat_f(N, M);
    for (std::size_t i = 0; i < M; ++i) {
      const auto& occ = tape.occs[fit->occ[i]];
      const double s = occ.score;
      const double sc = clamp_probability(s);
      double dls = occ.label == 1 ? -(w_p / sc) : (w_n / (1.0 - sc));
      if (!(s > kScoreClampLo && s < 1.0 - kScoreClampLo)) dls = 0.0;
      const double g = dls * s * (1.0 - s);
      const Vector d_logits = {-g, g};

      Vector du(occ.u.size(), 0.0);
      affine_backward(occ.u, params.theta4, d_logits, out.grads.theta4, &du);
      const Vector da3 = relu_backward(occ.a3, du);
      Vector d_joint(n + N, 0.0);
      Vector joint(n + N);
      for (std::size_t j = 0; j < n; ++j) joint[j] = occ.hhat_b[j];
      for (std::size_t j = 0; j < N; ++j) joint[n + j] = occ.hhat_f[j];
      affine_backward(joint, params.theta3, da3, out.grads.theta3, &d_joint);

      for (std::size_t j = 0; j < n; ++j) dHhat_b(j, i) = d_joint[j];
      for (std::size_t j = 0; j < N; ++j) dHhat_f(j, i) = d_joint[n + j];
      if (!carry_b[fit->occ[i]].empty())
        for (std::size_t j = 0; j < n; ++j)
          dHhat_b(j, i) += carry_b[fit->occ[i]][j];
      if (!carry_f[fit->occ[i]].empty())
        for (std::size_t j = 0; j < N; ++j)
          dHhat_f(j, i) += carry_f[fit->occ[i]][j];
    }

    // Attention backward (joint over the frame's objects), or identity.
    auto attention_back = [&](const Matrix& dHhat, const Vector& alpha,
                              const Vector& w, Vector& dw,
                              auto h_of_col) -> Matrix {
      const std::size_t hidden = dHhat.rows;
      Matrix dH(hidden, M);
      if (!cfg.use_attention || alpha.empty()) {
        dH = dHhat;
        return dH;
      }
      Vector dalpha(M, 0.0);
      for (std::size_t i = 0; i < M; ++i) {
        const Vector& h = h_of_col(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < hidden; ++j) {
          acc += h[j] * dHhat(j, i);
          dH(j, i) = alpha[i] * dHhat(j, i);
        }
        dalpha[i] = acc;
      }
      const Vector de = softmax_backward(alpha, dalpha);
      for (std::size_t i = 0; i < M; ++i) {
        const Vector& h = h_of_col(i);
        for (std::size_t j = 0; j < hidden; ++j) {
          const double th = std::tanh(h[j]);
          dw[j] += de[i] * th;
          dH(j, i) += de[i] * w[j] * (1.0 - th * th);
        }
      }
      return dH;
    };

    Vector zero_hb(n, 0.0);
    auto hb_of = [&](std::size_t i) -> const Vector& {
      const auto& occ = tape.occs[fit->occ[i]];
      return cfg.use_bbox ? occ.gb.h : zero_hb;
    };
    auto hf_of = [&](std::size_t i) -> const Vector& {
      return tape.occs[fit->occ[i]].gf.h;
    };
    Matrix dH_b =
        attention_back(dHhat_b, fit->alpha_b, params.w_b, out.grads.w_b, hb_of);
    Matrix dH_f =
        attention_back(dHhat_f, fit->alpha_f, params.w_f, out.grads.w_f, hf_of);

    // GRU and flow-reduction backward, ascending track order.
    for (std::size_t i = 0; i < M; ++i) {
      auto& occ = tape.occs[fit->occ[i]];
      if (cfg.use_bbox) {
        Vector dh(n);
        for (std::size_t j = 0; j < n; ++j) dh[j] = dH_b(j, i);
        Vector dh_prev(n, 0.0);
        gru_backward<double>(occ.bbox_x, occ.hprev_b, params.gru_bbox, occ.gb,
                             dh, out.grads.gru_bbox, nullptr, dh_prev);
        if (occ.prev_occ >= 0) {
          if (carry_b[occ.prev_occ].empty())
            carry_b[occ.prev_occ] = std::move(dh_prev);
          else
            add_into(dh_prev, carry_b[occ.prev_occ]);
        }
      }
      {
        Vector dh(N);
        for (std::size_t j = 0; j < N; ++j) dh[j] = dH_f(j, i);
        Vector dh_prev(N, 0.0);
        Vector df(occ.f.size(), 0.0);
        gru_backward(occ.f, occ.hprev_f, params.gru_flow, occ.gf, dh,
                     out.grads.gru_flow, &df, dh_prev);
        const Vector da0 = relu_backward(occ.a0, df);
        affine_backward<double>(occ.concat_p, params.theta0, da0,
                                out.grads.theta0, nullptr);
        if (occ.prev_occ >= 0) {
          if (carry_f[occ.prev_occ].empty())
            carry_f[occ.prev_occ] = std::move(dh_prev);
          else
            add_into(dh_prev, carry_f[occ.prev_occ]);
        }
      }
    }
  }
  return out;
}

}  // namespace amnet
