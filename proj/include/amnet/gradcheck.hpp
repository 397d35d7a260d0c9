#pragma once

// Finite-difference audit of the analytic backward pass on a small
// configuration. Videos are randomized with appearing, disappearing and
// re-appearing tracks so the recurrent carry, the fresh-state path and the
// eviction path all receive gradient flow.

#include <string>
#include <vector>

#include "amnet/diffmath.hpp"
#include "amnet/model.hpp"
#include "amnet/random.hpp"

namespace amnet {

inline ModelConfig gradcheck_config() {
  ModelConfig cfg;
  cfg.flow_obj_dim = 8;
  cfg.flow_reduced_dim = 4;
  cfg.bbox_hidden = 3;
  cfg.flow_hidden = 4;
  cfg.head_hidden = 3;
  cfg.track_eviction_age = 1;
  return cfg;
}

// Random labeled video with up to `max_objects` tracks over `frames` frames.
inline std::vector<FrameObservation> random_audit_video(Rng& rng,
                                                        std::size_t feature_dim,
                                                        long frames,
                                                        long max_objects) {
  std::vector<int> labels(max_objects);
  for (int& l : labels) l = rng.uniform() < 0.4 ? 1 : 0;
  std::vector<FrameObservation> video(frames);
  for (long t = 0; t < frames; ++t) {
    FrameObservation& obs = video[t];
    obs.frame_index = t;
    obs.frame_flow.resize(feature_dim);
    for (double& x : obs.frame_flow) x = rng.normal();
    for (long id = 0; id < max_objects; ++id) {
      if (rng.uniform() >= 0.7) continue;
      TrackedObject obj;
      obj.track_id = id;
      obj.label = labels[id];
      obj.bbox = {rng.uniform(), rng.uniform(), rng.uniform(0.02, 0.3),
                  rng.uniform(0.02, 0.3)};
      obj.obj_flow.resize(feature_dim);
      for (double& x : obj.obj_flow) x = rng.normal();
      obs.objects.push_back(std::move(obj));
    }
  }
  return video;
}

struct GradAuditGroup {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradAuditResult {
  std::vector<GradAuditGroup> groups;
  double worst = 0.0;
  bool pass = true;
};

// Compares backward_video against central differences over `seeds` randomized
// (params, video) pairs. Relative errors use an absolute floor of 1e-6 so
// that structurally-zero gradients compare on an absolute scale.
inline GradAuditResult run_gradient_audit(int seeds, double step, double tol,
                                          const ModelConfig& cfg = gradcheck_config(),
                                          long frames = 4, long max_objects = 3,
                                          double w_p = 1.0, double w_n = 0.27) {
  GradAuditResult result;
  for (int s = 0; s < seeds; ++s) {
    ModelParams params = init_params(cfg, static_cast<std::uint64_t>(s));
    Rng rng(0x5eedull + static_cast<std::uint64_t>(s) * 7919ull);
    const auto video = random_audit_video(rng, cfg.flow_obj_dim, frames, max_objects);

    BackwardResult analytic = backward_video(params, cfg, video, w_p, w_n);
    auto loss_fn = [&](const ModelParams& p) {
      return video_loss<double>(p, cfg, video, w_p, w_n);
    };
    ModelParams fd = finite_diff_gradient(loss_fn, params, step);

    auto ga = param_groups(analytic.grads);
    auto gf = param_groups(fd);
    if (result.groups.empty()) {
      for (const auto& [name, ptrs] : ga)
        result.groups.push_back(GradAuditGroup{name, 0.0, true});
    }
    for (std::size_t g = 0; g < ga.size(); ++g) {
      double worst = 0.0;
      for (std::size_t i = 0; i < ga[g].second.size(); ++i) {
        const double a = *ga[g].second[i];
        const double f = *gf[g].second[i];
        const double denom = std::max({std::fabs(a), std::fabs(f), 1e-6});
        worst = std::max(worst, std::fabs(a - f) / denom);
      }
      result.groups[g].max_rel_err = std::max(result.groups[g].max_rel_err, worst);
    }
  }
  for (GradAuditGroup& g : result.groups) {
    g.pass = g.max_rel_err < tol;
    result.worst = std::max(result.worst, g.max_rel_err);
    result.pass = result.pass && g.pass;
  }
  return result;
}

}  // namespace amnet
