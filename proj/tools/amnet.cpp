// Command-line front end: dataset generation, training, evaluation,
// prediction export and gradient checking. Every number printed comes
// straight from the library calls; exit codes are 0 (success), 1 (validation
// or numeric failure), 2 (usage error).

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "amnet/gradcheck.hpp"
#include "amnet/metrics.hpp"
#include "amnet/model.hpp"
#include "amnet/parallel.hpp"
#include "amnet/synthdata.hpp"
#include "amnet/training.hpp"

namespace {

using nlohmann::json;

// Shortest decimal form that parses back to the identical double.
std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// One registered option: knows how to take its value from a config file and
// how to report its resolved value.
struct Binding {
  std::string key;
  CLI::Option* opt = nullptr;
  std::function<void(const json&)> from_json;
  std::function<json()> to_json;
};

struct BindingSet {
  std::vector<Binding> items;

  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& flag, T& var,
                   const std::string& desc) {
    CLI::Option* opt = app->add_option(flag, var, desc);
    register_binding(flag, opt, var);
    return opt;
  }

  CLI::Option* add(CLI::App* app, const std::string& flag,
                   std::optional<double>& var, const std::string& desc) {
    CLI::Option* opt = app->add_option(flag, var, desc);
    const std::string key = flag.substr(flag.find_first_not_of('-'));
    items.push_back(Binding{
        key, opt,
        [&var, key](const json& j) {
          if (j.is_null()) {
            var.reset();
            return;
          }
          if (!j.is_number())
            throw amnet::ValidationError("config file: key '" + key +
                                         "' must be a number or null");
          var = j.get<double>();
        },
        [&var]() { return var ? json(*var) : json(nullptr); }});
    return opt;
  }

  CLI::Option* add_flag(CLI::App* app, const std::string& flag, bool& var,
                        const std::string& desc) {
    CLI::Option* opt = app->add_flag(flag, var, desc);
    register_binding(flag, opt, var);
    return opt;
  }

  // Merge precedence: defaults < config file < explicit flags.
  void apply_config(const json& cfg) {
    for (const auto& [key, value] : cfg.items()) {
      const Binding* found = nullptr;
      for (const Binding& b : items)
        if (b.key == key) found = &b;
      if (!found)
        throw amnet::ValidationError("config file: unknown key '" + key + "'");
      if (found->opt->count() == 0) found->from_json(value);
    }
  }

  json resolved() const {
    json out;
    for (const Binding& b : items) out[b.key] = b.to_json();
    return out;
  }

 private:
  template <class T>
  void register_binding(const std::string& flag, CLI::Option* opt, T& var) {
    const std::string key = flag.substr(flag.find_first_not_of('-'));
    items.push_back(Binding{
        key, opt,
        [&var, key](const json& j) {
          try {
            var = j.get<T>();
          } catch (const json::exception&) {
            throw amnet::ValidationError("config file: key '" + key +
                                         "' has the wrong type");
          }
        },
        [&var]() { return json(var); }});
  }
};

json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw amnet::IoError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw amnet::ParseError("config file is not valid JSON: " + path + " (" +
                            e.what() + ")");
  }
  if (!j.is_object())
    throw amnet::SchemaError("config file: root must be an object: " + path);
  return j;
}

void echo_config(const std::string& command, const BindingSet& bindings) {
  std::cerr << "resolved " << command << " config: " << bindings.resolved().dump()
            << "\n";
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out_dir;
  std::string config_file;
  long videos = 100;
  double split_fraction = 0.8;
  unsigned threads = amnet::default_thread_count();
  amnet::ScenarioConfig scenario;
};

int run_gen(const GenArgs& args, const BindingSet& bindings) {
  echo_config("gen", bindings);
  amnet::DatasetManifest manifest = amnet::generate_dataset(
      args.scenario, args.videos, args.split_fraction, args.out_dir,
      args.threads);
  long train_count = 0;
  for (const auto& e : manifest.entries)
    if (e.split == "train") ++train_count;
  std::cout << "wrote " << manifest.entries.size() << " videos ("
            << train_count << " train, "
            << manifest.entries.size() - train_count << " test) to "
            << args.out_dir << "\n";
  std::cout << "manifest: "
            << (std::filesystem::path(args.out_dir) / "manifest.json").string()
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest_path;
  std::string out_path;
  std::string log_path;
  std::string config_file;
  amnet::ModelConfig model;
  amnet::TrainConfig train;
  bool no_attention = false, no_bbox = false, no_obj_flow = false,
       no_frame_flow = false;
  std::size_t flow_obj_dim = 0;  // 0 = infer from the data
};

std::size_t infer_feature_dim(const std::vector<amnet::VideoSample>& videos) {
  for (const auto& v : videos)
    for (const auto& f : v.frames) {
      for (const auto& o : f.objects)
        if (!o.obj_flow.empty()) return o.obj_flow.size();
      if (!f.frame_flow.empty()) return f.frame_flow.size();
    }
  throw amnet::ValidationError(
      "--flow-obj-dim: cannot infer the flow dimension from an empty dataset");
}

int run_train(TrainArgs& args, const BindingSet& bindings) {
  echo_config("train", bindings);
  const std::filesystem::path manifest_path(args.manifest_path);
  amnet::DatasetManifest manifest = amnet::read_manifest(manifest_path);
  std::vector<amnet::VideoSample> dataset =
      amnet::load_split(manifest, manifest_path, "train");
  if (dataset.empty())
    throw amnet::ValidationError("manifest has no train-split videos");

  args.model.use_attention = !args.no_attention;
  args.model.use_bbox = !args.no_bbox;
  args.model.use_obj_flow = !args.no_obj_flow;
  args.model.use_frame_flow = !args.no_frame_flow;
  args.model.flow_obj_dim =
      args.flow_obj_dim > 0 ? args.flow_obj_dim : infer_feature_dim(dataset);
  args.model.validate();
  args.train.validate();

  amnet::TrainResult result = amnet::train(dataset, args.model, args.train);
  for (const amnet::EpochStats& s : result.history)
    std::cerr << "epoch " << s.epoch << ": train_loss=" << format_double(s.mean_train_loss)
              << " val_auc=" << format_double(s.val_auc)
              << " lr=" << format_double(s.lr) << "\n";

  amnet::checkpoint_save(result.checkpoint, args.out_path);
  const std::string log_path =
      args.log_path.empty() ? args.out_path + ".log.json" : args.log_path;
  json log = json::array();
  for (const amnet::EpochStats& s : result.history)
    log.push_back({{"epoch", s.epoch},
                   {"train_loss", s.mean_train_loss},
                   {"val_auc", s.val_auc},
                   {"lr", s.lr}});
  std::ofstream out(log_path);
  if (!out) throw amnet::IoError("cannot open for writing: " + log_path);
  out << log.dump(2) << "\n";

  std::cout << "checkpoint: " << args.out_path << " (best epoch "
            << result.checkpoint.epoch << ", val_auc "
            << format_double(result.checkpoint.val_auc) << ")\n";
  std::cout << "epoch log: " << log_path << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint_path;
  std::string manifest_path;
  std::string split = "test";
  std::string group_by;
  std::string config_file;
  bool tta_risky_only = false;
  bool auc_per_track = false;
  unsigned threads = amnet::default_thread_count();
};

int run_eval(const EvalArgs& args, const BindingSet& bindings) {
  echo_config("eval", bindings);
  amnet::Checkpoint ckpt = amnet::checkpoint_load(args.checkpoint_path);
  const std::filesystem::path manifest_path(args.manifest_path);
  amnet::DatasetManifest manifest = amnet::read_manifest(manifest_path);
  std::vector<amnet::VideoSample> videos =
      amnet::load_split(manifest, manifest_path, args.split);
  if (videos.empty())
    throw amnet::ValidationError("manifest has no videos in split '" +
                                 args.split + "'");

  std::vector<amnet::RiskinessTimeline> timelines(videos.size());
  amnet::parallel_for(videos.size(), args.threads, [&](std::size_t i) {
    timelines[i] = amnet::forward_video(ckpt.params, ckpt.model_config,
                                        videos[i].frames, videos[i].video_id);
  });

  const amnet::TtaMode mode = args.tta_risky_only
                                  ? amnet::TtaMode::risky_only
                                  : amnet::TtaMode::all_objects;
  const amnet::AucGranularity gran = args.auc_per_track
                                         ? amnet::AucGranularity::per_track
                                         : amnet::AucGranularity::object_frame;
  amnet::MetricsReport report =
      args.group_by.empty()
          ? amnet::compute_report(videos, timelines, mode, gran)
          : amnet::stratified_report(videos, timelines, args.group_by, mode, gran);
  std::cout << amnet::report_to_json(report).dump(2) << "\n";
  return 0;
}

struct PredictArgs {
  std::string checkpoint_path;
  std::string video_path;
  std::string config_file;
};

int run_predict(const PredictArgs& args, const BindingSet& bindings) {
  echo_config("predict", bindings);
  amnet::Checkpoint ckpt = amnet::checkpoint_load(args.checkpoint_path);
  amnet::VideoSample video = amnet::read_video_file(args.video_path);
  amnet::RiskinessTimeline timeline = amnet::forward_video(
      ckpt.params, ckpt.model_config, video.frames, video.video_id);
  std::cout << "video_id,frame,track_id,score,label\n";
  for (const amnet::ScoreEntry& e : timeline.entries)
    std::cout << timeline.video_id << "," << e.frame_index << "," << e.track_id
              << "," << format_double(e.score) << "," << e.label << "\n";
  return 0;
}

struct GradcheckArgs {
  int seeds = 20;
  double step = 1e-5;
  double tol = 1e-4;
  std::string config_file;
};

int run_gradcheck(const GradcheckArgs& args, const BindingSet& bindings) {
  echo_config("gradcheck", bindings);
  if (args.seeds < 1) throw amnet::ValidationError("--seeds must be >= 1");
  amnet::GradAuditResult audit =
      amnet::run_gradient_audit(args.seeds, args.step, args.tol);
  std::printf("%-10s %-14s %s\n", "group", "max_rel_err", "status");
  for (const amnet::GradAuditGroup& g : audit.groups)
    std::printf("%-10s %-14.3e %s\n", g.name.c_str(), g.max_rel_err,
                g.pass ? "pass" : "FAIL");
  std::printf("overall: %s (worst %.3e, tol %.3e, %d seeds)\n",
              audit.pass ? "pass" : "FAIL", audit.worst, args.tol, args.seeds);
  return audit.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Risky-object localization: synthetic data, training, "
               "evaluation and gradient checking"};
  app.require_subcommand(1);

  GenArgs gen;
  BindingSet gen_bind;
  CLI::App* gen_cmd = app.add_subcommand(
      "gen", "Generate a synthetic dataset with a train/test manifest");
  gen_cmd->add_option("--config", gen.config_file,
                      "JSON config file (defaults < config < flags)");
  gen_bind.add(gen_cmd, "--out", gen.out_dir, "Output directory")->required();
  gen_bind.add(gen_cmd, "--videos", gen.videos, "Number of videos");
  gen_bind.add(gen_cmd, "--split-fraction", gen.split_fraction,
               "Train fraction of the split");
  gen_bind.add(gen_cmd, "--seed", gen.scenario.seed, "Generator seed");
  gen_bind.add(gen_cmd, "--frames", gen.scenario.num_frames, "Frames per video");
  gen_bind.add(gen_cmd, "--fps", gen.scenario.fps, "Frames per second");
  gen_bind.add(gen_cmd, "--max-objects", gen.scenario.max_objects,
               "Maximum objects per frame");
  gen_bind.add(gen_cmd, "--positive-ratio", gen.scenario.positive_ratio,
               "Target pooled object-frame positive fraction");
  gen_bind.add(gen_cmd, "--feature-dim", gen.scenario.feature_dim,
               "Flow feature dimension D");
  gen_bind.add(gen_cmd, "--delta", gen.scenario.separation_delta,
               "Distance between risky and non-risky flow means");
  gen_bind.add(gen_cmd, "--noise-sigma", gen.scenario.noise_sigma,
               "Flow noise standard deviation");
  gen_bind.add(gen_cmd, "--ego-amplitude", gen.scenario.ego_motion_amplitude,
               "Ego-motion drift amplitude in the frame flow");
  gen_bind.add(gen_cmd, "--threads", gen.threads,
               "Worker threads (env AMNET_THREADS)");

  TrainArgs train;
  BindingSet train_bind;
  CLI::App* train_cmd =
      app.add_subcommand("train", "Train on the manifest's train split");
  train_cmd->add_option("--config", train.config_file, "JSON config file");
  train_bind.add(train_cmd, "--manifest", train.manifest_path, "Dataset manifest")
      ->required();
  train_bind.add(train_cmd, "--out", train.out_path, "Checkpoint output path")
      ->required();
  train_bind.add(train_cmd, "--log", train.log_path,
                 "Per-epoch metrics log path (default: <out>.log.json)");
  train_bind.add(train_cmd, "--lr", train.train.learning_rate, "Learning rate");
  train_bind.add(train_cmd, "--epochs", train.train.epochs, "Training epochs");
  train_bind.add(train_cmd, "--seed", train.train.seed, "Training seed");
  train_bind.add(train_cmd, "--val-fraction", train.train.validation_fraction,
                 "Fraction of train videos held out for validation");
  train_bind.add(train_cmd, "--wp", train.train.loss_weights.w_p,
                 "Positive class weight");
  train_bind.add(train_cmd, "--wn", train.train.loss_weights.w_n,
                 "Negative class weight");
  train_bind.add(train_cmd, "--clip-norm", train.train.gradient_clip_norm,
                 "Global gradient clipping norm (off when unset)");
  train_bind.add(train_cmd, "--flow-obj-dim", train.flow_obj_dim,
                 "Flow feature dimension D (0 = infer from the data)");
  train_bind.add(train_cmd, "--flow-reduced-dim", train.model.flow_reduced_dim,
                 "Reduced flow dimension 2d");
  train_bind.add(train_cmd, "--bbox-hidden", train.model.bbox_hidden,
                 "Bbox GRU hidden size n");
  train_bind.add(train_cmd, "--flow-hidden", train.model.flow_hidden,
                 "Flow GRU hidden size N");
  train_bind.add(train_cmd, "--head-hidden", train.model.head_hidden,
                 "Score head hidden size k");
  train_bind.add(train_cmd, "--eviction-age", train.model.track_eviction_age,
                 "Frames a track survives unseen");
  train_bind.add_flag(train_cmd, "--no-attention", train.no_attention,
                      "Disable the attention module (ablation)");
  train_bind.add_flag(train_cmd, "--no-bbox", train.no_bbox,
                      "Disable the bounding-box stream (ablation)");
  train_bind.add_flag(train_cmd, "--no-obj-flow", train.no_obj_flow,
                      "Disable the object-level flow input (ablation)");
  train_bind.add_flag(train_cmd, "--no-frame-flow", train.no_frame_flow,
                      "Disable the frame-level flow input (ablation)");

  EvalArgs eval;
  BindingSet eval_bind;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  eval_cmd->add_option("--config", eval.config_file, "JSON config file");
  eval_bind.add(eval_cmd, "--checkpoint", eval.checkpoint_path, "Checkpoint file")
      ->required();
  eval_bind.add(eval_cmd, "--manifest", eval.manifest_path, "Dataset manifest")
      ->required();
  eval_bind.add(eval_cmd, "--split", eval.split, "Split: train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}));
  eval_bind.add(eval_cmd, "--group-by", eval.group_by,
                "Categorical tag for a stratified report");
  eval_bind.add_flag(eval_cmd, "--tta-risky-only", eval.tta_risky_only,
                     "Restrict TTA crossings to ground-truth risky objects");
  eval_bind.add_flag(eval_cmd, "--auc-per-track", eval.auc_per_track,
                     "Object AUC over per-track mean scores");
  eval_bind.add(eval_cmd, "--threads", eval.threads,
                "Worker threads (env AMNET_THREADS)");

  PredictArgs predict;
  BindingSet predict_bind;
  CLI::App* predict_cmd = app.add_subcommand(
      "predict", "Per-frame per-track score table for one video file");
  predict_cmd->add_option("--config", predict.config_file, "JSON config file");
  predict_bind.add(predict_cmd, "--checkpoint", predict.checkpoint_path,
                   "Checkpoint file")
      ->required();
  predict_bind.add(predict_cmd, "--video", predict.video_path, "Video file")
      ->required();

  GradcheckArgs gradcheck;
  BindingSet gradcheck_bind;
  CLI::App* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "Finite-difference audit of the analytic gradients");
  gradcheck_cmd->add_option("--config", gradcheck.config_file, "JSON config file");
  gradcheck_bind.add(gradcheck_cmd, "--seeds", gradcheck.seeds,
                     "Randomized (params, video) pairs to audit");
  gradcheck_bind.add(gradcheck_cmd, "--step", gradcheck.step,
                     "Central-difference step");
  gradcheck_bind.add(gradcheck_cmd, "--tol", gradcheck.tol,
                     "Maximum relative error per parameter group");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    auto merge = [](const std::string& path, BindingSet& bindings) {
      if (!path.empty()) bindings.apply_config(load_config_file(path));
    };
    if (gen_cmd->parsed()) {
      merge(gen.config_file, gen_bind);
      return run_gen(gen, gen_bind);
    }
    if (train_cmd->parsed()) {
      merge(train.config_file, train_bind);
      return run_train(train, train_bind);
    }
    if (eval_cmd->parsed()) {
      merge(eval.config_file, eval_bind);
      return run_eval(eval, eval_bind);
    }
    if (predict_cmd->parsed()) {
      merge(predict.config_file, predict_bind);
      return run_predict(predict, predict_bind);
    }
    if (gradcheck_cmd->parsed()) {
      merge(gradcheck.config_file, gradcheck_bind);
      return run_gradcheck(gradcheck, gradcheck_bind);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
