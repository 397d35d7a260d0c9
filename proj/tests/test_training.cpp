#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "amnet/synthdata.hpp"
#include "amnet/training.hpp"
#include "oracles.hpp"

using namespace amnet;

namespace {

RiskinessTimeline single_sample(double score, int label) {
  RiskinessTimeline tl;
  tl.entries.push_back(ScoreEntry{0, 0, score, label});
  return tl;
}

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.flow_obj_dim = 8;
  cfg.flow_reduced_dim = 8;
  cfg.bbox_hidden = 6;
  cfg.flow_hidden = 8;
  cfg.head_hidden = 8;
  return cfg;
}

std::vector<VideoSample> separable_dataset(int count, std::uint64_t seed) {
  ScenarioConfig sc;
  sc.num_frames = 20;
  sc.feature_dim = 8;
  sc.max_objects = 4;
  sc.separation_delta = 4.0;
  sc.noise_sigma = 1.0;
  std::vector<VideoSample> out;
  for (int i = 0; i < count; ++i) {
    VideoSample v = generate_video(sc, seed + i);
    v.video_id = "v" + std::to_string(i);
    out.push_back(std::move(v));
  }
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("train and loss configuration validation") {
  LossWeights both_zero{0.0, 0.0};
  CHECK_THROWS_AS(both_zero.validate(), ValidationError);
  LossWeights negative{-1.0, 0.27};
  CHECK_THROWS_AS(negative.validate(), ValidationError);

  TrainConfig tc;
  tc.validation_fraction = 1.0;
  CHECK_THROWS_AS(tc.validate(), ValidationError);
  tc = TrainConfig{};
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(tc.validate(), ValidationError);
  tc = TrainConfig{};
  tc.epochs = -1;
  CHECK_THROWS_AS(tc.validate(), ValidationError);
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("weighted cross entropy analytic values") {
  LossWeights w;
  CHECK(weighted_ce_loss(single_sample(0.5, 1), w) ==
        Catch::Approx(std::log(2.0)).margin(1e-12));
  CHECK(weighted_ce_loss(single_sample(0.5, 0), w) ==
        Catch::Approx(0.27 * std::log(2.0)).margin(1e-12));
  CHECK_THROWS_AS(weighted_ce_loss(single_sample(0.5, 2), w), ValidationError);
}

TEST_CASE("weighted cross entropy matches a per-sample summation oracle") {
  Rng rng(61);
  LossWeights w{1.0, 0.27};
  RiskinessTimeline tl;
  double expected = 0.0;
  for (int i = 0; i < 200; ++i) {
    const double s = rng.uniform(1e-4, 1.0 - 1e-4);
    const int label = rng.uniform() < 0.3 ? 1 : 0;
    tl.entries.push_back(ScoreEntry{i, 0, s, label});
    expected += label == 1 ? -w.w_p * std::log(s) : -w.w_n * std::log(1.0 - s);
  }
  CHECK(weighted_ce_loss(tl, w) == Catch::Approx(expected).margin(1e-10));
  CHECK(weighted_ce_loss(tl, w) >= 0.0);
}

TEST_CASE("loss properties: non-negativity, score direction, weight scaling") {
  Rng rng(62);
  LossWeights w{1.0, 0.27};
  for (int rep = 0; rep < 100; ++rep) {
    const double s = rng.uniform(1e-9, 1.0 - 1e-9);
    const int label = rng.uniform() < 0.5;
    CHECK(weighted_ce_loss(single_sample(s, label), w) >= 0.0);
  }
  // Raising the score of a positive sample lowers the loss.
  CHECK(weighted_ce_loss(single_sample(0.6, 1), w) <
        weighted_ce_loss(single_sample(0.5, 1), w));
  // Scaling both weights scales the loss; exact for power-of-two factors.
  RiskinessTimeline tl;
  for (int i = 0; i < 50; ++i)
    tl.entries.push_back(ScoreEntry{i, 0, 0.1 + 0.017 * i, i % 3 == 0});
  LossWeights doubled{2.0 * w.w_p, 2.0 * w.w_n};
  CHECK(weighted_ce_loss(tl, doubled) == 2.0 * weighted_ce_loss(tl, w));
  LossWeights tripled{3.0 * w.w_p, 3.0 * w.w_n};
  CHECK(weighted_ce_loss(tl, tripled) ==
        Catch::Approx(3.0 * weighted_ce_loss(tl, w)).epsilon(1e-14));
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  Vector params{1.5, -2.0, 0.25};
  const Vector before = params;
  auto state = AdamStateT<Vector>::init(params);
  adam_step(params, Vector(3, 0.0), state, 0.1);
  CHECK(params == before);
  CHECK(state.step_count == 1);
}

TEST_CASE("adam first step moves by about lr in the gradient direction") {
  for (double g : {4.0, -0.5, 123.0}) {
    Vector params{0.0};
    auto state = AdamStateT<Vector>::init(params);
    adam_step(params, Vector{g}, state, 1e-3);
    const double want = g > 0 ? -1e-3 : 1e-3;
    CHECK(params[0] == Catch::Approx(want).margin(1e-6 * 1e-3));
  }
}

TEST_CASE("adam matches a scalar transcription over consecutive steps") {
  Rng rng(63);
  Vector params{0.7};
  auto state = AdamStateT<Vector>::init(params);
  oracle::ScalarAdam reference;
  double x = 0.7;
  for (int step = 0; step < 5; ++step) {
    const double g = rng.normal();
    adam_step(params, Vector{g}, state, 0.01);
    x += reference.step(g, 0.01);
    CHECK(params[0] == Catch::Approx(x).margin(1e-15));
  }
}

TEST_CASE("adam updates are per-coordinate independent") {
  Vector a{0.5, -1.0};
  Vector b = a;
  auto sa = AdamStateT<Vector>::init(a);
  auto sb = AdamStateT<Vector>::init(b);
  adam_step(a, Vector{0.3, 10.0}, sa, 0.01);
  adam_step(b, Vector{0.3, -555.0}, sb, 0.01);
  CHECK(a[0] == b[0]);
  CHECK(a[1] != b[1]);
}

TEST_CASE("plateau scheduler analytic cases") {
  PlateauState s;
  s.current_lr = 1e-3;
  for (int epoch = 0; epoch < 10; ++epoch) plateau_step(s, 0.5 + 0.01 * epoch);
  CHECK(s.current_lr == 1e-3);

  PlateauState flat;
  flat.current_lr = 1e-3;
  plateau_step(flat, 0.7);
  for (int i = 0; i < 4; ++i) plateau_step(flat, 0.7);
  CHECK(flat.current_lr == Catch::Approx(1e-4).margin(1e-18));
}

TEST_CASE("plateau scheduler matches a step-by-step simulation") {
  Rng rng(64);
  for (int rep = 0; rep < 30; ++rep) {
    PlateauState s;
    s.current_lr = 0.05;
    s.patience = 2;
    s.factor = 0.5;
    s.min_lr = 1e-4;
    oracle::PlateauSim sim(0.05, 0.5, 2, 1e-4);
    for (int epoch = 0; epoch < 40; ++epoch) {
      const double metric = rng.uniform(0.0, 1.0);
      plateau_step(s, metric);
      sim.observe(metric);
      CHECK(s.current_lr == sim.lr);
      CHECK(s.epochs_since_improve == sim.stall);
    }
  }
}

TEST_CASE("train with zero epochs returns the initialization") {
  const auto dataset = separable_dataset(4, 900);
  const ModelConfig mc = desk_config();
  TrainConfig tc;
  tc.epochs = 0;
  tc.seed = 5;
  const TrainResult result = train(dataset, mc, tc);
  const ModelParams fresh = init_params(mc, tc.seed);
  auto xa = collect_params(const_cast<ModelParams&>(result.checkpoint.params));
  auto xb = collect_params(const_cast<ModelParams&>(fresh));
  REQUIRE(xa.size() == xb.size());
  for (std::size_t i = 0; i < xa.size(); ++i) CHECK(*xa[i] == *xb[i]);
  CHECK(result.checkpoint.epoch == 0);
  CHECK(result.history.empty());
}

TEST_CASE("training is deterministic per seed") {
  const auto dataset = separable_dataset(6, 901);
  const ModelConfig mc = desk_config();
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 17;
  const TrainResult a = train(dataset, mc, tc);
  const TrainResult b = train(dataset, mc, tc);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].mean_train_loss == b.history[i].mean_train_loss);
    CHECK(a.history[i].val_auc == b.history[i].val_auc);
  }
}

TEST_CASE("training loss decreases on a separable dataset") {
  const auto dataset = separable_dataset(20, 902);
  const ModelConfig mc = desk_config();
  TrainConfig tc;
  tc.epochs = 5;
  tc.seed = 3;
  const TrainResult result = train(dataset, mc, tc);
  REQUIRE(result.history.size() == 5);
  for (std::size_t i = 1; i < result.history.size(); ++i)
    CHECK(result.history[i].mean_train_loss <
          result.history[i - 1].mean_train_loss);
}

TEST_CASE("checkpoint selection picks the best validation epoch") {
  // A noisy, barely separable task whose validation AUC peaks early and
  // then degrades, so the selected epoch is interior.
  ScenarioConfig sc;
  sc.num_frames = 15;
  sc.feature_dim = 6;
  sc.max_objects = 4;
  sc.separation_delta = 1.2;
  sc.noise_sigma = 1.0;
  std::vector<VideoSample> dataset;
  for (int i = 0; i < 8; ++i) {
    VideoSample v = generate_video(sc, 300 + i);
    v.video_id = "v" + std::to_string(i);
    dataset.push_back(std::move(v));
  }
  ModelConfig mc;
  mc.flow_obj_dim = 6;
  mc.flow_reduced_dim = 6;
  mc.bbox_hidden = 4;
  mc.flow_hidden = 6;
  mc.head_hidden = 6;
  TrainConfig tc;
  tc.epochs = 8;
  tc.seed = 17;
  tc.learning_rate = 5e-3;
  tc.validation_fraction = 0.25;

  const TrainResult result = train(dataset, mc, tc);
  double best = -1.0;
  int best_epoch = 0;
  for (const EpochStats& s : result.history)
    if (s.val_auc > best) {
      best = s.val_auc;
      best_epoch = s.epoch;
    }
  CHECK(result.checkpoint.val_auc == best);
  CHECK(result.checkpoint.epoch == best_epoch);
  // The scenario is only meaningful if the last epoch is not the best one.
  CHECK(result.history.back().val_auc < best);
  CHECK(best_epoch < static_cast<int>(result.history.size()));
}

TEST_CASE("train rejects an empty dataset") {
  const ModelConfig mc = desk_config();
  CHECK_THROWS_AS(train({}, mc, TrainConfig{}), ValidationError);
}

TEST_CASE("checkpoint round trip reproduces forward results bitwise") {
  const auto dataset = separable_dataset(4, 904);
  const ModelConfig mc = desk_config();
  TrainConfig tc;
  tc.epochs = 1;
  tc.seed = 2;
  const TrainResult result = train(dataset, mc, tc);

  const auto path = temp_path("amnet_ckpt_roundtrip.json");
  checkpoint_save(result.checkpoint, path);
  const Checkpoint loaded = checkpoint_load(path);

  const RiskinessTimeline before = forward_video(
      result.checkpoint.params, mc, dataset[0].frames, dataset[0].video_id);
  const RiskinessTimeline after = forward_video(
      loaded.params, loaded.model_config, dataset[0].frames, dataset[0].video_id);
  REQUIRE(before.entries.size() == after.entries.size());
  for (std::size_t i = 0; i < before.entries.size(); ++i)
    CHECK(before.entries[i].score == after.entries[i].score);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint file validates against the published schema") {
  const ModelConfig mc = desk_config();
  Checkpoint ckpt;
  ckpt.model_config = mc;
  ckpt.params = init_params(mc, 7);
  const auto path = temp_path("amnet_ckpt_schema.json");
  checkpoint_save(ckpt, path);

  std::ifstream in(path);
  nlohmann::json j;
  in >> j;
  CHECK_NOTHROW(oracle::check_checkpoint_schema(j));

  // Keys of the document and of every nested object arrive sorted.
  std::string text = j.dump(2);
  std::ifstream in2(path);
  std::string raw((std::istreambuf_iterator<char>(in2)),
                  std::istreambuf_iterator<char>());
  CHECK(raw == text + "\n");
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint load failure modes are distinct") {
  const ModelConfig mc = desk_config();
  Checkpoint ckpt;
  ckpt.model_config = mc;
  ckpt.params = init_params(mc, 8);
  const auto path = temp_path("amnet_ckpt_bad.json");

  // Stored w_b length disagrees with the declared bbox_hidden.
  nlohmann::json j = checkpoint_to_json(ckpt);
  j["params"]["w_b"]["shape"] = {mc.bbox_hidden + 1};
  j["params"]["w_b"]["data"].push_back(0.0);
  {
    std::ofstream out(path);
    out << j.dump();
  }
  CHECK_THROWS_AS(checkpoint_load(path), ShapeError);

  j = checkpoint_to_json(ckpt);
  j["format_version"] = 2;
  {
    std::ofstream out(path);
    out << j.dump();
  }
  CHECK_THROWS_AS(checkpoint_load(path), VersionError);

  j = checkpoint_to_json(ckpt);
  j.erase("val_auc");
  {
    std::ofstream out(path);
    out << j.dump();
  }
  CHECK_THROWS_AS(checkpoint_load(path), SchemaError);

  {
    std::ofstream out(path);
    out << "{ not json";
  }
  CHECK_THROWS_AS(checkpoint_load(path), ParseError);
  CHECK_THROWS_AS(checkpoint_load(temp_path("amnet_missing_ckpt.json")), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("gradient clipping caps the global norm") {
  const auto dataset = separable_dataset(3, 905);
  const ModelConfig mc = desk_config();
  TrainConfig tc;
  tc.epochs = 1;
  tc.seed = 4;
  tc.gradient_clip_norm = 0.5;
  CHECK_NOTHROW(train(dataset, mc, tc));

  TrainConfig bad = tc;
  bad.gradient_clip_norm = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
