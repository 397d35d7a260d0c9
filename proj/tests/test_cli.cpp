#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "amnet/metrics.hpp"
#include "amnet/synthdata.hpp"
#include "amnet/training.hpp"

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

RunResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(AMNET_CLI_PATH) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const std::string kGenFlags =
    "--videos 12 --seed 4 --frames 16 --feature-dim 6 --max-objects 4";
const std::string kTrainFlags =
    "--epochs 2 --seed 9 --flow-reduced-dim 4 --bbox-hidden 3 --flow-hidden 4 "
    "--head-hidden 3";

}  // namespace

TEST_CASE("gen writes the dataset and honors the seed") {
  const auto dir = temp_dir("amnet_cli_gen");
  const auto data_a = dir / "a";
  const auto data_b = dir / "b";
  RunResult r =
      run_cli("gen --out " + data_a.string() + " " + kGenFlags, dir);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(data_a / "manifest.json"));
  int files = 0;
  for (const auto& entry : fs::directory_iterator(data_a))
    if (entry.path().extension() == ".json" &&
        entry.path().filename() != "manifest.json")
      ++files;
  CHECK(files == 12);
  CHECK(r.err.find("resolved gen config") != std::string::npos);

  run_cli("gen --out " + data_b.string() + " " + kGenFlags, dir);
  CHECK(slurp(data_a / "manifest.json") == slurp(data_b / "manifest.json"));
  CHECK(slurp(data_a / "video_00003.json") == slurp(data_b / "video_00003.json"));
  fs::remove_all(dir);
}

TEST_CASE("usage errors exit with code 2") {
  const auto dir = temp_dir("amnet_cli_usage");
  CHECK(run_cli("gen --out x --no-such-flag", dir).exit_code == 2);
  CHECK(run_cli("gen", dir).exit_code == 2);           // missing --out
  CHECK(run_cli("frobnicate", dir).exit_code == 2);    // unknown subcommand
  CHECK(run_cli("--help", dir).exit_code == 0);
  fs::remove_all(dir);
}

TEST_CASE("validation failures exit with code 1") {
  const auto dir = temp_dir("amnet_cli_fail");
  const RunResult r = run_cli(
      "eval --checkpoint missing.json --manifest missing_manifest.json", dir);
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("error:") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("train, eval and predict agree with direct library calls") {
  const auto dir = temp_dir("amnet_cli_pipeline");
  const auto data = dir / "data";
  REQUIRE(run_cli("gen --out " + data.string() + " " + kGenFlags, dir)
              .exit_code == 0);
  const auto manifest_path = data / "manifest.json";
  const auto ckpt_path = dir / "model.json";
  const RunResult tr = run_cli("train --manifest " + manifest_path.string() +
                                   " --out " + ckpt_path.string() + " " +
                                   kTrainFlags,
                               dir);
  REQUIRE(tr.exit_code == 0);
  REQUIRE(fs::exists(ckpt_path));
  CHECK(fs::exists(dir / "model.json.log.json"));

  const RunResult ev = run_cli("eval --checkpoint " + ckpt_path.string() +
                                   " --manifest " + manifest_path.string() +
                                   " --split test",
                               dir);
  REQUIRE(ev.exit_code == 0);
  const nlohmann::json report = nlohmann::json::parse(ev.out);

  // The same numbers, straight from the library.
  const amnet::Checkpoint ckpt = amnet::checkpoint_load(ckpt_path);
  const amnet::DatasetManifest manifest = amnet::read_manifest(manifest_path);
  const auto videos = amnet::load_split(manifest, manifest_path, "test");
  std::vector<amnet::RiskinessTimeline> timelines;
  for (const auto& v : videos)
    timelines.push_back(amnet::forward_video(ckpt.params, ckpt.model_config,
                                             v.frames, v.video_id));
  const amnet::MetricsReport direct = amnet::compute_report(videos, timelines);
  REQUIRE(direct.object_auc.has_value());
  CHECK(report.at("object_auc").get<double>() == *direct.object_auc);
  CHECK(report.at("frame_auc").get<double>() == *direct.frame_auc);
  CHECK(report.at("mtta_seconds").get<double>() == direct.mtta_seconds);
  CHECK(report.at("counts").at("videos").get<long>() == direct.videos);

  // Stratified evaluation exposes the per-tag groups.
  const RunResult evg = run_cli(
      "eval --checkpoint " + ckpt_path.string() + " --manifest " +
          manifest_path.string() + " --split test --group-by manner_of_collision",
      dir);
  REQUIRE(evg.exit_code == 0);
  CHECK(nlohmann::json::parse(evg.out).contains("groups"));

  // predict emits one CSV row per scored (frame, track) pair.
  const auto video_path = data / manifest.entries.at(0).path;
  const RunResult pr = run_cli("predict --checkpoint " + ckpt_path.string() +
                                   " --video " + video_path.string(),
                               dir);
  REQUIRE(pr.exit_code == 0);
  REQUIRE(pr.out.rfind("video_id,frame,track_id,score,label\n", 0) == 0);
  const amnet::VideoSample sample = amnet::read_video_file(video_path);
  const amnet::RiskinessTimeline tl = amnet::forward_video(
      ckpt.params, ckpt.model_config, sample.frames, sample.video_id);
  std::size_t rows = 0;
  std::istringstream lines(pr.out);
  std::string line;
  std::getline(lines, line);  // header
  while (std::getline(lines, line)) {
    REQUIRE(rows < tl.entries.size());
    const auto& e = tl.entries[rows];
    std::istringstream cells(line);
    std::string video_id, frame, track, score, label;
    std::getline(cells, video_id, ',');
    std::getline(cells, frame, ',');
    std::getline(cells, track, ',');
    std::getline(cells, score, ',');
    std::getline(cells, label, ',');
    CHECK(video_id == sample.video_id);
    CHECK(std::stol(frame) == e.frame_index);
    CHECK(std::stol(track) == e.track_id);
    CHECK(std::stod(score) == e.score);  // round-trip formatting
    CHECK(std::stoi(label) == e.label);
    ++rows;
  }
  CHECK(rows == tl.entries.size());
  fs::remove_all(dir);
}

TEST_CASE("config files merge below explicit flags") {
  const auto dir = temp_dir("amnet_cli_config");
  {
    std::ofstream out(dir / "gen.json");
    out << R"({"videos": 3, "frames": 8, "feature-dim": 4, "seed": 2})";
  }
  const auto data_a = dir / "a";
  RunResult r = run_cli("gen --config " + (dir / "gen.json").string() +
                            " --out " + data_a.string(),
                        dir);
  REQUIRE(r.exit_code == 0);
  const amnet::DatasetManifest ma =
      amnet::read_manifest(data_a / "manifest.json");
  CHECK(ma.entries.size() == 3);
  CHECK(ma.generator.num_frames == 8);

  // An explicit flag outranks the config file.
  const auto data_b = dir / "b";
  r = run_cli("gen --config " + (dir / "gen.json").string() + " --out " +
                  data_b.string() + " --videos 5",
              dir);
  REQUIRE(r.exit_code == 0);
  CHECK(amnet::read_manifest(data_b / "manifest.json").entries.size() == 5);

  // Unknown config keys are rejected.
  {
    std::ofstream out(dir / "bad.json");
    out << R"({"no_such_key": 1})";
  }
  r = run_cli("gen --config " + (dir / "bad.json").string() + " --out " +
                  (dir / "c").string(),
              dir);
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("no_such_key") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck prints a per-group table and passes") {
  const auto dir = temp_dir("amnet_cli_gradcheck");
  const RunResult r = run_cli("gradcheck --seeds 3", dir);
  CHECK(r.exit_code == 0);
  for (const char* group : {"theta0", "gru_bbox", "gru_flow", "w_b", "w_f",
                            "theta3", "theta4"})
    CHECK(r.out.find(group) != std::string::npos);
  CHECK(r.out.find("overall: pass") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("eval results are independent of the thread count") {
  const auto dir = temp_dir("amnet_cli_threads");
  const auto data = dir / "data";
  REQUIRE(run_cli("gen --out " + data.string() + " " + kGenFlags, dir)
              .exit_code == 0);
  const auto ckpt_path = dir / "model.json";
  REQUIRE(run_cli("train --manifest " + (data / "manifest.json").string() +
                      " --out " + ckpt_path.string() + " " + kTrainFlags,
                  dir)
              .exit_code == 0);
  const RunResult one =
      run_cli("eval --checkpoint " + ckpt_path.string() + " --manifest " +
                  (data / "manifest.json").string() + " --threads 1",
              dir);
  const RunResult four =
      run_cli("eval --checkpoint " + ckpt_path.string() + " --manifest " +
                  (data / "manifest.json").string() + " --threads 4",
              dir);
  CHECK(one.exit_code == 0);
  CHECK(one.out == four.out);
  fs::remove_all(dir);
}
