// Command-line driver: gen-data, train, eval, pose, cam.

#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "pcar/inference.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kConfigError = 2;
constexpr int kCheckpointMismatch = 3;

struct GenArgs {
  std::string out;
  int num_videos = 40;
  int classes = 4;
  int frames = 32;
  std::string bias = "none";
  std::string split = "train";
  std::uint64_t seed = 0;
};

struct TrainArgs {
  std::string config, data, out, mode;
  bool resume = false;
  std::optional<std::uint64_t> seed;
};

struct EvalArgs {
  std::string checkpoint, data, config;
  std::string split = "test";
};

struct VisualArgs {
  std::string checkpoint, video, out;
  int class_id = 0;
};

int run_gen(const GenArgs& a) {
  pcar::SynthConfig c;
  c.num_videos = a.num_videos;
  c.num_classes = a.classes;
  c.frames = a.frames;
  c.split = a.split;
  c.seed = a.seed;
  try {
    c.bias = pcar::parse_bias(a.bias);
    c.validate();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  const pcar::Dataset d = pcar::generate_dataset(c, a.out);
  std::map<int, int> counts;
  for (const auto& v : d.videos) ++counts[v.label];
  std::cout << (fs::path(a.out) / "manifest.json").string() << '\n';
  for (const auto& [label, count] : counts) {
    std::cout << "class " << label << " (" << pcar::kMotionNames[label] << "): " << count << " videos\n";
  }
  return kOk;
}

int run_train(const TrainArgs& a) {
  pcar::TrainConfig config;
  try {
    config = pcar::load_config(a.config);
    if (!a.mode.empty()) pcar::apply_mode_flags(config, a.mode);
    if (a.seed) config.seed = *a.seed;
    config.validate();
  } catch (const pcar::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  const pcar::Dataset data = pcar::load_manifest(a.data);
  const pcar::FitResult r = pcar::fit(data, config, a.out, {a.resume, &std::cerr});
  std::cout << r.final_checkpoint.string() << '\n';
  return kOk;
}

// Model for a checkpoint; the config comes from the checkpoint unless given.
struct LoadedModel {
  pcar::TrainConfig config;
  std::unique_ptr<pcar::ActionModel<float>> model;
};

LoadedModel load_model(const std::string& checkpoint, const std::string& config_path) {
  LoadedModel m;
  m.config = config_path.empty() ? pcar::read_checkpoint_info(checkpoint).config : pcar::load_config(config_path);
  m.model = std::make_unique<pcar::ActionModel<float>>(m.config.model);
  pcar::load_checkpoint<float>(checkpoint, *m.model, nullptr);
  return m;
}

int run_eval(const EvalArgs& a) {
  LoadedModel m = load_model(a.checkpoint, a.config);
  const pcar::Dataset data = pcar::load_manifest(a.data);
  const pcar::EvalReport report = pcar::evaluate(*m.model, data, a.split, m.config);
  std::cout << pcar::report_json(report) << '\n';
  return kOk;
}

int run_pose(const VisualArgs& a) {
  LoadedModel m = load_model(a.checkpoint, "");
  const pcar::VideoRecord video = pcar::load_video(a.video);
  const int n = pcar::write_pose_overlays(*m.model, video, m.config, a.out);
  std::cout << n << " pose overlays written to " << a.out << '\n';
  return kOk;
}

int run_cam(const VisualArgs& a) {
  LoadedModel m = load_model(a.checkpoint, "");
  const int n_classes = m.config.model.num_classes;
  if (a.class_id < 0 || a.class_id >= n_classes) {
    std::cerr << "error: --class " << a.class_id << " out of range, valid classes are 0.." << n_classes - 1 << '\n';
    return kRuntimeError;
  }
  const pcar::VideoRecord video = pcar::load_video(a.video);
  const int n = pcar::write_cam_overlays(*m.model, video, m.config, a.class_id, a.out);
  std::cout << n << " CAM overlays written to " << a.out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Person-centric video action recognition: synthetic data, training, evaluation, visualization"};
  app.require_subcommand(1, 1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic stick-figure video dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--num-videos", gen.num_videos, "Number of videos")->capture_default_str();
  gen_cmd->add_option("--classes", gen.classes, "Number of action classes (2-4)")->capture_default_str();
  gen_cmd->add_option("--frames", gen.frames, "Frames per video")->capture_default_str();
  gen_cmd->add_option("--bias", gen.bias, "Background bias: none, scene or scene_swapped")->capture_default_str();
  gen_cmd->add_option("--split", gen.split, "Split name recorded in the manifest")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints and a metric log");
  train_cmd->add_option("--config", train.config, "Training config (key = value)")->required();
  train_cmd->add_option("--data", train.data, "Dataset directory or manifest")->required();
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--mode", train.mode,
                        "Comma-separated overrides: person_crop, random_crop, rgb_only, rgb_pose, rgb_pose_cnn, "
                        "joint, pose_cnn_only");
  train_cmd->add_flag("--resume", train.resume, "Continue from the latest checkpoint in --out");
  train_cmd->add_option("--seed", train.seed, "Override the config seed");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and print a JSON report");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory or manifest")->required();
  eval_cmd->add_option("--split", eval.split, "Split to evaluate")->capture_default_str();
  eval_cmd->add_option("--config", eval.config, "Config to build the model from (default: the checkpoint's)");

  VisualArgs pose;
  auto* pose_cmd = app.add_subcommand("pose", "Write per-frame skeleton overlays for one video");
  pose_cmd->add_option("--checkpoint", pose.checkpoint, "Checkpoint directory")->required();
  pose_cmd->add_option("--video", pose.video, "Video directory")->required();
  pose_cmd->add_option("--out", pose.out, "Output directory")->required();

  VisualArgs cam;
  auto* cam_cmd = app.add_subcommand("cam", "Write per-frame class activation map overlays for one video");
  cam_cmd->add_option("--checkpoint", cam.checkpoint, "Checkpoint directory")->required();
  cam_cmd->add_option("--video", cam.video, "Video directory")->required();
  cam_cmd->add_option("--class", cam.class_id, "Class to visualize")->required();
  cam_cmd->add_option("--out", cam.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(train);
    if (*eval_cmd) return run_eval(eval);
    if (*pose_cmd) return run_pose(pose);
    if (*cam_cmd) return run_cam(cam);
  } catch (const pcar::CheckpointMismatch& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << '\n';
    return kCheckpointMismatch;
  } catch (const pcar::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kRuntimeError;
}
