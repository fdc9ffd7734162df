#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcar/archive.hpp"
#include "pcar/model.hpp"
#include "pcar/synthdata.hpp"

namespace pcar {

enum class CropMode { kPerson, kRandom };
enum class TrainStage { kJoint, kPoseCnnOnly };

struct TrainConfig {
  ModelConfig model;
  LossWeights lambda;
  double lr = 0.01;
  std::vector<int> milestones;  // empty: 42/85 and 68/85 of the epochs
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 2.0;
  int epochs = 85;
  int batch_size = 8;
  std::uint64_t seed = 0;
  CropMode crop_mode = CropMode::kPerson;
  TrainStage stage = TrainStage::kJoint;
  std::string init_checkpoint;
  int checkpoint_every = 0;  // extra checkpoints every n epochs; 0 disables

  int clip_stride = 1;
  double jitter_center = 0.1;
  double jitter_scale = 0.1;
  double mirror_prob = 0.5;
  double detection_threshold = 0.99;
  double random_crop_min_scale = 0.8;
  int test_clips = 10;
  int test_crops = 3;

  int clip_length() const { return model.backbone.clip_length; }
  int input_size() const { return model.backbone.input_size; }
  std::vector<int> effective_milestones() const;
  /// Throws std::invalid_argument on the first violated constraint.
  void validate() const;
};

/// Config file error; the message names the source line or key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` text, `#` comments, lists comma separated. Unknown
/// keys and malformed values raise ConfigError.
TrainConfig parse_config(std::istream& in, const std::string& source = "config");
TrainConfig load_config(const std::filesystem::path& path);
/// Every key with its current value, readable by parse_config.
std::string format_config(const TrainConfig& config);
/// Applies one key; used for command-line overrides.
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
/// Comma-separated mode flags: person_crop, random_crop, rgb_only, rgb_pose,
/// rgb_pose_cnn, joint, pose_cnn_only.
void apply_mode_flags(TrainConfig& config, const std::string& flags);

std::string crop_mode_name(CropMode mode);
std::string stage_name(TrainStage stage);

/// base * decay^(number of milestones <= epoch)
double lr_at(int epoch, const TrainConfig& config);

/// Rescales every gradient tensor whose L1 norm exceeds max_l1 to exactly
/// max_l1. Throws std::runtime_error naming a tensor with a non-finite entry.
template <typename Real>
void clip_gradients(nn::StateDict<Real>& state, double max_l1);

/// SGD with momentum; L2 decay on parameters flagged `decay`.
/// v <- momentum * v + g + wd * w; w <- w - lr * v.
template <typename Real>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  /// Updates parameters whose name starts with `prefix`.
  void step(nn::StateDict<Real>& state, double lr, const std::string& prefix = "");

  /// Momentum buffers keyed "optim.momentum.<parameter>".
  NamedTensors<float> export_state() const;
  void import_state(const NamedTensors<float>& tensors);

 private:
  double momentum_, weight_decay_;
  std::map<std::string, Tensor<Real>> velocity_;
};

/// One training crop: clip tensor slot plus the keypoints in crop pixels.
struct CropSample {
  std::vector<cv::Mat> frames;  // CV_32FC3, input_size square
  PoseClip keypoints;
};

/// Person box used for every frame of a video: detections above the
/// threshold merged, then squared and clamped. Full frame when none pass.
Box video_person_box(const VideoRecord& video, double detection_threshold, double frame_w, double frame_h);

/// Training-time sample: random clip start, person box with jitter (or a
/// random square for CropMode::kRandom), random mirror.
CropSample sample_training_crop(const VideoRecord& video, const TrainConfig& config, Rng& rng);

template <typename Real>
ModelBatch<Real> make_batch(std::span<const CropSample> samples, int clip_length, int input_size);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  std::optional<double> rgb_loss, pose_loss, paction_loss;
  double train_top1 = 0;
};

std::string metrics_json(const EpochMetrics& m);

/// Fused (or RGB-only) top-1 on the training forward pass.
template <typename Real>
int count_correct(const StepOutput<Real>& out, std::span<const int> labels);

struct CheckpointInfo {
  TrainConfig config;
  int epoch = 0;  // completed epochs
};

template <typename Real>
void save_checkpoint(const std::filesystem::path& dir, ActionModel<Real>& model, const Sgd<Real>* optimizer,
                     const TrainConfig& config, int epoch);
/// Reads config.ini and trainer_state.json of a checkpoint directory.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
/// Loads model tensors (and momentum when `optimizer` is given). Throws
/// CheckpointMismatch when shapes disagree with the model.
template <typename Real>
void load_checkpoint(const std::filesystem::path& dir, ActionModel<Real>& model, Sgd<Real>* optimizer);

struct FitOptions {
  bool resume = false;
  std::ostream* progress = nullptr;
};

struct FitResult {
  std::vector<EpochMetrics> log;
  std::filesystem::path final_checkpoint;
};

/// Trains on the "train" split of `dataset`. Writes train_log.jsonl and
/// checkpoints (epoch_NNNN at milestones and every `checkpoint_every`
/// epochs, final at the end) into out_dir.
FitResult fit(const Dataset& dataset, const TrainConfig& config, const std::filesystem::path& out_dir,
              const FitOptions& options = {});

}  // namespace pcar
