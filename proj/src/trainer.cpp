#include "pcar/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace pcar {

namespace fs = std::filesystem;
using json = nlohmann::json;

template <typename Real>
void clip_gradients(nn::StateDict<Real>& state, double max_l1) {
  for (auto& p : state.params) {
    Tensor<Real>& g = p.param->grad;
    double l1 = 0.0;
    for (Real v : g.values()) {
      if (!std::isfinite(static_cast<double>(v))) throw std::runtime_error("non-finite gradient in " + p.name);
      l1 += std::abs(static_cast<double>(v));
    }
    if (l1 > max_l1) g *= static_cast<Real>(max_l1 / l1);
  }
}

template <typename Real>
void Sgd<Real>::step(nn::StateDict<Real>& state, double lr, const std::string& prefix) {
  const Real mu = static_cast<Real>(momentum_);
  const Real wd = static_cast<Real>(weight_decay_);
  const Real rate = static_cast<Real>(lr);
  for (auto& named : state.params) {
    if (!named.name.starts_with(prefix)) continue;
    nn::Parameter<Real>& p = *named.param;
    auto it = velocity_.find(named.name);
    if (it == velocity_.end()) it = velocity_.emplace(named.name, Tensor<Real>(p.value.shape())).first;
    Real* v = it->second.data();
    Real* w = p.value.data();
    const Real* g = p.grad.data();
    const Real decay = p.decay ? wd : Real(0);
    for (std::int64_t i = 0; i < p.value.numel(); ++i) {
      v[i] = mu * v[i] + g[i] + decay * w[i];
      w[i] -= rate * v[i];
    }
  }
}

template <typename Real>
NamedTensors<float> Sgd<Real>::export_state() const {
  NamedTensors<float> out;
  for (const auto& [name, v] : velocity_) out.emplace("optim.momentum." + name, v.template cast<float>());
  return out;
}

template <typename Real>
void Sgd<Real>::import_state(const NamedTensors<float>& tensors) {
  velocity_.clear();
  const std::string prefix = "optim.momentum.";
  for (const auto& [name, t] : tensors) {
    if (name.starts_with(prefix)) velocity_.emplace(name.substr(prefix.size()), t.template cast<Real>());
  }
}

// ---------------------------------------------------------------------------
// Samples

Box video_person_box(const VideoRecord& video, double detection_threshold, double frame_w, double frame_h) {
  const std::vector<Box> kept = filter_detections(video.boxes, detection_threshold);
  return expand_to_aspect(merge_boxes(kept, frame_w, frame_h), frame_w, frame_h);
}

CropSample sample_training_crop(const VideoRecord& video, const TrainConfig& config, Rng& rng) {
  const int T = config.clip_length();
  const int S = config.input_size();
  const int start = random_clip_start(video.num_frames(), T, config.clip_stride, rng);
  const std::vector<int> indices = sample_clip(video.num_frames(), ClipSpec{T, config.clip_stride, start});

  const cv::Mat first = read_frame(video, indices.front());
  const double W = first.cols, H = first.rows;
  Box box;
  if (config.crop_mode == CropMode::kPerson) {
    box = jitter_box(video_person_box(video, config.detection_threshold, W, H), rng, config.jitter_center,
                     config.jitter_scale, W, H);
  } else {
    box = random_square_box(W, H, config.random_crop_min_scale, rng);
  }
  const bool mirror = uniform01(rng) < config.mirror_prob;

  CropSample sample;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const cv::Mat frame = i == 0 ? first : read_frame(video, indices[i]);
    CropResult crop = crop_resize(frame, box, S, S, video.keypoints[indices[i]]);
    if (mirror) {
      crop.image = mirror_image(crop.image);
      crop.keypoints = mirror_keypoints(crop.keypoints, S);
    }
    sample.frames.push_back(std::move(crop.image));
    sample.keypoints.push_back(std::move(crop.keypoints));
  }
  return sample;
}

template <typename Real>
ModelBatch<Real> make_batch(std::span<const CropSample> samples, int clip_length, int input_size) {
  ModelBatch<Real> batch;
  batch.clips = Tensor<Real>({static_cast<int>(samples.size()), 3, clip_length, input_size, input_size});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    for (int t = 0; t < clip_length; ++t) write_frame(batch.clips, static_cast<int>(n), t, samples[n].frames.at(t));
    batch.keypoints.push_back(samples[n].keypoints);
  }
  return batch;
}

std::string metrics_json(const EpochMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  const json j{{"epoch", m.epoch},         {"lr", m.lr}, {"L_r", opt(m.rgb_loss)}, {"L_p", opt(m.pose_loss)},
               {"L_paction", opt(m.paction_loss)}, {"train_top1", m.train_top1}};
  return j.dump();
}

template <typename Real>
int count_correct(const StepOutput<Real>& out, std::span<const int> labels) {
  const Tensor<Real> p_rgb = softmax(out.rgb_logits);
  Tensor<Real> p_pose;
  if (out.pose_logits.numel() > 0) p_pose = softmax(out.pose_logits);
  const int n = p_rgb.dim(1);
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<double> fused(static_cast<std::size_t>(n));
    for (int c = 0; c < n; ++c) {
      const std::int64_t idx = static_cast<std::int64_t>(i) * n + c;
      fused[c] = p_rgb[idx] + (p_pose.numel() > 0 ? p_pose[idx] : Real(0));
    }
    if (argmax(fused) == labels[i]) ++correct;
  }
  return correct;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

template <typename Real>
void save_checkpoint(const fs::path& dir, ActionModel<Real>& model, const Sgd<Real>* optimizer,
                     const TrainConfig& config, int epoch) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  NamedTensors<float> tensors = export_state(model.state());
  if (optimizer) tensors.merge(optimizer->export_state());
  save_archive(tmp, tensors);
  write_text(tmp / "config.ini", format_config(config));
  write_text(tmp / "trainer_state.json", json{{"epoch", epoch}}.dump() + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  CheckpointInfo info;
  if (!fs::is_directory(dir)) throw std::runtime_error("checkpoint " + dir.string() + " does not exist");
  info.config = load_config(dir / "config.ini");
  const fs::path state_path = dir / "trainer_state.json";
  std::ifstream in(state_path);
  if (!in) throw std::runtime_error("cannot open " + state_path.string());
  try {
    info.epoch = json::parse(in).at("epoch").get<int>();
  } catch (const json::exception& e) {
    throw std::runtime_error(state_path.string() + ": " + e.what());
  }
  return info;
}

template <typename Real>
void load_checkpoint(const fs::path& dir, ActionModel<Real>& model, Sgd<Real>* optimizer) {
  const NamedTensors<float> tensors = load_archive(dir);
  import_state(model.state(), tensors);
  if (optimizer) optimizer->import_state(tensors);
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string epoch_dir_name(int epoch) {
  std::ostringstream os;
  os << "epoch_" << std::setw(4) << std::setfill('0') << epoch;
  return os.str();
}

// Fisher-Yates with the portable integer draw, so orderings match across
// standard libraries.
std::vector<int> shuffled(int n, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_int(rng, 0, i)]);
  return order;
}

struct ResumePoint {
  fs::path dir;
  int epoch = 0;
};

std::optional<ResumePoint> latest_checkpoint(const fs::path& out_dir) {
  std::optional<ResumePoint> best;
  if (!fs::is_directory(out_dir)) return best;
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.ends_with(".tmp")) continue;
    if (!name.starts_with("epoch_") && name != "final") continue;
    if (!fs::exists(entry.path() / "trainer_state.json")) continue;
    const int epoch = read_checkpoint_info(entry.path()).epoch;
    if (!best || epoch > best->epoch) best = ResumePoint{entry.path(), epoch};
  }
  return best;
}

}  // namespace

FitResult fit(const Dataset& dataset, const TrainConfig& config, const fs::path& out_dir, const FitOptions& options) {
  config.validate();
  const std::vector<const VideoRecord*> videos = dataset.split("train");
  if (videos.empty()) throw std::runtime_error("dataset " + dataset.root.string() + " has no train videos");
  for (const VideoRecord* v : videos) {
    if (v->label >= config.model.num_classes) {
      throw std::runtime_error(v->dir.string() + ": label " + std::to_string(v->label) + " exceeds num_classes " +
                               std::to_string(config.model.num_classes));
    }
  }
  fs::create_directories(out_dir);

  ActionModel<float> model(config.model);
  Rng init_rng = make_rng(config.seed, {0});
  model.init(init_rng);
  Sgd<float> optimizer(config.momentum, config.weight_decay);
  const bool cnn_only = config.stage == TrainStage::kPoseCnnOnly;
  if (cnn_only) import_state(model.state(), load_archive(config.init_checkpoint), true);

  FitResult result;
  int first_epoch = 0;
  const fs::path log_path = out_dir / "train_log.jsonl";
  if (options.resume) {
    if (const auto point = latest_checkpoint(out_dir)) {
      load_checkpoint(point->dir, model, &optimizer);
      first_epoch = point->epoch;
      std::ifstream in(log_path);
      std::string line;
      std::vector<std::string> kept;
      while (static_cast<int>(kept.size()) < first_epoch && std::getline(in, line)) kept.push_back(line);
      in.close();
      std::ofstream out(log_path, std::ios::trunc);
      for (const auto& l : kept) out << l << '\n';
      if (options.progress) *options.progress << "resuming from " << point->dir.string() << '\n';
    }
  }
  if (first_epoch == 0) std::ofstream(log_path, std::ios::trunc);

  const std::vector<int> milestones = config.effective_milestones();
  const bool wants_keypoints = has_pose_head(config.model.heads) && !cnn_only;
  const StepOptions step_options{nn::Phase::kTrain, true, cnn_only};
  const std::string trainable = cnn_only ? "pose_cnn." : "";

  for (int epoch = first_epoch; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    Rng data_rng = make_rng(config.seed, {1, static_cast<std::uint64_t>(epoch)});
    Rng dropout_rng = make_rng(config.seed, {2, static_cast<std::uint64_t>(epoch)});
    const std::vector<int> order = shuffled(static_cast<int>(videos.size()), data_rng);

    double sum_rgb = 0, sum_pose = 0, sum_paction = 0;
    int seen = 0, correct = 0;
    bool any_pose = false, any_paction = false;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(config.batch_size));
      std::vector<CropSample> samples;
      std::vector<int> labels;
      for (std::size_t i = b; i < end; ++i) {
        const VideoRecord& v = *videos[order[i]];
        samples.push_back(sample_training_crop(v, config, data_rng));
        labels.push_back(v.label);
      }
      ModelBatch<float> batch = make_batch<float>(samples, config.clip_length(), config.input_size());
      batch.labels = labels;
      if (!wants_keypoints) batch.keypoints.clear();

      model.zero_grad();
      const StepOutput<float> out = forward_backward(model, batch, config.lambda, step_options, &dropout_rng);
      clip_gradients(model.state(), config.grad_clip);
      optimizer.step(model.state(), lr, trainable);

      const int n = static_cast<int>(labels.size());
      seen += n;
      correct += count_correct(out, labels);
      if (out.components.rgb) sum_rgb += *out.components.rgb * n;
      if (out.components.pose) {
        any_pose = true;
        sum_pose += *out.components.pose * n;
      }
      if (out.components.paction) {
        any_paction = true;
        sum_paction += *out.components.paction * n;
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    if (!cnn_only) m.rgb_loss = sum_rgb / seen;
    if (any_pose) m.pose_loss = sum_pose / seen;
    if (any_paction) m.paction_loss = sum_paction / seen;
    m.train_top1 = static_cast<double>(correct) / seen;
    result.log.push_back(m);
    {
      std::ofstream log(log_path, std::ios::app);
      log << metrics_json(m) << '\n';
      if (!log) throw std::runtime_error("cannot append to " + log_path.string());
    }
    if (options.progress) *options.progress << metrics_json(m) << std::endl;

    const int done = epoch + 1;
    const bool at_milestone = std::find(milestones.begin(), milestones.end(), done) != milestones.end();
    const bool periodic = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
    if ((at_milestone || periodic) && done < config.epochs) {
      save_checkpoint(out_dir / epoch_dir_name(done), model, &optimizer, config, done);
    }
  }
  result.final_checkpoint = out_dir / "final";
  save_checkpoint(result.final_checkpoint, model, &optimizer, config, config.epochs);
  return result;
}

template void clip_gradients<float>(nn::StateDict<float>&, double);
template void clip_gradients<double>(nn::StateDict<double>&, double);
template class Sgd<float>;
template class Sgd<double>;
template ModelBatch<float> make_batch<float>(std::span<const CropSample>, int, int);
template ModelBatch<double> make_batch<double>(std::span<const CropSample>, int, int);
template int count_correct<float>(const StepOutput<float>&, std::span<const int>);
template int count_correct<double>(const StepOutput<double>&, std::span<const int>);
template void save_checkpoint<float>(const fs::path&, ActionModel<float>&, const Sgd<float>*, const TrainConfig&, int);
template void save_checkpoint<double>(const fs::path&, ActionModel<double>&, const Sgd<double>*, const TrainConfig&,
                                      int);
template void load_checkpoint<float>(const fs::path&, ActionModel<float>&, Sgd<float>*);
template void load_checkpoint<double>(const fs::path&, ActionModel<double>&, Sgd<double>*);

}  // namespace pcar
