#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "pcar/trainer.hpp"

namespace pcar {

std::string crop_mode_name(CropMode mode) { return mode == CropMode::kPerson ? "person" : "random"; }
std::string stage_name(TrainStage stage) { return stage == TrainStage::kJoint ? "joint" : "pose_cnn_only"; }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("'" + v + "' is not a number");
  }
  if (used != v.size() || !std::isfinite(out)) throw ConfigError("'" + v + "' is not a number");
  return out;
}

template <typename Int>
Int to_int(const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("'" + v + "' is not an integer");
  return out;
}

std::vector<int> to_ints(const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int<int>(trim(item)));
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + v + "' is not a boolean");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Entry {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define REAL(name, field) \
  Entry { name, [](TrainConfig& c, const std::string& v) { c.field = to_double(v); }, [](const TrainConfig& c) { return fmt(c.field); } }
#define INT(name, field)                                                                       \
  Entry {                                                                                      \
    name, [](TrainConfig& c, const std::string& v) { c.field = to_int<decltype(c.field)>(v); }, \
        [](const TrainConfig& c) { return std::to_string(c.field); }                           \
  }
#define INTS(name, field) \
  Entry { name, [](TrainConfig& c, const std::string& v) { c.field = to_ints(v); }, [](const TrainConfig& c) { return fmt(c.field); } }
#define BOOL(name, field)                                                     \
  Entry {                                                                     \
    name, [](TrainConfig& c, const std::string& v) { c.field = to_bool(v); }, \
        [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); } \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      REAL("lambda_rgb", lambda.rgb),
      REAL("lambda_pose", lambda.pose),
      REAL("lambda_paction", lambda.paction),
      REAL("lr", lr),
      INTS("milestones", milestones),
      REAL("lr_decay", lr_decay),
      REAL("momentum", momentum),
      REAL("weight_decay", weight_decay),
      REAL("grad_clip", grad_clip),
      INT("epochs", epochs),
      INT("batch_size", batch_size),
      INT("seed", seed),
      Entry{"crop_mode",
            [](TrainConfig& c, const std::string& v) {
              if (v == "person") {
                c.crop_mode = CropMode::kPerson;
              } else if (v == "random") {
                c.crop_mode = CropMode::kRandom;
              } else {
                throw ConfigError("crop_mode must be person or random, got '" + v + "'");
              }
            },
            [](const TrainConfig& c) { return crop_mode_name(c.crop_mode); }},
      Entry{"heads",
            [](TrainConfig& c, const std::string& v) {
              try {
                c.model.heads = parse_heads(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
              }
            },
            [](const TrainConfig& c) { return heads_name(c.model.heads); }},
      Entry{"train_stage",
            [](TrainConfig& c, const std::string& v) {
              if (v == "joint") {
                c.stage = TrainStage::kJoint;
              } else if (v == "pose_cnn_only") {
                c.stage = TrainStage::kPoseCnnOnly;
              } else {
                throw ConfigError("train_stage must be joint or pose_cnn_only, got '" + v + "'");
              }
            },
            [](const TrainConfig& c) { return stage_name(c.stage); }},
      Entry{"init_checkpoint", [](TrainConfig& c, const std::string& v) { c.init_checkpoint = v; },
            [](const TrainConfig& c) { return c.init_checkpoint; }},
      INT("checkpoint_every", checkpoint_every),
      INT("num_classes", model.num_classes),
      INT("clip_length", model.backbone.clip_length),
      INT("clip_stride", clip_stride),
      INT("input_size", model.backbone.input_size),
      INT("base_channels", model.backbone.base_channels),
      INT("width_divisor", model.backbone.width_divisor),
      INTS("stage_blocks", model.backbone.stage_blocks),
      INT("conv1_temporal", model.backbone.conv1_temporal),
      INTS("block_temporal", model.backbone.block_temporal),
      INT("deconv_channels", model.head.deconv_channels),
      INT("num_deconv", model.head.num_deconv),
      INTS("pose_cnn_blocks", model.pose_cnn.blocks),
      BOOL("pose_cnn_bottleneck", model.pose_cnn.bottleneck),
      INT("pose_cnn_width_divisor", model.pose_cnn.width_divisor),
      REAL("disk_radius", model.disk_radius),
      REAL("lambda_heatmap", model.pose_loss.heatmap),
      REAL("lambda_offset", model.pose_loss.offset),
      REAL("dropout", model.dropout),
      REAL("jitter_center", jitter_center),
      REAL("jitter_scale", jitter_scale),
      REAL("mirror_prob", mirror_prob),
      REAL("detection_threshold", detection_threshold),
      REAL("random_crop_min_scale", random_crop_min_scale),
      INT("test_clips", test_clips),
      INT("test_crops", test_crops),
  };
  return table;
}

#undef REAL
#undef INT
#undef INTS
#undef BOOL

}  // namespace

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
  for (const Entry& e : entries()) {
    if (key == e.key) {
      e.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

TrainConfig parse_config(std::istream& in, const std::string& source) {
  TrainConfig config;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set_config_value(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what() + (std::string(e.what()).starts_with("unknown") ? "" : " for key '" + key + "'"));
    }
  }
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return config;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_config(in, path.string());
}

std::string format_config(const TrainConfig& config) {
  std::string out;
  for (const Entry& e : entries()) out += std::string(e.key) + " = " + e.get(config) + "\n";
  return out;
}

void apply_mode_flags(TrainConfig& config, const std::string& flags) {
  std::stringstream ss(flags);
  std::string flag;
  while (std::getline(ss, flag, ',')) {
    flag = trim(flag);
    if (flag.empty()) continue;
    if (flag == "person_crop") {
      config.crop_mode = CropMode::kPerson;
    } else if (flag == "random_crop") {
      config.crop_mode = CropMode::kRandom;
    } else if (flag == "joint") {
      config.stage = TrainStage::kJoint;
    } else if (flag == "pose_cnn_only") {
      config.stage = TrainStage::kPoseCnnOnly;
    } else {
      try {
        config.model.heads = parse_heads(flag);
      } catch (const std::invalid_argument&) {
        throw ConfigError("unknown mode flag '" + flag +
                          "' (expected person_crop, random_crop, rgb_only, rgb_pose, rgb_pose_cnn, joint, pose_cnn_only)");
      }
    }
  }
}

std::vector<int> TrainConfig::effective_milestones() const {
  if (!milestones.empty()) return milestones;
  return {static_cast<int>(std::lround(epochs * 42.0 / 85.0)), static_cast<int>(std::lround(epochs * 68.0 / 85.0))};
}

void TrainConfig::validate() const {
  ModelConfig m = model;
  m.finalize();
  if (lambda.rgb < 0 || lambda.pose < 0 || lambda.paction < 0) throw std::invalid_argument("loss weights must be >= 0");
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (lr_decay <= 0 || momentum < 0 || weight_decay < 0 || grad_clip <= 0) {
    throw std::invalid_argument("lr_decay and grad_clip must be > 0, momentum and weight_decay >= 0");
  }
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  if (!std::is_sorted(milestones.begin(), milestones.end())) throw std::invalid_argument("milestones must be sorted");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  if (clip_stride < 1) throw std::invalid_argument("clip_stride must be >= 1");
  if (jitter_center < 0 || jitter_center >= 1 || jitter_scale < 0 || jitter_scale >= 1) {
    throw std::invalid_argument("jitter fractions must be in [0, 1)");
  }
  if (mirror_prob < 0 || mirror_prob > 1) throw std::invalid_argument("mirror_prob must be in [0, 1]");
  if (random_crop_min_scale <= 0 || random_crop_min_scale > 1) {
    throw std::invalid_argument("random_crop_min_scale must be in (0, 1]");
  }
  if (test_clips < 1 || (test_crops != 1 && test_crops != 3)) {
    throw std::invalid_argument("test_clips must be >= 1 and test_crops 1 or 3");
  }
  if (has_pose_cnn(model.heads) && (model.backbone.clip_length < 3)) {
    throw std::invalid_argument("the pose CNN needs clip_length >= 3");
  }
  if (stage == TrainStage::kPoseCnnOnly && (!has_pose_cnn(model.heads) || init_checkpoint.empty())) {
    throw std::invalid_argument("train_stage pose_cnn_only needs heads rgb_pose_cnn and an init_checkpoint");
  }
}

double lr_at(int epoch, const TrainConfig& config) {
  double lr = config.lr;
  for (int m : config.effective_milestones()) {
    if (m <= epoch) lr *= config.lr_decay;
  }
  return lr;
}

}  // namespace pcar
