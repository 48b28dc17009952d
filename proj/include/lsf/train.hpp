#pragma once

// Training modes, incremental schedule, prediction and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#if defined(__SSE2__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

#include "lsf/data.hpp"
#include "lsf/error.hpp"
#include "lsf/hash.hpp"
#include "lsf/labelspace.hpp"
#include "lsf/model.hpp"
#include "lsf/rng.hpp"

namespace lsf {

enum class TrainMode { Individual, Multichannel, LabelSharing, LabelSharingIL };

inline const char* to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Individual: return "individual";
    case TrainMode::Multichannel: return "multichannel";
    case TrainMode::LabelSharing: return "label_sharing";
    case TrainMode::LabelSharingIL: return "label_sharing_il";
  }
  return "individual";
}

inline TrainMode parse_train_mode(const std::string& text) {
  if (text == "individual") return TrainMode::Individual;
  if (text == "multichannel") return TrainMode::Multichannel;
  if (text == "label_sharing") return TrainMode::LabelSharing;
  if (text == "label_sharing_il") return TrainMode::LabelSharingIL;
  throw Error(Errc::InvalidConfig, "unknown mode '" + text + "'");
}

enum class MissingChannelPolicy { ExcludeFromLoss, TreatAsBackground };

struct TrainConfig {
  TrainMode mode = TrainMode::LabelSharing;
  int epochs = 100;
  int il_finetune_epochs = 30;
  int il_combined_epochs = 70;
  int batch_size = 8;
  double learning_rate = 1e-3;
  double il_combined_learning_rate = 0.0;  // 0 reuses learning_rate
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  MissingChannelPolicy missing_channel_policy = MissingChannelPolicy::ExcludeFromLoss;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0 || il_finetune_epochs < 0 || il_combined_epochs < 0) {
      throw Error(Errc::InvalidConfig, "epoch counts must be non-negative");
    }
    if (!(learning_rate > 0.0)) throw Error(Errc::InvalidConfig, "learning rate must be positive");
    if (il_combined_learning_rate < 0.0) throw Error(Errc::InvalidConfig, "IL learning rate must be non-negative");
    if (batch_size < 1) throw Error(Errc::InvalidConfig, "batch size must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"epochs", c.epochs},
          {"il_finetune_epochs", c.il_finetune_epochs},
          {"il_combined_epochs", c.il_combined_epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"il_combined_learning_rate", c.il_combined_learning_rate},
          {"adam", {c.beta1, c.beta2, c.epsilon}},
          {"missing_channel_policy",
           c.missing_channel_policy == MissingChannelPolicy::ExcludeFromLoss ? "exclude_from_loss"
                                                                              : "treat_as_background"},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  c.il_finetune_epochs = j.value("il_finetune_epochs", c.il_finetune_epochs);
  c.il_combined_epochs = j.value("il_combined_epochs", c.il_combined_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.il_combined_learning_rate = j.value("il_combined_learning_rate", c.il_combined_learning_rate);
  if (j.contains("adam")) {
    c.beta1 = j.at("adam").at(0).get<double>();
    c.beta2 = j.at("adam").at(1).get<double>();
    c.epsilon = j.at("adam").at(2).get<double>();
  }
  if (j.contains("missing_channel_policy")) {
    const auto p = j.at("missing_channel_policy").get<std::string>();
    if (p == "exclude_from_loss") {
      c.missing_channel_policy = MissingChannelPolicy::ExcludeFromLoss;
    } else if (p == "treat_as_background") {
      c.missing_channel_policy = MissingChannelPolicy::TreatAsBackground;
    } else {
      throw Error(Errc::InvalidConfig, "unknown missing_channel_policy '" + p + "'");
    }
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---------------------------------------------------------------------------
// Channel layouts

/// How task-local labels map onto model output channels. Channel 0 is background.
struct ChannelLayout {
  TrainMode mode = TrainMode::LabelSharing;
  int channels = 2;
  std::map<TaskId, std::map<int, int>> task_maps;  // task -> (local -> channel)
  std::string fingerprint;

  bool has_task(const TaskId& task) const { return task_maps.count(task) != 0; }

  const std::map<int, int>& task_map(const TaskId& task) const {
    auto it = task_maps.find(task);
    if (it == task_maps.end()) throw Error(Errc::UnknownTask, "task '" + task + "' is not part of this model");
    return it->second;
  }

  std::map<int, int> inverse(const TaskId& task) const {
    std::map<int, int> out;
    for (const auto& [local, channel] : task_map(task)) out[channel] = local;
    return out;
  }

  std::vector<TaskId> tasks() const {
    std::vector<TaskId> out;
    for (const auto& [task, map] : task_maps) out.push_back(task);
    return out;
  }

  friend bool operator==(const ChannelLayout&, const ChannelLayout&) = default;
};

inline nlohmann::json to_json(const ChannelLayout& layout) {
  nlohmann::json maps = nlohmann::json::object();
  for (const auto& [task, map] : layout.task_maps) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [local, channel] : map) m[std::to_string(local)] = channel;
    maps[task] = m;
  }
  return {{"mode", to_string(layout.mode)},
          {"channels", layout.channels},
          {"task_maps", maps},
          {"fingerprint", layout.fingerprint}};
}

inline ChannelLayout channel_layout_from_json(const nlohmann::json& j) {
  ChannelLayout layout;
  layout.mode = parse_train_mode(j.at("mode").get<std::string>());
  layout.channels = j.at("channels").get<int>();
  for (const auto& [task, m] : j.at("task_maps").items()) {
    for (const auto& [local, channel] : m.items()) layout.task_maps[task][std::stoi(local)] = channel.get<int>();
  }
  layout.fingerprint = j.at("fingerprint").get<std::string>();
  return layout;
}

namespace detail {
inline std::string layout_fingerprint(const ChannelLayout& layout) {
  ChannelLayout copy = layout;
  copy.fingerprint.clear();
  return fingerprint_of(to_json(copy).dump());
}
}  // namespace detail

/// Label-sharing head: C = n_star + 1, channel k is shared label k.
inline ChannelLayout label_sharing_layout(const SharedLabelSpace& space) {
  ChannelLayout layout{TrainMode::LabelSharing, space.n_star + 1, space.task_maps, space_fingerprint(space)};
  return layout;
}

/// Multichannel head: tasks in ascending id order occupy consecutive channel blocks.
inline ChannelLayout multichannel_layout(const std::map<TaskId, std::vector<int>>& task_labels) {
  ChannelLayout layout{TrainMode::Multichannel, 1, {}, {}};
  for (const auto& [task, labels] : task_labels) {
    for (int local : labels) layout.task_maps[task][local] = layout.channels++;
  }
  layout.fingerprint = detail::layout_fingerprint(layout);
  return layout;
}

/// Dedicated head for one task: C = n_i + 1, channel = local label.
inline ChannelLayout individual_layout(const TaskId& task, const std::vector<int>& labels) {
  ChannelLayout layout{TrainMode::Individual, 1, {}, {}};
  for (int local : labels) {
    layout.task_maps[task][local] = local;
    layout.channels = std::max(layout.channels, local + 1);
  }
  layout.fingerprint = detail::layout_fingerprint(layout);
  return layout;
}

inline std::vector<int> labels_of(const Dataset& dataset) {
  std::vector<int> out;
  for (const auto& [index, name] : dataset.label_names) out.push_back(index);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct TrainingPhase {
  std::string name;
  std::vector<double> epoch_losses;

  friend bool operator==(const TrainingPhase&, const TrainingPhase&) = default;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ChannelLayout layout;
  std::vector<double> weights;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  std::uint64_t adam_step = 0;
  int epoch = 0;
  std::vector<TrainingPhase> history;

  const std::string& fingerprint() const noexcept { return layout.fingerprint; }

  const TrainingPhase* phase(const std::string& name) const {
    for (const auto& p : history) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[9] = "LSCKPT01";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(out, bits);
}
inline double get_f64(const unsigned char* p) {
  const std::uint64_t bits = get_u64(p);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}
inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

/// Binary form: magic, u64 header length, JSON header, three f64 blocks
/// (weights, first moments, second moments), CRC-32 of everything before it.
/// All integers and floats little-endian.
inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& p : ckpt.history) history.push_back({{"phase", p.name}, {"epoch_losses", p.epoch_losses}});
  const nlohmann::json header = {{"model", to_json(ckpt.model)},
                                 {"train", to_json(ckpt.train)},
                                 {"layout", to_json(ckpt.layout)},
                                 {"fingerprint", ckpt.layout.fingerprint},
                                 {"parameter_count", ckpt.weights.size()},
                                 {"adam_step", ckpt.adam_step},
                                 {"epoch", ckpt.epoch},
                                 {"history", history}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, text.size());
  out += text;
  for (const auto* block : {&ckpt.weights, &ckpt.adam_m, &ckpt.adam_v}) {
    for (double d : *block) detail::put_f64(out, d);
  }
  detail::put_u32(out, detail::crc32_of(out));
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw Error(Errc::VersionMismatch, "not an LSCKPT01 checkpoint");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 + 8 + 4) throw Error(Errc::CorruptPayload, "checkpoint is truncated");
  const std::uint64_t header_len = detail::get_u64(p + 8);
  if (header_len > bytes.size() - 20) throw Error(Errc::CorruptPayload, "checkpoint header is truncated");
  const std::size_t body_end = bytes.size() - 4;
  std::uint32_t crc = 0;
  for (int i = 3; i >= 0; --i) crc = (crc << 8) | p[body_end + static_cast<std::size_t>(i)];
  if (crc != detail::crc32_of(bytes.substr(0, body_end))) throw Error(Errc::CorruptPayload, "checksum mismatch");

  Checkpoint ckpt;
  std::size_t params = 0;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
    ckpt.model = model_config_from_json(header.at("model"));
    ckpt.train = train_config_from_json(header.at("train"));
    ckpt.layout = channel_layout_from_json(header.at("layout"));
    params = header.at("parameter_count").get<std::size_t>();
    ckpt.adam_step = header.at("adam_step").get<std::uint64_t>();
    ckpt.epoch = header.at("epoch").get<int>();
    for (const auto& p : header.at("history")) {
      ckpt.history.push_back({p.at("phase").get<std::string>(), p.at("epoch_losses").get<std::vector<double>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CorruptPayload, std::string("checkpoint header: ") + e.what());
  }
  if (params != parameter_count(ckpt.model)) {
    throw Error(Errc::CorruptPayload, "weight count does not match the model configuration");
  }
  const std::size_t payload = body_end - 16 - header_len;
  if (payload != 3 * params * 8) throw Error(Errc::CorruptPayload, "payload size does not match the weight count");
  const unsigned char* q = p + 16 + header_len;
  for (auto* block : {&ckpt.weights, &ckpt.adam_m, &ckpt.adam_v}) {
    block->resize(params);
    for (auto& d : *block) {
      d = detail::get_f64(q);
      q += 8;
    }
  }
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_text_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_text(path));
}

// ---------------------------------------------------------------------------
// Training

/// Precision used for training and inference. Gradient checks instantiate the
/// network with double directly.
using Real = float;

/// Standardize to zero mean and unit variance.
template <typename T>
std::vector<T> standardize(const Image& image) {
  double mean = 0.0;
  for (double v : image) mean += v;
  mean /= static_cast<double>(image.size());
  double var = 0.0;
  for (double v : image) var += (v - mean) * (v - mean);
  var /= static_cast<double>(image.size());
  const double inv = 1.0 / std::sqrt(var + 1e-12);
  std::vector<T> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = static_cast<T>((image.data()[i] - mean) * inv);
  return out;
}

struct TrainingExample {
  std::vector<Real> image;
  std::vector<std::uint16_t> target;  // channel index per pixel
  std::vector<char> channel_mask;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Bring samples into channel space. Label-sharing layouts expect shared-domain
/// masks (values are channels already); the other layouts expect task-local masks.
inline std::vector<TrainingExample> make_training_set(const std::vector<Sample>& samples, const ChannelLayout& layout,
                                                      MissingChannelPolicy policy) {
  const bool shared = layout.mode == TrainMode::LabelSharing || layout.mode == TrainMode::LabelSharingIL;
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const LabelDomain expected = shared ? LabelDomain::Shared : LabelDomain::TaskLocal;
    if (s.label_domain != expected) {
      throw Error(Errc::DomainMismatch, std::string("mode ") + to_string(layout.mode) + " expects " +
                                            (shared ? "shared" : "task-local") + " masks");
    }
    const auto& map = layout.task_map(s.task_id);
    TrainingExample ex;
    ex.height = s.image.rows();
    ex.width = s.image.cols();
    ex.image = standardize<Real>(s.image);
    ex.target.resize(s.mask.size());
    ex.channel_mask.assign(static_cast<std::size_t>(layout.channels), 0);
    std::vector<int> lut(1, 0);
    for (const auto& [local, channel] : map) {
      const auto key = static_cast<std::size_t>(shared ? channel : local);
      if (key >= lut.size()) lut.resize(key + 1, -1);
      lut[key] = channel;
      ex.channel_mask[static_cast<std::size_t>(channel)] = 1;
    }
    if (policy == MissingChannelPolicy::TreatAsBackground) {
      std::fill(ex.channel_mask.begin() + 1, ex.channel_mask.end(), 1);
    }
    for (std::size_t i = 0; i < s.mask.size(); ++i) {
      const std::uint16_t v = s.mask.data()[i];
      const int channel = v < lut.size() ? lut[v] : -1;
      if (channel < 0) {
        throw Error(Errc::OutOfRangeLabel, "label " + std::to_string(v) + " has no channel for task '" +
                                               s.task_id + "'");
      }
      ex.target[i] = static_cast<std::uint16_t>(channel);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

/// Mutable training state: network, optimizer and history. Runs epochs of
/// mini-batch soft-Dice optimization over a seeded shuffle.
namespace detail {

// Sets FTZ and DAZ for the guard's lifetime; a no-op without SSE.
class FlushDenormals {
 public:
  FlushDenormals() {
#if defined(__SSE2__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040u);
#endif
  }
  ~FlushDenormals() {
#if defined(__SSE2__)
    _mm_setcsr(saved_);
#endif
  }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

}  // namespace detail

class Trainer {
 public:
  Trainer(const ModelConfig& model_config, const TrainConfig& train_config, ChannelLayout layout)
      : model_config_(model_config), train_config_(train_config), layout_(std::move(layout)), net_(model_config) {
    train_config_.validate();
    if (model_config.out_channels != layout_.channels) {
      throw Error(Errc::InvalidConfig, "model has " + std::to_string(model_config.out_channels) +
                                           " output channels but the layout needs " + std::to_string(layout_.channels));
    }
    configure_optimizer(train_config_.learning_rate);
  }

  explicit Trainer(const Checkpoint& ckpt)
      : model_config_(ckpt.model), train_config_(ckpt.train), layout_(ckpt.layout), net_(ckpt.model) {
    auto params = net_.parameters();
    std::transform(ckpt.weights.begin(), ckpt.weights.end(), params.begin(), [](double d) { return static_cast<Real>(d); });
    configure_optimizer(train_config_.learning_rate);
    adam_.step = ckpt.adam_step;
    if (ckpt.adam_step > 0) {
      adam_.m.assign(ckpt.adam_m.begin(), ckpt.adam_m.end());
      adam_.v.assign(ckpt.adam_v.begin(), ckpt.adam_v.end());
    }
    epoch_ = ckpt.epoch;
    history_ = ckpt.history;
  }

  Network<Real>& network() noexcept { return net_; }
  const ChannelLayout& layout() const noexcept { return layout_; }

  void set_layout(ChannelLayout layout) {
    if (layout.channels != layout_.channels) {
      throw Error(Errc::InvalidConfig, "layout change would alter the number of output channels");
    }
    layout_ = std::move(layout);
  }

  void configure_optimizer(double learning_rate) {
    adam_.learning_rate = learning_rate;
    adam_.beta1 = train_config_.beta1;
    adam_.beta2 = train_config_.beta2;
    adam_.epsilon = train_config_.epsilon;
  }

  /// Mean soft-Dice loss of one sample without touching any state.
  double sample_loss(const TrainingExample& ex) {
    const auto probs = net_.forward(ex.image, ex.height, ex.width);
    const auto onehot = one_hot(ex);
    std::vector<Real> grad(probs.size());
    return soft_dice_loss<Real>(probs, onehot, static_cast<std::size_t>(layout_.channels), ex.channel_mask, grad);
  }

  /// Run `epochs` epochs over `data`, appending per-epoch mean losses to phase `phase`.
  void run(const std::vector<TrainingExample>& data, int epochs, const std::string& phase) {
    if (epochs > 0 && data.empty()) throw Error(Errc::EmptyDataset, "no training samples");
    TrainingPhase record{phase, {}};
    const detail::FlushDenormals flush;
    std::vector<Real> grads(net_.parameter_count());
    std::vector<Real> dprobs;
    std::vector<std::size_t> order(data.size());
    const auto batch = static_cast<std::size_t>(train_config_.batch_size);
    for (int e = 0; e < epochs; ++e) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(derive_seed(train_config_.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch_)));
      rng.shuffle(std::span<std::size_t>(order));
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t end = std::min(order.size(), start + batch);
        std::fill(grads.begin(), grads.end(), Real(0));
        for (std::size_t b = start; b < end; ++b) {
          const TrainingExample& ex = data[order[b]];
          const auto probs = net_.forward(ex.image, ex.height, ex.width);
          const auto onehot = one_hot(ex);
          dprobs.resize(probs.size());
          loss_sum += soft_dice_loss<Real>(probs, onehot, static_cast<std::size_t>(layout_.channels), ex.channel_mask,
                                           dprobs);
          net_.backward(dprobs, grads);
        }
        const Real inv = Real(1) / static_cast<Real>(end - start);
        for (auto& g : grads) g *= inv;
        adam_.step_update(net_.parameters(), grads);
      }
      record.epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
      ++epoch_;
    }
    history_.push_back(std::move(record));
  }

  Checkpoint checkpoint() const {
    Checkpoint ckpt;
    ckpt.model = model_config_;
    ckpt.train = train_config_;
    ckpt.layout = layout_;
    const auto params = net_.parameters();
    ckpt.weights.assign(params.begin(), params.end());
    ckpt.adam_m.assign(adam_.m.begin(), adam_.m.end());
    ckpt.adam_v.assign(adam_.v.begin(), adam_.v.end());
    if (ckpt.adam_m.empty()) {
      ckpt.adam_m.assign(params.size(), 0.0);
      ckpt.adam_v.assign(params.size(), 0.0);
    }
    ckpt.adam_step = adam_.step;
    ckpt.epoch = epoch_;
    ckpt.history = history_;
    return ckpt;
  }

 private:
  std::vector<Real> one_hot(const TrainingExample& ex) const {
    const std::size_t n = ex.target.size();
    std::vector<Real> out(static_cast<std::size_t>(layout_.channels) * n, Real(0));
    for (std::size_t i = 0; i < n; ++i) out[ex.target[i] * n + i] = Real(1);
    return out;
  }

  ModelConfig model_config_;
  TrainConfig train_config_;
  ChannelLayout layout_;
  Network<Real> net_;
  Adam<Real> adam_;
  int epoch_ = 0;
  std::vector<TrainingPhase> history_;
};

/// Train a fresh model on `data` for config.epochs epochs. For label-sharing the
/// samples must already be in the shared domain (see merge_datasets).
inline Checkpoint train(const TrainConfig& config, const ModelConfig& model_config, const std::vector<Sample>& data,
                        const ChannelLayout& layout) {
  if (data.empty()) throw Error(Errc::EmptyDataset, "no training samples");
  Trainer trainer(model_config, config, layout);
  trainer.run(make_training_set(data, layout, config.missing_channel_policy), config.epochs, "train");
  return trainer.checkpoint();
}

/// Incremental addition of new task(s) to a trained label-sharing model without
/// changing its head: fine-tune on the new task only, then train on the union.
/// `space_after` must already contain the new task (see assign_task); `table`
/// provides the sizes needed to recover the space the base model was trained on.
inline Checkpoint train_incremental(const Checkpoint& base, const std::vector<Sample>& new_task_data,
                                    const std::vector<Sample>& old_data, const SharedLabelSpace& space_after,
                                    const SizeTable& table, const TrainConfig& config) {
  config.validate();
  std::set<TaskId> old_tasks;
  for (const auto& [task, map] : base.layout.task_maps) old_tasks.insert(task);
  for (const auto& task : old_tasks) {
    if (!space_after.has_task(task)) throw Error(Errc::FingerprintMismatch, "space no longer contains '" + task + "'");
  }
  const SharedLabelSpace before = restrict_space(space_after, old_tasks, table);
  if (space_fingerprint(before) != base.layout.fingerprint) {
    throw Error(Errc::FingerprintMismatch, "base checkpoint was not trained on the pre-addition label space");
  }
  for (const auto& [task, map] : space_after.task_maps) {
    if (static_cast<int>(map.size()) > base.model.out_channels - 1) {
      throw Error(Errc::TaskTooLarge, "task '" + task + "' needs more channels than the model provides");
    }
  }
  if (new_task_data.empty()) throw Error(Errc::EmptyDataset, "no samples for the new task");

  ChannelLayout layout = label_sharing_layout(space_after);
  layout.mode = TrainMode::LabelSharingIL;
  Trainer trainer(base);
  trainer.set_layout(layout);
  auto fresh = make_training_set(new_task_data, layout, config.missing_channel_policy);
  trainer.run(fresh, config.il_finetune_epochs, "il_finetune");

  auto combined = make_training_set(old_data, layout, config.missing_channel_policy);
  combined.insert(combined.end(), std::make_move_iterator(fresh.begin()), std::make_move_iterator(fresh.end()));
  if (config.il_combined_learning_rate > 0.0) trainer.configure_optimizer(config.il_combined_learning_rate);
  trainer.run(combined, config.il_combined_epochs, "il_combined");

  Checkpoint out = trainer.checkpoint();
  out.train.mode = TrainMode::LabelSharingIL;
  out.train.il_finetune_epochs = config.il_finetune_epochs;
  out.train.il_combined_epochs = config.il_combined_epochs;
  out.train.il_combined_learning_rate = config.il_combined_learning_rate;
  return out;
}

// ---------------------------------------------------------------------------
// Prediction

/// Network restored from checkpoint weights.
inline Network<Real> network_from(const Checkpoint& ckpt) {
  Network<Real> net(ckpt.model);
  auto params = net.parameters();
  if (params.size() != ckpt.weights.size()) throw Error(Errc::CorruptPayload, "weight count mismatch");
  std::transform(ckpt.weights.begin(), ckpt.weights.end(), params.begin(), [](double d) { return static_cast<Real>(d); });
  return net;
}

/// Per-pixel argmax over channels; ties go to the lowest channel.
template <typename T>
Mask argmax_channels(std::span<const T> probs, std::size_t channels, std::size_t height, std::size_t width) {
  Mask out(height, width);
  const std::size_t n = height * width;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < channels; ++c) {
      if (probs[c * n + i] > probs[best * n + i]) best = c;
    }
    out.data()[i] = static_cast<std::uint16_t>(best);
  }
  return out;
}

/// Segment one image. The network only ever sees the image; `task` is used solely
/// to relabel channel indices into that task's local labels afterwards (channels
/// without a member of the task become background).
inline Mask predict(Network<Real>& net, const Image& image, const ChannelLayout& layout,
                    const std::optional<TaskId>& task = std::nullopt) {
  const auto probs = net.forward(standardize<Real>(image), image.rows(), image.cols());
  Mask channels = argmax_channels<Real>(probs, static_cast<std::size_t>(layout.channels), image.rows(), image.cols());
  if (!task) return channels;
  return relabel(channels, layout.inverse(*task));
}

inline Mask predict(Network<Real>& net, const Image& image, const SharedLabelSpace& space,
                    const std::optional<TaskId>& task = std::nullopt) {
  return predict(net, image, label_sharing_layout(space), task);
}

}  // namespace lsf
