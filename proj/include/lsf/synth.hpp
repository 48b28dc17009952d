#pragma once

// Deterministic synthetic multi-task segmentation data. Each task draws one shape per
// label on a task-specific striped background; the per-sample stream is derived from
// (seed, split, sample index) so generation is a pure function of the spec.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lsf/data.hpp"
#include "lsf/error.hpp"
#include "lsf/rng.hpp"

namespace lsf {

enum class ShapeKind { Disk, Rectangle, Ring, Cross };

inline const char* to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Disk: return "disk";
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Ring: return "ring";
    case ShapeKind::Cross: return "cross";
  }
  return "disk";
}

inline ShapeKind parse_shape_kind(const std::string& text) {
  if (text == "disk") return ShapeKind::Disk;
  if (text == "rectangle") return ShapeKind::Rectangle;
  if (text == "ring") return ShapeKind::Ring;
  if (text == "cross") return ShapeKind::Cross;
  throw Error(Errc::ParseError, "unknown shape kind '" + text + "'");
}

/// Background level, stripe texture and per-label contrast of one task.
struct IntensityProfile {
  double background = 1000.0;
  double stripe_amplitude = 100.0;
  double stripe_period = 8.0;   // pixels
  double stripe_angle = 0.0;    // degrees
  double noise_sigma = 30.0;
  std::vector<double> label_contrast;  // added to background inside each label
};

struct TaskGenSpec {
  TaskId task_id;
  int n_labels = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<std::string> label_names;
  std::vector<ShapeKind> shape_kinds;
  std::vector<double> size_scales;  // target area fraction per label, in (0, 0.5]
  IntensityProfile intensity;
  std::size_t n_train = 200;
  std::size_t n_test = 40;
  std::uint64_t seed = 0;
  double area_jitter = 0.15;  // relative, uniform
  int max_attempts = 1000;

  void validate() const {
    auto fail = [&](const std::string& what) {
      throw Error(Errc::InvalidConfig, "task spec '" + task_id + "': " + what);
    };
    if (task_id.empty()) fail("empty task id");
    if (n_labels < 1 || n_labels > 8) fail("n_labels must be in 1..8");
    const auto n = static_cast<std::size_t>(n_labels);
    if (shape_kinds.size() != n || size_scales.size() != n || intensity.label_contrast.size() != n) {
      fail("per-label vectors must have n_labels entries");
    }
    if (!label_names.empty() && label_names.size() != n) fail("label_names must have n_labels entries");
    if (height < 8 || width < 8) fail("image must be at least 8x8");
    std::set<double> distinct;
    for (double s : size_scales) {
      if (!(s > 0.0 && s <= 0.5)) fail("size scales must lie in (0, 0.5]");
      if (!distinct.insert(s).second) fail("size scales must be pairwise distinct");
    }
    if (area_jitter < 0.0 || area_jitter > 0.2) fail("area jitter must lie in [0, 0.2]");
  }

  std::string label_name(int index) const {
    return label_names.empty() ? "label_" + std::to_string(index) : label_names[static_cast<std::size_t>(index - 1)];
  }
};

namespace detail {

struct Placed {
  ShapeKind kind;
  double cx, cy;
  double a, b;  // kind-specific extents
};

inline bool inside(const Placed& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
    case ShapeKind::Disk: return dx * dx + dy * dy <= s.a * s.a;
    case ShapeKind::Rectangle: return std::abs(dx) <= s.a / 2 && std::abs(dy) <= s.b / 2;
    case ShapeKind::Ring: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= s.a * s.a && r2 >= s.b * s.b;
    }
    case ShapeKind::Cross:
      return (std::abs(dx) <= s.a / 2 && std::abs(dy) <= s.b / 2) ||
             (std::abs(dy) <= s.a / 2 && std::abs(dx) <= s.b / 2);
  }
  return false;
}

// Shape extents for a target pixel area, plus the half-size of the bounding box.
inline std::pair<Placed, std::pair<double, double>> shape_for_area(ShapeKind kind, double area, Rng& rng) {
  Placed s{kind, 0, 0, 0, 0};
  switch (kind) {
    case ShapeKind::Disk:
      s.a = std::sqrt(area / std::numbers::pi);
      return {s, {s.a, s.a}};
    case ShapeKind::Rectangle: {
      const double aspect = std::exp(rng.uniform(std::log(0.6), std::log(1.0 / 0.6)));
      s.a = std::sqrt(area * aspect);
      s.b = area / s.a;
      return {s, {s.a / 2, s.b / 2}};
    }
    case ShapeKind::Ring:
      s.a = std::sqrt(area / (0.75 * std::numbers::pi));
      s.b = 0.5 * s.a;
      return {s, {s.a, s.a}};
    case ShapeKind::Cross:
      // two bars of length L and thickness L/3: area = 5 L^2 / 9
      s.a = std::sqrt(9.0 * area / 5.0);
      s.b = s.a / 3.0;
      return {s, {s.a / 2, s.a / 2}};
  }
  return {s, {0, 0}};
}

}  // namespace detail

/// One sample of `spec`; fully determined by (spec.seed, split, index).
inline Sample generate_sample(const TaskGenSpec& spec, Split split, std::size_t index) {
  Rng rng(derive_seed(derive_seed(spec.seed, split == Split::Train ? 1 : 2), index));
  const std::size_t H = spec.height, W = spec.width;
  Sample s{Image(H, W), Mask(H, W), spec.task_id, LabelDomain::TaskLocal};

  std::vector<int> order(static_cast<std::size_t>(spec.n_labels));
  for (int i = 0; i < spec.n_labels; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return spec.size_scales[static_cast<std::size_t>(a)] > spec.size_scales[static_cast<std::size_t>(b)]; });

  // A layout attempt places every label, largest first, each with a bounded number of position draws;
  // a dead end discards the whole layout.
  constexpr int kDrawsPerLabel = 64;
  Array2D<std::uint8_t> blocked(H, W, 0);  // occupied pixels dilated by one so that shapes never touch
  auto try_layout = [&]() {
    std::fill(blocked.begin(), blocked.end(), std::uint8_t{0});
    std::fill(s.mask.begin(), s.mask.end(), std::uint16_t{0});
    for (int li : order) {
      const auto l = static_cast<std::size_t>(li);
      const double area = spec.size_scales[l] * static_cast<double>(H * W) *
                          rng.uniform(1.0 - spec.area_jitter, 1.0 + spec.area_jitter);
      bool placed = false;
      for (int draw = 0; draw < kDrawsPerLabel && !placed; ++draw) {
        auto [shape, half] = detail::shape_for_area(spec.shape_kinds[l], area, rng);
        const double lo_x = half.first + 1.0, hi_x = static_cast<double>(W) - half.first - 1.0;
        const double lo_y = half.second + 1.0, hi_y = static_cast<double>(H) - half.second - 1.0;
        if (lo_x >= hi_x || lo_y >= hi_y) continue;
        shape.cx = rng.uniform(lo_x, hi_x);
        shape.cy = rng.uniform(lo_y, hi_y);

        const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(shape.cx - half.first - 1)));
        const auto x1 = std::min(W - 1, static_cast<std::size_t>(std::ceil(shape.cx + half.first + 1)));
        const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(shape.cy - half.second - 1)));
        const auto y1 = std::min(H - 1, static_cast<std::size_t>(std::ceil(shape.cy + half.second + 1)));
        std::vector<std::pair<std::size_t, std::size_t>> pixels;
        bool clash = false;
        for (std::size_t y = y0; y <= y1 && !clash; ++y) {
          for (std::size_t x = x0; x <= x1; ++x) {
            if (!detail::inside(shape, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
            if (blocked(y, x)) {
              clash = true;
              break;
            }
            pixels.emplace_back(y, x);
          }
        }
        if (clash || pixels.empty()) continue;
        for (auto [y, x] : pixels) {
          s.mask(y, x) = static_cast<std::uint16_t>(li + 1);
          for (std::size_t yy = y > 0 ? y - 1 : 0; yy <= std::min(H - 1, y + 1); ++yy) {
            for (std::size_t xx = x > 0 ? x - 1 : 0; xx <= std::min(W - 1, x + 1); ++xx) blocked(yy, xx) = 1;
          }
        }
        placed = true;
      }
      if (!placed) return false;
    }
    return true;
  };
  bool done = false;
  for (int attempt = 0; attempt < spec.max_attempts && !done; ++attempt) done = try_layout();
  if (!done) {
    throw Error(Errc::PlacementFailure, "task '" + spec.task_id + "': no overlap-free layout after " +
                                            std::to_string(spec.max_attempts) + " attempts");
  }

  const auto& p = spec.intensity;
  const double theta = p.stripe_angle * std::numbers::pi / 180.0;
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double u = std::cos(theta) * static_cast<double>(x) + std::sin(theta) * static_cast<double>(y);
      double v = p.background + p.stripe_amplitude * std::sin(2.0 * std::numbers::pi * u / p.stripe_period + phase);
      const auto label = s.mask(y, x);
      if (label != 0) v += p.label_contrast[label - 1u];
      v += p.noise_sigma * rng.normal();
      s.image(y, x) = std::clamp(std::round(v), 0.0, 65535.0);
    }
  }
  return s;
}

inline Dataset generate_dataset(const TaskGenSpec& spec, Split split) {
  spec.validate();
  Dataset d;
  d.task_id = spec.task_id;
  d.split = split;
  for (int i = 1; i <= spec.n_labels; ++i) d.label_names[i] = spec.label_name(i);
  const std::size_t n = split == Split::Train ? spec.n_train : spec.n_test;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.samples.push_back(generate_sample(spec, split, i));
  return d;
}

/// Write `<out_dir>/train.json` and `<out_dir>/test.json` with their PGM payloads.
inline std::pair<Manifest, Manifest> generate_task(const TaskGenSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  Manifest train = write_dataset(generate_dataset(spec, Split::Train), out_dir, "train");
  save_manifest(out_dir / "train.json", train);
  Manifest test = write_dataset(generate_dataset(spec, Split::Test), out_dir, "test");
  save_manifest(out_dir / "test.json", test);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Default suite: pelvic / abdomen / chest (5, 5, 4 labels) plus a 3-label head task
// held back for incremental addition.

struct Suite {
  std::vector<TaskGenSpec> base;
  TaskGenSpec incremental;
};

inline Suite default_suite(std::uint64_t seed) {
  using K = ShapeKind;
  auto make = [&](TaskId id, std::vector<std::string> names, std::vector<K> kinds, std::vector<double> sizes,
                  IntensityProfile profile, std::uint64_t stream) {
    TaskGenSpec spec;
    spec.task_id = std::move(id);
    spec.n_labels = static_cast<int>(names.size());
    spec.label_names = std::move(names);
    spec.shape_kinds = std::move(kinds);
    spec.size_scales = std::move(sizes);
    spec.intensity = std::move(profile);
    spec.seed = derive_seed(seed, stream);
    return spec;
  };
  Suite suite;
  suite.base.push_back(make("pelvic",
                            {"gluteus_minimus", "gluteus_maximus", "hip", "femur", "gluteus_medius"},
                            {K::Cross, K::Disk, K::Ring, K::Rectangle, K::Disk},
                            {0.035, 0.10, 0.05, 0.07, 0.02},
                            {800, 120, 8, 0, 40, {1500, 900, 1900, 1200, 600}}, 1));
  suite.base.push_back(make("abdomen", {"liver", "kidney", "stomach", "spleen", "gallbladder"},
                            {K::Rectangle, K::Disk, K::Ring, K::Cross, K::Disk},
                            {0.12, 0.04, 0.075, 0.055, 0.018},
                            {1200, 150, 5, 90, 40, {700, 1700, 1100, 1400, 2000}}, 2));
  suite.base.push_back(make("chest", {"lung", "scapula", "humerus", "clavicula"},
                            {K::Disk, K::Cross, K::Rectangle, K::Ring},
                            {0.13, 0.05, 0.035, 0.022},
                            {500, 200, 12, 45, 40, {1000, 1600, 700, 1300}}, 3));
  suite.incremental = make("head", {"mandible", "parotid", "eyes"}, {K::Ring, K::Rectangle, K::Disk},
                           {0.08, 0.045, 0.025}, {1000, 150, 6, 135, 40, {1300, 800, 1800}}, 4);
  return suite;
}

// ---------------------------------------------------------------------------
// JSON form of a task spec (for the synth command)

inline nlohmann::json to_json(const TaskGenSpec& s) {
  std::vector<std::string> kinds;
  for (auto k : s.shape_kinds) kinds.emplace_back(to_string(k));
  return {{"task", s.task_id},
          {"n_labels", s.n_labels},
          {"image_size", {s.height, s.width}},
          {"label_names", s.label_names},
          {"shape_kinds", kinds},
          {"size_scales", s.size_scales},
          {"intensity",
           {{"background", s.intensity.background},
            {"stripe_amplitude", s.intensity.stripe_amplitude},
            {"stripe_period", s.intensity.stripe_period},
            {"stripe_angle", s.intensity.stripe_angle},
            {"noise_sigma", s.intensity.noise_sigma},
            {"label_contrast", s.intensity.label_contrast}}},
          {"n_train", s.n_train},
          {"n_test", s.n_test},
          {"seed", s.seed}};
}

inline TaskGenSpec task_gen_spec_from_json(const nlohmann::json& j) {
  TaskGenSpec s;
  try {
    s.task_id = j.at("task").get<std::string>();
    s.n_labels = j.at("n_labels").get<int>();
    if (j.contains("image_size")) {
      s.height = j.at("image_size").at(0).get<std::size_t>();
      s.width = j.at("image_size").at(1).get<std::size_t>();
    }
    s.label_names = j.value("label_names", std::vector<std::string>{});
    for (const auto& k : j.at("shape_kinds")) s.shape_kinds.push_back(parse_shape_kind(k.get<std::string>()));
    s.size_scales = j.at("size_scales").get<std::vector<double>>();
    const auto& p = j.at("intensity");
    s.intensity.background = p.value("background", s.intensity.background);
    s.intensity.stripe_amplitude = p.value("stripe_amplitude", s.intensity.stripe_amplitude);
    s.intensity.stripe_period = p.value("stripe_period", s.intensity.stripe_period);
    s.intensity.stripe_angle = p.value("stripe_angle", s.intensity.stripe_angle);
    s.intensity.noise_sigma = p.value("noise_sigma", s.intensity.noise_sigma);
    s.intensity.label_contrast = p.at("label_contrast").get<std::vector<double>>();
    s.n_train = j.value("n_train", s.n_train);
    s.n_test = j.value("n_test", s.n_test);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("task spec: ") + e.what());
  }
  s.validate();
  return s;
}

}  // namespace lsf
