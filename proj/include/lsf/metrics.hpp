#pragma once

// Dice, exact Euclidean distance transform, Hausdorff distance and evaluation reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lsf/array.hpp"
#include "lsf/data.hpp"
#include "lsf/error.hpp"
#include "lsf/train.hpp"

namespace lsf {

using BinaryMask = Array2D<std::uint8_t>;

/// 2|A∩B| / (|A|+|B|) over pixels equal to `label`; 1 when both are empty.
inline double dice(const Mask& pred, const Mask& gt, int label) {
  if (!pred.same_shape(gt)) throw Error(Errc::ShapeError, "dice: masks differ in shape");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_a = pred.data()[i] == label;
    const bool in_b = gt.data()[i] == label;
    a += in_a;
    b += in_b;
    both += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

inline BinaryMask binary_of(const Mask& mask, int label) {
  BinaryMask out(mask.rows(), mask.cols());
  for (std::size_t i = 0; i < mask.size(); ++i) out.data()[i] = mask.data()[i] == label ? 1 : 0;
  return out;
}

namespace detail {

// Lower envelope of parabolas (q - p)^2 + f(p) over the finite entries of f.
// Results are exact for integer-valued input because every output is formed as
// (q - p)^2 + f(p) for some sample p; intersections only steer the envelope.
inline void squared_dt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<std::size_t>& v,
                          std::vector<double>& z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const std::size_t n = f.size();
  d.assign(n, kInf);
  v.clear();
  z.clear();
  for (std::size_t q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    const double fq = f[q] + static_cast<double>(q * q);
    while (!v.empty()) {
      const std::size_t p = v.back();
      const double s = (fq - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q - p));
      if (s <= z.back()) {
        v.pop_back();
        z.pop_back();
      } else {
        break;
      }
    }
    if (v.empty()) {
      v.push_back(q);
      z.push_back(-kInf);
    } else {
      const std::size_t p = v.back();
      v.push_back(q);
      z.push_back((fq - (f[p] + static_cast<double>(p * p))) / (2.0 * static_cast<double>(q - p)));
    }
  }
  if (v.empty()) return;
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (k + 1 < v.size() && z[k + 1] < static_cast<double>(q)) ++k;
    const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

/// Squared Euclidean distance from every pixel to the nearest foreground pixel,
/// by two separable lower-envelope passes (columns, then rows).
inline Array2D<double> squared_distance_transform(const BinaryMask& mask) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const std::size_t H = mask.rows(), W = mask.cols();
  bool any = false;
  for (auto v : mask) any = any || v != 0;
  if (!any) throw Error(Errc::EmptyForeground, "distance transform needs at least one foreground pixel");

  Array2D<double> out(H, W);
  std::vector<double> f, d, z;
  std::vector<std::size_t> v;
  f.resize(H);
  for (std::size_t x = 0; x < W; ++x) {
    for (std::size_t y = 0; y < H; ++y) f[y] = mask(y, x) ? 0.0 : kInf;
    detail::squared_dt_1d(f, d, v, z);
    for (std::size_t y = 0; y < H; ++y) out(y, x) = d[y];
  }
  f.resize(W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) f[x] = out(y, x);
    detail::squared_dt_1d(f, d, v, z);
    for (std::size_t x = 0; x < W; ++x) out(y, x) = d[x];
  }
  return out;
}

/// Euclidean distance to the nearest foreground pixel (0 on the foreground).
inline Array2D<double> distance_transform(const BinaryMask& mask) {
  Array2D<double> out = squared_distance_transform(mask);
  for (auto& v : out) v = std::sqrt(v);
  return out;
}

/// Symmetric Hausdorff distance between the foreground sets of two equally sized masks.
inline double hausdorff(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw Error(Errc::ShapeError, "hausdorff: masks differ in shape");
  bool any_a = false, any_b = false;
  for (auto v : a) any_a = any_a || v != 0;
  for (auto v : b) any_b = any_b || v != 0;
  if (!any_a) throw Error(Errc::EmptySet, "hausdorff: first set is empty");
  if (!any_b) throw Error(Errc::EmptySet, "hausdorff: second set is empty");
  const auto to_a = squared_distance_transform(a);
  const auto to_b = squared_distance_transform(b);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.data()[i]) worst = std::max(worst, to_b.data()[i]);
    if (b.data()[i]) worst = std::max(worst, to_a.data()[i]);
  }
  return std::sqrt(worst);
}

struct Pixel {
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Hausdorff distance between two pixel sets with non-negative coordinates.
inline double hausdorff(const std::vector<Pixel>& a, const std::vector<Pixel>& b) {
  if (a.empty()) throw Error(Errc::EmptySet, "hausdorff: first set is empty");
  if (b.empty()) throw Error(Errc::EmptySet, "hausdorff: second set is empty");
  std::size_t rows = 0, cols = 0;
  for (const auto* set : {&a, &b}) {
    for (const auto& p : *set) {
      rows = std::max(rows, p.row + 1);
      cols = std::max(cols, p.col + 1);
    }
  }
  BinaryMask ma(rows, cols), mb(rows, cols);
  for (const auto& p : a) ma(p.row, p.col) = 1;
  for (const auto& p : b) mb(p.row, p.col) = 1;
  return hausdorff(ma, mb);
}

/// Hausdorff distance divided by the image diagonal, clamped to [0, 1].
inline double normalized_hausdorff(double value, std::size_t height, std::size_t width) {
  const double diagonal = std::sqrt(static_cast<double>(height * height + width * width));
  if (diagonal == 0.0) return 0.0;
  return std::clamp(value / diagonal, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Reports

enum class Metric { Dice, Hausdorff, NormalizedHausdorff };

inline const char* to_string(Metric m) {
  switch (m) {
    case Metric::Dice: return "dice";
    case Metric::Hausdorff: return "hausdorff";
    case Metric::NormalizedHausdorff: return "normalized_hausdorff";
  }
  return "dice";
}

inline Metric parse_metric(const std::string& text) {
  if (text == "dice") return Metric::Dice;
  if (text == "hausdorff") return Metric::Hausdorff;
  if (text == "normalized_hausdorff") return Metric::NormalizedHausdorff;
  throw Error(Errc::ParseError, "unknown metric '" + text + "'");
}

/// Mean of one metric for one label. `value` is empty when no sample produced a
/// defined value (Hausdorff against an empty prediction); `failures` counts those samples.
struct EvalRow {
  TaskId task_id;
  int label = 0;
  std::string label_name;
  Metric metric = Metric::Dice;
  std::optional<double> value;
  std::size_t sample_count = 0;
  std::size_t failures = 0;
};

struct Report {
  std::string mode;
  std::vector<EvalRow> rows;
  std::map<TaskId, std::map<Metric, std::optional<double>>> task_means;

  /// Recompute per-task means from the rows (mean over labels with a defined value).
  void aggregate() {
    task_means.clear();
    std::map<std::pair<TaskId, Metric>, std::pair<double, std::size_t>> acc;
    for (const auto& row : rows) {
      auto& slot = acc[{row.task_id, row.metric}];
      if (row.value) {
        slot.first += *row.value;
        ++slot.second;
      }
    }
    for (const auto& [key, sum] : acc) {
      task_means[key.first][key.second] =
          sum.second == 0 ? std::nullopt : std::optional<double>(sum.first / static_cast<double>(sum.second));
    }
  }

  std::optional<double> task_mean(const TaskId& task, Metric metric) const {
    auto t = task_means.find(task);
    if (t == task_means.end()) return std::nullopt;
    auto m = t->second.find(metric);
    return m == t->second.end() ? std::nullopt : m->second;
  }
};

/// Per-label metrics of (prediction, ground truth) pairs of one task, both task-local.
inline std::vector<EvalRow> evaluate_masks(const TaskId& task, const std::map<int, std::string>& label_names,
                                           const std::vector<std::pair<Mask, Mask>>& pairs) {
  std::vector<EvalRow> rows;
  for (const auto& [label, name] : label_names) {
    double dice_sum = 0.0, hd_sum = 0.0, nhd_sum = 0.0;
    std::size_t hd_ok = 0, hd_fail = 0;
    for (const auto& [pred, gt] : pairs) {
      dice_sum += dice(pred, gt, label);
      const auto bp = binary_of(pred, label);
      const auto bg = binary_of(gt, label);
      const bool has_p = std::any_of(bp.begin(), bp.end(), [](auto v) { return v != 0; });
      const bool has_g = std::any_of(bg.begin(), bg.end(), [](auto v) { return v != 0; });
      if (!has_p && !has_g) continue;
      if (has_p != has_g) {
        ++hd_fail;
        continue;
      }
      const double hd = hausdorff(bp, bg);
      hd_sum += hd;
      nhd_sum += normalized_hausdorff(hd, gt.rows(), gt.cols());
      ++hd_ok;
    }
    const auto n = pairs.size();
    auto mean = [](double sum, std::size_t count) {
      return count == 0 ? std::nullopt : std::optional<double>(sum / static_cast<double>(count));
    };
    rows.push_back({task, label, name, Metric::Dice, mean(dice_sum, n), n, 0});
    rows.push_back({task, label, name, Metric::Hausdorff, mean(hd_sum, hd_ok), hd_ok, hd_fail});
    rows.push_back({task, label, name, Metric::NormalizedHausdorff, mean(nhd_sum, hd_ok), hd_ok, hd_fail});
  }
  return rows;
}

/// Evaluate a checkpoint on task-local test sets. Each sample is predicted from
/// its image alone and relabeled into its own task's labels.
inline Report evaluate(const Checkpoint& ckpt, const std::vector<Dataset>& tests) {
  Network<Real> net = network_from(ckpt);
  Report report;
  report.mode = to_string(ckpt.train.mode);
  for (const auto& test : tests) {
    if (test.label_domain != LabelDomain::TaskLocal) {
      throw Error(Errc::DomainMismatch, "evaluation expects task-local ground truth");
    }
    std::vector<std::pair<Mask, Mask>> pairs;
    for (const auto& s : test.samples) pairs.emplace_back(predict(net, s.image, ckpt.layout, test.task_id), s.mask);
    auto rows = evaluate_masks(test.task_id, test.label_names, pairs);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  report.aggregate();
  return report;
}

/// As above, additionally requiring the checkpoint to match `space`.
inline Report evaluate(const Checkpoint& ckpt, const std::vector<Dataset>& tests, const SharedLabelSpace& space) {
  if (ckpt.fingerprint() != space_fingerprint(space)) {
    throw Error(Errc::FingerprintMismatch, "checkpoint was trained on a different label space");
  }
  return evaluate(ckpt, tests);
}

namespace detail {
inline std::string format_value(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream ss;
  ss.precision(17);
  ss << *v;
  return ss.str();
}
}  // namespace detail

/// `task,label,metric,value,n` with an empty value for undefined means.
inline std::string report_csv(const Report& report) {
  std::string out = "task,label,metric,value,n\n";
  for (const auto& r : report.rows) {
    out += r.task_id + "," + std::to_string(r.label) + "," + to_string(r.metric) + "," +
           detail::format_value(r.value) + "," + std::to_string(r.sample_count) + "\n";
  }
  return out;
}

inline nlohmann::json report_json(const Report& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"task", r.task_id},
                    {"label", r.label},
                    {"label_name", r.label_name},
                    {"metric", to_string(r.metric)},
                    {"value", r.value ? nlohmann::json(*r.value) : nlohmann::json(nullptr)},
                    {"n", r.sample_count},
                    {"failures", r.failures}});
  }
  nlohmann::json tasks = nlohmann::json::object();
  for (const auto& [task, metrics] : report.task_means) {
    for (const auto& [metric, v] : metrics) tasks[task][to_string(metric)] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  return {{"mode", report.mode}, {"rows", rows}, {"task_means", tasks}};
}

inline Report report_from_json(const nlohmann::json& j) {
  Report report;
  try {
    report.mode = j.at("mode").get<std::string>();
    for (const auto& r : j.at("rows")) {
      EvalRow row;
      row.task_id = r.at("task").get<std::string>();
      row.label = r.at("label").get<int>();
      row.label_name = r.value("label_name", std::string{});
      row.metric = parse_metric(r.at("metric").get<std::string>());
      if (!r.at("value").is_null()) row.value = r.at("value").get<double>();
      row.sample_count = r.at("n").get<std::size_t>();
      row.failures = r.value("failures", std::size_t{0});
      report.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("report: ") + e.what());
  }
  report.aggregate();
  return report;
}

/// Methods as rows, tasks as columns, task-wise mean of `metric` in each cell.
inline std::string comparison_table(const std::vector<Report>& reports, Metric metric = Metric::Dice) {
  std::vector<TaskId> tasks;
  for (const auto& r : reports) {
    for (const auto& [task, m] : r.task_means) {
      if (std::find(tasks.begin(), tasks.end(), task) == tasks.end()) tasks.push_back(task);
    }
  }
  std::sort(tasks.begin(), tasks.end());
  std::ostringstream ss;
  ss << "| method |";
  for (const auto& t : tasks) ss << " " << t << " |";
  ss << "\n|---|";
  for (std::size_t i = 0; i < tasks.size(); ++i) ss << "---|";
  ss << "\n";
  for (const auto& r : reports) {
    ss << "| " << r.mode << " |";
    for (const auto& t : tasks) {
      const auto v = r.task_mean(t, metric);
      if (v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, " %.3f |", *v);
        ss << buf;
      } else {
        ss << "  |";
      }
    }
    ss << "\n";
  }
  return ss.str();
}

}  // namespace lsf
