#pragma once

// Datasets, manifests, per-label size statistics, mask remapping and volume projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lsf/array.hpp"
#include "lsf/error.hpp"
#include "lsf/hash.hpp"
#include "lsf/labelspace.hpp"
#include "lsf/pgm.hpp"

namespace lsf {

using Mask = Array2D<std::uint16_t>;
using Image = Array2D<double>;

enum class LabelDomain { TaskLocal, Shared };
enum class Split { Train, Test };

inline const char* to_string(Split split) { return split == Split::Train ? "train" : "test"; }

inline Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "test") return Split::Test;
  throw Error(Errc::ParseError, "unknown split '" + text + "'");
}

struct Sample {
  Image image;
  Mask mask;
  TaskId task_id;
  LabelDomain label_domain = LabelDomain::TaskLocal;
};

/// In-memory collection of samples from one task (or a merged, shared-domain set).
struct Dataset {
  TaskId task_id;
  Split split = Split::Train;
  std::map<int, std::string> label_names;
  std::vector<Sample> samples;
  LabelDomain label_domain = LabelDomain::TaskLocal;
};

struct ManifestEntry {
  std::string image;  // relative to the manifest directory
  std::string mask;
  TaskId task;        // set only for merged (shared-domain) manifests

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  TaskId task_id;
  Split split = Split::Train;
  std::map<int, std::string> label_names;
  std::vector<ManifestEntry> entries;
  std::string fingerprint;
  LabelDomain label_domain = LabelDomain::TaskLocal;
  std::filesystem::path base_dir;  // not serialized
};

// ---------------------------------------------------------------------------
// Manifests

/// Content hash over the manifest's identity and the bytes of every referenced file.
inline std::string compute_fingerprint(const Manifest& manifest) {
  Fnv1a h;
  h.update(manifest.task_id).update("\n").update(to_string(manifest.split)).update("\n");
  for (const auto& [index, name] : manifest.label_names) {
    h.update(std::to_string(index)).update("=").update(name).update("\n");
  }
  for (const auto& e : manifest.entries) {
    h.update(e.task).update("\n").update(read_text(manifest.base_dir / e.image));
    h.update(read_text(manifest.base_dir / e.mask));
  }
  return h.hex();
}

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json names = nlohmann::json::object();
  for (const auto& [index, name] : m.label_names) names[std::to_string(index)] = name;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json entry = {{"image", e.image}, {"mask", e.mask}};
    if (!e.task.empty()) entry["task"] = e.task;
    entries.push_back(entry);
  }
  nlohmann::json doc = {{"task", m.task_id},   {"split", to_string(m.split)}, {"label_names", names},
                        {"entries", entries}, {"fingerprint", m.fingerprint}};
  if (m.label_domain == LabelDomain::Shared) doc["domain"] = "shared";
  return doc;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  write_text_atomic(path, manifest_to_json(manifest).dump(2) + "\n");
}

/// Parse a manifest; with `verify`, every file must exist and the fingerprint must match.
inline Manifest load_manifest(const std::filesystem::path& path, bool verify = true) {
  Manifest m;
  m.base_dir = path.parent_path();
  try {
    const auto doc = nlohmann::json::parse(read_text(path));
    m.task_id = doc.at("task").get<std::string>();
    m.split = parse_split(doc.at("split").get<std::string>());
    for (const auto& [index, name] : doc.at("label_names").items()) {
      m.label_names[std::stoi(index)] = name.get<std::string>();
    }
    for (const auto& e : doc.at("entries")) {
      m.entries.push_back(ManifestEntry{e.at("image").get<std::string>(), e.at("mask").get<std::string>(),
                                        e.value("task", std::string{})});
    }
    m.fingerprint = doc.at("fingerprint").get<std::string>();
    if (doc.value("domain", std::string{"task_local"}) == "shared") m.label_domain = LabelDomain::Shared;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, "manifest '" + path.string() + "': " + e.what());
  } catch (const std::logic_error& e) {
    throw Error(Errc::ParseError, "manifest '" + path.string() + "': " + e.what());
  }
  if (verify) {
    for (const auto& e : m.entries) {
      for (const auto& rel : {e.image, e.mask}) {
        if (!std::filesystem::exists(m.base_dir / rel)) {
          throw Error(Errc::IoError, "manifest '" + path.string() + "' references missing file '" + rel + "'");
        }
      }
    }
    if (compute_fingerprint(m) != m.fingerprint) {
      throw Error(Errc::ValidationError, "manifest '" + path.string() + "' fingerprint does not match its files");
    }
  }
  return m;
}

inline Dataset load_dataset(const Manifest& manifest) {
  Dataset d;
  d.task_id = manifest.task_id;
  d.split = manifest.split;
  d.label_names = manifest.label_names;
  d.label_domain = manifest.label_domain;
  const int max_label = manifest.label_names.empty() ? 0 : manifest.label_names.rbegin()->first;
  for (const auto& e : manifest.entries) {
    Sample s;
    const Image16 raw = read_pgm(manifest.base_dir / e.image);
    s.mask = read_pgm(manifest.base_dir / e.mask);
    if (!raw.same_shape(s.mask)) throw Error(Errc::ShapeError, "image and mask shapes differ for '" + e.image + "'");
    s.image = Image(raw.rows(), raw.cols());
    std::transform(raw.begin(), raw.end(), s.image.begin(), [](std::uint16_t v) { return static_cast<double>(v); });
    s.task_id = e.task.empty() ? manifest.task_id : e.task;
    s.label_domain = manifest.label_domain;
    if (s.label_domain == LabelDomain::TaskLocal) {
      for (auto v : s.mask) {
        if (v > max_label) throw Error(Errc::OutOfRangeLabel, "mask '" + e.mask + "' holds label " + std::to_string(v));
      }
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

/// Write images and masks as PGM under `dir` and return a fingerprinted manifest.
/// Image intensities are rounded and clamped to 16 bits.
inline Manifest write_dataset(const Dataset& dataset, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir / stem);
  Manifest m;
  m.task_id = dataset.task_id;
  m.split = dataset.split;
  m.label_names = dataset.label_names;
  m.label_domain = dataset.label_domain;
  m.base_dir = dir;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", i);
    const std::string image_rel = stem + "/img_" + name + ".pgm";
    const std::string mask_rel = stem + "/mask_" + name + ".pgm";
    Image16 raw(s.image.rows(), s.image.cols());
    std::transform(s.image.begin(), s.image.end(), raw.begin(), [](double v) {
      return static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, 65535L));
    });
    write_pgm(dir / image_rel, raw);
    write_pgm(dir / mask_rel, s.mask);
    m.entries.push_back(ManifestEntry{image_rel, mask_rel,
                                      dataset.label_domain == LabelDomain::Shared ? s.task_id : TaskId{}});
  }
  m.fingerprint = compute_fingerprint(m);
  return m;
}

// ---------------------------------------------------------------------------
// Size statistics

struct LabelStats {
  double avg_relative_size = 0.0;
  std::size_t presence_count = 0;
  double mean_pixel_count = 0.0;
};

/// Relative size of a label in one sample is its pixel count over the pixel count
/// of all non-background labels in that sample; averages run over samples where the
/// label is present.
inline std::map<int, LabelStats> size_stats(const Dataset& dataset) {
  if (dataset.samples.empty()) throw Error(Errc::EmptyManifest, "dataset for task '" + dataset.task_id + "' is empty");
  std::map<int, LabelStats> out;
  std::map<int, double> relative_sum, pixel_sum;
  for (const auto& [index, name] : dataset.label_names) out[index] = {};

  for (const Sample& s : dataset.samples) {
    std::map<int, std::size_t> counts;
    std::size_t foreground = 0;
    for (auto v : s.mask) {
      if (v == 0) continue;
      ++counts[v];
      ++foreground;
    }
    for (const auto& [label, count] : counts) {
      if (!out.count(label)) {
        throw Error(Errc::OutOfRangeLabel, "label " + std::to_string(label) + " is not declared for task '" +
                                               dataset.task_id + "'");
      }
      relative_sum[label] += static_cast<double>(count) / static_cast<double>(foreground);
      pixel_sum[label] += static_cast<double>(count);
      ++out[label].presence_count;
    }
  }
  for (auto& [label, stats] : out) {
    if (stats.presence_count == 0) {
      throw Error(Errc::LabelNeverPresent, "label " + std::to_string(label) + " of task '" + dataset.task_id +
                                               "' never occurs");
    }
    const auto n = static_cast<double>(stats.presence_count);
    stats.avg_relative_size = relative_sum[label] / n;
    stats.mean_pixel_count = pixel_sum[label] / n;
  }
  return out;
}

inline TaskSpec task_spec_from(const Dataset& dataset, const std::map<int, LabelStats>& stats) {
  TaskSpec spec{dataset.task_id, dataset.task_id, {}};
  for (const auto& [index, name] : dataset.label_names) {
    spec.labels.push_back(LabelDescriptor{dataset.task_id, index, name, stats.at(index).avg_relative_size});
  }
  return spec;
}

/// Record a task's statistics in a size table.
inline void record_sizes(SizeTable& table, const TaskSpec& task, std::string fingerprint, std::size_t samples) {
  for (const auto& label : task.labels) table.set(task.task_id, label.local_index, label.avg_relative_size);
  table.provenance[task.task_id] = TaskProvenance{std::move(fingerprint), samples};
}

// ---------------------------------------------------------------------------
// Remapping and merging

inline Mask remap_mask(const Mask& mask, const SharedLabelSpace& space, const TaskId& task) {
  const auto& map = space.task_map(task);
  std::vector<std::uint16_t> lut(1, 0);
  for (const auto& [local, k] : map) {
    if (static_cast<std::size_t>(local) >= lut.size()) lut.resize(static_cast<std::size_t>(local) + 1, 0xffff);
    lut[static_cast<std::size_t>(local)] = static_cast<std::uint16_t>(k);
  }
  Mask out(mask.rows(), mask.cols());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto v = mask.data()[i];
    if (v >= lut.size() || lut[v] == 0xffff) {
      throw Error(Errc::OutOfRangeLabel, "label " + std::to_string(v) + " is not mapped for task '" + task + "'");
    }
    out.data()[i] = lut[v];
  }
  return out;
}

/// Apply a (partial) label relabeling; labels missing from `map` become background.
inline Mask relabel(const Mask& mask, const std::map<int, int>& map) {
  Mask out(mask.rows(), mask.cols());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const auto it = map.find(mask.data()[i]);
    out.data()[i] = it == map.end() ? 0 : static_cast<std::uint16_t>(it->second);
  }
  return out;
}

/// Union of task datasets in the shared label domain; samples keep their source task.
inline Dataset merge_datasets(const std::vector<Dataset>& datasets, const SharedLabelSpace& space) {
  Dataset out;
  out.task_id = "unified";
  out.label_domain = LabelDomain::Shared;
  for (const auto& g : space.groups) out.label_names[g.k] = "shared_" + std::to_string(g.k);
  for (const auto& d : datasets) {
    if (d.label_domain != LabelDomain::TaskLocal) {
      throw Error(Errc::DomainMismatch, "dataset '" + d.task_id + "' is already in the shared domain");
    }
    if (!space.has_task(d.task_id)) throw Error(Errc::UnknownTask, "task '" + d.task_id + "' is not registered");
    out.split = d.split;
    for (const auto& s : d.samples) {
      Sample shared{s.image, remap_mask(s.mask, space, d.task_id), d.task_id, LabelDomain::Shared};
      out.samples.push_back(std::move(shared));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projection

struct Volume {
  Array3D<double> voxels;
  Array3D<std::uint16_t> mask;
};

/// Mean-intensity projection of the voxels along `axis`; the mask projects by
/// per-pixel maximum label so that small landmarks survive.
inline Sample project_volume(const Volume& volume, int axis, const TaskId& task = {}) {
  if (volume.voxels.empty()) throw Error(Errc::EmptyVolume, "volume has no voxels");
  if (axis < 0 || axis > 2) throw Error(Errc::ShapeError, "projection axis must be 0, 1 or 2");
  const auto& v = volume.voxels;
  const auto& m = volume.mask;
  if (m.depth() != v.depth() || m.rows() != v.rows() || m.cols() != v.cols()) {
    throw Error(Errc::ShapeError, "volume and mask shapes differ");
  }
  const std::size_t out_rows = axis == 0 ? v.rows() : v.depth();
  const std::size_t out_cols = axis == 2 ? v.rows() : v.cols();
  const std::size_t along = v.extent(axis);

  Sample s{Image(out_rows, out_cols), Mask(out_rows, out_cols), task, LabelDomain::TaskLocal};
  for (std::size_t r = 0; r < out_rows; ++r) {
    for (std::size_t c = 0; c < out_cols; ++c) {
      double sum = 0.0;
      std::uint16_t peak = 0;
      for (std::size_t t = 0; t < along; ++t) {
        std::size_t z = 0, y = 0, x = 0;
        switch (axis) {
          case 0: z = t, y = r, x = c; break;
          case 1: z = r, y = t, x = c; break;
          default: z = r, y = c, x = t; break;
        }
        sum += v(z, y, x);
        peak = std::max(peak, m(z, y, x));
      }
      s.image(r, c) = sum / static_cast<double>(along);
      s.mask(r, c) = peak;
    }
  }
  return s;
}

}  // namespace lsf
