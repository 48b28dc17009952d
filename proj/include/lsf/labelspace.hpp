#pragma once

// Shared label space: size-ranked grouping of labels from independent tasks,
// incremental task addition and JSON persistence.

#include <algorithm>
#include <compare>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lsf/array.hpp"
#include "lsf/error.hpp"
#include "lsf/hash.hpp"
#include "lsf/hungarian.hpp"

namespace lsf {

using TaskId = std::string;

struct LabelDescriptor {
  TaskId task_id;
  int local_index = 0;  // >= 1; 0 is background
  std::string name;
  double avg_relative_size = 0.0;
};

struct TaskSpec {
  TaskId task_id;
  std::string name;
  std::vector<LabelDescriptor> labels;

  int label_count() const noexcept { return static_cast<int>(labels.size()); }
};

/// (task, task-local label) pair.
struct LabelKey {
  TaskId task;
  int label = 0;

  friend auto operator<=>(const LabelKey&, const LabelKey&) = default;
  friend bool operator==(const LabelKey&, const LabelKey&) = default;
};

inline std::string to_string(const LabelKey& key) { return key.task + ":" + std::to_string(key.label); }

struct TaskProvenance {
  std::string fingerprint;
  std::size_t sample_count = 0;

  friend bool operator==(const TaskProvenance&, const TaskProvenance&) = default;
};

/// Per-(task, label) average relative sizes. This table is the only state needed
/// to map a new task onto an existing shared space.
struct SizeTable {
  std::map<LabelKey, double> rows;
  std::map<TaskId, TaskProvenance> provenance;

  void set(const TaskId& task, int label, double size) { rows[LabelKey{task, label}] = size; }

  bool contains(const TaskId& task, int label) const { return rows.count(LabelKey{task, label}) != 0; }

  double size_of(const LabelKey& key) const {
    auto it = rows.find(key);
    if (it == rows.end()) throw Error(Errc::MissingSizeRow, "no size row for " + to_string(key));
    return it->second;
  }

  /// Labels recorded for one task, ascending.
  std::vector<int> labels_of(const TaskId& task) const {
    std::vector<int> out;
    for (auto it = rows.lower_bound(LabelKey{task, 0}); it != rows.end() && it->first.task == task; ++it) {
      out.push_back(it->first.label);
    }
    return out;
  }

  std::set<TaskId> tasks() const {
    std::set<TaskId> out;
    for (const auto& [key, size] : rows) out.insert(key.task);
    return out;
  }

  friend bool operator==(const SizeTable&, const SizeTable&) = default;
};

struct SharedGroup {
  int k = 0;  // stable shared index, also the model's foreground channel
  std::vector<LabelKey> members;
  double representative_size = 0.0;

  friend bool operator==(const SharedGroup&, const SharedGroup&) = default;
};

/// Partition of all registered task labels into shared labels Λ_1..Λ_n*.
///
/// `groups` is kept in non-increasing order of representative size. The index `k`
/// of a group is assigned when the group is created and never changes, so the
/// list position and `k` may drift apart after incremental additions.
struct SharedLabelSpace {
  int n_star = 0;
  std::vector<SharedGroup> groups;
  std::map<TaskId, std::map<int, int>> task_maps;  // task -> (local -> k)

  bool has_task(const TaskId& task) const { return task_maps.count(task) != 0; }

  const std::map<int, int>& task_map(const TaskId& task) const {
    auto it = task_maps.find(task);
    if (it == task_maps.end()) throw Error(Errc::UnknownTask, "task '" + task + "' is not registered");
    return it->second;
  }

  const SharedGroup* find_group(int k) const {
    for (const auto& g : groups) {
      if (g.k == k) return &g;
    }
    return nullptr;
  }

  std::vector<TaskId> tasks() const {
    std::vector<TaskId> out;
    for (const auto& [task, map] : task_maps) out.push_back(task);
    return out;
  }

  friend bool operator==(const SharedLabelSpace&, const SharedLabelSpace&) = default;
};

enum class ViolationKind { Partition, TaskUniqueness, SharedCountBound, GroupOrder, TaskMap };

inline const char* to_string(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::Partition: return "partition";
    case ViolationKind::TaskUniqueness: return "task_uniqueness";
    case ViolationKind::SharedCountBound: return "shared_count_bound";
    case ViolationKind::GroupOrder: return "group_order";
    case ViolationKind::TaskMap: return "task_map";
  }
  return "unknown";
}

struct Violation {
  ViolationKind kind;
  std::string subject;  // offending label ("task:label") or group ("k=3")
  std::string detail;
};

namespace detail {

inline std::vector<LabelDescriptor> sorted_by_size(const TaskSpec& task, const SizeTable& table) {
  std::vector<LabelDescriptor> labels = task.labels;
  for (auto& label : labels) label.avg_relative_size = table.size_of(LabelKey{task.task_id, label.local_index});
  std::stable_sort(labels.begin(), labels.end(), [](const LabelDescriptor& a, const LabelDescriptor& b) {
    if (a.avg_relative_size != b.avg_relative_size) return a.avg_relative_size > b.avg_relative_size;
    return a.local_index < b.local_index;
  });
  return labels;
}

inline double member_mean(const SharedGroup& group, const SizeTable& table) {
  double sum = 0.0;
  for (const auto& m : group.members) sum += table.size_of(m);
  return sum / static_cast<double>(group.members.size());
}

inline void sort_groups(std::vector<SharedGroup>& groups) {
  std::stable_sort(groups.begin(), groups.end(), [](const SharedGroup& a, const SharedGroup& b) {
    if (a.representative_size != b.representative_size) return a.representative_size > b.representative_size;
    return a.k < b.k;
  });
}

inline void check_task(const TaskSpec& task, const SizeTable& table) {
  if (task.labels.empty()) throw Error(Errc::EmptyInput, "task '" + task.task_id + "' has no labels");
  std::set<int> seen;
  for (const auto& label : task.labels) {
    if (label.local_index < 1) {
      throw Error(Errc::ValidationError, "task '" + task.task_id + "' has label index < 1");
    }
    if (!seen.insert(label.local_index).second) {
      throw Error(Errc::ValidationError, "task '" + task.task_id + "' repeats label " +
                                             std::to_string(label.local_index));
    }
    if (!table.contains(task.task_id, label.local_index)) {
      throw Error(Errc::MissingSizeRow, "no size row for " + to_string(LabelKey{task.task_id, label.local_index}));
    }
  }
}

}  // namespace detail

/// Map a new task onto an existing space by minimum total |size - representative|
/// assignment. Existing memberships are never altered; receiving groups get their
/// representative size recomputed as the mean of member sizes.
inline SharedLabelSpace assign_task(SharedLabelSpace space, const TaskSpec& task, const SizeTable& table) {
  if (space.has_task(task.task_id)) {
    throw Error(Errc::DuplicateTask, "task '" + task.task_id + "' is already registered");
  }
  detail::check_task(task, table);
  if (task.label_count() > space.n_star) {
    throw Error(Errc::TaskTooLarge, "task '" + task.task_id + "' has " + std::to_string(task.label_count()) +
                                        " labels but the shared space has only " + std::to_string(space.n_star));
  }

  const auto labels = detail::sorted_by_size(task, table);
  Array2D<double> cost(labels.size(), space.groups.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = 0; j < space.groups.size(); ++j) {
      cost(i, j) = std::abs(labels[i].avg_relative_size - space.groups[j].representative_size);
    }
  }
  const auto assignment = hungarian_min_cost(cost);

  auto& map = space.task_maps[task.task_id];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& group = space.groups[assignment[i]];
    group.members.push_back(LabelKey{task.task_id, labels[i].local_index});
    group.representative_size = detail::member_mean(group, table);
    map[labels[i].local_index] = group.k;
  }
  detail::sort_groups(space.groups);
  return space;
}

/// Size-ranked construction. The task with the most labels (ties: smallest id) seeds
/// the groups in descending size order; every other task follows via assign_task in
/// ascending id order. Always yields n_star == max label count.
inline SharedLabelSpace build_shared_space(const std::vector<TaskSpec>& tasks, const SizeTable& table) {
  if (tasks.empty()) throw Error(Errc::EmptyInput, "no tasks given");
  std::vector<const TaskSpec*> order;
  std::set<TaskId> ids;
  for (const auto& task : tasks) {
    if (!ids.insert(task.task_id).second) {
      throw Error(Errc::DuplicateTask, "task '" + task.task_id + "' given twice");
    }
    detail::check_task(task, table);
    order.push_back(&task);
  }
  std::sort(order.begin(), order.end(), [](const TaskSpec* a, const TaskSpec* b) { return a->task_id < b->task_id; });
  const TaskSpec* reference = order.front();
  for (const TaskSpec* t : order) {
    if (t->label_count() > reference->label_count()) reference = t;
  }

  SharedLabelSpace space;
  space.n_star = reference->label_count();
  const auto ranked = detail::sorted_by_size(*reference, table);
  auto& map = space.task_maps[reference->task_id];
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const int k = static_cast<int>(i) + 1;
    space.groups.push_back(SharedGroup{k, {LabelKey{reference->task_id, ranked[i].local_index}},
                                       ranked[i].avg_relative_size});
    map[ranked[i].local_index] = k;
  }
  for (const TaskSpec* t : order) {
    if (t != reference) space = assign_task(std::move(space), *t, table);
  }
  return space;
}

/// The space as it was before `tasks` outside `keep` were added: their members are
/// dropped and representative sizes are recomputed from the remaining members.
inline SharedLabelSpace restrict_space(const SharedLabelSpace& space, const std::set<TaskId>& keep,
                                       const SizeTable& table) {
  SharedLabelSpace out;
  out.n_star = space.n_star;
  for (const auto& group : space.groups) {
    SharedGroup g{group.k, {}, group.representative_size};
    for (const auto& m : group.members) {
      if (keep.count(m.task)) g.members.push_back(m);
    }
    if (g.members.empty()) {
      throw Error(Errc::ValidationError, "restriction empties shared group k=" + std::to_string(group.k));
    }
    if (g.members.size() != group.members.size()) g.representative_size = detail::member_mean(g, table);
    out.groups.push_back(std::move(g));
  }
  for (const auto& [task, map] : space.task_maps) {
    if (keep.count(task)) out.task_maps[task] = map;
  }
  detail::sort_groups(out.groups);
  return out;
}

/// shared index -> task-local label, defined only on groups that hold a member of `task`.
inline std::map<int, int> inverse_map(const SharedLabelSpace& space, const TaskId& task) {
  std::map<int, int> out;
  for (const auto& [local, k] : space.task_map(task)) out[k] = local;
  return out;
}

inline std::vector<Violation> validate_space(const SharedLabelSpace& space) {
  std::vector<Violation> out;

  std::map<LabelKey, std::vector<int>> placements;
  for (const auto& group : space.groups) {
    std::map<TaskId, int> per_task;
    for (const auto& m : group.members) {
      placements[m].push_back(group.k);
      if (++per_task[m.task] == 2) {
        out.push_back({ViolationKind::TaskUniqueness, "k=" + std::to_string(group.k),
                       "group holds more than one label of task '" + m.task + "'"});
      }
    }
  }
  for (const auto& [task, map] : space.task_maps) {
    for (const auto& [local, k] : map) placements.try_emplace(LabelKey{task, local});
  }
  for (const auto& [key, ks] : placements) {
    if (ks.size() != 1) {
      out.push_back({ViolationKind::Partition, to_string(key),
                     "label appears in " + std::to_string(ks.size()) + " groups"});
      continue;
    }
    auto t = space.task_maps.find(key.task);
    const bool mapped = t != space.task_maps.end() && t->second.count(key.label);
    if (!mapped || t->second.at(key.label) != ks.front()) {
      out.push_back({ViolationKind::TaskMap, to_string(key), "task map disagrees with group membership"});
    }
  }

  std::set<int> ks;
  for (const auto& group : space.groups) ks.insert(group.k);
  if (static_cast<int>(space.groups.size()) != space.n_star || static_cast<int>(ks.size()) != space.n_star ||
      (!ks.empty() && (*ks.begin() != 1 || *ks.rbegin() != space.n_star))) {
    out.push_back({ViolationKind::SharedCountBound, "n_star",
                   "groups must carry indices 1..n_star exactly once"});
  }
  for (const auto& [task, map] : space.task_maps) {
    if (static_cast<int>(map.size()) > space.n_star) {
      out.push_back({ViolationKind::SharedCountBound, task, "task has more labels than n_star"});
    }
  }
  for (std::size_t i = 1; i < space.groups.size(); ++i) {
    if (space.groups[i].representative_size > space.groups[i - 1].representative_size) {
      out.push_back({ViolationKind::GroupOrder, "k=" + std::to_string(space.groups[i].k),
                     "representative size exceeds its predecessor"});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json space_to_json(const SharedLabelSpace& space) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : space.groups) {
    nlohmann::json members = nlohmann::json::array();
    for (const auto& m : g.members) members.push_back({{"task", m.task}, {"label", m.label}});
    groups.push_back({{"k", g.k}, {"representative_size", g.representative_size}, {"members", members}});
  }
  return {{"n_star", space.n_star}, {"groups", groups}};
}

/// Identity of a space: hash of its canonical group listing.
inline std::string space_fingerprint(const SharedLabelSpace& space) { return fingerprint_of(space_to_json(space).dump()); }

inline nlohmann::json label_space_document(const SharedLabelSpace& space, const SizeTable& table) {
  nlohmann::json doc = space_to_json(space);
  nlohmann::json sizes = nlohmann::json::object();
  for (const auto& [key, size] : table.rows) sizes[key.task][std::to_string(key.label)] = size;
  nlohmann::json provenance = nlohmann::json::object();
  for (const auto& [task, p] : table.provenance) {
    provenance[task] = {{"fingerprint", p.fingerprint}, {"samples", p.sample_count}};
  }
  doc["size_table"] = sizes;
  doc["provenance"] = provenance;
  return doc;
}

struct LabelSpaceFile {
  SharedLabelSpace space;
  SizeTable table;
};

/// Parse and fully validate a label-space document.
inline LabelSpaceFile parse_label_space(const nlohmann::json& doc) {
  LabelSpaceFile out;
  try {
    out.space.n_star = doc.at("n_star").get<int>();
    for (const auto& g : doc.at("groups")) {
      SharedGroup group;
      group.k = g.at("k").get<int>();
      group.representative_size = g.at("representative_size").get<double>();
      for (const auto& m : g.at("members")) {
        group.members.push_back(LabelKey{m.at("task").get<std::string>(), m.at("label").get<int>()});
      }
      out.space.groups.push_back(std::move(group));
    }
    for (const auto& [task, labels] : doc.at("size_table").items()) {
      for (const auto& [label, size] : labels.items()) out.table.set(task, std::stoi(label), size.get<double>());
    }
    if (doc.contains("provenance")) {
      for (const auto& [task, p] : doc.at("provenance").items()) {
        out.table.provenance[task] = TaskProvenance{p.at("fingerprint").get<std::string>(),
                                                    p.at("samples").get<std::size_t>()};
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, std::string("label space document: ") + e.what());
  } catch (const std::logic_error& e) {
    throw Error(Errc::ParseError, std::string("label space document: ") + e.what());
  }

  for (const auto& g : out.space.groups) {
    for (const auto& m : g.members) {
      if (!out.table.contains(m.task, m.label)) {
        throw Error(Errc::MissingSizeRow, "no size row for " + to_string(m));
      }
      out.space.task_maps[m.task][m.label] = g.k;
    }
  }
  for (const auto& [key, size] : out.table.rows) {
    if (!out.space.has_task(key.task) || !out.space.task_maps[key.task].count(key.label)) {
      throw Error(Errc::ValidationError, "size row " + to_string(key) + " has no shared group");
    }
  }
  std::size_t max_labels = 0;
  for (const auto& task : out.table.tasks()) max_labels = std::max(max_labels, out.table.labels_of(task).size());
  if (static_cast<std::size_t>(std::max(out.space.n_star, 0)) < max_labels) {
    throw Error(Errc::ValidationError, "n_star " + std::to_string(out.space.n_star) +
                                           " is below the largest task label count " + std::to_string(max_labels));
  }
  const auto violations = validate_space(out.space);
  if (!violations.empty()) {
    throw Error(Errc::ValidationError, violations.front().subject + ": " + violations.front().detail);
  }
  return out;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot open '" + tmp.string() + "' for writing");
    out << text;
    if (!out) throw Error(Errc::IoError, "write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::IoError, "cannot rename onto '" + path.string() + "': " + ec.message());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_space(const std::filesystem::path& path, const SharedLabelSpace& space, const SizeTable& table) {
  const auto violations = validate_space(space);
  if (!violations.empty()) {
    throw Error(Errc::ValidationError, "refusing to save invalid space: " + violations.front().detail);
  }
  write_text_atomic(path, label_space_document(space, table).dump(2) + "\n");
}

inline LabelSpaceFile load_space(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, "'" + path.string() + "': " + e.what());
  }
  return parse_label_space(doc);
}

}  // namespace lsf
