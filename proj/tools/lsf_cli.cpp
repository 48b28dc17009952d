// lsf: command-line driver for the label-sharing pipeline.
//
// Workspace layout:
//   <ws>/datasets/<task>/{train,test}.json   task-local manifests (+ PGM payloads)
//   <ws>/datasets/unified/{train,test}.json  shared-domain union written by `remap`
//   <ws>/space.json                          shared label space and size table
//   <ws>/checkpoints/<mode>[_<task>].ckpt
//   <ws>/reports/<mode>.{csv,json}

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lsf/lsf.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitTaskTooLarge = 2;

struct Options {
  fs::path workspace = "ws";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::optional<int> epochs;
  std::string mode = "label_sharing";
  fs::path config;
};

fs::path datasets_dir(const Options& o) { return o.workspace / "datasets"; }
fs::path space_path(const Options& o) { return o.workspace / "space.json"; }
fs::path checkpoint_dir(const Options& o) { return o.workspace / "checkpoints"; }
fs::path reports_dir(const Options& o) { return o.workspace / "reports"; }
fs::path manifest_path(const Options& o, const lsf::TaskId& task, lsf::Split split) {
  return datasets_dir(o) / task / (std::string(lsf::to_string(split)) + ".json");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto piece = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

nlohmann::json read_config(const Options& o) {
  if (o.config.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(lsf::read_text(o.config));
  } catch (const nlohmann::json::exception& e) {
    throw lsf::Error(lsf::Errc::ParseError, "config '" + o.config.string() + "': " + e.what());
  }
}

// Model and training configuration: defaults, then the config file, then flags.
// Model and shuffle seeds are both derived from --seed.
std::pair<lsf::ModelConfig, lsf::TrainConfig> configs(const Options& o) {
  const auto doc = read_config(o);
  lsf::ModelConfig model = lsf::model_config_from_json(doc.value("model", nlohmann::json::object()));
  lsf::TrainConfig train = lsf::train_config_from_json(doc.value("train", nlohmann::json::object()));
  const std::uint64_t seed = o.seed_set ? o.seed : doc.value("seed", std::uint64_t{0});
  model.seed = lsf::derive_seed(seed, 1);
  train.seed = lsf::derive_seed(seed, 2);
  if (o.epochs) train.epochs = *o.epochs;
  train.mode = lsf::parse_train_mode(o.mode);
  train.validate();
  return {model, train};
}

lsf::Manifest load_task_manifest(const Options& o, const lsf::TaskId& task, lsf::Split split) {
  const auto path = manifest_path(o, task, split);
  if (!fs::exists(path)) throw lsf::Error(lsf::Errc::IoError, "no manifest at '" + path.string() + "'");
  return lsf::load_manifest(path);
}

lsf::Dataset load_task(const Options& o, const lsf::TaskId& task, lsf::Split split) {
  return lsf::load_dataset(load_task_manifest(o, task, split));
}

/// Task manifests may be named explicitly or by task id under the workspace.
lsf::Manifest resolve_manifest(const Options& o, const std::string& ref) {
  if (ref.size() > 5 && ref.substr(ref.size() - 5) == ".json") return lsf::load_manifest(ref);
  return load_task_manifest(o, ref, lsf::Split::Train);
}

struct Measured {
  lsf::TaskSpec spec;
  lsf::Manifest manifest;
};

Measured measure(const lsf::Manifest& manifest) {
  const lsf::Dataset data = lsf::load_dataset(manifest);
  return {lsf::task_spec_from(data, lsf::size_stats(data)), manifest};
}

void print_space(const lsf::SharedLabelSpace& space) {
  std::printf("%-4s %-12s %s\n", "k", "rep_size", "members");
  for (const auto& g : space.groups) {
    std::string members;
    for (const auto& m : g.members) members += (members.empty() ? "" : " ") + lsf::to_string(m);
    std::printf("%-4d %-12.6f %s\n", g.k, g.representative_size, members.c_str());
  }
}

std::string checkpoint_name(const std::string& mode, const lsf::TaskId& task = {}) {
  return task.empty() ? mode + ".ckpt" : mode + "_" + task + ".ckpt";
}

/// Every task must still be backed by the training manifest whose statistics were
/// recorded in the size table.
void check_provenance(const lsf::SizeTable& table, const lsf::TaskId& task, const lsf::Manifest& manifest) {
  const auto it = table.provenance.find(task);
  if (it != table.provenance.end() && !it->second.fingerprint.empty() && it->second.fingerprint != manifest.fingerprint) {
    throw lsf::Error(lsf::Errc::FingerprintMismatch,
                     "training data of task '" + task + "' changed since its sizes were recorded");
  }
}

std::vector<lsf::TaskId> task_list(const Options& o, const std::string& tasks_flag) {
  if (!tasks_flag.empty()) return split_list(tasks_flag);
  if (fs::exists(space_path(o))) return lsf::load_space(space_path(o)).space.tasks();
  throw lsf::Error(lsf::Errc::InvalidConfig, "no --tasks given and no space.json in the workspace");
}

// ---------------------------------------------------------------------------
// commands

int cmd_synth(const Options& o, const std::string& suite, const fs::path& spec_path, const fs::path& out,
              std::optional<std::size_t> n_train, std::optional<std::size_t> n_test) {
  const fs::path parent = fs::absolute(out).parent_path();
  if (!fs::is_directory(parent)) {
    throw lsf::Error(lsf::Errc::IoError, "output parent directory '" + parent.string() + "' does not exist");
  }
  std::vector<lsf::TaskGenSpec> specs;
  if (!spec_path.empty()) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(lsf::read_text(spec_path));
    } catch (const nlohmann::json::exception& e) {
      throw lsf::Error(lsf::Errc::ParseError, "spec '" + spec_path.string() + "': " + e.what());
    }
    const auto items = doc.is_array() ? doc : nlohmann::json::array({doc});
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto spec = lsf::task_gen_spec_from_json(items[i]);
      if (o.seed_set) spec.seed = lsf::derive_seed(o.seed, i);
      specs.push_back(spec);
    }
  } else {
    if (suite != "default") throw lsf::Error(lsf::Errc::InvalidConfig, "unknown suite '" + suite + "'");
    const auto s = lsf::default_suite(o.seed);
    specs = s.base;
    specs.push_back(s.incremental);
  }
  for (auto& spec : specs) {
    if (n_train) spec.n_train = *n_train;
    if (n_test) spec.n_test = *n_test;
    const auto [train, test] = lsf::generate_task(spec, out / "datasets" / spec.task_id);
    std::printf("%-10s train %zu (%s)  test %zu (%s)\n", spec.task_id.c_str(), train.entries.size(),
                train.fingerprint.c_str(), test.entries.size(), test.fingerprint.c_str());
  }
  return 0;
}

int cmd_stats(const Options& o, const std::vector<std::string>& refs) {
  for (const auto& ref : refs) {
    const auto m = resolve_manifest(o, ref);
    const auto data = lsf::load_dataset(m);
    const auto stats = lsf::size_stats(data);
    std::printf("task %s (%zu samples, %s)\n", m.task_id.c_str(), data.samples.size(), m.fingerprint.c_str());
    std::printf("  %-6s %-20s %-12s %-10s %s\n", "label", "name", "rel_size", "present", "mean_px");
    for (const auto& [label, s] : stats) {
      std::printf("  %-6d %-20s %-12.6f %-10zu %.1f\n", label, data.label_names.at(label).c_str(), s.avg_relative_size,
                  s.presence_count, s.mean_pixel_count);
    }
  }
  return 0;
}

int cmd_build_space(const Options& o, const std::vector<std::string>& refs, const fs::path& out) {
  if (refs.empty()) throw lsf::Error(lsf::Errc::EmptyInput, "build-space needs at least one task");
  lsf::SizeTable table;
  std::vector<lsf::TaskSpec> specs;
  for (const auto& ref : refs) {
    const auto measured = measure(resolve_manifest(o, ref));
    lsf::record_sizes(table, measured.spec, measured.manifest.fingerprint, measured.manifest.entries.size());
    specs.push_back(measured.spec);
  }
  const auto space = lsf::build_shared_space(specs, table);
  const fs::path target = out.empty() ? space_path(o) : out;
  if (!target.parent_path().empty()) fs::create_directories(target.parent_path());
  lsf::save_space(target, space, table);
  print_space(space);
  return 0;
}

int cmd_add_task(const Options& o, const std::string& ref) {
  auto file = lsf::load_space(space_path(o));
  const auto measured = measure(resolve_manifest(o, ref));
  if (file.space.has_task(measured.spec.task_id)) {
    throw lsf::Error(lsf::Errc::DuplicateTask, "task '" + measured.spec.task_id + "' is already registered");
  }
  lsf::SizeTable table = file.table;
  lsf::record_sizes(table, measured.spec, measured.manifest.fingerprint, measured.manifest.entries.size());
  const auto space = lsf::assign_task(file.space, measured.spec, table);
  lsf::save_space(space_path(o), space, table);
  print_space(space);
  return 0;
}

int cmd_remap(const Options& o) {
  const auto file = lsf::load_space(space_path(o));
  for (auto split : {lsf::Split::Train, lsf::Split::Test}) {
    std::vector<lsf::Dataset> sets;
    for (const auto& task : file.space.tasks()) sets.push_back(load_task(o, task, split));
    const auto merged = lsf::merge_datasets(sets, file.space);
    const auto dir = datasets_dir(o) / "unified";
    const auto manifest = lsf::write_dataset(merged, dir, lsf::to_string(split));
    lsf::save_manifest(dir / (std::string(lsf::to_string(split)) + ".json"), manifest);
    std::printf("unified %s: %zu samples (%s)\n", lsf::to_string(split), merged.samples.size(),
                manifest.fingerprint.c_str());
  }
  return 0;
}

void report_losses(const lsf::Checkpoint& ck, const fs::path& path) {
  for (const auto& phase : ck.history) {
    if (phase.epoch_losses.empty()) {
      std::printf("%s: %s (0 epochs)\n", path.string().c_str(), phase.name.c_str());
    } else {
      std::printf("%s: %s %zu epochs, loss %.4f -> %.4f\n", path.string().c_str(), phase.name.c_str(),
                  phase.epoch_losses.size(), phase.epoch_losses.front(), phase.epoch_losses.back());
    }
  }
}

int cmd_train(const Options& o, const std::string& tasks_flag) {
  auto [model, train] = configs(o);
  fs::create_directories(checkpoint_dir(o));
  switch (train.mode) {
    case lsf::TrainMode::LabelSharing: {
      const auto file = lsf::load_space(space_path(o));
      std::vector<lsf::Dataset> sets;
      for (const auto& task : file.space.tasks()) {
        const auto m = load_task_manifest(o, task, lsf::Split::Train);
        check_provenance(file.table, task, m);
        sets.push_back(lsf::load_dataset(m));
      }
      const auto merged = lsf::merge_datasets(sets, file.space);
      model.out_channels = file.space.n_star + 1;
      const auto ck = lsf::train(train, model, merged.samples, lsf::label_sharing_layout(file.space));
      const auto path = checkpoint_dir(o) / checkpoint_name("label_sharing");
      lsf::save_checkpoint(path, ck);
      report_losses(ck, path);
      return 0;
    }
    case lsf::TrainMode::Multichannel: {
      std::map<lsf::TaskId, std::vector<int>> labels;
      std::vector<lsf::Sample> samples;
      for (const auto& task : task_list(o, tasks_flag)) {
        auto data = load_task(o, task, lsf::Split::Train);
        labels[task] = lsf::labels_of(data);
        samples.insert(samples.end(), data.samples.begin(), data.samples.end());
      }
      const auto layout = lsf::multichannel_layout(labels);
      model.out_channels = layout.channels;
      const auto ck = lsf::train(train, model, samples, layout);
      const auto path = checkpoint_dir(o) / checkpoint_name("multichannel");
      lsf::save_checkpoint(path, ck);
      report_losses(ck, path);
      return 0;
    }
    case lsf::TrainMode::Individual: {
      for (const auto& task : task_list(o, tasks_flag)) {
        const auto data = load_task(o, task, lsf::Split::Train);
        const auto layout = lsf::individual_layout(task, lsf::labels_of(data));
        model.out_channels = layout.channels;
        const auto ck = lsf::train(train, model, data.samples, layout);
        const auto path = checkpoint_dir(o) / checkpoint_name("individual", task);
        lsf::save_checkpoint(path, ck);
        report_losses(ck, path);
      }
      return 0;
    }
    case lsf::TrainMode::LabelSharingIL:
      throw lsf::Error(lsf::Errc::InvalidConfig, "use train-il for incremental training");
  }
  return 0;
}

int cmd_train_il(const Options& o, const std::string& task, const fs::path& base_flag,
                 std::optional<int> finetune, std::optional<int> combined) {
  auto [model, train] = configs(o);
  if (finetune) train.il_finetune_epochs = *finetune;
  if (combined) train.il_combined_epochs = *combined;
  train.validate();
  const fs::path base_path = base_flag.empty() ? checkpoint_dir(o) / checkpoint_name("label_sharing") : base_flag;
  const auto base = lsf::load_checkpoint(base_path);
  const auto file = lsf::load_space(space_path(o));
  if (!file.space.has_task(task)) {
    throw lsf::Error(lsf::Errc::UnknownTask, "task '" + task + "' is not in space.json; run add-task first");
  }
  if (base.layout.has_task(task)) {
    throw lsf::Error(lsf::Errc::DuplicateTask, "base checkpoint already covers task '" + task + "'");
  }
  std::vector<lsf::Dataset> old_sets;
  for (const auto& old : base.layout.tasks()) old_sets.push_back(load_task(o, old, lsf::Split::Train));
  const auto new_manifest = load_task_manifest(o, task, lsf::Split::Train);
  check_provenance(file.table, task, new_manifest);
  const auto old_data = lsf::merge_datasets(old_sets, file.space);
  const auto new_data = lsf::merge_datasets({lsf::load_dataset(new_manifest)}, file.space);
  const auto ck = lsf::train_incremental(base, new_data.samples, old_data.samples, file.space, file.table, train);
  const auto path = checkpoint_dir(o) / checkpoint_name("label_sharing_il");
  lsf::save_checkpoint(path, ck);
  report_losses(ck, path);
  return 0;
}

void write_report(const Options& o, const lsf::Report& report, const std::string& name) {
  fs::create_directories(reports_dir(o));
  lsf::write_text_atomic(reports_dir(o) / (name + ".csv"), lsf::report_csv(report));
  lsf::write_text_atomic(reports_dir(o) / (name + ".json"), lsf::report_json(report).dump(2) + "\n");
  std::printf("%s", lsf::comparison_table({report}).c_str());
  std::printf("wrote %s\n", (reports_dir(o) / (name + ".{csv,json}")).string().c_str());
}

int cmd_eval(const Options& o, const fs::path& checkpoint_flag) {
  const auto mode = lsf::parse_train_mode(o.mode);
  if (mode == lsf::TrainMode::Individual && checkpoint_flag.empty()) {
    // one report across all per-task checkpoints
    lsf::Report report;
    report.mode = "individual";
    std::vector<fs::path> paths;
    if (fs::is_directory(checkpoint_dir(o))) {
      for (const auto& entry : fs::directory_iterator(checkpoint_dir(o))) {
        const auto name = entry.path().filename().string();
        if (name.rfind("individual_", 0) == 0 && entry.path().extension() == ".ckpt") paths.push_back(entry.path());
      }
    }
    if (paths.empty()) throw lsf::Error(lsf::Errc::IoError, "no individual checkpoints in the workspace");
    std::sort(paths.begin(), paths.end());
    for (const auto& path : paths) {
      const auto ck = lsf::load_checkpoint(path);
      std::vector<lsf::Dataset> tests;
      for (const auto& task : ck.layout.tasks()) tests.push_back(load_task(o, task, lsf::Split::Test));
      const auto part = lsf::evaluate(ck, tests);
      report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
    }
    report.aggregate();
    write_report(o, report, "individual");
    return 0;
  }
  const fs::path path = checkpoint_flag.empty() ? checkpoint_dir(o) / checkpoint_name(o.mode) : checkpoint_flag;
  const auto ck = lsf::load_checkpoint(path);
  std::vector<lsf::Dataset> tests;
  for (const auto& task : ck.layout.tasks()) tests.push_back(load_task(o, task, lsf::Split::Test));
  lsf::Report report;
  if (ck.train.mode == lsf::TrainMode::LabelSharing || ck.train.mode == lsf::TrainMode::LabelSharingIL) {
    // checkpoints trained before a later add-task still evaluate on their own tasks
    const auto file = lsf::load_space(space_path(o));
    const auto tasks = ck.layout.tasks();
    const std::set<lsf::TaskId> covered(tasks.begin(), tasks.end());
    report = lsf::evaluate(ck, tests, lsf::restrict_space(file.space, covered, file.table));
  } else {
    report = lsf::evaluate(ck, tests);
  }
  write_report(o, report, path.stem().string());
  return 0;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& metric, const fs::path& out) {
  std::vector<lsf::Report> reports;
  for (const auto& p : paths) {
    try {
      reports.push_back(lsf::report_from_json(nlohmann::json::parse(lsf::read_text(p))));
    } catch (const nlohmann::json::exception& e) {
      throw lsf::Error(lsf::Errc::ParseError, "report '" + p + "': " + e.what());
    }
  }
  const std::string table = lsf::comparison_table(reports, lsf::parse_metric(metric));
  std::printf("%s", table.c_str());
  if (!out.empty()) lsf::write_text_atomic(out, table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label sharing for independent multi-label segmentation tasks"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--workspace,-w", o.workspace, "workspace directory")->capture_default_str();
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { o.seed = s, o.seed_set = true; }, "random seed");
  };
  auto add_training = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "JSON file with \"model\" and \"train\" sections")->check(CLI::ExistingFile);
    cmd->add_option_function<int>("--epochs", [&](const int& e) { o.epochs = e; }, "training epochs");
  };

  std::string suite = "default";
  fs::path spec_path, out;
  std::optional<std::size_t> n_train, n_test;
  auto* synth = app.add_subcommand("synth", "generate synthetic tasks into <out>/datasets");
  add_common(synth);
  synth->add_option("--suite", suite, "built-in suite")->capture_default_str();
  synth->add_option("--spec", spec_path, "task spec JSON (object or array)");
  synth->add_option("--out", out, "output workspace")->required();
  synth->add_option_function<std::size_t>("--n-train", [&](const std::size_t& n) { n_train = n; });
  synth->add_option_function<std::size_t>("--n-test", [&](const std::size_t& n) { n_test = n; });

  std::vector<std::string> refs;
  auto* stats = app.add_subcommand("stats", "print per-label size statistics");
  add_common(stats);
  stats->add_option("tasks", refs, "task ids or manifest paths")->required();

  fs::path space_out;
  auto* build = app.add_subcommand("build-space", "build the shared label space from task manifests");
  add_common(build);
  build->add_option("tasks", refs, "task ids or train manifest paths")->required();
  build->add_option("--out", space_out, "space file (default <ws>/space.json)");

  std::string task;
  auto* add = app.add_subcommand("add-task", "map a new task onto the existing space");
  add_common(add);
  add->add_option("task", task, "task id or train manifest path")->required();

  auto* remap = app.add_subcommand("remap", "write the shared-domain union of all registered tasks");
  add_common(remap);

  std::string tasks_flag;
  auto* train = app.add_subcommand("train", "train a model");
  add_common(train);
  add_training(train);
  train->add_option("--mode", o.mode, "individual | multichannel | label_sharing")->capture_default_str();
  train->add_option("--tasks", tasks_flag, "comma-separated tasks (individual/multichannel)");

  fs::path base;
  std::optional<int> finetune, combined;
  auto* train_il = app.add_subcommand("train-il", "add a task to a trained label-sharing model");
  add_common(train_il);
  add_training(train_il);
  train_il->add_option("--task", task, "task added with add-task")->required();
  train_il->add_option("--base", base, "base checkpoint (default <ws>/checkpoints/label_sharing.ckpt)");
  train_il->add_option_function<int>("--finetune-epochs", [&](const int& e) { finetune = e; });
  train_il->add_option_function<int>("--combined-epochs", [&](const int& e) { combined = e; });

  fs::path checkpoint;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test splits");
  add_common(eval);
  eval->add_option("--mode", o.mode, "individual | multichannel | label_sharing | label_sharing_il")
      ->capture_default_str();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default from --mode)");

  std::vector<std::string> report_paths;
  std::string metric = "dice";
  fs::path table_out;
  auto* report = app.add_subcommand("report", "compare evaluation reports");
  report->add_option("reports", report_paths, "report JSON files")->required();
  report->add_option("--metric", metric, "dice | hausdorff | normalized_hausdorff")->capture_default_str();
  report->add_option("--out", table_out, "also write the table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitFailure;
  }

  try {
    if (*synth) return cmd_synth(o, suite, spec_path, out, n_train, n_test);
    if (*stats) return cmd_stats(o, refs);
    if (*build) return cmd_build_space(o, refs, space_out);
    if (*add) return cmd_add_task(o, task);
    if (*remap) return cmd_remap(o);
    if (*train) return cmd_train(o, tasks_flag);
    if (*train_il) return cmd_train_il(o, task, base, finetune, combined);
    if (*eval) return cmd_eval(o, checkpoint);
    if (*report) return cmd_report(report_paths, metric, table_out);
  } catch (const lsf::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.code() == lsf::Errc::TaskTooLarge ? kExitTaskTooLarge : kExitFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
