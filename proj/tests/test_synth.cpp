#include <gtest/gtest.h>

#include <filesystem>

#include "lsf/data.hpp"
#include "lsf/synth.hpp"
#include "oracles.hpp"

namespace {

using lsf::ShapeKind;
using lsf::Split;
using lsf::TaskGenSpec;

TaskGenSpec one_disk() {
  TaskGenSpec spec;
  spec.task_id = "disk";
  spec.n_labels = 1;
  spec.shape_kinds = {ShapeKind::Disk};
  spec.size_scales = {0.1};
  spec.intensity.label_contrast = {1000};
  spec.n_train = 50;
  spec.n_test = 5;
  spec.seed = 17;
  return spec;
}

TEST(Synth, SingleDiskHasExpectedArea) {
  const auto d = lsf::generate_dataset(one_disk(), Split::Train);
  ASSERT_EQ(d.samples.size(), 50u);
  for (const auto& s : d.samples) {
    const auto counts = oracle::count_pixels(s.mask);
    ASSERT_EQ(counts.size(), 2u);
    EXPECT_NEAR(static_cast<double>(counts.at(1)), 409.6, 0.2 * 409.6);
  }
}

TEST(Synth, SameSeedSameBytes) {
  const auto spec = lsf::default_suite(42).base[1];
  const auto a = lsf::generate_dataset(spec, Split::Test);
  const auto b = lsf::generate_dataset(spec, Split::Test);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].mask, b.samples[i].mask);
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
  }
  auto other = spec;
  other.seed += 1;
  EXPECT_NE(lsf::generate_dataset(other, Split::Test).samples[0].mask, a.samples[0].mask);
}

TEST(Synth, WrittenTasksAreByteIdentical) {
  const auto root = std::filesystem::temp_directory_path() / "lsf_synth_bytes";
  std::filesystem::remove_all(root);
  auto spec = lsf::default_suite(42).incremental;
  spec.n_train = 6;
  spec.n_test = 2;
  const auto [train_a, test_a] = lsf::generate_task(spec, root / "a");
  const auto [train_b, test_b] = lsf::generate_task(spec, root / "b");
  EXPECT_EQ(train_a.fingerprint, train_b.fingerprint);
  EXPECT_EQ(test_a.fingerprint, test_b.fingerprint);
  EXPECT_EQ(lsf::read_text(root / "a" / "train.json"), lsf::read_text(root / "b" / "train.json"));
  std::filesystem::remove_all(root);
}

TEST(Synth, SuiteStructure) {
  const auto suite = lsf::default_suite(42);
  ASSERT_EQ(suite.base.size(), 3u);
  EXPECT_EQ(suite.base[0].n_labels, 5);
  EXPECT_EQ(suite.base[1].n_labels, 5);
  EXPECT_EQ(suite.base[2].n_labels, 4);
  EXPECT_EQ(suite.incremental.n_labels, 3);
}

class SuiteData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    auto suite = lsf::default_suite(42);
    for (auto spec : suite.base) {
      spec.n_train = 120;
      specs_.push_back(spec);
      sets_.push_back(lsf::generate_dataset(spec, Split::Train));
    }
    auto inc = suite.incremental;
    inc.n_train = 120;
    specs_.push_back(inc);
    sets_.push_back(lsf::generate_dataset(inc, Split::Train));
  }
  static std::vector<TaskGenSpec> specs_;
  static std::vector<lsf::Dataset> sets_;
};

std::vector<TaskGenSpec> SuiteData::specs_;
std::vector<lsf::Dataset> SuiteData::sets_;

TEST_F(SuiteData, EveryLabelInEverySample) {
  for (std::size_t t = 0; t < sets_.size(); ++t) {
    for (const auto& s : sets_[t].samples) {
      const auto counts = oracle::count_pixels(s.mask);
      for (int l = 1; l <= specs_[t].n_labels; ++l) EXPECT_GT(counts.count(l), 0u) << specs_[t].task_id << " " << l;
      EXPECT_EQ(counts.rbegin()->first, specs_[t].n_labels);
    }
  }
}

TEST_F(SuiteData, MeanAreaNearTarget) {
  for (std::size_t t = 0; t < sets_.size(); ++t) {
    const double pixels = static_cast<double>(specs_[t].height * specs_[t].width);
    std::map<int, double> area;
    for (const auto& s : sets_[t].samples)
      for (const auto& [l, c] : oracle::count_pixels(s.mask)) area[l] += static_cast<double>(c);
    for (int l = 1; l <= specs_[t].n_labels; ++l) {
      const double mean = area[l] / static_cast<double>(sets_[t].samples.size()) / pixels;
      const double target = specs_[t].size_scales[static_cast<std::size_t>(l - 1)];
      EXPECT_NEAR(mean, target, 0.25 * target) << specs_[t].task_id << " label " << l;
    }
  }
}

TEST_F(SuiteData, MeasuredRankingMatchesSpec) {
  for (std::size_t t = 0; t < sets_.size(); ++t) {
    const auto stats = lsf::size_stats(sets_[t]);
    const auto& target = specs_[t].size_scales;
    for (int a = 1; a <= specs_[t].n_labels; ++a) {
      for (int b = 1; b <= specs_[t].n_labels; ++b) {
        if (target[static_cast<std::size_t>(a - 1)] > target[static_cast<std::size_t>(b - 1)]) {
          EXPECT_GT(stats.at(a).avg_relative_size, stats.at(b).avg_relative_size) << specs_[t].task_id;
        }
      }
    }
  }
}

TEST_F(SuiteData, SharedSpaceAndIncrementalAddition) {
  lsf::SizeTable table;
  std::vector<lsf::TaskSpec> tasks;
  for (std::size_t t = 0; t < 4; ++t) {
    const auto spec = lsf::task_spec_from(sets_[t], lsf::size_stats(sets_[t]));
    lsf::record_sizes(table, spec, "", sets_[t].samples.size());
    tasks.push_back(spec);
  }
  const auto space = lsf::build_shared_space({tasks[0], tasks[1], tasks[2]}, table);
  EXPECT_EQ(space.n_star, 5);
  const auto next = lsf::assign_task(space, tasks[3], table);
  int extended = 0;
  for (const auto& g : space.groups) extended += next.find_group(g.k)->members.size() > g.members.size() ? 1 : 0;
  EXPECT_EQ(extended, 3);
}

TEST(Synth, RingAndCrossShapes) {
  auto spec = one_disk();
  spec.n_labels = 2;
  spec.shape_kinds = {ShapeKind::Ring, ShapeKind::Cross};
  spec.size_scales = {0.08, 0.04};
  spec.intensity.label_contrast = {500, 900};
  spec.n_train = 20;
  const auto d = lsf::generate_dataset(spec, Split::Train);
  for (const auto& s : d.samples) {
    const auto counts = oracle::count_pixels(s.mask);
    EXPECT_NEAR(static_cast<double>(counts.at(1)), 0.08 * 4096, 0.2 * 0.08 * 4096);
    EXPECT_NEAR(static_cast<double>(counts.at(2)), 0.04 * 4096, 0.2 * 0.04 * 4096);
  }
}

TEST(Synth, InvalidAndOverDenseSpecs) {
  auto bad = one_disk();
  bad.size_scales = {0.7};
  EXPECT_THROW(bad.validate(), lsf::Error);
  auto dup = one_disk();
  dup.n_labels = 2;
  dup.shape_kinds = {ShapeKind::Disk, ShapeKind::Disk};
  dup.size_scales = {0.1, 0.1};
  dup.intensity.label_contrast = {1, 2};
  EXPECT_THROW(dup.validate(), lsf::Error);

  auto dense = one_disk();
  dense.n_labels = 4;
  dense.shape_kinds = {ShapeKind::Disk, ShapeKind::Disk, ShapeKind::Disk, ShapeKind::Disk};
  dense.size_scales = {0.5, 0.45, 0.4, 0.35};
  dense.intensity.label_contrast = {1, 2, 3, 4};
  dense.max_attempts = 20;
  try {
    lsf::generate_sample(dense, Split::Train, 0);
    FAIL() << "expected PlacementFailure";
  } catch (const lsf::Error& e) {
    EXPECT_EQ(e.code(), lsf::Errc::PlacementFailure);
  }
}

TEST(Synth, SpecJsonRoundTrip) {
  const auto spec = lsf::default_suite(7).base[2];
  const auto back = lsf::task_gen_spec_from_json(lsf::to_json(spec));
  EXPECT_EQ(lsf::to_json(back), lsf::to_json(spec));
  EXPECT_EQ(lsf::generate_sample(back, Split::Test, 3).mask, lsf::generate_sample(spec, Split::Test, 3).mask);
}

}  // namespace
