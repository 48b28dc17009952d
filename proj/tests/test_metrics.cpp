#include <gtest/gtest.h>

#include <cmath>

#include "lsf/metrics.hpp"
#include "lsf/rng.hpp"
#include "oracles.hpp"

namespace {

using lsf::BinaryMask;
using lsf::Mask;
using lsf::Metric;

BinaryMask random_binary(lsf::Rng& rng, std::size_t h, std::size_t w, double density) {
  BinaryMask m(h, w);
  for (auto& v : m) v = rng.uniform() < density ? 1 : 0;
  return m;
}

bool any(const BinaryMask& m) {
  return std::any_of(m.begin(), m.end(), [](auto v) { return v != 0; });
}

// ---------------------------------------------------------------------------
// dice

TEST(Dice, IdenticalDisjointAndEmpty) {
  Mask a(4, 4), b(4, 4);
  a(0, 0) = a(0, 1) = 1;
  b(3, 3) = 1;
  EXPECT_EQ(lsf::dice(a, a, 1), 1.0);
  EXPECT_EQ(lsf::dice(a, b, 1), 0.0);
  EXPECT_EQ(lsf::dice(a, b, 2), 1.0);  // both empty
  EXPECT_EQ(lsf::dice(Mask(4, 4), a, 1), 0.0);
  EXPECT_THROW(lsf::dice(Mask(3, 4), a, 1), lsf::Error);
}

TEST(Dice, ShiftedBlock) {
  Mask a(4, 4), b(4, 4);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      a(y, x) = 1;
      b(y, x + 1) = 1;
    }
  std::size_t both = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    na += a.data()[i] == 1;
    nb += b.data()[i] == 1;
    both += a.data()[i] == 1 && b.data()[i] == 1;
  }
  ASSERT_EQ(both, 2u);
  EXPECT_EQ(lsf::dice(a, b, 1), 2.0 * static_cast<double>(both) / static_cast<double>(na + nb));
  EXPECT_EQ(lsf::dice(a, b, 1), 0.5);
}

TEST(Dice, Symmetric) {
  lsf::Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    Mask a(9, 7), b(9, 7);
    for (auto& v : a) v = static_cast<std::uint16_t>(rng.below(3));
    for (auto& v : b) v = static_cast<std::uint16_t>(rng.below(3));
    for (int l = 0; l < 3; ++l) EXPECT_EQ(lsf::dice(a, b, l), lsf::dice(b, a, l));
  }
}

// ---------------------------------------------------------------------------
// distance transform

TEST(DistanceTransform, SinglePixelCorner) {
  BinaryMask m(3, 3);
  m(0, 0) = 1;
  const auto d = lsf::distance_transform(m);
  const double want[3][3] = {{0, 1, 2}, {1, std::sqrt(2.0), std::sqrt(5.0)}, {2, std::sqrt(5.0), std::sqrt(8.0)}};
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) EXPECT_EQ(d(y, x), want[y][x]);
}

TEST(DistanceTransform, AllForeground) {
  const auto d = lsf::distance_transform(BinaryMask(5, 4, 1));
  for (double v : d) EXPECT_EQ(v, 0.0);
}

TEST(DistanceTransform, MatchesBruteForceExactly) {
  lsf::Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const auto m = random_binary(rng, 1 + rng.below(16), 1 + rng.below(16), rng.uniform(0.01, 0.5));
    if (!any(m)) continue;
    EXPECT_EQ(lsf::distance_transform(m), oracle::brute_distance_transform(m)) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------
// hausdorff

TEST(Hausdorff, Basics) {
  lsf::Rng rng(3);
  const auto m = random_binary(rng, 8, 8, 0.3);
  EXPECT_EQ(lsf::hausdorff(m, m), 0.0);
  EXPECT_EQ(lsf::hausdorff(std::vector<lsf::Pixel>{{0, 0}}, std::vector<lsf::Pixel>{{3, 4}}), 5.0);
  EXPECT_THROW(lsf::hausdorff(BinaryMask(4, 4), m), lsf::Error);
  try {
    lsf::hausdorff(std::vector<lsf::Pixel>{}, std::vector<lsf::Pixel>{{1, 1}});
    FAIL();
  } catch (const lsf::Error& e) {
    EXPECT_EQ(e.code(), lsf::Errc::EmptySet);
  }
}

TEST(Hausdorff, MatchesBruteForceAndIsSymmetric) {
  lsf::Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t h = 1 + rng.below(16), w = 1 + rng.below(16);
    const auto a = random_binary(rng, h, w, rng.uniform(0.02, 0.4));
    const auto b = random_binary(rng, h, w, rng.uniform(0.02, 0.4));
    if (!any(a) || !any(b)) continue;
    EXPECT_EQ(lsf::hausdorff(a, b), oracle::brute_hausdorff(a, b));
    EXPECT_EQ(lsf::hausdorff(a, b), lsf::hausdorff(b, a));
  }
}

TEST(NormalizedHausdorff, Values) {
  EXPECT_EQ(lsf::normalized_hausdorff(0.0, 64, 64), 0.0);
  EXPECT_DOUBLE_EQ(lsf::normalized_hausdorff(std::sqrt(8192.0), 64, 64), 1.0);
  EXPECT_NEAR(lsf::normalized_hausdorff(5.0, 64, 64), 5.0 / std::sqrt(8192.0), 1e-15);
  EXPECT_NEAR(lsf::normalized_hausdorff(5.0, 64, 64), 0.05524, 1e-5);
  EXPECT_EQ(lsf::normalized_hausdorff(1e6, 64, 64), 1.0);
}

// ---------------------------------------------------------------------------
// reports

std::vector<std::pair<Mask, Mask>> gt_pairs(lsf::Rng& rng, int labels, int count, bool predict_gt) {
  std::vector<std::pair<Mask, Mask>> pairs;
  for (int i = 0; i < count; ++i) {
    Mask gt(12, 12);
    for (auto& v : gt) v = static_cast<std::uint16_t>(rng.below(static_cast<std::uint64_t>(labels) + 1));
    pairs.emplace_back(predict_gt ? gt : Mask(12, 12), gt);
  }
  return pairs;
}

TEST(Evaluate, GroundTruthAsPrediction) {
  lsf::Rng rng(5);
  const std::map<int, std::string> names{{1, "a"}, {2, "b"}, {3, "c"}};
  const auto rows = lsf::evaluate_masks("t", names, gt_pairs(rng, 3, 4, true));
  ASSERT_EQ(rows.size(), 9u);
  for (const auto& r : rows) {
    ASSERT_TRUE(r.value.has_value());
    EXPECT_EQ(*r.value, r.metric == Metric::Dice ? 1.0 : 0.0);
    EXPECT_EQ(r.failures, 0u);
  }
}

TEST(Evaluate, AllBackgroundPrediction) {
  lsf::Rng rng(6);
  const std::map<int, std::string> names{{1, "a"}, {2, "b"}};
  const auto rows = lsf::evaluate_masks("t", names, gt_pairs(rng, 2, 3, false));
  for (const auto& r : rows) {
    if (r.metric == Metric::Dice) {
      EXPECT_EQ(*r.value, 0.0);
    } else {
      EXPECT_FALSE(r.value.has_value());
      EXPECT_EQ(r.failures, 3u);
    }
  }
  lsf::Report report{"x", rows, {}};
  report.aggregate();
  EXPECT_FALSE(report.task_mean("t", Metric::Hausdorff).has_value());
  EXPECT_EQ(report.task_mean("t", Metric::Dice), 0.0);
  const std::string csv = lsf::report_csv(report);
  EXPECT_NE(csv.find("t,1,hausdorff,,0\n"), std::string::npos);
}

TEST(Evaluate, RowCountsAndAggregates) {
  lsf::Rng rng(7);
  lsf::Report report;
  report.mode = "m";
  const std::map<std::string, int> tasks{{"p", 5}, {"q", 4}, {"r", 3}};
  for (const auto& [task, n] : tasks) {
    std::map<int, std::string> names;
    for (int l = 1; l <= n; ++l) names[l] = "l";
    auto pairs = gt_pairs(rng, n, 5, true);
    for (auto& [pred, gt] : pairs)
      for (auto& v : pred) v = rng.uniform() < 0.3 ? static_cast<std::uint16_t>(rng.below(static_cast<std::uint64_t>(n) + 1)) : v;
    const auto rows = lsf::evaluate_masks(task, names, pairs);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  report.aggregate();
  for (auto metric : {Metric::Dice, Metric::Hausdorff, Metric::NormalizedHausdorff}) {
    std::size_t count = 0;
    for (const auto& r : report.rows) count += r.metric == metric;
    EXPECT_EQ(count, 12u);
  }
  for (const auto& [task, n] : tasks) {
    for (auto metric : {Metric::Dice, Metric::Hausdorff, Metric::NormalizedHausdorff}) {
      double sum = 0;
      int defined = 0;
      for (const auto& r : report.rows)
        if (r.task_id == task && r.metric == metric && r.value) sum += *r.value, ++defined;
      ASSERT_GT(defined, 0);
      EXPECT_DOUBLE_EQ(*report.task_mean(task, metric), sum / defined);
    }
  }

  const auto back = lsf::report_from_json(lsf::report_json(report));
  EXPECT_EQ(lsf::report_csv(back), lsf::report_csv(report));
  const std::string table = lsf::comparison_table({report, back});
  EXPECT_NE(table.find("| method | p | q | r |"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
}

TEST(Evaluate, CheckpointOnSharedSpace) {
  // an untrained label-sharing model still yields one row per (task, label, metric)
  lsf::SizeTable table;
  std::vector<lsf::TaskSpec> specs;
  for (const auto& [id, sizes] : std::map<std::string, std::vector<double>>{{"a", {0.6, 0.4}}, {"b", {0.9}}}) {
    lsf::TaskSpec t{id, id, {}};
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      t.labels.push_back({id, static_cast<int>(i) + 1, "", sizes[i]});
      table.set(id, static_cast<int>(i) + 1, sizes[i]);
    }
    specs.push_back(t);
  }
  const auto space = lsf::build_shared_space(specs, table);
  lsf::Checkpoint ck;
  ck.model.depth = 2;
  ck.model.base_width = 2;
  ck.model.out_channels = space.n_star + 1;
  ck.layout = lsf::label_sharing_layout(space);
  lsf::Network<lsf::Real> net(ck.model);
  ck.weights.assign(net.parameters().begin(), net.parameters().end());

  lsf::Rng rng(8);
  std::vector<lsf::Dataset> tests;
  for (const auto& [id, n] : std::map<std::string, int>{{"a", 2}, {"b", 1}}) {
    lsf::Dataset d;
    d.task_id = id;
    for (int l = 1; l <= n; ++l) d.label_names[l] = "l";
    for (int i = 0; i < 2; ++i) {
      lsf::Image img(8, 8);
      for (auto& v : img) v = rng.uniform(0, 100);
      Mask m(8, 8);
      m(1, 1) = 1;
      d.samples.push_back({img, m, id, lsf::LabelDomain::TaskLocal});
    }
    tests.push_back(d);
  }
  const auto report = lsf::evaluate(ck, tests, space);
  EXPECT_EQ(report.rows.size(), 9u);

  auto other = space;
  other.groups[0].representative_size += 0.01;
  EXPECT_THROW(lsf::evaluate(ck, tests, other), lsf::Error);
}

}  // namespace
