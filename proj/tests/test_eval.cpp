#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tfa/eval.hpp"

using namespace tfa;
using tfa::testing::random_tensor;

namespace {

std::size_t kept_pixels(const Tensor& masked, double fill) {
  const std::size_t hw = masked.dim(1) * masked.dim(2);
  std::size_t n = 0;
  for (std::size_t p = 0; p < hw; ++p) n += masked[p] != fill;
  return n;
}

struct SmallSetup {
  Splits data;
  Model model{ArchitectureSpec::tiny_cnn(3, 8, 8, 2)};
  ParamVector params;

  SmallSetup() {
    SyntheticShapesSpec spec;
    spec.image_size = 8;
    spec.train_count = 60;
    spec.holdout_count = 20;
    spec.test_count = 10;
    spec.seed = 31;
    data = generate_synthetic(spec);
    TrainConfig cfg;
    cfg.learning_rate = 0.2;
    cfg.epochs = 3;
    cfg.seed = 31;
    params = train(data.train, model.arch, cfg).params;
  }
};

}  // namespace

TEST(MaskInsert, FullRetentionLeavesImageUnchanged) {
  Rng rng = make_rng(30, "mask");
  const Tensor x = random_tensor({3, 6, 5}, rng, 0, 1);
  const ImportanceGrid grid{random_tensor({6, 5}, rng, 0, 1)};
  for (InsertMode mode : {InsertMode::kTopK, InsertMode::kRandom}) {
    EXPECT_EQ(mask_insert(x, grid, 100, {0.5, 0.5, 0.5}, mode, 7), x);
  }
}

TEST(MaskInsert, RejectsPercentOutsideRange) {
  const Tensor x(Shape{1, 2, 2}, 0.5);
  const ImportanceGrid grid{Tensor(Shape{2, 2})};
  EXPECT_THROW(mask_insert(x, grid, 0, {0.0}, InsertMode::kTopK, 0), InvalidArgument);
  EXPECT_THROW(mask_insert(x, grid, 100.5, {0.0}, InsertMode::kTopK, 0), InvalidArgument);
  EXPECT_THROW(mask_insert(x, grid, 50, {0.0, 0.0}, InsertMode::kTopK, 0), ShapeError);
}

TEST(MaskInsert, RetainsCeilingOfPercentOfPixels) {
  Rng rng = make_rng(31, "count");
  for (std::size_t side : {10u, 32u, 7u}) {
    const Tensor x = random_tensor({3, side, side}, rng, 0, 1);
    const ImportanceGrid grid{random_tensor({side, side}, rng, 0, 1)};
    for (double k = 10; k <= 100; k += 10) {
      const auto expected = static_cast<std::size_t>(std::ceil(k * side * side / 100.0));
      for (InsertMode mode : {InsertMode::kTopK, InsertMode::kRandom}) {
        const Tensor m = mask_insert(x, grid, k, {-1, -1, -1}, mode, 3);
        EXPECT_EQ(kept_pixels(m, -1), expected) << side << " " << k;
      }
    }
  }
}

TEST(MaskInsert, TopKFollowsGridWithIndexTieBreak) {
  const Tensor x(Shape{2, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  const ImportanceGrid grid{Tensor(Shape{2, 3}, std::vector<double>{0, 5, 0, 5, 0, 0})};
  EXPECT_EQ(mask_insert(x, grid, 50, {0, -1}, InsertMode::kTopK, 0),
            Tensor(Shape{2, 2, 3}, std::vector<double>{1, 2, 0, 4, 0, 0, 7, 8, -1, 10, -1, -1}));
}

TEST(MaskInsert, RandomModeIsSeeded) {
  Rng rng = make_rng(32, "rand");
  const Tensor x = random_tensor({1, 8, 8}, rng, 0, 1);
  const ImportanceGrid grid{Tensor(Shape{8, 8})};
  EXPECT_EQ(mask_insert(x, grid, 30, {-1}, InsertMode::kRandom, 5),
            mask_insert(x, grid, 30, {-1}, InsertMode::kRandom, 5));
  EXPECT_NE(mask_insert(x, grid, 30, {-1}, InsertMode::kRandom, 5),
            mask_insert(x, grid, 30, {-1}, InsertMode::kRandom, 6));
}

TEST(Intervention, ZeroStepChangesNothing) {
  SmallSetup s;
  const ParamVector before = s.params;
  EXPECT_EQ(intervention_delta(s.model, s.params, s.data.train[0], s.data.test[0], 0.0), 0.0);
  EXPECT_EQ(s.params.flat, before.flat);
}

TEST(Intervention, StepOnTheTestExampleLowersItsLoss) {
  SmallSetup s;
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_LT(intervention_delta(s.model, s.params, s.data.test[i], s.data.test[i], 1e-4), 0.0);
  }
}

TEST(PairedAggregation, MeansAndInterval) {
  const PairedResult r = aggregate_pairs(20, {1, 2, 3, 6}, {0, 0, 1, 2});
  EXPECT_DOUBLE_EQ(r.mean_topk, 3.0);
  EXPECT_DOUBLE_EQ(r.mean_random, 0.75);
  EXPECT_DOUBLE_EQ(r.mean_diff, 2.25);
  // differences 1, 2, 2, 4: sample variance 4.75 / 3
  EXPECT_NEAR(r.ci_half_width, 1.96 * std::sqrt(4.75 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(r.pairs, 4u);
  const PairedResult swapped = aggregate_pairs(20, {0, 0, 1, 2}, {1, 2, 3, 6});
  EXPECT_EQ(swapped.mean_diff, -r.mean_diff);
  EXPECT_EQ(swapped.ci_half_width, r.ci_half_width);
  EXPECT_THROW(aggregate_pairs(20, {}, {}), InvalidArgument);
}

TEST(InsertionExperiment, FullRetentionRowIsExactlyZeroAndRunsAreReproducible) {
  SmallSetup s;
  InsertionConfig cfg;
  cfg.k_percents = {20, 100};
  cfg.test_count = 3;
  cfg.top_m = 2;
  cfg.smoothing = {0.05, 3, 0, 1};
  cfg.seed = 4;
  const InsertionOutcome a = paired_insertion_experiment(s.model, s.params, s.data.holdout, s.data.test, cfg);
  ASSERT_EQ(a.results.size(), 2u);
  EXPECT_EQ(a.results[1].mean_diff, 0.0);
  EXPECT_EQ(a.results[1].ci_half_width, 0.0);
  EXPECT_EQ(a.results[0].pairs, 6u);
  EXPECT_EQ(a.pairs.size(), 12u);

  cfg.threads = 3;
  const InsertionOutcome b = paired_insertion_experiment(s.model, s.params, s.data.holdout, s.data.test, cfg);
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    EXPECT_EQ(a.pairs[i].delta_topk, b.pairs[i].delta_topk);
    EXPECT_EQ(a.pairs[i].delta_random, b.pairs[i].delta_random);
  }
  EXPECT_EQ(a.results[0].mean_diff, b.results[0].mean_diff);
}

TEST(InsertionExperiment, RejectsEmptyInputsAndBadConfig) {
  SmallSetup s;
  InsertionConfig cfg;
  EXPECT_THROW(paired_insertion_experiment(s.model, s.params, {}, s.data.test, cfg), InvalidArgument);
  cfg.top_m = 0;
  EXPECT_THROW(paired_insertion_experiment(s.model, s.params, s.data.holdout, s.data.test, cfg), InvalidArgument);
  cfg.top_m = 1;
  cfg.k_percents = {0};
  EXPECT_THROW(paired_insertion_experiment(s.model, s.params, s.data.holdout, s.data.test, cfg), InvalidArgument);
}

TEST(Explain, ReportOrderingAndClipping) {
  SmallSetup s;
  ExplainConfig cfg;
  cfg.count = 100;
  cfg.smoothing = {0.0, 1, 0, 1};
  const Dataset small(s.data.train.begin(), s.data.train.begin() + 6);
  const MisclassificationReport rep = explain_misclassification(s.model, s.params, small, s.data.test[0], cfg);
  EXPECT_EQ(rep.helpful.size(), 6u);
  EXPECT_EQ(rep.harmful.size(), 6u);
  EXPECT_EQ(rep.correctly_classified, rep.predicted_label == rep.true_label);
  for (std::size_t i = 1; i < rep.harmful.size(); ++i) {
    EXPECT_LE(rep.harmful[i - 1].record.score, rep.harmful[i].record.score);
    EXPECT_GE(rep.helpful[i - 1].record.score, rep.helpful[i].record.score);
  }
  EXPECT_LE(rep.harmful.front().record.score, rep.helpful.front().record.score);
  EXPECT_EQ(rep.harmful.front().map.values.shape(), s.data.train[0].x.shape());
}

TEST(Explain, CorrectlyClassifiedInputIsFlagged) {
  SmallSetup s;
  for (const auto& z : s.data.test) {
    if (predict(s.model, s.params, z.x) != z.y) continue;
    ExplainConfig cfg;
    cfg.count = 2;
    cfg.smoothing = {0.0, 1, 0, 1};
    const auto rep = explain_misclassification(s.model, s.params, s.data.train, z, cfg);
    EXPECT_TRUE(rep.correctly_classified);
    EXPECT_EQ(rep.harmful.size(), 2u);
    return;
  }
  GTEST_SKIP() << "no correctly classified test image";
}

TEST(Explain, PlantedFlippedDuplicateIsHarmful) {
  SmallSetup s;
  const LabeledExample z = s.data.test[1];
  Dataset planted = s.data.train;
  LabeledExample dup{z.x, 1 - z.y};
  Rng rng = make_rng(33, "dup");
  for (double& v : dup.x.data()) v = std::clamp(v + 0.01 * standard_normal(rng), 0.0, 1.0);
  planted.push_back(dup);
  ExplainConfig cfg;
  cfg.count = 5;
  cfg.smoothing = {0.0, 1, 0, 1};
  const auto rep = explain_misclassification(s.model, s.params, planted, z, cfg);
  bool found = false;
  for (const auto& e : rep.harmful) {
    if (e.record.train_index == planted.size() - 1) {
      found = true;
      EXPECT_LT(e.record.score, 0.0);
    }
  }
  EXPECT_TRUE(found);
}

TEST(Patch, FractionZeroLeavesDatasetUnchanged) {
  SmallSetup s;
  PatchSpec spec;
  spec.size = 3;
  const Dataset out = make_patched_dataset(s.data.train, spec);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i].x, s.data.train[i].x);
}

TEST(Patch, FractionOnePatchesEveryTargetImage) {
  SmallSetup s;
  PatchSpec spec;
  spec.size = 3;
  spec.fraction = 1.0;
  spec.target_class = 1;
  const Dataset out = make_patched_dataset(s.data.train, spec);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (s.data.train[i].y != 1) {
      EXPECT_EQ(out[i].x, s.data.train[i].x);
      continue;
    }
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c) {
          const std::size_t idx = (ch * 8 + r) * 8 + c;
          if (r >= 5 && c >= 5) {
            EXPECT_EQ(out[i].x[idx], spec.color[ch]);
          } else {
            EXPECT_EQ(out[i].x[idx], s.data.train[i].x[idx]);
          }
        }
  }
}

TEST(Patch, HalfOfOneHundredTargetsIsFifty) {
  Dataset base;
  for (std::size_t i = 0; i < 200; ++i) base.push_back({Tensor(Shape{3, 6, 6}, 0.25), i % 2});
  PatchSpec spec;
  spec.fraction = 0.5;
  spec.seed = 9;
  const Dataset out = make_patched_dataset(base, spec);
  std::size_t patched = 0;
  for (std::size_t i = 0; i < out.size(); ++i) patched += out[i].x != base[i].x;
  EXPECT_EQ(patched, 50u);
  EXPECT_EQ(patched_indices(base, spec), patched_indices(base, spec));
}

TEST(Patch, RejectsOversizedPatchAndBadFraction) {
  Dataset base{{Tensor(Shape{3, 4, 4}, 0.0), 0}};
  PatchSpec spec;
  spec.size = 5;
  EXPECT_THROW(make_patched_dataset(base, spec), InvalidArgument);
  spec.size = 2;
  spec.fraction = 1.5;
  EXPECT_THROW(make_patched_dataset(base, spec), InvalidArgument);
  EXPECT_EQ(patch_region(spec, 4, 4).top, 2u);
  spec.corner = Corner::kTopLeft;
  EXPECT_EQ(patch_region(spec, 4, 4).left, 0u);
}

TEST(Patch, AttributionFractionCountsTopPixels) {
  PatchSpec spec;
  spec.size = 3;
  const PatchRegion region = patch_region(spec, 8, 8);
  Tensor g(Shape{8, 8});
  for (std::size_t r = 5; r < 8; ++r)
    for (std::size_t c = 5; c < 8; ++c) g[r * 8 + c] = 1.0;
  EXPECT_EQ(patch_attribution_fraction({g}, region), 1.0);
  // all ties: the first ceil(6.4) = 7 pixels in index order, none in the corner patch
  EXPECT_EQ(patch_attribution_fraction({Tensor(Shape{8, 8})}, region), 0.0);
  g[0] = 2.0;
  EXPECT_DOUBLE_EQ(patch_attribution_fraction({g}, region), 6.0 / 7.0);
}

TEST(PatchSweep, RowsAreWellFormed) {
  SmallSetup s;
  PatchSweepConfig cfg;
  cfg.patch.size = 2;
  cfg.probes = 2;
  cfg.harmful = 2;
  cfg.smoothing = {0.05, 2, 0, 1};
  TrainConfig tc;
  tc.epochs = 1;
  tc.learning_rate = 0.2;
  const auto rows = patch_sweep(s.data, {0.0, 1.0}, s.model.arch, tc, cfg);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    for (double v : {r.overall_accuracy, r.target_unpatched_accuracy, r.probe_patched_accuracy,
                     r.patch_attribution_fraction}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(r.probes_used, 2u);
  }
  cfg.probe_class = cfg.patch.target_class;
  EXPECT_THROW(patch_sweep(s.data, {0.0}, s.model.arch, tc, cfg), InvalidArgument);
}
