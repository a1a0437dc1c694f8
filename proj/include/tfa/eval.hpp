#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "tfa/data.hpp"
#include "tfa/errors.hpp"
#include "tfa/models.hpp"
#include "tfa/random.hpp"
#include "tfa/saliency.hpp"
#include "tfa/stats.hpp"
#include "tfa/tda.hpp"

namespace tfa {

// ---------------------------------------------------------------------------
// Insertion masking

enum class InsertMode { kTopK, kRandom };

inline std::string to_string(InsertMode m) { return m == InsertMode::kTopK ? "topk" : "random"; }

enum class FillPolicy { kDatasetMean, kZero };

inline std::string to_string(FillPolicy f) { return f == FillPolicy::kDatasetMean ? "dataset-mean" : "zero"; }

inline FillPolicy parse_fill_policy(const std::string& s) {
  if (s == "dataset-mean") return FillPolicy::kDatasetMean;
  if (s == "zero") return FillPolicy::kZero;
  throw InvalidArgument("unknown fill policy '" + s + "' (dataset-mean, zero)");
}

inline void require_percent(double k) {
  if (!(k > 0.0 && k <= 100.0)) throw InvalidArgument("k must be in (0, 100], got " + std::to_string(k));
}

// ceil(k% of pixels)
inline std::size_t retained_pixel_count(double k_percent, std::size_t pixels) {
  require_percent(k_percent);
  const double exact = k_percent * static_cast<double>(pixels) / 100.0;
  return std::min(pixels, static_cast<std::size_t>(std::ceil(exact)));
}

// Flat pixel indices of the `count` largest grid values, ties by ascending index.
inline std::vector<std::size_t> top_pixels(const Tensor& grid, std::size_t count) {
  std::vector<std::size_t> order(grid.numel());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return grid[a] > grid[b]; });
  order.resize(std::min(count, order.size()));
  return order;
}

// Keeps ceil(k% * H * W) pixels (all channels) of a [C, H, W] image and sets
// the rest to fill[channel].
inline Tensor mask_insert(const Tensor& x, const ImportanceGrid& grid, double k_percent,
                          const std::vector<double>& fill, InsertMode mode, std::uint64_t seed) {
  if (x.rank() != 3) throw ShapeError("mask_insert expects a [C,H,W] image, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (grid.values.shape() != Shape{x.dim(1), x.dim(2)}) {
    throw ShapeError("importance grid " + shape_str(grid.values.shape()) + " does not match image " +
                     shape_str(x.shape()));
  }
  if (fill.size() != c) throw ShapeError("fill needs one value per channel");
  const std::size_t keep = retained_pixel_count(k_percent, hw);
  std::vector<std::size_t> kept;
  if (mode == InsertMode::kTopK) {
    kept = top_pixels(grid.values, keep);
  } else {
    kept.resize(hw);
    std::iota(kept.begin(), kept.end(), 0);
    Rng rng = make_rng(seed, "insert-random");
    shuffle_in_place(kept, rng);
    kept.resize(keep);
  }
  std::vector<bool> on(hw, false);
  for (std::size_t p : kept) on[p] = true;
  Tensor out = x;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) {
      if (!on[p]) out[ch * hw + p] = fill[ch];
    }
  }
  return out;
}

inline std::vector<double> fill_values(FillPolicy policy, const Dataset& reference, std::size_t channels) {
  if (policy == FillPolicy::kZero) return std::vector<double>(channels, 0.0);
  return channel_means(reference);
}

// Test-loss change after one plain SGD step on `masked`; params are not modified.
inline double intervention_delta(const Model& model, const ParamVector& params, const LabeledExample& masked,
                                 const LabeledExample& z_test, double lr_step) {
  const ParamVector stepped = sgd_step(params, param_grad(model, params, masked), lr_step);
  return loss(model, stepped, z_test) - loss(model, params, z_test);
}

// ---------------------------------------------------------------------------
// Paired insertion experiment

struct InsertionConfig {
  std::vector<double> k_percents{10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  std::size_t test_count = 20;
  std::size_t top_m = 10;
  double lr_step = 1e-3;
  SmoothGradOptions smoothing{0.05, 30, 0, 1};
  ChannelMode channel_mode = ChannelMode::kAbsSum;
  FillPolicy fill = FillPolicy::kDatasetMean;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (k_percents.empty()) throw InvalidArgument("insertion needs at least one k");
    for (double k : k_percents) require_percent(k);
    if (top_m < 1) throw InvalidArgument("insertion needs M >= 1");
    if (test_count < 1) throw InvalidArgument("insertion needs at least one test image");
    if (!(lr_step >= 0.0)) throw InvalidArgument("insertion step size must be >= 0");
  }
};

struct PairRecord {
  std::size_t test_index = 0;
  std::size_t train_index = 0;  // into the holdout pool
  double k = 0;
  double delta_topk = 0;
  double delta_random = 0;
};

struct PairedResult {
  double k = 0;
  double mean_random = 0;
  double mean_topk = 0;
  double mean_diff = 0;      // topk minus random
  double ci_half_width = 0;  // 1.96 * sd / sqrt(pairs)
  std::size_t pairs = 0;
};

inline PairedResult aggregate_pairs(double k, const std::vector<double>& topk, const std::vector<double>& random) {
  if (topk.empty() || topk.size() != random.size()) throw InvalidArgument("paired aggregation needs matched pairs");
  std::vector<double> diff(topk.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = topk[i] - random[i];
  PairedResult r;
  r.k = k;
  r.pairs = diff.size();
  r.mean_topk = stats::mean(topk);
  r.mean_random = stats::mean(random);
  r.mean_diff = stats::mean(diff);
  r.ci_half_width = 1.96 * stats::sample_sd(diff) / std::sqrt(static_cast<double>(diff.size()));
  return r;
}

struct InsertionOutcome {
  std::vector<PairedResult> results;  // one per k, in config order
  std::vector<PairRecord> pairs;
  std::vector<std::size_t> test_indices;
};

// For sampled test images, takes the top-M holdout images by grad-cos, builds
// smoothed TFA grids and evaluates both insertion conditions from the same
// starting parameters.
inline InsertionOutcome paired_insertion_experiment(const Model& model, const ParamVector& params,
                                                    const Dataset& holdout, const Dataset& tests,
                                                    const InsertionConfig& cfg,
                                                    const std::vector<double>& dataset_mean = {}) {
  cfg.validate();
  if (holdout.empty() || tests.empty()) throw InvalidArgument("insertion needs a non-empty holdout pool and test set");
  const std::size_t channels = holdout.front().x.dim(0);
  const std::vector<double> fill =
      cfg.fill == FillPolicy::kZero ? std::vector<double>(channels, 0.0)
                                    : (dataset_mean.empty() ? channel_means(holdout) : dataset_mean);

  InsertionOutcome out;
  out.test_indices.resize(tests.size());
  std::iota(out.test_indices.begin(), out.test_indices.end(), 0);
  Rng pick = make_rng(cfg.seed, "insertion-tests");
  shuffle_in_place(out.test_indices, pick);
  out.test_indices.resize(std::min(cfg.test_count, tests.size()));

  struct Job {
    std::size_t test_index;
    std::size_t train_index;
  };
  std::vector<Job> jobs;
  for (std::size_t t : out.test_indices) {
    RankOptions ro;
    ro.test_index = t;
    ro.threads = cfg.threads;
    const Ranking r = rank_training_set(model, params, holdout, tests[t], ro);
    for (const auto& rec : r.head(cfg.top_m)) jobs.push_back({t, rec.train_index});
  }
  if (jobs.empty()) throw InvalidArgument("insertion selected no training images");

  const std::size_t nk = cfg.k_percents.size();
  std::vector<PairRecord> records(jobs.size() * nk);
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
    const Job job = jobs[j];
    const LabeledExample& train = holdout[job.train_index];
    const LabeledExample& test = tests[job.test_index];
    SmoothGradOptions sg = cfg.smoothing;
    sg.seed = stream_seed(cfg.seed, "insertion-smoothgrad", j);
    sg.threads = 1;
    const ImportanceGrid grid = channel_aggregate(smoothgrad_saliency(model, params, train, test, sg), cfg.channel_mode);
    for (std::size_t ki = 0; ki < nk; ++ki) {
      const double k = cfg.k_percents[ki];
      const std::uint64_t mask_seed = stream_seed(cfg.seed, "insertion-mask", j * nk + ki);
      const LabeledExample topk{mask_insert(train.x, grid, k, fill, InsertMode::kTopK, mask_seed), train.y};
      const LabeledExample rand{mask_insert(train.x, grid, k, fill, InsertMode::kRandom, mask_seed), train.y};
      records[j * nk + ki] = {job.test_index, job.train_index, k,
                              intervention_delta(model, params, topk, test, cfg.lr_step),
                              intervention_delta(model, params, rand, test, cfg.lr_step)};
    }
  });

  for (std::size_t ki = 0; ki < nk; ++ki) {
    std::vector<double> topk, random;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      topk.push_back(records[j * nk + ki].delta_topk);
      random.push_back(records[j * nk + ki].delta_random);
    }
    out.results.push_back(aggregate_pairs(cfg.k_percents[ki], topk, random));
  }
  out.pairs = std::move(records);
  return out;
}

// ---------------------------------------------------------------------------
// Misclassification diagnosis

struct ExplainConfig {
  std::size_t count = 5;  // R harmful and R helpful examples
  SmoothGradOptions smoothing{};
  std::size_t test_index = 0;
  bool use_predicted_label = false;
  std::size_t threads = 1;
};

struct ExplainedExample {
  AttributionRecord record;
  SaliencyMap map;
};

struct MisclassificationReport {
  std::size_t true_label = 0;
  std::size_t predicted_label = 0;
  bool correctly_classified = false;  // the report still runs, but flags this
  std::vector<ExplainedExample> harmful;  // most harmful first
  std::vector<ExplainedExample> helpful;  // most helpful first
  std::vector<std::size_t> skipped;
};

inline MisclassificationReport explain_misclassification(const Model& model, const ParamVector& params,
                                                         const Dataset& train, const LabeledExample& z_test,
                                                         const ExplainConfig& cfg = {}) {
  MisclassificationReport rep;
  rep.true_label = z_test.y;
  rep.predicted_label = predict(model, params, z_test.x);
  rep.correctly_classified = rep.true_label == rep.predicted_label;

  RankOptions ro;
  ro.test_index = cfg.test_index;
  ro.use_predicted_label = cfg.use_predicted_label;
  ro.threads = cfg.threads;
  const Ranking ranking = rank_training_set(model, params, train, z_test, ro);
  rep.skipped = ranking.skipped;

  auto explain = [&](const AttributionRecord& rec) {
    SmoothGradOptions sg = cfg.smoothing;
    sg.seed = stream_seed(cfg.smoothing.seed, "explain", rec.train_index);
    SaliencyOptions so{rec.train_index, cfg.test_index, cfg.use_predicted_label};
    return ExplainedExample{rec, smoothgrad_saliency(model, params, train[rec.train_index], z_test, sg, so)};
  };
  for (const auto& rec : ranking.head(cfg.count)) rep.helpful.push_back(explain(rec));
  auto tail = ranking.tail(cfg.count);
  std::reverse(tail.begin(), tail.end());
  for (const auto& rec : tail) rep.harmful.push_back(explain(rec));
  return rep;
}

// ---------------------------------------------------------------------------
// Patch shortcut

enum class Corner { kBottomRight, kBottomLeft, kTopRight, kTopLeft };

inline std::string to_string(Corner c) {
  switch (c) {
    case Corner::kBottomRight: return "bottom-right";
    case Corner::kBottomLeft: return "bottom-left";
    case Corner::kTopRight: return "top-right";
    case Corner::kTopLeft: return "top-left";
  }
  return "?";
}

inline Corner parse_corner(const std::string& s) {
  for (Corner c : {Corner::kBottomRight, Corner::kBottomLeft, Corner::kTopRight, Corner::kTopLeft}) {
    if (to_string(c) == s) return c;
  }
  throw InvalidArgument("unknown corner '" + s + "'");
}

struct PatchSpec {
  std::size_t size = 5;
  std::vector<double> color{1.0, 0.0, 0.0};
  Corner corner = Corner::kBottomRight;
  std::size_t target_class = 0;
  double fraction = 0.0;
  std::uint64_t seed = 0;
};

struct PatchRegion {
  std::size_t top = 0, left = 0, size = 0;

  bool contains(std::size_t row, std::size_t col) const {
    return row >= top && row < top + size && col >= left && col < left + size;
  }
};

inline PatchRegion patch_region(const PatchSpec& spec, std::size_t height, std::size_t width) {
  if (spec.size == 0 || spec.size > height || spec.size > width) {
    throw InvalidArgument("patch of size " + std::to_string(spec.size) + " does not fit a " + std::to_string(height) +
                          "x" + std::to_string(width) + " image");
  }
  const bool bottom = spec.corner == Corner::kBottomRight || spec.corner == Corner::kBottomLeft;
  const bool right = spec.corner == Corner::kBottomRight || spec.corner == Corner::kTopRight;
  return {bottom ? height - spec.size : 0, right ? width - spec.size : 0, spec.size};
}

inline Tensor apply_patch(const Tensor& x, const PatchSpec& spec) {
  if (x.rank() != 3) throw ShapeError("apply_patch expects a [C,H,W] image");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (spec.color.size() != c) throw ShapeError("patch color needs one value per channel");
  const PatchRegion r = patch_region(spec, h, w);
  Tensor out = x;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = r.top; i < r.top + r.size; ++i)
      for (std::size_t j = r.left; j < r.left + r.size; ++j) out[(ch * h + i) * w + j] = spec.color[ch];
  return out;
}

// Indices of the target-class images that receive the patch: floor(fraction *
// count), chosen by a seeded shuffle. Sorted ascending.
inline std::vector<std::size_t> patched_indices(const Dataset& base, const PatchSpec& spec) {
  if (!(spec.fraction >= 0.0 && spec.fraction <= 1.0)) throw InvalidArgument("patch fraction must be in [0, 1]");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (base[i].y == spec.target_class) candidates.push_back(i);
  }
  const auto n = static_cast<std::size_t>(std::floor(spec.fraction * static_cast<double>(candidates.size())));
  Rng rng = make_rng(spec.seed, "patch-select");
  shuffle_in_place(candidates, rng);
  candidates.resize(n);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

inline Dataset make_patched_dataset(const Dataset& base, const PatchSpec& spec) {
  if (!base.empty()) patch_region(spec, base.front().x.dim(1), base.front().x.dim(2));
  Dataset out = base;
  for (std::size_t i : patched_indices(base, spec)) out[i].x = apply_patch(base[i].x, spec);
  return out;
}

// Share of the top `top_fraction` of grid pixels (ties by ascending index) inside the region.
inline double patch_attribution_fraction(const ImportanceGrid& grid, const PatchRegion& region,
                                         double top_fraction = 0.1) {
  const std::size_t w = grid.width();
  const std::size_t keep = retained_pixel_count(100.0 * top_fraction, grid.values.numel());
  std::size_t inside = 0;
  for (std::size_t p : top_pixels(grid.values, keep)) inside += region.contains(p / w, p % w);
  return static_cast<double>(inside) / static_cast<double>(keep);
}

struct PatchSweepConfig {
  PatchSpec patch{};
  std::size_t probe_class = 1;
  std::size_t probes = 5;
  std::size_t harmful = 10;
  double top_fraction = 0.1;
  SmoothGradOptions smoothing{};
  ChannelMode channel_mode = ChannelMode::kAbsSum;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct PatchSweepRow {
  double fraction = 0;
  double overall_accuracy = 0;
  double target_unpatched_accuracy = 0;
  double probe_patched_accuracy = 0;
  double patch_attribution_fraction = 0;
  std::size_t probes_used = 0;
  std::size_t misclassified_probes = 0;
};

// Trains from scratch at each fraction on the patched train split, evaluates on
// the untouched test split, and measures how much of the TFA saliency on the
// most harmful training images falls on the patch.
inline std::vector<PatchSweepRow> patch_sweep(const Splits& base, const std::vector<double>& fractions,
                                              const ArchitectureSpec& arch, const TrainConfig& train_cfg,
                                              const PatchSweepConfig& cfg) {
  if (base.train.empty() || base.test.empty()) throw InvalidArgument("patch sweep needs train and test images");
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("patch fractions must lie in [0, 1]");
  }
  if (cfg.probe_class == cfg.patch.target_class) throw InvalidArgument("probe class must differ from target class");
  const std::size_t h = base.train.front().x.dim(1), w = base.train.front().x.dim(2);
  const PatchRegion region = patch_region(cfg.patch, h, w);
  const Model model{arch, train_cfg.loss};

  Dataset target_test, probe_test;
  for (const auto& z : base.test) {
    if (z.y == cfg.patch.target_class) target_test.push_back(z);
    if (z.y == cfg.probe_class) probe_test.push_back({apply_patch(z.x, cfg.patch), z.y});
  }
  if (probe_test.empty()) throw InvalidArgument("no probe-class test images");

  std::vector<PatchSweepRow> rows;
  for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
    PatchSpec spec = cfg.patch;
    spec.fraction = fractions[fi];
    spec.seed = stream_seed(cfg.seed, "patch-sweep-select", fi);
    const Dataset patched = make_patched_dataset(base.train, spec);
    TrainConfig tc = train_cfg;
    tc.seed = stream_seed(cfg.seed, "patch-sweep-train", fi);
    const ParamVector params = train(patched, arch, tc).params;

    PatchSweepRow row;
    row.fraction = spec.fraction;
    row.overall_accuracy = accuracy(model, params, base.test);
    row.target_unpatched_accuracy = target_test.empty() ? 0.0 : accuracy(model, params, target_test);
    row.probe_patched_accuracy = accuracy(model, params, probe_test);

    // misclassified probes first, then the rest, each group in test order
    std::vector<std::size_t> probes, rest;
    for (std::size_t i = 0; i < probe_test.size(); ++i) {
      (predict(model, params, probe_test[i].x) != probe_test[i].y ? probes : rest).push_back(i);
    }
    row.misclassified_probes = probes.size();
    probes.insert(probes.end(), rest.begin(), rest.end());
    probes.resize(std::min(cfg.probes, probes.size()));
    row.probes_used = probes.size();

    std::vector<double> shares;
    for (std::size_t pi = 0; pi < probes.size(); ++pi) {
      const LabeledExample& probe = probe_test[probes[pi]];
      RankOptions ro;
      ro.threads = cfg.threads;
      const Ranking ranking = rank_training_set(model, params, patched, probe, ro);
      const auto harmful = ranking.tail(cfg.harmful);
      std::vector<double> local(harmful.size());
      parallel_for(harmful.size(), cfg.threads, [&](std::size_t j) {
        SmoothGradOptions sg = cfg.smoothing;
        sg.seed = stream_seed(cfg.seed, "patch-sweep-smoothgrad", (fi * 1000 + pi) * 1000 + j);
        sg.threads = 1;
        const SaliencyMap map = smoothgrad_saliency(model, params, patched[harmful[j].train_index], probe, sg);
        local[j] = patch_attribution_fraction(channel_aggregate(map, cfg.channel_mode), region, cfg.top_fraction);
      });
      shares.insert(shares.end(), local.begin(), local.end());
    }
    row.patch_attribution_fraction = shares.empty() ? 0.0 : stats::mean(shares);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tfa
