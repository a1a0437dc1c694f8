// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when all pass.
// Usage: acceptance [AC1 AC2 ...]   (no arguments runs everything)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tfa/cli.hpp"
#include "tfa/data.hpp"
#include "tfa/eval.hpp"
#include "tfa/ridge.hpp"
#include "tfa/saliency.hpp"
#include "tfa/stats.hpp"
#include "tfa/tda.hpp"

using namespace tfa;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Tensor random_direction(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = standard_normal(rng);
  return t;
}

Tensor axpy(const Tensor& x, double a, const Tensor& v) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += a * v[i];
  return out;
}

double dot_of(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

Splits shapes(std::size_t size, std::size_t classes, std::size_t train, std::size_t holdout, std::size_t test,
              std::uint64_t seed) {
  SyntheticShapesSpec spec;
  spec.image_size = size;
  spec.classes = classes;
  spec.train_count = train;
  spec.holdout_count = holdout;
  spec.test_count = test;
  spec.seed = seed;
  return generate_synthetic(spec);
}

TrainConfig train_cfg(std::size_t epochs, double lr, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = epochs;
  c.learning_rate = lr;
  c.seed = seed;
  return c;
}

// ---------------------------------------------------------------------------

Outcome ac1_ridge() {
  const ridge::RidgeProblem p = ridge::ToySetup{}.problem();
  const Eigen::VectorXd query{{0.0, 1.0}};
  const Eigen::VectorXd alpha = ridge::representer_alphas(p, query);
  const Eigen::MatrixXd beta = ridge::tfa_betas(p, query);
  const Eigen::Index n = p.X.rows();
  double worst = 0;
  for (Eigen::Index i = 0; i + 1 < n; ++i) worst = std::max(worst, std::abs(alpha(i)));
  worst = std::max(worst, std::abs(alpha(n - 1) * p.y(n - 1) - 0.8));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < 2; ++j) {
      const double want = (i == n - 1 && j == 1) ? 0.8 : 0.0;
      worst = std::max(worst, std::abs(p.y(i) * beta(i, j) - want));
    }
  return {worst <= 1e-12, "max deviation " + fmt(worst)};
}

// Central difference of f along v. A probe counts only when the stencil does
// not straddle a ReLU or max-pool switch, judged by FD(h) agreeing with
// FD(h/10); the analytic value plays no part in that filter.
struct Probe {
  bool smooth;
  double fd;
};

Probe central_difference(const std::function<double(double)>& f, double h) {
  const double coarse = (f(h) - f(-h)) / (2 * h);
  const double fine = (f(h / 10) - f(-h / 10)) / (h / 5);
  return {rel_err(coarse, fine) < 1e-6, coarse};
}

Outcome ac2_autodiff() {
  const std::size_t probes = 20, max_draws = 200;
  const double h = 1e-5;
  const Splits data = shapes(12, 2, 40, 0, 10, 21);
  const Model model{ArchitectureSpec::tiny_cnn(3, 12, 12, 2)};
  const ParamVector params = train(data.train, model.arch, train_cfg(3, 0.1, 22)).params;
  Rng rng = make_rng(23, "ac2");

  double worst_loss = 0, worst_sal = 0;
  std::size_t kept_loss = 0, kept_sal = 0, draws = 0;
  for (; kept_loss < probes && draws < max_draws; ++draws) {
    const LabeledExample& z = data.train[draws % data.train.size()];
    const Tensor v = random_direction(params.flat.shape(), rng);
    const Probe p = central_difference(
        [&](double t) {
          ParamVector q = params;
          q.flat = axpy(params.flat, t, v);
          return loss(model, q, z);
        },
        h);
    if (!p.smooth) continue;
    worst_loss = std::max(worst_loss, rel_err(dot_of(param_grad(model, params, z), v), p.fd));
    ++kept_loss;
  }
  for (std::size_t k = 0; kept_sal < probes && k < max_draws; ++k, ++draws) {
    const LabeledExample& tr = data.train[(3 * k + 1) % data.train.size()];
    const LabeledExample& te = data.test[k % data.test.size()];
    const Tensor g_test = param_grad(model, params, te);
    const Tensor v = random_direction(tr.x.shape(), rng);
    const Probe p = central_difference(
        [&](double t) { return grad_cos_of(param_grad(model, params, {axpy(tr.x, t, v), tr.y}), g_test); }, h);
    if (!p.smooth) continue;
    worst_sal = std::max(worst_sal, rel_err(dot_of(tfa_saliency(model, params, tr, te).values, v), p.fd));
    ++kept_sal;
  }
  const bool enough = kept_loss >= probes && kept_sal >= probes;
  return {enough && worst_loss < 1e-4 && worst_sal < 1e-4,
          std::to_string(kept_loss) + "+" + std::to_string(kept_sal) + " smooth probes of " + std::to_string(draws) +
              " drawn, max rel err loss " + fmt(worst_loss) + ", saliency " + fmt(worst_sal)};
}

Outcome ac3_grad_effect() {
  const Splits data = shapes(12, 2, 40, 0, 10, 31);
  const Model model{ArchitectureSpec::tiny_cnn(3, 12, 12, 2)};
  const ParamVector params = train(data.train, model.arch, train_cfg(1, 0.05, 32)).params;
  double worst = 0;  // |predicted - measured| / epsilon
  std::size_t pairs = 0;
  for (double eps : {1e-3, 1e-4}) {
    for (std::size_t i = 0; i < 10; ++i) {
      const LabeledExample& tr = data.train[i];
      const LabeledExample& te = data.test[i];
      const Tensor g_train = param_grad(model, params, tr);
      const Tensor g_test = param_grad(model, params, te);
      const double predicted = grad_effect_of(g_train, g_test, eps);
      ParamVector stepped = params;
      stepped.flat = axpy(params.flat, -eps / dot_of(g_train, g_train), g_train);
      const double measured = loss(model, stepped, te) - loss(model, params, te);
      worst = std::max(worst, std::abs(predicted - measured) / eps);
      ++pairs;
    }
  }
  return {worst <= 0.01, std::to_string(pairs) + " pairs, max |pred - measured| / eps = " + fmt(worst)};
}

Outcome ac4_relatif_limit() {
  const std::size_t n = 50;
  const Splits data = shapes(8, 2, n, 0, 5, 41);
  const Model model{ArchitectureSpec::tiny_cnn(3, 8, 8, 2)};
  const ParamVector params = train(data.train, model.arch, train_cfg(5, 0.1, 42)).params;
  const DampedHessian h = dense_hessian(model, params, data.train);
  const double norm_inf = h.matrix.cwiseAbs().rowwise().sum().maxCoeff();
  const DampedSolver solver(h, 1e6 * norm_inf);

  RankOptions rel;
  rel.method = TdaMethod::kRelatif;
  rel.solver = &solver;
  RankOptions cos;
  const LabeledExample& z = data.test.front();
  const Ranking a = rank_training_set(model, params, data.train, z, rel);
  const Ranking b = rank_training_set(model, params, data.train, z, cos);
  std::vector<double> score_a(n), score_b(n);
  for (const auto& r : a.records) score_a[r.train_index] = helpfulness(r);
  for (const auto& r : b.records) score_b[r.train_index] = helpfulness(r);
  bool same_order = a.records.size() == n && b.records.size() == n;
  for (std::size_t i = 0; same_order && i < n; ++i) same_order = a.records[i].train_index == b.records[i].train_index;
  const double tau = stats::kendall_tau(score_a, score_b);
  return {same_order && tau == 1.0, std::to_string(params.size()) + " params, " + std::to_string(n) +
                                        " examples, tau = " + fmt(tau) + (same_order ? ", identical order" : "")};
}

Outcome ac5_insertion() {
  const Splits data = shapes(32, 3, 600, 200, 200, 51);
  const Model model{ArchitectureSpec::tiny_cnn(3, 32, 32, 3)};
  const ParamVector params = train(data.train, model.arch, train_cfg(15, 0.2, 52)).params;
  InsertionConfig cfg;
  cfg.seed = 53;
  const InsertionOutcome r =
      paired_insertion_experiment(model, params, data.holdout, data.test, cfg, channel_means(data.train));
  std::size_t significant = 0;
  bool full_zero = false;
  std::string table;
  for (const auto& p : r.results) {
    const bool sig = p.k <= 50 && p.mean_diff < 0 && p.mean_diff + p.ci_half_width < 0;
    significant += sig;
    if (p.k == 100) full_zero = p.mean_diff == 0.0 && p.ci_half_width == 0.0;
    table += " k" + fmt(p.k) + ":" + fmt(p.mean_diff) + "+-" + fmt(p.ci_half_width);
  }
  return {significant >= 3 && full_zero,
          "test acc " + fmt(accuracy(model, params, data.test)) + ", significant k<=50: " +
              std::to_string(significant) + ", k=100 zero: " + (full_zero ? "yes" : "no") + ";" + table};
}

Outcome ac6_patch_sweep() {
  const Splits data = shapes(32, 3, 600, 0, 150, 61);
  const std::vector<double> fractions{0, 0.05, 0.15, 0.3, 0.5, 0.7, 0.85, 0.95, 1.0};
  PatchSweepConfig cfg;
  cfg.patch.target_class = 0;
  cfg.probe_class = 1;
  cfg.seed = 62;
  const auto rows =
      patch_sweep(data, fractions, ArchitectureSpec::tiny_cnn(3, 32, 32, 3), train_cfg(15, 0.2, 63), cfg);
  std::vector<double> f, share;
  double acc0 = 0, acc95 = 0, share0 = 0;
  std::string table;
  for (const auto& r : rows) {
    f.push_back(r.fraction);
    share.push_back(r.patch_attribution_fraction);
    if (r.fraction == 0.0) acc0 = r.probe_patched_accuracy, share0 = r.patch_attribution_fraction;
    if (r.fraction == 0.95) acc95 = r.probe_patched_accuracy;
    table += " f" + fmt(r.fraction) + ":acc" + fmt(r.probe_patched_accuracy) + "/share" +
             fmt(r.patch_attribution_fraction);
  }
  const double rho = stats::spearman(f, share);
  const double drop = acc0 - acc95;
  const double baseline = 25.0 / (32.0 * 32.0);
  const bool near_baseline = std::abs(share0 - baseline) < 0.05;
  return {rows.size() >= 8 && drop > 0.20 && rho > 0.8 && near_baseline,
          "probe acc drop " + fmt(100 * drop) + " pts, spearman " + fmt(rho) + ", share at 0 = " + fmt(share0) +
              " (area " + fmt(baseline) + ");" + table};
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_file(e.path());
  return out;
}

Outcome ac7_smoothgrad_determinism() {
  const Splits data = shapes(12, 2, 40, 0, 6, 71);
  const Model model{ArchitectureSpec::tiny_cnn(3, 12, 12, 2)};
  const ParamVector params = train(data.train, model.arch, train_cfg(2, 0.1, 72)).params;
  const SaliencyMap raw = tfa_saliency(model, params, data.train[3], data.test[1]);
  const SaliencyMap zero = smoothgrad_saliency(model, params, data.train[3], data.test[1], {0.0, 7, 5, 1});
  const bool identity = raw.values == zero.values;

  const fs::path root = fs::temp_directory_path() / "tfa_acceptance_ac7";
  fs::remove_all(root);
  const std::vector<std::string> base{"--image-size", "12", "--train-count", "40", "--holdout-count", "12",
                                      "--test-count", "8", "--epochs", "2", "--seed", "9"};
  const std::vector<std::vector<std::string>> commands{
      {"saliency", "--sigma", "0.2", "--samples", "6", "--train-index", "5", "--test-index", "2", "--layer", "0"},
      {"explain", "--sigma", "0.1", "--samples", "5", "--count", "2"},
      {"insertion", "--tests", "3", "--top-m", "2", "--samples", "3", "--k", "10,50,100"}};
  std::size_t files = 0;
  bool same = true;
  std::ostringstream sink;
  for (std::size_t c = 0; c < commands.size(); ++c) {
    std::vector<std::map<std::string, std::string>> runs;
    for (const char* threads : {"1", "1", "4"}) {
      const fs::path dir = root / (std::to_string(c) + "_" + std::to_string(runs.size()));
      auto args = commands[c];
      args.insert(args.end(), base.begin(), base.end());
      args.insert(args.end(), {"--threads", threads, "--out", dir.string()});
      if (cli::dispatch(args, sink, sink) != cli::kExitOk) return {false, "command failed: " + commands[c][0]};
      auto t = tree(dir);
      t.erase("manifest.txt");  // records the thread count
      runs.push_back(std::move(t));
    }
    same = same && runs[0] == runs[1] && runs[0] == runs[2];
    files += runs[0].size();
  }
  fs::remove_all(root);
  return {identity && same, std::string("sigma=0 identity ") + (identity ? "holds" : "broken") + ", " +
                                std::to_string(files) + " artifacts " +
                                (same ? "byte-identical" : "differ") + " across 2 runs and threads 1/4"};
}

struct PlantedRate {
  std::size_t hits = 0;
  std::string misses;
};

// Each trial: fresh data, a label-flipped noisy copy of one test image appended
// to the training set, retraining, then the explain report for that test image.
PlantedRate planted_duplicate_trials(std::size_t classes, std::size_t trials, std::size_t report) {
  PlantedRate out;
  for (std::size_t t = 0; t < trials; ++t) {
    Splits data = shapes(16, classes, 300, 0, 30, stream_seed(81, "ac8-data", t));
    Rng rng = make_rng(82, "ac8-trial", t);
    const std::size_t ti = static_cast<std::size_t>(uniform01(rng) * data.test.size()) % data.test.size();
    const LabeledExample z = data.test[ti];
    const auto shift = 1 + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(classes - 1));
    LabeledExample dup{z.x, (z.y + shift) % classes};
    for (std::size_t i = 0; i < dup.x.numel(); ++i)
      dup.x[i] = std::clamp(dup.x[i] + 0.01 * standard_normal(rng), 0.0, 1.0);
    const std::size_t planted = data.train.size();
    data.train.push_back(dup);
    const Model model{ArchitectureSpec::tiny_cnn(3, 16, 16, classes)};
    const ParamVector params = train(data.train, model.arch, train_cfg(15, 0.2, stream_seed(83, "ac8-train", t))).params;
    ExplainConfig cfg;
    cfg.count = report;
    cfg.smoothing = {0.1, 5, stream_seed(84, "ac8-explain", t), 1};
    const MisclassificationReport rep = explain_misclassification(model, params, data.train, z, cfg);
    const bool hit = std::any_of(rep.harmful.begin(), rep.harmful.end(), [&](const ExplainedExample& e) {
      return e.record.train_index == planted && e.record.score < 0;
    });
    out.hits += hit;
    if (!hit) out.misses += " " + std::to_string(t);
  }
  return out;
}

// Asserted on the default two-class task, where the flipped copy's gradient is
// the exact negative of the test gradient. The three-class rate is reported only.
Outcome ac8_planted_duplicate() {
  const std::size_t trials = 20, report = 5;
  const PlantedRate two = planted_duplicate_trials(2, trials, report);
  const PlantedRate three = planted_duplicate_trials(3, trials, report);
  const double rate = static_cast<double>(two.hits) / trials;
  return {rate >= 0.95, std::to_string(two.hits) + "/" + std::to_string(trials) + " trials put the duplicate in the " +
                            std::to_string(report) + " most harmful" + (two.misses.empty() ? "" : " (misses:" + two.misses + ")") +
                            "; 3-class diagnostic " + std::to_string(three.hits) + "/" + std::to_string(trials)};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    std::string id;
    double budget_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{
      {"AC1", 1, ac1_ridge},           {"AC2", 60, ac2_autodiff},          {"AC3", 0, ac3_grad_effect},
      {"AC4", 0, ac4_relatif_limit},   {"AC5", 1800, ac5_insertion},       {"AC6", 1800, ac6_patch_sweep},
      {"AC7", 0, ac7_smoothgrad_determinism}, {"AC8", 0, ac8_planted_duplicate},
  };
  const std::set<std::string> only(argv + 1, argv + argc);
  bool ok = true;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_seconds <= 0 || secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    ok = ok && pass;
    std::cout << c.id << " " << (pass ? "PASS" : "FAIL") << " (" << fmt(secs) << " s"
              << (in_time ? "" : ", over the " + fmt(c.budget_seconds) + " s budget") << ") " << o.detail
              << std::endl;
  }
  return ok ? 0 : 1;
}
