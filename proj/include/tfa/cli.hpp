#pragma once

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <optional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tfa/data.hpp"
#include "tfa/errors.hpp"
#include "tfa/eval.hpp"
#include "tfa/io.hpp"
#include "tfa/models.hpp"
#include "tfa/ridge.hpp"
#include "tfa/saliency.hpp"
#include "tfa/tda.hpp"

namespace tfa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

namespace fs = std::filesystem;

// Options shared by every command that needs data and a model.
struct CommonOptions {
  std::string data = "synthetic";
  std::string cifar_dir;
  std::string cifar_classes = "0,1,8";
  std::size_t per_class_cap = 1000;
  std::size_t image_size = 32;
  std::size_t num_classes = 2;
  double noise = 0.05;
  std::size_t train_count = 600;
  std::size_t holdout_count = 200;
  std::size_t test_count = 200;
  std::uint64_t seed = 0;
  std::string arch = "tiny-cnn";
  std::string loss = "cross-entropy";
  std::size_t epochs = 15;
  double lr = 0.2;
  std::size_t batch_size = 16;
  std::string model_path;
  std::string out = "tfa_out";
  std::size_t threads = 1;
  std::string config;

  void add_to(CLI::App* app) {
    app->add_option("--data", data, "synthetic or cifar")->check(CLI::IsMember({"synthetic", "cifar"}));
    app->add_option("--cifar-dir", cifar_dir, "directory with CIFAR-10 binary batches");
    app->add_option("--cifar-classes", cifar_classes, "comma-separated CIFAR-10 class ids");
    app->add_option("--per-class-cap", per_class_cap, "max images per class per split (0 = all)");
    app->add_option("--image-size", image_size, "synthetic image side");
    app->add_option("--num-classes", num_classes, "synthetic class count (2 or 3)");
    app->add_option("--noise", noise, "synthetic pixel noise std");
    app->add_option("--train-count", train_count, "synthetic train images");
    app->add_option("--holdout-count", holdout_count, "synthetic holdout images");
    app->add_option("--test-count", test_count, "synthetic test images");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--arch", arch, "tiny-cnn, logistic, mlp:H1:H2, or a layer list");
    app->add_option("--loss", loss, "cross-entropy or mse");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--lr", lr, "training learning rate");
    app->add_option("--batch-size", batch_size, "training batch size");
    app->add_option("--model", model_path, "model file written by `train` (otherwise trained from the config)");
    app->add_option("--out", out, "output directory");
    app->add_option("--threads", threads, "worker threads");
    app->add_option("--config", config, "key=value file; command-line flags take precedence");
  }

  void echo(io::KeyValues& kv) const {
    kv["data"] = data;
    if (data == "cifar") {
      kv["cifar-dir"] = cifar_dir;
      kv["cifar-classes"] = cifar_classes;
      kv["per-class-cap"] = std::to_string(per_class_cap);
    } else {
      kv["image-size"] = std::to_string(image_size);
      kv["num-classes"] = std::to_string(num_classes);
      kv["noise"] = io::format_double(noise);
      kv["train-count"] = std::to_string(train_count);
      kv["holdout-count"] = std::to_string(holdout_count);
      kv["test-count"] = std::to_string(test_count);
    }
    kv["seed"] = std::to_string(seed);
    kv["arch"] = arch;
    kv["loss"] = loss;
    kv["epochs"] = std::to_string(epochs);
    kv["lr"] = io::format_double(lr);
    kv["batch-size"] = std::to_string(batch_size);
    kv["model"] = model_path;
    kv["threads"] = std::to_string(threads);
  }
};

inline std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : io::split(text, ',')) {
    try {
      out.push_back(io::parse_double(part));
    } catch (const FormatError&) {
      throw InvalidArgument("bad number '" + part + "' in list '" + text + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("empty list");
  return out;
}

inline std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(text)) {
    if (v < 0 || v != std::floor(v)) throw InvalidArgument("expected non-negative integers in '" + text + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + io::format_double(v[i]);
  return out;
}

struct Workspace {
  Splits data;
  Model model;
  ParamVector params;
};

inline Splits load_data(const CommonOptions& o) {
  if (o.data == "cifar") {
    if (o.cifar_dir.empty()) throw InvalidArgument("--data cifar needs --cifar-dir");
    return load_cifar10_binary(o.cifar_dir, parse_index_list(o.cifar_classes), o.per_class_cap);
  }
  SyntheticShapesSpec spec;
  spec.image_size = o.image_size;
  spec.classes = o.num_classes;
  spec.noise = o.noise;
  spec.train_count = o.train_count;
  spec.holdout_count = o.holdout_count;
  spec.test_count = o.test_count;
  spec.seed = stream_seed(o.seed, "data");
  return generate_synthetic(spec);
}

inline std::size_t class_count(const CommonOptions& o) {
  return o.data == "cifar" ? parse_index_list(o.cifar_classes).size() : o.num_classes;
}

inline TrainConfig train_config(const CommonOptions& o) {
  TrainConfig cfg;
  cfg.learning_rate = o.lr;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.seed = stream_seed(o.seed, "model");
  cfg.loss = parse_loss_kind(o.loss);
  return cfg;
}

inline ArchitectureSpec architecture(const CommonOptions& o, const Splits& data) {
  if (data.train.empty()) throw FormatError("training split is empty");
  return ArchitectureSpec::parse(o.arch, data.train.front().x.shape(), class_count(o));
}

inline Workspace prepare(const CommonOptions& o, std::ostream& log) {
  Workspace w;
  w.data = load_data(o);
  if (!o.model_path.empty()) {
    io::LoadedModel m = io::parse_model(io::read_file(o.model_path));
    if (m.model.arch.input_shape() != w.data.train.front().x.shape()) {
      throw FormatError("model input " + shape_str(m.model.arch.input_shape()) + " does not match the data");
    }
    w.model = m.model;
    w.params = std::move(m.params);
    return w;
  }
  const TrainConfig cfg = train_config(o);
  w.model = Model{architecture(o, w.data), cfg.loss};
  log << "training " << w.model.arch.to_string() << " on " << w.data.train.size() << " images\n";
  w.params = train(w.data.train, w.model.arch, cfg).params;
  return w;
}

inline const LabeledExample& pick(const Dataset& d, std::size_t i, const char* what) {
  if (i >= d.size()) {
    throw InvalidArgument(std::string(what) + " index " + std::to_string(i) + " out of range (" +
                          std::to_string(d.size()) + " images)");
  }
  return d[i];
}

inline void write_manifest(const fs::path& dir, const io::KeyValues& kv) {
  io::write_file(dir / "manifest.txt", io::format_key_values(kv));
}

inline void write_map(const fs::path& dir, const std::string& stem, const Tensor& signed_values,
                      ChannelMode mode) {
  io::write_file(dir / "maps" / (stem + ".csv"), io::map_csv(signed_values));
  const Tensor grid = signed_values.rank() == 3 ? channel_aggregate(signed_values, mode).values : signed_values;
  io::write_pgm(dir / "maps" / (stem + ".pgm"), grid);
}

// ---------------------------------------------------------------------------
// Commands

inline int run_train(const CommonOptions& o, std::ostream& out) {
  const Splits data = load_data(o);
  const TrainConfig cfg = train_config(o);
  const Model model{architecture(o, data), cfg.loss};
  const TrainResult r = train(data.train, model.arch, cfg);
  const fs::path dir = o.out;
  io::write_file(dir / "model.txt", io::format_model(model, r.params));
  io::CsvTable hist({"epoch", "mean_loss", "accuracy"});
  for (std::size_t e = 0; e < r.history.size(); ++e)
    hist.row() << e + 1 << r.history[e].mean_loss << r.history[e].accuracy;
  io::write_file(dir / "tables" / "history.csv", hist.str());
  io::KeyValues kv;
  o.echo(kv);
  kv["command"] = "train";
  kv["parameters"] = std::to_string(r.params.size());
  const double train_acc = accuracy(model, r.params, data.train);
  const double test_acc = data.test.empty() ? 0.0 : accuracy(model, r.params, data.test);
  kv["train-accuracy"] = io::format_double(train_acc);
  kv["test-accuracy"] = io::format_double(test_acc);
  write_manifest(dir, kv);
  out << "train accuracy " << train_acc << ", test accuracy " << test_acc << "\nwrote " << (dir / "model.txt").string()
      << "\n";
  return kExitOk;
}

struct RankOptionsCli {
  std::size_t test_index = 0;
  std::string method = "grad-cos";
  double epsilon = 1e-3;
  double damping = -1.0;
  std::size_t hessian_samples = 0;
  bool predicted_label = false;
};

inline int run_rank(const CommonOptions& o, const RankOptionsCli& r, std::ostream& out, std::ostream& err) {
  const TdaMethod method = parse_tda_method(r.method);
  Workspace w = prepare(o, err);
  const LabeledExample& z = pick(w.data.test, r.test_index, "test");
  RankOptions ro;
  ro.method = method;
  ro.test_index = r.test_index;
  ro.epsilon = r.epsilon;
  ro.use_predicted_label = r.predicted_label;
  ro.threads = o.threads;
  io::KeyValues kv;
  std::optional<DampedSolver> solver;
  if (method == TdaMethod::kInfluence || method == TdaMethod::kRelatif) {
    Dataset subset = w.data.train;
    if (r.hessian_samples > 0 && r.hessian_samples < subset.size()) subset.resize(r.hessian_samples);
    const DampedHessian h = dense_hessian(w.model, w.params, subset);
    const double lambda = r.damping >= 0 ? r.damping : default_damping(h);
    solver.emplace(h, lambda);
    ro.solver = &*solver;
    kv["damping-resolved"] = io::format_double(lambda);
    kv["hessian-asymmetry"] = io::format_double(h.asymmetry);
  }
  const Ranking ranking = rank_training_set(w.model, w.params, w.data.train, z, ro);
  io::CsvTable t({"train_index", "label", "method", "score"});
  for (const auto& rec : ranking.records)
    t.row() << rec.train_index << w.data.train[rec.train_index].y << to_string(rec.method) << rec.score;
  const fs::path dir = o.out;
  io::write_file(dir / "tables" / "rank.csv", t.str());
  for (std::size_t i : ranking.skipped) err << "warning: skipped training example " << i << " (zero gradient)\n";
  o.echo(kv);
  kv["command"] = "rank";
  kv["test-index"] = std::to_string(r.test_index);
  kv["method"] = r.method;
  kv["epsilon"] = io::format_double(r.epsilon);
  kv["damping"] = io::format_double(r.damping);
  kv["hessian-samples"] = std::to_string(r.hessian_samples);
  kv["predicted-label"] = r.predicted_label ? "true" : "false";
  kv["skipped"] = std::to_string(ranking.skipped.size());
  write_manifest(dir, kv);
  out << "ranked " << ranking.records.size() << " training images for test image " << r.test_index << "\n";
  return kExitOk;
}

struct SaliencyOptionsCli {
  std::size_t train_index = 0;
  std::size_t test_index = 0;
  double sigma = 0.1;
  std::size_t samples = 50;
  bool raw = false;
  int layer = -1;
  std::string channel_mode = "abs-sum";
  bool predicted_label = false;
};

inline int run_saliency(const CommonOptions& o, const SaliencyOptionsCli& s, std::ostream& out, std::ostream& err) {
  const ChannelMode mode = parse_channel_mode(s.channel_mode);
  Workspace w = prepare(o, err);
  const LabeledExample& tr = pick(w.data.train, s.train_index, "train");
  const LabeledExample& te = pick(w.data.test, s.test_index, "test");
  const SaliencyOptions so{s.train_index, s.test_index, s.predicted_label};
  const fs::path dir = o.out;
  const std::string stem = "saliency_train" + std::to_string(s.train_index) + "_test" + std::to_string(s.test_index);
  const SaliencyMap map = s.raw ? tfa_saliency(w.model, w.params, tr, te, so)
                                : smoothgrad_saliency(w.model, w.params, tr, te,
                                                      {s.sigma, s.samples, stream_seed(o.seed, "saliency"), o.threads},
                                                      so);
  write_map(dir, stem, map.values, mode);
  if (s.layer >= 0) {
    const ImportanceGrid g = layer_saliency(w.model, w.params, tr, te, static_cast<std::size_t>(s.layer), so);
    write_map(dir, "layer" + std::to_string(s.layer) + "_train" + std::to_string(s.train_index) + "_test" +
                       std::to_string(s.test_index),
              g.values, mode);
  }
  io::KeyValues kv;
  o.echo(kv);
  kv["command"] = "saliency";
  kv["train-index"] = std::to_string(s.train_index);
  kv["test-index"] = std::to_string(s.test_index);
  kv["sigma"] = io::format_double(s.sigma);
  kv["samples"] = std::to_string(s.samples);
  kv["raw"] = s.raw ? "true" : "false";
  kv["layer"] = std::to_string(s.layer);
  kv["channel-mode"] = s.channel_mode;
  kv["predicted-label"] = s.predicted_label ? "true" : "false";
  write_manifest(dir, kv);
  out << "wrote " << (dir / "maps" / (stem + ".pgm")).string() << "\n";
  return kExitOk;
}

struct InsertionOptionsCli {
  std::string k_list = "10,20,30,40,50,60,70,80,90,100";
  std::size_t tests = 20;
  std::size_t top_m = 10;
  double lr_step = 1e-3;
  double sigma = 0.05;
  std::size_t samples = 30;
  std::string fill = "dataset-mean";
  std::string channel_mode = "abs-sum";
};

inline int run_insertion(const CommonOptions& o, const InsertionOptionsCli& s, std::ostream& out, std::ostream& err) {
  InsertionConfig cfg;
  cfg.k_percents = parse_double_list(s.k_list);
  cfg.test_count = s.tests;
  cfg.top_m = s.top_m;
  cfg.lr_step = s.lr_step;
  cfg.smoothing = {s.sigma, s.samples, 0, 1};
  cfg.fill = parse_fill_policy(s.fill);
  cfg.channel_mode = parse_channel_mode(s.channel_mode);
  cfg.seed = stream_seed(o.seed, "insertion");
  cfg.threads = o.threads;
  cfg.validate();
  Workspace w = prepare(o, err);
  const InsertionOutcome r =
      paired_insertion_experiment(w.model, w.params, w.data.holdout, w.data.test, cfg, channel_means(w.data.train));
  io::CsvTable t({"k", "mean_delta_random", "mean_delta_topk", "mean_delta_t_minus_r", "ci_low", "ci_high", "pairs"});
  for (const auto& p : r.results)
    t.row() << p.k << p.mean_random << p.mean_topk << p.mean_diff << p.mean_diff - p.ci_half_width
            << p.mean_diff + p.ci_half_width << p.pairs;
  io::CsvTable pairs({"test_index", "holdout_index", "k", "delta_topk", "delta_random"});
  for (const auto& p : r.pairs) pairs.row() << p.test_index << p.train_index << p.k << p.delta_topk << p.delta_random;
  const fs::path dir = o.out;
  io::write_file(dir / "tables" / "insertion.csv", t.str());
  io::write_file(dir / "tables" / "insertion_pairs.csv", pairs.str());
  io::KeyValues kv;
  o.echo(kv);
  kv["command"] = "insertion";
  kv["k-list"] = join_doubles(cfg.k_percents);
  kv["tests"] = std::to_string(s.tests);
  kv["top-m"] = std::to_string(s.top_m);
  kv["lr-step"] = io::format_double(s.lr_step);
  kv["sigma"] = io::format_double(s.sigma);
  kv["samples"] = std::to_string(s.samples);
  kv["fill"] = s.fill;
  kv["channel-mode"] = s.channel_mode;
  write_manifest(dir, kv);
  out << t.str();
  return kExitOk;
}

struct ExplainOptionsCli {
  std::size_t test_index = 0;
  std::size_t count = 5;
  double sigma = 0.1;
  std::size_t samples = 50;
  std::string channel_mode = "abs-sum";
  bool predicted_label = false;
};

inline int run_explain(const CommonOptions& o, const ExplainOptionsCli& s, std::ostream& out, std::ostream& err) {
  const ChannelMode mode = parse_channel_mode(s.channel_mode);
  Workspace w = prepare(o, err);
  const LabeledExample& z = pick(w.data.test, s.test_index, "test");
  ExplainConfig cfg;
  cfg.count = s.count;
  cfg.smoothing = {s.sigma, s.samples, stream_seed(o.seed, "explain"), o.threads};
  cfg.test_index = s.test_index;
  cfg.use_predicted_label = s.predicted_label;
  cfg.threads = o.threads;
  const MisclassificationReport rep = explain_misclassification(w.model, w.params, w.data.train, z, cfg);
  if (rep.correctly_classified) {
    err << "warning: test image " << s.test_index << " is classified correctly (class " << rep.true_label << ")\n";
  }
  const fs::path dir = o.out;
  io::CsvTable t({"role", "rank", "train_index", "label", "score"});
  auto emit = [&](const char* role, const std::vector<ExplainedExample>& list) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto& e = list[i];
      t.row() << role << i + 1 << e.record.train_index << w.data.train[e.record.train_index].y << e.record.score;
      write_map(dir, std::string(role) + "_" + std::to_string(i + 1) + "_train" + std::to_string(e.record.train_index),
                e.map.values, mode);
    }
  };
  emit("harmful", rep.harmful);
  emit("helpful", rep.helpful);
  io::write_file(dir / "tables" / "explain.csv", t.str());
  io::KeyValues kv;
  o.echo(kv);
  kv["command"] = "explain";
  kv["test-index"] = std::to_string(s.test_index);
  kv["count"] = std::to_string(s.count);
  kv["sigma"] = io::format_double(s.sigma);
  kv["samples"] = std::to_string(s.samples);
  kv["channel-mode"] = s.channel_mode;
  kv["predicted-label"] = s.predicted_label ? "true" : "false";
  kv["true-label"] = std::to_string(rep.true_label);
  kv["predicted"] = std::to_string(rep.predicted_label);
  kv["correctly-classified"] = rep.correctly_classified ? "true" : "false";
  write_manifest(dir, kv);
  out << "true class " << rep.true_label << ", predicted " << rep.predicted_label << "\n" << t.str();
  return kExitOk;
}

struct PatchSweepOptionsCli {
  std::string fractions = "0,0.1,0.25,0.4,0.55,0.7,0.85,0.95,1";
  std::size_t patch_size = 5;
  std::string color = "1,0,0";
  std::string corner = "bottom-right";
  std::size_t target_class = 0;
  std::size_t probe_class = 1;
  std::size_t probes = 5;
  std::size_t harmful = 10;
  double sigma = 0.1;
  std::size_t samples = 50;
  std::string channel_mode = "abs-sum";
};

inline int run_patch_sweep(const CommonOptions& o, const PatchSweepOptionsCli& s, std::ostream& out,
                           std::ostream& err) {
  const std::vector<double> fractions = parse_double_list(s.fractions);
  PatchSweepConfig cfg;
  cfg.patch.size = s.patch_size;
  cfg.patch.color = parse_double_list(s.color);
  cfg.patch.corner = parse_corner(s.corner);
  cfg.patch.target_class = s.target_class;
  cfg.probe_class = s.probe_class;
  cfg.probes = s.probes;
  cfg.harmful = s.harmful;
  cfg.smoothing = {s.sigma, s.samples, 0, 1};
  cfg.channel_mode = parse_channel_mode(s.channel_mode);
  cfg.seed = stream_seed(o.seed, "patch-sweep");
  cfg.threads = o.threads;
  const Splits data = load_data(o);
  const ArchitectureSpec arch = architecture(o, data);
  err << "sweeping " << fractions.size() << " patch fractions\n";
  const auto rows = patch_sweep(data, fractions, arch, train_config(o), cfg);
  io::CsvTable t({"patch_fraction", "overall_accuracy", "target_unpatched_accuracy", "probe_patched_accuracy",
                  "patch_attribution_fraction", "probes", "misclassified_patched_probes"});
  for (const auto& r : rows)
    t.row() << r.fraction << r.overall_accuracy << r.target_unpatched_accuracy << r.probe_patched_accuracy
            << r.patch_attribution_fraction << r.probes_used << r.misclassified_probes;
  const fs::path dir = o.out;
  io::write_file(dir / "tables" / "patch_sweep.csv", t.str());
  io::KeyValues kv;
  o.echo(kv);
  kv["command"] = "patch-sweep";
  kv["fractions"] = join_doubles(fractions);
  kv["patch-size"] = std::to_string(s.patch_size);
  kv["color"] = join_doubles(cfg.patch.color);
  kv["corner"] = s.corner;
  kv["target-class"] = std::to_string(s.target_class);
  kv["probe-class"] = std::to_string(s.probe_class);
  kv["probes"] = std::to_string(s.probes);
  kv["harmful"] = std::to_string(s.harmful);
  kv["sigma"] = io::format_double(s.sigma);
  kv["samples"] = std::to_string(s.samples);
  kv["channel-mode"] = s.channel_mode;
  write_manifest(dir, kv);
  out << t.str();
  return kExitOk;
}

struct ToyRidgeOptionsCli {
  std::size_t n = 5;
  double c = 2.0;
  double lambda = 1.0;
  double t = 1.0;
  std::string axis_values;  // n - 1 values; default all ones
  std::string out;
};

// One row per training example: the representer alpha and the feature-level
// betas, each also weighted by the target.
inline std::string toy_ridge_table(const ToyRidgeOptionsCli& s) {
  if (s.n < 2) throw InvalidArgument("toy ridge needs n >= 2");
  ridge::ToySetup toy;
  toy.axis_values = s.axis_values.empty() ? std::vector<double>(s.n - 1, 1.0) : parse_double_list(s.axis_values);
  if (toy.axis_values.size() != s.n - 1) throw InvalidArgument("--x1 needs n - 1 values");
  toy.c = s.c;
  toy.lambda = s.lambda;
  const ridge::RidgeProblem p = toy.problem();
  const Eigen::VectorXd query{{0.0, s.t}};
  const Eigen::VectorXd alpha = ridge::representer_alphas(p, query);
  const Eigen::MatrixXd beta = ridge::tfa_betas(p, query);
  io::CsvTable t({"i", "x1", "x2", "y", "alpha", "y_alpha", "beta1", "beta2", "y_beta1", "y_beta2"});
  for (Eigen::Index i = 0; i < p.X.rows(); ++i) {
    const double y = p.y(i);
    t.row() << static_cast<std::size_t>(i + 1) << p.X(i, 0) << p.X(i, 1) << y << alpha(i) << y * alpha(i)
            << beta(i, 0) << beta(i, 1) << y * beta(i, 0) << y * beta(i, 1);
  }
  return t.str();
}

inline int run_toy_ridge(const ToyRidgeOptionsCli& s, std::ostream& out) {
  const std::string table = toy_ridge_table(s);
  out << table;
  if (!s.out.empty()) {
    io::write_file(fs::path(s.out) / "tables" / "toy_ridge.csv", table);
    write_manifest(s.out, {{"command", "toy-ridge"},
                           {"n", std::to_string(s.n)},
                           {"c", io::format_double(s.c)},
                           {"lambda", io::format_double(s.lambda)},
                           {"t", io::format_double(s.t)},
                           {"x1", s.axis_values}});
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Dispatch

// Appends `--key value` for each config-file key not already given on the
// command line, so explicit flags win. "true" becomes a bare flag, "false" is
// dropped.
inline std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  const io::KeyValues kv = io::parse_key_values(io::read_file(path));
  std::vector<std::string> out = args;
  for (const auto& [key, value] : kv) {
    if (key == "config") continue;
    const std::string flag = "--" + key;
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (given || value == "false") continue;
    out.push_back(flag);
    if (value != "true") out.push_back(value);
  }
  return out;
}

inline std::string usage() {
  return "usage: tfa_cli <command> [options]\n"
         "commands: train, rank, saliency, insertion, explain, patch-sweep, toy-ridge\n"
         "run `tfa_cli <command> --help` for the options of one command\n";
}

// Runs one command. args excludes the program name.
inline int dispatch(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  if (raw_args.empty()) {
    err << usage();
    return kExitUsage;
  }
  CLI::App app{"training-feature attribution tools", "tfa_cli"};
  app.require_subcommand(1);
  app.fallthrough(false);

  CommonOptions common;
  RankOptionsCli rank;
  SaliencyOptionsCli sal;
  InsertionOptionsCli ins;
  ExplainOptionsCli exp;
  PatchSweepOptionsCli patch;
  ToyRidgeOptionsCli toy;

  auto* c_train = app.add_subcommand("train", "train a model and write model.txt");
  common.add_to(c_train);

  auto* c_rank = app.add_subcommand("rank", "rank training images for one test image");
  common.add_to(c_rank);
  c_rank->add_option("--test-index", rank.test_index);
  c_rank->add_option("--method", rank.method, "grad-cos, grad-effect, influence, relatif");
  c_rank->add_option("--epsilon", rank.epsilon, "step size for grad-effect");
  c_rank->add_option("--damping", rank.damping, "Hessian damping (negative = 1e-3 * trace / p)");
  c_rank->add_option("--hessian-samples", rank.hessian_samples, "training images in the Hessian (0 = all)");
  c_rank->add_flag("--predicted-label", rank.predicted_label, "use the predicted test label");

  auto* c_sal = app.add_subcommand("saliency", "saliency map for one train/test pair");
  common.add_to(c_sal);
  c_sal->add_option("--train-index", sal.train_index);
  c_sal->add_option("--test-index", sal.test_index);
  c_sal->add_option("--sigma", sal.sigma, "SmoothGrad noise std");
  c_sal->add_option("--samples", sal.samples, "SmoothGrad sample count");
  c_sal->add_flag("--raw", sal.raw, "skip SmoothGrad");
  c_sal->add_option("--layer", sal.layer, "also write a layer map for this layer index");
  c_sal->add_option("--channel-mode", sal.channel_mode, "abs-sum or l2");
  c_sal->add_flag("--predicted-label", sal.predicted_label);

  auto* c_ins = app.add_subcommand("insertion", "paired insertion experiment");
  common.add_to(c_ins);
  c_ins->add_option("--k", ins.k_list, "comma-separated retained percentages");
  c_ins->add_option("--tests", ins.tests, "test images");
  c_ins->add_option("--top-m", ins.top_m, "holdout images per test image");
  c_ins->add_option("--lr-step", ins.lr_step, "intervention step size");
  c_ins->add_option("--sigma", ins.sigma);
  c_ins->add_option("--samples", ins.samples);
  c_ins->add_option("--fill", ins.fill, "dataset-mean or zero");
  c_ins->add_option("--channel-mode", ins.channel_mode);

  auto* c_exp = app.add_subcommand("explain", "most harmful and helpful training images with maps");
  common.add_to(c_exp);
  c_exp->add_option("--test-index", exp.test_index);
  c_exp->add_option("--count", exp.count, "images per side");
  c_exp->add_option("--sigma", exp.sigma);
  c_exp->add_option("--samples", exp.samples);
  c_exp->add_option("--channel-mode", exp.channel_mode);
  c_exp->add_flag("--predicted-label", exp.predicted_label);

  auto* c_patch = app.add_subcommand("patch-sweep", "retrain with a planted patch at several fractions");
  common.add_to(c_patch);
  c_patch->add_option("--fractions", patch.fractions, "comma-separated patched fractions of the target class");
  c_patch->add_option("--patch-size", patch.patch_size);
  c_patch->add_option("--color", patch.color, "comma-separated channel values");
  c_patch->add_option("--corner", patch.corner, "top-left, top-right, bottom-left, bottom-right");
  c_patch->add_option("--target-class", patch.target_class);
  c_patch->add_option("--probe-class", patch.probe_class);
  c_patch->add_option("--probes", patch.probes);
  c_patch->add_option("--harmful", patch.harmful, "harmful training images per probe");
  c_patch->add_option("--sigma", patch.sigma);
  c_patch->add_option("--samples", patch.samples);
  c_patch->add_option("--channel-mode", patch.channel_mode);

  auto* c_toy = app.add_subcommand("toy-ridge", "alpha and beta table for the toy ridge problem");
  c_toy->add_option("--n", toy.n, "training points");
  c_toy->add_option("--c", toy.c, "second coordinate of the last point");
  c_toy->add_option("--lambda", toy.lambda);
  c_toy->add_option("--t", toy.t, "query second coordinate");
  c_toy->add_option("--x1", toy.axis_values, "comma-separated first coordinates of the n - 1 axis points");
  c_toy->add_option("--out", toy.out, "also write tables/toy_ridge.csv here");

  if (raw_args.front().empty() || raw_args.front()[0] != '-') {
    const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
    const bool known = std::any_of(subs.begin(), subs.end(),
                                   [&](const CLI::App* s) { return s->get_name() == raw_args.front(); });
    if (!known) {
      err << "error: unknown command '" << raw_args.front() << "'\n" << usage();
      return kExitUsage;
    }
  }

  try {
    std::vector<std::string> args = merge_config(raw_args);
    std::vector<char*> argv;
    std::string prog = "tfa_cli";
    argv.push_back(prog.data());
    for (auto& a : args) argv.push_back(a.data());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << usage();
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: config: " << e.what() << "\n";
    return kExitData;
  }

  try {
    if (c_train->parsed()) return run_train(common, out);
    if (c_rank->parsed()) return run_rank(common, rank, out, err);
    if (c_sal->parsed()) return run_saliency(common, sal, out, err);
    if (c_ins->parsed()) return run_insertion(common, ins, out, err);
    if (c_exp->parsed()) return run_explain(common, exp, out, err);
    if (c_patch->parsed()) return run_patch_sweep(common, patch, out, err);
    if (c_toy->parsed()) return run_toy_ridge(toy, out);
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DampingError& e) {
    err << "error: " << e.what() << " (try a larger --damping)\n";
    return kExitData;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  err << usage();
  return kExitUsage;
}

inline int dispatch(int argc, char** argv, std::ostream& out, std::ostream& err) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace tfa::cli
