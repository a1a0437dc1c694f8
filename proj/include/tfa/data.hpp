#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tfa/errors.hpp"
#include "tfa/models.hpp"
#include "tfa/random.hpp"

namespace tfa {

struct Splits {
  Dataset train;
  Dataset holdout;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Synthetic shapes: class 0 filled square, 1 filled disc, 2 cross

struct SyntheticShapesSpec {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t classes = 2;
  double noise = 0.05;
  std::size_t train_count = 600;
  std::size_t holdout_count = 200;
  std::size_t test_count = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2 || classes > 3) throw InvalidArgument("synthetic shapes support 2 or 3 classes");
    if (image_size < 8) throw InvalidArgument("synthetic image size must be >= 8");
    if (channels != 1 && channels != 3) throw InvalidArgument("synthetic images have 1 or 3 channels");
    if (!(noise >= 0.0)) throw InvalidArgument("synthetic noise must be >= 0");
    if (train_count == 0) throw InvalidArgument("synthetic train split is empty");
  }
};

namespace detail {

inline bool shape_covers(std::size_t label, double dy, double dx, double half) {
  switch (label) {
    case 0: return std::abs(dy) <= half && std::abs(dx) <= half;
    case 1: return dy * dy + dx * dx <= half * half;
    default: {
      const double arm = std::max(1.0, half / 3.0);
      return (std::abs(dy) <= arm && std::abs(dx) <= half) || (std::abs(dx) <= arm && std::abs(dy) <= half);
    }
  }
}

// One image from its own stream, so splits can be generated in any order.
inline LabeledExample synthetic_example(const SyntheticShapesSpec& spec, std::string_view split, std::size_t index) {
  Rng rng = make_rng(spec.seed, split, index);
  const std::size_t label = index % spec.classes;
  const std::size_t s = spec.image_size, c = spec.channels;
  const double size = static_cast<double>(s);
  const double half = size * (0.18 + 0.12 * uniform01(rng));
  const double cy = half + (size - 1 - 2 * half) * uniform01(rng);
  const double cx = half + (size - 1 - 2 * half) * uniform01(rng);
  std::array<double, 3> background{}, foreground{};
  for (std::size_t ch = 0; ch < c; ++ch) {
    background[ch] = 0.35 * uniform01(rng);
    foreground[ch] = 0.55 + 0.45 * uniform01(rng);
  }
  Tensor x(Shape{c, s, s});
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      const bool on = shape_covers(label, static_cast<double>(i) - cy, static_cast<double>(j) - cx, half);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = (on ? foreground[ch] : background[ch]) + spec.noise * standard_normal(rng);
        x[(ch * s + i) * s + j] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return {std::move(x), label};
}

}  // namespace detail

inline Splits generate_synthetic(const SyntheticShapesSpec& spec) {
  spec.validate();
  Splits out;
  auto fill = [&](Dataset& d, std::string_view split, std::size_t n) {
    d.reserve(n);
    for (std::size_t i = 0; i < n; ++i) d.push_back(detail::synthetic_example(spec, split, i));
  };
  fill(out.train, "synthetic-train", spec.train_count);
  fill(out.holdout, "synthetic-holdout", spec.holdout_count);
  fill(out.test, "synthetic-test", spec.test_count);
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary: each record is 1 label byte then 3 planes of 32x32 bytes (R, G, B).

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarPixels;
inline constexpr std::size_t kCifarClasses = 10;

struct CifarRecord {
  std::uint8_t label = 0;
  std::array<std::uint8_t, kCifarPixels> pixels{};
};

inline std::vector<CifarRecord> parse_cifar10_records(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("CIFAR-10 data of " + std::to_string(bytes.size()) + " bytes is not a multiple of " +
                      std::to_string(kCifarRecordBytes));
  }
  std::vector<CifarRecord> out(bytes.size() / kCifarRecordBytes);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= kCifarClasses) {
      throw FormatError("invalid label " + std::to_string(rec[0]) + " in CIFAR-10 record " + std::to_string(r));
    }
    out[r].label = rec[0];
    std::copy(rec + 1, rec + kCifarRecordBytes, out[r].pixels.begin());
  }
  return out;
}

inline std::vector<std::uint8_t> serialize_cifar10_records(const std::vector<CifarRecord>& records) {
  std::vector<std::uint8_t> out;
  out.reserve(records.size() * kCifarRecordBytes);
  for (const auto& r : records) {
    out.push_back(r.label);
    out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  }
  return out;
}

inline Tensor cifar_image(const CifarRecord& r) {
  Tensor x(Shape{3, kCifarSide, kCifarSide});
  for (std::size_t i = 0; i < kCifarPixels; ++i) x[i] = static_cast<double>(r.pixels[i]) / 255.0;
  return x;
}

// Keeps records whose label is in `classes` (relabelled to its position there),
// at most `per_class_cap` per class in file order; cap 0 keeps all.
inline Dataset select_cifar_classes(const std::vector<CifarRecord>& records, const std::vector<std::size_t>& classes,
                                    std::size_t per_class_cap) {
  std::vector<std::size_t> taken(classes.size(), 0);
  Dataset out;
  for (const auto& r : records) {
    const auto it = std::find(classes.begin(), classes.end(), static_cast<std::size_t>(r.label));
    if (it == classes.end()) continue;
    const std::size_t k = static_cast<std::size_t>(it - classes.begin());
    if (per_class_cap != 0 && taken[k] >= per_class_cap) continue;
    ++taken[k];
    out.push_back({cifar_image(r), k});
  }
  return out;
}

inline std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Reads data_batch_1..5.bin as train and test_batch.bin as test. The last
// `holdout_fraction` of the selected train records becomes the holdout pool.
inline Splits load_cifar10_binary(const std::filesystem::path& dir, const std::vector<std::size_t>& classes,
                                  std::size_t per_class_cap, double holdout_fraction = 0.1) {
  if (classes.empty()) throw InvalidArgument("CIFAR-10 class subset is empty");
  for (std::size_t c : classes) {
    if (c >= kCifarClasses) throw InvalidArgument("CIFAR-10 class " + std::to_string(c) + " out of range");
  }
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw InvalidArgument("holdout fraction must be in [0, 1)");
  }
  std::vector<CifarRecord> train_records;
  for (int b = 1; b <= 5; ++b) {
    const auto path = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (!std::filesystem::exists(path)) continue;
    auto part = parse_cifar10_records(read_binary_file(path));
    train_records.insert(train_records.end(), part.begin(), part.end());
  }
  if (train_records.empty()) throw FormatError("no data_batch_*.bin files in " + dir.string());
  const auto test_path = dir / "test_batch.bin";
  if (!std::filesystem::exists(test_path)) throw FormatError("missing " + test_path.string());

  Splits out;
  Dataset all = select_cifar_classes(train_records, classes, per_class_cap);
  const auto holdout = static_cast<std::size_t>(std::floor(holdout_fraction * static_cast<double>(all.size())));
  out.holdout.assign(all.end() - static_cast<std::ptrdiff_t>(holdout), all.end());
  all.resize(all.size() - holdout);
  out.train = std::move(all);
  out.test = select_cifar_classes(parse_cifar10_records(read_binary_file(test_path)), classes, per_class_cap);
  return out;
}

// Per-channel mean over every pixel of every image; images are [C, H, W].
inline std::vector<double> channel_means(const Dataset& data) {
  if (data.empty()) throw InvalidArgument("channel_means of an empty dataset");
  const Shape& s = data.front().x.shape();
  if (s.size() != 3) throw ShapeError("channel_means expects [C,H,W] images, got " + shape_str(s));
  const std::size_t c = s[0], hw = s[1] * s[2];
  std::vector<double> sum(c, 0.0);
  for (const auto& z : data) {
    if (z.x.shape() != s) throw ShapeError("images in a dataset must share one shape");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += z.x[ch * hw + p];
      sum[ch] += acc;
    }
  }
  for (double& v : sum) v /= static_cast<double>(data.size() * hw);
  return sum;
}

}  // namespace tfa
