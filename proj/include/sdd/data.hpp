#pragma once

// Image datasets: IDX files and a synthetic "ambiguous classes" generator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sdd/errors.hpp"
#include "sdd/io.hpp"
#include "sdd/tensor.hpp"

namespace sdd {

struct Dataset {
  std::size_t count = 0;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> images;  // N x C x H x W
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  // Applied to pixel / 255 as (x - mean) / std.
  double mean = 0.0;
  double std = 1.0;

  std::size_t image_size() const { return channels * height * width; }

  void validate() const {
    if (count == 0) throw DataError("dataset is empty");
    if (images.size() != count * image_size()) throw DataError("dataset pixel count mismatch");
    if (labels.size() != count) throw DataError("dataset label count mismatch");
    for (auto y : labels) {
      if (y >= num_classes) {
        throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }

  /// Mean / std of all pixels scaled to [0, 1].
  void compute_normalization() {
    double s = 0.0, s2 = 0.0;
    for (auto p : images) {
      const double v = p / 255.0;
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(images.size());
    mean = s / n;
    const double var = s2 / n - mean * mean;
    std = var > 1e-12 ? std::sqrt(var) : 1.0;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> c(num_classes, 0);
    for (auto y : labels) ++c[y];
    return c;
  }
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxImagesMagic4d = 0x00000804;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& file) {
  if (off + 4 > b.size()) throw DataError("truncated IDX header in " + file);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

/// Reads an images / labels IDX pair (u8 payloads, big-endian headers).
/// Images may be N x H x W (0x803) or N x C x H x W (0x804).
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file_bytes(images_path);
  const auto lab = read_file_bytes(labels_path);
  const auto iname = images_path.string(), lname = labels_path.string();

  const auto imagic = detail::read_be32(img, 0, iname);
  if (imagic != kIdxImagesMagic && imagic != kIdxImagesMagic4d) {
    throw DataError("wrong magic in images file " + iname + ": expected 0x00000803");
  }
  const auto lmagic = detail::read_be32(lab, 0, lname);
  if (lmagic != kIdxLabelsMagic) {
    throw DataError("wrong magic in labels file " + lname + ": expected 0x00000801");
  }

  Dataset ds;
  std::size_t off = 4;
  ds.count = detail::read_be32(img, off, iname);
  off += 4;
  if (imagic == kIdxImagesMagic4d) {
    ds.channels = detail::read_be32(img, off, iname);
    off += 4;
  }
  ds.height = detail::read_be32(img, off, iname);
  ds.width = detail::read_be32(img, off + 4, iname);
  off += 8;
  const std::size_t nlabels = detail::read_be32(lab, 4, lname);
  if (nlabels != ds.count) {
    throw DataError("count mismatch: " + iname + " has " + std::to_string(ds.count) + " images, " + lname + " has " +
                    std::to_string(nlabels) + " labels");
  }
  if (img.size() != off + ds.count * ds.image_size()) {
    throw DataError("truncated images file " + iname + ": expected " + std::to_string(off + ds.count * ds.image_size()) +
                    " bytes, found " + std::to_string(img.size()));
  }
  if (lab.size() != 8 + ds.count) {
    throw DataError("truncated labels file " + lname + ": expected " + std::to_string(8 + ds.count) +
                    " bytes, found " + std::to_string(lab.size()));
  }
  ds.images.assign(img.begin() + static_cast<std::ptrdiff_t>(off), img.end());
  ds.labels.resize(ds.count);
  std::size_t k = 0;
  for (std::size_t i = 0; i < ds.count; ++i) {
    ds.labels[i] = lab[8 + i];
    k = std::max(k, ds.labels[i] + 1);
  }
  ds.num_classes = k;
  ds.compute_normalization();
  return ds;
}

inline std::string encode_idx_images(const Dataset& ds) {
  std::string out;
  if (ds.channels == 1) {
    detail::put_be32(out, kIdxImagesMagic);
    detail::put_be32(out, static_cast<std::uint32_t>(ds.count));
  } else {
    detail::put_be32(out, kIdxImagesMagic4d);
    detail::put_be32(out, static_cast<std::uint32_t>(ds.count));
    detail::put_be32(out, static_cast<std::uint32_t>(ds.channels));
  }
  detail::put_be32(out, static_cast<std::uint32_t>(ds.height));
  detail::put_be32(out, static_cast<std::uint32_t>(ds.width));
  out.append(ds.images.begin(), ds.images.end());
  return out;
}

inline std::string encode_idx_labels(const Dataset& ds) {
  std::string out;
  detail::put_be32(out, kIdxLabelsMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(ds.count));
  for (auto y : ds.labels) {
    if (y > 255) throw DataError("IDX labels are u8; label " + std::to_string(y) + " does not fit");
    out.push_back(static_cast<char>(y));
  }
  return out;
}

inline void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  write_file_atomic(images_path, encode_idx_images(ds));
  write_file_atomic(labels_path, encode_idx_labels(ds));
}

/// Superclasses share a global low-frequency template; classes inside a
/// superclass differ only by a zero-mean local motif at a random position.
/// A fainter motif of a sibling class sits elsewhere in the same image.
struct SynthSpec {
  std::size_t num_superclasses = 4;
  std::size_t classes_per_superclass = 2;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  // Per-sample randomness; templates and motifs depend on `seed` only.
  std::size_t num_samples = 2048;
  std::uint64_t sample_seed = 1;
  double template_amplitude = 0.25;
  double motif_amplitude = 0.6;
  // A sibling class's motif at a disjoint position; 0 disables it.
  double distractor_amplitude = 0.2;

  std::size_t num_classes() const { return num_superclasses * classes_per_superclass; }

  void validate() const {
    if (num_superclasses == 0 || classes_per_superclass == 0) throw ConfigError("synth: class counts must be positive");
    if (patch_size == 0 || patch_size >= image_size) throw ConfigError("synth: patch_size must be in (0, image_size)");
    if (num_samples == 0) throw ConfigError("synth: num_samples must be positive");
    if (!(noise_std >= 0.0)) throw ConfigError("synth: noise_std must be >= 0");
    if (!(distractor_amplitude >= 0.0 && distractor_amplitude < motif_amplitude)) {
      throw ConfigError("synth: distractor_amplitude must be in [0, motif_amplitude)");
    }
    if (distractor_amplitude > 0.0 && 2 * patch_size > image_size) {
      throw ConfigError("synth: two disjoint patches do not fit in the image");
    }
  }
};

namespace detail {

struct SynthPatterns {
  std::vector<std::vector<double>> templates;  // per superclass, S*S
  std::vector<std::vector<double>> motifs;     // per class, P*P, values +-1, zero mean
};

inline SynthPatterns synth_patterns(const SynthSpec& spec) {
  std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + 0x51ED27);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double pi = std::acos(-1.0);
  const std::size_t S = spec.image_size, P = spec.patch_size;
  SynthPatterns out;
  for (std::size_t s = 0; s < spec.num_superclasses; ++s) {
    // Two plane waves per superclass with distinct orientations.
    double th[2], fr[2], ph[2];
    for (int w = 0; w < 2; ++w) {
      th[w] = pi * (static_cast<double>(s) / static_cast<double>(spec.num_superclasses) + 0.5 * w) + 0.2 * u01(rng);
      fr[w] = 1.0 + 2.0 * u01(rng);
      ph[w] = 2.0 * pi * u01(rng);
    }
    // Distinct mean brightness per superclass, in [-0.3, 0.3] before scaling.
    const double offset =
        spec.num_superclasses > 1 ? 0.6 * static_cast<double>(s) / static_cast<double>(spec.num_superclasses - 1) - 0.3
                                  : 0.0;
    std::vector<double> t(S * S);
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = 0; j < S; ++j) {
        double v = 0.0;
        for (int w = 0; w < 2; ++w) {
          const double proj = (std::cos(th[w]) * static_cast<double>(i) + std::sin(th[w]) * static_cast<double>(j)) /
                              static_cast<double>(S);
          v += 0.5 * std::sin(2.0 * pi * fr[w] * proj + ph[w]);
        }
        t[i * S + j] = v + offset;
      }
    out.templates.push_back(std::move(t));
  }
  // Motifs are balanced +-1 grids of (P/2) x (P/2) blocks, 2x2 pixels each.
  const std::size_t G = std::max<std::size_t>(1, P / 2);
  for (std::size_t k = 0; k < spec.num_classes(); ++k) {
    std::vector<double> grid(G * G, -1.0);
    std::vector<std::size_t> idx(G * G);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < G * G / 2; ++i) grid[idx[i]] = 1.0;
    std::vector<double> m(P * P);
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) m[i * P + j] = grid[std::min(i * G / P, G - 1) * G + std::min(j * G / P, G - 1)];
    out.motifs.push_back(std::move(m));
  }
  return out;
}

}  // namespace detail

/// Balanced dataset (labels cycle through the classes), deterministic under the two seeds.
inline Dataset generate_ambiguous(const SynthSpec& spec) {
  spec.validate();
  const auto pats = detail::synth_patterns(spec);
  const std::size_t S = spec.image_size, P = spec.patch_size, K = spec.num_classes();
  std::mt19937_64 rng(spec.sample_seed * 0xD1B54A32D192ED03ULL + spec.seed + 7);
  std::uniform_int_distribution<std::size_t> pos(0, S - P);
  std::normal_distribution<double> noise(0.0, 1.0);

  Dataset ds;
  ds.count = spec.num_samples;
  ds.height = ds.width = S;
  ds.num_classes = K;
  ds.images.resize(ds.count * S * S);
  ds.labels.resize(ds.count);
  std::uniform_int_distribution<std::size_t> sibling(0, spec.classes_per_superclass > 1 ? spec.classes_per_superclass - 2 : 0);
  std::vector<double> img(S * S);
  auto stamp = [&](const std::vector<double>& m, std::size_t r, std::size_t c, double amp) {
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < P; ++j) img[(r + i) * S + c + j] += amp * m[i * P + j];
  };
  for (std::size_t n = 0; n < ds.count; ++n) {
    const std::size_t y = n % K;
    const std::size_t super = y / spec.classes_per_superclass;
    ds.labels[n] = y;
    const auto& t = pats.templates[super];
    for (std::size_t i = 0; i < S * S; ++i) img[i] = 0.5 + spec.template_amplitude * t[i];
    const std::size_t r0 = pos(rng), c0 = pos(rng);
    stamp(pats.motifs[y], r0, c0, spec.motif_amplitude);
    if (spec.distractor_amplitude > 0.0 && spec.classes_per_superclass > 1) {
      const std::size_t sib = super * spec.classes_per_superclass +
                              (y % spec.classes_per_superclass + 1 + sibling(rng)) % spec.classes_per_superclass;
      std::size_t r1, c1;
      do {
        r1 = pos(rng);
        c1 = pos(rng);
      } while (r1 + P > r0 && r0 + P > r1 && c1 + P > c0 && c0 + P > c1);
      stamp(pats.motifs[sib], r1, c1, spec.distractor_amplitude);
    }
    for (std::size_t i = 0; i < S * S; ++i) {
      const double v = img[i] + spec.noise_std * noise(rng);
      ds.images[n * S * S + i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  ds.compute_normalization();
  return ds;
}

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// Train and test sets that share templates; the test set uses the train normalization.
inline DatasetSplit generate_ambiguous_split(SynthSpec spec, std::size_t train_size, std::size_t test_size) {
  spec.num_samples = train_size;
  spec.sample_seed = 2 * spec.seed + 1;
  DatasetSplit out;
  out.train = generate_ambiguous(spec);
  spec.num_samples = test_size;
  spec.sample_seed = 2 * spec.seed + 2;
  out.test = generate_ambiguous(spec);
  out.test.mean = out.train.mean;
  out.test.std = out.train.std;
  return out;
}

template <class T>
struct Batch {
  std::vector<std::size_t> indices;
  Tensor<T> images;  // B x C x H x W, normalized
  std::vector<std::size_t> labels;
};

/// Normalized images for the given sample indices.
template <class T>
Batch<T> make_batch(const Dataset& ds, std::vector<std::size_t> indices) {
  const std::size_t D = ds.image_size();
  std::vector<T> px(indices.size() * D);
  std::vector<std::size_t> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = indices[i];
    for (std::size_t p = 0; p < D; ++p) {
      px[i * D + p] = static_cast<T>((ds.images[src * D + p] / 255.0 - ds.mean) / ds.std);
    }
    labels[i] = ds.labels[src];
  }
  Batch<T> b;
  b.images = Tensor<T>({indices.size(), ds.channels, ds.height, ds.width}, std::move(px));
  b.labels = std::move(labels);
  b.indices = std::move(indices);
  return b;
}

/// Seeded pass over a dataset; the final partial batch is included.
template <class T>
class BatchStream {
 public:
  BatchStream(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, bool shuffle)
      : ds_(ds), batch_size_(batch_size), order_(ds.count) {
    if (batch_size == 0 || batch_size > ds.count) {
      throw ConfigError("batch_size must be in [1, " + std::to_string(ds.count) + "]");
    }
    std::iota(order_.begin(), order_.end(), 0);
    if (shuffle) {
      std::mt19937_64 rng(seed);
      std::shuffle(order_.begin(), order_.end(), rng);
    }
  }

  std::optional<Batch<T>> next() {
    if (pos_ >= order_.size()) return std::nullopt;
    const auto end = std::min(order_.size(), pos_ + batch_size_);
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return make_batch<T>(ds_, std::move(idx));
  }

  std::size_t num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset& ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace sdd
