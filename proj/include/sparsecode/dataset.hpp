#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparsecode/rng.hpp"

namespace sparsecode {

enum class Split { train, validation };

// Labeled collection of flattened grayscale images.
//
// Images are stored as columns of an m x T matrix (column-major), which is
// byte-identical to the T x m row-major layout of the IDX payload. Pixels are
// scaled to [0, 1] by dividing the byte value by 255.
struct ImageSet {
  Eigen::MatrixXd pixels;       // m x T, one image per column
  std::vector<int> labels;      // length T, values 0..9
  Split split = Split::train;

  Eigen::Index dim() const { return pixels.rows(); }
  Eigen::Index count() const { return pixels.cols(); }

  void validate() const {
    if (static_cast<Eigen::Index>(labels.size()) != pixels.cols())
      throw std::invalid_argument("ImageSet: label count does not match image count");
    if (pixels.size() > 0 && (pixels.minCoeff() < 0.0 || pixels.maxCoeff() > 1.0))
      throw std::invalid_argument("ImageSet: pixel values outside [0,1]");
  }
};

// Index subset with exactly k entries per class.
struct LabeledSubset {
  std::vector<std::size_t> indices;
  int per_class = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& context) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw std::runtime_error("IDX: truncated file while reading " + context);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const std::array<unsigned char, 4> b{
      static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
      static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b.data()), 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Loads an IDX image/label file pair (the MNIST container format).
inline ImageSet load_idx(const std::filesystem::path& image_path,
                         const std::filesystem::path& label_path) {
  std::ifstream img(image_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot open image file: " + image_path.string());
  std::ifstream lab(label_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot open label file: " + label_path.string());

  const std::uint32_t img_magic = detail::read_be32(img, "image magic");
  if (img_magic != kIdxImageMagic)
    throw std::runtime_error("IDX: bad image magic number");
  const std::uint32_t n_images = detail::read_be32(img, "image count");
  const std::uint32_t rows = detail::read_be32(img, "image rows");
  const std::uint32_t cols = detail::read_be32(img, "image cols");

  const std::uint32_t lab_magic = detail::read_be32(lab, "label magic");
  if (lab_magic != kIdxLabelMagic)
    throw std::runtime_error("IDX: bad label magic number");
  const std::uint32_t n_labels = detail::read_be32(lab, "label count");
  if (n_images != n_labels)
    throw std::runtime_error("IDX: image/label count mismatch");

  const std::size_t m = std::size_t(rows) * cols;
  std::vector<unsigned char> buf(m);
  ImageSet set;
  set.pixels.resize(static_cast<Eigen::Index>(m), n_images);
  set.labels.resize(n_images);
  for (std::uint32_t t = 0; t < n_images; ++t) {
    img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(m));
    if (!img) throw std::runtime_error("IDX: truncated image payload");
    for (std::size_t i = 0; i < m; ++i)
      set.pixels(static_cast<Eigen::Index>(i), t) = buf[i] / 255.0;
  }
  std::vector<unsigned char> lbuf(n_labels);
  lab.read(reinterpret_cast<char*>(lbuf.data()), n_labels);
  if (!lab) throw std::runtime_error("IDX: truncated label payload");
  for (std::uint32_t t = 0; t < n_labels; ++t) set.labels[t] = lbuf[t];
  return set;
}

// Writes an ImageSet back to the IDX pair. Pixels are quantized to bytes by
// rounding v*255; a load/save round trip reproduces quantized pixels exactly.
inline void save_idx(const ImageSet& set, const std::filesystem::path& image_path,
                     const std::filesystem::path& label_path, std::uint32_t rows = 28,
                     std::uint32_t cols = 28) {
  if (static_cast<Eigen::Index>(rows) * cols != set.dim())
    throw std::invalid_argument("save_idx: rows*cols does not match image dimension");
  std::ofstream img(image_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot open for write: " + image_path.string());
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(set.count()));
  detail::write_be32(img, rows);
  detail::write_be32(img, cols);
  std::vector<unsigned char> buf(static_cast<std::size_t>(set.dim()));
  for (Eigen::Index t = 0; t < set.count(); ++t) {
    for (Eigen::Index i = 0; i < set.dim(); ++i)
      buf[static_cast<std::size_t>(i)] =
          static_cast<unsigned char>(std::lround(set.pixels(i, t) * 255.0));
    img.write(reinterpret_cast<const char*>(buf.data()), set.dim());
  }
  std::ofstream lab(label_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot open for write: " + label_path.string());
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(set.count()));
  for (int v : set.labels) {
    const char b = static_cast<char>(v);
    lab.write(&b, 1);
  }
}

// Splits off the first n_train images as the train split; the remainder, in
// order, becomes the validation split.
inline std::pair<ImageSet, ImageSet> split_train_val(const ImageSet& set,
                                                     Eigen::Index n_train) {
  if (n_train > set.count())
    throw std::invalid_argument("split_train_val: n_train exceeds image count");
  ImageSet train, val;
  train.split = Split::train;
  val.split = Split::validation;
  train.pixels = set.pixels.leftCols(n_train);
  train.labels.assign(set.labels.begin(), set.labels.begin() + n_train);
  val.pixels = set.pixels.rightCols(set.count() - n_train);
  val.labels.assign(set.labels.begin() + n_train, set.labels.end());
  return {std::move(train), std::move(val)};
}

// Uniformly samples exactly k indices per class, without replacement. Each
// class draws from its own (seed, class) stream so subsets are reproducible
// in isolation.
inline LabeledSubset sample_labeled_subset(const std::vector<int>& labels, int k,
                                           std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(10);
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const int c = labels[t];
    if (c < 0 || c > 9) throw std::invalid_argument("sample_labeled_subset: label outside 0..9");
    by_class[static_cast<std::size_t>(c)].push_back(t);
  }
  LabeledSubset subset;
  subset.per_class = k;
  subset.seed = seed;
  for (int c = 0; c < 10; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    if (members.size() < static_cast<std::size_t>(k))
      throw std::runtime_error("sample_labeled_subset: class " + std::to_string(c) +
                               " has fewer than k members");
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(c));
    for (std::size_t pos : rng.sample_without_replacement(members.size(),
                                                          static_cast<std::size_t>(k)))
      subset.indices.push_back(members[pos]);
  }
  return subset;
}

inline LabeledSubset sample_labeled_subset(const ImageSet& set, int k, std::uint64_t seed) {
  return sample_labeled_subset(set.labels, k, seed);
}

// Deterministic stroke/blob renderings with 10 pseudo-classes. Offline stand-in
// for tests that do not need real digits.
inline ImageSet synthetic_digits(Eigen::Index count, int side, std::uint64_t seed) {
  if (side < 8) throw std::invalid_argument("synthetic_digits: side must be >= 8");
  const Eigen::Index m = static_cast<Eigen::Index>(side) * side;
  ImageSet set;
  set.pixels = Eigen::MatrixXd::Zero(m, count);
  set.labels.resize(static_cast<std::size_t>(count));
  const double s = side;
  for (Eigen::Index t = 0; t < count; ++t) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(t));
    const int cls = static_cast<int>(rng.uniform_index(10));
    set.labels[static_cast<std::size_t>(t)] = cls;
    // class-dependent blob center plus an oriented stroke; jitter per sample
    const double cx = s * (0.3 + 0.04 * (cls % 5)) + rng.normal() * s * 0.03;
    const double cy = s * (0.3 + 0.04 * (cls / 5)) + rng.normal() * s * 0.03;
    const double angle = cls * std::numbers::pi / 10.0 + rng.normal() * 0.05;
    const double len = s * (0.25 + 0.02 * cls);
    const double width = s * 0.06;
    const double dx = std::cos(angle), dy = std::sin(angle);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        // distance from pixel to the stroke segment through (cx,cy)
        const double rx = x - cx, ry = y - cy;
        const double along = rx * dx + ry * dy;
        const double a = std::clamp(along, -len / 2, len / 2);
        const double px = rx - a * dx, py = ry - a * dy;
        const double d2 = px * px + py * py;
        const double v = std::exp(-d2 / (2.0 * width * width));
        const Eigen::Index idx = static_cast<Eigen::Index>(y) * side + x;
        set.pixels(idx, t) = std::min(1.0, v);
      }
    }
    // quantize like real data so IDX round trips are exact
    for (Eigen::Index i = 0; i < m; ++i)
      set.pixels(i, t) = std::lround(set.pixels(i, t) * 255.0) / 255.0;
  }
  return set;
}

}  // namespace sparsecode
