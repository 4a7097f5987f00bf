#pragma once

// Perturbation directions for sensitivity analysis: white Gaussian noise,
// image swaps, and smooth elastic distortions built from a coarse Gaussian
// control grid upsampled with bicubic interpolation.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>

#include "sparsecode/rng.hpp"

namespace sparsecode {

enum class PerturbationKind { noise, swap, distortion };

struct PerturbationDirection {
  Eigen::VectorXd delta;
  PerturbationKind kind = PerturbationKind::noise;
  std::uint64_t seed = 0;
};

// Per-pixel displacements in pixel units; dy moves rows, dx moves columns.
struct DisplacementField {
  Eigen::MatrixXd dy;
  Eigen::MatrixXd dx;
};

inline PerturbationDirection noise_direction(Eigen::Index m, std::uint64_t seed) {
  if (m < 1) throw std::invalid_argument("noise_direction: m must be positive");
  Rng rng(seed);
  PerturbationDirection dir;
  dir.kind = PerturbationKind::noise;
  dir.seed = seed;
  dir.delta.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) dir.delta[i] = rng.normal();
  return dir;
}

inline PerturbationDirection swap_direction(const Eigen::VectorXd& x,
                                            const Eigen::VectorXd& x_other) {
  if (x.size() != x_other.size())
    throw std::invalid_argument("swap_direction: shape mismatch");
  PerturbationDirection dir;
  dir.kind = PerturbationKind::swap;
  dir.delta = x_other - x;
  if (dir.delta.isZero(0.0))
    throw std::invalid_argument("swap_direction: images are identical");
  return dir;
}

namespace detail {

// Cubic convolution kernel with a = -0.5 (Catmull-Rom): interpolates through
// the knots and reproduces constants.
inline double cubic_kernel(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

}  // namespace detail

// Evaluates the control grid at continuous grid coordinates (gy, gx), knots at
// integer coordinates, edge samples replicated outside the grid.
inline double bicubic_eval(const Eigen::MatrixXd& grid, double gy, double gx) {
  const Eigen::Index rows = grid.rows();
  const Eigen::Index cols = grid.cols();
  if (rows < 2 || cols < 2) throw std::invalid_argument("bicubic_eval: grid too small");
  const auto clampi = [](Eigen::Index v, Eigen::Index hi) {
    return v < 0 ? Eigen::Index(0) : (v > hi ? hi : v);
  };
  const Eigen::Index iy = static_cast<Eigen::Index>(std::floor(gy));
  const Eigen::Index ix = static_cast<Eigen::Index>(std::floor(gx));
  const double fy = gy - static_cast<double>(iy);
  const double fx = gx - static_cast<double>(ix);
  double wy[4], wx[4];
  for (int k = 0; k < 4; ++k) {
    wy[k] = detail::cubic_kernel(fy - static_cast<double>(k - 1));
    wx[k] = detail::cubic_kernel(fx - static_cast<double>(k - 1));
  }
  double acc = 0.0;
  for (int ky = 0; ky < 4; ++ky) {
    const Eigen::Index r = clampi(iy + ky - 1, rows - 1);
    double row_acc = 0.0;
    for (int kx = 0; kx < 4; ++kx) {
      const Eigen::Index c = clampi(ix + kx - 1, cols - 1);
      row_acc += wx[kx] * grid(r, c);
    }
    acc += wy[ky] * row_acc;
  }
  return acc;
}

// Upsamples a control grid to side x side with corner alignment: output pixel
// (i, j) reads grid coordinate i * (g-1) / (side-1).
inline Eigen::MatrixXd bicubic_upsample(const Eigen::MatrixXd& grid, Eigen::Index side) {
  if (side < 2) throw std::invalid_argument("bicubic_upsample: side too small");
  const double sy = static_cast<double>(grid.rows() - 1) / static_cast<double>(side - 1);
  const double sx = static_cast<double>(grid.cols() - 1) / static_cast<double>(side - 1);
  Eigen::MatrixXd out(side, side);
  for (Eigen::Index i = 0; i < side; ++i)
    for (Eigen::Index j = 0; j < side; ++j)
      out(i, j) = bicubic_eval(grid, static_cast<double>(i) * sy, static_cast<double>(j) * sx);
  return out;
}

// Smooth random displacement field: control displacements ~ N(0, control_std^2)
// per axis on a grid x grid lattice, bicubic-upsampled to side x side. The dy
// control grid is drawn first, then dx, both row-major.
inline DisplacementField elastic_field(std::uint64_t seed, Eigen::Index side = 28,
                                       Eigen::Index grid = 5, double control_std = 0.25) {
  if (grid < 2) throw std::invalid_argument("elastic_field: grid too small");
  Rng rng(seed);
  Eigen::MatrixXd cy(grid, grid), cx(grid, grid);
  for (Eigen::Index i = 0; i < grid; ++i)
    for (Eigen::Index j = 0; j < grid; ++j) cy(i, j) = control_std * rng.normal();
  for (Eigen::Index i = 0; i < grid; ++i)
    for (Eigen::Index j = 0; j < grid; ++j) cx(i, j) = control_std * rng.normal();
  DisplacementField field;
  field.dy = bicubic_upsample(cy, side);
  field.dx = bicubic_upsample(cx, side);
  return field;
}

namespace detail {

// Bilinear sample with zero outside the image.
inline double bilinear_sample(const Eigen::MatrixXd& img, double y, double x) {
  const Eigen::Index rows = img.rows();
  const Eigen::Index cols = img.cols();
  const Eigen::Index y0 = static_cast<Eigen::Index>(std::floor(y));
  const Eigen::Index x0 = static_cast<Eigen::Index>(std::floor(x));
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const auto at = [&](Eigen::Index r, Eigen::Index c) {
    return (r < 0 || r >= rows || c < 0 || c >= cols) ? 0.0 : img(r, c);
  };
  return (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
         fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

}  // namespace detail

// Output pixel (i, j) samples the source at (i + dy(i,j), j + dx(i,j)).
inline Eigen::MatrixXd warp_image(const Eigen::MatrixXd& img, const DisplacementField& field) {
  if (field.dy.rows() != img.rows() || field.dy.cols() != img.cols() ||
      field.dx.rows() != img.rows() || field.dx.cols() != img.cols())
    throw std::invalid_argument("warp_image: field shape mismatch");
  Eigen::MatrixXd out(img.rows(), img.cols());
  for (Eigen::Index i = 0; i < img.rows(); ++i)
    for (Eigen::Index j = 0; j < img.cols(); ++j)
      out(i, j) = detail::bilinear_sample(img, static_cast<double>(i) + field.dy(i, j),
                                          static_cast<double>(j) + field.dx(i, j));
  return out;
}

// Images are flattened row-major; the 2-d geometry exists only inside the warp.
inline Eigen::MatrixXd unflatten_image(const Eigen::VectorXd& x, Eigen::Index side) {
  if (x.size() != side * side)
    throw std::invalid_argument("unflatten_image: size is not side*side");
  Eigen::MatrixXd img(side, side);
  for (Eigen::Index i = 0; i < side; ++i)
    for (Eigen::Index j = 0; j < side; ++j) img(i, j) = x[i * side + j];
  return img;
}

inline Eigen::VectorXd flatten_image(const Eigen::MatrixXd& img) {
  Eigen::VectorXd x(img.rows() * img.cols());
  for (Eigen::Index i = 0; i < img.rows(); ++i)
    for (Eigen::Index j = 0; j < img.cols(); ++j) x[i * img.cols() + j] = img(i, j);
  return x;
}

// Difference of a small random warp; degenerate warps (exactly the identity on
// this image) are resampled with consecutive seeds.
inline PerturbationDirection distortion_direction(const Eigen::VectorXd& x, std::uint64_t seed,
                                                  Eigen::Index side = 28, Eigen::Index grid = 5,
                                                  double control_std = 0.25) {
  const Eigen::MatrixXd img = unflatten_image(x, side);
  PerturbationDirection dir;
  dir.kind = PerturbationKind::distortion;
  for (int attempt = 0; attempt < 16; ++attempt) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(attempt);
    const DisplacementField field = elastic_field(s, side, grid, control_std);
    dir.delta = flatten_image(warp_image(img, field)) - x;
    if (!dir.delta.isZero(0.0)) {
      dir.seed = s;
      return dir;
    }
  }
  throw std::runtime_error("distortion_direction: all resampled warps were degenerate");
}

}  // namespace sparsecode
