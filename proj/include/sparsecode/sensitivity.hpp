#pragma once

// Locally-linear sensitivity analysis of representations: active Jacobians,
// directional derivatives, SVD gain spectra, maximum-cancellation directions,
// restricted-isometry measurements and filter-pair statistics.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sparsecode/perturbations.hpp"
#include "sparsecode/rng.hpp"
#include "sparsecode/sparse_coding.hpp"

namespace sparsecode {

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty sample");
  const std::size_t h = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  double m = v[h];
  if (v.size() % 2 == 0) {
    const auto lo = std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h));
    m = 0.5 * (m + *lo);
  }
  return m;
}

// Jacobian of the x -> r map restricted to the active rows; rows for inactive
// units are implicitly zero, so an empty active set is the zero map.
struct ActiveJacobian {
  Eigen::MatrixXd J;  // k x m
  std::vector<Eigen::Index> active;
  bool non_generic = false;
};

constexpr double kJacobianCondLimit = 1e12;

inline ActiveJacobian active_jacobian(const Eigen::MatrixXd& D, const SparseCode& code,
                                      bool non_generic = false) {
  ActiveJacobian out;
  out.active = code.active;
  out.non_generic = non_generic;
  const Eigen::Index m = D.rows();
  const Eigen::Index k = static_cast<Eigen::Index>(code.active.size());
  if (k == 0) {
    out.J.resize(0, m);
    return out;
  }
  const Eigen::MatrixXd Dp = gather_columns(D, code.active);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Dp);
  if (qr.rank() < k)
    throw std::runtime_error("active_jacobian: active dictionary is rank deficient");
  const Eigen::VectorXd diag = qr.matrixR().diagonal().head(k).cwiseAbs();
  if (diag.minCoeff() <= 0.0 || diag.maxCoeff() / diag.minCoeff() > kJacobianCondLimit)
    throw std::runtime_error("active_jacobian: active dictionary too ill-conditioned");
  out.J = qr.solve(Eigen::MatrixXd::Identity(m, m));
  return out;
}

inline double directional_derivative(const Eigen::MatrixXd& J, const Eigen::VectorXd& dx) {
  const double nx = dx.norm();
  if (nx == 0.0) throw std::invalid_argument("directional_derivative: zero direction");
  if (J.rows() == 0) return 0.0;
  return (J * dx).norm() / nx;
}

inline double directional_derivative(const ActiveJacobian& jac, const Eigen::VectorXd& dx) {
  return directional_derivative(jac.J, dx);
}

// Sensitivity along d1 - d2 for two active filters with overlap c.
inline double pair_gain(double c) {
  if (!(c >= 0.0 && c < 1.0)) throw std::domain_error("pair_gain: overlap must be in [0, 1)");
  return 1.0 / std::sqrt(1.0 - c);
}

// Thin SVD of the active dictionary plus the full image-space basis. Columns
// of U are image-space singular vectors; sigma is sorted descending, so gains
// 1/sigma are ascending.
struct GainSpectrum {
  Eigen::VectorXd sigma;  // k, descending
  Eigen::VectorXd gains;  // 1/sigma, same index order
  Eigen::MatrixXd U;      // m x m, full image-space basis
  Eigen::MatrixXd V;      // k x k
};

inline GainSpectrum svd_gain_spectrum(const Eigen::MatrixXd& D_plus) {
  if (D_plus.cols() < 1) throw std::invalid_argument("svd_gain_spectrum: empty active set");
  if (!D_plus.allFinite()) throw std::invalid_argument("svd_gain_spectrum: non-finite input");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(D_plus, Eigen::ComputeFullU | Eigen::ComputeThinV);
  GainSpectrum out;
  out.sigma = svd.singularValues();
  out.U = svd.matrixU();
  out.V = svd.matrixV();
  out.gains = out.sigma.unaryExpr([](double s) {
    return s > 0.0 ? 1.0 / s : std::numeric_limits<double>::infinity();
  });
  return out;
}

// Direction of maximum cancellation: sigma* = min ||D_+ v|| over unit v, with
// u* the matching image-space direction.
struct MaxCancellation {
  double sigma_star = 0.0;
  Eigen::VectorXd v_star;
  Eigen::VectorXd u_star;
};

inline MaxCancellation max_cancellation(const Eigen::MatrixXd& D_plus) {
  if (D_plus.cols() < 1) throw std::invalid_argument("max_cancellation: empty active set");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(D_plus, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::Index last = svd.singularValues().size() - 1;
  MaxCancellation out;
  out.sigma_star = svd.singularValues()[last];
  out.v_star = svd.matrixV().col(last);
  out.u_star = svd.matrixU().col(last);
  return out;
}

// Squared overlaps of a direction with every image-space singular vector;
// entries past the active rank belong to the zero-gain complement. Sums to 1.
inline Eigen::VectorXd power_spectrum(const Eigen::VectorXd& dx, const GainSpectrum& spectrum) {
  const double nx = dx.norm();
  if (nx == 0.0) throw std::invalid_argument("power_spectrum: zero direction");
  const Eigen::VectorXd overlaps = spectrum.U.transpose() * (dx / nx);
  return overlaps.cwiseAbs2();
}

// Root-mean-squared overlap per image-space index over a set of directions
// (columns of dirs), each normalized.
inline Eigen::VectorXd amplitude_spectrum(const Eigen::MatrixXd& dirs,
                                          const GainSpectrum& spectrum) {
  if (dirs.cols() < 1) throw std::invalid_argument("amplitude_spectrum: no directions");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(spectrum.U.cols());
  for (Eigen::Index j = 0; j < dirs.cols(); ++j)
    acc += power_spectrum(dirs.col(j), spectrum);
  return (acc / static_cast<double>(dirs.cols())).cwiseSqrt();
}

// ---------------------------------------------------------------------------
// Restricted isometry
// ---------------------------------------------------------------------------

struct RipRange {
  double min_ratio = std::numeric_limits<double>::infinity();
  double max_ratio = 0.0;
};

namespace detail {

inline void rip_update(RipRange& range, const Eigen::MatrixXd& D_sub, const Eigen::VectorXd& r) {
  const double nr = r.norm();
  if (nr == 0.0) return;
  const double ratio = (D_sub * r).norm() / nr;
  range.min_ratio = std::min(range.min_ratio, ratio);
  range.max_ratio = std::max(range.max_ratio, ratio);
}

}  // namespace detail

// Extremes of ||D r|| / ||r|| over random supports with Gaussian coefficients.
inline RipRange rip_range(const Eigen::MatrixXd& D, Eigen::Index support_size,
                          int trials, std::uint64_t seed) {
  if (support_size < 1 || support_size > D.cols())
    throw std::invalid_argument("rip_range: bad support size");
  RipRange range;
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(t));
    const std::vector<std::size_t> raw = rng.sample_without_replacement(
        static_cast<std::size_t>(D.cols()), static_cast<std::size_t>(support_size));
    std::vector<Eigen::Index> support(raw.begin(), raw.end());
    Eigen::VectorXd r(support_size);
    for (Eigen::Index i = 0; i < support_size; ++i) r[i] = rng.normal();
    detail::rip_update(range, gather_columns(D, support), r);
  }
  return range;
}

// Same extremes over active sets observed in real codes, using the actual
// coefficients.
inline RipRange rip_range_observed(const Eigen::MatrixXd& D,
                                   const std::vector<SparseCode>& codes) {
  RipRange range;
  for (const SparseCode& code : codes) {
    if (code.active.empty()) continue;
    Eigen::VectorXd r(static_cast<Eigen::Index>(code.active.size()));
    for (std::size_t i = 0; i < code.active.size(); ++i) r[static_cast<Eigen::Index>(i)] = code.r[code.active[i]];
    detail::rip_update(range, gather_columns(D, code.active), r);
  }
  return range;
}

// ---------------------------------------------------------------------------
// Filter pairs
// ---------------------------------------------------------------------------

// The normalized mean of a filter, sum(d) / sum(|d|), is near 1 for blob-like
// all-positive filters and near 0 for wave-like sign-balanced ones.
inline double normalized_mean(const Eigen::VectorXd& d) {
  const double denom = d.cwiseAbs().sum();
  if (denom == 0.0) throw std::invalid_argument("normalized_mean: zero filter");
  return d.sum() / denom;
}

struct FilterPairStat {
  Eigen::Index i = 0;
  Eigen::Index j = 0;
  double overlap = 0.0;
  double mean_i = 0.0;
  double mean_j = 0.0;
  double mean_diff = 0.0;
};

struct FilterPairReport {
  std::vector<FilterPairStat> pairs;  // overlap descending
  double avg_abs_filter_mean = 0.0;
  double avg_abs_diff_mean = 0.0;
};

// All column pairs with overlap above the threshold, sorted by overlap
// descending; averages are taken over absolute normalized means.
inline FilterPairReport filter_pair_stats(const Eigen::MatrixXd& D, double threshold,
                                          std::size_t max_pairs = 0) {
  FilterPairReport report;
  for (Eigen::Index i = 0; i < D.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < D.cols(); ++j) {
      const double overlap = D.col(i).dot(D.col(j));
      if (overlap <= threshold) continue;
      FilterPairStat stat;
      stat.i = i;
      stat.j = j;
      stat.overlap = overlap;
      stat.mean_i = normalized_mean(D.col(i));
      stat.mean_j = normalized_mean(D.col(j));
      stat.mean_diff = normalized_mean(D.col(i) - D.col(j));
      report.pairs.push_back(stat);
    }
  }
  std::sort(report.pairs.begin(), report.pairs.end(),
            [](const FilterPairStat& a, const FilterPairStat& b) { return a.overlap > b.overlap; });
  if (max_pairs > 0 && report.pairs.size() > max_pairs) report.pairs.resize(max_pairs);
  if (!report.pairs.empty()) {
    double fsum = 0.0, dsum = 0.0;
    for (const FilterPairStat& s : report.pairs) {
      fsum += 0.5 * (std::abs(s.mean_i) + std::abs(s.mean_j));
      dsum += std::abs(s.mean_diff);
    }
    report.avg_abs_filter_mean = fsum / static_cast<double>(report.pairs.size());
    report.avg_abs_diff_mean = dsum / static_cast<double>(report.pairs.size());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sensitivity histograms
// ---------------------------------------------------------------------------

// A representation exposes its local Jacobian at an image; near-threshold
// (non-generic) inputs are flagged and the sample is skipped.
struct RepJacobian {
  Eigen::MatrixXd J;
  bool non_generic = false;
};

using JacobianProvider = std::function<RepJacobian(const Eigen::VectorXd& x, Eigen::Index index)>;

struct SensitivityOptions {
  int samples = 4000;
  std::uint64_t seed = 0;
  bool noise = true;
  bool swap = true;
  bool distortion = true;
  Eigen::Index side = 28;
  Eigen::Index grid = 5;
  double control_std = 0.25;
};

struct SensitivityHistogram {
  std::vector<double> noise;
  std::vector<double> swap;
  std::vector<double> distortion;
  int requested = 0;
  int non_generic_skipped = 0;
  std::string representation;

  const std::vector<double>& values(PerturbationKind kind) const {
    switch (kind) {
      case PerturbationKind::noise: return noise;
      case PerturbationKind::swap: return swap;
      default: return distortion;
    }
  }
};

// Draws images from X (columns), asks the provider for the local Jacobian and
// records the directional derivative for each enabled perturbation kind.
// Sample s uses streams (seed, 3s), (seed, 3s+1), (seed, 3s+2) for the image
// picks, the noise draw and the distortion field.
inline SensitivityHistogram sensitivity_histogram(const JacobianProvider& provider,
                                                  const Eigen::MatrixXd& X,
                                                  const SensitivityOptions& opts,
                                                  std::string representation = {}) {
  if (opts.samples < 1) throw std::invalid_argument("sensitivity_histogram: samples < 1");
  if (X.cols() < 2) throw std::invalid_argument("sensitivity_histogram: need at least two images");
  SensitivityHistogram hist;
  hist.requested = opts.samples;
  hist.representation = std::move(representation);
  const auto count = static_cast<std::uint64_t>(X.cols());
  for (int s = 0; s < opts.samples; ++s) {
    const auto id = static_cast<std::uint64_t>(s);
    Rng pick = Rng::stream(opts.seed, 3 * id);
    const auto index = static_cast<Eigen::Index>(pick.uniform_index(count));
    const Eigen::VectorXd x = X.col(index);
    const RepJacobian rep = provider(x, index);
    if (rep.non_generic) {
      ++hist.non_generic_skipped;
      continue;
    }
    if (opts.noise) {
      const PerturbationDirection dir =
          noise_direction(X.rows(), Rng::mix(opts.seed, 3 * id + 1));
      hist.noise.push_back(directional_derivative(rep.J, dir.delta));
    }
    if (opts.swap) {
      Eigen::Index partner = index;
      for (int tries = 0; tries < 256 && (partner == index || (X.col(partner) - x).isZero(0.0));
           ++tries)
        partner = static_cast<Eigen::Index>(pick.uniform_index(count));
      const PerturbationDirection dir = swap_direction(x, X.col(partner));
      hist.swap.push_back(directional_derivative(rep.J, dir.delta));
    }
    if (opts.distortion) {
      const PerturbationDirection dir = distortion_direction(
          x, Rng::mix(opts.seed, 3 * id + 2), opts.side, opts.grid, opts.control_std);
      hist.distortion.push_back(directional_derivative(rep.J, dir.delta));
    }
  }
  return hist;
}

}  // namespace sparsecode
