#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sparsecode/hashing.hpp"
#include "sparsecode/rng.hpp"

namespace sparsecode {

enum class Precision { single, dbl };

// ---------------------------------------------------------------------------
// Soft threshold
// ---------------------------------------------------------------------------

template <typename Scalar>
inline Scalar shrink(Scalar u, Scalar theta) {
  if (u >= theta) return u - theta;
  if (u <= -theta) return u + theta;
  return Scalar(0);
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct Dictionary {
  Eigen::MatrixXd D;  // m x n, unit-norm columns
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;

  Eigen::Index image_dim() const { return D.rows(); }
  Eigen::Index size() const { return D.cols(); }

  // checkpoint identity: hash over header fields and payload
  std::uint64_t model_key() const {
    std::uint64_t h = fnv1a64(&lambda, sizeof(lambda));
    const std::uint64_t dims[2] = {static_cast<std::uint64_t>(D.rows()),
                                   static_cast<std::uint64_t>(D.cols())};
    h = fnv1a64(dims, sizeof(dims), h);
    h = fnv1a64(&seed, sizeof(seed), h);
    h = fnv1a64(D.data(), sizeof(double) * static_cast<std::size_t>(D.size()), h);
    return h;
  }
};

struct SparseCode {
  Eigen::VectorXd r;                  // length n
  std::vector<Eigen::Index> active;   // indices with r_i != 0, ascending
  std::vector<int> signs;             // +-1, aligned with active

  Eigen::Index active_count() const { return static_cast<Eigen::Index>(active.size()); }

  static SparseCode from_vector(Eigen::VectorXd v) {
    SparseCode code;
    code.r = std::move(v);
    for (Eigen::Index i = 0; i < code.r.size(); ++i) {
      if (code.r[i] != 0.0) {
        code.active.push_back(i);
        code.signs.push_back(code.r[i] > 0.0 ? 1 : -1);
      }
    }
    return code;
  }
};

// ---------------------------------------------------------------------------
// Objective and elementary updates
// ---------------------------------------------------------------------------

namespace detail {

// Accumulates in double regardless of Scalar so acceptance decisions and the
// recorded objective history are comparable across the precision switch.
template <typename Derived>
inline double squared_norm_d(const Eigen::MatrixBase<Derived>& M) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < M.cols(); ++j)
    acc += M.col(j).template cast<double>().squaredNorm();
  return acc;
}

template <typename Derived>
inline double l1_norm_d(const Eigen::MatrixBase<Derived>& M) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < M.cols(); ++j)
    acc += M.col(j).template cast<double>().template lpNorm<1>();
  return acc;
}

}  // namespace detail

// Sum_t 1/2 ||x(t) - D r(t)||^2 + lambda ||r(t)||_1
template <typename DerivedX, typename DerivedR, typename DerivedD>
inline double objective(const Eigen::MatrixBase<DerivedX>& X,
                        const Eigen::MatrixBase<DerivedR>& R,
                        const Eigen::MatrixBase<DerivedD>& D, double lambda) {
  if (X.rows() != D.rows() || D.cols() != R.rows() || X.cols() != R.cols())
    throw std::invalid_argument("objective: incompatible shapes");
  using Scalar = typename DerivedX::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> E = D * R - X;
  return 0.5 * detail::squared_norm_d(E) + lambda * detail::l1_norm_d(R);
}

// One proximal gradient update: shrink(r - eta D^T(D r - x), eta*lambda)
template <typename Scalar>
inline Eigen::Vector<Scalar, Eigen::Dynamic> ista_step(
    const Eigen::Vector<Scalar, Eigen::Dynamic>& r,
    const Eigen::Vector<Scalar, Eigen::Dynamic>& x,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& D, Scalar lambda,
    Scalar eta) {
  if (eta <= Scalar(0)) throw std::invalid_argument("ista_step: eta must be positive");
  Eigen::Vector<Scalar, Eigen::Dynamic> u = r - eta * (D.transpose() * (D * r - x));
  const Scalar theta = eta * lambda;
  return u.unaryExpr([theta](Scalar v) { return shrink(v, theta); });
}

// Gradient step on the reconstruction term followed by column renormalization.
template <typename Scalar>
inline Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> dict_step(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& D,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& X,
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& R, Scalar eta) {
  if (eta <= Scalar(0)) throw std::invalid_argument("dict_step: eta must be positive");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> Dn =
      D - eta * ((D * R - X) * R.transpose());
  for (Eigen::Index j = 0; j < Dn.cols(); ++j) {
    const Scalar norm = Dn.col(j).norm();
    if (!(norm > Scalar(0)))
      throw std::runtime_error("dict_step: dictionary column collapsed to zero");
    Dn.col(j) /= norm;
  }
  return Dn;
}

struct RateUpdate {
  bool accepted;
  double rate;
};

// Accepted updates grow the rate by 1.1x; rejected (non-decreasing loss,
// including exact ties) halve it and the caller rolls the update back.
inline RateUpdate adapt_rate(double loss_prev, double loss_new, double eta) {
  if (eta <= 0.0) throw std::invalid_argument("adapt_rate: eta must be positive");
  if (loss_new < loss_prev) return {true, 1.1 * eta};
  return {false, 0.5 * eta};
}

// Max |cosine| over distinct column pairs. 1.0 means duplicate/antipodal
// columns, i.e. representations are not guaranteed unique.
inline double uniqueness_check(const Eigen::MatrixXd& D) {
  Eigen::MatrixXd G = D.transpose() * D;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < G.rows(); ++i)
    for (Eigen::Index j = i + 1; j < G.cols(); ++j)
      worst = std::max(worst, std::abs(G(i, j)));
  return worst;
}

// ---------------------------------------------------------------------------
// Active (locally linear) solution and fixed-point conditions
// ---------------------------------------------------------------------------

inline Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& D,
                                      const std::vector<Eigen::Index>& idx) {
  Eigen::MatrixXd sub(D.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) sub.col(static_cast<Eigen::Index>(j)) = D.col(idx[j]);
  return sub;
}

// r_+ = (D_+^T D_+)^{-1} (D_+^T x - lambda s_+), via QR of D_+.
inline Eigen::VectorXd active_solution(const Eigen::VectorXd& x, const Eigen::MatrixXd& D,
                                       const std::vector<Eigen::Index>& active,
                                       const std::vector<int>& signs, double lambda) {
  if (active.size() != signs.size())
    throw std::invalid_argument("active_solution: active/sign size mismatch");
  const Eigen::Index k = static_cast<Eigen::Index>(active.size());
  if (k == 0) return Eigen::VectorXd();
  Eigen::MatrixXd Dp = gather_columns(D, active);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Dp);
  if (qr.rank() < k)
    throw std::runtime_error("active_solution: active dictionary is rank deficient");
  Eigen::VectorXd s(k);
  for (Eigen::Index i = 0; i < k; ++i) s[i] = signs[static_cast<std::size_t>(i)];
  // (D+^T D+)^{-1} v solved as R^{-1} R^{-T} (P^T v) with D+ P = Q R
  const auto R = qr.matrixR().topLeftCorner(k, k).template triangularView<Eigen::Upper>();
  Eigen::VectorXd ls = qr.solve(x);  // least-squares part, (D+^T D+)^{-1} D+^T x
  Eigen::VectorXd t = qr.colsPermutation().transpose() * s;
  Eigen::VectorXd y = R.transpose().solve(t);
  Eigen::VectorXd z = R.solve(y);
  Eigen::VectorXd corr = qr.colsPermutation() * z;
  return ls - lambda * corr;
}

struct FixedPointReport {
  bool ok = false;
  // max over inactive units of |preactivation| - lambda (condition a)
  double worst_inactive_excess = -std::numeric_limits<double>::infinity();
  // ||r_+ - solve|| / ||r_+|| (condition b); 0 for empty active sets
  double active_residual = 0.0;
  bool gram_singular = false;
};

inline constexpr double kInactiveTol = 1e-5;
inline constexpr double kActiveTol = 1e-4;

// Convergence conditions for an exact code: inactive preactivations stay
// below threshold and active coefficients match the locally linear solution.
inline FixedPointReport check_fixed_point(const Eigen::VectorXd& x, const SparseCode& code,
                                          const Eigen::MatrixXd& D, double lambda,
                                          double inactive_tol = kInactiveTol,
                                          double active_tol = kActiveTol) {
  FixedPointReport report;
  const Eigen::VectorXd pre = D.transpose() * (x - D * code.r);
  double worst = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    if (code.r[i] != 0.0) continue;
    worst = std::max(worst, std::abs(pre[i]) - lambda);
  }
  report.worst_inactive_excess = worst;
  const bool inactive_ok = !(worst >= inactive_tol);

  bool active_ok = true;
  const Eigen::Index k = code.active_count();
  if (k > 0) {
    Eigen::MatrixXd Dp = gather_columns(D, code.active);
    Eigen::MatrixXd Gp = Dp.transpose() * Dp;
    Eigen::VectorXd s(k), rp(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      s[i] = code.signs[static_cast<std::size_t>(i)];
      rp[i] = code.r[code.active[static_cast<std::size_t>(i)]];
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(Gp);
    const Eigen::VectorXd dvec = ldlt.vectorD().cwiseAbs();
    const double dmax = dvec.maxCoeff();
    if (ldlt.info() != Eigen::Success || dmax <= 0.0 ||
        dvec.minCoeff() < 1e-14 * dmax) {
      report.gram_singular = true;
      report.active_residual = std::numeric_limits<double>::infinity();
      active_ok = false;
    } else {
      Eigen::VectorXd sol = ldlt.solve(Dp.transpose() * x - lambda * s);
      report.active_residual = (rp - sol).norm() / rp.norm();
      active_ok = report.active_residual < active_tol;
    }
  }
  report.ok = inactive_ok && active_ok;
  return report;
}

// Smallest inactive margin lambda - |preactivation|; images where this is
// below the generic threshold sit numerically at a shrinkage kink and are
// excluded from Jacobian analysis.
inline constexpr double kGenericMargin = 1e-6;

inline double inactive_margin(const Eigen::VectorXd& x, const SparseCode& code,
                              const Eigen::MatrixXd& D, double lambda) {
  const Eigen::VectorXd pre = D.transpose() * (x - D * code.r);
  double margin = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    if (code.r[i] != 0.0) continue;
    margin = std::min(margin, lambda - std::abs(pre[i]));
  }
  return margin;
}

// ---------------------------------------------------------------------------
// Dictionary training
// ---------------------------------------------------------------------------

struct TrainState {
  std::uint64_t step = 0;
  double eta_dict = 1e-2;
  double eta_codes = 1e-2;
  Precision precision = Precision::single;
  std::int64_t precision_switch_step = -1;  // -1 while still in single
  std::vector<double> objective_history;    // value after each accepted update
};

struct TrainOptions {
  std::uint64_t iters = 5000;
  std::uint64_t seed = 0;
  double initial_rate = 1e-2;
  bool start_single_precision = true;
  std::uint64_t checkpoint_every = 0;  // 0 disables
  std::function<void(const TrainState&, const Eigen::MatrixXd& D,
                     const Eigen::MatrixXd& R)>
      checkpoint_hook;
  std::function<void(std::uint64_t step, double objective, Precision p)> progress;
};

struct TrainResult {
  Dictionary dict;
  Eigen::MatrixXd codes;  // n x T, persistent representations
  TrainState state;
};

namespace detail {

template <typename Scalar>
struct TrainerCore {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Mat X, D, R, E;  // E = D*R - X
  double l1 = 0.0;
  double obj = 0.0;

  void refresh() {
    E = D * R - X;
    l1 = l1_norm_d(R);
    obj = 0.5 * squared_norm_d(E) + 0.0;  // lambda applied by caller
  }
};

template <typename Scalar>
inline void shrink_in_place(Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& M,
                            Scalar theta) {
  M = M.unaryExpr([theta](Scalar v) { return shrink(v, theta); });
}

// One full alternating iteration (code update then dictionary update), both
// gated on the full objective. Returns false if a rejection occurred while in
// single precision, which signals the caller to escalate.
template <typename Scalar>
inline bool train_iteration(TrainerCore<Scalar>& core, double lambda, TrainState& state) {
  using Mat = typename TrainerCore<Scalar>::Mat;
  bool all_accepted = true;

  // code update
  {
    Mat grad = core.D.transpose() * core.E;
    Mat cand = core.R - Scalar(state.eta_codes) * grad;
    shrink_in_place(cand, Scalar(state.eta_codes * lambda));
    Mat cand_E = core.D * cand - core.X;
    const double cand_l1 = l1_norm_d(cand);
    const double cand_obj = 0.5 * squared_norm_d(cand_E) + lambda * cand_l1;
    const RateUpdate upd = adapt_rate(core.obj, cand_obj, state.eta_codes);
    state.eta_codes = upd.rate;
    if (upd.accepted) {
      core.R = std::move(cand);
      core.E = std::move(cand_E);
      core.l1 = cand_l1;
      core.obj = cand_obj;
      state.objective_history.push_back(core.obj);
    } else {
      all_accepted = false;
    }
  }

  // dictionary update
  {
    Mat grad = core.E * core.R.transpose();
    Mat cand = core.D - Scalar(state.eta_dict) * grad;
    for (Eigen::Index j = 0; j < cand.cols(); ++j) {
      const Scalar norm = cand.col(j).norm();
      if (!(norm > Scalar(0)))
        throw std::runtime_error("train_dictionary: dictionary column collapsed to zero");
      cand.col(j) /= norm;
    }
    Mat cand_E = cand * core.R - core.X;
    const double cand_obj = 0.5 * squared_norm_d(cand_E) + lambda * core.l1;
    const RateUpdate upd = adapt_rate(core.obj, cand_obj, state.eta_dict);
    state.eta_dict = upd.rate;
    if (upd.accepted) {
      core.D = std::move(cand);
      core.E = std::move(cand_E);
      core.obj = cand_obj;
      state.objective_history.push_back(core.obj);
    } else {
      all_accepted = false;
    }
  }

  if (!std::isfinite(core.obj))
    throw std::runtime_error("train_dictionary: objective became non-finite");
  return all_accepted;
}

}  // namespace detail

// Alternating full-batch minimization: every iteration applies one shrinkage
// update to all codes and one normalized gradient step to the dictionary,
// each accepted only if the full objective decreased. Training starts in
// single precision and switches permanently to double the first time an
// update fails to decrease the objective.
inline TrainResult train_dictionary(const Eigen::MatrixXd& X, double lambda,
                                    Eigen::Index n, const TrainOptions& opts) {
  if (opts.iters < 1) throw std::invalid_argument("train_dictionary: iters must be >= 1");
  if (n < 1) throw std::invalid_argument("train_dictionary: n must be >= 1");
  const Eigen::Index m = X.rows();
  const Eigen::Index T = X.cols();

  Eigen::MatrixXd D0(m, n), R0(n, T);
  {
    Rng rng_d = Rng::stream(opts.seed, 0x44494354ULL);  // dictionary init stream
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < m; ++i) D0(i, j) = rng_d.normal();
    for (Eigen::Index j = 0; j < n; ++j) D0.col(j).normalize();
    Rng rng_r = Rng::stream(opts.seed, 0x434f4445ULL);  // code init stream
    for (Eigen::Index t = 0; t < T; ++t)
      for (Eigen::Index i = 0; i < n; ++i) R0(i, t) = rng_r.normal();
  }

  TrainState state;
  state.eta_dict = opts.initial_rate;
  state.eta_codes = opts.initial_rate;
  state.precision = opts.start_single_precision ? Precision::single : Precision::dbl;

  detail::TrainerCore<float> single;
  detail::TrainerCore<double> dbl;
  if (state.precision == Precision::single) {
    single.X = X.cast<float>();
    single.D = D0.cast<float>();
    single.R = R0.cast<float>();
    single.E = single.D * single.R - single.X;
    single.l1 = detail::l1_norm_d(single.R);
    single.obj = 0.5 * detail::squared_norm_d(single.E) + lambda * single.l1;
  } else {
    dbl.X = X;
    dbl.D = D0;
    dbl.R = R0;
    dbl.E = dbl.D * dbl.R - dbl.X;
    dbl.l1 = detail::l1_norm_d(dbl.R);
    dbl.obj = 0.5 * detail::squared_norm_d(dbl.E) + lambda * dbl.l1;
  }

  for (std::uint64_t it = 0; it < opts.iters; ++it) {
    state.step = it + 1;
    if (state.precision == Precision::single) {
      const bool clean = detail::train_iteration(single, lambda, state);
      if (!clean) {
        // escalate permanently; recompute the objective at double precision
        dbl.X = X;
        dbl.D = single.D.cast<double>();
        dbl.R = single.R.cast<double>();
        dbl.E = dbl.D * dbl.R - dbl.X;
        dbl.l1 = detail::l1_norm_d(dbl.R);
        dbl.obj = 0.5 * detail::squared_norm_d(dbl.E) + lambda * dbl.l1;
        single = detail::TrainerCore<float>();
        state.precision = Precision::dbl;
        state.precision_switch_step = static_cast<std::int64_t>(state.step);
      }
    } else {
      detail::train_iteration(dbl, lambda, state);
    }
    const double current_obj = state.precision == Precision::single ? single.obj : dbl.obj;
    if (opts.progress) opts.progress(state.step, current_obj, state.precision);
    if (opts.checkpoint_every && opts.checkpoint_hook &&
        state.step % opts.checkpoint_every == 0) {
      if (state.precision == Precision::single)
        opts.checkpoint_hook(state, single.D.cast<double>(), single.R.cast<double>());
      else
        opts.checkpoint_hook(state, dbl.D, dbl.R);
    }
  }

  TrainResult result;
  if (state.precision == Precision::single) {
    result.dict.D = single.D.cast<double>();
    result.codes = single.R.cast<double>();
  } else {
    result.dict.D = std::move(dbl.D);
    result.codes = std::move(dbl.R);
  }
  result.dict.lambda = lambda;
  result.dict.seed = opts.seed;
  result.dict.iteration = state.step;
  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// Exact inference
// ---------------------------------------------------------------------------

struct InferOptions {
  std::uint64_t max_iters = 200000;
  std::uint64_t check_every = 10000;  // fixed-point check cadence
  double initial_rate = 1e-2;
  double inactive_tol = kInactiveTol;
  double active_tol = kActiveTol;
  bool start_single_precision = true;
  // consecutive rejected updates before a column counts as stalled; a block
  // escalates to double precision when every unconverged column has stalled
  int stall_rejections = 8;
  std::uint64_t single_iter_cap = 50000;  // hard cap on the single phase
  std::function<void(std::uint64_t iter, Eigen::Index remaining)> progress;
};

struct InferResult {
  SparseCode code;
  bool converged = false;
  std::uint64_t iterations = 0;
  Precision final_precision = Precision::single;
  FixedPointReport report;
};

struct BatchInferResult {
  Eigen::MatrixXd codes;  // n x B
  std::vector<bool> converged;
  std::vector<std::uint64_t> iterations;
  Eigen::Index num_converged = 0;
};

namespace detail {

template <typename Scalar>
struct IstaBlock {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Mat G;        // n x n Gram
  Mat B;        // n x b preactivations D^T x
  Mat R;        // n x b codes
  Mat P;        // n x b, G * R
  Eigen::VectorXd x2;      // squared image norms
  Eigen::VectorXd eta;     // per-column rates
  Eigen::VectorXd obj;     // per-column objectives (double accumulated)
  std::vector<int> rejections;  // consecutive rejections per column

  Eigen::Index cols() const { return R.cols(); }

  double column_objective(Eigen::Index j, double lambda) const {
    const double quad = 0.5 * (x2[j] - 2.0 * B.col(j).template cast<double>().dot(
                                            R.col(j).template cast<double>()) +
                               R.col(j).template cast<double>().dot(
                                   P.col(j).template cast<double>()));
    return quad + lambda * R.col(j).template cast<double>().template lpNorm<1>();
  }

  // One adaptive proximal step on every column; returns true when every
  // column is stalled (all at >= stall_limit consecutive rejections).
  bool step(double lambda, int stall_limit) {
    const Eigen::Index b = cols();
    Mat cand(R.rows(), b);
    for (Eigen::Index j = 0; j < b; ++j) {
      const Scalar rate = static_cast<Scalar>(eta[j]);
      const Scalar theta = static_cast<Scalar>(eta[j] * lambda);
      cand.col(j) = (R.col(j) - rate * (P.col(j) - B.col(j)))
                        .unaryExpr([theta](Scalar v) { return shrink(v, theta); });
    }
    Mat cand_P = G * cand;
    bool all_stalled = true;
    for (Eigen::Index j = 0; j < b; ++j) {
      const double quad =
          0.5 * (x2[j] - 2.0 * B.col(j).template cast<double>().dot(
                              cand.col(j).template cast<double>()) +
                 cand.col(j).template cast<double>().dot(
                     cand_P.col(j).template cast<double>()));
      const double cand_obj =
          quad + lambda * cand.col(j).template cast<double>().template lpNorm<1>();
      const RateUpdate upd = adapt_rate(obj[j], cand_obj, eta[j]);
      eta[j] = std::max(upd.rate, 1e-15);
      if (upd.accepted) {
        R.col(j) = cand.col(j);
        P.col(j) = cand_P.col(j);
        obj[j] = cand_obj;
        rejections[static_cast<std::size_t>(j)] = 0;
      } else {
        ++rejections[static_cast<std::size_t>(j)];
      }
      if (rejections[static_cast<std::size_t>(j)] < stall_limit) all_stalled = false;
    }
    return all_stalled;
  }

  void compact(const std::vector<Eigen::Index>& keep) {
    Mat nB(B.rows(), static_cast<Eigen::Index>(keep.size()));
    Mat nR(R.rows(), static_cast<Eigen::Index>(keep.size()));
    Mat nP(P.rows(), static_cast<Eigen::Index>(keep.size()));
    Eigen::VectorXd nx2(static_cast<Eigen::Index>(keep.size()));
    Eigen::VectorXd neta(static_cast<Eigen::Index>(keep.size()));
    Eigen::VectorXd nobj(static_cast<Eigen::Index>(keep.size()));
    std::vector<int> nrej(keep.size());
    for (std::size_t j = 0; j < keep.size(); ++j) {
      const Eigen::Index src = keep[j];
      const Eigen::Index dst = static_cast<Eigen::Index>(j);
      nB.col(dst) = B.col(src);
      nR.col(dst) = R.col(src);
      nP.col(dst) = P.col(src);
      nx2[dst] = x2[src];
      neta[dst] = eta[src];
      nobj[dst] = obj[src];
      nrej[j] = rejections[static_cast<std::size_t>(src)];
    }
    B = std::move(nB);
    R = std::move(nR);
    P = std::move(nP);
    x2 = std::move(nx2);
    eta = std::move(neta);
    obj = std::move(nobj);
    rejections = std::move(nrej);
  }
};

}  // namespace detail

// Runs shrinkage iterations with per-column adaptive rates until every code
// satisfies the fixed-point conditions, escalating from single to double
// precision when progress stalls. Columns are retired as they converge.
inline BatchInferResult infer_batch(const Eigen::MatrixXd& X, const Eigen::MatrixXd& D,
                                    double lambda, const InferOptions& opts,
                                    const Eigen::MatrixXd* warm_start = nullptr) {
  const Eigen::Index n = D.cols();
  const Eigen::Index b = X.cols();
  BatchInferResult result;
  result.codes = Eigen::MatrixXd::Zero(n, b);
  result.converged.assign(static_cast<std::size_t>(b), false);
  result.iterations.assign(static_cast<std::size_t>(b), 0);
  if (b == 0) return result;

  const Eigen::MatrixXd G = D.transpose() * D;
  const Eigen::MatrixXd Bmat = D.transpose() * X;

  detail::IstaBlock<float> fp;
  detail::IstaBlock<double> dp;
  bool in_single = opts.start_single_precision;

  std::vector<Eigen::Index> live(static_cast<std::size_t>(b));
  for (Eigen::Index j = 0; j < b; ++j) live[static_cast<std::size_t>(j)] = j;

  Eigen::MatrixXd R0 = warm_start ? *warm_start : Eigen::MatrixXd::Zero(n, b);
  if (warm_start && (warm_start->rows() != n || warm_start->cols() != b))
    throw std::invalid_argument("infer_batch: warm start has wrong shape");

  if (in_single) {
    fp.G = G.cast<float>();
    fp.B = Bmat.cast<float>();
    fp.R = R0.cast<float>();
    fp.P = fp.G * fp.R;
  } else {
    dp.G = G;
    dp.B = Bmat;
    dp.R = R0;
    dp.P = dp.G * dp.R;
  }
  auto& init_x2 = in_single ? fp.x2 : dp.x2;
  init_x2.resize(b);
  for (Eigen::Index j = 0; j < b; ++j) init_x2[j] = X.col(j).squaredNorm();
  auto& init_eta = in_single ? fp.eta : dp.eta;
  init_eta = Eigen::VectorXd::Constant(b, opts.initial_rate);
  auto& init_obj = in_single ? fp.obj : dp.obj;
  init_obj.resize(b);
  for (Eigen::Index j = 0; j < b; ++j)
    init_obj[j] = in_single ? fp.column_objective(j, lambda) : dp.column_objective(j, lambda);
  (in_single ? fp.rejections : dp.rejections).assign(static_cast<std::size_t>(b), 0);

  // double-precision view of a live column for convergence checks
  auto live_code = [&](std::size_t pos) -> Eigen::VectorXd {
    return in_single ? fp.R.col(static_cast<Eigen::Index>(pos)).cast<double>().eval()
                     : dp.R.col(static_cast<Eigen::Index>(pos)).eval();
  };

  // checks in exact double arithmetic against the original dictionary
  auto run_checks = [&](std::uint64_t iter) {
    std::vector<Eigen::Index> keep;
    for (std::size_t pos = 0; pos < live.size(); ++pos) {
      const Eigen::Index orig = live[pos];
      Eigen::VectorXd r = live_code(pos);
      SparseCode code = SparseCode::from_vector(std::move(r));
      const FixedPointReport rep = check_fixed_point(
          X.col(orig), code, D, lambda, opts.inactive_tol, opts.active_tol);
      if (rep.ok) {
        result.codes.col(orig) = code.r;
        result.converged[static_cast<std::size_t>(orig)] = true;
        result.iterations[static_cast<std::size_t>(orig)] = iter;
        ++result.num_converged;
      } else {
        keep.push_back(static_cast<Eigen::Index>(pos));
      }
    }
    if (keep.size() != live.size()) {
      std::vector<Eigen::Index> new_live;
      new_live.reserve(keep.size());
      for (Eigen::Index pos : keep) new_live.push_back(live[static_cast<std::size_t>(pos)]);
      live = std::move(new_live);
      if (in_single)
        fp.compact(keep);
      else
        dp.compact(keep);
    }
  };

  run_checks(0);  // catches all-inactive fixed points immediately

  std::uint64_t iter = 0;
  while (!live.empty() && iter < opts.max_iters) {
    ++iter;
    if (in_single) {
      const bool all_stalled = fp.step(lambda, opts.stall_rejections);
      if (all_stalled || iter >= opts.single_iter_cap) {
        dp.G = G;
        dp.B.resize(Bmat.rows(), static_cast<Eigen::Index>(live.size()));
        for (std::size_t j = 0; j < live.size(); ++j)
          dp.B.col(static_cast<Eigen::Index>(j)) = Bmat.col(live[j]);
        dp.R = fp.R.cast<double>();
        dp.P = dp.G * dp.R;
        dp.x2 = fp.x2;
        dp.eta = fp.eta;
        dp.rejections.assign(live.size(), 0);
        dp.obj.resize(static_cast<Eigen::Index>(live.size()));
        for (Eigen::Index j = 0; j < dp.cols(); ++j)
          dp.obj[j] = dp.column_objective(j, lambda);
        fp = detail::IstaBlock<float>();
        in_single = false;
      }
    } else {
      dp.step(lambda, std::numeric_limits<int>::max());
    }
    if (iter % opts.check_every == 0) {
      run_checks(iter);
      if (opts.progress) opts.progress(iter, static_cast<Eigen::Index>(live.size()));
    }
  }
  if (!live.empty()) run_checks(iter);

  // unconverged columns still return their best codes
  for (std::size_t pos = 0; pos < live.size(); ++pos) {
    result.codes.col(live[pos]) = live_code(pos);
    result.iterations[static_cast<std::size_t>(live[pos])] = iter;
  }
  return result;
}

// Exact code for a single image.
inline InferResult infer_exact(const Eigen::VectorXd& x, const Eigen::MatrixXd& D,
                               double lambda, const InferOptions& opts = {}) {
  Eigen::MatrixXd X(x.size(), 1);
  X.col(0) = x;
  const BatchInferResult batch = infer_batch(X, D, lambda, opts);
  InferResult result;
  result.code = SparseCode::from_vector(batch.codes.col(0));
  result.converged = batch.converged[0];
  result.iterations = batch.iterations[0];
  result.report = check_fixed_point(x, result.code, D, lambda, opts.inactive_tol,
                                    opts.active_tol);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Dictionary file layout (little-endian):
//   8-byte magic "SPCDIC01", u32 m, u32 n, f64 lambda, u64 seed, u64 iteration,
//   then m*n f64 column-major payload.
// Codes file layout:
//   8-byte magic "SPCCOD01", u32 n, u64 count, f64 lambda, u64 dictionary
//   model key, then per code: u32 original index, u8 converged flag, u32 k,
//   k * (u32 index, f64 value).

namespace detail {

template <typename T>
inline void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
inline T read_pod(std::istream& in, const char* context) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error(std::string("checkpoint: truncated while reading ") + context);
  return v;
}

}  // namespace detail

inline void save_dictionary(const Dictionary& dict, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  out.write("SPCDIC01", 8);
  detail::write_pod(out, static_cast<std::uint32_t>(dict.D.rows()));
  detail::write_pod(out, static_cast<std::uint32_t>(dict.D.cols()));
  detail::write_pod(out, dict.lambda);
  detail::write_pod(out, dict.seed);
  detail::write_pod(out, dict.iteration);
  out.write(reinterpret_cast<const char*>(dict.D.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(dict.D.size())));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline Dictionary load_dictionary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dictionary: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "SPCDIC01")
    throw std::runtime_error("bad dictionary magic: " + path.string());
  Dictionary dict;
  const auto m = detail::read_pod<std::uint32_t>(in, "m");
  const auto n = detail::read_pod<std::uint32_t>(in, "n");
  dict.lambda = detail::read_pod<double>(in, "lambda");
  dict.seed = detail::read_pod<std::uint64_t>(in, "seed");
  dict.iteration = detail::read_pod<std::uint64_t>(in, "iteration");
  dict.D.resize(m, n);
  in.read(reinterpret_cast<char*>(dict.D.data()),
          static_cast<std::streamsize>(sizeof(double) * std::size_t(m) * n));
  if (!in) throw std::runtime_error("truncated dictionary payload: " + path.string());
  return dict;
}

struct CodeSet {
  Eigen::Index n = 0;
  double lambda = 0.0;
  std::uint64_t model_key = 0;
  std::vector<std::uint32_t> image_indices;
  std::vector<bool> converged;
  Eigen::MatrixXd codes;  // n x count
};

inline void save_codes(const CodeSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path.string());
  out.write("SPCCOD01", 8);
  detail::write_pod(out, static_cast<std::uint32_t>(set.n));
  detail::write_pod(out, static_cast<std::uint64_t>(set.codes.cols()));
  detail::write_pod(out, set.lambda);
  detail::write_pod(out, set.model_key);
  for (Eigen::Index t = 0; t < set.codes.cols(); ++t) {
    detail::write_pod(out, set.image_indices[static_cast<std::size_t>(t)]);
    detail::write_pod(out, static_cast<std::uint8_t>(set.converged[static_cast<std::size_t>(t)] ? 1 : 0));
    std::uint32_t k = 0;
    for (Eigen::Index i = 0; i < set.n; ++i)
      if (set.codes(i, t) != 0.0) ++k;
    detail::write_pod(out, k);
    for (Eigen::Index i = 0; i < set.n; ++i) {
      if (set.codes(i, t) == 0.0) continue;
      detail::write_pod(out, static_cast<std::uint32_t>(i));
      detail::write_pod(out, set.codes(i, t));
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline CodeSet load_codes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open codes: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "SPCCOD01")
    throw std::runtime_error("bad codes magic: " + path.string());
  CodeSet set;
  set.n = detail::read_pod<std::uint32_t>(in, "n");
  const auto count = detail::read_pod<std::uint64_t>(in, "count");
  set.lambda = detail::read_pod<double>(in, "lambda");
  set.model_key = detail::read_pod<std::uint64_t>(in, "model key");
  set.codes = Eigen::MatrixXd::Zero(set.n, static_cast<Eigen::Index>(count));
  set.image_indices.resize(count);
  set.converged.resize(count);
  for (std::uint64_t t = 0; t < count; ++t) {
    set.image_indices[t] = detail::read_pod<std::uint32_t>(in, "image index");
    set.converged[t] = detail::read_pod<std::uint8_t>(in, "converged") != 0;
    const auto k = detail::read_pod<std::uint32_t>(in, "k");
    for (std::uint32_t i = 0; i < k; ++i) {
      const auto idx = detail::read_pod<std::uint32_t>(in, "entry index");
      const auto val = detail::read_pod<double>(in, "entry value");
      set.codes(idx, static_cast<Eigen::Index>(t)) = val;
    }
  }
  return set;
}

}  // namespace sparsecode
