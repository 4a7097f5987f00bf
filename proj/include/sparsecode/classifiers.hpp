#pragma once

// Representations (pixels act as identity, sparse codes live elsewhere; here:
// random two-layer ReLU features and a small trained MLP) plus the two
// evaluators used to compare them: 1-nearest-neighbor and multinomial
// logistic regression with a weight-decay sweep.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sparsecode/dataset.hpp"
#include "sparsecode/rng.hpp"
#include "sparsecode/sparse_coding.hpp"

namespace sparsecode {

constexpr int kNumClasses = 10;

// ---------------------------------------------------------------------------
// Random two-layer ReLU features
// ---------------------------------------------------------------------------

// z(x) = relu(W2 relu(W1 x)) with all weights i.i.d. standard normal, frozen
// at construction. Stored single precision: the weights alone are ~270 MB.
struct RandomNet {
  Eigen::MatrixXf W1;  // hidden x in
  Eigen::MatrixXf W2;  // hidden x hidden
  std::uint64_t seed = 0;
};

inline RandomNet make_random_net(std::uint64_t seed, Eigen::Index in = 784,
                                 Eigen::Index hidden = 7840) {
  RandomNet net;
  net.seed = seed;
  net.W1.resize(hidden, in);
  net.W2.resize(hidden, hidden);
  Rng r1 = Rng::stream(seed, 1);
  for (Eigen::Index j = 0; j < in; ++j)
    for (Eigen::Index i = 0; i < hidden; ++i) net.W1(i, j) = static_cast<float>(r1.normal());
  Rng r2 = Rng::stream(seed, 2);
  for (Eigen::Index j = 0; j < hidden; ++j)
    for (Eigen::Index i = 0; i < hidden; ++i) net.W2(i, j) = static_cast<float>(r2.normal());
  return net;
}

inline Eigen::MatrixXf random_features(const Eigen::MatrixXf& X, const RandomNet& net) {
  if (X.rows() != net.W1.cols())
    throw std::invalid_argument("random_features: input dimension mismatch");
  Eigen::MatrixXf H = (net.W1 * X).cwiseMax(0.0f);
  return (net.W2 * H).cwiseMax(0.0f);
}

inline Eigen::VectorXf random_features(const Eigen::VectorXf& x, const RandomNet& net) {
  return random_features(Eigen::MatrixXf(x), net);
}

// ---------------------------------------------------------------------------
// Trained MLP
// ---------------------------------------------------------------------------

struct TrainedMLP {
  Eigen::MatrixXd W1;  // hidden x in
  Eigen::VectorXd b1;
  Eigen::MatrixXd W2;  // classes x hidden
  Eigen::VectorXd b2;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> loss_log;
};

struct MlpOptions {
  std::uint64_t seed = 0;
  Eigen::Index hidden = 784;
  int batch = 64;
  int steps_phase1 = 1000;
  double rate_phase1 = 0.1;
  int steps_phase2 = 1000;
  double rate_phase2 = 0.01;
};

namespace detail {

// column-wise softmax in place, numerically stabilized
inline void softmax_columns(Eigen::MatrixXd& L) {
  for (Eigen::Index j = 0; j < L.cols(); ++j) {
    L.col(j).array() -= L.col(j).maxCoeff();
    L.col(j) = L.col(j).array().exp();
    L.col(j) /= L.col(j).sum();
  }
}

inline double cross_entropy(const Eigen::MatrixXd& P, const std::vector<int>& labels,
                            const std::vector<Eigen::Index>* subset = nullptr) {
  double loss = 0.0;
  for (Eigen::Index j = 0; j < P.cols(); ++j) {
    const int y = subset ? labels[static_cast<std::size_t>((*subset)[static_cast<std::size_t>(j)])]
                         : labels[static_cast<std::size_t>(j)];
    loss -= std::log(std::max(P(y, j), 1e-300));
  }
  return loss / static_cast<double>(P.cols());
}

struct MlpGrads {
  double loss = 0.0;
  Eigen::MatrixXd gW1, gW2;
  Eigen::VectorXd gb1, gb2;
};

// mean cross-entropy over the batch plus its gradients
inline MlpGrads mlp_backprop(const Eigen::MatrixXd& W1, const Eigen::VectorXd& b1,
                             const Eigen::MatrixXd& W2, const Eigen::VectorXd& b2,
                             const Eigen::MatrixXd& Xb, const std::vector<int>& yb) {
  const auto batch = static_cast<Eigen::Index>(yb.size());
  const Eigen::MatrixXd pre = (W1 * Xb).colwise() + b1;
  const Eigen::MatrixXd H = pre.cwiseMax(0.0);
  Eigen::MatrixXd P = (W2 * H).colwise() + b2;
  softmax_columns(P);
  MlpGrads g;
  g.loss = cross_entropy(P, yb);
  Eigen::MatrixXd dL = P;
  for (Eigen::Index b = 0; b < batch; ++b) dL(yb[static_cast<std::size_t>(b)], b) -= 1.0;
  dL /= static_cast<double>(batch);
  g.gW2 = dL * H.transpose();
  g.gb2 = dL.rowwise().sum();
  Eigen::MatrixXd dH = W2.transpose() * dL;
  dH = (pre.array() > 0.0).select(dH, 0.0);
  g.gW1 = dH * Xb.transpose();
  g.gb1 = dH.rowwise().sum();
  return g;
}

}  // namespace detail

inline Eigen::MatrixXd mlp_hidden(const Eigen::MatrixXd& X, const TrainedMLP& mlp) {
  return ((mlp.W1 * X).colwise() + mlp.b1).cwiseMax(0.0);
}

inline Eigen::MatrixXd mlp_logits(const Eigen::MatrixXd& X, const TrainedMLP& mlp) {
  return (mlp.W2 * mlp_hidden(X, mlp)).colwise() + mlp.b2;
}

inline double mlp_accuracy(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                           const TrainedMLP& mlp) {
  const Eigen::MatrixXd L = mlp_logits(X, mlp);
  Eigen::Index correct = 0;
  for (Eigen::Index j = 0; j < L.cols(); ++j) {
    Eigen::Index arg;
    L.col(j).maxCoeff(&arg);
    if (static_cast<int>(arg) == labels[static_cast<std::size_t>(j)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(L.cols());
}

// Cross-entropy SGD: minibatches of 64 drawn with replacement, 1000 steps at
// rate 0.1 then 1000 at 0.01. Weights init N(0, 1/fan_in), biases zero.
inline TrainedMLP train_mlp(const Eigen::MatrixXd& Xtr, const std::vector<int>& ytr,
                            const Eigen::MatrixXd& Xval, const std::vector<int>& yval,
                            const MlpOptions& opts = {}) {
  const Eigen::Index m = Xtr.rows();
  const Eigen::Index T = Xtr.cols();
  if (T == 0 || ytr.size() != static_cast<std::size_t>(T))
    throw std::invalid_argument("train_mlp: bad training set");
  TrainedMLP mlp;
  mlp.seed = opts.seed;
  mlp.b1 = Eigen::VectorXd::Zero(opts.hidden);
  mlp.b2 = Eigen::VectorXd::Zero(kNumClasses);
  mlp.W1.resize(opts.hidden, m);
  mlp.W2.resize(kNumClasses, opts.hidden);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(m));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(opts.hidden));
  Rng r1 = Rng::stream(opts.seed, 1);
  for (Eigen::Index j = 0; j < m; ++j)
    for (Eigen::Index i = 0; i < opts.hidden; ++i) mlp.W1(i, j) = s1 * r1.normal();
  Rng r2 = Rng::stream(opts.seed, 2);
  for (Eigen::Index j = 0; j < opts.hidden; ++j)
    for (Eigen::Index i = 0; i < kNumClasses; ++i) mlp.W2(i, j) = s2 * r2.normal();

  Rng batch_rng = Rng::stream(opts.seed, 0);
  const int total = opts.steps_phase1 + opts.steps_phase2;
  mlp.loss_log.reserve(static_cast<std::size_t>(total));
  Eigen::MatrixXd Xb(m, opts.batch);
  for (int step = 0; step < total; ++step) {
    const double rate = step < opts.steps_phase1 ? opts.rate_phase1 : opts.rate_phase2;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(opts.batch));
    for (int b = 0; b < opts.batch; ++b) {
      idx[static_cast<std::size_t>(b)] =
          static_cast<Eigen::Index>(batch_rng.uniform_index(static_cast<std::uint64_t>(T)));
      Xb.col(b) = Xtr.col(idx[static_cast<std::size_t>(b)]);
    }
    std::vector<int> yb(static_cast<std::size_t>(opts.batch));
    for (int b = 0; b < opts.batch; ++b)
      yb[static_cast<std::size_t>(b)] = ytr[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])];
    const detail::MlpGrads g = detail::mlp_backprop(mlp.W1, mlp.b1, mlp.W2, mlp.b2, Xb, yb);
    if (!std::isfinite(g.loss)) throw std::runtime_error("train_mlp: loss diverged");
    mlp.loss_log.push_back(g.loss);
    mlp.W2 -= rate * g.gW2;
    mlp.b2 -= rate * g.gb2;
    mlp.W1 -= rate * g.gW1;
    mlp.b1 -= rate * g.gb1;
  }
  mlp.train_accuracy = mlp_accuracy(Xtr, ytr, mlp);
  if (Xval.cols() > 0) mlp.val_accuracy = mlp_accuracy(Xval, yval, mlp);
  return mlp;
}

// d h / d x: rows of W1 where the unit is active, zero rows elsewhere. Inputs
// with a pre-activation exactly at the kink are flagged.
struct MlpJacobian {
  Eigen::MatrixXd J;
  bool at_kink = false;
};

inline MlpJacobian mlp_hidden_jacobian(const Eigen::VectorXd& x, const TrainedMLP& mlp) {
  const Eigen::VectorXd pre = mlp.W1 * x + mlp.b1;
  MlpJacobian out;
  out.J = Eigen::MatrixXd::Zero(mlp.W1.rows(), mlp.W1.cols());
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    if (pre[i] == 0.0) out.at_kink = true;
    if (pre[i] > 0.0) out.J.row(i) = mlp.W1.row(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1-nearest-neighbor
// ---------------------------------------------------------------------------

enum class KnnMetric { euclidean, cosine };

// Brute-force 1-NN, blocked GEMM for the cross terms; distance ties resolve
// to the lowest training index.
template <typename Scalar>
std::vector<int> knn_classify(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& train,
                              const std::vector<int>& labels,
                              const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& queries,
                              KnnMetric metric) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const Eigen::Index N = train.cols();
  const Eigen::Index Q = queries.cols();
  if (N == 0) throw std::invalid_argument("knn_classify: empty training set");
  if (labels.size() != static_cast<std::size_t>(N))
    throw std::invalid_argument("knn_classify: label count mismatch");
  if (train.rows() != queries.rows())
    throw std::invalid_argument("knn_classify: dimension mismatch");

  Mat T = train;
  Mat X = queries;
  Vec tn2;
  if (metric == KnnMetric::euclidean) {
    tn2 = T.colwise().squaredNorm();
  } else {
    for (Eigen::Index j = 0; j < N; ++j) {
      const Scalar n = T.col(j).norm();
      if (n == Scalar(0)) throw std::invalid_argument("knn_classify: zero vector under cosine");
      T.col(j) /= n;
    }
    for (Eigen::Index j = 0; j < Q; ++j) {
      const Scalar n = X.col(j).norm();
      if (n == Scalar(0)) throw std::invalid_argument("knn_classify: zero vector under cosine");
      X.col(j) /= n;
    }
  }

  std::vector<int> preds(static_cast<std::size_t>(Q));
  const Eigen::Index block = 256;
  for (Eigen::Index q0 = 0; q0 < Q; q0 += block) {
    const Eigen::Index b = std::min(block, Q - q0);
    const Mat S = T.transpose() * X.middleCols(q0, b);  // N x b
    for (Eigen::Index j = 0; j < b; ++j) {
      Eigen::Index best = 0;
      if (metric == KnnMetric::euclidean) {
        Scalar best_val = tn2[0] - Scalar(2) * S(0, j);
        for (Eigen::Index i = 1; i < N; ++i) {
          const Scalar val = tn2[i] - Scalar(2) * S(i, j);
          if (val < best_val) {
            best_val = val;
            best = i;
          }
        }
      } else {
        Scalar best_val = S(0, j);
        for (Eigen::Index i = 1; i < N; ++i) {
          if (S(i, j) > best_val) {
            best_val = S(i, j);
            best = i;
          }
        }
      }
      preds[static_cast<std::size_t>(q0 + j)] = labels[static_cast<std::size_t>(best)];
    }
  }
  return preds;
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw std::invalid_argument("accuracy: size mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

struct LinearModel {
  Eigen::MatrixXd W;  // classes x p
  Eigen::VectorXd b;
  double lambda_w = 0.0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;
  int steps = 0;
  bool converged = false;
  std::vector<double> loss_log;  // accepted losses only
};

struct LogregOptions {
  int max_steps = 50000;
  double grad_tol = 1e-6;
  double initial_rate = 1e-2;
};

namespace detail {

struct LogregEval {
  double loss;
  Eigen::MatrixXd P;  // classes x N softmax probabilities
};

inline LogregEval logreg_eval(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                              const Eigen::MatrixXd& W, const Eigen::VectorXd& b,
                              double lambda_w) {
  LogregEval ev;
  ev.P = (W * X).colwise() + b;
  softmax_columns(ev.P);
  ev.loss = cross_entropy(ev.P, labels) + lambda_w * W.squaredNorm();
  return ev;
}

struct LogregGrads {
  double loss = 0.0;
  Eigen::MatrixXd gW;
  Eigen::VectorXd gb;
};

inline LogregGrads logreg_grads(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                                const Eigen::MatrixXd& W, const Eigen::VectorXd& b,
                                double lambda_w) {
  const LogregEval ev = logreg_eval(X, labels, W, b, lambda_w);
  LogregGrads g;
  g.loss = ev.loss;
  Eigen::MatrixXd dL = ev.P;
  for (Eigen::Index j = 0; j < X.cols(); ++j) dL(labels[static_cast<std::size_t>(j)], j) -= 1.0;
  dL /= static_cast<double>(X.cols());
  g.gW = dL * X.transpose() + 2.0 * lambda_w * W;
  g.gb = dL.rowwise().sum();
  return g;
}

}  // namespace detail

// Full-batch gradient descent with the same accept/reject rate adaptation as
// the dictionary trainer; weight decay is a squared-norm penalty on W only,
// the bias stays unregularized.
inline LinearModel train_logreg(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                                double lambda_w, const LogregOptions& opts = {}) {
  if (lambda_w < 0.0) throw std::invalid_argument("train_logreg: negative weight decay");
  const Eigen::Index N = X.cols();
  if (N == 0 || labels.size() != static_cast<std::size_t>(N))
    throw std::invalid_argument("train_logreg: bad training set");
  LinearModel model;
  model.lambda_w = lambda_w;
  model.W = Eigen::MatrixXd::Zero(kNumClasses, X.rows());
  model.b = Eigen::VectorXd::Zero(kNumClasses);

  double eta = opts.initial_rate;
  detail::LogregEval ev = detail::logreg_eval(X, labels, model.W, model.b, lambda_w);
  model.loss_log.push_back(ev.loss);
  for (int step = 0; step < opts.max_steps; ++step) {
    if (!std::isfinite(ev.loss)) throw std::runtime_error("train_logreg: loss diverged");
    Eigen::MatrixXd dL = ev.P;
    for (Eigen::Index j = 0; j < N; ++j) dL(labels[static_cast<std::size_t>(j)], j) -= 1.0;
    dL /= static_cast<double>(N);
    const Eigen::MatrixXd gW = dL * X.transpose() + 2.0 * lambda_w * model.W;
    const Eigen::VectorXd gb = dL.rowwise().sum();
    const double gnorm = std::sqrt(gW.squaredNorm() + gb.squaredNorm());
    model.final_grad_norm = gnorm;
    model.steps = step;
    if (gnorm < opts.grad_tol) {
      model.converged = true;
      break;
    }
    const Eigen::MatrixXd Wc = model.W - eta * gW;
    const Eigen::VectorXd bc = model.b - eta * gb;
    const detail::LogregEval cand = detail::logreg_eval(X, labels, Wc, bc, lambda_w);
    const RateUpdate upd = adapt_rate(ev.loss, cand.loss, eta);
    eta = std::max(upd.rate, 1e-15);
    if (upd.accepted) {
      model.W = Wc;
      model.b = bc;
      ev = cand;
      model.loss_log.push_back(ev.loss);
    }
  }
  model.final_loss = ev.loss;
  return model;
}

inline std::vector<int> logreg_predict(const Eigen::MatrixXd& X, const LinearModel& model) {
  const Eigen::MatrixXd L = (model.W * X).colwise() + model.b;
  std::vector<int> preds(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < L.cols(); ++j) {
    Eigen::Index arg;
    L.col(j).maxCoeff(&arg);
    preds[static_cast<std::size_t>(j)] = static_cast<int>(arg);
  }
  return preds;
}

// ---------------------------------------------------------------------------
// Evaluation sweep
// ---------------------------------------------------------------------------

struct EvalCell {
  std::string representation;
  std::string classifier;  // "1nn" or "logreg"
  std::string metric;      // "euclidean", "cosine" or "" for logreg
  int per_class = 0;
  std::uint64_t seed = 0;
  double lambda_w = 0.0;  // logreg only
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct EvalReport {
  std::vector<EvalCell> cells;
};

struct SweepOptions {
  std::vector<int> k_grid = {1, 3, 10, 30, 100, 300, 1000, 3000};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<double> lambda_w_grid = {1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  bool knn_euclidean = true;
  bool knn_cosine = true;
  bool logreg = true;
  LogregOptions logreg_options;
};

namespace detail {

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> gather_cols(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& M,
    const std::vector<std::size_t>& idx) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(M.rows(),
                                                            static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = M.col(static_cast<Eigen::Index>(idx[j]));
  return out;
}

}  // namespace detail

// Runs every (k, seed) cell for one representation. Labeled subsets are drawn
// per class without replacement, keyed by (seed, class) so a cell is
// reproducible in isolation. 1-NN train accuracy is identically 1 (each point
// is its own nearest neighbor) and is reported as such.
template <typename Scalar>
EvalReport evaluation_sweep(const std::string& rep_name,
                            const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& train,
                            const std::vector<int>& train_labels,
                            const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& test,
                            const std::vector<int>& test_labels, const SweepOptions& opts = {}) {
  EvalReport report;
  for (const int k : opts.k_grid) {
    for (const std::uint64_t seed : opts.seeds) {
      const LabeledSubset subset = sample_labeled_subset(train_labels, k, seed);
      const auto sub = detail::gather_cols<Scalar>(train, subset.indices);
      std::vector<int> sub_labels(subset.indices.size());
      for (std::size_t i = 0; i < subset.indices.size(); ++i)
        sub_labels[i] = train_labels[subset.indices[i]];

      const auto knn_cell = [&](KnnMetric metric, const char* name) {
        EvalCell cell;
        cell.representation = rep_name;
        cell.classifier = "1nn";
        cell.metric = name;
        cell.per_class = k;
        cell.seed = seed;
        cell.train_accuracy = 1.0;
        cell.test_accuracy = accuracy(knn_classify<Scalar>(sub, sub_labels, test, metric),
                                      test_labels);
        report.cells.push_back(cell);
      };
      if (opts.knn_euclidean) knn_cell(KnnMetric::euclidean, "euclidean");
      if (opts.knn_cosine) knn_cell(KnnMetric::cosine, "cosine");

      if (opts.logreg) {
        const Eigen::MatrixXd subd = sub.template cast<double>();
        const Eigen::MatrixXd testd = test.template cast<double>();
        for (const double lw : opts.lambda_w_grid) {
          const LinearModel model = train_logreg(subd, sub_labels, lw, opts.logreg_options);
          EvalCell cell;
          cell.representation = rep_name;
          cell.classifier = "logreg";
          cell.per_class = k;
          cell.seed = seed;
          cell.lambda_w = lw;
          cell.train_accuracy = accuracy(logreg_predict(subd, model), sub_labels);
          cell.test_accuracy = accuracy(logreg_predict(testd, model), test_labels);
          report.cells.push_back(cell);
        }
      }
    }
  }
  return report;
}

// Mean test accuracy over seeds for a (representation, classifier, metric, k)
// combination; for logistic regression the best lambda_w is chosen per seed by
// the given accuracy field before averaging.
inline double summarize_cells(const EvalReport& report, const std::string& rep,
                              const std::string& classifier, const std::string& metric, int k,
                              bool select_by_train = false) {
  double total = 0.0;
  int count = 0;
  std::vector<std::uint64_t> seen;
  for (const EvalCell& cell : report.cells) {
    if (cell.representation != rep || cell.classifier != classifier || cell.per_class != k)
      continue;
    if (classifier == "1nn" && cell.metric != metric) continue;
    if (std::find(seen.begin(), seen.end(), cell.seed) != seen.end()) continue;
    if (classifier == "logreg") {
      double best_score = -1.0;
      double best_test = 0.0;
      for (const EvalCell& other : report.cells) {
        if (other.representation != rep || other.classifier != classifier ||
            other.per_class != k || other.seed != cell.seed)
          continue;
        const double score = select_by_train ? other.train_accuracy : other.test_accuracy;
        if (score > best_score) {
          best_score = score;
          best_test = other.test_accuracy;
        }
      }
      total += best_test;
    } else {
      total += cell.test_accuracy;
    }
    seen.push_back(cell.seed);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("summarize_cells: no matching cells");
  return total / static_cast<double>(count);
}

}  // namespace sparsecode
