#include "uapdfl/convergence_lab.hpp"

#include <cmath>
#include <random>
#include <string>

#include "uapdfl/errors.hpp"
#include "uapdfl/rng.hpp"

namespace uapdfl::lab {

namespace {

Eigen::MatrixXd random_rotation(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
}

Eigen::VectorXd gaussian(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  return v;
}

}  // namespace

Eigen::MatrixXd QuadraticProblem::hessian() const {
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(A.front().rows(), A.front().cols());
  for (std::size_t m = 0; m < A.size(); ++m) H += alpha[m] * A[m];
  return H;
}

Eigen::VectorXd QuadraticProblem::linear() const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(b.front().size());
  for (std::size_t m = 0; m < b.size(); ++m) v += alpha[m] * b[m];
  return v;
}

double QuadraticProblem::objective(const Eigen::VectorXd& w) const {
  double f = 0.0;
  for (std::size_t m = 0; m < A.size(); ++m) f += alpha[m] * (0.5 * w.dot(A[m] * w) - b[m].dot(w));
  return f;
}

Eigen::VectorXd QuadraticProblem::gradient(const Eigen::VectorXd& w) const {
  return hessian() * w - linear();
}

void QuadraticProblem::validate() const {
  if (A.empty()) throw ConfigError("problem has no clients", "lab.clients");
  if (b.size() != A.size() || alpha.size() != A.size()) {
    throw ConfigError("A, b and alpha must have one entry per client", "lab.clients");
  }
  if (!(mu > 0.0) || !(mu <= L)) throw ConfigError("need 0 < mu <= L", "lab.mu");
  const auto d = A.front().rows();
  double total = 0.0;
  for (std::size_t m = 0; m < A.size(); ++m) {
    if (A[m].rows() != d || A[m].cols() != d || b[m].size() != d) {
      throw ShapeError("client " + std::to_string(m) + " has inconsistent dimensions");
    }
    if (!A[m].isApprox(A[m].transpose(), 1e-12)) {
      throw ConfigError("A_" + std::to_string(m) + " is not symmetric", "lab");
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A[m], Eigen::EigenvaluesOnly);
    const double tol = 1e-9 * L;
    if (es.eigenvalues().minCoeff() < mu - tol || es.eigenvalues().maxCoeff() > L + tol) {
      throw ConfigError("A_" + std::to_string(m) + " spectrum outside [mu, L]", "lab");
    }
    total += alpha[m];
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("alpha must sum to 1", "lab");
  if (w0.size() != d) throw ShapeError("w0 has the wrong dimension");
}

QuadraticProblem gen_quadratic_clients(std::size_t num_clients, std::size_t dim, double mu, double L,
                                       double heterogeneity, std::uint64_t seed, double sigma) {
  if (num_clients == 0 || dim == 0) throw ConfigError("clients and dim must be positive", "lab");
  if (!(mu > 0.0) || !(mu <= L)) throw ConfigError("need 0 < mu <= L", "lab.mu");
  if (!(sigma >= 0.0)) throw ConfigError("sigma must be >= 0", "lab.sigma");
  auto rng = make_stream({seed, 0x9ad4ULL});
  std::uniform_real_distribution<double> spectrum(mu, L);
  std::uniform_real_distribution<double> weight(0.5, 1.5);

  QuadraticProblem p;
  p.mu = mu;
  p.L = L;
  p.sigma = sigma;
  const Eigen::VectorXd shared_opt = gaussian(dim, rng);
  double weight_total = 0.0;
  for (std::size_t m = 0; m < num_clients; ++m) {
    Eigen::VectorXd eig(dim);
    for (Eigen::Index i = 0; i < eig.size(); ++i) eig[i] = mu == L ? L : spectrum(rng);
    const Eigen::MatrixXd Q = random_rotation(dim, rng);
    Eigen::MatrixXd A = Q * eig.asDiagonal() * Q.transpose();
    A = 0.5 * (A + A.transpose()).eval();
    if (mu == L) A = L * Eigen::MatrixXd::Identity(A.rows(), A.cols());
    const Eigen::VectorXd client_opt = shared_opt + heterogeneity * gaussian(dim, rng);
    p.b.push_back(A * client_opt);
    p.A.push_back(std::move(A));
    p.alpha.push_back(weight(rng));
    weight_total += p.alpha.back();
  }
  for (double& a : p.alpha) a /= weight_total;
  p.w0 = shared_opt + 5.0 * gaussian(dim, rng);
  return p;
}

Eigen::VectorXd global_optimum(const QuadraticProblem& problem) {
  const Eigen::MatrixXd H = problem.hessian();
  const Eigen::VectorXd rhs = problem.linear();
  const Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() != Eigen::Success) throw NumericError("aggregate Hessian is not positive definite");
  Eigen::VectorXd w = llt.solve(rhs);
  if (!w.allFinite()) throw NumericError("global optimum is not finite");
  const double residual = (H * w - rhs).norm();
  if (residual > 1e-10 * std::max(1.0, rhs.norm())) {
    throw NumericError("global optimum residual " + std::to_string(residual) + " too large");
  }
  return w;
}

TrajectoryRecord run_bound_check(const QuadraticProblem& problem, std::size_t rounds, std::uint64_t seed) {
  if (rounds < 1) throw ConfigError("need at least one round", "lab.rounds");
  problem.validate();
  const Eigen::MatrixXd H = problem.hessian();
  const Eigen::VectorXd rhs = problem.linear();
  const Eigen::VectorXd w_star = global_optimum(problem);
  const double eta = 1.0 / problem.L;
  const double M = static_cast<double>(problem.clients());
  const double floor = problem.sigma * problem.sigma / (problem.mu * M);
  // Per-coordinate variance so that E||xi||^2 = sigma^2 / M.
  const double coord_sd = problem.sigma / std::sqrt(M * static_cast<double>(problem.dim()));
  auto rng = make_stream({seed, 0x401aULL});
  std::normal_distribution<double> normal(0.0, 1.0);

  auto gap_of = [&](const Eigen::VectorXd& w) {
    const Eigen::VectorXd e = w - w_star;
    return 0.5 * e.dot(H * e);
  };

  TrajectoryRecord rec;
  Eigen::VectorXd w = problem.w0;
  const double gap0 = gap_of(w);
  const double contraction = 1.0 - problem.mu / problem.L;
  for (std::size_t r = 0; r <= rounds; ++r) {
    rec.gap.push_back(gap_of(w));
    rec.bound.push_back(std::pow(contraction, static_cast<double>(r)) * gap0 + floor);
    if (r == rounds) break;
    Eigen::VectorXd step = H * w - rhs;
    if (problem.sigma > 0.0) {
      for (Eigen::Index i = 0; i < step.size(); ++i) step[i] -= coord_sd * normal(rng);
    }
    w -= eta * step;
  }
  return rec;
}

MonteCarloSummary run_bound_monte_carlo(const QuadraticProblem& problem, std::size_t rounds,
                                        std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ConfigError("need at least one trial", "lab.trials");
  MonteCarloSummary out;
  out.trials = trials;
  out.mean_gap.assign(rounds + 1, 0.0);
  for (std::size_t t = 0; t < trials; ++t) {
    const auto rec = run_bound_check(problem, rounds, make_stream({seed, t})());
    for (std::size_t r = 0; r <= rounds; ++r) out.mean_gap[r] += rec.gap[r];
    if (t == 0) out.bound = rec.bound;
  }
  for (double& g : out.mean_gap) g /= static_cast<double>(trials);
  out.noise_floor = problem.sigma * problem.sigma / (problem.mu * static_cast<double>(problem.clients()));
  return out;
}

}  // namespace uapdfl::lab
