#pragma once

// Executable check of the SGD-with-noise convergence bound on strongly convex
// quadratic clients.
//
// Client m holds f_m(w) = 1/2 w^T A_m w - b_m^T w with mu*I <= A_m <= L*I,
// and the global objective is F = sum_m alpha_m f_m. The simulated update is
//   w_{r+1} = w_r - (1/L) grad F(w_r) + (1/L) xi_r,   E||xi_r||^2 = sigma^2 / M,
// and the bound being checked is
//   E[F(w_R) - F(w*)] <= (1 - mu/L)^R (F(w_0) - F(w*)) + sigma^2 / (mu M).

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace uapdfl::lab {

struct QuadraticProblem {
  std::vector<Eigen::MatrixXd> A;  // symmetric, one per client
  std::vector<Eigen::VectorXd> b;
  std::vector<double> alpha;  // aggregation weights, sum to 1
  double mu = 0.1;            // strong convexity
  double L = 1.0;             // smoothness
  double sigma = 0.0;         // gradient-noise scale
  Eigen::VectorXd w0;         // starting point

  std::size_t clients() const noexcept { return A.size(); }
  std::size_t dim() const noexcept { return A.empty() ? 0 : static_cast<std::size_t>(A.front().rows()); }

  Eigen::MatrixXd hessian() const;  // sum alpha_m A_m
  Eigen::VectorXd linear() const;   // sum alpha_m b_m
  double objective(const Eigen::VectorXd& w) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& w) const;

  // Throws ConfigError unless shapes agree, weights sum to 1 (+-1e-12) and
  // every A_m's spectrum lies in [mu, L].
  void validate() const;
};

// Eigenvalues of A_m are seeded-uniform in [mu, L] under a random rotation.
// Client m's own minimizer is c + heterogeneity * noise_m (b_m = A_m c_m), so
// heterogeneity = 0 gives every client the same minimizer.
QuadraticProblem gen_quadratic_clients(std::size_t num_clients, std::size_t dim, double mu, double L,
                                       double heterogeneity, std::uint64_t seed, double sigma = 0.0);

// Solves (sum alpha A) w = sum alpha b. Throws NumericError if the system is
// not positive definite or the residual exceeds 1e-10.
Eigen::VectorXd global_optimum(const QuadraticProblem& problem);

struct TrajectoryRecord {
  std::vector<double> gap;    // F(w_r) - F(w*), r = 0..R
  std::vector<double> bound;  // (1 - mu/L)^r gap_0 + sigma^2 / (mu M)
};

TrajectoryRecord run_bound_check(const QuadraticProblem& problem, std::size_t rounds, std::uint64_t seed);

struct MonteCarloSummary {
  std::vector<double> mean_gap;
  std::vector<double> bound;
  double noise_floor = 0.0;  // sigma^2 / (mu M)
  std::size_t trials = 0;
};

// Averages run_bound_check over `trials` noise seeds derived from `seed`.
MonteCarloSummary run_bound_monte_carlo(const QuadraticProblem& problem, std::size_t rounds,
                                        std::size_t trials, std::uint64_t seed);

}  // namespace uapdfl::lab
