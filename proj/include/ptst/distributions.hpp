#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Core>

namespace ptst {

/// Diagonal Gaussian q(z) = N(mean, diag(exp(log_std))^2). log_std is clamped
/// to [kMinLogStd, kMaxLogStd] at construction.
struct GaussianParams {
  static constexpr double kMinLogStd = -10.0;
  static constexpr double kMaxLogStd = 10.0;

  Eigen::VectorXd mean;
  Eigen::VectorXd log_std;

  GaussianParams() = default;
  GaussianParams(Eigen::VectorXd mean, Eigen::VectorXd log_std);

  Eigen::Index dim() const { return mean.size(); }
  /// Strict isotropic variant: every dimension shares one log-scale.
  static GaussianParams isotropic(Eigen::VectorXd mean, double log_std);
};

struct CategoricalLogits {
  Eigen::VectorXd logits;  // unnormalized log alpha_k
};

/// z = mean + exp(log_std) * eps. The noise is supplied by the caller.
Eigen::VectorXd sample_gaussian(const GaussianParams& p, const Eigen::VectorXd& eps);

/// Concrete / Gumbel-Softmax relaxation softmax((logits + gumbel) / lambda).
Eigen::VectorXd sample_concrete(const CategoricalLogits& l, double lambda, const Eigen::VectorXd& gumbel);

/// d sample_concrete / d logits, a K x K matrix (row = output component).
Eigen::MatrixXd concrete_jacobian(const CategoricalLogits& l, double lambda, const Eigen::VectorXd& gumbel);

/// argmax_k (logits_k + gumbel_k); ties go to the lowest index.
int gumbel_max(const CategoricalLogits& l, const Eigen::VectorXd& gumbel);

double kl_gaussian_gaussian(const GaussianParams& q, const GaussianParams& p);

/// sum_k q_k log(q_k / p_k) with 0 log 0 = 0. Returns +inf when q_k > 0 = p_k.
double kl_categorical(const Eigen::VectorXd& q, const Eigen::VectorXd& p);

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// Standard Gumbel draw from a uniform variate: -log(-log u).
double gumbel_from_uniform(double u);

template <typename Rng>
Eigen::VectorXd draw_standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

template <typename Rng>
Eigen::VectorXd draw_gumbel(Rng& rng, Eigen::Index n) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = gumbel_from_uniform(uniform(rng));
  return v;
}

}  // namespace ptst
