#include "ptst/distributions.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace ptst {

namespace {

void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
}

}  // namespace

GaussianParams::GaussianParams(Eigen::VectorXd m, Eigen::VectorXd ls) : mean(std::move(m)), log_std(std::move(ls)) {
  require_same_dim(mean.size(), log_std.size(), "GaussianParams");
  if (!mean.allFinite() || log_std.array().isNaN().any())
    throw std::invalid_argument("GaussianParams: non-finite parameters");
  log_std = log_std.cwiseMax(kMinLogStd).cwiseMin(kMaxLogStd);
}

GaussianParams GaussianParams::isotropic(Eigen::VectorXd mean, double log_std) {
  const auto d = mean.size();
  return GaussianParams(std::move(mean), Eigen::VectorXd::Constant(d, log_std));
}

Eigen::VectorXd sample_gaussian(const GaussianParams& p, const Eigen::VectorXd& eps) {
  require_same_dim(p.dim(), eps.size(), "sample_gaussian");
  return p.mean + (p.log_std.array().exp() * eps.array()).matrix();
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

Eigen::VectorXd sample_concrete(const CategoricalLogits& l, double lambda, const Eigen::VectorXd& gumbel) {
  if (!(lambda > 0)) throw std::invalid_argument("sample_concrete: temperature must be positive");
  require_same_dim(l.logits.size(), gumbel.size(), "sample_concrete");
  return softmax((l.logits + gumbel) / lambda);
}

Eigen::MatrixXd concrete_jacobian(const CategoricalLogits& l, double lambda, const Eigen::VectorXd& gumbel) {
  const Eigen::VectorXd y = sample_concrete(l, lambda, gumbel);
  Eigen::MatrixXd j = -y * y.transpose();
  j.diagonal() += y;
  return j / lambda;
}

int gumbel_max(const CategoricalLogits& l, const Eigen::VectorXd& gumbel) {
  require_same_dim(l.logits.size(), gumbel.size(), "gumbel_max");
  int best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < l.logits.size(); ++k) {
    const double v = l.logits[k] + gumbel[k];
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(k);
    }
  }
  return best;
}

double kl_gaussian_gaussian(const GaussianParams& q, const GaussianParams& p) {
  require_same_dim(q.dim(), p.dim(), "kl_gaussian_gaussian");
  double kl = 0.0;
  for (Eigen::Index d = 0; d < q.dim(); ++d) {
    const double var_ratio = std::exp(2.0 * (q.log_std[d] - p.log_std[d]));
    const double diff = q.mean[d] - p.mean[d];
    kl += p.log_std[d] - q.log_std[d] + 0.5 * (var_ratio + diff * diff * std::exp(-2.0 * p.log_std[d])) - 0.5;
  }
  // cancellation can leave tiny negatives when q == p
  return kl > 0.0 ? kl : 0.0;
}

double kl_categorical(const Eigen::VectorXd& q, const Eigen::VectorXd& p) {
  require_same_dim(q.size(), p.size(), "kl_categorical");
  double kl = 0.0;
  for (Eigen::Index k = 0; k < q.size(); ++k) {
    if (q[k] <= 0.0) continue;
    if (p[k] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += q[k] * (std::log(q[k]) - std::log(p[k]));
  }
  return kl > 0.0 ? kl : 0.0;
}

double gumbel_from_uniform(double u) {
  constexpr double tiny = 1e-300;
  u = std::min(std::max(u, tiny), 1.0 - 1e-16);
  return -std::log(-std::log(u));
}

}  // namespace ptst
