#pragma once

// Independent reference computations shared by the unit and acceptance tests.
// Nothing here calls the library routine it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Core>

#include "ptst/analysis.hpp"
#include "ptst/data.hpp"
#include "ptst/model.hpp"
#include "ptst/objective.hpp"

namespace support {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ptst_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// --- data -------------------------------------------------------------------

inline double median_by_sort(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Two-pass mean and population std of one (t, b) column over pixels.
inline std::pair<double, double> two_pass(const std::vector<double>& xs) {
  double s = 0;
  for (double x : xs) s += x;
  const double m = s / xs.size();
  double q = 0;
  for (double x : xs) q += (x - m) * (x - m);
  return {m, std::sqrt(q / xs.size())};
}

// --- convolution ------------------------------------------------------------

/// y[t_out, c] = b[c] + sum_j sum_i x[t_out*S + j - pad, i] * w[j*C_in + i, c], zero outside.
inline MatD conv1d_direct(const MatD& x, const MatD& w, const MatD& b, int kernel, int stride) {
  const int T = static_cast<int>(x.rows());
  const int Cin = static_cast<int>(x.cols());
  const int pad = kernel / 2;
  const int Tout = (T + 2 * pad - kernel) / stride + 1;
  MatD y(Tout, w.cols());
  for (int t = 0; t < Tout; ++t)
    for (int c = 0; c < w.cols(); ++c) {
      double acc = b(0, c);
      for (int j = 0; j < kernel; ++j) {
        const int src = t * stride + j - pad;
        if (src < 0 || src >= T) continue;
        for (int i = 0; i < Cin; ++i) acc += x(src, i) * w(j * Cin + i, c);
      }
      y(t, c) = acc;
    }
  return y;
}

/// Per-channel correlation with a kernel-3 filter and zero padding.
inline MatD depthwise_direct(const MatD& x, const MatD& w, const MatD& b) {
  MatD y(x.rows(), x.cols());
  const int T = static_cast<int>(x.rows());
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < x.cols(); ++c) {
      double acc = b(0, c);
      for (int j = 0; j < w.rows(); ++j) {
        const int src = t + j - static_cast<int>(w.rows()) / 2;
        if (src >= 0 && src < T) acc += w(j, c) * x(src, c);
      }
      y(t, c) = acc;
    }
  return y;
}

// --- metrics ----------------------------------------------------------------

/// Per-class enumeration with the exclusion rule; percent.
inline ptst::MacroMetrics macro_oracle(const Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>& cm,
                                       bool exclude_absent = true) {
  const int K = static_cast<int>(cm.rows());
  long total = 0, correct = 0;
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j) {
      total += cm(i, j);
      if (i == j) correct += cm(i, j);
    }
  double P = 0, R = 0, F = 0;
  int used = 0;
  for (int k = 0; k < K; ++k) {
    long tp = cm(k, k), pred = 0, truth = 0;
    for (int i = 0; i < K; ++i) {
      pred += cm(i, k);
      truth += cm(k, i);
    }
    if (exclude_absent && pred == 0 && truth == 0) continue;
    ++used;
    const double p = pred ? static_cast<double>(tp) / pred : 0.0;
    const double r = truth ? static_cast<double>(tp) / truth : 0.0;
    P += p;
    R += r;
    F += (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  ptst::MacroMetrics m;
  m.oa = 100.0 * correct / total;
  if (used) {
    m.precision = 100.0 * P / used;
    m.recall = 100.0 * R / used;
    m.f1 = 100.0 * F / used;
  }
  return m;
}

// --- objective --------------------------------------------------------------

inline Eigen::VectorXd softmax_row(const MatD& m, int i) {
  Eigen::VectorXd r = m.row(i).transpose();
  r.array() -= r.maxCoeff();
  r = r.array().exp();
  return r / r.sum();
}

inline double kl_sum(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  double s = 0;
  for (Eigen::Index k = 0; k < p.size(); ++k)
    if (p[k] > 0) s += p[k] * (std::log(p[k]) - std::log(q[k]));
  return s;
}

/// Recomputes every loss component from raw model outputs with loops.
inline ptst::LossComponents components_oracle(const MatD& x, const std::vector<int>& labels,
                                              const ptst::ModelOutputs<double>& out,
                                              const ptst::ObjectiveConfig& cfg) {
  ptst::LossComponents c;
  const MatD& yl = out.y_logits.value();
  const int B = static_cast<int>(yl.rows());
  const int K = static_cast<int>(yl.cols());

  double se = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double d = out.x_hat.value().data()[i] - x.data()[i];
    se += d * d;
  }
  c.recon = se / x.size();

  int nl = 0;
  for (int i = 0; i < B; ++i) {
    const int y = labels.empty() ? -1 : labels[i];
    if (y < 0) continue;
    ++nl;
    c.ce_yx -= std::log(softmax_row(yl, i)[y]);
    if (cfg.ce_on_z) c.ce_yz -= std::log(softmax_row(out.z_logits.value(), i)[y]);
  }
  if (nl) {
    c.ce_yx /= nl;
    c.ce_yz /= nl;
  }
  if (!cfg.ce_on_x) c.ce_yx = 0;

  for (int i = 0; i < B; ++i) {
    const Eigen::VectorXd qy = softmax_row(yl, i);
    if (cfg.kl_yz_yx) c.kl_yz_yx += kl_sum(softmax_row(out.z_logits.value(), i), qy) / B;
    if (cfg.categorical_prior_kl) {
      Eigen::VectorXd prior = Eigen::VectorXd::Constant(K, 1.0 / K);
      if (cfg.prior_y == ptst::PriorY::empirical) {
        for (int k = 0; k < K; ++k) prior[k] = std::max(cfg.prior_probs[k], 1e-6);
        prior /= prior.sum();
      }
      c.kl_yx_prior += kl_sum(qy, prior) / B;
    }
    if (cfg.kl_ycos_yx) {
      const double tau = out.cos_temperature.value()(0, 0);
      MatD scaled = out.cos_scores.value() * tau;
      c.kl_ycos_yx += kl_sum(softmax_row(scaled, i), qy) / B;
    }

    const int y = labels.empty() ? -1 : labels[i];
    Eigen::VectorXd w = qy;
    const bool hard = y >= 0 && (cfg.cos_with_ground_truth || cfg.use_dkl_gaussian_instead_of_cos);
    if (hard) w = Eigen::VectorXd::Unit(K, y);

    if (cfg.use_dkl_gaussian_instead_of_cos) {
      const MatD& C = out.centers.value();
      for (int k = 0; k < K; ++k) {
        double kl = 0;
        for (Eigen::Index d = 0; d < C.cols(); ++d) {
          const double mu = out.class_means[k].value()(i, d);
          const double ls = out.class_log_stds[k].value()(i, d);
          const double diff = mu - C(k, d);
          kl += 0.5 * (std::exp(2 * ls) + diff * diff - 1 - 2 * ls);
        }
        c.cos_or_kl_z += w[k] * kl / B;
      }
    } else {
      const MatD& S = out.cos_scores.value();
      for (int k = 0; k < K; ++k) {
        double neg = 0;
        for (int j = 0; j < K; ++j)
          if (j != k) neg += std::max(0.0, S(i, j) - cfg.margin);
        c.cos_or_kl_z += w[k] * ((1 - S(i, k)) + (K > 1 ? neg / (K - 1) : 0.0)) / B;
      }
    }
  }
  return c;
}

/// The weight each component should carry, from the config and the step alone.
inline ptst::LossComponents weights_oracle(const ptst::ObjectiveConfig& cfg, long step, long total, int n_labelled) {
  const double pi = 3.14159265358979323846;
  const double r = total > 0 ? std::clamp(double(step) / total, 0.0, 1.0) : 1.0;
  const double cosine = total > 0 ? 0.5 * (1 - std::cos(pi * r)) : 1.0;
  ptst::LossComponents w;
  w.recon = 1;
  w.cos_or_kl_z = 1;
  if (cfg.use_dkl_gaussian_instead_of_cos && cfg.kl_anneal)
    w.cos_or_kl_z = std::min(1.0, step / (cfg.kl_anneal_fraction * total));
  w.ce_yx = cfg.ce_on_x && n_labelled > 0 ? cfg.gamma1 : 0;
  w.ce_yz = cfg.ce_on_z && n_labelled > 0 ? cfg.gamma1 : 0;
  if (cfg.kl_yz_yx) w.kl_yz_yx = cfg.gamma2_mode == ptst::Gamma2Mode::constant ? cfg.gamma2_constant : cosine;
  if (cfg.kl_ycos_yx) w.kl_ycos_yx = cosine;
  w.kl_yx_prior = cfg.categorical_prior_kl ? 1 : 0;
  return w;
}

/// Forward + objective of a tiny double-precision model for a preset.
struct TinySetup {
  ptst::ModelConfig model_cfg;
  ptst::ObjectiveConfig obj;
  MatD x;
  std::vector<int> labels;
  ptst::Noise<double> noise;
  int batch = 2;
  int time = 16;
};

inline TinySetup tiny_setup(const std::string& preset_name, std::vector<int> labels, std::uint64_t seed,
                            int time = 16) {
  TinySetup s;
  const auto p = ptst::preset(preset_name);
  s.model_cfg = ptst::ModelConfig::tiny();
  ptst::apply_preset(p, s.model_cfg);
  s.model_cfg.init_seed = seed;
  s.obj = p.objective;
  s.batch = static_cast<int>(labels.size());
  s.time = time;
  s.labels = std::move(labels);
  std::mt19937_64 rng(seed + 17);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(1e-9, 1.0 - 1e-9);
  s.x.resize(s.batch * time, s.model_cfg.input_dim);
  for (Eigen::Index i = 0; i < s.x.size(); ++i) s.x.data()[i] = n(rng);
  s.noise.eps.resize(s.batch, s.model_cfg.latent_dim);
  for (Eigen::Index i = 0; i < s.noise.eps.size(); ++i) s.noise.eps.data()[i] = n(rng);
  s.noise.gumbel.resize(s.batch, s.model_cfg.num_classes);
  for (Eigen::Index i = 0; i < s.noise.gumbel.size(); ++i) s.noise.gumbel.data()[i] = -std::log(-std::log(u(rng)));
  return s;
}

inline ptst::ForwardOptions<double> train_opts(const TinySetup& s, double temperature = 0.7) {
  ptst::ForwardOptions<double> o;
  o.training = true;
  o.temperature = temperature;
  o.noise = &s.noise;
  o.all_class_posteriors = s.obj.use_dkl_gaussian_instead_of_cos;
  return o;
}

// --- finite differences -------------------------------------------------------

struct GradCheck {
  std::string name;
  double rel_error = 0;  // ||g_a - g_fd|| / max(||g_a|| + ||g_fd||, 1e-12)
  double grad_norm = 0;
};

/// Central differences for every entry of every trainable parameter of `model`.
/// `loss` runs a full forward and returns the scalar objective.
inline std::vector<GradCheck> check_gradients(ptst::TvaeModel<double>& model,
                                              const std::function<ptst::ag::Tensor<double>()>& loss,
                                              double h = 1e-6) {
  model.parameters().zero_grad();
  loss().backward();
  std::vector<GradCheck> out;
  for (auto& p : model.parameters().all()) {
    if (!p.trainable) continue;
    auto& v = p.tensor.mutable_value();
    const MatD analytic = p.tensor.grad();
    MatD numeric(v.rows(), v.cols());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double orig = v.data()[i];
      v.data()[i] = orig + h;
      const double up = loss().item();
      v.data()[i] = orig - h;
      const double down = loss().item();
      v.data()[i] = orig;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    GradCheck g;
    g.name = p.name;
    g.grad_norm = analytic.norm();
    g.rel_error = (analytic - numeric).norm() / std::max(analytic.norm() + numeric.norm(), 1e-12);
    out.push_back(g);
  }
  return out;
}

}  // namespace support
