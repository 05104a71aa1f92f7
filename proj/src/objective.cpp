#include "ptst/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ptst {

using ag::Matrix;
using ag::Tensor;

void ObjectiveConfig::validate() const {
  if (!(gamma1 >= 0)) throw std::invalid_argument("gamma1 must be >= 0");
  if (!(gamma2_constant >= 0)) throw std::invalid_argument("gamma2 constant must be >= 0");
  if (!(margin >= -1 && margin <= 1)) throw std::invalid_argument("margin must lie in [-1, 1]");
  if (!(temperature_start > 0 && temperature_end > 0))
    throw std::invalid_argument("concrete temperatures must be positive");
  if (!(kl_anneal_fraction > 0 && kl_anneal_fraction <= 1))
    throw std::invalid_argument("kl_anneal_fraction must lie in (0, 1]");
  if (kl_ycos_yx && use_dkl_gaussian_instead_of_cos)
    throw std::invalid_argument("kl_ycos_yx needs the cosine term");
}

namespace {

const char* to_string(Gamma2Mode m) { return m == Gamma2Mode::cosine ? "cosine" : "constant"; }
const char* to_string(PriorY p) { return p == PriorY::uniform ? "uniform" : "empirical"; }

}  // namespace

void to_json(nlohmann::json& j, const ObjectiveConfig& c) {
  j = {{"gamma1", c.gamma1},
       {"gamma2_mode", to_string(c.gamma2_mode)},
       {"gamma2_constant", c.gamma2_constant},
       {"margin", c.margin},
       {"ce_on_x", c.ce_on_x},
       {"ce_on_z", c.ce_on_z},
       {"kl_yz_yx", c.kl_yz_yx},
       {"cos_with_ground_truth", c.cos_with_ground_truth},
       {"learnable_centers", c.learnable_centers},
       {"kl_ycos_yx", c.kl_ycos_yx},
       {"categorical_prior_kl", c.categorical_prior_kl},
       {"use_dkl_gaussian_instead_of_cos", c.use_dkl_gaussian_instead_of_cos},
       {"temperature_start", c.temperature_start},
       {"temperature_end", c.temperature_end},
       {"kl_anneal", c.kl_anneal},
       {"kl_anneal_fraction", c.kl_anneal_fraction},
       {"prior_y", to_string(c.prior_y)},
       {"prior_probs", c.prior_probs}};
}

void from_json(const nlohmann::json& j, ObjectiveConfig& c) {
  ObjectiveConfig d;
  c.gamma1 = j.value("gamma1", d.gamma1);
  const auto g2 = j.value("gamma2_mode", std::string("cosine"));
  if (g2 != "cosine" && g2 != "constant") throw std::invalid_argument("unknown gamma2_mode " + g2);
  c.gamma2_mode = g2 == "cosine" ? Gamma2Mode::cosine : Gamma2Mode::constant;
  c.gamma2_constant = j.value("gamma2_constant", d.gamma2_constant);
  c.margin = j.value("margin", d.margin);
  c.ce_on_x = j.value("ce_on_x", d.ce_on_x);
  c.ce_on_z = j.value("ce_on_z", d.ce_on_z);
  c.kl_yz_yx = j.value("kl_yz_yx", d.kl_yz_yx);
  c.cos_with_ground_truth = j.value("cos_with_ground_truth", d.cos_with_ground_truth);
  c.learnable_centers = j.value("learnable_centers", d.learnable_centers);
  c.kl_ycos_yx = j.value("kl_ycos_yx", d.kl_ycos_yx);
  c.categorical_prior_kl = j.value("categorical_prior_kl", d.categorical_prior_kl);
  c.use_dkl_gaussian_instead_of_cos = j.value("use_dkl_gaussian_instead_of_cos", d.use_dkl_gaussian_instead_of_cos);
  c.temperature_start = j.value("temperature_start", d.temperature_start);
  c.temperature_end = j.value("temperature_end", d.temperature_end);
  c.kl_anneal = j.value("kl_anneal", d.kl_anneal);
  c.kl_anneal_fraction = j.value("kl_anneal_fraction", d.kl_anneal_fraction);
  const auto prior = j.value("prior_y", std::string("uniform"));
  if (prior != "uniform" && prior != "empirical") throw std::invalid_argument("unknown prior_y " + prior);
  c.prior_y = prior == "uniform" ? PriorY::uniform : PriorY::empirical;
  c.prior_probs = j.value("prior_probs", std::vector<double>{});
}

// ---------------------------------------------------------------------------
// presets

namespace {

Preset column(const std::string& name, bool ce_z, bool kl_const, bool kl_sched, bool cos_gt, bool learnable,
              bool kl_ycos) {
  Preset p;
  p.name = name;
  auto& o = p.objective;
  o.ce_on_z = ce_z;
  o.kl_yz_yx = kl_const || kl_sched;
  o.gamma2_mode = kl_const ? Gamma2Mode::constant : Gamma2Mode::cosine;
  o.gamma2_constant = 1.0;
  o.cos_with_ground_truth = cos_gt;
  o.learnable_centers = learnable;
  o.kl_ycos_yx = kl_ycos;
  p.centers = learnable ? CentersMode::learnable : CentersMode::fixed_orthonormal;
  p.cosine_softmax_head = kl_ycos;
  return p;
}

Preset comparison(const std::string& name, bool dkl, bool learnable, bool full) {
  Preset p;
  p.name = name;
  auto& o = p.objective;
  o.use_dkl_gaussian_instead_of_cos = dkl;
  o.learnable_centers = learnable;
  o.ce_on_z = full;
  o.kl_yz_yx = full;
  o.kl_anneal = dkl && learnable;
  p.centers = learnable ? CentersMode::learnable : CentersMode::fixed_orthonormal;
  p.isotropic_latent = dkl;
  return p;
}

}  // namespace

Preset preset(const std::string& name) {
  //                        ce_z   kl_c   kl_s   cos_gt learn  kl_ycos
  if (name == "I") return column(name, false, false, false, true, true, false);
  if (name == "II") return column(name, true, false, false, true, true, false);
  if (name == "III") return column(name, true, true, false, true, true, false);
  if (name == "IV") return column(name, true, false, true, false, true, false);
  if (name == "V") return column(name, true, false, true, true, false, false);
  if (name == "VI") return column(name, true, false, true, true, true, true);
  if (name == "VII") return column(name, true, false, true, true, true, false);

  for (const char* kind : {"dkl", "cos"})
    for (const char* centers : {"fixed", "learnable"}) {
      const std::string base = std::string(kind) + "-" + centers;
      const bool dkl = std::string(kind) == "dkl";
      const bool learnable = std::string(centers) == "learnable";
      if (name == base || name == base + "-part") return comparison(name, dkl, learnable, false);
      if (name == base + "-full") return comparison(name, dkl, learnable, true);
    }
  throw std::invalid_argument("unknown preset '" + name + "'");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names = {"I", "II", "III", "IV", "V", "VI", "VII"};
  for (const char* kind : {"dkl", "cos"})
    for (const char* centers : {"fixed", "learnable"})
      for (const char* part : {"part", "full"})
        names.push_back(std::string(kind) + "-" + centers + "-" + part);
  return names;
}

void apply_preset(const Preset& p, ModelConfig& model) {
  model.mode = ModelMode::tvae;
  model.centers_mode = p.centers;
  model.isotropic_latent = p.isotropic_latent;
  model.cosine_softmax_head = p.cosine_softmax_head;
}

// ---------------------------------------------------------------------------
// bookkeeping

double LossComponents::weighted_sum(const LossComponents& w) const {
  return recon * w.recon + cos_or_kl_z * w.cos_or_kl_z + ce_yx * w.ce_yx + ce_yz * w.ce_yz +
         kl_yz_yx * w.kl_yz_yx + kl_ycos_yx * w.kl_ycos_yx + kl_yx_prior * w.kl_yx_prior;
}

LossComponents& LossComponents::operator+=(const LossComponents& o) {
  recon += o.recon;
  cos_or_kl_z += o.cos_or_kl_z;
  ce_yx += o.ce_yx;
  ce_yz += o.ce_yz;
  kl_yz_yx += o.kl_yz_yx;
  kl_ycos_yx += o.kl_ycos_yx;
  kl_yx_prior += o.kl_yx_prior;
  return *this;
}

LossComponents LossComponents::scaled(double s) const {
  LossComponents c = *this;
  c.recon *= s;
  c.cos_or_kl_z *= s;
  c.ce_yx *= s;
  c.ce_yz *= s;
  c.kl_yz_yx *= s;
  c.kl_ycos_yx *= s;
  c.kl_yx_prior *= s;
  return c;
}

namespace {

nlohmann::json components_json(const LossComponents& c) {
  return {{"recon", c.recon},         {"cos_or_kl_z", c.cos_or_kl_z}, {"ce_yx", c.ce_yx},
          {"ce_yz", c.ce_yz},         {"kl_yz_yx", c.kl_yz_yx},       {"kl_ycos_yx", c.kl_ycos_yx},
          {"kl_yx_prior", c.kl_yx_prior}};
}

}  // namespace

void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = {{"terms", components_json(b.terms)},
       {"weights", components_json(b.weights)},
       {"total", b.total},
       {"n_labelled", b.n_labelled},
       {"n_unlabelled", b.n_unlabelled}};
}

// ---------------------------------------------------------------------------
// schedules

double gamma2_schedule(long step, long total_steps, Gamma2Mode mode, double constant) {
  if (mode == Gamma2Mode::constant) return constant;
  if (total_steps <= 0) return 1.0;
  const double r = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return 0.5 * (1.0 - std::cos(std::numbers::pi * r));
}

double concrete_temperature(long step, long total_steps, double start, double end) {
  if (total_steps <= 0) return end;
  const double r = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return start * std::pow(end / start, r);
}

double kl_anneal_weight(long step, long total_steps, double fraction) {
  const double ramp = fraction * static_cast<double>(total_steps);
  if (ramp <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / ramp);
}

// ---------------------------------------------------------------------------
// losses

namespace {

struct LabelMasks {
  int n_labelled = 0;
  int n_unlabelled = 0;
};

template <typename T>
LabelMasks count_labels(const std::vector<int>& labels, int batch, int K) {
  if (!labels.empty() && static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument("labels must be empty or have one entry per record");
  LabelMasks m;
  for (int i = 0; i < batch; ++i) {
    const int y = labels.empty() ? -1 : labels[i];
    if (y >= K) throw std::invalid_argument("label out of range");
    (y >= 0 ? m.n_labelled : m.n_unlabelled)++;
  }
  return m;
}

template <typename T>
Matrix<T> one_hot(const std::vector<int>& labels, int batch, int K) {
  Matrix<T> m = Matrix<T>::Zero(batch, K);
  for (int i = 0; i < batch && !labels.empty(); ++i)
    if (labels[i] >= 0) m(i, labels[i]) = T(1);
  return m;
}

template <typename T>
Matrix<T> unlabelled_mask(const std::vector<int>& labels, int batch) {
  Matrix<T> m = Matrix<T>::Ones(batch, 1);
  for (int i = 0; i < batch && !labels.empty(); ++i)
    if (labels[i] >= 0) m(i, 0) = T(0);
  return m;
}

// Mean cross-entropy over the labelled records (rows of `onehot` that are set).
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, const Matrix<T>& onehot, int n_labelled) {
  auto picked = ag::sum(ag::mul(ag::log_softmax_rows(logits), Tensor<T>::constant(onehot)));
  return ag::scale(picked, T(-1) / static_cast<T>(n_labelled));
}

// Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).
template <typename T>
Tensor<T> categorical_kl_rows(const Tensor<T>& p_logits, const Tensor<T>& q_logits) {
  auto log_p = ag::log_softmax_rows(p_logits);
  auto diff = ag::sub(log_p, ag::log_softmax_rows(q_logits));
  auto kl = ag::sum(ag::mul(ag::softmax_rows(p_logits), diff));
  return ag::scale(kl, T(1) / static_cast<T>(p_logits.rows()));
}

template <typename T>
Matrix<T> log_prior_row(const ObjectiveConfig& cfg, int K) {
  Matrix<T> row(1, K);
  if (cfg.prior_y == PriorY::uniform) {
    row.setConstant(static_cast<T>(-std::log(static_cast<double>(K))));
    return row;
  }
  if (static_cast<int>(cfg.prior_probs.size()) != K)
    throw std::invalid_argument("empirical prior needs one probability per class");
  double s = 0;
  for (double p : cfg.prior_probs) s += std::max(p, 1e-6);
  for (int k = 0; k < K; ++k) row(0, k) = static_cast<T>(std::log(std::max(cfg.prior_probs[k], 1e-6) / s));
  return row;
}

// Class weights for the latent term: ground truth where allowed, q(y|x) otherwise.
template <typename T>
Tensor<T> latent_class_weights(const std::vector<int>& labels, const Tensor<T>& y_logits, bool use_ground_truth) {
  const int batch = static_cast<int>(y_logits.rows());
  const int K = static_cast<int>(y_logits.cols());
  auto soft = ag::softmax_rows(y_logits);
  if (!use_ground_truth) return soft;
  auto hard = Tensor<T>::constant(one_hot<T>(labels, batch, K));
  return ag::add(hard, ag::mul_col(soft, Tensor<T>::constant(unlabelled_mask<T>(labels, batch))));
}

template <typename T>
struct Accumulator {
  Tensor<T> total;
  LossBreakdown b;

  void add(const Tensor<T>& term, double weight, double LossComponents::*field) {
    b.terms.*field = static_cast<double>(term.item());
    b.weights.*field = weight;
    if (weight == 0) return;
    auto w = ag::scale(term, static_cast<T>(weight));
    total = total.defined() ? ag::add(total, w) : w;
  }

  ObjectiveResult<T> finish() {
    if (!total.defined()) total = Tensor<T>::scalar(T(0));
    b.total = static_cast<double>(total.item());
    return {total, b};
  }
};

template <typename T>
void shared_terms(Accumulator<T>& acc, const Matrix<T>& x, const std::vector<int>& labels,
                  const ModelOutputs<T>& out, const ObjectiveConfig& cfg, ScheduleState s, int n_labelled) {
  const int batch = static_cast<int>(out.y_logits.rows());
  const int K = static_cast<int>(out.y_logits.cols());
  if (!out.x_hat.defined()) throw std::invalid_argument("objective needs the decoder output");
  if (out.x_hat.rows() != x.rows() || out.x_hat.cols() != x.cols())
    throw std::invalid_argument("reconstruction shape mismatch");

  auto recon = ag::mean(ag::square(ag::sub(out.x_hat, Tensor<T>::constant(x))));
  acc.add(recon, 1.0, &LossComponents::recon);

  const Matrix<T> onehot = one_hot<T>(labels, batch, K);
  if (n_labelled > 0) {
    if (cfg.ce_on_x)
      acc.add(masked_cross_entropy(out.y_logits, onehot, n_labelled), cfg.gamma1, &LossComponents::ce_yx);
    if (cfg.ce_on_z)
      acc.add(masked_cross_entropy(out.z_logits, onehot, n_labelled), cfg.gamma1, &LossComponents::ce_yz);
  }
  if (cfg.kl_yz_yx)
    acc.add(categorical_kl_rows(out.z_logits, out.y_logits),
            gamma2_schedule(s.step, s.total_steps, cfg.gamma2_mode, cfg.gamma2_constant), &LossComponents::kl_yz_yx);
  if (cfg.categorical_prior_kl) {
    auto log_p = ag::log_softmax_rows(out.y_logits);
    auto diff = ag::add_row(log_p, Tensor<T>::constant(ag::Matrix<T>(-log_prior_row<T>(cfg, K))));
    auto kl = ag::scale(ag::sum(ag::mul(ag::softmax_rows(out.y_logits), diff)), T(1) / static_cast<T>(batch));
    acc.add(kl, 1.0, &LossComponents::kl_yx_prior);
  }
}

}  // namespace

template <typename T>
ObjectiveResult<T> tampered_objective(const Matrix<T>& x, const std::vector<int>& labels, const ModelOutputs<T>& out,
                                      const ObjectiveConfig& cfg, ScheduleState s) {
  const int batch = static_cast<int>(out.y_logits.rows());
  const int K = static_cast<int>(out.y_logits.cols());
  const auto m = count_labels<T>(labels, batch, K);
  Accumulator<T> acc;
  acc.b.n_labelled = m.n_labelled;
  acc.b.n_unlabelled = m.n_unlabelled;

  shared_terms(acc, x, labels, out, cfg, s, m.n_labelled);

  // cosine term: sum_k w_k (1 - S_k) + (sum_k R_k - sum_k w_k R_k) / (K - 1)
  auto w = latent_class_weights(labels, out.y_logits, cfg.cos_with_ground_truth);
  const auto& S = out.cos_scores;
  auto pos = ag::sum(ag::mul(w, ag::add_scalar(ag::scale(S, T(-1)), T(1))));
  Tensor<T> cos_total = pos;
  if (K > 1) {
    auto r = ag::relu(ag::add_scalar(S, static_cast<T>(-cfg.margin)));
    auto neg = ag::sub(ag::sum(r), ag::sum(ag::mul(w, r)));
    cos_total = ag::add(pos, ag::scale(neg, T(1) / static_cast<T>(K - 1)));
  }
  acc.add(ag::scale(cos_total, T(1) / static_cast<T>(batch)), 1.0, &LossComponents::cos_or_kl_z);

  if (cfg.kl_ycos_yx) {
    if (!out.cos_temperature.defined()) throw std::invalid_argument("kl_ycos_yx needs the cosine softmax head");
    acc.add(categorical_kl_rows(ag::scale_by(S, out.cos_temperature), out.y_logits),
            gamma2_schedule(s.step, s.total_steps, Gamma2Mode::cosine), &LossComponents::kl_ycos_yx);
  }
  return acc.finish();
}

template <typename T>
ObjectiveResult<T> baseline_objective(const Matrix<T>& x, const std::vector<int>& labels, const ModelOutputs<T>& out,
                                      const ObjectiveConfig& cfg, ScheduleState s) {
  const int batch = static_cast<int>(out.y_logits.rows());
  const int K = static_cast<int>(out.y_logits.cols());
  if (static_cast<int>(out.class_means.size()) != K)
    throw std::invalid_argument("mixture-prior objective needs per-class posteriors");
  const auto m = count_labels<T>(labels, batch, K);
  Accumulator<T> acc;
  acc.b.n_labelled = m.n_labelled;
  acc.b.n_unlabelled = m.n_unlabelled;

  shared_terms(acc, x, labels, out, cfg, s, m.n_labelled);

  // E_w[KL(N(mu_k, sigma_k^2) || N(c_k, I))], closed form per component.
  auto w = latent_class_weights(labels, out.y_logits, true);
  Tensor<T> kl_total;
  for (int k = 0; k < K; ++k) {
    const auto& mu = out.class_means[k];
    const auto& ls = out.class_log_stds[k];
    auto diff = ag::add_row(mu, ag::scale(ag::slice_rows(out.centers, k, 1), T(-1)));
    auto inner = ag::sub(ag::add(ag::exp(ag::scale(ls, T(2))), ag::square(diff)), ag::scale(ls, T(2)));
    auto kl_k = ag::scale(ag::add_scalar(inner, T(-1)), T(0.5));
    auto weighted = ag::sum(ag::mul_col(kl_k, ag::slice_cols(w, k, 1)));
    kl_total = kl_total.defined() ? ag::add(kl_total, weighted) : weighted;
  }
  const double beta = cfg.kl_anneal ? kl_anneal_weight(s.step, s.total_steps, cfg.kl_anneal_fraction) : 1.0;
  acc.add(ag::scale(kl_total, T(1) / static_cast<T>(batch)), beta, &LossComponents::cos_or_kl_z);
  return acc.finish();
}

template <typename T>
ObjectiveResult<T> compute_objective(const Matrix<T>& x, const std::vector<int>& labels, const ModelOutputs<T>& out,
                                     const ObjectiveConfig& cfg, ScheduleState s) {
  return cfg.use_dkl_gaussian_instead_of_cos ? baseline_objective(x, labels, out, cfg, s)
                                             : tampered_objective(x, labels, out, cfg, s);
}

template <typename T>
ObjectiveResult<T> classifier_objective(const std::vector<int>& labels, const ModelOutputs<T>& out) {
  const int batch = static_cast<int>(out.y_logits.rows());
  const int K = static_cast<int>(out.y_logits.cols());
  const auto m = count_labels<T>(labels, batch, K);
  Accumulator<T> acc;
  acc.b.n_labelled = m.n_labelled;
  acc.b.n_unlabelled = m.n_unlabelled;
  if (m.n_labelled > 0)
    acc.add(masked_cross_entropy(out.y_logits, one_hot<T>(labels, batch, K), m.n_labelled), 1.0,
            &LossComponents::ce_yx);
  return acc.finish();
}

// ---------------------------------------------------------------------------

double recon_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat) {
  if (x.rows() != x_hat.rows() || x.cols() != x_hat.cols())
    throw std::invalid_argument("recon_loss: shape mismatch");
  if (x.size() == 0) throw std::invalid_argument("recon_loss: empty input");
  return (x_hat - x).squaredNorm() / static_cast<double>(x.size());
}

double cosine_loss(const Eigen::VectorXd& z, const Eigen::MatrixXd& centers, const Eigen::VectorXd& w,
                   double margin) {
  const Eigen::Index K = centers.rows();
  if (w.size() != K) throw std::invalid_argument("cosine_loss: weight size mismatch");
  const Eigen::VectorXd s = cosine_scores(z, centers);
  double loss = 0;
  for (Eigen::Index y = 0; y < K; ++y) {
    if (w[y] == 0) continue;
    double neg = 0;
    for (Eigen::Index k = 0; k < K; ++k)
      if (k != y) neg += std::max(0.0, s[k] - margin);
    if (K > 1) neg /= static_cast<double>(K - 1);
    loss += w[y] * ((1.0 - s[y]) + neg);
  }
  return loss;
}

double cosine_loss(const Eigen::VectorXd& z, const Eigen::MatrixXd& centers, int y, double margin) {
  if (y < 0 || y >= centers.rows()) throw std::invalid_argument("cosine_loss: class index out of range");
  Eigen::VectorXd w = Eigen::VectorXd::Zero(centers.rows());
  w[y] = 1.0;
  return cosine_loss(z, centers, w, margin);
}

#define PTST_INSTANTIATE_OBJECTIVE(T)                                                                          \
  template ObjectiveResult<T> tampered_objective(const Matrix<T>&, const std::vector<int>&,                    \
                                                 const ModelOutputs<T>&, const ObjectiveConfig&, ScheduleState); \
  template ObjectiveResult<T> baseline_objective(const Matrix<T>&, const std::vector<int>&,                    \
                                                 const ModelOutputs<T>&, const ObjectiveConfig&, ScheduleState); \
  template ObjectiveResult<T> compute_objective(const Matrix<T>&, const std::vector<int>&,                     \
                                                const ModelOutputs<T>&, const ObjectiveConfig&, ScheduleState); \
  template ObjectiveResult<T> classifier_objective(const std::vector<int>&, const ModelOutputs<T>&);

PTST_INSTANTIATE_OBJECTIVE(float)
PTST_INSTANTIATE_OBJECTIVE(double)

}  // namespace ptst
