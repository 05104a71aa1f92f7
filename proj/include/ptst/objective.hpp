#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "ptst/autograd.hpp"
#include "ptst/model.hpp"

namespace ptst {

enum class Gamma2Mode { cosine, constant };
enum class PriorY { uniform, empirical };

struct ObjectiveConfig {
  double gamma1 = 0.1;
  Gamma2Mode gamma2_mode = Gamma2Mode::cosine;
  double gamma2_constant = 1.0;
  double margin = 0.0;

  bool ce_on_x = true;
  bool ce_on_z = true;
  bool kl_yz_yx = true;
  bool cos_with_ground_truth = true;
  bool learnable_centers = true;
  bool kl_ycos_yx = false;
  bool categorical_prior_kl = true;
  // Replace the cosine term by E_q(y|x)[KL(q(z|x,y) || N(c_y, I))].
  bool use_dkl_gaussian_instead_of_cos = false;

  // Concrete temperature, exponential decay from start to end over training.
  double temperature_start = 1.0;
  double temperature_end = 0.5;

  // Linear 0 -> 1 ramp of the Gaussian KL over the first `kl_anneal_fraction`
  // of training. Only used with use_dkl_gaussian_instead_of_cos.
  bool kl_anneal = false;
  double kl_anneal_fraction = 1.0 / 3.0;

  PriorY prior_y = PriorY::uniform;
  // Class frequencies for PriorY::empirical (filled by the trainer).
  std::vector<double> prior_probs;

  void validate() const;
  /// The auxiliary classifier on z takes part in training.
  bool uses_aux_classifier() const { return ce_on_z || kl_yz_yx; }
  bool operator==(const ObjectiveConfig&) const = default;
};

void to_json(nlohmann::json& j, const ObjectiveConfig& c);
void from_json(const nlohmann::json& j, ObjectiveConfig& c);

/// A named ablation setting: objective toggles plus the model options they imply.
struct Preset {
  std::string name;
  ObjectiveConfig objective;
  CentersMode centers = CentersMode::learnable;
  bool isotropic_latent = false;
  bool cosine_softmax_head = false;
};

/// Columns "I".."VII" and "{dkl,cos}-{fixed,learnable}[-part|-full]".
/// Unknown names throw std::invalid_argument.
Preset preset(const std::string& name);
std::vector<std::string> preset_names();
void apply_preset(const Preset& p, ModelConfig& model);

/// Unweighted loss components and the weight each carries in `total`.
struct LossComponents {
  double recon = 0;
  double cos_or_kl_z = 0;
  double ce_yx = 0;
  double ce_yz = 0;
  double kl_yz_yx = 0;
  double kl_ycos_yx = 0;
  double kl_yx_prior = 0;

  double weighted_sum(const LossComponents& w) const;
  LossComponents& operator+=(const LossComponents& o);
  LossComponents scaled(double s) const;
};

struct LossBreakdown {
  LossComponents terms;
  LossComponents weights;
  double total = 0;
  int n_labelled = 0;
  int n_unlabelled = 0;
};

void to_json(nlohmann::json& j, const LossBreakdown& b);

struct ScheduleState {
  long step = 0;
  long total_steps = 0;
};

double gamma2_schedule(long step, long total_steps, Gamma2Mode mode, double constant = 1.0);
double concrete_temperature(long step, long total_steps, double start, double end);
double kl_anneal_weight(long step, long total_steps, double fraction);

template <typename T>
struct ObjectiveResult {
  ag::Tensor<T> total;
  LossBreakdown breakdown;
};

/// Cosine-centred objective. `labels` has -1 for records whose label may not be used.
template <typename T>
ObjectiveResult<T> tampered_objective(const ag::Matrix<T>& x, const std::vector<int>& labels,
                                      const ModelOutputs<T>& out, const ObjectiveConfig& cfg, ScheduleState s);

/// Mixture-prior objective; needs ModelOutputs with all class posteriors.
template <typename T>
ObjectiveResult<T> baseline_objective(const ag::Matrix<T>& x, const std::vector<int>& labels,
                                      const ModelOutputs<T>& out, const ObjectiveConfig& cfg, ScheduleState s);

/// Dispatches on cfg.use_dkl_gaussian_instead_of_cos.
template <typename T>
ObjectiveResult<T> compute_objective(const ag::Matrix<T>& x, const std::vector<int>& labels,
                                     const ModelOutputs<T>& out, const ObjectiveConfig& cfg, ScheduleState s);

/// Plain cross-entropy of the recognition head (discriminative PTST).
template <typename T>
ObjectiveResult<T> classifier_objective(const std::vector<int>& labels, const ModelOutputs<T>& out);

// Reference versions on plain vectors.

/// Mean squared error over all entries.
double recon_loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_hat);
/// (1 - cos(z, c_y)) + mean_{k != y} max(0, cos(z, c_k) - margin).
double cosine_loss(const Eigen::VectorXd& z, const Eigen::MatrixXd& centers, int y, double margin);
/// Same, with class weights w (a probability vector) in place of a hard label.
double cosine_loss(const Eigen::VectorXd& z, const Eigen::MatrixXd& centers, const Eigen::VectorXd& w,
                   double margin);

}  // namespace ptst
