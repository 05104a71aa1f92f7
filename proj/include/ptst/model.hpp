#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptst/autograd.hpp"

namespace ptst {

/// One pyramid stage: patch embedding (kernel, stride) to `channels`, then
/// `layers` transformer blocks with `heads` attention heads and FFD expansion.
struct StageConfig {
  int patch_kernel = 3;
  int stride = 2;
  int channels = 32;
  int layers = 1;
  int heads = 2;
  int expansion = 1;

  void validate() const;
  /// Output length for an input of length `t` (padding floor(kernel/2)).
  int output_length(int t) const;
  bool operator==(const StageConfig&) const = default;
};

struct DecoderConfig {
  int channels = 128;
  int heads = 8;
  int expansion = 1;
  int layers = 4;
  // 0 decodes at the input length; a shorter length is upsampled (nearest).
  int seq_len = 0;
  // Size of the learnable position table; longer inputs are rejected.
  int max_len = 512;

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

enum class ModelMode { ptst, tvae };
enum class CentersMode { learnable, fixed_orthonormal };

struct ModelConfig {
  ModelMode mode = ModelMode::tvae;
  std::vector<StageConfig> stages = default_stages();
  int input_dim = 8;
  int num_classes = 5;
  int latent_dim = 256;
  DecoderConfig decoder;
  CentersMode centers_mode = CentersMode::learnable;
  // Single shared log-scale per record instead of per-dimension.
  bool isotropic_latent = false;
  // Learnable temperature for a softmax over cosine scores (ablation VI).
  bool cosine_softmax_head = false;
  double cosine_softmax_init = 10.0;
  double dropout = 0.0;
  std::uint64_t init_seed = 0;

  static std::vector<StageConfig> default_stages();
  /// F=4, stage channels 8, D=16, K=3, small decoder. Used by gradient checks.
  static ModelConfig tiny();
  void validate() const;
  int encoder_width() const { return stages.back().channels; }
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
std::string to_string(ModelMode m);
std::string to_string(CentersMode m);

/// Parameter groups used by the parameter report.
enum class ParamGroup { encoder, decoder, heads, centers };
std::string to_string(ParamGroup g);

template <typename T>
struct NamedParameter {
  std::string name;
  ParamGroup group;
  ag::Tensor<T> tensor;
  bool trainable;
};

template <typename T>
class ParameterStore {
 public:
  ag::Tensor<T> add(std::string name, ParamGroup group, ag::Matrix<T> init, bool trainable = true);
  const std::vector<NamedParameter<T>>& all() const { return params_; }
  std::vector<NamedParameter<T>>& all() { return params_; }
  ag::Tensor<T> find(const std::string& name) const;
  void zero_grad();
  std::size_t trainable_count() const;

 private:
  std::vector<NamedParameter<T>> params_;
};

/// Samples shared between a float and a double model built from the same
/// seed, so both start from identical parameters.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  template <typename T>
  ag::Matrix<T> xavier(int fan_in, int fan_out, int rows, int cols);
  template <typename T>
  ag::Matrix<T> normal(int rows, int cols, double stddev);

 private:
  std::mt19937_64 rng_;
};

/// Randomness consumed by one training forward pass. Supplied by the caller
/// so every pass is a pure function of (parameters, inputs, noise).
template <typename T>
struct Noise {
  ag::Matrix<T> eps;     // [B x D] standard normal
  ag::Matrix<T> gumbel;  // [B x K] standard Gumbel
  std::mt19937_64* dropout_rng = nullptr;
};

template <typename T>
struct ForwardOptions {
  bool training = false;
  // Concrete temperature for relaxed y of unlabelled records.
  T temperature = T(1);
  const Noise<T>* noise = nullptr;
  bool decode = true;
  // Also produce q(z | x, y = k) for every class k (mixture-prior KL).
  bool all_class_posteriors = false;
};

template <typename T>
struct ModelOutputs {
  ag::Tensor<T> y_logits;     // [B x K] recognition model q(y|x)
  ag::Tensor<T> pooled;       // [B x C4]
  ag::Tensor<T> y_cond;       // [B x K] one-hot or relaxed
  ag::Tensor<T> mean;         // [B x D]
  ag::Tensor<T> log_std;      // [B x D]
  ag::Tensor<T> z;            // [B x D]
  ag::Tensor<T> z_logits;     // [B x K] auxiliary classifier q(y|z)
  ag::Tensor<T> cos_scores;   // [B x K]
  ag::Tensor<T> x_hat;        // [B*T x F]
  ag::Tensor<T> centers;      // [K x D]
  ag::Tensor<T> cos_temperature;  // 1x1, only with cosine_softmax_head
  std::vector<ag::Tensor<T>> class_means;     // K x [B x D]
  std::vector<ag::Tensor<T>> class_log_stds;  // K x [B x D]
  std::vector<int> stage_lengths;
};

template <typename T>
struct TransformerBlock {
  ag::Tensor<T> cpe_w, cpe_b;
  ag::Tensor<T> norm1_g, qkv_w, qkv_b, proj_w, proj_b;
  ag::Tensor<T> norm2_g, ffd1_w, ffd1_b, ffd2_w, ffd2_b;
  int heads = 1;

  TransformerBlock(ParameterStore<T>& store, Initializer& init, const std::string& prefix, ParamGroup group,
                   int channels, int heads, int expansion);
  ag::Tensor<T> forward(const ag::Tensor<T>& h, int batch, int time, double dropout, std::mt19937_64* rng) const;
};

template <typename T>
struct PyramidStage {
  StageConfig cfg;
  ag::Tensor<T> patch_w, patch_b;
  std::vector<TransformerBlock<T>> blocks;
  ag::Tensor<T> out_norm_g;

  PyramidStage(ParameterStore<T>& store, Initializer& init, const std::string& prefix, int in_channels,
               const StageConfig& cfg);
  ag::Tensor<T> forward(const ag::Tensor<T>& x, int batch, int time, int& time_out, double dropout,
                        std::mt19937_64* rng) const;
};

template <typename T>
class TvaeModel {
 public:
  explicit TvaeModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }

  /// Full forward. `x` is [B*T x F]. `labels` holds one entry per record:
  /// the class index when the label may be used, -1 otherwise. Empty
  /// `labels` means no record is labelled (evaluation).
  ModelOutputs<T> forward(const ag::Matrix<T>& x, int batch, int time, const std::vector<int>& labels,
                          const ForwardOptions<T>& opts) const;

  /// Recognition path only: pooled features and y logits.
  std::pair<ag::Tensor<T>, ag::Tensor<T>> encode(const ag::Tensor<T>& x, int batch, int time,
                                                  std::vector<int>* stage_lengths = nullptr,
                                                  const ForwardOptions<T>* opts = nullptr) const;
  /// q(z | x, y): (mean, log_std) from pooled features and a class vector.
  std::pair<ag::Tensor<T>, ag::Tensor<T>> latent_heads(const ag::Tensor<T>& pooled,
                                                        const ag::Tensor<T>& y_cond) const;
  ag::Tensor<T> decode(const ag::Tensor<T>& z, const ag::Tensor<T>& y_cond, int time,
                       const ForwardOptions<T>* opts = nullptr) const;
  ag::Tensor<T> aux_classifier(const ag::Tensor<T>& z) const;
  ag::Tensor<T> cosine_scores(const ag::Tensor<T>& z) const;
  const ag::Tensor<T>& centers() const { return centers_; }

 private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  std::vector<PyramidStage<T>> stages_;
  ag::Tensor<T> head_w_, head_b_;
  // tvae only
  ag::Tensor<T> embed_y_w_, mu_w_, mu_b_, logstd_w_, logstd_b_;
  ag::Tensor<T> dec_z_w_, dec_z_b_, dec_y_w_, dec_pos_, dec_out_g_, dec_out_w_, dec_out_b_;
  std::vector<TransformerBlock<T>> dec_blocks_;
  ag::Tensor<T> aux1_w_, aux1_b_, aux2_w_, aux2_b_;
  ag::Tensor<T> centers_;
  ag::Tensor<T> cos_temperature_;
};

/// Class centers for the cosine objective and the mixture prior.
/// fixed_orthonormal: orthonormalized rows of a seeded Gaussian K x D matrix.
/// learnable: unit-normalized Gaussian rows. Requires K <= D in fixed mode.
Eigen::MatrixXd init_class_centers(CentersMode mode, int K, int D, std::uint64_t seed);

/// Overlapping patch embedding: 1-D convolution with the stage kernel and
/// stride, zero padding floor(kernel/2). w is [kernel*C_in x C], b [1 x C].
template <typename T>
ag::Tensor<T> patch_embed(const ag::Tensor<T>& tokens, const ag::Tensor<T>& w, const ag::Tensor<T>& b, int batch,
                          int time, const StageConfig& cfg);

/// Conditional position encoding: tokens + depthwise_conv(tokens), kernel 3.
template <typename T>
ag::Tensor<T> conditional_position_encoding(const ag::Tensor<T>& tokens, const ag::Tensor<T>& w,
                                            const ag::Tensor<T>& b, int batch, int time);

/// g * h / max(||h||, 1e-12) for a single vector.
Eigen::VectorXd scale_norm(const Eigen::VectorXd& h, double g);

/// Plain cosine similarity of z against each row of centers.
Eigen::VectorXd cosine_scores(const Eigen::VectorXd& z, const Eigen::MatrixXd& centers);

}  // namespace ptst
