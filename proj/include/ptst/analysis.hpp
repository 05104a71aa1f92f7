#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ptst/checkpoint.hpp"
#include "ptst/data.hpp"
#include "ptst/model.hpp"

namespace ptst {

/// counts(true, predicted).
struct ConfusionMatrix {
  Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int K) : counts(Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>::Zero(K, K)) {}
  static ConfusionMatrix from_predictions(int K, const std::vector<int>& truth, const std::vector<int>& predicted);

  int num_classes() const { return static_cast<int>(counts.rows()); }
  void add(int truth, int predicted);
  long total() const { return counts.sum(); }
};

/// How a class that is neither present nor predicted enters the macro mean.
enum class AbsentClassRule { exclude, zero };

/// All values in percent.
struct MacroMetrics {
  double oa = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

MacroMetrics macro_metrics(const ConfusionMatrix& cm, AbsentClassRule rule = AbsentClassRule::exclude);

/// Explained-variance ratios of the leading principal components, descending.
std::vector<double> pca_variance_ratios(const Eigen::MatrixXd& z, int n_components);

/// Posterior means with labels and the predictions of every head (-1 where a
/// head is absent or a label unknown).
struct LatentDump {
  std::vector<std::int64_t> parcel_ids;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> z;  // N x D
  std::vector<int> labels;
  Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor> predictions;  // columns Y, Z, Cos

  std::size_t size() const { return labels.size(); }
  bool operator==(const LatentDump& o) const;
};

/// Runs the encoder over `ds` and collects z = posterior mean. Throws
/// std::invalid_argument for a discriminative-only checkpoint.
LatentDump export_latents(const Checkpoint& ckpt, const Dataset& ds);

/// "LTNT", u32 version, u32 N, u32 D, then per record i64 id, i32 label,
/// 3 x i32 prediction, D x f32.
void write_latent_dump(const LatentDump& dump, const std::filesystem::path& path);
LatentDump read_latent_dump(const std::filesystem::path& path);
void write_latent_csv(const LatentDump& dump, const std::filesystem::path& path);

void write_confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                         const std::filesystem::path& path);

struct ParamReport {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> groups;  // encoder, decoder, heads, centers
  std::size_t group(const std::string& name) const;
};

/// Trainable parameters of the model described by `cfg`.
ParamReport param_count(const ModelConfig& cfg);
/// Weight plus optional bias of a dense layer.
std::size_t linear_param_count(int in, int out, bool bias = true);

// Static plots.
std::string variance_ratio_svg(const std::vector<double>& ratios);
std::string confusion_svg(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

}  // namespace ptst
