#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ptst/data.hpp"
#include "ptst/model.hpp"
#include "ptst/objective.hpp"

namespace ptst {

enum class ObjectiveKind { ptst, tvae };
std::string to_string(ObjectiveKind k);
ObjectiveKind objective_kind_from_string(const std::string& s);

/// Everything needed to rebuild a trained model and reproduce its evaluation.
///
/// File layout (little-endian): "TVCK", u32 version, u64 header length, the
/// JSON header, then float32 tensor data in header order.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig model;
  ObjectiveKind objective_kind = ObjectiveKind::tvae;
  std::string preset;
  ObjectiveConfig objective;
  Standardizer normalization;
  long step = 0;
  long total_steps = 0;
  nlohmann::json train_config;  // snapshot, informational
  std::vector<std::pair<std::string, RowMatrixF>> tensors;

  /// The Z head exists only when the auxiliary classifier was trained.
  bool has_z_head() const { return objective_kind == ObjectiveKind::tvae && objective.uses_aux_classifier(); }
  bool has_latent() const { return objective_kind == ObjectiveKind::tvae; }
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies parameter values out of a model.
template <typename T>
std::vector<std::pair<std::string, RowMatrixF>> snapshot_parameters(const TvaeModel<T>& model);

/// Builds a model from the checkpoint config and loads its tensors.
template <typename T>
TvaeModel<T> restore_model(const Checkpoint& ckpt);

}  // namespace ptst
