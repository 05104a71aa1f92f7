#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ptst {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised for malformed `.sits` input. `offset()` is the byte position at which
/// decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Dense reflectance cube laid out [pixel][time][band].
struct PixelCube {
  int n_pixels = 0;
  int n_time = 0;
  int n_bands = 0;
  std::vector<float> values;

  PixelCube() = default;
  PixelCube(int pixels, int time, int bands)
      : n_pixels(pixels), n_time(time), n_bands(bands),
        values(static_cast<std::size_t>(pixels) * time * bands, 0.0F) {}

  float& at(int p, int t, int b) {
    return values[(static_cast<std::size_t>(p) * n_time + t) * n_bands + b];
  }
  float at(int p, int t, int b) const {
    return values[(static_cast<std::size_t>(p) * n_time + t) * n_bands + b];
  }
};

struct PixelParcel {
  std::int64_t parcel_id = 0;
  PixelCube pixels;
  std::optional<int> label;
};

/// Per-timestep parcel summary: columns [0, B) hold band means, [B, 2B) band
/// population standard deviations.
struct StatSeries {
  std::int64_t parcel_id = 0;
  RowMatrixF features;  // T x F
  std::optional<int> label;
  // When false the label (if any) is hidden: only evaluation may read it.
  bool label_present = false;

  bool operator==(const StatSeries& other) const;
};

struct Dataset {
  std::vector<StatSeries> records;
  int T = 0;
  int F = 0;
  int K = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  int labelled_count() const;
  /// Throws std::invalid_argument if any record disagrees with (T, F, K).
  void validate() const;
  bool operator==(const Dataset& other) const;
};

/// Double-logistic seasonal profile: green-up inflection at `onset`,
/// senescence inflection mirrored around `peak`, transition width `width`.
struct Phenology {
  double onset = 0.0;
  double peak = 0.0;
  double amplitude = 0.0;
  double width = 1.0;

  double value(double t) const;
  bool operator==(const Phenology&) const = default;
};

struct SyntheticConfig {
  int K = 5;
  int T = 64;
  int B = 4;
  int n_parcels = 1000;
  int min_pixels = 8;
  int max_pixels = 32;
  // Raw daily samples per output timestep; a median filter of this width and
  // stride brings the raw series down to T.
  int days_per_step = 5;
  std::vector<Phenology> phenology;  // empty -> default_phenology(K, T)
  std::vector<double> class_weights;  // empty -> balanced
  double noise_sigma = 0.02;
  // Per-parcel variation of the class curve (timesteps, relative amplitude).
  double phase_jitter = 0.0;
  double amplitude_jitter = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

std::vector<Phenology> default_phenology(int K, int T);

/// Median filter along time with the given window and stride.
/// Output length is floor((T_raw - window) / stride) + 1.
PixelCube temporal_median_downsample(const PixelCube& pixels, int window, int stride);

StatSeries parcel_statistics(const PixelParcel& parcel);

Dataset generate_synthetic(const SyntheticConfig& cfg);

/// Stratified label hiding: per class, round-half-up(fraction * n_c) records
/// stay labelled. Hidden labels are retained with label_present = false.
Dataset mask_labels(const Dataset& ds, double labelled_fraction, std::uint64_t seed);

/// Deterministic stratified split into (first, second) with `first_fraction`
/// of every class in the first part.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double first_fraction, std::uint64_t seed);

std::filesystem::path labels_sidecar_path(const std::filesystem::path& sits_path);

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Per-feature z-score statistics fitted on a training split.
struct Standardizer {
  std::vector<float> mean;
  std::vector<float> stddev;

  static Standardizer fit(const Dataset& ds);
  bool empty() const { return mean.empty(); }
  RowMatrixF apply(const RowMatrixF& features) const;
};

}  // namespace ptst
