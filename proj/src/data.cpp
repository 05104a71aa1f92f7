#include "ptst/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "json.hpp"

namespace ptst {

bool StatSeries::operator==(const StatSeries& other) const {
  return parcel_id == other.parcel_id && label == other.label && label_present == other.label_present &&
         features.rows() == other.features.rows() && features.cols() == other.features.cols() &&
         features == other.features;
}

int Dataset::labelled_count() const {
  return static_cast<int>(std::count_if(records.begin(), records.end(),
                                        [](const StatSeries& r) { return r.label_present && r.label; }));
}

void Dataset::validate() const {
  if (T < 0 || F < 0 || K < 0) throw std::invalid_argument("dataset dimensions must be non-negative");
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.features.rows() != T || r.features.cols() != F)
      throw std::invalid_argument("record " + std::to_string(i) + " has shape " +
                                  std::to_string(r.features.rows()) + "x" + std::to_string(r.features.cols()) +
                                  ", dataset expects " + std::to_string(T) + "x" + std::to_string(F));
    if (r.label && (*r.label < 0 || *r.label >= K))
      throw std::invalid_argument("record " + std::to_string(i) + " label out of range");
    if (r.label_present && !r.label)
      throw std::invalid_argument("record " + std::to_string(i) + " flagged labelled without a label");
  }
}

bool Dataset::operator==(const Dataset& other) const {
  return T == other.T && F == other.F && K == other.K && class_names == other.class_names &&
         records == other.records;
}

double Phenology::value(double t) const {
  const double senescence = 2.0 * peak - onset;
  const double rise = 1.0 / (1.0 + std::exp(-(t - onset) / width));
  const double fall = 1.0 / (1.0 + std::exp(-(t - senescence) / width));
  return amplitude * (rise - fall);
}

void SyntheticConfig::validate() const {
  if (K < 2) throw std::invalid_argument("synthetic data needs at least 2 classes");
  if (T < 1 || B < 1) throw std::invalid_argument("timesteps and bands must be positive");
  if (n_parcels < 0) throw std::invalid_argument("parcel count must be non-negative");
  if (min_pixels < 1 || max_pixels < min_pixels) throw std::invalid_argument("invalid pixels-per-parcel range");
  if (days_per_step < 1) throw std::invalid_argument("days_per_step must be >= 1");
  if (noise_sigma < 0 || phase_jitter < 0 || amplitude_jitter < 0)
    throw std::invalid_argument("noise parameters must be non-negative");
  if (!phenology.empty()) {
    if (static_cast<int>(phenology.size()) != K) throw std::invalid_argument("need one phenology per class");
    for (std::size_t i = 0; i < phenology.size(); ++i) {
      if (phenology[i].width <= 0) throw std::invalid_argument("phenology width must be positive");
      for (std::size_t j = i + 1; j < phenology.size(); ++j)
        if (phenology[i] == phenology[j]) throw std::invalid_argument("class phenologies must be pairwise distinct");
    }
  }
  if (!class_weights.empty()) {
    if (static_cast<int>(class_weights.size()) != K) throw std::invalid_argument("need one weight per class");
    if (std::any_of(class_weights.begin(), class_weights.end(), [](double w) { return !(w > 0); }))
      throw std::invalid_argument("class weights must be positive");
  }
}

std::vector<Phenology> default_phenology(int K, int T) {
  std::vector<Phenology> out;
  out.reserve(K);
  const double span = static_cast<double>(T);
  for (int k = 0; k < K; ++k) {
    const double frac = K > 1 ? static_cast<double>(k) / (K - 1) : 0.0;
    Phenology p;
    p.onset = span * (0.12 + 0.38 * frac);
    p.peak = p.onset + span * (0.10 + 0.05 * (k % 3));
    p.amplitude = 0.45 + 0.35 * static_cast<double>((k * 3) % K) / K;
    p.width = span * (0.02 + 0.015 * (k % 2));
    out.push_back(p);
  }
  return out;
}

PixelCube temporal_median_downsample(const PixelCube& pixels, int window, int stride) {
  if (window < 1 || stride < 1) throw std::invalid_argument("window and stride must be >= 1");
  if (window > pixels.n_time)
    throw std::invalid_argument("median window " + std::to_string(window) + " exceeds series length " +
                                std::to_string(pixels.n_time));
  const int t_out = (pixels.n_time - window) / stride + 1;
  PixelCube out(pixels.n_pixels, t_out, pixels.n_bands);
  std::vector<float> buf(window);
  const int mid = window / 2;
  for (int p = 0; p < pixels.n_pixels; ++p) {
    for (int b = 0; b < pixels.n_bands; ++b) {
      for (int t = 0; t < t_out; ++t) {
        for (int w = 0; w < window; ++w) buf[w] = pixels.at(p, t * stride + w, b);
        std::nth_element(buf.begin(), buf.begin() + mid, buf.end());
        float m = buf[mid];
        if (window % 2 == 0) {
          // even window: average the two middle order statistics
          const float lower = *std::max_element(buf.begin(), buf.begin() + mid);
          m = 0.5F * (m + lower);
        }
        out.at(p, t, b) = m;
      }
    }
  }
  return out;
}

StatSeries parcel_statistics(const PixelParcel& parcel) {
  const auto& px = parcel.pixels;
  if (px.n_pixels < 1) throw std::invalid_argument("parcel has no pixels");
  StatSeries s;
  s.parcel_id = parcel.parcel_id;
  s.label = parcel.label;
  s.label_present = parcel.label.has_value();
  s.features.setZero(px.n_time, 2 * px.n_bands);
  const double n = px.n_pixels;
  for (int t = 0; t < px.n_time; ++t) {
    for (int b = 0; b < px.n_bands; ++b) {
      double sum = 0.0;
      for (int p = 0; p < px.n_pixels; ++p) sum += px.at(p, t, b);
      const double mean = sum / n;
      double sq = 0.0;
      for (int p = 0; p < px.n_pixels; ++p) {
        const double d = px.at(p, t, b) - mean;
        sq += d * d;
      }
      s.features(t, b) = static_cast<float>(mean);
      s.features(t, px.n_bands + b) = static_cast<float>(std::sqrt(sq / n));
    }
  }
  return s;
}

namespace {

struct BandModel {
  double base;
  double gain;
};

// Visible bands darken and NIR brightens as the canopy develops.
std::vector<BandModel> band_models(int B) {
  static constexpr std::array<BandModel, 4> kRgbNir{{{0.06, -0.03}, {0.08, 0.04}, {0.07, -0.05}, {0.22, 0.38}}};
  std::vector<BandModel> out;
  for (int b = 0; b < B; ++b) {
    if (b < 4) {
      out.push_back(kRgbNir[b]);
    } else {
      out.push_back({0.1 + 0.02 * (b % 5), 0.3 * std::cos(1.7 * b)});
    }
  }
  return out;
}

std::vector<int> class_counts(int n, const std::vector<double>& weights, int K) {
  std::vector<double> w = weights.empty() ? std::vector<double>(K, 1.0) : weights;
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<int> counts(K);
  int assigned = 0;
  for (int k = 0; k < K; ++k) {
    counts[k] = static_cast<int>(std::floor(n * w[k] / total));
    assigned += counts[k];
  }
  for (int k = 0; assigned < n; k = (k + 1) % K, ++assigned) ++counts[k];
  return counts;
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto phen = cfg.phenology.empty() ? default_phenology(cfg.K, cfg.T) : cfg.phenology;
  const auto bands = band_models(cfg.B);
  const int raw_len = cfg.T * cfg.days_per_step;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> pixel_count(cfg.min_pixels, cfg.max_pixels);

  std::vector<int> labels;
  const auto counts = class_counts(cfg.n_parcels, cfg.class_weights, cfg.K);
  for (int k = 0; k < cfg.K; ++k) labels.insert(labels.end(), counts[k], k);
  std::shuffle(labels.begin(), labels.end(), rng);

  Dataset ds;
  ds.T = cfg.T;
  ds.F = 2 * cfg.B;
  ds.K = cfg.K;
  for (int k = 0; k < cfg.K; ++k) ds.class_names.push_back("class_" + std::to_string(k));
  ds.records.reserve(labels.size());

  // each class also gets its own soil brightness and canopy tint per band
  auto soil = [](int k, int b) { return 0.03 * std::sin(2.3 * k + 1.1 * b + 0.5); };
  auto tint = [](int k, int b) { return 1.0 + 0.25 * std::cos(1.9 * k + 0.7 * b); };

  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int k = labels[i];
    Phenology p = phen[k];
    if (cfg.phase_jitter > 0) {
      const double shift = cfg.phase_jitter * normal(rng);
      p.onset += shift;
      p.peak += shift;
    }
    if (cfg.amplitude_jitter > 0) p.amplitude *= std::max(0.0, 1.0 + cfg.amplitude_jitter * normal(rng));

    PixelParcel parcel;
    parcel.parcel_id = static_cast<std::int64_t>(i);
    parcel.label = k;
    parcel.pixels = PixelCube(pixel_count(rng), raw_len, cfg.B);
    for (int d = 0; d < raw_len; ++d) {
      const double t = (d + 0.5) / cfg.days_per_step - 0.5;
      const double v = p.value(t);
      for (int b = 0; b < cfg.B; ++b) {
        const float clean = static_cast<float>(bands[b].base + soil(k, b) + bands[b].gain * tint(k, b) * v);
        for (int px = 0; px < parcel.pixels.n_pixels; ++px) {
          const double noise = cfg.noise_sigma > 0 ? cfg.noise_sigma * normal(rng) : 0.0;
          parcel.pixels.at(px, d, b) = clean + static_cast<float>(noise);
        }
      }
    }
    parcel.pixels = temporal_median_downsample(parcel.pixels, cfg.days_per_step, cfg.days_per_step);
    ds.records.push_back(parcel_statistics(parcel));
  }
  return ds;
}

namespace {

std::map<int, std::vector<std::size_t>> indices_by_class(const Dataset& ds) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    if (ds.records[i].label) by_class[*ds.records[i].label].push_back(i);
  return by_class;
}

std::size_t round_half_up(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5 + 1e-9));
}

}  // namespace

Dataset mask_labels(const Dataset& ds, double labelled_fraction, std::uint64_t seed) {
  if (!(labelled_fraction > 0.0) || labelled_fraction > 1.0)
    throw std::invalid_argument("labelled fraction must lie in (0, 1]");
  Dataset out = ds;
  std::mt19937_64 rng(seed);
  for (auto& [cls, idx] : indices_by_class(ds)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t keep = std::min(idx.size(), round_half_up(labelled_fraction, idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) out.records[idx[j]].label_present = j < keep;
  }
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double first_fraction, std::uint64_t seed) {
  if (first_fraction < 0.0 || first_fraction > 1.0) throw std::invalid_argument("split fraction must lie in [0, 1]");
  Dataset a, b;
  for (Dataset* d : {&a, &b}) {
    d->T = ds.T;
    d->F = ds.F;
    d->K = ds.K;
    d->class_names = ds.class_names;
  }
  std::vector<char> to_first(ds.records.size(), 0);
  std::mt19937_64 rng(seed);
  for (auto& [cls, idx] : indices_by_class(ds)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n_first = round_half_up(first_fraction, idx.size());
    for (std::size_t j = 0; j < n_first && j < idx.size(); ++j) to_first[idx[j]] = 1;
  }
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    // unlabelled-at-source records go to the first split
    const bool first = to_first[i] || !ds.records[i].label;
    (first ? a : b).records.push_back(ds.records[i]);
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// .sits binary format

namespace {

constexpr std::array<char, 4> kMagic{'S', 'I', 'T', 'S'};
constexpr std::uint8_t kVersion = 0x01;
constexpr std::uint16_t kNoLabel = 0xFFFF;
constexpr std::size_t kHeaderBytes = 4 + 1 + 4 * 4;

class LeWriter {
 public:
  explicit LeWriter(std::ostream& os) : os_(os) {}
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) os_.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }

 private:
  std::ostream& os_;
};

class LeReader {
 public:
  explicit LeReader(const std::vector<char>& buf) : buf_(buf) {}
  std::uint64_t offset() const { return pos_; }
  bool has(std::size_t n) const { return pos_ + n <= buf_.size(); }
  template <typename U>
  U get() {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  const char* ptr() const { return buf_.data() + pos_; }
  void skip(std::size_t n) { pos_ += n; }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::filesystem::path labels_sidecar_path(const std::filesystem::path& sits_path) {
  auto p = sits_path;
  p.replace_extension(".labels.json");
  return p;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  LeWriter w(os);
  w.bytes(kMagic.data(), kMagic.size());
  w.put<std::uint8_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.records.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.T));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.F));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.K));
  for (const auto& r : ds.records) {
    w.put<std::int64_t>(r.parcel_id);
    w.put<std::uint8_t>(r.label_present ? 1 : 0);
    w.put<std::uint16_t>(r.label ? static_cast<std::uint16_t>(*r.label) : kNoLabel);
    for (int t = 0; t < ds.T; ++t)
      for (int f = 0; f < ds.F; ++f) w.put_f32(r.features(t, f));
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());

  nlohmann::json names = nlohmann::json::object();
  for (std::size_t k = 0; k < ds.class_names.size(); ++k) names[std::to_string(k)] = ds.class_names[k];
  std::ofstream side(labels_sidecar_path(path), std::ios::trunc);
  if (!side) throw std::runtime_error("cannot write label sidecar for " + path.string());
  side << names.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  LeReader r(buf);
  if (!r.has(kHeaderBytes)) throw FormatError("truncated .sits header", buf.size());
  if (!std::equal(kMagic.begin(), kMagic.end(), r.ptr())) throw FormatError("bad magic, not a .sits file", 0);
  r.skip(kMagic.size());
  const auto version = r.get<std::uint8_t>();
  if (version != kVersion) throw FormatError("unsupported .sits version " + std::to_string(version), 4);

  Dataset ds;
  const auto n = r.get<std::uint32_t>();
  ds.T = static_cast<int>(r.get<std::uint32_t>());
  ds.F = static_cast<int>(r.get<std::uint32_t>());
  ds.K = static_cast<int>(r.get<std::uint32_t>());
  const std::size_t record_bytes = 8 + 1 + 2 + 4ULL * ds.T * ds.F;
  ds.records.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!r.has(record_bytes))
      throw FormatError("truncated .sits file in record " + std::to_string(i) + " of " + std::to_string(n),
                        r.offset());
    StatSeries s;
    s.parcel_id = r.get<std::int64_t>();
    const auto present_offset = r.offset();
    const auto present = r.get<std::uint8_t>();
    if (present > 1) throw FormatError("invalid label flag in record " + std::to_string(i), present_offset);
    const auto label = r.get<std::uint16_t>();
    s.label_present = present == 1;
    if (label != kNoLabel) {
      if (label >= ds.K)
        throw FormatError("label out of range in record " + std::to_string(i), present_offset + 1);
      s.label = label;
    } else if (s.label_present) {
      throw FormatError("labelled record " + std::to_string(i) + " without a label", present_offset);
    }
    s.features.resize(ds.T, ds.F);
    for (int t = 0; t < ds.T; ++t)
      for (int f = 0; f < ds.F; ++f) s.features(t, f) = r.get_f32();
    ds.records.push_back(std::move(s));
  }
  if (r.has(1)) throw FormatError("trailing bytes after last record", r.offset());

  const auto side_path = labels_sidecar_path(path);
  std::ifstream side(side_path);
  if (side) {
    const auto names = nlohmann::json::parse(side);
    ds.class_names.assign(ds.K, std::string{});
    for (auto it = names.begin(); it != names.end(); ++it) {
      const int k = std::stoi(it.key());
      if (k >= 0 && k < ds.K) ds.class_names[k] = it.value().get<std::string>();
    }
  } else {
    for (int k = 0; k < ds.K; ++k) ds.class_names.push_back("class_" + std::to_string(k));
  }
  return ds;
}

Standardizer Standardizer::fit(const Dataset& ds) {
  Standardizer s;
  s.mean.assign(ds.F, 0.0F);
  s.stddev.assign(ds.F, 1.0F);
  if (ds.empty()) return s;
  std::vector<double> sum(ds.F, 0.0), sq(ds.F, 0.0);
  double count = 0;
  for (const auto& r : ds.records) {
    for (int t = 0; t < ds.T; ++t)
      for (int f = 0; f < ds.F; ++f) sum[f] += r.features(t, f);
    count += ds.T;
  }
  for (int f = 0; f < ds.F; ++f) sum[f] /= count;
  for (const auto& r : ds.records)
    for (int t = 0; t < ds.T; ++t)
      for (int f = 0; f < ds.F; ++f) {
        const double d = r.features(t, f) - sum[f];
        sq[f] += d * d;
      }
  for (int f = 0; f < ds.F; ++f) {
    s.mean[f] = static_cast<float>(sum[f]);
    const double sd = std::sqrt(sq[f] / count);
    s.stddev[f] = sd > 1e-6 ? static_cast<float>(sd) : 1.0F;
  }
  return s;
}

RowMatrixF Standardizer::apply(const RowMatrixF& features) const {
  if (empty()) return features;
  if (features.cols() != static_cast<Eigen::Index>(mean.size()))
    throw std::invalid_argument("feature width does not match normalization statistics");
  RowMatrixF out = features;
  for (Eigen::Index f = 0; f < out.cols(); ++f) out.col(f) = (out.col(f).array() - mean[f]) / stddev[f];
  return out;
}

}  // namespace ptst
