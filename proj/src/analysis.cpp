#include "ptst/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "ptst/training.hpp"

namespace ptst {

ConfusionMatrix ConfusionMatrix::from_predictions(int K, const std::vector<int>& truth,
                                                  const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("truth and predictions differ in length");
  ConfusionMatrix cm(K);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted) {
  const int K = num_classes();
  if (truth < 0 || truth >= K || predicted < 0 || predicted >= K)
    throw std::invalid_argument("confusion matrix index out of range");
  ++counts(truth, predicted);
}

MacroMetrics macro_metrics(const ConfusionMatrix& cm, AbsentClassRule rule) {
  const long total = cm.total();
  if (cm.num_classes() == 0 || total <= 0) throw std::invalid_argument("macro_metrics: empty confusion matrix");
  MacroMetrics m;
  m.oa = 100.0 * static_cast<double>(cm.counts.trace()) / static_cast<double>(total);
  int used = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const double tp = static_cast<double>(cm.counts(c, c));
    const double n_true = static_cast<double>(cm.counts.row(c).sum());
    const double n_pred = static_cast<double>(cm.counts.col(c).sum());
    if (n_true == 0 && n_pred == 0 && rule == AbsentClassRule::exclude) continue;
    const double p = n_pred > 0 ? tp / n_pred : 0.0;
    const double r = n_true > 0 ? tp / n_true : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    ++used;
  }
  if (used > 0) {
    m.precision = 100.0 * m.precision / used;
    m.recall = 100.0 * m.recall / used;
    m.f1 = 100.0 * m.f1 / used;
  }
  return m;
}

std::vector<double> pca_variance_ratios(const Eigen::MatrixXd& z, int n_components) {
  if (z.rows() <= 1) throw std::invalid_argument("pca_variance_ratios needs at least two rows");
  if (n_components < 1 || n_components > z.cols())
    throw std::invalid_argument("n_components must lie in [1, D]");
  const Eigen::MatrixXd centered = z.rowwise() - z.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(z.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  Eigen::VectorXd ev = eig.eigenvalues().cwiseMax(0.0);  // ascending
  const double trace = ev.sum();
  std::vector<double> ratios(n_components, 0.0);
  if (trace <= 0) return ratios;
  for (int i = 0; i < n_components; ++i) ratios[i] = ev[ev.size() - 1 - i] / trace;
  return ratios;
}

bool LatentDump::operator==(const LatentDump& o) const {
  return parcel_ids == o.parcel_ids && labels == o.labels && z.rows() == o.z.rows() && z.cols() == o.z.cols() &&
         z == o.z && predictions == o.predictions;
}

LatentDump export_latents(const Checkpoint& ckpt, const Dataset& ds) {
  if (!ckpt.has_latent())
    throw std::invalid_argument("unsupported mode: latent export needs a tvae checkpoint, got ptst");
  const auto model = restore_model<float>(ckpt);
  const Predictions p = predict(model, ckpt, ds);
  LatentDump d;
  d.parcel_ids = p.ids;
  d.z = p.latent_mean;
  d.labels = p.truth;
  d.predictions.resize(static_cast<Eigen::Index>(p.y.size()), 3);
  for (std::size_t i = 0; i < p.y.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    d.predictions(r, 0) = p.y[i];
    d.predictions(r, 1) = p.z.empty() ? -1 : p.z[i];
    d.predictions(r, 2) = p.cos.empty() ? -1 : p.cos[i];
  }
  return d;
}

namespace {

constexpr char kLatentMagic[4] = {'L', 'T', 'N', 'T'};
constexpr std::uint32_t kLatentVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, std::uint64_t& offset) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw FormatError("latent dump truncated", offset);
  offset += sizeof(U);
  return v;
}

}  // namespace

void write_latent_dump(const LatentDump& d, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kLatentMagic, 4);
  put<std::uint32_t>(os, kLatentVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(d.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(d.z.cols()));
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    put<std::int64_t>(os, d.parcel_ids[i]);
    put<std::int32_t>(os, d.labels[i]);
    for (int h = 0; h < 3; ++h) put<std::int32_t>(os, d.predictions(r, h));
    os.write(reinterpret_cast<const char*>(d.z.row(r).data()), static_cast<std::streamsize>(d.z.cols() * 4));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

LatentDump read_latent_dump(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kLatentMagic, 4) != 0) throw FormatError("not a latent dump", 0);
  std::uint64_t offset = 4;
  if (get<std::uint32_t>(is, offset) != kLatentVersion) throw FormatError("unsupported latent dump version", 4);
  const auto n = get<std::uint32_t>(is, offset);
  const auto D = get<std::uint32_t>(is, offset);
  LatentDump d;
  d.z.resize(n, D);
  d.predictions.resize(n, 3);
  for (std::uint32_t i = 0; i < n; ++i) {
    d.parcel_ids.push_back(get<std::int64_t>(is, offset));
    d.labels.push_back(get<std::int32_t>(is, offset));
    for (int h = 0; h < 3; ++h) d.predictions(i, h) = get<std::int32_t>(is, offset);
    if (!is.read(reinterpret_cast<char*>(d.z.row(i).data()), static_cast<std::streamsize>(D) * 4))
      throw FormatError("latent dump truncated in record " + std::to_string(i), offset);
    offset += static_cast<std::uint64_t>(D) * 4;
  }
  return d;
}

void write_latent_csv(const LatentDump& d, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "parcel_id,label,pred_y,pred_z,pred_cos";
  for (Eigen::Index k = 0; k < d.z.cols(); ++k) os << ",z" << k;
  os << '\n' << std::setprecision(9);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    os << d.parcel_ids[i] << ',' << d.labels[i] << ',' << d.predictions(r, 0) << ',' << d.predictions(r, 1) << ','
       << d.predictions(r, 2);
    for (Eigen::Index k = 0; k < d.z.cols(); ++k) os << ',' << d.z(r, k);
    os << '\n';
  }
}

void write_confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                         const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  auto name = [&](int k) {
    return k < static_cast<int>(class_names.size()) ? class_names[k] : "class_" + std::to_string(k);
  };
  os << "true\\predicted";
  for (int k = 0; k < cm.num_classes(); ++k) os << ',' << name(k);
  os << '\n';
  for (int r = 0; r < cm.num_classes(); ++r) {
    os << name(r);
    for (int c = 0; c < cm.num_classes(); ++c) os << ',' << cm.counts(r, c);
    os << '\n';
  }
}

std::size_t ParamReport::group(const std::string& name) const {
  for (const auto& [g, n] : groups)
    if (g == name) return n;
  return 0;
}

ParamReport param_count(const ModelConfig& cfg) {
  const TvaeModel<float> model(cfg);
  ParamReport r;
  for (ParamGroup g : {ParamGroup::encoder, ParamGroup::decoder, ParamGroup::heads, ParamGroup::centers})
    r.groups.emplace_back(to_string(g), 0);
  for (const auto& p : model.parameters().all()) {
    if (!p.trainable) continue;
    const auto n = static_cast<std::size_t>(p.tensor.value().size());
    r.groups[static_cast<std::size_t>(p.group)].second += n;
    r.total += n;
  }
  return r;
}

std::size_t linear_param_count(int in, int out, bool bias) {
  return static_cast<std::size_t>(in) * out + (bias ? static_cast<std::size_t>(out) : 0);
}

// ---------------------------------------------------------------------------
// plots

std::string variance_ratio_svg(const std::vector<double>& ratios) {
  const int w = 40 * static_cast<int>(ratios.size()) + 60, h = 240;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<line x1=\"40\" y1=\"210\" x2=\"" << w - 10 << "\" y2=\"210\" stroke=\"black\"/>\n";
  double cumulative = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double bh = 180.0 * ratios[i];
    const double x = 45.0 + 40.0 * static_cast<double>(i);
    os << "<rect x=\"" << x << "\" y=\"" << 210 - bh << "\" width=\"30\" height=\"" << bh
       << "\" fill=\"steelblue\"/>\n";
    cumulative += ratios[i];
    os << "<text x=\"" << x + 15 << "\" y=\"225\" font-size=\"10\" text-anchor=\"middle\">PC" << i + 1 << "</text>\n";
  }
  os << "<text x=\"45\" y=\"20\" font-size=\"12\">cumulative " << cumulative << "</text>\n</svg>\n";
  return os.str();
}

std::string confusion_svg(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  const int K = cm.num_classes(), cell = 40, off = 80;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << off + K * cell + 10 << "\" height=\""
     << off + K * cell + 10 << "\">\n";
  for (int r = 0; r < K; ++r) {
    const double row_total = std::max<double>(1.0, static_cast<double>(cm.counts.row(r).sum()));
    for (int c = 0; c < K; ++c) {
      const int shade = 255 - static_cast<int>(200.0 * static_cast<double>(cm.counts(r, c)) / row_total);
      os << "<rect x=\"" << off + c * cell << "\" y=\"" << off + r * cell << "\" width=\"" << cell << "\" height=\""
         << cell << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"white\"/>\n";
      os << "<text x=\"" << off + c * cell + cell / 2 << "\" y=\"" << off + r * cell + cell / 2 + 4
         << "\" font-size=\"10\" text-anchor=\"middle\">" << cm.counts(r, c) << "</text>\n";
    }
    const std::string name = r < static_cast<int>(class_names.size()) ? class_names[r] : std::to_string(r);
    os << "<text x=\"" << off - 4 << "\" y=\"" << off + r * cell + cell / 2 + 4
       << "\" font-size=\"10\" text-anchor=\"end\">" << name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ptst
