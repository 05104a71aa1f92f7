#include "ptst/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ptst {

std::string to_string(ObjectiveKind k) { return k == ObjectiveKind::ptst ? "ptst" : "tvae"; }

ObjectiveKind objective_kind_from_string(const std::string& s) {
  if (s == "ptst") return ObjectiveKind::ptst;
  if (s == "tvae") return ObjectiveKind::tvae;
  throw std::invalid_argument("unknown objective '" + s + "' (expected ptst or tvae)");
}

namespace {

constexpr char kMagic[4] = {'T', 'V', 'C', 'K'};

template <typename U>
void put(std::ostream& os, U v) {
  static_assert(std::endian::native == std::endian::little || sizeof(U) == 1, "little-endian host assumed");
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& is, std::uint64_t& offset, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U)))
    throw FormatError(std::string("checkpoint truncated while reading ") + what, offset);
  offset += sizeof(U);
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.tensors) index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  nlohmann::json header = {{"model", ckpt.model},
                           {"objective_kind", to_string(ckpt.objective_kind)},
                           {"preset", ckpt.preset},
                           {"objective", ckpt.objective},
                           {"normalization", {{"mean", ckpt.normalization.mean}, {"std", ckpt.normalization.stddev}}},
                           {"schedule", {{"step", ckpt.step}, {"total_steps", ckpt.total_steps}}},
                           {"train", ckpt.train_config},
                           {"tensors", index}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, Checkpoint::kVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, m] : ckpt.tensors)
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::uint64_t offset = 0;
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint file", 0);
  offset = 4;
  const auto version = get<std::uint32_t>(is, offset, "version");
  if (version != Checkpoint::kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), offset - 4);
  const auto len = get<std::uint64_t>(is, offset, "header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint header truncated", offset);
  offset += len;

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what(), offset - len);
  }
  Checkpoint c;
  c.model = h.at("model").get<ModelConfig>();
  c.objective_kind = objective_kind_from_string(h.at("objective_kind").get<std::string>());
  c.preset = h.value("preset", std::string());
  c.objective = h.at("objective").get<ObjectiveConfig>();
  c.normalization.mean = h.at("normalization").at("mean").get<std::vector<float>>();
  c.normalization.stddev = h.at("normalization").at("std").get<std::vector<float>>();
  c.step = h.at("schedule").at("step").get<long>();
  c.total_steps = h.at("schedule").at("total_steps").get<long>();
  c.train_config = h.value("train", nlohmann::json::object());
  for (const auto& t : h.at("tensors")) {
    RowMatrixF m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    const auto bytes = static_cast<std::streamsize>(m.size() * sizeof(float));
    const auto name = t.at("name").get<std::string>();
    if (!is.read(reinterpret_cast<char*>(m.data()), bytes))
      throw FormatError("checkpoint truncated in tensor " + name, offset);
    offset += static_cast<std::uint64_t>(bytes);
    c.tensors.emplace_back(name, std::move(m));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint", offset);
  return c;
}

template <typename T>
std::vector<std::pair<std::string, RowMatrixF>> snapshot_parameters(const TvaeModel<T>& model) {
  std::vector<std::pair<std::string, RowMatrixF>> out;
  for (const auto& p : model.parameters().all()) out.emplace_back(p.name, p.tensor.value().template cast<float>());
  return out;
}

template <typename T>
TvaeModel<T> restore_model(const Checkpoint& ckpt) {
  TvaeModel<T> model(ckpt.model);
  auto& params = model.parameters().all();
  if (params.size() != ckpt.tensors.size())
    throw std::invalid_argument("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                                std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, m] = ckpt.tensors[i];
    auto& p = params[i];
    if (p.name != name) throw std::invalid_argument("checkpoint tensor " + name + " where " + p.name + " expected");
    if (p.tensor.rows() != m.rows() || p.tensor.cols() != m.cols())
      throw std::invalid_argument("checkpoint tensor " + name + " has the wrong shape");
    p.tensor.mutable_value() = m.template cast<T>();
  }
  return model;
}

template std::vector<std::pair<std::string, RowMatrixF>> snapshot_parameters(const TvaeModel<float>&);
template std::vector<std::pair<std::string, RowMatrixF>> snapshot_parameters(const TvaeModel<double>&);
template TvaeModel<float> restore_model(const Checkpoint&);
template TvaeModel<double> restore_model(const Checkpoint&);

}  // namespace ptst
