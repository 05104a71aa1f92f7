#include "ptst/model.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/QR>

namespace ptst {

using ag::Matrix;
using ag::Tensor;

// ---------------------------------------------------------------------------
// configuration

void StageConfig::validate() const {
  if (stride < 1 || patch_kernel < stride)
    throw std::invalid_argument("stage needs kernel >= stride >= 1 (overlapping patches)");
  if (channels < 1 || heads < 1 || channels % heads != 0)
    throw std::invalid_argument("stage channels must be a positive multiple of heads");
  if (layers < 1 || expansion < 1) throw std::invalid_argument("stage layers and expansion must be >= 1");
}

int StageConfig::output_length(int t) const {
  const int pad = patch_kernel / 2;
  return (t + 2 * pad - patch_kernel) / stride + 1;
}

void DecoderConfig::validate() const {
  if (channels < 1 || heads < 1 || channels % heads != 0)
    throw std::invalid_argument("decoder channels must be a positive multiple of heads");
  if (layers < 1 || expansion < 1) throw std::invalid_argument("decoder layers and expansion must be >= 1");
  if (seq_len < 0 || max_len < 1) throw std::invalid_argument("invalid decoder sequence lengths");
  if (seq_len > max_len) throw std::invalid_argument("decoder seq_len exceeds max_len");
}

std::vector<StageConfig> ModelConfig::default_stages() {
  return {{3, 2, 32, 1, 2, 1}, {3, 2, 64, 1, 4, 1}, {3, 2, 128, 1, 8, 1}, {3, 2, 256, 1, 16, 1}};
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.stages = {{3, 2, 8, 1, 2, 1}, {3, 2, 8, 1, 2, 1}, {3, 2, 8, 1, 2, 1}, {3, 2, 8, 1, 2, 1}};
  c.input_dim = 4;
  c.num_classes = 3;
  c.latent_dim = 16;
  c.decoder = {8, 2, 1, 1, 0, 64};
  return c;
}

void ModelConfig::validate() const {
  if (stages.empty()) throw std::invalid_argument("model needs at least one stage");
  for (const auto& s : stages) s.validate();
  decoder.validate();
  if (input_dim < 1) throw std::invalid_argument("input_dim must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
  if (centers_mode == CentersMode::fixed_orthonormal && latent_dim < num_classes)
    throw std::invalid_argument("fixed orthonormal centers need latent_dim >= num_classes");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
}

std::string to_string(ModelMode m) { return m == ModelMode::ptst ? "ptst" : "tvae"; }
std::string to_string(CentersMode m) { return m == CentersMode::learnable ? "learnable" : "fixed_orthonormal"; }

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::decoder: return "decoder";
    case ParamGroup::heads: return "heads";
    case ParamGroup::centers: return "centers";
  }
  return "unknown";
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages)
    stages.push_back({{"patch_kernel", s.patch_kernel}, {"stride", s.stride}, {"channels", s.channels},
                      {"layers", s.layers}, {"heads", s.heads}, {"expansion", s.expansion}});
  j = {{"mode", to_string(c.mode)},
       {"stages", stages},
       {"input_dim", c.input_dim},
       {"num_classes", c.num_classes},
       {"latent_dim", c.latent_dim},
       {"decoder",
        {{"channels", c.decoder.channels},
         {"heads", c.decoder.heads},
         {"expansion", c.decoder.expansion},
         {"layers", c.decoder.layers},
         {"seq_len", c.decoder.seq_len},
         {"max_len", c.decoder.max_len}}},
       {"centers_mode", to_string(c.centers_mode)},
       {"isotropic_latent", c.isotropic_latent},
       {"cosine_softmax_head", c.cosine_softmax_head},
       {"cosine_softmax_init", c.cosine_softmax_init},
       {"dropout", c.dropout},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const auto mode = j.at("mode").get<std::string>();
  if (mode != "ptst" && mode != "tvae") throw std::invalid_argument("unknown model mode " + mode);
  c.mode = mode == "ptst" ? ModelMode::ptst : ModelMode::tvae;
  c.stages.clear();
  for (const auto& s : j.at("stages"))
    c.stages.push_back({s.at("patch_kernel").get<int>(), s.at("stride").get<int>(), s.at("channels").get<int>(),
                        s.at("layers").get<int>(), s.at("heads").get<int>(), s.at("expansion").get<int>()});
  c.input_dim = j.at("input_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  const auto& d = j.at("decoder");
  c.decoder = {d.at("channels").get<int>(), d.at("heads").get<int>(), d.at("expansion").get<int>(),
               d.at("layers").get<int>(), d.at("seq_len").get<int>(), d.at("max_len").get<int>()};
  const auto centers = j.at("centers_mode").get<std::string>();
  if (centers != "learnable" && centers != "fixed_orthonormal")
    throw std::invalid_argument("unknown centers mode " + centers);
  c.centers_mode = centers == "learnable" ? CentersMode::learnable : CentersMode::fixed_orthonormal;
  c.isotropic_latent = j.value("isotropic_latent", false);
  c.cosine_softmax_head = j.value("cosine_softmax_head", false);
  c.cosine_softmax_init = j.value("cosine_softmax_init", 10.0);
  c.dropout = j.value("dropout", 0.0);
  c.init_seed = j.value("init_seed", std::uint64_t{0});
}

// ---------------------------------------------------------------------------
// parameters

template <typename T>
Tensor<T> ParameterStore<T>::add(std::string name, ParamGroup group, Matrix<T> init, bool trainable) {
  for (const auto& p : params_)
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  auto t = Tensor<T>(std::move(init), trainable);
  params_.push_back({std::move(name), group, t, trainable});
  return t;
}

template <typename T>
Tensor<T> ParameterStore<T>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("no parameter named " + name);
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
std::size_t ParameterStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable) n += static_cast<std::size_t>(p.tensor.value().size());
  return n;
}

template <typename T>
Matrix<T> Initializer::xavier(int fan_in, int fan_out, int rows, int cols) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng_));
  return m;
}

template <typename T>
Matrix<T> Initializer::normal(int rows, int cols, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng_));
  return m;
}

namespace {

template <typename T>
Matrix<T> constant_matrix(int rows, int cols, double v) {
  return Matrix<T>::Constant(rows, cols, static_cast<T>(v));
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double p, std::mt19937_64* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Matrix<T> mask(x.rows(), x.cols());
  const T s = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? s : T(0);
  return ag::mul(x, Tensor<T>::constant(std::move(mask)));
}

}  // namespace

// ---------------------------------------------------------------------------
// building blocks

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& tokens, const Tensor<T>& w, const Tensor<T>& b, int batch, int time,
                      const StageConfig& cfg) {
  auto cols = ag::im2col_1d(tokens, batch, time, cfg.patch_kernel, cfg.stride, cfg.patch_kernel / 2);
  return ag::linear(cols, w, b);
}

template <typename T>
Tensor<T> conditional_position_encoding(const Tensor<T>& tokens, const Tensor<T>& w, const Tensor<T>& b, int batch,
                                        int time) {
  return ag::add(tokens, ag::depthwise_conv1d(tokens, w, b, batch, time));
}

template <typename T>
TransformerBlock<T>::TransformerBlock(ParameterStore<T>& store, Initializer& init, const std::string& prefix,
                                      ParamGroup group, int c, int h, int expansion)
    : heads(h) {
  const int hidden = c * expansion;
  const double g0 = std::sqrt(static_cast<double>(c));
  cpe_w = store.add(prefix + ".cpe.weight", group, init.normal<T>(3, c, 0.1));
  cpe_b = store.add(prefix + ".cpe.bias", group, Matrix<T>::Zero(1, c));
  norm1_g = store.add(prefix + ".norm1.g", group, constant_matrix<T>(1, 1, g0));
  qkv_w = store.add(prefix + ".attn.qkv.weight", group, init.xavier<T>(c, c, c, 3 * c));
  qkv_b = store.add(prefix + ".attn.qkv.bias", group, Matrix<T>::Zero(1, 3 * c));
  proj_w = store.add(prefix + ".attn.proj.weight", group, init.xavier<T>(c, c, c, c));
  proj_b = store.add(prefix + ".attn.proj.bias", group, Matrix<T>::Zero(1, c));
  norm2_g = store.add(prefix + ".norm2.g", group, constant_matrix<T>(1, 1, g0));
  ffd1_w = store.add(prefix + ".ffd.fc1.weight", group, init.xavier<T>(c, hidden, c, hidden));
  ffd1_b = store.add(prefix + ".ffd.fc1.bias", group, Matrix<T>::Zero(1, hidden));
  ffd2_w = store.add(prefix + ".ffd.fc2.weight", group, init.xavier<T>(hidden, c, hidden, c));
  ffd2_b = store.add(prefix + ".ffd.fc2.bias", group, Matrix<T>::Zero(1, c));
}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, int batch, int time, double dropout,
                                       std::mt19937_64* rng) const {
  auto h = conditional_position_encoding(x, cpe_w, cpe_b, batch, time);
  auto a = ag::scale_norm_rows(h, norm1_g);
  a = ag::self_attention(ag::linear(a, qkv_w, qkv_b), batch, time, heads);
  h = ag::add(h, maybe_dropout(ag::linear(a, proj_w, proj_b), dropout, rng));
  auto f = ag::scale_norm_rows(h, norm2_g);
  f = ag::linear(ag::gelu(ag::linear(f, ffd1_w, ffd1_b)), ffd2_w, ffd2_b);
  return ag::add(h, maybe_dropout(f, dropout, rng));
}

template <typename T>
PyramidStage<T>::PyramidStage(ParameterStore<T>& store, Initializer& init, const std::string& prefix,
                              int in_channels, const StageConfig& c)
    : cfg(c) {
  const int fan_in = c.patch_kernel * in_channels;
  patch_w = store.add(prefix + ".patch.weight", ParamGroup::encoder,
                      init.xavier<T>(fan_in, c.channels, fan_in, c.channels));
  patch_b = store.add(prefix + ".patch.bias", ParamGroup::encoder, Matrix<T>::Zero(1, c.channels));
  for (int l = 0; l < c.layers; ++l)
    blocks.emplace_back(store, init, prefix + ".block" + std::to_string(l), ParamGroup::encoder, c.channels,
                        c.heads, c.expansion);
  out_norm_g = store.add(prefix + ".out_norm.g", ParamGroup::encoder,
                         constant_matrix<T>(1, 1, std::sqrt(static_cast<double>(c.channels))));
}

template <typename T>
Tensor<T> PyramidStage<T>::forward(const Tensor<T>& x, int batch, int time, int& time_out, double dropout,
                                   std::mt19937_64* rng) const {
  time_out = cfg.output_length(time);
  auto h = patch_embed(x, patch_w, patch_b, batch, time, cfg);
  for (const auto& b : blocks) h = b.forward(h, batch, time_out, dropout, rng);
  return ag::scale_norm_rows(h, out_norm_g);
}

// ---------------------------------------------------------------------------
// model

template <typename T>
TvaeModel<T>::TvaeModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Initializer init(cfg_.init_seed);
  int in_c = cfg_.input_dim;
  for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
    stages_.emplace_back(store_, init, "encoder.stage" + std::to_string(i + 1), in_c, cfg_.stages[i]);
    in_c = cfg_.stages[i].channels;
  }
  const int c4 = cfg_.encoder_width();
  const int K = cfg_.num_classes;
  const int D = cfg_.latent_dim;
  head_w_ = store_.add("encoder.head.weight", ParamGroup::encoder, init.xavier<T>(c4, K, c4, K));
  head_b_ = store_.add("encoder.head.bias", ParamGroup::encoder, Matrix<T>::Zero(1, K));
  if (cfg_.mode == ModelMode::ptst) return;

  embed_y_w_ = store_.add("latent.embed_y.weight", ParamGroup::heads, init.xavier<T>(K, c4, K, c4));
  mu_w_ = store_.add("latent.mu.weight", ParamGroup::heads, init.xavier<T>(2 * c4, D, 2 * c4, D));
  mu_b_ = store_.add("latent.mu.bias", ParamGroup::heads, Matrix<T>::Zero(1, D));
  const int ls_cols = cfg_.isotropic_latent ? 1 : D;
  logstd_w_ = store_.add("latent.log_std.weight", ParamGroup::heads, init.normal<T>(2 * c4, ls_cols, 0.01));
  logstd_b_ = store_.add("latent.log_std.bias", ParamGroup::heads, Matrix<T>::Zero(1, ls_cols));

  const auto& dc = cfg_.decoder;
  dec_z_w_ = store_.add("decoder.proj_z.weight", ParamGroup::decoder, init.xavier<T>(D, dc.channels, D, dc.channels));
  dec_z_b_ = store_.add("decoder.proj_z.bias", ParamGroup::decoder, Matrix<T>::Zero(1, dc.channels));
  dec_y_w_ = store_.add("decoder.proj_y.weight", ParamGroup::decoder, init.xavier<T>(K, dc.channels, K, dc.channels));
  dec_pos_ = store_.add("decoder.pos_embed", ParamGroup::decoder, init.normal<T>(dc.max_len, dc.channels, 0.02));
  for (int l = 0; l < dc.layers; ++l)
    dec_blocks_.emplace_back(store_, init, "decoder.block" + std::to_string(l), ParamGroup::decoder, dc.channels,
                             dc.heads, dc.expansion);
  dec_out_g_ = store_.add("decoder.out_norm.g", ParamGroup::decoder,
                          constant_matrix<T>(1, 1, std::sqrt(static_cast<double>(dc.channels))));
  dec_out_w_ = store_.add("decoder.out.weight", ParamGroup::decoder,
                          init.xavier<T>(dc.channels, cfg_.input_dim, dc.channels, cfg_.input_dim));
  dec_out_b_ = store_.add("decoder.out.bias", ParamGroup::decoder, Matrix<T>::Zero(1, cfg_.input_dim));

  aux1_w_ = store_.add("aux.fc1.weight", ParamGroup::heads, init.xavier<T>(D, D, D, D));
  aux1_b_ = store_.add("aux.fc1.bias", ParamGroup::heads, Matrix<T>::Zero(1, D));
  aux2_w_ = store_.add("aux.fc2.weight", ParamGroup::heads, init.xavier<T>(D, K, D, K));
  aux2_b_ = store_.add("aux.fc2.bias", ParamGroup::heads, Matrix<T>::Zero(1, K));

  const Eigen::MatrixXd c = init_class_centers(cfg_.centers_mode, K, D, cfg_.init_seed ^ 0x9E3779B97F4A7C15ULL);
  centers_ = store_.add("centers", ParamGroup::centers, c.cast<T>(),
                        cfg_.centers_mode == CentersMode::learnable);
  if (cfg_.cosine_softmax_head)
    cos_temperature_ = store_.add("heads.cos_temperature", ParamGroup::heads,
                                  constant_matrix<T>(1, 1, cfg_.cosine_softmax_init));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> TvaeModel<T>::encode(const Tensor<T>& x, int batch, int time,
                                                     std::vector<int>* stage_lengths,
                                                     const ForwardOptions<T>* opts) const {
  if (time < 1) throw std::invalid_argument("encoder input needs at least one timestep");
  if (x.cols() != cfg_.input_dim || x.rows() != static_cast<Eigen::Index>(batch) * time)
    throw std::invalid_argument("encoder input must be [batch*time x input_dim]");
  if (!x.value().allFinite()) throw std::invalid_argument("encoder input contains non-finite values");
  const bool training = opts && opts->training;
  std::mt19937_64* rng = training && opts->noise ? opts->noise->dropout_rng : nullptr;
  Tensor<T> h = x;
  int t = time;
  for (const auto& s : stages_) {
    int t_out = 0;
    h = s.forward(h, batch, t, t_out, cfg_.dropout, rng);
    t = t_out;
    if (stage_lengths) stage_lengths->push_back(t);
  }
  auto pooled = ag::mean_over_time(h, batch, t);
  auto logits = ag::linear(pooled, head_w_, head_b_);
  return {pooled, logits};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> TvaeModel<T>::latent_heads(const Tensor<T>& pooled, const Tensor<T>& y_cond) const {
  if (cfg_.mode != ModelMode::tvae) throw std::logic_error("latent heads exist only in tvae mode");
  auto h = ag::concat_cols(pooled, ag::matmul(y_cond, embed_y_w_));
  auto mu = ag::linear(h, mu_w_, mu_b_);
  auto ls = ag::linear(h, logstd_w_, logstd_b_);
  if (cfg_.isotropic_latent) ls = ag::matmul(ls, Tensor<T>::constant(Matrix<T>::Ones(1, cfg_.latent_dim)));
  ls = ag::clamp(ls, static_cast<T>(-10), static_cast<T>(10));
  return {mu, ls};
}

template <typename T>
Tensor<T> TvaeModel<T>::decode(const Tensor<T>& z, const Tensor<T>& y_cond, int time,
                               const ForwardOptions<T>* opts) const {
  if (cfg_.mode != ModelMode::tvae) throw std::logic_error("decoder exists only in tvae mode");
  const auto& dc = cfg_.decoder;
  if (time < 1) throw std::invalid_argument("decoder needs at least one timestep");
  const int len = dc.seq_len > 0 && dc.seq_len < time ? dc.seq_len : time;
  if (len > dc.max_len)
    throw std::invalid_argument("sequence length " + std::to_string(len) + " exceeds decoder max_len " +
                                std::to_string(dc.max_len));
  const int batch = static_cast<int>(z.rows());
  const bool training = opts && opts->training;
  std::mt19937_64* rng = training && opts->noise ? opts->noise->dropout_rng : nullptr;

  auto per_record = ag::add(ag::linear(z, dec_z_w_, dec_z_b_), ag::matmul(y_cond, dec_y_w_));
  auto h = ag::add(ag::repeat_over_time(per_record, len), ag::tile_batch(ag::slice_rows(dec_pos_, 0, len), batch));
  for (const auto& b : dec_blocks_) h = b.forward(h, batch, len, cfg_.dropout, rng);
  h = ag::linear(ag::scale_norm_rows(h, dec_out_g_), dec_out_w_, dec_out_b_);
  if (len < time) h = ag::upsample_nearest(h, batch, len, time);
  return h;
}

template <typename T>
Tensor<T> TvaeModel<T>::aux_classifier(const Tensor<T>& z) const {
  return ag::linear(ag::gelu(ag::linear(z, aux1_w_, aux1_b_)), aux2_w_, aux2_b_);
}

template <typename T>
Tensor<T> TvaeModel<T>::cosine_scores(const Tensor<T>& z) const {
  return ag::matmul_nt(ag::l2_normalize_rows(z), ag::l2_normalize_rows(centers_));
}

template <typename T>
ModelOutputs<T> TvaeModel<T>::forward(const Matrix<T>& x, int batch, int time, const std::vector<int>& labels,
                                      const ForwardOptions<T>& opts) const {
  if (!labels.empty() && static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument("labels must be empty or have one entry per record");
  ModelOutputs<T> out;
  std::tie(out.pooled, out.y_logits) = encode(Tensor<T>::constant(x), batch, time, &out.stage_lengths, &opts);
  if (cfg_.mode == ModelMode::ptst) return out;

  const int K = cfg_.num_classes;
  const int D = cfg_.latent_dim;
  Matrix<T> onehot = Matrix<T>::Zero(batch, K);
  Matrix<T> relax_mask = Matrix<T>::Zero(batch, 1);
  bool any_relaxed = false;
  for (int i = 0; i < batch; ++i) {
    const int y = labels.empty() ? -1 : labels[i];
    if (y >= K) throw std::invalid_argument("label out of range");
    if (y >= 0) {
      onehot(i, y) = T(1);
    } else if (opts.training) {
      relax_mask(i, 0) = T(1);
      any_relaxed = true;
    } else {
      Eigen::Index k = 0;
      out.y_logits.value().row(i).maxCoeff(&k);
      onehot(i, k) = T(1);
    }
  }
  if (opts.training && (!opts.noise || opts.noise->eps.rows() != batch || opts.noise->eps.cols() != D))
    throw std::invalid_argument("training forward needs eps noise of shape [batch x latent_dim]");

  out.y_cond = Tensor<T>::constant(std::move(onehot));
  if (any_relaxed) {
    if (opts.noise->gumbel.rows() != batch || opts.noise->gumbel.cols() != K)
      throw std::invalid_argument("training forward needs gumbel noise of shape [batch x K]");
    if (!(opts.temperature > T(0))) throw std::invalid_argument("concrete temperature must be positive");
    auto relaxed = ag::softmax_rows(
        ag::scale(ag::add(out.y_logits, Tensor<T>::constant(opts.noise->gumbel)), T(1) / opts.temperature));
    out.y_cond = ag::add(out.y_cond, ag::mul_col(relaxed, Tensor<T>::constant(std::move(relax_mask))));
  }

  std::tie(out.mean, out.log_std) = latent_heads(out.pooled, out.y_cond);
  out.z = opts.training ? ag::add(out.mean, ag::mul(ag::exp(out.log_std), Tensor<T>::constant(opts.noise->eps)))
                        : out.mean;
  out.z_logits = aux_classifier(out.z);
  out.cos_scores = cosine_scores(out.z);
  out.centers = centers_;
  out.cos_temperature = cos_temperature_;

  if (opts.all_class_posteriors) {
    for (int k = 0; k < K; ++k) {
      Matrix<T> e = Matrix<T>::Zero(batch, K);
      e.col(k).setOnes();
      auto [m, s] = latent_heads(out.pooled, Tensor<T>::constant(std::move(e)));
      out.class_means.push_back(m);
      out.class_log_stds.push_back(s);
    }
  }
  if (opts.decode) out.x_hat = decode(out.z, out.y_cond, time, &opts);
  return out;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd init_class_centers(CentersMode mode, int K, int D, std::uint64_t seed) {
  if (K < 1 || D < 1) throw std::invalid_argument("class centers need K, D >= 1");
  if (mode == CentersMode::fixed_orthonormal && K > D)
    throw std::invalid_argument("fixed orthonormal centers need K <= D (K=" + std::to_string(K) +
                                ", D=" + std::to_string(D) + ")");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(K, D);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  if (mode == CentersMode::learnable) {
    m.rowwise().normalize();
    return m;
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m.transpose());
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(D, K);
  // make the factorization unique: positive diagonal of R
  const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(K, K);
  for (int k = 0; k < K; ++k)
    if (r(k, k) < 0) q.col(k) *= -1.0;
  return q.transpose();
}

Eigen::VectorXd scale_norm(const Eigen::VectorXd& h, double g) {
  return g * h / std::max(h.norm(), 1e-12);
}

Eigen::VectorXd cosine_scores(const Eigen::VectorXd& z, const Eigen::MatrixXd& centers) {
  if (centers.cols() != z.size()) throw std::invalid_argument("cosine_scores: dimension mismatch");
  const double zn = std::max(z.norm(), 1e-12);
  Eigen::VectorXd s(centers.rows());
  for (Eigen::Index k = 0; k < centers.rows(); ++k)
    s[k] = centers.row(k).dot(z) / (zn * std::max(centers.row(k).norm(), 1e-12));
  return s;
}

#define PTST_INSTANTIATE_MODEL(T)                                                                           \
  template class ParameterStore<T>;                                                                         \
  template struct TransformerBlock<T>;                                                                      \
  template struct PyramidStage<T>;                                                                          \
  template class TvaeModel<T>;                                                                              \
  template Matrix<T> Initializer::xavier<T>(int, int, int, int);                                            \
  template Matrix<T> Initializer::normal<T>(int, int, double);                                              \
  template Tensor<T> patch_embed(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int,            \
                                 const StageConfig&);                                                       \
  template Tensor<T> conditional_position_encoding(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                                   int);

PTST_INSTANTIATE_MODEL(float)
PTST_INSTANTIATE_MODEL(double)

}  // namespace ptst
