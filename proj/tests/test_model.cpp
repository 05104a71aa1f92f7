#include <cmath>
#include <random>

#include "doctest.h"
#include "ptst/model.hpp"
#include "ptst/objective.hpp"
#include "support.hpp"

using namespace ptst;
using Tensor = ag::Tensor<double>;
using Mat = ag::Matrix<double>;
using support::MatD;

namespace {

Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

int ceil_div_pow2(int t, int i) { return (t + (1 << i) - 1) >> i; }

// Central-difference check of d(sum(R .* f(x))) / dx for a tensor input.
double input_fd_error(Mat x, const std::function<Tensor(const Tensor&)>& f, std::uint64_t seed = 3) {
  Tensor leaf(x, true);
  auto out = f(leaf);
  std::mt19937_64 rng(seed);
  const Mat R = random_mat(rng, out.rows(), out.cols());
  ag::sum(ag::mul(out, Tensor::constant(R))).backward();
  const Mat analytic = leaf.grad();
  auto value = [&](const Mat& v) { return (f(Tensor::constant(v)).value().array() * R.array()).sum(); };
  Mat fd(x.rows(), x.cols());
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double o = x.data()[i];
    x.data()[i] = o + h;
    const double up = value(x);
    x.data()[i] = o - h;
    const double down = value(x);
    x.data()[i] = o;
    fd.data()[i] = (up - down) / (2 * h);
  }
  return (analytic - fd).norm() / std::max(analytic.norm() + fd.norm(), 1e-12);
}

}  // namespace

TEST_CASE("config validation") {
  StageConfig s;
  s.patch_kernel = 1;
  s.stride = 2;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = {};
  s.channels = 10;
  s.heads = 3;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  ModelConfig m;
  m.centers_mode = CentersMode::fixed_orthonormal;
  m.latent_dim = 3;
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  CHECK_NOTHROW(ModelConfig{}.validate());
  CHECK_NOTHROW(ModelConfig::tiny().validate());

  nlohmann::json j = ModelConfig::tiny();
  CHECK(j.get<ModelConfig>() == ModelConfig::tiny());
}

TEST_CASE("pyramid lengths are ceil(T / 2^i)") {
  for (int T : {1, 2, 16, 17, 64, 73, 100}) {
    int t = T;
    for (int i = 1; i <= 4; ++i) {
      t = StageConfig{}.output_length(t);
      CHECK(t == ceil_div_pow2(T, i));
    }
  }
  auto cfg = ModelConfig::tiny();
  cfg.mode = ModelMode::ptst;
  const TvaeModel<double> model(cfg);
  std::mt19937_64 rng(1);
  for (int T : {16, 17, 64, 73}) {
    const auto out = model.forward(random_mat(rng, 2 * T, cfg.input_dim), 2, T, {}, {});
    REQUIRE(out.stage_lengths.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(out.stage_lengths[i] == ceil_div_pow2(T, i + 1));
  }
}

TEST_CASE("scale_norm") {
  const Eigen::Vector2d h(3, 4);
  CHECK(scale_norm(h, 1).isApprox(Eigen::Vector2d(0.6, 0.8)));
  CHECK(scale_norm(h, 2).isApprox(Eigen::Vector2d(1.2, 1.6)));
  CHECK(scale_norm(Eigen::Vector2d(0.6, 0.8), 1).isApprox(Eigen::Vector2d(0.6, 0.8)));
  CHECK(scale_norm(Eigen::Vector2d::Zero(), 1).isZero());
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const Eigen::VectorXd v = random_mat(rng, 7, 1);
    const double g = std::normal_distribution<double>(0, 3)(rng);
    CHECK(scale_norm(v, g).norm() == doctest::Approx(std::abs(g)).epsilon(1e-9));
  }
  // row-wise op agrees with the vector version
  const Mat rows = random_mat(rng, 4, 5);
  const auto out = ag::scale_norm_rows(Tensor::constant(rows), Tensor::constant(Mat::Constant(1, 1, 1.7))).value();
  for (int r = 0; r < 4; ++r) CHECK(out.row(r).transpose().isApprox(scale_norm(rows.row(r).transpose(), 1.7)));
}

TEST_CASE("patch embedding") {
  std::mt19937_64 rng(3);
  SUBCASE("matches direct convolution") {
    for (int T : {1, 2, 7, 16}) {
      const int B = 2, Cin = 3, C = 4;
      const Mat x = random_mat(rng, B * T, Cin), w = random_mat(rng, 3 * Cin, C), b = random_mat(rng, 1, C);
      const StageConfig cfg{3, 2, C, 1, 1, 1};
      const auto y = patch_embed(Tensor::constant(x), Tensor::constant(w), Tensor::constant(b), B, T, cfg).value();
      const int Tout = cfg.output_length(T);
      REQUIRE(y.rows() == B * Tout);
      for (int r = 0; r < B; ++r)
        CHECK(y.middleRows(r * Tout, Tout).isApprox(
            support::conv1d_direct(x.middleRows(r * T, T), w, b, 3, 2), 1e-12));
    }
  }
  SUBCASE("centre-only kernel at stride 1 is a per-position linear map") {
    const int T = 6, Cin = 3, C = 2;
    const Mat x = random_mat(rng, T, Cin), M = random_mat(rng, Cin, C), b = random_mat(rng, 1, C);
    Mat w = Mat::Zero(3 * Cin, C);
    w.middleRows(Cin, Cin) = M;
    const auto y = patch_embed(Tensor::constant(x), Tensor::constant(w), Tensor::constant(b), 1, T,
                               StageConfig{3, 1, C, 1, 1, 1})
                       .value();
    CHECK(y.isApprox((x * M).rowwise() + b.row(0)));
  }
}

TEST_CASE("conditional position encoding") {
  std::mt19937_64 rng(4);
  const int B = 2, T = 9, C = 3;
  const Mat x = random_mat(rng, B * T, C);
  const auto zero = conditional_position_encoding(Tensor::constant(x), Tensor::constant(Mat::Zero(3, C)),
                                                  Tensor::constant(Mat::Zero(1, C)), B, T);
  CHECK(zero.value() == x);

  const Mat w = random_mat(rng, 3, C), b = random_mat(rng, 1, C);
  const auto y = conditional_position_encoding(Tensor::constant(x), Tensor::constant(w), Tensor::constant(b), B, T)
                     .value();
  for (int r = 0; r < B; ++r)
    CHECK(y.middleRows(r * T, T).isApprox(x.middleRows(r * T, T) + support::depthwise_direct(x.middleRows(r * T, T), w, b),
                                          1e-12));

  Mat flat = Mat::Zero(T, C);
  flat.rowwise() = random_mat(rng, 1, C).row(0);
  const auto f =
      conditional_position_encoding(Tensor::constant(flat), Tensor::constant(w), Tensor::constant(b), 1, T).value();
  for (int t = 2; t < T - 1; ++t) CHECK(f.row(t).isApprox(f.row(1)));
}

TEST_CASE("encoder shapes and batch independence") {
  ModelConfig cfg;
  cfg.mode = ModelMode::ptst;
  cfg.input_dim = 8;
  const TvaeModel<float> model(cfg);
  std::mt19937_64 rng(5);
  const ag::Matrix<float> x = random_mat(rng, 2 * 64, 8).cast<float>();
  const auto [pooled, logits] = model.encode(ag::Tensor<float>::constant(x), 2, 64);
  CHECK(pooled.rows() == 2);
  CHECK(pooled.cols() == 256);
  CHECK(logits.cols() == cfg.num_classes);

  const TvaeModel<double> tiny(ModelConfig::tiny());
  const Mat one = random_mat(rng, 16, 4);
  Mat three(48, 4);
  three << random_mat(rng, 16, 4), one, one;
  const auto a = tiny.forward(three, 3, 16, {}, {});
  const auto b = tiny.forward(one, 1, 16, {}, {});
  CHECK(a.y_logits.value().row(1).isApprox(b.y_logits.value().row(0), 1e-12));
  CHECK(a.y_logits.value().row(1).isApprox(a.y_logits.value().row(2), 1e-12));
  CHECK(a.x_hat.value().middleRows(16, 16).isApprox(b.x_hat.value(), 1e-12));

  Mat bad = one;
  bad(3, 1) = std::nan("");
  CHECK_THROWS_AS(tiny.forward(bad, 1, 16, {}, {}), std::invalid_argument);
  CHECK_THROWS_AS(tiny.forward(one, 2, 16, {}, {}), std::invalid_argument);
}

TEST_CASE("full model output shapes") {
  ModelConfig cfg;
  cfg.input_dim = 8;
  const TvaeModel<float> model(cfg);
  std::mt19937_64 rng(6);
  const auto out = model.forward(random_mat(rng, 2 * 64, 8).cast<float>(), 2, 64, {}, {});
  CHECK(out.mean.cols() == 256);
  CHECK(out.z_logits.rows() == 2);
  CHECK(out.z_logits.cols() == 5);
  CHECK(out.x_hat.rows() == 128);
  CHECK(out.x_hat.cols() == 8);
  CHECK(out.cos_scores.value().cwiseAbs().maxCoeff() <= 1.0F + 1e-6F);
}

TEST_CASE("encoder gradient w.r.t. input") {
  const TvaeModel<double> model(ModelConfig::tiny());
  std::mt19937_64 rng(7);
  CHECK(input_fd_error(random_mat(rng, 2 * 16, 4), [&](const Tensor& x) {
          return ag::mean(model.encode(x, 2, 16).second);
        }) < 1e-4);
}

TEST_CASE("latent heads") {
  const TvaeModel<double> model(ModelConfig::tiny());
  std::mt19937_64 rng(8);
  const Mat pooled = random_mat(rng, 2, 8);
  Mat y1 = Mat::Zero(2, 3), y2 = Mat::Zero(2, 3);
  y1.col(0).setOnes();
  y2.col(2).setOnes();
  const auto [m1, s1] = model.latent_heads(Tensor::constant(pooled), Tensor::constant(y1));
  const auto [m2, s2] = model.latent_heads(Tensor::constant(pooled), Tensor::constant(y2));
  CHECK((m1.value() - m2.value()).norm() > 0);
  CHECK(m1.cols() == 16);

  CHECK(input_fd_error(pooled, [&](const Tensor& p) {
          auto [m, s] = model.latent_heads(p, Tensor::constant(y1));
          return ag::concat_cols(m, s);
        }) < 1e-4);
  Mat soft = random_mat(rng, 2, 3).array().abs();
  CHECK(input_fd_error(soft, [&](const Tensor& y) {
          auto [m, s] = model.latent_heads(Tensor::constant(pooled), y);
          return ag::concat_cols(m, s);
        }) < 1e-4);

  SUBCASE("zero heads give the bias") {
    TvaeModel<double> z(ModelConfig::tiny());
    for (const char* n : {"latent.mu.weight", "latent.log_std.weight"})
      z.parameters().find(n).mutable_value().setZero();
    z.parameters().find("latent.mu.bias").mutable_value().setConstant(0.25);
    const auto [m, s] = z.latent_heads(Tensor::constant(random_mat(rng, 3, 8)), Tensor::constant(Mat::Ones(3, 3)));
    CHECK((m.value().array() == 0.25).all());
    CHECK(s.value().isZero());
  }
  SUBCASE("isotropic mode shares one scale") {
    auto cfg = ModelConfig::tiny();
    cfg.isotropic_latent = true;
    const TvaeModel<double> iso(cfg);
    const auto [m, s] = iso.latent_heads(Tensor::constant(pooled), Tensor::constant(y1));
    for (int r = 0; r < 2; ++r) CHECK((s.value().row(r).array() == s.value()(r, 0)).all());
  }
}

TEST_CASE("decoder") {
  const TvaeModel<double> model(ModelConfig::tiny());
  std::mt19937_64 rng(9);
  Mat y = Mat::Zero(2, 3);
  y.col(1).setOnes();
  const Mat z = random_mat(rng, 2, 16);
  const auto out = model.decode(Tensor::constant(z), Tensor::constant(y), 16).value();
  CHECK(out.rows() == 32);
  CHECK(out.cols() == 4);
  CHECK((out.topRows(16) - out.bottomRows(16)).norm() > 0);
  CHECK_THROWS_AS(model.decode(Tensor::constant(z), Tensor::constant(y), 65), std::invalid_argument);

  const Mat x = random_mat(rng, 32, 4);
  CHECK(input_fd_error(z, [&](const Tensor& zz) {
          auto d = ag::sub(model.decode(zz, Tensor::constant(y), 16), Tensor::constant(x));
          return ag::mean(ag::square(d));
        }) < 1e-4);

  SUBCASE("shorter decoder length is upsampled") {
    auto cfg = ModelConfig::tiny();
    cfg.decoder.seq_len = 4;
    const TvaeModel<double> short_model(cfg);
    const auto o = short_model.decode(Tensor::constant(z), Tensor::constant(y), 16).value();
    CHECK(o.rows() == 32);
    for (int t = 0; t < 16; ++t) CHECK(o.row(t) == o.row(t / 4 * 4));
  }
}

TEST_CASE("auxiliary classifier") {
  const TvaeModel<double> model(ModelConfig::tiny());
  std::mt19937_64 rng(10);
  const Mat z = random_mat(rng, 2, 16);
  const auto a = model.aux_classifier(Tensor::constant(z)).value();
  CHECK(a.rows() == 2);
  CHECK(a.cols() == 3);
  CHECK(a == model.aux_classifier(Tensor::constant(z)).value());
  CHECK(input_fd_error(z, [&](const Tensor& zz) { return model.aux_classifier(zz); }) < 1e-4);
}

TEST_CASE("cosine scores") {
  std::mt19937_64 rng(11);
  const Eigen::MatrixXd fixed = init_class_centers(CentersMode::fixed_orthonormal, 5, 256, 1);
  CHECK((fixed * fixed.transpose() - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(init_class_centers(CentersMode::fixed_orthonormal, 5, 256, 1) == fixed);
  CHECK_THROWS_AS(init_class_centers(CentersMode::fixed_orthonormal, 5, 4, 1), std::invalid_argument);
  const auto s0 = cosine_scores(fixed.row(0).transpose(), fixed);
  CHECK(s0[0] == doctest::Approx(1.0));
  for (int k = 1; k < 5; ++k) CHECK(s0[k] == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));

  const Eigen::MatrixXd learn = init_class_centers(CentersMode::learnable, 4, 6, 2);
  for (int k = 0; k < 4; ++k) CHECK(learn.row(k).norm() == doctest::Approx(1.0));

  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::VectorXd z = random_mat(rng, 6, 1);
    const Eigen::MatrixXd C = random_mat(rng, 4, 6);
    const auto s = cosine_scores(z, C);
    for (int k = 0; k < 4; ++k) {
      double dot = 0, nz = 0, nc = 0;
      for (int d = 0; d < 6; ++d) {
        dot += z[d] * C(k, d);
        nz += z[d] * z[d];
        nc += C(k, d) * C(k, d);
      }
      CHECK(s[k] == doctest::Approx(dot / std::sqrt(nz * nc)).epsilon(1e-6));
      CHECK(std::abs(s[k]) <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("fixed centers are frozen, learnable ones train") {
  auto cfg = ModelConfig::tiny();
  cfg.centers_mode = CentersMode::fixed_orthonormal;
  const TvaeModel<double> fixed(cfg);
  bool found = false;
  for (const auto& p : fixed.parameters().all())
    if (p.name == "centers") {
      found = true;
      CHECK_FALSE(p.trainable);
      const Mat c = p.tensor.value();
      CHECK((c * c.transpose() - Mat::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-6);
    }
  CHECK(found);
  const TvaeModel<double> learn(ModelConfig::tiny());
  for (const auto& p : learn.parameters().all())
    if (p.name == "centers") CHECK(p.trainable);
}

TEST_CASE("training forward: relaxed class vector and noise") {
  auto s = support::tiny_setup("VII", {1, -1, -1}, 3);
  const TvaeModel<double> model(s.model_cfg);
  const auto out = model.forward(s.x, s.batch, s.time, s.labels, support::train_opts(s));
  const Mat& y = out.y_cond.value();
  CHECK(y(0, 1) == 1.0);
  CHECK(y.row(0).sum() == 1.0);
  for (int r = 1; r < 3; ++r) {
    CHECK(y.row(r).sum() == doctest::Approx(1.0));
    CHECK(y.row(r).minCoeff() >= 0);
  }
  CHECK(out.z.value().isApprox(out.mean.value() + (out.log_std.value().array().exp() * s.noise.eps.array()).matrix()));
  CHECK(out.cos_scores.value().cwiseAbs().maxCoeff() <= 1.0 + 1e-12);

  const auto eval = model.forward(s.x, s.batch, s.time, {}, {});
  CHECK(eval.z.value() == eval.mean.value());
  for (int r = 0; r < 3; ++r) CHECK(eval.y_cond.value().row(r).maxCoeff() == 1.0);
  CHECK_THROWS_AS(model.forward(s.x, s.batch, s.time, s.labels, ForwardOptions<double>{.training = true}),
                  std::invalid_argument);
}

TEST_CASE("parameter store") {
  ParameterStore<double> store;
  store.add("a", ParamGroup::encoder, Mat::Zero(2, 3));
  store.add("b", ParamGroup::centers, Mat::Zero(1, 4), false);
  CHECK(store.trainable_count() == 6);
  CHECK_THROWS(store.add("a", ParamGroup::heads, Mat::Zero(1, 1)));
  CHECK_THROWS_AS(store.find("missing"), std::out_of_range);

  // same seed -> identical float and double initial values
  auto cfg = ModelConfig::tiny();
  cfg.init_seed = 42;
  const TvaeModel<float> f(cfg);
  const TvaeModel<double> d(cfg);
  for (std::size_t i = 0; i < f.parameters().all().size(); ++i)
    CHECK(f.parameters().all()[i].tensor.value().cast<double>().isApprox(
        d.parameters().all()[i].tensor.value().cast<float>().cast<double>()));
}
