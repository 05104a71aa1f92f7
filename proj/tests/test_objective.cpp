#include <cmath>
#include <random>

#include "doctest.h"
#include "ptst/objective.hpp"
#include "support.hpp"

using namespace ptst;
using Tensor = ag::Tensor<double>;
using Mat = ag::Matrix<double>;

namespace {

Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Hand-built outputs for objective-only tests.
ModelOutputs<double> fake_outputs(std::mt19937_64& rng, int B, int K, int D, int rows, int F) {
  ModelOutputs<double> o;
  o.y_logits = Tensor::parameter(random_mat(rng, B, K));
  o.z_logits = Tensor::parameter(random_mat(rng, B, K));
  o.z = Tensor::parameter(random_mat(rng, B, D));
  o.centers = Tensor::parameter(random_mat(rng, K, D));
  o.cos_scores = ag::matmul_nt(ag::l2_normalize_rows(o.z), ag::l2_normalize_rows(o.centers));
  o.x_hat = Tensor::parameter(random_mat(rng, rows, F));
  for (int k = 0; k < K; ++k) {
    o.class_means.push_back(Tensor::parameter(random_mat(rng, B, D)));
    o.class_log_stds.push_back(Tensor::parameter(random_mat(rng, B, D, 0.3)));
  }
  o.cos_temperature = Tensor::parameter(Mat::Constant(1, 1, 4.0));
  return o;
}

ObjectiveResult<double> model_objective(const std::string& name, const std::vector<int>& labels, long step,
                                        long total, std::uint64_t seed = 1) {
  auto s = support::tiny_setup(name, labels, seed);
  const TvaeModel<double> model(s.model_cfg);
  const auto out = model.forward(s.x, s.batch, s.time, s.labels, support::train_opts(s));
  return compute_objective(s.x, s.labels, out, s.obj, {step, total});
}

}  // namespace

TEST_CASE("recon_loss") {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd x = random_mat(rng, 5, 3);
  CHECK(recon_loss(x, x) == 0.0);
  CHECK(recon_loss(x, x.array() + 1.0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(recon_loss(x, Eigen::MatrixXd::Zero(5, 2)), std::invalid_argument);
  for (int t = 0; t < 20; ++t) {
    const Eigen::MatrixXd a = random_mat(rng, 4, 6), b = random_mat(rng, 4, 6);
    double s = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 6; ++j) s += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
    CHECK(recon_loss(a, b) == doctest::Approx(s / 24).epsilon(1e-12));
  }
}

TEST_CASE("cosine_loss") {
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(3, 3);
  CHECK(cosine_loss(I.row(1).transpose(), I, 1, 0.0) == doctest::Approx(0.0));
  Eigen::MatrixXd two(2, 2);
  two << 1, 0, 0.5, std::sqrt(0.75);
  CHECK(cosine_loss(Eigen::Vector2d(1, 0), two, 0, 0.2) == doctest::Approx(0.3));
  Eigen::MatrixXd c(2, 3);
  c << 1, 0, 0, 0, 1, 0;
  CHECK(cosine_loss(Eigen::Vector3d(0, 0, 1), c, 0, 0.0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(cosine_loss(Eigen::Vector3d(0, 0, 1), c, 2, 0.0), std::invalid_argument);

  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    const Eigen::VectorXd z = random_mat(rng, 5, 1);
    const Eigen::MatrixXd C = random_mat(rng, 4, 5);
    const double m = std::uniform_real_distribution<double>(0, 1)(rng);
    for (int y = 0; y < 4; ++y) CHECK(cosine_loss(z, C, y, m) >= 0);
    // soft weights are the expectation of hard-label losses
    Eigen::VectorXd w = random_mat(rng, 4, 1).array().abs();
    w /= w.sum();
    double expect = 0;
    for (int y = 0; y < 4; ++y) expect += w[y] * cosine_loss(z, C, y, m);
    CHECK(cosine_loss(z, C, w, m) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("schedules") {
  CHECK(gamma2_schedule(0, 100, Gamma2Mode::cosine) == 0.0);
  CHECK(gamma2_schedule(100, 100, Gamma2Mode::cosine) == doctest::Approx(1.0));
  CHECK(gamma2_schedule(50, 100, Gamma2Mode::cosine) == doctest::Approx(0.5));
  CHECK(gamma2_schedule(7, 0, Gamma2Mode::cosine) == 1.0);
  CHECK(gamma2_schedule(13, 100, Gamma2Mode::constant, 0.4) == 0.4);
  double prev = -1;
  for (long s = 0; s <= 1000; ++s) {
    const double g = gamma2_schedule(s, 1000, Gamma2Mode::cosine);
    CHECK(g >= prev);
    prev = g;
  }
  CHECK(concrete_temperature(0, 10, 1.0, 0.5) == 1.0);
  CHECK(concrete_temperature(10, 10, 1.0, 0.5) == doctest::Approx(0.5));
  CHECK(concrete_temperature(5, 10, 1.0, 0.5) == doctest::Approx(std::sqrt(0.5)));
  CHECK(kl_anneal_weight(0, 90, 1.0 / 3) == 0.0);
  CHECK(kl_anneal_weight(15, 90, 1.0 / 3) == doctest::Approx(0.5));
  CHECK(kl_anneal_weight(30, 90, 1.0 / 3) == doctest::Approx(1.0));
  CHECK(kl_anneal_weight(80, 90, 1.0 / 3) == 1.0);
}

TEST_CASE("presets") {
  const auto names = preset_names();
  CHECK(names.size() == 15);
  for (const auto& n : names) CHECK_NOTHROW(preset(n).objective.validate());
  CHECK_THROWS_AS(preset("VIII"), std::invalid_argument);
  CHECK_THROWS_AS(preset("dkl"), std::invalid_argument);

  // preset toggle matrix: ce_z, kl const, kl sched, cos with GT, learnable centers, kl_ycos
  struct Row {
    const char* name;
    bool ce_z, kl_const, kl_sched, cos_gt, learnable, kl_ycos;
  };
  const Row table[] = {{"I", 0, 0, 0, 1, 1, 0},  {"II", 1, 0, 0, 1, 1, 0}, {"III", 1, 1, 0, 1, 1, 0},
                       {"IV", 1, 0, 1, 0, 1, 0}, {"V", 1, 0, 1, 1, 0, 0},  {"VI", 1, 0, 1, 1, 1, 1},
                       {"VII", 1, 0, 1, 1, 1, 0}};
  for (const auto& r : table) {
    CAPTURE(r.name);
    const auto p = preset(r.name);
    const auto& o = p.objective;
    CHECK(o.ce_on_x);
    CHECK(o.ce_on_z == r.ce_z);
    CHECK(o.kl_yz_yx == (r.kl_const || r.kl_sched));
    if (o.kl_yz_yx) CHECK((o.gamma2_mode == Gamma2Mode::constant) == r.kl_const);
    CHECK(o.cos_with_ground_truth == r.cos_gt);
    CHECK(o.learnable_centers == r.learnable);
    CHECK((p.centers == CentersMode::learnable) == r.learnable);
    CHECK(o.kl_ycos_yx == r.kl_ycos);
    CHECK(p.cosine_softmax_head == r.kl_ycos);
    CHECK_FALSE(o.use_dkl_gaussian_instead_of_cos);
  }

  const auto dl = preset("dkl-learnable");
  CHECK(dl.objective.use_dkl_gaussian_instead_of_cos);
  CHECK(dl.objective.kl_anneal);
  CHECK(dl.isotropic_latent);
  CHECK_FALSE(dl.objective.ce_on_z);
  CHECK(preset("dkl-learnable-full").objective.ce_on_z);
  CHECK(preset("dkl-learnable-full").objective.kl_yz_yx);
  CHECK_FALSE(preset("dkl-fixed").objective.kl_anneal);
  CHECK(preset("cos-fixed-part").centers == CentersMode::fixed_orthonormal);
  CHECK_FALSE(preset("cos-learnable").objective.use_dkl_gaussian_instead_of_cos);
}

TEST_CASE("objective config") {
  ObjectiveConfig c;
  c.gamma1 = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.margin = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = preset("VI").objective;
  c.prior_y = PriorY::empirical;
  c.prior_probs = {0.2, 0.3, 0.5};
  nlohmann::json j = c;
  CHECK(j.get<ObjectiveConfig>() == c);
}

TEST_CASE("tampered objective examples") {
  SUBCASE("column VII on a labelled batch: all six components nonzero") {
    const auto r = model_objective("VII", {0, 2, 1}, 10, 100);
    const auto& t = r.breakdown.terms;
    for (double v : {t.recon, t.cos_or_kl_z, t.ce_yx, t.ce_yz, t.kl_yz_yx, t.kl_yx_prior}) CHECK(v != 0.0);
    CHECK(r.breakdown.n_labelled == 3);
  }
  SUBCASE("unlabelled batch drops both CE terms") {
    const auto r = model_objective("VII", {-1, -1}, 10, 100);
    CHECK(r.breakdown.terms.ce_yx == 0.0);
    CHECK(r.breakdown.terms.ce_yz == 0.0);
    CHECK(r.breakdown.n_labelled == 0);
    CHECK(r.breakdown.n_unlabelled == 2);
  }
  SUBCASE("only recon and cos remain when the other weights vanish") {
    auto s = support::tiny_setup("VII", {1, -1}, 4);
    s.obj.gamma1 = 0;
    s.obj.gamma2_mode = Gamma2Mode::constant;
    s.obj.gamma2_constant = 0;
    s.obj.categorical_prior_kl = false;
    const TvaeModel<double> model(s.model_cfg);
    const auto out = model.forward(s.x, s.batch, s.time, s.labels, support::train_opts(s));
    const auto r = tampered_objective(s.x, s.labels, out, s.obj, {3, 10});
    const auto c = support::components_oracle(s.x, s.labels, out, s.obj);
    CHECK(r.breakdown.total == doctest::Approx(c.recon + c.cos_or_kl_z).epsilon(1e-12));
  }
  SUBCASE("label out of range") {
    std::mt19937_64 rng(5);
    const auto o = fake_outputs(rng, 2, 3, 4, 6, 2);
    CHECK_THROWS_AS(tampered_objective(Mat(random_mat(rng, 6, 2)), {0, 3}, o, ObjectiveConfig{}, {}),
                    std::invalid_argument);
  }
}

TEST_CASE("baseline objective examples") {
  std::mt19937_64 rng(6);
  const int B = 2, K = 3, D = 4;
  auto o = fake_outputs(rng, B, K, D, 4, 2);
  const Mat x = random_mat(rng, 4, 2);
  ObjectiveConfig cfg = preset("dkl-fixed").objective;

  SUBCASE("posterior equal to its class component gives zero") {
    for (int k = 0; k < K; ++k) {
      Mat m(B, D);
      m.rowwise() = o.centers.value().row(k);
      o.class_means[k] = Tensor::constant(m);
      o.class_log_stds[k] = Tensor::constant(Mat::Zero(B, D));
    }
    const auto r = baseline_objective(x, {0, 2}, o, cfg, {});
    CHECK(r.breakdown.terms.cos_or_kl_z == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  }
  SUBCASE("standard normal against orthonormal centers gives 0.5") {
    Mat C = Mat::Zero(K, D);
    for (int k = 0; k < K; ++k) C(k, k) = 1;
    o.centers = Tensor::constant(C);
    for (int k = 0; k < K; ++k) {
      o.class_means[k] = Tensor::constant(Mat::Zero(B, D));
      o.class_log_stds[k] = Tensor::constant(Mat::Zero(B, D));
    }
    CHECK(baseline_objective(x, {1, 0}, o, cfg, {}).breakdown.terms.cos_or_kl_z == doctest::Approx(0.5));
    CHECK(baseline_objective(x, {-1, -1}, o, cfg, {}).breakdown.terms.cos_or_kl_z == doctest::Approx(0.5));
  }
  SUBCASE("random setup matches the per-component oracle") {
    for (int trial = 0; trial < 20; ++trial) {
      auto r = fake_outputs(rng, B, K, D, 4, 2);
      const std::vector<int> labels = {trial % 2 ? -1 : 1, -1};
      const auto res = baseline_objective(x, labels, r, cfg, {});
      const auto c = support::components_oracle(x, labels, r, cfg);
      CHECK(res.breakdown.terms.cos_or_kl_z == doctest::Approx(c.cos_or_kl_z).epsilon(1e-10));
      CHECK(res.breakdown.terms.cos_or_kl_z >= 0);
    }
  }
  SUBCASE("needs per-class posteriors") {
    o.class_means.clear();
    CHECK_THROWS_AS(baseline_objective(x, {0, 1}, o, cfg, {}), std::invalid_argument);
  }
}

TEST_CASE("loss ledger matches the oracle for every preset and label mix") {
  const std::vector<std::vector<int>> mixes = {{0, 1, 2}, {-1, -1, -1}, {2, -1, 0}};
  for (const auto& name : preset_names()) {
    for (std::size_t m = 0; m < mixes.size(); ++m) {
      CAPTURE(name);
      CAPTURE(m);
      auto s = support::tiny_setup(name, mixes[m], 10 + m);
      const TvaeModel<double> model(s.model_cfg);
      const auto out = model.forward(s.x, s.batch, s.time, s.labels, support::train_opts(s));
      const long step = 37, total = 120;
      const auto r = compute_objective(s.x, s.labels, out, s.obj, {step, total});
      const auto terms = support::components_oracle(s.x, s.labels, out, s.obj);
      const auto w = support::weights_oracle(s.obj, step, total, r.breakdown.n_labelled);
      CHECK(std::abs(r.breakdown.total - terms.weighted_sum(w)) < 1e-6);
      CHECK(std::abs(r.breakdown.total - r.breakdown.terms.weighted_sum(r.breakdown.weights)) < 1e-9);
      CHECK(r.breakdown.total == r.total.item());
      const auto& t = r.breakdown.terms;
      for (double v : {t.kl_yz_yx, t.kl_ycos_yx, t.kl_yx_prior}) CHECK(v >= 0);
    }
  }
}

TEST_CASE("hidden labels never reach the objective") {
  // The trainer passes -1 for masked records, so two batches that differ
  // only in a hidden label produce identical labels and identical losses.
  auto a = support::tiny_setup("VII", {0, -1}, 20);
  const TvaeModel<double> model(a.model_cfg);
  const auto out = model.forward(a.x, a.batch, a.time, a.labels, support::train_opts(a));
  const auto r1 = compute_objective(a.x, a.labels, out, a.obj, {5, 50});
  const auto r2 = compute_objective(a.x, a.labels, out, a.obj, {5, 50});
  CHECK(r1.breakdown.total == r2.breakdown.total);
  // a revealed label does change it
  const std::vector<int> revealed = {0, 2};
  const auto out2 = model.forward(a.x, a.batch, a.time, revealed, support::train_opts(a));
  CHECK(compute_objective(a.x, revealed, out2, a.obj, {5, 50}).breakdown.total != r1.breakdown.total);
}

TEST_CASE("classifier objective") {
  std::mt19937_64 rng(7);
  const auto o = fake_outputs(rng, 3, 4, 2, 3, 1);
  const auto r = classifier_objective<double>({1, -1, 3}, o);
  const Mat& l = o.y_logits.value();
  const double ce = -(std::log(support::softmax_row(l, 0)[1]) + std::log(support::softmax_row(l, 2)[3])) / 2;
  CHECK(r.breakdown.total == doctest::Approx(ce).epsilon(1e-12));
  CHECK(classifier_objective<double>({-1, -1, -1}, o).breakdown.total == 0.0);
}

TEST_CASE("full objective gradient on the tiny model") {
  for (const char* name : {"VII", "VI", "dkl-learnable-full"}) {
    CAPTURE(name);
    auto s = support::tiny_setup(name, {1, -1}, 30);
    TvaeModel<double> model(s.model_cfg);
    const auto checks = support::check_gradients(model, [&] {
      const auto out = model.forward(s.x, s.batch, s.time, s.labels, support::train_opts(s));
      return compute_objective(s.x, s.labels, out, s.obj, {40, 100}).total;
    });
    for (const auto& c : checks) {
      CAPTURE(c.name);
      CHECK(c.rel_error < 1e-4);
    }
  }
}
