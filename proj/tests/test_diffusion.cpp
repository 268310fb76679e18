#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "xmd/diffusion.hpp"

using namespace xmd;

namespace {
VectorXd vec(std::initializer_list<double> vals) {
  VectorXd v(static_cast<Eigen::Index>(vals.size()));
  int i = 0;
  for (double x : vals) v[i++] = x;
  return v;
}

constexpr double kPi = 3.14159265358979323846;
}  // namespace

TEST_CASE("make_schedule: single step, bounds, validation") {
  const DiffusionSchedule one = make_schedule(1, 0.1, 0.1);
  CHECK(one.beta_at(1) == 0.1);
  CHECK(one.alpha_bar_at(1) == doctest::Approx(0.9).epsilon(1e-15));

  CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), std::invalid_argument);

  const DiffusionSchedule s = make_schedule(1000, 1e-4, 0.02);
  CHECK(s.beta_at(1) == doctest::Approx(1e-4));
  CHECK(s.beta_at(1000) == doctest::Approx(0.02));
  for (int t = 2; t <= 1000; ++t) CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
  CHECK(s.alpha_bar_at(1000) < 0.01);

  // running-product consistency, exact by construction
  for (int t = 1; t <= 1000; ++t)
    CHECK(s.alpha_bar_at(t) == s.alpha_bar_at(t - 1) * (1.0 - s.beta_at(t)));
}

TEST_CASE("forward_diffuse: noiseless case and early-step limit") {
  const DiffusionSchedule s = make_schedule(10, 1e-4, 0.02);
  const VectorXd x0 = vec({1.0, -2.0, 0.5});
  const VectorXd zero = VectorXd::Zero(3);
  const VectorXd xt = forward_diffuse(x0, 5, zero, s);
  CHECK((xt - std::sqrt(s.alpha_bar_at(5)) * x0).cwiseAbs().maxCoeff() == 0.0);

  Rng rng(1);
  const VectorXd eps = rng.normal_vector(3);
  const VectorXd x1 = forward_diffuse(x0, 1, eps, s);
  CHECK((x1 - x0).norm() <= std::sqrt(s.beta_at(1)) * eps.norm() + 2.0 * s.beta_at(1) * x0.norm());

  CHECK_THROWS(forward_diffuse(x0, 0, zero, s));
  CHECK_THROWS(forward_diffuse(x0, 11, zero, s));
}

TEST_CASE("forward_diffuse: standard-normal data keeps a standard-normal marginal") {
  const DiffusionSchedule s = make_schedule(50, 1e-3, 0.1);
  Rng rng(5);
  const int n = 10000, dim = 3, t = 27;
  VectorXd sum = VectorXd::Zero(dim), sum2 = VectorXd::Zero(dim);
  for (int i = 0; i < n; ++i) {
    const VectorXd xt = forward_diffuse(rng.normal_vector(dim), t, rng.normal_vector(dim), s);
    sum += xt;
    sum2 += xt.cwiseProduct(xt);
  }
  for (int d = 0; d < dim; ++d) {
    CHECK(std::abs(sum[d] / n) < 3.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(sum2[d] / n - 1.0) < 3.0 * std::sqrt(2.0 / n));
  }
}

TEST_CASE("predict_x0 inverts forward_diffuse given the true noise") {
  const DiffusionSchedule s = make_schedule(100, 1e-3, 0.1);
  Rng rng(7);
  const VectorXd x0 = rng.normal_vector(6);
  for (int t : {1, 40, 100}) {
    const VectorXd eps = rng.normal_vector(6);
    const VectorXd xt = forward_diffuse(x0, t, eps, s);
    CHECK((predict_x0(xt, t, eps, s) - x0).cwiseAbs().maxCoeff() < 1e-10);
  }

  // eps_hat = 0 degenerates to x_t / sqrt(abar)
  const VectorXd xt = vec({2.0, -4.0});
  const VectorXd got = predict_x0(xt, 40, VectorXd::Zero(2), s);
  CHECK((got - xt / std::sqrt(s.alpha_bar_at(40))).cwiseAbs().maxCoeff() == 0.0);

  // random case against a direct formula evaluation
  const VectorXd eps = rng.normal_vector(2);
  const VectorXd want =
      (xt - std::sqrt(1.0 - s.alpha_bar_at(7)) * eps) / std::sqrt(s.alpha_bar_at(7));
  CHECK((predict_x0(xt, 7, eps, s) - want).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("blend_xhat: boundaries, the abar = 0.36 case, and affine structure") {
  const VectorXd x0h = vec({1.0, 3.0});
  const VectorXd xt = vec({-1.0, 5.0});
  const DiffusionSchedule s = make_schedule(2, 0.4, 0.4);  // abar = {0.6, 0.36}

  // constant-eta boundaries
  CHECK((blend_xhat(x0h, xt, 1, s, EtaRule::Constant, 0.0) - xt).cwiseAbs().maxCoeff() == 0.0);
  CHECK((blend_xhat(x0h, xt, 1, s, EtaRule::Constant, 1.0) - x0h).cwiseAbs().maxCoeff() == 0.0);

  // abar_2 = 0.36 so eta = 0.8
  CHECK(eta_at(2, s, EtaRule::SqrtOneMinusAlphaBar) == doctest::Approx(0.8).epsilon(1e-12));
  const VectorXd blended = blend_xhat(x0h, xt, 2, s, EtaRule::SqrtOneMinusAlphaBar);
  CHECK(blended[0] == doctest::Approx(0.8 * 1.0 + 0.2 * -1.0).epsilon(1e-12));
  CHECK(blended[1] == doctest::Approx(0.8 * 3.0 + 0.2 * 5.0).epsilon(1e-12));

  // coefficients sum to one: blending equal vectors is the identity
  CHECK((blend_xhat(xt, xt, 2, s, EtaRule::SqrtOneMinusAlphaBar) - xt).cwiseAbs().maxCoeff() <
        1e-15);
}

TEST_CASE("spherical distance: identity, antipodal, orthogonal, invariances") {
  const VectorXd a = vec({1.0, 0.0});
  CHECK(spherical_distance_sq(a, a) == 0.0);
  CHECK(spherical_distance_sq(a, vec({-1.0, 0.0})) ==
        doctest::Approx(kPi * kPi / 2.0).epsilon(1e-12));
  CHECK(spherical_distance_sq(a, vec({0.0, 1.0})) ==
        doctest::Approx(kPi * kPi / 8.0).epsilon(1e-12));

  Rng rng(3);
  const VectorXd u = rng.normal_vector(5);
  const VectorXd v = rng.normal_vector(5);
  CHECK(spherical_distance_sq(u, v) == spherical_distance_sq(v, u));
  CHECK(spherical_distance_sq(u, v) ==
        doctest::Approx(spherical_distance_sq(3.7 * u, 0.09 * v)).epsilon(1e-12));
  CHECK(spherical_distance_sq(u, v) > 0.0);
  CHECK_THROWS_AS(spherical_distance_sq(VectorXd::Zero(5), v), std::invalid_argument);
}

TEST_CASE("spherical distance gradient matches finite differences") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd a = rng.normal_vector(6);
    const VectorXd b = rng.normal_vector(6);
    const VectorXd g = spherical_distance_sq_grad_a(a, b);
    const double h = 1e-6;
    for (int i = 0; i < 6; ++i) {
      VectorXd ap = a, am = a;
      ap[i] += h;
      am[i] -= h;
      const double fd = (spherical_distance_sq(ap, b) - spherical_distance_sq(am, b)) / (2 * h);
      CHECK(std::abs(g[i] - fd) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
  // gradient vanishes at coinciding directions
  const VectorXd a = vec({0.0, 2.0, 0.0});
  CHECK(spherical_distance_sq_grad_a(a, 0.5 * a).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("toy predictor: symmetry, exact score relation, x0 variance shrinkage") {
  const DiffusionSchedule s = make_schedule(40, 1e-3, 0.08);
  const auto pred = toy_gaussian_predictor(s);
  CHECK(pred->predict(VectorXd::Zero(4), 10).cwiseAbs().maxCoeff() == 0.0);

  Rng rng(11);
  for (int t : {1, 17, 40}) {
    const VectorXd x = rng.normal_vector(4);
    // score of N(0, I) at x_t is -x_t; the relation is exact
    const VectorXd want = -std::sqrt(1.0 - s.alpha_bar_at(t)) * (-x);
    CHECK((pred->predict(x, t) - want).cwiseAbs().maxCoeff() == 0.0);
  }

  // Var(predict_x0) = abar_t when x_t follows the t-marginal of N(0,I) data
  const int t = 25, n = 20000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const VectorXd xt = forward_diffuse(rng.normal_vector(1), t, rng.normal_vector(1), s);
    const double x0h = predict_x0(xt, t, pred->predict(xt, t), s)[0];
    sum += x0h;
    sum2 += x0h * x0h;
  }
  const double var = sum2 / n - (sum / n) * (sum / n);
  CHECK(std::abs(var / s.alpha_bar_at(t) - 1.0) < 0.05);
}

TEST_CASE("guided_step with s = 0 is bitwise equal to the unconditional step") {
  const DiffusionSchedule s = make_schedule(30, 1e-3, 0.15);
  const auto pred = toy_gaussian_predictor(s);
  const LinearEmbedder embedder = LinearEmbedder::identity(5);
  Rng rng(21);
  const VectorXd xt = rng.normal_vector(5);
  GuidanceTarget target{rng.normal_vector(5), &embedder};

  GuidanceConfig off;
  off.s = 0.0;
  Rng r1(99), r2(99);
  const VectorXd with_guidance = guided_step(xt, 12, *pred, s, &target, off, r1);
  const VectorXd without = guided_step(xt, 12, *pred, s, nullptr, off, r2);
  CHECK((with_guidance.array() == without.array()).all());
}

TEST_CASE("guided_step: t = 1 draws no noise; formula matches hand computation") {
  const DiffusionSchedule s = make_schedule(1, 0.1, 0.1);
  const auto pred = toy_gaussian_predictor(s);
  Rng rng(5);
  const VectorXd x1 = vec({0.8, -1.4});
  GuidanceConfig cfg;
  const VectorXd x0 = guided_step(x1, 1, *pred, s, nullptr, cfg, rng);
  // toy predictor at T=1: mu = sqrt(1 - beta) * x1, z = 0
  CHECK((x0 - std::sqrt(0.9) * x1).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("guidance gradient matches finite differences through the composition") {
  const DiffusionSchedule s = make_schedule(20, 1e-3, 0.12);
  const auto pred = toy_gaussian_predictor(s);
  Rng rng(31);
  const MatrixXd a = rng.normal_matrix(4, 6);  // 6-dim state -> 4-dim embedding
  const LinearEmbedder embedder(a);
  GuidanceConfig cfg;

  // independent route: rebuild the loss from the public pieces
  auto loss_at = [&](const VectorXd& x, int t, const GuidanceTarget& target) {
    const VectorXd x0h = predict_x0(x, t, pred->predict(x, t), s);
    const VectorXd xh = blend_xhat(x0h, x, t, s, cfg.eta_rule, cfg.eta_constant);
    return spherical_distance_sq(embedder.embed(xh), target.signal_embedding);
  };

  for (int trial = 0; trial < 20; ++trial) {
    const int t = 1 + rng.uniform_int(20);
    const VectorXd x = rng.normal_vector(6);
    GuidanceTarget target{rng.normal_vector(4), &embedder};
    const VectorXd g = guidance_gradient(x, t, target, s, *pred, cfg);
    const double h = 1e-6;
    for (int i = 0; i < 6; ++i) {
      VectorXd xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (loss_at(xp, t, target) - loss_at(xm, t, target)) / (2 * h);
      CHECK(std::abs(g[i] - fd) < 1e-3 * std::max(1e-6, std::abs(fd)));
    }
  }
}

TEST_CASE("guidance gradient: zero at the minimum, invariant to target scale") {
  const DiffusionSchedule s = make_schedule(15, 1e-3, 0.1);
  const auto pred = toy_gaussian_predictor(s);
  const LinearEmbedder embedder = LinearEmbedder::identity(4);
  Rng rng(41);
  const VectorXd x = rng.normal_vector(4);
  const int t = 7;

  // choose the target equal to the current x_hat embedding: loss minimum
  const VectorXd x0h = predict_x0(x, t, pred->predict(x, t), s);
  const VectorXd xh = blend_xhat(x0h, x, t, s, EtaRule::SqrtOneMinusAlphaBar);
  GuidanceConfig cfg;
  GuidanceTarget at_min{embedder.embed(xh), &embedder};
  CHECK(guidance_gradient(x, t, at_min, s, *pred, cfg).cwiseAbs().maxCoeff() < 1e-12);

  GuidanceTarget target{rng.normal_vector(4), &embedder};
  GuidanceTarget doubled{2.0 * target.signal_embedding, &embedder};
  const VectorXd g1 = guidance_gradient(x, t, target, s, *pred, cfg);
  const VectorXd g2 = guidance_gradient(x, t, doubled, s, *pred, cfg);
  CHECK((g1 - g2).cwiseAbs().maxCoeff() < 1e-12);

  // stop-gradient toggle changes the result (predictor term removed)
  GuidanceConfig stopped = cfg;
  stopped.stop_gradient_through_predictor = true;
  const VectorXd g3 = guidance_gradient(x, t, target, s, *pred, stopped);
  CHECK((g1 - g3).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("sample: determinism and per-step guidance log") {
  const DiffusionSchedule s = make_schedule(25, 1e-3, 0.15);
  const auto pred = toy_gaussian_predictor(s);
  const LinearEmbedder embedder = LinearEmbedder::identity(4);
  Rng seed_rng(3);
  GuidanceTarget target{seed_rng.normal_vector(4), &embedder};
  GuidanceConfig cfg;
  cfg.s = 40.0;

  Rng r1(77), r2(77);
  const InitState init{"", s.steps, seed_rng.normal_vector(4)};
  const SampleResult a = sample(*pred, s, &target, cfg, init, r1);
  const SampleResult b = sample(*pred, s, &target, cfg, init, r2);
  CHECK((a.x0.array() == b.x0.array()).all());
  CHECK(a.log.size() == 25);
  CHECK(a.log.front().t == 25);
  CHECK(a.log.back().t == 1);
}

TEST_CASE("guided sampling pulls the state toward the target") {
  const DiffusionSchedule s = make_schedule(60, 1e-3, 0.15);
  const auto pred = toy_gaussian_predictor(s);
  const LinearEmbedder embedder = LinearEmbedder::identity(6);
  Rng set_rng(4);
  const VectorXd target_dir = set_rng.normal_vector(6).normalized();
  GuidanceTarget target{target_dir, &embedder};

  auto mean_terminal_cosine = [&](double scale) {
    GuidanceConfig cfg;
    cfg.s = scale;
    double total = 0.0;
    const int seeds = 30;
    for (int i = 0; i < seeds; ++i) {
      Rng rng(1000 + static_cast<uint64_t>(i));
      const InitState init = gaussian_init(s, 6, rng);
      const SampleResult r = sample(*pred, s, &target, cfg, init, rng);
      total += r.x0.normalized().dot(target_dir);
    }
    return total / seeds;
  };

  const double c0 = mean_terminal_cosine(0.0);
  const double c100 = mean_terminal_cosine(100.0);
  CHECK(c100 > c0 + 0.2);
}

TEST_CASE("select_init_image: self-match, rank-1 consistency, full-noise start") {
  const DiffusionSchedule s = make_schedule(100, 1e-3, 0.2);
  CHECK(s.alpha_bar_at(100) < 0.01);

  Rng rng(6);
  CandidatePool pool;
  pool.embeddings = rng.normal_matrix(8, 4);
  for (int i = 0; i < 8; ++i) pool.keys.push_back("img" + std::to_string(i));

  const VectorXd query = pool.embeddings.row(3).transpose();
  auto lookup = [&](const std::string& key) -> VectorXd {
    for (int i = 0; i < 8; ++i)
      if (pool.keys[static_cast<size_t>(i)] == key) return pool.embeddings.row(i).transpose();
    throw std::runtime_error("missing state");
  };
  Rng init_rng(9);
  const InitState init = select_init_image(query, pool, lookup, s, 0.5, init_rng);
  CHECK(init.key == "img3");
  CHECK(init.t_start == 50);
  CHECK(init.key == rank_candidates(query, pool).front().key);

  // t_start_fraction = 1 with abar_T < 0.01: init is almost pure noise
  const int n = 4000;
  VectorXd sum = VectorXd::Zero(4), sum2 = VectorXd::Zero(4);
  Rng noise_rng(10);
  for (int i = 0; i < n; ++i) {
    const InitState full = select_init_image(query, pool, lookup, s, 1.0, noise_rng);
    CHECK(full.t_start == 100);
    sum += full.state;
    sum2 += full.state.cwiseProduct(full.state);
  }
  for (int d = 0; d < 4; ++d) {
    CHECK(std::abs(sum[d] / n) < 0.2);
    CHECK(std::abs(sum2[d] / n - 1.0) < 0.1);
  }

  // fetch failures surface as errors naming the image
  auto broken = [&](const std::string&) -> VectorXd { throw std::runtime_error("io"); };
  CHECK_THROWS_WITH_AS(select_init_image(query, pool, broken, s, 0.5, init_rng),
                       doctest::Contains("img3"), std::runtime_error);
}
