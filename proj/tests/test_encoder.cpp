#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fenode/encoder.hpp"
#include "fenode/rng.hpp"
#include "test_util.hpp"

using namespace fenode;
using namespace testutil;

namespace {

// Zero-weight tanh net: hidden activations are tanh(0) = 0, so the output is
// exactly the output-layer bias. That makes the net a constant vector field we
// can do coefficient algebra against by hand.
MlpParams constant_net(int in_dim, const std::vector<double>& value) {
  MlpSpec spec{{in_dim, 8, static_cast<int>(value.size())}};
  MlpParams p{spec, std::vector<double>(param_count(spec), 0.0)};
  std::copy(value.begin(), value.end(), p.w.end() - static_cast<std::ptrdiff_t>(value.size()));
  return p;
}

// FeNode model over R^2 whose basis functions are fixed constant fields.
EncoderModel constant_model(const std::vector<std::vector<double>>& fields, double volume) {
  EncoderModel m;
  m.mode = ModelMode::FeNode;
  m.state_dim = 2;
  m.control_dim = 0;
  m.k = static_cast<int>(fields.size());
  m.volume = volume;
  m.norm = Normalizer::identity(2);
  for (const auto& f : fields) m.basis.push_back(constant_net(2, f));
  m.validate();
  return m;
}

// One trajectory of x_{t+1} = x_t + dt * f for a constant field f, stored as
// m consecutive tuples so rollout scoring is meaningful on it.
TrajectoryDataset constant_dataset(const std::vector<double>& f, std::size_t m, double dt,
                                   std::uint64_t seed) {
  TrajectoryDataset ds;
  ds.family = "constant_field";
  ds.state_dim = 2;
  ds.control_dim = 0;
  auto rng = Rng::stream(seed, 0);
  double x0 = rng.uniform(-1.0, 1.0), x1 = rng.uniform(-1.0, 1.0);
  for (std::size_t j = 0; j < m; ++j) {
    ds.x.insert(ds.x.end(), {x0, x1});
    x0 += dt * f[0];
    x1 += dt * f[1];
    ds.x_next.insert(ds.x_next.end(), {x0, x1});
    ds.dt.push_back(dt);
  }
  ds.validate();
  return ds;
}

}  // namespace

TEST_CASE("inner product recovers coefficients of an orthonormal constant basis", "[encoder]") {
  // Basis (1,0), (0,1) sampled at dt = 0.1 has Gram (V/m) * m * dt^2 * I, so
  // V = 1/dt^2 = 100 makes it orthonormal and the estimate exact.
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 100.0);
  auto ds = constant_dataset({2.0, 3.0}, 50, 0.1, 7);

  auto c = estimate_coefficients_ip(model, ds);
  REQUIRE(c.method == "inner_product");
  REQUIRE(c.tuples == 50);
  REQUIRE(rel_close(c.c[0], 2.0, 1e-12));
  REQUIRE(rel_close(c.c[1], 3.0, 1e-12));

  // scale consistency: the volume factor passes straight through the estimate
  auto half = model;
  half.volume = 50.0;
  auto ch = estimate_coefficients_ip(half, ds);
  REQUIRE(rel_close(ch.c[0], 1.0, 1e-12));
  REQUIRE(rel_close(ch.c[1], 1.5, 1e-12));

  // with an empirically orthonormal basis the least-squares route agrees
  auto cls = estimate_coefficients_ls(model, ds, 0.0);
  REQUIRE(rel_close(cls.c[0], c.c[0], 1e-10));
  REQUIRE(rel_close(cls.c[1], c.c[1], 1e-10));

  // and the identified model reproduces the observed deltas
  std::vector<double> delta(2);
  predict_delta(model, c, std::vector<double>{0.4, -0.2}, {}, 0.1, delta);
  REQUIRE(rel_close(delta[0], 0.2, 1e-12));
  REQUIRE(rel_close(delta[1], 0.3, 1e-12));
}

TEST_CASE("least squares handles a non-orthogonal basis", "[encoder]") {
  // f = (3,5) against basis (1,0), (1,1): solve a + b = 3, b = 5 -> (-2, 5).
  auto model = constant_model({{1.0, 0.0}, {1.0, 1.0}}, 1.0);
  auto ds = constant_dataset({3.0, 5.0}, 40, 0.05, 11);

  auto c = estimate_coefficients_ls(model, ds, 0.0);
  REQUIRE(c.method == "least_squares");
  REQUIRE(rel_close(c.c[0], -2.0, 1e-10));
  REQUIRE(rel_close(c.c[1], 5.0, 1e-10));

  // inner product is NOT exact here (basis not orthonormal); the solve is the
  // point of the least-squares route
  auto cip = estimate_coefficients_ip(model, ds);
  REQUIRE(std::fabs(cip.c[0] - (-2.0)) > 0.1);
}

TEST_CASE("least squares is invariant to the volume factor", "[encoder]") {
  auto a = constant_model({{1.0, 0.0}, {1.0, 1.0}}, 1.0);
  auto b = constant_model({{1.0, 0.0}, {1.0, 1.0}}, 250.0);
  auto ds = constant_dataset({3.0, 5.0}, 30, 0.05, 3);
  auto ca = estimate_coefficients_ls(a, ds, 0.0);
  auto cb = estimate_coefficients_ls(b, ds, 0.0);
  REQUIRE(rel_close(ca.c[0], cb.c[0], 1e-10));
  REQUIRE(rel_close(ca.c[1], cb.c[1], 1e-10));
}

TEST_CASE("gram matrix of the orthonormal basis is the identity", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 100.0);
  auto ds = constant_dataset({1.0, -1.0}, 25, 0.1, 5);
  auto gram = gram_matrix(model, ds);
  REQUIRE(rel_close(gram[0], 1.0, 1e-12));
  REQUIRE(rel_close(gram[3], 1.0, 1e-12));
  REQUIRE(std::fabs(gram[1]) < 1e-12);
  REQUIRE(gram[1] == gram[2]);

  auto st = gram_stats(gram, 2);
  REQUIRE(st.offdiag_mean < 1e-12);
  REQUIRE(rel_close(st.cond, 1.0, 1e-10));
}

TEST_CASE("gram stats flag a correlated basis", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {1.0, 0.1}}, 1.0);
  auto ds = constant_dataset({1.0, 1.0}, 25, 0.1, 5);
  auto st = gram_stats(gram_matrix(model, ds), 2);
  REQUIRE(st.offdiag_mean > 0.9);
  REQUIRE(st.cond > 100.0);
  REQUIRE(st.min_eig < st.max_eig);
}

TEST_CASE("zero observed deltas give zero coefficients", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 100.0);
  auto ds = constant_dataset({0.0, 0.0}, 20, 0.1, 9);
  auto cip = estimate_coefficients_ip(model, ds);
  auto cls = estimate_coefficients_ls(model, ds);
  for (double v : cip.c) REQUIRE(v == 0.0);
  for (double v : cls.c) REQUIRE(std::fabs(v) < 1e-14);

  std::vector<double> delta(2);
  predict_delta(model, cip, std::vector<double>{1.0, 1.0}, {}, 0.1, delta);
  REQUIRE(delta[0] == 0.0);
  REQUIRE(delta[1] == 0.0);
}

TEST_CASE("inner-product estimates are linear in the observed deltas", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 100.0);
  auto one = constant_dataset({1.0, 1.0}, 30, 0.1, 13);
  auto two = constant_dataset({2.0, 2.0}, 30, 0.1, 13);
  auto c1 = estimate_coefficients_ip(model, one);
  auto c2 = estimate_coefficients_ip(model, two);
  REQUIRE(rel_close(c2.c[0], 2.0 * c1.c[0], 1e-13));
  REQUIRE(rel_close(c2.c[1], 2.0 * c1.c[1], 1e-13));
}

TEST_CASE("prediction is linear in the coefficients", "[encoder]") {
  auto model = constant_model({{1.0, 0.5}, {0.0, 1.0}}, 1.0);
  Coefficients c{{0.7, -1.3}, "fixed", 0};
  Coefficients c2{{1.4, -2.6}, "fixed", 0};
  std::vector<double> d(2), d2(2);
  predict_delta(model, c, std::vector<double>{0.1, 0.2}, {}, 0.3, d);
  predict_delta(model, c2, std::vector<double>{0.1, 0.2}, {}, 0.3, d2);
  REQUIRE(rel_close(d2[0], 2.0 * d[0], 1e-15));
  REQUIRE(rel_close(d2[1], 2.0 * d[1], 1e-15));
}

TEST_CASE("normalization round trip through prediction", "[encoder]") {
  // constant field in normalized space scales by the state stddev on the way out
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 1.0);
  model.norm = Normalizer{{1.0, 2.0}, {2.0, 4.0}};
  Coefficients c{{3.0, -1.0}, "fixed", 0};
  std::vector<double> delta(2);
  predict_delta(model, c, std::vector<double>{0.0, 0.0}, {}, 0.5, delta);
  REQUIRE(rel_close(delta[0], 3.0 * 0.5 * 2.0, 1e-12));
  REQUIRE(rel_close(delta[1], -1.0 * 0.5 * 4.0, 1e-12));

  std::vector<double> b0(2);
  integrate_basis(model, 0, std::vector<double>{5.0, -3.0}, {}, IntegrationSpec{0.5, 4}, b0);
  REQUIRE(rel_close(b0[0], 1.0, 1e-12));
  REQUIRE(std::fabs(b0[1]) < 1e-14);
}

TEST_CASE("least squares recovers the generating coefficients of a random basis", "[encoder]") {
  auto model = make_model(ModelMode::FeNode, 2, 1, 0, 3, {16, 16}, 99);
  const Coefficients truth{{0.8, -1.5, 0.4}, "fixed", 0};

  TrajectoryDataset ds;
  ds.family = "synthetic";
  ds.state_dim = 2;
  ds.control_dim = 1;
  auto rng = Rng::stream(4242, 0);
  std::vector<double> x(2), delta(2);
  for (int j = 0; j < 60; ++j) {
    x[0] = rng.uniform(-1.0, 1.0);
    x[1] = rng.uniform(-1.0, 1.0);
    const double u = rng.uniform(-1.0, 1.0);
    predict_delta(model, truth, x, std::vector<double>{u}, 0.05, delta);
    ds.x.insert(ds.x.end(), x.begin(), x.end());
    ds.x_next.insert(ds.x_next.end(), {x[0] + delta[0], x[1] + delta[1]});
    ds.u.push_back(u);
    ds.dt.push_back(0.05);
  }
  ds.validate();

  auto c = estimate_coefficients_ls(model, ds, 0.0);
  for (int i = 0; i < 3; ++i) REQUIRE(rel_close(c.c[static_cast<std::size_t>(i)], truth.c[static_cast<std::size_t>(i)], 1e-6));

  // the default ridge perturbs the solution only mildly
  auto cr = estimate_coefficients_ls(model, ds);
  for (int i = 0; i < 3; ++i) REQUIRE(rel_close(cr.c[static_cast<std::size_t>(i)], truth.c[static_cast<std::size_t>(i)], 0.05));
}

TEST_CASE("a rank-deficient gram matrix at ridge zero is rejected", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {1.0, 0.0}}, 1.0);  // duplicate basis
  auto ds = constant_dataset({1.0, 0.0}, 20, 0.1, 21);
  REQUIRE_THROWS_AS(estimate_coefficients_ls(model, ds, 0.0), NumericError);
  REQUIRE_THROWS_WITH(estimate_coefficients_ls(model, ds, 0.0),
                      Catch::Matchers::ContainsSubstring("ridge"));
  // with ridge it degrades gracefully instead
  auto c = estimate_coefficients_ls(model, ds, 1e-6);
  REQUIRE(std::isfinite(c.c[0]));
  REQUIRE(rel_close(c.c[0] + c.c[1], 1.0, 1e-3));
}

TEST_CASE("identification rejects malformed inputs", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}}, 1.0);
  TrajectoryDataset empty;
  empty.family = "x";
  empty.state_dim = 2;
  empty.control_dim = 0;
  REQUIRE_THROWS_AS(estimate_coefficients_ip(model, empty), ConfigError);

  auto ds = constant_dataset({1.0, 0.0}, 5, 0.1, 2);
  ds.control_dim = 3;  // now inconsistent with the model
  ds.u.assign(15, 0.0);
  REQUIRE_THROWS_AS(estimate_coefficients_ip(model, ds), ConfigError);

  Coefficients wrong{{1.0, 2.0}, "fixed", 0};
  std::vector<double> d(2);
  REQUIRE_THROWS_AS(
      predict_delta(model, wrong, std::vector<double>{0.0, 0.0}, {}, 0.1, d), ConfigError);
}

TEST_CASE("node baseline ignores the identification data", "[encoder]") {
  auto model = make_model(ModelMode::NodeBaseline, 2, 0, 0, 1, {8}, 5);
  auto a = constant_dataset({1.0, 0.0}, 10, 0.1, 1);
  auto b = constant_dataset({-4.0, 9.0}, 10, 0.1, 2);
  auto ca = estimate_coefficients_ip(model, a);
  auto cb = estimate_coefficients_ls(model, b);
  REQUIRE(ca.method == "fixed");
  REQUIRE(cb.method == "fixed");
  REQUIRE(ca.c == std::vector<double>{1.0});
  REQUIRE(cb.c == std::vector<double>{1.0});

  std::vector<double> da(2), db(2);
  predict_delta(model, ca, std::vector<double>{0.3, 0.3}, {}, 0.1, da);
  predict_delta(model, cb, std::vector<double>{0.3, 0.3}, {}, 0.1, db);
  REQUIRE(da == db);
}

TEST_CASE("oracle baseline responds to the hidden parameters", "[encoder]") {
  auto model = make_model(ModelMode::OracleBaseline, 2, 0, 1, 1, {8}, 17);
  REQUIRE(model.basis[0].spec.input_dim() == 3);
  Coefficients one{{1.0}, "fixed", 0};
  std::vector<double> lo(2), hi(2);
  predict_delta(model, one, std::vector<double>{0.2, -0.1}, {}, 0.1, lo, 1,
                std::vector<double>{0.5});
  predict_delta(model, one, std::vector<double>{0.2, -0.1}, {}, 0.1, hi, 1,
                std::vector<double>{1.5});
  REQUIRE(max_abs_diff(lo, hi) > 1e-6);

  // and refuses to run blind
  std::vector<double> d(2);
  REQUIRE_THROWS_AS(
      predict_delta(model, one, std::vector<double>{0.2, -0.1}, {}, 0.1, d), ConfigError);
}

TEST_CASE("residuals mode adds the average field to every prediction", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 100.0);
  model.mode = ModelMode::FeNodeResiduals;
  model.avg = constant_net(2, {10.0, -10.0});
  model.validate();

  // identification sees only what is left after the average field
  auto ds = constant_dataset({12.0, -7.0}, 30, 0.1, 8);
  auto c = estimate_coefficients_ip(model, ds);
  REQUIRE(rel_close(c.c[0], 2.0, 1e-10));
  REQUIRE(rel_close(c.c[1], 3.0, 1e-10));

  std::vector<double> delta(2);
  predict_delta(model, c, std::vector<double>{0.0, 0.0}, {}, 0.1, delta);
  REQUIRE(rel_close(delta[0], 1.2, 1e-10));
  REQUIRE(rel_close(delta[1], -0.7, 1e-10));

  // decomposition: prediction minus the zero-coefficient prediction is the
  // pure span part
  Coefficients zero{{0.0, 0.0}, "fixed", 0};
  std::vector<double> base(2), b0(2), b1(2);
  predict_delta(model, zero, std::vector<double>{0.0, 0.0}, {}, 0.1, base);
  integrate_basis(model, 0, std::vector<double>{0.0, 0.0}, {}, IntegrationSpec{0.1, 1}, b0);
  integrate_basis(model, 1, std::vector<double>{0.0, 0.0}, {}, IntegrationSpec{0.1, 1}, b1);
  REQUIRE(rel_close(delta[0] - base[0], c.c[0] * b0[0] + c.c[1] * b1[0], 1e-12));
  REQUIRE(rel_close(delta[1] - base[1], c.c[0] * b0[1] + c.c[1] * b1[1], 1e-12));
  REQUIRE(rel_close(base[0], 1.0, 1e-12));   // avg field alone
  REQUIRE(rel_close(base[1], -1.0, 1e-12));
}

TEST_CASE("combined-field integration agrees with per-basis prediction on constant fields",
          "[encoder]") {
  auto model = constant_model({{1.0, 2.0}, {-0.5, 1.0}}, 1.0);
  Coefficients c{{1.7, 0.6}, "fixed", 0};
  std::vector<double> per(2), comb(2);
  predict_delta(model, c, std::vector<double>{0.1, 0.1}, {}, 0.4, per, 3);
  integrate_combined(model, c, std::vector<double>{0.1, 0.1}, {}, IntegrationSpec{0.4, 3}, comb);
  REQUIRE(rel_close(per[0], comb[0], 1e-13));
  REQUIRE(rel_close(per[1], comb[1], 1e-13));
}

TEST_CASE("combined-field gap to per-basis prediction vanishes as the interval shrinks",
          "[encoder]") {
  // On nonlinear fields the two routes differ at second order in the interval
  // length: summing the flows of k fields is not the flow of the summed field.
  // The honest invariant is O(dt^2) agreement for small dt, not convergence to
  // each other at fixed dt.
  auto model = make_model(ModelMode::FeNode, 2, 0, 0, 3, {24}, 31);
  for (auto& net : model.basis)
    for (auto& w : net.w) w *= 3.0;  // exaggerate nonlinearity
  Coefficients c{{1.0, -0.8, 0.5}, "fixed", 0};
  const std::vector<double> x{0.3, -0.4};

  auto gap = [&](double dt) {
    std::vector<double> per(2), comb(2);
    predict_delta(model, c, x, {}, dt, per, 2);
    integrate_combined(model, c, x, {}, IntegrationSpec{dt, 2}, comb);
    return max_abs_diff(per, comb);
  };
  // halving ratios head to 4 as the dt^2 term takes over (measured 3.88 and
  // 3.95 at these steps for this seed)
  const double r1 = gap(0.05) / gap(0.025);
  const double r2 = gap(0.025) / gap(0.0125);
  REQUIRE(gap(0.05) > 1e-9);  // the routes genuinely differ on nonlinear fields
  REQUIRE(r1 > 3.0);
  REQUIRE(r1 < 4.5);
  REQUIRE(r2 > 3.5);
  REQUIRE(r2 < 4.5);
}

TEST_CASE("combined and per-basis routes coincide for a single unit-weight field", "[encoder]") {
  auto model = make_model(ModelMode::FeNode, 2, 0, 0, 1, {16}, 19);
  Coefficients c{{1.0}, "fixed", 0};
  std::vector<double> per(2), comb(2);
  predict_delta(model, c, std::vector<double>{0.4, -0.7}, {}, 0.6, per, 4);
  integrate_combined(model, c, std::vector<double>{0.4, -0.7}, {}, IntegrationSpec{0.6, 4}, comb);
  REQUIRE(per == comb);
}

TEST_CASE("model stepper matches the combined integration route", "[encoder]") {
  auto model = make_model(ModelMode::FeNode, 2, 1, 0, 2, {16}, 77);
  Coefficients c{{0.9, -0.4}, "fixed", 0};
  ModelStepper stepper(model, c, 2);
  std::vector<double> a(2), b(2);
  const std::vector<double> x{0.2, -0.6}, u{0.3};
  stepper.step(x, u, 0.25, a);
  integrate_combined(model, c, x, u, IntegrationSpec{0.25, 2}, b);
  REQUIRE(rel_close(a[0], b[0], 1e-14));
  REQUIRE(rel_close(a[1], b[1], 1e-14));
}

TEST_CASE("model stepper reverse sweep matches finite differences", "[encoder]") {
  auto model = make_model(ModelMode::FeNode, 2, 2, 0, 3, {16}, 123);
  model.norm = Normalizer{{0.1, -0.2}, {1.5, 0.7}};
  Coefficients c{{0.8, -0.3, 1.1}, "fixed", 0};
  ModelStepper stepper(model, c, 2);

  auto rng = Rng::stream(55, 0);
  std::vector<double> x(2), u(2), cot(2);
  for (int trial = 0; trial < 10; ++trial) {
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    for (auto& v : u) v = rng.uniform(-1.0, 1.0);
    for (auto& v : cot) v = rng.normal();

    std::vector<double> delta(2), x_bar(2), u_bar(2, 0.0);
    stepper.step_vjp(x, u, 0.3, delta, cot, x_bar, u_bar);

    auto objective = [&]() {
      std::vector<double> d(2);
      stepper.step(x, u, 0.3, d);
      return cot[0] * d[0] + cot[1] * d[1];
    };
    for (int i = 0; i < 2; ++i) {
      REQUIRE(rel_close(x_bar[static_cast<std::size_t>(i)], fd_central(objective, &x[static_cast<std::size_t>(i)]), 1e-5, 1e-8));
      REQUIRE(rel_close(u_bar[static_cast<std::size_t>(i)], fd_central(objective, &u[static_cast<std::size_t>(i)]), 1e-5, 1e-8));
    }
  }
}

TEST_CASE("stepper reverse sweep covers the residuals and direct modes", "[encoder]") {
  auto rng = Rng::stream(66, 0);
  for (auto mode : {ModelMode::FeNodeResiduals, ModelMode::FeDirect}) {
    auto model = make_model(mode, 2, 1, 0, 2, {12}, 321);
    Coefficients c{{0.6, -0.9}, "fixed", 0};
    ModelStepper stepper(model, c, 1);
    std::vector<double> x(2), u(1), cot(2);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    u[0] = rng.uniform(-1.0, 1.0);
    cot = {1.0, -0.5};

    std::vector<double> delta(2), x_bar(2), u_bar(1, 0.0);
    stepper.step_vjp(x, u, 0.2, delta, cot, x_bar, u_bar);

    std::vector<double> check(2);
    stepper.step(x, u, 0.2, check);
    REQUIRE(max_abs_diff(delta, check) == 0.0);

    auto objective = [&]() {
      std::vector<double> d(2);
      stepper.step(x, u, 0.2, d);
      return cot[0] * d[0] + cot[1] * d[1];
    };
    REQUIRE(rel_close(x_bar[0], fd_central(objective, &x[0]), 1e-5, 1e-8));
    REQUIRE(rel_close(x_bar[1], fd_central(objective, &x[1]), 1e-5, 1e-8));
    REQUIRE(rel_close(u_bar[0], fd_central(objective, &u[0]), 1e-5, 1e-8));
  }
}

TEST_CASE("direct mode consumes the interval length as an input", "[encoder]") {
  auto model = make_model(ModelMode::FeDirect, 2, 0, 0, 2, {12}, 88);
  REQUIRE(model.basis[0].spec.input_dim() == 3);
  Coefficients c{{1.0, 0.5}, "fixed", 0};
  std::vector<double> a(2), b(2);
  predict_delta(model, c, std::vector<double>{0.1, 0.1}, {}, 0.1, a);
  predict_delta(model, c, std::vector<double>{0.1, 0.1}, {}, 0.9, b);
  REQUIRE(max_abs_diff(a, b) > 1e-9);
  // no field to integrate in this mode
  std::vector<double> d(2);
  REQUIRE_THROWS_AS(
      integrate_combined(model, c, std::vector<double>{0.1, 0.1}, {}, IntegrationSpec{0.1, 1}, d),
      ConfigError);
}

TEST_CASE("rollout errors shrink to zero for a perfect predictor", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 100.0);
  auto ds = constant_dataset({2.0, 3.0}, 40, 0.1, 44);
  auto c = estimate_coefficients_ip(model, ds);

  for (int h : {1, 5, 10}) {
    auto errs = rollout_errors(model, c, ds, h);
    REQUIRE(errs.size() == ds.size() - static_cast<std::size_t>(h) + 1);
    for (double e : errs) REQUIRE(e < 1e-20);
  }
}

TEST_CASE("evaluate pools datasets and skips the ones too short for a horizon", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}, {0.0, 1.0}}, 100.0);
  std::vector<TrajectoryDataset> sets;
  sets.push_back(constant_dataset({1.0, 1.0}, 12, 0.1, 1));
  sets.push_back(constant_dataset({1.0, 1.0}, 3, 0.1, 2));
  Coefficients c{{1.0, 1.0}, "fixed", 0};

  const std::vector<int> horizons{1, 5};
  auto rows = evaluate(model, c, sets, horizons);
  REQUIRE(rows.size() == 2);
  REQUIRE(rows[0].horizon == 1);
  REQUIRE(rows[0].rollouts == 12 + 3);
  REQUIRE(rows[0].skipped == 0);
  REQUIRE(rows[1].horizon == 5);
  REQUIRE(rows[1].rollouts == 8);  // only the long dataset contributes
  REQUIRE(rows[1].skipped == 1);
  for (const auto& r : rows) REQUIRE(r.mse < 1e-18);
}

TEST_CASE("generic rollout scoring accepts an arbitrary step function", "[encoder]") {
  auto ds = constant_dataset({2.0, -1.0}, 15, 0.1, 3);
  // the true map as a hand-written step
  auto errs = rollout_errors_fn(
      [](std::span<const double>, std::span<const double>, double dt, std::span<double> delta) {
        delta[0] = 2.0 * dt;
        delta[1] = -1.0 * dt;
      },
      ds, 7);
  REQUIRE(errs.size() == 9);
  for (double e : errs) REQUIRE(e < 1e-22);

  // a broken step scores badly
  auto bad = rollout_errors_fn(
      [](std::span<const double>, std::span<const double>, double, std::span<double> delta) {
        delta[0] = 0.0;
        delta[1] = 0.0;
      },
      ds, 7);
  for (double e : bad) REQUIRE(e > 0.1);
}

TEST_CASE("mode names round trip", "[encoder]") {
  for (auto m : {ModelMode::FeNode, ModelMode::FeNodeResiduals, ModelMode::FeDirect,
                 ModelMode::NodeBaseline, ModelMode::OracleBaseline})
    REQUIRE(mode_from_name(mode_name(m)) == m);
  REQUIRE_THROWS_AS(mode_from_name("fourier"), ConfigError);
}

TEST_CASE("model validation catches structural mistakes", "[encoder]") {
  auto model = constant_model({{1.0, 0.0}}, 1.0);
  auto broken = model;
  broken.k = 2;
  REQUIRE_THROWS_AS(broken.validate(), ConfigError);

  broken = model;
  broken.mode = ModelMode::NodeBaseline;
  broken.basis.push_back(constant_net(2, {0.0, 0.0}));
  broken.k = 2;
  REQUIRE_THROWS_AS(broken.validate(), ConfigError);

  broken = model;
  broken.avg = constant_net(2, {0.0, 0.0});
  REQUIRE_THROWS_AS(broken.validate(), ConfigError);

  broken = model;
  broken.norm = Normalizer::identity(3);
  REQUIRE_THROWS_AS(broken.validate(), ConfigError);

  broken = model;
  broken.volume = 0.0;
  REQUIRE_THROWS_AS(broken.validate(), ConfigError);
}
