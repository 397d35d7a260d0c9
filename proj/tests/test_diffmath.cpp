#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "amnet/diffmath.hpp"
#include "amnet/random.hpp"
#include "oracles.hpp"

using namespace amnet;

namespace {

Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& x : m.d) x = scale * rng.normal();
  return m;
}

GruParams random_gru(Rng& rng, std::size_t input, std::size_t hidden,
                     double scale = 0.4) {
  GruParams g;
  g.W_z = random_matrix(rng, hidden, input, scale);
  g.W_r = random_matrix(rng, hidden, input, scale);
  g.W_h = random_matrix(rng, hidden, input, scale);
  g.U_z = random_matrix(rng, hidden, hidden, scale);
  g.U_r = random_matrix(rng, hidden, hidden, scale);
  g.U_h = random_matrix(rng, hidden, hidden, scale);
  g.b_z = random_vector(rng, hidden, scale);
  g.b_r = random_vector(rng, hidden, scale);
  g.b_h = random_vector(rng, hidden, scale);
  return g;
}

}  // namespace

TEST_CASE("affine identity and zero-input cases") {
  AffineParams identity;
  identity.W = Matrix(2, 2);
  identity.W(0, 0) = 1.0;
  identity.W(1, 1) = 1.0;
  identity.b = Vector(2, 0.0);
  const Vector y = affine(Vector{3.0, -1.0}, identity);
  CHECK(y == Vector{3.0, -1.0});

  Rng rng(3);
  AffineParams p;
  p.W = random_matrix(rng, 2, 3);
  p.b = Vector{0.5, -2.0};
  CHECK(affine(Vector(3, 0.0), p) == Vector{0.5, -2.0});
}

TEST_CASE("affine matches nested-loop oracle") {
  Rng rng(11);
  AffineParams p;
  p.W = random_matrix(rng, 3, 4);
  p.b = random_vector(rng, 3);
  const Vector x = random_vector(rng, 4);
  const Vector got = affine(x, p);
  const auto want = oracle::affine(p.W, p.b, x);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got[i] == Catch::Approx(want[i]).margin(1e-14));
}

TEST_CASE("affine rejects mismatched dimensions") {
  AffineParams p;
  p.W = Matrix(2, 3);
  p.b = Vector(2, 0.0);
  CHECK_THROWS_AS(affine(Vector(4, 1.0), p), ShapeError);
}

TEST_CASE("affine is linear once the bias is folded out") {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    AffineParams p;
    p.W = random_matrix(rng, 3, 5);
    p.b = random_vector(rng, 3);
    AffineParams nobias = p;
    nobias.b = Vector(3, 0.0);
    const Vector x = random_vector(rng, 5);
    const Vector y = random_vector(rng, 5);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    Vector mix(5);
    for (std::size_t i = 0; i < 5; ++i) mix[i] = a * x[i] + b * y[i];
    const Vector lhs = affine(mix, p);
    const Vector fx = affine(x, nobias), fy = affine(y, nobias);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(lhs[i] == Catch::Approx(a * fx[i] + b * fy[i] + p.b[i]).margin(1e-12));
  }
}

TEST_CASE("softmax analytic values") {
  const Vector sym = softmax(Vector{0.0, 0.0});
  CHECK(sym[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(sym[1] == Catch::Approx(0.5).margin(1e-15));

  const Vector ln = softmax(Vector{std::log(2.0), 0.0});
  CHECK(ln[0] == Catch::Approx(2.0 / 3.0).margin(1e-12));
  CHECK(ln[1] == Catch::Approx(1.0 / 3.0).margin(1e-12));

  CHECK_THROWS_AS(softmax(Vector{}), DomainError);
}

TEST_CASE("softmax matches the direct formula at extended precision") {
  Rng rng(29);
  for (int rep = 0; rep < 50; ++rep) {
    const Vector z = random_vector(rng, 5, 3.0);
    const Vector got = softmax(z);
    const auto want = oracle::softmax(z);
    for (std::size_t i = 0; i < 5; ++i)
      CHECK(got[i] == Catch::Approx(want[i]).margin(1e-14));
  }
}

TEST_CASE("softmax properties: normalization, shift invariance, permutation") {
  Rng rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 1 + rng.uniform_int(0, 7);
    const Vector z = random_vector(rng, n, 4.0);
    const Vector y = softmax(z);
    double sum = 0.0;
    for (double v : y) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-12));

    const double shift = rng.uniform(-50, 50);
    Vector zs = z;
    for (double& v : zs) v += shift;
    const Vector ys = softmax(zs);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(ys[i] == Catch::Approx(y[i]).margin(1e-12));

    // Reverse is a permutation; softmax must commute with it.
    Vector zr(z.rbegin(), z.rend());
    const Vector yr = softmax(zr);
    for (std::size_t i = 0; i < n; ++i)
      CHECK(yr[i] == Catch::Approx(y[n - 1 - i]).margin(1e-12));
  }
}

TEST_CASE("gru_cell fixed points with zero parameters") {
  GruParams zero = detail::gru_shape<double>(3, 2);
  const Vector x{0.7, -0.3, 1.1};
  CHECK(gru_cell(x, Vector(2, 0.0), zero) == Vector(2, 0.0));
  // z = r = 1/2 and h_tilde = 0 exactly, so h = h_prev / 2.
  CHECK(gru_cell(x, Vector{0.4, -0.2}, zero) == Vector{0.2, -0.1});
}

TEST_CASE("gru_cell matches the gate-equation transcription") {
  Rng rng(37);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t input = 1 + rng.uniform_int(0, 4);
    const std::size_t hidden = 1 + rng.uniform_int(0, 4);
    const GruParams p = random_gru(rng, input, hidden);
    const Vector x = random_vector(rng, input);
    const Vector h_prev = random_vector(rng, hidden, 0.8);
    const Vector got = gru_cell(x, h_prev, p);
    const auto want = oracle::gru_cell(x, h_prev, p);
    for (std::size_t i = 0; i < hidden; ++i)
      CHECK(got[i] == Catch::Approx(want[i]).margin(1e-13));
  }
}

TEST_CASE("gru_cell rejects mismatched shapes") {
  const GruParams p = detail::gru_shape<double>(3, 2);
  CHECK_THROWS_AS(gru_cell(Vector(4, 0.0), Vector(2, 0.0), p), ShapeError);
  CHECK_THROWS_AS(gru_cell(Vector(3, 0.0), Vector(5, 0.0), p), ShapeError);
}

TEST_CASE("gru_cell output is a per-coordinate convex combination") {
  Rng rng(41);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t input = 1 + rng.uniform_int(0, 3);
    const std::size_t hidden = 1 + rng.uniform_int(0, 3);
    const GruParams p = random_gru(rng, input, hidden, 0.8);
    const Vector x = random_vector(rng, input);
    const Vector h_prev = random_vector(rng, hidden, 0.9);
    const GruCache<double> c = gru_forward(x, h_prev, p);
    for (std::size_t i = 0; i < hidden; ++i) {
      const double lo = std::min(h_prev[i], c.h_tilde[i]);
      const double hi = std::max(h_prev[i], c.h_tilde[i]);
      CHECK(c.h[i] >= lo - 1e-15);
      CHECK(c.h[i] <= hi + 1e-15);
    }
  }
}

TEST_CASE("finite_diff_gradient on analytic scalar functions") {
  const auto square = [](const Vector& v) { return v[0] * v[0]; };
  const Vector g = finite_diff_gradient(square, Vector{3.0}, 1e-5);
  CHECK(g[0] == Catch::Approx(6.0).margin(1e-8));

  const auto constant = [](const Vector&) { return 4.25; };
  const Vector gc = finite_diff_gradient(constant, Vector{1.0, -2.0, 0.5}, 1e-5);
  for (double v : gc) CHECK(std::fabs(v) < 1e-10);

  CHECK_THROWS_AS(finite_diff_gradient(square, Vector{3.0}, 0.0), DomainError);
  const auto bad = [](const Vector& v) {
    return v[0] > 1.0 ? std::numeric_limits<double>::quiet_NaN() : 0.0;
  };
  CHECK_THROWS_AS(finite_diff_gradient(bad, Vector{1.0}, 1e-3), NumericError);
}

TEST_CASE("affine_backward matches finite differences") {
  Rng rng(43);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t out = 1 + rng.uniform_int(0, 3);
    const std::size_t in = 1 + rng.uniform_int(0, 3);
    AffineParams p;
    p.W = random_matrix(rng, out, in);
    p.b = random_vector(rng, out);
    const Vector x = random_vector(rng, in);
    const Vector c = random_vector(rng, out);

    AffineParams grad = make_gradient_bundle(p);
    Vector dx(in, 0.0);
    affine_backward(x, p, c, grad, &dx);

    const auto loss = [&](const AffineParams& q) { return dot(c, affine(x, q)); };
    const AffineParams fd = finite_diff_gradient(loss, p, 1e-5);
    CHECK(max_rel_error(grad, fd) < 1e-5);

    const auto loss_x = [&](const Vector& q) { return dot(c, affine(q, p)); };
    const Vector fdx = finite_diff_gradient(loss_x, x, 1e-5);
    CHECK(max_rel_error(dx, fdx) < 1e-5);
  }
}

TEST_CASE("softmax_backward matches finite differences") {
  Rng rng(47);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 1 + rng.uniform_int(0, 6);
    const Vector z = random_vector(rng, n, 2.0);
    const Vector c = random_vector(rng, n);
    const Vector dz = softmax_backward(softmax(z), c);
    const auto loss = [&](const Vector& q) { return dot(c, softmax(q)); };
    const Vector fd = finite_diff_gradient(loss, z, 1e-5);
    CHECK(max_rel_error(dz, fd) < 1e-5);
  }
}

TEST_CASE("gru_backward matches finite differences on small shapes") {
  Rng rng(53);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t input = 1 + rng.uniform_int(0, 3);
    const std::size_t hidden = 1 + rng.uniform_int(0, 3);
    const GruParams p = random_gru(rng, input, hidden);
    const Vector x = random_vector(rng, input);
    const Vector h_prev = random_vector(rng, hidden, 0.8);
    const Vector c = random_vector(rng, hidden);

    const GruCache<double> cache = gru_forward(x, h_prev, p);
    GruParams grad = make_gradient_bundle(p);
    Vector dx(input, 0.0), dh_prev(hidden, 0.0);
    gru_backward(x, h_prev, p, cache, c, grad, &dx, dh_prev);

    const auto loss = [&](const GruParams& q) {
      return dot(c, gru_cell(x, h_prev, q));
    };
    CHECK(max_rel_error(grad, finite_diff_gradient(loss, p, 1e-5)) < 1e-5);

    const auto loss_x = [&](const Vector& q) {
      return dot(c, gru_cell(q, h_prev, p));
    };
    CHECK(max_rel_error(dx, finite_diff_gradient(loss_x, x, 1e-5)) < 1e-5);

    const auto loss_h = [&](const Vector& q) {
      return dot(c, gru_cell(x, q, p));
    };
    CHECK(max_rel_error(dh_prev, finite_diff_gradient(loss_h, h_prev, 1e-5)) <
          1e-5);
  }
}

TEST_CASE("relu_backward masks by the pre-activation sign") {
  const Vector a{-1.0, 2.0, 0.0, 0.5};
  const Vector dy{1.0, 1.0, 1.0, 3.0};
  CHECK(relu_backward(a, dy) == Vector{0.0, 1.0, 0.0, 3.0});
  CHECK(relu(a) == Vector{0.0, 2.0, 0.0, 0.5});
}
