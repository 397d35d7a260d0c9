#pragma once

// Dense vector/matrix primitives with paired forward/backward rules, plus a
// central-difference gradient oracle. Everything is templated on the scalar
// type so the same graph can be evaluated in double for training and in
// long double when a finite-difference probe wants extra headroom.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "amnet/errors.hpp"

namespace amnet {

template <class Real>
using Vec = std::vector<Real>;

template <class Real>
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> d;  // row-major, d.size() == rows * cols

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), d(r * c, Real(0)) {}

  Real& operator()(std::size_t r, std::size_t c) { return d[r * cols + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const {
    return d[r * cols + c];
  }
};

using Vector = Vec<double>;
using Matrix = Mat<double>;

// Fully connected layer parameters: y = W x + b, W is out x in.
template <class Real>
struct AffineParamsT {
  using scalar_type = Real;
  Mat<Real> W;
  Vec<Real> b;
};
using AffineParams = AffineParamsT<double>;

// Three-gate GRU parameters. W_* act on the input, U_* on the previous
// hidden state.
template <class Real>
struct GruParamsT {
  using scalar_type = Real;
  Mat<Real> W_z, W_r, W_h;
  Mat<Real> U_z, U_r, U_h;
  Vec<Real> b_z, b_r, b_h;
};
using GruParams = GruParamsT<double>;

namespace detail {

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

}  // namespace detail

template <class Real>
Vec<Real> matvec(const Mat<Real>& W, const Vec<Real>& x) {
  detail::check(W.cols == x.size(),
                "matvec: matrix has " + std::to_string(W.cols) +
                    " cols but vector has length " + std::to_string(x.size()));
  Vec<Real> y(W.rows, Real(0));
  for (std::size_t r = 0; r < W.rows; ++r) {
    Real acc = Real(0);
    const Real* row = W.d.data() + r * W.cols;
    for (std::size_t c = 0; c < W.cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

// y += W^T v, v has length W.rows.
template <class Real>
void matvec_transpose_add(const Mat<Real>& W, const Vec<Real>& v,
                          Vec<Real>& y) {
  detail::check(W.rows == v.size() && W.cols == y.size(),
                "matvec_transpose_add: shape mismatch");
  for (std::size_t r = 0; r < W.rows; ++r) {
    const Real vr = v[r];
    const Real* row = W.d.data() + r * W.cols;
    for (std::size_t c = 0; c < W.cols; ++c) y[c] += vr * row[c];
  }
}

// G += u v^T.
template <class Real>
void outer_add(const Vec<Real>& u, const Vec<Real>& v, Mat<Real>& G) {
  detail::check(G.rows == u.size() && G.cols == v.size(),
                "outer_add: shape mismatch");
  for (std::size_t r = 0; r < u.size(); ++r) {
    Real* row = G.d.data() + r * G.cols;
    const Real ur = u[r];
    for (std::size_t c = 0; c < v.size(); ++c) row[c] += ur * v[c];
  }
}

template <class Real>
void add_into(const Vec<Real>& src, Vec<Real>& dst) {
  detail::check(src.size() == dst.size(), "add_into: length mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

template <class Real>
Real dot(const Vec<Real>& a, const Vec<Real>& b) {
  detail::check(a.size() == b.size(), "dot: length mismatch");
  Real acc = Real(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// y = W x + b.
template <class Real>
Vec<Real> affine(const Vec<Real>& x, const AffineParamsT<Real>& p) {
  detail::check(p.W.cols == x.size(),
                "affine: input length " + std::to_string(x.size()) +
                    " does not match weight cols " + std::to_string(p.W.cols));
  detail::check(p.W.rows == p.b.size(),
                "affine: bias length " + std::to_string(p.b.size()) +
                    " does not match weight rows " + std::to_string(p.W.rows));
  Vec<Real> y = matvec(p.W, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += p.b[i];
  return y;
}

// Accumulates dW += dy x^T, db += dy, and optionally dx += W^T dy.
template <class Real>
void affine_backward(const Vec<Real>& x, const AffineParamsT<Real>& p,
                     const Vec<Real>& dy, AffineParamsT<Real>& grad,
                     Vec<Real>* dx) {
  outer_add(dy, x, grad.W);
  add_into(dy, grad.b);
  if (dx) matvec_transpose_add(p.W, dy, *dx);
}

// Numerically stable softmax (max subtraction).
template <class Real>
Vec<Real> softmax(const Vec<Real>& z) {
  if (z.empty()) throw DomainError("softmax: empty input");
  Real m = z[0];
  for (Real v : z)
    if (v > m) m = v;
  Vec<Real> y(z.size());
  Real sum = Real(0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    y[i] = std::exp(z[i] - m);
    sum += y[i];
  }
  for (Real& v : y) v /= sum;
  return y;
}

// dz_i = y_i * (dy_i - sum_j y_j dy_j), where y = softmax(z).
template <class Real>
Vec<Real> softmax_backward(const Vec<Real>& y, const Vec<Real>& dy) {
  detail::check(y.size() == dy.size(), "softmax_backward: length mismatch");
  Real inner = Real(0);
  for (std::size_t i = 0; i < y.size(); ++i) inner += y[i] * dy[i];
  Vec<Real> dz(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dz[i] = y[i] * (dy[i] - inner);
  return dz;
}

template <class Real>
Vec<Real> relu(const Vec<Real>& a) {
  Vec<Real> y(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] > Real(0) ? a[i] : Real(0);
  return y;
}

// dx_i = a_i > 0 ? dy_i : 0 with a the pre-activation.
template <class Real>
Vec<Real> relu_backward(const Vec<Real>& a, const Vec<Real>& dy) {
  detail::check(a.size() == dy.size(), "relu_backward: length mismatch");
  Vec<Real> dx(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    dx[i] = a[i] > Real(0) ? dy[i] : Real(0);
  return dx;
}

template <class Real>
Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

// Forward activations kept for the backward pass.
template <class Real>
struct GruCache {
  Vec<Real> z, r, h_tilde, h;
};

// z = sigma(W_z x + U_z h_prev + b_z)
// r = sigma(W_r x + U_r h_prev + b_r)
// h_tilde = tanh(W_h x + U_h (r .* h_prev) + b_h)
// h = (1 - z) .* h_prev + z .* h_tilde
template <class Real>
GruCache<Real> gru_forward(const Vec<Real>& x, const Vec<Real>& h_prev,
                           const GruParamsT<Real>& p) {
  detail::check(p.W_z.cols == x.size(),
                "gru: input length " + std::to_string(x.size()) +
                    " does not match W_z cols " + std::to_string(p.W_z.cols));
  detail::check(p.U_z.cols == h_prev.size(),
                "gru: hidden length " + std::to_string(h_prev.size()) +
                    " does not match U_z cols " + std::to_string(p.U_z.cols));
  const std::size_t hidden = h_prev.size();
  GruCache<Real> c;
  Vec<Real> az = matvec(p.W_z, x);
  Vec<Real> ar = matvec(p.W_r, x);
  {
    Vec<Real> t = matvec(p.U_z, h_prev);
    for (std::size_t i = 0; i < hidden; ++i) az[i] += t[i] + p.b_z[i];
    t = matvec(p.U_r, h_prev);
    for (std::size_t i = 0; i < hidden; ++i) ar[i] += t[i] + p.b_r[i];
  }
  c.z.resize(hidden);
  c.r.resize(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    c.z[i] = sigmoid(az[i]);
    c.r[i] = sigmoid(ar[i]);
  }
  Vec<Real> rh(hidden);
  for (std::size_t i = 0; i < hidden; ++i) rh[i] = c.r[i] * h_prev[i];
  Vec<Real> ah = matvec(p.W_h, x);
  {
    Vec<Real> t = matvec(p.U_h, rh);
    for (std::size_t i = 0; i < hidden; ++i) ah[i] += t[i] + p.b_h[i];
  }
  c.h_tilde.resize(hidden);
  c.h.resize(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    c.h_tilde[i] = std::tanh(ah[i]);
    c.h[i] = (Real(1) - c.z[i]) * h_prev[i] + c.z[i] * c.h_tilde[i];
  }
  return c;
}

template <class Real>
Vec<Real> gru_cell(const Vec<Real>& x, const Vec<Real>& h_prev,
                   const GruParamsT<Real>& p) {
  return gru_forward(x, h_prev, p).h;
}

// Accumulates parameter gradients into `grad`, input gradient into *dx (when
// non-null), and the gradient w.r.t. h_prev into dh_prev.
template <class Real>
void gru_backward(const Vec<Real>& x, const Vec<Real>& h_prev,
                  const GruParamsT<Real>& p, const GruCache<Real>& c,
                  const Vec<Real>& dh, GruParamsT<Real>& grad, Vec<Real>* dx,
                  Vec<Real>& dh_prev) {
  const std::size_t hidden = h_prev.size();
  detail::check(dh.size() == hidden && dh_prev.size() == hidden,
                "gru_backward: hidden length mismatch");

  Vec<Real> dz(hidden), dht(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    dz[i] = dh[i] * (c.h_tilde[i] - h_prev[i]);
    dht[i] = dh[i] * c.z[i];
    dh_prev[i] += dh[i] * (Real(1) - c.z[i]);
  }

  // Candidate branch.
  Vec<Real> dah(hidden);
  for (std::size_t i = 0; i < hidden; ++i)
    dah[i] = dht[i] * (Real(1) - c.h_tilde[i] * c.h_tilde[i]);
  Vec<Real> rh(hidden);
  for (std::size_t i = 0; i < hidden; ++i) rh[i] = c.r[i] * h_prev[i];
  outer_add(dah, x, grad.W_h);
  outer_add(dah, rh, grad.U_h);
  add_into(dah, grad.b_h);
  Vec<Real> drh(hidden, Real(0));
  matvec_transpose_add(p.U_h, dah, drh);
  Vec<Real> dr(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    dr[i] = drh[i] * h_prev[i];
    dh_prev[i] += drh[i] * c.r[i];
  }

  // Reset gate.
  Vec<Real> dar(hidden);
  for (std::size_t i = 0; i < hidden; ++i)
    dar[i] = dr[i] * c.r[i] * (Real(1) - c.r[i]);
  outer_add(dar, x, grad.W_r);
  outer_add(dar, h_prev, grad.U_r);
  add_into(dar, grad.b_r);
  matvec_transpose_add(p.U_r, dar, dh_prev);

  // Update gate.
  Vec<Real> daz(hidden);
  for (std::size_t i = 0; i < hidden; ++i)
    daz[i] = dz[i] * c.z[i] * (Real(1) - c.z[i]);
  outer_add(daz, x, grad.W_z);
  outer_add(daz, h_prev, grad.U_z);
  add_into(daz, grad.b_z);
  matvec_transpose_add(p.U_z, daz, dh_prev);

  if (dx) {
    matvec_transpose_add(p.W_z, daz, *dx);
    matvec_transpose_add(p.W_r, dar, *dx);
    matvec_transpose_add(p.W_h, dah, *dx);
  }
}

// ---------------------------------------------------------------------------
// Parameter traversal. Every parameter container exposes its scalars in one
// fixed order; gradient bundles are shape-congruent copies of the container.
// ---------------------------------------------------------------------------

template <class Real, class Fn>
void for_each_param(Vec<Real>& v, Fn&& fn) {
  for (Real& x : v) fn(x);
}

template <class Real, class Fn>
void for_each_param(Mat<Real>& m, Fn&& fn) {
  for (Real& x : m.d) fn(x);
}

template <class Real, class Fn>
void for_each_param(AffineParamsT<Real>& p, Fn&& fn) {
  for_each_param(p.W, fn);
  for_each_param(p.b, fn);
}

template <class Real, class Fn>
void for_each_param(GruParamsT<Real>& p, Fn&& fn) {
  for_each_param(p.W_z, fn);
  for_each_param(p.W_r, fn);
  for_each_param(p.W_h, fn);
  for_each_param(p.U_z, fn);
  for_each_param(p.U_r, fn);
  for_each_param(p.U_h, fn);
  for_each_param(p.b_z, fn);
  for_each_param(p.b_r, fn);
  for_each_param(p.b_h, fn);
}

namespace detail {

template <class C>
struct scalar_of {
  using type = typename C::scalar_type;
};
template <class Real>
struct scalar_of<std::vector<Real>> {
  using type = Real;
};
template <class Real>
struct scalar_of<Mat<Real>> {
  using type = Real;
};

}  // namespace detail

template <class C>
using scalar_t = typename detail::scalar_of<C>::type;

template <class C>
std::vector<scalar_t<C>*> collect_params(C& c) {
  std::vector<scalar_t<C>*> out;
  for_each_param(c, [&](scalar_t<C>& x) { out.push_back(&x); });
  return out;
}

template <class C>
void zero_params(C& c) {
  for_each_param(c, [](scalar_t<C>& x) { x = scalar_t<C>(0); });
}

// Shape-congruent zero bundle for gradient accumulation.
template <class C>
C make_gradient_bundle(const C& like) {
  C g = like;
  zero_params(g);
  return g;
}

// Central differences (f(p + step e_k) - f(p - step e_k)) / (2 step) for
// every scalar slot of the container, in traversal order. `f` must be
// deterministic; a non-finite evaluation aborts with the offending index.
template <class C, class F>
C finite_diff_gradient(F&& f, C params, scalar_t<C> step) {
  using Real = scalar_t<C>;
  if (!(step > Real(0)))
    throw DomainError("finite_diff_gradient: step must be positive");
  C grads = make_gradient_bundle(params);
  auto xs = collect_params(params);
  auto gs = collect_params(grads);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Real saved = *xs[k];
    *xs[k] = saved + step;
    const Real fp = f(static_cast<const C&>(params));
    *xs[k] = saved - step;
    const Real fm = f(static_cast<const C&>(params));
    *xs[k] = saved;
    if (!std::isfinite(static_cast<double>(fp)) ||
        !std::isfinite(static_cast<double>(fm)))
      throw NumericError(
          "finite_diff_gradient: non-finite evaluation at parameter index " +
          std::to_string(k));
    *gs[k] = (fp - fm) / (Real(2) * step);
  }
  return grads;
}

// Largest per-entry relative error between two shape-congruent containers.
// Entries where both magnitudes fall below `floor` compare against `floor`
// instead, so near-zero gradients are judged on an absolute scale.
template <class C>
double max_rel_error(const C& a, const C& b, double floor = 1e-6) {
  C& ma = const_cast<C&>(a);
  C& mb = const_cast<C&>(b);
  auto xa = collect_params(ma);
  auto xb = collect_params(mb);
  detail::check(xa.size() == xb.size(), "max_rel_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < xa.size(); ++i) {
    const double va = static_cast<double>(*xa[i]);
    const double vb = static_cast<double>(*xb[i]);
    const double denom = std::max({std::fabs(va), std::fabs(vb), floor});
    worst = std::max(worst, std::fabs(va - vb) / denom);
  }
  return worst;
}

}  // namespace amnet
