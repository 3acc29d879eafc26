#include "merlin/quadrature.hpp"

#include <algorithm>
#include <cmath>

#include "merlin/error.hpp"

namespace merlin {

namespace {

// Eigenvalues and first-component weights of a symmetric tridiagonal matrix
// with zero diagonal.
void golub_welsch(const std::vector<double>& offdiag, std::vector<double>& x, std::vector<double>& w) {
  const Eigen::Index n = static_cast<Eigen::Index>(offdiag.size()) + 1;
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sub(std::max<Eigen::Index>(n - 1, 0));
  for (Eigen::Index i = 0; i + 1 < n; ++i) sub(i) = offdiag[i];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  x.resize(n);
  w.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x[i] = es.eigenvalues()(i);
    w[i] = es.eigenvectors()(0, i) * es.eigenvectors()(0, i);
  }
}

void symmetrize(std::vector<double>& x, std::vector<double>& w) {
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n / 2; ++i) {
    double xm = 0.5 * (x[n - 1 - i] - x[i]);
    double wm = 0.5 * (w[i] + w[n - 1 - i]);
    x[i] = -xm;
    x[n - 1 - i] = xm;
    w[i] = w[n - 1 - i] = wm;
  }
  if (n % 2) x[n / 2] = 0.0;
}

// Orthonormal Hermite polynomials (probabilists'), values of degree n and n-1.
void hermite_pair(int n, double x, double& pn, double& pn1) {
  double p0 = 1.0, p1 = x;
  if (n == 0) {
    pn = 1.0;
    pn1 = 0.0;
    return;
  }
  for (int k = 1; k < n; ++k) {
    double p2 = (x * p1 - std::sqrt(static_cast<double>(k)) * p0) / std::sqrt(k + 1.0);
    p0 = p1;
    p1 = p2;
  }
  pn = p1;
  pn1 = p0;
}

// Legendre P_n and P_n' at x.
void legendre_pair(int n, double x, double& pn, double& dpn) {
  double p0 = 1.0, p1 = x;
  if (n == 0) {
    pn = 1.0;
    dpn = 0.0;
    return;
  }
  for (int k = 1; k < n; ++k) {
    double p2 = ((2 * k + 1) * x * p1 - k * p0) / (k + 1);
    p0 = p1;
    p1 = p2;
  }
  pn = p1;
  dpn = n * (x * p1 - p0) / (x * x - 1);
}

}  // namespace

QuadratureRule gauss_hermite(int n) {
  if (n < 1) throw ValidationError("Gauss-Hermite rule needs at least one node");
  std::vector<double> off(n - 1);
  for (int k = 1; k < n; ++k) off[k - 1] = std::sqrt(static_cast<double>(k));
  QuadratureRule r;
  r.kind = QuadratureRule::Kind::hermite;
  golub_welsch(off, r.nodes, r.weights);
  for (int i = 0; i < n; ++i) {
    double x = r.nodes[i];
    for (int it = 0; it < 10; ++it) {
      double pn, pn1;
      hermite_pair(n, x, pn, pn1);
      double dx = pn / (std::sqrt(static_cast<double>(n)) * pn1);
      x -= dx;
      if (std::abs(dx) < 1e-15 * std::max(1.0, std::abs(x))) break;
    }
    double pn, pn1;
    hermite_pair(n, x, pn, pn1);
    r.nodes[i] = x;
    if (n > 1) r.weights[i] = 1.0 / (n * pn1 * pn1);
  }
  symmetrize(r.nodes, r.weights);
  double total = 0;
  for (double w : r.weights) total += w;
  for (double& w : r.weights) w /= total;
  return r;
}

QuadratureRule gauss_legendre(int n, double a, double b) {
  if (n < 1) throw ValidationError("Gauss-Legendre rule needs at least one node");
  if (!(b > a)) throw ValidationError("Gauss-Legendre rule needs a < b");
  std::vector<double> off(n - 1);
  for (int k = 1; k < n; ++k) off[k - 1] = k / std::sqrt(4.0 * k * k - 1.0);
  QuadratureRule r;
  r.kind = QuadratureRule::Kind::legendre;
  golub_welsch(off, r.nodes, r.weights);
  for (int i = 0; i < n; ++i) {
    double x = r.nodes[i];
    if (n > 1) {
      for (int it = 0; it < 10; ++it) {
        double pn, dpn;
        legendre_pair(n, x, pn, dpn);
        double dx = pn / dpn;
        x -= dx;
        if (std::abs(dx) < 1e-16) break;
      }
      double pn, dpn;
      legendre_pair(n, x, pn, dpn);
      r.weights[i] = 2.0 / ((1 - x * x) * dpn * dpn);
    } else {
      r.weights[i] = 2.0;
    }
    r.nodes[i] = x;
  }
  symmetrize(r.nodes, r.weights);
  const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  for (int i = 0; i < n; ++i) {
    r.nodes[i] = mid + half * r.nodes[i];
    r.weights[i] *= half;
  }
  return r;
}

QuadratureRule graded_unit_rule(int n) {
  QuadratureRule gl = gauss_legendre(n, 0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    double s = gl.nodes[i];
    gl.weights[i] *= 4 * s * s * s;
    gl.nodes[i] = s * s * s * s;
  }
  return gl;
}

TensorRule tensor_rule(const QuadratureRule& base, std::size_t dim) {
  TensorRule t;
  t.dim = dim;
  const std::size_t n = base.size();
  std::size_t total = 1;
  for (std::size_t d = 0; d < dim; ++d) total *= n;
  t.nodes.resize(total * dim);
  t.log_weights.resize(total);
  std::vector<double> logw(n);
  for (std::size_t i = 0; i < n; ++i) logw[i] = std::log(base.weights[i]);
  for (std::size_t k = 0; k < total; ++k) {
    std::size_t rem = k;
    double lw = 0;
    // first dimension varies slowest
    for (std::size_t d = dim; d-- > 0;) {
      std::size_t idx = rem % n;
      rem /= n;
      t.nodes[k * dim + d] = base.nodes[idx];
      lw += logw[idx];
    }
    t.log_weights[k] = lw;
  }
  return t;
}

TensorRule adapt_rule(const TensorRule& base, const Eigen::VectorXd& mode, const Eigen::MatrixXd& chol) {
  const std::size_t q = base.dim;
  if (static_cast<std::size_t>(mode.size()) != q || static_cast<std::size_t>(chol.rows()) != q)
    throw ValidationError("adapt_rule: dimension mismatch");
  double logdet = 0;
  for (std::size_t i = 0; i < q; ++i) {
    if (!(chol(i, i) > 0)) throw NumericalError("adapt_rule: singular scale matrix");
    logdet += std::log(chol(i, i));
  }
  TensorRule t;
  t.dim = q;
  t.nodes.resize(base.nodes.size());
  t.log_weights.resize(base.size());
  for (std::size_t k = 0; k < base.size(); ++k) {
    const double* x = base.node(k);
    double* z = t.nodes.data() + k * q;
    double xx = 0, zz = 0;
    for (std::size_t i = 0; i < q; ++i) {
      double s = mode(i);
      for (std::size_t j = 0; j <= i; ++j) s += chol(i, j) * x[j];
      z[i] = s;
      xx += x[i] * x[i];
      zz += s * s;
    }
    t.log_weights[k] = base.log_weights[k] + 0.5 * xx - 0.5 * zz + logdet;
  }
  return t;
}

}  // namespace merlin
