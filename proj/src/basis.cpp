#include "merlin/basis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <string>

#include "merlin/error.hpp"

namespace merlin {

namespace {

std::atomic<std::size_t> g_bs_outside{0};

double pos(double a) { return a > 0 ? a : 0; }

// (u-k)^3_+ and its derivatives
double tp3(double u, double k, int deriv) {
  double a = pos(u - k);
  switch (deriv) {
    case 0: return a * a * a;
    case 1: return 3 * a * a;
    default: return 6 * a;
  }
}

void check_deriv(int deriv) {
  if (deriv < 0 || deriv > 2) throw ValidationError("derivative order must be 0, 1 or 2");
}

void check_ascending(const std::vector<double>& k, const char* what) {
  for (std::size_t i = 1; i < k.size(); ++i)
    if (!(k[i] > k[i - 1])) throw ValidationError(std::string(what) + ": knots must be strictly ascending");
}

}  // namespace

std::vector<double> KnotVector::all() const {
  std::vector<double> k;
  k.push_back(lower);
  k.insert(k.end(), interior.begin(), interior.end());
  k.push_back(upper);
  return k;
}

double quantile_sorted(const std::vector<double>& v, double p) {
  if (v.empty()) throw ValidationError("quantile of an empty sample");
  double h = (v.size() - 1) * p;
  std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - lo) * (v[lo + 1] - v[lo]);
}

KnotVector place_knots(std::span<const double> values, int df,
                       const std::vector<std::uint8_t>* event_mask, bool log) {
  if (df < 1) throw ValidationError("df must be at least 1");
  if (values.empty()) throw ValidationError("cannot place knots without data");
  if (event_mask && event_mask->size() != values.size())
    throw ValidationError("event mask length mismatch");
  std::vector<double> all, sel;
  all.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    double x = values[i];
    if (log) {
      if (!(x > 0)) throw ValidationError("log-scale spline needs positive values");
      x = std::log(x);
    }
    all.push_back(x);
    if (!event_mask || (*event_mask)[i]) sel.push_back(x);
  }
  std::sort(all.begin(), all.end());
  std::sort(sel.begin(), sel.end());
  KnotVector kv;
  kv.log = log;
  kv.lower = all.front();
  kv.upper = all.back();
  std::vector<double> uniq = sel;
  const std::size_t distinct = std::unique(uniq.begin(), uniq.end()) - uniq.begin();
  if (static_cast<std::size_t>(df - 1) >= std::max<std::size_t>(distinct, 1) && df > 1)
    throw ValidationError("df(" + std::to_string(df) + ") needs more distinct values than available (" +
                          std::to_string(distinct) + ")");
  for (int k = 1; k < df; ++k) kv.interior.push_back(quantile_sorted(sel, static_cast<double>(k) / df));
  auto knots = kv.all();
  for (std::size_t i = 1; i < knots.size(); ++i)
    if (!(knots[i] > knots[i - 1]))
      throw ValidationError("duplicate knots after centile placement; reduce df()");
  return kv;
}

KnotVector knots_from_list(const std::vector<double>& knots, bool log) {
  if (knots.size() < 2) throw ValidationError("knots() needs both boundary knots");
  std::vector<double> k = knots;
  if (log)
    for (double& x : k) {
      if (!(x > 0)) throw ValidationError("log-scale knots must be positive");
      x = std::log(x);
    }
  check_ascending(k, "knots()");
  KnotVector kv;
  kv.log = log;
  kv.lower = k.front();
  kv.upper = k.back();
  kv.interior.assign(k.begin() + 1, k.end() - 1);
  return kv;
}

void rcs_row(double u, const KnotVector& kv, int deriv, double* out) {
  check_deriv(deriv);
  out[0] = deriv == 0 ? u : deriv == 1 ? 1.0 : 0.0;
  const double kmin = kv.lower, kmax = kv.upper;
  for (std::size_t j = 0; j < kv.interior.size(); ++j) {
    double kj = kv.interior[j];
    double lam = (kmax - kj) / (kmax - kmin);
    out[j + 1] = tp3(u, kj, deriv) - lam * tp3(u, kmin, deriv) - (1 - lam) * tp3(u, kmax, deriv);
  }
}

Eigen::MatrixXd rcs_eval(std::span<const double> x, const KnotVector& kv, int deriv) {
  check_deriv(deriv);
  Eigen::MatrixXd m(x.size(), kv.interior.size() + 1);
  std::vector<double> row(m.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double u = x[i];
    if (kv.log) {
      if (!(u > 0)) throw ValidationError("log-scale spline evaluated at a nonpositive value");
      u = std::log(u);
    }
    rcs_row(u, kv, deriv, row.data());
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = row[c];
  }
  return m;
}

std::size_t bs_columns(std::size_t n_interior, bool intercept) {
  return n_interior + 4 - (intercept ? 0 : 1);
}

namespace {

// All cubic B-spline values (and derivatives) at x for the clamped knot
// sequence; returns n_interior + 4 entries.
void bspline_all(double x, const std::vector<double>& interior, double lower, double upper,
                 int deriv, std::vector<double>& out) {
  constexpr int p = 3;
  std::vector<double> t;
  t.reserve(interior.size() + 8);
  for (int i = 0; i <= p; ++i) t.push_back(lower);
  t.insert(t.end(), interior.begin(), interior.end());
  for (int i = 0; i <= p; ++i) t.push_back(upper);
  const std::size_t nt = t.size();
  const std::size_t nb = nt - p - 1;
  out.assign(nb, 0.0);
  if (x < lower || x > upper) {
    ++g_bs_outside;
    return;
  }
  // N[k][i] for degree k
  std::vector<std::vector<double>> N(p + 1);
  N[0].assign(nt - 1, 0.0);
  std::size_t span = 0;
  if (x >= upper) {
    span = nt - p - 2;  // last non-degenerate interval
  } else {
    for (std::size_t i = 0; i + 1 < nt; ++i)
      if (t[i] <= x && x < t[i + 1]) span = i;
  }
  N[0][span] = 1.0;
  for (int k = 1; k <= p; ++k) {
    N[k].assign(nt - k - 1, 0.0);
    for (std::size_t i = 0; i + k + 1 < nt; ++i) {
      double a = 0, b = 0;
      double d1 = t[i + k] - t[i];
      double d2 = t[i + k + 1] - t[i + 1];
      if (d1 > 0) a = (x - t[i]) / d1 * N[k - 1][i];
      if (d2 > 0) b = (t[i + k + 1] - x) / d2 * N[k - 1][i + 1];
      N[k][i] = a + b;
    }
  }
  // derivative recursion
  std::function<double(std::size_t, int, int)> d = [&](std::size_t i, int k, int order) -> double {
    if (order == 0) return N[k][i];
    double r = 0;
    double d1 = t[i + k] - t[i];
    double d2 = t[i + k + 1] - t[i + 1];
    if (d1 > 0) r += d(i, k - 1, order - 1) / d1;
    if (d2 > 0) r -= d(i + 1, k - 1, order - 1) / d2;
    return k * r;
  };
  for (std::size_t i = 0; i < nb; ++i) out[i] = d(i, p, deriv);
}

}  // namespace

void bs_row(double x, const std::vector<double>& interior, double lower, double upper,
            bool intercept, int deriv, double* out) {
  check_deriv(deriv);
  std::vector<double> all;
  bspline_all(x, interior, lower, upper, deriv, all);
  std::size_t skip = intercept ? 0 : 1;
  for (std::size_t i = skip; i < all.size(); ++i) out[i - skip] = all[i];
}

Eigen::MatrixXd bs_eval(std::span<const double> x, const std::vector<double>& interior,
                        double lower, double upper, bool intercept, int deriv) {
  check_ascending(interior, "bs()");
  if (!(upper > lower)) throw ValidationError("bs(): boundary knots must be ascending");
  for (double k : interior)
    if (!(k > lower && k < upper)) throw ValidationError("bs(): interior knots must lie inside the boundary knots");
  Eigen::MatrixXd m(x.size(), bs_columns(interior.size(), intercept));
  std::vector<double> row(m.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    bs_row(x[i], interior, lower, upper, intercept, deriv, row.data());
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = row[c];
  }
  return m;
}

std::size_t bs_outside_count() { return g_bs_outside.load(); }

void fp_row(double x, const std::vector<double>& powers, int deriv, double* out) {
  check_deriv(deriv);
  for (std::size_t j = 0; j < powers.size(); ++j) {
    const double p = powers[j];
    const bool repeated = j > 0 && powers[j] == powers[j - 1];
    const bool needs_log = p == 0 || repeated;
    const bool integer_pos = p == 1 || p == 2 || p == 3;
    if (!(x > 0) && (needs_log || !integer_pos))
      throw ValidationError("fp(): argument must be positive for power " + std::to_string(p));
    if (!repeated) {
      if (p == 0) {
        out[j] = deriv == 0 ? std::log(x) : deriv == 1 ? 1 / x : -1 / (x * x);
      } else if (deriv == 0) {
        out[j] = std::pow(x, p);
      } else if (deriv == 1) {
        out[j] = p * std::pow(x, p - 1);
      } else {
        out[j] = p * (p - 1) * std::pow(x, p - 2);
      }
    } else {
      const double lx = std::log(x);
      if (p == 0) {
        out[j] = deriv == 0 ? lx * lx : deriv == 1 ? 2 * lx / x : (2 - 2 * lx) / (x * x);
      } else if (deriv == 0) {
        out[j] = std::pow(x, p) * lx;
      } else if (deriv == 1) {
        out[j] = std::pow(x, p - 1) * (p * lx + 1);
      } else {
        out[j] = std::pow(x, p - 2) * (p * (p - 1) * lx + 2 * p - 1);
      }
    }
  }
}

Eigen::MatrixXd fp_eval(std::span<const double> x, const std::vector<double>& powers, int deriv) {
  Eigen::MatrixXd m(x.size(), powers.size());
  std::vector<double> row(powers.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    fp_row(x[i], powers, deriv, row.data());
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = row[c];
  }
  return m;
}

void BasisTransform::apply(const double* raw, int deriv, double* out) const {
  const Eigen::Index p = m.rows() - 1;
  for (Eigen::Index k = 0; k < p; ++k) {
    double s = deriv == 0 ? m(0, k + 1) : 0.0;
    for (Eigen::Index i = 0; i <= k; ++i) s += raw[i] * m(i + 1, k + 1);
    out[k] = s;
  }
}

Eigen::MatrixXd BasisTransform::apply(const Eigen::MatrixXd& raw, int deriv) const {
  Eigen::MatrixXd out(raw.rows(), raw.cols());
  std::vector<double> r(raw.cols()), o(raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    for (Eigen::Index c = 0; c < raw.cols(); ++c) r[c] = raw(i, c);
    apply(r.data(), deriv, o.data());
    for (Eigen::Index c = 0; c < raw.cols(); ++c) out(i, c) = o[c];
  }
  return out;
}

std::pair<Eigen::MatrixXd, BasisTransform> orthogonalize(const Eigen::MatrixXd& raw) {
  const Eigen::Index n = raw.rows(), p = raw.cols();
  if (n == 0) throw ValidationError("orthogonalization needs data");
  Eigen::MatrixXd a(n, p + 1);
  a.col(0).setOnes();
  a.rightCols(p) = raw;
  Eigen::MatrixXd q = a;
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(p + 1, p + 1);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index j = 0; j <= p; ++j) {
    for (int pass = 0; pass < 2; ++pass)  // re-orthogonalize once for stability
      for (Eigen::Index i = 0; i < j; ++i) {
        double c = q.col(i).dot(q.col(j)) * inv_n;
        r(i, j) += c;
        q.col(j) -= c * q.col(i);
      }
    double nrm = std::sqrt(q.col(j).squaredNorm() * inv_n);
    double ref = std::sqrt(a.col(j).squaredNorm() * inv_n);
    if (!(nrm > 1e-10 * std::max(ref, 1.0)))
      throw ValidationError("orthog: basis columns are linearly dependent on these data");
    r(j, j) = nrm;
    q.col(j) /= nrm;
  }
  BasisTransform t;
  t.m = r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p + 1, p + 1));
  return {t.apply(raw, 0), t};
}

std::size_t FrozenBasis::columns() const {
  switch (kind) {
    case BasisKind::rcs: return knots.interior.size() + 1;
    case BasisKind::bs: return bs_columns(knots.interior.size(), intercept);
    case BasisKind::fp: return powers.size();
  }
  return 0;
}

void FrozenBasis::eval(double x, double* v, double* d1, double* d2) const {
  const std::size_t nc = columns();
  double raw0[16], raw1[16], raw2[16];
  std::vector<double> big;
  double* r0 = raw0;
  double* r1 = raw1;
  double* r2 = raw2;
  if (nc > 16) {
    big.resize(3 * nc);
    r0 = big.data();
    r1 = r0 + nc;
    r2 = r1 + nc;
  }
  auto raw = [&](double u, int deriv, double* out) {
    switch (kind) {
      case BasisKind::rcs: rcs_row(u, knots, deriv, out); break;
      case BasisKind::bs: bs_row(u, knots.interior, knots.lower, knots.upper, intercept, deriv, out); break;
      case BasisKind::fp: fp_row(u, powers, deriv, out); break;
    }
  };
  const bool logscale = kind != BasisKind::fp && knots.log;
  double u = x;
  if (logscale) {
    if (!(x > 0)) throw ValidationError("log-scale spline evaluated at a nonpositive value");
    u = std::log(x);
  }
  raw(u, 0, r0);
  if (d1 || d2) raw(u, 1, r1);
  if (d2) raw(u, 2, r2);
  if (logscale) {
    // chain rule through u = ln x
    for (std::size_t c = 0; c < nc; ++c) {
      double a1 = r1[c], a2 = d2 ? r2[c] : 0;
      if (d2) r2[c] = (a2 - a1) / (x * x);
      r1[c] = a1 / x;
    }
  }
  if (transform) {
    transform->apply(r0, 0, v);
    if (d1) transform->apply(r1, 1, d1);
    if (d2) transform->apply(r2, 2, d2);
  } else {
    std::copy(r0, r0 + nc, v);
    if (d1) std::copy(r1, r1 + nc, d1);
    if (d2) std::copy(r2, r2 + nc, d2);
  }
}

FrozenBasis build_basis(ElementKind kind, const BasisOptions& o, std::span<const double> x,
                        const std::vector<std::uint8_t>* events) {
  FrozenBasis b;
  switch (kind) {
    case ElementKind::rcs:
      b.kind = BasisKind::rcs;
      b.knots = o.df ? place_knots(x, *o.df, o.event ? events : nullptr, o.log) : knots_from_list(o.knots, o.log);
      break;
    case ElementKind::bs: {
      b.kind = BasisKind::bs;
      b.intercept = o.intercept;
      KnotVector kv;
      kv.log = o.log;
      if (!o.bknots.empty()) {
        kv = knots_from_list(o.bknots, o.log);
      } else {
        kv = place_knots(x, 1, nullptr, o.log);
      }
      if (o.df) {
        KnotVector placed = place_knots(x, *o.df, o.event ? events : nullptr, o.log);
        kv.interior = placed.interior;
      } else if (!o.knots.empty()) {
        for (double k : o.knots) {
          if (o.log && !(k > 0)) throw ValidationError("bs(): log-scale knots must be positive");
          kv.interior.push_back(o.log ? std::log(k) : k);
        }
      }
      check_ascending(kv.all(), "bs()");
      b.knots = kv;
      break;
    }
    case ElementKind::fp:
      b.kind = BasisKind::fp;
      b.powers = o.powers;
      break;
    default:
      throw ValidationError("not a basis element");
  }
  if (o.orthog) {
    Eigen::MatrixXd raw(x.size(), b.columns());
    std::vector<double> row(b.columns());
    for (std::size_t i = 0; i < x.size(); ++i) {
      b.eval(x[i], row.data(), nullptr, nullptr);
      for (Eigen::Index c = 0; c < raw.cols(); ++c) raw(i, c) = row[c];
    }
    b.transform = orthogonalize(raw).second;
  }
  return b;
}

}  // namespace merlin
