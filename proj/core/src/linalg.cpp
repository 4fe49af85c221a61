#include "astra/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "astra/error.hpp"

namespace astra {

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double DenseMatrix::frobenius() const {
  double s = 0.0;
  for (double v : data) s += v * v;
  return std::sqrt(s);
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols != b.rows)
    throw DimensionError("matmul: inner dimensions disagree (" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + ")");
  DenseMatrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = &b.data[k * b.cols];
      double* crow = &c.data[i * c.cols];
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

std::vector<double> matvec(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.cols) throw DimensionError("matvec: vector length mismatch");
  std::vector<double> y(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* row = &a.data[i * a.cols];
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) s += row[j] * x[j];
    y[i] = s;
  }
  return y;
}

std::vector<double> matvec_transpose(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.rows) throw DimensionError("matvec_transpose: vector length mismatch");
  std::vector<double> y(a.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* row = &a.data[i * a.cols];
    for (std::size_t j = 0; j < a.cols; ++j) y[j] += row[j] * xi;
  }
  return y;
}

// --- cyclic Jacobi ----------------------------------------------------------

EigenPair sym_eigh(const DenseMatrix& m_in) {
  if (m_in.rows != m_in.cols) throw DimensionError("sym_eigh: matrix not square");
  const std::size_t n = m_in.rows;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m_in(i, j) - m_in(j, i)) >
          1e-10 * std::max(1.0, m_in.frobenius()))
        throw DimensionError("sym_eigh: matrix is not symmetric");

  DenseMatrix a = m_in;
  DenseMatrix q = DenseMatrix::identity(n);
  const double fnorm = a.frobenius();
  const double tol = 1e-12 * std::max(fnorm, 1e-300);

  auto max_offdiag = [&]() {
    double mx = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) mx = std::max(mx, std::abs(a(i, j)));
    return mx;
  };

  int sweep = 0;
  const int max_sweeps = 100;
  while (max_offdiag() > tol) {
    if (++sweep > max_sweeps)
      throw NumericError("sym_eigh: Jacobi failed to converge in " +
                         std::to_string(max_sweeps) + " sweeps");
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t qq = p + 1; qq < n; ++qq) {
        const double apq = a(p, qq);
        if (std::abs(apq) <= tol) continue;
        const double app = a(p, p);
        const double aqq = a(qq, qq);
        // Rotation angle from the standard stable formulas.
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        // A <- J^T A J applied to rows/cols p and q.
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, qq);
          a(k, p) = c * akp - s * akq;
          a(k, qq) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(qq, k);
          a(p, k) = c * apk - s * aqk;
          a(qq, k) = s * apk + c * aqk;
        }
        // Accumulate eigenvectors: Q <- Q J.
        for (std::size_t k = 0; k < n; ++k) {
          const double qkp = q(k, p);
          const double qkq = q(k, qq);
          q(k, p) = c * qkp - s * qkq;
          q(k, qq) = s * qkp + c * qkq;
        }
      }
    }
  }

  // Sort ascending, permuting eigenvector columns alongside.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = a(i, i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return diag[x] < diag[y]; });

  EigenPair out;
  out.values.resize(n);
  out.basis = DenseMatrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = diag[order[j]];
    for (std::size_t i = 0; i < n; ++i) out.basis(i, j) = q(i, order[j]);
  }
  return out;
}

std::vector<double> cholesky_solve(const DenseMatrix& s, std::span<const double> b) {
  if (s.rows != s.cols) throw DimensionError("cholesky_solve: matrix not square");
  if (b.size() != s.rows) throw DimensionError("cholesky_solve: rhs length mismatch");
  const std::size_t n = s.rows;
  DenseMatrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = s(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0))
      throw NumericError("cholesky_solve: matrix is not positive definite at pivot " +
                         std::to_string(j));
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = s(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / l(j, j);
    }
  }
  // Forward then backward substitution.
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = b[i];
    for (std::size_t k = 0; k < i; ++k) v -= l(i, k) * y[k];
    y[i] = v / l(i, i);
  }
  std::vector<double> x(n);
  for (std::size_t ii = n; ii > 0; --ii) {
    const std::size_t i = ii - 1;
    double v = y[i];
    for (std::size_t k = i + 1; k < n; ++k) v -= l(k, i) * x[k];
    x[i] = v / l(i, i);
  }
  return x;
}

std::vector<double> kron_apply(const DenseMatrix& a, const DenseMatrix& b,
                               std::span<const double> v) {
  if (v.size() != a.cols * b.cols)
    throw DimensionError("kron_apply: vector length " + std::to_string(v.size()) +
                         " != a.cols*b.cols = " + std::to_string(a.cols * b.cols));
  // v = vec(V), V is b.cols x a.cols stored by columns: V(i,j) = v[j*b.cols + i].
  // W = B V  (b.rows x a.cols)
  DenseMatrix w(b.rows, a.cols);
  for (std::size_t j = 0; j < a.cols; ++j) {
    const double* vcol = &v[j * b.cols];
    for (std::size_t i = 0; i < b.rows; ++i) {
      const double* brow = &b.data[i * b.cols];
      double s = 0.0;
      for (std::size_t k = 0; k < b.cols; ++k) s += brow[k] * vcol[k];
      w(i, j) = s;
    }
  }
  // R = W A^T (b.rows x a.rows); out = vec(R) column-major.
  std::vector<double> out(a.rows * b.rows, 0.0);
  for (std::size_t j = 0; j < a.rows; ++j) {
    const double* arow = &a.data[j * a.cols];
    double* ocol = &out[j * b.rows];
    for (std::size_t i = 0; i < b.rows; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += w(i, k) * arow[k];
      ocol[i] = s;
    }
  }
  return out;
}

std::vector<double> average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    // Positions i..j (0-based) share the value; average of 1-based ranks.
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  if (x.size() < 2) throw DimensionError("spearman: need at least two observations");
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("spearman: non-finite value in x");
  for (double v : y)
    if (!std::isfinite(v)) throw NumericError("spearman: non-finite value in y");

  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = rx[i] - mx;
    const double dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw NumericError("spearman: constant input vector, correlation undefined");
  return sxy / std::sqrt(sxx * syy);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

void scale(double alpha, std::span<double> x) {
  for (double& v : x) v *= alpha;
}

}  // namespace astra
