#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace astra {

// Row-major dense matrix of doubles.  Small-to-medium sizes only; every
// curvature object this library materializes densely is guarded well below
// the point where a blocked BLAS would matter.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // rows * cols, row-major

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static DenseMatrix identity(std::size_t n);

  // Frobenius norm.
  double frobenius() const;
};

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& a);

// y = A x
std::vector<double> matvec(const DenseMatrix& a, std::span<const double> x);
// y = A^T x
std::vector<double> matvec_transpose(const DenseMatrix& a, std::span<const double> x);

// Symmetric eigendecomposition M = Q diag(w) Q^T by the cyclic Jacobi
// rotation method.  Eigenvalues ascending, columns of `basis` are the
// matching orthonormal eigenvectors.  Convergence: max |off-diagonal|
// below 1e-12 * ||M||_F, hard cap of 100 sweeps (NumericError beyond it).
struct EigenPair {
  DenseMatrix basis;           // n x n, eigenvectors in columns
  std::vector<double> values;  // ascending
};
EigenPair sym_eigh(const DenseMatrix& m);

// Solve S x = b for symmetric positive-definite S by Cholesky factorization.
// Throws NumericError if a pivot is not strictly positive.
std::vector<double> cholesky_solve(const DenseMatrix& s, std::span<const double> b);

// Kronecker-structured product (A (x) B) v without materializing A (x) B:
// reshape v column-major into V with b.cols rows and a.cols columns, return
// vec(B V A^T) in the same column-major convention.
std::vector<double> kron_apply(const DenseMatrix& a, const DenseMatrix& b,
                               std::span<const double> v);

// Average ranks (1-based; ties get the mean of the positions they occupy).
std::vector<double> average_ranks(std::span<const double> x);

// Spearman rank correlation: average-rank ties, then Pearson on the ranks.
// A constant input vector has no defined correlation -> NumericError.
double spearman(std::span<const double> x, std::span<const double> y);

// --- flat-vector helpers shared by the solvers -----------------------------

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void scale(double alpha, std::span<double> x);

}  // namespace astra
