#ifndef SHORTLVLM_LINALG_HPP
#define SHORTLVLM_LINALG_HPP

// Dense row-major matrices and the handful of kernels the pruning pipeline
// needs. Storage is whatever T is (float for models, double in gradient
// checks); every reduction accumulates in double and sums in index order so
// results are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "shortlvlm/error.hpp"

namespace shortlvlm {

template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;

  BasicMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, T{}) {}

  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("linalg", "data length " + std::to_string(data_.size()) +
                                     " != " + std::to_string(rows_) + "x" +
                                     std::to_string(cols_));
    }
    if constexpr (std::is_floating_point_v<T>) {
      for (const T v : data_) {
        if (!std::isfinite(v)) {
          throw InputError("linalg", "non-finite entry in matrix data");
        }
      }
    }
  }

  BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("linalg", "ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    *this = BasicMatrix(rows_, cols_, std::move(data_));
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.values()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using Mask = BasicMatrix<unsigned char>;

namespace detail {

inline void require_same_shape(const auto& a, const auto& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("linalg", std::string(what) + ": " + std::to_string(a.rows()) + "x" +
                                   std::to_string(a.cols()) + " vs " +
                                   std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace detail

/// a·b accumulated in Acc. Each output entry sums k = 0..n-1 in order.
template <typename Acc, typename T>
BasicMatrix<T> matmul_acc(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("linalg", "matmul " + std::to_string(a.rows()) + "x" +
                                   std::to_string(a.cols()) + " by " + std::to_string(b.rows()) +
                                   "x" + std::to_string(b.cols()));
  }
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  BasicMatrix<T> out(n, m);
  std::vector<Acc> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), Acc{0});
    const auto arow = a.row(i);
    for (std::size_t k = 0; k < inner; ++k) {
      const Acc aik = static_cast<Acc>(arow[k]);
      const T* brow = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) acc[j] += aik * static_cast<Acc>(brow[j]);
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < m; ++j) orow[j] = static_cast<T>(acc[j]);
  }
  return out;
}

/// a·b with 64-bit accumulation.
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  return matmul_acc<double>(a, b);
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

/// a·bᵀ
template <typename Acc = double, typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  return matmul_acc<Acc>(a, transpose(b));
}

/// aᵀ·b, summing over the shared row index in order.
template <typename Acc = double, typename T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) throw ShapeError("linalg", "matmul_tn row mismatch");
  const std::size_t n = a.cols(), m = b.cols();
  std::vector<Acc> acc(n * m, Acc{0});
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const auto arow = a.row(k);
    const T* brow = b.row(k).data();
    for (std::size_t i = 0; i < n; ++i) {
      const Acc aki = static_cast<Acc>(arow[i]);
      if (aki == Acc{0}) continue;
      Acc* dst = acc.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) dst[j] += aki * static_cast<Acc>(brow[j]);
    }
  }
  BasicMatrix<T> out(n, m);
  for (std::size_t i = 0; i < acc.size(); ++i) out.values()[i] = static_cast<T>(acc[i]);
  return out;
}

template <typename T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require_same_shape(a, b, "add");
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += b.values()[i];
  return out;
}

template <typename T>
BasicMatrix<T> subtract(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require_same_shape(a, b, "subtract");
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] -= b.values()[i];
  return out;
}

template <typename T>
double frobenius_norm(const BasicMatrix<T>& m) {
  double s = 0.0;
  for (const T v : m.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("linalg", "dot length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

/// Row-wise softmax with max subtraction. Masked-out entries (mask == 0)
/// behave as -inf and come back as exactly 0.
template <typename T>
BasicMatrix<T> row_softmax(const BasicMatrix<T>& m, const Mask* mask = nullptr) {
  if (mask != nullptr) detail::require_same_shape(m, *mask, "row_softmax mask");
  BasicMatrix<T> out(m.rows(), m.cols());
  std::vector<double> e(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (mask == nullptr || (*mask)(i, j)) mx = std::max(mx, static_cast<double>(m(i, j)));
    if (!std::isfinite(mx)) {
      throw InputError("linalg", "row " + std::to_string(i) + " fully masked in softmax");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      e[j] = (mask == nullptr || (*mask)(i, j)) ? std::exp(static_cast<double>(m(i, j)) - mx) : 0.0;
      sum += e[j];
    }
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = static_cast<T>(e[j] / sum);
  }
  return out;
}

/// a·b / (‖a‖‖b‖), clamped to [-1, 1].
template <typename T>
double cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("linalg", "cosine length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa == 0.0 || bb == 0.0) throw InputError("linalg", "cosine of zero-norm vector");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  return cosine<float>(std::span<const float>(a), std::span<const float>(b));
}

struct SvdResult {
  Matrix u;                             // N×r
  std::vector<float> singular_values;   // r, descending
  Matrix vt;                            // r×D
  std::size_t rank() const noexcept { return singular_values.size(); }
};

struct SvdOptions {
  double tolerance = 1e-10;
  int max_sweeps = 100;
};

namespace detail {

// Column-major working copy; columns are the vectors being orthogonalized.
using Columns = std::vector<std::vector<double>>;

inline double col_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Replace null columns of `cols` (flagged in `valid`) by unit vectors
// orthogonal to every other column.
inline void complete_orthonormal(Columns& cols, std::vector<bool>& valid) {
  const std::size_t n = cols.empty() ? 0 : cols[0].size();
  std::size_t probe = 0;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (valid[j]) continue;
    while (probe < n) {
      std::vector<double> cand(n, 0.0);
      cand[probe++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t q = 0; q < cols.size(); ++q) {
          if (!valid[q]) continue;
          const double c = col_dot(cand, cols[q]);
          for (std::size_t i = 0; i < n; ++i) cand[i] -= c * cols[q][i];
        }
      }
      const double nrm = std::sqrt(col_dot(cand, cand));
      if (nrm > 1e-6) {
        for (double& v : cand) v /= nrm;
        cols[j] = std::move(cand);
        valid[j] = true;
        break;
      }
    }
  }
}

// One-sided (Hestenes) Jacobi on a tall matrix given as columns a[0..m).
// On return a[j] = σ_j u_j and v holds the accumulated rotations.
inline void hestenes(Columns& a, Columns& v, const SvdOptions& opt) {
  const std::size_t m = a.size();
  v.assign(m, std::vector<double>(m, 0.0));
  for (std::size_t j = 0; j < m; ++j) v[j][j] = 1.0;
  if (m < 2) return;
  double off = 0.0;
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    off = 0.0;
    for (std::size_t p = 0; p + 1 < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        const double alpha = col_dot(a[p], a[p]);
        const double beta = col_dot(a[q], a[q]);
        const double gamma = col_dot(a[p], a[q]);
        if (alpha == 0.0 || beta == 0.0 || gamma == 0.0) continue;
        const double ratio = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, ratio);
        if (ratio < opt.tolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        auto rotate = [c, s](std::vector<double>& x, std::vector<double>& y) {
          for (std::size_t i = 0; i < x.size(); ++i) {
            const double xi = x[i], yi = y[i];
            x[i] = c * xi - s * yi;
            y[i] = s * xi + c * yi;
          }
        };
        rotate(a[p], a[q]);
        rotate(v[p], v[q]);
      }
    }
    if (off < opt.tolerance) return;
  }
  throw NumericError("linalg", "Jacobi SVD did not converge in " +
                                   std::to_string(opt.max_sweeps) + " sweeps", off);
}

}  // namespace detail

/// Thin SVD m = U·diag(σ)·Vᵀ with r = min(rows, cols). Jacobi runs on the
/// smaller dimension; null singular directions are completed so U and V
/// both have orthonormal columns.
template <typename T>
SvdResult thin_svd(const BasicMatrix<T>& m, const SvdOptions& opt = {}) {
  if (m.rows() == 0 || m.cols() == 0) throw ShapeError("linalg", "thin_svd of empty matrix");
  const bool wide = m.rows() < m.cols();
  const std::size_t tall_rows = wide ? m.cols() : m.rows();
  const std::size_t r = wide ? m.rows() : m.cols();

  detail::Columns a(r, std::vector<double>(tall_rows));
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      const double x = static_cast<double>(m(i, j));
      if (!std::isfinite(x)) throw InputError("linalg", "thin_svd input not finite");
      if (wide) a[i][j] = x; else a[j][i] = x;
    }
  }
  detail::Columns v;
  detail::hestenes(a, v, opt);

  std::vector<double> sigma(r);
  for (std::size_t j = 0; j < r; ++j) sigma[j] = std::sqrt(detail::col_dot(a[j], a[j]));
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double smax = sigma[order[0]];
  const double cutoff = smax * static_cast<double>(tall_rows) * std::numeric_limits<double>::epsilon();
  detail::Columns left(r), right(r);
  std::vector<bool> valid(r, true);
  std::vector<double> sorted_sigma(r);
  for (std::size_t j = 0; j < r; ++j) {
    const std::size_t src = order[j];
    sorted_sigma[j] = sigma[src];
    right[j] = v[src];
    left[j] = a[src];
    if (sigma[src] <= cutoff || sigma[src] == 0.0) {
      valid[j] = false;
    } else {
      for (double& x : left[j]) x /= sigma[src];
    }
  }
  detail::complete_orthonormal(left, valid);

  // left: r vectors of length tall_rows; right: r vectors of length r.
  const detail::Columns& ucols = wide ? right : left;
  const detail::Columns& vcols = wide ? left : right;
  SvdResult out;
  out.u = Matrix(m.rows(), r);
  out.vt = Matrix(r, m.cols());
  out.singular_values.resize(r);
  for (std::size_t j = 0; j < r; ++j) {
    out.singular_values[j] = static_cast<float>(sorted_sigma[j]);
    for (std::size_t i = 0; i < m.rows(); ++i) out.u(i, j) = static_cast<float>(ucols[j][i]);
    for (std::size_t i = 0; i < m.cols(); ++i) out.vt(j, i) = static_cast<float>(vcols[j][i]);
  }
  return out;
}

/// D×k matrix whose columns are the right singular vectors of the k
/// largest singular values, in descending order.
inline Matrix top_k_right_singular(const SvdResult& svd, std::size_t k) {
  if (k < 1 || k > svd.rank()) {
    throw ParameterError("linalg", "k=" + std::to_string(k) + " outside [1, " +
                                       std::to_string(svd.rank()) + "]");
  }
  Matrix vk(svd.vt.cols(), k);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < svd.vt.cols(); ++i) vk(i, j) = svd.vt(j, i);
  return vk;
}

/// ‖m − m·B·Bᵀ‖_F for a D×k basis B.
template <typename T>
double projection_residual(const BasicMatrix<T>& m, const BasicMatrix<T>& basis) {
  const auto proj = matmul_nt(matmul(m, basis), basis);
  return frobenius_norm(subtract(m, proj));
}

}  // namespace shortlvlm

#endif  // SHORTLVLM_LINALG_HPP
